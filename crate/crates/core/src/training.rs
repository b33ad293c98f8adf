//! Alternating discriminator / generator optimization.
//!
//! Each iteration runs the generator once with gradients enabled, updates
//! every discriminator against the detached fakes, then evaluates the
//! generator objective against the *updated* discriminators on the same
//! forward graph. All randomness of step `t` comes from ChaCha stream `t`
//! of the run seed and the batch order from per-epoch permutations, so a
//! resumed run needs no saved RNG state.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use drgan_autograd::{Adam, AdamConfig, Float, Group, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::data::{generate_dataset, Batch, Dataset};
use crate::dnm::Latent;
use crate::error::{Error, Result};
use crate::generator::GenOutput;
use crate::losses::{
    adv_discriminator_loss, adv_generator_loss, damsm_lite, l1_mean, sdl_h, sdl_q, sdm_loss, total_discriminator_loss,
    total_generator_loss, DiscStageLoss, GenStageLoss, DAMSM_TAU,
};
use crate::model::{standard_normal, Models};
use crate::nn::{Ctx, DISC, GEN, TEXT};
use crate::text_encoding::{CondSentence, TextFeatures, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    D,
    G,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::D => "D",
            Phase::G => "G",
        }
    }
}

/// One loss component at one step; `stage` is `None` for batch-wide terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub stage: Option<usize>,
    pub name: &'static str,
    pub value: f64,
}

pub const CSV_HEADER: &str = "step,phase,stage,name,value";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let stage = self.stage.map_or("all".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{}",
            self.step,
            self.phase.as_str(),
            stage,
            self.name,
            self.value
        )
    }
}

struct Recorder {
    step: u64,
    phase: Phase,
    records: Vec<LossRecord>,
}

impl Recorder {
    fn push<T: Float>(&mut self, stage: Option<usize>, name: &'static str, v: &Var<'_, T>) {
        self.records.push(LossRecord {
            step: self.step,
            phase: self.phase,
            stage,
            name,
            value: v.item().as_f64(),
        });
    }

    fn check(&self, total: f64) -> Result<()> {
        if total.is_finite() {
            return Ok(());
        }
        let mut diag = format!("{} loss at step {}:", self.phase.as_str(), self.step);
        for r in &self.records {
            write!(diag, " {}", r.csv_row()).unwrap();
        }
        Err(Error::NonFinite(diag))
    }
}

/// Randomness consumed by one iteration.
pub struct StepNoise<T> {
    pub z: Tensor<T>,
    pub ca: Tensor<T>,
    pub d_fake: Vec<Tensor<T>>,
    pub d_real: Vec<Tensor<T>>,
    pub g_fake: Vec<Tensor<T>>,
}

impl<T: Float> StepNoise<T> {
    pub fn draw(seed: u64, step: u64, cfg: &ModelConfig, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step + 1);
        let n = cfg.num_stages();
        let lat = [batch, cfg.vae_latent];
        Self {
            z: standard_normal(&mut rng, &[batch, cfg.z_dim]),
            ca: standard_normal(&mut rng, &[batch, cfg.ca_dim]),
            d_fake: (0..n).map(|_| standard_normal(&mut rng, &lat)).collect(),
            d_real: (0..n).map(|_| standard_normal(&mut rng, &lat)).collect(),
            g_fake: (0..n).map(|_| standard_normal(&mut rng, &lat)).collect(),
        }
    }
}

const PERM_SALT: u64 = 0x5bd1_e995_9e37_79b9;

pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERM_SALT);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Dataset indices of batch `step`; batches run through one permutation
/// per epoch and may straddle an epoch boundary.
pub fn batch_indices(seed: u64, step: u64, n: usize, b: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b);
    let mut perm: Option<(u64, Vec<usize>)> = None;
    for k in 0..b as u64 {
        let global = step * b as u64 + k;
        let (epoch, pos) = (global / n as u64, (global % n as u64) as usize);
        if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            perm = Some((epoch, epoch_permutation(seed, epoch, n)));
        }
        out.push(perm.as_ref().unwrap().1[pos]);
    }
    out
}

/// Loss weights after ablation switches are applied.
pub fn effective_weights(cfg: &TrainConfig) -> LossWeights {
    let mut w = cfg.weights;
    if cfg.ablation.sdl_off {
        w.lambda1 = 0.0;
        w.lambda2 = 0.0;
    }
    if cfg.ablation.lambda3_zero {
        w.lambda3 = 0.0;
    }
    w
}

fn latent<'a, T>(cfg: &TrainConfig, eps: &'a Tensor<T>) -> Latent<'a, T> {
    if cfg.ablation.vae_use_mean {
        Latent::Mean
    } else {
        Latent::Sample(eps)
    }
}

/// Generator-side forward graph of one iteration.
pub struct GenPass<'t, T: Float> {
    pub text: TextFeatures<'t, T>,
    pub cond: CondSentence<'t, T>,
    pub out: GenOutput<'t, T>,
    pub reals: Vec<Var<'t, T>>,
}

pub fn generator_pass<'t, T: Float>(
    models: &Models,
    cx: Ctx<'t, '_, T>,
    batch: &Batch<T>,
    noise: &StepNoise<T>,
) -> Result<GenPass<'t, T>> {
    let reals: Vec<Var<'t, T>> = batch.images.iter().map(|t| cx.constant(t.clone())).collect();
    let text = models.text.encode(cx, &batch.captions)?;
    let cond = models.ca.forward(cx, &text.sentence, noise.ca.clone())?;
    let real_in = models.ablation.use_sdm.then_some(&reals[..]);
    let out = models.gen.forward(cx, &text, &cond.s, noise.z.clone(), real_in)?;
    Ok(GenPass { text, cond, out, reals })
}

/// Σᵢ (L_Dᵢ + λ5·L_Dᵢᴰ) on detached fakes.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss<'t, T: Float>(
    models: &Models,
    cx: Ctx<'t, '_, T>,
    fakes: &[Tensor<T>],
    reals: &[Tensor<T>],
    s: &Tensor<T>,
    noise: &StepNoise<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Var<'t, T>, Vec<LossRecord>)> {
    let mut rec = Recorder {
        step,
        phase: Phase::D,
        records: Vec::new(),
    };
    let s = cx.constant(s.clone());
    let mut stages = Vec::new();
    for (i, dnm) in models.dnms.iter().enumerate() {
        let fake = cx.constant(fakes[i].clone());
        let real = cx.constant(reals[i].clone());
        let v_f = dnm.disc_encode(cx, &fake)?;
        let v_r = dnm.disc_encode(cx, &real)?;
        let adv = adv_discriminator_loss(
            &dnm.classify_logits(cx, &v_r, None),
            &dnm.classify_logits(cx, &v_r, Some(&s)),
            &dnm.classify_logits(cx, &v_f, None),
            &dnm.classify_logits(cx, &v_f, Some(&s)),
        );
        rec.push(Some(i), "adv", &adv);
        let dal = if dnm.vae.is_some() {
            let l = if dnm.is_autoencoder() {
                dnm.ae_losses(cx, &v_f, &fake, &v_r, &real, &s)?.0
            } else {
                let (lf, lr) = (latent(cfg, &noise.d_fake[i]), latent(cfg, &noise.d_real[i]));
                dnm.dal_discriminator_loss(cx, &v_f, &fake, &v_r, &real, &s, lf, lr)?
            };
            rec.push(Some(i), "dal", &l);
            Some(l)
        } else {
            None
        };
        stages.push(DiscStageLoss { adv, dal });
    }
    let total = total_discriminator_loss(&stages, &effective_weights(cfg));
    rec.push(None, "total", &total);
    rec.check(total.item().as_f64())?;
    Ok((total, rec.records))
}

/// One update of every discriminator-side parameter; the generator side is
/// not touched.
#[allow(clippy::too_many_arguments)]
pub fn train_discriminator_step<T: Float>(
    models: &Models,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    fakes: &[Tensor<T>],
    reals: &[Tensor<T>],
    s: &Tensor<T>,
    noise: &StepNoise<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<LossRecord>> {
    let tape = Tape::new(&[DISC]);
    let (loss, records) = discriminator_loss(models, Ctx::new(&tape, store), fakes, reals, s, noise, cfg, step)?;
    let grads = tape.backward(loss);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("discriminator gradients at step {step}")));
    }
    opt.step(store, &grads);
    Ok(records)
}

/// Σᵢ (L_Gᵢ + λ4·L_Gᵢᴰ + L_SDLᵢ) + α·L_DAMSM + CA and real-matching terms.
pub fn generator_loss<'t, T: Float>(
    models: &Models,
    cx: Ctx<'t, '_, T>,
    pass: &GenPass<'t, T>,
    keys: &[u64],
    noise: &StepNoise<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Var<'t, T>, Vec<LossRecord>)> {
    let mut rec = Recorder {
        step,
        phase: Phase::G,
        records: Vec::new(),
    };
    let w = effective_weights(cfg);
    let fl = &cfg.ablation;
    let s = pass.cond.s.detach();
    let mut stages = Vec::new();
    for (i, dnm) in models.dnms.iter().enumerate() {
        let fake = pass.out.images[i];
        let v = dnm.disc_encode(cx, &fake)?;
        let adv = adv_generator_loss(
            &dnm.classify_logits(cx, &v, None),
            &dnm.classify_logits(cx, &v, Some(&s)),
        );
        rec.push(Some(i), "adv", &adv);
        let dal = if dnm.vae.is_some() {
            let l = dnm.dal_generator_loss(cx, &v, &pass.reals[i], &s, latent(cfg, &noise.g_fake[i]))?;
            rec.push(Some(i), "dal", &l);
            Some(l)
        } else {
            None
        };
        let sdm = match i.checked_sub(1).and_then(|k| pass.out.stages[k].sdl.as_ref()) {
            Some(t) => {
                let star = if fl.sdl_stop_grad_real {
                    t.h_star.detach()
                } else {
                    t.h_star
                };
                let sh = sdl_h(&t.h_plus, &t.h_minus, &star, fl.sdl_use_std)?;
                let sq = sdl_q(&t.q_plus, &t.q_minus, &star, fl.sdl_use_std)?;
                let rirm = l1_mean(&t.recon, &t.real);
                let l = sdm_loss(&sh, &sq, &rirm, &w);
                rec.push(Some(i), "sdl_h", &sh);
                rec.push(Some(i), "sdl_q", &sq);
                rec.push(Some(i), "rirm", &rirm);
                rec.push(Some(i), "sdm", &l);
                Some(l)
            }
            None => None,
        };
        stages.push(GenStageLoss { adv, dal, sdm });
    }
    let last = models.cfg.num_stages() - 1;
    let emb_fake = models.matcher.embed(cx, &pass.out.images[last], true);
    let damsm = damsm_lite(&emb_fake, &pass.text.sentence.detach(), DAMSM_TAU, Some(keys))?;
    let emb_real = models.matcher.embed(cx, &pass.reals[last], false);
    let damsm_real = damsm_lite(&emb_real, &pass.text.sentence, DAMSM_TAU, Some(keys))?;
    rec.push(None, "damsm", &damsm);
    rec.push(None, "damsm_real", &damsm_real);
    rec.push(None, "kl_ca", &pass.cond.kl);
    let total = total_generator_loss(&stages, &damsm, &w)
        .add(&pass.cond.kl.scale(w.ca_kl))
        .add(&damsm_real.scale(w.damsm_real));
    rec.push(None, "total", &total);
    rec.check(total.item().as_f64())?;
    Ok((total, rec.records))
}

/// One update of every generator-side parameter on an existing forward
/// graph; discriminator parameters are read but never written.
#[allow(clippy::too_many_arguments)]
pub fn train_generator_step<'t, T: Float>(
    models: &Models,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    tape: &'t Tape<T>,
    pass: &GenPass<'t, T>,
    keys: &[u64],
    noise: &StepNoise<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<LossRecord>> {
    let (loss, records) = generator_loss(models, Ctx::new(tape, store), pass, keys, noise, cfg, step)?;
    let grads = tape.backward(loss);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("generator gradients at step {step}")));
    }
    opt.step(store, &grads);
    Ok(records)
}

/// Training data for a config: the directory it names, or a freshly
/// generated synthetic set.
pub fn training_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => Dataset::load(dir, &cfg.model.resolutions),
        None => Ok(generate_dataset(cfg.n_train, cfg.data_seed, &cfg.model.resolutions)),
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub store: ParamStore<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub vocab: Vocab,
    pub data: Dataset,
    /// Iterations completed.
    pub step: u64,
}

impl Trainer {
    pub fn new(mut config: TrainConfig, data: Dataset) -> Result<Self> {
        let vocab = data.vocab();
        config.model.vocab_size = vocab.len();
        config.validate()?;
        if data.resolutions != config.model.resolutions {
            return Err(Error::Config(format!(
                "dataset resolutions {:?} differ from model {:?}",
                data.resolutions, config.model.resolutions
            )));
        }
        if data.is_empty() {
            return Err(Error::TooFewSamples { got: 0, need: 1 });
        }
        let mut store = ParamStore::new();
        let models = Models::new(&mut store, &config.model, &config.ablation, config.seed);
        let adam = AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            ..Default::default()
        };
        let g_groups = Self::generator_groups(&config);
        Ok(Self {
            opt_g: Adam::new(adam, &g_groups),
            opt_d: Adam::new(adam, &[DISC]),
            config,
            models,
            store,
            vocab,
            data,
            step: 0,
        })
    }

    fn generator_groups(config: &TrainConfig) -> Vec<Group> {
        if config.ablation.freeze_text_encoder {
            vec![GEN]
        } else {
            vec![GEN, TEXT]
        }
    }

    pub fn batch(&self, step: u64) -> Result<Batch<f32>> {
        let idx = batch_indices(self.config.seed, step, self.data.len(), self.config.batch_size);
        self.data.load_batch(&idx, &self.vocab, self.config.model.t_max)
    }

    /// One D step followed by one G step.
    pub fn step_once(&mut self) -> Result<Vec<LossRecord>> {
        let step = self.step;
        let cfg = &self.config;
        let batch = self.batch(step)?;
        let noise = StepNoise::draw(cfg.seed, step, &cfg.model, cfg.batch_size);
        let tape = Tape::new(&Self::generator_groups(cfg));
        let pass = generator_pass(&self.models, Ctx::new(&tape, &self.store), &batch, &noise)?;
        let fakes: Vec<Tensor<f32>> = pass.out.images.iter().map(|v| v.value().as_ref().clone()).collect();
        let s = pass.cond.s.value().as_ref().clone();
        let mut records = train_discriminator_step(
            &self.models,
            &mut self.store,
            &mut self.opt_d,
            &fakes,
            &batch.images,
            &s,
            &noise,
            cfg,
            step,
        )?;
        records.extend(train_generator_step(
            &self.models,
            &mut self.store,
            &mut self.opt_g,
            &tape,
            &pass,
            &batch.keys,
            &noise,
            cfg,
            step,
        )?);
        self.step += 1;
        Ok(records)
    }

    /// Train until `self.step == until`, appending to `out/losses.csv` and
    /// writing sample grids and checkpoints as configured.
    pub fn run(&mut self, out: &Path, until: u64) -> Result<PathBuf> {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.toml"), self.config.to_toml())?;
        fs::write(out.join("vocab.tsv"), self.vocab.to_tsv())?;
        let csv_path = out.join("losses.csv");
        let mut csv = if self.step == 0 {
            let mut f = fs::File::create(&csv_path)?;
            writeln!(f, "{CSV_HEADER}")?;
            f
        } else {
            fs::OpenOptions::new().append(true).open(&csv_path)?
        };
        while self.step < until {
            let records = self.step_once()?;
            let mut rows = String::new();
            for r in &records {
                writeln!(rows, "{}", r.csv_row()).unwrap();
            }
            csv.write_all(rows.as_bytes())?;
            let k = self.config.sample_every;
            if k > 0 && self.step.is_multiple_of(k) {
                let dir = out.join("samples");
                fs::create_dir_all(&dir)?;
                let captions: Vec<String> = self.data.samples.iter().take(8).map(|s| s.caption.clone()).collect();
                let grid = crate::evaluation::sample_grid(
                    &self.models,
                    &self.store,
                    &self.vocab,
                    &captions,
                    self.config.seed,
                )?;
                grid.save(&dir.join(format!("step_{:06}.png", self.step)))?;
            }
            let c = self.config.checkpoint_every;
            if c > 0 && self.step.is_multiple_of(c) && self.step < until {
                self.save_checkpoint(&out.join(format!("checkpoint_{:06}.safetensors", self.step)))?;
            }
        }
        csv.flush()?;
        let path = out.join("checkpoint.safetensors");
        self.save_checkpoint(&path)?;
        Ok(path)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint and the dataset it trains on.
    pub fn resume(path: &Path, data: Dataset) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut t = Trainer::new(ck.config.clone(), data)?;
        if t.vocab != ck.vocab {
            return Err(Error::Config("dataset vocabulary differs from the checkpoint's".into()));
        }
        t.store = ck.store;
        t.step = ck.step;
        t.opt_g.restore(
            ck.adam_g.0,
            ck.adam_g
                .1
                .into_iter()
                .map(|(n, m, v)| (t.store.find(&n).unwrap(), m, v)),
        );
        t.opt_d.restore(
            ck.adam_d.0,
            ck.adam_d
                .1
                .into_iter()
                .map(|(n, m, v)| (t.store.find(&n).unwrap(), m, v)),
        );
        Ok(t)
    }
}

const FORMAT: &str = "drgan-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    adam_g_steps: u64,
    adam_d_steps: u64,
    config: TrainConfig,
    vocab: Vec<String>,
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for id in t.store.ids() {
        let v = t.store.get(id);
        blobs.push((format!("param/{}", t.store.name(id)), v.shape().to_vec(), f32_bytes(v)));
    }
    for (tag, opt) in [("adam_g", &t.opt_g), ("adam_d", &t.opt_d)] {
        for (id, m, v) in opt.moments() {
            let name = t.store.name(id);
            blobs.push((format!("{tag}/m/{name}"), m.shape().to_vec(), f32_bytes(m)));
            blobs.push((format!("{tag}/v/{name}"), v.shape().to_vec(), f32_bytes(v)));
        }
    }
    let views = blobs
        .iter()
        .map(|(n, s, b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::format("checkpoint", e))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: FORMAT.into(),
        step: t.step,
        adam_g_steps: t.opt_g.steps_taken(),
        adam_d_steps: t.opt_d.steps_taken(),
        config: t.config.clone(),
        vocab: t.vocab.tokens().to_vec(),
    };
    let meta = HashMap::from([(
        "manifest".to_string(),
        serde_json::to_string(&manifest).map_err(|e| Error::format("checkpoint", e))?,
    )]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::format("checkpoint", e))
}

type MomentList = Vec<(String, Tensor<f32>, Tensor<f32>)>;
type Moments = (u64, MomentList);

/// Everything stored in a checkpoint file.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub models: Models,
    pub store: ParamStore<f32>,
    pub step: u64,
    adam_g: Moments,
    adam_d: Moments,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |e: &dyn std::fmt::Display| Error::format("checkpoint", e.to_string());
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(&e))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("manifest"))
            .ok_or_else(|| bad(&"no manifest"))?;
        let manifest: Manifest = serde_json::from_str(text).map_err(|e| bad(&e))?;
        if manifest.format != FORMAT {
            return Err(bad(&format!("unsupported format {}", manifest.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(&e))?;
        let read = |name: &str| -> Result<Tensor<f32>> {
            let v = st.tensor(name).map_err(|e| bad(&format!("{name}: {e}")))?;
            if v.dtype() != Dtype::F32 {
                return Err(bad(&format!("{name} is not f32")));
            }
            let data = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::new(v.shape(), data))
        };
        let config = manifest.config;
        let mut store = ParamStore::new();
        let models = Models::new(&mut store, &config.model, &config.ablation, config.seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = read(&format!("param/{}", store.name(id)))?;
            if t.shape() != store.get(id).shape() {
                return Err(bad(&format!("shape of {} changed", store.name(id))));
            }
            store.set(id, t);
        }
        let moments = |tag: &str| -> Result<MomentList> {
            let prefix = format!("{tag}/m/");
            let mut names: Vec<String> = st
                .names()
                .into_iter()
                .filter_map(|n| n.strip_prefix(&prefix).map(str::to_string))
                .collect();
            names.sort();
            names
                .into_iter()
                .map(|n| {
                    if store.find(&n).is_none() {
                        return Err(bad(&format!("moment for unknown parameter {n}")));
                    }
                    Ok((
                        n.clone(),
                        read(&format!("{tag}/m/{n}"))?,
                        read(&format!("{tag}/v/{n}"))?,
                    ))
                })
                .collect()
        };
        let vocab_tsv: String = manifest
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect();
        Ok(Self {
            vocab: Vocab::from_tsv(&vocab_tsv)?,
            adam_g: (manifest.adam_g_steps, moments("adam_g")?),
            adam_d: (manifest.adam_d_steps, moments("adam_d")?),
            step: manifest.step,
            config,
            models,
            store,
        })
    }
}
