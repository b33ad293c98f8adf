//! The full set of networks for one configuration, and inference.

use drgan_autograd::{Float, ParamId, ParamStore, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Ablation, ModelConfig};
use crate::dnm::{Dnm, DnmConfig};
use crate::error::Result;
use crate::generator::Generator;
use crate::losses::Matcher;
use crate::nn::{Builder, Ctx, DISC, GEN, TEXT};
use crate::text_encoding::{CondAug, TextEncoder};

#[derive(Clone, Debug)]
pub struct Models {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub text: TextEncoder,
    pub ca: CondAug,
    pub gen: Generator,
    pub matcher: Matcher,
    /// One discriminator per stage.
    pub dnms: Vec<Dnm>,
}

impl Models {
    /// Registers every parameter in `store`. Initial values depend only on
    /// `(seed, parameter name)`.
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, ablation: &Ablation, seed: u64) -> Self {
        let text = TextEncoder::new(&mut Builder::new(store, seed, TEXT), cfg.vocab_size, cfg.text_dim);
        let mut g = Builder::new(store, seed, GEN);
        let ca = CondAug::new(&mut g, cfg.text_dim, cfg.ca_dim);
        let gen = Generator::new(&mut g, cfg, ablation.use_sdm);
        let matcher = Matcher::new(&mut g, *cfg.resolutions.last().unwrap(), cfg.text_dim);
        let mut d = Builder::new(store, seed, DISC);
        let dnms = cfg
            .resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let dc = DnmConfig {
                    resolution: r,
                    channels: cfg.disc_channels,
                    embed_dim: cfg.embed_dim,
                    latent: cfg.vae_latent,
                    cond_dim: cfg.ca_dim,
                };
                Dnm::new(&mut d, &format!("dnm{i}"), dc, ablation.use_dnm, ablation.dnm_star)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            ablation: *ablation,
            text,
            ca,
            gen,
            matcher,
            dnms,
        }
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        let mut p = self.text.params();
        p.extend(self.ca.params());
        p.extend(self.gen.params());
        p.extend(self.matcher.params());
        p
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.dnms.iter().flat_map(|d| d.params()).collect()
    }
}

/// Generated images for a list of captions plus attention weights.
pub struct Generated<T> {
    /// `[B, 3, r, r]` per stage.
    pub images: Vec<Tensor<T>>,
    /// `[B, N, T]` per refinement stage.
    pub thetas: Vec<Tensor<T>>,
    pub lengths: Vec<usize>,
}

pub fn standard_normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data)
}

/// Test-mode cascade: no real image is consumed anywhere.
pub fn generate<T: Float, R: Rng + ?Sized>(
    models: &Models,
    store: &ParamStore<T>,
    captions: &[crate::text_encoding::Caption],
    rng: &mut R,
) -> Result<Generated<T>> {
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, store);
    let b = captions.len();
    let z = standard_normal(rng, &[b, models.cfg.z_dim]);
    let eps = standard_normal(rng, &[b, models.cfg.ca_dim]);
    let text = models.text.encode(cx, captions)?;
    let cond = models.ca.forward(cx, &text.sentence, eps)?;
    let out = models.gen.forward(cx, &text, &cond.s, z, None)?;
    Ok(Generated {
        images: out.images.iter().map(|v| v.value().as_ref().clone()).collect(),
        thetas: out.thetas.iter().map(|v| v.value().as_ref().clone()).collect(),
        lengths: text.lengths,
    })
}
