//! Command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{run_table, table_csv};
use crate::config::TrainConfig;
use crate::data::{generate_dataset, to_rgb, write_png, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_grids, feature_stats, generate_final, reports, score, EvalSet, Extractor, EXTRACTOR_SEED,
};
use crate::model::generate;
use crate::text_encoding::tokenize;
use crate::training::{training_data, Checkpoint, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "drgan",
    version,
    about = "Text-to-image GAN with semantic disentangling and distribution normalization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a captioned synthetic-shapes dataset.
    MakeData {
        /// Number of samples.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (manifest.tsv, vocab.tsv, PNGs per stage).
        #[arg(long)]
        out: PathBuf,
        /// Stage resolutions.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        resolutions: Vec<usize>,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory: losses.csv, samples/, checkpoint.safetensors.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images (and attention grids) for captions.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Caption text; repeat for several.
        #[arg(long, required = true)]
        caption: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint against a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by `make-data` (at least 64 samples).
        #[arg(long)]
        data: PathBuf,
        /// Output directory: report.json, feature_stats.json, grids/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of captions to draw attention grids for.
        #[arg(long, default_value_t = 8)]
        grids: usize,
    },
    /// Train and score Base, Base+SDM, Base+DNM and DR-GAN on shared data.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory: ablation.csv plus one run directory per row.
        #[arg(long)]
        out: PathBuf,
        /// Size of the held-out scoring split.
        #[arg(long, default_value_t = 500)]
        n_eval: usize,
    },
}

/// A config file plus per-key overrides; every flag names a config key.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML file with any subset of the config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Dataset directory; without it a synthetic set is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub sample_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub lambda5: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ca_kl: Option<f64>,
    #[arg(long)]
    pub damsm_real: Option<f64>,
    /// Semantic disentangling modules in the refinement stages.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_sdm: Option<bool>,
    /// VAE branch in the discriminators.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_dnm: Option<bool>,
    /// Replace the VAE branch by a plain autoencoder.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dnm_star: Option<bool>,
    /// Drop the key / non-key statistics terms of the disentangling loss.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sdl_off: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lambda3_zero: Option<bool>,
    /// Stop gradients through the real-image features in the disentangling loss.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sdl_stop_grad_real: Option<bool>,
    /// Compare standard deviations instead of variances.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sdl_use_std: Option<bool>,
    /// Keep the text encoder at its initial weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_text_encoder: Option<bool>,
    /// Decode the posterior mean instead of a sample.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub vae_use_mean: Option<bool>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub disc_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$($path).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed, steps => steps, batch_size => batch_size, lr => lr,
            beta1 => beta1, beta2 => beta2, n_train => n_train, data_seed => data_seed,
            sample_every => sample_every, checkpoint_every => checkpoint_every,
            lambda1 => weights.lambda1, lambda2 => weights.lambda2, lambda3 => weights.lambda3,
            lambda4 => weights.lambda4, lambda5 => weights.lambda5, alpha => weights.alpha,
            ca_kl => weights.ca_kl, damsm_real => weights.damsm_real,
            use_sdm => ablation.use_sdm, use_dnm => ablation.use_dnm, dnm_star => ablation.dnm_star,
            sdl_off => ablation.sdl_off, lambda3_zero => ablation.lambda3_zero,
            sdl_stop_grad_real => ablation.sdl_stop_grad_real, sdl_use_std => ablation.sdl_use_std,
            freeze_text_encoder => ablation.freeze_text_encoder, vae_use_mean => ablation.vae_use_mean,
            channels => model.channels, disc_channels => model.disc_channels,
            resolutions => model.resolutions,
        );
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::BatchTooSmall(_) => 1,
                Error::Format { what, .. } if what == "config" => 1,
                _ => 2,
            }
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData {
            n,
            seed,
            out,
            resolutions,
        } => {
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            generate_dataset(n, seed, &resolutions).save(&out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = config.resolve()?;
            let data = training_data(&cfg)?;
            let mut t = match resume {
                Some(ck) => {
                    let mut t = Trainer::resume(&ck, data)?;
                    t.config.steps = cfg.steps;
                    t
                }
                None => Trainer::new(cfg, data)?,
            };
            let steps = t.config.steps;
            let path = t.run(&out, steps)?;
            println!("trained {steps} steps; checkpoint {}", path.display());
        }
        Command::Generate {
            ckpt,
            caption,
            out,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            fs::create_dir_all(&out)?;
            let caps = caption
                .iter()
                .map(|c| tokenize(c, &ck.vocab, ck.config.model.t_max))
                .collect::<Result<Vec<_>>>()?;
            let g = generate(&ck.models, &ck.store, &caps, &mut ChaCha8Rng::seed_from_u64(seed))?;
            for (s, img) in g.images.iter().enumerate() {
                let r = img.dim(2);
                let per = 3 * r * r;
                for b in 0..caps.len() {
                    let rgb = to_rgb(&img.data()[b * per..(b + 1) * per], r);
                    write_png(&out.join(format!("sample_{b:03}_stage{s}.png")), &rgb, r, r)?;
                }
            }
            emit_grids(&ck.models, &ck.store, &ck.vocab, &caption, &out, seed)?;
            println!("wrote {} caption(s) to {}", caps.len(), out.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            seed,
            grids,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let data = Dataset::load(&data, &ck.config.model.resolutions)?;
            fs::create_dir_all(&out)?;
            let set = EvalSet::new(&data, &ck.vocab, ck.config.model.t_max)?;
            let ex = Extractor::new(EXTRACTOR_SEED);
            let scores = score(&ck.models, &ck.store, &set, &ex, seed)?;
            let fake = generate_final(&ck.models, &ck.store, &set.captions, seed)?;
            let stats = feature_stats(&set.real, &fake.cast(), &ex)?;
            let report = reports(&scores, &set, &ex, seed);
            write_json(&out.join("report.json"), &report)?;
            write_json(&out.join("feature_stats.json"), &stats)?;
            let caps: Vec<String> = set.texts.iter().take(grids).cloned().collect();
            emit_grids(&ck.models, &ck.store, &ck.vocab, &caps, &out.join("grids"), seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Ablate { config, out, n_eval } => {
            let cfg = config.resolve()?;
            let rows = run_table(&cfg, &out, n_eval)?;
            print!("{}", table_csv(&rows));
        }
    }
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
