//! Paired comparison runs: several ablation settings trained on the same
//! dataset with the same seed and scored on the same held-out split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{Ablation, TrainConfig};
use crate::data::{generate_dataset, Dataset};
use crate::error::Result;
use crate::evaluation::{score, EvalSet, Extractor, Scores, EXTRACTOR_SEED};
use crate::training::Trainer;

/// Seed offset between a run's training data and its held-out split.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

/// The four main rows plus the two loss / module ablations.
pub fn protocol_rows() -> Vec<(&'static str, Ablation)> {
    let mut rows = Ablation::table().to_vec();
    rows.push((
        "Base+SDM w/o SDL",
        Ablation {
            sdl_off: true,
            ..Ablation::base_sdm()
        },
    ));
    rows.push((
        "Base+DNM*",
        Ablation {
            dnm_star: true,
            ..Ablation::base_dnm()
        },
    ));
    rows
}

/// Held-out evaluation split for a config: fresh synthetic specs drawn
/// with a seed disjoint from the training data.
pub fn held_out(cfg: &TrainConfig, n: usize) -> Dataset {
    generate_dataset(
        n,
        cfg.data_seed.wrapping_add(HELD_OUT_SEED_OFFSET),
        &cfg.model.resolutions,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunScores {
    pub name: String,
    pub seed: u64,
    /// Scores at the snapshot step, when one was requested.
    pub snapshot: Option<Scores>,
    pub last: Scores,
}

/// Train one configuration to `cfg.steps`, scoring at `snapshot_at` on the
/// way. With `out`, run artifacts are written there.
pub fn train_and_score(
    name: &str,
    cfg: TrainConfig,
    data: Dataset,
    held_out: &Dataset,
    snapshot_at: Option<u64>,
    out: Option<&Path>,
) -> Result<RunScores> {
    let steps = cfg.steps;
    let mut t = Trainer::new(cfg, data)?;
    let set = EvalSet::new(held_out, &t.vocab, t.config.model.t_max)?;
    let ex = Extractor::new(EXTRACTOR_SEED);
    let eval_seed = t.config.seed;
    let advance = |t: &mut Trainer, until: u64| -> Result<()> {
        match out {
            Some(dir) => t.run(dir, until).map(|_| ()),
            None => {
                while t.step < until {
                    t.step_once()?;
                }
                Ok(())
            }
        }
    };
    let snapshot = match snapshot_at.filter(|&s| s < steps) {
        Some(s) => {
            advance(&mut t, s)?;
            Some(score(&t.models, &t.store, &set, &ex, eval_seed)?)
        }
        None => None,
    };
    advance(&mut t, steps)?;
    Ok(RunScores {
        name: name.to_string(),
        seed: t.config.seed,
        snapshot,
        last: score(&t.models, &t.store, &set, &ex, eval_seed)?,
    })
}

pub const TABLE_HEADER: &str = "config,seed,toy_frechet,r_precision_lite";

pub fn table_csv(rows: &[RunScores]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.name, r.seed, r.last.toy_frechet, r.last.r_precision).unwrap();
    }
    s
}

/// The four main rows, sharing `base`'s data and seed; writes
/// `out/ablation.csv` and one run directory per row.
pub fn run_table(base: &TrainConfig, out: &Path, n_held_out: usize) -> Result<Vec<RunScores>> {
    fs::create_dir_all(out)?;
    let data = crate::training::training_data(base)?;
    let held = held_out(base, n_held_out);
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::table() {
        let cfg = TrainConfig {
            ablation,
            ..base.clone()
        };
        let dir = out.join(name.to_lowercase().replace(['+', '-'], "_"));
        rows.push(train_and_score(name, cfg, data.clone(), &held, None, Some(&dir))?);
        fs::write(out.join("ablation.csv"), table_csv(&rows))?;
    }
    Ok(rows)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
