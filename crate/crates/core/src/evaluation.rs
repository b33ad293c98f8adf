//! Desk-scale quality metrics and image / attention grids.
//!
//! `toy_frechet` is the usual Fréchet distance between Gaussian fits, but
//! over features of a small frozen random conv net instead of Inception.

use std::fs;
use std::path::{Path, PathBuf};

use drgan_autograd::{Float, ParamStore, Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::data::{to_chw, to_rgb, write_png, Dataset};
use crate::error::{Error, Result};
use crate::model::{generate, Models};
use crate::nn::{act, Builder, Conv, Ctx, GEN};
use crate::text_encoding::{tokenize, Caption, Vocab};

pub const MIN_FRECHET_SAMPLES: usize = 64;
pub const EXTRACTOR_SEED: u64 = 0x7f4a_7c15;
pub const DISTRACTORS: usize = 9;
const CHUNK: usize = 64;

/// Frozen random convolutional embedder.
pub struct Extractor {
    store: ParamStore<f64>,
    convs: Vec<Conv>,
    pub seed: u64,
}

impl Extractor {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed, GEN);
        let convs = vec![
            b.conv("c0", 3, 16, 3, 2),
            b.conv("c1", 16, 32, 3, 2),
            b.conv("c2", 32, 32, 3, 2),
        ];
        Self { store, convs, seed }
    }

    pub fn dim(&self) -> usize {
        128
    }

    /// Hex SHA-256 of every weight, in registration order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in self.store.ids() {
            h.update(self.store.name(id).as_bytes());
            for x in self.store.get(id).data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One feature row per image: per-channel spatial mean and standard
    /// deviation of the last two conv layers.
    pub fn features(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 8 {
            return Err(Error::Shape(format!(
                "extractor expects [N, 3, r, r] with r ≥ 8, got {s:?}"
            )));
        }
        let mut out = Vec::with_capacity(s[0]);
        for start in (0..s[0]).step_by(CHUNK) {
            let end = (start + CHUNK).min(s[0]);
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &self.store);
            let x = cx.constant(images.slice0(start, end));
            let h1 = act(&self.convs[1].forward(cx, &act(&self.convs[0].forward(cx, &x))));
            let h2 = act(&self.convs[2].forward(cx, &h1));
            let [m1, s1] = mean_std_pool(&h1);
            let [m2, s2] = mean_std_pool(&h2);
            let f = drgan_autograd::Var::concat(&[m1, s1, m2, s2], 1);
            let v = f.value();
            out.extend(v.data().chunks(self.dim()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// `[B, C, H, W]` → per-channel spatial mean and standard deviation, `[B, C]` each.
fn mean_std_pool<'t>(h: &drgan_autograd::Var<'t, f64>) -> [drgan_autograd::Var<'t, f64>; 2] {
    let s = h.shape();
    let mean = h.mean_axes_keepdim(&[2, 3]);
    let std = h.sub(&mean).sqr().mean_axes(&[2, 3]).add_scalar(1e-12).sqrt();
    [mean.reshape(&[s[0], s[1]]), std]
}

/// Per-dimension mean and variance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatsReport {
    pub real: FeatureStats,
    pub fake: FeatureStats,
    pub frechet: f64,
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from round-off are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, computed through the
/// symmetric form `(√Σ₁ Σ₂ √Σ₁)^{1/2}`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for n in [a.len(), b.len()] {
        if n < 2 {
            return Err(Error::TooFewSamples { got: n, need: 2 });
        }
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    if m1.len() != m2.len() {
        return Err(Error::Shape(format!("feature dims {} and {}", m1.len(), m2.len())));
    }
    let r1 = sqrtm_psd(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn stats(feats: &[Vec<f64>]) -> FeatureStats {
    let (mean, cov) = gaussian_fit(feats);
    FeatureStats {
        mean: mean.iter().copied().collect(),
        var: cov.diagonal().iter().copied().collect(),
    }
}

pub fn feature_stats(real: &Tensor<f64>, fake: &Tensor<f64>, ex: &Extractor) -> Result<FeatureStatsReport> {
    for n in [real.dim(0), fake.dim(0)] {
        if n < MIN_FRECHET_SAMPLES {
            return Err(Error::TooFewSamples {
                got: n,
                need: MIN_FRECHET_SAMPLES,
            });
        }
    }
    let fr = ex.features(real)?;
    let ff = ex.features(fake)?;
    Ok(FeatureStatsReport {
        frechet: frechet_distance(&fr, &ff)?,
        real: stats(&fr),
        fake: stats(&ff),
    })
}

/// Fréchet distance between extractor features of two image sets of at
/// least 64 images each.
pub fn toy_frechet(real: &Tensor<f64>, fake: &Tensor<f64>, ex: &Extractor) -> Result<f64> {
    Ok(feature_stats(real, fake, ex)?.frechet)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Fraction of images whose own caption scores strictly higher than each of
/// [`DISTRACTORS`] random captions with different text.
pub fn r_precision_lite(images: &[Vec<f64>], sentences: &[Vec<f64>], texts: &[String], seed: u64) -> f64 {
    let n = images.len();
    if n == 0 {
        return 0.0;
    }
    assert!(sentences.len() == n && texts.len() == n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for i in 0..n {
        let pool: Vec<usize> = (0..n).filter(|&j| texts[j] != texts[i]).collect();
        let k = DISTRACTORS.min(pool.len());
        let own = cosine(&images[i], &sentences[i]);
        let beaten = index::sample(&mut rng, pool.len(), k)
            .iter()
            .all(|p| own > cosine(&images[i], &sentences[pool[p]]));
        if beaten {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Smallest success fraction `k/n` with `P(X ≤ k) ≥ level` for
/// `X ~ Binomial(n, p)`.
pub fn chance_upper_bound(n: usize, p: f64, level: f64) -> f64 {
    let dist = Binomial::new(p, n as u64).expect("valid binomial parameters");
    let k = (0..=n as u64).find(|&k| dist.cdf(k) >= level).unwrap_or(n as u64);
    k as f64 / n as f64
}

/// Captions plus final-stage real images of an evaluation split.
pub struct EvalSet {
    pub captions: Vec<Caption>,
    pub texts: Vec<String>,
    /// `[N, 3, r, r]`.
    pub real: Tensor<f64>,
}

impl EvalSet {
    pub fn new(data: &Dataset, vocab: &Vocab, t_max: usize) -> Result<Self> {
        let last = data.resolutions.len() - 1;
        let r = data.resolutions[last];
        let mut real = Vec::with_capacity(data.len() * 3 * r * r);
        let mut captions = Vec::new();
        for s in &data.samples {
            real.extend(to_chw::<f64>(&s.images[last], r));
            captions.push(tokenize(&s.caption, vocab, t_max)?);
        }
        Ok(Self {
            texts: data.samples.iter().map(|s| s.caption.clone()).collect(),
            real: Tensor::new(&[data.len(), 3, r, r], real),
            captions,
        })
    }
}

/// Final-stage images for every caption, generated in chunks from one RNG.
pub fn generate_final<T: Float>(
    models: &Models,
    store: &ParamStore<T>,
    captions: &[Caption],
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for chunk in captions.chunks(CHUNK) {
        let g = generate(models, store, chunk, &mut rng)?;
        parts.push(g.images.last().unwrap().clone());
    }
    Ok(Tensor::cat0(&parts.iter().collect::<Vec<_>>()))
}

pub fn embed_images<T: Float>(models: &Models, store: &ParamStore<T>, images: &Tensor<T>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for start in (0..images.dim(0)).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.dim(0));
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store);
        let e = models.matcher.embed(cx, &cx.constant(images.slice0(start, end)), true);
        let d = e.shape()[1];
        out.extend(e.value().to_f64_vec().chunks(d).map(<[f64]>::to_vec));
    }
    out
}

pub fn embed_captions<T: Float>(models: &Models, store: &ParamStore<T>, captions: &[Caption]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for chunk in captions.chunks(CHUNK) {
        let tape = Tape::inference();
        let s = models.text.encode(Ctx::new(&tape, store), chunk)?.sentence;
        let d = s.shape()[1];
        out.extend(s.value().to_f64_vec().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub toy_frechet: f64,
    pub r_precision: f64,
}

/// Both metrics for one model on one evaluation split.
pub fn score<T: Float>(
    models: &Models,
    store: &ParamStore<T>,
    set: &EvalSet,
    ex: &Extractor,
    seed: u64,
) -> Result<Scores> {
    let fake = generate_final(models, store, &set.captions, seed)?;
    let toy_frechet = toy_frechet(&set.real, &fake.cast(), ex)?;
    let img = embed_images(models, store, &fake);
    let sent = embed_captions(models, store, &set.captions)?;
    Ok(Scores {
        toy_frechet,
        r_precision: r_precision_lite(&img, &sent, &set.texts, seed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub real: usize,
    pub fake: usize,
}

/// One line of the evaluation JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub extractor_fingerprint: String,
    pub sample_counts: SampleCounts,
}

pub fn reports(scores: &Scores, set: &EvalSet, ex: &Extractor, seed: u64) -> Vec<MetricReport> {
    let n = set.captions.len();
    let counts = SampleCounts { real: n, fake: n };
    [
        ("toy_frechet", scores.toy_frechet),
        ("r_precision_lite", scores.r_precision),
    ]
    .into_iter()
    .map(|(metric, value)| MetricReport {
        metric: metric.into(),
        value,
        seed,
        extractor_fingerprint: ex.fingerprint(),
        sample_counts: counts.clone(),
    })
    .collect()
}

/// RGB canvas of square tiles.
pub struct ImageGrid {
    pub tile: usize,
    pub cols: usize,
    pub rows: usize,
    pub rgb: Vec<u8>,
}

impl ImageGrid {
    pub fn new(tile: usize, cols: usize, rows: usize) -> Self {
        Self {
            tile,
            cols,
            rows,
            rgb: vec![0; tile * cols * tile * rows * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.tile * self.cols
    }

    /// Nearest-neighbour upscale of an `r×r` RGB tile into cell `(row, col)`.
    pub fn put(&mut self, row: usize, col: usize, rgb: &[u8], r: usize) {
        let f = self.tile / r;
        let w = self.width();
        for y in 0..self.tile {
            for x in 0..self.tile {
                let src = ((y / f).min(r - 1) * r + (x / f).min(r - 1)) * 3;
                let dst = ((row * self.tile + y) * w + col * self.tile + x) * 3;
                self.rgb[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_png(path, &self.rgb, self.width(), self.tile * self.rows)
    }
}

/// Attention of one word over a stage grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Token position in the caption.
    pub position: usize,
    pub side: usize,
    /// θ column for this word in row-major grid order.
    pub raw: Vec<f64>,
    /// `raw` min-max normalized to `[0, 1]`.
    pub values: Vec<f64>,
}

/// The `k` words of sample `b` with the most total attention mass in
/// `theta: [B, N, T]`; ties go to the earlier word.
pub fn top_word_heatmaps<T: Float>(theta: &Tensor<T>, b: usize, length: usize, k: usize) -> Vec<Heatmap> {
    let (n, t) = (theta.dim(1), theta.dim(2));
    let side = (n as f64).sqrt().round() as usize;
    assert_eq!(side * side, n, "attention grid is not square");
    let at = |i: usize, w: usize| theta.data()[(b * n + i) * t + w].as_f64();
    let mut order: Vec<(usize, f64)> = (0..length.min(t))
        .map(|w| (w, (0..n).map(|i| at(i, w)).sum()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .take(k)
        .map(|(w, _)| {
            let raw: Vec<f64> = (0..n).map(|i| at(i, w)).collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let values = raw
                .iter()
                .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
                .collect();
            Heatmap {
                position: w,
                side,
                raw,
                values,
            }
        })
        .collect()
}

fn gray(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| [(v * 255.0).round().clamp(0.0, 255.0) as u8; 3])
        .collect()
}

fn tile_rgb<T: Float>(images: &Tensor<T>, b: usize) -> (Vec<u8>, usize) {
    let r = images.dim(2);
    let per = 3 * r * r;
    (to_rgb(&images.data()[b * per..(b + 1) * per], r), r)
}

/// Training-time preview: one row per caption, one column per stage.
pub fn sample_grid<T: Float>(
    models: &Models,
    store: &ParamStore<T>,
    vocab: &Vocab,
    captions: &[String],
    seed: u64,
) -> Result<ImageGrid> {
    let caps = captions
        .iter()
        .map(|c| tokenize(c, vocab, models.cfg.t_max))
        .collect::<Result<Vec<_>>>()?;
    let g = generate(models, store, &caps, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tile = *models.cfg.resolutions.last().unwrap();
    let mut grid = ImageGrid::new(tile, g.images.len(), caps.len());
    for b in 0..caps.len() {
        for (s, img) in g.images.iter().enumerate() {
            let (rgb, r) = tile_rgb(img, b);
            grid.put(b, s, &rgb, r);
        }
    }
    Ok(grid)
}

/// Per caption, `grid_NNN.png`: the stage images on the first row, then
/// the top-3 word heatmaps of each refinement stage; `grids.tsv` names the
/// words. Returns the grid paths.
pub fn emit_grids<T: Float>(
    models: &Models,
    store: &ParamStore<T>,
    vocab: &Vocab,
    captions: &[String],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let caps = captions
        .iter()
        .map(|c| tokenize(c, vocab, models.cfg.t_max))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = generate(models, store, &caps, &mut rng)?;
    let tile = *models.cfg.resolutions.last().unwrap();
    let n = g.images.len();
    let mut index = String::from("file\tcaption\tstage\twords\n");
    let mut paths = Vec::new();
    for (b, cap) in caps.iter().enumerate() {
        let mut grid = ImageGrid::new(tile, n.max(3), n);
        for (s, img) in g.images.iter().enumerate() {
            let (rgb, r) = tile_rgb(img, b);
            grid.put(0, s, &rgb, r);
        }
        let name = format!("grid_{b:03}.png");
        for (k, theta) in g.thetas.iter().enumerate() {
            let maps = top_word_heatmaps(theta, b, g.lengths[b], 3);
            for (c, m) in maps.iter().enumerate() {
                grid.put(k + 1, c, &gray(&m.values), m.side);
            }
            let words: Vec<&str> = maps.iter().map(|m| vocab.token(cap.tokens[m.position])).collect();
            index.push_str(&format!("{name}\t{}\t{}\t{}\n", cap.raw_text, k + 1, words.join(",")));
        }
        let path = out_dir.join(&name);
        grid.save(&path)?;
        paths.push(path);
    }
    fs::write(out_dir.join("grids.tsv"), index)?;
    Ok(paths)
}
