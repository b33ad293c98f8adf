//! Disentangling, adversarial, matching and total objectives.
//!
//! Adversarial terms work on logits: `ln σ(x) = −SP(−x)` is finite for every
//! finite logit, so no clamping is needed on the training path. The
//! probability-space versions clamp their log arguments to `[1e-8, 1]`.

use drgan_autograd::{Float, ParamId, Tensor, Var};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::nn::{act, Builder, Conv, Ctx, Linear};

pub const LOG_FLOOR: f64 = 1e-8;
pub const DAMSM_TAU: f64 = 0.1;

/// `ln(1 + eˣ)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `½ Σ (μ² + σ² − 1 − 2 ln σ)` with `σ² = exp(logvar)`, summed over the
/// last axis and averaged over the batch.
pub fn kl_standard_normal<'t, T: Float>(mu: &Var<'t, T>, logvar: &Var<'t, T>) -> Var<'t, T> {
    let b = mu.shape()[0];
    mu.sqr()
        .add(&logvar.exp())
        .sub(logvar)
        .add_scalar(-1.0)
        .sum_all()
        .scale(0.5 / b as f64)
}

/// Mean absolute error over all elements.
pub fn l1_mean<'t, T: Float>(a: &Var<'t, T>, b: &Var<'t, T>) -> Var<'t, T> {
    a.sub(b).abs().mean_all()
}

/// Per-channel mean and population variance, pooled over the batch and
/// every axis after the channel axis.
pub struct BatchStats<'t, T: Float> {
    pub mean: Var<'t, T>,
    pub var: Var<'t, T>,
}

pub fn batch_stats<'t, T: Float>(f: &Var<'t, T>) -> Result<BatchStats<'t, T>> {
    let shape = f.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batch_stats needs [B, C, ..], got {shape:?}")));
    }
    if shape[0] < 2 {
        return Err(Error::BatchTooSmall(shape[0]));
    }
    let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
    let mean_k = f.mean_axes_keepdim(&axes);
    let var = f.sub(&mean_k).sqr().mean_axes(&axes);
    Ok(BatchStats {
        mean: mean_k.reshape(&[shape[1]]),
        var,
    })
}

/// Semantic disentangling loss of a key/non-key pair against real features:
///
/// `SP(‖μ⁺−μ*‖ − ‖μ⁻−μ*‖) + SP(‖σ⁺−σ*‖ − ‖σ⁻−σ*‖)`
///
/// with `σ` the per-channel variance, or the standard deviation when
/// `use_std` is set. Only channel counts need to agree; spatial sizes may
/// differ since statistics pool over space.
pub fn sdl<'t, T: Float>(
    plus: &Var<'t, T>,
    minus: &Var<'t, T>,
    star: &Var<'t, T>,
    use_std: bool,
) -> Result<Var<'t, T>> {
    let (sp, sm, ss) = (plus.shape(), minus.shape(), star.shape());
    if sp != sm || sp.len() < 2 || ss.len() != sp.len() || ss[1] != sp[1] {
        return Err(Error::Shape(format!("sdl inputs {sp:?}, {sm:?}, {ss:?}")));
    }
    let p = batch_stats(plus)?;
    let m = batch_stats(minus)?;
    let s = batch_stats(star)?;
    let spread = |st: &BatchStats<'t, T>| {
        if use_std {
            st.var.add_scalar(1e-8).sqrt()
        } else {
            st.var
        }
    };
    let mean_term = p.mean.sub(&s.mean).l2_norm().sub(&m.mean.sub(&s.mean).l2_norm());
    let (sp_, sm_, ss_) = (spread(&p), spread(&m), spread(&s));
    let spread_term = sp_.sub(&ss_).l2_norm().sub(&sm_.sub(&ss_).l2_norm());
    Ok(mean_term.softplus().add(&spread_term.softplus()))
}

/// SDL on the gated previous hidden feature.
pub fn sdl_h<'t, T: Float>(
    h_plus: &Var<'t, T>,
    h_minus: &Var<'t, T>,
    h_star: &Var<'t, T>,
    use_std: bool,
) -> Result<Var<'t, T>> {
    sdl(h_plus, h_minus, h_star, use_std)
}

/// SDL on the gated word-context feature.
pub fn sdl_q<'t, T: Float>(
    q_plus: &Var<'t, T>,
    q_minus: &Var<'t, T>,
    h_star: &Var<'t, T>,
    use_std: bool,
) -> Result<Var<'t, T>> {
    sdl(q_plus, q_minus, h_star, use_std)
}

/// `λ1·sdl_h + λ2·sdl_q + λ3·rirm_l1`.
pub fn sdm_loss<'t, T: Float>(
    sdl_h: &Var<'t, T>,
    sdl_q: &Var<'t, T>,
    rirm_l1: &Var<'t, T>,
    w: &LossWeights,
) -> Var<'t, T> {
    sdl_h
        .scale(w.lambda1)
        .add(&sdl_q.scale(w.lambda2))
        .add(&rirm_l1.scale(w.lambda3))
}

/// `ln σ(x)`, elementwise.
fn log_sigmoid<'t, T: Float>(logits: &Var<'t, T>) -> Var<'t, T> {
    logits.neg().softplus().neg()
}

/// `ln(1 − σ(x)) = ln σ(−x)`.
fn log_one_minus_sigmoid<'t, T: Float>(logits: &Var<'t, T>) -> Var<'t, T> {
    logits.softplus().neg()
}

/// `−½ E[ln D(Î)] − ½ E[ln D(Î, s)]` from classifier logits.
pub fn adv_generator_loss<'t, T: Float>(uncond: &Var<'t, T>, cond: &Var<'t, T>) -> Var<'t, T> {
    log_sigmoid(uncond)
        .mean_all()
        .add(&log_sigmoid(cond).mean_all())
        .scale(-0.5)
}

/// Four-term cross-entropy: real images pushed to 1 and fakes to 0 on both
/// the unconditional and the conditional branch, each weighted ½.
pub fn adv_discriminator_loss<'t, T: Float>(
    real_uncond: &Var<'t, T>,
    real_cond: &Var<'t, T>,
    fake_uncond: &Var<'t, T>,
    fake_cond: &Var<'t, T>,
) -> Var<'t, T> {
    log_sigmoid(real_uncond)
        .mean_all()
        .add(&log_one_minus_sigmoid(fake_uncond).mean_all())
        .add(&log_sigmoid(real_cond).mean_all())
        .add(&log_one_minus_sigmoid(fake_cond).mean_all())
        .scale(-0.5)
}

fn log_clamped<'t, T: Float>(p: &Var<'t, T>) -> Var<'t, T> {
    p.ln_clamped(LOG_FLOOR, 1.0)
}

/// [`adv_generator_loss`] on probabilities.
pub fn adv_generator_loss_probs<'t, T: Float>(uncond: &Var<'t, T>, cond: &Var<'t, T>) -> Var<'t, T> {
    log_clamped(uncond)
        .mean_all()
        .add(&log_clamped(cond).mean_all())
        .scale(-0.5)
}

/// [`adv_discriminator_loss`] on probabilities.
pub fn adv_discriminator_loss_probs<'t, T: Float>(
    real_uncond: &Var<'t, T>,
    real_cond: &Var<'t, T>,
    fake_uncond: &Var<'t, T>,
    fake_cond: &Var<'t, T>,
) -> Var<'t, T> {
    let one_minus = |p: &Var<'t, T>| log_clamped(&p.neg().add_scalar(1.0));
    log_clamped(real_uncond)
        .mean_all()
        .add(&one_minus(fake_uncond).mean_all())
        .add(&log_clamped(real_cond).mean_all())
        .add(&one_minus(fake_cond).mean_all())
        .scale(-0.5)
}

fn l2_normalize_rows<'t, T: Float>(x: &Var<'t, T>) -> Var<'t, T> {
    let norm = x.sqr().sum_axes_keepdim(&[1]).add_scalar(1e-12).sqrt();
    x.div(&norm)
}

/// Cosine-similarity matrix `[B, B]` between row embeddings.
pub fn cosine_matrix<'t, T: Float>(a: &Var<'t, T>, b: &Var<'t, T>) -> Var<'t, T> {
    l2_normalize_rows(a).matmul_t(&l2_normalize_rows(b), false, true)
}

/// Symmetric contrastive loss between image and sentence embeddings.
///
/// Similarities are cosines divided by `tau`; each row (image → captions)
/// and each column (caption → images) is a softmax classification of the
/// diagonal. With `keys`, off-diagonal pairs that share a key (the same
/// caption appearing twice in a batch) are excluded from the softmax.
pub fn damsm_lite<'t, T: Float>(
    img: &Var<'t, T>,
    sent: &Var<'t, T>,
    tau: f64,
    keys: Option<&[u64]>,
) -> Result<Var<'t, T>> {
    let (si, ss) = (img.shape(), sent.shape());
    if si.len() != 2 || si != ss {
        return Err(Error::Shape(format!("damsm_lite inputs {si:?} and {ss:?}")));
    }
    let b = si[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let mut logits = cosine_matrix(img, sent).scale(1.0 / tau);
    if let Some(keys) = keys {
        assert_eq!(keys.len(), b);
        let mut mask = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j && keys[i] == keys[j] {
                    mask[i * b + j] = -1e4;
                }
            }
        }
        logits = logits.add(&img.tape().constant(Tensor::from_f64(&[b, b], &mask)));
    }
    Ok(contrastive_ce(&logits))
}

/// `½ (CE(rows) + CE(columns))` with the diagonal as targets.
pub fn contrastive_ce<'t, T: Float>(logits: &Var<'t, T>) -> Var<'t, T> {
    let b = logits.shape()[0];
    let diag: Vec<usize> = (0..b).collect();
    let rows = logits.log_softmax_last().pick_last(&diag).mean_all();
    let cols = logits.transpose_last2().log_softmax_last().pick_last(&diag).mean_all();
    rows.add(&cols).scale(-0.5)
}

/// Image side of the matching loss: strided convs, global average pool and
/// a projection into the sentence-feature space.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub convs: Vec<Conv>,
    pub proj: Linear,
}

impl Matcher {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, resolution: usize, text_dim: usize) -> Self {
        let mut b = b.sub("matcher");
        let n = (resolution / 4).trailing_zeros().max(1) as usize;
        let mut convs = Vec::new();
        let (mut cin, mut c) = (3, 8);
        for k in 0..n {
            convs.push(b.conv(&format!("conv{k}"), cin, c, 3, 2));
            cin = c;
            c *= 2;
        }
        Self {
            convs,
            proj: b.linear("proj", cin, text_dim, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        self.convs.iter().for_each(|c| p.extend(c.params()));
        p.extend(self.proj.params());
        p
    }

    /// `[B, 3, r, r]` → `[B, D]`. With `frozen`, no gradient reaches the
    /// matcher's own weights (it still flows into the images).
    pub fn embed<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, img: &Var<'t, T>, frozen: bool) -> Var<'t, T> {
        let p = |id: ParamId| {
            let v = cx.p(id);
            if frozen {
                v.detach()
            } else {
                v
            }
        };
        let mut h = *img;
        for c in &self.convs {
            h = act(&h.conv2d(&p(c.w), Some(&p(c.b)), c.stride, c.pad));
        }
        let pooled = h.mean_axes(&[2, 3]);
        pooled.linear(&p(self.proj.w), self.proj.b.map(p).as_ref())
    }
}

/// Generator-side terms of one stage. `dal` and `sdm` are absent when the
/// corresponding module is disabled.
pub struct GenStageLoss<'t, T: Float> {
    pub adv: Var<'t, T>,
    pub dal: Option<Var<'t, T>>,
    pub sdm: Option<Var<'t, T>>,
}

/// `Σᵢ (L_Gᵢ + λ4·L_Gᵢᴰ + L_SDLᵢ) + α·L_DAMSM`.
pub fn total_generator_loss<'t, T: Float>(
    stages: &[GenStageLoss<'t, T>],
    damsm: &Var<'t, T>,
    w: &LossWeights,
) -> Var<'t, T> {
    let mut total = damsm.scale(w.alpha);
    for s in stages {
        total = total.add(&s.adv);
        if let Some(d) = &s.dal {
            total = total.add(&d.scale(w.lambda4));
        }
        if let Some(l) = &s.sdm {
            total = total.add(l);
        }
    }
    total
}

/// Discriminator-side terms of one stage.
pub struct DiscStageLoss<'t, T: Float> {
    pub adv: Var<'t, T>,
    pub dal: Option<Var<'t, T>>,
}

/// `Σᵢ (L_Dᵢ + λ5·L_Dᵢᴰ)`.
pub fn total_discriminator_loss<'t, T: Float>(stages: &[DiscStageLoss<'t, T>], w: &LossWeights) -> Var<'t, T> {
    let mut total = stages[0].adv.scale(0.0);
    for s in stages {
        total = total.add(&s.adv);
        if let Some(d) = &s.dal {
            total = total.add(&d.scale(w.lambda5));
        }
    }
    total
}
