//! Cascaded generator: SDM₀, refinement stages, image heads and the real
//! image reconstruction module (RIRM).
//!
//! The RIRM decoder of stage `i` *is* the image head of stage `i`: both call
//! sites use the same [`Conv`] handle, so there is one set of weights and
//! gradients from both paths accumulate into it.

use drgan_autograd::{Float, ParamId, Tensor, Var};

use crate::attention::{projection, split_features, word_attention, ResBlock, SpatialMask};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{act, Builder, Conv, Ctx, Linear};
use crate::text_encoding::TextFeatures;

const SEED_RES: usize = 4;

/// Noise + conditioned sentence → first hidden grid.
#[derive(Clone, Debug)]
pub struct Sdm0 {
    pub fc: Linear,
    pub ups: Vec<Conv>,
    channels: usize,
}

impl Sdm0 {
    fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let mut b = b.sub("sdm0");
        let n_up = (cfg.resolutions[0] / SEED_RES).trailing_zeros() as usize;
        Self {
            fc: b.linear("fc", cfg.z_dim + cfg.ca_dim, c * SEED_RES * SEED_RES, true),
            ups: (0..n_up).map(|k| b.conv(&format!("up{k}"), c, c, 3, 1)).collect(),
            channels: c,
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, z: &Var<'t, T>, s: &Var<'t, T>) -> Var<'t, T> {
        let b = z.shape()[0];
        let x = Var::concat(&[*z, *s], 1);
        let mut h = act(&self.fc.forward(cx, &x)).reshape(&[b, self.channels, SEED_RES, SEED_RES]);
        for conv in &self.ups {
            h = act(&conv.forward(cx, &h.upsample2x()));
        }
        h
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc.params();
        self.ups.iter().for_each(|c| p.extend(c.params()));
        p
    }
}

/// Key/non-key gating of one SDM stage.
#[derive(Clone, Debug)]
pub struct Disentangle {
    pub refine: ResBlock,
    pub mask_h: SpatialMask,
    pub mask_q: SpatialMask,
}

/// One refinement stage. Without [`Disentangle`] it is the plain attentional
/// stage: `concat(Q′, H_{i−1})` → fuse → upsample.
#[derive(Clone, Debug)]
pub struct SdmStage {
    pub u: ParamId,
    pub sdm: Option<Disentangle>,
    pub fuse_in: Conv,
    pub fuse: ResBlock,
    pub up: Conv,
}

/// Real-image encoder of one RIRM.
#[derive(Clone, Debug)]
pub struct RirmEncoder {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl RirmEncoder {
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, img: &Var<'t, T>) -> Var<'t, T> {
        act(&self.conv_b.forward(cx, &act(&self.conv_a.forward(cx, img))))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv_a.params();
        p.extend(self.conv_b.params());
        p
    }
}

/// Everything the disentangling loss of one stage needs.
pub struct SdlTerms<'t, T: Float> {
    pub h_plus: Var<'t, T>,
    pub h_minus: Var<'t, T>,
    pub q_plus: Var<'t, T>,
    pub q_minus: Var<'t, T>,
    pub h_star: Var<'t, T>,
    pub recon: Var<'t, T>,
    pub real: Var<'t, T>,
}

pub struct StageOut<'t, T: Float> {
    pub h: Var<'t, T>,
    pub theta: Var<'t, T>,
    pub sdl: Option<SdlTerms<'t, T>>,
    /// `(Maskᴴ, Mask^Q)` when the stage disentangles.
    pub masks: Option<(Var<'t, T>, Var<'t, T>)>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub sdm0: Sdm0,
    pub stages: Vec<SdmStage>,
    /// Image head Gᵢᵒ per stage; also the RIRM decoder for stages ≥ 1.
    pub heads: Vec<Conv>,
    /// RIRM encoders for stages ≥ 1 (`rirm[i - 1]`), present with SDM.
    pub rirm: Vec<RirmEncoder>,
}

pub struct GenOutput<'t, T: Float> {
    pub hidden: Vec<Var<'t, T>>,
    pub images: Vec<Var<'t, T>>,
    /// Attention weights per refinement stage (`thetas[i - 1]`).
    pub thetas: Vec<Var<'t, T>>,
    pub stages: Vec<StageOut<'t, T>>,
}

impl Generator {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &ModelConfig, use_sdm: bool) -> Self {
        let c = cfg.channels;
        let sdm0 = Sdm0::new(b, cfg);
        let mut stages = Vec::new();
        let mut heads = Vec::new();
        let mut rirm = Vec::new();
        for i in 0..cfg.num_stages() {
            let mut sb = b.sub(&format!("stage{i}"));
            heads.push(sb.conv("head", c, 3, 3, 1));
            if i == 0 {
                continue;
            }
            let sdm = use_sdm.then(|| Disentangle {
                refine: ResBlock::new(&mut sb, "refine", c),
                mask_h: SpatialMask::new(&mut sb, "mask_h", c, c),
                mask_q: SpatialMask::new(&mut sb, "mask_q", c, c),
            });
            stages.push(SdmStage {
                u: projection(&mut sb, "u", cfg.text_dim, c),
                sdm,
                fuse_in: sb.conv("fuse_in", 2 * c, c, 1, 1),
                fuse: ResBlock::new(&mut sb, "fuse", c),
                up: sb.conv("up", c, c, 3, 1),
            });
            if use_sdm {
                let mut rb = sb.sub("rirm");
                rirm.push(RirmEncoder {
                    conv_a: rb.conv("a", 3, c, 3, 1),
                    conv_b: rb.conv("b", c, c, 3, 1),
                });
            }
        }
        Self {
            cfg: cfg.clone(),
            sdm0,
            stages,
            heads,
            rirm,
        }
    }

    pub fn uses_sdm(&self) -> bool {
        !self.rirm.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.sdm0.params();
        for s in &self.stages {
            p.push(s.u);
            if let Some(d) = &s.sdm {
                p.extend(d.refine.params());
                p.extend(d.mask_h.params());
                p.extend(d.mask_q.params());
            }
            p.extend(s.fuse_in.params());
            p.extend(s.fuse.params());
            p.extend(s.up.params());
        }
        self.heads.iter().for_each(|h| p.extend(h.params()));
        self.rirm.iter().for_each(|r| p.extend(r.params()));
        p
    }

    pub fn sdm0_forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, z: &Var<'t, T>, s: &Var<'t, T>) -> Var<'t, T> {
        self.sdm0.forward(cx, z, s)
    }

    /// Stage `i ≥ 1`. `real` is the stage-`i` real image in training mode;
    /// SDL inputs are only produced when it is given and the stage
    /// disentangles.
    pub fn sdm_forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        i: usize,
        h_prev: &Var<'t, T>,
        text: &TextFeatures<'t, T>,
        real: Option<&Var<'t, T>>,
    ) -> Result<StageOut<'t, T>> {
        assert!(i >= 1 && i < self.cfg.num_stages(), "no refinement stage {i}");
        let st = &self.stages[i - 1];
        let (q_prime, theta) = word_attention(&text.words, &text.lengths, h_prev, &cx.p(st.u))?;
        let (fused, masks, split) = match &st.sdm {
            None => (Var::concat(&[q_prime, *h_prev], 1), None, None),
            Some(d) => {
                let q = d.refine.forward(cx, &q_prime);
                let m_h = d.mask_h.forward(cx, h_prev);
                let m_q = d.mask_q.forward(cx, &q);
                let (h_plus, h_minus) = split_features(h_prev, &m_h)?;
                let (q_plus, q_minus) = split_features(&q, &m_q)?;
                (
                    Var::concat(&[q_plus, h_plus], 1),
                    Some((m_h, m_q)),
                    Some((h_plus, h_minus, q_plus, q_minus)),
                )
            }
        };
        let x = st.fuse.forward(cx, &st.fuse_in.forward(cx, &fused));
        let h = act(&st.up.forward(cx, &x.upsample2x()));
        let sdl = match (real, split) {
            (Some(img), Some((h_plus, h_minus, q_plus, q_minus))) => {
                let (h_star, recon) = self.rirm_forward(cx, i, img)?;
                Some(SdlTerms {
                    h_plus,
                    h_minus,
                    q_plus,
                    q_minus,
                    h_star,
                    recon,
                    real: *img,
                })
            }
            (Some(img), None) => {
                self.check_res(i, img)?;
                None
            }
            _ => None,
        };
        Ok(StageOut { h, theta, sdl, masks })
    }

    fn check_res<T: Float>(&self, i: usize, img: &Var<'_, T>) -> Result<()> {
        let r = self.cfg.resolutions[i];
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!(
                "stage {i} expects [B, 3, {r}, {r}] images, got {s:?}"
            )));
        }
        Ok(())
    }

    /// `Gᵢᵒ(H) = tanh(Conv3×3(H))`.
    pub fn generate_image<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, i: usize, h: &Var<'t, T>) -> Var<'t, T> {
        self.heads[i].forward(cx, h).tanh()
    }

    /// `(H*, decoder(H*))` where the decoder is the stage's image head.
    pub fn rirm_forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        i: usize,
        real: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_res(i, real)?;
        let enc = self
            .rirm
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no RIRM at stage {i}")))?;
        let h_star = enc.forward(cx, real);
        let recon = self.generate_image(cx, i, &h_star);
        Ok((h_star, recon))
    }

    /// Full cascade. `real[i]` supplies I*ᵢ in training mode.
    pub fn forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        text: &TextFeatures<'t, T>,
        s: &Var<'t, T>,
        z: Tensor<T>,
        real: Option<&[Var<'t, T>]>,
    ) -> Result<GenOutput<'t, T>> {
        let n = self.cfg.num_stages();
        if let Some(r) = real {
            if r.len() != n {
                return Err(Error::Shape(format!("{} real images for {n} stages", r.len())));
            }
        }
        let mut h = self.sdm0_forward(cx, &cx.constant(z), s);
        let mut out = GenOutput {
            hidden: vec![h],
            images: vec![self.generate_image(cx, 0, &h)],
            thetas: Vec::new(),
            stages: Vec::new(),
        };
        for i in 1..n {
            let st = self.sdm_forward(cx, i, &h, text, real.map(|r| &r[i]))?;
            h = st.h;
            out.hidden.push(h);
            out.images.push(self.generate_image(cx, i, &h));
            out.thetas.push(st.theta);
            out.stages.push(st);
        }
        Ok(out)
    }
}
