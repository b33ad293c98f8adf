//! Word-level attention and spatial key/non-key gating.

use drgan_autograd::{mask_split, Float, Init, ParamId, Var};

use crate::error::{Error, Result};
use crate::nn::{act, Builder, Conv, Ctx};

/// Word attention for every sub-region of a hidden grid.
///
/// `words: [B, D, T]`, `h: [B, C, H, W]`, `u: [C, D]`. Returns the word
/// context `Q′: [B, C, H, W]` and the weights `θ: [B, N, T]` (N = H·W),
/// where `θ[j, ·] = softmax(hⱼᵀ U W)` over the first `lengths[b]` words.
pub fn word_attention<'t, T: Float>(
    words: &Var<'t, T>,
    lengths: &[usize],
    h: &Var<'t, T>,
    u: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (ws, hs, us) = (words.shape(), h.shape(), u.shape());
    if ws.len() != 3 || hs.len() != 4 || us.len() != 2 {
        return Err(Error::Shape(format!("word_attention ranks {ws:?} {hs:?} {us:?}")));
    }
    let (b, c, hh, ww) = (hs[0], hs[1], hs[2], hs[3]);
    if ws[0] != b || us != [c, ws[1]] || lengths.len() != b {
        return Err(Error::Shape(format!(
            "word_attention: words {ws:?}, hidden {hs:?}, projection {us:?}, {} lengths",
            lengths.len()
        )));
    }
    if lengths.iter().any(|&l| l == 0 || l > ws[2]) {
        return Err(Error::Shape(format!("caption lengths {lengths:?} exceed {}", ws[2])));
    }
    let wp = u.reshape(&[1, c, ws[1]]).bmm_t(words, false, false);
    let hf = h.reshape(&[b, c, hh * ww]);
    let theta = hf.bmm_t(&wp, true, false).softmax_last(Some(lengths));
    let q = wp.bmm_t(&theta, false, true).reshape(&[b, c, hh, ww]);
    Ok((q, theta))
}

/// `Sigmoid(Conv1×1(ReLU(Conv3×3(F))))`, one channel.
#[derive(Clone, Debug)]
pub struct SpatialMask {
    pub conv3: Conv,
    pub conv1: Conv,
}

impl SpatialMask {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize, hidden: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            conv3: b.conv("conv3", channels, hidden, 3, 1),
            conv1: b.conv("conv1", hidden, 1, 1, 1),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, f: &Var<'t, T>) -> Var<'t, T> {
        let hidden = self.conv3.forward(cx, f).relu();
        self.conv1.forward(cx, &hidden).sigmoid()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv3.params();
        p.extend(self.conv1.params());
        p
    }
}

/// `(mask ⊙ F, F − mask ⊙ F)`; the two halves sum to `F` exactly.
pub fn split_features<'t, T: Float>(f: &Var<'t, T>, mask: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (fs, ms) = (f.shape(), mask.shape());
    if fs.len() != 4 || ms != [fs[0], 1, fs[2], fs[3]] {
        return Err(Error::Shape(format!("split_features: feature {fs:?}, mask {ms:?}")));
    }
    Ok(mask_split(f, mask))
}

/// `x + Conv(act(Conv(x)))`, channel count preserved.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl ResBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            conv_a: b.conv("a", channels, channels, 3, 1),
            conv_b: b.conv("b", channels, channels, 3, 1),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let y = act(&self.conv_a.forward(cx, x));
        x.add(&self.conv_b.forward(cx, &y))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv_a.params();
        p.extend(self.conv_b.params());
        p
    }
}

/// Word projection `U: D → C` for one stage.
pub fn projection<T: Float>(b: &mut Builder<'_, T>, name: &str, text_dim: usize, channels: usize) -> ParamId {
    b.param(
        name,
        &[channels, text_dim],
        Init::FanIn {
            fan_in: text_dim,
            gain: 3f64.sqrt(),
        },
    )
}
