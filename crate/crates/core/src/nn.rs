//! Parameter builders and the two layer types everything is made of.

use drgan_autograd::{Float, Group, Init, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator-side parameters (SDMs, heads, RIRM encoders, matcher).
pub const GEN: Group = Group(0);
/// Discriminator-side parameters (one DNM per stage).
pub const DISC: Group = Group(1);
/// Text encoder and conditioning augmentation; split out so it can be frozen.
pub const TEXT: Group = Group(2);

/// A tape paired with the store its parameters come from.
pub struct Ctx<'t, 's, T: Float> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
}

impl<T: Float> Clone for Ctx<'_, '_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Float> Copy for Ctx<'_, '_, T> {}

impl<'t, 's, T: Float> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

/// Registers parameters under a dotted name prefix.
///
/// Each tensor gets its own RNG stream keyed by `(seed, full name)`, so two
/// model variants that share a sub-network also share its initial weights.
pub struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    group: Group,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, group: Group) -> Self {
        Self {
            store,
            seed,
            group,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        self.sub_in(name, self.group)
    }

    pub fn sub_in(&mut self, name: &str, group: Group) -> Builder<'_, T> {
        Builder {
            prefix: self.full(name),
            seed: self.seed,
            group,
            store: self.store,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        self.store.init(full, self.group, shape, init, &mut rng)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let mut b = self.sub(name);
        Linear {
            w: b.param(
                "w",
                &[fan_out, fan_in],
                Init::FanIn {
                    fan_in,
                    gain: 3f64.sqrt(),
                },
            ),
            b: bias.then(|| b.param("b", &[fan_out], Init::Zeros)),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        let mut b = self.sub(name);
        Conv {
            w: b.param(
                "w",
                &[cout, cin, k, k],
                Init::FanIn {
                    fan_in,
                    gain: 3f64.sqrt(),
                },
            ),
            b: b.param("b", &[cout], Init::Zeros),
            stride,
            pad: k / 2,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let b = self.b.map(|b| cx.p(b));
        x.linear(&cx.p(self.w), b.as_ref())
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Square convolution with "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.conv2d(&cx.p(self.w), Some(&cx.p(self.b)), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

pub(crate) const SLOPE: f64 = 0.2;

pub(crate) fn act<'t, T: Float>(x: &Var<'t, T>) -> Var<'t, T> {
    x.leaky_relu(SLOPE)
}

/// Overwrite every listed parameter with zeros.
pub fn zero_params<T: Float>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape));
    }
}
