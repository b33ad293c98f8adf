//! Vocabulary, tokenizer, recurrent text encoder and conditioning augmentation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use drgan_autograd::{Float, Init, ParamId, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::kl_standard_normal;
use crate::nn::{Builder, Ctx, Linear};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map. Index 0 is padding, 1 is unknown; real words follow
/// in sorted order, so the serialized file is sorted by token and by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: Vec<String> = words
            .into_iter()
            .flat_map(|w| split_words(w.as_ref()).collect::<Vec<_>>())
            .collect();
        set.sort();
        set.dedup();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set.into_iter().filter(|w| w != PAD_TOKEN && w != UNK_TOKEN));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One `token<TAB>index` line per entry.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{t}\t{i}").unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (tok, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {} has no tab", n + 1)))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|e| Error::format("vocabulary", format!("line {}: {e}", n + 1)))?;
            pairs.push((idx, tok.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (idx, _))| *idx != i) {
            return Err(Error::format("vocabulary", "indices are not 0..n"));
        }
        if pairs.len() < 2 || pairs[PAD].1 != PAD_TOKEN || pairs[UNK].1 != UNK_TOKEN {
            return Err(Error::format("vocabulary", "missing reserved tokens"));
        }
        Ok(Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect()))
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '<' && c != '>')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub raw_text: String,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lower-cases, splits on anything that is not a letter or digit, maps
/// unknown words to [`UNK`] and keeps at most `t_max` tokens.
pub fn tokenize(raw_text: &str, vocab: &Vocab, t_max: usize) -> Result<Caption> {
    let tokens: Vec<usize> = split_words(raw_text)
        .map(|w| vocab.get(&w).unwrap_or(UNK))
        .take(t_max)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyCaption);
    }
    Ok(Caption {
        tokens,
        raw_text: raw_text.to_string(),
    })
}

/// Token embedding followed by a single GRU layer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub dim: usize,
    xr: Linear,
    xz: Linear,
    xn: Linear,
    hr: Linear,
    hz: Linear,
    hn: Linear,
}

/// Encoder output for a batch. `words` is `[B, D, T]` with `T` the longest
/// caption in the batch; columns past `lengths[b]` are padding.
pub struct TextFeatures<'t, T: Float> {
    pub words: Var<'t, T>,
    pub sentence: Var<'t, T>,
    pub lengths: Vec<usize>,
}

impl TextEncoder {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, vocab_size: usize, dim: usize) -> Self {
        let mut b = b.sub("text");
        Self {
            embedding: b.param("embedding", &[vocab_size, dim], Init::Normal(1.0)),
            dim,
            xr: b.linear("xr", dim, dim, true),
            xz: b.linear("xz", dim, dim, true),
            xn: b.linear("xn", dim, dim, true),
            hr: b.linear("hr", dim, dim, true),
            hz: b.linear("hz", dim, dim, true),
            hn: b.linear("hn", dim, dim, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embedding];
        for l in [&self.xr, &self.xz, &self.xn, &self.hr, &self.hz, &self.hn] {
            p.extend(l.params());
        }
        p
    }

    pub fn encode<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, captions: &[Caption]) -> Result<TextFeatures<'t, T>> {
        if captions.is_empty() {
            return Err(Error::Shape("no captions to encode".into()));
        }
        let vocab = cx.store.get(self.embedding).dim(0);
        for c in captions {
            if c.is_empty() {
                return Err(Error::EmptyCaption);
            }
            if let Some(&bad) = c.tokens.iter().find(|&&t| t >= vocab) {
                return Err(Error::Shape(format!("token {bad} outside vocabulary of {vocab}")));
            }
        }
        let b = captions.len();
        let d = self.dim;
        let t_len = captions.iter().map(Caption::len).max().unwrap();
        let lengths: Vec<usize> = captions.iter().map(Caption::len).collect();
        let table = cx.p(self.embedding);
        let mut h = cx.constant(Tensor::zeros(&[b, d]));
        let mut columns = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ids: Vec<usize> = captions
                .iter()
                .map(|c| c.tokens.get(t).copied().unwrap_or(PAD))
                .collect();
            let x = table.embedding(&ids);
            let r = self.xr.forward(cx, &x).add(&self.hr.forward(cx, &h)).sigmoid();
            let z = self.xz.forward(cx, &x).add(&self.hz.forward(cx, &h)).sigmoid();
            let n = self.xn.forward(cx, &x).add(&r.mul(&self.hn.forward(cx, &h))).tanh();
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let step = n.add(&z.mul(&h.sub(&n)));
            h = if lengths.iter().all(|&l| l > t) {
                step
            } else {
                let live: Vec<f64> = lengths.iter().map(|&l| if l > t { 1.0 } else { 0.0 }).collect();
                let m = cx.constant(Tensor::from_f64(&[b, 1], &live));
                h.add(&m.mul(&step.sub(&h)))
            };
            columns.push(h.reshape(&[b, 1, d]));
        }
        let words = Var::concat(&columns, 1).transpose_last2();
        Ok(TextFeatures {
            words,
            sentence: h,
            lengths,
        })
    }

    /// Single caption: `(s′ [D], W [D, T])` with exactly `T` columns.
    pub fn encode_one<T: Float>(&self, cx: Ctx<'_, '_, T>, caption: &Caption) -> Result<(Tensor<T>, Tensor<T>)> {
        let f = self.encode(cx, std::slice::from_ref(caption))?;
        let d = self.dim;
        let s = f.sentence.value().as_ref().clone().reshape(&[d]);
        let w = f.words.value().as_ref().clone().reshape(&[d, caption.len()]);
        Ok((s, w))
    }
}

/// Linear map from `s′` to the mean and log-variance of the conditioning
/// Gaussian.
#[derive(Clone, Debug)]
pub struct CondAug {
    pub mu: Linear,
    pub logvar: Linear,
    pub dim: usize,
}

pub struct CondSentence<'t, T: Float> {
    pub s: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
    pub kl: Var<'t, T>,
}

impl<T: Float> CondSentence<'_, T> {
    /// `σ = exp(½ logvar)`.
    pub fn sigma(&self) -> Tensor<T> {
        self.logvar.value().map(|l| (l * T::lit(0.5)).exp())
    }
}

impl CondAug {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, text_dim: usize, dim: usize) -> Self {
        let mut b = b.sub("ca");
        Self {
            mu: b.linear("mu", text_dim, dim, true),
            logvar: b.linear("logvar", text_dim, dim, true),
            dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mu.params();
        p.extend(self.logvar.params());
        p
    }

    /// `s = μ + σ ⊙ noise` and its KL to the standard normal.
    pub fn forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        s_prime: &Var<'t, T>,
        noise: Tensor<T>,
    ) -> Result<CondSentence<'t, T>> {
        if !s_prime.value().all_finite() {
            return Err(Error::NonFinite("sentence feature".into()));
        }
        let mu = self.mu.forward(cx, s_prime);
        let logvar = self.logvar.forward(cx, s_prime);
        if noise.shape() != mu.shape().as_slice() {
            return Err(Error::Shape(format!(
                "noise {:?} vs latent {:?}",
                noise.shape(),
                mu.shape()
            )));
        }
        let s = reparameterize(&mu, &logvar, &cx.constant(noise));
        let kl = kl_standard_normal(&mu, &logvar);
        Ok(CondSentence { s, mu, logvar, kl })
    }
}

/// `μ + exp(½ logvar) ⊙ ε`.
pub fn reparameterize<'t, T: Float>(mu: &Var<'t, T>, logvar: &Var<'t, T>, eps: &Var<'t, T>) -> Var<'t, T> {
    mu.add(&logvar.scale(0.5).exp().mul(eps))
}
