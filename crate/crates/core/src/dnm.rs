//! Per-stage discriminator with a distribution-normalizing VAE branch.
//!
//! The encoder `E^D` is shared by the two classifiers and the VAE: callers
//! encode an image once with [`Dnm::disc_encode`] and pass the embedding to
//! everything else.

use drgan_autograd::{Float, ParamId, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{kl_standard_normal, l1_mean};
use crate::nn::{act, Builder, Conv, Ctx, Linear};
use crate::text_encoding::reparameterize;

const BOTTOM: usize = 4;

#[derive(Clone, Debug)]
pub struct DnmConfig {
    pub resolution: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub latent: usize,
    pub cond_dim: usize,
}

/// Variational sampler φ and decoder `D^E`. In autoencoder mode (DNM*) the
/// log-variance head does not exist and the decoder sees the mean.
#[derive(Clone, Debug)]
pub struct VaeBranch {
    pub phi_mu: Linear,
    pub phi_logvar: Option<Linear>,
    pub dec_fc: Linear,
    pub dec_ups: Vec<Conv>,
    pub dec_out: Conv,
    dec_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Dnm {
    pub cfg: DnmConfig,
    pub enc: Vec<Conv>,
    pub enc_fc: Linear,
    /// ψ̂: unconditional classifier.
    pub uncond: Linear,
    /// ψ: conditional classifier over `concat(v, s)`.
    pub cond_hidden: Linear,
    pub cond_out: Linear,
    pub vae: Option<VaeBranch>,
}

/// Posterior parameters and the decoder input.
pub struct Posterior<'t, T: Float> {
    pub mu: Var<'t, T>,
    /// Absent in autoencoder mode.
    pub logvar: Option<Var<'t, T>>,
    pub z_star: Var<'t, T>,
    /// `½ Σ (μ̃² + σ̃² − 1 − 2 ln σ̃)`, batch mean; absent in autoencoder mode.
    pub kl: Option<Var<'t, T>>,
}

/// Which latent the decoder receives.
#[derive(Clone, Copy, Debug)]
pub enum Latent<'a, T> {
    /// `z* = μ̃ + σ̃ ⊙ ε` with the given standard-normal draw.
    Sample(&'a Tensor<T>),
    Mean,
}

impl Dnm {
    /// `vae`: build the VAE branch; `autoencoder`: build it without φ's
    /// variance head (DNM*).
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cfg: DnmConfig, vae: bool, autoencoder: bool) -> Self {
        let mut b = b.sub(name);
        let n_down = (cfg.resolution / BOTTOM).trailing_zeros() as usize;
        let mut enc = Vec::new();
        let mut cin = 3;
        let mut c = cfg.channels;
        for k in 0..n_down {
            enc.push(b.conv(&format!("enc{k}"), cin, c, 3, 2));
            cin = c;
            c *= 2;
        }
        let v = cfg.embed_dim;
        let enc_fc = b.linear("enc_fc", cin * BOTTOM * BOTTOM, v, true);
        let uncond = b.linear("uncond", v, 1, true);
        let cond_hidden = b.linear("cond_hidden", v + cfg.cond_dim, v, true);
        let cond_out = b.linear("cond_out", v, 1, true);
        let vae = vae.then(|| {
            let dc = cfg.channels;
            let mut vb = b.sub("vae");
            VaeBranch {
                phi_mu: vb.linear("phi_mu", v, cfg.latent, true),
                phi_logvar: (!autoencoder).then(|| vb.linear("phi_logvar", v, cfg.latent, true)),
                dec_fc: vb.linear("dec_fc", cfg.latent + cfg.cond_dim, dc * BOTTOM * BOTTOM, true),
                dec_ups: (0..n_down).map(|k| vb.conv(&format!("dec{k}"), dc, dc, 3, 1)).collect(),
                dec_out: vb.conv("dec_out", dc, 3, 3, 1),
                dec_channels: dc,
            }
        });
        Self {
            cfg,
            enc,
            enc_fc,
            uncond,
            cond_hidden,
            cond_out,
            vae,
        }
    }

    pub fn is_autoencoder(&self) -> bool {
        self.vae.as_ref().is_some_and(|v| v.phi_logvar.is_none())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        self.enc.iter().for_each(|c| p.extend(c.params()));
        for l in [&self.enc_fc, &self.uncond, &self.cond_hidden, &self.cond_out] {
            p.extend(l.params());
        }
        if let Some(v) = &self.vae {
            p.extend(v.phi_mu.params());
            if let Some(l) = &v.phi_logvar {
                p.extend(l.params());
            }
            p.extend(v.dec_fc.params());
            v.dec_ups.iter().for_each(|c| p.extend(c.params()));
            p.extend(v.dec_out.params());
        }
        p
    }

    fn vae(&self) -> Result<&VaeBranch> {
        self.vae
            .as_ref()
            .ok_or_else(|| Error::Config("this discriminator has no VAE branch".into()))
    }

    /// `E^D(x)`: image `[B, 3, r, r]` → embedding `[B, V]`.
    pub fn disc_encode<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let r = self.cfg.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("discriminator at {r}×{r} got {s:?}")));
        }
        let mut h = *x;
        for c in &self.enc {
            h = act(&c.forward(cx, &h));
        }
        let flat = h.reshape(&[s[0], h.value().numel() / s[0]]);
        Ok(act(&self.enc_fc.forward(cx, &flat)))
    }

    /// Classifier logit `[B]`; conditional when `s` is given.
    pub fn classify_logits<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v: &Var<'t, T>,
        s: Option<&Var<'t, T>>,
    ) -> Var<'t, T> {
        let b = v.shape()[0];
        let out = match s {
            None => self.uncond.forward(cx, v),
            Some(s) => {
                let hidden = act(&self.cond_hidden.forward(cx, &Var::concat(&[*v, *s], 1)));
                self.cond_out.forward(cx, &hidden)
            }
        };
        out.reshape(&[b])
    }

    /// `ψ̂(v)` or `ψ(v, s)` as probabilities in (0, 1).
    pub fn classify<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, v: &Var<'t, T>, s: Option<&Var<'t, T>>) -> Var<'t, T> {
        self.classify_logits(cx, v, s).sigmoid()
    }

    /// `(μ̃, σ̃) = φ(v)` and the decoder input.
    pub fn variational_sample<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v: &Var<'t, T>,
        latent: Latent<'_, T>,
    ) -> Result<Posterior<'t, T>> {
        let vae = self.vae()?;
        let mu = vae.phi_mu.forward(cx, v);
        let Some(lv) = &vae.phi_logvar else {
            return Ok(Posterior {
                mu,
                logvar: None,
                z_star: mu,
                kl: None,
            });
        };
        let logvar = lv.forward(cx, v);
        let z_star = match latent {
            Latent::Mean => mu,
            Latent::Sample(eps) => {
                if eps.shape() != mu.shape().as_slice() {
                    return Err(Error::Shape(format!(
                        "noise {:?} vs latent {:?}",
                        eps.shape(),
                        mu.shape()
                    )));
                }
                reparameterize(&mu, &logvar, &cx.constant(eps.clone()))
            }
        };
        let kl = kl_standard_normal(&mu, &logvar);
        Ok(Posterior {
            mu,
            logvar: Some(logvar),
            z_star,
            kl: Some(kl),
        })
    }

    /// `D^E(z*, s)`: the decoder sees both the latent and the sentence.
    pub fn vae_decode<'t, T: Float>(&self, cx: Ctx<'t, '_, T>, z: &Var<'t, T>, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        let vae = self.vae()?;
        let b = z.shape()[0];
        let x = Var::concat(&[*z, *s], 1);
        let mut h = act(&vae.dec_fc.forward(cx, &x)).reshape(&[b, vae.dec_channels, BOTTOM, BOTTOM]);
        for c in &vae.dec_ups {
            h = act(&c.forward(cx, &h.upsample2x()));
        }
        Ok(vae.dec_out.forward(cx, &h).tanh())
    }

    /// `‖x − D^E(φ(v), s)‖₁` (pixel mean) plus the posterior KL when present.
    fn recon_term<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v: &Var<'t, T>,
        target: &Var<'t, T>,
        s: &Var<'t, T>,
        latent: Latent<'_, T>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let post = self.variational_sample(cx, v, latent)?;
        let recon = self.vae_decode(cx, &post.z_star, s)?;
        Ok((l1_mean(target, &recon), post.kl))
    }

    /// Discriminator-side VAE bound:
    /// `‖Î − D^E(φ(E^D(Î)), s)‖₁ + ‖I* − D^E(φ(E^D(I*)), s)‖₁ + KL(Î) + KL(I*)`.
    /// Takes the embeddings of both images.
    #[allow(clippy::too_many_arguments)]
    pub fn dal_discriminator_loss<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v_fake: &Var<'t, T>,
        fake: &Var<'t, T>,
        v_real: &Var<'t, T>,
        real: &Var<'t, T>,
        s: &Var<'t, T>,
        lat_fake: Latent<'_, T>,
        lat_real: Latent<'_, T>,
    ) -> Result<Var<'t, T>> {
        let (l_f, kl_f) = self.recon_term(cx, v_fake, fake, s, lat_fake)?;
        let (l_r, kl_r) = self.recon_term(cx, v_real, real, s, lat_real)?;
        let mut total = l_f.add(&l_r);
        for kl in [kl_f, kl_r].into_iter().flatten() {
            total = total.add(&kl);
        }
        Ok(total)
    }

    /// Generator-side consistency loss:
    /// `KL(Î) + ‖I* − D^E(φ(E^D(Î)), s)‖₁` — the fake image's latent is
    /// decoded against the real image.
    pub fn dal_generator_loss<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v_fake: &Var<'t, T>,
        real: &Var<'t, T>,
        s: &Var<'t, T>,
        lat_fake: Latent<'_, T>,
    ) -> Result<Var<'t, T>> {
        let (l, kl) = self.recon_term(cx, v_fake, real, s, lat_fake)?;
        Ok(match kl {
            Some(kl) => kl.add(&l),
            None => l,
        })
    }

    /// Autoencoder (DNM*) losses `(d_loss, g_loss)`: the reconstruction
    /// terms alone.
    pub fn ae_losses<'t, T: Float>(
        &self,
        cx: Ctx<'t, '_, T>,
        v_fake: &Var<'t, T>,
        fake: &Var<'t, T>,
        v_real: &Var<'t, T>,
        real: &Var<'t, T>,
        s: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if !self.is_autoencoder() {
            return Err(Error::NotAutoencoderMode);
        }
        let d = self.dal_discriminator_loss(cx, v_fake, fake, v_real, real, s, Latent::Mean, Latent::Mean)?;
        let g = self.dal_generator_loss(cx, v_fake, real, s, Latent::Mean)?;
        Ok((d, g))
    }
}
