//! Algebraic identities and agreement with the loop oracles.

use drgan::attention::{split_features, word_attention, ResBlock, SpatialMask};
use drgan::config::{Ablation, LossWeights, ModelConfig, TrainConfig};
use drgan::data::{generate_dataset, Background, Color, SceneSpec, Shape, Size};
use drgan::dnm::{Dnm, DnmConfig, Latent};
use drgan::evaluation::{
    chance_upper_bound, frechet_distance, r_precision_lite, top_word_heatmaps, toy_frechet, Extractor, EXTRACTOR_SEED,
};
use drgan::generator::Generator;
use drgan::losses::{
    adv_discriminator_loss, adv_discriminator_loss_probs, adv_generator_loss, adv_generator_loss_probs, batch_stats,
    damsm_lite, kl_standard_normal, sdl_h, sdl_q, sdm_loss, softplus, total_discriminator_loss, total_generator_loss,
    DiscStageLoss, GenStageLoss, DAMSM_TAU,
};
use drgan::model::Models;
use drgan::nn::{Builder, Conv, Ctx, Linear, DISC, GEN};
use drgan::text_encoding::{reparameterize, CondAug, TextFeatures};
use drgan::training::{discriminator_loss, effective_weights, generator_loss, generator_pass, StepNoise};
use drgan_autograd::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::oracle::{self as o, Nd};
use super::{close, close1, ensure, Check, Outcome};

pub const ALL: &[Check] = &[
    ("split_reconstruction_exact", split_reconstruction_exact),
    ("attention_rows_sum_to_one", attention_rows_sum_to_one),
    ("softplus_reference_values", softplus_reference_values),
    ("kl_fixed_points", kl_fixed_points),
    ("sdl_equal_statistics", sdl_equal_statistics),
    ("frechet_identity_and_symmetry", frechet_identity_and_symmetry),
    ("word_attention_oracle", word_attention_oracle),
    ("spatial_mask_oracle", spatial_mask_oracle),
    ("refine_context_oracle", refine_context_oracle),
    ("image_head_oracle", image_head_oracle),
    ("refinement_stage_composition", refinement_stage_composition),
    ("first_stage_depends_on_noise", first_stage_depends_on_noise),
    ("disc_encode_oracle", disc_encode_oracle),
    ("condition_changes_outputs", condition_changes_outputs),
    ("dal_oracles", dal_oracles),
    ("autoencoder_oracle", autoencoder_oracle),
    ("batch_stats_oracle", batch_stats_oracle),
    ("sdl_oracle", sdl_oracle),
    ("weighted_sums", weighted_sums),
    ("adversarial_oracles", adversarial_oracles),
    ("damsm_oracle", damsm_oracle),
    ("frechet_diagonal_closed_form", frechet_diagonal_closed_form),
    ("red_circle_pixels", red_circle_pixels),
    ("binomial_bound_oracle", binomial_bound_oracle),
    ("random_matcher_at_chance", random_matcher_at_chance),
    ("heatmaps_equal_attention", heatmaps_equal_attention),
    ("reparameterization_statistics", reparameterization_statistics),
    ("step_losses_match_composition", step_losses_match_composition),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_nd(rng: &mut ChaCha8Rng, shape: &[usize]) -> Nd {
    let n = shape.iter().product();
    Nd::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn conv_w(store: &ParamStore<f64>, c: &Conv) -> (Nd, Vec<f64>) {
    (Nd::of(store.get(c.w)), store.get(c.b).data().to_vec())
}

fn lin(store: &ParamStore<f64>, l: &Linear, x: &Nd) -> Nd {
    let b = l.b.map(|b| store.get(b).data().to_vec());
    o::linear(x, &Nd::of(store.get(l.w)), b.as_deref())
}

fn conv(store: &ParamStore<f64>, c: &Conv, x: &Nd) -> Nd {
    let (w, b) = conv_w(store, c);
    o::conv2d(x, &w, Some(&b), c.stride, c.pad)
}

fn val(v: &Var<'_, f64>) -> Nd {
    Nd::of(&v.value())
}

fn concat_cols(a: &Nd, b: &Nd) -> Nd {
    let n = a.shape[0];
    let (p, q) = (a.shape[1], b.shape[1]);
    let data = (0..n)
        .flat_map(|i| {
            a.data[i * p..(i + 1) * p]
                .iter()
                .chain(&b.data[i * q..(i + 1) * q])
                .copied()
        })
        .collect();
    Nd::new(&[n, p + q], data)
}

fn split_reconstruction_exact() -> Outcome {
    let mut r = rng(1);
    for _ in 0..20 {
        let f = rand_nd(&mut r, &[3, 4, 5, 5]).map(|x| x * 1e3);
        let m = rand_nd(&mut r, &[3, 1, 5, 5]).map(|x| 0.5 + 0.5 * x);
        let tape = Tape::<f64>::inference();
        let (p, n) =
            split_features(&tape.constant(f.tensor()), &tape.constant(m.tensor())).map_err(|e| e.to_string())?;
        let (p, n) = (val(&p), val(&n));
        for i in 0..f.data.len() {
            ensure!(
                p.data[i] + n.data[i] == f.data[i],
                "entry {i}: {} + {} ≠ {}",
                p.data[i],
                n.data[i],
                f.data[i]
            );
        }
        close("plus = mask ⊙ F", &p.data, &o::gate(&f, &m).data, 1e-9)?;
    }
    Ok(())
}

fn attention_rows_sum_to_one() -> Outcome {
    let mut r = rng(2);
    let lengths = [5, 1, 3];
    let words = rand_nd(&mut r, &[3, 4, 5]).map(|x| 3.0 * x);
    let h = rand_nd(&mut r, &[3, 6, 4, 4]).map(|x| 3.0 * x);
    let u = rand_nd(&mut r, &[6, 4]);
    let tape = Tape::<f64>::inference();
    let (_, theta) = word_attention(
        &tape.constant(words.tensor()),
        &lengths,
        &tape.constant(h.tensor()),
        &tape.constant(u.tensor()),
    )
    .map_err(|e| e.to_string())?;
    let theta = val(&theta);
    for (row, chunk) in theta.data.chunks(5).enumerate() {
        let b = row / 16;
        let s: f64 = chunk.iter().sum();
        ensure!((s - 1.0).abs() <= 1e-6, "row {row} sums to {s}");
        ensure!(
            chunk[lengths[b]..].iter().all(|&t| t == 0.0),
            "row {row} attends to padding"
        );
    }
    Ok(())
}

fn softplus_reference_values() -> Outcome {
    close1("SP(0)", softplus(0.0), std::f64::consts::LN_2, 1e-15)?;
    let small = softplus(-50.0);
    ensure!(
        small > 0.0 && (small / (-50f64).exp() - 1.0).abs() < 1e-12,
        "SP(-50) = {small}"
    );
    close1("SP(50)", softplus(50.0), 50.0, 1e-15)?;
    let tape = Tape::<f64>::inference();
    let v = tape.constant(Tensor::from_f64(&[3], &[0.0, -50.0, 800.0])).softplus();
    close(
        "softplus op",
        v.value().data(),
        &[std::f64::consts::LN_2, small, 800.0],
        1e-15,
    )
}

fn kl_fixed_points() -> Outcome {
    let tape = Tape::<f64>::inference();
    let kl = |mu: &[f64], lv: &[f64], b: usize| {
        let d = mu.len() / b;
        kl_standard_normal(
            &tape.constant(Tensor::from_f64(&[b, d], mu)),
            &tape.constant(Tensor::from_f64(&[b, d], lv)),
        )
        .item()
    };
    ensure!(kl(&[0.0; 6], &[0.0; 6], 2) == 0.0, "KL(0, 1) ≠ 0");
    let want = o::kl(&[vec![1.0, 0.0]], &[vec![1.0, 1.0]]);
    close1("closed-form KL", want, 0.5, 1e-15)?;
    close1("KL((1,0),(1,1))", kl(&[1.0, 0.0], &[0.0, 0.0], 1), want, 1e-15)?;

    // Conditioning augmentation with weights forcing μ = (1, 0), σ = (1, 1).
    let mut store = ParamStore::<f64>::new();
    let ca = CondAug::new(&mut Builder::new(&mut store, 3, GEN), 4, 2);
    drgan::nn::zero_params(&mut store, &ca.params());
    store.set(ca.mu.b.unwrap(), Tensor::from_f64(&[2], &[1.0, 0.0]));
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let s_prime = cx.constant(Tensor::from_f64(&[1, 4], &[0.3, -0.2, 0.9, 0.1]));
    let cond = ca
        .forward(cx, &s_prime, Tensor::zeros(&[1, 2]))
        .map_err(|e| e.to_string())?;
    close1("kl_ca", cond.kl.item(), 0.5, 1e-15)?;
    close("s at zero noise", cond.s.value().data(), &[1.0, 0.0], 0.0)?;

    // The DNM posterior at the standard normal: KL = 0 and z* = ε.
    let mut store = ParamStore::<f64>::new();
    let cfg = DnmConfig {
        resolution: 8,
        channels: 2,
        embed_dim: 3,
        latent: 2,
        cond_dim: 2,
    };
    let dnm = Dnm::new(&mut Builder::new(&mut store, 4, DISC), "d", cfg, true, false);
    let vae = dnm.vae.as_ref().unwrap();
    let mut ids = vae.phi_mu.params();
    ids.extend(vae.phi_logvar.as_ref().unwrap().params());
    drgan::nn::zero_params(&mut store, &ids);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let v = cx.constant(Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
    let eps = Tensor::from_f64(&[2, 2], &[0.7, -1.1, 0.2, 2.0]);
    let post = dnm
        .variational_sample(cx, &v, Latent::Sample(&eps))
        .map_err(|e| e.to_string())?;
    ensure!(post.kl.unwrap().item() == 0.0, "posterior KL at N(0, 1) is not 0");
    close("z* = ε", post.z_star.value().data(), eps.data(), 0.0)
}

fn sdl_equal_statistics() -> Outcome {
    let mut r = rng(5);
    let h = rand_nd(&mut r, &[4, 3, 4, 4]);
    let star = rand_nd(&mut r, &[4, 3, 8, 8]);
    let tape = Tape::<f64>::inference();
    let hv = tape.constant(h.tensor());
    let sv = tape.constant(star.tensor());
    for use_std in [false, true] {
        let v = sdl_h(&hv, &hv, &sv, use_std).map_err(|e| e.to_string())?.item();
        close1("sdl_h(H, H, H*)", v, 2.0 * std::f64::consts::LN_2, 1e-15)?;
        let v = sdl_q(&hv, &hv, &sv, use_std).map_err(|e| e.to_string())?.item();
        close1("sdl_q(Q, Q, H*)", v, 2.0 * std::f64::consts::LN_2, 1e-15)?;
    }
    Ok(())
}

fn frechet_identity_and_symmetry() -> Outcome {
    let data = generate_dataset(96, 3, &[16]);
    let imgs: Vec<f64> = data
        .samples
        .iter()
        .flat_map(|s| drgan::data::to_chw::<f64>(&s.images[0], 16))
        .collect();
    let all = Tensor::from_f64(&[96, 3, 16, 16], &imgs);
    let ex = Extractor::new(EXTRACTOR_SEED);
    let same = toy_frechet(&all, &all, &ex).map_err(|e| e.to_string())?;
    ensure!(same <= 1e-6, "toy_frechet(X, X) = {same:e}");
    let a = all.slice0(0, 64);
    let b = all.slice0(32, 96);
    let ab = toy_frechet(&a, &b, &ex).map_err(|e| e.to_string())?;
    let ba = toy_frechet(&b, &a, &ex).map_err(|e| e.to_string())?;
    ensure!((ab - ba).abs() <= 1e-6, "asymmetric: {ab} vs {ba}");
    ensure!(toy_frechet(&all.slice0(0, 63), &a, &ex).is_err(), "63 samples accepted");
    Ok(())
}

fn word_attention_oracle() -> Outcome {
    // D̂ = 3 channels, N = 2 sub-regions, T = 4 words.
    let mut r = rng(7);
    let words = rand_nd(&mut r, &[1, 3, 4]);
    let h = rand_nd(&mut r, &[1, 3, 1, 2]);
    let u = rand_nd(&mut r, &[3, 3]);
    let tape = Tape::<f64>::inference();
    let (q, theta) = word_attention(
        &tape.constant(words.tensor()),
        &[4],
        &tape.constant(h.tensor()),
        &tape.constant(u.tensor()),
    )
    .map_err(|e| e.to_string())?;
    let (q_o, theta_o) = o::word_attention(&words, &[4], &h, &u);
    close("Q′", q.value().data(), &q_o.data, 1e-12)?;
    close("θ", theta.value().data(), &theta_o.data, 1e-12)?;
    // Convex combination: every q_j[k] lies between the extreme w′_i[k].
    for k in 0..3 {
        let wp: Vec<f64> = (0..4)
            .map(|i| (0..3).map(|e| u.data[k * 3 + e] * words.data[e * 4 + i]).sum())
            .collect();
        let lo = wp.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = wp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..2 {
            let v = q.value().data()[k * 2 + j];
            ensure!(
                v >= lo - 1e-12 && v <= hi + 1e-12,
                "q[{j}][{k}] = {v} outside [{lo}, {hi}]"
            );
        }
    }
    Ok(())
}

fn spatial_mask_oracle() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let m = SpatialMask::new(&mut Builder::new(&mut store, 8, GEN), "m", 2, 3);
    let f = rand_nd(&mut rng(8), &[1, 2, 4, 4]);
    let tape = Tape::inference();
    let got = m.forward(Ctx::new(&tape, &store), &tape.constant(f.tensor()));
    let (w3, b3) = conv_w(&store, &m.conv3);
    let (w1, b1) = conv_w(&store, &m.conv1);
    let want = o::spatial_mask(&f, (&w3, &b3), (&w1, &b1));
    ensure!(
        got.value().data().iter().all(|&x| x > 0.0 && x < 1.0),
        "mask outside (0, 1)"
    );
    close("mask", got.value().data(), &want.data, 1e-10)
}

fn refine_context_oracle() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let rb = ResBlock::new(&mut Builder::new(&mut store, 9, GEN), "r", 3);
    let q = rand_nd(&mut rng(9), &[2, 3, 4, 4]);
    let tape = Tape::inference();
    let got = rb.forward(Ctx::new(&tape, &store), &tape.constant(q.tensor()));
    let (a, ab) = conv_w(&store, &rb.conv_a);
    let (b, bb) = conv_w(&store, &rb.conv_b);
    close(
        "refined Q",
        got.value().data(),
        &o::resblock(&q, (&a, &ab), (&b, &bb)).data,
        1e-10,
    )
}

fn toy_model_config(resolutions: Vec<usize>) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        t_max: 6,
        text_dim: 3,
        ca_dim: 2,
        z_dim: 2,
        channels: 3,
        resolutions,
        disc_channels: 2,
        embed_dim: 4,
        vae_latent: 3,
    }
}

fn image_head_oracle() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let cfg = toy_model_config(vec![4, 8]);
    let g = Generator::new(&mut Builder::new(&mut store, 10, GEN), &cfg, true);
    let h = rand_nd(&mut rng(10), &[2, 3, 8, 8]);
    let tape = Tape::inference();
    let img = g.generate_image(Ctx::new(&tape, &store), 1, &tape.constant(h.tensor()));
    close(
        "image",
        img.value().data(),
        &conv(&store, &g.heads[1], &h).map(f64::tanh).data,
        1e-10,
    )
}

fn refinement_stage_composition() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let cfg = toy_model_config(vec![4, 8]);
    let g = Generator::new(&mut Builder::new(&mut store, 11, GEN), &cfg, true);
    let mut r = rng(11);
    let words = rand_nd(&mut r, &[2, 3, 4]);
    let lengths = vec![4, 2];
    let h_prev = rand_nd(&mut r, &[2, 3, 4, 4]);
    let real = rand_nd(&mut r, &[2, 3, 8, 8]);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let text = TextFeatures {
        words: tape.constant(words.tensor()),
        sentence: tape.constant(Tensor::zeros(&[2, 3])),
        lengths: lengths.clone(),
    };
    let out = g
        .sdm_forward(
            cx,
            1,
            &tape.constant(h_prev.tensor()),
            &text,
            Some(&tape.constant(real.tensor())),
        )
        .map_err(|e| e.to_string())?;

    let st = &g.stages[0];
    let d = st.sdm.as_ref().unwrap();
    let (q_prime, theta) = o::word_attention(&words, &lengths, &h_prev, &Nd::of(store.get(st.u)));
    let resblock = |rb: &ResBlock, x: &Nd| {
        let (a, ab) = conv_w(&store, &rb.conv_a);
        let (b, bb) = conv_w(&store, &rb.conv_b);
        o::resblock(x, (&a, &ab), (&b, &bb))
    };
    let mask = |m: &SpatialMask, x: &Nd| {
        let (w3, b3) = conv_w(&store, &m.conv3);
        let (w1, b1) = conv_w(&store, &m.conv1);
        o::spatial_mask(x, (&w3, &b3), (&w1, &b1))
    };
    let q = resblock(&d.refine, &q_prime);
    let h_plus = o::gate(&h_prev, &mask(&d.mask_h, &h_prev));
    let q_plus = o::gate(&q, &mask(&d.mask_q, &q));
    let fused = o::concat_channels(&[&q_plus, &h_plus]);
    let x = resblock(&st.fuse, &conv(&store, &st.fuse_in, &fused));
    let h = conv(&store, &st.up, &o::upsample2x(&x)).map(o::leaky);
    close("θ", out.theta.value().data(), &theta.data, 1e-10)?;
    close("H₁", out.h.value().data(), &h.data, 1e-10)?;
    let sdl = out.sdl.as_ref().ok_or("training mode returned no SDL inputs")?;
    close("H⁺", sdl.h_plus.value().data(), &h_plus.data, 1e-10)?;
    close(
        "H⁻",
        sdl.h_minus.value().data(),
        &h_prev.zip(&h_plus, |a, b| a - b).data,
        1e-10,
    )?;
    close("Q⁺", sdl.q_plus.value().data(), &q_plus.data, 1e-10)?;
    close(
        "Q⁻",
        sdl.q_minus.value().data(),
        &q.zip(&q_plus, |a, b| a - b).data,
        1e-10,
    )?;
    let enc = &g.rirm[0];
    let h_star = conv(&store, &enc.conv_b, &conv(&store, &enc.conv_a, &real).map(o::leaky)).map(o::leaky);
    close("H*", sdl.h_star.value().data(), &h_star.data, 1e-10)?;
    let recon = conv(&store, &g.heads[1], &h_star).map(f64::tanh);
    close("RIRM reconstruction", sdl.recon.value().data(), &recon.data, 1e-10)?;
    let test_mode = g
        .sdm_forward(cx, 1, &tape.constant(h_prev.tensor()), &text, None)
        .map_err(|e| e.to_string())?;
    ensure!(test_mode.sdl.is_none(), "testing mode produced SDL inputs");
    close("H₁ without I*", test_mode.h.value().data(), &h.data, 1e-10)
}

fn first_stage_depends_on_noise() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let cfg = toy_model_config(vec![8, 16]);
    let g = Generator::new(&mut Builder::new(&mut store, 12, GEN), &cfg, false);
    let mut r = rng(12);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let s = tape.constant(normal(&mut r, &[1, 2]));
    let h1 = g.sdm0_forward(cx, &tape.constant(normal(&mut r, &[1, 2])), &s);
    let h2 = g.sdm0_forward(cx, &tape.constant(normal(&mut r, &[1, 2])), &s);
    let diff = val(&h1)
        .zip(&val(&h2), |a, b| (a - b).abs())
        .data
        .into_iter()
        .fold(0.0, f64::max);
    ensure!(diff > 0.0, "two noise vectors gave the same H₀");
    ensure!(h1.shape() == vec![1, 3, 8, 8], "H₀ shape {:?}", h1.shape());
    Ok(())
}

fn dnm_with(seed: u64, vae: bool, autoencoder: bool) -> (ParamStore<f64>, Dnm) {
    let mut store = ParamStore::<f64>::new();
    let cfg = DnmConfig {
        resolution: 8,
        channels: 2,
        embed_dim: 5,
        latent: 3,
        cond_dim: 2,
    };
    let d = Dnm::new(&mut Builder::new(&mut store, seed, DISC), "d", cfg, vae, autoencoder);
    (store, d)
}

fn encode_oracle(store: &ParamStore<f64>, d: &Dnm, x: &Nd) -> Nd {
    let mut h = x.clone();
    for c in &d.enc {
        h = conv(store, c, &h).map(o::leaky);
    }
    let b = h.shape[0];
    let n = h.data.len() / b;
    lin(store, &d.enc_fc, &h.reshape(&[b, n])).map(o::leaky)
}

/// `D^E(z, s)` through the loop oracles.
fn decode_oracle(store: &ParamStore<f64>, d: &Dnm, z: &Nd, s: &Nd) -> Nd {
    let vae = d.vae.as_ref().unwrap();
    let b = z.shape[0];
    let c = d.cfg.channels;
    let mut h = lin(store, &vae.dec_fc, &concat_cols(z, s))
        .map(o::leaky)
        .reshape(&[b, c, 4, 4]);
    for up in &vae.dec_ups {
        h = conv(store, up, &o::upsample2x(&h)).map(o::leaky);
    }
    conv(store, &vae.dec_out, &h).map(f64::tanh)
}

/// `(reconstruction of target from v, KL)` with the posterior sample
/// `μ + σ ε` (or the mean in autoencoder mode).
fn recon_oracle(store: &ParamStore<f64>, d: &Dnm, v: &Nd, target: &Nd, s: &Nd, eps: &Nd) -> (f64, f64) {
    let vae = d.vae.as_ref().unwrap();
    let mu = lin(store, &vae.phi_mu, v);
    let (z, kl) = match &vae.phi_logvar {
        Some(l) => {
            let sigma = lin(store, l, v).map(|x| (0.5 * x).exp());
            let z = Nd::new(
                &mu.shape,
                (0..mu.data.len())
                    .map(|i| mu.data[i] + sigma.data[i] * eps.data[i])
                    .collect(),
            );
            let rows = |a: &Nd| a.data.chunks(a.shape[1]).map(<[f64]>::to_vec).collect::<Vec<_>>();
            (z, o::kl(&rows(&mu), &rows(&sigma)))
        }
        None => (mu, 0.0),
    };
    (o::l1_mean(target, &decode_oracle(store, d, &z, s)), kl)
}

fn disc_encode_oracle() -> Outcome {
    let (store, d) = dnm_with(13, false, false);
    let x = rand_nd(&mut rng(13), &[2, 3, 8, 8]);
    let tape = Tape::inference();
    let v = d
        .disc_encode(Ctx::new(&tape, &store), &tape.constant(x.tensor()))
        .map_err(|e| e.to_string())?;
    close("v", v.value().data(), &encode_oracle(&store, &d, &x).data, 1e-10)?;
    let bad = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
    ensure!(
        d.disc_encode(Ctx::new(&tape, &store), &bad).is_err(),
        "wrong resolution accepted"
    );
    Ok(())
}

fn condition_changes_outputs() -> Outcome {
    let (store, d) = dnm_with(14, true, false);
    let mut r = rng(14);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let v = tape.constant(normal(&mut r, &[2, 5]));
    let s1 = tape.constant(normal(&mut r, &[2, 2]));
    let s2 = tape.constant(normal(&mut r, &[2, 2]));
    let p1 = val(&d.classify(cx, &v, Some(&s1)));
    let p2 = val(&d.classify(cx, &v, Some(&s2)));
    ensure!(p1 != p2, "conditional classifier ignores s");
    ensure!(
        p1.data.iter().all(|&p| p > 0.0 && p < 1.0),
        "probabilities outside (0, 1)"
    );
    let z = tape.constant(normal(&mut r, &[2, 3]));
    let r1 = val(&d.vae_decode(cx, &z, &s1).map_err(|e| e.to_string())?);
    let r2 = val(&d.vae_decode(cx, &z, &s2).map_err(|e| e.to_string())?);
    ensure!(r1 != r2, "decoder ignores s");
    ensure!(r1.shape == vec![2, 3, 8, 8], "reconstruction shape {:?}", r1.shape);
    Ok(())
}

fn dal_oracles() -> Outcome {
    let (store, d) = dnm_with(15, true, false);
    let mut r = rng(15);
    let fake = rand_nd(&mut r, &[2, 3, 8, 8]);
    let real = rand_nd(&mut r, &[2, 3, 8, 8]);
    let s = rand_nd(&mut r, &[2, 2]);
    let (ef, er) = (Nd::of(&normal(&mut r, &[2, 3])), Nd::of(&normal(&mut r, &[2, 3])));
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let (fv, rv, sv) = (
        tape.constant(fake.tensor()),
        tape.constant(real.tensor()),
        tape.constant(s.tensor()),
    );
    let v_f = d.disc_encode(cx, &fv).map_err(|e| e.to_string())?;
    let v_r = d.disc_encode(cx, &rv).map_err(|e| e.to_string())?;
    let (eft, ert) = (ef.tensor(), er.tensor());
    let got_d = d
        .dal_discriminator_loss(
            cx,
            &v_f,
            &fv,
            &v_r,
            &rv,
            &sv,
            Latent::Sample(&eft),
            Latent::Sample(&ert),
        )
        .map_err(|e| e.to_string())?
        .item();
    let got_g = d
        .dal_generator_loss(cx, &v_f, &rv, &sv, Latent::Sample(&eft))
        .map_err(|e| e.to_string())?
        .item();
    let (of, or) = (encode_oracle(&store, &d, &fake), encode_oracle(&store, &d, &real));
    let (lf, kf) = recon_oracle(&store, &d, &of, &fake, &s, &ef);
    let (lr, kr) = recon_oracle(&store, &d, &or, &real, &s, &er);
    close1("discriminator-side DAL", got_d, lf + lr + kf + kr, 1e-10)?;
    let (lg, kg) = recon_oracle(&store, &d, &of, &real, &s, &ef);
    close1("generator-side DAL", got_g, kg + lg, 1e-10)?;
    ensure!(got_d >= 0.0 && got_g >= 0.0, "negative DAL");
    ensure!(
        d.ae_losses(cx, &v_f, &fv, &v_r, &rv, &sv).is_err(),
        "autoencoder losses outside DNM* mode"
    );
    Ok(())
}

fn autoencoder_oracle() -> Outcome {
    let (store, d) = dnm_with(16, true, true);
    let mut r = rng(16);
    let fake = rand_nd(&mut r, &[2, 3, 8, 8]);
    let real = rand_nd(&mut r, &[2, 3, 8, 8]);
    let s = rand_nd(&mut r, &[2, 2]);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let (fv, rv, sv) = (
        tape.constant(fake.tensor()),
        tape.constant(real.tensor()),
        tape.constant(s.tensor()),
    );
    let v_f = d.disc_encode(cx, &fv).map_err(|e| e.to_string())?;
    let v_r = d.disc_encode(cx, &rv).map_err(|e| e.to_string())?;
    let (dl, gl) = d.ae_losses(cx, &v_f, &fv, &v_r, &rv, &sv).map_err(|e| e.to_string())?;
    let zeros = Nd::new(&[2, 3], vec![0.0; 6]);
    let (of, or) = (encode_oracle(&store, &d, &fake), encode_oracle(&store, &d, &real));
    let (lf, _) = recon_oracle(&store, &d, &of, &fake, &s, &zeros);
    let (lr, _) = recon_oracle(&store, &d, &or, &real, &s, &zeros);
    let (lg, _) = recon_oracle(&store, &d, &of, &real, &s, &zeros);
    close1("DNM* discriminator loss", dl.item(), lf + lr, 1e-10)?;
    close1("DNM* generator loss", gl.item(), lg, 1e-10)
}

fn batch_stats_oracle() -> Outcome {
    let f = rand_nd(&mut rng(17), &[5, 3, 4, 2]);
    let tape = Tape::<f64>::inference();
    let st = batch_stats(&tape.constant(f.tensor())).map_err(|e| e.to_string())?;
    let (m, v) = o::batch_stats(&f);
    close("mean", st.mean.value().data(), &m, 1e-12)?;
    close("var", st.var.value().data(), &v, 1e-12)?;
    let two = Tensor::from_f64(&[2, 1], &[0.0, 2.0]);
    let st = batch_stats(&tape.constant(two)).map_err(|e| e.to_string())?;
    close("{0, 2}", &[st.mean.item(), st.var.item()], &[1.0, 1.0], 0.0)?;
    ensure!(
        batch_stats(&tape.constant(Tensor::<f64>::zeros(&[1, 3, 2, 2]))).is_err(),
        "batch of one accepted"
    );
    Ok(())
}

fn sdl_oracle() -> Outcome {
    let mut r = rng(18);
    let plus = rand_nd(&mut r, &[3, 2, 2, 2]);
    let minus = rand_nd(&mut r, &[3, 2, 2, 2]).map(|x| 2.0 * x + 0.5);
    let star = rand_nd(&mut r, &[3, 2, 4, 4]).map(|x| 0.7 * x - 0.2);
    let tape = Tape::<f64>::inference();
    let (p, m, s) = (
        tape.constant(plus.tensor()),
        tape.constant(minus.tensor()),
        tape.constant(star.tensor()),
    );
    for use_std in [false, true] {
        let want = o::sdl(&plus, &minus, &star, use_std);
        close1(
            "sdl_h",
            sdl_h(&p, &m, &s, use_std).map_err(|e| e.to_string())?.item(),
            want,
            1e-12,
        )?;
        close1(
            "sdl_q",
            sdl_q(&p, &m, &s, use_std).map_err(|e| e.to_string())?.item(),
            want,
            1e-12,
        )?;
        ensure!(want > 0.0, "SDL not positive");
    }
    // Limit case: key stats equal to the real ones, non-key stats far away.
    let far = star.map(|x| 40.0 * x + 30.0);
    let v = sdl_h(&s, &tape.constant(far.tensor()), &s, false)
        .map_err(|e| e.to_string())?
        .item();
    ensure!(v > 0.0 && v < 1e-6, "limit case gave {v}");
    ensure!(sdl_h(&p, &s, &s, false).is_err(), "mismatched halves accepted");
    Ok(())
}

fn weighted_sums() -> Outcome {
    let w = LossWeights::default();
    close(
        "default weights",
        &[w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.alpha],
        &[1e-3, 1e-1, 1e-5, 1.0, 1.0, 5.0],
        0.0,
    )?;
    let tape = Tape::<f64>::inference();
    let c = |x: f64| tape.constant(Tensor::scalar(x));
    let ln2 = std::f64::consts::LN_2;
    let sdm = sdm_loss(&c(2.0 * ln2), &c(2.0 * ln2), &c(1.0), &w).item();
    let want_sdm = 1e-3 * 2.0 * ln2 + 1e-1 * 2.0 * ln2 + 1e-5;
    close1("sdm_loss", sdm, want_sdm, 1e-15)?;
    close1("sdm_loss reference", sdm, 0.140026, 1e-6)?;
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..w
    };
    ensure!(sdm_loss(&c(3.0), &c(4.0), &c(5.0), &zero).item() == 0.0, "zero weights");

    let stage = GenStageLoss {
        adv: c(ln2),
        dal: Some(c(1.0)),
        sdm: Some(c(0.14)),
    };
    let total = total_generator_loss(&[stage], &c(ln2), &w).item();
    close1("generator total", total, ln2 + 1.0 + 0.14 + 5.0 * ln2, 1e-12)?;
    close1("generator total reference", total, 5.2988, 1e-4)?;

    let stages = [
        DiscStageLoss {
            adv: c(0.9),
            dal: Some(c(2.5)),
        },
        DiscStageLoss {
            adv: c(1.3),
            dal: Some(c(0.75)),
        },
    ];
    let w5 = LossWeights { lambda5: 0.4, ..w };
    close1(
        "discriminator total",
        total_discriminator_loss(&stages, &w5).item(),
        0.9 + 1.3 + 0.4 * (2.5 + 0.75),
        1e-12,
    )?;
    let plain = LossWeights { lambda5: 0.0, ..w };
    close1("λ5 = 0", total_discriminator_loss(&stages, &plain).item(), 2.2, 1e-12)
}

fn adversarial_oracles() -> Outcome {
    let mut r = rng(19);
    let logits: Vec<Nd> = (0..4).map(|_| rand_nd(&mut r, &[6]).map(|x| 4.0 * x)).collect();
    let probs: Vec<Nd> = logits.iter().map(|l| l.map(o::sigmoid)).collect();
    let tape = Tape::<f64>::inference();
    let lv: Vec<_> = logits.iter().map(|l| tape.constant(l.tensor())).collect();
    let pv: Vec<_> = probs.iter().map(|p| tape.constant(p.tensor())).collect();
    let want_g = o::adv_generator(&probs[0].data, &probs[1].data);
    close1(
        "generator (logits)",
        adv_generator_loss(&lv[0], &lv[1]).item(),
        want_g,
        1e-12,
    )?;
    close1(
        "generator (probs)",
        adv_generator_loss_probs(&pv[0], &pv[1]).item(),
        want_g,
        1e-12,
    )?;
    let want_d = o::adv_discriminator(&probs[0].data, &probs[1].data, &probs[2].data, &probs[3].data);
    close1(
        "discriminator (logits)",
        adv_discriminator_loss(&lv[0], &lv[1], &lv[2], &lv[3]).item(),
        want_d,
        1e-12,
    )?;
    close1(
        "discriminator (probs)",
        adv_discriminator_loss_probs(&pv[0], &pv[1], &pv[2], &pv[3]).item(),
        want_d,
        1e-12,
    )?;
    let half = tape.constant(Tensor::full(&[3], 0.5));
    close1(
        "all 0.5",
        adv_discriminator_loss_probs(&half, &half, &half, &half).item(),
        2.0 * std::f64::consts::LN_2,
        1e-15,
    )?;
    let zero = tape.constant(Tensor::zeros(&[3]));
    let p = adv_generator_loss_probs(&zero, &zero).item();
    ensure!(p.is_finite() && p > 0.0, "clamped log of 0 gave {p}");
    Ok(())
}

fn damsm_oracle() -> Outcome {
    let mut r = rng(20);
    let img = rand_nd(&mut r, &[3, 4]);
    let sent = rand_nd(&mut r, &[3, 4]);
    let tape = Tape::<f64>::inference();
    let got = damsm_lite(
        &tape.constant(img.tensor()),
        &tape.constant(sent.tensor()),
        DAMSM_TAU,
        None,
    )
    .map_err(|e| e.to_string())?
    .item();
    let rows = |a: &Nd| a.data.chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>();
    close1(
        "3×3 matching loss",
        got,
        o::contrastive(&rows(&img), &rows(&sent), DAMSM_TAU),
        1e-12,
    )?;
    let one = tape.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    ensure!(
        damsm_lite(&one, &one, DAMSM_TAU, None).is_err(),
        "batch of one accepted"
    );
    Ok(())
}

fn frechet_diagonal_closed_form() -> Outcome {
    // ±σ sign patterns: sample means and (unbiased) covariances are exact.
    let set = |mu: &[f64; 2], sd: &[f64; 2]| -> Vec<Vec<f64>> {
        (0..64)
            .map(|i| {
                let sx = if i % 2 == 0 { 1.0 } else { -1.0 };
                let sy = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
                vec![mu[0] + sx * sd[0], mu[1] + sy * sd[1]]
            })
            .collect()
    };
    let (m1, s1, m2, s2) = ([0.5, -1.0], [1.0, 2.0], [1.5, 0.25], [0.5, 3.0]);
    let k = (64.0f64 / 63.0).sqrt();
    let want = o::frechet_diagonal(&m1, &[s1[0] * k, s1[1] * k], &m2, &[s2[0] * k, s2[1] * k]);
    let got = frechet_distance(&set(&m1, &s1), &set(&m2, &s2)).map_err(|e| e.to_string())?;
    close1("diagonal Fréchet", got, want, 1e-9)
}

fn red_circle_pixels() -> Outcome {
    let spec = SceneSpec {
        shape: Shape::Circle,
        color: Color::Red,
        size: Size::Large,
        background: Background::Gray,
        offset: [0.0, 0.0],
    };
    let res = 32;
    let px = spec.render(res);
    let (mut fg, mut red) = (0usize, 0usize);
    for p in px.chunks(3) {
        if p != [128, 128, 128] {
            fg += 1;
            red += (p[0] > p[1] && p[0] > p[2]) as usize;
        }
    }
    let radius = 0.34 * res as f64;
    let area = std::f64::consts::PI * radius * radius;
    let rim = 2.0 * std::f64::consts::PI * radius;
    ensure!(red == fg, "{} of {fg} foreground pixels are not red-dominant", fg - red);
    ensure!(
        (fg as f64) >= area - rim && (fg as f64) <= area + rim,
        "{fg} foreground pixels for a disc of area {area:.1}"
    );
    let data = generate_dataset(1, 0, &[8]);
    let caption = &data.samples[0].caption;
    let spec = data.samples[0].spec.unwrap();
    ensure!(
        caption.contains(spec.shape.word()),
        "caption {caption:?} does not name {:?}",
        spec.shape
    );
    Ok(())
}

fn binomial_bound_oracle() -> Outcome {
    for (n, p, level) in [(500, 0.1, 0.99), (100, 0.1, 0.99), (500, 0.1, 0.5), (37, 0.3, 0.95)] {
        close1(
            &format!("bound n={n} p={p} level={level}"),
            chance_upper_bound(n, p, level),
            o::binomial_upper(n, p, level),
            1e-12,
        )?;
    }
    Ok(())
}

fn random_matcher_at_chance() -> Outcome {
    let mut r = rng(21);
    let n = 500;
    let emb = |r: &mut ChaCha8Rng| (0..n).map(|_| normal(r, &[8]).data().to_vec()).collect::<Vec<_>>();
    let (img, sent) = (emb(&mut r), emb(&mut r));
    let texts: Vec<String> = (0..n).map(|i| format!("caption {i}")).collect();
    let got = r_precision_lite(&img, &sent, &texts, 5);
    let upper = o::binomial_upper(n, 0.1, 0.995);
    let lower = 1.0 - o::binomial_upper(n, 0.9, 0.995);
    ensure!(
        got >= lower && got <= upper,
        "random matcher scored {got}, 99% band [{lower}, {upper}]"
    );
    let perfect = r_precision_lite(&img, &img, &texts, 5);
    ensure!(perfect == 1.0, "perfect matcher scored {perfect}");
    Ok(())
}

fn heatmaps_equal_attention() -> Outcome {
    let mut r = rng(22);
    let words = rand_nd(&mut r, &[2, 3, 5]).map(|x| 3.0 * x);
    let h = rand_nd(&mut r, &[2, 4, 4, 4]).map(|x| 3.0 * x);
    let u = rand_nd(&mut r, &[4, 3]);
    let lengths = [5, 3];
    let (_, theta) = o::word_attention(&words, &lengths, &h, &u);
    let maps = top_word_heatmaps(&theta.tensor(), 1, 3, 3);
    ensure!(maps.len() == 3, "{} heatmaps", maps.len());
    for m in &maps {
        ensure!(m.side == 4, "side {}", m.side);
        let column: Vec<f64> = (0..16).map(|j| theta.data[(16 + j) * 5 + m.position]).collect();
        close("heatmap", &m.raw, &column, 0.0)?;
        let (lo, hi) = m
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
        ensure!(lo == 0.0 && hi == 1.0, "normalized range [{lo}, {hi}]");
    }
    Ok(())
}

fn reparameterization_statistics() -> Outcome {
    let n = 100_000;
    let (mu, sigma) = (0.7f64, 1.8f64);
    let mut r = rng(23);
    let eps = normal(&mut r, &[n, 1]);
    let tape = Tape::<f64>::inference();
    let z = reparameterize(
        &tape.constant(Tensor::full(&[n, 1], mu)),
        &tape.constant(Tensor::full(&[n, 1], 2.0 * sigma.ln())),
        &tape.constant(eps),
    );
    let z = val(&z).data;
    let mean = z.iter().sum::<f64>() / n as f64;
    let sd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sigma / (n as f64).sqrt();
    ensure!(
        (mean - mu).abs() <= 4.0 * se,
        "sample mean {mean}, want {mu} ± {}",
        4.0 * se
    );
    ensure!((sd / sigma - 1.0).abs() <= 0.02, "sample std {sd}, want {sigma} ± 2%");
    Ok(())
}

/// The step losses equal the loop oracles composed the way the objectives
/// are written, on a tiny full model.
fn step_losses_match_composition() -> Outcome {
    let data = generate_dataset(3, 5, &[8, 16]);
    let vocab = data.vocab();
    let mut cfg = TrainConfig {
        batch_size: 3,
        ablation: Ablation::dr_gan(),
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        vocab_size: vocab.len(),
        ..toy_model_config(vec![8, 16])
    };
    cfg.weights.lambda5 = 0.7;
    cfg.weights.lambda4 = 0.6;
    let w = effective_weights(&cfg);
    let mut store = ParamStore::<f64>::new();
    let models = Models::new(&mut store, &cfg.model, &cfg.ablation, 11);
    let batch = data
        .load_batch::<f64>(&[0, 1, 2], &vocab, cfg.model.t_max)
        .map_err(|e| e.to_string())?;
    let noise = StepNoise::<f64>::draw(3, 0, &cfg.model, 3);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let pass = generator_pass(&models, cx, &batch, &noise).map_err(|e| e.to_string())?;
    let (g_total, _) = generator_loss(&models, cx, &pass, &batch.keys, &noise, &cfg, 0).map_err(|e| e.to_string())?;
    let fakes: Vec<Tensor<f64>> = pass.out.images.iter().map(|v| v.value().as_ref().clone()).collect();
    let s = pass.cond.s.value().as_ref().clone();
    let (d_total, _) =
        discriminator_loss(&models, cx, &fakes, &batch.images, &s, &noise, &cfg, 0).map_err(|e| e.to_string())?;

    let s_nd = Nd::of(&s);
    let probs = |d: &Dnm, x: &Nd, cond: bool| -> Vec<f64> {
        let v = encode_oracle(&store, d, x);
        let out = if cond {
            let hidden = lin(&store, &d.cond_hidden, &concat_cols(&v, &s_nd)).map(o::leaky);
            lin(&store, &d.cond_out, &hidden)
        } else {
            lin(&store, &d.uncond, &v)
        };
        out.data.iter().map(|&l| o::sigmoid(l)).collect()
    };
    let (mut want_d, mut want_g) = (0.0, 0.0);
    for (i, d) in models.dnms.iter().enumerate() {
        let fake = Nd::of(&fakes[i]);
        let real = Nd::of(&batch.images[i]);
        want_d += o::adv_discriminator(
            &probs(d, &real, false),
            &probs(d, &real, true),
            &probs(d, &fake, false),
            &probs(d, &fake, true),
        );
        want_g += o::adv_generator(&probs(d, &fake, false), &probs(d, &fake, true));
        let (vf, vr) = (encode_oracle(&store, d, &fake), encode_oracle(&store, d, &real));
        let (lf, kf) = recon_oracle(&store, d, &vf, &fake, &s_nd, &Nd::of(&noise.d_fake[i]));
        let (lr, kr) = recon_oracle(&store, d, &vr, &real, &s_nd, &Nd::of(&noise.d_real[i]));
        want_d += w.lambda5 * (lf + lr + kf + kr);
        let (lg, kg) = recon_oracle(&store, d, &vf, &real, &s_nd, &Nd::of(&noise.g_fake[i]));
        want_g += w.lambda4 * (lg + kg);
        if i > 0 {
            let t = pass.out.stages[i - 1].sdl.as_ref().unwrap();
            let star = val(&t.h_star);
            want_g += w.lambda1 * o::sdl(&val(&t.h_plus), &val(&t.h_minus), &star, false)
                + w.lambda2 * o::sdl(&val(&t.q_plus), &val(&t.q_minus), &star, false)
                + w.lambda3 * o::l1_mean(&val(&t.recon), &val(&t.real));
        }
    }
    let rows = |v: &Var<'_, f64>| {
        val(v)
            .data
            .chunks(v.shape()[1])
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>()
    };
    let last = cfg.model.resolutions.len() - 1;
    let sent = rows(&pass.text.sentence);
    let keys_distinct = batch.keys.iter().collect::<std::collections::HashSet<_>>().len() == batch.keys.len();
    ensure!(keys_distinct, "test batch repeats a caption");
    let emb_fake = rows(&models.matcher.embed(cx, &pass.out.images[last], true));
    let emb_real = rows(&models.matcher.embed(cx, &pass.reals[last], false));
    want_g += w.alpha * o::contrastive(&emb_fake, &sent, DAMSM_TAU);
    want_g += w.damsm_real * o::contrastive(&emb_real, &sent, DAMSM_TAU);
    let (mu, lv) = (rows(&pass.cond.mu), rows(&pass.cond.logvar));
    let sigma: Vec<Vec<f64>> = lv.iter().map(|r| r.iter().map(|l| (0.5 * l).exp()).collect()).collect();
    want_g += w.ca_kl * o::kl(&mu, &sigma);
    close1("discriminator step loss", d_total.item(), want_d, 1e-9)?;
    close1("generator step loss", g_total.item(), want_g, 1e-9)
}
