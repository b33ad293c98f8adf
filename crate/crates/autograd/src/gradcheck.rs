//! Central finite-difference gradient checking (double precision).

use rand::seq::index::sample;
use rand::Rng;

use crate::{Group, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all, if the tensor is smaller).
    pub coords_per_param: usize,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_param: 6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the two step sizes disagreed (a kink of
    /// relu/abs lies inside the stencil).
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare the tape gradient of `loss` to central differences on a random
/// subset of coordinates of each parameter in `ids`.
pub fn check_gradients<R, F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    rng: &mut R,
    loss: F,
) -> GradCheckReport
where
    R: Rng + ?Sized,
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Var<'t, f64>,
{
    let groups: Vec<Group> = {
        let mut g: Vec<Group> = ids.iter().map(|&id| store.group(id)).collect();
        g.sort();
        g.dedup();
        g
    };
    let analytic = {
        let tape = Tape::new(&groups);
        let l = loss(&tape, store);
        tape.backward(l)
    };
    let eval = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::inference();
        loss(&tape, store).item()
    };
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, opts.coords_per_param).into_vec()
        };
        for i in picks {
            let central = |store: &mut ParamStore<f64>, h: f64| -> f64 {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let fp = eval(store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let fm = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                (fp - fm) / (2.0 * h)
            };
            let n1 = central(store, opts.eps);
            let n2 = central(store, opts.eps * 0.5);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let scale = n1.abs().max(n2.abs()).max(opts.floor);
            if (n1 - n2).abs() > 1e-4 * scale {
                report.skipped_kinks += 1;
                continue;
            }
            let rel = (a - n2).abs() / a.abs().max(n2.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(id).to_string(), i, a, n2));
            }
        }
    }
    report
}
