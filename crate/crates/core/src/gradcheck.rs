//! Central finite-difference gradient checking (64-bit).

use crate::error::Result;
use crate::graph::{Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

/// Max over all parameter entries of
/// `|analytic - central| / max(1e-8, |central|)`.
///
/// `f` builds the scalar output on a fresh graph from the current parameter values.
pub fn grad_check<F>(f: F, store: &mut ParamStore<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_entries(f, store, h)
}

/// Outcome of [`grad_check_sampled`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose `+h` or `-h` evaluation landed on a different ReLU /
    /// max-pool pattern than the unperturbed graph; their central difference
    /// straddles a kink and is not a derivative estimate.
    pub straddled: usize,
}

/// Like [`grad_check`], but probes at most `per_param` seeded entries of each
/// parameter and leaves out entries whose stencil crosses a kink.
pub fn grad_check_sampled<F>(
    mut f: F,
    store: &mut ParamStore<f64>,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<SampledCheck>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out, store)?;
    let pattern = g.kink_pattern();
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok((g.value(out).data()[0], g.kink_pattern() == pattern))
    };

    let mut res = SampledCheck {
        max_rel_error: 0.0,
        checked: 0,
        straddled: 0,
    };
    for i in 0..store.len() {
        let id = ParamId(i);
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.len();
        let picks = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for k in picks {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let (up, same_up) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let (down, same_down) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            if !(same_up && same_down) {
                res.straddled += 1;
                continue;
            }
            let central = (up - down) / (2.0 * h);
            let err = (analytic[i][k] - central).abs() / central.abs().max(1e-8);
            res.max_rel_error = res.max_rel_error.max(err);
            res.checked += 1;
        }
    }
    Ok(res)
}

fn check_entries<F>(mut f: F, store: &mut ParamStore<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..store.len() {
        let id = ParamId(i);
        if store.get(id).frozen {
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let central = (up - down) / (2.0 * h);
            let err = (analytic[i][k] - central).abs() / central.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
