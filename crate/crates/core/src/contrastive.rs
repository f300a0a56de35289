//! Pairwise multi-view NT-Xent objective.
//!
//! For two views `i`, `j` of the same `N` instances, the directed loss of
//! anchor `l` is the cross-entropy of picking candidate `l` among all `N`
//! candidates of view `j` under cosine similarities scaled by `1/tau`. Only
//! cross-view candidates enter the denominator. The pair loss sums both
//! directions and averages over anchors; the multi-view loss sums the pair
//! loss over every ordered pair of distinct views and divides by `K(K-1)/2`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Temperature grid explored for replication runs.
pub const TEMPERATURE_GRID: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.5 }
    }
}

impl ContrastiveConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        check_tau(temperature)?;
        Ok(ContrastiveConfig { temperature })
    }
}

/// Per-view projected matrices, row `l` of every view belonging to instance `l`.
#[derive(Clone, Debug)]
pub struct ProjectedBatch<T = f32> {
    views: Vec<Tensor<T>>,
}

impl<T: Real> ProjectedBatch<T> {
    pub fn new(views: Vec<Tensor<T>>) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::contract("no views"))?;
        let dims = first.dims2()?;
        for v in &views {
            if v.dims2()? != dims {
                return Err(Error::shape(format!(
                    "projected views disagree: {:?} vs {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
        }
        Ok(ProjectedBatch { views })
    }

    pub fn views(&self) -> &[Tensor<T>] {
        &self.views
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("temperature must be positive, got {tau}")))
    }
}

fn check_pair<T: Real>(g: &Graph<T>, zi: Var, zj: Var) -> Result<()> {
    let (a, b) = (g.value(zi).dims2()?, g.value(zj).dims2()?);
    if a != b {
        return Err(Error::shape(format!("view pair {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Scaled similarity logits `S / tau` of shape `[N, N]`.
fn logits<T: Real>(g: &mut Graph<T>, zi: Var, zj: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_pair(g, zi, zj)?;
    let s = g.cosine_similarity(zi, zj)?;
    Ok(g.scale(s, 1.0 / tau))
}

/// Per-anchor losses `l_l^{i->j}`, shape `[N]`.
pub fn directed_losses<T: Real>(g: &mut Graph<T>, zi: Var, zj: Var, tau: f64) -> Result<Var> {
    let lg = logits(g, zi, zj, tau)?;
    let lse = g.log_sum_exp_rows(lg)?;
    let pos = g.diag(lg)?;
    g.sub(lse, pos)
}

/// `L^{i,j} = (1/N) sum_l (l_l^{i->j} + l_l^{j->i})`, shape `[1]`.
pub fn pair_loss<T: Real>(g: &mut Graph<T>, zi: Var, zj: Var, tau: f64) -> Result<Var> {
    let lg = logits(g, zi, zj, tau)?;
    let pos = g.diag(lg)?;
    let lse_ij = g.log_sum_exp_rows(lg)?;
    let lg_t = g.transpose(lg)?;
    let lse_ji = g.log_sum_exp_rows(lg_t)?;
    let l_ij = g.sub(lse_ij, pos)?;
    let l_ji = g.sub(lse_ji, pos)?;
    let both = g.add(l_ij, l_ji)?;
    Ok(g.mean_all(both))
}

/// Sum of `L^{k,k'}` over ordered pairs `k != k'`, divided by `K(K-1)/2`.
pub fn multiview_loss<T: Real>(g: &mut Graph<T>, views: &[Var], tau: f64) -> Result<Var> {
    let k = views.len();
    if k < 2 {
        return Err(Error::contract(format!("need at least two views, got {k}")));
    }
    let mut total: Option<Var> = None;
    for (a, &za) in views.iter().enumerate() {
        for (b, &zb) in views.iter().enumerate() {
            if a == b {
                continue;
            }
            let l = pair_loss(g, za, zb, tau)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(g.scale(total.expect("k >= 2"), 1.0 / pairs))
}

pub fn cosine_similarity_matrix<T: Real>(zi: &Tensor<T>, zj: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.input(zi.clone()), g.input(zj.clone()));
    check_pair(&g, a, b)?;
    let s = g.cosine_similarity(a, b)?;
    Ok(g.value(s).clone())
}

pub fn nt_xent_directed<T: Real>(zi: &Tensor<T>, zj: &Tensor<T>, tau: f64) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.input(zi.clone()), g.input(zj.clone()));
    let l = directed_losses(&mut g, a, b, tau)?;
    Ok(g.value(l).data().to_vec())
}

pub fn pair_loss_value<T: Real>(zi: &Tensor<T>, zj: &Tensor<T>, tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let (a, b) = (g.input(zi.clone()), g.input(zj.clone()));
    let l = pair_loss(&mut g, a, b, tau)?;
    Ok(g.value(l).data()[0])
}

pub fn pairwise_multiview_loss<T: Real>(batch: &ProjectedBatch<T>, tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = batch.views().iter().map(|v| g.input(v.clone())).collect();
    let l = multiview_loss(&mut g, &vars, tau)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rows_give_identity_similarity() {
        let eye = Tensor::<f64>::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
        let s = cosine_similarity_matrix(&eye, &eye).unwrap();
        for (k, &v) in s.data().iter().enumerate() {
            let want = if k % 4 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn single_instance_loss_is_zero() {
        let z = Tensor::<f64>::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap();
        let w = Tensor::<f64>::new(vec![1, 3], vec![1.0, 4.0, 0.0]).unwrap();
        for tau in TEMPERATURE_GRID {
            assert_eq!(nt_xent_directed(&z, &w, tau).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let z = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = nt_xent_directed(&z, &z, 0.5).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        for v in l {
            assert!((v - want).abs() < 1e-7, "{v} vs {want}");
        }
    }

    #[test]
    fn bad_temperature_and_view_count() {
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(nt_xent_directed(&z, &z, 0.0), Err(Error::Contract(_))));
        let batch = ProjectedBatch::new(vec![z]).unwrap();
        assert!(matches!(pairwise_multiview_loss(&batch, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_views_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(pair_loss_value(&a, &b, 0.5), Err(Error::Shape(_))));
    }
}
