//! Representation alignment (CCA / PWCCA), significance tests and intervals.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{mvf_write, Dataset};
use crate::encoders::ViewClassifier;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Relative cutoff on singular values when whitening each view.
pub const RANK_TOL: f64 = 1e-6;
/// Largest combined sample size for which exact p-values are enumerated.
pub const EXACT_MAX_N: usize = 16;
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct CcaResult {
    /// Canonical correlations, non-increasing, clipped to `[0, 1]`.
    pub rho: Vec<f64>,
    /// Canonical directions in the original feature spaces, one column each.
    pub x_dirs: Tensor<f64>,
    pub y_dirs: Tensor<f64>,
    /// Canonical variates of X, `[N, r]`.
    pub x_variates: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    pub score: f64,
    pub rank: usize,
}

impl AlignmentReport {
    pub const CSV_HEADER: &'static str = "pwcca,n_rho,max_rho,weighting,rank_tol";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.10},{},{:.10},first,{:e}",
            self.score,
            self.rho.len(),
            self.rho.first().copied().unwrap_or(0.0),
            RANK_TOL
        )
    }
}

fn to_centered_matrix<T: Real>(x: &Tensor<T>, what: &str) -> Result<DMatrix<f64>> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(Error::contract(format!("{what}: CCA needs at least 2 rows, got {n}")));
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| x.get2(i, j).as_f64());
    for j in 0..d {
        let mean = m.column(j).iter().sum::<f64>() / n as f64;
        m.column_mut(j).iter_mut().for_each(|v| *v -= mean);
    }
    Ok(m)
}

struct Whitened {
    /// Orthonormal basis of the centered column space, `[N, r]`.
    u: DMatrix<f64>,
    /// Maps coordinates in `u` back to feature-space directions, `[d, r]`.
    back: DMatrix<f64>,
}

fn whiten(m: &DMatrix<f64>, what: &str) -> Result<Whitened> {
    let svd = m.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateInput(format!("{what}: SVD did not converge"))),
    };
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    if !(smax > 0.0) || !smax.is_finite() {
        return Err(Error::DegenerateInput(format!("{what}: zero variance")));
    }
    let mut keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= RANK_TOL * smax).collect();
    keep.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let n = m.nrows();
    let d = m.ncols();
    let r = keep.len();
    let mut ub = DMatrix::zeros(n, r);
    let mut back = DMatrix::zeros(d, r);
    for (c, &k) in keep.iter().enumerate() {
        ub.set_column(c, &u.column(k));
        for j in 0..d {
            back[(j, c)] = vt[(k, j)] / s[k];
        }
    }
    Ok(Whitened { u: ub, back })
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    let c = m.ncols();
    Tensor::from_fn(&[m.nrows(), c], |k| m[(k / c, k % c)])
}

pub fn cca<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<CcaResult> {
    let (nx, _) = x.dims2()?;
    let (ny, _) = y.dims2()?;
    if nx != ny {
        return Err(Error::shape(format!("CCA inputs have {nx} and {ny} rows")));
    }
    let xc = to_centered_matrix(x, "X")?;
    let yc = to_centered_matrix(y, "Y")?;
    let wx = whiten(&xc, "X")?;
    let wy = whiten(&yc, "Y")?;
    let cross = wx.u.transpose() * &wy.u;
    let svd = cross.svd(true, true);
    let (a, bt) = match (svd.u, svd.v_t) {
        (Some(a), Some(bt)) => (a, bt),
        _ => return Err(Error::DegenerateInput("cross-covariance SVD did not converge".into())),
    };
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let r = order.len();
    let rho: Vec<f64> = order.iter().map(|&i| sv[i].clamp(0.0, 1.0)).collect();
    let mut a_sorted = DMatrix::zeros(a.nrows(), r);
    let mut b_sorted = DMatrix::zeros(bt.ncols(), r);
    for (c, &i) in order.iter().enumerate() {
        a_sorted.set_column(c, &a.column(i));
        b_sorted.set_column(c, &bt.row(i).transpose());
    }
    let x_variates = &wx.u * &a_sorted;
    Ok(CcaResult {
        rho,
        x_dirs: to_tensor(&(&wx.back * &a_sorted)),
        y_dirs: to_tensor(&(&wy.back * &b_sorted)),
        x_variates: to_tensor(&x_variates),
    })
}

/// Projection-weighted CCA; `x` is the weighting view.
pub fn pwcca<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<AlignmentReport> {
    let res = cca(x, y)?;
    let xc = to_centered_matrix(x, "X")?;
    let (n, r) = res.x_variates.dims2()?;
    let h = DMatrix::from_fn(n, r, |i, j| res.x_variates.get2(i, j));
    let proj = h.transpose() * &xc;
    let raw: Vec<f64> = (0..r).map(|i| proj.row(i).iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput(
            "canonical variates do not project onto X".into(),
        ));
    }
    let alpha: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let score = alpha.iter().zip(&res.rho).map(|(a, p)| a * p).sum();
    Ok(AlignmentReport {
        rank: r,
        rho: res.rho,
        alpha,
        score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MwuMethod {
    Exact,
    NormalApprox,
}

impl MwuMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MwuMethod::Exact => "exact",
            MwuMethod::NormalApprox => "normal-approx",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceResult {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: MwuMethod,
    pub alpha: f64,
}

impl SignificanceResult {
    pub const CSV_HEADER: &'static str = "u,p_value,method,alpha,significant";

    pub fn significant(&self) -> bool {
        self.p_value < self.alpha
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{},{},{}",
            self.u,
            self.p_value,
            self.method.as_str(),
            self.alpha,
            self.significant()
        )
    }
}

/// Average ranks (1-based, ascending values) with ties sharing their mean rank.
pub fn rank_with_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        groups.push(j - i + 1);
        i = j + 1;
    }
    groups
}

/// Number of arrangements yielding each U value, index = U.
fn u_counts(n1: usize, n2: usize) -> Vec<f64> {
    // table[j][u]: arrangements of i first-sample and j second-sample items
    let max_u = n1 * n2;
    let mut prev: Vec<Vec<f64>> = (0..=n2)
        .map(|_| {
            let mut v = vec![0.0; max_u + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
        cur[0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest element from the first sample adds j to U
                let a = if u >= j { prev[j][u - j] } else { 0.0 };
                cur[j][u] = a + cur[j - 1][u];
            }
        }
        prev = cur;
    }
    prev.swap_remove(n2)
}

fn exact_p(u: f64, n1: usize, n2: usize) -> f64 {
    let counts = u_counts(n1, n2);
    let total: f64 = counts.iter().sum();
    let k = u.round() as usize;
    let lower: f64 = counts[..=k].iter().sum::<f64>() / total;
    let upper: f64 = counts[k..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p(u: f64, n1: usize, n2: usize, ties: &[usize]) -> f64 {
    let (f1, f2) = (n1 as f64, n2 as f64);
    let n = f1 + f2;
    let mu = f1 * f2 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::standard();
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Two-sided Mann–Whitney U test. Exact enumeration is used for small
/// tie-free samples, the tie-corrected normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    let mut all = a.to_vec();
    all.extend_from_slice(b);
    let has_ties = tie_groups(&all).iter().any(|&t| t > 1);
    let method = if a.len() + b.len() <= EXACT_MAX_N && !has_ties {
        MwuMethod::Exact
    } else {
        MwuMethod::NormalApprox
    };
    mann_whitney_u_with(a, b, method)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: MwuMethod) -> Result<SignificanceResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("Mann-Whitney U needs two non-empty samples"));
    }
    let mut all = a.to_vec();
    all.extend_from_slice(b);
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("Mann-Whitney U samples must be finite"));
    }
    let ranks = rank_with_ties(&all);
    let (n1, n2) = (a.len(), b.len());
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let ties = tie_groups(&all);
    let p_value = match method {
        MwuMethod::Exact => {
            if ties.iter().any(|&t| t > 1) {
                return Err(Error::contract("exact Mann-Whitney p requires distinct values"));
            }
            exact_p(u, n1, n2)
        }
        MwuMethod::NormalApprox => normal_p(u, n1, n2, &ties),
    };
    Ok(SignificanceResult {
        u,
        p_value,
        method,
        alpha: ALPHA,
    })
}

/// Mean and Student-t 95% half-width with `n - 1` degrees of freedom.
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::contract(format!("confidence interval needs n >= 2, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::contract(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

/// Encoder representations for every record, `[N, 128]`, in manifest order.
pub fn representations(model: &ViewClassifier<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    let v = ds.view_index(&model.spec.view)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in idx.chunks(256) {
        let reps = model.representations(&ds.batch(v, chunk))?;
        dim = reps.shape()[1];
        data.extend_from_slice(reps.data());
    }
    Tensor::new(vec![idx.len(), dim], data)
}

pub fn export_representations(model: &ViewClassifier<f32>, ds: &Dataset, path: &Path) -> Result<Tensor<f32>> {
    let reps = representations(model, ds)?;
    mvf_write(path, &reps)?;
    Ok(reps)
}

/// CSV text for a list of alignment results keyed by view pair.
pub fn alignment_csv(rows: &[(String, String, AlignmentReport)]) -> String {
    let mut out = format!("view_a,view_b,{}\n", AlignmentReport::CSV_HEADER);
    for (a, b, r) in rows {
        let _ = writeln!(out, "{a},{b},{}", r.csv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn self_correlation_is_one() {
        let x = gaussian(200, 6, 1);
        let r = cca(&x, &x).unwrap();
        assert_eq!(r.rho.len(), 6);
        assert!(r.rho.iter().all(|&p| (p - 1.0).abs() < 1e-6));
        let a = pwcca(&x, &x).unwrap();
        assert!((a.score - 1.0).abs() < 1e-6);
        assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn variates_match_directions() {
        let x = gaussian(100, 4, 2);
        let y = gaussian(100, 3, 3);
        let r = cca(&x, &y).unwrap();
        assert_eq!(r.rho.len(), 3);
        assert!(r.rho.windows(2).all(|w| w[0] >= w[1]));
        let xc = to_centered_matrix(&x, "X").unwrap();
        let dirs = DMatrix::from_fn(4, 3, |i, j| r.x_dirs.get2(i, j));
        let h = xc * dirs;
        for i in 0..100 {
            for j in 0..3 {
                assert!((h[(i, j)] - r.x_variates.get2(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn independent_inputs_have_low_correlation() {
        let x = gaussian(2000, 10, 4);
        let y = gaussian(2000, 10, 5);
        assert!(cca(&x, &y).unwrap().rho[0] < 0.2);
    }

    #[test]
    fn degenerate_inputs() {
        let x = Tensor::<f64>::full(&[5, 3], 2.0);
        let y = gaussian(5, 2, 0);
        assert!(matches!(cca(&x, &y), Err(Error::DegenerateInput(_))));
        let one = gaussian(1, 2, 0);
        assert!(matches!(cca(&one, &one), Err(Error::Contract(_))));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(rank_with_ties(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(rank_with_ties(&[2.0, 2.0, 1.0]), vec![2.5, 2.5, 1.0]);
    }

    #[test]
    fn mwu_small_exact() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.method, MwuMethod::Exact);
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let s = mann_whitney_u(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.u, 9.0);
        assert_eq!(s.p_value, r.p_value);
    }

    #[test]
    fn mwu_identical_samples() {
        let a = [0.3, 0.5, 0.7, 0.9];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 8.0);
        assert_eq!(r.p_value, 1.0);
        assert!(mann_whitney_u(&[], &a).is_err());
    }

    #[test]
    fn u_count_totals() {
        let c = u_counts(3, 3);
        assert_eq!(c.iter().sum::<f64>(), 20.0);
        assert_eq!(c[0], 1.0);
        assert_eq!(c[9], 1.0);
        assert_eq!(u_counts(10, 10).iter().sum::<f64>(), 184756.0);
    }

    #[test]
    fn ci_cases() {
        let (m, h) = mean_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 6.353).abs() < 1e-3);
        assert_eq!(mean_ci95(&[0.4; 5]).unwrap().1, 0.0);
        assert!(mean_ci95(&[1.0]).is_err());
    }
}
