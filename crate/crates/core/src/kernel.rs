//! Finite-state Markov kernels: validation, total variation distances,
//! Dobrushin coefficients, stationary distributions and simultaneous
//! ergodicity certificates.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for identities that hold exactly in exact arithmetic
/// (row sums, invariance).
pub const EXACT_TOL: f64 = 1e-12;

/// Tolerance for bound checks accumulated over matrix powers.
pub const BOUND_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel must have at least one state")]
    Empty,
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("entry ({row}, {col}) = {value} is not a probability")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("distribution is invalid: {0}")]
    InvalidDistribution(String),
    #[error("kernel is not irreducible")]
    NotIrreducible,
    #[error("stationary distribution is not unique")]
    NonUnique,
    #[error("distribution is not stationary for kernel {index} (residual {residual:e})")]
    NotStationary { index: usize, residual: f64 },
    #[error("no power m <= {horizon} contracts every kernel in total variation")]
    NotSimultaneouslyErgodic { horizon: usize },
    #[error("horizon must be at least 2, got {0}")]
    HorizonTooSmall(usize),
}

/// Row-stochastic matrix on `n` states, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    n: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    /// Validates and builds a kernel from its rows.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, KernelError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(KernelError::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(n, data)
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if n == 0 {
            return Err(KernelError::Empty);
        }
        if data.len() != n * n {
            return Err(KernelError::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        for (i, row) in data.chunks_exact(n).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(KernelError::InvalidEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > EXACT_TOL {
                return Err(KernelError::RowSum { row: i, sum });
            }
        }
        Ok(Self { n, data })
    }

    /// Builds without validation. Only for results of operations that
    /// preserve stochasticity up to rounding (products, mixtures).
    pub(crate) fn from_raw(n: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn identity(n: usize) -> Result<Self, KernelError> {
        if n == 0 {
            return Err(KernelError::Empty);
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Ok(Self { n, data })
    }

    /// The kernel whose every row is `pi`.
    pub fn independent(pi: &Distribution) -> Self {
        let n = pi.len();
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            data.extend_from_slice(pi.weights());
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.data
    }

    /// Matrix product `self · other` (first `self`, then `other`).
    pub fn compose(&self, other: &Self) -> Result<Self, KernelError> {
        if self.n != other.n {
            return Err(KernelError::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let dst = &mut out[i * n..(i + 1) * n];
            for (k, &p) in self.row(i).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (d, &q) in dst.iter_mut().zip(other.row(k)) {
                    *d += p * q;
                }
            }
        }
        Ok(Self::from_raw(n, out))
    }

    /// `self^k`, with `self^0` the identity.
    pub fn power(&self, k: usize) -> Self {
        let mut acc = Self::identity(self.n).expect("n >= 1");
        for _ in 0..k {
            acc = acc.compose(self).expect("same size");
        }
        acc
    }

    /// Convex combination `(1 - t)·self + t·other`.
    pub fn mix(&self, other: &Self, t: f64) -> Result<Self, KernelError> {
        if self.n != other.n {
            return Err(KernelError::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(KernelError::InvalidEntry {
                row: 0,
                col: 0,
                value: t,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&p, &q)| (1.0 - t) * p + t * q)
            .collect();
        Ok(Self::from_raw(self.n, data))
    }

    /// Row vector times kernel: `mu P`.
    pub fn push_forward(&self, mu: &[f64]) -> Result<Vec<f64>, KernelError> {
        if mu.len() != self.n {
            return Err(KernelError::DimensionMismatch {
                expected: self.n,
                got: mu.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        for (row, &m) in self.rows().zip(mu) {
            for (o, &p) in out.iter_mut().zip(row) {
                *o += m * p;
            }
        }
        Ok(out)
    }

    /// `sup_x |(pi P)(x) - pi(x)|`.
    pub fn invariance_residual(&self, pi: &Distribution) -> Result<f64, KernelError> {
        let pushed = self.push_forward(pi.weights())?;
        Ok(inf_norm_diff(&pushed, pi.weights()))
    }

    pub(crate) fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }
}

/// Probability vector on `n` states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    weights: Vec<f64>,
}

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self, KernelError> {
        if weights.is_empty() {
            return Err(KernelError::Empty);
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(KernelError::InvalidDistribution(format!(
                "negative or non-finite weight {w}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > EXACT_TOL {
            return Err(KernelError::InvalidDistribution(format!(
                "weights sum to {sum}"
            )));
        }
        Ok(Self { weights })
    }

    /// Normalizes nonnegative weights.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self, KernelError> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(KernelError::InvalidDistribution(format!(
                "total mass {sum}"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self, KernelError> {
        if n == 0 {
            return Err(KernelError::Empty);
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `pi(f)`.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = KernelError;

    fn try_from(weights: Vec<f64>) -> Result<Self, Self::Error> {
        Distribution::new(weights)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.weights
    }
}

pub(crate) fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

#[inline]
pub(crate) fn tv_slices(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `sup_A |mu(A) - nu(A)|`.
pub fn tv_distance(mu: &Distribution, nu: &Distribution) -> Result<f64, KernelError> {
    if mu.len() != nu.len() {
        return Err(KernelError::DimensionMismatch {
            expected: mu.len(),
            got: nu.len(),
        });
    }
    Ok(tv_slices(mu.weights(), nu.weights()).min(1.0))
}

/// `sup_x d_tv(P(x, .), Q(x, .))`, the exact kernel-change magnitude
/// between two members of a finite family.
pub fn max_tv_between_kernels(
    p: &StochasticMatrix,
    q: &StochasticMatrix,
) -> Result<f64, KernelError> {
    if p.n() != q.n() {
        return Err(KernelError::DimensionMismatch {
            expected: p.n(),
            got: q.n(),
        });
    }
    if p == q {
        return Ok(0.0);
    }
    Ok(p.rows()
        .zip(q.rows())
        .map(|(a, b)| tv_slices(a, b))
        .fold(0.0, f64::max)
        .min(1.0))
}

/// Dobrushin coefficient `sup_{x,y} d_tv(P(x, .), P(y, .))`.
pub fn dobrushin_coefficient(p: &StochasticMatrix) -> f64 {
    let n = p.n();
    let mut beta: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            beta = beta.max(tv_slices(p.row(i), p.row(j)));
            if beta >= 1.0 {
                return 1.0;
            }
        }
    }
    beta
}

/// `(P f)(x) = sum_y P(x, y) f(y)`.
pub fn kernel_apply(p: &StochasticMatrix, f: &[f64]) -> Result<Vec<f64>, KernelError> {
    if f.len() != p.n() {
        return Err(KernelError::DimensionMismatch {
            expected: p.n(),
            got: f.len(),
        });
    }
    Ok(p.rows()
        .map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum())
        .collect())
}

#[allow(clippy::needless_range_loop)]
fn reachable_from_zero(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && edge(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Whether the transition graph is strongly connected.
pub fn is_irreducible(p: &StochasticMatrix) -> bool {
    let n = p.n();
    reachable_from_zero(n, |i, j| p.get(i, j) > 0.0)
        && reachable_from_zero(n, |i, j| p.get(j, i) > 0.0)
}

/// Unique stationary distribution of an irreducible kernel, from the
/// linear system `(P^T - I) d = 0` with one equation replaced by the
/// normalization `sum d = 1`.
pub fn stationary_distribution(p: &StochasticMatrix) -> Result<Distribution, KernelError> {
    let n = p.n();
    if n == 1 {
        return Distribution::new(vec![1.0]);
    }
    if !is_irreducible(p) {
        return Err(KernelError::NotIrreducible);
    }
    let mut a = p.to_dmatrix().transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut d = lu.solve(&rhs).ok_or(KernelError::NonUnique)?;
    // one step of iterative refinement
    let r = &rhs - &a * &d;
    if let Some(corr) = lu.solve(&r) {
        d += corr;
    }
    if d.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return Err(KernelError::NonUnique);
    }
    let mut w: Vec<f64> = d.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Distribution::new(w)
}

/// Certificate `(C, rho)` for `sup_x d_tv(P_s^k(x, .), pi) <= C rho^k`,
/// plus the largest one-step Dobrushin coefficient of the family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityConstants {
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
    pub beta: f64,
    pub horizon: usize,
    /// Power `m` whose Dobrushin coefficient produced `rho`.
    pub witness_power: usize,
}

impl ErgodicityConstants {
    /// Constants implied by a uniform Dobrushin coefficient `beta < 1`:
    /// `C = 1`, `rho = beta`.
    pub fn from_dobrushin(beta: f64) -> Self {
        Self {
            c: 1.0,
            rho: beta,
            beta,
            horizon: 0,
            witness_power: 1,
        }
    }

    /// `C rho^k`.
    pub fn envelope(&self, k: usize) -> f64 {
        self.c * self.rho.powi(k as i32)
    }
}

/// One point of an `e_s(k) = sup_x d_tv(P_s^k(x, .), pi)` curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub s: usize,
    pub k: usize,
    pub sup_tv: f64,
}

fn check_stationary(kernels: &[StochasticMatrix], pi: &Distribution) -> Result<(), KernelError> {
    for (index, p) in kernels.iter().enumerate() {
        let residual = p.invariance_residual(pi)?;
        if residual > EXACT_TOL {
            return Err(KernelError::NotStationary { index, residual });
        }
    }
    Ok(())
}

fn sup_tv_to(p: &StochasticMatrix, pi: &Distribution) -> f64 {
    p.rows()
        .map(|row| tv_slices(row, pi.weights()))
        .fold(0.0, f64::max)
}

/// Decay curves `e_s(k)` for `k = 0..=horizon`.
pub fn tv_decay_curves(
    kernels: &[StochasticMatrix],
    pi: &Distribution,
    horizon: usize,
) -> Result<Vec<DecayPoint>, KernelError> {
    Ok(decay_and_dobrushin(kernels, pi, horizon)?.0)
}

// e_s(k) curves plus beta(P_s^m) for m = 1..=horizon.
fn decay_and_dobrushin(
    kernels: &[StochasticMatrix],
    pi: &Distribution,
    horizon: usize,
) -> Result<(Vec<DecayPoint>, Vec<Vec<f64>>), KernelError> {
    if kernels.is_empty() {
        return Err(KernelError::Empty);
    }
    check_stationary(kernels, pi)?;
    let mut curves = Vec::with_capacity(kernels.len() * (horizon + 1));
    let mut betas = Vec::with_capacity(kernels.len());
    for (s, p) in kernels.iter().enumerate() {
        let mut pk = StochasticMatrix::identity(p.n())?;
        let mut b = Vec::with_capacity(horizon);
        curves.push(DecayPoint {
            s,
            k: 0,
            sup_tv: sup_tv_to(&pk, pi),
        });
        for k in 1..=horizon {
            pk = pk.compose(p)?;
            curves.push(DecayPoint {
                s,
                k,
                sup_tv: sup_tv_to(&pk, pi),
            });
            b.push(dobrushin_coefficient(&pk));
        }
        betas.push(b);
    }
    Ok((curves, betas))
}

/// Fits simultaneous uniform ergodicity constants for a finite family.
///
/// `rho` is the smallest `max_s beta(P_s^m)^(1/m)` over `m <= horizon`
/// that yields a finite `C`, and `C = max(1, max_{s,k} e_s(k) / rho^k)`.
/// Since `e_s(qm + r) <= beta(P_s^m)^q e_s(r)`, the certificate extends
/// to every `k`, not only `k <= horizon`.
pub fn fit_ergodicity_constants(
    kernels: &[StochasticMatrix],
    pi: &Distribution,
    horizon: usize,
) -> Result<ErgodicityConstants, KernelError> {
    if horizon < 2 {
        return Err(KernelError::HorizonTooSmall(horizon));
    }
    let (curves, betas) = decay_and_dobrushin(kernels, pi, horizon)?;
    let beta = betas.iter().map(|b| b[0]).fold(0.0, f64::max);

    let mut candidates: Vec<(f64, usize)> = (1..=horizon)
        .map(|m| {
            let worst = betas.iter().map(|b| b[m - 1]).fold(0.0, f64::max);
            (worst.powf(1.0 / m as f64), m)
        })
        .filter(|(rho, _)| *rho < 1.0)
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    for (rho, m) in candidates {
        let mut c: f64 = 1.0;
        let mut finite = true;
        for pt in &curves {
            let env = rho.powi(pt.k as i32);
            if env > 0.0 {
                c = c.max(pt.sup_tv / env);
            } else if pt.sup_tv > EXACT_TOL {
                finite = false;
                break;
            }
        }
        if finite && c.is_finite() {
            return Ok(ErgodicityConstants {
                c,
                rho,
                beta,
                horizon,
                witness_power: m,
            });
        }
    }
    Err(KernelError::NotSimultaneouslyErgodic { horizon })
}

/// Kernel file: `{"n": .., "rows": [[..], ..], "pi": [..]?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFile {
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
}

impl KernelFile {
    pub fn from_kernel(p: &StochasticMatrix, pi: Option<&Distribution>) -> Self {
        Self {
            n: p.n(),
            rows: p.to_rows(),
            pi: pi.map(|d| d.weights().to_vec()),
        }
    }

    /// Validates the kernel and, when present, that `pi` is stationary.
    pub fn into_parts(self) -> Result<(StochasticMatrix, Option<Distribution>), KernelError> {
        if self.rows.len() != self.n {
            return Err(KernelError::DimensionMismatch {
                expected: self.n,
                got: self.rows.len(),
            });
        }
        let p = StochasticMatrix::new(self.rows)?;
        let pi = match self.pi {
            Some(w) => {
                let d = Distribution::new(w)?;
                check_stationary(std::slice::from_ref(&p), &d)?;
                Some(d)
            }
            None => None,
        };
        Ok((p, pi))
    }
}

/// Writes decay curves as CSV with header `s,k,sup_tv`.
pub fn write_decay_csv<W: Write>(mut w: W, points: &[DecayPoint]) -> io::Result<()> {
    writeln!(w, "s,k,sup_tv")?;
    for p in points {
        writeln!(w, "{},{},{:e}", p.s, p.k, p.sup_tv)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::cyclic_pair;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(
            StochasticMatrix::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]),
            Err(KernelError::RowSum { row: 0, .. })
        ));
        assert!(matches!(
            StochasticMatrix::new(vec![vec![1.2, -0.2], vec![0.5, 0.5]]),
            Err(KernelError::InvalidEntry { .. })
        ));
        assert!(matches!(
            StochasticMatrix::new(vec![vec![1.0], vec![0.5, 0.5]]),
            Err(KernelError::DimensionMismatch { .. })
        ));
        assert_eq!(StochasticMatrix::new(vec![]), Err(KernelError::Empty));
    }

    #[test]
    fn stationary_of_cyclic_kernels() {
        let (pa, pb) = cyclic_pair();
        for p in [&pa, &pb] {
            let d = stationary_distribution(p).unwrap();
            assert_abs_diff_eq!(d.weights()[0], 0.5, epsilon = 1e-14);
            assert_abs_diff_eq!(d.weights()[1], 0.25, epsilon = 1e-14);
            assert_abs_diff_eq!(d.weights()[2], 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn stationary_single_state() {
        let p = StochasticMatrix::new(vec![vec![1.0]]).unwrap();
        assert_eq!(stationary_distribution(&p).unwrap().weights(), &[1.0]);
    }

    #[test]
    fn stationary_rejects_reducible() {
        let p = StochasticMatrix::identity(3).unwrap();
        assert_eq!(
            stationary_distribution(&p),
            Err(KernelError::NotIrreducible)
        );
        let absorbing = StochasticMatrix::new(vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            stationary_distribution(&absorbing),
            Err(KernelError::NotIrreducible)
        );
    }

    #[test]
    fn tv_examples() {
        let a = Distribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let b = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        let c = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let d = Distribution::new(vec![0.25, 0.5, 0.25]).unwrap();
        assert_abs_diff_eq!(tv_distance(&c, &d).unwrap(), 0.25, epsilon = 1e-15);
        let e = Distribution::uniform(2).unwrap();
        assert!(matches!(
            tv_distance(&a, &e),
            Err(KernelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_distances_on_cyclic_pair() {
        let (pa, pb) = cyclic_pair();
        assert_eq!(max_tv_between_kernels(&pa, &pa).unwrap(), 0.0);
        assert_eq!(max_tv_between_kernels(&pa, &pb).unwrap(), 1.0);
        assert_eq!(dobrushin_coefficient(&pa), 1.0);
        assert_eq!(dobrushin_coefficient(&pb), 1.0);
    }

    #[test]
    fn mixture_distance_is_at_most_weight() {
        let (pa, pb) = cyclic_pair();
        for eps in [0.0, 0.1, 0.37, 1.0] {
            let m = pa.mix(&pb, eps).unwrap();
            assert!(max_tv_between_kernels(&pa, &m).unwrap() <= eps + 1e-15);
        }
    }

    #[test]
    fn dobrushin_extremes() {
        let pi = Distribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(
            dobrushin_coefficient(&StochasticMatrix::independent(&pi)),
            0.0
        );
        assert_eq!(
            dobrushin_coefficient(&StochasticMatrix::identity(4).unwrap()),
            1.0
        );
        assert_eq!(
            dobrushin_coefficient(&StochasticMatrix::identity(1).unwrap()),
            0.0
        );
    }

    #[test]
    fn apply_examples() {
        let (pa, _) = cyclic_pair();
        assert_eq!(
            kernel_apply(&pa, &[1.0, 0.0, 0.0]).unwrap(),
            vec![0.5, 0.0, 1.0]
        );
        assert_eq!(kernel_apply(&pa, &[3.0; 3]).unwrap(), vec![3.0; 3]);
        let id = StochasticMatrix::identity(3).unwrap();
        assert_eq!(
            kernel_apply(&id, &[1.0, -2.0, 5.0]).unwrap(),
            vec![1.0, -2.0, 5.0]
        );
        assert!(kernel_apply(&pa, &[1.0]).is_err());
    }

    #[test]
    fn iid_kernel_certificate() {
        let pi = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let p = StochasticMatrix::independent(&pi);
        let c = fit_ergodicity_constants(std::slice::from_ref(&p), &pi, 5).unwrap();
        assert!(c.c >= 1.0);
        assert_eq!(c.rho, 0.0);
        assert_eq!(c.beta, 0.0);
        for pt in tv_decay_curves(&[p], &pi, 5).unwrap() {
            if pt.k >= 1 {
                assert!(pt.sup_tv <= 1e-15);
            }
        }
    }

    #[test]
    fn cyclic_pair_is_simultaneously_ergodic_but_not_dobrushin() {
        let (pa, pb) = cyclic_pair();
        let pi = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let c = fit_ergodicity_constants(&[pa.clone(), pb.clone()], &pi, 30).unwrap();
        assert!(c.rho < 1.0 && c.c.is_finite());
        assert_eq!(c.beta, 1.0);
        for pt in tv_decay_curves(&[pa, pb], &pi, 30).unwrap() {
            assert!(pt.sup_tv <= c.envelope(pt.k) + BOUND_TOL);
        }
    }

    #[test]
    fn fit_rejects_non_stationary_and_periodic() {
        let pi = Distribution::new(vec![0.5, 0.5]).unwrap();
        let p = StochasticMatrix::new(vec![vec![0.9, 0.1], vec![0.9, 0.1]]).unwrap();
        assert!(matches!(
            fit_ergodicity_constants(&[p], &pi, 4),
            Err(KernelError::NotStationary { index: 0, .. })
        ));
        let flip = StochasticMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            fit_ergodicity_constants(std::slice::from_ref(&flip), &pi, 10),
            Err(KernelError::NotSimultaneouslyErgodic { horizon: 10 })
        );
        assert_eq!(
            fit_ergodicity_constants(&[flip], &pi, 1),
            Err(KernelError::HorizonTooSmall(1))
        );
    }

    #[test]
    fn kernel_file_round_trip() {
        let (pa, _) = cyclic_pair();
        let pi = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let json = serde_json::to_string(&KernelFile::from_kernel(&pa, Some(&pi))).unwrap();
        let (p, d) = serde_json::from_str::<KernelFile>(&json)
            .unwrap()
            .into_parts()
            .unwrap();
        assert_eq!(p, pa);
        assert_eq!(d.unwrap(), pi);

        let bad = r#"{"n": 2, "rows": [[1.0, 0.0], [0.0, 1.0]], "pi": [0.9, 0.1]}"#;
        assert!(serde_json::from_str::<KernelFile>(bad)
            .unwrap()
            .into_parts()
            .is_ok());
        let bad = r#"{"n": 2, "rows": [[0.0, 1.0], [1.0, 0.0]], "pi": [0.9, 0.1]}"#;
        assert!(matches!(
            serde_json::from_str::<KernelFile>(bad)
                .unwrap()
                .into_parts(),
            Err(KernelError::NotStationary { .. })
        ));
    }

    #[test]
    fn decay_csv_header() {
        let pi = Distribution::uniform(2).unwrap();
        let p = StochasticMatrix::independent(&pi);
        let pts = tv_decay_curves(&[p], &pi, 2).unwrap();
        let mut buf = Vec::new();
        write_decay_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,k,sup_tv\n0,0,5e-1\n"));
    }
}
