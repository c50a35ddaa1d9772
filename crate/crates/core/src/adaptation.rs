//! Adaptation dynamics: constrained stochastic-approximation updates, the
//! adaptive Metropolis and robust adaptive Metropolis mean fields,
//! increasingly rare adaptation schedules, and waning diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symmetry tolerance for feasibility checks.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptationError {
    #[error("increment contains non-finite values")]
    NonFiniteIncrement,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("proposal noise vector is zero")]
    ZeroNoiseVector,
    #[error("D_{k} = {value} lies outside [0, 1]")]
    OutOfRangeD { k: usize, value: f64 },
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("step size schedule produced {0} at step {1}")]
    InvalidStep(f64, usize),
}

/// Step sizes `gamma_k > 0` for `k >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `1 / k`.
    Harmonic,
    /// `c k^(-exponent)`.
    Power { c: f64, exponent: f64 },
    /// Explicit values; the last one repeats.
    Table { values: Vec<f64> },
}

impl StepSchedule {
    /// `k^(-2/3)`, the usual choice for acceptance-rate adaptation.
    pub fn two_thirds() -> Self {
        StepSchedule::Power {
            c: 1.0,
            exponent: 2.0 / 3.0,
        }
    }

    pub fn gamma(&self, k: usize) -> f64 {
        let k = k.max(1);
        match self {
            StepSchedule::Harmonic => 1.0 / k as f64,
            StepSchedule::Power { c, exponent } => c * (k as f64).powf(-exponent),
            StepSchedule::Table { values } => match values.get(k - 1).or(values.last()) {
                Some(v) => *v,
                None => 0.0,
            },
        }
    }
}

/// Feasible parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParameterSpace {
    /// Indices `0..count` of a finite family.
    FiniteIndex { count: usize },
    /// Symmetric `dim x dim` matrices with every eigenvalue in `[a, b]`.
    EigenBox { a: f64, b: f64, dim: usize },
}

impl ParameterSpace {
    pub fn eigenbox(a: f64, b: f64, dim: usize) -> Result<Self, AdaptationError> {
        if !(0.0 < a && a < b && b.is_finite()) || dim == 0 {
            return Err(AdaptationError::InvalidSpace(format!(
                "need 0 < a < b < inf and dim >= 1, got a = {a}, b = {b}, dim = {dim}"
            )));
        }
        Ok(ParameterSpace::EigenBox { a, b, dim })
    }

    pub fn contains_index(&self, s: usize) -> bool {
        matches!(self, ParameterSpace::FiniteIndex { count } if s < *count)
    }

    /// Membership: symmetric within [`SYMMETRY_TOL`] and every eigenvalue
    /// in `[a, b]` up to a relative rounding slack of `1e-12`.
    pub fn contains(&self, s: &DMatrix<f64>) -> bool {
        match self {
            ParameterSpace::FiniteIndex { .. } => false,
            ParameterSpace::EigenBox { a, b, dim } => {
                if s.nrows() != *dim || s.ncols() != *dim {
                    return false;
                }
                if s.iter().any(|v| !v.is_finite()) || !is_symmetric(s) {
                    return false;
                }
                let slack = 1e-12 * b;
                eigenvalues(s)
                    .iter()
                    .all(|l| *a - slack <= *l && *l <= *b + slack)
            }
        }
    }

    /// Clamps the eigenvalues of the symmetric part of `s` into `[a, b]`.
    pub fn project(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>, AdaptationError> {
        match self {
            ParameterSpace::FiniteIndex { .. } => Err(AdaptationError::InvalidSpace(
                "finite index spaces have no projection".into(),
            )),
            ParameterSpace::EigenBox { a, b, dim } => {
                check_shape(s, (*dim, *dim))?;
                let sym = (s + s.transpose()) * 0.5;
                if *dim == 1 {
                    return Ok(DMatrix::from_element(1, 1, sym[(0, 0)].clamp(*a, *b)));
                }
                let eig = SymmetricEigen::new(sym);
                let clamped = eig.eigenvalues.map(|l| l.clamp(*a, *b));
                let v = &eig.eigenvectors;
                let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
                Ok((&out + out.transpose()) * 0.5)
            }
        }
    }
}

fn is_symmetric(s: &DMatrix<f64>) -> bool {
    let n = s.nrows();
    (0..n).all(|i| (0..i).all(|j| (s[(i, j)] - s[(j, i)]).abs() <= SYMMETRY_TOL))
}

fn eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    if s.nrows() == 1 {
        return vec![s[(0, 0)]];
    }
    let sym = (s + s.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect()
}

fn check_shape(m: &DMatrix<f64>, expected: (usize, usize)) -> Result<(), AdaptationError> {
    if m.shape() != expected {
        return Err(AdaptationError::ShapeMismatch {
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

/// What to do with a candidate that leaves the feasible set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// Keep the previous value (the increment is replaced by zero).
    #[default]
    Reject,
    /// Clamp eigenvalues into the feasible range.
    Project,
}

/// Stochastic-approximation state `S_k` with its step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SAState {
    pub s: DMatrix<f64>,
    /// Number of updates performed so far.
    pub k: usize,
    pub gamma: StepSchedule,
}

/// Result of one constrained update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub gamma: f64,
    /// Whether the unconstrained candidate was feasible.
    pub feasible: bool,
    /// `||S_k - S_{k-1}||_F`.
    pub moved: f64,
    /// `gamma_k ||H_k||_F`.
    pub increment_norm: f64,
}

impl SAState {
    pub fn new(s: DMatrix<f64>, gamma: StepSchedule) -> Self {
        Self { s, k: 0, gamma }
    }

    pub fn scalar(s: f64, gamma: StepSchedule) -> Self {
        Self::new(DMatrix::from_element(1, 1, s), gamma)
    }

    /// `S_k = S_{k-1} + gamma_k H_k`, constrained to `space`.
    pub fn step(
        &mut self,
        h: &DMatrix<f64>,
        space: &ParameterSpace,
        mode: ConstraintMode,
    ) -> Result<StepInfo, AdaptationError> {
        self.step_scaled(h, 1.0, space, mode)
    }

    /// As [`SAState::step`] with the step size multiplied by `scale`
    /// (used for randomly activated steps, `scale` in `{0, 1}`).
    pub fn step_scaled(
        &mut self,
        h: &DMatrix<f64>,
        scale: f64,
        space: &ParameterSpace,
        mode: ConstraintMode,
    ) -> Result<StepInfo, AdaptationError> {
        check_shape(h, self.s.shape())?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(AdaptationError::NonFiniteIncrement);
        }
        let k = self.k + 1;
        let gamma = self.gamma.gamma(k) * scale;
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(AdaptationError::InvalidStep(gamma, k));
        }
        let candidate = &self.s + h * gamma;
        let feasible = space.contains(&candidate);
        let next = match (feasible, mode) {
            (true, _) => candidate,
            (false, ConstraintMode::Reject) => self.s.clone(),
            (false, ConstraintMode::Project) => space.project(&candidate)?,
        };
        let moved = (&next - &self.s).norm();
        self.s = next;
        self.k = k;
        Ok(StepInfo {
            gamma,
            feasible,
            moved,
            increment_norm: gamma * h.norm(),
        })
    }
}

/// Pure form of [`SAState::step`].
pub fn sa_step(
    state: &SAState,
    h: &DMatrix<f64>,
    space: &ParameterSpace,
    mode: ConstraintMode,
) -> Result<SAState, AdaptationError> {
    let mut next = state.clone();
    next.step(h, space, mode)?;
    Ok(next)
}

/// Increment `(X - mu, X X^T - Sigma)` of the adaptive Metropolis update.
#[derive(Debug, Clone, PartialEq)]
pub struct AmIncrement {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl AmIncrement {
    /// Frobenius norm of the stacked increment.
    pub fn norm(&self) -> f64 {
        (self.mean.norm_squared() + self.second.norm_squared()).sqrt()
    }
}

pub fn am_field(
    x: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<AmIncrement, AdaptationError> {
    let d = x.len();
    if mu.len() != d {
        return Err(AdaptationError::ShapeMismatch {
            expected: (d, 1),
            got: (mu.len(), 1),
        });
    }
    check_shape(sigma, (d, d))?;
    Ok(AmIncrement {
        mean: x - mu,
        second: x * x.transpose() - sigma,
    })
}

/// Adaptive Metropolis estimator `(mu_k, Sigma_k)` with the second-moment
/// component kept inside an eigenvalue box.
#[derive(Debug, Clone)]
pub struct AmState {
    pub mu: DVector<f64>,
    pub sigma: SAState,
}

impl AmState {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, gamma: StepSchedule) -> Self {
        Self {
            mu,
            sigma: SAState::new(sigma, gamma),
        }
    }

    /// One update from the new sample `x`. In reject mode an infeasible
    /// candidate leaves both components unchanged.
    pub fn update(
        &mut self,
        x: &DVector<f64>,
        space: &ParameterSpace,
        mode: ConstraintMode,
    ) -> Result<StepInfo, AdaptationError> {
        let h = am_field(x, &self.mu, &self.sigma.s)?;
        let mut info = self.sigma.step(&h.second, space, mode)?;
        if info.feasible || mode == ConstraintMode::Project {
            self.mu += &h.mean * info.gamma;
            info.moved = (info.moved.powi(2) + (h.mean.norm() * info.gamma).powi(2)).sqrt();
        }
        info.increment_norm = info.gamma * h.norm();
        Ok(info)
    }
}

/// Rank-one increment `(alpha - alpha*) S (Z Z^T / ||Z||^2) S^T` of the
/// directional acceptance rate adaptation.
pub fn ram_field(
    z: &DVector<f64>,
    alpha: f64,
    alpha_star: f64,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AdaptationError> {
    let d = z.len();
    check_shape(s, (d, d))?;
    let nz2 = z.norm_squared();
    if nz2 == 0.0 {
        return Err(AdaptationError::ZeroNoiseVector);
    }
    let sz = s * z;
    Ok(&sz * sz.transpose() * ((alpha - alpha_star) / nz2))
}

/// Lower Cholesky factor of a covariance in the eigenvalue box.
pub fn cholesky_factor(sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(sigma.clone()).map(|c| c.l())
}

/// When adaptation is allowed to change the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RareKind {
    /// Deterministic times `tau_k = n_1 + ... + n_k` with increments
    /// `n_j = max(1, ceil(c log^(1+epsilon) j))`.
    LogIncrements { c: f64, epsilon: f64 },
    /// Independent activation with probability
    /// `eta_k = min(1, c log^-(1+epsilon) k)`.
    Bernoulli { c: f64, epsilon: f64 },
    /// Adapt at every step.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareSchedule {
    #[serde(flatten)]
    pub kind: RareKind,
    /// Base step sizes applied when adaptation is active.
    #[serde(default = "default_gamma")]
    pub gamma: StepSchedule,
}

fn default_gamma() -> StepSchedule {
    StepSchedule::Harmonic
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationDecision {
    pub adapt: bool,
    pub gamma_eff: f64,
}

impl RareSchedule {
    pub fn new(kind: RareKind) -> Self {
        Self {
            kind,
            gamma: StepSchedule::Harmonic,
        }
    }

    /// `n_j` for the deterministic kind.
    pub fn increment(c: f64, epsilon: f64, j: usize) -> usize {
        let l = (j.max(1) as f64).ln();
        ((c * l.powf(1.0 + epsilon)).ceil() as usize).max(1)
    }

    /// `eta_k` for the Bernoulli kind (1 for the other kinds).
    pub fn activation_probability(&self, k: usize) -> f64 {
        match self.kind {
            RareKind::Bernoulli { c, epsilon } => {
                let l = (k.max(1) as f64).ln();
                if l == 0.0 {
                    1.0
                } else {
                    (c * l.powf(-(1.0 + epsilon))).min(1.0)
                }
            }
            _ => 1.0,
        }
    }

    /// Deterministic adaptation times `tau_j <= limit`.
    pub fn adaptation_times(&self, limit: usize) -> Vec<usize> {
        match self.kind {
            RareKind::LogIncrements { c, epsilon } => {
                let mut out = Vec::new();
                let mut tau = 0;
                for j in 1.. {
                    tau += Self::increment(c, epsilon, j);
                    if tau > limit {
                        break;
                    }
                    out.push(tau);
                }
                out
            }
            RareKind::Continuous => (1..=limit).collect(),
            RareKind::Bernoulli { .. } => Vec::new(),
        }
    }

    /// Whether step `k >= 1` adapts. `u` is a uniform draw on `[0, 1)`,
    /// consulted only by the Bernoulli kind. This recomputes the time
    /// sequence; drivers stepping through `k` in order use [`RareClock`].
    pub fn next_adaptation_decision(&self, k: usize, u: f64) -> AdaptationDecision {
        let adapt = match self.kind {
            RareKind::LogIncrements { .. } => self.adaptation_times(k).last().copied() == Some(k),
            RareKind::Bernoulli { .. } => u <= self.activation_probability(k),
            RareKind::Continuous => true,
        };
        self.decision(adapt, k)
    }

    fn decision(&self, adapt: bool, k: usize) -> AdaptationDecision {
        AdaptationDecision {
            adapt,
            gamma_eff: if adapt { self.gamma.gamma(k) } else { 0.0 },
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self.kind, RareKind::Bernoulli { .. })
    }
}

/// Incremental evaluation of a [`RareSchedule`] for increasing `k`.
#[derive(Debug, Clone)]
pub struct RareClock {
    schedule: RareSchedule,
    next_tau: usize,
    j: usize,
}

impl RareClock {
    pub fn new(schedule: RareSchedule) -> Self {
        let mut clock = Self {
            schedule,
            next_tau: 0,
            j: 0,
        };
        clock.advance();
        clock
    }

    fn advance(&mut self) {
        if let RareKind::LogIncrements { c, epsilon } = self.schedule.kind {
            self.j += 1;
            self.next_tau += RareSchedule::increment(c, epsilon, self.j);
        }
    }

    pub fn schedule(&self) -> &RareSchedule {
        &self.schedule
    }

    /// Decision at step `k`; calls must use nondecreasing `k`.
    pub fn decide(&mut self, k: usize, u: f64) -> AdaptationDecision {
        match self.schedule.kind {
            RareKind::LogIncrements { .. } => {
                while self.next_tau < k {
                    self.advance();
                }
                let adapt = self.next_tau == k;
                if adapt {
                    self.advance();
                }
                self.schedule.decision(adapt, k)
            }
            _ => self.schedule.next_adaptation_decision(k, u),
        }
    }
}

/// Summary of `n^-p sum_{k <= n} D_k` at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaningCheckpoint {
    pub n: usize,
    /// `sum_{k <= n} D_k`.
    pub partial_sum: f64,
    /// `n^-p sum_{k <= n} D_k`.
    pub statistic: f64,
    /// `sum_{k <= n} D_k / k^p`.
    pub weighted_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    Decreasing,
    NonDecreasing,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaningReport {
    pub p: f64,
    #[serde(skip)]
    pub d_series: Vec<f64>,
    /// Running `sum_{k <= n} D_k` for every `n`.
    #[serde(skip)]
    pub partial_sums: Vec<f64>,
    pub checkpoints: Vec<WaningCheckpoint>,
    /// Trend of the statistic over checkpoints with `n >= 100`.
    pub trend: Trend,
    /// Mean per-step growth of `sum D_k / k^p` over the last decade
    /// `(n / 10, n]`.
    pub tail_increment: f64,
    pub waning: bool,
}

/// Checkpoints `10, 100, ...` up to `n`, plus `n` itself.
pub fn log_checkpoints(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut c = 10;
    while c <= n {
        out.push(c);
        c *= 10;
    }
    if out.last() != Some(&n) && n > 0 {
        out.push(n);
    }
    out
}

/// Evaluates `n^-p sum D_k` and `sum D_k / k^p` along logarithmic
/// checkpoints. The series is flagged waning when the statistic vanishes
/// or strictly decreases over the checkpoints.
pub fn waning_diagnostic(d_series: &[f64], p: f64) -> Result<WaningReport, AdaptationError> {
    if let Some((i, v)) = d_series
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(AdaptationError::OutOfRangeD {
            k: i + 1,
            value: *v,
        });
    }
    let n = d_series.len();
    let mut partial_sums = Vec::with_capacity(n);
    let mut weighted = Vec::with_capacity(n);
    let (mut acc, mut wacc) = (0.0, 0.0);
    for (i, d) in d_series.iter().enumerate() {
        acc += d;
        wacc += d / ((i + 1) as f64).powf(p);
        partial_sums.push(acc);
        weighted.push(wacc);
    }
    let checkpoints: Vec<WaningCheckpoint> = log_checkpoints(n)
        .into_iter()
        .map(|c| WaningCheckpoint {
            n: c,
            partial_sum: partial_sums[c - 1],
            statistic: partial_sums[c - 1] / (c as f64).powf(p),
            weighted_sum: weighted[c - 1],
        })
        .collect();

    let late: Vec<f64> = {
        let v: Vec<f64> = checkpoints
            .iter()
            .filter(|c| c.n >= 100)
            .map(|c| c.statistic)
            .collect();
        if v.len() >= 2 {
            v
        } else {
            checkpoints.iter().map(|c| c.statistic).collect()
        }
    };
    let trend = if late.windows(2).all(|w| w[1] < w[0]) && late.len() >= 2 {
        Trend::Decreasing
    } else if late.windows(2).all(|w| w[1] >= w[0]) {
        Trend::NonDecreasing
    } else {
        Trend::Mixed
    };
    let tail_increment = if n == 0 {
        0.0
    } else {
        let start = n / 10;
        let before = if start == 0 { 0.0 } else { weighted[start - 1] };
        (weighted[n - 1] - before) / (n - start) as f64
    };
    let final_stat = checkpoints.last().map_or(0.0, |c| c.statistic);
    Ok(WaningReport {
        p,
        waning: final_stat <= 1e-12 || trend == Trend::Decreasing,
        d_series: d_series.to_vec(),
        partial_sums,
        checkpoints,
        trend,
        tail_increment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_space() -> ParameterSpace {
        ParameterSpace::eigenbox(0.5, 3.0, 1).unwrap()
    }

    fn table(g: f64) -> StepSchedule {
        StepSchedule::Table { values: vec![g] }
    }

    #[test]
    fn sa_step_in_bounds() {
        let st = SAState::scalar(1.0, table(0.5));
        let h = DMatrix::from_element(1, 1, 2.0);
        let next = sa_step(&st, &h, &scalar_space(), ConstraintMode::Reject).unwrap();
        assert_eq!(next.s[(0, 0)], 2.0);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn sa_step_reject_keeps_value() {
        let st = SAState::scalar(2.9, table(0.5));
        let h = DMatrix::from_element(1, 1, 2.0);
        let next = sa_step(&st, &h, &scalar_space(), ConstraintMode::Reject).unwrap();
        assert_eq!(next.s[(0, 0)], 2.9);
    }

    #[test]
    fn sa_step_project_clamps() {
        let st = SAState::scalar(2.9, table(0.5));
        let h = DMatrix::from_element(1, 1, 2.0);
        let next = sa_step(&st, &h, &scalar_space(), ConstraintMode::Project).unwrap();
        assert_eq!(next.s[(0, 0)], 3.0);
    }

    #[test]
    fn sa_step_rejects_non_finite_and_bad_shapes() {
        let st = SAState::scalar(1.0, table(0.5));
        let h = DMatrix::from_element(1, 1, f64::NAN);
        assert_eq!(
            sa_step(&st, &h, &scalar_space(), ConstraintMode::Reject),
            Err(AdaptationError::NonFiniteIncrement)
        );
        let h = DMatrix::zeros(2, 2);
        assert!(matches!(
            sa_step(&st, &h, &scalar_space(), ConstraintMode::Reject),
            Err(AdaptationError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eigenbox_membership() {
        let space = ParameterSpace::eigenbox(0.5, 3.0, 2).unwrap();
        assert!(space.contains(&DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0])));
        assert!(space.contains(&DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5])));
        assert!(!space.contains(&DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0])));
        // eigenvalues 0.1 and 1.9
        assert!(!space.contains(&DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0])));
        assert!(!space.contains(&DMatrix::identity(3, 3)));
        assert!(ParameterSpace::eigenbox(1.0, 1.0, 1).is_err());
        assert!(ParameterSpace::eigenbox(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn projection_is_feasible_and_nonexpansive() {
        let space = ParameterSpace::eigenbox(0.5, 3.0, 2).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let cand = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, -1.0]);
        let p = space.project(&cand).unwrap();
        assert!(space.contains(&p));
        assert!((&p - &s).norm() <= (&cand - &s).norm());
    }

    #[test]
    fn am_field_examples() {
        let x = DVector::from_vec(vec![1.5, -0.5]);
        let h = am_field(&x, &x, &(&x * x.transpose())).unwrap();
        assert_eq!(h.norm(), 0.0);

        let h = am_field(
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_eq!(h.mean[0], 2.0);
        assert_eq!(h.second[(0, 0)], 3.0);

        assert!(matches!(
            am_field(&x, &DVector::zeros(3), &DMatrix::zeros(2, 2)),
            Err(AdaptationError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn am_harmonic_steps_track_running_moments() {
        let xs: Vec<f64> = (0..200)
            .map(|i| ((i * 37) % 23) as f64 / 7.0 - 1.0)
            .collect();
        let space = ParameterSpace::eigenbox(1e-9, 1e9, 1).unwrap();
        let mut am = AmState::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            StepSchedule::Harmonic,
        );
        for (i, x) in xs.iter().enumerate() {
            am.update(
                &DVector::from_element(1, *x),
                &space,
                ConstraintMode::Reject,
            )
            .unwrap();
            let n = (i + 1) as f64;
            let mean: f64 = xs[..=i].iter().sum::<f64>() / n;
            let m2: f64 = xs[..=i].iter().map(|x| x * x).sum::<f64>() / n;
            assert_abs_diff_eq!(am.mu[0], mean, epsilon = 1e-12);
            assert_abs_diff_eq!(am.sigma.s[(0, 0)], m2, epsilon = 1e-12);
        }
    }

    #[test]
    fn ram_field_examples() {
        let s = DMatrix::identity(2, 2);
        let z = DVector::from_vec(vec![0.3, -1.0]);
        assert_eq!(ram_field(&z, 0.234, 0.234, &s).unwrap().norm(), 0.0);

        let h = ram_field(
            &DVector::from_element(1, 1.0),
            1.0,
            0.234,
            &DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 3.064, epsilon = 1e-12);

        assert_eq!(
            ram_field(&DVector::zeros(2), 0.5, 0.234, &s),
            Err(AdaptationError::ZeroNoiseVector)
        );
    }

    #[test]
    fn step_schedules() {
        assert_eq!(StepSchedule::Harmonic.gamma(4), 0.25);
        assert_abs_diff_eq!(StepSchedule::two_thirds().gamma(8), 0.25, epsilon = 1e-15);
        let t = StepSchedule::Table {
            values: vec![0.5, 0.25],
        };
        assert_eq!(t.gamma(1), 0.5);
        assert_eq!(t.gamma(9), 0.25);
    }

    #[test]
    fn log_increment_times() {
        let sched = RareSchedule::new(RareKind::LogIncrements {
            c: 2.0,
            epsilon: 0.1,
        });
        let times = sched.adaptation_times(10_000);
        assert_eq!(&times[..4], &[1, 3, 6, 9]);
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        let mut clock = RareClock::new(sched.clone());
        let from_clock: Vec<usize> = (1..=10_000)
            .filter(|&k| clock.decide(k, 0.0).adapt)
            .collect();
        assert_eq!(from_clock, times);
        for k in [1, 2, 3, 9, 10] {
            assert_eq!(
                sched.next_adaptation_decision(k, 0.0).adapt,
                times.contains(&k)
            );
        }
    }

    #[test]
    fn bernoulli_decisions() {
        let sched = RareSchedule::new(RareKind::Bernoulli {
            c: 1.0,
            epsilon: 0.1,
        });
        assert_eq!(sched.activation_probability(1), 1.0);
        let eta = sched.activation_probability(1000);
        assert!(eta < 1.0 && eta > 0.0);
        let yes = sched.next_adaptation_decision(1000, eta * 0.5);
        assert!(yes.adapt);
        assert_eq!(yes.gamma_eff, 1.0 / 1000.0);
        let no = sched.next_adaptation_decision(1000, (eta + 1.0) / 2.0);
        assert!(!no.adapt);
        assert_eq!(no.gamma_eff, 0.0);
    }

    #[test]
    fn continuous_schedule_always_adapts() {
        let mut clock = RareClock::new(RareSchedule::new(RareKind::Continuous));
        assert!((1..100).all(|k| clock.decide(k, 0.99).adapt));
    }

    #[test]
    fn waning_zero_series() {
        let r = waning_diagnostic(&vec![0.0; 1000], 1.0).unwrap();
        assert!(r.checkpoints.iter().all(|c| c.statistic == 0.0));
        assert!(r.waning);
    }

    #[test]
    fn waning_constant_series_is_flagged() {
        let r = waning_diagnostic(&vec![0.3; 10_000], 1.0).unwrap();
        for c in &r.checkpoints {
            assert_abs_diff_eq!(c.statistic, 0.3, epsilon = 1e-12);
        }
        assert!(!r.waning);
        assert_ne!(r.trend, Trend::Decreasing);
    }

    #[test]
    fn waning_rejects_out_of_range() {
        assert_eq!(
            waning_diagnostic(&[0.5, 1.5], 1.0),
            Err(AdaptationError::OutOfRangeD { k: 2, value: 1.5 })
        );
    }

    #[test]
    fn checkpoints() {
        assert_eq!(log_checkpoints(1000), vec![10, 100, 1000]);
        assert_eq!(log_checkpoints(250), vec![10, 100, 250]);
        assert_eq!(log_checkpoints(3), vec![3]);
        assert!(log_checkpoints(0).is_empty());
    }
}
