//! Gaussian random-walk Metropolis on a compact box.
//!
//! Two lanes share one target description:
//!
//! * the discrete lane places the target on a regular grid of cell centers
//!   and builds the exact transition matrix, so every oracle in
//!   [`crate::poisson`] and [`crate::ledger`] applies to it;
//! * the continuous lane samples the ordinary continuous-space algorithm,
//!   with AM and RAM adaptation, and reports kernel-change magnitudes
//!   through a configured Lipschitz constant.
//!
//! Proposal weights on the grid are `w(x_j - x_i) / Z`, where `w` is the
//! unnormalized Gaussian density and `Z` the sum of `w` over the whole
//! infinite lattice. The weights are symmetric, and the mass that would land
//! outside the box is rejected, as in the continuous lane.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    cholesky_factor, ram_field, AdaptationError, AmState, ConstraintMode, ParameterSpace, SAState,
    StepSchedule, SYMMETRY_TOL,
};
use crate::families::{KernelFamily, ParametricFamily};
use crate::kernel::{max_tv_between_kernels, Distribution, KernelError, StochasticMatrix};

/// Default cap on the number of grid states.
pub const DEFAULT_STATE_CAP: usize = 10_000;

// exp(-LATTICE_RADIUS^2 / 2) underflows to zero.
const LATTICE_RADIUS: f64 = 38.7;
const MAX_LATTICE_POINTS: usize = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RwmError {
    #[error("grid has {states} states, above the cap of {cap}")]
    GridTooLarge { states: usize, cap: usize },
    #[error("target density is not strictly positive and finite at {0:?}")]
    NonPositiveDensity(Vec<f64>),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("invalid proposal covariance: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
}

/// Unnormalized target density on the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Density {
    Uniform,
    /// Product of independent Gaussians restricted to the box.
    TruncatedGaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    /// `w N(-sep/2, sd^2) + (1 - w) N(sep/2, sd^2)` along the first axis,
    /// standard Gaussian along the others.
    BimodalMixture {
        sep: f64,
        sd: f64,
        weight: f64,
    },
    /// Piecewise constant values on an `m^d` cell grid (first axis fastest).
    Table {
        m: usize,
        values: Vec<f64>,
    },
}

/// Target on a compact box in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactTarget {
    pub d: usize,
    pub bounds: Vec<(f64, f64)>,
    pub density: Density,
}

impl CompactTarget {
    pub fn new(bounds: Vec<(f64, f64)>, density: Density) -> Result<Self, RwmError> {
        let t = Self {
            d: bounds.len(),
            bounds,
            density,
        };
        t.validate()?;
        Ok(t)
    }

    /// `N(0, 1)` restricted to `[lo, hi]`.
    pub fn truncated_standard_normal(lo: f64, hi: f64) -> Self {
        Self {
            d: 1,
            bounds: vec![(lo, hi)],
            density: Density::TruncatedGaussian {
                mean: vec![0.0],
                sd: vec![1.0],
            },
        }
    }

    pub fn validate(&self) -> Result<(), RwmError> {
        if self.d == 0 || self.bounds.len() != self.d {
            return Err(RwmError::InvalidTarget(format!(
                "dimension {} with {} bounds",
                self.d,
                self.bounds.len()
            )));
        }
        if self
            .bounds
            .iter()
            .any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(RwmError::InvalidTarget(
                "bounds must satisfy lo < hi".into(),
            ));
        }
        match &self.density {
            Density::TruncatedGaussian { mean, sd } => {
                if mean.len() != self.d || sd.len() != self.d || sd.iter().any(|s| !(*s > 0.0)) {
                    return Err(RwmError::InvalidTarget(
                        "gaussian needs d means and d positive sds".into(),
                    ));
                }
            }
            Density::BimodalMixture { sd, weight, .. } => {
                if !(*sd > 0.0) || !(0.0..=1.0).contains(weight) {
                    return Err(RwmError::InvalidTarget("bad mixture parameters".into()));
                }
            }
            Density::Table { m, values } => {
                if *m == 0 || Some(values.len()) != m.checked_pow(self.d as u32) {
                    return Err(RwmError::InvalidTarget("table needs m^d values".into()));
                }
            }
            Density::Uniform => {}
        }
        Ok(())
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.bounds)
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Unnormalized density; zero outside the box.
    pub fn density_at(&self, x: &[f64]) -> f64 {
        if !self.in_box(x) {
            return 0.0;
        }
        match &self.density {
            Density::Uniform => 1.0,
            Density::TruncatedGaussian { mean, sd } => {
                let q: f64 = x
                    .iter()
                    .zip(mean.iter().zip(sd))
                    .map(|(v, (m, s))| ((v - m) / s).powi(2))
                    .sum();
                (-0.5 * q).exp()
            }
            Density::BimodalMixture { sep, sd, weight } => {
                let g = |c: f64| (-0.5 * ((x[0] - c) / sd).powi(2)).exp();
                let first = weight * g(-sep / 2.0) + (1.0 - weight) * g(sep / 2.0);
                let rest: f64 = x[1..].iter().map(|v| v * v).sum();
                first * (-0.5 * rest).exp()
            }
            Density::Table { m, values } => {
                let mut idx = 0;
                let mut stride = 1;
                for (v, (lo, hi)) in x.iter().zip(&self.bounds) {
                    let cell = (((v - lo) / (hi - lo)) * *m as f64).floor() as usize;
                    idx += cell.min(m - 1) * stride;
                    stride *= m;
                }
                values[idx]
            }
        }
    }

    /// Cell width along each axis for `m` cells per axis.
    pub fn spacing(&self, m: usize) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|(lo, hi)| (hi - lo) / m as f64)
            .collect()
    }

    /// Cell centers of the `m^d` grid, first axis fastest.
    pub fn grid_points(&self, m: usize) -> Vec<Vec<f64>> {
        let h = self.spacing(m);
        let n = m.pow(self.d as u32);
        (0..n)
            .map(|mut idx| {
                (0..self.d)
                    .map(|a| {
                        let i = idx % m;
                        idx /= m;
                        self.bounds[a].0 + (i as f64 + 0.5) * h[a]
                    })
                    .collect()
            })
            .collect()
    }

    fn checked_states(&self, m: usize, cap: usize) -> Result<usize, RwmError> {
        self.validate()?;
        match m.checked_pow(self.d as u32) {
            Some(n) if n <= cap && m > 0 => Ok(n),
            Some(n) => Err(RwmError::GridTooLarge { states: n, cap }),
            None => Err(RwmError::GridTooLarge {
                states: usize::MAX,
                cap,
            }),
        }
    }

    fn grid_density(&self, m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>), RwmError> {
        let points = self.grid_points(m);
        let mut dens = Vec::with_capacity(points.len());
        for p in &points {
            let v = self.density_at(p);
            if !(v > 0.0) || !v.is_finite() {
                return Err(RwmError::NonPositiveDensity(p.clone()));
            }
            dens.push(v);
        }
        Ok((points, dens))
    }

    /// Normalized grid weights of the target.
    pub fn discrete_pi(&self, m: usize) -> Result<Distribution, RwmError> {
        self.checked_states(m, DEFAULT_STATE_CAP)?;
        let (_, dens) = self.grid_density(m)?;
        Ok(Distribution::from_unnormalized(dens)?)
    }
}

/// Proposal covariance with a certified eigenvalue range `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RwmParameter {
    sigma: DMatrix<f64>,
    factor: DMatrix<f64>,
    a: f64,
    b: f64,
}

impl RwmParameter {
    pub fn new(sigma: DMatrix<f64>, a: f64, b: f64) -> Result<Self, RwmError> {
        let space = ParameterSpace::eigenbox(a, b, sigma.nrows())?;
        if !sigma.is_square() {
            return Err(RwmError::InvalidParameter("not square".into()));
        }
        if !space.contains(&sigma) {
            return Err(RwmError::InvalidParameter(format!(
                "not symmetric within {SYMMETRY_TOL} or eigenvalues outside [{a}, {b}]"
            )));
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let factor = cholesky_factor(&sym)
            .ok_or_else(|| RwmError::InvalidParameter("not positive definite".into()))?;
        Ok(Self {
            sigma: sym,
            factor,
            a,
            b,
        })
    }

    /// `sigma^2 I_d` with a box wide enough to contain it.
    pub fn isotropic(d: usize, variance: f64) -> Result<Self, RwmError> {
        Self::new(
            DMatrix::identity(d, d) * variance,
            variance * 0.5,
            variance * 2.0,
        )
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.a, self.b)
    }
}

struct ProposalWeights {
    precision: DMatrix<f64>,
    normalizer: f64,
}

impl ProposalWeights {
    fn new(param: &RwmParameter, h: &[f64]) -> Result<Self, RwmError> {
        let d = param.dim();
        let precision = param
            .sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| RwmError::InvalidParameter("singular covariance".into()))?;
        let extents: Vec<i64> = (0..d)
            .map(|a| (LATTICE_RADIUS * param.sigma[(a, a)].sqrt() / h[a]).ceil() as i64)
            .collect();
        let total: usize = extents
            .iter()
            .try_fold(1usize, |acc, k| acc.checked_mul((2 * k + 1) as usize))
            .unwrap_or(usize::MAX);
        if total > MAX_LATTICE_POINTS {
            return Err(RwmError::GridTooLarge {
                states: total,
                cap: MAX_LATTICE_POINTS,
            });
        }
        let mut w = Self {
            precision,
            normalizer: 1.0,
        };
        let mut normalizer = 0.0;
        let mut k: Vec<i64> = extents.iter().map(|e| -e).collect();
        let mut z = vec![0.0; d];
        'outer: loop {
            for a in 0..d {
                z[a] = k[a] as f64 * h[a];
            }
            normalizer += w.raw(&z);
            for a in 0..d {
                if k[a] < extents[a] {
                    k[a] += 1;
                    continue 'outer;
                }
                k[a] = -extents[a];
            }
            break;
        }
        w.normalizer = normalizer;
        Ok(w)
    }

    fn raw(&self, z: &[f64]) -> f64 {
        let d = z.len();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += z[i] * self.precision[(i, j)] * z[j];
            }
        }
        (-0.5 * q).exp()
    }

    fn prob(&self, z: &[f64]) -> f64 {
        self.raw(z) / self.normalizer
    }
}

/// Symmetric lattice proposal probabilities `q_ij` (sub-stochastic rows).
fn proposal_matrix(
    target: &CompactTarget,
    m: usize,
    param: &RwmParameter,
    points: &[Vec<f64>],
) -> Result<Vec<f64>, RwmError> {
    if param.dim() != target.d {
        return Err(RwmError::InvalidParameter(format!(
            "covariance is {0}x{0}, target has d = {1}",
            param.dim(),
            target.d
        )));
    }
    let h = target.spacing(m);
    let weights = ProposalWeights::new(param, &h)?;
    let n = points.len();
    let mut q = vec![0.0; n * n];
    let mut z = vec![0.0; target.d];
    for i in 0..n {
        for j in i..n {
            for a in 0..target.d {
                z[a] = points[j][a] - points[i][a];
            }
            let v = weights.prob(&z);
            q[i * n + j] = v;
            q[j * n + i] = v;
        }
    }
    Ok(q)
}

/// Exact Metropolis transition matrix of the discretized random walk with
/// proposal covariance `param` on the `m^d` grid.
pub fn build_discrete_rwm(
    target: &CompactTarget,
    m: usize,
    param: &RwmParameter,
    cap: usize,
) -> Result<StochasticMatrix, RwmError> {
    let n = target.checked_states(m, cap)?;
    let (points, dens) = target.grid_density(m)?;
    let q = proposal_matrix(target, m, param, &points)?;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let mut moved = 0.0;
        for j in 0..n {
            if i != j {
                let v = q[i * n + j] * (dens[j] / dens[i]).min(1.0);
                data[i * n + j] = v;
                moved += v;
            }
        }
        data[i * n + i] = (1.0 - moved).max(0.0);
    }
    Ok(StochasticMatrix::from_row_major(n, data)?)
}

/// Expected acceptance probability of the discretized chain at
/// stationarity: `sum_i pi_i sum_j q_ij min(1, pi_j / pi_i)`, with
/// out-of-box proposals counted as rejections.
pub fn discrete_acceptance_rate(
    target: &CompactTarget,
    m: usize,
    param: &RwmParameter,
) -> Result<f64, RwmError> {
    target.checked_states(m, DEFAULT_STATE_CAP)?;
    let (points, dens) = target.grid_density(m)?;
    let q = proposal_matrix(target, m, param, &points)?;
    let total: f64 = dens.iter().sum();
    let n = points.len();
    let mut rate = 0.0;
    for i in 0..n {
        let row: f64 = (0..n)
            .map(|j| q[i * n + j] * (dens[j] / dens[i]).min(1.0))
            .sum();
        rate += dens[i] / total * row;
    }
    Ok(rate)
}

/// `theta -> P_{theta I}` on a fixed grid.
#[derive(Debug, Clone)]
pub struct RwmGridFamily {
    pub target: CompactTarget,
    pub m: usize,
    pi: Distribution,
}

impl RwmGridFamily {
    pub fn new(target: CompactTarget, m: usize) -> Result<Self, RwmError> {
        let pi = target.discrete_pi(m)?;
        Ok(Self { target, m, pi })
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.target.grid_points(self.m)
    }
}

impl ParametricFamily for RwmGridFamily {
    fn kernel_at(&self, theta: f64) -> Result<StochasticMatrix, KernelError> {
        let param = RwmParameter::isotropic(self.target.d, theta)
            .map_err(|e| KernelError::InvalidDistribution(e.to_string()))?;
        build_discrete_rwm(&self.target, self.m, &param, DEFAULT_STATE_CAP).map_err(|e| match e {
            RwmError::Kernel(k) => k,
            other => KernelError::InvalidDistribution(other.to_string()),
        })
    }

    fn invariant(&self) -> &Distribution {
        &self.pi
    }
}

/// One continuous-lane Metropolis step.
#[derive(Debug, Clone, PartialEq)]
pub struct RwmStep {
    pub proposal: DVector<f64>,
    pub next: DVector<f64>,
    pub alpha: f64,
    pub z: DVector<f64>,
    pub accepted: bool,
}

/// Proposal `y = x + L z` (with `L L^T = Sigma`) and its acceptance
/// probability `min(1, pi(y) / pi(x))`; zero outside the box.
pub fn propose_with_noise(
    x: &DVector<f64>,
    param: &RwmParameter,
    target: &CompactTarget,
    z: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let y = x + param.factor() * z;
    let px = target.density_at(x.as_slice());
    let py = target.density_at(y.as_slice());
    let alpha = if py >= px { 1.0 } else { py / px };
    (y, alpha)
}

/// Draws `z ~ N(0, I)` and then the accept uniform, in that order.
pub fn rwm_propose_accept<R: Rng + ?Sized>(
    x: &DVector<f64>,
    param: &RwmParameter,
    target: &CompactTarget,
    rng: &mut R,
) -> RwmStep {
    let z = DVector::from_fn(param.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let (y, alpha) = propose_with_noise(x, param, target, &z);
    let u: f64 = rng.random();
    let accepted = u < alpha;
    RwmStep {
        next: if accepted { y.clone() } else { x.clone() },
        proposal: y,
        alpha,
        z,
        accepted,
    }
}

/// `min(1, L ||Sigma - Sigma_prev||_F)`.
pub fn lipschitz_surrogate(s: &RwmParameter, s_prev: &RwmParameter, l: f64) -> f64 {
    (l * (s.sigma() - s_prev.sigma()).norm()).min(1.0)
}

/// Largest ratio `sup_x d_tv(P_s(x, .), P_s'(x, .)) / ||s - s'||_F` over
/// all pairs of the given parameters on the discrete lane.
pub fn fit_lipschitz(
    target: &CompactTarget,
    m: usize,
    params: &[RwmParameter],
) -> Result<f64, RwmError> {
    let kernels = params
        .iter()
        .map(|p| build_discrete_rwm(target, m, p, DEFAULT_STATE_CAP))
        .collect::<Result<Vec<_>, _>>()?;
    let mut l: f64 = 0.0;
    for i in 0..params.len() {
        for j in (i + 1)..params.len() {
            let dist = (params[i].sigma() - params[j].sigma()).norm();
            if dist > 0.0 {
                l = l.max(max_tv_between_kernels(&kernels[i], &kernels[j])? / dist);
            }
        }
    }
    Ok(l)
}

/// Discrete-lane family on a grid of isotropic variances.
pub fn discrete_family(
    target: &CompactTarget,
    m: usize,
    variances: &[f64],
) -> Result<KernelFamily, RwmError> {
    Ok(RwmGridFamily::new(target.clone(), m)?.discretize(variances)?)
}

/// Adaptation rule for the continuous lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum ContinuousScheme {
    Fixed,
    /// Adaptive Metropolis: the proposal covariance is the running
    /// second-moment estimate.
    Am,
    /// Directional acceptance rate adaptation towards `alpha_star`.
    Ram {
        alpha_star: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ContinuousConfig {
    pub target: CompactTarget,
    pub scheme: ContinuousScheme,
    pub x0: Vec<f64>,
    pub sigma0: DMatrix<f64>,
    pub space: ParameterSpace,
    pub mode: ConstraintMode,
    pub gamma: StepSchedule,
    /// Lipschitz constant used for the `D_k` surrogate.
    pub lipschitz: f64,
}

/// Output of a continuous-lane run.
#[derive(Debug, Clone)]
pub struct ContinuousTrace {
    pub d: usize,
    /// `X_1, ..., X_n`, row-major with `d` columns.
    pub samples: Vec<f64>,
    pub alphas: Vec<f64>,
    pub accepted: usize,
    /// Surrogate `D_k` from [`lipschitz_surrogate`].
    pub d_series: Vec<f64>,
    /// `||S_k - S_{k-1}||_F` alongside its bound `gamma_k ||H_k||_F`.
    pub moves: Vec<(f64, f64)>,
    pub final_sigma: DMatrix<f64>,
}

impl ContinuousTrace {
    pub fn mean_alpha(&self) -> f64 {
        self.alphas.iter().sum::<f64>() / self.alphas.len().max(1) as f64
    }

    pub fn acceptance_fraction(&self) -> f64 {
        self.accepted as f64 / self.alphas.len().max(1) as f64
    }
}

/// Runs `n` steps of the continuous lane. Per step the stream yields the
/// proposal noise, then the accept uniform.
pub fn run_continuous<R: Rng + ?Sized>(
    cfg: &ContinuousConfig,
    n: usize,
    rng: &mut R,
) -> Result<ContinuousTrace, RwmError> {
    let d = cfg.target.d;
    if cfg.x0.len() != d || !cfg.target.in_box(&cfg.x0) || cfg.target.density_at(&cfg.x0) <= 0.0 {
        return Err(RwmError::InvalidTarget("x0 must lie in the support".into()));
    }
    let (a, b) = match cfg.space {
        ParameterSpace::EigenBox { a, b, .. } => (a, b),
        ParameterSpace::FiniteIndex { .. } => {
            return Err(RwmError::InvalidParameter(
                "continuous lane needs an eigenvalue box".into(),
            ))
        }
    };
    let mut param = RwmParameter::new(cfg.sigma0.clone(), a, b)?;
    let mut x = DVector::from_vec(cfg.x0.clone());
    let mut am = AmState::new(DVector::zeros(d), cfg.sigma0.clone(), cfg.gamma.clone());
    let mut sa = SAState::new(cfg.sigma0.clone(), cfg.gamma.clone());

    let mut trace = ContinuousTrace {
        d,
        samples: Vec::with_capacity(n * d),
        alphas: Vec::with_capacity(n),
        accepted: 0,
        d_series: Vec::with_capacity(n),
        moves: Vec::with_capacity(n),
        final_sigma: cfg.sigma0.clone(),
    };
    for _ in 0..n {
        let step = rwm_propose_accept(&x, &param, &cfg.target, rng);
        x = step.next;
        trace.samples.extend(x.iter());
        trace.alphas.push(step.alpha);
        trace.accepted += usize::from(step.accepted);

        let new_sigma = match &cfg.scheme {
            ContinuousScheme::Fixed => None,
            ContinuousScheme::Am => {
                let info = am.update(&x, &cfg.space, cfg.mode)?;
                trace.moves.push((info.moved, info.increment_norm));
                Some(am.sigma.s.clone())
            }
            ContinuousScheme::Ram { alpha_star } => {
                let h = ram_field(&step.z, step.alpha, *alpha_star, param.factor())?;
                let info = sa.step(&h, &cfg.space, cfg.mode)?;
                trace.moves.push((info.moved, info.increment_norm));
                Some(sa.s.clone())
            }
        };
        match new_sigma {
            Some(s) => {
                let next = RwmParameter::new(s, a, b)?;
                trace
                    .d_series
                    .push(lipschitz_surrogate(&next, &param, cfg.lipschitz));
                param = next;
            }
            None => trace.d_series.push(0.0),
        }
    }
    trace.final_sigma = param.sigma().clone();
    Ok(trace)
}
