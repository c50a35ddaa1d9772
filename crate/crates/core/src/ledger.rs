//! Adaptive chains on finite families and their exact martingale
//! decomposition
//!
//! ```text
//! sum_{k<=n} (phi(X_k) - pi(phi)) = M_n + A_n + R_n
//! ```
//!
//! with `M` the martingale built from `Delta_k`, `A` the adaptation
//! perturbation and `R` a telescoping remainder.
//!
//! # Randomness
//!
//! Chain `i` of a study with root seed `r` draws from
//! `ChaCha8Rng::seed_from_u64(r)` with `set_stream(i)`. Each step consumes
//! the transition uniform first, then whatever the scheme draws (the
//! activation uniform of a random rare schedule, the proposal normal of the
//! RAM-style scheme).

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::adaptation::{
    ram_field, AdaptationError, AmState, ConstraintMode, ParameterSpace, RareClock, RareKind,
    RareSchedule, SAState, StepSchedule,
};
use crate::families::KernelFamily;
use crate::kernel::{dobrushin_coefficient, kernel_apply, max_tv_between_kernels, KernelError};
use crate::poisson::{
    solve_poisson_exact, variance_from_solution, PoissonError, PoissonSolution, TestFunction,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error("scheme produced parameter index {index} at step {k}, family has {len} members")]
    SchemeEscape { k: usize, index: usize, len: usize },
    #[error("invalid start: {0}")]
    InvalidStart(String),
    #[error("no Poisson solution for parameter index {0}")]
    MissingSolution(usize),
    #[error("oracle variance is zero but the empirical variance is {0}")]
    DegenerateVariance(f64),
    #[error("kernel {index} has Dobrushin coefficient {beta}, not below 1")]
    DobrushinViolation { index: usize, beta: f64 },
    #[error("invalid study: {0}")]
    InvalidStudy(String),
}

/// Random draws consumed at step `k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxDraw {
    /// Uniform used for the inverse-CDF transition.
    pub u: f64,
    /// Activation uniform of a random rare schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    /// Proposal normal of the RAM-style scheme.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Acceptance probability of that proposal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// `(X_k, S_k)` for `k = 0..=n`; `aux[k - 1]` holds the draws of step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: Vec<usize>,
    pub s: Vec<usize>,
    pub n: usize,
    pub seed: u64,
    pub stream: u64,
    pub aux: Vec<AuxDraw>,
}

/// What a scheme sees when choosing `S_k`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub k: usize,
    pub x_prev: usize,
    pub x: usize,
    pub s_prev: usize,
    pub family: &'a KernelFamily,
}

/// Rule producing `S_k` from the history up to `X_k`.
pub trait AdaptationScheme: Send {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        rng: &mut dyn RngCore,
        aux: &mut AuxDraw,
    ) -> Result<usize, LedgerError>;
}

/// `S_k = s` for every `k`.
#[derive(Debug, Clone)]
pub struct Constant(pub usize);

impl AdaptationScheme for Constant {
    fn next_index(
        &mut self,
        _: &StepContext<'_>,
        _: &mut dyn RngCore,
        _: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        Ok(self.0)
    }
}

/// Exogenous periodic schedule `S_k = values[k mod len]`.
#[derive(Debug, Clone)]
pub struct Sequence(pub Vec<usize>);

impl AdaptationScheme for Sequence {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        _: &mut dyn RngCore,
        _: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        Ok(self.0[ctx.k % self.0.len()])
    }
}

fn grid_of(family: &KernelFamily) -> Result<&[f64], LedgerError> {
    family.grid().ok_or_else(|| {
        LedgerError::InvalidStudy("scheme needs a family with a parameter grid".into())
    })
}

fn coordinate_bounds(coords: &[f64]) -> (f64, f64) {
    let mut sorted = coords.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 {
        return (sorted[0] - 0.5, sorted[0] + 0.5);
    }
    (
        sorted[0] - 0.5 * (sorted[1] - sorted[0]),
        sorted[n - 1] + 0.5 * (sorted[n - 1] - sorted[n - 2]),
    )
}

fn nearest_state(coords: &[f64], y: f64) -> usize {
    let mut best = 0;
    for (i, c) in coords.iter().enumerate() {
        if (c - y).abs() < (coords[best] - y).abs() {
            best = i;
        }
    }
    best
}

/// Adaptive Metropolis on a parameter grid: `Sigma_k` tracks the second
/// moment of the state coordinate with `gamma_k = 1/k`, and `S_k` is the
/// grid point nearest to `lambda Sigma_k`.
#[derive(Debug, Clone)]
pub struct AmGrid {
    state: AmState,
    lambda: f64,
    coords: Vec<f64>,
    space: ParameterSpace,
    mode: ConstraintMode,
}

impl AmGrid {
    pub fn new(
        coords: Vec<f64>,
        sigma0: f64,
        lambda: f64,
        a: f64,
        b: f64,
        mode: ConstraintMode,
    ) -> Result<Self, LedgerError> {
        let space = ParameterSpace::eigenbox(a, b, 1)?;
        Ok(Self {
            state: AmState::new(
                nalgebra::DVector::zeros(1),
                DMatrix::from_element(1, 1, sigma0),
                StepSchedule::Harmonic,
            ),
            lambda,
            coords,
            space,
            mode,
        })
    }
}

impl AdaptationScheme for AmGrid {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        _: &mut dyn RngCore,
        _: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        let x = nalgebra::DVector::from_element(1, self.coords[ctx.x]);
        self.state.update(&x, &self.space, self.mode)?;
        let theta = self.lambda * self.state.sigma.s[(0, 0)];
        grid_of(ctx.family)?;
        Ok(ctx.family.nearest(theta))
    }
}

/// Acceptance-rate adaptation on a parameter grid. The scheme proposes
/// `y = x + sigma Z` on the state coordinates, snaps `y` to the nearest
/// state (rejecting outside the covered interval), and moves `sigma^2`
/// with `gamma_k = k^(-2/3)` towards acceptance rate `alpha_star`.
#[derive(Debug, Clone)]
pub struct RamGrid {
    sa: SAState,
    alpha_star: f64,
    coords: Vec<f64>,
    bounds: (f64, f64),
    space: ParameterSpace,
    mode: ConstraintMode,
}

impl RamGrid {
    pub fn new(
        coords: Vec<f64>,
        sigma0: f64,
        alpha_star: f64,
        a: f64,
        b: f64,
        mode: ConstraintMode,
    ) -> Result<Self, LedgerError> {
        Ok(Self {
            sa: SAState::scalar(sigma0, StepSchedule::two_thirds()),
            alpha_star,
            bounds: coordinate_bounds(&coords),
            coords,
            space: ParameterSpace::eigenbox(a, b, 1)?,
            mode,
        })
    }
}

impl AdaptationScheme for RamGrid {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        rng: &mut dyn RngCore,
        aux: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        grid_of(ctx.family)?;
        let z: f64 = rng.sample(StandardNormal);
        let sigma2 = self.sa.s[(0, 0)];
        let y = self.coords[ctx.x] + sigma2.sqrt() * z;
        let alpha = if y < self.bounds.0 || y > self.bounds.1 {
            0.0
        } else {
            let w = ctx.family.pi().weights();
            (w[nearest_state(&self.coords, y)] / w[ctx.x]).min(1.0)
        };
        aux.z = Some(z);
        aux.alpha = Some(alpha);
        if z != 0.0 {
            let h = ram_field(
                &nalgebra::DVector::from_element(1, z),
                alpha,
                self.alpha_star,
                &DMatrix::from_element(1, 1, sigma2.sqrt()),
            )?;
            self.sa.step(&h, &self.space, self.mode)?;
        }
        Ok(ctx.family.nearest(self.sa.s[(0, 0)]))
    }
}

/// Gates an inner scheme with a rare adaptation schedule: between
/// adaptation times `S_k = S_{k-1}` and the inner scheme is not consulted.
pub struct Rare {
    clock: RareClock,
    inner: Box<dyn AdaptationScheme>,
}

impl Rare {
    pub fn new(schedule: RareSchedule, inner: Box<dyn AdaptationScheme>) -> Self {
        Self {
            clock: RareClock::new(schedule),
            inner,
        }
    }
}

impl AdaptationScheme for Rare {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        rng: &mut dyn RngCore,
        aux: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        let v = if self.clock.schedule().is_random() {
            let v: f64 = rng.random();
            aux.v = Some(v);
            v
        } else {
            0.0
        };
        if self.clock.decide(ctx.k, v).adapt {
            self.inner.next_index(ctx, rng, aux)
        } else {
            Ok(ctx.s_prev)
        }
    }
}

/// `theta_k = theta_{k-1} + gamma_k [(target - theta_{k-1}) + noise phi_bar(X_k)]`
/// with summable `gamma_k = c k^(-exponent)`, `exponent > 1`. The
/// parameter converges almost surely, to a random limit near `target`.
#[derive(Debug, Clone)]
pub struct Converging {
    theta: f64,
    target: f64,
    noise_scale: f64,
    schedule: StepSchedule,
    phi_bar: Vec<f64>,
    k: usize,
}

impl Converging {
    pub fn new(
        theta0: f64,
        target: f64,
        noise_scale: f64,
        c: f64,
        exponent: f64,
        phi_bar: Vec<f64>,
    ) -> Result<Self, LedgerError> {
        if !(exponent > 1.0) || !(c > 0.0) {
            return Err(LedgerError::InvalidStudy(
                "converging scheme needs c > 0 and exponent > 1".into(),
            ));
        }
        Ok(Self {
            theta: theta0,
            target,
            noise_scale,
            schedule: StepSchedule::Power { c, exponent },
            phi_bar,
            k: 0,
        })
    }
}

impl AdaptationScheme for Converging {
    fn next_index(
        &mut self,
        ctx: &StepContext<'_>,
        _: &mut dyn RngCore,
        _: &mut AuxDraw,
    ) -> Result<usize, LedgerError> {
        grid_of(ctx.family)?;
        self.k += 1;
        let g = self.schedule.gamma(self.k).min(1.0);
        self.theta += g * ((self.target - self.theta) + self.noise_scale * self.phi_bar[ctx.x]);
        Ok(ctx.family.nearest(self.theta))
    }
}

/// Serializable description of a built-in scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchemeSpec {
    Constant {
        s: usize,
    },
    Sequence {
        values: Vec<usize>,
    },
    Am {
        sigma0: f64,
        #[serde(default = "one")]
        lambda: f64,
        a: f64,
        b: f64,
        #[serde(default)]
        mode: ConstraintMode,
        #[serde(default)]
        coords: Option<Vec<f64>>,
    },
    Ram {
        sigma0: f64,
        #[serde(default = "default_alpha_star")]
        alpha_star: f64,
        a: f64,
        b: f64,
        #[serde(default)]
        mode: ConstraintMode,
        #[serde(default)]
        coords: Option<Vec<f64>>,
    },
    Rare {
        schedule: RareKind,
        inner: Box<SchemeSpec>,
    },
    Converging {
        theta0: f64,
        target: f64,
        noise_scale: f64,
        c: f64,
        exponent: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_alpha_star() -> f64 {
    0.234
}

impl SchemeSpec {
    /// Instantiates a fresh scheme. `coords` default to the state indices.
    pub fn build(
        &self,
        family: &KernelFamily,
        phi: &TestFunction,
    ) -> Result<Box<dyn AdaptationScheme>, LedgerError> {
        let default_coords = || (0..family.states()).map(|i| i as f64).collect::<Vec<_>>();
        let check_coords = |c: &Option<Vec<f64>>| -> Result<Vec<f64>, LedgerError> {
            let c = c.clone().unwrap_or_else(default_coords);
            if c.len() != family.states() {
                return Err(LedgerError::InvalidStudy(format!(
                    "{} coordinates for {} states",
                    c.len(),
                    family.states()
                )));
            }
            Ok(c)
        };
        Ok(match self {
            SchemeSpec::Constant { s } => Box::new(Constant(*s)),
            SchemeSpec::Sequence { values } => {
                if values.is_empty() {
                    return Err(LedgerError::InvalidStudy("empty sequence".into()));
                }
                Box::new(Sequence(values.clone()))
            }
            SchemeSpec::Am {
                sigma0,
                lambda,
                a,
                b,
                mode,
                coords,
            } => Box::new(AmGrid::new(
                check_coords(coords)?,
                *sigma0,
                *lambda,
                *a,
                *b,
                *mode,
            )?),
            SchemeSpec::Ram {
                sigma0,
                alpha_star,
                a,
                b,
                mode,
                coords,
            } => Box::new(RamGrid::new(
                check_coords(coords)?,
                *sigma0,
                *alpha_star,
                *a,
                *b,
                *mode,
            )?),
            SchemeSpec::Rare { schedule, inner } => Box::new(Rare::new(
                RareSchedule::new(schedule.clone()),
                inner.build(family, phi)?,
            )),
            SchemeSpec::Converging {
                theta0,
                target,
                noise_scale,
                c,
                exponent,
            } => Box::new(Converging::new(
                *theta0,
                *target,
                *noise_scale,
                *c,
                *exponent,
                phi.centered(),
            )?),
        })
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_row(row: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (j, p) in row.iter().enumerate() {
        if *p > 0.0 {
            cum += p;
            last = j;
            if u < cum {
                return j;
            }
        }
    }
    last
}

/// Simulates `X_{k+1} ~ P_{S_k}(X_k, .)` and `S_{k+1}` from the scheme.
pub fn run_adaptive_chain(
    family: &KernelFamily,
    scheme: &mut dyn AdaptationScheme,
    x0: usize,
    s0: usize,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Trajectory, LedgerError> {
    if x0 >= family.states() {
        return Err(LedgerError::InvalidStart(format!(
            "x0 = {x0} with {} states",
            family.states()
        )));
    }
    if s0 >= family.len() {
        return Err(LedgerError::InvalidStart(format!(
            "s0 = {s0} with {} members",
            family.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut traj = Trajectory {
        x: Vec::with_capacity(n + 1),
        s: Vec::with_capacity(n + 1),
        n,
        seed,
        stream,
        aux: Vec::with_capacity(n),
    };
    traj.x.push(x0);
    traj.s.push(s0);
    let (mut x, mut s) = (x0, s0);
    for k in 1..=n {
        let u: f64 = rng.random();
        let next = sample_row(family.kernel(s).row(x), u);
        let mut aux = AuxDraw {
            u,
            ..Default::default()
        };
        let ctx = StepContext {
            k,
            x_prev: x,
            x: next,
            s_prev: s,
            family,
        };
        let s_next = scheme.next_index(&ctx, &mut rng, &mut aux)?;
        if s_next >= family.len() {
            return Err(LedgerError::SchemeEscape {
                k,
                index: s_next,
                len: family.len(),
            });
        }
        x = next;
        s = s_next;
        traj.x.push(x);
        traj.s.push(s);
        traj.aux.push(aux);
    }
    Ok(traj)
}

/// `g_s`, `P_s g_s` and `P_s (g_s^2)` for one family member.
#[derive(Debug, Clone)]
pub struct OracleEntry {
    pub solution: PoissonSolution,
    pub pg: Vec<f64>,
    pub pg2: Vec<f64>,
}

/// Cached Poisson solutions for the members of a family.
#[derive(Debug, Clone)]
pub struct PoissonOracle {
    pub phi: TestFunction,
    entries: Vec<Option<OracleEntry>>,
}

impl PoissonOracle {
    /// Solves for every member.
    pub fn for_family(family: &KernelFamily, phi: &TestFunction) -> Result<Self, LedgerError> {
        let all: Vec<usize> = (0..family.len()).collect();
        Self::for_indices(family, phi, &all)
    }

    /// Solves only for the listed members.
    pub fn for_indices(
        family: &KernelFamily,
        phi: &TestFunction,
        indices: &[usize],
    ) -> Result<Self, LedgerError> {
        let mut entries = vec![None; family.len()];
        let solved: Vec<(usize, OracleEntry)> = indices
            .par_iter()
            .map(|&s| {
                let p = family.kernel(s);
                let solution = solve_poisson_exact(p, family.pi(), phi)?;
                let pg = kernel_apply(p, &solution.g)?;
                let sq: Vec<f64> = solution.g.iter().map(|g| g * g).collect();
                let pg2 = kernel_apply(p, &sq)?;
                Ok((s, OracleEntry { solution, pg, pg2 }))
            })
            .collect::<Result<_, LedgerError>>()?;
        for (s, e) in solved {
            entries[s] = Some(e);
        }
        Ok(Self {
            phi: phi.clone(),
            entries,
        })
    }

    pub fn get(&self, s: usize) -> Result<&OracleEntry, LedgerError> {
        self.entries
            .get(s)
            .and_then(Option::as_ref)
            .ok_or(LedgerError::MissingSolution(s))
    }
}

/// Per-step terms and running sums of the decomposition. Index `k - 1`
/// holds step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionLedger {
    pub delta: Vec<f64>,
    pub m: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    pub cond_var: Vec<f64>,
    /// `sum_{j<=k} (phi(X_j) - pi(phi))`.
    pub centered_sum: Vec<f64>,
}

/// Final values of the scaled perturbation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledTerms {
    pub n: usize,
    pub m_over_n: f64,
    pub a_over_n: f64,
    pub r_over_n: f64,
    pub a_over_sqrt_n: f64,
    pub r_over_sqrt_n: f64,
}

impl DecompositionLedger {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// `max_k |M_k + A_k + R_k - sum_{j<=k} phi_bar(X_j)| / k`.
    pub fn identity_error(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                (self.m[i] + self.a[i] + self.r[i] - self.centered_sum[i]).abs() / (i + 1) as f64
            })
            .fold(0.0, f64::max)
    }

    /// Largest gap between the accumulated `R_k` and the closed form
    /// `P_{S_0} g_{S_0}(X_0) - P_{S_k} g_{S_k}(X_k)`.
    pub fn telescoping_error(
        &self,
        traj: &Trajectory,
        oracle: &PoissonOracle,
    ) -> Result<f64, LedgerError> {
        let start = oracle.get(traj.s[0])?.pg[traj.x[0]];
        let mut worst: f64 = 0.0;
        for k in 1..=self.len() {
            let end = oracle.get(traj.s[k])?.pg[traj.x[k]];
            worst = worst.max((self.r[k - 1] - (start - end)).abs());
        }
        Ok(worst)
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.delta.iter().map(|d| d.abs()).fold(0.0, f64::max)
    }

    /// `A_n`, `R_n` and `M_n` scaled by `n` and `sqrt(n)`.
    pub fn scaled_terms(&self) -> ScaledTerms {
        let n = self.len();
        let (m, a, r) = match n {
            0 => (0.0, 0.0, 0.0),
            _ => (self.m[n - 1], self.a[n - 1], self.r[n - 1]),
        };
        let nf = (n as f64).max(1.0);
        ScaledTerms {
            n,
            m_over_n: m / nf,
            a_over_n: a / nf,
            r_over_n: r / nf,
            a_over_sqrt_n: a / nf.sqrt(),
            r_over_sqrt_n: r / nf.sqrt(),
        }
    }

    /// CSV with header `k,x,s_index,delta,M,A,R,D,cond_var`; states and
    /// parameters are zero-based indices.
    pub fn write_csv<W: Write>(&self, mut w: W, traj: &Trajectory) -> io::Result<()> {
        writeln!(w, "k,x,s_index,delta,M,A,R,D,cond_var")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                i + 1,
                traj.x[i + 1],
                traj.s[i + 1],
                self.delta[i],
                self.m[i],
                self.a[i],
                self.r[i],
                self.d[i],
                self.cond_var[i]
            )?;
        }
        Ok(())
    }
}

/// Caches `max_tv_between_kernels` for unordered member pairs.
#[derive(Debug, Default, Clone)]
pub struct KernelDistanceCache(HashMap<(usize, usize), f64>);

impl KernelDistanceCache {
    pub fn get(&mut self, family: &KernelFamily, s: usize, t: usize) -> Result<f64, LedgerError> {
        if s == t {
            return Ok(0.0);
        }
        let key = (s.min(t), s.max(t));
        if let Some(v) = self.0.get(&key) {
            return Ok(*v);
        }
        let v = max_tv_between_kernels(family.kernel(s), family.kernel(t))?;
        self.0.insert(key, v);
        Ok(v)
    }
}

/// Exact decomposition of a trajectory.
pub fn decompose(
    traj: &Trajectory,
    family: &KernelFamily,
    oracle: &PoissonOracle,
) -> Result<DecompositionLedger, LedgerError> {
    decompose_with_cache(traj, family, oracle, &mut KernelDistanceCache::default())
}

pub fn decompose_with_cache(
    traj: &Trajectory,
    family: &KernelFamily,
    oracle: &PoissonOracle,
    cache: &mut KernelDistanceCache,
) -> Result<DecompositionLedger, LedgerError> {
    let n = traj.n;
    if traj.x.len() != n + 1 || traj.s.len() != n + 1 {
        return Err(LedgerError::InvalidStudy(
            "trajectory lengths disagree with n".into(),
        ));
    }
    let phi = &oracle.phi;
    let mut out = DecompositionLedger {
        delta: Vec::with_capacity(n),
        m: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        cond_var: Vec::with_capacity(n),
        centered_sum: Vec::with_capacity(n),
    };
    let (mut m, mut a, mut r, mut sum) = (0.0, 0.0, 0.0, 0.0);
    for k in 1..=n {
        let (xp, x) = (traj.x[k - 1], traj.x[k]);
        let (sp, s) = (traj.s[k - 1], traj.s[k]);
        let prev = oracle.get(sp)?;
        let cur = oracle.get(s)?;
        let gp = &prev.solution.g;
        let delta = gp[x] - prev.pg[xp];
        m += delta;
        a += cur.solution.g[x] - gp[x];
        r += prev.pg[xp] - cur.pg[x];
        sum += phi.values[x] - phi.mean_under_pi;
        out.delta.push(delta);
        out.m.push(m);
        out.a.push(a);
        out.r.push(r);
        out.d.push(cache.get(family, sp, s)?);
        out.cond_var.push(prev.pg2[xp] - prev.pg[xp] * prev.pg[xp]);
        out.centered_sum.push(sum);
    }
    Ok(out)
}

/// Exact conditional moments of `Delta_k` given the past.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub steps: usize,
    /// `max_k |E[Delta_k | F_{k-1}]|`.
    pub max_cond_mean: f64,
    /// `max_k |E[Delta_k^2 | F_{k-1}] - (P g^2 - (P g)^2)(X_{k-1})|`.
    pub max_cond_var_dev: f64,
}

/// Recomputes both conditional moments by direct row sums.
pub fn martingale_check(
    traj: &Trajectory,
    ledger: &DecompositionLedger,
    family: &KernelFamily,
    oracle: &PoissonOracle,
) -> Result<MartingaleReport, LedgerError> {
    let mut report = MartingaleReport {
        steps: ledger.len(),
        max_cond_mean: 0.0,
        max_cond_var_dev: 0.0,
    };
    for k in 1..=ledger.len() {
        let (xp, sp) = (traj.x[k - 1], traj.s[k - 1]);
        let e = oracle.get(sp)?;
        let row = family.kernel(sp).row(xp);
        let centre = e.pg[xp];
        let (mut mean, mut second) = (0.0, 0.0);
        for (p, g) in row.iter().zip(&e.solution.g) {
            mean += p * g;
            second += p * (g - centre) * (g - centre);
        }
        report.max_cond_mean = report.max_cond_mean.max((mean - centre).abs());
        report.max_cond_var_dev = report
            .max_cond_var_dev
            .max((second - ledger.cond_var[k - 1]).abs());
    }
    Ok(report)
}

/// Chain definition shared by the replication studies.
#[derive(Clone)]
pub struct ChainSpec<'a> {
    pub family: &'a KernelFamily,
    pub scheme: SchemeSpec,
    pub phi: TestFunction,
    pub x0: usize,
    pub s0: usize,
}

impl ChainSpec<'_> {
    /// Runs chain `stream` under root `seed`.
    pub fn run(&self, n: usize, seed: u64, stream: u64) -> Result<Trajectory, LedgerError> {
        let mut scheme = self.scheme.build(self.family, &self.phi)?;
        run_adaptive_chain(
            self.family,
            scheme.as_mut(),
            self.x0,
            self.s0,
            n,
            seed,
            stream,
        )
    }
}

/// Root seed plus number of chains; chain `i` uses stream `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub root: u64,
    pub chains: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnRow {
    pub n: usize,
    pub median_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnTable {
    pub pi_phi: f64,
    pub rows: Vec<LlnRow>,
    /// Least-squares slope of `log(median error)` against `log n`.
    pub slope: f64,
    /// Median error strictly decreasing along the grid.
    pub decreasing: bool,
}

impl LlnTable {
    /// CSV with header `n,median_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n,median_error")?;
        for row in &self.rows {
            writeln!(w, "{},{:e}", row.n, row.median_error)?;
        }
        Ok(())
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Errors `|n^-1 sum phi(X_k) - pi(phi)|` at every `n` in the grid, one
/// chain per seed stream, summarized by the median over chains.
pub fn lln_study(
    spec: &ChainSpec<'_>,
    n_grid: &[usize],
    seeds: SeedPlan,
) -> Result<LlnTable, LedgerError> {
    if n_grid.is_empty() || seeds.chains == 0 || n_grid.contains(&0) {
        return Err(LedgerError::InvalidStudy(
            "empty grid, zero n or no chains".into(),
        ));
    }
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let n_max = *grid.last().expect("non-empty");
    let pi_phi = spec.phi.mean_under_pi;
    let per_chain: Vec<Vec<f64>> = (0..seeds.chains as u64)
        .into_par_iter()
        .map(|stream| {
            let traj = spec.run(n_max, seeds.root, stream)?;
            let mut sum = 0.0;
            let mut out = Vec::with_capacity(grid.len());
            let mut next = 0;
            for k in 1..=n_max {
                sum += spec.phi.values[traj.x[k]];
                if grid[next] == k {
                    out.push((sum / k as f64 - pi_phi).abs());
                    next += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_, LedgerError>>()?;
    let rows: Vec<LlnRow> = grid
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let errors: Vec<f64> = per_chain.iter().map(|c| c[i]).collect();
            LlnRow {
                n,
                median_error: median(&errors),
                errors,
            }
        })
        .collect();
    let lx: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = rows
        .iter()
        .map(|r| r.median_error.max(1e-300).ln())
        .collect();
    let slope = if rows.len() > 1 {
        fit_slope(&lx, &ly)
    } else {
        0.0
    };
    let decreasing = rows.len() > 1
        && rows
            .windows(2)
            .all(|w| w[1].median_error < w[0].median_error);
    Ok(LlnTable {
        pi_phi,
        rows,
        slope,
        decreasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub replications: usize,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub sigma2_oracle: f64,
    /// `empirical_var / sigma2_oracle`, 1 when both vanish.
    pub ratio: f64,
    /// Kolmogorov-Smirnov distance of the standardized replicates to `N(0, 1)`.
    pub ks_statistic: f64,
    /// Histogram of final parameter indices, `(index, count)`.
    pub final_indices: Vec<(usize, usize)>,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

impl CltReport {
    /// CSV with header `replicate,scaled_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "replicate,scaled_error")?;
        for (i, v) in self.replicates.iter().enumerate() {
            writeln!(w, "{i},{v:e}")?;
        }
        Ok(())
    }
}

/// KS distance of a sample to the standard normal law.
pub fn ks_statistic_normal(sample: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

const DEGENERATE_TOL: f64 = 1e-12;

/// Replicates `sqrt(n) (avg - pi(phi))`. The oracle variance is
/// `pi(g^2 - (P g)^2)` at each replicate's final parameter, averaged over
/// replicates; for a constant scheme it is the variance at that kernel.
pub fn clt_study(
    spec: &ChainSpec<'_>,
    n: usize,
    seeds: SeedPlan,
) -> Result<CltReport, LedgerError> {
    if n == 0 || seeds.chains < 2 {
        return Err(LedgerError::InvalidStudy(
            "need n >= 1 and at least two chains".into(),
        ));
    }
    let pi_phi = spec.phi.mean_under_pi;
    let runs: Vec<(f64, usize)> = (0..seeds.chains as u64)
        .into_par_iter()
        .map(|stream| {
            let traj = spec.run(n, seeds.root, stream)?;
            let sum: f64 = traj.x[1..].iter().map(|&x| spec.phi.values[x]).sum();
            Ok(((n as f64).sqrt() * (sum / n as f64 - pi_phi), traj.s[n]))
        })
        .collect::<Result<_, LedgerError>>()?;
    let replicates: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for (_, s) in &runs {
        *counts.entry(*s).or_default() += 1;
    }
    let mut final_indices: Vec<(usize, usize)> = counts.into_iter().collect();
    final_indices.sort_unstable();
    let mut sigma2 = 0.0;
    for (s, count) in &final_indices {
        let p = spec.family.kernel(*s);
        let sol = solve_poisson_exact(p, spec.family.pi(), &spec.phi)?;
        sigma2 += variance_from_solution(p, spec.family.pi(), &sol)? * *count as f64;
    }
    sigma2 /= runs.len() as f64;

    let r = replicates.len() as f64;
    let mean = replicates.iter().sum::<f64>() / r;
    let var = replicates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let (ratio, ks) = if sigma2 <= DEGENERATE_TOL {
        if var > DEGENERATE_TOL {
            return Err(LedgerError::DegenerateVariance(var));
        }
        (1.0, 0.0)
    } else {
        let sd = sigma2.sqrt();
        let z: Vec<f64> = replicates.iter().map(|v| v / sd).collect();
        (var / sigma2, ks_statistic_normal(&z))
    };
    Ok(CltReport {
        n,
        replications: runs.len(),
        empirical_mean: mean,
        empirical_var: var,
        sigma2_oracle: sigma2,
        ratio,
        ks_statistic: ks,
        final_indices,
        replicates,
    })
}

/// Monte Carlo check of `E[A_n^2] / n <= C'^2 [1 + 2 beta / (1 - beta)]`
/// with `C' = 2 osc(phi) / (1 - beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnBoundReport {
    pub n: usize,
    pub replications: usize,
    pub beta: f64,
    pub c_prime: f64,
    /// Sample mean of `A_n^2`.
    pub mean_a2: f64,
    /// `mean_a2 / n`, the quantity compared to the bound.
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Runs the periodic parameter sequence `schedule` and compares the second
/// moment of `A_n` to its bound. Passes when `estimate - std_error <= bound`.
pub fn an_bound_check(
    family: &KernelFamily,
    schedule: &[usize],
    phi: &TestFunction,
    x0: usize,
    n: usize,
    seeds: SeedPlan,
) -> Result<AnBoundReport, LedgerError> {
    if schedule.is_empty() || n == 0 || seeds.chains < 2 {
        return Err(LedgerError::InvalidStudy(
            "need a schedule, n >= 1 and at least two chains".into(),
        ));
    }
    let mut used: Vec<usize> = schedule.to_vec();
    used.sort_unstable();
    used.dedup();
    if let Some(&bad) = used.iter().find(|&&s| s >= family.len()) {
        return Err(LedgerError::SchemeEscape {
            k: 0,
            index: bad,
            len: family.len(),
        });
    }
    let mut beta: f64 = 0.0;
    for &s in &used {
        let b = dobrushin_coefficient(family.kernel(s));
        if b >= 1.0 - 1e-12 {
            return Err(LedgerError::DobrushinViolation { index: s, beta: b });
        }
        beta = beta.max(b);
    }
    let oracle = PoissonOracle::for_indices(family, phi, &used)?;
    let spec = ChainSpec {
        family,
        scheme: SchemeSpec::Sequence {
            values: schedule.to_vec(),
        },
        phi: phi.clone(),
        x0,
        s0: schedule[0],
    };
    let a2: Vec<f64> = (0..seeds.chains as u64)
        .into_par_iter()
        .map(|stream| {
            let traj = spec.run(n, seeds.root, stream)?;
            let ledger = decompose(&traj, family, &oracle)?;
            Ok(ledger.a[n - 1].powi(2))
        })
        .collect::<Result<_, LedgerError>>()?;
    let r = a2.len() as f64;
    let mean = a2.iter().sum::<f64>() / r;
    let sd = (a2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let c_prime = 2.0 * phi.osc / (1.0 - beta);
    let bound = c_prime * c_prime * (1.0 + 2.0 * beta / (1.0 - beta));
    let estimate = mean / n as f64;
    let std_error = sd / r.sqrt() / n as f64;
    Ok(AnBoundReport {
        n,
        replications: a2.len(),
        beta,
        c_prime,
        mean_a2: mean,
        estimate,
        std_error,
        bound,
        pass: estimate - std_error <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{cyclic_family, cyclic_pi};
    use approx::assert_abs_diff_eq;

    fn indicator_first() -> TestFunction {
        TestFunction::indicator(0, &cyclic_pi()).unwrap()
    }

    #[test]
    fn cyclic_orbit_from_second_state() {
        let fam = cyclic_family();
        let traj = run_adaptive_chain(&fam, &mut Sequence(vec![0, 1]), 1, 0, 8, 1, 0).unwrap();
        assert_eq!(traj.x, vec![1, 2, 1, 2, 1, 2, 1, 2, 1]);
        assert_eq!(traj.s, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn zero_length_chain() {
        let fam = cyclic_family();
        let traj = run_adaptive_chain(&fam, &mut Constant(1), 2, 1, 0, 1, 0).unwrap();
        assert_eq!((traj.x, traj.s, traj.aux.len()), (vec![2], vec![1], 0));
    }

    #[test]
    fn escape_is_reported() {
        let fam = cyclic_family();
        let err = run_adaptive_chain(&fam, &mut Constant(5), 0, 0, 3, 1, 0).unwrap_err();
        assert!(matches!(
            err,
            LedgerError::SchemeEscape { k: 1, index: 5, .. }
        ));
    }

    #[test]
    fn one_step_identity_and_constant_scheme() {
        let fam = cyclic_family();
        let phi = indicator_first();
        let oracle = PoissonOracle::for_family(&fam, &phi).unwrap();
        let traj = run_adaptive_chain(&fam, &mut Constant(0), 0, 0, 500, 3, 0).unwrap();
        let l = decompose(&traj, &fam, &oracle).unwrap();
        let first = phi.values[traj.x[1]] - 0.5;
        assert_abs_diff_eq!(l.m[0] + l.a[0] + l.r[0], first, epsilon = 1e-15);
        assert!(l.a.iter().all(|a| *a == 0.0));
        assert!(l.d.iter().all(|d| *d == 0.0));
        assert!(l.identity_error() < 1e-9);
        assert!(l.telescoping_error(&traj, &oracle).unwrap() < 1e-10);
    }

    #[test]
    fn missing_solution() {
        let fam = cyclic_family();
        let phi = indicator_first();
        let oracle = PoissonOracle::for_indices(&fam, &phi, &[0]).unwrap();
        let traj = run_adaptive_chain(&fam, &mut Sequence(vec![0, 1]), 1, 0, 3, 0, 0).unwrap();
        assert_eq!(
            decompose(&traj, &fam, &oracle).unwrap_err(),
            LedgerError::MissingSolution(1)
        );
    }

    #[test]
    fn sample_row_inverse_cdf() {
        let row = [0.25, 0.0, 0.75];
        assert_eq!(sample_row(&row, 0.0), 0);
        assert_eq!(sample_row(&row, 0.25), 2);
        assert_eq!(sample_row(&row, 0.999_999_999), 2);
    }

    #[test]
    fn dobrushin_violation_for_cyclic_pair() {
        let fam = cyclic_family();
        let err = an_bound_check(
            &fam,
            &[0, 1],
            &indicator_first(),
            0,
            10,
            SeedPlan { root: 0, chains: 4 },
        )
        .unwrap_err();
        assert!(matches!(err, LedgerError::DobrushinViolation { .. }));
    }

    #[test]
    fn scheme_spec_round_trip() {
        let spec = SchemeSpec::Rare {
            schedule: RareKind::LogIncrements {
                c: 2.0,
                epsilon: 0.1,
            },
            inner: Box::new(SchemeSpec::Am {
                sigma0: 1.0,
                lambda: 1.0,
                a: 0.25,
                b: 4.0,
                mode: ConstraintMode::Project,
                coords: None,
            }),
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SchemeSpec>(&text).unwrap(), spec);
    }
}
