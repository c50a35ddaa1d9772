//! Kernel families sharing a common invariant distribution, plus the
//! builtin and randomly generated families used by studies and tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{
    fit_ergodicity_constants, stationary_distribution, Distribution, ErgodicityConstants,
    KernelError, StochasticMatrix, EXACT_TOL,
};

/// Finite indexed family `{P_s}` whose members are all `pi`-invariant.
///
/// `grid` optionally attaches a scalar parameter value to every member, so
/// that continuously adapted parameters can be quantized onto the family.
#[derive(Debug, Clone)]
pub struct KernelFamily {
    kernels: Vec<StochasticMatrix>,
    pi: Distribution,
    grid: Option<Vec<f64>>,
}

impl KernelFamily {
    pub fn new(kernels: Vec<StochasticMatrix>, pi: Distribution) -> Result<Self, KernelError> {
        if kernels.is_empty() {
            return Err(KernelError::Empty);
        }
        for (index, p) in kernels.iter().enumerate() {
            if p.n() != pi.len() {
                return Err(KernelError::DimensionMismatch {
                    expected: pi.len(),
                    got: p.n(),
                });
            }
            let residual = p.invariance_residual(&pi)?;
            if residual > EXACT_TOL {
                return Err(KernelError::NotStationary { index, residual });
            }
        }
        Ok(Self {
            kernels,
            pi,
            grid: None,
        })
    }

    /// Attaches parameter values; must be strictly increasing, one per member.
    pub fn with_grid(mut self, grid: Vec<f64>) -> Result<Self, KernelError> {
        if grid.len() != self.kernels.len() {
            return Err(KernelError::DimensionMismatch {
                expected: self.kernels.len(),
                got: grid.len(),
            });
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(KernelError::InvalidDistribution(
                "parameter grid must be strictly increasing".into(),
            ));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn states(&self) -> usize {
        self.pi.len()
    }

    pub fn kernel(&self, s: usize) -> &StochasticMatrix {
        &self.kernels[s]
    }

    pub fn kernels(&self) -> &[StochasticMatrix] {
        &self.kernels
    }

    pub fn pi(&self) -> &Distribution {
        &self.pi
    }

    pub fn grid(&self) -> Option<&[f64]> {
        self.grid.as_deref()
    }

    /// Index of the grid value nearest to `theta` (ties go to the lower
    /// index). Families without a grid use the member index as parameter.
    pub fn nearest(&self, theta: f64) -> usize {
        match &self.grid {
            Some(g) => {
                let mut best = 0;
                for (i, v) in g.iter().enumerate() {
                    if (v - theta).abs() < (g[best] - theta).abs() {
                        best = i;
                    }
                }
                best
            }
            None => (theta.round().max(0.0) as usize).min(self.len() - 1),
        }
    }

    pub fn fit_constants(&self, horizon: usize) -> Result<ErgodicityConstants, KernelError> {
        fit_ergodicity_constants(&self.kernels, &self.pi, horizon)
    }
}

/// Generator `theta -> P_theta` sharing one invariant distribution.
pub trait ParametricFamily {
    fn kernel_at(&self, theta: f64) -> Result<StochasticMatrix, KernelError>;

    fn invariant(&self) -> &Distribution;

    /// Restricts the generator to a finite parameter grid.
    fn discretize(&self, grid: &[f64]) -> Result<KernelFamily, KernelError> {
        let kernels = grid
            .iter()
            .map(|&t| self.kernel_at(t))
            .collect::<Result<Vec<_>, _>>()?;
        KernelFamily::new(kernels, self.invariant().clone())?.with_grid(grid.to_vec())
    }
}

/// `t -> (1 - t) P + t Q` for two kernels sharing `pi`.
#[derive(Debug, Clone)]
pub struct ConvexMixture {
    pub p: StochasticMatrix,
    pub q: StochasticMatrix,
    pub pi: Distribution,
}

impl ParametricFamily for ConvexMixture {
    fn kernel_at(&self, t: f64) -> Result<StochasticMatrix, KernelError> {
        self.p.mix(&self.q, t)
    }

    fn invariant(&self) -> &Distribution {
        &self.pi
    }
}

/// Invariant distribution `(1/2, 1/4, 1/4)` of the cyclic pair.
pub fn cyclic_pi() -> Distribution {
    Distribution::new(vec![0.5, 0.25, 0.25]).expect("valid")
}

/// The three-state pair `(P_a, P_b)`; states 1, 2, 3 are indices 0, 1, 2.
///
/// Both keep state 1 with probability 0.5. `P_a` cycles 1 -> 2 -> 3 -> 1,
/// `P_b` cycles 1 -> 3 -> 2 -> 1.
pub fn cyclic_pair() -> (StochasticMatrix, StochasticMatrix) {
    let pa = StochasticMatrix::new(vec![
        vec![0.5, 0.5, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0],
    ])
    .expect("valid kernel");
    let pb = StochasticMatrix::new(vec![
        vec![0.5, 0.0, 0.5],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
    ])
    .expect("valid kernel");
    (pa, pb)
}

pub fn cyclic_family() -> KernelFamily {
    let (pa, pb) = cyclic_pair();
    KernelFamily::new(vec![pa, pb], cyclic_pi()).expect("both kernels are pi-invariant")
}

/// `(1 - eps) P + eps Pi` where `Pi` has every row equal to `pi`.
pub fn smooth_toward_pi(
    p: &StochasticMatrix,
    pi: &Distribution,
    eps: f64,
) -> Result<StochasticMatrix, KernelError> {
    p.mix(&StochasticMatrix::independent(pi), eps)
}

/// Random `pi`-reversible Metropolis kernel built from a random symmetric
/// proposal. `density` in `(0, 1]` is the probability that an off-ring
/// proposal edge exists; a ring is always present, so the kernel is
/// irreducible, and the diagonal rejection mass keeps it aperiodic.
pub fn random_reversible<R: Rng + ?Sized>(
    rng: &mut R,
    pi: &Distribution,
    density: f64,
) -> StochasticMatrix {
    let n = pi.len();
    if n == 1 {
        return StochasticMatrix::identity(1).expect("n = 1");
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let ring = j == i + 1 || (i == 0 && j == n - 1);
            if ring || rng.random::<f64>() < density {
                let v = 0.05 + rng.random::<f64>();
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
    }
    let max_row = (0..n)
        .map(|i| w[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(0.0, f64::max);
    let scale = 0.95 / max_row;
    let pw = pi.weights();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if i != j {
                let v = w[i * n + j] * scale * (pw[j] / pw[i]).min(1.0);
                data[i * n + j] = v;
                off += v;
            }
        }
        data[i * n + i] = 1.0 - off;
    }
    StochasticMatrix::from_raw(n, data)
}

/// Random probability vector with entries bounded away from zero.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Distribution {
    let w: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    Distribution::from_unnormalized(w).expect("positive weights")
}

/// Random irreducible aperiodic kernel, generally non-reversible. Each row
/// has a self-loop, an edge to the next state on a ring, and further edges
/// with probability `density`.
pub fn random_ergodic<R: Rng + ?Sized>(rng: &mut R, n: usize, density: f64) -> StochasticMatrix {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut data[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            if j == i || j == (i + 1) % n || rng.random::<f64>() < density {
                *v = 0.05 + rng.random::<f64>();
            }
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    StochasticMatrix::from_raw(n, data)
}

/// Random ergodic kernel together with its stationary distribution.
pub fn random_ergodic_with_pi<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    density: f64,
) -> (StochasticMatrix, Distribution) {
    let p = random_ergodic(rng, n, density);
    let pi = stationary_distribution(&p).expect("ring plus self-loops is irreducible");
    (p, pi)
}

/// Builtin family names understood by configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BuiltinFamily {
    /// The cyclic counterexample pair.
    Cyclic,
    /// The cyclic pair mixed toward `pi` with weight `eps`.
    SmoothedCyclic { eps: f64 },
    /// One kernel with every row `(1/2, 1/4, 1/4)`.
    Iid,
    /// `members` convex mixtures between two seeded random reversible
    /// kernels on `states` states.
    ConvexMixture {
        states: usize,
        members: usize,
        seed: u64,
    },
}

impl BuiltinFamily {
    pub fn build(&self) -> Result<KernelFamily, KernelError> {
        match self {
            BuiltinFamily::Cyclic => Ok(cyclic_family()),
            BuiltinFamily::SmoothedCyclic { eps } => {
                let (pa, pb) = cyclic_pair();
                let pi = cyclic_pi();
                KernelFamily::new(
                    vec![
                        smooth_toward_pi(&pa, &pi, *eps)?,
                        smooth_toward_pi(&pb, &pi, *eps)?,
                    ],
                    pi,
                )
            }
            BuiltinFamily::Iid => {
                let pi = cyclic_pi();
                KernelFamily::new(vec![StochasticMatrix::independent(&pi)], pi)
            }
            BuiltinFamily::ConvexMixture {
                states,
                members,
                seed,
            } => {
                use rand::SeedableRng;
                if *members < 2 || *states < 2 {
                    return Err(KernelError::Empty);
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let pi = random_distribution(&mut rng, *states);
                let mix = ConvexMixture {
                    p: random_reversible(&mut rng, &pi, 0.5),
                    q: random_reversible(&mut rng, &pi, 0.5),
                    pi,
                };
                let grid: Vec<f64> = (0..*members)
                    .map(|i| i as f64 / (*members - 1) as f64)
                    .collect();
                mix.discretize(&grid)
            }
        }
    }
}
