//! Solutions of the Poisson equation `g - P g = phi - pi(phi)` on finite
//! state spaces, their norm and Lipschitz bounds, and the asymptotic
//! variance of ergodic averages.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    inf_norm, inf_norm_diff, kernel_apply, Distribution, ErgodicityConstants, KernelError,
    StochasticMatrix, BOUND_TOL, EXACT_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoissonError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("Poisson system is singular after centering (kernel is not ergodic)")]
    SingularBeyondCentering,
    #[error("series does not contract: rho = {0}")]
    NoContraction(f64),
    #[error("asymptotic variance {0:e} is negative beyond tolerance")]
    NegativeBeyondTolerance(f64),
    #[error("truncation tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

/// Observable `phi` together with its mean under `pi` and its oscillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub values: Vec<f64>,
    pub mean_under_pi: f64,
    pub osc: f64,
}

impl TestFunction {
    pub fn new(values: Vec<f64>, pi: &Distribution) -> Result<Self, KernelError> {
        if values.len() != pi.len() {
            return Err(KernelError::DimensionMismatch {
                expected: pi.len(),
                got: values.len(),
            });
        }
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            mean_under_pi: pi.expect(&values),
            osc: max - min,
            values,
        })
    }

    /// `1(x = state)`.
    pub fn indicator(state: usize, pi: &Distribution) -> Result<Self, KernelError> {
        if state >= pi.len() {
            return Err(KernelError::DimensionMismatch {
                expected: pi.len(),
                got: state + 1,
            });
        }
        let mut v = vec![0.0; pi.len()];
        v[state] = 1.0;
        Self::new(v, pi)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `phi - pi(phi)`.
    pub fn centered(&self) -> Vec<f64> {
        self.values.iter().map(|v| v - self.mean_under_pi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSolution {
    pub g: Vec<f64>,
    /// `sup_x |g - P g - phi_bar|`.
    pub residual_inf_norm: f64,
    /// `pi(g)`.
    pub pi_mean: f64,
    /// Number of series terms beyond the first; 0 for the direct solve.
    pub terms: usize,
}

impl PoissonSolution {
    pub fn sup_norm(&self) -> f64 {
        inf_norm(&self.g)
    }

    fn finish(
        g: Vec<f64>,
        p: &StochasticMatrix,
        pi: &Distribution,
        centered: &[f64],
        terms: usize,
    ) -> Result<Self, KernelError> {
        let pg = kernel_apply(p, &g)?;
        let residual_inf_norm = g
            .iter()
            .zip(&pg)
            .zip(centered)
            .map(|((a, b), c)| (a - b - c).abs())
            .fold(0.0, f64::max);
        Ok(Self {
            pi_mean: pi.expect(&g),
            residual_inf_norm,
            terms,
            g,
        })
    }
}

fn check_inputs(
    p: &StochasticMatrix,
    pi: &Distribution,
    phi: &TestFunction,
) -> Result<(), KernelError> {
    if pi.len() != p.n() || phi.len() != p.n() {
        return Err(KernelError::DimensionMismatch {
            expected: p.n(),
            got: if pi.len() != p.n() {
                pi.len()
            } else {
                phi.len()
            },
        });
    }
    let residual = p.invariance_residual(pi)?;
    if residual > EXACT_TOL {
        return Err(KernelError::NotStationary { index: 0, residual });
    }
    Ok(())
}

/// Solves `(I - P + 1 pi^T) g = phi_bar`. Since `pi` is a left fixed point of
/// the system matrix and `pi(phi_bar) = 0`, the solution satisfies both
/// `g - P g = phi_bar` and `pi(g) = 0`.
pub fn solve_poisson_exact(
    p: &StochasticMatrix,
    pi: &Distribution,
    phi: &TestFunction,
) -> Result<PoissonSolution, PoissonError> {
    check_inputs(p, pi, phi)?;
    let n = p.n();
    let centered = phi.centered();
    let w = pi.weights();
    let mut a = DMatrix::<f64>::identity(n, n) - p.to_dmatrix();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] += w[j];
        }
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let diag_max = u.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let diag_min = u
        .diagonal()
        .iter()
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min);
    if !(diag_min > 1e-13 * diag_max.max(1.0)) {
        return Err(PoissonError::SingularBeyondCentering);
    }
    let rhs = DVector::from_column_slice(&centered);
    let mut g = lu
        .solve(&rhs)
        .ok_or(PoissonError::SingularBeyondCentering)?;
    let r = &rhs - &a * &g;
    if let Some(corr) = lu.solve(&r) {
        g += corr;
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(PoissonError::SingularBeyondCentering);
    }
    Ok(PoissonSolution::finish(
        g.iter().copied().collect(),
        p,
        pi,
        &centered,
        0,
    )?)
}

/// Smallest `K` with `C rho^(K+1) osc / (1 - rho) <= tol`, i.e. the number
/// of series terms after which the certified tail is below `tol`.
pub fn neumann_truncation(
    consts: &ErgodicityConstants,
    osc: f64,
    tol: f64,
) -> Result<usize, PoissonError> {
    if !(tol > 0.0) {
        return Err(PoissonError::InvalidTolerance(tol));
    }
    if !(consts.rho < 1.0) {
        return Err(PoissonError::NoContraction(consts.rho));
    }
    if osc == 0.0 || consts.rho == 0.0 {
        return Ok(0);
    }
    let tail = |k: usize| consts.c * consts.rho.powi(k as i32 + 1) * osc / (1.0 - consts.rho);
    let guess = ((tol * (1.0 - consts.rho) / (consts.c * osc)).ln() / consts.rho.ln() - 1.0)
        .ceil()
        .max(0.0) as usize;
    let mut k = guess.saturating_sub(2);
    while tail(k) > tol {
        k += 1;
    }
    Ok(k)
}

/// Partial sum `sum_{k <= K} P^k phi_bar` with `K` from
/// [`neumann_truncation`], so the truncation error is at most `tol`.
pub fn solve_poisson_neumann(
    p: &StochasticMatrix,
    pi: &Distribution,
    phi: &TestFunction,
    consts: &ErgodicityConstants,
    tol: f64,
) -> Result<PoissonSolution, PoissonError> {
    let terms = neumann_truncation(consts, phi.osc, tol)?;
    check_inputs(p, pi, phi)?;
    let centered = phi.centered();
    let mut term = centered.clone();
    let mut g = centered.clone();
    for _ in 0..terms {
        term = kernel_apply(p, &term)?;
        g.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
    }
    Ok(PoissonSolution::finish(g, p, pi, &centered, terms)?)
}

/// Outcome of a numeric bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub quantity: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
    /// `bound - value`.
    pub margin: f64,
}

impl BoundReport {
    pub fn new(quantity: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            quantity: quantity.into(),
            value,
            bound,
            pass: value <= bound + BOUND_TOL,
            margin: bound - value,
        }
    }
}

/// `||g||_inf <= C osc(phi) / (1 - rho)`.
pub fn check_poisson_bound(
    sol: &PoissonSolution,
    consts: &ErgodicityConstants,
    phi: &TestFunction,
) -> BoundReport {
    BoundReport::new(
        "poisson_sup_norm",
        sol.sup_norm(),
        consts.c * phi.osc / (1.0 - consts.rho),
    )
}

/// Constant of the Lipschitz bound, `4 C^2 osc(phi) / (1 - rho)^2`.
pub fn lipschitz_constant(consts: &ErgodicityConstants, phi: &TestFunction) -> f64 {
    4.0 * consts.c * consts.c * phi.osc / (1.0 - consts.rho).powi(2)
}

/// `||g_s - g_s'||_inf <= 4 C^2 (1 - rho)^-2 osc(phi) D` with
/// `D = sup_x d_tv(P_s(x, .), P_s'(x, .))`.
pub fn check_lipschitz_bound(
    sol_s: &PoissonSolution,
    sol_sp: &PoissonSolution,
    d: f64,
    consts: &ErgodicityConstants,
    phi: &TestFunction,
) -> BoundReport {
    BoundReport::new(
        "poisson_lipschitz",
        inf_norm_diff(&sol_s.g, &sol_sp.g),
        lipschitz_constant(consts, phi) * d,
    )
}

/// The same bound applied to `||P_s g_s - P_s' g_s'||_inf`.
pub fn check_smoothed_lipschitz_bound(
    p_s: &StochasticMatrix,
    sol_s: &PoissonSolution,
    p_sp: &StochasticMatrix,
    sol_sp: &PoissonSolution,
    d: f64,
    consts: &ErgodicityConstants,
    phi: &TestFunction,
) -> Result<BoundReport, KernelError> {
    let a = kernel_apply(p_s, &sol_s.g)?;
    let b = kernel_apply(p_sp, &sol_sp.g)?;
    Ok(BoundReport::new(
        "smoothed_poisson_lipschitz",
        inf_norm_diff(&a, &b),
        lipschitz_constant(consts, phi) * d,
    ))
}

/// `pi(g^2 - (P g)^2)` for an already solved `g`.
pub fn variance_from_solution(
    p: &StochasticMatrix,
    pi: &Distribution,
    sol: &PoissonSolution,
) -> Result<f64, PoissonError> {
    let pg = kernel_apply(p, &sol.g)?;
    let v: f64 = pi
        .weights()
        .iter()
        .zip(sol.g.iter().zip(&pg))
        .map(|(w, (g, h))| w * (g * g - h * h))
        .sum();
    if v < -1e-8 {
        return Err(PoissonError::NegativeBeyondTolerance(v));
    }
    Ok(v.max(0.0))
}

/// Asymptotic variance `sigma^2 = pi(g^2 - (P g)^2)` of the ergodic average
/// of `phi` under `P`.
pub fn clt_variance(
    p: &StochasticMatrix,
    pi: &Distribution,
    phi: &TestFunction,
) -> Result<f64, PoissonError> {
    let sol = solve_poisson_exact(p, pi, phi)?;
    variance_from_solution(p, pi, &sol)
}

/// Writes `g` as CSV with header `state,g`.
pub fn write_solution_csv<W: Write>(mut w: W, sol: &PoissonSolution) -> io::Result<()> {
    writeln!(w, "state,g")?;
    for (i, g) in sol.g.iter().enumerate() {
        writeln!(w, "{i},{g:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{cyclic_pair, cyclic_pi};
    use crate::kernel::fit_ergodicity_constants;
    use approx::assert_abs_diff_eq;

    fn iid() -> (StochasticMatrix, Distribution) {
        let pi = cyclic_pi();
        (StochasticMatrix::independent(&pi), pi)
    }

    #[test]
    fn constant_phi_gives_zero() {
        let (pa, _) = cyclic_pair();
        let pi = cyclic_pi();
        let phi = TestFunction::new(vec![2.5; 3], &pi).unwrap();
        let sol = solve_poisson_exact(&pa, &pi, &phi).unwrap();
        assert!(sol.sup_norm() <= 1e-15);
        assert_eq!(clt_variance(&pa, &pi, &phi).unwrap(), 0.0);
        let consts = ErgodicityConstants::from_dobrushin(0.5);
        let ser = solve_poisson_neumann(&pa, &pi, &phi, &consts, 1e-9).unwrap();
        assert_eq!(ser.terms, 0);
        assert!(ser.sup_norm() == 0.0);
        let report = check_poisson_bound(&sol, &consts, &phi);
        assert!(report.pass);
        assert_eq!(report.margin, report.bound - report.value);
    }

    #[test]
    fn iid_kernel_solution_is_centered_phi() {
        let (p, pi) = iid();
        let phi = TestFunction::indicator(0, &pi).unwrap();
        let sol = solve_poisson_exact(&p, &pi, &phi).unwrap();
        for (g, c) in sol.g.iter().zip(phi.centered()) {
            assert_abs_diff_eq!(*g, c, epsilon = 1e-15);
        }
        // Var_pi(1(x = 1)) with pi(1) = 1/2
        assert_abs_diff_eq!(clt_variance(&p, &pi, &phi).unwrap(), 0.25, epsilon = 1e-14);

        let consts = fit_ergodicity_constants(std::slice::from_ref(&p), &pi, 4).unwrap();
        let ser = solve_poisson_neumann(&p, &pi, &phi, &consts, 1e-9).unwrap();
        assert_eq!(ser.terms, 0);
        let report = check_poisson_bound(&sol, &ErgodicityConstants::from_dobrushin(0.0), &phi);
        assert!(report.pass);
    }

    #[test]
    fn cyclic_solutions_satisfy_equation() {
        let (pa, pb) = cyclic_pair();
        let pi = cyclic_pi();
        let phi = TestFunction::indicator(0, &pi).unwrap();
        for p in [&pa, &pb] {
            let sol = solve_poisson_exact(p, &pi, &phi).unwrap();
            assert!(sol.residual_inf_norm <= 1e-12);
            assert!(sol.pi_mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn neumann_requires_contraction() {
        let (pa, _) = cyclic_pair();
        let pi = cyclic_pi();
        let phi = TestFunction::indicator(0, &pi).unwrap();
        let consts = ErgodicityConstants::from_dobrushin(1.0);
        assert_eq!(
            solve_poisson_neumann(&pa, &pi, &phi, &consts, 1e-9),
            Err(PoissonError::NoContraction(1.0))
        );
        let ok = ErgodicityConstants::from_dobrushin(0.5);
        assert!(matches!(
            solve_poisson_neumann(&pa, &pi, &phi, &ok, 0.0),
            Err(PoissonError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn truncation_is_minimal() {
        let consts = ErgodicityConstants {
            c: 3.0,
            rho: 0.9,
            beta: 1.0,
            horizon: 10,
            witness_power: 2,
        };
        let k = neumann_truncation(&consts, 2.0, 1e-6).unwrap();
        let tail = |k: usize| 3.0 * 0.9f64.powi(k as i32 + 1) * 2.0 / 0.1;
        assert!(tail(k) <= 1e-6);
        assert!(tail(k - 1) > 1e-6);
    }

    #[test]
    fn reducible_kernel_is_singular() {
        let p = StochasticMatrix::identity(2).unwrap();
        let pi = Distribution::uniform(2).unwrap();
        let phi = TestFunction::indicator(0, &pi).unwrap();
        assert_eq!(
            solve_poisson_exact(&p, &pi, &phi),
            Err(PoissonError::SingularBeyondCentering)
        );
    }

    #[test]
    fn lipschitz_bound_same_kernel_is_zero() {
        let (pa, _) = cyclic_pair();
        let pi = cyclic_pi();
        let phi = TestFunction::indicator(0, &pi).unwrap();
        let sol = solve_poisson_exact(&pa, &pi, &phi).unwrap();
        let consts = fit_ergodicity_constants(std::slice::from_ref(&pa), &pi, 20).unwrap();
        let r = check_lipschitz_bound(&sol, &sol, 0.0, &consts, &phi);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.bound, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn report_serializes_with_expected_fields() {
        let r = BoundReport::new("q", 1.0, 2.0);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["quantity", "value", "bound", "pass", "margin"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn solution_csv() {
        let sol = PoissonSolution {
            g: vec![0.5, -0.5],
            residual_inf_norm: 0.0,
            pi_mean: 0.0,
            terms: 0,
        };
        let mut buf = Vec::new();
        write_solution_csv(&mut buf, &sol).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "state,g\n0,5e-1\n1,-5e-1\n"
        );
    }
}
