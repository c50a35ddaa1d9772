//! Cross-checks against independently computed references.

use amcmc::families::{
    cyclic_family, cyclic_pi, random_distribution, random_ergodic, random_reversible,
};
use amcmc::kernel::fit_ergodicity_constants;
use amcmc::kernel::{stationary_distribution, Distribution, StochasticMatrix};
use amcmc::poisson::{
    clt_variance, neumann_truncation, solve_poisson_exact, solve_poisson_neumann, TestFunction,
};
use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stationary law by repeated left multiplication of the lazy chain.
#[allow(clippy::needless_range_loop)]
fn power_iteration(p: &StochasticMatrix) -> Vec<f64> {
    let n = p.n();
    let mut mu = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let lazy = 0.5 * p.get(i, j) + if i == j { 0.5 } else { 0.0 };
                next[j] += mu[i] * lazy;
            }
        }
        let diff: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        mu = next;
        if diff < 1e-15 {
            break;
        }
    }
    mu
}

/// Asymptotic variance of a reversible chain from its spectral decomposition.
fn spectral_variance(p: &StochasticMatrix, pi: &Distribution, phi: &[f64]) -> f64 {
    let n = p.n();
    let w = pi.weights();
    let mean: f64 = w.iter().zip(phi).map(|(a, b)| a * b).sum();
    let sym = DMatrix::from_fn(n, n, |i, j| w[i].sqrt() * p.get(i, j) / w[j].sqrt());
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let f = DVector::from_fn(n, |i, _| (phi[i] - mean) * w[i].sqrt());
    let mut total = 0.0;
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        let c = eig.eigenvectors.column(k).dot(&f);
        if (1.0 - lambda).abs() > 1e-9 {
            total += c * c * (1.0 + lambda) / (1.0 - lambda);
        }
    }
    total
}

#[test]
fn stationary_matches_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2, 5, 12, 30] {
        let p = random_ergodic(&mut rng, n, 0.3);
        let exact = stationary_distribution(&p).unwrap();
        for (a, b) in exact.weights().iter().zip(power_iteration(&p)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-11);
        }
    }
}

#[test]
fn cyclic_kernels_share_the_stated_law() {
    let fam = cyclic_family();
    for p in fam.kernels() {
        let pi = stationary_distribution(p).unwrap();
        for (a, b) in pi.weights().iter().zip([0.5, 0.25, 0.25]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
        assert!(p.invariance_residual(&cyclic_pi()).unwrap() <= 1e-15);
    }
}

#[test]
fn neumann_series_agrees_with_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [3, 8, 25] {
        let p = random_ergodic(&mut rng, n, 0.4);
        let pi = stationary_distribution(&p).unwrap();
        let consts = fit_ergodicity_constants(std::slice::from_ref(&p), &pi, 40).unwrap();
        let phi = TestFunction::new((0..n).map(|_| rng.random::<f64>()).collect(), &pi).unwrap();
        let exact = solve_poisson_exact(&p, &pi, &phi).unwrap();
        let tol = 1e-9;
        let series = solve_poisson_neumann(&p, &pi, &phi, &consts, tol).unwrap();
        assert_eq!(
            series.terms,
            neumann_truncation(&consts, phi.osc, tol).unwrap()
        );
        let gap = exact
            .g
            .iter()
            .zip(&series.g)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 2.0 * tol, "gap {gap}");
    }
}

#[test]
fn reversible_variance_matches_spectral_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 4, 9, 16] {
        let pi = random_distribution(&mut rng, n);
        let p = random_reversible(&mut rng, &pi, 0.5);
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
        let phi = TestFunction::new(values.clone(), &pi).unwrap();
        let v = clt_variance(&p, &pi, &phi).unwrap();
        assert_abs_diff_eq!(v, spectral_variance(&p, &pi, &values), epsilon = 1e-8);
    }
}

#[test]
fn independent_kernel_variance_is_binomial() {
    let pi = cyclic_pi();
    let p = StochasticMatrix::independent(&pi);
    let phi = TestFunction::indicator(0, &pi).unwrap();
    assert_abs_diff_eq!(clt_variance(&p, &pi, &phi).unwrap(), 0.25, epsilon = 1e-14);
    // The Poisson solution of an independent kernel is the centered function.
    let g = solve_poisson_exact(&p, &pi, &phi).unwrap().g;
    for (a, b) in g.iter().zip([0.5, -0.5, -0.5]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
    }
}

#[test]
fn variance_matches_batch_means() {
    // Two-state chain with flip probabilities a, b: sigma^2 for the
    // indicator of state 0 is a b (2 - a - b) / (a + b)^3.
    let (a, b) = (0.3, 0.1);
    let p = StochasticMatrix::new(vec![vec![1.0 - a, a], vec![b, 1.0 - b]]).unwrap();
    let pi = stationary_distribution(&p).unwrap();
    let phi = TestFunction::indicator(0, &pi).unwrap();
    let closed = a * b * (2.0 - a - b) / (a + b).powi(3);
    assert_abs_diff_eq!(
        clt_variance(&p, &pi, &phi).unwrap(),
        closed,
        epsilon = 1e-12
    );

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (batches, len) = (400, 5000);
    let mut x = 0usize;
    let mut means = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut hits = 0.0;
        for _ in 0..len {
            let u: f64 = rng.random();
            x = if u < p.get(x, 0) { 0 } else { 1 };
            hits += f64::from(x == 0);
        }
        means.push(hits / len as f64);
    }
    let m = means.iter().sum::<f64>() / batches as f64;
    let bm = len as f64 * means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    assert!(
        (bm / closed - 1.0).abs() < 0.2,
        "batch means {bm} vs {closed}"
    );
}
