//! Independent reference solvers used by several test targets.

use nalgebra::{DMatrix, DVector};

/// Elastic net by accelerated projected gradient on the split `β = u − v`,
/// `u, v ≥ 0`, which makes the penalty smooth. Unpenalized columns and the
/// intercept stay free. Returns `(intercept, β)`.
pub fn enet_projected_gradient(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    l1: f64,
    l2: f64,
    pf: &[f64],
    iterations: usize,
) -> (f64, DVector<f64>) {
    let (n, p) = z.shape();
    // Variables: [b0, u_1..u_p, v_1..v_p]; for pf = 0 the v block is pinned at 0
    // and u is unconstrained.
    let dim = 1 + 2 * p;
    let free = |k: usize| k == 0 || (k <= p && pf[k - 1] == 0.0);
    let pinned = |k: usize| k > p && pf[k - 1 - p] == 0.0;
    let beta_of = |x: &DVector<f64>| DVector::from_fn(p, |j, _| x[1 + j] - x[1 + p + j]);

    let mut aug = DMatrix::from_element(n, p + 1, 1.0);
    aug.columns_mut(1, p).copy_from(z);
    let gram = aug.transpose() * &aug;
    let lam_max = gram.symmetric_eigenvalues().max();
    let pf_max = pf.iter().cloned().fold(0.0, f64::max);
    // Hessian in (b0, u, v) is bounded by 2·(2·λmax + 2·λ2·pf_max).
    let step = 1.0 / (4.0 * lam_max + 4.0 * l2 * pf_max);

    let grad = |x: &DVector<f64>| {
        let beta = beta_of(x);
        let r = y - z * &beta - DVector::from_element(n, x[0]);
        let gb = -2.0 * z.transpose() * &r;
        let mut g = DVector::zeros(dim);
        g[0] = -2.0 * r.sum();
        for j in 0..p {
            let ridge = 2.0 * l2 * pf[j] * beta[j];
            g[1 + j] = gb[j] + l1 * pf[j] + ridge;
            g[1 + p + j] = -gb[j] + l1 * pf[j] - ridge;
        }
        g
    };
    let project = |x: &mut DVector<f64>| {
        for k in 0..dim {
            if pinned(k) {
                x[k] = 0.0;
            } else if !free(k) {
                x[k] = x[k].max(0.0);
            }
        }
    };

    let mut x = DVector::zeros(dim);
    let mut w = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let mut next = &w - step * grad(&w);
        project(&mut next);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        w = &next + ((t - 1.0) / t_next) * (&next - &x);
        x = next;
        t = t_next;
    }
    (x[0], beta_of(&x))
}

/// `Σ(y − b0 − Zβ)² + λ1·Σ pf|β| + λ2·Σ pf β²`.
pub fn enet_objective(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    b0: f64,
    beta: &DVector<f64>,
    l1: f64,
    l2: f64,
    pf: &[f64],
) -> f64 {
    let r = y - z * beta - DVector::from_element(y.len(), b0);
    r.norm_squared() + beta.iter().zip(pf).map(|(b, w)| l1 * w * b.abs() + l2 * w * b * b).sum::<f64>()
}
