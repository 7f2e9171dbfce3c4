//! Bayesian kernel machine regression.
//!
//! `y = h(z) + Xβ + ε`, `ε ~ N(0, σ²I)`, `h ~ N(0, τK)` with the weighted
//! Gaussian kernel `K(z, z') = exp(−Σ r_k (z_k − z'_k)²)`. With `λ = τ/σ²`
//! the marginal is `y ~ N(Xβ, σ²V)`, `V = I + λK`, and `h` is integrated out
//! for every parameter update. A spike-and-slab prior on each `r_k`
//! (component-wise) or on one member per group (hierarchical) gives posterior
//! inclusion probabilities.

use faer::linalg::solvers::Llt;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, Par, Side};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SeededRng;
use crate::error::{Error, Result};
use crate::linmod::ols_fit;

/// Diagonal jitter tried, in order, when a Cholesky factorization fails.
pub const JITTER: [f64; 2] = [1e-8, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Mediator,
    Outcome,
    TotalEffect,
}

/// Slab density for an included input's `r_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slab {
    /// `r_k ~ Uniform(0, upper)`.
    Uniform,
    /// `1/r_k ~ Uniform(0, upper)`, i.e. density `1/(upper·r²)` on `r > 1/upper`.
    InverseUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub iterations: usize,
    pub varsel: bool,
    /// Group label per kernel input. When present, selection is hierarchical:
    /// at most one input per group enters the kernel at a time.
    pub groups: Option<Vec<usize>>,
    /// Prior inclusion probability of an input (or group).
    pub prior_inclusion: f64,
    pub slab: Slab,
    /// Upper bound of the slab: on `r_k` itself (uniform) or on `1/r_k` (inverse uniform).
    pub slab_upper: f64,
    /// Starting `r_k` for inputs in the kernel.
    pub r_start: f64,
    /// Standard deviation of the log-scale random walk on `r_k`.
    pub r_step: f64,
    pub lambda_start: f64,
    /// Standard deviation of the log-scale random walk on `λ`.
    pub lambda_step: f64,
    /// Gamma(shape, rate) prior on `λ`.
    pub lambda_shape: f64,
    pub lambda_rate: f64,
    /// Gamma(shape, rate) prior on `1/σ²`.
    pub sigma_shape: f64,
    pub sigma_rate: f64,
    /// Adds an intercept column to the fixed effects.
    pub intercept: bool,
    /// Draws `h` at the training points every iteration.
    pub est_h: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            iterations: 2000,
            varsel: true,
            groups: None,
            prior_inclusion: 0.5,
            slab: Slab::InverseUniform,
            slab_upper: 100.0,
            r_start: 1.0,
            r_step: 0.5,
            lambda_start: 10.0,
            lambda_step: 0.5,
            lambda_shape: 1.0,
            lambda_rate: 0.1,
            sigma_shape: 1e-3,
            sigma_rate: 1e-3,
            intercept: true,
            est_h: false,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self, q: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations < 100 {
            return bad(format!("iterations must be at least 100, got {}", self.iterations));
        }
        if !(self.prior_inclusion > 0.0 && self.prior_inclusion < 1.0) {
            return bad(format!("prior inclusion {} outside (0, 1)", self.prior_inclusion));
        }
        for (name, v) in [
            ("slab_upper", self.slab_upper),
            ("r_start", self.r_start),
            ("r_step", self.r_step),
            ("lambda_start", self.lambda_start),
            ("lambda_step", self.lambda_step),
            ("lambda_shape", self.lambda_shape),
            ("lambda_rate", self.lambda_rate),
            ("sigma_shape", self.sigma_shape),
            ("sigma_rate", self.sigma_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.slab_log_density(self.r_start) == f64::NEG_INFINITY {
            return bad("r_start must lie inside the slab".into());
        }
        if let Some(g) = &self.groups {
            if g.len() != q {
                return bad(format!("{} group labels for {q} kernel inputs", g.len()));
            }
        }
        Ok(())
    }

    /// Groups as member lists, ordered by first appearance.
    fn group_members(&self, q: usize) -> Vec<Vec<usize>> {
        match (&self.groups, self.varsel) {
            (Some(labels), true) => {
                let mut seen: Vec<usize> = Vec::new();
                let mut out: Vec<Vec<usize>> = Vec::new();
                for (k, l) in labels.iter().enumerate() {
                    match seen.iter().position(|s| s == l) {
                        Some(i) => out[i].push(k),
                        None => {
                            seen.push(*l);
                            out.push(vec![k]);
                        }
                    }
                }
                out
            }
            _ => (0..q).map(|k| vec![k]).collect(),
        }
    }

    pub fn slab_log_density(&self, r: f64) -> f64 {
        match self.slab {
            Slab::Uniform if r > 0.0 && r < self.slab_upper => -self.slab_upper.ln(),
            Slab::InverseUniform if r > 1.0 / self.slab_upper => -self.slab_upper.ln() - 2.0 * r.ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn hierarchical(&self) -> bool {
        self.varsel && self.groups.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub accepted: usize,
    pub proposed: usize,
}

impl Rate {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as usize;
    }

    pub fn value(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub lambda: Rate,
    /// Random-walk moves on active `r_k`.
    pub r_walk: Rate,
    /// Moves that add or remove an input.
    pub toggle: Rate,
    /// Within-group moves of the active input.
    pub switch: Rate,
}

/// Draws, one entry per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub r: Vec<Vec<f64>>,
    pub delta: Vec<Vec<bool>>,
    /// Group indicators (hierarchical selection only).
    pub omega: Option<Vec<Vec<bool>>>,
    /// Fixed effects, intercept first when configured.
    pub beta: Vec<Vec<f64>>,
    pub sigsq: Vec<f64>,
    pub lambda: Vec<f64>,
    pub h: Option<Vec<Vec<f64>>>,
    pub acceptance: Acceptance,
}

impl McmcChain {
    pub fn len(&self) -> usize {
        self.sigsq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigsq.is_empty()
    }

    /// Kernel scale `τ = λσ²` at iteration `j`.
    pub fn tau(&self, j: usize) -> f64 {
        self.lambda[j] * self.sigsq[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BkmrFit {
    pub role: ModelRole,
    pub config: KernelConfig,
    pub rng: SeededRng,
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
    /// Kernel inputs, n×q.
    pub z: DMatrix<f64>,
    /// Fixed-effect covariates without the intercept column, n×c.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub chain: McmcChain,
}

impl BkmrFit {
    /// Fixed-effect design row for covariate values `x`.
    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(x.len() + 1);
        if self.config.intercept {
            row.push(1.0);
        }
        row.extend_from_slice(x);
        row
    }

    /// Column means of the covariates.
    pub fn covariate_means(&self) -> Vec<f64> {
        self.x.column_iter().map(|c| c.mean()).collect()
    }

    /// Linear fixed-effect part `x·β` at iteration `j`.
    pub fn fixed_effect(&self, j: usize, x: &[f64]) -> f64 {
        self.design_row(x).iter().zip(&self.chain.beta[j]).map(|(a, b)| a * b).sum()
    }

    fn design(&self) -> DMatrix<f64> {
        with_intercept(&self.x, self.config.intercept)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<BkmrFit> {
        Ok(serde_json::from_str(s)?)
    }
}

fn with_intercept(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return x.clone();
    }
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

/// `exp(−Σ r_k (a_k − b_k)²)`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], r: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != r.len() {
        return Err(Error::Dimension(format!(
            "kernel arguments have lengths {}, {} and {}",
            a.len(),
            b.len(),
            r.len()
        )));
    }
    Ok((-a.iter().zip(b).zip(r).map(|((x, y), w)| w * (x - y) * (x - y)).sum::<f64>()).exp())
}

/// Training kernel matrix, column-major, lower triangle only.
fn kernel_lower(z: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
    let n = z.nrows();
    let mut s = vec![0.0; n * n];
    for (a, &ra) in r.iter().enumerate() {
        if ra == 0.0 {
            continue;
        }
        let col = z.column(a);
        let col = col.as_slice();
        for j in 0..n {
            let zj = col[j];
            let dst = &mut s[j * n + j..(j + 1) * n];
            for (d, zi) in dst.iter_mut().zip(&col[j..]) {
                let t = zi - zj;
                *d += ra * t * t;
            }
        }
    }
    for j in 0..n {
        for v in &mut s[j * n + j..(j + 1) * n] {
            *v = (-*v).exp();
        }
    }
    s
}

/// Full kernel matrix between training inputs and new points, m×n.
pub fn cross_kernel(z: &DMatrix<f64>, points: &DMatrix<f64>, r: &[f64]) -> DMatrix<f64> {
    let (n, m) = (z.nrows(), points.nrows());
    let mut s = DMatrix::zeros(m, n);
    for (a, &ra) in r.iter().enumerate() {
        if ra == 0.0 {
            continue;
        }
        for i in 0..n {
            let zi = z[(i, a)];
            for p in 0..m {
                let t = points[(p, a)] - zi;
                s[(p, i)] += ra * t * t;
            }
        }
    }
    s.apply(|v: &mut f64| *v = (-*v).exp());
    s
}

/// Cholesky factor of `I·diag + scale·K` from a lower-triangular kernel.
struct Factor {
    llt: Llt<f64>,
    logdet: f64,
}

impl Factor {
    fn new(k: &[f64], n: usize, scale: f64, diag: f64) -> Result<Factor> {
        let mut last = String::new();
        for extra in std::iter::once(0.0).chain(JITTER) {
            let v = Mat::from_fn(n, n, |i, j| {
                if i < j {
                    0.0
                } else if i == j {
                    scale * k[j * n + i] + diag + extra
                } else {
                    scale * k[j * n + i]
                }
            });
            match v.llt(Side::Lower) {
                Ok(llt) => {
                    let l = llt.L();
                    let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
                    return Ok(Factor { llt, logdet });
                }
                Err(e) => last = format!("{e:?}"),
            }
        }
        Err(Error::Numerical(format!(
            "kernel matrix not positive definite after jitter {:e}: {last}",
            JITTER[JITTER.len() - 1]
        )))
    }

    /// `L⁻¹B`.
    fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut m = Mat::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)]);
        solve_lower_triangular_in_place(self.llt.L(), m.as_mut(), Par::Seq);
        DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| m[(i, j)])
    }

    /// `V⁻¹b`.
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut m = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        solve_lower_triangular_in_place(self.llt.L(), m.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.llt.L().transpose(), m.as_mut(), Par::Seq);
        DVector::from_fn(b.len(), |i, _| m[(i, 0)])
    }

    /// `L·v`.
    fn lower_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let l = self.llt.L();
        let n = v.len();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let vj = v[j];
            for i in j..n {
                out[i] += l[(i, j)] * vj;
            }
        }
        out
    }

    /// `eᵀV⁻¹e`.
    fn quad(&self, e: &DVector<f64>) -> f64 {
        let m = DMatrix::from_column_slice(e.len(), 1, e.as_slice());
        self.half_solve(&m).norm_squared()
    }
}

fn sym_lower_mul(k: &[f64], n: usize, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for j in 0..n {
        out[j] += k[j * n + j] * v[j];
        for i in j + 1..n {
            let kij = k[j * n + i];
            out[i] += kij * v[j];
            out[j] += kij * v[i];
        }
    }
    out
}

struct Current {
    r: Vec<f64>,
    active: Vec<Option<usize>>,
    lambda: f64,
    k: Vec<f64>,
    factor: Factor,
}

struct Sampler<'a> {
    y: &'a DVector<f64>,
    z: &'a DMatrix<f64>,
    design: DMatrix<f64>,
    cfg: &'a KernelConfig,
    groups: Vec<Vec<usize>>,
    n: usize,
}

impl Sampler<'_> {
    fn loglik(&self, factor: &Factor, e: &DVector<f64>, sigsq: f64) -> f64 {
        -0.5 * (factor.logdet + factor.quad(e) / sigsq)
    }

    fn slab_log_density(&self, r: f64) -> f64 {
        self.cfg.slab_log_density(r)
    }

    /// A draw from the slab, used as the proposal when an input is switched on.
    fn slab_draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let u = self.cfg.slab_upper * rng.random::<f64>();
            let r = match self.cfg.slab {
                Slab::Uniform => u,
                Slab::InverseUniform => 1.0 / u,
            };
            if self.slab_log_density(r).is_finite() {
                return r;
            }
        }
    }

    fn lambda_log_prior(&self, l: f64) -> f64 {
        (self.cfg.lambda_shape - 1.0) * l.ln() - self.cfg.lambda_rate * l
    }

    /// Metropolis–Hastings step on `r`; returns whether the proposal was taken.
    fn try_r(
        &self,
        cur: &mut Current,
        r_new: Vec<f64>,
        log_extra: f64,
        e: &DVector<f64>,
        sigsq: f64,
        ll: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<bool> {
        if log_extra == f64::NEG_INFINITY {
            return Ok(false);
        }
        let k = kernel_lower(self.z, &r_new);
        let factor = Factor::new(&k, self.n, cur.lambda, 1.0)?;
        let ll_new = self.loglik(&factor, e, sigsq);
        let log_acc = ll_new - *ll + log_extra;
        if rng.random::<f64>().ln() < log_acc {
            cur.r = r_new;
            cur.k = k;
            cur.factor = factor;
            *ll = ll_new;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<McmcChain> {
        let cfg = self.cfg;
        let (n, q, c) = (self.n, self.z.ncols(), self.design.ncols());
        let normal = StandardNormal;

        let (mut beta, mut sigsq) = if c > 0 {
            let names: Vec<String> = (0..c).map(|j| format!("x{j}")).collect();
            let fit = ols_fit(&self.design, self.y, &names)?;
            (fit.coefficients.clone(), fit.residual_variance.max(1e-8))
        } else {
            let m = self.y.mean();
            (DVector::zeros(0), self.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        };
        let mut r = vec![0.0; q];
        let mut active = vec![None; self.groups.len()];
        for (g, members) in self.groups.iter().enumerate() {
            if cfg.varsel {
                active[g] = Some(members[0]);
                r[members[0]] = cfg.r_start;
            } else {
                for &k in members {
                    r[k] = cfg.r_start;
                }
            }
        }
        let k = kernel_lower(self.z, &r);
        let factor = Factor::new(&k, n, cfg.lambda_start, 1.0)?;
        let mut cur = Current { r, active, lambda: cfg.lambda_start, k, factor };

        let iters = cfg.iterations;
        let mut chain = McmcChain {
            r: Vec::with_capacity(iters),
            delta: Vec::with_capacity(iters),
            omega: cfg.hierarchical().then(|| Vec::with_capacity(iters)),
            beta: Vec::with_capacity(iters),
            sigsq: Vec::with_capacity(iters),
            lambda: Vec::with_capacity(iters),
            h: cfg.est_h.then(|| Vec::with_capacity(iters)),
            acceptance: Acceptance::default(),
        };
        let log_odds = (cfg.prior_inclusion / (1.0 - cfg.prior_inclusion)).ln();

        for _ in 0..iters {
            // β | σ², λ, r: generalized least squares.
            if c > 0 {
                let w = cur.factor.half_solve(&self.design);
                let u = cur.factor.half_solve(&DMatrix::from_column_slice(n, 1, self.y.as_slice()));
                let a = w.tr_mul(&w);
                let chol = a
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("fixed-effect precision not positive definite".into()))?;
                let mean = chol.solve(&w.tr_mul(&u)).column(0).into_owned();
                let xi = DVector::from_fn(c, |_, _| normal.sample(rng));
                let dev = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&xi)
                    .ok_or_else(|| Error::Numerical("singular fixed-effect factor".into()))?;
                beta = mean + dev * sigsq.sqrt();
            }
            let e = self.y - &self.design * &beta;

            // σ⁻² | β, λ, r.
            let quad = cur.factor.quad(&e);
            let gamma = Gamma::new(cfg.sigma_shape + n as f64 / 2.0, 1.0 / (cfg.sigma_rate + quad / 2.0))
                .map_err(|err| Error::Numerical(format!("σ² conditional: {err}")))?;
            sigsq = 1.0 / gamma.sample(rng);
            let mut ll = -0.5 * (cur.factor.logdet + quad / sigsq);

            // λ: log-scale random walk.
            let l_new = cur.lambda
                * (cfg.lambda_step * {
                    let s: f64 = normal.sample(rng);
                    s
                })
                .exp();
            let f_new = Factor::new(&cur.k, n, l_new, 1.0)?;
            let ll_new = self.loglik(&f_new, &e, sigsq);
            let log_acc = ll_new - ll + self.lambda_log_prior(l_new) - self.lambda_log_prior(cur.lambda)
                + (l_new / cur.lambda).ln();
            let ok = rng.random::<f64>().ln() < log_acc;
            chain.acceptance.lambda.record(ok);
            if ok {
                cur.lambda = l_new;
                cur.factor = f_new;
                ll = ll_new;
            }

            // r and selection indicators.
            for (g, members) in self.groups.iter().enumerate() {
                if cfg.varsel {
                    let p_off: f64 = if members.len() > 1 { 0.5 } else { 1.0 };
                    match cur.active[g] {
                        None => {
                            let k = members[rng.random_range(0..members.len())];
                            // Proposing from the slab cancels it from the ratio; a proposal
                            // narrower than the slab strands inputs whose r drifts into its tail.
                            let r_k = self.slab_draw(rng);
                            let mut r_new = cur.r.clone();
                            r_new[k] = r_k;
                            let extra = log_odds + p_off.ln();
                            let ok = self.try_r(&mut cur, r_new, extra, &e, sigsq, &mut ll, rng)?;
                            chain.acceptance.toggle.record(ok);
                            if ok {
                                cur.active[g] = Some(k);
                            }
                        }
                        Some(k) => {
                            if rng.random::<f64>() < p_off {
                                let mut r_new = cur.r.clone();
                                r_new[k] = 0.0;
                                let extra = -log_odds - p_off.ln();
                                let ok = self.try_r(&mut cur, r_new, extra, &e, sigsq, &mut ll, rng)?;
                                chain.acceptance.toggle.record(ok);
                                if ok {
                                    cur.active[g] = None;
                                }
                            } else {
                                let others: Vec<usize> = members.iter().copied().filter(|&m| m != k).collect();
                                let k2 = others[rng.random_range(0..others.len())];
                                let mut r_new = cur.r.clone();
                                r_new[k2] = r_new[k];
                                r_new[k] = 0.0;
                                let ok = self.try_r(&mut cur, r_new, 0.0, &e, sigsq, &mut ll, rng)?;
                                chain.acceptance.switch.record(ok);
                                if ok {
                                    cur.active[g] = Some(k2);
                                }
                            }
                        }
                    }
                }
                let walkers: Vec<usize> =
                    if cfg.varsel { cur.active[g].into_iter().collect() } else { members.clone() };
                for k in walkers {
                    let old = cur.r[k];
                    let prop = old
                        * (cfg.r_step * {
                            let s: f64 = normal.sample(rng);
                            s
                        })
                        .exp();
                    let mut r_new = cur.r.clone();
                    r_new[k] = prop;
                    let extra = self.slab_log_density(prop) - self.slab_log_density(old) + (prop / old).ln();
                    let ok = self.try_r(&mut cur, r_new, extra, &e, sigsq, &mut ll, rng)?;
                    chain.acceptance.r_walk.record(ok);
                }
            }

            if let Some(hs) = chain.h.as_mut() {
                hs.push(self.draw_h(&cur, &e, sigsq, rng)?.as_slice().to_vec());
            }
            chain.delta.push(cur.r.iter().map(|&v| v > 0.0).collect());
            if let Some(om) = chain.omega.as_mut() {
                om.push(cur.active.iter().map(Option::is_some).collect());
            }
            chain.r.push(cur.r.clone());
            chain.beta.push(beta.as_slice().to_vec());
            chain.sigsq.push(sigsq);
            chain.lambda.push(cur.lambda);
        }

        if let Some(rate) = chain.acceptance.r_walk.value() {
            if !(0.01..=0.99).contains(&rate) {
                log::warn!("random-walk acceptance rate for r is {rate:.3}");
            }
        }
        Ok(chain)
    }

    /// One draw of `h` at the training points by conditioning a prior draw.
    fn draw_h(&self, cur: &Current, e: &DVector<f64>, sigsq: f64, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let n = self.n;
        let tau = cur.lambda * sigsq;
        let kf = Factor::new(&cur.k, n, 1.0, 0.0)?;
        let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let u = kf.lower_mul(&xi) * tau.sqrt();
        let noise = DVector::from_fn(n, |_, _| {
            let s: f64 = StandardNormal.sample(rng);
            s * sigsq.sqrt()
        });
        let w = cur.factor.solve(&(e - &u - noise));
        Ok(u + sym_lower_mul(&cur.k, n, &w) * cur.lambda)
    }
}

/// Fits the kernel machine regression by Metropolis-within-Gibbs sampling.
pub fn kmbayes(
    role: ModelRole,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    z_names: &[String],
    x: &DMatrix<f64>,
    x_names: &[String],
    config: &KernelConfig,
    rng: &SeededRng,
) -> Result<BkmrFit> {
    let n = y.len();
    let q = z.ncols();
    if z.nrows() != n || x.nrows() != n || z_names.len() != q || x_names.len() != x.ncols() {
        return Err(Error::Dimension(format!(
            "y has {n} rows, Z is {}×{q} with {} names, X is {}×{} with {} names",
            z.nrows(),
            z_names.len(),
            x.nrows(),
            x.ncols(),
            x_names.len()
        )));
    }
    if q == 0 {
        return Err(Error::Config("at least one kernel input is required".into()));
    }
    config.validate(q)?;
    let design = with_intercept(x, config.intercept);
    if n <= design.ncols() + 1 {
        return Err(Error::insufficient("rows for kernel machine regression", design.ncols() + 2, n));
    }
    if z.iter().chain(x.iter()).chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in kernel regression inputs".into()));
    }
    let sampler = Sampler { y, z, design, cfg: config, groups: config.group_members(q), n };
    let chain = sampler.run(&mut rng.rng())?;
    Ok(BkmrFit {
        role,
        config: config.clone(),
        rng: *rng,
        z_names: z_names.to_vec(),
        x_names: x_names.to_vec(),
        z: z.clone(),
        x: x.clone(),
        y: y.clone(),
        chain,
    })
}

/// Second half of a chain of length `len`.
pub fn default_selection(len: usize) -> Vec<usize> {
    (len / 2..len).collect()
}

fn check_selection(fit: &BkmrFit, sel: &[usize]) -> Result<()> {
    if sel.is_empty() {
        return Err(Error::Domain("no retained iterations".into()));
    }
    if let Some(&bad) = sel.iter().find(|&&j| j >= fit.chain.len()) {
        return Err(Error::Domain(format!("iteration {bad} outside a chain of length {}", fit.chain.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipTable {
    pub names: Vec<String>,
    /// Group label per input (hierarchical selection only).
    pub group: Option<Vec<usize>>,
    /// The input's group PIP.
    pub group_pip: Option<Vec<f64>>,
    /// PIP within the group given the group is included.
    pub conditional_pip: Option<Vec<f64>>,
    /// Overall inclusion probability (group PIP × conditional PIP in hierarchical mode).
    pub pip: Vec<f64>,
}

/// Posterior inclusion probabilities over the iterations in `sel`.
pub fn extract_pips(fit: &BkmrFit, sel: &[usize]) -> Result<PipTable> {
    check_selection(fit, sel)?;
    let q = fit.z.ncols();
    let m = sel.len() as f64;
    let delta_mean: Vec<f64> =
        (0..q).map(|k| sel.iter().filter(|&&j| fit.chain.delta[j][k]).count() as f64 / m).collect();
    let Some(omega) = &fit.chain.omega else {
        return Ok(PipTable {
            names: fit.z_names.clone(),
            group: None,
            group_pip: None,
            conditional_pip: None,
            pip: delta_mean,
        });
    };
    let members = fit.config.group_members(q);
    let mut group_of = vec![0; q];
    for (g, ms) in members.iter().enumerate() {
        for &k in ms {
            group_of[k] = g;
        }
    }
    let gpip: Vec<f64> = (0..members.len()).map(|g| sel.iter().filter(|&&j| omega[j][g]).count() as f64 / m).collect();
    let cond: Vec<f64> = (0..q)
        .map(|k| {
            let g = group_of[k];
            let on = sel.iter().filter(|&&j| omega[j][g]).count();
            if on == 0 {
                0.0
            } else {
                sel.iter().filter(|&&j| fit.chain.delta[j][k]).count() as f64 / on as f64
            }
        })
        .collect();
    let group_pip: Vec<f64> = (0..q).map(|k| gpip[group_of[k]]).collect();
    Ok(PipTable {
        names: fit.z_names.clone(),
        group: Some(group_of),
        pip: group_pip.iter().zip(&cond).map(|(a, b)| a * b).collect(),
        group_pip: Some(group_pip),
        conditional_pip: Some(cond),
    })
}

/// Gaussian-process conditional of `h` given one posterior draw.
pub struct HConditional<'a> {
    fit: &'a BkmrFit,
    factor: Factor,
    /// `V⁻¹(y − Xβ)`.
    weights: DVector<f64>,
    lambda: f64,
    sigsq: f64,
    r: Vec<f64>,
}

impl HConditional<'_> {
    pub fn new(fit: &BkmrFit, j: usize) -> Result<HConditional<'_>> {
        check_selection(fit, &[j])?;
        let ch = &fit.chain;
        let r = ch.r[j].clone();
        let n = fit.y.len();
        let k = kernel_lower(&fit.z, &r);
        let factor = Factor::new(&k, n, ch.lambda[j], 1.0)?;
        let beta = DVector::from_column_slice(&ch.beta[j]);
        let e = &fit.y - fit.design() * beta;
        let weights = factor.solve(&e);
        Ok(HConditional { fit, factor, weights, lambda: ch.lambda[j], sigsq: ch.sigsq[j], r })
    }

    fn check(&self, points: &DMatrix<f64>) -> Result<()> {
        if points.ncols() != self.fit.z.ncols() {
            return Err(Error::Dimension(format!(
                "prediction points have {} columns, the kernel has {} inputs",
                points.ncols(),
                self.fit.z.ncols()
            )));
        }
        Ok(())
    }

    /// Conditional means of `h` at each row of `points`.
    pub fn mean(&self, points: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check(points)?;
        let kx = cross_kernel(&self.fit.z, points, &self.r);
        Ok((kx * &self.weights * self.lambda).as_slice().to_vec())
    }

    /// Conditional means and variances of `h` at each row of `points`.
    pub fn mean_var(&self, points: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        self.check(points)?;
        let kx = cross_kernel(&self.fit.z, points, &self.r);
        let mean = &kx * &self.weights * self.lambda;
        let half = self.factor.half_solve(&kx.transpose());
        let tau = self.lambda * self.sigsq;
        Ok((0..points.nrows())
            .map(|p| {
                let s = half.column(p).norm_squared();
                (mean[p], (tau * (1.0 - self.lambda * s)).max(0.0))
            })
            .collect())
    }

    pub fn sigsq(&self) -> f64 {
        self.sigsq
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    crate::ersma::quantile_sorted(&s, 0.5)
}

/// Posterior mean and sd of `h` along a grid for one input, other inputs at
/// their medians, mixing the Gaussian-process conditionals over `sel`.
pub fn predictor_response_univar(fit: &BkmrFit, input: usize, grid: &[f64], sel: &[usize]) -> Result<Vec<(f64, f64)>> {
    let q = fit.z.ncols();
    if input >= q {
        return Err(Error::Domain(format!("input index {input} outside 0..{q}")));
    }
    check_selection(fit, sel)?;
    let medians: Vec<f64> = (0..q).map(|k| median(fit.z.column(k).as_slice())).collect();
    let points = DMatrix::from_fn(grid.len(), q, |i, k| if k == input { grid[i] } else { medians[k] });
    let mut sum = vec![0.0; grid.len()];
    let mut sum_sq = vec![0.0; grid.len()];
    let mut sum_var = vec![0.0; grid.len()];
    for &j in sel {
        let cond = HConditional::new(fit, j)?;
        for (g, (m, v)) in cond.mean_var(&points)?.into_iter().enumerate() {
            sum[g] += m;
            sum_sq[g] += m * m;
            sum_var[g] += v;
        }
    }
    let m = sel.len() as f64;
    Ok((0..grid.len())
        .map(|g| {
            let mean = sum[g] / m;
            let between = (sum_sq[g] / m - mean * mean).max(0.0);
            (mean, (sum_var[g] / m + between).sqrt())
        })
        .collect())
}

/// Complete-linkage agglomerative clustering on `1 − corr`, cut at `k`
/// clusters. Labels are numbered by first appearance.
pub fn cluster_groups(corr: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let p = corr.nrows();
    if corr.ncols() != p || p == 0 {
        return Err(Error::Domain("correlation matrix must be square and nonempty".into()));
    }
    for i in 0..p {
        if (corr[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!("diagonal entry {i} is {}", corr[(i, i)])));
        }
        for j in 0..i {
            let v = corr[(i, j)];
            if !v.is_finite() || (v - corr[(j, i)]).abs() > 1e-8 || v.abs() > 1.0 + 1e-8 {
                return Err(Error::Domain(format!("entry ({i}, {j}) is not a valid correlation")));
            }
        }
    }
    if k < 1 || k > p {
        return Err(Error::Domain(format!("group count {k} outside 1..={p}")));
    }
    let mut clusters: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| 1.0 - corr[(i, j)]))
                    .fold(f64::NEG_INFINITY, f64::max);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
    }
    let mut labels = vec![usize::MAX; p];
    let mut next = 0;
    for i in 0..p {
        if labels[i] == usize::MAX {
            let c = clusters.iter().find(|c| c.contains(&i)).expect("every input is clustered");
            for &m in c {
                labels[m] = next;
            }
            next += 1;
        }
    }
    Ok(labels)
}

/// Pearson correlation matrix of the columns of `z`.
pub fn correlation(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let st = crate::data::standardize(z)?;
    let n = z.nrows() as f64;
    let mut c = st.values.tr_mul(&st.values) / (n - 1.0);
    for i in 0..c.nrows() {
        c[(i, i)] = 1.0;
    }
    Ok(c)
}
