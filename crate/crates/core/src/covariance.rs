//! Covariance estimation (sample covariance or graphical lasso) and the
//! Cholesky root used to recolor independent null columns.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};

/// Default graphical lasso penalty.
pub const DEFAULT_RHO: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceMethod {
    Sample,
    Glasso { rho: f64 },
}

/// An SPD covariance estimate with its lower Cholesky root.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    sigma: Array2<f64>,
    cholesky: Array2<f64>,
    method: CovarianceMethod,
    jittered: bool,
}

impl CovarianceModel {
    pub fn from_sigma(sigma: Array2<f64>, method: CovarianceMethod) -> Result<Self> {
        check_symmetric(sigma.view())?;
        let cholesky = cholesky_root(sigma.view())?;
        Ok(CovarianceModel {
            sigma,
            cholesky,
            method,
            jittered: false,
        })
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    pub fn cholesky(&self) -> &Array2<f64> {
        &self.cholesky
    }

    pub fn method(&self) -> CovarianceMethod {
        self.method
    }

    /// Whether a diagonal jitter was needed to factor the estimate.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }
}

fn check_square(m: ArrayView2<'_, f64>) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!("{r}x{c} matrix is not square")));
    }
    if r == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    Ok(r)
}

fn check_symmetric(m: ArrayView2<'_, f64>) -> Result<()> {
    let p = check_square(m)?;
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > 1e-10 * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// Lower-triangular `L` with `L L^T = sigma` and positive diagonal.
///
/// Only the lower triangle of `sigma` is read. A pivot at or below
/// `1e-12` times its diagonal entry is treated as a failure of the
/// corresponding (1-based) leading minor.
pub fn cholesky_root(sigma: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let p = check_square(sigma)?;
    let mut l = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut d = sigma[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-12 * sigma[(j, j)].abs()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j + 1 });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of `L L^T` from its Cholesky root.
pub fn inverse_from_cholesky(l: ArrayView2<'_, f64>) -> Array2<f64> {
    let p = l.nrows();
    // Invert L column by column (forward substitution), then form L^-T L^-1.
    let mut linv = Array2::<f64>::zeros((p, p));
    for c in 0..p {
        linv[(c, c)] = 1.0 / l[(c, c)];
        for i in (c + 1)..p {
            let mut s = 0.0;
            for k in c..i {
                s -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = s / l[(i, i)];
        }
    }
    linv.t().dot(&linv)
}

/// `max_ij |a_ij - b_ij|`.
pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `X^T X / (n - 1)` about the column means.
pub fn sample_covariance_matrix(x: &DataMatrix) -> Array2<f64> {
    let values = x.values();
    let means = values.mean_axis(Axis(0)).expect("n >= 2");
    let centered = values - &means.insert_axis(Axis(0));
    let mut s = centered.t().dot(&centered) / (x.n() as f64 - 1.0);
    symmetrize(&mut s);
    s
}

fn symmetrize(s: &mut Array2<f64>) {
    let p = s.nrows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

pub fn sample_covariance(x: &DataMatrix) -> Result<CovarianceModel> {
    if x.n() <= x.p() {
        return Err(Error::RankDeficientCovariance);
    }
    let sigma = sample_covariance_matrix(x);
    CovarianceModel::from_sigma(sigma, CovarianceMethod::Sample).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::RankDeficientCovariance,
        other => other,
    })
}

/// Blockwise coordinate descent for the graphical lasso, maximizing
/// `log det(Theta) - tr(S Theta) - rho * sum_ij |Theta_ij|` and returning
/// `W = Theta^-1`.
///
/// Each sweep visits every column `j`, solving the lasso
/// `min_b 1/2 b' W11 b - s12' b + rho |b|_1` exactly by an active-set
/// (feature-sign) search and setting `w12 = W11 b`. The diagonal is fixed at `diag(S) + rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphicalLasso {
    pub rho: f64,
    pub max_sweeps: usize,
    /// Sweeps stop when the mean absolute change of the off-diagonal of
    /// `W` drops to `tolerance * mean |S_offdiag|`.
    pub tolerance: f64,
    /// Cap on active-set steps for one column's lasso.
    pub max_inner_iterations: usize,
    /// Record the penalized log-likelihood after every sweep.
    pub track_objective: bool,
}

impl Default for GraphicalLasso {
    fn default() -> Self {
        GraphicalLasso {
            rho: DEFAULT_RHO,
            max_sweeps: 10_000,
            tolerance: 1e-4,
            max_inner_iterations: 10_000,
            track_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub model: CovarianceModel,
    pub precision: Array2<f64>,
    pub sweeps: usize,
    /// Penalized log-likelihood after each sweep (empty unless tracked).
    pub objective_trace: Vec<f64>,
}

/// `log det(Theta) - tr(S Theta) - rho * ||Theta||_1`.
pub fn glasso_objective(s: ArrayView2<'_, f64>, theta: ArrayView2<'_, f64>, rho: f64) -> Result<f64> {
    let l = cholesky_root(theta)?;
    let log_det: f64 = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
    let trace: f64 = s.iter().zip(theta.t().iter()).map(|(a, b)| a * b).sum();
    let l1: f64 = theta.iter().map(|v| v.abs()).sum();
    Ok(log_det - trace - rho * l1)
}

/// Solves `A x = rhs` over the index set `idx` of an SPD `A`.
fn solve_subsystem(a: ArrayView2<'_, f64>, idx: &[usize], rhs: &[f64]) -> Result<Vec<f64>> {
    let k = idx.len();
    let sub = Array2::from_shape_fn((k, k), |(u, v)| a[(idx[u], idx[v])]);
    let l = cholesky_root(sub.view())?;
    let mut y = rhs.to_vec();
    for i in 0..k {
        for q in 0..i {
            y[i] -= l[(i, q)] * y[q];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..k).rev() {
        for q in (i + 1)..k {
            y[i] -= l[(q, i)] * y[q];
        }
        y[i] /= l[(i, i)];
    }
    Ok(y)
}

/// Minimizes `1/2 b' A b - c' b + rho |b|_1` for SPD `A`, warm started
/// from `b`. Feature-sign search: grow the active set by the worst KKT
/// violator, solve the sign-fixed quadratic on it, and line search over
/// the sign changes. The objective decreases strictly at every step.
fn lasso_quadratic(
    a: ArrayView2<'_, f64>,
    c: ArrayView1<'_, f64>,
    rho: f64,
    b: &mut Array1<f64>,
    max_steps: usize,
) -> Result<()> {
    let m = c.len();
    let slack = 1e-12 * (c.iter().fold(0.0f64, |s, v| s.max(v.abs())) + rho);
    let mut steps = 0;
    loop {
        let grad = a.dot(&*b) - &c;
        let violator = (0..m)
            .filter(|&i| b[i] == 0.0 && grad[i].abs() > rho + slack)
            .max_by(|&x, &y| grad[x].abs().total_cmp(&grad[y].abs()));
        let mut sign: Vec<f64> = b.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
        match violator {
            Some(i) => sign[i] = -grad[i].signum(),
            // Nonzeros are stationary after each full step, so no
            // violator means the KKT conditions hold.
            None if steps > 0 => return Ok(()),
            None => {}
        }
        loop {
            steps += 1;
            let idx: Vec<usize> = (0..m).filter(|&i| sign[i] != 0.0).collect();
            if idx.is_empty() {
                break;
            }
            if steps > max_steps {
                return Ok(());
            }
            let rhs: Vec<f64> = idx.iter().map(|&i| c[i] - rho * sign[i]).collect();
            let target = solve_subsystem(a, &idx, &rhs)?;
            // Along b + t d the smooth part is q0 + t g + t^2 h / 2.
            let d: Vec<f64> = idx.iter().zip(&target).map(|(&i, x)| x - b[i]).collect();
            let (mut g, mut h) = (0.0, 0.0);
            for (u, &i) in idx.iter().enumerate() {
                let mut ad = 0.0;
                let mut ab = 0.0;
                for (v, &k) in idx.iter().enumerate() {
                    ad += a[(i, k)] * d[v];
                    ab += a[(i, k)] * b[k];
                }
                g += d[u] * (ab - c[i]);
                h += d[u] * ad;
            }
            let value = |t: f64| {
                let l1: f64 = idx.iter().zip(&d).map(|(&i, di)| (b[i] + t * di).abs()).sum();
                t * g + 0.5 * t * t * h + rho * l1
            };
            let mut best_t = 1.0;
            let mut best = value(1.0);
            for (u, &i) in idx.iter().enumerate() {
                if b[i] != 0.0 && b[i].signum() != target[u].signum() {
                    let t = b[i] / (b[i] - target[u]);
                    let f = value(t);
                    if f < best {
                        best = f;
                        best_t = t;
                    }
                }
            }
            let full = best_t == 1.0;
            let consistent = idx.iter().zip(&target).all(|(&i, x)| x.signum() == sign[i]);
            for (u, &i) in idx.iter().enumerate() {
                let crosses = !full && b[i] != 0.0 && b[i] / (b[i] - target[u]) == best_t;
                b[i] = if full {
                    target[u]
                } else if crosses {
                    0.0
                } else {
                    b[i] + best_t * d[u]
                };
                sign[i] = if b[i] == 0.0 { 0.0 } else { b[i].signum() };
            }
            if full && consistent {
                break;
            }
        }
    }
}

impl GraphicalLasso {
    pub fn new(rho: f64) -> Self {
        GraphicalLasso {
            rho,
            ..Default::default()
        }
    }

    pub fn fit(&self, s: ArrayView2<'_, f64>) -> Result<GlassoFit> {
        let p = check_square(s)?;
        check_symmetric(s)?;
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!("rho must be >= 0, got {}", self.rho)));
        }
        if let Some(j) = (0..p).find(|&j| !(s[(j, j)] > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "covariance diagonal entry {j} is not positive"
            )));
        }
        let rho = self.rho;

        let mut w = s.to_owned();
        for j in 0..p {
            w[(j, j)] += rho;
        }
        let mut trace = Vec::new();

        let off_count = (p * (p - 1)) as f64;
        let mut sweeps = 0;
        if p > 1 {
            let mean_abs_off = s
                .indexed_iter()
                .filter(|((i, j), _)| i != j)
                .map(|(_, v)| v.abs())
                .sum::<f64>()
                / off_count;
            let threshold = self.tolerance * mean_abs_off;
            let mut beta = Array2::<f64>::zeros((p, p));
            let m = p - 1;
            let mut a = Array2::<f64>::zeros((m, m));
            let mut c = Array1::<f64>::zeros(m);
            let mut b = Array1::<f64>::zeros(m);
            let mut converged = false;
            while sweeps < self.max_sweeps {
                sweeps += 1;
                let mut total_change = 0.0;
                for j in 0..p {
                    let others = |i: usize| if i < j { i } else { i + 1 };
                    for u in 0..m {
                        c[u] = s[(others(u), j)];
                        b[u] = beta[(others(u), j)];
                        for v in 0..m {
                            a[(u, v)] = w[(others(u), others(v))];
                        }
                    }
                    lasso_quadratic(a.view(), c.view(), rho, &mut b, self.max_inner_iterations)?;
                    let r = a.dot(&b);
                    for u in 0..m {
                        let k = others(u);
                        beta[(k, j)] = b[u];
                        total_change += 2.0 * (w[(k, j)] - r[u]).abs();
                        w[(k, j)] = r[u];
                        w[(j, k)] = r[u];
                    }
                }
                if self.track_objective {
                    let l = cholesky_root(w.view())?;
                    let theta = inverse_from_cholesky(l.view());
                    trace.push(glasso_objective(s, theta.view(), rho)?);
                }
                if total_change / off_count <= threshold {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence { sweeps });
            }
        }

        let (cholesky, jittered) = match cholesky_root(w.view()) {
            Ok(l) => (l, false),
            Err(_) => {
                let jitter = 1e-8 * w.diag().mean().unwrap_or(1.0);
                log::warn!("glasso estimate not positive definite; adding jitter {jitter:e}");
                for j in 0..p {
                    w[(j, j)] += jitter;
                }
                (cholesky_root(w.view())?, true)
            }
        };
        let precision = inverse_from_cholesky(cholesky.view());
        if self.track_objective && p == 1 {
            trace.push(glasso_objective(s, precision.view(), rho)?);
        }
        Ok(GlassoFit {
            model: CovarianceModel {
                sigma: w,
                cholesky,
                method: CovarianceMethod::Glasso { rho },
                jittered,
            },
            precision,
            sweeps,
            objective_trace: trace,
        })
    }
}

pub fn graphical_lasso(s: ArrayView2<'_, f64>, rho: f64) -> Result<CovarianceModel> {
    Ok(GraphicalLasso::new(rho).fit(s)?.model)
}

/// Rows of `z` mapped through `L`: `X0 = Z L^T`.
pub fn recolor(z: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let p = check_square(l)?;
    if z.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} columns to recolor with a {p}x{p} root",
            z.ncols()
        )));
    }
    Ok(z.dot(&l.t()))
}
