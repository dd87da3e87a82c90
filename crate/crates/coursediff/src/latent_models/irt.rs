//! Logistic item-response models fitted by marginal maximum likelihood (EM
//! over a Gauss–Hermite grid). Traits are reported as posterior means.
//!
//! Rasch:   logit P = a·x − b_c,      x ~ N(0, 1)
//! 2PL-nD:  logit P = ⟨α_c, x⟩ − β_c, x ~ N(0, I)

use super::{rotate_leading_block, Convergence, LatentModel, ModelClass};
use crate::error::{Error, Result};
use crate::grade_data::{CourseResponseMatrix, ScaleKind};
use crate::stats;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtConfig {
    pub max_iter: usize,
    /// Converged when max|∇ ln L| < grad_tol · S.
    pub grad_tol: f64,
    /// Also converged when the relative change of ln L drops below this.
    pub rel_tol: f64,
    /// Ridge on intercepts and on (α − 1).
    pub ridge: f64,
    /// Quadrature points per dimension; `None` picks 21 / 15 / 9 / 7.
    pub nodes_per_dim: Option<usize>,
}

impl Default for IrtConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            ridge: 1e-4,
            nodes_per_dim: None,
        }
    }
}

/// Observed pass / fail indicators, students × courses.
#[derive(Debug, Clone)]
pub struct IrtData {
    pub(crate) y1: DMatrix<f64>,
    pub(crate) y0: DMatrix<f64>,
    pub(crate) obs: DMatrix<f64>,
}

impl IrtData {
    pub fn from_matrix(m: &CourseResponseMatrix) -> Result<Self> {
        if m.scale().kind != ScaleKind::Binary {
            return Err(Error::Invalid("IRT needs a binary pass/fail matrix".into()));
        }
        let (ns, nc) = (m.n_students(), m.n_courses());
        let mut y1 = DMatrix::zeros(ns, nc);
        let mut y0 = DMatrix::zeros(ns, nc);
        for s in 0..ns {
            for c in 0..nc {
                match m.get(s, c) {
                    Some(g) if g >= 0.5 => y1[(s, c)] = 1.0,
                    Some(_) => y0[(s, c)] = 1.0,
                    None => {}
                }
            }
        }
        let obs = &y1 + &y0;
        Ok(Self { y1, y0, obs })
    }

    pub fn n_students(&self) -> usize {
        self.y1.nrows()
    }

    pub fn n_courses(&self) -> usize {
        self.y1.ncols()
    }
}

/// Product Gauss–Hermite grid for a standard normal prior.
#[derive(Debug, Clone)]
pub struct Quadrature {
    /// Q × n node coordinates.
    pub nodes: DMatrix<f64>,
    pub log_weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(n_dim: usize, per_dim: usize) -> Self {
        let (x, w) = stats::gauss_hermite_normal(per_dim);
        let q = per_dim.pow(n_dim as u32);
        let mut nodes = DMatrix::zeros(q, n_dim);
        let mut log_weights = vec![0.0; q];
        for i in 0..q {
            let mut rest = i;
            for k in 0..n_dim {
                let j = rest % per_dim;
                rest /= per_dim;
                nodes[(i, k)] = x[j];
                log_weights[i] += w[j].ln();
            }
        }
        Self { nodes, log_weights }
    }

    pub fn default_for(n_dim: usize) -> Self {
        Self::new(n_dim, default_nodes(n_dim))
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

fn default_nodes(n_dim: usize) -> usize {
    match n_dim {
        1 => 21,
        2 => 15,
        3 => 9,
        _ => 7,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IrtParams {
    Rasch { slope: f64, b: Vec<f64> },
    /// `alpha` is courses × n.
    Mirt { alpha: DMatrix<f64>, beta: Vec<f64> },
}

impl IrtParams {
    pub fn n_dim(&self) -> usize {
        match self {
            IrtParams::Rasch { .. } => 1,
            IrtParams::Mirt { alpha, .. } => alpha.ncols(),
        }
    }

    /// Flat layout: Rasch `[a, b_1..b_C]`; 2PL `[α_c.., β_c]` per course.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            IrtParams::Rasch { slope, b } => std::iter::once(*slope).chain(b.iter().copied()).collect(),
            IrtParams::Mirt { alpha, beta } => (0..beta.len())
                .flat_map(|c| alpha.row(c).iter().copied().chain(std::iter::once(beta[c])).collect::<Vec<_>>())
                .collect(),
        }
    }

    pub fn with_vec(&self, v: &[f64]) -> IrtParams {
        match self {
            IrtParams::Rasch { .. } => IrtParams::Rasch { slope: v[0], b: v[1..].to_vec() },
            IrtParams::Mirt { alpha, .. } => {
                let n = alpha.ncols();
                let nc = alpha.nrows();
                IrtParams::Mirt {
                    alpha: DMatrix::from_fn(nc, n, |c, k| v[c * (n + 1) + k]),
                    beta: (0..nc).map(|c| v[c * (n + 1) + n]).collect(),
                }
            }
        }
    }

    /// Linear predictor at each node, Q × C.
    fn eta(&self, quad: &Quadrature) -> DMatrix<f64> {
        match self {
            IrtParams::Rasch { slope, b } => {
                DMatrix::from_fn(quad.len(), b.len(), |q, c| slope * quad.nodes[(q, 0)] - b[c])
            }
            IrtParams::Mirt { alpha, beta } => {
                let mut e = &quad.nodes * alpha.transpose();
                for c in 0..beta.len() {
                    e.column_mut(c).add_scalar_mut(-beta[c]);
                }
                e
            }
        }
    }

    fn penalty(&self, ridge: f64) -> f64 {
        match self {
            IrtParams::Rasch { b, .. } => 0.5 * ridge * b.iter().map(|x| x * x).sum::<f64>(),
            IrtParams::Mirt { alpha, beta } => {
                0.5 * ridge
                    * (beta.iter().map(|x| x * x).sum::<f64>() + alpha.iter().map(|a| (a - 1.0).powi(2)).sum::<f64>())
            }
        }
    }
}

struct EStep {
    log_lik: f64,
    post: DMatrix<f64>,
    /// Expected observed counts per node and course.
    n: DMatrix<f64>,
    /// Expected passes per node and course.
    r: DMatrix<f64>,
}

fn e_step(data: &IrtData, quad: &Quadrature, params: &IrtParams) -> EStep {
    let eta = params.eta(quad);
    let logp = eta.map(stats::log_sigmoid);
    let logq = eta.map(|e| stats::log_sigmoid(-e));
    let mut l = &data.y1 * logp.transpose() + &data.y0 * logq.transpose();
    let mut log_lik = 0.0;
    for s in 0..l.nrows() {
        let mut row = l.row_mut(s);
        let mut mx = f64::NEG_INFINITY;
        for q in 0..row.len() {
            row[q] += quad.log_weights[q];
            mx = mx.max(row[q]);
        }
        let mut z = 0.0;
        for q in 0..row.len() {
            row[q] = (row[q] - mx).exp();
            z += row[q];
        }
        row /= z;
        log_lik += mx + z.ln();
    }
    let n = l.transpose() * &data.obs;
    let r = l.transpose() * &data.y1;
    EStep { log_lik, post: l, n, r }
}

/// Gradient of the penalized marginal log-likelihood via the Fisher identity
/// (the complete-data score averaged over the posterior).
fn gradient(quad: &Quadrature, params: &IrtParams, es: &EStep, ridge: f64) -> Vec<f64> {
    let eta = params.eta(quad);
    let resid = DMatrix::from_fn(eta.nrows(), eta.ncols(), |q, c| es.r[(q, c)] - es.n[(q, c)] * stats::sigmoid(eta[(q, c)]));
    match params {
        IrtParams::Rasch { b, .. } => {
            let mut g = Vec::with_capacity(b.len() + 1);
            g.push((0..resid.nrows()).map(|q| quad.nodes[(q, 0)] * resid.row(q).sum()).sum());
            for c in 0..b.len() {
                g.push(-resid.column(c).sum() - ridge * b[c]);
            }
            g
        }
        IrtParams::Mirt { alpha, beta } => {
            let n = alpha.ncols();
            let ga = resid.transpose() * &quad.nodes; // C × n
            let mut g = Vec::with_capacity(beta.len() * (n + 1));
            for c in 0..beta.len() {
                for k in 0..n {
                    g.push(ga[(c, k)] - ridge * (alpha[(c, k)] - 1.0));
                }
                g.push(-resid.column(c).sum() - ridge * beta[c]);
            }
            g
        }
    }
}

/// Unpenalized marginal log-likelihood and the gradient of the penalized one.
pub fn marginal_log_likelihood(
    data: &IrtData,
    quad: &Quadrature,
    params: &IrtParams,
    ridge: f64,
) -> (f64, Vec<f64>) {
    let es = e_step(data, quad, params);
    let g = gradient(quad, params, &es, ridge);
    (es.log_lik, g)
}

/// Expected complete-data log-likelihood of one course's parameters.
fn item_q(r: &[f64], n: &[f64], eta: &[f64]) -> f64 {
    r.iter()
        .zip(n)
        .zip(eta)
        .map(|((&r, &n), &e)| r * stats::log_sigmoid(e) + (n - r) * stats::log_sigmoid(-e))
        .sum()
}

/// Damped Newton ascent on a concave objective.
fn newton(
    x0: DVector<f64>,
    f: impl Fn(&DVector<f64>) -> f64,
    grad_hess: impl Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    steps: usize,
) -> DVector<f64> {
    let mut x = x0;
    let mut fx = f(&x);
    for _ in 0..steps {
        let (g, h) = grad_hess(&x);
        let neg = -h;
        let dir = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let mut m = neg;
                let d = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(1e-8, f64::max);
                for i in 0..m.nrows() {
                    m[(i, i)] += d;
                }
                match m.cholesky() {
                    Some(ch) => ch.solve(&g),
                    None => g.clone() * 1e-3,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x + &dir * t;
            let fc = f(&cand);
            if fc >= fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || dir.amax() * t < 1e-10 {
            break;
        }
    }
    x
}

fn m_step(quad: &Quadrature, params: &IrtParams, es: &EStep, ridge: f64) -> IrtParams {
    let nq = quad.len();
    match params {
        IrtParams::Rasch { slope, b } => {
            let nc = b.len();
            let x: Vec<f64> = (0..nq).map(|q| quad.nodes[(q, 0)]).collect();
            let f = |v: &DVector<f64>| -> f64 {
                let mut total = -0.5 * ridge * v.rows(1, nc).norm_squared();
                for c in 0..nc {
                    let eta: Vec<f64> = x.iter().map(|&xq| v[0] * xq - v[c + 1]).collect();
                    let r: Vec<f64> = es.r.column(c).iter().copied().collect();
                    let n: Vec<f64> = es.n.column(c).iter().copied().collect();
                    total += item_q(&r, &n, &eta);
                }
                total
            };
            let gh = |v: &DVector<f64>| {
                let mut g = DVector::zeros(nc + 1);
                let mut h = DMatrix::zeros(nc + 1, nc + 1);
                for c in 0..nc {
                    for q in 0..nq {
                        let e = v[0] * x[q] - v[c + 1];
                        let p = stats::sigmoid(e);
                        let res = es.r[(q, c)] - es.n[(q, c)] * p;
                        let w = es.n[(q, c)] * p * (1.0 - p);
                        g[0] += res * x[q];
                        g[c + 1] -= res;
                        h[(0, 0)] -= w * x[q] * x[q];
                        h[(0, c + 1)] += w * x[q];
                        h[(c + 1, c + 1)] -= w;
                    }
                    g[c + 1] -= ridge * v[c + 1];
                    h[(c + 1, c + 1)] -= ridge;
                    h[(c + 1, 0)] = h[(0, c + 1)];
                }
                (g, h)
            };
            let x0 = DVector::from_iterator(nc + 1, std::iter::once(*slope).chain(b.iter().copied()));
            let v = newton(x0, f, gh, 5);
            IrtParams::Rasch { slope: v[0], b: v.rows(1, nc).iter().copied().collect() }
        }
        IrtParams::Mirt { alpha, beta } => {
            let n = alpha.ncols();
            let nc = beta.len();
            let items: Vec<DVector<f64>> = (0..nc)
                .into_par_iter()
                .map(|c| {
                    let r: Vec<f64> = es.r.column(c).iter().copied().collect();
                    let cnt: Vec<f64> = es.n.column(c).iter().copied().collect();
                    let eta_of = |v: &DVector<f64>| -> Vec<f64> {
                        (0..nq)
                            .map(|q| (0..n).map(|k| v[k] * quad.nodes[(q, k)]).sum::<f64>() - v[n])
                            .collect()
                    };
                    let pen = |v: &DVector<f64>| {
                        0.5 * ridge * ((0..n).map(|k| (v[k] - 1.0).powi(2)).sum::<f64>() + v[n] * v[n])
                    };
                    let f = |v: &DVector<f64>| item_q(&r, &cnt, &eta_of(v)) - pen(v);
                    let gh = |v: &DVector<f64>| {
                        let eta = eta_of(v);
                        let mut g = DVector::zeros(n + 1);
                        let mut h = DMatrix::zeros(n + 1, n + 1);
                        let mut z = DVector::zeros(n + 1);
                        for q in 0..nq {
                            for k in 0..n {
                                z[k] = quad.nodes[(q, k)];
                            }
                            z[n] = -1.0;
                            let p = stats::sigmoid(eta[q]);
                            g += &z * (r[q] - cnt[q] * p);
                            h -= &z * z.transpose() * (cnt[q] * p * (1.0 - p));
                        }
                        for k in 0..n {
                            g[k] -= ridge * (v[k] - 1.0);
                        }
                        g[n] -= ridge * v[n];
                        for i in 0..=n {
                            h[(i, i)] -= ridge;
                        }
                        (g, h)
                    };
                    let x0 = DVector::from_iterator(n + 1, alpha.row(c).iter().copied().chain(std::iter::once(beta[c])));
                    newton(x0, f, gh, 5)
                })
                .collect();
            IrtParams::Mirt {
                alpha: DMatrix::from_fn(nc, n, |c, k| items[c][k]),
                beta: items.iter().map(|v| v[n]).collect(),
            }
        }
    }
}

fn initial_params(data: &IrtData, n_dim: usize) -> IrtParams {
    let nc = data.n_courses();
    let rate: Vec<f64> = (0..nc)
        .map(|c| {
            let o = data.obs.column(c).sum();
            ((data.y1.column(c).sum() + 0.5) / (o + 1.0)).clamp(0.01, 0.99)
        })
        .collect();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    if n_dim == 1 {
        return IrtParams::Rasch { slope: 1.0, b: rate.iter().map(|&p| -logit(p) * 1.2).collect() };
    }
    // loadings from the pass-rate-filled Pearson correlation matrix
    let ns = data.n_students();
    let filled = DMatrix::from_fn(ns, nc, |s, c| if data.obs[(s, c)] > 0.0 { data.y1[(s, c)] } else { rate[c] });
    let mean = filled.row_mean();
    let centered = DMatrix::from_fn(ns, nc, |s, c| filled[(s, c)] - mean[c]);
    let cov = centered.transpose() * &centered / ns as f64;
    let sd: Vec<f64> = (0..nc).map(|c| cov[(c, c)].sqrt().max(1e-6)).collect();
    let corr = DMatrix::from_fn(nc, nc, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let (lambda, v) = stats::sorted_eigen(&corr);
    let mut alpha = DMatrix::zeros(nc, n_dim);
    for c in 0..nc {
        for k in 0..n_dim.min(nc) {
            alpha[(c, k)] = 1.7 * v[(c, k)] * lambda[k].max(0.0).sqrt();
        }
    }
    if alpha.column(0).sum() < 0.0 {
        alpha.column_mut(0).neg_mut();
    }
    alpha.apply(|a| *a = a.clamp(-4.0, 4.0));
    let beta = (0..nc)
        .map(|c| -logit(rate[c]) * (1.0 + 0.35 * alpha.row(c).norm_squared()).sqrt())
        .collect();
    IrtParams::Mirt { alpha, beta }
}

pub fn fit_irt(m: &CourseResponseMatrix, n_dim: usize) -> Result<LatentModel> {
    fit_irt_with(m, n_dim, &IrtConfig::default())
}

pub fn fit_irt_with(m: &CourseResponseMatrix, n_dim: usize, cfg: &IrtConfig) -> Result<LatentModel> {
    if n_dim == 0 {
        return Err(Error::Invalid("model dimension must be at least 1".into()));
    }
    if m.n_students() == 0 || m.n_courses() == 0 {
        return Err(Error::Invalid("empty grade matrix".into()));
    }
    if n_dim > 1 && n_dim >= m.n_courses() {
        return Err(Error::Invalid(format!("dimension {n_dim} needs more than {n_dim} courses")));
    }
    let data = IrtData::from_matrix(m)?;
    let mut warnings = Vec::new();
    for c in 0..data.n_courses() {
        let o = data.obs.column(c).sum();
        let p = data.y1.column(c).sum();
        if o == 0.0 {
            return Err(Error::Invalid(format!("course '{}' has no grades", m.course_ids()[c])));
        }
        if p == 0.0 || p == o {
            warnings.push(format!(
                "course '{}' is all {}; its estimate is held finite by the ridge",
                m.course_ids()[c],
                if p == 0.0 { "fail" } else { "pass" }
            ));
        }
    }
    let quad = Quadrature::new(n_dim, cfg.nodes_per_dim.unwrap_or_else(|| default_nodes(n_dim)));
    let ns = data.n_students() as f64;
    let mut params = initial_params(&data, n_dim);
    let mut conv = Convergence::default();
    let mut es = e_step(&data, &quad, &params);
    let mut prev = f64::NEG_INFINITY;
    for iter in 0..=cfg.max_iter {
        let objective = es.log_lik - params.penalty(cfg.ridge);
        conv.trace.push(objective);
        let g = gradient(&quad, &params, &es, cfg.ridge);
        let gmax = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        conv.final_gradient = Some(gmax);
        conv.iterations = iter;
        let rel = (objective - prev).abs() / objective.abs().max(1.0);
        if gmax < cfg.grad_tol * ns || rel < cfg.rel_tol {
            conv.converged = true;
            break;
        }
        if iter == cfg.max_iter {
            break;
        }
        prev = objective;
        params = m_step(&quad, &params, &es, cfg.ridge);
        es = e_step(&data, &quad, &params);
    }
    if !conv.converged {
        warnings.push(format!("IRT did not converge within {} EM iterations", cfg.max_iter));
    }

    // posterior means on the prior scale
    let mut theta = &es.post * &quad.nodes;
    let nc = data.n_courses();
    let (mut alpha, mut intercept) = match &params {
        IrtParams::Rasch { slope, b } => {
            theta *= *slope;
            (DMatrix::from_element(nc, 1, 1.0), b.clone())
        }
        IrtParams::Mirt { alpha, beta } => (alpha.clone(), beta.clone()),
    };
    // center traits; intercepts absorb the shift
    let mean = theta.row_mean();
    for s in 0..theta.nrows() {
        for k in 0..n_dim {
            theta[(s, k)] -= mean[k];
        }
    }
    for c in 0..nc {
        intercept[c] -= (0..n_dim).map(|k| alpha[(c, k)] * mean[k]).sum::<f64>();
    }
    rotate_leading_block(&mut alpha, &mut theta);
    let mut delta = DMatrix::zeros(nc, n_dim);
    for c in 0..nc {
        let nn = alpha.row(c).norm_squared();
        if nn > 0.0 {
            for k in 0..n_dim {
                delta[(c, k)] = intercept[c] * alpha[(c, k)] / nn;
            }
        } else {
            warnings.push(format!("course '{}' has zero discrimination", m.course_ids()[c]));
        }
    }
    let n_params = if n_dim == 1 { nc + 1 } else { (n_dim + 1) * nc - n_dim * (n_dim - 1) / 2 };
    Ok(LatentModel {
        class: ModelClass::Irt,
        n_dim,
        student_ids: m.student_ids().to_vec(),
        course_ids: m.course_ids().to_vec(),
        theta,
        delta,
        alpha,
        intercept: 0.0,
        sigma2: None,
        log_likelihood: es.log_lik,
        n_params,
        convergence: conv,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade_data::GradeScaleSpec;
    use crate::latent_models::{unidim_difficulty, ModelClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ids(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn rasch_data(ns: usize, nc: usize, seed: u64, miss: f64) -> (CourseResponseMatrix, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..ns).map(|_| rng.sample(StandardNormal)).collect();
        let delta: Vec<f64> = (0..nc).map(|c| -1.5 + 3.0 * c as f64 / (nc - 1) as f64).collect();
        let mut cells = Vec::with_capacity(ns * nc);
        for s in 0..ns {
            for c in 0..nc {
                if rng.random::<f64>() < miss {
                    cells.push(None);
                } else {
                    let p = stats::sigmoid(theta[s] - delta[c]);
                    cells.push(Some(if rng.random::<f64>() < p { 1.0 } else { 0.0 }));
                }
            }
        }
        let m = CourseResponseMatrix::from_flat(ids("s", ns), ids("c", nc), cells, GradeScaleSpec::binary()).unwrap();
        (m, theta, delta)
    }

    fn finite_difference_check(data: &IrtData, quad: &Quadrature, params: &IrtParams, ridge: f64) {
        let (_, g) = marginal_log_likelihood(data, quad, params, ridge);
        let v = params.to_vec();
        for i in 0..v.len() {
            let h = 1e-5 * v[i].abs().max(1.0);
            let at = |x: f64| {
                let mut w = v.clone();
                w[i] = x;
                let p = params.with_vec(&w);
                let (ll, _) = marginal_log_likelihood(data, quad, &p, ridge);
                ll - p.penalty(ridge)
            };
            let fd = (at(v[i] + h) - at(v[i] - h)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1.0);
            assert!(rel < 1e-5, "component {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, _, _) = rasch_data(200, 6, 5, 0.2);
        let data = IrtData::from_matrix(&m).unwrap();
        let quad = Quadrature::new(1, 21);
        let p = IrtParams::Rasch { slope: 0.8, b: vec![0.3, -0.2, 1.0, 0.0, -1.1, 0.5] };
        finite_difference_check(&data, &quad, &p, 1e-4);
        let quad2 = Quadrature::new(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p2 = IrtParams::Mirt {
            alpha: DMatrix::from_fn(6, 2, |_, _| 0.3 + rng.random::<f64>()),
            beta: (0..6).map(|_| rng.random::<f64>() - 0.5).collect(),
        };
        finite_difference_check(&data, &quad2, &p2, 1e-4);
    }

    #[test]
    fn rasch_recovers_difficulties_and_traits() {
        let (m, theta, delta) = rasch_data(1000, 15, 1, 0.0);
        let f = fit_irt(&m, 1).unwrap();
        assert!(f.convergence.converged);
        assert_eq!(f.class, ModelClass::Irt);
        let d = unidim_difficulty(&f).values();
        let max_err = d.iter().zip(&delta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 0.3, "max |δ̂ − δ| = {max_err}");
        let est: Vec<f64> = f.theta.column(0).iter().copied().collect();
        assert!(stats::pearson(&est, &theta).unwrap() > 0.85);
        assert!(f.theta.row_mean().amax() < 1e-10);
    }

    #[test]
    fn em_is_monotone() {
        let (m, _, _) = rasch_data(300, 8, 2, 0.3);
        for d in [1usize, 2] {
            let f = fit_irt(&m, d).unwrap();
            for w in f.convergence.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "dimension {d}: {} then {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn bic_prefers_one_dimension_on_rasch_data() {
        let (m, _, _) = rasch_data(800, 12, 4, 0.0);
        let one = fit_irt(&m, 1).unwrap();
        let two = fit_irt(&m, 2).unwrap();
        assert_eq!(one.n_params, 13);
        assert_eq!(two.n_params, 3 * 12 - 1);
        assert!(two.log_likelihood >= one.log_likelihood - 1.0);
        assert!(one.bic() < two.bic());
    }

    #[test]
    fn degenerate_course_warns_and_stays_finite() {
        let (m, _, _) = rasch_data(200, 5, 9, 0.0);
        let mut cells = m.grades().to_vec();
        for s in 0..200 {
            cells[s * 5 + 2] = Some(1.0);
        }
        let m = m.with_grades(cells).unwrap();
        let f = fit_irt(&m, 1).unwrap();
        assert!(f.warnings.iter().any(|w| w.contains("c2")));
        assert!(f.delta.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_continuous_input() {
        let m = CourseResponseMatrix::from_flat(ids("s", 2), ids("c", 1), vec![Some(1.5), Some(2.0)], GradeScaleSpec::continuous(0.0)).unwrap();
        assert!(fit_irt(&m, 1).is_err());
    }
}
