//! Shared numerical kernels: normal distribution helpers, quadrature rules,
//! moments, and the two regression engines (IRLS logistic, OLS).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF. `p` must lie in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided p-value of a standard normal test statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { 1.0 } else { 0.0 };
    }
    (2.0 * normal_cdf(-z.abs())).min(1.0)
}

pub fn chi_squared_sf(x: f64, dof: f64) -> f64 {
    match ChiSquared::new(dof) {
        Ok(d) => d.sf(x).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x), stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale = (sxx * syy).sqrt();
    if !(scale > 0.0) || sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some((sxy / scale).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties share their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Nodes and weights of a Gauss rule from its Jacobi matrix (Golub-Welsch).
fn golub_welsch(diag: Vec<f64>, off: Vec<f64>, mass: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
        if i + 1 < n {
            j[(i, i + 1)] = off[i];
            j[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Hermite rule for the standard normal density: weights sum to 1.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (x, mut w) = golub_welsch(vec![0.0; n], off, 1.0);
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    // symmetrize to kill eigen-solver round-off
    let mut xs = x.clone();
    for i in 0..n {
        let j = n - 1 - i;
        let a = 0.5 * (x[i] - x[j]);
        xs[i] = a;
    }
    let ws: Vec<f64> = (0..n).map(|i| 0.5 * (w[i] + w[n - 1 - i])).collect();
    (xs, ws)
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let off = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(vec![0.0; n], off, 2.0)
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Linear predictor grew beyond |20|: (quasi-)complete separation.
    pub separation: bool,
}

fn bernoulli_loglik(y: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| yi * log_sigmoid(e) + (1.0 - yi) * log_sigmoid(-e))
        .sum()
}

/// Logistic regression by iteratively reweighted least squares with a small
/// ridge penalty on every coefficient. Wald standard errors come from the
/// penalized information matrix at the solution.
pub fn logistic_regression(
    x: &DMatrix<f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    ridge: f64,
) -> LogisticFit {
    let n = x.nrows();
    let p = x.ncols();
    assert_eq!(y.len(), n);
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let mut beta = DVector::<f64>::zeros(p);
    let penalized = |beta: &DVector<f64>| -> f64 {
        let eta: Vec<f64> = (0..n).map(|i| x.row(i).dot(&beta.transpose()) + off(i)).collect();
        bernoulli_loglik(y, &eta) - 0.5 * ridge * beta.norm_squared()
    };
    let mut current = penalized(&beta);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(p);
        let mut h = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            let eta = row.dot(&beta.transpose()) + off(i);
            let pi = sigmoid(eta);
            let w = (pi * (1.0 - pi)).max(1e-12);
            for a in 0..p {
                grad[a] += row[a] * (y[i] - pi);
                for b in 0..=a {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
            h[(a, a)] += ridge;
        }
        grad -= &beta * ridge;
        let step = match h.cholesky() {
            Some(c) => c.solve(&grad),
            None => break,
        };
        if step.amax() < 1e-10 {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &step * t;
            let val = penalized(&trial);
            if val >= current - 1e-12 * current.abs().max(1.0) {
                beta = trial;
                current = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = step.amax() < 1e-6;
            break;
        }
    }
    // information at the final point
    let info = {
        let mut h = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            let eta = row.dot(&beta.transpose()) + off(i);
            let pi = sigmoid(eta);
            let w = (pi * (1.0 - pi)).max(1e-12);
            for a in 0..p {
                for b in 0..p {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            h[(a, a)] += ridge;
        }
        h
    };
    let cov = info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).dot(&beta.transpose()) + off(i)).collect();
    let log_likelihood = bernoulli_loglik(y, &eta);
    let separation = eta.iter().any(|e| e.abs() > 20.0);
    let std_errors: Vec<f64> = (0..p).map(|a| cov[(a, a)].max(0.0).sqrt()).collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let p_values = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| normal_two_sided_p(b / se))
        .collect();
    let ybar = mean(y);
    let null_log_likelihood = if ybar <= 0.0 || ybar >= 1.0 {
        0.0
    } else {
        n as f64 * (ybar * ybar.ln() + (1.0 - ybar) * (1.0 - ybar).ln())
    };
    LogisticFit {
        coefficients,
        std_errors,
        p_values,
        log_likelihood,
        null_log_likelihood,
        iterations,
        converged,
        separation,
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residual_variance: f64,
}

/// Ordinary least squares with Wald (normal approximation) p-values.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Option<OlsFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return None;
    }
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * x;
    let xty = x.transpose() * &yv;
    let chol = xtx.cholesky()?;
    let beta = chol.solve(&xty);
    let resid = &yv - x * &beta;
    let residual_variance = resid.norm_squared() / (n - p) as f64;
    let inv = chol.inverse();
    let std_errors: Vec<f64> = (0..p)
        .map(|a| (residual_variance * inv[(a, a)]).max(0.0).sqrt())
        .collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let p_values = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| {
            if *se > 0.0 {
                normal_two_sided_p(b / se)
            } else if *b == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Some(OlsFit {
        coefficients,
        std_errors,
        p_values,
        residual_variance,
    })
}

/// Symmetric eigen-decomposition with eigenvalues sorted descending.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        // deterministic sign: largest-magnitude entry positive
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

/// Golden-section maximization of a unimodal function on [lo, hi].
pub fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // the ends may dominate when the optimum sits on the boundary
    let candidates = [(lo, f(lo)), (mid, f(mid)), (hi, f(hi))];
    candidates
        .iter()
        .copied()
        .fold((mid, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
        .0
}
