//! Bound-constrained limited-memory BFGS.
//!
//! Each iteration finds the generalized Cauchy point along the projected
//! steepest-descent path of the quadratic model, minimizes the model over
//! the variables that remain free, and backtracks along the resulting
//! feasible direction. The limited-memory Hessian is materialized densely
//! from the stored `(s, y)` pairs, which is cheap at the latent sizes used
//! here (tens of variables).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{NumericsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoundBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(NumericsError::InvalidBounds(format!("{} lower vs {} upper", lower.len(), upper.len())));
        }
        if let Some(i) = lower.iter().zip(&upper).position(|(l, u)| !(l <= u) || l.is_nan()) {
            return Err(NumericsError::InvalidBounds(format!("coordinate {i}: {} > {}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| l <= v && v <= u)
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Concatenate two boxes.
    pub fn join(&self, other: &BoundBox) -> BoundBox {
        BoundBox {
            lower: self.lower.iter().chain(&other.lower).copied().collect(),
            upper: self.upper.iter().chain(&other.upper).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the objective by less than this
    /// fraction of `max(|f|, 1)`.
    pub f_rel_tol: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsbConfig {
    fn default() -> Self {
        Self { memory: 10, max_iters: 200, grad_tol: 1e-5, f_rel_tol: 1e-12, max_line_search: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbfgsbStatus {
    Converged,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsbResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub status: LbfgsbStatus,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at the starting point and at every accepted iterate.
    pub trace: Vec<f64>,
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &BoundBox) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| ((xi - gi).clamp(bounds.lower[i], bounds.upper[i]) - xi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense realization of the limited-memory BFGS matrix.
fn hessian_approx(n: usize, pairs: &[(Vec<f64>, Vec<f64>)]) -> DMatrix<f64> {
    let theta = pairs.last().map_or(1.0, |(s, y)| dot(y, y) / dot(s, y));
    let mut b = DMatrix::identity(n, n) * theta;
    for (s, y) in pairs {
        let s = DVector::from_column_slice(s);
        let y = DVector::from_column_slice(y);
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        let ys = y.dot(&s);
        b -= &bs * bs.transpose() / sbs;
        b += &y * y.transpose() / ys;
    }
    b
}

/// Generalized Cauchy point of the model `gᵀp + ½ pᵀBp` along `P(x − t g)`.
fn cauchy_point(x: &[f64], g: &[f64], b: &DMatrix<f64>, bounds: &BoundBox) -> Vec<f64> {
    let n = x.len();
    let mut breaks: Vec<(f64, usize)> = Vec::new();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let t = if g[i] < 0.0 {
            (x[i] - bounds.upper[i]) / g[i]
        } else if g[i] > 0.0 {
            (x[i] - bounds.lower[i]) / g[i]
        } else {
            f64::INFINITY
        };
        if t > 0.0 {
            d[i] = -g[i];
            if t.is_finite() {
                breaks.push((t, i));
            }
        }
    }
    breaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let gv = DVector::from_column_slice(g);
    let mut z = DVector::zeros(n);
    let mut t_old = 0.0;
    for &(t, i) in &breaks {
        let bd = b * &d;
        let f1 = gv.dot(&d) + bd.dot(&z);
        let f2 = d.dot(&bd);
        if f1 >= 0.0 {
            return finish(x, &z, bounds);
        }
        let dt = t - t_old;
        let dt_min = if f2 > 0.0 { -f1 / f2 } else { f64::INFINITY };
        if dt_min < dt {
            z += &d * dt_min;
            return finish(x, &z, bounds);
        }
        z += &d * dt;
        t_old = t;
        z[i] = if d[i] > 0.0 { bounds.upper[i] - x[i] } else { bounds.lower[i] - x[i] };
        d[i] = 0.0;
    }
    let bd = b * &d;
    let f1 = gv.dot(&d) + bd.dot(&z);
    let f2 = d.dot(&bd);
    if f1 < 0.0 && f2 > 0.0 {
        z += &d * (-f1 / f2);
    }
    finish(x, &z, bounds)
}

fn finish(x: &[f64], z: &DVector<f64>, bounds: &BoundBox) -> Vec<f64> {
    let mut xc: Vec<f64> = x.iter().zip(z.iter()).map(|(a, b)| a + b).collect();
    bounds.project_in_place(&mut xc);
    xc
}

/// Minimize the model over the variables left free at the Cauchy point.
fn subspace_minimum(x: &[f64], g: &[f64], b: &DMatrix<f64>, xc: &[f64], bounds: &BoundBox) -> Vec<f64> {
    let n = x.len();
    let free: Vec<usize> = (0..n).filter(|&i| bounds.lower[i] < xc[i] && xc[i] < bounds.upper[i]).collect();
    if free.is_empty() {
        return xc.to_vec();
    }
    let step = DVector::from_iterator(n, xc.iter().zip(x).map(|(a, b)| a - b));
    let r = DVector::from_column_slice(g) + b * step;
    let bff = DMatrix::from_fn(free.len(), free.len(), |i, j| b[(free[i], free[j])]);
    let rf = DVector::from_iterator(free.len(), free.iter().map(|&i| -r[i]));
    let Some(chol) = bff.cholesky() else { return xc.to_vec() };
    let du = chol.solve(&rf);

    // Projected candidate first; fall back to truncating the step at the box.
    let mut projected = xc.to_vec();
    for (k, &i) in free.iter().enumerate() {
        projected[i] += du[k];
    }
    bounds.project_in_place(&mut projected);
    let dir: Vec<f64> = projected.iter().zip(x).map(|(a, b)| a - b).collect();
    if dot(g, &dir) < 0.0 {
        return projected;
    }
    let mut alpha: f64 = 1.0;
    for (k, &i) in free.iter().enumerate() {
        if du[k] > 0.0 {
            alpha = alpha.min((bounds.upper[i] - xc[i]) / du[k]);
        } else if du[k] < 0.0 {
            alpha = alpha.min((bounds.lower[i] - xc[i]) / du[k]);
        }
    }
    let mut out = xc.to_vec();
    for (k, &i) in free.iter().enumerate() {
        out[i] += alpha * du[k];
    }
    bounds.project_in_place(&mut out);
    out
}

/// Minimize `objective` inside `bounds` starting from `x0`.
///
/// `objective` returns the value and gradient at a point; it is only ever
/// called with feasible points.
pub fn lbfgsb_minimize<F>(mut objective: F, x0: &[f64], bounds: &BoundBox, config: &LbfgsbConfig) -> Result<LbfgsbResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    if bounds.len() != n {
        return Err(NumericsError::InvalidBounds(format!("{} bounds for {n} variables", bounds.len())));
    }
    if !bounds.contains(x0) {
        return Err(NumericsError::Infeasible);
    }
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) || g.len() != n {
        return Err(NumericsError::NonFinite { op: "objective" });
    }
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut status = LbfgsbStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iters {
        if projected_gradient_norm(&x, &g, bounds) < config.grad_tol {
            status = LbfgsbStatus::Converged;
            break;
        }
        let b = hessian_approx(n, &pairs);
        let xc = cauchy_point(&x, &g, &b, bounds);
        let xbar = subspace_minimum(&x, &g, &b, &xc, bounds);
        let d: Vec<f64> = xbar.iter().zip(&x).map(|(a, b)| a - b).collect();
        let slope = dot(&g, &d);
        if !(slope < 0.0) {
            if pairs.is_empty() {
                status = LbfgsbStatus::LineSearchFailed;
                break;
            }
            pairs.clear();
            continue;
        }

        let dnorm = dot(&d, &d).sqrt();
        let mut alpha = if pairs.is_empty() { (1.0 / dnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..config.max_line_search {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            bounds.project_in_place(&mut xt);
            evaluations += 1;
            match objective(&xt) {
                Ok((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                    if ft <= f + 1e-4 * alpha * slope {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                    let denom = 2.0 * (ft - f - alpha * slope);
                    let interp = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                    alpha = interp.clamp(0.1 * alpha, 0.5 * alpha);
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((xt, ft, gt)) = accepted else {
            if !pairs.is_empty() {
                pairs.clear();
                continue;
            }
            status = LbfgsbStatus::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y) {
            pairs.push((s, y));
            if pairs.len() > config.memory {
                pairs.remove(0);
            }
        }
        let decrease = f - ft;
        x = xt;
        f = ft;
        g = gt;
        trace.push(f);
        if decrease <= config.f_rel_tol * f.abs().max(1.0) {
            status = LbfgsbStatus::FunctionTolerance;
            break;
        }
    }
    if status == LbfgsbStatus::MaxIterations && projected_gradient_norm(&x, &g, bounds) < config.grad_tol {
        status = LbfgsbStatus::Converged;
    }
    Ok(LbfgsbResult { x, f, status, iterations, evaluations, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_1d(c: f64) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| Ok(((x[0] - c).powi(2), vec![2.0 * (x[0] - c)]))
    }

    #[test]
    fn active_bound() {
        let b = BoundBox::uniform(1, -1.0, 1.0).unwrap();
        let r = lbfgsb_minimize(quad_1d(3.0), &[0.0], &b, &LbfgsbConfig::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert_eq!(r.status, LbfgsbStatus::Converged);
    }

    #[test]
    fn interior_optimum() {
        let b = BoundBox::uniform(1, -1.0, 1.0).unwrap();
        let r = lbfgsb_minimize(quad_1d(0.5), &[-0.9], &b, &LbfgsbConfig::default()).unwrap();
        assert!((r.x[0] - 0.5).abs() < 1e-8, "{:?}", r.x);
    }

    #[test]
    fn rejects_infeasible_start_and_bad_objective() {
        let b = BoundBox::uniform(1, -1.0, 1.0).unwrap();
        assert!(matches!(
            lbfgsb_minimize(quad_1d(0.0), &[2.0], &b, &LbfgsbConfig::default()),
            Err(NumericsError::Infeasible)
        ));
        let nan = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(lbfgsb_minimize(nan, &[0.0], &b, &LbfgsbConfig::default()).is_err());
        assert!(BoundBox::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            Ok((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
        };
        let bounds = BoundBox::new(vec![-2.0, -2.0], vec![2.0, 0.5]).unwrap();
        let r = lbfgsb_minimize(f, &[-1.2, 0.3], &bounds, &LbfgsbConfig { max_iters: 500, ..Default::default() }).unwrap();
        // On b = 0.5 the optimum solves -2(1-a) - 400a(0.5-a²) = 0; bisect for it.
        let root = {
            let d = |a: f64| -2.0 * (1.0 - a) - 400.0 * a * (0.5 - a * a);
            let (mut lo, mut hi) = (0.5, 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if d(mid) < 0.0 { lo = mid } else { hi = mid }
            }
            lo
        };
        assert!((r.x[1] - 0.5).abs() < 1e-12);
        assert!((r.x[0] - root).abs() < 1e-6, "{:?} vs {root}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
