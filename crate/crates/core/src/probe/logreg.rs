use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegOptions {
    /// Stop when the Euclidean norm of the gradient falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 10_000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    pub converged: bool,
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg {
    /// `d × C`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub l2: f64,
}

impl LogReg {
    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    /// Row-wise class probabilities.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Config(format!(
                "probe expects {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let mut z = self.standardize(x).dot(&self.weights) + &self.bias;
        softmax_rows(&mut z);
        Ok(z)
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy plus `l2/2 · ‖W‖²`; `theta = [W (row-major), b]`.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (n, d, c) = (self.x.nrows(), self.x.ncols(), self.classes);
        let w = ArrayView2::from_shape((d, c), &theta[..d * c]).expect("weight shape");
        let b = ArrayView1::from(&theta[d * c..]);
        let mut p = self.x.dot(&w) + b;
        let mut loss = 0.0;
        for (mut row, &yi) in p.rows_mut().into_iter().zip(self.y) {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[yi];
            row.mapv_inplace(|v| (v - lse).exp());
            row[yi] -= 1.0;
        }
        p /= n as f64;
        let gw = self.x.t().dot(&p) + &(&w * self.l2);
        let gb = p.sum_axis(Axis(0));
        let reg = 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        let mut g = Vec::with_capacity(theta.len());
        g.extend(gw.iter());
        g.extend(gb.iter());
        (loss / n as f64 + reg, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L-BFGS with a backtracking Armijo line search.
fn lbfgs(problem: &Problem, mut x: Vec<f64>, opts: &LogRegOptions) -> (Vec<f64>, FitInfo) {
    let (mut f, mut g) = problem.eval(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    while norm(&g) > opts.tolerance && iterations < opts.max_iterations {
        iterations += 1;
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history.back().map(|(s, y, _)| dot(s, y) / dot(y, y)).unwrap_or(1.0 / norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let (mut xn, mut fnew, mut gnew);
        loop {
            xn = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect::<Vec<_>>();
            (fnew, gnew) = problem.eval(&xn);
            if fnew <= f + 1e-4 * step * slope || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        if fnew > f {
            // No decrease is available at working precision.
            break;
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        f = fnew;
        g = gnew;
    }
    let grad_norm = norm(&g);
    (
        x,
        FitInfo {
            iterations,
            grad_norm,
            objective: f,
            converged: grad_norm <= opts.tolerance,
        },
    )
}

/// Fits a probe with strength `l2` on the penalty `l2/2 · ‖W‖²` added to
/// the mean cross-entropy. Features are standardized with statistics of `x`.
/// `warm` seeds the optimizer with another fit's weights.
pub fn fit_logreg(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    l2: f64,
    opts: &LogRegOptions,
    warm: Option<&LogReg>,
) -> Result<(LogReg, FitInfo)> {
    let (n, d) = x.dim();
    if y.len() != n || n == 0 {
        return Err(Error::Config(format!("{n} rows but {} labels", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::Config(format!("label {bad} >= {classes} classes")));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Param(format!("L2 strength must be >= 0, got {l2}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (&x - &mean) / &scale;
    let problem = Problem {
        x: z.view(),
        y,
        classes,
        l2,
    };
    let mut theta = vec![0.0; d * classes + classes];
    if let Some(w) = warm.filter(|w| w.dim() == d && w.num_classes() == classes) {
        theta[..d * classes].iter_mut().zip(w.weights.iter()).for_each(|(a, b)| *a = *b);
        theta[d * classes..].iter_mut().zip(w.bias.iter()).for_each(|(a, b)| *a = *b);
    }
    let (theta, info) = lbfgs(&problem, theta, opts);
    let weights = Array2::from_shape_vec((d, classes), theta[..d * classes].to_vec()).expect("weight shape");
    let bias = Array1::from(theta[d * classes..].to_vec());
    Ok((
        LogReg {
            weights,
            bias,
            mean,
            scale,
            l2,
        },
        info,
    ))
}
