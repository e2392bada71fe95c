//! Recursive exponentially weighted N-way partial least squares.
//!
//! The model keeps exponentially weighted sufficient statistics of the
//! training stream (sums of x, y, x x^T and x y^T). Each update decays them
//! by the forgetting factor, folds in the new block, and re-extracts the
//! whole family of `f = 1..F_max` multilinear models from the centered
//! covariances. With `lambda = 1` the state after several blocks is exactly
//! the state obtained from one pass over their concatenation.
//!
//! Factor extraction works purely on the covariances. For each factor the
//! input-output covariance, viewed as a tensor `I_1 x .. x I_m x Q`, yields a
//! rank-1 projector `w = w_1 (x) .. (x) w_m` by alternating power iteration.
//! Both covariances are then deflated by the latent score, exactly as
//! NIPALS deflates `X`, and the cumulative regression `W (P^T W)^-1 C^T`
//! gives the f-factor model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::tensor::{multilinear_apply, Tensor};

pub const DEFAULT_F_MAX: usize = 20;
const POWER_MAX_ITER: usize = 100;
const POWER_TOL: f64 = 1e-9;
/// Relative size below which the residual cross-covariance or latent
/// variance counts as exhausted.
const EXHAUSTED_TOL: f64 = 1e-12;

/// One regression model `y = beta . x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Shape `y_shape ++ x_shape`.
    pub beta: Tensor,
    pub bias: Tensor,
}

impl LinearModel {
    fn zeros(x_shape: &[usize], y_shape: &[usize]) -> Result<Self> {
        let full: Vec<usize> = y_shape.iter().chain(x_shape).copied().collect();
        Ok(Self { beta: Tensor::zeros(&full)?, bias: Tensor::zeros(y_shape)? })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        multilinear_apply(&self.beta, &self.bias, x)
    }
}

/// Exponentially weighted sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovState {
    /// Effective (decayed) sample count.
    pub weight: f64,
    pub sum_x: Vec<f64>,
    pub sum_y: Vec<f64>,
    /// `P x P`, row-major.
    pub sum_xx: Vec<f64>,
    /// `P x Q`, row-major.
    pub sum_xy: Vec<f64>,
}

impl CovState {
    fn new(p: usize, q: usize) -> Self {
        Self {
            weight: 0.0,
            sum_x: vec![0.0; p],
            sum_y: vec![0.0; q],
            sum_xx: vec![0.0; p * p],
            sum_xy: vec![0.0; p * q],
        }
    }

    fn decay(&mut self, lambda: f64) {
        self.weight *= lambda;
        for v in self
            .sum_x
            .iter_mut()
            .chain(&mut self.sum_y)
            .chain(&mut self.sum_xx)
            .chain(&mut self.sum_xy)
        {
            *v *= lambda;
        }
    }

    fn accumulate(&mut self, x: &[f64], y: &[f64]) {
        let p = x.len();
        let q = y.len();
        self.weight += 1.0;
        for (s, v) in self.sum_x.iter_mut().zip(x) {
            *s += v;
        }
        for (s, v) in self.sum_y.iter_mut().zip(y) {
            *s += v;
        }
        for i in 0..p {
            let xi = x[i];
            let row = &mut self.sum_xx[i * p..(i + 1) * p];
            for (s, xj) in row.iter_mut().zip(x) {
                *s += xi * xj;
            }
            let row = &mut self.sum_xy[i * q..(i + 1) * q];
            for (s, yj) in row.iter_mut().zip(y) {
                *s += xi * yj;
            }
        }
    }

    pub fn mean_x(&self) -> Vec<f64> {
        self.sum_x.iter().map(|s| s / self.weight).collect()
    }

    pub fn mean_y(&self) -> Vec<f64> {
        self.sum_y.iter().map(|s| s / self.weight).collect()
    }

    /// Centered `(XX, XY)` covariances (weighted scatter, not divided by n).
    fn centered(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.sum_x.len();
        let q = self.sum_y.len();
        let n = self.weight;
        let xx = DMatrix::from_fn(p, p, |i, j| {
            self.sum_xx[i * p + j] - self.sum_x[i] * self.sum_x[j] / n
        });
        let xy = DMatrix::from_fn(p, q, |i, j| {
            self.sum_xy[i * q + j] - self.sum_x[i] * self.sum_y[j] / n
        });
        (xx, xy)
    }
}

/// The F-model family of one REW-NPLS regressor plus its recursive state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NplsModelSet {
    x_shape: Vec<usize>,
    y_shape: Vec<usize>,
    f_max: usize,
    lambda: f64,
    cov: CovState,
    /// `models[f - 1]` is the cumulative f-factor model.
    models: Vec<LinearModel>,
    /// Per-factor, per-input-mode unit weight vectors of the latest extraction.
    projectors: Vec<Vec<Vec<f64>>>,
    f_star: usize,
    val_error: Vec<f64>,
    updates: u64,
}

impl NplsModelSet {
    /// Zero-initialized model set.
    pub fn new(x_shape: &[usize], y_shape: &[usize], f_max: usize, lambda: f64) -> Result<Self> {
        if f_max == 0 {
            return Err(arg_err!("F_max must be positive"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(arg_err!("forgetting factor {lambda} outside [0, 1]"));
        }
        let zero = LinearModel::zeros(x_shape, y_shape)?;
        let p = zero.beta.len() / zero.bias.len();
        Ok(Self {
            x_shape: x_shape.to_vec(),
            y_shape: y_shape.to_vec(),
            f_max,
            lambda,
            cov: CovState::new(p, zero.bias.len()),
            models: vec![zero; f_max],
            projectors: Vec::new(),
            f_star: 1,
            val_error: vec![0.0; f_max],
            updates: 0,
        })
    }

    /// Model set holding caller-supplied models (validation error reset).
    pub fn from_models(models: Vec<LinearModel>, lambda: f64) -> Result<Self> {
        let first = models.first().ok_or_else(|| arg_err!("empty model family"))?;
        let y_shape = first.bias.shape().to_vec();
        let x_shape = first.beta.shape()[y_shape.len()..].to_vec();
        let mut set = Self::new(&x_shape, &y_shape, models.len(), lambda)?;
        for m in &models {
            if m.beta.shape() != first.beta.shape() || m.bias.shape() != first.bias.shape() {
                return Err(arg_err!("model family has inconsistent shapes"));
            }
        }
        set.models = models;
        Ok(set)
    }

    pub fn x_shape(&self) -> &[usize] {
        &self.x_shape
    }

    pub fn y_shape(&self) -> &[usize] {
        &self.y_shape
    }

    pub fn f_max(&self) -> usize {
        self.f_max
    }

    pub fn f_star(&self) -> usize {
        self.f_star
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cov_state(&self) -> &CovState {
        &self.cov
    }

    pub fn val_error(&self) -> &[f64] {
        &self.val_error
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn models(&self) -> &[LinearModel] {
        &self.models
    }

    pub fn model(&self, f: usize) -> Result<&LinearModel> {
        if f == 0 || f > self.f_max {
            return Err(arg_err!("latent dimension {f} outside 1..={}", self.f_max));
        }
        Ok(&self.models[f - 1])
    }

    /// The model chosen by Recursive-Validation.
    pub fn selected(&self) -> &LinearModel {
        &self.models[self.f_star - 1]
    }

    pub fn projectors(&self) -> &[Vec<Vec<f64>>] {
        &self.projectors
    }

    /// Prediction with `f` factors (default: the validated `f*`).
    pub fn predict(&self, x: &Tensor, f: Option<usize>) -> Result<Tensor> {
        self.check_x(x)?;
        self.model(f.unwrap_or(self.f_star))?.apply(x)
    }

    fn check_x(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.x_shape.as_slice() {
            return Err(arg_err!("input shape {:?}, expected {:?}", x.shape(), self.x_shape));
        }
        Ok(())
    }

    fn check_block(&self, xs: &[Tensor], ys: &[Tensor]) -> Result<()> {
        if xs.len() != ys.len() {
            return Err(arg_err!("block has {} inputs but {} outputs", xs.len(), ys.len()));
        }
        for (x, y) in xs.iter().zip(ys) {
            self.check_x(x)?;
            if y.shape() != self.y_shape.as_slice() {
                return Err(arg_err!("output shape {:?}, expected {:?}", y.shape(), self.y_shape));
            }
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Data("non-finite value in training block".into()));
            }
        }
        Ok(())
    }

    /// Recursive-Validation: scores the current models on a new block and
    /// returns the updated `f*`. Must run before [`NplsModelSet::update`]
    /// consumes the same block.
    pub fn rv_select(&mut self, xs: &[Tensor], ys: &[Tensor]) -> Result<usize> {
        if xs.is_empty() {
            return Ok(self.f_star);
        }
        self.check_block(xs, ys)?;
        let q = ys[0].len() as f64;
        let n = xs.len() as f64;
        let mut errors = Vec::with_capacity(self.f_max);
        for model in &self.models {
            let mut sse = 0.0;
            for (x, y) in xs.iter().zip(ys) {
                let pred = model.apply(x)?;
                sse += pred.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            errors.push(sse / (n * q));
        }
        for (acc, e) in self.val_error.iter_mut().zip(&errors) {
            *acc = self.lambda * *acc + e;
        }
        self.f_star = argmin_first(&self.val_error) + 1;
        Ok(self.f_star)
    }

    /// Folds a block into the covariance state and re-extracts all F models.
    ///
    /// A block with non-finite values is rejected and leaves the model
    /// untouched.
    pub fn update(&mut self, xs: &[Tensor], ys: &[Tensor]) -> Result<()> {
        if xs.is_empty() {
            return Ok(());
        }
        self.check_block(xs, ys)?;
        self.cov.decay(self.lambda);
        for (x, y) in xs.iter().zip(ys) {
            self.cov.accumulate(x.data(), y.data());
        }
        self.updates += 1;
        self.refit()
    }

    fn refit(&mut self) -> Result<()> {
        let fit = extract_factors(&self.cov, &self.x_shape, self.f_max)?;
        let q = self.cov.sum_y.len();
        let mean_x = self.cov.mean_x();
        let mean_y = self.cov.mean_y();
        let mut models = Vec::with_capacity(self.f_max);
        for coef in &fit.coefficients {
            // coef is P x Q; the tensor layout is output-major
            let p = coef.nrows();
            let mut beta = Vec::with_capacity(p * q);
            for j in 0..q {
                beta.extend(coef.column(j).iter());
            }
            let bias: Vec<f64> = (0..q)
                .map(|j| mean_y[j] - coef.column(j).iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>())
                .collect();
            models.push(LinearModel {
                beta: Tensor::new(self.models[0].beta.shape().to_vec(), beta)?,
                bias: Tensor::new(self.y_shape.clone(), bias)?,
            });
        }
        self.models = models;
        self.projectors = fit.projectors;
        Ok(())
    }

    /// Appends one zero-initialized output component to an order-1 output
    /// (a new class for a discriminative model).
    pub fn extend_output(&mut self) -> Result<()> {
        if self.y_shape.len() != 1 {
            return Err(arg_err!("only order-1 outputs can be extended"));
        }
        let q = self.y_shape[0];
        let p = self.cov.sum_x.len();
        self.y_shape[0] = q + 1;
        self.cov.sum_y.push(0.0);
        let mut xy = Vec::with_capacity(p * (q + 1));
        for row in self.cov.sum_xy.chunks(q) {
            xy.extend_from_slice(row);
            xy.push(0.0);
        }
        self.cov.sum_xy = xy;
        let beta_shape: Vec<usize> = self.y_shape.iter().chain(&self.x_shape).copied().collect();
        for m in &mut self.models {
            let mut beta = std::mem::replace(&mut m.beta, Tensor::zeros(&[1])?).into_data();
            beta.extend(std::iter::repeat_n(0.0, p));
            m.beta = Tensor::new(beta_shape.clone(), beta)?;
            let mut bias = std::mem::replace(&mut m.bias, Tensor::zeros(&[1])?).into_data();
            bias.push(0.0);
            m.bias = Tensor::vector(bias)?;
        }
        Ok(())
    }
}

pub(crate) fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in v.iter().enumerate() {
        if e < v[best] {
            best = i;
        }
    }
    best
}

struct FactorFit {
    /// Cumulative `P x Q` coefficient matrices for f = 1..F_max.
    coefficients: Vec<DMatrix<f64>>,
    projectors: Vec<Vec<Vec<f64>>>,
}

fn extract_factors(cov: &CovState, x_shape: &[usize], f_max: usize) -> Result<FactorFit> {
    let p = cov.sum_x.len();
    let q = cov.sum_y.len();
    let (mut xx, mut xy) = cov.centered();
    let xy_scale = xy.norm();
    let xx_scale = xx.trace().abs();

    let mut w_cols: Vec<DVector<f64>> = Vec::new();
    let mut p_cols: Vec<DVector<f64>> = Vec::new();
    let mut c_cols: Vec<DVector<f64>> = Vec::new();
    let mut coefficients = Vec::with_capacity(f_max);
    let mut projectors = Vec::new();

    for _ in 0..f_max {
        let exhausted = xy_scale == 0.0 || xy.norm() <= EXHAUSTED_TOL * xy_scale;
        let mut step = None;
        if !exhausted {
            let modes = rank_one_projectors(&xy, x_shape, q);
            let w = kron(&modes);
            let xxw = &xx * &w;
            let tt = w.dot(&xxw);
            if tt > EXHAUSTED_TOL * xx_scale && tt.is_finite() {
                step = Some((modes, w, xxw, tt));
            }
        }
        match step {
            Some((modes, w, xxw, tt)) => {
                let load = xxw / tt;
                let c = xy.transpose() * &w / tt;
                xx -= (&load * load.transpose()) * tt;
                xy -= (&load * c.transpose()) * tt;
                w_cols.push(w);
                p_cols.push(load);
                c_cols.push(c);
                projectors.push(modes);
                coefficients.push(cumulative_coefficients(&w_cols, &p_cols, &c_cols)?);
            }
            None => {
                let last = coefficients.last().cloned().unwrap_or_else(|| DMatrix::zeros(p, q));
                coefficients.push(last);
            }
        }
    }
    Ok(FactorFit { coefficients, projectors })
}

fn cumulative_coefficients(
    w: &[DVector<f64>],
    p: &[DVector<f64>],
    c: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let w = DMatrix::from_columns(w);
    let p = DMatrix::from_columns(p);
    let c = DMatrix::from_columns(c);
    let ptw = p.transpose() * &w;
    // R = W (P^T W)^-1, solved as (P^T W)^T R^T = W^T
    let rt = ptw
        .transpose()
        .lu()
        .solve(&w.transpose())
        .ok_or_else(|| Error::Numeric("singular P^T W during factor extraction".into()))?;
    Ok(rt.transpose() * c.transpose())
}

/// Row-major Kronecker product of per-mode vectors.
fn kron(modes: &[Vec<f64>]) -> DVector<f64> {
    let mut out = vec![1.0];
    for v in modes {
        out = out.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    }
    DVector::from_vec(out)
}

/// Dominant rank-1 multiway projectors of the cross-covariance `xy`
/// (`P x Q`, with `P = prod(x_shape)`), one unit vector per input mode.
fn rank_one_projectors(xy: &DMatrix<f64>, x_shape: &[usize], q: usize) -> Vec<Vec<f64>> {
    let m = x_shape.len();
    let p = xy.nrows();
    // Z as a flat row-major tensor x_shape ++ [q]
    let z: Vec<f64> = (0..p).flat_map(|i| (0..q).map(move |j| (i, j))).map(|(i, j)| xy[(i, j)]).collect();
    let mut strides = vec![1usize; m];
    for k in (0..m.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * x_shape[k + 1];
    }
    let index = |flat: usize, k: usize| (flat / strides[k]) % x_shape[k];

    let mut w: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            // leading left singular direction of the mode-k unfolding
            let mut gram = DMatrix::<f64>::zeros(x_shape[k], x_shape[k]);
            let mut fibers = vec![vec![0.0; x_shape[k]]; p / x_shape[k] * q];
            let mut fill = vec![0usize; x_shape[k]];
            for (flat_in, row) in z.chunks(q).enumerate() {
                let i = index(flat_in, k);
                for (j, v) in row.iter().enumerate() {
                    fibers[fill[i] * q + j][i] = *v;
                }
                fill[i] += 1;
            }
            for f in &fibers {
                for a in 0..x_shape[k] {
                    for b in 0..x_shape[k] {
                        gram[(a, b)] += f[a] * f[b];
                    }
                }
            }
            leading_unit_vector(gram)
        })
        .collect();

    if m == 1 {
        return w;
    }
    for _ in 0..POWER_MAX_ITER {
        let mut delta: f64 = 0.0;
        for k in 0..m {
            // contract Z with w_j for every input mode j != k
            let mut mk = DMatrix::<f64>::zeros(x_shape[k], q);
            for (flat_in, row) in z.chunks(q).enumerate() {
                let mut coef: f64 = 1.0;
                for (j, wj) in w.iter().enumerate() {
                    if j != k {
                        coef *= wj[index(flat_in, j)];
                    }
                }
                if coef == 0.0 {
                    continue;
                }
                let i = index(flat_in, k);
                for (jq, v) in row.iter().enumerate() {
                    mk[(i, jq)] += coef * v;
                }
            }
            let next = leading_unit_vector(&mk * mk.transpose());
            let change = next.iter().zip(&w[k]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            delta = delta.max(change);
            w[k] = next;
        }
        if delta < POWER_TOL {
            break;
        }
    }
    w
}

/// Unit eigenvector of the largest eigenvalue of a PSD Gram matrix, signed so
/// its largest-magnitude entry is positive. Falls back to `e_1` when the
/// matrix carries no energy.
fn leading_unit_vector(gram: DMatrix<f64>) -> Vec<f64> {
    let n = gram.nrows();
    let mut fallback = vec![0.0; n];
    fallback[0] = 1.0;
    if n == 1 {
        return fallback;
    }
    if gram.iter().all(|v| *v == 0.0) {
        return fallback;
    }
    let eig = gram.symmetric_eigen();
    let best = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > eig.eigenvalues[b] { i } else { b });
    let mut v: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return fallback;
    }
    let pivot = v.iter().enumerate().fold(0, |b, (i, a)| if a.abs() > v[b].abs() { i } else { b });
    let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
    for a in &mut v {
        *a *= sign / norm;
    }
    v
}
