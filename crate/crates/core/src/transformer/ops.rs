//! Dense layers with hand-written forward/backward passes.
//!
//! Everything operates on (tokens × dim) matrices in f64. Backward methods
//! accumulate into mirror gradient structs and return the input gradient.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Borrowed view of a named parameter tensor.
pub enum TensorRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

pub enum TensorMut<'a> {
    V(&'a mut Array1<f64>),
    M(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(v) => vec![v.len()],
            TensorRef::M(m) => m.shape().to_vec(),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            TensorRef::V(v) => Box::new(v.iter()),
            TensorRef::M(m) => Box::new(m.iter()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::V(v) => v.len(),
            TensorRef::M(m) => m.len(),
        }
    }
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::V(v) => v.len(),
            TensorMut::M(m) => m.len(),
        }
    }

    pub fn apply_flat(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        match self {
            TensorMut::V(v) => v.iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
            TensorMut::M(m) => m.iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
        }
    }
}

/// Anything exposing an ordered set of named parameter tensors. Parameter
/// structs and their gradient mirrors share names, so optimizers can zip
/// them.
pub trait HasTensors {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)>;
    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)>;
}

/// Truncated normal draw: resample outside ±2σ.
pub fn trunc_normal(rng: &mut ChaCha20Rng, std: f64) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, std: f64, rng: &mut ChaCha20Rng) -> Self {
        let mut w = Array2::zeros((in_dim, out_dim));
        w.iter_mut().for_each(|v| *v = trunc_normal(rng, std));
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Array2::zeros((in_dim, out_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates dW, db into `grad`; returns dx.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut y = Array2::zeros(x.raw_dim());
        for (xr, mut yr) in x.outer_iter().zip(y.outer_iter_mut()) {
            let mean = xr.sum() / d;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in xr.iter().enumerate() {
                yr[j] = (v - mean) * inv * self.gamma[j] + self.beta[j];
            }
        }
        y
    }

    /// Accumulates dγ, dβ into `grad`; returns dx.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut dx = Array2::zeros(x.raw_dim());
        for ((xr, dyr), mut dxr) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut()) {
            let mean = xr.sum() / d;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for j in 0..x.ncols() {
                let xhat = (xr[j] - mean) * inv;
                let g = dyr[j] * self.gamma[j];
                grad.gamma[j] += dyr[j] * xhat;
                grad.beta[j] += dyr[j];
                sum_g += g;
                sum_gx += g * xhat;
            }
            for j in 0..x.ncols() {
                let xhat = (xr[j] - mean) * inv;
                let g = dyr[j] * self.gamma[j];
                dxr[j] = inv * (g - sum_g / d - xhat * sum_gx / d);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row-wise softmax: dx = p ⊙ (dy − Σ_j dy_j·p_j).
pub fn softmax_rows_backward(p: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(p.raw_dim());
    for ((pr, dyr), mut dxr) in p.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut()) {
        let dot: f64 = pr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
        for j in 0..pr.len() {
            dxr[j] = pr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// Sinusoidal timestep embedding (sin/cos pairs over a geometric frequency
/// ladder).
pub fn timestep_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(rng: &mut rand_chacha::ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        let mut m = Array2::zeros((r, c));
        m.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = crate::rng::derive("ops-lin", 0, 0);
        let lin = Linear::init(5, 4, 0.5, &mut rng);
        let x = rand_mat(&mut rng, 3, 5);
        let up = rand_mat(&mut rng, 3, 4);

        let mut grad = Linear::zeros(5, 4);
        let dx = lin.backward(&x, &up, &mut grad);

        let loss = |lin: &Linear, x: &Array2<f64>| -> f64 {
            lin.forward(x).iter().zip(up.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..4 {
                let mut lp = lin.clone();
                let mut lm = lin.clone();
                lp.w[[i, j]] += h;
                lm.w[[i, j]] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!((grad.w[[i, j]] - fd).abs() < 1e-8);
            }
        }
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
                assert!((dx[[r, c]] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut rng = crate::rng::derive("ops-ln", 0, 0);
        let mut ln = LayerNorm::new(6);
        ln.gamma.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        ln.beta.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let x = rand_mat(&mut rng, 4, 6);
        let up = rand_mat(&mut rng, 4, 6);

        let mut grad = LayerNorm::zeros(6);
        let dx = ln.backward(&x, &up, &mut grad);

        let loss = |ln: &LayerNorm, x: &Array2<f64>| -> f64 {
            ln.forward(x).iter().zip(up.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let fd = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * h);
                assert!((dx[[r, c]] - fd).abs() < 1e-7, "{} vs {fd}", dx[[r, c]]);
            }
        }
        for j in 0..6 {
            let mut lp = ln.clone();
            let mut lm = ln.clone();
            lp.gamma[j] += h;
            lm.gamma[j] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((grad.gamma[j] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for x in [-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_normalize_and_backward() {
        let mut rng = crate::rng::derive("ops-sm", 0, 0);
        let x = rand_mat(&mut rng, 3, 5);
        let mut p = x.clone();
        softmax_rows(&mut p);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }

        let up = rand_mat(&mut rng, 3, 5);
        let dx = softmax_rows_backward(&p, &up);
        let loss = |x: &Array2<f64>| -> f64 {
            let mut p = x.clone();
            softmax_rows(&mut p);
            p.iter().zip(up.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((dx[[r, c]] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn timestep_embedding_range_and_shape() {
        let e = timestep_embedding(500.0, 64);
        assert_eq!(e.len(), 64);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // Distinct timesteps embed differently.
        let e2 = timestep_embedding(501.0, 64);
        assert!(e.iter().zip(e2.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
