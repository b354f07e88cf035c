//! Flat-buffer f64 kernels: matrix products, softmax, layer norm, GELU,
//! affine layers. Row-major layout throughout; every forward has a matching
//! backward that consumes the values the forward saved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// C = A (m×k) · B (k×n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// C += A (m×k) · B (k×n).
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// C += Aᵀ · B where A is stored k×m and used transposed.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a_row[i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

/// C += A (m×k) · Bᵀ where B is stored n×k.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// In-place stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
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

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_sum).collect()
}

/// Backward through `y = softmax(x)` for one row: dx = y ⊙ (dy − ⟨dy, y⟩).
pub fn softmax_backward_row(dx: &mut [f64], y: &[f64], dy: &[f64]) {
    let inner = dot(dy, y);
    for ((dxi, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *dxi = yi * (dyi - inner);
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Affine layer
// ---------------------------------------------------------------------------

/// Dense affine map; `w` is stored fan_in × fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: vec![0.0; fan_in * fan_out],
            b: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }

    pub fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.w.iter_mut() {
            *w = gauss(rng) * std;
        }
        layer
    }

    /// y (rows×fan_out) = x (rows×fan_in) · W + b.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.fan_out];
        for r in 0..rows {
            y[r * self.fan_out..(r + 1) * self.fan_out].copy_from_slice(&self.b);
        }
        matmul_acc(&mut y, x, &self.w, rows, self.fan_in, self.fan_out);
        y
    }

    /// Accumulates dW/db into `grad` and returns dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        debug_assert_eq!(grad.fan_in, self.fan_in);
        debug_assert_eq!(grad.fan_out, self.fan_out);
        matmul_tn_acc(&mut grad.w, x, dy, self.fan_in, rows, self.fan_out);
        for r in 0..rows {
            axpy(&mut grad.b, 1.0, &dy[r * self.fan_out..(r + 1) * self.fan_out]);
        }
        let mut dx = vec![0.0; rows * self.fan_in];
        matmul_nt_acc(&mut dx, dy, &self.w, rows, self.fan_out, self.fan_in);
        dx
    }
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-row normalization statistics saved for backward.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.gain.len();
        debug_assert_eq!(x.len(), rows * d);
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - mean) * is;
                xhat[r * d + i] = xh;
                y[r * d + i] = self.gain[i] * xh + self.bias[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &[f64],
        rows: usize,
        grad: &mut LayerNorm,
    ) -> Vec<f64> {
        let d = self.gain.len();
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            let xhat = &cache.xhat[r * d..(r + 1) * d];
            let dy_row = &dy[r * d..(r + 1) * d];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for i in 0..d {
                let dxh = dy_row[i] * self.gain[i];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat[i];
                grad.gain[i] += dy_row[i] * xhat[i];
                grad.bias[i] += dy_row[i];
            }
            let inv_d = 1.0 / d as f64;
            let is = cache.inv_std[r];
            for i in 0..d {
                let dxh = dy_row[i] * self.gain[i];
                dx[r * d + i] =
                    is * (dxh - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dropout and RNG helpers
// ---------------------------------------------------------------------------

/// Standard normal via Box-Muller.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Inverted-dropout multiplier mask: 0 with probability p, else 1/(1-p).
pub fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &mut [f64], mask: &[f64]) {
    for (v, m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}
