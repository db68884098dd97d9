//! Dense feed-forward networks with manual reverse-mode gradients, and the
//! Adam optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient component")]
    NonFiniteGradient,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rectifier hidden layers, identity output. Weights are stored `in × out`
/// so a batch `x` (rows = samples) maps to `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Intermediate values kept by `forward_batch` for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// Parameter-shaped gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl Mlp {
    /// Fan-in scaled uniform initialization; the last layer is further
    /// multiplied by `final_scale`.
    pub fn new<R: Rng>(sizes: &[usize], final_scale: f64, rng: &mut R) -> Result<Self, ApproxError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ApproxError::DimensionMismatch { expected: 2, got: sizes.len() });
        }
        let n = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (l, pair) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let scale = if l + 1 == n { final_scale } else { 1.0 };
            weights.push(Array2::from_shape_fn((pair[0], pair[1]), |_| rng.random_range(-bound..bound) * scale));
            biases.push(Array1::from_shape_fn(pair[1], |_| rng.random_range(-bound..bound) * scale));
        }
        Ok(Self { weights, biases })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self, ApproxError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(ApproxError::DimensionMismatch { expected: weights.len(), got: biases.len() });
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(ApproxError::DimensionMismatch { expected: w.ncols(), got: b.len() });
            }
            if l > 0 && weights[l - 1].ncols() != w.nrows() {
                return Err(ApproxError::DimensionMismatch { expected: weights[l - 1].ncols(), got: w.nrows() });
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].nrows()];
        s.extend(self.weights.iter().map(|w| w.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }

    /// Single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ApproxError> {
        if input.len() != self.input_dim() {
            return Err(ApproxError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.predict(x).into_raw_vec_and_offset().0)
    }

    /// Batch forward pass without a tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.weights.len() - 1;
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.dot(w) + b;
            inputs.push(h);
            if l < last {
                h = z.mapv(|v| v.max(0.0));
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, Tape { inputs, pre })
    }

    /// Reverse pass: given dL/d(output) for the taped batch, returns the
    /// parameter gradients and dL/d(input).
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> (MlpGrads, Array2<f64>) {
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut g = grad_out.to_owned();
        for l in (0..n).rev() {
            gw.push(tape.inputs[l].t().dot(&g));
            gb.push(g.sum_axis(Axis(0)));
            g = g.dot(&self.weights[l].t());
            if l > 0 {
                g.zip_mut_with(&tape.pre[l - 1], |gi, &z| {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
        }
        gw.reverse();
        gb.reverse();
        (MlpGrads { weights: gw, biases: gb }, g)
    }

    /// Parameters in layer order, each layer's weights (row-major) then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ApproxError> {
        if flat.len() != self.param_count() {
            return Err(ApproxError::DimensionMismatch { expected: self.param_count(), got: flat.len() });
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = *it.next().unwrap());
            b.iter_mut().for_each(|x| *x = *it.next().unwrap());
        }
        Ok(())
    }

    /// `self ← tau·src + (1 − tau)·self`.
    pub fn polyak_from(&mut self, src: &Mlp, tau: f64) {
        for (a, b) in self.weights.iter_mut().zip(&src.weights) {
            a.zip_mut_with(b, |x, &y| *x = tau * y + (1.0 - tau) * *x);
        }
        for (a, b) in self.biases.iter_mut().zip(&src.biases) {
            a.zip_mut_with(b, |x, &y| *x = tau * y + (1.0 - tau) * *x);
        }
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), ApproxError> {
        let sizes = self.sizes();
        write_u64(out, sizes.len() as u64)?;
        for s in sizes {
            write_u64(out, s as u64)?;
        }
        write_f64s(out, &self.flat())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ApproxError> {
        let n = read_u64(input)? as usize;
        if !(2..=64).contains(&n) {
            return Err(ApproxError::BadCheckpoint(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let s = read_u64(input)? as usize;
            if s == 0 || s > 1 << 20 {
                return Err(ApproxError::BadCheckpoint(format!("implausible layer size {s}")));
            }
            sizes.push(s);
        }
        let mut net = Self {
            weights: sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: sizes[1..].iter().map(|&s| Array1::zeros(s)).collect(),
        };
        let flat = read_f64s(input, net.param_count())?;
        net.set_flat(&flat)?;
        if !net.is_finite() {
            return Err(ApproxError::BadCheckpoint("non-finite parameters".into()));
        }
        Ok(net)
    }
}

/// Adam with bias correction. Moments are kept flat in the parameter order
/// of `Mlp::flat`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn for_net(lr: f64, net: &Mlp) -> Self {
        Self::new(lr, net.param_count())
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Updates a flat parameter slice in place.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), ApproxError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ApproxError::DimensionMismatch { expected: self.m.len(), got: grads.len() });
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(ApproxError::NonFiniteGradient);
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        for i in 0..params.len() {
            params[i] -= self.moment_update(i, grads[i], c1, c2);
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<(), ApproxError> {
        if self.m.len() != net.param_count() {
            return Err(ApproxError::DimensionMismatch { expected: self.m.len(), got: net.param_count() });
        }
        if !grads.is_finite() {
            return Err(ApproxError::NonFiniteGradient);
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        let mut i = 0;
        for l in 0..net.weights.len() {
            for (p, g) in net.weights[l].iter_mut().zip(grads.weights[l].iter()) {
                *p -= self.moment_update(i, *g, c1, c2);
                i += 1;
            }
            for (p, g) in net.biases[l].iter_mut().zip(grads.biases[l].iter()) {
                *p -= self.moment_update(i, *g, c1, c2);
                i += 1;
            }
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn moment_update(&mut self, i: usize, g: f64, c1: f64, c2: f64) -> f64 {
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), ApproxError> {
        write_f64s(out, &[self.lr, self.beta1, self.beta2, self.eps])?;
        write_u64(out, self.t)?;
        write_u64(out, self.m.len() as u64)?;
        write_f64s(out, &self.m)?;
        write_f64s(out, &self.v)
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ApproxError> {
        let h = read_f64s(input, 4)?;
        let t = read_u64(input)?;
        let n = read_u64(input)? as usize;
        if n > 1 << 26 {
            return Err(ApproxError::BadCheckpoint(format!("implausible moment length {n}")));
        }
        let m = read_f64s(input, n)?;
        let v = read_f64s(input, n)?;
        Ok(Self { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], t, m, v })
    }
}

pub fn write_u64<W: Write>(out: &mut W, x: u64) -> std::io::Result<()> {
    out.write_all(&x.to_le_bytes())
}

pub fn read_u64<R: Read>(input: &mut R) -> Result<u64, ApproxError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64s<W: Write>(out: &mut W, xs: &[f64]) -> Result<(), ApproxError> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>, ApproxError> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn truncated(e: std::io::Error) -> ApproxError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ApproxError::BadCheckpoint("truncated file".into())
    } else {
        ApproxError::Io(e)
    }
}
