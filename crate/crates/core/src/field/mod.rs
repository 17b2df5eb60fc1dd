//! Coordinate network mapping (detector position, view direction, radius) to
//! expected counts in every energy window.
//!
//! The network is a plain fully connected chain: affine layers with rectified
//! hidden units and a linear output. It is generic over `f32` (training) and
//! `f64` (gradient checks).

mod loss;
mod optim;
mod train;

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CoordinateSample;
use crate::par;

pub use loss::{huber, huber_loss};
pub use optim::{Adam, PlateauScheduler};
pub use train::{
    prepare_targets, synthesize, train, train_with, PlateauConfig, TrainConfig, TrainReport, TrainingSet,
};

/// Scalar type the network can run in.
pub trait Real: ndarray::LinalgScalar + PartialOrd + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Input feature map applied to each coordinate sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoding {
    /// The five coordinates as they are.
    #[default]
    Raw,
    /// The raw coordinates followed by `sin`/`cos` of `2^k·π·u` and
    /// `2^k·π·v` for `k < n_frequencies`.
    Fourier { n_frequencies: usize },
}

impl Encoding {
    pub fn width(self) -> usize {
        match self {
            Encoding::Raw => 5,
            Encoding::Fourier { n_frequencies } => 5 + 4 * n_frequencies,
        }
    }

    pub fn encode<T: Real>(self, batch: &[CoordinateSample]) -> Array2<T> {
        let width = self.width();
        let mut out = Array2::zeros((batch.len(), width));
        for (mut row, c) in out.rows_mut().into_iter().zip(batch) {
            let raw = c.to_array();
            for (k, &x) in raw.iter().enumerate() {
                row[k] = T::from_f64(x as f64);
            }
            if let Encoding::Fourier { n_frequencies } = self {
                let mut col = 5;
                for f in 0..n_frequencies {
                    let w = std::f64::consts::PI * (1u64 << f) as f64;
                    for x in [c.u as f64, c.v as f64] {
                        let (s, co) = (w * x).sin_cos();
                        row[col] = T::from_f64(s);
                        row[col + 1] = T::from_f64(co);
                        col += 2;
                    }
                }
            }
        }
        out
    }
}

/// Weights are stored `fan_in × fan_out` so a batch is `X · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel<T: Real = f32> {
    pub encoding: Encoding,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Layer inputs kept from the forward pass for differentiation.
/// `inputs[0]` is the encoded batch, `inputs[l]` the rectified output of
/// hidden layer `l - 1`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    pub inputs: Vec<Array2<T>>,
    pub output: Array2<T>,
}

/// Rows per independently differentiated chunk of a mini-batch.
const ROW_CHUNK: usize = 2048;

impl<T: Real> FieldModel<T> {
    /// Random network with `hidden` layer widths and `n_out` linear outputs.
    /// Weights are uniform with variance `2 / fan_in`, biases zero.
    pub fn new(encoding: Encoding, hidden: &[usize], n_out: usize, seed: u64) -> Result<Self> {
        let widths = Self::layout(encoding, hidden, n_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let limit = (6.0 / pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((pair[0], pair[1]), || {
                T::from_f64(rng.random_range(-limit..limit))
            }));
            biases.push(Array1::zeros(pair[1]));
        }
        Ok(FieldModel { encoding, weights, biases })
    }

    pub fn zeros(encoding: Encoding, hidden: &[usize], n_out: usize) -> Result<Self> {
        let widths = Self::layout(encoding, hidden, n_out)?;
        Ok(FieldModel {
            encoding,
            weights: widths.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: widths[1..].iter().map(|&w| Array1::zeros(w)).collect(),
        })
    }

    fn layout(encoding: Encoding, hidden: &[usize], n_out: usize) -> Result<Vec<usize>> {
        if n_out == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut widths = vec![encoding.width()];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        Ok(widths)
    }

    /// Rebuild a model from a flat parameter vector in [`Self::flat_params`] order.
    pub fn from_flat(encoding: Encoding, widths: &[usize], params: &[T]) -> Result<Self> {
        if widths.len() < 2 || widths[0] != encoding.width() {
            return Err(Error::invalid(format!("layer widths {widths:?} do not fit encoding {encoding:?}")));
        }
        let mut model = Self::zeros(encoding, &widths[1..widths.len() - 1], widths[widths.len() - 1])?;
        if params.len() != model.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                model.n_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for t in model.tensors_mut() {
            t.copy_from_slice(&params[at..at + t.len()]);
            at += t.len();
        }
        Ok(model)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].nrows()];
        w.extend(self.weights.iter().map(|m| m.ncols()));
        w
    }

    pub fn n_out(&self) -> usize {
        self.biases.last().map_or(0, |b| b.len())
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter tensors as slices: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn cast<U: Real>(&self) -> FieldModel<U> {
        let conv = |x: &T| U::from_f64(x.to_f64());
        FieldModel {
            encoding: self.encoding,
            weights: self.weights.iter().map(|w| w.map(conv)).collect(),
            biases: self.biases.iter().map(|b| b.map(conv)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = self.tensors().iter().all(|t| t.iter().all(|x| x.to_f64().is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::numeric("network parameters are not finite"))
        }
    }

    /// Predicted counts, one row per sample and one column per window.
    pub fn forward(&self, batch: &[CoordinateSample]) -> Result<Array2<T>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.check_finite()?;
        let x = self.encoding.encode::<T>(batch);
        let chunks = x.nrows().div_ceil(ROW_CHUNK);
        let parts = par::map_collect(chunks, |c| {
            let rows = c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(x.nrows());
            self.forward_encoded(x.slice(s![rows, ..]))
        });
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
    }

    pub fn forward_encoded(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut a = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = a.dot(w) + b;
            if l < last {
                a.mapv_inplace(relu);
            }
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> ForwardCache<T> {
        let mut inputs = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = inputs[l].dot(w) + b;
            if l < last {
                z.mapv_inplace(relu);
                inputs.push(z);
            } else {
                return ForwardCache { inputs, output: z };
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// network output (`batch × n_out`).
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: ArrayView2<T>) -> Result<Gradients<T>> {
        if grad_out.dim() != cache.output.dim() {
            return Err(Error::invalid(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_out.dim(),
                cache.output.dim()
            )));
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = grad_out.to_owned();
        for l in (0..n).rev() {
            let input = &cache.inputs[l];
            gw.push(input.t().dot(&delta).as_standard_layout().into_owned());
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                ndarray::Zip::from(&mut prev).and(input).for_each(|d, &a| {
                    if !(a > T::zero()) {
                        *d = T::zero();
                    }
                });
                delta = prev;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients { weights: gw, biases: gb })
    }

    /// Mean Huber loss over `batch × n_out` elements and its parameter
    /// gradient. Rows are differentiated in fixed chunks whose gradients are
    /// summed in order, so the result does not depend on the thread count.
    pub fn loss_and_grad(&self, x: ArrayView2<T>, target: ArrayView2<T>, delta: f64) -> Result<(f64, Gradients<T>)> {
        if x.nrows() != target.nrows() || target.ncols() != self.n_out() {
            return Err(Error::invalid("batch and target shapes disagree"));
        }
        let n_el = target.len();
        if n_el == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let chunks = x.nrows().div_ceil(ROW_CHUNK);
        let parts = par::map_collect(chunks, |c| -> Result<(f64, Gradients<T>)> {
            let rows = c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(x.nrows());
            let cache = self.forward_cached(x.slice(s![rows.clone(), ..]));
            let (loss_sum, g) = loss::huber_sum_grad(cache.output.view(), target.slice(s![rows, ..]), delta, n_el)?;
            Ok((loss_sum, self.backward(&cache, g.view())?))
        });
        let mut total = 0.0;
        let mut acc: Option<Gradients<T>> = None;
        for part in parts {
            let (l, g) = part?;
            total += l;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    a.add_assign(&g);
                    a
                }
            });
        }
        Ok((total / n_el as f64, acc.expect("at least one chunk")))
    }
}

impl<T: Real> Gradients<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, |x, &y| *x = *x + y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, |x, &y| *x = *x + y);
        }
    }
}

fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}
