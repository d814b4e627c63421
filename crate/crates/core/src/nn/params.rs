use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tensor names in storage order, shared by checkpoints and accounting.
pub const TENSOR_NAMES: [&str; 6] = [
    "gcn1.weight",
    "gcn1.bias",
    "gcn2.weight",
    "gcn2.bias",
    "classifier.weight",
    "classifier.bias",
];

/// Index of the first classifier tensor in [`TENSOR_NAMES`].
pub const CLASSIFIER_START: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let (d, h, c) = (self.input, self.hidden, self.classes);
        [
            vec![d, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, c],
            vec![c],
        ]
    }

    pub fn num_params(&self) -> usize {
        self.shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// A set of flat `f64` tensors that optimizers and aggregators can walk.
pub trait TensorSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TensorSet for Vec<f64> {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// Weights of the two GCN layers and the linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

impl ModelParams {
    pub fn filled(dims: ModelDims, value: f64) -> Self {
        let (d, h, c) = (dims.input, dims.hidden, dims.classes);
        ModelParams {
            w1: Array2::from_elem((d, h), value),
            b1: Array1::from_elem(h, value),
            w2: Array2::from_elem((h, h), value),
            b2: Array1::from_elem(h, value),
            wc: Array2::from_elem((h, c), value),
            bc: Array1::from_elem(c, value),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let (d, h, c) = (dims.input, dims.hidden, dims.classes);
        ModelParams {
            w1: layer(d, h),
            b1: Array1::zeros(h),
            w2: layer(h, h),
            b2: Array1::zeros(h),
            wc: layer(h, c),
            bc: Array1::zeros(c),
        }
    }

    /// Rebuilds parameters from flat tensors in [`TENSOR_NAMES`] order.
    pub fn from_tensors(dims: ModelDims, tensors: &[Vec<f64>]) -> Result<Self> {
        let mut p = Self::zeros(dims);
        if tensors.len() != 6 {
            return Err(Error::Format(format!(
                "expected 6 tensors, found {}",
                tensors.len()
            )));
        }
        for ((dst, src), name) in p.slices_mut().into_iter().zip(tensors).zip(TENSOR_NAMES) {
            if dst.len() != src.len() {
                return Err(Error::Format(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.nrows(),
            hidden: self.w1.ncols(),
            classes: self.bc.len(),
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.w1.dim() == other.w1.dim()
            && self.b1.dim() == other.b1.dim()
            && self.w2.dim() == other.w2.dim()
            && self.b2.dim() == other.b2.dim()
            && self.wc.dim() == other.wc.dim()
            && self.bc.dim() == other.bc.dim()
    }

    pub fn num_params(&self) -> usize {
        self.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn nonzero_count(&self) -> usize {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .filter(|&&x| x != 0.0)
            .count()
    }

    /// Element count of the first `CLASSIFIER_START` tensors.
    pub fn shared_len(&self) -> usize {
        self.slices()[..CLASSIFIER_START]
            .iter()
            .map(|s| s.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn zip_map(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> ModelParams {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (dst, src) in out.slices_mut().into_iter().zip(other.slices()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = f(*a, b);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelParams {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    pub fn hadamard(&self, other: &ModelParams) -> ModelParams {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.slices()
            .iter()
            .zip(other.slices())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
}

impl TensorSet for ModelParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.wc.as_slice().expect("standard layout"),
            self.bc.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.wc.as_slice_mut().expect("standard layout"),
            self.bc.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Client-private multiplicative mask, one scalar per parameter scalar.
///
/// When `classifier_masked` is false the classifier entries stay at one:
/// they are ignored by the forward pass, the L1 term and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    values: ModelParams,
    classifier_masked: bool,
}

impl MaskParams {
    pub fn ones(dims: ModelDims, classifier_masked: bool) -> Self {
        MaskParams {
            values: ModelParams::filled(dims, 1.0),
            classifier_masked,
        }
    }

    pub fn from_values(values: ModelParams, classifier_masked: bool) -> Self {
        MaskParams {
            values,
            classifier_masked,
        }
    }

    pub fn values(&self) -> &ModelParams {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut ModelParams {
        &mut self.values
    }

    pub fn classifier_masked(&self) -> bool {
        self.classifier_masked
    }

    /// Number of tensors, from the front, that the mask acts on.
    pub(crate) fn active_tensors(&self) -> usize {
        if self.classifier_masked {
            TENSOR_NAMES.len()
        } else {
            CLASSIFIER_START
        }
    }

    /// `params ⊙ mask` over the active tensors; other tensors pass through.
    pub fn apply(&self, params: &ModelParams) -> ModelParams {
        let mut out = params.clone();
        let active = self.active_tensors();
        for (dst, src) in out
            .slices_mut()
            .into_iter()
            .zip(self.values.slices())
            .take(active)
        {
            for (a, &m) in dst.iter_mut().zip(src) {
                *a *= m;
            }
        }
        out
    }

    /// `Σ |μ|` over the active tensors.
    pub fn l1(&self) -> f64 {
        self.values.slices()[..self.active_tensors()]
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x.abs())
            .sum()
    }
}
