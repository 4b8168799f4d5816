use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};

use super::{NnError, Scalar};
use crate::seed::EngineRng;

/// Weights (`out x in`) and biases (`out`) of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weights: Array2::zeros((out_dim, in_dim)), biases: Array1::zeros(out_dim) }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.weights.dim() == other.weights.dim() && self.biases.len() == other.biases.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.mapv(|v| U::from_f64(v.to_f64())),
            biases: self.biases.mapv(|v| U::from_f64(v.to_f64())),
        }
    }
}

/// Classifier head: `input -> hidden x N -> output`.
///
/// Equality compares parameters only.
#[derive(Debug, Clone)]
pub struct MlpModel<T = f32> {
    layers: Vec<LayerParams<T>>,
    /// Bumped on every optimizer step; forward caches remember it.
    version: u64,
}

impl<T: PartialEq> PartialEq for MlpModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<T: Scalar> MlpModel<T> {
    /// Builds a model from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<LayerParams<T>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::ZeroDim("layer count"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.out_dim() == 0 || l.in_dim() == 0 {
                return Err(NnError::ZeroDim("layer width"));
            }
            if l.biases.len() != l.out_dim() {
                return Err(NnError::ShapeMismatch(i));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(NnError::BrokenChain {
                    layer: i,
                    expected: l.in_dim(),
                    found: layers[i - 1].out_dim(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerParams<T>> {
        self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Width of the first hidden layer, or `None` for a purely linear model.
    pub fn hidden_dim(&self) -> Option<usize> {
        (self.layers.len() > 1).then(|| self.layers[0].out_dim())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().chain(l.biases.iter()).all(|v| v.to_f64().is_finite())
        })
    }

    pub fn cast<U: Scalar>(&self) -> MlpModel<U> {
        MlpModel { layers: self.layers.iter().map(LayerParams::cast).collect(), version: 0 }
    }
}

/// Glorot-uniform weights, zero biases, drawn from a generator seeded with
/// `seed`. Draws happen in `f64` so `f32` and `f64` models built from the
/// same seed agree up to rounding.
pub fn init_model<T: Scalar>(
    input_dim: usize,
    hidden_dim: usize,
    num_hidden_layers: usize,
    output_dim: usize,
    seed: u64,
) -> Result<MlpModel<T>, NnError> {
    if input_dim == 0 {
        return Err(NnError::ZeroDim("input_dim"));
    }
    if hidden_dim == 0 {
        return Err(NnError::ZeroDim("hidden_dim"));
    }
    if output_dim == 0 {
        return Err(NnError::ZeroDim("output_dim"));
    }
    let mut rng = EngineRng::seed_from_u64(seed);
    let mut widths = vec![input_dim];
    widths.extend(std::iter::repeat_n(hidden_dim, num_hidden_layers));
    widths.push(output_dim);

    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                T::from_f64(rng.random_range(-bound..bound))
            });
            LayerParams { weights, biases: Array1::zeros(fan_out) }
        })
        .collect();
    MlpModel::from_layers(layers)
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (post-dropout for hidden layers).
    inputs: Vec<Array2<T>>,
    /// Inverted-dropout masks per hidden layer (`None` when dropout was off).
    masks: Vec<Option<Array2<T>>>,
    model_version: u64,
    shapes: Vec<(usize, usize)>,
}

impl<T> ForwardCache<T> {
    pub fn dropout_masks(&self) -> &[Option<Array2<T>>] {
        &self.masks
    }
}

fn check_dropout(rate: f64) -> Result<(), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::BadDropout(rate));
    }
    Ok(())
}

/// Runs the network on a `rows x input_dim` batch and returns the logits.
///
/// Dropout is applied only when `training` is set and `dropout_rate > 0`;
/// kept activations are scaled by `1 / (1 - dropout_rate)`. In every other
/// case `rng` is not touched.
pub fn forward<T: Scalar>(
    model: &MlpModel<T>,
    batch: &Array2<T>,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Array2<T>, ForwardCache<T>), NnError> {
    check_dropout(dropout_rate)?;
    if batch.ncols() != model.input_dim() {
        return Err(NnError::DimMismatch { expected: model.input_dim(), found: batch.ncols() });
    }
    let apply_dropout = training && dropout_rate > 0.0;
    let keep_scale = T::from_f64(1.0 / (1.0 - dropout_rate));
    let last = model.layers.len() - 1;

    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut masks = Vec::with_capacity(last);
    let mut x = batch.to_owned();
    for (i, layer) in model.layers.iter().enumerate() {
        let mut z = x.dot(&layer.weights.t());
        z += &layer.biases;
        inputs.push(x);
        if i == last {
            x = z;
            break;
        }
        z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        if apply_dropout {
            let mask = Array2::from_shape_simple_fn(z.dim(), || {
                if rng.random::<f64>() < dropout_rate {
                    T::zero()
                } else {
                    keep_scale
                }
            });
            z *= &mask;
            masks.push(Some(mask));
        } else {
            masks.push(None);
        }
        x = z;
    }
    let cache = ForwardCache {
        inputs,
        masks,
        model_version: model.version,
        shapes: model.layers.iter().map(|l| l.weights.dim()).collect(),
    };
    Ok((x, cache))
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / batch_size`. Accumulates in `f64`
/// using a max-shifted log-sum-exp.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Array2<T>,
    labels: &[u16],
) -> Result<(f64, Array2<T>), NnError> {
    let (rows, classes) = logits.dim();
    if labels.len() != rows {
        return Err(NnError::LabelCount { labels: labels.len(), rows });
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    let mut grad = Array2::zeros((rows, classes));
    let mut total = 0.0f64;
    let inv_n = 1.0 / rows.max(1) as f64;
    let mut probs = vec![0.0f64; classes];
    for (r, (row, &label)) in logits.outer_iter().zip(labels).enumerate() {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(row.iter()) {
            *p = (v.to_f64() - max).exp();
            sum += *p;
        }
        let lse = max + sum.ln();
        total += lse - row[label as usize].to_f64();
        for (c, p) in probs.iter().enumerate() {
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            grad[[r, c]] = T::from_f64((p / sum - onehot) * inv_n);
        }
    }
    Ok((total * inv_n, grad))
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            layers: model.layers.iter().map(|l| LayerParams::zeros(l.out_dim(), l.in_dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|&v| v == T::zero()))
    }

    pub(crate) fn matches(&self, model: &MlpModel<T>) -> Result<(), NnError> {
        if self.layers.len() != model.layers.len() {
            return Err(NnError::ShapeMismatch(self.layers.len().min(model.layers.len())));
        }
        for (i, (g, p)) in self.layers.iter().zip(&model.layers).enumerate() {
            if !g.same_shape(p) {
                return Err(NnError::ShapeMismatch(i));
            }
        }
        Ok(())
    }
}

/// Backpropagates `dlogits` through the activations in `cache`.
pub fn backward<T: Scalar>(
    model: &MlpModel<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array2<T>,
) -> Result<Gradients<T>, NnError> {
    let shapes: Vec<_> = model.layers.iter().map(|l| l.weights.dim()).collect();
    if cache.model_version != model.version || cache.shapes != shapes {
        return Err(NnError::StaleCache);
    }
    let rows = cache.inputs[0].nrows();
    if dlogits.dim() != (rows, model.output_dim()) {
        return Err(NnError::DimMismatch { expected: model.output_dim(), found: dlogits.ncols() });
    }

    let mut grads = Vec::with_capacity(model.layers.len());
    let mut dz = dlogits.to_owned();
    for i in (0..model.layers.len()).rev() {
        let x = &cache.inputs[i];
        let dw = dz.t().dot(x);
        let db = dz.sum_axis(Axis(0));
        grads.push(LayerParams { weights: dw, biases: db });
        if i == 0 {
            break;
        }
        let mut dx = dz.dot(&model.layers[i].weights);
        // x = relu(z) * mask; dz = dx * mask * [x > 0]. Where the mask is
        // zero the product vanishes regardless of the relu branch.
        match &cache.masks[i - 1] {
            Some(mask) => Zip::from(&mut dx).and(x).and(mask).for_each(|d, &xv, &m| {
                *d = if xv > T::zero() { *d * m } else { T::zero() };
            }),
            None => Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            }),
        }
        dz = dx;
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Eval-mode argmax per row; ties go to the lowest label id.
pub fn predict<T: Scalar>(model: &MlpModel<T>, batch: &Array2<T>) -> Result<Vec<u16>, NnError> {
    // Eval mode never draws from the generator.
    let mut unused = EngineRng::seed_from_u64(0);
    let (logits, _) = forward(model, batch, 0.0, false, &mut unused)?;
    Ok(argmax_rows(&logits))
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<u16> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}
