//! Minimal dense network on flat parameter vectors.
//!
//! A model is a stack of fully connected layers with ReLU between them
//! and softmax on the output. All parameters live in one flat vector
//! (per layer: row-major `in_dim x out_dim` weights, then `out_dim`
//! biases) so that server-side updates, gradient stacking, and
//! checkpointing operate on plain slices.

use crate::error::{Error, Result};
use crate::linalg;
use crate::{cast, Float};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Probabilities below this value are clamped inside the cross-entropy
/// logarithm. Nothing else in the loss path is clamped.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Flat gradient (or parameter delta), same layout and length as the
/// model's parameter vector.
pub type GradVec<F> = Vec<F>;

/// One dense layer's dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Builds the layer stack for `input_dim -> hidden... -> n_classes`.
pub fn layer_shapes(input_dim: usize, hidden: &[usize], n_classes: usize) -> Vec<LayerShape> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(n_classes);
    dims.windows(2)
        .map(|w| LayerShape { in_dim: w[0], out_dim: w[1] })
        .collect()
}

/// Network parameters: a flat vector plus the layer shapes that give it
/// structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    flat: Vec<F>,
    shapes: Vec<LayerShape>,
}

impl<F: Float> ModelParams<F> {
    /// Wraps an existing flat vector. The shapes must chain (each layer's
    /// input is the previous layer's output), the vector length must
    /// match, and every entry must be finite.
    pub fn new(shapes: Vec<LayerShape>, flat: Vec<F>) -> Result<Self> {
        validate_shapes(&shapes)?;
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if flat.len() != expected {
            return Err(Error::Config(format!(
                "parameter vector has length {}, shapes require {expected}",
                flat.len()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Self { flat, shapes })
    }

    /// All-zero parameters.
    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self> {
        validate_shapes(&shapes)?;
        let n: usize = shapes.iter().map(LayerShape::param_count).sum();
        Ok(Self { flat: vec![F::zero(); n], shapes })
    }

    /// Glorot-uniform weights (`+-sqrt(6 / (in + out))` per layer), zero
    /// biases, sampled layer by layer in index order from `rng`.
    pub fn init(shapes: Vec<LayerShape>, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_shapes(&shapes)?;
        let n: usize = shapes.iter().map(LayerShape::param_count).sum();
        let mut flat = Vec::with_capacity(n);
        for s in &shapes {
            let limit = cast::<F>((6.0 / (s.in_dim + s.out_dim) as f64).sqrt());
            let dist = Uniform::new(-limit, limit)
                .map_err(|e| Error::Config(format!("weight init bounds: {e}")))?;
            for _ in 0..s.in_dim * s.out_dim {
                flat.push(dist.sample(rng));
            }
            flat.extend(std::iter::repeat_n(F::zero(), s.out_dim));
        }
        Ok(Self { flat, shapes })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Total parameter count.
    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().unwrap().out_dim
    }

    pub fn flat(&self) -> &[F] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [F] {
        &mut self.flat
    }

    /// Offset of layer `l`'s weights in the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.shapes[..l].iter().map(LayerShape::param_count).sum()
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[F], &[F]) {
        let s = self.shapes[l];
        let off = self.layer_offset(l);
        let w_end = off + s.in_dim * s.out_dim;
        (&self.flat[off..w_end], &self.flat[w_end..w_end + s.out_dim])
    }

    /// `self += c * delta`, in place.
    pub fn add_scaled(&mut self, c: F, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.flat.len());
        for (p, &d) in self.flat.iter_mut().zip(delta) {
            *p = *p + c * d;
        }
    }
}

fn validate_shapes(shapes: &[LayerShape]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Config("model needs at least one layer".into()));
    }
    for w in shapes.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Config(format!(
                "layer output {} does not chain into next layer input {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    if shapes.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
        return Err(Error::Config("zero-sized layer".into()));
    }
    Ok(())
}

/// Row-major matrix of per-sample values (activations, probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Float> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Index of the row's maximum, first occurrence on ties.
    pub fn argmax_row(&self, i: usize) -> usize {
        let r = self.row(i);
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        best
    }
}

/// A labeled feature matrix. Labels index classes; their range is
/// validated where the class count is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    features: Vec<F>,
    rows: usize,
    dim: usize,
    labels: Vec<usize>,
}

impl<F: Float> Batch<F> {
    pub fn new(features: Vec<F>, rows: usize, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if features.len() != rows * dim {
            return Err(Error::Config(format!(
                "feature buffer has {} values, expected {rows} x {dim}",
                features.len()
            )));
        }
        if labels.len() != rows {
            return Err(Error::Config(format!(
                "label count {} does not match row count {rows}",
                labels.len()
            )));
        }
        Ok(Self { features, rows, dim, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self { features: Vec::new(), rows: 0, dim, labels: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[F] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[F] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn set_label(&mut self, i: usize, label: usize) {
        self.labels[i] = label;
    }

    pub fn push_row(&mut self, features: &[F], label: usize) {
        assert_eq!(features.len(), self.dim, "row width must match batch dim");
        self.features.extend_from_slice(features);
        self.labels.push(label);
        self.rows += 1;
    }

    /// Gathers the given rows into a new batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch<F> {
        let mut out = Batch::empty(self.dim);
        for &i in indices {
            out.push_row(self.feature_row(i), self.labels[i]);
        }
        out
    }
}

/// Training loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Standard cross-entropy on the labeled class.
    Ce,
    /// Unlearning cross-entropy `-log(1 - p_label / 2)`: bounded in
    /// `[0, log 2]` with derivative magnitude at most one, so driving
    /// the labeled class's probability down cannot blow up.
    Uce,
}

/// Softmax probabilities for every row of `data`.
pub fn forward<F: Float>(model: &ModelParams<F>, data: &Batch<F>) -> Result<Mat<F>> {
    let mut acts = forward_cached(model, data)?;
    Ok(acts.post.pop().unwrap())
}

struct ForwardCache<F> {
    /// Pre-activation values per layer.
    pre: Vec<Mat<F>>,
    /// Post-activation values per layer; the last entry holds softmax
    /// probabilities.
    post: Vec<Mat<F>>,
}

fn forward_cached<F: Float>(model: &ModelParams<F>, data: &Batch<F>) -> Result<ForwardCache<F>> {
    if data.dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "batch feature dim {} does not match model input dim {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let n_layers = model.shapes().len();
    let rows = data.rows();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Mat<F>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let s = model.shapes()[l];
        let (w, b) = model.layer(l);
        let mut z = Mat::zeros(rows, s.out_dim);
        for r in 0..rows {
            let a_row: &[F] = if l == 0 { data.feature_row(r) } else { post[l - 1].row(r) };
            let z_row = z.row_mut(r);
            z_row.copy_from_slice(b);
            for (i, &a) in a_row.iter().enumerate() {
                let w_row = &w[i * s.out_dim..(i + 1) * s.out_dim];
                for (zj, &wij) in z_row.iter_mut().zip(w_row) {
                    *zj = *zj + a * wij;
                }
            }
        }
        let a = if l + 1 == n_layers { softmax_rows(&z) } else { relu(&z) };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardCache { pre, post })
}

fn relu<F: Float>(z: &Mat<F>) -> Mat<F> {
    let data = z.data.iter().map(|&v| v.max(F::zero())).collect();
    Mat { rows: z.rows, cols: z.cols, data }
}

fn softmax_rows<F: Float>(z: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(z.rows, z.cols);
    for r in 0..z.rows {
        let zr = z.row(r);
        let max = zr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let o = out.row_mut(r);
        let mut sum = F::zero();
        for (oj, &zj) in o.iter_mut().zip(zr) {
            *oj = (zj - max).exp();
            sum = sum + *oj;
        }
        for oj in o.iter_mut() {
            *oj = *oj / sum;
        }
    }
    out
}

/// Mean cross-entropy `-log(p_label)` over the batch, with the
/// probability clamped at [`CE_PROB_FLOOR`] inside the logarithm.
pub fn ce_loss<F: Float>(probs: &Mat<F>, labels: &[usize]) -> F {
    assert_eq!(probs.rows, labels.len());
    let floor = cast::<F>(CE_PROB_FLOOR);
    let mut acc = F::zero();
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < probs.cols, "label {y} out of range for {} classes", probs.cols);
        acc = acc - probs.row(r)[y].max(floor).ln();
    }
    acc / cast::<F>(probs.rows as f64)
}

/// Mean unlearning cross-entropy `-log(1 - p_label / 2)` over the batch.
/// Bounded by construction, so no clamp is applied.
pub fn uce_loss<F: Float>(probs: &Mat<F>, labels: &[usize]) -> F {
    assert_eq!(probs.rows, labels.len());
    let half = cast::<F>(0.5);
    let mut acc = F::zero();
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < probs.cols, "label {y} out of range for {} classes", probs.cols);
        acc = acc - (F::one() - half * probs.row(r)[y]).ln();
    }
    acc / cast::<F>(probs.rows as f64)
}

/// Loss value for a model on a batch.
pub fn batch_loss<F: Float>(model: &ModelParams<F>, data: &Batch<F>, loss: Loss) -> Result<F> {
    let probs = forward(model, data)?;
    Ok(match loss {
        Loss::Ce => ce_loss(&probs, data.labels()),
        Loss::Uce => uce_loss(&probs, data.labels()),
    })
}

/// Gradient of the mean batch loss with respect to every parameter,
/// flat, in the model's layout.
pub fn backward<F: Float>(model: &ModelParams<F>, data: &Batch<F>, loss: Loss) -> Result<GradVec<F>> {
    let cache = forward_cached(model, data)?;
    let n_layers = model.shapes().len();
    let rows = data.rows();
    if rows == 0 {
        return Err(Error::Config("cannot take a gradient on an empty batch".into()));
    }
    let probs = &cache.post[n_layers - 1];
    let inv_b = F::one() / cast::<F>(rows as f64);

    // dL/dz for the output layer.
    let mut delta = Mat::zeros(rows, probs.cols);
    for (r, &y) in data.labels().iter().enumerate() {
        assert!(y < probs.cols, "label {y} out of range for {} classes", probs.cols);
        let p = probs.row(r);
        let d = delta.row_mut(r);
        match loss {
            Loss::Ce => {
                for (k, dk) in d.iter_mut().enumerate() {
                    let ind = if k == y { F::one() } else { F::zero() };
                    *dk = (p[k] - ind) * inv_b;
                }
            }
            Loss::Uce => {
                let py = p[y];
                let coef = py / (cast::<F>(2.0) - py) * inv_b;
                for (k, dk) in d.iter_mut().enumerate() {
                    let ind = if k == y { F::one() } else { F::zero() };
                    *dk = coef * (ind - p[k]);
                }
            }
        }
    }

    let mut grad = vec![F::zero(); model.dim()];
    for l in (0..n_layers).rev() {
        let s = model.shapes()[l];
        let off: usize = model.shapes()[..l].iter().map(LayerShape::param_count).sum();
        let (gw, gb) = grad[off..off + s.param_count()].split_at_mut(s.in_dim * s.out_dim);
        for r in 0..rows {
            let a_row: &[F] = if l == 0 { data.feature_row(r) } else { cache.post[l - 1].row(r) };
            let d_row = delta.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let gw_row = &mut gw[i * s.out_dim..(i + 1) * s.out_dim];
                for (g, &d) in gw_row.iter_mut().zip(d_row) {
                    *g = *g + a * d;
                }
            }
            for (g, &d) in gb.iter_mut().zip(d_row) {
                *g = *g + d;
            }
        }
        if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in layer {l}")));
        }
        if l > 0 {
            let (w, _) = model.layer(l);
            let z_prev = &cache.pre[l - 1];
            let mut next = Mat::zeros(rows, s.in_dim);
            for r in 0..rows {
                let d_row = delta.row(r);
                let n_row = next.row_mut(r);
                for (i, ni) in n_row.iter_mut().enumerate() {
                    if z_prev.row(r)[i] > F::zero() {
                        *ni = linalg::dot(&w[i * s.out_dim..(i + 1) * s.out_dim], d_row);
                    }
                }
            }
            delta = next;
        }
    }
    Ok(grad)
}

/// Result of one client's local training pass.
pub struct LocalUpdate<F> {
    /// `(w_broadcast - w_trained) / lr`: the gradient-scaled displacement
    /// the server aggregates. With one epoch and a full batch this is
    /// the batch gradient itself, up to one rounding step.
    pub grad: GradVec<F>,
    /// The locally trained parameters.
    pub model: ModelParams<F>,
}

/// Runs local SGD from the broadcast model: `epochs` passes over the
/// data in an order reshuffled once per epoch from `rng`, stepping
/// `lr` per mini-batch (`batch_size` of 0 means the full set).
pub fn local_train<F: Float>(
    model: &ModelParams<F>,
    data: &Batch<F>,
    loss: Loss,
    lr: F,
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LocalUpdate<F>> {
    if data.rows() == 0 {
        return Err(Error::Config("cannot train on an empty client dataset".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("local training needs at least one epoch".into()));
    }
    if lr <= F::zero() {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let bs = if batch_size == 0 { data.rows() } else { batch_size.min(data.rows()) };
    let mut trained = model.clone();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let mini = data.select(chunk);
            let g = backward(&trained, &mini, loss)?;
            trained.add_scaled(-lr, &g);
        }
    }
    let grad = model
        .flat()
        .iter()
        .zip(trained.flat())
        .map(|(&w0, &w1)| (w0 - w1) / lr)
        .collect();
    Ok(LocalUpdate { grad, model: trained })
}
