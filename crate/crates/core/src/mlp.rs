//! Fully connected network with a flat parameter vector.
//!
//! Layer `l` maps `x^l` (width `fan_in`) to `z^l = W^lᵀ x^l + b^l`
//! (width `fan_out`); hidden layers apply the activation, the last layer
//! emits raw logits. `W^l` is stored row-major as `fan_in × fan_out`
//! followed by the bias when present. Read as column-major, the same
//! memory is `W^lᵀ` (`fan_out × fan_in`), which is how the batched code
//! below views it.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub loss_kind: LossKind,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        use_bias: bool,
        loss_kind: LossKind,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            use_bias,
            loss_kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {}",
                self.layer_widths.len()
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("layer width {i} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of weight layers.
    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let fan_in = self.layer_widths[l];
            let fan_out = self.layer_widths[l + 1];
            let weight_offset = off;
            off += fan_in * fan_out;
            let bias_offset = if self.use_bias {
                let b = off;
                off += fan_out;
                Some(b)
            } else {
                None
            };
            blocks.push(LayerBlock {
                layer: l,
                fan_in,
                fan_out,
                weight_offset,
                bias_offset,
            });
        }
        Layout { blocks, len: off }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.layout();
        let mut values = vec![0.0; layout.len];
        for b in &layout.blocks {
            let std = (2.0 / b.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for v in &mut values[b.weight_range()] {
                *v = normal.sample(&mut rng);
            }
        }
        ParamVector { values, layout }
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative of the activation; the relu subgradient at 0 is 0.
    fn act_deriv(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBlock {
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

impl LayerBlock {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> Option<std::ops::Range<usize>> {
        self.bias_offset.map(|b| b..b + self.fan_out)
    }

    /// Index of `W[i, j]` (input `i`, output `j`).
    pub fn weight_index(&self, i: usize, j: usize) -> usize {
        self.weight_offset + i * self.fan_out + j
    }
}

/// Mapping from the flat vector to per-layer weights and biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<LayerBlock>,
    pub len: usize,
}

/// Flat parameter vector θ together with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layout = spec.layout();
        Self {
            values: vec![0.0; layout.len],
            layout,
        }
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if values.len() != layout.len {
            return Err(Error::dim("parameter vector", layout.len, values.len()));
        }
        Ok(Self { values, layout })
    }

    /// A vector sharing this layout with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.layout.len {
            return Err(Error::dim("parameter vector", self.layout.len, values.len()));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `W^l` as a `fan_in × fan_out` matrix.
    pub fn weight_matrix(&self, l: usize) -> DMatrix<f64> {
        self.wt(l).transpose()
    }

    pub fn bias(&self, l: usize) -> Option<&[f64]> {
        self.layout.blocks[l].bias_range().map(|r| &self.values[r])
    }

    /// Rebuilds a vector from per-layer `fan_in × fan_out` weights and
    /// optional biases.
    pub fn from_layers(spec: &MlpSpec, weights: &[DMatrix<f64>], biases: &[Vec<f64>]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        if weights.len() != spec.n_layers() {
            return Err(Error::dim("layer count", spec.n_layers(), weights.len()));
        }
        for (l, w) in weights.iter().enumerate() {
            let b = p.layout.blocks[l];
            if w.nrows() != b.fan_in || w.ncols() != b.fan_out {
                return Err(Error::dim(format!("layer {l} weight size"), b.fan_in * b.fan_out, w.len()));
            }
            let wt = w.transpose();
            p.values[b.weight_range()].copy_from_slice(wt.as_slice());
            if let Some(r) = b.bias_range() {
                let bias = biases.get(l).ok_or_else(|| Error::dim("bias count", weights.len(), biases.len()))?;
                if bias.len() != b.fan_out {
                    return Err(Error::dim(format!("layer {l} bias"), b.fan_out, bias.len()));
                }
                p.values[r].copy_from_slice(bias);
            }
        }
        Ok(p)
    }

    pub(crate) fn wt(&self, l: usize) -> DMatrixView<'_, f64> {
        view_wt(&self.values, &self.layout.blocks[l])
    }
}

pub(crate) fn view_wt<'a>(values: &'a [f64], b: &LayerBlock) -> DMatrixView<'a, f64> {
    DMatrixView::from_slice(&values[b.weight_range()], b.fan_out, b.fan_in)
}

/// Samples stored one per column (`d × n`), labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
    pub task_id: usize,
}

impl Dataset {
    /// `inputs` is `d × n`, one sample per column.
    pub fn from_columns(inputs: DMatrix<f64>, labels: Vec<usize>, task_id: usize) -> Result<Self> {
        if labels.is_empty() || inputs.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if inputs.ncols() != labels.len() {
            return Err(Error::dim("dataset labels", inputs.ncols(), labels.len()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite input".into()));
        }
        Ok(Self {
            inputs,
            labels,
            task_id,
        })
    }

    /// One row per sample.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, task_id: usize) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or(Error::EmptyDataset)?;
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::dim(format!("dataset row {i}"), d, rows[i].len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_columns(DMatrix::from_column_slice(d, rows.len(), &flat), labels, task_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs.as_slice()[i * d..(i + 1) * d]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut flat = Vec::with_capacity(d * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range {}", self.len())));
            }
            flat.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::from_columns(DMatrix::from_vec(d, indices.len(), flat), labels, self.task_id)
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let d = first.dim();
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != d {
                return Err(Error::dim("concatenated dataset dim", d, p.dim()));
            }
            flat.extend_from_slice(p.inputs.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        let n = labels.len();
        Self::from_columns(DMatrix::from_vec(d, n, flat), labels, first.task_id)
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.dim() != spec.input_dim() {
            return Err(Error::dim("layer 0 input", spec.input_dim(), self.dim()));
        }
        let c = spec.output_dim();
        if let Some(&y) = self.labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidDataset(format!("label {y} outside [0, {c})")));
        }
        Ok(())
    }
}

pub(crate) fn check_params(spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    let layout = spec.layout();
    if params.layout != layout {
        return Err(Error::dim("parameter vector", layout.len, params.len()));
    }
    Ok(())
}

/// Result of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// `x^0 .. x^L`: the input, each hidden post-activation, and the logits.
    pub activations: Vec<Vec<f64>>,
}

pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Forward> {
    check_params(spec, params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::dim("layer 0 input", spec.input_dim(), x.len()));
    }
    let tape = Tape::run(spec, params.values(), &DMatrix::from_column_slice(x.len(), 1, x));
    let mut activations: Vec<Vec<f64>> = tape.a.iter().map(|a| a.as_slice().to_vec()).collect();
    let logits = tape.z.last().unwrap().as_slice().to_vec();
    activations.push(logits.clone());
    Ok(Forward { logits, activations })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sample_loss(kind: LossKind, z: &[f64], y: usize) -> f64 {
    match kind {
        LossKind::CrossEntropy => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        }
        LossKind::Mse => {
            0.5 * z
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (v - t) * (v - t)
                })
                .sum::<f64>()
        }
    }
}

/// `∂ℓ/∂z` for one sample.
fn sample_loss_grad(kind: LossKind, z: &[f64], y: usize) -> Vec<f64> {
    let mut g = match kind {
        LossKind::CrossEntropy => softmax(z),
        LossKind::Mse => z.to_vec(),
    };
    g[y] -= 1.0;
    g
}

/// `∇²_f ℓ`: `diag(p) − ppᵀ` for cross-entropy, identity for MSE.
pub fn loss_output_hessian(probs: &[f64], kind: LossKind) -> Result<DMatrix<f64>> {
    let c = probs.len();
    match kind {
        LossKind::Mse => Ok(DMatrix::identity(c, c)),
        LossKind::CrossEntropy => {
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-8 || probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::NotNormalized { sum });
            }
            Ok(DMatrix::from_fn(c, c, |i, j| {
                let d = if i == j { probs[i] } else { 0.0 };
                d - probs[i] * probs[j]
            }))
        }
    }
}

/// Batched forward state: `a[l]` is the input to layer `l`, `z[l]` its
/// pre-activation output.
pub(crate) struct Tape {
    pub a: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn run(spec: &MlpSpec, theta: &[f64], x: &DMatrix<f64>) -> Tape {
        let layout = spec.layout();
        let nl = layout.blocks.len();
        let mut a = Vec::with_capacity(nl);
        let mut z = Vec::with_capacity(nl);
        let mut cur = x.clone();
        for (l, b) in layout.blocks.iter().enumerate() {
            let mut zl = view_wt(theta, b) * &cur;
            if let Some(r) = b.bias_range() {
                let bias = &theta[r];
                for mut col in zl.column_iter_mut() {
                    for (v, bb) in col.iter_mut().zip(bias) {
                        *v += bb;
                    }
                }
            }
            let next = if l + 1 < nl { zl.map(|v| spec.act(v)) } else { DMatrix::zeros(0, 0) };
            a.push(cur);
            z.push(zl);
            cur = next;
        }
        Tape { a, z }
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        self.z.last().unwrap()
    }

    /// `σ'(z[l])` elementwise.
    pub fn deriv(&self, spec: &MlpSpec, l: usize) -> DMatrix<f64> {
        self.z[l].map(|v| spec.act_deriv(v))
    }
}

/// Backpropagates `g_out` (`C × m`, gradient wrt the logits per column)
/// and accumulates the parameter gradient into `grad`. Each column of
/// `g_out` is paired with the same-index column of the tape.
pub(crate) fn backward(spec: &MlpSpec, theta: &[f64], tape: &Tape, g_out: DMatrix<f64>, grad: &mut [f64]) {
    let layout = spec.layout();
    let mut g = g_out;
    for l in (0..layout.blocks.len()).rev() {
        let b = &layout.blocks[l];
        let gw = &g * tape.a[l].transpose();
        for (dst, src) in grad[b.weight_range()].iter_mut().zip(gw.iter()) {
            *dst += src;
        }
        if let Some(r) = b.bias_range() {
            for (j, dst) in grad[r].iter_mut().enumerate() {
                *dst += g.row(j).sum();
            }
        }
        if l > 0 {
            let back = view_wt(theta, b).transpose() * &g;
            g = back.component_mul(&tape.deriv(spec, l - 1));
        }
    }
}

/// Mean loss and its gradient over the given columns.
pub(crate) fn loss_grad_batch(spec: &MlpSpec, theta: &[f64], x: &DMatrix<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
    let tape = Tape::run(spec, theta, x);
    let n = labels.len();
    let logits = tape.logits();
    let mut g = DMatrix::zeros(logits.nrows(), n);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.column(i);
        loss += sample_loss(spec.loss_kind, z.as_slice(), y);
        let gi = sample_loss_grad(spec.loss_kind, z.as_slice(), y);
        for (c, v) in gi.into_iter().enumerate() {
            g[(c, i)] = v / n as f64;
        }
    }
    let mut grad = vec![0.0; theta.len()];
    backward(spec, theta, &tape, g, &mut grad);
    (loss / n as f64, grad)
}

pub fn mean_loss(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_params(spec, params)?;
    data.check(spec)?;
    Ok(mean_loss_raw(spec, params.values(), data))
}

pub(crate) fn mean_loss_raw(spec: &MlpSpec, theta: &[f64], data: &Dataset) -> f64 {
    let tape = Tape::run(spec, theta, &data.inputs);
    let logits = tape.logits();
    let total: f64 = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| sample_loss(spec.loss_kind, logits.column(i).as_slice(), y))
        .sum();
    total / data.len() as f64
}

pub fn mean_grad(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
    Ok(loss_and_grad(spec, params, data)?.1)
}

pub fn loss_and_grad(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
    check_params(spec, params)?;
    data.check(spec)?;
    let (l, g) = loss_grad_batch(spec, params.values(), &data.inputs, &data.labels);
    Ok((l, params.with_values(g)?))
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_params(spec, params)?;
    data.check(spec)?;
    let tape = Tape::run(spec, params.values(), &data.inputs);
    let logits = tape.logits();
    let hits = data
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.column(*i).as_slice()) == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inputs to every layer (`x^0 .. x^{L-1}`), each `width × n`.
pub fn layer_inputs(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    check_params(spec, params)?;
    data.check(spec)?;
    Ok(Tape::run(spec, params.values(), &data.inputs).a)
}

/// Jacobians of the logits of one sample, contracted with `seed`
/// (`C × m`): returns `J · seed` (`P × m`). `seed = I` gives `J`.
pub(crate) fn jacobian_times(spec: &MlpSpec, theta: &[f64], x: &[f64], seed: &DMatrix<f64>) -> DMatrix<f64> {
    let tape = Tape::run(spec, theta, &DMatrix::from_column_slice(x.len(), 1, x));
    jacobian_times_tape(spec, theta, &tape, 0, seed)
}

/// As [`jacobian_times`], for column `i` of an existing batched tape.
pub(crate) fn jacobian_times_tape(spec: &MlpSpec, theta: &[f64], tape: &Tape, i: usize, seed: &DMatrix<f64>) -> DMatrix<f64> {
    let layout = spec.layout();
    let m = seed.ncols();
    let mut out = DMatrix::zeros(theta.len(), m);
    let mut g = seed.clone();
    for l in (0..layout.blocks.len()).rev() {
        let b = &layout.blocks[l];
        let a = tape.a[l].column(i);
        for k in 0..m {
            let mut col = out.column_mut(k);
            let gk = g.column(k);
            for (ii, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let base = b.weight_offset + ii * b.fan_out;
                for j in 0..b.fan_out {
                    col[base + j] = gk[j] * ai;
                }
            }
            if let Some(bo) = b.bias_offset {
                for j in 0..b.fan_out {
                    col[bo + j] = gk[j];
                }
            }
        }
        if l > 0 {
            let d = tape.z[l - 1].column(i).map(|v| spec.act_deriv(v));
            let mut back = view_wt(theta, b).transpose() * &g;
            for mut c in back.column_iter_mut() {
                c.component_mul_assign(&d);
            }
            g = back;
        }
    }
    out
}

/// `P × C` matrix whose column `c` is `∇_θ f^c(x)`.
pub fn output_jacobian(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<DMatrix<f64>> {
    check_params(spec, params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::dim("layer 0 input", spec.input_dim(), x.len()));
    }
    let c = spec.output_dim();
    Ok(jacobian_times(spec, params.values(), x, &DMatrix::identity(c, c)))
}

/// `∇_f ℓ` for one sample.
pub fn loss_logit_grad(spec: &MlpSpec, logits: &[f64], label: usize) -> Vec<f64> {
    sample_loss_grad(spec.loss_kind, logits, label)
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![2, 3, 2], Activation::Relu, true, LossKind::CrossEntropy).unwrap()
    }

    #[test]
    fn layout_counts_parameters() {
        let s = small_spec();
        assert_eq!(s.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
        let l = s.layout();
        assert_eq!(l.blocks[1].weight_offset, 9);
        assert_eq!(l.blocks[1].bias_offset, Some(15));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, false, LossKind::Mse).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, false, LossKind::Mse).is_err());
    }

    #[test]
    fn layer_round_trip_is_bit_exact() {
        let s = small_spec();
        let p = s.init_params(3);
        let ws: Vec<_> = (0..2).map(|l| p.weight_matrix(l)).collect();
        let bs: Vec<_> = (0..2).map(|l| p.bias(l).unwrap().to_vec()).collect();
        let q = ParamVector::from_layers(&s, &ws, &bs).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_params_give_uniform_softmax_and_ln_c_loss() {
        let s = MlpSpec::new(vec![4, 6, 10], Activation::Relu, true, LossKind::CrossEntropy).unwrap();
        let p = ParamVector::zeros(&s);
        let f = forward(&s, &p, &[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!(f.logits.iter().all(|&z| z == 0.0));
        let data = Dataset::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]], vec![7], 1).unwrap();
        assert_eq!(mean_loss(&s, &p, &data).unwrap(), 10f64.ln());
    }

    #[test]
    fn single_linear_layer_is_wt_x() {
        let s = MlpSpec::new(vec![3, 2], Activation::Linear, false, LossKind::Mse).unwrap();
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = ParamVector::from_layers(&s, &[w.clone()], &[]).unwrap();
        let f = forward(&s, &p, &[1.0, -1.0, 2.0]).unwrap();
        let expect = w.transpose() * DVector::from_column_slice(&[1.0, -1.0, 2.0]);
        assert_eq!(f.logits, expect.as_slice());
    }

    #[test]
    fn output_hessian_of_half_half() {
        let q = loss_output_hessian(&[0.5, 0.5], LossKind::CrossEntropy).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]));
        let z = loss_output_hessian(&[0.0, 1.0, 0.0], LossKind::CrossEntropy).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(loss_output_hessian(&[0.5, 0.6], LossKind::CrossEntropy).is_err());
        assert_eq!(loss_output_hessian(&[0.1, 0.2], LossKind::Mse).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn saturating_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let m = k as f64;
            let l = sample_loss(LossKind::CrossEntropy, &[m, 0.0], 0);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let s = small_spec();
        let p = s.init_params(1);
        let e = forward(&s, &p, &[1.0]).unwrap_err();
        assert!(e.to_string().contains("layer 0"));
    }
}
