//! Fully-connected networks with hand-written differentiation.
//!
//! Three derivative operations cover everything the rest of the crate needs:
//! cotangent pullback to the input (`input_gradient`), pullback to the
//! parameters (`param_vjp`), and the second-order pullback of a directional
//! derivative (`grad_vjp`), which differentiates *through* the input gradient
//! and is what makes Hamiltonian vector fields trainable.
//!
//! All heavy math runs on (features x batch) column matrices in
//! [`batch`]; the per-sample methods here are batch-of-one wrappers, so both
//! paths are literally the same code.

pub(crate) mod batch;

use crate::error::{Error, Result};
use crate::rng::CounterStream;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity. `Tanh` and `Softplus` are twice differentiable
/// everywhere, which second-order operations require.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
    Sigmoid,
}

/// Nonlinearity applied after the final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

impl Activation {
    /// Whether the second derivative is available and trustworthy for
    /// double backprop.
    pub fn supports_double_backprop(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Softplus)
    }

    #[inline]
    pub(crate) fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Value and first derivative in one shot (shares the expensive
    /// transcendental between them).
    #[inline]
    pub(crate) fn eval_d1(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                (y, 1.0 - y * y)
            }
            Activation::Softplus => (softplus(z), sigmoid(z)),
            Activation::Identity => (z, 1.0),
            Activation::Sigmoid => {
                let y = sigmoid(z);
                (y, y * (1.0 - y))
            }
        }
    }

    /// Value, first, and second derivative.
    #[inline]
    pub(crate) fn eval_d1_d2(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                let d1 = 1.0 - y * y;
                (y, d1, -2.0 * y * d1)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                (softplus(z), s, s * (1.0 - s))
            }
            Activation::Identity => (z, 1.0, 0.0),
            Activation::Sigmoid => {
                let y = sigmoid(z);
                let d1 = y * (1.0 - y);
                (y, d1, d1 * (1.0 - 2.0 * y))
            }
        }
    }
}

impl OutputActivation {
    pub(crate) fn as_activation(self) -> Activation {
        match self {
            OutputActivation::Identity => Activation::Identity,
            OutputActivation::Sigmoid => Activation::Sigmoid,
        }
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A multilayer perceptron. Weight matrix `k` has shape
/// `(layer_dims[k+1], layer_dims[k])` and acts on column vectors; the hidden
/// activation applies to every layer except the last, which gets
/// `output_activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    output_activation: OutputActivation,
}

/// On-disk form of [`Mlp`]: weights flattened row-major per layer. JSON
/// serialization uses shortest-round-trip float formatting, so save/load is
/// bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpDoc {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_activation: OutputActivation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpDoc {
    fn from(net: Mlp) -> Self {
        MlpDoc {
            layer_dims: net.layer_dims.clone(),
            activation: net.activation,
            output_activation: net.output_activation,
            weights: net
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
            biases: net.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpDoc> for Mlp {
    type Error = Error;

    fn try_from(doc: MlpDoc) -> Result<Self> {
        let n_layers = doc.layer_dims.len().saturating_sub(1);
        if doc.weights.len() != n_layers {
            return Err(Error::shape("mlp weights", n_layers, doc.weights.len()));
        }
        if doc.biases.len() != n_layers {
            return Err(Error::shape("mlp biases", n_layers, doc.biases.len()));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (rows, cols) = (doc.layer_dims[k + 1], doc.layer_dims[k]);
            if doc.weights[k].len() != rows * cols {
                return Err(Error::shape(
                    "mlp weight layer",
                    rows * cols,
                    doc.weights[k].len(),
                ));
            }
            if doc.biases[k].len() != rows {
                return Err(Error::shape("mlp bias layer", rows, doc.biases[k].len()));
            }
            let w = Array2::from_shape_vec((rows, cols), doc.weights[k].clone())
                .expect("length checked above");
            weights.push(w);
            biases.push(Array1::from_vec(doc.biases[k].clone()));
        }
        Mlp::from_parts(
            doc.layer_dims,
            weights,
            biases,
            doc.activation,
            doc.output_activation,
        )
    }
}

impl Mlp {
    /// Assemble from explicit weights and biases, validating shapes and
    /// finiteness.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(format!(
                "mlp needs at least input and output dims, got {:?}",
                layer_dims
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "mlp layer dims must be positive, got {:?}",
                layer_dims
            )));
        }
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers {
            return Err(Error::shape("mlp weights", n_layers, weights.len()));
        }
        if biases.len() != n_layers {
            return Err(Error::shape("mlp biases", n_layers, biases.len()));
        }
        for k in 0..n_layers {
            let want = (layer_dims[k + 1], layer_dims[k]);
            if weights[k].dim() != want {
                return Err(Error::invalid(format!(
                    "weight layer {k}: expected shape {:?}, got {:?}",
                    want,
                    weights[k].dim()
                )));
            }
            if biases[k].len() != layer_dims[k + 1] {
                return Err(Error::shape(
                    "mlp bias layer",
                    layer_dims[k + 1],
                    biases[k].len(),
                ));
            }
            if weights[k].iter().chain(biases[k].iter()).any(|v| !v.is_finite()) {
                return Err(Error::non_finite("mlp parameters"));
            }
        }
        Ok(Mlp {
            layer_dims,
            weights,
            biases,
            activation,
            output_activation,
        })
    }

    /// Fresh network with weights drawn uniformly from
    /// `[-sqrt(1/fan_in), sqrt(1/fan_in))` and zero biases.
    ///
    /// Draw order is fixed: layer by layer, each weight matrix row-major,
    /// one `unit` draw per entry from a counter stream starting at 0. Biases
    /// consume no draws. The same seed therefore always produces the same
    /// network, independent of platform or thread count.
    pub fn seeded(
        layer_dims: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "mlp layer dims must have length >= 2 and positive entries, got {:?}",
                layer_dims
            )));
        }
        let mut stream = CounterStream::new(seed);
        let n_layers = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (rows, cols) = (layer_dims[k + 1], layer_dims[k]);
            let scale = (1.0 / cols as f64).sqrt();
            let mut w = Array2::zeros((rows, cols));
            for r in 0..rows {
                for c in 0..cols {
                    w[[r, c]] = stream.next_symmetric(scale);
                }
            }
            weights.push(w);
            biases.push(Array1::zeros(rows));
        }
        Mlp::from_parts(layer_dims, weights, biases, activation, output_activation)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub(crate) fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub(crate) fn weight(&self, k: usize) -> &Array2<f64> {
        &self.weights[k]
    }

    pub(crate) fn bias(&self, k: usize) -> &Array1<f64> {
        &self.biases[k]
    }

    /// The activation applied after layer `k`'s affine map.
    pub(crate) fn layer_activation(&self, k: usize) -> Activation {
        if k + 1 == self.layer_dims.len() - 1 {
            self.output_activation.as_activation()
        } else {
            self.activation
        }
    }

    pub fn param_len(&self) -> usize {
        param_len(&self.layer_dims)
    }

    /// Flatten current parameters into a [`ParamVector`].
    pub fn params(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_len());
        for w in &self.weights {
            values.extend(w.iter().copied());
        }
        for b in &self.biases {
            values.extend(b.iter().copied());
        }
        ParamVector {
            layer_dims: self.layer_dims.clone(),
            values,
        }
    }

    /// Overwrite parameters from a flat vector with matching layout.
    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.layer_dims != self.layer_dims {
            return Err(Error::invalid(format!(
                "param vector layout {:?} does not match network {:?}",
                params.layer_dims, self.layer_dims
            )));
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("param vector"));
        }
        let mut cursor = 0;
        for w in &mut self.weights {
            let len = w.len();
            let src = &params.values[cursor..cursor + len];
            w.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(src);
            cursor += len;
        }
        for b in &mut self.biases {
            let len = b.len();
            let src = &params.values[cursor..cursor + len];
            b.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(src);
            cursor += len;
        }
        debug_assert_eq!(cursor, params.values.len());
        Ok(())
    }

    fn check_input(&self, x: &[f64], context: &str) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(context, self.input_dim(), x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(context));
        }
        Ok(())
    }

    /// Evaluate the network on one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, "mlp forward input")?;
        let xm = column_matrix(x);
        let cache = batch::forward(self, xm.view(), batch::DerivOrder::Value);
        Ok(cache.output().column(0).to_vec())
    }

    /// Pull an output cotangent back to the input: returns
    /// `(dy/dx)^T v` where `v` has the output's length.
    pub fn input_gradient(&self, x: &[f64], output_cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, "mlp input")?;
        if output_cotangent.len() != self.output_dim() {
            return Err(Error::shape(
                "output cotangent",
                self.output_dim(),
                output_cotangent.len(),
            ));
        }
        let xm = column_matrix(x);
        let vm = column_matrix(output_cotangent);
        let cache = batch::forward(self, xm.view(), batch::DerivOrder::First);
        let grad = batch::input_grad(self, &cache, vm.view());
        Ok(grad.column(0).to_vec())
    }

    /// Pull an output cotangent back to the parameters: returns
    /// `(dy/dtheta)^T v` flattened in [`ParamVector`] order.
    pub fn param_vjp(&self, x: &[f64], output_cotangent: &[f64]) -> Result<ParamVector> {
        self.check_input(x, "mlp input")?;
        if output_cotangent.len() != self.output_dim() {
            return Err(Error::shape(
                "output cotangent",
                self.output_dim(),
                output_cotangent.len(),
            ));
        }
        let xm = column_matrix(x);
        let vm = column_matrix(output_cotangent);
        let cache = batch::forward(self, xm.view(), batch::DerivOrder::First);
        let out = batch::backprop(self, &cache, vm.view(), false);
        Ok(ParamVector {
            layer_dims: self.layer_dims.clone(),
            values: out.theta,
        })
    }

    /// Second-order pullback: for scalar-output networks, differentiates
    /// `phi(x, theta) = v . grad_x y` and returns `(d phi/dx, d phi/dtheta)`.
    ///
    /// Requires a single output and twice-differentiable hidden activations
    /// (`Tanh` or `Softplus`), since `phi` involves the activation's second
    /// derivative.
    pub fn grad_vjp(&self, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        self.check_input(x, "mlp input")?;
        if v.len() != self.input_dim() {
            return Err(Error::shape("gradient cotangent", self.input_dim(), v.len()));
        }
        if self.output_dim() != 1 {
            return Err(Error::invalid(format!(
                "grad_vjp needs a scalar output, network has {}",
                self.output_dim()
            )));
        }
        if !self.activation.supports_double_backprop() {
            return Err(Error::invalid(format!(
                "grad_vjp needs tanh or softplus hidden activations, got {:?}",
                self.activation
            )));
        }
        let xm = column_matrix(x);
        let vm = column_matrix(v);
        let out = batch::grad_vjp(self, xm.view(), vm.view(), false, true);
        Ok((
            out.x_cot.column(0).to_vec(),
            ParamVector {
                layer_dims: self.layer_dims.clone(),
                values: out.theta_cot.expect("requested above"),
            },
        ))
    }
}

fn column_matrix(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column shape")
}

/// Total parameter count for a layer layout.
pub(crate) fn param_len(layer_dims: &[usize]) -> usize {
    let mut total = 0;
    for k in 0..layer_dims.len().saturating_sub(1) {
        total += layer_dims[k + 1] * layer_dims[k] + layer_dims[k + 1];
    }
    total
}

/// Byte offsets of each layer's weight block and bias block inside the flat
/// parameter layout: all weights (layer order, row-major), then all biases.
pub(crate) fn param_offsets(layer_dims: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n_layers = layer_dims.len().saturating_sub(1);
    let mut w_off = Vec::with_capacity(n_layers);
    let mut cursor = 0;
    for k in 0..n_layers {
        w_off.push(cursor);
        cursor += layer_dims[k + 1] * layer_dims[k];
    }
    let mut b_off = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        b_off.push(cursor);
        cursor += layer_dims[k + 1];
    }
    (w_off, b_off)
}

/// Flat view of a network's parameters (or a gradient with the same shape):
/// every weight matrix row-major in layer order, then every bias vector in
/// layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamVector {
    layer_dims: Vec<usize>,
    values: Vec<f64>,
}

impl ParamVector {
    /// All-zero vector shaped for the given layer layout.
    pub fn zeros_for(layer_dims: &[usize]) -> Self {
        ParamVector {
            layer_dims: layer_dims.to_vec(),
            values: vec![0.0; param_len(layer_dims)],
        }
    }

    /// The empty vector, used as the parameter cotangent of fields that have
    /// no trainable parameters.
    pub fn empty() -> Self {
        ParamVector {
            layer_dims: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn from_flat(layer_dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != param_len(&layer_dims) {
            return Err(Error::shape(
                "param vector",
                param_len(&layer_dims),
                values.len(),
            ));
        }
        Ok(ParamVector { layer_dims, values })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        if self.layer_dims != other.layer_dims {
            return Err(Error::invalid(
                "param vector dot: mismatched layouts".to_string(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        if self.layer_dims != other.layer_dims {
            return Err(Error::invalid(
                "param vector axpy: mismatched layouts".to_string(),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }
}

/// Central-difference gradient of a scalar function, the oracle that every
/// hand-written derivative in this crate is tested against.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!(
            "finite difference step must be positive and finite, got {eps}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let base = x[i];
        probe[i] = base + eps;
        let plus = f(&probe)?;
        probe[i] = base - eps;
        let minus = f(&probe)?;
        probe[i] = base;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}
