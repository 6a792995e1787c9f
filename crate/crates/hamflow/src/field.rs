//! Hamiltonian vector fields on phase space.
//!
//! A state is `x = [p, q]` with the momentum block first. Given a scalar
//! function `H(x)`, the induced dynamics are
//!
//! ```text
//! dp/dt = -dH/dq,   dq/dt = +dH/dp        i.e.  dx/dt = J grad H
//! ```
//!
//! with the symplectic matrix `J = [[0, -I], [I, 0]]`. Two structural facts
//! follow for *any* `H` and are what the verification suite leans on:
//! the field is everywhere orthogonal to `grad H` (energy is conserved along
//! trajectories) and its divergence vanishes (volume is preserved).

use crate::diff::batch::{self};
use crate::diff::{Activation, Mlp, OutputActivation, ParamVector};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// A phase-space point `[p, q]`: even dimension, momentum block first.
#[derive(Debug, Clone, PartialEq)]
pub struct State(Vec<f64>);

impl State {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 || coords.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "state dimension must be even and at least 2, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("state coordinates"));
        }
        Ok(State(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    /// The momentum block `p` (first half).
    pub fn momentum(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    /// The position block `q` (second half).
    pub fn position(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pack states into a `(d x n)` column matrix. The batch must be non-empty
/// and dimensionally consistent.
pub fn states_to_matrix(states: &[State]) -> Result<Array2<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::invalid("empty state batch".to_string()))?;
    let d = first.dim();
    let mut m = Array2::zeros((d, states.len()));
    for (j, s) in states.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::shape("state batch", d, s.dim()));
        }
        for (i, &v) in s.coords().iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Unpack a `(d x n)` column matrix into states, validating each column.
pub fn matrix_to_states(m: &Array2<f64>) -> Result<Vec<State>> {
    (0..m.ncols())
        .map(|j| State::new(m.column(j).to_vec()))
        .collect()
}

/// `J m` column-wise: `(p, q) -> (-q, p)`.
pub(crate) fn apply_j(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    let half = d / 2;
    let mut out = Array2::zeros(m.raw_dim());
    for j in 0..m.ncols() {
        for i in 0..half {
            out[[i, j]] = -m[[half + i, j]];
            out[[half + i, j]] = m[[i, j]];
        }
    }
    out
}

/// `J^T m = -J m` column-wise: `(p, q) -> (q, -p)`.
pub(crate) fn apply_j_transpose(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    let half = d / 2;
    let mut out = Array2::zeros(m.raw_dim());
    for j in 0..m.ncols() {
        for i in 0..half {
            out[[i, j]] = m[[half + i, j]];
            out[[half + i, j]] = -m[[i, j]];
        }
    }
    out
}

/// A learned Hamiltonian: an MLP from phase space to a single scalar.
///
/// Construction enforces what the dynamics need: even input dimension,
/// scalar output with no squashing, and twice-differentiable hidden
/// activations (training differentiates through `grad H`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mlp", into = "Mlp")]
pub struct NeuralHamiltonian {
    net: Mlp,
}

impl NeuralHamiltonian {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.input_dim() < 2 || net.input_dim() % 2 != 0 {
            return Err(Error::invalid(format!(
                "hamiltonian input dimension must be even and at least 2, got {}",
                net.input_dim()
            )));
        }
        if net.output_dim() != 1 {
            return Err(Error::invalid(format!(
                "hamiltonian must have scalar output, got {}",
                net.output_dim()
            )));
        }
        if net.output_activation() != OutputActivation::Identity {
            return Err(Error::invalid(
                "hamiltonian output activation must be identity".to_string(),
            ));
        }
        if !net.activation().supports_double_backprop() {
            return Err(Error::invalid(format!(
                "hamiltonian hidden activation must be tanh or softplus, got {:?}",
                net.activation()
            )));
        }
        Ok(NeuralHamiltonian { net })
    }

    /// Standard shape used for flows: three tanh hidden layers of the given
    /// width, seeded init.
    pub fn seeded(d: usize, hidden_width: usize, seed: u64) -> Result<Self> {
        let net = Mlp::seeded(
            vec![d, hidden_width, hidden_width, hidden_width, 1],
            Activation::Tanh,
            OutputActivation::Identity,
            seed,
        )?;
        NeuralHamiltonian::new(net)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }
}

impl TryFrom<Mlp> for NeuralHamiltonian {
    type Error = Error;
    fn try_from(net: Mlp) -> Result<Self> {
        NeuralHamiltonian::new(net)
    }
}

impl From<NeuralHamiltonian> for Mlp {
    fn from(h: NeuralHamiltonian) -> Mlp {
        h.net
    }
}

/// On-disk form of [`HamiltonianField`], discriminated by `"kind"`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum FieldDoc {
    Neural { mlp: Mlp },
    HarmonicOscillator { d: usize },
    Constant { d: usize, value: f64 },
}

/// A Hamiltonian and the vector field it induces.
///
/// `Neural` carries trainable parameters; the analytic variants are exact
/// references for testing. `HarmonicOscillator` is `H = (|p|^2 + |q|^2) / 2`,
/// whose flow rotates phase space with period `2 pi`; `Constant` has a
/// vanishing field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldDoc", into = "FieldDoc")]
pub enum HamiltonianField {
    Neural(NeuralHamiltonian),
    HarmonicOscillator { d: usize },
    Constant { d: usize, value: f64 },
}

impl TryFrom<FieldDoc> for HamiltonianField {
    type Error = Error;
    fn try_from(doc: FieldDoc) -> Result<Self> {
        match doc {
            FieldDoc::Neural { mlp } => Ok(HamiltonianField::Neural(NeuralHamiltonian::new(mlp)?)),
            FieldDoc::HarmonicOscillator { d } => {
                check_even_dim(d)?;
                Ok(HamiltonianField::HarmonicOscillator { d })
            }
            FieldDoc::Constant { d, value } => {
                check_even_dim(d)?;
                if !value.is_finite() {
                    return Err(Error::non_finite("constant hamiltonian value"));
                }
                Ok(HamiltonianField::Constant { d, value })
            }
        }
    }
}

impl From<HamiltonianField> for FieldDoc {
    fn from(f: HamiltonianField) -> FieldDoc {
        match f {
            HamiltonianField::Neural(h) => FieldDoc::Neural { mlp: h.net },
            HamiltonianField::HarmonicOscillator { d } => FieldDoc::HarmonicOscillator { d },
            HamiltonianField::Constant { d, value } => FieldDoc::Constant { d, value },
        }
    }
}

fn check_even_dim(d: usize) -> Result<()> {
    if d < 2 || d % 2 != 0 {
        Err(Error::invalid(format!(
            "field dimension must be even and at least 2, got {d}"
        )))
    } else {
        Ok(())
    }
}

impl HamiltonianField {
    pub fn dim(&self) -> usize {
        match self {
            HamiltonianField::Neural(h) => h.dim(),
            HamiltonianField::HarmonicOscillator { d } => *d,
            HamiltonianField::Constant { d, .. } => *d,
        }
    }

    pub fn as_neural(&self) -> Option<&NeuralHamiltonian> {
        match self {
            HamiltonianField::Neural(h) => Some(h),
            _ => None,
        }
    }

    /// Current trainable parameters; empty for analytic fields.
    pub fn params(&self) -> ParamVector {
        match self {
            HamiltonianField::Neural(h) => h.net.params(),
            _ => ParamVector::empty(),
        }
    }

    /// Replace trainable parameters. Analytic fields accept only the empty
    /// vector.
    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        match self {
            HamiltonianField::Neural(h) => h.net.set_params(params),
            _ if params.is_empty() => Ok(()),
            _ => Err(Error::invalid(
                "analytic field has no trainable parameters".to_string(),
            )),
        }
    }

    /// Layer layout of the trainable parameters, if any.
    pub fn param_layer_dims(&self) -> Option<Vec<usize>> {
        match self {
            HamiltonianField::Neural(h) => Some(h.net.layer_dims().to_vec()),
            _ => None,
        }
    }

    fn check_state(&self, x: &State, context: &str) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::shape(context, self.dim(), x.dim()));
        }
        Ok(())
    }

    /// `H(x)`.
    pub fn hamiltonian_value(&self, x: &State) -> Result<f64> {
        self.check_state(x, "hamiltonian input")?;
        match self {
            HamiltonianField::Neural(h) => Ok(h.net.forward(x.coords())?[0]),
            HamiltonianField::HarmonicOscillator { .. } => {
                Ok(0.5 * x.coords().iter().map(|v| v * v).sum::<f64>())
            }
            HamiltonianField::Constant { value, .. } => Ok(*value),
        }
    }

    /// `f(x) = J grad H(x)`.
    pub fn vector_field(&self, x: &State) -> Result<Vec<f64>> {
        self.check_state(x, "vector field input")?;
        let xm = state_column(x);
        let f = self.field_batch(xm.view())?;
        Ok(f.column(0).to_vec())
    }

    /// Pull a cotangent on `f` back to the state and parameters: returns
    /// `(d(a . f)/dx, d(a . f)/dtheta)`.
    pub fn field_vjp(&self, x: &State, cotangent: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        self.check_state(x, "field vjp input")?;
        if cotangent.len() != self.dim() {
            return Err(Error::shape("field cotangent", self.dim(), cotangent.len()));
        }
        let xm = state_column(x);
        let am = Array2::from_shape_vec((cotangent.len(), 1), cotangent.to_vec())
            .expect("column shape");
        let (x_cot, theta) = self.vjp_batch(xm.view(), &am)?;
        let theta = match self.param_layer_dims() {
            Some(dims) => ParamVector::from_flat(dims, theta)?,
            None => ParamVector::empty(),
        };
        Ok((x_cot.column(0).to_vec(), theta))
    }

    /// `div f(x)`, identically zero in exact arithmetic; computed as the
    /// trace of the field's Jacobian for the numerical check.
    pub fn divergence(&self, x: &State) -> Result<f64> {
        self.check_state(x, "divergence input")?;
        match self {
            HamiltonianField::Neural(_) => {
                let d = self.dim();
                // One batched pullback with cotangents e_0 .. e_{d-1}:
                // column i of the result is d(f_i)/dx, so the trace is the
                // divergence.
                let mut xm = Array2::zeros((d, d));
                for j in 0..d {
                    for (i, &v) in x.coords().iter().enumerate() {
                        xm[[i, j]] = v;
                    }
                }
                let eye = Array2::eye(d);
                let (x_cot, _) = self.vjp_batch(xm.view(), &eye)?;
                Ok((0..d).map(|i| x_cot[[i, i]]).sum())
            }
            // Exactly zero: the Jacobian is J for the oscillator, 0 for the
            // constant field.
            HamiltonianField::HarmonicOscillator { .. } => Ok(0.0),
            HamiltonianField::Constant { .. } => Ok(0.0),
        }
    }

    /// `H` on each column of a `(d x n)` batch.
    pub fn value_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_batch(x)?;
        match self {
            HamiltonianField::Neural(h) => {
                let cache = batch::forward(h.net(), x, batch::DerivOrder::Value);
                Ok(cache.output().row(0).to_owned())
            }
            HamiltonianField::HarmonicOscillator { .. } => Ok(x
                .axis_iter(ndarray::Axis(1))
                .map(|col| 0.5 * col.iter().map(|v| v * v).sum::<f64>())
                .collect()),
            HamiltonianField::Constant { value, .. } => {
                Ok(Array1::from_elem(x.ncols(), *value))
            }
        }
    }

    /// `f` on each column of a `(d x n)` batch.
    pub fn field_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        match self {
            HamiltonianField::Neural(h) => {
                let cache = batch::forward(h.net(), x, batch::DerivOrder::First);
                let ones = Array2::ones((1, x.ncols()));
                let grad = batch::input_grad(h.net(), &cache, ones.view());
                Ok(apply_j(&grad))
            }
            HamiltonianField::HarmonicOscillator { .. } => Ok(apply_j(&x.to_owned())),
            HamiltonianField::Constant { .. } => Ok(Array2::zeros(x.raw_dim())),
        }
    }

    /// Batched pullback without the field value: returns per-column
    /// `d(a . f)/dx` and the parameter cotangent summed over columns.
    pub(crate) fn vjp_batch(
        &self,
        x: ArrayView2<f64>,
        cotangent: &Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_batch(x)?;
        match self {
            HamiltonianField::Neural(h) => {
                let v = apply_j_transpose(cotangent);
                let out = batch::grad_vjp(h.net(), x, v.view(), false, true);
                Ok((out.x_cot, out.theta_cot.expect("requested")))
            }
            // a . f = a . J x is linear, so the pullback is J^T a.
            HamiltonianField::HarmonicOscillator { .. } => {
                Ok((apply_j_transpose(cotangent), Vec::new()))
            }
            HamiltonianField::Constant { .. } => {
                Ok((Array2::zeros(x.raw_dim()), Vec::new()))
            }
        }
    }

    /// Fused batched evaluation for the adjoint integrator: the field, the
    /// per-column pullback `d(a . f)/dx`, and the parameter cotangent summed
    /// over columns — sharing one forward pass.
    pub(crate) fn field_and_vjp_batch(
        &self,
        x: ArrayView2<f64>,
        cotangent: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
        self.check_batch(x)?;
        match self {
            HamiltonianField::Neural(h) => {
                let v = apply_j_transpose(cotangent);
                let out = batch::grad_vjp(h.net(), x, v.view(), true, true);
                Ok((
                    apply_j(&out.grad.expect("requested")),
                    out.x_cot,
                    out.theta_cot.expect("requested"),
                ))
            }
            HamiltonianField::HarmonicOscillator { .. } => Ok((
                apply_j(&x.to_owned()),
                apply_j_transpose(cotangent),
                Vec::new(),
            )),
            HamiltonianField::Constant { .. } => Ok((
                Array2::zeros(x.raw_dim()),
                Array2::zeros(x.raw_dim()),
                Vec::new(),
            )),
        }
    }

    fn check_batch(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.dim() {
            return Err(Error::shape("state batch rows", self.dim(), x.nrows()));
        }
        Ok(())
    }
}

fn state_column(x: &State) -> Array2<f64> {
    Array2::from_shape_vec((x.dim(), 1), x.coords().to_vec()).expect("column shape")
}
