//! Fixed-step integration and training gradients.
//!
//! One integrator (classical RK4 with a fixed step) serves four jobs:
//! transporting samples forward, transporting them back (same method,
//! negated step — the inverse map is the integrator itself, not a cached
//! tape), and producing loss gradients by two independent routes:
//!
//! - [`adjoint_gradients`]: the continuous adjoint system, integrated
//!   backward alongside a reconstruction of the state. Memory is constant in
//!   the number of steps; the price is that the backward state re-traces the
//!   forward trajectory only up to integration error.
//! - [`unrolled_gradients`]: exact reverse-mode differentiation of the
//!   discrete update, replaying recorded stage inputs. Memory grows with the
//!   step count; the gradient is exact for the discrete map.
//!
//! Agreement between the two (and against finite differences) is a strong
//! end-to-end check of every derivative in the crate, and the verification
//! suite enforces it.

use crate::diff::ParamVector;
use crate::error::{Error, Result};
use crate::exec;
use crate::field::{states_to_matrix, HamiltonianField, State};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Integration scheme. Only classical fourth-order Runge-Kutta for now; the
/// enum keeps files and configs explicit about what produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4,
}

/// A time span `[t0, t1]` cut into `n_steps` equal steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSpec {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
    pub method: Method,
}

impl IntegrationSpec {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(Error::non_finite("integration bounds"));
        }
        if t0 == t1 {
            return Err(Error::invalid(
                "integration span is empty (t0 == t1)".to_string(),
            ));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1".to_string()));
        }
        Ok(IntegrationSpec {
            t0,
            t1,
            n_steps,
            method: Method::Rk4,
        })
    }

    /// Forward span `[0, t_final]`.
    pub fn forward(t_final: f64, n_steps: usize) -> Result<Self> {
        IntegrationSpec::new(0.0, t_final, n_steps)
    }

    /// The same span walked the other way: swapped endpoints, negated step.
    pub fn reversed(&self) -> IntegrationSpec {
        IntegrationSpec {
            t0: self.t1,
            t1: self.t0,
            n_steps: self.n_steps,
            method: self.method,
        }
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    /// Grid time of step `k`. Interior points come from the grid formula;
    /// the final point is pinned to `t1` exactly so endpoints never carry
    /// rounding.
    pub fn time_at(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t1
        } else {
            self.t0 + (k as f64 * (self.t1 - self.t0)) / self.n_steps as f64
        }
    }

    fn validate(&self) -> Result<()> {
        IntegrationSpec::new(self.t0, self.t1, self.n_steps).map(|_| ())
    }
}

/// One sample's path: `times[k]` and `states[k]` for `k = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn initial_state(&self) -> &State {
        self.states.first().expect("trajectory is never empty")
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }

    /// Write as CSV: header `t,p_0..p_{d/2-1},q_0..q_{d/2-1}`, one row per
    /// recorded time, floats at 17 significant digits (lossless).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.initial_state().dim();
        w.write_all(trajectory_header(d).as_bytes())?;
        w.write_all(b"\n")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = crate::csvio::fmt_f64(*t);
            for v in s.coords() {
                row.push(',');
                row.push_str(&crate::csvio::fmt_f64(*v));
            }
            row.push('\n');
            w.write_all(row.as_bytes())?;
        }
        Ok(())
    }
}

/// CSV header for a `d`-dimensional phase-space trajectory.
pub fn trajectory_header(d: usize) -> String {
    let mut h = String::from("t");
    for i in 0..d / 2 {
        h.push_str(&format!(",p_{i}"));
    }
    for i in 0..d / 2 {
        h.push_str(&format!(",q_{i}"));
    }
    h
}

/// A whole batch's paths: `states[k]` is the `(d x n)` matrix of all samples
/// at time index `k`.
#[derive(Debug, Clone)]
pub struct BatchTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
}

impl BatchTrajectory {
    pub fn n_samples(&self) -> usize {
        self.states.first().map_or(0, |m| m.ncols())
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |m| m.nrows())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Final positions of every sample, `(d x n)`.
    pub fn finals(&self) -> ArrayView2<'_, f64> {
        self.states.last().expect("trajectory is never empty").view()
    }

    /// Extract one sample's path.
    pub fn sample(&self, j: usize) -> Result<Trajectory> {
        if j >= self.n_samples() {
            return Err(Error::shape("trajectory sample index", self.n_samples(), j));
        }
        let states = self
            .states
            .iter()
            .map(|m| State::new(m.column(j).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            times: self.times.clone(),
            states,
        })
    }
}

/// One RK4 step of a single state.
pub fn rk4_step(field: &HamiltonianField, x: &State, t: f64, dt: f64) -> Result<State> {
    if !t.is_finite() || !dt.is_finite() || dt == 0.0 {
        return Err(Error::invalid(format!(
            "rk4 step needs finite t and nonzero finite dt, got t={t}, dt={dt}"
        )));
    }
    if x.dim() != field.dim() {
        return Err(Error::shape("rk4 state", field.dim(), x.dim()));
    }
    let xm = states_to_matrix(std::slice::from_ref(x))?;
    let next = rk4_step_matrix(field, &xm, dt, 0)?;
    State::new(next.column(0).to_vec())
}

/// One RK4 step of a column batch. `step` only labels divergence errors.
pub(crate) fn rk4_step_matrix(
    field: &HamiltonianField,
    x: &Array2<f64>,
    h: f64,
    step: usize,
) -> Result<Array2<f64>> {
    let k1 = stage(field, x, step, 1)?;
    let u2 = stage_input(x, 0.5 * h, &k1);
    let k2 = stage(field, &u2, step, 2)?;
    let u3 = stage_input(x, 0.5 * h, &k2);
    let k3 = stage(field, &u3, step, 3)?;
    let u4 = stage_input(x, h, &k3);
    let k4 = stage(field, &u4, step, 4)?;

    let mut next = x.clone();
    next.scaled_add(h / 6.0, &k1);
    next.scaled_add(h / 3.0, &k2);
    next.scaled_add(h / 3.0, &k3);
    next.scaled_add(h / 6.0, &k4);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        // Stage 5 marks the combined update overflowing even though each
        // stage derivative stayed finite.
        Err(Error::Diverged { step, stage: 5 })
    }
}

fn stage(field: &HamiltonianField, x: &Array2<f64>, step: usize, s: usize) -> Result<Array2<f64>> {
    let k = field.field_batch(x.view())?;
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(Error::Diverged { step, stage: s })
    }
}

fn stage_input(x: &Array2<f64>, alpha_h: f64, k: &Array2<f64>) -> Array2<f64> {
    let mut u = x.clone();
    u.scaled_add(alpha_h, k);
    u
}

/// Run one chunk for `n_steps`, invoking `record` at every grid index
/// (including 0), and return the final state matrix.
fn rk4_chunk<F: FnMut(usize, &Array2<f64>)>(
    field: &HamiltonianField,
    x0: Array2<f64>,
    spec: &IntegrationSpec,
    mut record: F,
) -> Result<Array2<f64>> {
    let h = spec.step_size();
    let mut x = x0;
    record(0, &x);
    for step in 0..spec.n_steps {
        x = rk4_step_matrix(field, &x, h, step)?;
        record(step + 1, &x);
    }
    Ok(x)
}

/// Map chunk computations over batch columns and surface the lowest-indexed
/// chunk's error, independent of scheduling.
fn over_chunks<T: Send>(
    n: usize,
    f: impl Fn(std::ops::Range<usize>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let wrapped: Vec<Result<T>> = exec::map_chunks(n, |r| Ok(f(r)))?;
    let mut out = Vec::with_capacity(wrapped.len());
    for item in wrapped {
        out.push(item?);
    }
    Ok(out)
}

fn check_batch(field: &HamiltonianField, x0s: &[State]) -> Result<Array2<f64>> {
    let m = states_to_matrix(x0s)?;
    if m.nrows() != field.dim() {
        return Err(Error::shape("integration batch", field.dim(), m.nrows()));
    }
    Ok(m)
}

/// Integrate one state over the whole span, recording every grid point.
pub fn integrate(
    field: &HamiltonianField,
    x0: &State,
    spec: &IntegrationSpec,
) -> Result<Trajectory> {
    integrate_batch(field, std::slice::from_ref(x0), spec)?.sample(0)
}

/// Integrate a batch, recording every grid point for every sample.
pub fn integrate_batch(
    field: &HamiltonianField,
    x0s: &[State],
    spec: &IntegrationSpec,
) -> Result<BatchTrajectory> {
    let m = check_batch(field, x0s)?;
    integrate_matrix(field, &m, spec)
}

pub(crate) fn integrate_matrix(
    field: &HamiltonianField,
    x0: &Array2<f64>,
    spec: &IntegrationSpec,
) -> Result<BatchTrajectory> {
    spec.validate()?;
    let (d, n) = x0.dim();
    let per_chunk = over_chunks(n, |r| {
        let mut recorded: Vec<Array2<f64>> = Vec::with_capacity(spec.n_steps + 1);
        let chunk_x0 = x0.slice(ndarray::s![.., r.clone()]).to_owned();
        rk4_chunk(field, chunk_x0, spec, |_, x| recorded.push(x.clone()))?;
        Ok((r, recorded))
    })?;

    let times: Vec<f64> = (0..=spec.n_steps).map(|k| spec.time_at(k)).collect();
    let mut states = vec![Array2::zeros((d, n)); spec.n_steps + 1];
    for (range, recorded) in per_chunk {
        for (k, chunk_states) in recorded.into_iter().enumerate() {
            states[k]
                .slice_mut(ndarray::s![.., range.clone()])
                .assign(&chunk_states);
        }
    }
    Ok(BatchTrajectory { times, states })
}

/// Final states only, for a `d x n` column batch — what training and batch
/// translation need; skips trajectory storage.
pub fn integrate_finals(
    field: &HamiltonianField,
    x0: &Array2<f64>,
    spec: &IntegrationSpec,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let (d, n) = x0.dim();
    let per_chunk = over_chunks(n, |r| {
        let chunk_x0 = x0.slice(ndarray::s![.., r.clone()]).to_owned();
        let finals = rk4_chunk(field, chunk_x0, spec, |_, _| {})?;
        Ok((r, finals))
    })?;
    let mut out = Array2::zeros((d, n));
    for (range, finals) in per_chunk {
        out.slice_mut(ndarray::s![.., range]).assign(&finals);
    }
    Ok(out)
}

/// Undo a forward transport: integrate from `t1` back to `t0` by re-running
/// RK4 with the step negated. `spec` is the *forward* span.
pub fn reverse_integrate(
    field: &HamiltonianField,
    x1: &State,
    spec: &IntegrationSpec,
) -> Result<Trajectory> {
    integrate(field, x1, &spec.reversed())
}

/// Batch version of [`reverse_integrate`].
pub fn reverse_integrate_batch(
    field: &HamiltonianField,
    x1s: &[State],
    spec: &IntegrationSpec,
) -> Result<BatchTrajectory> {
    integrate_batch(field, x1s, &spec.reversed())
}

/// Training gradients via the continuous adjoint system.
///
/// `loss_cotangents` column `j` is `dL/dx_j(t1)` for sample `j`. The state
/// and adjoint are integrated jointly from `t1` back to `t0` (the state is
/// *reconstructed*, not stored, so memory does not grow with `n_steps`),
/// accumulating the parameter gradient on the way. Returns
/// `(dL/dtheta, dL/dx(t0))` with per-sample contributions summed into the
/// parameter gradient. Scale the cotangents by `1/batch` beforehand for a
/// mean-reduced loss.
pub fn adjoint_gradients(
    field: &HamiltonianField,
    x0s: &[State],
    loss_cotangents: &Array2<f64>,
    spec: &IntegrationSpec,
) -> Result<(ParamVector, Array2<f64>)> {
    let m = check_batch(field, x0s)?;
    let finals = integrate_finals(field, &m, spec)?;
    adjoint_gradients_from_final(field, &finals, loss_cotangents, spec)
}

/// [`adjoint_gradients`] for callers that already hold the forward result
/// (training does — it just transported the batch).
pub fn adjoint_gradients_from_final(
    field: &HamiltonianField,
    x_final: &Array2<f64>,
    loss_cotangents: &Array2<f64>,
    spec: &IntegrationSpec,
) -> Result<(ParamVector, Array2<f64>)> {
    spec.validate()?;
    let (d, n) = x_final.dim();
    if d != field.dim() {
        return Err(Error::shape("adjoint batch", field.dim(), d));
    }
    if loss_cotangents.dim() != (d, n) {
        return Err(Error::invalid(format!(
            "loss cotangents shape {:?} does not match batch {:?}",
            loss_cotangents.dim(),
            (d, n)
        )));
    }

    let rev = spec.reversed();
    let h = rev.step_size();
    let param_dims = field.param_layer_dims();
    let p_len = param_dims.as_ref().map_or(0, |dims| crate::diff::param_len(dims));

    let per_chunk = over_chunks(n, |r| {
        let mut x = x_final.slice(ndarray::s![.., r.clone()]).to_owned();
        let mut a = loss_cotangents.slice(ndarray::s![.., r.clone()]).to_owned();
        let mut g = vec![0.0; p_len];
        for step in 0..rev.n_steps {
            let (f1, xc1, th1) = adjoint_stage(field, &x, &a, step, 1)?;
            let x2 = stage_input(&x, 0.5 * h, &f1);
            let a2 = stage_input(&a, -0.5 * h, &xc1);
            let (f2, xc2, th2) = adjoint_stage(field, &x2, &a2, step, 2)?;
            let x3 = stage_input(&x, 0.5 * h, &f2);
            let a3 = stage_input(&a, -0.5 * h, &xc2);
            let (f3, xc3, th3) = adjoint_stage(field, &x3, &a3, step, 3)?;
            let x4 = stage_input(&x, h, &f3);
            let a4 = stage_input(&a, -h, &xc3);
            let (f4, xc4, th4) = adjoint_stage(field, &x4, &a4, step, 4)?;

            x.scaled_add(h / 6.0, &f1);
            x.scaled_add(h / 3.0, &f2);
            x.scaled_add(h / 3.0, &f3);
            x.scaled_add(h / 6.0, &f4);
            a.scaled_add(-h / 6.0, &xc1);
            a.scaled_add(-h / 3.0, &xc2);
            a.scaled_add(-h / 3.0, &xc3);
            a.scaled_add(-h / 6.0, &xc4);
            // dg/dt = -(theta pullback); walking backward with negative h
            // this accumulates positive multiples of the stage values.
            let gs = -h / 6.0;
            for i in 0..g.len() {
                g[i] += gs * (th1[i] + 2.0 * th2[i] + 2.0 * th3[i] + th4[i]);
            }
            if !(x.iter().all(|v| v.is_finite()) && a.iter().all(|v| v.is_finite())) {
                return Err(Error::Diverged { step, stage: 5 });
            }
        }
        Ok((r, a, g))
    })?;

    let mut theta_total = vec![0.0; p_len];
    let mut input_cots = Array2::zeros((d, n));
    for (range, a, g) in per_chunk {
        input_cots.slice_mut(ndarray::s![.., range]).assign(&a);
        for (acc, v) in theta_total.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let theta = match param_dims {
        Some(dims) => ParamVector::from_flat(dims, theta_total)?,
        None => ParamVector::empty(),
    };
    Ok((theta, input_cots))
}

fn adjoint_stage(
    field: &HamiltonianField,
    x: &Array2<f64>,
    a: &Array2<f64>,
    step: usize,
    s: usize,
) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    let (f, xc, th) = field.field_and_vjp_batch(x.view(), a)?;
    if f.iter().all(|v| v.is_finite()) && xc.iter().all(|v| v.is_finite()) {
        Ok((f, xc, th))
    } else {
        Err(Error::Diverged { step, stage: s })
    }
}

/// Training gradients by exact backprop through the unrolled integrator.
///
/// Same contract as [`adjoint_gradients`], but the forward pass records every
/// RK4 stage input and the backward pass replays them, so the result is the
/// exact gradient of the discrete update (memory grows with `n_steps`).
pub fn unrolled_gradients(
    field: &HamiltonianField,
    x0s: &[State],
    loss_cotangents: &Array2<f64>,
    spec: &IntegrationSpec,
) -> Result<(ParamVector, Array2<f64>)> {
    let m = check_batch(field, x0s)?;
    spec.validate()?;
    let (d, n) = m.dim();
    if loss_cotangents.dim() != (d, n) {
        return Err(Error::invalid(format!(
            "loss cotangents shape {:?} does not match batch {:?}",
            loss_cotangents.dim(),
            (d, n)
        )));
    }
    let h = spec.step_size();
    let param_dims = field.param_layer_dims();
    let p_len = param_dims.as_ref().map_or(0, |dims| crate::diff::param_len(dims));

    let per_chunk = over_chunks(n, |r| {
        // Forward, recording the four stage inputs of every step.
        let mut stages: Vec<[Array2<f64>; 4]> = Vec::with_capacity(spec.n_steps);
        let mut x = m.slice(ndarray::s![.., r.clone()]).to_owned();
        for step in 0..spec.n_steps {
            let k1 = stage(field, &x, step, 1)?;
            let u2 = stage_input(&x, 0.5 * h, &k1);
            let k2 = stage(field, &u2, step, 2)?;
            let u3 = stage_input(&x, 0.5 * h, &k2);
            let k3 = stage(field, &u3, step, 3)?;
            let u4 = stage_input(&x, h, &k3);
            let k4 = stage(field, &u4, step, 4)?;
            let mut next = x.clone();
            next.scaled_add(h / 6.0, &k1);
            next.scaled_add(h / 3.0, &k2);
            next.scaled_add(h / 3.0, &k3);
            next.scaled_add(h / 6.0, &k4);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { step, stage: 5 });
            }
            stages.push([x, u2, u3, u4]);
            x = next;
        }

        // Backward: pull the update x_{k+1} = x_k + h/6 (k1 + 2k2 + 2k3 + k4)
        // apart stage by stage, newest first.
        let mut xbar = loss_cotangents
            .slice(ndarray::s![.., r.clone()])
            .to_owned();
        let mut theta = vec![0.0; p_len];
        for step_stages in stages.iter().rev() {
            let [u1, u2, u3, u4] = step_stages;
            let kbar4 = xbar.mapv(|v| v * (h / 6.0));
            let (vx4, vth4) = field.vjp_batch(u4.view(), &kbar4)?;

            let mut kbar3 = xbar.mapv(|v| v * (h / 3.0));
            kbar3.scaled_add(h, &vx4);
            let (vx3, vth3) = field.vjp_batch(u3.view(), &kbar3)?;

            let mut kbar2 = xbar.mapv(|v| v * (h / 3.0));
            kbar2.scaled_add(0.5 * h, &vx3);
            let (vx2, vth2) = field.vjp_batch(u2.view(), &kbar2)?;

            let mut kbar1 = xbar.mapv(|v| v * (h / 6.0));
            kbar1.scaled_add(0.5 * h, &vx2);
            let (vx1, vth1) = field.vjp_batch(u1.view(), &kbar1)?;

            xbar += &vx1;
            xbar += &vx2;
            xbar += &vx3;
            xbar += &vx4;
            for i in 0..theta.len() {
                theta[i] += vth4[i] + vth3[i] + vth2[i] + vth1[i];
            }
        }
        Ok((r, xbar, theta))
    })?;

    let mut theta_total = vec![0.0; p_len];
    let mut input_cots = Array2::zeros((d, n));
    for (range, xbar, theta) in per_chunk {
        input_cots.slice_mut(ndarray::s![.., range]).assign(&xbar);
        for (acc, v) in theta_total.iter_mut().zip(&theta) {
            *acc += v;
        }
    }
    let theta = match param_dims {
        Some(dims) => ParamVector::from_flat(dims, theta_total)?,
        None => ParamVector::empty(),
    };
    Ok((theta, input_cots))
}
