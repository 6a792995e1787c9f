//! Distribution distances and flow-quality diagnostics.
//!
//! Everything here is deterministic: random projection directions come from
//! a [`CounterRng`] seed, so a metric value is reproducible from its inputs
//! alone.

use crate::csvio;
use crate::error::{Error, Result};
use crate::field::HamiltonianField;
use crate::ode::{self, BatchTrajectory, IntegrationSpec, Trajectory};
use crate::rng::CounterRng;
use ndarray::{Array1, Array2, ArrayView2};
use std::io::Write;
use std::path::Path;

/// Sliced Wasserstein-1 distance between two point clouds.
///
/// `x` and `y` hold one point per **column** (the crate-wide batch layout);
/// they must share the row count `d >= 1` but may have different numbers of
/// points. The estimate averages the exact one-dimensional Wasserstein-1
/// distance over `n_projections` random unit directions drawn from `seed`:
/// direction `j` consumes RNG counters `j*s .. (j+1)*s` with
/// `s = 2*ceil(d/2)` (Box-Muller pairs, then normalized), so the direction
/// set — and therefore the returned value — is a pure function of
/// `(d, n_projections, seed)`.
pub fn sliced_wasserstein(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let d = x.nrows();
    if d == 0 {
        return Err(Error::invalid("points must have at least one coordinate".to_string()));
    }
    if y.nrows() != d {
        return Err(Error::shape("point dimension", d, y.nrows()));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::invalid(
            "sliced Wasserstein needs at least one point on each side".to_string(),
        ));
    }
    if n_projections == 0 {
        return Err(Error::invalid("need at least one projection".to_string()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("sliced Wasserstein input"));
    }

    let dirs = projection_directions(d, n_projections, seed);
    // (n_proj x d) . (d x n) — every projection in one pass per cloud.
    let px = dirs.dot(&x);
    let py = dirs.dot(&y);

    let total: f64 = (0..n_projections)
        .map(|j| {
            let mut xs = px.row(j).to_vec();
            let mut ys = py.row(j).to_vec();
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            w1_sorted(&xs, &ys)
        })
        .sum();
    Ok(total / n_projections as f64)
}

/// Random unit directions, one per row.
fn projection_directions(d: usize, n_projections: usize, seed: u64) -> Array2<f64> {
    let rng = CounterRng::new(seed);
    let pairs = d.div_ceil(2);
    let stride = 2 * pairs as u64;
    let mut dirs = Array2::zeros((n_projections, d));
    for j in 0..n_projections {
        let base = j as u64 * stride;
        let mut row = dirs.row_mut(j);
        for p in 0..pairs {
            let (z0, z1) = rng.normal_pair(base + 2 * p as u64);
            row[2 * p] = z0;
            if 2 * p + 1 < d {
                row[2 * p + 1] = z1;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else {
            // A zero draw is essentially impossible, but the direction set
            // must still be well-defined.
            row[0] = 1.0;
        }
    }
    dirs
}

/// Exact Wasserstein-1 between two sorted one-dimensional samples.
///
/// Equal sizes pair off order statistics; unequal sizes integrate
/// `|F_x^{-1}(t) - F_y^{-1}(t)|` over the union of the two quantile grids.
/// Grid boundaries are compared as exact integer ratios so mass is never
/// split by float rounding.
fn w1_sorted(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len(), y.len());
    if n == m {
        return x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        // Upper quantile boundaries of the current order statistics.
        let bx = (i + 1) as f64 / n as f64;
        let by = (j + 1) as f64 / m as f64;
        // (i+1)/n vs (j+1)/m as integers: (i+1)*m vs (j+1)*n.
        let lhs = (i + 1) as u128 * m as u128;
        let rhs = (j + 1) as u128 * n as u128;
        let next = if lhs <= rhs { bx } else { by };
        total += (next - t) * (x[i] - y[j]).abs();
        t = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    total
}

/// Largest excursion of the Hamiltonian along one path:
/// `max_k |H(x_k) - H(x_0)|`. An exactly conserved flow returns 0.
pub fn hamiltonian_drift(field: &HamiltonianField, traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::invalid("empty trajectory".to_string()));
    }
    let h0 = field.hamiltonian_value(traj.initial_state())?;
    let mut drift: f64 = 0.0;
    for s in &traj.states {
        drift = drift.max((field.hamiltonian_value(s)? - h0).abs());
    }
    Ok(drift)
}

/// Mean over samples of the per-sample [`hamiltonian_drift`].
pub fn hamiltonian_drift_batch(field: &HamiltonianField, traj: &BatchTrajectory) -> Result<f64> {
    if traj.is_empty() || traj.n_samples() == 0 {
        return Err(Error::invalid("empty trajectory batch".to_string()));
    }
    let h0 = field.value_batch(traj.states[0].view())?;
    let mut drift = Array1::zeros(traj.n_samples());
    for m in &traj.states {
        let h = field.value_batch(m.view())?;
        for (dr, (hv, h0v)) in drift.iter_mut().zip(h.iter().zip(h0.iter())) {
            *dr = f64::max(*dr, (hv - h0v).abs());
        }
    }
    Ok(drift.mean().expect("batch is non-empty"))
}

/// Mean Euclidean gap after transporting a batch forward over `spec` and
/// back again: `mean_j ||reverse(forward(x_j)) - x_j||`. The flow is
/// invertible by construction, so this measures only integrator error.
pub fn round_trip_error(
    field: &HamiltonianField,
    batch: &[crate::field::State],
    spec: &IntegrationSpec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch".to_string()));
    }
    let x0 = crate::field::states_to_matrix(batch)?;
    if x0.nrows() != field.dim() {
        return Err(Error::shape("round-trip batch", field.dim(), x0.nrows()));
    }
    let fwd = ode::integrate_finals(field, &x0, spec)?;
    let back = ode::integrate_finals(field, &fwd, &spec.reversed())?;
    let diff = &back - &x0;
    let mean = (0..diff.ncols())
        .map(|j| diff.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / diff.ncols() as f64;
    Ok(mean)
}

/// Configuration for [`excessive_integration_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    /// Integrate out to this multiple of the trained horizon.
    pub t_max_factor: f64,
    /// Projections per sliced-Wasserstein evaluation.
    pub n_projections: usize,
    /// Seed for the projection directions.
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            t_max_factor: 2.5,
            n_projections: 128,
            seed: 0,
        }
    }
}

/// One recorded time in a sweep. Metrics are `NaN` when `diverged` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Time as a fraction of the trained horizon (1.0 = the trained stop).
    pub t_frac: f64,
    /// Sliced Wasserstein distance from the transported batch to the target
    /// reference sample.
    pub sw_to_b: f64,
    /// Same, to the source reference sample.
    pub sw_to_a: f64,
    /// Mean Euclidean norm of the transported batch.
    pub mean_norm: f64,
    /// Mean `|H(x(t)) - H(x(0))|` over the batch.
    pub ham_drift: f64,
    /// True once any sample's integration has blown up before this time.
    pub diverged: bool,
}

/// What happens when a translation flow is integrated past its trained
/// horizon. See [`excessive_integration_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// The non-diverged row with the smallest distance to the target.
    pub fn min_sw_to_b(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| !r.diverged)
            .min_by(|a, b| a.sw_to_b.total_cmp(&b.sw_to_b))
    }

    /// The row nearest a given time fraction.
    pub fn row_at(&self, t_frac: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .min_by(|a, b| (a.t_frac - t_frac).abs().total_cmp(&(b.t_frac - t_frac).abs()))
    }

    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(|r| r.diverged)
    }

    /// CSV with columns `t_frac,sw_to_B,sw_to_A,mean_norm,ham_drift,diverged`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"t_frac,sw_to_B,sw_to_A,mean_norm,ham_drift,diverged\n")?;
        for r in &self.rows {
            let line = format!(
                "{},{},{},{},{},{}\n",
                csvio::fmt_f64(r.t_frac),
                csvio::fmt_f64(r.sw_to_b),
                csvio::fmt_f64(r.sw_to_a),
                csvio::fmt_f64(r.mean_norm),
                csvio::fmt_f64(r.ham_drift),
                r.diverged
            );
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        csvio::write_file_atomic(path, &buf)
    }
}

/// Integrate a source batch out to `t_max_factor` times the trained horizon
/// in **one** pass, recording roughly every tenth of the horizon, and score
/// each recorded time against reference samples from both domains.
///
/// The long run reuses the trained step count per unit time
/// (`round(factor * n_steps)` steps total), so up to the trained horizon it
/// takes exactly the same steps the plain translation takes. Divergence past
/// some time does not fail the sweep; later rows are flagged instead.
pub fn excessive_integration_sweep(
    field: &HamiltonianField,
    batch_a: &[crate::field::State],
    ref_a: ArrayView2<f64>,
    ref_b: ArrayView2<f64>,
    spec: &IntegrationSpec,
    params: &SweepParams,
) -> Result<SweepReport> {
    if !(params.t_max_factor.is_finite() && params.t_max_factor > 0.0) {
        return Err(Error::invalid(format!(
            "t_max_factor must be positive and finite, got {}",
            params.t_max_factor
        )));
    }
    if batch_a.is_empty() {
        return Err(Error::invalid("empty sweep batch".to_string()));
    }
    let x0 = crate::field::states_to_matrix(batch_a)?;
    if x0.nrows() != field.dim() {
        return Err(Error::shape("sweep batch", field.dim(), x0.nrows()));
    }

    let horizon = spec.time_at(spec.n_steps) - spec.time_at(0);
    let total_steps = ((params.t_max_factor * spec.n_steps as f64).round() as usize).max(1);
    let long = IntegrationSpec::new(
        spec.time_at(0),
        spec.time_at(0) + params.t_max_factor * horizon,
        total_steps,
    )?;

    // Record every ~tenth of the trained horizon, plus the endpoint.
    let interval = (spec.n_steps / 10).max(1);
    let mut record_steps: Vec<usize> = (0..=total_steps).step_by(interval).collect();
    if *record_steps.last().expect("never empty") != total_steps {
        record_steps.push(total_steps);
    }

    let n = x0.ncols();
    let h = long.step_size();
    // Each chunk walks the whole span once, keeping states at record points
    // until it diverges (if it does).
    let per_chunk = crate::exec::map_chunks(n, |r| {
        let mut x = x0.slice(ndarray::s![.., r.clone()]).to_owned();
        let mut recs: Vec<Option<Array2<f64>>> = Vec::with_capacity(record_steps.len());
        recs.push(Some(x.clone()));
        let mut next_rec = 1usize;
        for step in 0..total_steps {
            match ode::rk4_step_matrix(field, &x, h, step) {
                Ok(nx) => x = nx,
                Err(_) => break,
            }
            if next_rec < record_steps.len() && record_steps[next_rec] == step + 1 {
                recs.push(Some(x.clone()));
                next_rec += 1;
            }
        }
        recs.resize(record_steps.len(), None);
        Ok((r, recs))
    })?;

    let d = x0.nrows();
    let h0 = field.value_batch(x0.view())?;
    let mut rows = Vec::with_capacity(record_steps.len());
    for (slot, step) in record_steps.iter().enumerate() {
        let t_frac = (long.time_at(*step) - long.time_at(0)) / horizon;
        let mut assembled = Array2::zeros((d, n));
        let mut diverged = false;
        for (range, recs) in &per_chunk {
            match &recs[slot] {
                Some(m) => assembled
                    .slice_mut(ndarray::s![.., range.clone()])
                    .assign(m),
                None => diverged = true,
            }
        }
        if diverged {
            rows.push(SweepRow {
                t_frac,
                sw_to_b: f64::NAN,
                sw_to_a: f64::NAN,
                mean_norm: f64::NAN,
                ham_drift: f64::NAN,
                diverged: true,
            });
            continue;
        }
        let sw_to_b =
            sliced_wasserstein(assembled.view(), ref_b, params.n_projections, params.seed)?;
        let sw_to_a =
            sliced_wasserstein(assembled.view(), ref_a, params.n_projections, params.seed)?;
        let mean_norm = (0..n)
            .map(|j| assembled.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
        let ht = field.value_batch(assembled.view())?;
        let ham_drift = ht
            .iter()
            .zip(h0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
        rows.push(SweepRow {
            t_frac,
            sw_to_b,
            sw_to_a,
            mean_norm,
            ham_drift,
            diverged: false,
        });
    }
    Ok(SweepReport { rows })
}

/// Agreement between the crate's gradient routes on the probe loss
/// `L = mean_j 0.5 ||x_j(t1)||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// The probe loss value.
    pub loss: f64,
    /// Relative L2 distance between the adjoint and unrolled parameter
    /// gradients (0 when the field has no parameters).
    pub adjoint_vs_unrolled: f64,
    /// Relative L2 distance between the adjoint gradient and a central
    /// finite difference, over the probed coordinates.
    pub adjoint_vs_fd: f64,
    /// How many parameter coordinates were probed by finite differences.
    pub probed: usize,
}

/// Cross-check the adjoint gradient against the unrolled gradient and
/// against seeded finite differences.
///
/// At most `max_probes` parameter coordinates are probed (a seeded random
/// subset when the field has more); `fd_eps` is the central-difference step.
pub fn gradient_consistency_report(
    field: &HamiltonianField,
    batch: &[crate::field::State],
    spec: &IntegrationSpec,
    max_probes: usize,
    fd_eps: f64,
    probe_seed: u64,
) -> Result<GradientCheck> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch".to_string()));
    }
    if !(fd_eps.is_finite() && fd_eps > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {fd_eps}"
        )));
    }
    if max_probes == 0 {
        return Err(Error::invalid("need at least one probe coordinate".to_string()));
    }
    let x0 = crate::field::states_to_matrix(batch)?;
    let b = x0.ncols() as f64;

    let finals = ode::integrate_finals(field, &x0, spec)?;
    let loss = 0.5 * finals.iter().map(|v| v * v).sum::<f64>() / b;
    let cot = finals.mapv(|v| v / b);

    let (g_adj, _) = ode::adjoint_gradients(field, batch, &cot, spec)?;
    let (g_unr, _) = ode::unrolled_gradients(field, batch, &cot, spec)?;
    let adjoint_vs_unrolled = relative_l2(g_adj.values(), g_unr.values());

    let n_params = g_adj.len();
    if n_params == 0 {
        return Ok(GradientCheck {
            loss,
            adjoint_vs_unrolled,
            adjoint_vs_fd: 0.0,
            probed: 0,
        });
    }

    let probes = probe_indices(n_params, max_probes, probe_seed);
    let base = field.params();
    let mut fd_sub = Vec::with_capacity(probes.len());
    let mut adj_sub = Vec::with_capacity(probes.len());
    let mut probed_field = field.clone();
    for &c in &probes {
        let mut theta = base.clone();
        theta.values_mut()[c] += fd_eps;
        probed_field.set_params(&theta)?;
        let lp = probe_loss(&probed_field, &x0, spec)?;
        theta.values_mut()[c] -= 2.0 * fd_eps;
        probed_field.set_params(&theta)?;
        let lm = probe_loss(&probed_field, &x0, spec)?;
        fd_sub.push((lp - lm) / (2.0 * fd_eps));
        adj_sub.push(g_adj.values()[c]);
    }
    Ok(GradientCheck {
        loss,
        adjoint_vs_unrolled,
        adjoint_vs_fd: relative_l2(&adj_sub, &fd_sub),
        probed: probes.len(),
    })
}

fn probe_loss(field: &HamiltonianField, x0: &Array2<f64>, spec: &IntegrationSpec) -> Result<f64> {
    let finals = ode::integrate_finals(field, x0, spec)?;
    Ok(0.5 * finals.iter().map(|v| v * v).sum::<f64>() / x0.ncols() as f64)
}

/// `||a - b|| / max(||b||, tiny)`.
fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE.sqrt())
}

/// The first `max_probes` entries of a seeded shuffle of `0..n`.
fn probe_indices(n: usize, max_probes: usize, seed: u64) -> Vec<usize> {
    if n <= max_probes {
        return (0..n).collect();
    }
    let rng = CounterRng::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..max_probes {
        let span = (n - i) as f64;
        let j = i + (rng.unit(i as u64) * span) as usize;
        let j = j.min(n - 1);
        idx.swap(i, j);
    }
    idx.truncate(max_probes);
    idx
}
