//! The six commands and their exit-code contract.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 integration
//! divergence, 3 verification failure. Every file lands via a `.partial`
//! rename, and commands that populate an output directory hold a `.lock`
//! sentinel inside it for their duration.

use crate::config::{MetricsConfig, RunConfig};
use crate::svg;
use hamflow::domains::{
    load_batch, save_batch, Sampler, SyntheticDomain, BENCHMARK_NAMES,
};
use hamflow::field::{matrix_to_states, states_to_matrix, HamiltonianField, State};
use hamflow::gan::{seeded_components, train, Checkpoint, OptimizerState};
use hamflow::metrics::{self, SweepParams};
use hamflow::ode::{self, IntegrationSpec};
use hamflow::Error;
use ndarray::Array2;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// A command failure: what to print on standard error and which code to
/// exit with.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn verify(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        fn diverged(e: &Error) -> bool {
            match e {
                Error::Diverged { .. } => true,
                Error::TrainAborted { source, .. } => diverged(source),
                _ => false,
            }
        }
        Failure {
            code: if diverged(&e) { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

/// Write through a `.partial` sibling plus rename so readers never observe
/// a torn file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let io = |e: std::io::Error| Failure::config(format!("writing {}: {e}", path.display()));
    std::fs::write(&partial, bytes).map_err(io)?;
    std::fs::rename(&partial, path).map_err(io)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Failure::config(format!("serializing {}: {e}", path.display())))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Exclusive claim on an output directory via a `.lock` sentinel; released
/// on drop. A stale lock (from a killed process) must be removed by hand.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::config(
                format!(
                    "output directory {} is locked by another invocation (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(Failure::config(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Held-out evaluation batches. Seeds continue the training convention
/// (flow, disc, sampler A, sampler B take root..root+3): evaluation
/// samplers use root+4 (source) and root+5 (target), so they never overlap
/// the training stream.
fn eval_batches(
    domain_a: &SyntheticDomain,
    domain_b: &SyntheticDomain,
    root_seed: u64,
    n: usize,
) -> (Vec<State>, Vec<State>) {
    let a = Sampler::new(domain_a.clone(), root_seed.wrapping_add(4)).sample_at(0, n);
    let b = Sampler::new(domain_b.clone(), root_seed.wrapping_add(5)).sample_at(0, n);
    (a, b)
}

fn pushforward_distance(
    flow: &HamiltonianField,
    eval_a: &Array2<f64>,
    eval_b: &Array2<f64>,
    spec: &IntegrationSpec,
    metrics_cfg: &MetricsConfig,
) -> Result<f64, Failure> {
    let pushed = ode::integrate_finals(flow, eval_a, spec)?;
    Ok(metrics::sliced_wasserstein(
        pushed.view(),
        eval_b.view(),
        metrics_cfg.n_projections,
        metrics_cfg.seed,
    )?)
}

#[derive(Serialize)]
struct TrainMetricsDoc {
    sw_initial: f64,
    sw_final: f64,
    round_trip: f64,
    ham_drift: f64,
}

pub fn cmd_train(cfg: &RunConfig, base: &Path) -> Result<(), Failure> {
    let out = &cfg.out_dir;
    let _lock = DirLock::acquire(out)?;
    let (da, db) = cfg.load_domains(base)?;
    let (mut flow, mut disc, mut sa, mut sb) = seeded_components(&cfg.train, &da, &db)?;
    let spec = cfg.train.integration()?;

    let (eval_a, eval_b) = eval_batches(&da, &db, cfg.train.seed, cfg.metrics.eval_samples);
    let am = states_to_matrix(&eval_a)?;
    let bm = states_to_matrix(&eval_b)?;
    let sw_initial = pushforward_distance(&flow, &am, &bm, &spec, &cfg.metrics)?;

    let history_path = out.join("history.csv");
    let final_dir = out.join("checkpoint");
    let epochs = cfg.train.epochs;
    let every = cfg.checkpoint_every;
    let history = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg.train, |snap| {
        let ck = Checkpoint {
            flow: snap.flow.clone(),
            disc: snap.disc.clone(),
            opt_flow: snap.opt_flow.clone(),
            opt_disc: snap.opt_disc.clone(),
            config: cfg.train.clone(),
        };
        if every > 0 && (snap.epoch + 1) % every == 0 && snap.epoch + 1 != epochs {
            ck.save(&out.join("checkpoints").join(format!("epoch_{:04}", snap.epoch)))?;
        }
        if snap.epoch + 1 == epochs {
            ck.save(&final_dir)?;
        }
        snap.history.save_csv(&history_path)?;
        Ok(())
    })?;
    if epochs == 0 {
        // Nothing ran; persist the untrained starting point for inspection.
        let opt_flow = match flow.param_layer_dims() {
            Some(dims) => OptimizerState::zeros_for(&dims),
            None => OptimizerState::empty(),
        };
        Checkpoint {
            flow: flow.clone(),
            disc: disc.clone(),
            opt_flow,
            opt_disc: OptimizerState::zeros_for(disc.net().layer_dims()),
            config: cfg.train.clone(),
        }
        .save(&final_dir)?;
        history.save_csv(&history_path)?;
    }

    let sw_final = pushforward_distance(&flow, &am, &bm, &spec, &cfg.metrics)?;
    let round_trip = metrics::round_trip_error(&flow, &eval_a, &spec)?;
    let traj = ode::integrate_batch(&flow, &eval_a, &spec)?;
    let ham_drift = metrics::hamiltonian_drift_batch(&flow, &traj)?;
    write_json(
        &out.join("metrics.json"),
        &TrainMetricsDoc {
            sw_initial,
            sw_final,
            round_trip,
            ham_drift,
        },
    )?;
    println!(
        "trained {} steps: sw_initial={sw_initial:.6} sw_final={sw_final:.6} \
         round_trip={round_trip:.3e} ham_drift={ham_drift:.3e}",
        history.len()
    );
    Ok(())
}

/// Where per-sample trajectory CSVs land: `out.csv` -> `out.traj0003.csv`.
fn trajectory_path(output: &Path, j: usize) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".to_string());
    output.with_file_name(format!("{stem}.traj{j:04}.csv"))
}

pub fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    reverse: bool,
    save_trajectory: bool,
) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = ck.config.integration()?;
    let used = if reverse { spec.reversed() } else { spec };
    let batch = load_batch(input)?;
    let d = ck.flow.dim();
    if let Some(first) = batch.first() {
        if first.dim() != d {
            return Err(Failure::config(format!(
                "dimension mismatch: checkpoint expects d={d}, input rows have d={}",
                first.dim()
            )));
        }
    }

    let translated: Vec<State> = if batch.is_empty() {
        Vec::new()
    } else {
        let x = states_to_matrix(&batch)?;
        let finals = ode::integrate_finals(&ck.flow, &x, &used)?;
        matrix_to_states(&finals)?
    };
    save_batch(output, &translated, d)?;

    if save_trajectory && !batch.is_empty() {
        let traj = ode::integrate_batch(&ck.flow, &batch, &used)?;
        for j in 0..batch.len() {
            let mut buf = Vec::new();
            traj.sample(j)?.write_csv(&mut buf)?;
            atomic_write(&trajectory_path(output, j), &buf)?;
        }
    }
    println!(
        "translated {} samples{}",
        translated.len(),
        if reverse { " (reverse)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckDoc {
    name: String,
    value: f64,
    threshold: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerificationDoc {
    checks: Vec<CheckDoc>,
    all_pass: bool,
}

fn check(name: &str, value: f64, threshold: f64) -> CheckDoc {
    CheckDoc {
        name: name.to_string(),
        value,
        threshold,
        pass: value.is_finite() && value <= threshold,
    }
}

pub fn cmd_verify(cfg: &RunConfig, base: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let (da, _db) = cfg.load_domains(base)?;
    if da.dim() != ck.flow.dim() {
        return Err(Failure::config(format!(
            "domain dimension {} does not match checkpoint dimension {}",
            da.dim(),
            ck.flow.dim()
        )));
    }
    let v = &cfg.verify;
    let neural = ck
        .flow
        .as_neural()
        .ok_or_else(|| Failure::config("checkpoint flow is not a neural field"))?;
    let batch = Sampler::new(da.clone(), ck.config.seed.wrapping_add(4)).sample_at(0, v.samples);
    let spec = ck.config.integration()?;

    // Conservation and phase-space volume: the defining structural facts of
    // the field, checked pointwise on the sample batch.
    let mut conservation: f64 = 0.0;
    let mut divergence: f64 = 0.0;
    for x in &batch {
        let g = neural.net().input_gradient(x.coords(), &[1.0])?;
        let f = ck.flow.vector_field(x)?;
        let dot: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
        conservation = conservation.max(dot.abs() / (1.0 + ng * nf));
        divergence = divergence.max(ck.flow.divergence(x)?.abs());
    }

    let round_trip = metrics::round_trip_error(&ck.flow, &batch, &spec)?;
    let scale = batch.iter().map(|x| 1.0 + x.norm()).sum::<f64>() / batch.len() as f64;
    let traj = ode::integrate_batch(&ck.flow, &batch, &spec)?;
    let drift = metrics::hamiltonian_drift_batch(&ck.flow, &traj)?;

    let sub = &batch[..v.gradient_samples.min(batch.len())];
    let gc = metrics::gradient_consistency_report(
        &ck.flow,
        sub,
        &spec,
        v.fd_probes,
        v.fd_eps,
        cfg.metrics.seed,
    )?;

    let checks = vec![
        check("conservation_residual", conservation, v.max_conservation),
        check("divergence_residual", divergence, v.max_divergence),
        check(
            "relative_round_trip",
            round_trip / scale,
            v.max_relative_round_trip,
        ),
        check("ham_drift", drift, v.max_ham_drift),
        check(
            "adjoint_vs_unrolled",
            gc.adjoint_vs_unrolled,
            v.max_adjoint_vs_unrolled,
        ),
        check("adjoint_vs_fd", gc.adjoint_vs_fd, v.max_adjoint_vs_fd),
    ];
    let all_pass = checks.iter().all(|c| c.pass);

    let _lock = DirLock::acquire(&cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join("verification.json"),
        &VerificationDoc { checks: checks_doc(&checks), all_pass },
    )?;
    for c in &checks {
        println!(
            "{} {}: {:.3e} (threshold {:.3e})",
            if c.pass { "pass" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    if all_pass {
        Ok(())
    } else {
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::verify(format!(
            "verification failed: {}",
            failed.join(", ")
        )))
    }
}

// CheckDoc is not Clone (it is a one-way serialization type); rebuild the
// list for the JSON document.
fn checks_doc(checks: &[CheckDoc]) -> Vec<CheckDoc> {
    checks
        .iter()
        .map(|c| CheckDoc {
            name: c.name.clone(),
            value: c.value,
            threshold: c.threshold,
            pass: c.pass,
        })
        .collect()
}

/// Cap on scatter points per time slice in the sweep plot.
const SVG_MAX_POINTS: usize = 256;

pub fn cmd_sweep(cfg: &RunConfig, base: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let (da, db) = cfg.load_domains(base)?;
    if da.dim() != ck.flow.dim() {
        return Err(Failure::config(format!(
            "domain dimension {} does not match checkpoint dimension {}",
            da.dim(),
            ck.flow.dim()
        )));
    }
    let n = cfg.metrics.eval_samples;
    let sa = Sampler::new(da.clone(), ck.config.seed.wrapping_add(4));
    let batch_a = sa.sample_at(0, n);
    let ref_a = sa.sample_at(n as u64, n);
    let ref_b = Sampler::new(db.clone(), ck.config.seed.wrapping_add(5)).sample_at(0, n);
    let am = states_to_matrix(&ref_a)?;
    let bm = states_to_matrix(&ref_b)?;
    let spec = ck.config.integration()?;
    let params = SweepParams {
        t_max_factor: cfg.metrics.sweep_factor,
        n_projections: cfg.metrics.n_projections,
        seed: cfg.metrics.seed,
    };
    let report = metrics::excessive_integration_sweep(
        &ck.flow,
        &batch_a,
        am.view(),
        bm.view(),
        &spec,
        &params,
    )?;

    let _lock = DirLock::acquire(&cfg.out_dir)?;
    report.save_csv(&cfg.out_dir.join("sweep.csv"))?;

    let groups = sweep_plot_groups(&ck.flow, &batch_a, &spec, &params, &report)?;
    let horizon = spec.time_at(spec.n_steps) - spec.time_at(0);
    let plot = svg::sweep_scatter(&groups, horizon);
    atomic_write(&cfg.out_dir.join("sweep.svg"), plot.as_bytes())?;

    if report.any_diverged() {
        eprintln!(
            "warning: integration diverged inside the sweep; later rows are flagged in sweep.csv"
        );
    }
    let best = report
        .min_sw_to_b()
        .map(|r| format!("min sw_to_B {:.6} at t = {:.2}×T", r.sw_to_b, r.t_frac))
        .unwrap_or_else(|| "no non-diverged rows".to_string());
    println!("sweep: {} rows; {best}", report.rows.len());
    Ok(())
}

/// Re-integrate (a capped subset of) the batch over the non-diverged prefix
/// of the sweep grid, returning `(t_frac, states)` per recorded time.
fn sweep_plot_groups(
    flow: &HamiltonianField,
    batch_a: &[State],
    spec: &IntegrationSpec,
    params: &SweepParams,
    report: &metrics::SweepReport,
) -> Result<Vec<(f64, Array2<f64>)>, Failure> {
    let good_rows: Vec<&metrics::SweepRow> =
        report.rows.iter().take_while(|r| !r.diverged).collect();
    if good_rows.is_empty() {
        return Ok(Vec::new());
    }
    let subset = &batch_a[..SVG_MAX_POINTS.min(batch_a.len())];

    // Rebuild the sweep's exact grid: the long span uses the same step size
    // as the trained horizon, recording every n_steps/10 steps.
    let total_steps = ((params.t_max_factor * spec.n_steps as f64).round() as usize).max(1);
    let t0 = spec.time_at(0);
    let horizon = spec.time_at(spec.n_steps) - t0;
    let interval = (spec.n_steps / 10).max(1);
    let last_step = ((good_rows.len() - 1) * interval).min(total_steps);
    if last_step == 0 {
        let m = states_to_matrix(subset)?;
        return Ok(vec![(0.0, m)]);
    }
    let h = params.t_max_factor * horizon / total_steps as f64;
    let prefix = IntegrationSpec::new(t0, t0 + h * last_step as f64, last_step)?;
    let traj = ode::integrate_batch(flow, subset, &prefix)?;
    let mut groups = Vec::new();
    for (i, row) in good_rows.iter().enumerate() {
        let k = (i * interval).min(last_step);
        groups.push((row.t_frac, traj.states[k].clone()));
    }
    Ok(groups)
}

pub fn cmd_sample(
    benchmark: Option<&str>,
    side: char,
    domain_file: Option<&Path>,
    n: usize,
    seed: u64,
    output: &Path,
) -> Result<(), Failure> {
    let domain = match (benchmark, domain_file) {
        (Some(name), None) => {
            let (a, b) = builtin_or_listing(name)?;
            if side == 'a' {
                a
            } else {
                b
            }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::config(format!("cannot read domain file {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::config(format!("invalid domain file {}: {e}", path.display()))
            })?
        }
        _ => {
            return Err(Failure::config(
                "pass exactly one of --benchmark NAME or --domain FILE",
            ))
        }
    };
    let d = domain.dim();
    let batch = Sampler::new(domain, seed).sample_at(0, n);
    save_batch(output, &batch, d)?;
    println!("wrote {} samples to {}", n, output.display());
    Ok(())
}

fn builtin_or_listing(name: &str) -> Result<(SyntheticDomain, SyntheticDomain), Failure> {
    hamflow::domains::builtin_benchmark(name).map_err(|_| {
        Failure::config(format!(
            "unknown benchmark {name:?}; valid names: {}",
            BENCHMARK_NAMES.join(", ")
        ))
    })
}
