//! Throwaway calibration: times one default-size training step and runs a
//! small rehearsal to watch the adversarial dynamics.

use hamflow::domains::builtin_benchmark;
use hamflow::gan::{seeded_components, train, train_step, OptimizerState, TrainConfig};
use hamflow::metrics::sliced_wasserstein;
use hamflow::ode;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("step");

    match mode {
        "step" => time_default_step(),
        "rehearse" => rehearse(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5),
        ),
        "criterion" => criterion_run(),
        other => eprintln!("unknown mode {other}"),
    }
}

/// The full acceptance-benchmark configuration, with per-epoch evaluation
/// against held-out sample sets.
fn criterion_run() {
    let cfg = TrainConfig::new(2, 20, 10_000, 42);
    let (da, db) = builtin_benchmark("two_gaussians").unwrap();
    let (mut flow, mut disc, mut sa, mut sb) = seeded_components(&cfg, &da, &db).unwrap();
    let spec = cfg.integration().unwrap();

    let eval_a = sa.sample_at(10_000_000, 4096);
    let eval_b = sb.sample_at(10_000_000, 4096);
    let am = hamflow::field::states_to_matrix(&eval_a).unwrap();
    let bm = hamflow::field::states_to_matrix(&eval_b).unwrap();
    let eval_sw = |f: &hamflow::field::HamiltonianField| {
        let pushed = ode::integrate_finals(f, &am, &spec).unwrap();
        sliced_wasserstein(pushed.view(), bm.view(), 128, 0).unwrap()
    };
    let sw0 = eval_sw(&flow);
    println!("baseline SW: {sw0:.6}");

    let t0 = Instant::now();
    let hist = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg, |snap| {
        let sw = eval_sw(snap.flow);
        let last = &snap.history.records.last().unwrap().metrics;
        println!(
            "epoch {:>2}: eval_sw={:.4} ({:.1}% of baseline) step_sw={:.4} loss_d={:.4} loss_g={:.4} drift={:.2e} |g_f|={:.2e} [{:.1} min]",
            snap.epoch,
            sw,
            100.0 * sw / sw0,
            last.sw_dist,
            last.loss_disc,
            last.loss_gen,
            last.ham_drift,
            last.grad_norm_flow,
            t0.elapsed().as_secs_f64() / 60.0
        );
        Ok(())
    })
    .unwrap();
    println!("total: {} steps in {:.1} min", hist.len(), t0.elapsed().as_secs_f64() / 60.0);
    let swf = eval_sw(&flow);
    println!("final SW {swf:.6}, reduction {:.2}%", 100.0 * (1.0 - swf / sw0));

    // Milestone bookkeeping from the per-step history (batch-level signal).
    if let Some(first) = hist
        .records
        .iter()
        .find(|r| r.metrics.sw_dist <= 0.5 * hist.records[0].metrics.sw_dist)
    {
        println!(
            "step-level 50% milestone first hit at step {} (epoch {})",
            first.step, first.epoch
        );
    } else {
        println!("step-level 50% milestone never hit");
    }
}

fn time_default_step() {
    let cfg = TrainConfig::new(2, 1, 256, 42);
    let (da, db) = builtin_benchmark("two_gaussians").unwrap();
    let (mut flow, mut disc, mut sa, mut sb) = seeded_components(&cfg, &da, &db).unwrap();
    let mut of = OptimizerState::zeros_for(&flow.param_layer_dims().unwrap());
    let mut od = OptimizerState::zeros_for(disc.net().layer_dims());
    let ba = sa.sample(cfg.batch_size);
    let bb = sb.sample(cfg.batch_size);

    // Warm step then timed steps.
    let m = train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();
    println!("warm: {m:?}");
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let ba = sa.sample(cfg.batch_size);
        let bb = sb.sample(cfg.batch_size);
        train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("default-size train_step: {per:.3} s");
    println!(
        "projected 20 epochs x 10000 samples (781 steps): {:.1} min",
        per * 781.0 / 60.0
    );
}

fn rehearse(width: usize, n_steps: usize, epochs: usize) {
    let mut cfg = TrainConfig::new(2, epochs, 2048, 42);
    cfg.hidden_width = width;
    cfg.n_steps = n_steps;
    cfg.batch_size = 128;
    let (da, db) = builtin_benchmark("two_gaussians").unwrap();
    let (mut flow, mut disc, mut sa, mut sb) = seeded_components(&cfg, &da, &db).unwrap();

    // Baseline: untrained transport vs target.
    let spec = cfg.integration().unwrap();
    let a0 = sa.sample_at(1_000_000, 2048);
    let b0 = sb.sample_at(1_000_000, 2048);
    let a0m = hamflow::field::states_to_matrix(&a0).unwrap();
    let b0m = hamflow::field::states_to_matrix(&b0).unwrap();
    let f0 = ode::integrate_finals(&flow, &a0m, &spec).unwrap();
    let sw0 = sliced_wasserstein(f0.view(), b0m.view(), 256, 7).unwrap();
    println!("initial SW: {sw0:.4}");

    let t0 = Instant::now();
    let hist = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg, |snap| {
        let last = &snap.history.records.last().unwrap().metrics;
        let f = ode::integrate_finals(snap.flow, &a0m, &spec).unwrap();
        let sw = sliced_wasserstein(f.view(), b0m.view(), 256, 7).unwrap();
        println!(
            "epoch {:>2}: eval_sw={:.4} step_sw={:.4} loss_d={:.4} loss_g={:.4} drift={:.2e} |g_f|={:.2e}",
            snap.epoch, sw, last.sw_dist, last.loss_disc, last.loss_gen, last.ham_drift, last.grad_norm_flow
        );
        Ok(())
    })
    .unwrap();
    println!(
        "{} steps in {:.1} s ({:.3} s/step)",
        hist.len(),
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() / hist.len() as f64
    );
    let f1 = ode::integrate_finals(&flow, &a0m, &spec).unwrap();
    let sw1 = sliced_wasserstein(f1.view(), b0m.view(), 256, 7).unwrap();
    println!(
        "final SW: {sw1:.4} (reduction {:.1}%)",
        100.0 * (1.0 - sw1 / sw0)
    );
}
