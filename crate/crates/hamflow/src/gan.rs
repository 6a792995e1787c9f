//! Adversarial training of the translation flow.
//!
//! A discriminator scores how target-like transported samples look; the flow
//! is updated through the continuous adjoint on the non-saturating generator
//! objective. There is no cycle-consistency term anywhere in the update: the
//! flow gradient is exactly the adjoint of the adversarial loss, and the
//! reverse map comes for free from reverse-time integration.

use crate::csvio;
use crate::diff::batch::{self, DerivOrder};
use crate::diff::{Activation, Mlp, OutputActivation, ParamVector};
use crate::domains::{Sampler, SyntheticDomain};
use crate::error::{Error, Result};
use crate::field::{states_to_matrix, HamiltonianField, NeuralHamiltonian, State};
use crate::metrics;
use crate::ode::{self, IntegrationSpec};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
/// logarithm, so the adversarial losses stay finite no matter how confident
/// the discriminator gets.
pub const PROB_CLAMP: f64 = 1e-7;

/// Projection count used for the per-step distance in training histories.
const HISTORY_SW_PROJECTIONS: usize = 128;

/// The adversary: a classifier estimating the probability that a point was
/// drawn from the target domain rather than transported into it.
///
/// Always an [`Mlp`] with exactly 3 hidden layers and a sigmoid output head,
/// so its output is a probability for every finite input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mlp", into = "Mlp")]
pub struct Discriminator {
    net: Mlp,
}

impl TryFrom<Mlp> for Discriminator {
    type Error = Error;
    fn try_from(net: Mlp) -> Result<Self> {
        Discriminator::new(net)
    }
}

impl From<Discriminator> for Mlp {
    fn from(d: Discriminator) -> Mlp {
        d.net
    }
}

impl Discriminator {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.layer_dims().len() != 5 {
            return Err(Error::invalid(format!(
                "discriminator needs exactly 3 hidden layers (5 layer dims), got {:?}",
                net.layer_dims()
            )));
        }
        if net.output_dim() != 1 {
            return Err(Error::shape("discriminator output", 1, net.output_dim()));
        }
        if net.output_activation() != OutputActivation::Sigmoid {
            return Err(Error::invalid(
                "discriminator output activation must be sigmoid".to_string(),
            ));
        }
        Ok(Discriminator { net })
    }

    /// Fresh discriminator `[d, w, w, w, 1]` with tanh hidden units.
    pub fn seeded(d: usize, hidden_width: usize, seed: u64) -> Result<Self> {
        let net = Mlp::seeded(
            vec![d, hidden_width, hidden_width, hidden_width, 1],
            Activation::Tanh,
            OutputActivation::Sigmoid,
            seed,
        )?;
        Discriminator::new(net)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Probability that `x` is a genuine target-domain point, clamped into
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]` so it is never exactly 0 or 1 even
    /// when the sigmoid saturates in floating point.
    pub fn prob(&self, x: &State) -> Result<f64> {
        let m = states_to_matrix(std::slice::from_ref(x))?;
        Ok(self.prob_batch(m.view())?[0])
    }

    /// [`Discriminator::prob`] for a column batch.
    pub fn prob_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape("discriminator input", self.input_dim(), x.nrows()));
        }
        let cache = batch::forward(&self.net, x, DerivOrder::Value);
        Ok(cache.output().row(0).mapv(clamp_prob))
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Derivative of [`clamp_prob`]: zero in the clamped zones.
fn clamp_active(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

/// Binary cross-entropy of the discriminator against labeled batches:
/// `-mean(log D(real)) - mean(log(1 - D(fake)))` with clamped probabilities.
pub fn discriminator_loss(disc: &Discriminator, real: &[State], fake: &[State]) -> Result<f64> {
    let real = states_to_matrix(real)?;
    let fake = states_to_matrix(fake)?;
    Ok(discriminator_loss_and_grad(disc, real.view(), fake.view())?.0)
}

/// [`discriminator_loss`] plus its gradient with respect to the
/// discriminator parameters, for column batches.
pub fn discriminator_loss_and_grad(
    disc: &Discriminator,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
) -> Result<(f64, ParamVector)> {
    let (loss_real, grad_real) = half_loss(disc, real, Side::Real)?;
    let (loss_fake, grad_fake) = half_loss(disc, fake, Side::Fake)?;
    let mut grad = grad_real;
    grad.axpy(1.0, &grad_fake)?;
    Ok((loss_real + loss_fake, grad))
}

enum Side {
    Real,
    Fake,
}

/// One BCE term and its parameter gradient: `-mean log D(x)` for real
/// batches, `-mean log(1 - D(x))` for fake ones.
fn half_loss(disc: &Discriminator, x: ArrayView2<f64>, side: Side) -> Result<(f64, ParamVector)> {
    if x.ncols() == 0 {
        return Err(Error::invalid(
            "adversarial losses need a non-empty batch".to_string(),
        ));
    }
    if x.nrows() != disc.input_dim() {
        return Err(Error::shape("discriminator input", disc.input_dim(), x.nrows()));
    }
    let n = x.ncols() as f64;
    let cache = batch::forward(&disc.net, x, DerivOrder::First);
    let raw = cache.output();
    let mut loss = 0.0;
    let mut vbar = Array2::zeros((1, x.ncols()));
    for (j, &y) in raw.row(0).iter().enumerate() {
        let p = clamp_prob(y);
        match side {
            Side::Real => {
                loss -= p.ln() / n;
                if clamp_active(y) {
                    vbar[[0, j]] = -1.0 / (n * p);
                }
            }
            Side::Fake => {
                loss -= (1.0 - p).ln() / n;
                if clamp_active(y) {
                    vbar[[0, j]] = 1.0 / (n * (1.0 - p));
                }
            }
        }
    }
    let out = batch::backprop(&disc.net, &cache, vbar.view(), false);
    let grad = ParamVector::from_flat(disc.net.layer_dims().to_vec(), out.theta)?;
    Ok((loss, grad))
}

/// Non-saturating generator objective `-mean(log D(fake))`, returning the
/// loss and its gradient with respect to every fake coordinate (one column
/// per sample) — exactly the cotangents the adjoint integration consumes.
pub fn generator_loss(disc: &Discriminator, fake: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if fake.ncols() == 0 {
        return Err(Error::invalid(
            "adversarial losses need a non-empty batch".to_string(),
        ));
    }
    if fake.nrows() != disc.input_dim() {
        return Err(Error::shape("discriminator input", disc.input_dim(), fake.nrows()));
    }
    let n = fake.ncols() as f64;
    let cache = batch::forward(&disc.net, fake, DerivOrder::First);
    let raw = cache.output();
    let mut loss = 0.0;
    let mut vbar = Array2::zeros((1, fake.ncols()));
    for (j, &y) in raw.row(0).iter().enumerate() {
        let p = clamp_prob(y);
        loss -= p.ln() / n;
        if clamp_active(y) {
            vbar[[0, j]] = -1.0 / (n * p);
        }
    }
    let out = batch::backprop(&disc.net, &cache, vbar.view(), true);
    let cotangents = out.input.expect("input gradients were requested");
    Ok((loss, cotangents))
}

/// Adaptive-moment optimizer accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub step_count: u64,
}

impl OptimizerState {
    /// Fresh zeroed state shaped for a network layout.
    pub fn zeros_for(layer_dims: &[usize]) -> Self {
        OptimizerState {
            first_moment: ParamVector::zeros_for(layer_dims),
            second_moment: ParamVector::zeros_for(layer_dims),
            step_count: 0,
        }
    }

    /// State for a parameterless field; every update is a no-op.
    pub fn empty() -> Self {
        OptimizerState {
            first_moment: ParamVector::empty(),
            second_moment: ParamVector::empty(),
            step_count: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update, returning the new parameters
/// and optimizer state. Fully deterministic.
pub fn adam_update(
    params: &ParamVector,
    grad: &ParamVector,
    opt: &OptimizerState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(ParamVector, OptimizerState)> {
    let mut p = params.clone();
    let mut o = opt.clone();
    adam_update_inplace(&mut p, grad, &mut o, lr, betas, eps)?;
    Ok((p, o))
}

/// In-place form of [`adam_update`] for the training loop.
pub fn adam_update_inplace(
    params: &mut ParamVector,
    grad: &ParamVector,
    opt: &mut OptimizerState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.layer_dims() != grad.layer_dims()
        || params.layer_dims() != opt.first_moment.layer_dims()
        || params.layer_dims() != opt.second_moment.layer_dims()
    {
        return Err(Error::invalid(
            "optimizer update: parameter, gradient, and moment layouts must match".to_string(),
        ));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    if !((0.0..1.0).contains(&betas.0) && (0.0..1.0).contains(&betas.1)) {
        return Err(Error::invalid(format!(
            "betas must lie in [0, 1), got ({}, {})",
            betas.0, betas.1
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    opt.step_count += 1;
    let t = opt.step_count.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - betas.0.powi(t);
    let bc2 = 1.0 - betas.1.powi(t);
    let m = opt.first_moment.values_mut();
    let v = opt.second_moment.values_mut();
    let p = params.values_mut();
    let g = grad.values();
    for i in 0..g.len() {
        m[i] = betas.0 * m[i] + (1.0 - betas.0) * g[i];
        v[i] = betas.1 * v[i] + (1.0 - betas.1) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrainConfigDoc", into = "TrainConfigDoc")]
pub struct TrainConfig {
    /// Phase-space dimension (even, at least 2).
    pub d: usize,
    /// Hidden width of both the Hamiltonian net and the discriminator.
    pub hidden_width: usize,
    /// Transport horizon; samples flow over `[0, t_horizon]`.
    pub t_horizon: f64,
    /// Integrator steps across the horizon.
    pub n_steps: usize,
    pub batch_size: usize,
    pub lr_flow: f64,
    pub lr_disc: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Discriminator updates per flow update.
    pub disc_steps_per_flow_step: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    /// Root seed; component seeds are derived at fixed offsets
    /// (see [`seeded_components`]).
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigDoc {
    d: usize,
    #[serde(default = "default_hidden_width")]
    hidden_width: usize,
    #[serde(rename = "T", default = "default_horizon")]
    t_horizon: f64,
    #[serde(default = "default_n_steps")]
    n_steps: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_lr_flow")]
    lr_flow: f64,
    #[serde(default = "default_lr_disc")]
    lr_disc: f64,
    #[serde(default = "default_betas")]
    betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    adam_eps: f64,
    #[serde(default = "default_disc_steps")]
    disc_steps_per_flow_step: usize,
    epochs: usize,
    samples_per_epoch: usize,
    #[serde(default)]
    seed: u64,
}

fn default_hidden_width() -> usize {
    128
}
fn default_horizon() -> f64 {
    1.0
}
fn default_n_steps() -> usize {
    100
}
fn default_batch_size() -> usize {
    256
}
fn default_lr_flow() -> f64 {
    1e-4
}
fn default_lr_disc() -> f64 {
    2e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_disc_steps() -> usize {
    1
}

impl TryFrom<TrainConfigDoc> for TrainConfig {
    type Error = Error;
    fn try_from(doc: TrainConfigDoc) -> Result<Self> {
        let cfg = TrainConfig {
            d: doc.d,
            hidden_width: doc.hidden_width,
            t_horizon: doc.t_horizon,
            n_steps: doc.n_steps,
            batch_size: doc.batch_size,
            lr_flow: doc.lr_flow,
            lr_disc: doc.lr_disc,
            betas: doc.betas,
            adam_eps: doc.adam_eps,
            disc_steps_per_flow_step: doc.disc_steps_per_flow_step,
            epochs: doc.epochs,
            samples_per_epoch: doc.samples_per_epoch,
            seed: doc.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<TrainConfig> for TrainConfigDoc {
    fn from(cfg: TrainConfig) -> TrainConfigDoc {
        TrainConfigDoc {
            d: cfg.d,
            hidden_width: cfg.hidden_width,
            t_horizon: cfg.t_horizon,
            n_steps: cfg.n_steps,
            batch_size: cfg.batch_size,
            lr_flow: cfg.lr_flow,
            lr_disc: cfg.lr_disc,
            betas: cfg.betas,
            adam_eps: cfg.adam_eps,
            disc_steps_per_flow_step: cfg.disc_steps_per_flow_step,
            epochs: cfg.epochs,
            samples_per_epoch: cfg.samples_per_epoch,
            seed: cfg.seed,
        }
    }
}

impl TrainConfig {
    /// Defaults everywhere except the run shape.
    pub fn new(d: usize, epochs: usize, samples_per_epoch: usize, seed: u64) -> Self {
        TrainConfig {
            d,
            hidden_width: default_hidden_width(),
            t_horizon: default_horizon(),
            n_steps: default_n_steps(),
            batch_size: default_batch_size(),
            lr_flow: default_lr_flow(),
            lr_disc: default_lr_disc(),
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            disc_steps_per_flow_step: default_disc_steps(),
            epochs,
            samples_per_epoch,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::invalid(format!(
                "state dimension must be even and at least 2, got {}",
                self.d
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be positive".to_string()));
        }
        if !(self.t_horizon.is_finite() && self.t_horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be positive and finite, got {}",
                self.t_horizon
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive".to_string()));
        }
        for (name, lr) in [("lr_flow", self.lr_flow), ("lr_disc", self.lr_disc)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if !((0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1)) {
            return Err(Error::invalid(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.betas.0, self.betas.1
            )));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        if self.disc_steps_per_flow_step == 0 {
            return Err(Error::invalid(
                "disc_steps_per_flow_step must be at least 1".to_string(),
            ));
        }
        if self.epochs > 0 && self.samples_per_epoch < self.batch_size {
            return Err(Error::invalid(format!(
                "samples_per_epoch ({}) must cover at least one batch ({})",
                self.samples_per_epoch, self.batch_size
            )));
        }
        Ok(())
    }

    /// The transport span `[0, t_horizon]` with this config's step count.
    pub fn integration(&self) -> Result<IntegrationSpec> {
        IntegrationSpec::forward(self.t_horizon, self.n_steps)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }
}

/// Build the flow, discriminator, and samplers a config describes, with
/// component seeds derived from the root seed at fixed offsets: flow at
/// `seed`, discriminator at `seed + 1`, source sampler at `seed + 2`, target
/// sampler at `seed + 3`. The same `(config, domains)` therefore always
/// yields the same starting point.
pub fn seeded_components(
    cfg: &TrainConfig,
    domain_a: &SyntheticDomain,
    domain_b: &SyntheticDomain,
) -> Result<(HamiltonianField, Discriminator, Sampler, Sampler)> {
    cfg.validate()?;
    for (name, dom) in [("source", domain_a), ("target", domain_b)] {
        if dom.dim() != cfg.d {
            return Err(Error::shape(name, cfg.d, dom.dim()));
        }
    }
    let flow = HamiltonianField::Neural(NeuralHamiltonian::seeded(
        cfg.d,
        cfg.hidden_width,
        cfg.seed,
    )?);
    let disc = Discriminator::seeded(cfg.d, cfg.hidden_width, cfg.seed.wrapping_add(1))?;
    let sampler_a = Sampler::new(domain_a.clone(), cfg.seed.wrapping_add(2));
    let sampler_b = Sampler::new(domain_b.clone(), cfg.seed.wrapping_add(3));
    Ok((flow, disc, sampler_a, sampler_b))
}

/// Diagnostics from one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Discriminator BCE at its last update of the step.
    pub loss_disc: f64,
    /// Generator loss on the re-transported batch.
    pub loss_gen: f64,
    /// Mean over the batch of the largest Hamiltonian excursion along each
    /// transport path.
    pub ham_drift: f64,
    pub grad_norm_flow: f64,
    pub grad_norm_disc: f64,
    /// Sliced Wasserstein distance between the transported batch and the
    /// real batch.
    pub sw_dist: f64,
}

/// One adversarial update of the discriminator and the flow.
///
/// In order: (1) transport the source batch; (2) update the discriminator
/// `disc_steps_per_flow_step` times on (real, transported) with the
/// transported samples detached; (3) re-transport the sources with the
/// current flow, backpropagate the generator loss through the adjoint, and
/// update the flow. The flow gradient is exactly the adjoint of the
/// adversarial objective — no other term enters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    flow: &mut HamiltonianField,
    disc: &mut Discriminator,
    batch_a: &[State],
    batch_b: &[State],
    opt_flow: &mut OptimizerState,
    opt_disc: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if flow.as_neural().is_none() {
        return Err(Error::invalid(
            "training requires a neural flow field".to_string(),
        ));
    }
    let spec = cfg.integration()?;
    let x0 = states_to_matrix(batch_a)?;
    let real = states_to_matrix(batch_b)?;
    for (name, m) in [("source batch", &x0), ("target batch", &real)] {
        if m.nrows() != cfg.d {
            return Err(Error::shape(name, cfg.d, m.nrows()));
        }
    }
    if flow.dim() != cfg.d || disc.input_dim() != cfg.d {
        return Err(Error::shape("trained models", cfg.d, flow.dim()));
    }

    // (1) Transport, keeping the paths for the conservation diagnostic.
    let traj = ode::integrate_batch(flow, batch_a, &spec)?;
    let fake = traj.finals().to_owned();
    let ham_drift = metrics::hamiltonian_drift_batch(flow, &traj)?;
    drop(traj);
    let sw_dist = metrics::sliced_wasserstein(
        fake.view(),
        real.view(),
        HISTORY_SW_PROJECTIONS,
        cfg.seed,
    )?;

    // (2) Discriminator update(s) on the detached transported batch.
    let mut loss_disc = 0.0;
    let mut grad_norm_disc = 0.0;
    for _ in 0..cfg.disc_steps_per_flow_step {
        let (l, g) = discriminator_loss_and_grad(disc, real.view(), fake.view())?;
        loss_disc = l;
        grad_norm_disc = g.norm();
        let mut p = disc.net().params();
        adam_update_inplace(&mut p, &g, opt_disc, cfg.lr_disc, cfg.betas, cfg.adam_eps)?;
        let mut net = disc.net().clone();
        net.set_params(&p)?;
        *disc = Discriminator::new(net)?;
    }

    // (3) Flow update: re-transport so the adjoint pass sees trajectories of
    // the current flow, then descend on the generator loss alone.
    let fake2 = ode::integrate_finals(flow, &x0, &spec)?;
    let (loss_gen, cotangents) = generator_loss(disc, fake2.view())?;
    let (g_flow, _) = ode::adjoint_gradients_from_final(flow, &fake2, &cotangents, &spec)?;
    let grad_norm_flow = g_flow.norm();
    let mut p = flow.params();
    adam_update_inplace(&mut p, &g_flow, opt_flow, cfg.lr_flow, cfg.betas, cfg.adam_eps)?;
    flow.set_params(&p)?;

    Ok(StepMetrics {
        loss_disc,
        loss_gen,
        ham_drift,
        grad_norm_flow,
        grad_norm_disc,
        sw_dist,
    })
}

/// One step's record in a training history.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Global step index, counted across epochs from 0.
    pub step: usize,
    pub epoch: usize,
    pub metrics: StepMetrics,
}

/// Per-step metrics for a whole run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<StepRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns
    /// `step,epoch,loss_disc,loss_gen,ham_drift,grad_norm_flow,grad_norm_disc,sw_dist`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(
            b"step,epoch,loss_disc,loss_gen,ham_drift,grad_norm_flow,grad_norm_disc,sw_dist\n",
        )?;
        for r in &self.records {
            let m = &r.metrics;
            let line = format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.epoch,
                csvio::fmt_f64(m.loss_disc),
                csvio::fmt_f64(m.loss_gen),
                csvio::fmt_f64(m.ham_drift),
                csvio::fmt_f64(m.grad_norm_flow),
                csvio::fmt_f64(m.grad_norm_disc),
                csvio::fmt_f64(m.sw_dist)
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

/// Borrowed view of everything worth checkpointing, handed to the per-epoch
/// hook of [`train`].
pub struct TrainSnapshot<'a> {
    /// Index of the epoch that just finished (0-based).
    pub epoch: usize,
    pub flow: &'a HamiltonianField,
    pub disc: &'a Discriminator,
    pub opt_flow: &'a OptimizerState,
    pub opt_disc: &'a OptimizerState,
    pub history: &'a TrainingHistory,
}

/// Run the full adversarial loop: `epochs` passes of
/// `samples_per_epoch / batch_size` steps, drawing fresh batches from both
/// samplers each step. `on_epoch` runs after every completed epoch (for
/// checkpointing); its errors abort the run. Any step error aborts with the
/// epoch and global step attached, leaving previously written checkpoints in
/// place. With `epochs = 0`, nothing changes and the history is empty.
pub fn train(
    flow: &mut HamiltonianField,
    disc: &mut Discriminator,
    sampler_a: &mut Sampler,
    sampler_b: &mut Sampler,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainSnapshot<'_>) -> Result<()>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let mut history = TrainingHistory::default();
    let mut opt_flow = match flow.param_layer_dims() {
        Some(dims) => OptimizerState::zeros_for(&dims),
        None => OptimizerState::empty(),
    };
    let mut opt_disc = OptimizerState::zeros_for(disc.net().layer_dims());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch() {
            let batch_a = sampler_a.sample(cfg.batch_size);
            let batch_b = sampler_b.sample(cfg.batch_size);
            let metrics = train_step(
                flow,
                disc,
                &batch_a,
                &batch_b,
                &mut opt_flow,
                &mut opt_disc,
                cfg,
            )
            .map_err(|e| Error::TrainAborted {
                epoch,
                step,
                source: Box::new(e),
            })?;
            history.records.push(StepRecord {
                step,
                epoch,
                metrics,
            });
            step += 1;
        }
        on_epoch(&TrainSnapshot {
            epoch,
            flow,
            disc,
            opt_flow: &opt_flow,
            opt_disc: &opt_disc,
            history: &history,
        })?;
    }
    Ok(history)
}

/// A trained (or training) state on disk: a directory holding `flow.json`,
/// `disc.json`, `optim.json`, and `config.json`. Every file is written
/// through a `.partial` rename, so a crash cannot leave a torn checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub flow: HamiltonianField,
    pub disc: Discriminator,
    pub opt_flow: OptimizerState,
    pub opt_disc: OptimizerState,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimDoc {
    flow: OptimizerState,
    disc: OptimizerState,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json_atomic(&dir.join("flow.json"), &self.flow)?;
        write_json_atomic(&dir.join("disc.json"), &self.disc)?;
        write_json_atomic(
            &dir.join("optim.json"),
            &OptimDoc {
                flow: self.opt_flow.clone(),
                disc: self.opt_disc.clone(),
            },
        )?;
        write_json_atomic(&dir.join("config.json"), &self.config)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let flow: HamiltonianField = read_json(&dir.join("flow.json"))?;
        let disc: Discriminator = read_json(&dir.join("disc.json"))?;
        let optim: OptimDoc = read_json(&dir.join("optim.json"))?;
        let config: TrainConfig = read_json(&dir.join("config.json"))?;
        Ok(Checkpoint {
            flow,
            disc,
            opt_flow: optim.flow,
            opt_disc: optim.disc,
            config,
        })
    }
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    csvio::write_file_atomic(path, &bytes)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_grad;
    use crate::domains::builtin_benchmark;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    /// Discriminator whose 3 tanh hidden layers shrink to one unit so the
    /// output probability is an invertible function of the first input
    /// coordinate — lets tests dial in exact output probabilities.
    fn chain_disc(d: usize, last_weight: f64, last_bias: f64) -> Discriminator {
        let mut w1 = Array2::zeros((1, d));
        w1[[0, 0]] = 1.0;
        let net = Mlp::from_parts(
            vec![d, 1, 1, 1, 1],
            vec![
                w1,
                Array2::from_elem((1, 1), 1.0),
                Array2::from_elem((1, 1), 1.0),
                Array2::from_elem((1, 1), last_weight),
            ],
            vec![
                ndarray::Array1::zeros(1),
                ndarray::Array1::zeros(1),
                ndarray::Array1::zeros(1),
                ndarray::Array1::from_elem(1, last_bias),
            ],
            Activation::Tanh,
            OutputActivation::Sigmoid,
        )
        .unwrap();
        Discriminator::new(net).unwrap()
    }

    fn zero_disc(d: usize, width: usize) -> Discriminator {
        let dims = vec![d, width, width, width, 1];
        let weights = (0..4)
            .map(|k| Array2::zeros((dims[k + 1], dims[k])))
            .collect();
        let biases = (0..4).map(|k| ndarray::Array1::zeros(dims[k + 1])).collect();
        let net = Mlp::from_parts(dims, weights, biases, Activation::Tanh, OutputActivation::Sigmoid)
            .unwrap();
        Discriminator::new(net).unwrap()
    }

    fn states(rows: &[[f64; 2]]) -> Vec<State> {
        rows.iter().map(|r| State::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn discriminator_shape_is_enforced() {
        let d = Discriminator::seeded(2, 8, 1).unwrap();
        assert_eq!(d.net().layer_dims(), &[2, 8, 8, 8, 1]);

        // Two hidden layers.
        let small = Mlp::seeded(vec![2, 8, 8, 1], Activation::Tanh, OutputActivation::Sigmoid, 0)
            .unwrap();
        assert!(Discriminator::new(small).is_err());
        // Wrong head.
        let ident = Mlp::seeded(
            vec![2, 8, 8, 8, 1],
            Activation::Tanh,
            OutputActivation::Identity,
            0,
        )
        .unwrap();
        assert!(Discriminator::new(ident).is_err());
        // Vector output.
        let wide = Mlp::seeded(
            vec![2, 8, 8, 8, 2],
            Activation::Tanh,
            OutputActivation::Sigmoid,
            0,
        )
        .unwrap();
        assert!(Discriminator::new(wide).is_err());
    }

    #[test]
    fn probabilities_stay_inside_the_open_interval() {
        let d = Discriminator::seeded(2, 8, 7).unwrap();
        for coords in [[0.0, 0.0], [1e6, -1e6], [-1e300, 1e300]] {
            let p = d.prob(&State::new(coords.to_vec()).unwrap()).unwrap();
            assert!(p > 0.0 && p < 1.0, "{coords:?} -> {p}");
        }
        // A hard-saturating head still reports a clamped probability.
        let sat = chain_disc(2, 1e4, 0.0);
        let p = sat.prob(&State::new(vec![5.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p, 1.0 - PROB_CLAMP);
    }

    #[test]
    fn discriminator_serde_round_trips() {
        let d = Discriminator::seeded(4, 6, 3).unwrap();
        let text = serde_json::to_string(&d).unwrap();
        let back: Discriminator = serde_json::from_str(&text).unwrap();
        assert_eq!(d, back);

        // A document with the wrong depth fails at the type boundary.
        let shallow = Mlp::seeded(vec![4, 6, 1], Activation::Tanh, OutputActivation::Sigmoid, 0)
            .unwrap();
        let text = serde_json::to_string(&shallow).unwrap();
        assert!(serde_json::from_str::<Discriminator>(&text).is_err());
    }

    #[test]
    fn indifferent_discriminator_gives_the_analytic_losses() {
        // All-zero weights: every input maps to probability exactly 0.5.
        let d = zero_disc(2, 8);
        let real = states(&[[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]]);
        let fake = states(&[[-2.0, 0.0], [0.25, 0.75]]);
        let loss = discriminator_loss(&d, &real, &fake).unwrap();
        assert_relative_eq!(loss, 2.0 * std::f64::consts::LN_2, max_relative = 1e-14);

        let fm = states_to_matrix(&fake).unwrap();
        let (gen, cot) = generator_loss(&d, fm.view()).unwrap();
        assert_relative_eq!(gen, std::f64::consts::LN_2, max_relative = 1e-14);
        // At p = 0.5 the chain rule still produces nonzero input gradients
        // only through the (zero) weights — so the cotangents vanish.
        assert!(cot.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_set_probabilities_reproduce_the_bce_value() {
        // Solve the output layer so D(real) = 0.8 and D(fake) = 0.3 exactly
        // (up to float rounding): with one unit per hidden layer the logit
        // is last_weight * v(x) + last_bias, linear in the two unknowns.
        let v = |x: f64| x.tanh().tanh().tanh();
        let (v_r, v_f) = (v(1.0), v(-1.0));
        let z_r = (0.8f64 / 0.2).ln();
        let z_f = (0.3f64 / 0.7).ln();
        let c = (z_r - z_f) / (v_r - v_f);
        let b = z_r - c * v_r;
        let d = chain_disc(2, c, b);

        let real = states(&[[1.0, 0.0]]);
        let fake = states(&[[-1.0, 0.0]]);
        assert_relative_eq!(
            d.prob(&real[0]).unwrap(),
            0.8,
            max_relative = 1e-12
        );
        assert_relative_eq!(d.prob(&fake[0]).unwrap(), 0.3, max_relative = 1e-12);

        let loss = discriminator_loss(&d, &real, &fake).unwrap();
        let expected = -(0.8f64.ln()) - (0.7f64.ln());
        assert_relative_eq!(loss, expected, max_relative = 1e-10);
        assert_relative_eq!(loss, 0.579818, max_relative = 1e-5);
    }

    #[test]
    fn saturated_discriminator_loss_is_clamped_not_infinite() {
        // A steep head saturates the sigmoid in f64; the clamp keeps both
        // log terms finite and the loss near its 2e-7 floor.
        let d = chain_disc(2, 1e4, 0.0);
        let real = states(&[[2.0, 0.0]]); // D -> 1 - 1e-7
        let fake = states(&[[-2.0, 0.0]]); // D -> 1e-7
        let loss = discriminator_loss(&d, &real, &fake).unwrap();
        assert!(loss > 0.0 && loss < 1e-6, "{loss}");
        assert_relative_eq!(loss, 2e-7, max_relative = 1e-6);

        // Generator wins: D(fake) -> 1 - 1e-7, loss -> ~1e-7.
        let winning = states_to_matrix(&real).unwrap();
        let (gen, cot) = generator_loss(&d, winning.view()).unwrap();
        assert!(gen > 0.0 && gen < 1e-6, "{gen}");
        assert_relative_eq!(gen, 1e-7, max_relative = 1e-6);
        // Clamped probabilities contribute no gradient.
        assert!(cot.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_batches_are_rejected() {
        let d = zero_disc(2, 4);
        let some = states(&[[0.0, 0.0]]);
        assert!(discriminator_loss(&d, &[], &some).is_err());
        assert!(discriminator_loss(&d, &some, &[]).is_err());
        let empty: Array2<f64> = Array2::zeros((2, 0));
        assert!(generator_loss(&d, empty.view()).is_err());
    }

    #[test]
    fn generator_cotangents_match_finite_differences() {
        let d = Discriminator::seeded(2, 8, 11).unwrap();
        let fake = states(&[[0.3, -0.2], [1.1, 0.4], [-0.6, 0.9], [0.0, 0.0]]);
        let fm = states_to_matrix(&fake).unwrap();
        let (_, cot) = generator_loss(&d, fm.view()).unwrap();

        let flat: Vec<f64> = fm.iter().copied().collect();
        let (rows, cols) = fm.dim();
        let fd = finite_diff_grad(
            |coords| {
                let m = Array2::from_shape_vec((rows, cols), coords.to_vec()).unwrap();
                generator_loss(&d, m.view()).map(|(l, _)| l)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        for (i, (got, want)) in cot.iter().zip(&fd).enumerate() {
            assert!(
                (got - want).abs() <= 1e-5 * (1.0 + want.abs()),
                "coordinate {i}: analytic {got}, finite difference {want}"
            );
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let d = Discriminator::seeded(2, 6, 5).unwrap();
        let real = states(&[[1.5, -0.5], [0.2, 0.8]]);
        let fake = states(&[[-1.0, 0.3], [0.6, -0.9], [0.1, 0.1]]);
        let rm = states_to_matrix(&real).unwrap();
        let fm = states_to_matrix(&fake).unwrap();
        let (_, grad) = discriminator_loss_and_grad(&d, rm.view(), fm.view()).unwrap();

        let theta0 = d.net().params();
        let fd = finite_diff_grad(
            |theta| {
                let mut net = d.net().clone();
                net.set_params(&ParamVector::from_flat(
                    net.layer_dims().to_vec(),
                    theta.to_vec(),
                )?)?;
                let probe = Discriminator::new(net)?;
                Ok(discriminator_loss_and_grad(&probe, rm.view(), fm.view())?.0)
            },
            theta0.values(),
            1e-6,
        )
        .unwrap();
        for (i, (got, want)) in grad.values().iter().zip(&fd).enumerate() {
            assert!(
                (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
                "parameter {i}: analytic {got}, finite difference {want}"
            );
        }
    }

    #[test]
    fn adam_first_step_is_minus_lr_times_sign() {
        let mut params = ParamVector::zeros_for(&[1, 1]);
        let mut grad = ParamVector::zeros_for(&[1, 1]);
        grad.values_mut()[0] = 1.0;
        let opt = OptimizerState::zeros_for(&[1, 1]);
        let (p1, o1) = adam_update(&params, &grad, &opt, 0.1, (0.9, 0.999), 1e-8).unwrap();
        // Bias correction makes the first step -lr * g / (|g| + eps').
        assert!((p1.values()[0] + 0.1).abs() < 1e-8, "{}", p1.values()[0]);
        // The untouched coordinate (zero gradient) must not move.
        assert_eq!(p1.values()[1], 0.0);
        assert_eq!(o1.step_count, 1);

        // A second identical gradient moves by ~lr again (within 1%).
        let (p2, _) = adam_update(&p1, &grad, &o1, 0.1, (0.9, 0.999), 1e-8).unwrap();
        let second = p2.values()[0] - p1.values()[0];
        assert!(
            (second + 0.1).abs() < 0.001,
            "second step {second} should be ~-0.1"
        );

        // Zero gradient on a fresh state is exactly a no-op.
        let (same, _) = adam_update(
            &params,
            &ParamVector::zeros_for(&[1, 1]),
            &opt,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        params.values_mut();
        assert_eq!(same.values(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_rejects_mismatched_shapes_and_bad_hyperparameters() {
        let params = ParamVector::zeros_for(&[1, 1]);
        let grad = ParamVector::zeros_for(&[2, 1]);
        let opt = OptimizerState::zeros_for(&[1, 1]);
        assert!(adam_update(&params, &grad, &opt, 0.1, (0.9, 0.999), 1e-8).is_err());

        let grad = ParamVector::zeros_for(&[1, 1]);
        assert!(adam_update(&params, &grad, &opt, -0.1, (0.9, 0.999), 1e-8).is_err());
        assert!(adam_update(&params, &grad, &opt, 0.1, (1.0, 0.999), 1e-8).is_err());
        assert!(adam_update(&params, &grad, &opt, 0.1, (0.9, 0.999), 0.0).is_err());
    }

    #[test]
    fn functional_and_inplace_updates_agree() {
        let mut params = ParamVector::zeros_for(&[2, 2]);
        for (i, v) in params.values_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let mut grad = ParamVector::zeros_for(&[2, 2]);
        for (i, v) in grad.values_mut().iter_mut().enumerate() {
            *v = (i as f64 - 2.0) * 0.3;
        }
        let opt = OptimizerState::zeros_for(&[2, 2]);
        let (p_fn, o_fn) = adam_update(&params, &grad, &opt, 0.01, (0.9, 0.999), 1e-8).unwrap();
        let mut p_ip = params.clone();
        let mut o_ip = opt.clone();
        adam_update_inplace(&mut p_ip, &grad, &mut o_ip, 0.01, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p_fn, p_ip);
        assert_eq!(o_fn, o_ip);
    }

    #[test]
    fn config_defaults_fill_in_and_unknown_keys_fail() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"d":2,"epochs":1,"samples_per_epoch":256}"#).unwrap();
        assert_eq!(cfg.hidden_width, 128);
        assert_eq!(cfg.t_horizon, 1.0);
        assert_eq!(cfg.n_steps, 100);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.lr_flow, 1e-4);
        assert_eq!(cfg.lr_disc, 2e-4);
        assert_eq!(cfg.betas, (0.9, 0.999));
        assert_eq!(cfg.adam_eps, 1e-8);
        assert_eq!(cfg.disc_steps_per_flow_step, 1);
        assert_eq!(cfg.seed, 0);

        // Horizon serializes under its short name.
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"T\":1.0"), "{text}");
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"d":2,"epochs":1,"samples_per_epoch":256,"momentum":0.9}"#
        )
        .is_err());
        // Validation runs at the parse boundary.
        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"d":3,"epochs":1,"samples_per_epoch":256}"#
        )
        .is_err());
        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"d":2,"epochs":1,"samples_per_epoch":256,"betas":[0.9,1.0]}"#
        )
        .is_err());
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = TrainConfig::new(2, 1, 256, 0);
        cfg.validate().unwrap();
        cfg.batch_size = 512; // larger than samples_per_epoch
        assert!(cfg.validate().is_err());
        cfg.epochs = 0; // no training planned: shape no longer matters
        cfg.validate().unwrap();
        cfg.lr_flow = 0.0; // zero learning rates are allowed
        cfg.validate().unwrap();
        cfg.t_horizon = -1.0;
        assert!(cfg.validate().is_err());
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(2, 1, 128, seed);
        cfg.hidden_width = 32;
        cfg.n_steps = 20;
        cfg.batch_size = 64;
        cfg
    }

    fn benchmark_setup(
        seed: u64,
    ) -> (
        TrainConfig,
        HamiltonianField,
        Discriminator,
        Sampler,
        Sampler,
    ) {
        let cfg = small_cfg(seed);
        let (da, db) = builtin_benchmark("two_gaussians").unwrap();
        let (flow, disc, sa, sb) = seeded_components(&cfg, &da, &db).unwrap();
        (cfg, flow, disc, sa, sb)
    }

    #[test]
    fn zero_learning_rates_leave_parameters_bitwise_unchanged() {
        let (mut cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(42);
        cfg.lr_flow = 0.0;
        cfg.lr_disc = 0.0;
        let flow_before = flow.params();
        let disc_before = disc.net().params();
        let mut of = OptimizerState::zeros_for(&flow.param_layer_dims().unwrap());
        let mut od = OptimizerState::zeros_for(disc.net().layer_dims());
        let ba = sa.sample(cfg.batch_size);
        let bb = sb.sample(cfg.batch_size);
        let m = train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();
        assert_eq!(flow.params(), flow_before);
        assert_eq!(disc.net().params(), disc_before);
        for v in [
            m.loss_disc,
            m.loss_gen,
            m.ham_drift,
            m.grad_norm_flow,
            m.grad_norm_disc,
            m.sw_dist,
        ] {
            assert!(v.is_finite());
        }
        assert!(m.sw_dist > 0.0);
        // The optimizer still advanced — only the step size was zero.
        assert_eq!(of.step_count, 1);
        assert_eq!(od.step_count, 1);
    }

    #[test]
    fn one_step_is_bit_deterministic() {
        let run = || {
            let (cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(42);
            let mut of = OptimizerState::zeros_for(&flow.param_layer_dims().unwrap());
            let mut od = OptimizerState::zeros_for(disc.net().layer_dims());
            let ba = sa.sample(cfg.batch_size);
            let bb = sb.sample(cfg.batch_size);
            let m = train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();
            (
                flow.params().values().to_vec(),
                disc.net().params().values().to_vec(),
                m,
            )
        };
        let (f1, d1, m1) = run();
        let (f2, d2, m2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f1), bits(&f2));
        assert_eq!(bits(&d1), bits(&d2));
        assert_eq!(m1, m2);
    }

    #[test]
    fn flow_update_is_exactly_adam_on_the_adversarial_gradient() {
        // With the discriminator frozen, the flow step must match a by-hand
        // replay of: transport, generator loss, adjoint, one optimizer step.
        // Nothing else (no cycle term, no extra regularizer) may enter.
        let (mut cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(17);
        cfg.lr_disc = 0.0;
        let flow0 = flow.clone();
        let disc0 = disc.clone();
        let ba = sa.sample(cfg.batch_size);
        let bb = sb.sample(cfg.batch_size);

        let mut of = OptimizerState::zeros_for(&flow.param_layer_dims().unwrap());
        let mut od = OptimizerState::zeros_for(disc.net().layer_dims());
        train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();

        let spec = cfg.integration().unwrap();
        let x0 = states_to_matrix(&ba).unwrap();
        let finals = ode::integrate_batch(&flow0, &ba, &spec).unwrap().finals().to_owned();
        let (_, cot) = generator_loss(&disc0, finals.view()).unwrap();
        let (g, _) = ode::adjoint_gradients_from_final(&flow0, &finals, &cot, &spec).unwrap();
        let (expected, _) = adam_update(
            &flow0.params(),
            &g,
            &OptimizerState::zeros_for(&flow0.param_layer_dims().unwrap()),
            cfg.lr_flow,
            cfg.betas,
            cfg.adam_eps,
        )
        .unwrap();
        assert_eq!(flow.params(), expected);
        drop(x0);
    }

    #[test]
    fn one_step_usually_improves_the_generator() {
        // Across 20 seeded trials, a single flow update should beat doing
        // nothing (measured against the same post-step discriminator) well
        // over half the time.
        let mut improved = 0;
        for trial in 0..20u64 {
            let (cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(42 + trial);
            let flow0 = flow.clone();
            let ba = sa.sample(cfg.batch_size);
            let bb = sb.sample(cfg.batch_size);
            let mut of = OptimizerState::zeros_for(&flow.param_layer_dims().unwrap());
            let mut od = OptimizerState::zeros_for(disc.net().layer_dims());
            train_step(&mut flow, &mut disc, &ba, &bb, &mut of, &mut od, &cfg).unwrap();

            let spec = cfg.integration().unwrap();
            let x0 = states_to_matrix(&ba).unwrap();
            let before = ode::integrate_finals(&flow0, &x0, &spec).unwrap();
            let after = ode::integrate_finals(&flow, &x0, &spec).unwrap();
            let (l_before, _) = generator_loss(&disc, before.view()).unwrap();
            let (l_after, _) = generator_loss(&disc, after.view()).unwrap();
            if l_after < l_before {
                improved += 1;
            }
        }
        assert!(improved >= 12, "improved in only {improved}/20 trials");
    }

    #[test]
    fn training_for_zero_epochs_is_a_no_op() {
        let (mut cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(5);
        cfg.epochs = 0;
        let flow_before = flow.params();
        let disc_before = disc.net().params();
        let history = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg, |_| Ok(())).unwrap();
        assert!(history.is_empty());
        assert_eq!(flow.params(), flow_before);
        assert_eq!(disc.net().params(), disc_before);
        assert_eq!(sa.position(), 0, "no batches should have been drawn");
    }

    #[test]
    fn training_records_history_and_calls_the_epoch_hook() {
        let (mut cfg, mut flow, mut disc, mut sa, mut sb) = benchmark_setup(8);
        cfg.epochs = 2;
        cfg.samples_per_epoch = 128; // 2 steps per epoch
        cfg.n_steps = 10;
        let mut hook_epochs = Vec::new();
        let history = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg, |snap| {
            hook_epochs.push((snap.epoch, snap.history.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(history.len(), 4);
        assert_eq!(
            history.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            history.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
        assert_eq!(hook_epochs, vec![(0, 2), (1, 4)]);

        let mut buf = Vec::new();
        history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,loss_disc,loss_gen,ham_drift,grad_norm_flow,grad_norm_disc,sw_dist"
        );
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn divergence_aborts_with_epoch_and_step_context() {
        let (mut cfg, _, mut disc, mut sa, mut sb) = benchmark_setup(3);
        // A single-chain energy with a huge output weight drives |dq/dt|
        // above ~1e24 at every source point; one enormous integrator step
        // then overflows the intermediate state and the stage evaluations
        // stop being finite.
        let net = Mlp::from_parts(
            vec![2, 1, 1, 1, 1],
            vec![
                ndarray::array![[1.0, 0.0]],
                Array2::from_elem((1, 1), 1.0),
                Array2::from_elem((1, 1), 1.0),
                Array2::from_elem((1, 1), 1e30),
            ],
            vec![
                ndarray::Array1::zeros(1),
                ndarray::Array1::zeros(1),
                ndarray::Array1::zeros(1),
                ndarray::Array1::zeros(1),
            ],
            Activation::Tanh,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut flow = HamiltonianField::Neural(NeuralHamiltonian::new(net).unwrap());
        cfg.t_horizon = 1e290;
        cfg.n_steps = 1;
        cfg.epochs = 1;
        let mut hook_calls = 0;
        let err = train(&mut flow, &mut disc, &mut sa, &mut sb, &cfg, |_| {
            hook_calls += 1;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::TrainAborted { epoch, step, source } => {
                assert_eq!(epoch, 0);
                assert_eq!(step, 0);
                assert!(
                    matches!(*source, Error::Diverged { .. }),
                    "unexpected cause: {source}"
                );
            }
            other => panic!("expected TrainAborted, got {other}"),
        }
        assert_eq!(hook_calls, 0, "no epoch completed, so no checkpoint hook");
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let (cfg, flow, disc, _, _) = benchmark_setup(4);
        let ck = Checkpoint {
            opt_flow: OptimizerState::zeros_for(&flow.param_layer_dims().unwrap()),
            opt_disc: OptimizerState::zeros_for(disc.net().layer_dims()),
            flow,
            disc,
            config: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ck");
        ck.save(&root).unwrap();
        for name in ["flow.json", "disc.json", "optim.json", "config.json"] {
            assert!(root.join(name).exists(), "{name} missing");
            assert!(!root.join(format!("{name}.partial")).exists());
        }
        let back = Checkpoint::load(&root).unwrap();
        assert_eq!(ck, back);
        // A serialize -> load -> serialize cycle is byte-stable.
        let a = serde_json::to_string(&ck.flow).unwrap();
        let b = serde_json::to_string(&back.flow).unwrap();
        assert_eq!(a, b);

        assert!(Checkpoint::load(dir.path()).is_err(), "missing files");
    }

    #[test]
    fn seeded_components_are_deterministic_and_checked() {
        let cfg = small_cfg(9);
        let (da, db) = builtin_benchmark("two_gaussians").unwrap();
        let (f1, d1, _, _) = seeded_components(&cfg, &da, &db).unwrap();
        let (f2, d2, _, _) = seeded_components(&cfg, &da, &db).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(d1, d2);

        let (ma, mb) = builtin_benchmark("mixture_to_mixture").unwrap();
        assert!(seeded_components(&cfg, &ma, &mb).is_err(), "dimension clash");
    }
}
