//! Sample sources: seeded Gaussian mixtures and batch files.
//!
//! Sampling is counter-addressed (see [`crate::rng`]): draw `k` of a sampler
//! always consumes RNG counters `k*(d+1) .. (k+1)*(d+1)`, regardless of
//! batching or thread count, so a `(domain, seed)` pair fully determines
//! every sample that will ever be drawn from it. The layout per draw is:
//! one uniform for the mixture component, then `d` uniforms feeding `d/2`
//! Box-Muller pairs in coordinate order.

use crate::csvio;
use crate::error::{Error, Result};
use crate::exec;
use crate::field::State;
use crate::ode::trajectory_header;
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One mixture component: diagonal-covariance Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

/// On-disk form of [`SyntheticDomain`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainDoc {
    d: usize,
    components: Vec<GaussianComponent>,
}

/// A Gaussian-mixture distribution over phase space, the source and target
/// of translation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainDoc", into = "DomainDoc")]
pub struct SyntheticDomain {
    d: usize,
    components: Vec<GaussianComponent>,
}

impl TryFrom<DomainDoc> for SyntheticDomain {
    type Error = Error;
    fn try_from(doc: DomainDoc) -> Result<Self> {
        SyntheticDomain::new(doc.d, doc.components)
    }
}

impl From<SyntheticDomain> for DomainDoc {
    fn from(dom: SyntheticDomain) -> DomainDoc {
        DomainDoc {
            d: dom.d,
            components: dom.components,
        }
    }
}

impl SyntheticDomain {
    pub fn new(d: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::invalid(format!(
                "domain dimension must be even and at least 2, got {d}"
            )));
        }
        if components.is_empty() {
            return Err(Error::invalid("domain needs at least one component".to_string()));
        }
        let mut weight_sum = 0.0;
        for (i, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::invalid(format!(
                    "component {i}: weight must be positive and finite, got {}",
                    c.weight
                )));
            }
            if c.mean.len() != d {
                return Err(Error::shape("component mean", d, c.mean.len()));
            }
            if c.cov_diag.len() != d {
                return Err(Error::shape("component cov_diag", d, c.cov_diag.len()));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("component mean"));
            }
            if c.cov_diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid(format!(
                    "component {i}: cov_diag entries must be positive and finite"
                )));
            }
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "component weights must sum to 1 (within 1e-12), got {weight_sum}"
            )));
        }
        Ok(SyntheticDomain { d, components })
    }

    /// A single Gaussian (weight 1).
    pub fn single_gaussian(mean: Vec<f64>, cov_diag: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        SyntheticDomain::new(
            d,
            vec![GaussianComponent {
                weight: 1.0,
                mean,
                cov_diag,
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
}

/// A deterministic sample stream over a domain. Holds only a cursor; any
/// draw can be regenerated from `(domain, seed, draw index)` alone.
#[derive(Debug, Clone)]
pub struct Sampler {
    domain: SyntheticDomain,
    rng: CounterRng,
    next_draw: u64,
    /// Cumulative component weights, for inverse-CDF component selection.
    cum_weights: Vec<f64>,
    /// Per-component sqrt(cov_diag), precomputed.
    std_devs: Vec<Vec<f64>>,
}

impl Sampler {
    pub fn new(domain: SyntheticDomain, seed: u64) -> Self {
        let mut cum_weights = Vec::with_capacity(domain.components.len());
        let mut acc = 0.0;
        for c in &domain.components {
            acc += c.weight;
            cum_weights.push(acc);
        }
        let std_devs = domain
            .components
            .iter()
            .map(|c| c.cov_diag.iter().map(|v| v.sqrt()).collect())
            .collect();
        Sampler {
            domain,
            rng: CounterRng::new(seed),
            next_draw: 0,
            cum_weights,
            std_devs,
        }
    }

    pub fn domain(&self) -> &SyntheticDomain {
        &self.domain
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.next_draw
    }

    /// The next `n` samples, advancing the cursor.
    pub fn sample(&mut self, n: usize) -> Vec<State> {
        let start = self.next_draw;
        self.next_draw += n as u64;
        self.sample_at(start, n)
    }

    /// Draws `start .. start + n`, without touching the cursor.
    pub fn sample_at(&self, start: u64, n: usize) -> Vec<State> {
        let chunks = exec::map_chunks(n, |r| {
            let mut out = Vec::with_capacity(r.len());
            for k in r {
                out.push(self.draw(start + k as u64));
            }
            Ok(out)
        })
        .expect("sampling is infallible");
        chunks.into_iter().flatten().collect()
    }

    /// Generate draw `k` from its counter block.
    fn draw(&self, k: u64) -> State {
        let d = self.domain.d;
        let base = k * (d as u64 + 1);
        // Component pick: first cumulative weight above the uniform. The
        // final component also catches any rounding slack at the top.
        let u = self.rng.unit(base);
        let mut comp = self.cum_weights.len() - 1;
        for (i, cw) in self.cum_weights.iter().enumerate() {
            if u < *cw {
                comp = i;
                break;
            }
        }
        let mean = &self.domain.components[comp].mean;
        let std = &self.std_devs[comp];
        let mut coords = vec![0.0; d];
        for pair in 0..d / 2 {
            let (z0, z1) = self.rng.normal_pair(base + 1 + 2 * pair as u64);
            let (i, j) = (2 * pair, 2 * pair + 1);
            coords[i] = mean[i] + std[i] * z0;
            coords[j] = mean[j] + std[j] * z1;
        }
        State::new(coords).expect("mixture samples are finite and even-dimensional")
    }
}

/// The built-in domain pairs used by benchmarks and examples.
///
/// - `two_gaussians` (d = 2): `A = N((-4, 0), 0.25 I)`, `B = N((+4, 0), 0.25 I)`.
/// - `gaussian_ring_pair` (d = 2): `A = N(0, I)`; `B` has 8 equal-weight
///   components at radius 4, angles `2 pi k / 8`, covariance `0.09 I`.
/// - `mixture_to_mixture` (d = 4): two 4-component mixtures with distinct
///   layouts (corners of a square vs. a line), covariances 0.25 and 0.16.
pub fn builtin_benchmark(name: &str) -> Result<(SyntheticDomain, SyntheticDomain)> {
    match name {
        "two_gaussians" => Ok((
            SyntheticDomain::single_gaussian(vec![-4.0, 0.0], vec![0.25, 0.25])?,
            SyntheticDomain::single_gaussian(vec![4.0, 0.0], vec![0.25, 0.25])?,
        )),
        "gaussian_ring_pair" => {
            let a = SyntheticDomain::single_gaussian(vec![0.0, 0.0], vec![1.0, 1.0])?;
            let n = 8;
            let components = (0..n)
                .map(|k| {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    GaussianComponent {
                        weight: 1.0 / n as f64,
                        mean: vec![4.0 * angle.cos(), 4.0 * angle.sin()],
                        cov_diag: vec![0.09, 0.09],
                    }
                })
                .collect();
            Ok((a, SyntheticDomain::new(2, components)?))
        }
        "mixture_to_mixture" => {
            // Four corners of a square in the (p_0, q_0) plane...
            let corners = [(-3.0, -3.0), (-3.0, 3.0), (3.0, -3.0), (3.0, 3.0)];
            let a_components = corners
                .iter()
                .map(|&(x, y)| GaussianComponent {
                    weight: 0.25,
                    mean: vec![x, 0.0, y, 0.0],
                    cov_diag: vec![0.25; 4],
                })
                .collect();
            // ...versus four stations on a line in the (p_1, q_1) plane.
            let b_components = (0..4)
                .map(|k| GaussianComponent {
                    weight: 0.25,
                    mean: vec![0.0, -4.5 + 3.0 * k as f64, 0.0, 2.0],
                    cov_diag: vec![0.16; 4],
                })
                .collect();
            Ok((
                SyntheticDomain::new(4, a_components)?,
                SyntheticDomain::new(4, b_components)?,
            ))
        }
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}

/// Names accepted by [`builtin_benchmark`].
pub const BENCHMARK_NAMES: [&str; 3] = ["two_gaussians", "gaussian_ring_pair", "mixture_to_mixture"];

/// Write a batch as CSV: the trajectory header minus the time column, one
/// sample per row, floats at 17 significant digits. `d` makes the header
/// well-defined even for an empty batch.
pub fn write_batch<W: Write>(mut w: W, batch: &[State], d: usize) -> Result<()> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::invalid(format!(
            "batch dimension must be even and at least 2, got {d}"
        )));
    }
    let header = trajectory_header(d);
    w.write_all(header.trim_start_matches("t,").as_bytes())?;
    w.write_all(b"\n")?;
    for s in batch {
        if s.dim() != d {
            return Err(Error::shape("batch row", d, s.dim()));
        }
        let row: Vec<String> = s.coords().iter().map(|v| csvio::fmt_f64(*v)).collect();
        w.write_all(row.join(",").as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// [`write_batch`] to a file, atomically: the bytes land under
/// `<path>.partial` first and are renamed into place only when complete.
pub fn save_batch(path: &Path, batch: &[State], d: usize) -> Result<()> {
    let mut buf = Vec::new();
    write_batch(&mut buf, batch, d)?;
    crate::csvio::write_file_atomic(path, &buf)
}

/// Read a batch written by [`write_batch`]. A header-only file is an empty
/// batch.
pub fn read_batch<R: BufRead>(r: R) -> Result<Vec<State>> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".to_string(),
            })
        }
    };
    let d = parse_batch_header(&header)?;
    let mut batch = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        if line.is_empty() && batch.len() == idx {
            // Allow exactly one trailing newline at the end of the file.
            continue;
        }
        let fields = csvio::split_row(&line, d, line_no)?;
        let coords = fields
            .iter()
            .map(|f| csvio::parse_f64(f, line_no))
            .collect::<Result<Vec<f64>>>()?;
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite coordinate".to_string(),
            });
        }
        batch.push(State::new(coords).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(batch)
}

/// [`read_batch`] from a file path.
pub fn load_batch(path: &Path) -> Result<Vec<State>> {
    let file = std::fs::File::open(path)?;
    read_batch(std::io::BufReader::new(file))
}

/// Validate a batch header and return the dimension it declares.
fn parse_batch_header(header: &str) -> Result<usize> {
    let cols = header.split(',').count();
    if cols < 2 || cols % 2 != 0 {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must have an even number of columns, got {cols}"),
        });
    }
    let expected = trajectory_header(cols);
    let expected = expected.trim_start_matches("t,");
    if header != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("header '{header}' should be '{expected}'"),
        });
    }
    Ok(cols)
}
