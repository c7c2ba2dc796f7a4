//! Heterogeneous per-agent datasets.
//!
//! Synthetic federations share one set of Gaussian class prototypes. Each
//! agent skews its label distribution with a Dirichlet draw and rotates its
//! inputs by its own angle in the plane of the first two coordinates, so
//! label skew and covariate shift can be switched independently.
//!
//! Tabular data can also be loaded from comma-separated files with a header
//! row and one integer label column.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDataset {
    pub agent_id: usize,
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
    pub rotation_angle: f64,
    pub label_weights: Vec<f64>,
    pub input_dim: usize,
    pub classes: usize,
}

impl AgentDataset {
    /// Splits `samples` into train and holdout, keeping the last
    /// `floor(n · holdout_frac)` rows (at least one, at most `n − 1`) as
    /// holdout. Label weights are the empirical class frequencies.
    pub fn from_samples(
        agent_id: usize,
        mut samples: Vec<Sample>,
        holdout_frac: f64,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "agent {agent_id} needs at least 2 samples, has {}",
                samples.len()
            )));
        }
        let mut counts = vec![0.0; classes];
        for s in &samples {
            if s.label >= classes {
                return Err(Error::InvalidInput(format!(
                    "label {} out of range for {classes} classes",
                    s.label
                )));
            }
            if s.x.len() != input_dim {
                return Err(Error::shape("sample dimension", input_dim, s.x.len()));
            }
            counts[s.label] += 1.0;
        }
        let n = samples.len();
        let total: f64 = counts.iter().sum();
        let label_weights = counts.into_iter().map(|c| c / total).collect();
        let n_hold = holdout_count(n, holdout_frac);
        let holdout = samples.split_off(n - n_hold);
        Ok(AgentDataset {
            agent_id,
            train: samples,
            holdout,
            rotation_angle: 0.0,
            label_weights,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.holdout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `floor(n · frac)` clamped so both splits stay nonempty.
pub fn holdout_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Parameters of a synthetic federation.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationSpec {
    pub n_agents: usize,
    pub samples_per_agent: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    /// Dirichlet concentration of each agent's label proportions.
    pub skew_alpha: f64,
    /// Upper end of the uniform per-agent rotation angle, radians.
    pub rotation_max: f64,
    pub holdout_frac: f64,
    /// Standard deviation of the class prototype coordinates; sample noise
    /// has unit variance.
    pub prototype_scale: f64,
}

impl Default for FederationSpec {
    fn default() -> Self {
        FederationSpec {
            n_agents: 4,
            samples_per_agent: vec![800, 800, 200, 100],
            input_dim: 64,
            classes: 10,
            skew_alpha: 0.3,
            rotation_max: PI / 4.0,
            holdout_frac: 0.2,
            prototype_scale: 1.0,
        }
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::config("federation.n_agents", "need at least 2 agents"));
        }
        if self.samples_per_agent.len() != self.n_agents {
            return Err(Error::config(
                "federation.samples_per_agent",
                format!(
                    "expected {} entries, got {}",
                    self.n_agents,
                    self.samples_per_agent.len()
                ),
            ));
        }
        if let Some(&s) = self.samples_per_agent.iter().find(|&&s| s < 10) {
            return Err(Error::config(
                "federation.samples_per_agent",
                format!("every agent needs at least 10 samples, got {s}"),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("federation.classes", "need at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("federation.input_dim", "must be positive"));
        }
        if !(self.skew_alpha > 0.0 && self.skew_alpha.is_finite()) {
            return Err(Error::config("federation.skew_alpha", "must be positive and finite"));
        }
        if !(self.rotation_max >= 0.0 && self.rotation_max.is_finite()) {
            return Err(Error::config("federation.rotation_max", "must be nonnegative"));
        }
        if self.rotation_max > 0.0 && self.input_dim < 2 {
            return Err(Error::config(
                "federation.rotation_max",
                "rotation needs input_dim >= 2",
            ));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::config("federation.holdout_frac", "must lie in (0, 1)"));
        }
        if !(self.prototype_scale >= 0.0 && self.prototype_scale.is_finite()) {
            return Err(Error::config("federation.prototype_scale", "must be nonnegative"));
        }
        Ok(())
    }
}

pub fn generate_federation(spec: &FederationSpec, seed: u64) -> Result<Vec<AgentDataset>> {
    spec.validate()?;
    let (d, c) = (spec.input_dim, spec.classes);
    let mut proto_rng = rng::stream(seed, &[rng::tag::PROTOTYPES]);
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..d)
                .map(|_| spec.prototype_scale * Distribution::<f64>::sample(&StandardNormal, &mut proto_rng))
                .collect()
        })
        .collect();
    let gamma = Gamma::new(spec.skew_alpha, 1.0)
        .map_err(|e| Error::config("federation.skew_alpha", e.to_string()))?;

    let mut out = Vec::with_capacity(spec.n_agents);
    for (agent_id, &n) in spec.samples_per_agent.iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::AGENT_DATA, agent_id as u64]);
        let label_weights = dirichlet(&gamma, c, &mut r);
        let angle = if spec.rotation_max > 0.0 {
            r.random::<f64>() * spec.rotation_max
        } else {
            0.0
        };
        let (cos, sin) = (angle.cos(), angle.sin());
        let labels = WeightedIndex::new(&label_weights)
            .map_err(|e| Error::ConstructionFailure(format!("label distribution: {e}")))?;
        let samples: Vec<Sample> = (0..n)
            .map(|_| {
                let label = labels.sample(&mut r);
                let mut x: Vec<f64> = prototypes[label]
                    .iter()
                    .map(|p| p + Distribution::<f64>::sample(&StandardNormal, &mut r))
                    .collect();
                if angle != 0.0 {
                    let (a, b) = (x[0], x[1]);
                    x[0] = cos * a - sin * b;
                    x[1] = sin * a + cos * b;
                }
                Sample { x, label }
            })
            .collect();
        let n_hold = holdout_count(n, spec.holdout_frac);
        let mut train = samples;
        let holdout = train.split_off(n - n_hold);
        out.push(AgentDataset {
            agent_id,
            train,
            holdout,
            rotation_angle: angle,
            label_weights,
            input_dim: d,
            classes: c,
        });
    }
    Ok(out)
}

fn dirichlet<R: Rng>(gamma: &Gamma<f64>, c: usize, r: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..c).map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / c as f64; c];
    }
    draws.into_iter().map(|g| g / total).collect()
}

/// Indices of a uniform minibatch drawn without replacement from the
/// agent's training split.
pub fn sample_minibatch<R: Rng>(ds: &AgentDataset, batch_size: usize, r: &mut R) -> Result<Vec<usize>> {
    draw_indices(ds.train.len(), batch_size, r)
}

pub(crate) fn draw_indices<R: Rng>(len: usize, batch_size: usize, r: &mut R) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::InvalidInput(format!(
            "batch size {batch_size} not in 1..={len}"
        )));
    }
    Ok(index::sample(r, len, batch_size).into_vec())
}

/// Samples parsed from a tabular file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub samples: Vec<Sample>,
    pub input_dim: usize,
    /// `1 + max label`.
    pub classes: usize,
}

pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<CsvTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::config(
                "federation.label_column",
                format!("column `{label_column}` not found in {}", path.display()),
            )
        })?;
    let width = headers.len();
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                reason: format!("ragged row: expected {width} fields, found {}", rec.len()),
            });
        }
        let mut x = Vec::with_capacity(width - 1);
        let mut label = 0;
        for (k, field) in rec.iter().enumerate() {
            if k == label_idx {
                label = field.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("label `{field}` is not a nonnegative integer"),
                })?;
            } else {
                let v = field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("feature `{}` = `{field}` is not numeric", &headers[k]),
                })?;
                x.push(v);
            }
        }
        samples.push(Sample { x, label });
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(CsvTable {
        samples,
        input_dim: width - 1,
        classes,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Writes samples with header `x0,…,x{d−1},<label_column>`. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv_dataset<'a, I>(path: &Path, input_dim: usize, label_column: &str, samples: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header: Vec<String> = (0..input_dim).map(|k| format!("x{k}")).collect();
    header.push(label_column.to_string());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for s in samples {
        let mut line = String::new();
        for v in &s.x {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&s.label.to_string());
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One file per agent, `agent_<id>.csv`, train rows followed by holdout rows.
pub fn export_federation(dir: &Path, datasets: &[AgentDataset], label_column: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    datasets
        .iter()
        .map(|ds| {
            let p = dir.join(format!("agent_{}.csv", ds.agent_id));
            write_csv_dataset(&p, ds.input_dim, label_column, ds.train.iter().chain(&ds.holdout))?;
            Ok(p)
        })
        .collect()
}
