//! Run configuration.
//!
//! A config file is one JSON object whose keys are flat dotted names such as
//! `train.eta_w`. Every key is optional; unknown keys are rejected, and an
//! invalid value is reported under its key. [`reference_table`] lists every
//! key with its default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::datagen::{generate_federation, load_csv_dataset, AgentDataset, FederationSpec};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::rng;
use crate::topology::{Topology, TopologyKind};
use crate::trainer::{
    FederationState, GossipScope, GradVNorm, MuPolicy, RateSchedule, StepMode, TrainConfig, Variant,
};

/// Where agent data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(FederationSpec),
    /// One comma-separated file per agent.
    Csv {
        paths: Vec<PathBuf>,
        label_column: String,
        holdout_frac: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub mu_values: Vec<f64>,
    pub topologies: Vec<TopologyKind>,
    pub rounds: Vec<usize>,
    pub dropout_prob: f64,
    /// Seeds averaged at every grid point; empty means just the run seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub feature_dim: usize,
    pub topology: TopologyKind,
    /// Edge probability used by every Erdős–Rényi graph of the run.
    pub edge_prob: f64,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    /// Assumption-estimate probes taken at the initial state.
    pub probes: usize,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
}

struct KeyDoc {
    key: &'static str,
    default: &'static str,
    doc: &'static str,
}

const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "seed", default: "0", doc: "master seed for data, backbone, topology and training streams" },
    KeyDoc { key: "federation.source", default: "\"synthetic\"", doc: "`synthetic` or `csv`" },
    KeyDoc { key: "federation.n_agents", default: "4", doc: "number of agents (synthetic)" },
    KeyDoc { key: "federation.samples_per_agent", default: "[800, 800, 200, 100]", doc: "samples per agent before the holdout split" },
    KeyDoc { key: "federation.input_dim", default: "64", doc: "input dimension d (synthetic)" },
    KeyDoc { key: "federation.classes", default: "10", doc: "class count c (synthetic)" },
    KeyDoc { key: "federation.skew_alpha", default: "0.3", doc: "Dirichlet concentration of per-agent label proportions" },
    KeyDoc { key: "federation.rotation_max", default: "0.7853981633974483", doc: "largest per-agent input rotation, radians" },
    KeyDoc { key: "federation.holdout_frac", default: "0.2", doc: "fraction of each agent's data held out" },
    KeyDoc { key: "federation.prototype_scale", default: "0.1", doc: "standard deviation of class prototype coordinates" },
    KeyDoc { key: "federation.csv_paths", default: "[]", doc: "one file per agent (csv source)" },
    KeyDoc { key: "federation.label_column", default: "\"label\"", doc: "name of the integer label column (csv source)" },
    KeyDoc { key: "model.feature_dim", default: "128", doc: "backbone feature width h" },
    KeyDoc { key: "topology.kind", default: "\"fc\"", doc: "`fc`, `er` or `ring`" },
    KeyDoc { key: "topology.edge_prob", default: "0.5", doc: "edge probability for `er`" },
    KeyDoc { key: "train.rounds", default: "100", doc: "communication rounds K" },
    KeyDoc { key: "train.local_epochs", default: "5", doc: "local epochs τ" },
    KeyDoc { key: "train.rate_schedule", default: "\"corollary1\"", doc: "`corollary1` (η_v = 1/(τ√K), η_w = √(N/K)) or `manual`" },
    KeyDoc { key: "train.eta_w", default: "none", doc: "shared learning rate (required when manual)" },
    KeyDoc { key: "train.eta_v", default: "none", doc: "personalized learning rate (required when manual)" },
    KeyDoc { key: "train.mu_policy", default: "\"fixed\"", doc: "`fixed`, `per_agent` or `adaptive`" },
    KeyDoc { key: "train.mu", default: "0.5", doc: "mixing coefficient μ (initial value when adaptive)" },
    KeyDoc { key: "train.mu_per_agent", default: "none", doc: "one μ per agent (per_agent policy)" },
    KeyDoc { key: "train.mu_grid_step", default: "0.25", doc: "μ grid spacing (adaptive policy)" },
    KeyDoc { key: "train.mu_ema_decay", default: "0.8", doc: "weight kept on the previous μ (adaptive policy)" },
    KeyDoc { key: "train.variant", default: "\"nested\"", doc: "`nested` or `parallel`" },
    KeyDoc { key: "train.step_mode", default: "\"per_batch\"", doc: "`per_batch` or `per_epoch` optimizer steps per local epoch" },
    KeyDoc { key: "train.batch_size", default: "128", doc: "minibatch size (clamped to each agent's train split)" },
    KeyDoc { key: "train.dropout_prob", default: "0.0", doc: "per-round probability that an agent is offline" },
    KeyDoc { key: "train.gossip_scope", default: "\"shared\"", doc: "`shared`, `full_model` or `disabled`" },
    KeyDoc { key: "train.grad_v_norm", default: "\"stacked\"", doc: "personalized term of M(t): `stacked` or `per_agent_mean`" },
    KeyDoc { key: "run.probes", default: "10", doc: "assumption-estimate probes at the initial state" },
    KeyDoc { key: "run.checkpoint_every", default: "0", doc: "checkpoint interval in rounds, 0 disables" },
    KeyDoc { key: "run.resume_from", default: "none", doc: "checkpoint file to resume from" },
    KeyDoc { key: "sweep.mu_values", default: "[0, 0.25, 0.5, 0.75, 1]", doc: "μ grid for mu-sweep" },
    KeyDoc { key: "sweep.topologies", default: "[\"fc\", \"er\", \"ring\"]", doc: "kinds for topology-sweep" },
    KeyDoc { key: "sweep.rounds", default: "[100, 400, 1600]", doc: "K values for rate-scaling" },
    KeyDoc { key: "sweep.dropout_prob", default: "0.1", doc: "dropout probability compared in dropout-compare" },
    KeyDoc { key: "sweep.seeds", default: "[]", doc: "seeds averaged per sweep point; empty uses `seed`" },
];

/// Markdown table of every key with its default.
pub fn reference_table() -> String {
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for k in KEYS {
        out.push_str(&format!("| `{}` | `{}` | {} |\n", k.key, k.default, k.doc));
    }
    out
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSource::Synthetic(FederationSpec {
                prototype_scale: 0.1,
                ..FederationSpec::default()
            }),
            feature_dim: 128,
            topology: TopologyKind::FullyConnected,
            edge_prob: 0.5,
            train: TrainConfig::default(),
            sweep: SweepConfig {
                mu_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                topologies: vec![
                    TopologyKind::FullyConnected,
                    TopologyKind::ErdosRenyi { edge_prob: 0.5 },
                    TopologyKind::Ring,
                ],
                rounds: vec![100, 400, 1600],
                dropout_prob: 0.1,
                seeds: vec![],
            },
            probes: 10,
            checkpoint_every: 0,
            resume_from: None,
        }
    }
}

struct Fields {
    map: Map<String, Value>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key).filter(|v| !v.is_null())
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| v.as_f64().ok_or_else(|| Error::config(key, format!("expected a number, got {v}"))))
            .transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key)
            .map(|v| {
                v.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| Error::config(key, format!("expected a nonnegative integer, got {v}")))
            })
            .transpose()
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| v.as_u64().ok_or_else(|| Error::config(key, format!("expected a nonnegative integer, got {v}"))))
            .transpose()
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key)
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::config(key, format!("expected a string, got {other}"))),
            })
            .transpose()
    }

    fn array(&mut self, key: &str) -> Result<Option<Vec<Value>>> {
        self.take(key)
            .map(|v| match v {
                Value::Array(a) => Ok(a),
                other => Err(Error::config(key, format!("expected an array, got {other}"))),
            })
            .transpose()
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.array(key)?
            .map(|a| {
                a.iter()
                    .map(|v| v.as_f64().ok_or_else(|| Error::config(key, format!("expected numbers, got {v}"))))
                    .collect()
            })
            .transpose()
    }

    fn u64_list(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        self.array(key)?
            .map(|a| {
                a.iter()
                    .map(|v| {
                        v.as_u64()
                            .ok_or_else(|| Error::config(key, format!("expected nonnegative integers, got {v}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

fn parse_kind(key: &str, name: &str, edge_prob: f64) -> Result<TopologyKind> {
    match name {
        "fc" | "fully_connected" => Ok(TopologyKind::FullyConnected),
        "er" | "erdos_renyi" => {
            if !(edge_prob > 0.0 && edge_prob <= 1.0) {
                return Err(Error::config("topology.edge_prob", "must lie in (0, 1]"));
            }
            Ok(TopologyKind::ErdosRenyi { edge_prob })
        }
        "ring" => Ok(TopologyKind::Ring),
        other => Err(Error::config(key, format!("unknown topology `{other}`"))),
    }
}

fn choice<T: Copy>(key: &str, value: Option<String>, default: T, options: &[(&str, T)]) -> Result<T> {
    let Some(v) = value else { return Ok(default) };
    options
        .iter()
        .find(|(name, _)| *name == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::config(key, format!("`{v}` is not one of {}", names.join(", ")))
        })
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    // relative data paths resolve against the config file's directory
    if let DataSource::Csv { paths, .. } = &mut cfg.data {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in paths.iter_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        reason: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::config("<root>", "config must be a JSON object"));
    };
    if let Some(unknown) = map.keys().find(|k| !KEYS.iter().any(|d| d.key == k.as_str())) {
        return Err(Error::config(unknown.clone(), "unknown key"));
    }
    let mut f = Fields { map };
    let mut cfg = RunConfig::default();
    let DataSource::Synthetic(mut fed) = cfg.data.clone() else { unreachable!() };

    if let Some(s) = f.u64("seed")? {
        cfg.seed = s;
    }
    let source = f.string("federation.source")?.unwrap_or_else(|| "synthetic".into());
    if let Some(n) = f.usize("federation.n_agents")? {
        fed.n_agents = n;
        fed.samples_per_agent = vec![fed.samples_per_agent[0]; n];
    }
    if let Some(list) = f.u64_list("federation.samples_per_agent")? {
        fed.samples_per_agent = list.into_iter().map(|v| v as usize).collect();
    }
    if let Some(v) = f.usize("federation.input_dim")? {
        fed.input_dim = v;
    }
    if let Some(v) = f.usize("federation.classes")? {
        fed.classes = v;
    }
    if let Some(v) = f.f64("federation.skew_alpha")? {
        fed.skew_alpha = v;
    }
    if let Some(v) = f.f64("federation.rotation_max")? {
        fed.rotation_max = v;
    }
    if let Some(v) = f.f64("federation.holdout_frac")? {
        fed.holdout_frac = v;
    }
    if let Some(v) = f.f64("federation.prototype_scale")? {
        fed.prototype_scale = v;
    }
    let csv_paths: Vec<PathBuf> = f
        .array("federation.csv_paths")?
        .unwrap_or_default()
        .into_iter()
        .map(|v| match v {
            Value::String(s) => Ok(PathBuf::from(s)),
            other => Err(Error::config("federation.csv_paths", format!("expected paths, got {other}"))),
        })
        .collect::<Result<_>>()?;
    let label_column = f.string("federation.label_column")?.unwrap_or_else(|| "label".into());
    cfg.data = match source.as_str() {
        "synthetic" => {
            if !csv_paths.is_empty() {
                return Err(Error::config("federation.csv_paths", "only used with the csv source"));
            }
            if fed.samples_per_agent.len() != fed.n_agents {
                fed.n_agents = fed.samples_per_agent.len();
            }
            fed.validate()?;
            DataSource::Synthetic(fed)
        }
        "csv" => {
            if csv_paths.len() < 2 {
                return Err(Error::config("federation.csv_paths", "need one file per agent, at least 2"));
            }
            if !(fed.holdout_frac > 0.0 && fed.holdout_frac < 1.0) {
                return Err(Error::config("federation.holdout_frac", "must lie in (0, 1)"));
            }
            DataSource::Csv {
                paths: csv_paths,
                label_column,
                holdout_frac: fed.holdout_frac,
            }
        }
        other => return Err(Error::config("federation.source", format!("unknown source `{other}`"))),
    };

    if let Some(h) = f.usize("model.feature_dim")? {
        if h == 0 {
            return Err(Error::config("model.feature_dim", "must be positive"));
        }
        cfg.feature_dim = h;
    }
    let edge_prob = f.f64("topology.edge_prob")?.unwrap_or(0.5);
    cfg.edge_prob = edge_prob;
    cfg.sweep.topologies = vec![
        TopologyKind::FullyConnected,
        parse_kind("topology.edge_prob", "er", edge_prob)?,
        TopologyKind::Ring,
    ];
    if let Some(kind) = f.string("topology.kind")? {
        cfg.topology = parse_kind("topology.kind", &kind, edge_prob)?;
    }

    let t = &mut cfg.train;
    if let Some(v) = f.usize("train.rounds")? {
        t.rounds = v;
    }
    if let Some(v) = f.usize("train.local_epochs")? {
        t.local_epochs = v;
    }
    let schedule = f.string("train.rate_schedule")?;
    let eta_w = f.f64("train.eta_w")?;
    let eta_v = f.f64("train.eta_v")?;
    t.rate_schedule = match schedule.as_deref().unwrap_or("corollary1") {
        "corollary1" => {
            if eta_w.is_some() || eta_v.is_some() {
                return Err(Error::config(
                    if eta_w.is_some() { "train.eta_w" } else { "train.eta_v" },
                    "rates are derived under corollary1; set train.rate_schedule to manual",
                ));
            }
            RateSchedule::Corollary1
        }
        "manual" => RateSchedule::Manual {
            eta_w: eta_w.ok_or_else(|| Error::config("train.eta_w", "required with manual rates"))?,
            eta_v: eta_v.ok_or_else(|| Error::config("train.eta_v", "required with manual rates"))?,
        },
        other => return Err(Error::config("train.rate_schedule", format!("unknown schedule `{other}`"))),
    };
    let mu = f.f64("train.mu")?.unwrap_or(0.5);
    let per_agent = f.f64_list("train.mu_per_agent")?;
    let grid_step = f.f64("train.mu_grid_step")?.unwrap_or(0.25);
    let ema_decay = f.f64("train.mu_ema_decay")?.unwrap_or(0.8);
    t.mu_policy = match f.string("train.mu_policy")?.as_deref().unwrap_or("fixed") {
        "fixed" => MuPolicy::Fixed { mu },
        "per_agent" => MuPolicy::PerAgent {
            mus: per_agent.ok_or_else(|| Error::config("train.mu_per_agent", "required with per_agent"))?,
        },
        "adaptive" => MuPolicy::Adaptive {
            initial: mu,
            grid_step,
            ema_decay,
        },
        other => return Err(Error::config("train.mu_policy", format!("unknown policy `{other}`"))),
    };
    t.variant = choice(
        "train.variant",
        f.string("train.variant")?,
        Variant::Nested,
        &[("nested", Variant::Nested), ("parallel", Variant::Parallel)],
    )?;
    t.step_mode = choice(
        "train.step_mode",
        f.string("train.step_mode")?,
        StepMode::PerBatch,
        &[("per_batch", StepMode::PerBatch), ("per_epoch", StepMode::PerEpoch)],
    )?;
    if let Some(v) = f.usize("train.batch_size")? {
        t.batch_size = v;
    }
    if let Some(v) = f.f64("train.dropout_prob")? {
        t.dropout_prob = v;
    }
    t.gossip_scope = choice(
        "train.gossip_scope",
        f.string("train.gossip_scope")?,
        GossipScope::Shared,
        &[
            ("shared", GossipScope::Shared),
            ("full_model", GossipScope::FullModel),
            ("disabled", GossipScope::Disabled),
        ],
    )?;
    t.grad_v_norm = choice(
        "train.grad_v_norm",
        f.string("train.grad_v_norm")?,
        GradVNorm::Stacked,
        &[("stacked", GradVNorm::Stacked), ("per_agent_mean", GradVNorm::PerAgentMean)],
    )?;
    t.seed = cfg.seed;
    let n_agents = match &cfg.data {
        DataSource::Synthetic(s) => s.n_agents,
        DataSource::Csv { paths, .. } => paths.len(),
    };
    cfg.train.validate(n_agents)?;

    if let Some(v) = f.usize("run.probes")? {
        if v < 10 {
            return Err(Error::config("run.probes", "need at least 10"));
        }
        cfg.probes = v;
    }
    if let Some(v) = f.usize("run.checkpoint_every")? {
        cfg.checkpoint_every = v;
    }
    cfg.resume_from = f.string("run.resume_from")?.map(PathBuf::from);

    if let Some(v) = f.f64_list("sweep.mu_values")? {
        if v.is_empty() || v.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("sweep.mu_values", "need a nonempty list within [0, 1]"));
        }
        cfg.sweep.mu_values = v;
    }
    if let Some(list) = f.array("sweep.topologies")? {
        cfg.sweep.topologies = list
            .iter()
            .map(|v| {
                let name = v
                    .as_str()
                    .ok_or_else(|| Error::config("sweep.topologies", format!("expected names, got {v}")))?;
                parse_kind("sweep.topologies", name, edge_prob)
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = f.u64_list("sweep.rounds")? {
        if v.len() < 3 || v.contains(&0) {
            return Err(Error::config("sweep.rounds", "need at least 3 positive round counts"));
        }
        cfg.sweep.rounds = v.into_iter().map(|k| k as usize).collect();
    }
    if let Some(v) = f.f64("sweep.dropout_prob")? {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::config("sweep.dropout_prob", "must lie in [0, 1)"));
        }
        cfg.sweep.dropout_prob = v;
    }
    if let Some(v) = f.u64_list("sweep.seeds")? {
        cfg.sweep.seeds = v;
    }
    Ok(cfg)
}

fn kind_name(kind: TopologyKind) -> &'static str {
    kind.label()
}

impl RunConfig {
    /// Overrides the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn n_agents(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.n_agents,
            DataSource::Csv { paths, .. } => paths.len(),
        }
    }

    /// Fully resolved flat config; parsing it yields this config again.
    pub fn to_json(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("seed", json!(self.seed));
        match &self.data {
            DataSource::Synthetic(s) => {
                m.insert("federation.source", json!("synthetic"));
                m.insert("federation.n_agents", json!(s.n_agents));
                m.insert("federation.samples_per_agent", json!(s.samples_per_agent));
                m.insert("federation.input_dim", json!(s.input_dim));
                m.insert("federation.classes", json!(s.classes));
                m.insert("federation.skew_alpha", json!(s.skew_alpha));
                m.insert("federation.rotation_max", json!(s.rotation_max));
                m.insert("federation.holdout_frac", json!(s.holdout_frac));
                m.insert("federation.prototype_scale", json!(s.prototype_scale));
            }
            DataSource::Csv {
                paths,
                label_column,
                holdout_frac,
            } => {
                m.insert("federation.source", json!("csv"));
                m.insert("federation.csv_paths", json!(paths));
                m.insert("federation.label_column", json!(label_column));
                m.insert("federation.holdout_frac", json!(holdout_frac));
            }
        }
        m.insert("model.feature_dim", json!(self.feature_dim));
        m.insert("topology.kind", json!(kind_name(self.topology)));
        m.insert("topology.edge_prob", json!(self.edge_prob));
        let t = &self.train;
        m.insert("train.rounds", json!(t.rounds));
        m.insert("train.local_epochs", json!(t.local_epochs));
        match t.rate_schedule {
            RateSchedule::Corollary1 => {
                m.insert("train.rate_schedule", json!("corollary1"));
            }
            RateSchedule::Manual { eta_w, eta_v } => {
                m.insert("train.rate_schedule", json!("manual"));
                m.insert("train.eta_w", json!(eta_w));
                m.insert("train.eta_v", json!(eta_v));
            }
        }
        match &t.mu_policy {
            MuPolicy::Fixed { mu } => {
                m.insert("train.mu_policy", json!("fixed"));
                m.insert("train.mu", json!(mu));
            }
            MuPolicy::PerAgent { mus } => {
                m.insert("train.mu_policy", json!("per_agent"));
                m.insert("train.mu_per_agent", json!(mus));
            }
            MuPolicy::Adaptive {
                initial,
                grid_step,
                ema_decay,
            } => {
                m.insert("train.mu_policy", json!("adaptive"));
                m.insert("train.mu", json!(initial));
                m.insert("train.mu_grid_step", json!(grid_step));
                m.insert("train.mu_ema_decay", json!(ema_decay));
            }
        }
        m.insert("train.variant", json!(t.variant));
        m.insert("train.step_mode", json!(t.step_mode));
        m.insert("train.batch_size", json!(t.batch_size));
        m.insert("train.dropout_prob", json!(t.dropout_prob));
        m.insert("train.gossip_scope", json!(t.gossip_scope));
        m.insert("train.grad_v_norm", json!(t.grad_v_norm));
        m.insert("run.probes", json!(self.probes));
        m.insert("run.checkpoint_every", json!(self.checkpoint_every));
        if let Some(p) = &self.resume_from {
            m.insert("run.resume_from", json!(p));
        }
        let s = &self.sweep;
        m.insert("sweep.mu_values", json!(s.mu_values));
        m.insert(
            "sweep.topologies",
            json!(s.topologies.iter().map(|k| kind_name(*k)).collect::<Vec<_>>()),
        );
        m.insert("sweep.rounds", json!(s.rounds));
        m.insert("sweep.dropout_prob", json!(s.dropout_prob));
        m.insert("sweep.seeds", json!(s.seeds));
        json!(m)
    }

    pub fn load_datasets(&self) -> Result<Vec<AgentDataset>> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_federation(spec, self.seed),
            DataSource::Csv {
                paths,
                label_column,
                holdout_frac,
            } => {
                let tables = paths
                    .iter()
                    .map(|p| load_csv_dataset(p, label_column))
                    .collect::<Result<Vec<_>>>()?;
                let d = tables[0].input_dim;
                if let Some(t) = tables.iter().find(|t| t.input_dim != d) {
                    return Err(Error::shape("feature columns", d, t.input_dim));
                }
                let c = tables.iter().map(|t| t.classes).max().unwrap_or(0).max(2);
                tables
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| AgentDataset::from_samples(i, t.samples, *holdout_frac, d, c))
                    .collect()
            }
        }
    }

    /// Data, backbone, topology and zero-initialized agents.
    pub fn build_state(&self) -> Result<FederationState> {
        let data = self.load_datasets()?;
        let d = data[0].input_dim;
        let backbone = Arc::new(Backbone::random(d, self.feature_dim, self.seed)?);
        let topo_seed = rng::derive_seed(self.seed, &[rng::tag::TOPOLOGY]);
        let topo = Topology::build(self.topology, data.len(), topo_seed)?;
        FederationState::new(backbone, data, topo, &self.train.mu_policy)
    }
}
