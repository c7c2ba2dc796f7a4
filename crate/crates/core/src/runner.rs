//! Experiment launcher: single runs, sweeps and baselines, with file output.
//!
//! A single run writes `metrics.csv`, `summary.json`, `topology.json`,
//! `config.json` and `final.ckpt` into its directory. Sweep modes run one
//! single run per grid point and seed under `<point>/seed_<s>/` and write a
//! comparison `summary.json` (plus the config echo) at the top level.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, estimate_assumptions, rate_slope_fit, MetricsWriter, RoundMetrics};
use crate::rng;
use crate::trainer::{
    run_experiment_with, validate_learning_rates, Checkpoint, GossipScope, MuPolicy, RateSchedule, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    TopologySweep,
    MuSweep,
    DropoutCompare,
    RateScaling,
    IndepBaseline,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Single,
        Mode::TopologySweep,
        Mode::MuSweep,
        Mode::DropoutCompare,
        Mode::RateScaling,
        Mode::IndepBaseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::TopologySweep => "topology-sweep",
            Mode::MuSweep => "mu-sweep",
            Mode::DropoutCompare => "dropout-compare",
            Mode::RateScaling => "rate-scaling",
            Mode::IndepBaseline => "indep-baseline",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts the kebab-case name, with `_` also allowed as separator.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Mode::ALL.into_iter().find(|m| m.name() == norm).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::config("mode", format!("unknown mode `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

/// What one single run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<RoundMetrics>,
    pub summary: Value,
}

impl RunOutcome {
    pub fn final_mean_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_accuracy)
    }

    pub fn time_averaged_m(&self) -> Option<f64> {
        metrics::time_averaged_m(&self.rows)
    }
}

/// One grid point of a sweep, across seeds.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub name: String,
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<f64>,
    pub time_averaged_m: Vec<Option<f64>>,
}

impl PointOutcome {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.final_accuracy)
    }

    /// Seed-averaged M, or `None` if any seed has no finite value.
    pub fn mean_m(&self) -> Option<f64> {
        let ms: Option<Vec<f64>> = self.time_averaged_m.iter().copied().collect();
        ms.filter(|v| !v.is_empty()).map(|v| mean(&v))
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub points: Vec<PointOutcome>,
    pub summary: Value,
}

impl SweepOutcome {
    pub fn point(&self, name: &str) -> Option<&PointOutcome> {
        self.points.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Single(RunOutcome),
    Sweep(SweepOutcome),
}

impl Outcome {
    pub fn summary(&self) -> &Value {
        match self {
            Outcome::Single(o) => &o.summary,
            Outcome::Sweep(o) => &o.summary,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Non-finite floats become JSON null rather than failing serialization.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// Runs `mode` and writes its files under `out`.
pub fn run(cfg: &RunConfig, mode: Mode, out: &Path) -> Result<Outcome> {
    match mode {
        Mode::Single => run_single(cfg, out).map(Outcome::Single),
        Mode::TopologySweep => topology_sweep(cfg, out).map(Outcome::Sweep),
        Mode::MuSweep => mu_sweep(cfg, out).map(Outcome::Sweep),
        Mode::DropoutCompare => dropout_compare(cfg, out).map(Outcome::Sweep),
        Mode::RateScaling => rate_scaling(cfg, out).map(Outcome::Sweep),
        Mode::IndepBaseline => indep_baseline(cfg, out).map(Outcome::Sweep),
    }
}

/// One training run with streamed metrics, checkpoints and a summary.
pub fn run_single(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    create_dir(dir)?;
    let mut state = cfg.build_state()?;
    cfg.train.validate(state.n())?;
    let rates = cfg.train.rates(state.n())?;

    write_json(&dir.join("config.json"), &cfg.to_json())?;
    let mut topo_text = state.topology.to_json();
    topo_text.push('\n');
    write_file(&dir.join("topology.json"), topo_text.as_bytes())?;

    let csv_path = dir.join("metrics.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file), state.n()).map_err(|e| Error::io(&csv_path, e))?;
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    // Estimated before any resume so the report describes the start point.
    let mut probe_rng = rng::stream(cfg.seed, &[rng::tag::PROBES]);
    let estimates = estimate_assumptions(&state, cfg.probes, cfg.train.batch_size, &mut probe_rng)?;
    let rate_report = if cfg.train.rounds > 0 && estimates.lipschitz_l > 0.0 && estimates.lipschitz_l.is_finite() {
        Some(validate_learning_rates(rates, cfg.train.local_epochs, &state.mixing, estimates.lipschitz_l)?)
    } else {
        None
    };

    let resumed_from = match &cfg.resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.restore(&mut state)?;
            log::info!("resumed from {} at round {}", path.display(), ckpt.round);
            Some(ckpt.round)
        }
        None => None,
    };

    let every = cfg.checkpoint_every;
    let rows = run_experiment_with(&cfg.train, &mut state, |row, st| {
        writer.write_row(row).map_err(|e| Error::io(&csv_path, e))?;
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        if every > 0 && (row.round + 1) % every == 0 {
            let path = dir.join(format!("ckpt_round_{}.ckpt", row.round + 1));
            Checkpoint::capture(st).save(&path)?;
        }
        if (row.round + 1) % 50 == 0 {
            log::debug!("round {}: mean accuracy {:.4}", row.round + 1, row.mean_accuracy);
        }
        Ok(())
    })?;
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    Checkpoint::capture(&state).save(&dir.join("final.ckpt"))?;

    let counts = state.agents[0].model.param_counts();
    let full_payload = counts.trainable + counts.frozen;
    let payload = match cfg.train.gossip_scope {
        GossipScope::Shared => counts.communicated,
        GossipScope::FullModel => full_payload,
        GossipScope::Disabled => 0,
    };
    let comm_total: u64 = rows.iter().map(|r| r.communicated_params).sum();
    let last = rows.last();
    let summary = json!({
        "mode": Mode::Single.name(),
        "seed": cfg.seed,
        "agents": state.n(),
        "rounds_run": rows.len(),
        "resumed_from_round": resumed_from,
        "final_round": state.round,
        "final_mean_accuracy": last.map(|r| num(r.mean_accuracy)),
        "final_per_agent_accuracy": last.map(|r| r.per_agent_accuracy.iter().map(|&a| num(a)).collect::<Vec<_>>()),
        "final_train_loss": last.map(|r| num(r.train_loss_mean)),
        "final_mus": state.mus(),
        "time_averaged_m": metrics::time_averaged_m(&rows).map(num),
        "rates": { "eta_w": rates.eta_w, "eta_v": rates.eta_v },
        "spectral_gap": num(state.mixing.spectral_gap()?),
        "assumption_estimates": estimates,
        "rate_report": rate_report.as_ref().map(|r| json!({
            "passes": r.passes(),
            "detail": r,
        })),
        "param_counts": {
            "per_agent": counts,
            "full_model": full_payload,
            "shared_fraction": counts.communicated as f64 / full_payload as f64,
        },
        "communication": {
            "scope": cfg.train.gossip_scope,
            "payload_per_agent_per_round": payload,
            "total_params": comm_total,
        },
    });
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "{}: {} rounds, final mean accuracy {:.4}",
        dir.display(),
        rows.len(),
        last.map_or(f64::NAN, |r| r.mean_accuracy)
    );
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        rows,
        summary,
    })
}

fn sweep_seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.sweep.seeds.clone()
    }
}

/// Runs every (point, seed) pair concurrently and gathers them per point.
fn run_grid(base: &RunConfig, out: &Path, points: Vec<(String, RunConfig)>) -> Result<Vec<PointOutcome>> {
    create_dir(out)?;
    write_json(&out.join("config.json"), &base.to_json())?;
    let seeds = sweep_seeds(base);
    let jobs: Vec<(usize, u64, RunConfig, PathBuf)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, (name, cfg))| {
            seeds.iter().map(move |&s| {
                let dir = out.join(name).join(format!("seed_{s}"));
                (i, s, cfg.clone().with_seed(s), dir)
            })
        })
        .collect();

    let results: Vec<(usize, u64, Result<RunOutcome>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(i, s, cfg, dir)| scope.spawn(move || (i, s, run_single(&cfg, &dir))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    let mut outcomes: Vec<PointOutcome> = points
        .iter()
        .map(|(name, _)| PointOutcome {
            name: name.clone(),
            seeds: Vec::new(),
            final_accuracy: Vec::new(),
            time_averaged_m: Vec::new(),
        })
        .collect();
    for (i, s, res) in results {
        let run = res?;
        let p = &mut outcomes[i];
        p.seeds.push(s);
        p.final_accuracy.push(run.final_mean_accuracy().unwrap_or(f64::NAN));
        p.time_averaged_m.push(run.time_averaged_m());
    }
    Ok(outcomes)
}

fn points_json(points: &[PointOutcome]) -> Value {
    Value::Array(
        points
            .iter()
            .map(|p| {
                json!({
                    "point": p.name,
                    "seeds": p.seeds,
                    "final_mean_accuracy": p.final_accuracy.iter().map(|&a| num(a)).collect::<Vec<_>>(),
                    "seed_mean_accuracy": num(p.mean_accuracy()),
                    "seed_mean_time_averaged_m": p.mean_m().map(num),
                })
            })
            .collect(),
    )
}

/// Point names sorted by seed-averaged accuracy, best first.
fn ranking(points: &[PointOutcome]) -> Vec<String> {
    let mut order: Vec<&PointOutcome> = points.iter().collect();
    order.sort_by(|a, b| b.mean_accuracy().total_cmp(&a.mean_accuracy()));
    order.into_iter().map(|p| p.name.clone()).collect()
}

fn finish(out: &Path, mode: Mode, points: Vec<PointOutcome>, extra: Value) -> Result<SweepOutcome> {
    let mut summary = json!({
        "mode": mode.name(),
        "points": points_json(&points),
        "ranking": ranking(&points),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut summary, extra) {
        m.extend(e);
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(SweepOutcome { points, summary })
}

fn mu_label(mu: f64) -> String {
    format!("mu_{mu}")
}

pub fn mu_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepOutcome> {
    if cfg.sweep.mu_values.is_empty() {
        return Err(Error::config("sweep.mu_values", "must not be empty"));
    }
    let points = cfg
        .sweep
        .mu_values
        .iter()
        .map(|&mu| {
            let mut c = cfg.clone();
            c.train.mu_policy = MuPolicy::Fixed { mu };
            (mu_label(mu), c)
        })
        .collect();
    let res = run_grid(cfg, out, points)?;
    let best = ranking(&res).into_iter().next();
    let best_mu = best
        .as_ref()
        .and_then(|name| cfg.sweep.mu_values.iter().find(|&&m| &mu_label(m) == name))
        .copied();
    finish(out, Mode::MuSweep, res, json!({ "best_mu": best_mu }))
}

pub fn topology_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepOutcome> {
    if cfg.sweep.topologies.is_empty() {
        return Err(Error::config("sweep.topologies", "must not be empty"));
    }
    let points = cfg
        .sweep
        .topologies
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.topology = kind;
            (kind.label().to_string(), c)
        })
        .collect();
    let res = run_grid(cfg, out, points)?;
    finish(out, Mode::TopologySweep, res, json!({}))
}

pub fn dropout_compare(cfg: &RunConfig, out: &Path) -> Result<SweepOutcome> {
    let mut clean = cfg.clone();
    clean.train.dropout_prob = 0.0;
    let mut dropped = cfg.clone();
    dropped.train.dropout_prob = cfg.sweep.dropout_prob;
    let mut indep = cfg.clone();
    indep.train = cfg.train.indep();
    let points = vec![
        ("no_dropout".to_string(), clean),
        ("dropout".to_string(), dropped),
        ("indep".to_string(), indep),
    ];
    let res = run_grid(cfg, out, points)?;
    let (a, b, c) = (res[0].mean_accuracy(), res[1].mean_accuracy(), res[2].mean_accuracy());
    let extra = json!({
        "dropout_prob": cfg.sweep.dropout_prob,
        "dropout_gap_points": num(100.0 * (a - b)),
        "dropout_above_indep": b > c,
    });
    finish(out, Mode::DropoutCompare, res, extra)
}

pub fn indep_baseline(cfg: &RunConfig, out: &Path) -> Result<SweepOutcome> {
    let mut indep = cfg.clone();
    indep.train = cfg.train.indep();
    let points = vec![("pema".to_string(), cfg.clone()), ("indep".to_string(), indep)];
    let res = run_grid(cfg, out, points)?;
    let delta = 100.0 * (res[0].mean_accuracy() - res[1].mean_accuracy());
    finish(out, Mode::IndepBaseline, res, json!({ "accuracy_delta_points": num(delta) }))
}

/// Horizon-scaled rates at every K in `sweep.rounds`.
pub fn rate_scaling(cfg: &RunConfig, out: &Path) -> Result<SweepOutcome> {
    if cfg.sweep.rounds.len() < 2 {
        return Err(Error::config("sweep.rounds", "need at least two horizons"));
    }
    let points = cfg
        .sweep
        .rounds
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.train = TrainConfig {
                rounds: k,
                rate_schedule: RateSchedule::Corollary1,
                ..cfg.train.clone()
            };
            (format!("k_{k}"), c)
        })
        .collect();
    let res = run_grid(cfg, out, points)?;
    let series: Option<Vec<(f64, f64)>> = cfg
        .sweep
        .rounds
        .iter()
        .zip(&res)
        .map(|(&k, p)| p.mean_m().map(|m| (k as f64, m)))
        .collect();
    let slope = match &series {
        Some(s) => Some(rate_slope_fit(s)?),
        None => None,
    };
    let extra = json!({
        "series": series.as_ref().map(|s| s.iter().map(|&(k, m)| json!({"rounds": k as u64, "time_averaged_m": num(m)})).collect::<Vec<_>>()),
        "slope": slope.map(num),
    });
    finish(out, Mode::RateScaling, res, extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny(rounds: usize) -> RunConfig {
        parse_config_str(&format!(
            r#"{{"federation.n_agents": 3, "federation.samples_per_agent": [40, 30, 20],
                "federation.input_dim": 6, "federation.classes": 3, "model.feature_dim": 8,
                "train.rounds": {rounds}, "train.local_epochs": 1, "train.batch_size": 8}}"#
        ))
        .unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("mu_sweep".parse::<Mode>().unwrap(), Mode::MuSweep);
        match "bogus".parse::<Mode>() {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "mode"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_emits_five_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_single(&tiny(4), dir.path()).unwrap();
        assert_eq!(out.rows.len(), 4);
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["config.json", "final.ckpt", "metrics.csv", "summary.json", "topology.json"]);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn shared_fraction_matches_counts() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_single(&tiny(1), dir.path()).unwrap();
        let pc = &out.summary["param_counts"];
        let shared = pc["per_agent"]["communicated"].as_u64().unwrap();
        let full = pc["full_model"].as_u64().unwrap();
        // classes x (features + bias) and the backbone's d x h plus h biases
        assert_eq!(shared, 3 * 9);
        assert_eq!(full, 2 * 3 * 9 + 6 * 8 + 8);
        // 3 agents fully connected, every one online: 6 directed sends
        assert_eq!(out.summary["communication"]["total_params"].as_u64().unwrap(), 6 * shared);
    }

    #[test]
    fn checkpoints_every_interval() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(5);
        cfg.checkpoint_every = 2;
        run_single(&cfg, dir.path()).unwrap();
        assert!(dir.path().join("ckpt_round_2.ckpt").exists());
        assert!(dir.path().join("ckpt_round_4.ckpt").exists());
        assert!(!dir.path().join("ckpt_round_5.ckpt").exists());
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let full = tempfile::tempdir().unwrap();
        let mut cfg = tiny(6);
        cfg.checkpoint_every = 3;
        let whole = run_single(&cfg, full.path()).unwrap();

        let part = tempfile::tempdir().unwrap();
        let mut resumed = tiny(6);
        resumed.resume_from = Some(full.path().join("ckpt_round_3.ckpt"));
        let tail = run_single(&resumed, part.path()).unwrap();
        assert_eq!(tail.rows, whole.rows[3..]);
        assert_eq!(
            fs::read(full.path().join("final.ckpt")).unwrap(),
            fs::read(part.path().join("final.ckpt")).unwrap()
        );
    }

    #[test]
    fn missing_resume_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        cfg.resume_from = Some(dir.path().join("nope.ckpt"));
        assert_eq!(run_single(&cfg, dir.path()).unwrap_err().category(), "io-error");
    }

    #[test]
    fn indep_delta_is_the_accuracy_difference() {
        let dir = tempfile::tempdir().unwrap();
        let out = indep_baseline(&tiny(3), dir.path()).unwrap();
        let a = out.point("pema").unwrap().mean_accuracy();
        let b = out.point("indep").unwrap().mean_accuracy();
        let d = out.summary["accuracy_delta_points"].as_f64().unwrap();
        assert!((d - 100.0 * (a - b)).abs() < 1e-12);
        assert!(dir.path().join("pema/seed_0/metrics.csv").exists());
        assert!(dir.path().join("indep/seed_0/summary.json").exists());
    }

    #[test]
    fn sweep_seeds_nest_under_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        cfg.sweep.seeds = vec![3, 4];
        cfg.sweep.mu_values = vec![0.0, 1.0];
        let out = mu_sweep(&cfg, dir.path()).unwrap();
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.points[0].seeds, [3, 4]);
        for p in ["mu_0", "mu_1"] {
            for s in [3, 4] {
                assert!(dir.path().join(p).join(format!("seed_{s}")).join("metrics.csv").exists());
            }
        }
    }

    #[test]
    fn rate_scaling_needs_two_horizons() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        cfg.sweep.rounds = vec![10];
        match rate_scaling(&cfg, dir.path()) {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "sweep.rounds"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
