//! Diagnostics for the convergence quantities.
//!
//! Everything here reads federation state and never mutates it. Row `t` of
//! the metrics stream describes round `t`: the consensus error of the shared
//! adapters entering the round, the global partial gradients at their mean
//! `w̄(t)` (the shared part with the personalized adapters after the round's
//! local phase, the personalized part with those before it), M(t) built from
//! those three, and accuracy, loss and traffic measured once the round is
//! complete.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::datagen::draw_indices;
use crate::error::{Error, Result};
use crate::model::{AdapterParams, DualAdapterModel, FeatureMatrix, HeadGrads};
use crate::trainer::{FederationState, GradVNorm, Rates, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub consensus_error: f64,
    pub grad_w_sq: f64,
    pub grad_v_sq: f64,
    /// NaN when `η_w = 0`, where M(t) is undefined.
    pub lyapunov_m: f64,
    pub per_agent_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub communicated_params: u64,
    pub train_loss_mean: f64,
    pub mus: Vec<f64>,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `(1/N)·Σ‖w_i − w̄‖²`.
pub fn consensus_error(shared: &[AdapterParams]) -> Result<f64> {
    let slices: Vec<&[f64]> = shared.iter().map(AdapterParams::as_slice).collect();
    consensus_error_of(&slices)
}

pub fn consensus_error_of(vectors: &[&[f64]]) -> Result<f64> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("consensus error of zero adapters".into()))?;
    let len = first.len();
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; len];
    for v in vectors {
        if v.len() != len {
            return Err(Error::shape("shared adapter", len, v.len()));
        }
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let total: f64 = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    Ok(total / n)
}

/// Full-batch loss and gradients of every agent at `(w, v_i)` with the
/// agent's own μ.
fn grads_at(state: &FederationState, w: &AdapterParams, vs: &[AdapterParams], round: usize) -> Result<Vec<HeadGrads>> {
    state
        .agents
        .iter()
        .zip(vs)
        .enumerate()
        .map(|(i, (a, v))| {
            let m = DualAdapterModel::with_adapters(a.model.backbone().clone(), w.clone(), v.clone(), a.model.mu())?;
            let g = m.grads_on(a.train_features(), None)?;
            if !g.loss.is_finite() || !g.shared.iter().chain(&g.personalized).all(|x| x.is_finite()) {
                return Err(Error::Divergence {
                    agent: i,
                    round,
                    detail: "non-finite gradient in metrics".into(),
                });
            }
            Ok(g)
        })
        .collect()
}

fn mean_of(vectors: impl Iterator<Item = Vec<f64>>, n: usize) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialGrads {
    /// `(1/N)·Σ ∇_w L_i`.
    pub grad_w: Vec<f64>,
    pub per_agent_w_sq: Vec<f64>,
    /// `(1/N²)·Σ‖∇_{v_i} L_i‖²`.
    pub grad_v_sq_stacked: f64,
    /// `(1/N)·Σ‖∇_{v_i} L_i‖²`.
    pub grad_v_sq_mean: f64,
}

impl PartialGrads {
    pub fn grad_v_sq(&self, norm: GradVNorm) -> f64 {
        match norm {
            GradVNorm::Stacked => self.grad_v_sq_stacked,
            GradVNorm::PerAgentMean => self.grad_v_sq_mean,
        }
    }
}

fn partials(gs: &[HeadGrads]) -> PartialGrads {
    let n = gs.len();
    let v_sq: f64 = gs.iter().map(|g| sq_norm(&g.personalized)).sum();
    PartialGrads {
        grad_w: mean_of(gs.iter().map(|g| g.shared.clone()), n),
        per_agent_w_sq: gs.iter().map(|g| sq_norm(&g.shared)).collect(),
        grad_v_sq_stacked: v_sq / (n * n) as f64,
        grad_v_sq_mean: v_sq / n as f64,
    }
}

/// Global partial gradients with the current personalized adapters, at the
/// mean shared adapter when `at_mean` and at each agent's own otherwise.
pub fn global_partial_grads(state: &FederationState, at_mean: bool) -> Result<PartialGrads> {
    let vs = state.personalized();
    if at_mean {
        let w_bar = state.mean_shared();
        Ok(partials(&grads_at(state, &w_bar, &vs, state.round)?))
    } else {
        let gs = state
            .agents
            .iter()
            .map(|a| a.model.grads_on(a.train_features(), None))
            .collect::<Result<Vec<_>>>()?;
        Ok(partials(&gs))
    }
}

/// `consensus + grad_w_sq + (η_v·τ/η_w)·grad_v_sq`.
pub fn lyapunov_m(consensus: f64, grad_w_sq: f64, grad_v_sq: f64, eta_v: f64, eta_w: f64, tau: usize) -> Result<f64> {
    if !(eta_w > 0.0) {
        return Err(Error::config("train.eta_w", "M(t) needs a positive shared learning rate"));
    }
    Ok(consensus + grad_w_sq + (eta_v * tau as f64 / eta_w) * grad_v_sq)
}

/// Fraction of rows whose mixed-logit argmax equals the label.
pub fn accuracy(model: &DualAdapterModel, split: &FeatureMatrix) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty split".into()));
    }
    let hits = model
        .predict_on(split)?
        .iter()
        .zip(split.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / split.len() as f64)
}

/// Ordinary least-squares slope of `ln M` against `ln K`.
pub fn rate_slope_fit(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::InvalidInput(format!("slope fit needs 3 points, got {}", series.len())));
    }
    if let Some(p) = series.iter().find(|(k, m)| !(*k > 0.0 && *m > 0.0)) {
        return Err(Error::InvalidInput(format!("slope fit needs positive values, got {p:?}")));
    }
    let pts: Vec<(f64, f64)> = series.iter().map(|(k, m)| (k.ln(), m.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("slope fit needs distinct K values".into()));
    }
    Ok(sxy / sxx)
}

/// Builds the metrics row for round `round` once its gossip has finished.
#[allow(clippy::too_many_arguments)]
pub(crate) fn snapshot(
    state: &FederationState,
    round: usize,
    w_bar: &AdapterParams,
    v_before: &[AdapterParams],
    consensus: f64,
    comm: u64,
    rates: Rates,
    cfg: &TrainConfig,
) -> Result<RoundMetrics> {
    let after = grads_at(state, w_bar, &state.personalized(), round)?;
    let grad_w_sq = sq_norm(&partials(&after).grad_w);
    let before = grads_at(state, w_bar, v_before, round)?;
    let grad_v_sq = partials(&before).grad_v_sq(cfg.grad_v_norm);
    let lyapunov = if rates.eta_w > 0.0 {
        lyapunov_m(consensus, grad_w_sq, grad_v_sq, rates.eta_v, rates.eta_w, cfg.local_epochs)?
    } else {
        f64::NAN
    };
    let per_agent_accuracy = state
        .agents
        .iter()
        .map(|a| accuracy(&a.model, a.holdout_features()))
        .collect::<Result<Vec<_>>>()?;
    let mean_accuracy = per_agent_accuracy.iter().sum::<f64>() / state.n() as f64;
    let losses = state
        .agents
        .iter()
        .map(|a| a.model.loss_on(a.train_features(), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundMetrics {
        round,
        consensus_error: consensus,
        grad_w_sq,
        grad_v_sq,
        lyapunov_m: lyapunov,
        per_agent_accuracy,
        mean_accuracy,
        communicated_params: comm,
        train_loss_mean: losses.iter().sum::<f64>() / state.n() as f64,
        mus: state.mus(),
    })
}

/// Empirical lower bounds on the smoothness and variance constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionEstimates {
    /// `max(lipschitz_w, lipschitz_v)`.
    pub lipschitz_l: f64,
    pub lipschitz_w: f64,
    pub lipschitz_v: f64,
    /// Minibatch variance of the shared gradient.
    pub sigma1_sq: f64,
    /// Minibatch variance of the personalized gradient.
    pub sigma2_sq: f64,
    /// Dispersion of per-agent shared gradients around their mean.
    pub varsigma_sq: f64,
    pub probes: usize,
    pub batch_size: usize,
}

/// Standard deviation of the Gaussian perturbations around the current state.
const PROBE_SCALE: f64 = 0.1;
/// Length of the second point of each Lipschitz pair.
const PROBE_STEP: f64 = 1e-3;
const POWER_STEPS: usize = 8;

fn perturbed<R: Rng>(a: &AdapterParams, r: &mut R) -> AdapterParams {
    let mut out = a.clone();
    for x in out.as_mut_slice() {
        *x += PROBE_SCALE * Distribution::<f64>::sample(&StandardNormal, r);
    }
    out
}

/// Largest observed `‖∇f(x) − ∇f(x')‖/‖x − x'‖` for one block, with the
/// direction `x' − x` refined by power iteration on gradient differences.
fn block_lipschitz<R, F>(base: &AdapterParams, grad: F, r: &mut R) -> Result<f64>
where
    R: Rng,
    F: Fn(&AdapterParams) -> Result<Vec<f64>>,
{
    let g0 = grad(base)?;
    let mut dir: Vec<f64> = (0..base.len())
        .map(|_| Distribution::<f64>::sample(&StandardNormal, r))
        .collect();
    let mut best: f64 = 0.0;
    for _ in 0..POWER_STEPS {
        let norm = sq_norm(&dir).sqrt();
        if !(norm > 0.0) {
            break;
        }
        let mut probe = base.clone();
        for (x, d) in probe.as_mut_slice().iter_mut().zip(&dir) {
            *x += PROBE_STEP * d / norm;
        }
        let moved: f64 = probe
            .as_slice()
            .iter()
            .zip(base.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if moved == 0.0 {
            break;
        }
        let g1 = grad(&probe)?;
        dir = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        best = best.max(sq_norm(&dir).sqrt() / moved);
    }
    Ok(best)
}

/// Probes the federation around its current state. Every returned value is
/// a lower bound of the corresponding supremum.
pub fn estimate_assumptions<R: Rng>(
    state: &FederationState,
    probes: usize,
    batch_size: usize,
    r: &mut R,
) -> Result<AssumptionEstimates> {
    if probes < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 probes, got {probes}")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let n = state.n();
    let (mut lw, mut lv) = (0.0f64, 0.0f64);
    let (mut s1, mut s2) = (0.0, 0.0);
    let w_bar = state.mean_shared();
    for p in 0..probes {
        let a = &state.agents[p % n];
        let feats = a.train_features();
        let bb = a.model.backbone().clone();
        let mu = a.model.mu();
        let w = perturbed(&w_bar, r);
        let v = perturbed(&a.model.personalized, r);
        let gw = |x: &AdapterParams| -> Result<Vec<f64>> {
            let m = DualAdapterModel::with_adapters(bb.clone(), x.clone(), v.clone(), mu)?;
            Ok(m.grads_on(feats, None)?.shared)
        };
        lw = lw.max(block_lipschitz(&w, gw, r)?);
        let gv = |x: &AdapterParams| -> Result<Vec<f64>> {
            let m = DualAdapterModel::with_adapters(bb.clone(), w.clone(), x.clone(), mu)?;
            Ok(m.grads_on(feats, None)?.personalized)
        };
        lv = lv.max(block_lipschitz(&v, gv, r)?);

        if batch_size < feats.len() {
            let full = a.model.grads_on(feats, None)?;
            let rows = draw_indices(feats.len(), batch_size, r)?;
            let mb = a.model.grads_on(feats, Some(&rows))?;
            s1 += full.shared.iter().zip(&mb.shared).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            s2 += full
                .personalized
                .iter()
                .zip(&mb.personalized)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
    }

    let vs = state.personalized();
    let mut varsigma: f64 = 0.0;
    for p in 0..probes {
        let w = if p == 0 { w_bar.clone() } else { perturbed(&w_bar, r) };
        let gs = grads_at(state, &w, &vs, state.round)?;
        let mean = mean_of(gs.iter().map(|g| g.shared.clone()), n);
        let spread = gs
            .iter()
            .map(|g| g.shared.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        varsigma = varsigma.max(spread);
    }
    Ok(AssumptionEstimates {
        lipschitz_l: lw.max(lv),
        lipschitz_w: lw,
        lipschitz_v: lv,
        sigma1_sq: s1 / probes as f64,
        sigma2_sq: s2 / probes as f64,
        varsigma_sq: varsigma,
        probes,
        batch_size,
    })
}

/// Streams metric rows as comma-separated text.
pub struct MetricsWriter<W: Write> {
    out: W,
    agents: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, agents: usize) -> std::io::Result<Self> {
        let mut header = String::from("round,consensus_error,grad_w_sq,grad_v_sq,lyapunov_m,mean_acc");
        for i in 0..agents {
            header.push_str(&format!(",acc_agent_{i}"));
        }
        header.push_str(",comm_params,train_loss");
        writeln!(out, "{header}")?;
        Ok(MetricsWriter { out, agents })
    }

    pub fn write_row(&mut self, m: &RoundMetrics) -> std::io::Result<()> {
        debug_assert_eq!(m.per_agent_accuracy.len(), self.agents);
        let mut line = format!(
            "{},{},{},{},{},{}",
            m.round, m.consensus_error, m.grad_w_sq, m.grad_v_sq, m.lyapunov_m, m.mean_accuracy
        );
        for a in &m.per_agent_accuracy {
            line.push_str(&format!(",{a}"));
        }
        line.push_str(&format!(",{},{}", m.communicated_params, m.train_loss_mean));
        writeln!(self.out, "{line}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Mean of `lyapunov_m` over a run's rows.
pub fn time_averaged_m(rows: &[RoundMetrics]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|r| r.lyapunov_m).sum::<f64>() / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::AgentDataset;
    use crate::model::{AdapterRole, Backbone, Sample};
    use crate::topology::{Topology, TopologyKind};
    use crate::trainer::{run_experiment, MuPolicy, RateSchedule};
    use crate::verification::symmetric_eigenvalues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn identity_backbone(d: usize) -> Arc<Backbone> {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Arc::new(Backbone::from_parts(d, d, w, vec![0.0; d]).unwrap())
    }

    fn dataset(id: usize, samples: Vec<Sample>, d: usize, c: usize) -> AgentDataset {
        let holdout = samples.clone();
        AgentDataset {
            agent_id: id,
            train: samples,
            holdout,
            rotation_angle: 0.0,
            label_weights: vec![1.0 / c as f64; c],
            input_dim: d,
            classes: c,
        }
    }

    fn state_from(bb: Arc<Backbone>, sets: Vec<AgentDataset>, mu: f64) -> FederationState {
        let n = sets.len();
        let topo = Topology::build(TopologyKind::FullyConnected, n, 0).unwrap();
        FederationState::new(bb, sets, topo, &MuPolicy::Fixed { mu }).unwrap()
    }

    fn random_samples(n: usize, d: usize, c: usize, seed: u64) -> Vec<Sample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Sample {
                x: (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
                label: i % c,
            })
            .collect()
    }

    #[test]
    fn consensus_cases() {
        let one = |v: f64| AdapterParams::from_flat(1, 0, AdapterRole::Shared, vec![v]).unwrap();
        assert_eq!(consensus_error(&[one(1.0), one(-1.0)]).unwrap(), 1.0);
        assert_eq!(consensus_error(&[one(2.5), one(2.5), one(2.5)]).unwrap(), 0.0);
        assert!(consensus_error(&[]).is_err());
    }

    proptest! {
        #[test]
        fn consensus_matches_moment_form(vals in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..8)) {
            let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
            let got = consensus_error_of(&refs).unwrap();
            // E‖w‖² − ‖E w‖², coordinate by coordinate
            let n = vals.len() as f64;
            let mut expect = 0.0;
            for k in 0..5 {
                let m1 = vals.iter().map(|v| v[k]).sum::<f64>() / n;
                let m2 = vals.iter().map(|v| v[k] * v[k]).sum::<f64>() / n;
                expect += m2 - m1 * m1;
            }
            prop_assert!((got - expect).abs() < 1e-12);
        }

        #[test]
        fn consensus_permutation_invariant(vals in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..7), rot in 0usize..7) {
            let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
            let mut perm = refs.clone();
            perm.rotate_left(rot % refs.len());
            perm.reverse();
            let (a, b) = (consensus_error_of(&refs).unwrap(), consensus_error_of(&perm).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn lyapunov_linear(c in 0.0f64..5.0, gw in 0.0f64..5.0, gv in 0.0f64..5.0, s in 0.0f64..4.0) {
            let m = |a, b, d| lyapunov_m(a, b, d, 0.3, 0.7, 2).unwrap();
            let base = m(c, gw, gv);
            prop_assert!((m(s * c, gw, gv) - (base + (s - 1.0) * c)).abs() < 1e-12);
            prop_assert!((m(c, s * gw, gv) - (base + (s - 1.0) * gw)).abs() < 1e-12);
            let k = 0.3 * 2.0 / 0.7;
            prop_assert!((m(c, gw, s * gv) - (base + (s - 1.0) * k * gv)).abs() < 1e-12);
        }
    }

    #[test]
    fn lyapunov_cases() {
        assert_eq!(lyapunov_m(0.0, 0.0, 0.0, 0.1, 0.1, 3).unwrap(), 0.0);
        assert_eq!(lyapunov_m(1.0, 1.0, 1.0, 0.5, 0.5, 1).unwrap(), 3.0);
        assert_eq!(lyapunov_m(1.0, 1.0, 1.0, 0.5, 0.0, 1).unwrap_err().category(), "invalid-config");
        for (k, tau, n) in [(100usize, 5usize, 4usize), (1600, 2, 9), (37, 7, 3)] {
            let (k, t, nn) = (k as f64, tau as f64, n as f64);
            let eta_v = 1.0 / (t * k.sqrt());
            let eta_w = (nn / k).sqrt();
            let coef = lyapunov_m(0.0, 0.0, 1.0, eta_v, eta_w, tau).unwrap();
            assert!((coef - 1.0 / nn.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn slope_cases() {
        let exact: Vec<(f64, f64)> = [100.0f64, 400.0, 1600.0].iter().map(|&k| (k, k.powf(-0.5))).collect();
        assert!((rate_slope_fit(&exact).unwrap() + 0.5).abs() < 1e-12);
        let flat = [(100.0, 2.0), (400.0, 2.0), (1600.0, 2.0)];
        assert_eq!(rate_slope_fit(&flat).unwrap(), 0.0);
        assert!(rate_slope_fit(&[(100.0, 1.0), (400.0, 0.0), (1600.0, 1.0)]).is_err());
        assert!(rate_slope_fit(&exact[..2]).is_err());
    }

    #[test]
    fn zero_adapters_predict_class_zero() {
        let bb = identity_backbone(2);
        let samples = vec![
            Sample { x: vec![1.0, 0.0], label: 0 },
            Sample { x: vec![0.0, 1.0], label: 1 },
            Sample { x: vec![1.0, 1.0], label: 1 },
            Sample { x: vec![0.5, 0.5], label: 0 },
        ];
        let feats = bb.featurize(&samples).unwrap();
        let m = DualAdapterModel::new(bb, 2, 0.5).unwrap();
        assert_eq!(accuracy(&m, &feats).unwrap(), 0.5);
        let one = m.backbone().featurize(&samples[..1]).unwrap();
        assert_eq!(accuracy(&m, &one).unwrap(), 1.0);
        let empty = FeatureMatrix::from_rows(2, vec![], vec![]).unwrap();
        assert!(accuracy(&m, &empty).is_err());
    }

    #[test]
    fn constant_logit_shift_keeps_accuracy() {
        let bb = Arc::new(Backbone::random(4, 6, 3).unwrap());
        let samples = random_samples(50, 4, 3, 2);
        let feats = bb.featurize(&samples).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut m = DualAdapterModel::new(bb, 3, 0.4).unwrap();
        for x in m.shared.as_mut_slice().iter_mut().chain(m.personalized.as_mut_slice()) {
            *x = r.random::<f64>() - 0.5;
        }
        let before = accuracy(&m, &feats).unwrap();
        // a common bias shift moves every mixed logit by the same constant
        let (c, h) = (3, 6);
        for k in 0..c {
            m.shared.as_mut_slice()[c * h + k] += 7.0;
            m.personalized.as_mut_slice()[c * h + k] += 7.0;
        }
        assert_eq!(accuracy(&m, &feats).unwrap(), before);
    }

    #[test]
    fn separable_set_reaches_full_accuracy() {
        let bb = identity_backbone(2);
        let samples: Vec<Sample> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                Sample { x: vec![s * (10.0 + i as f64), 3.0], label: i % 2 }
            })
            .collect();
        let feats = bb.featurize(&samples).unwrap();
        let mut m = DualAdapterModel::new(bb, 2, 0.5).unwrap();
        for _ in 0..100_000 {
            let g = m.grads_on(&feats, None).unwrap();
            if g.loss < 1e-7 {
                break;
            }
            m.shared.descend(1.0, &g.shared);
            m.personalized.descend(1.0, &g.personalized);
        }
        assert!(m.loss_on(&feats, None).unwrap() < 1e-6);
        assert_eq!(accuracy(&m, &feats).unwrap(), 1.0);
    }

    #[test]
    fn mirrored_agents_cancel_shared_gradient() {
        // Same inputs, two-class labels swapped: at zero adapters the softmax
        // residual of every sample flips sign, so the two agents' shared
        // gradients are exact negatives.
        let bb = identity_backbone(3);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<Sample> = (0..30)
            .map(|_| {
                let u: f64 = r.random();
                Sample { x: vec![u, 1.0 - u, 0.5], label: usize::from(u > 0.5) }
            })
            .collect();
        let mirror: Vec<Sample> = base.iter().map(|s| Sample { x: s.x.clone(), label: 1 - s.label }).collect();
        let st = state_from(bb, vec![dataset(0, base, 3, 2), dataset(1, mirror, 3, 2)], 0.5);
        let pg = global_partial_grads(&st, true).unwrap();
        assert!(pg.per_agent_w_sq.iter().all(|&s| s.sqrt() > 0.1), "{:?}", pg.per_agent_w_sq);
        assert!(sq_norm(&pg.grad_w).sqrt() < 1e-10, "{:?}", pg.grad_w);
    }

    #[test]
    fn single_agent_average_is_its_own_gradient() {
        let bb = Arc::new(Backbone::random(3, 5, 1).unwrap());
        let s = random_samples(25, 3, 3, 8);
        let mut st = state_from(bb, vec![dataset(0, s.clone(), 3, 3), dataset(1, s, 3, 3)], 0.5);
        st.agents[0].model.shared.as_mut_slice()[4] = 0.7;
        st.agents[1].model.shared.as_mut_slice()[4] = 0.7;
        let pg = global_partial_grads(&st, false).unwrap();
        let own = st.agents[0].model.grads_on(st.agents[0].train_features(), None).unwrap();
        for (a, b) in pg.grad_w.iter().zip(&own.shared) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn presolved_optimum_has_tiny_gradients() {
        let bb = Arc::new(Backbone::random(3, 4, 2).unwrap());
        let s = random_samples(40, 3, 2, 3);
        let mut st = state_from(bb, vec![dataset(0, s.clone(), 3, 2), dataset(1, s, 3, 2)], 0.5);
        // add an L2-free convex head solve by plain gradient descent; the
        // random labels keep the optimum finite
        let feats = st.agents[0].train_features().clone();
        let mut m = st.agents[0].model.clone();
        for _ in 0..200_000 {
            let g = m.grads_on(&feats, None).unwrap();
            if sq_norm(&g.shared) + sq_norm(&g.personalized) < 1e-24 {
                break;
            }
            m.shared.descend(4.0, &g.shared);
            m.personalized.descend(4.0, &g.personalized);
        }
        for a in &mut st.agents {
            a.model.shared = m.shared.clone();
            a.model.personalized = m.personalized.clone();
        }
        let pg = global_partial_grads(&st, true).unwrap();
        assert!(sq_norm(&pg.grad_w).sqrt() < 1e-10);
        assert!(pg.grad_v_sq_mean.sqrt() < 1e-10);
    }

    #[test]
    fn full_batch_probes_have_no_variance_and_twins_no_spread() {
        let bb = Arc::new(Backbone::random(3, 4, 2).unwrap());
        let s = random_samples(30, 3, 3, 4);
        let st = state_from(bb, vec![dataset(0, s.clone(), 3, 3), dataset(1, s, 3, 3)], 0.5);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let est = estimate_assumptions(&st, 10, 30, &mut r).unwrap();
        assert_eq!(est.sigma1_sq, 0.0);
        assert_eq!(est.sigma2_sq, 0.0);
        assert!(est.varsigma_sq < 1e-12);
        assert!(est.lipschitz_l > 0.0 && est.lipschitz_l.is_finite());
        let est = estimate_assumptions(&st, 10, 5, &mut r).unwrap();
        assert!(est.sigma1_sq > 0.0 && est.sigma2_sq > 0.0);
        assert!(estimate_assumptions(&st, 9, 5, &mut r).is_err());
    }

    #[test]
    fn lipschitz_estimate_tracks_hessian_oracle() {
        let (d, h, c, mu) = (3, 6, 2, 0.5);
        let bb = Arc::new(Backbone::random(d, h, 13).unwrap());
        let s = random_samples(40, d, c, 6);
        let st = state_from(bb.clone(), vec![dataset(0, s.clone(), d, c), dataset(1, s, d, c)], mu);
        let feats = st.agents[0].train_features();

        // explicit Hessian of the mean loss in the shared head at zero
        // adapters, in the flattened (weight rows, then bias) layout
        let p = c * h + c;
        let mut hess = vec![0.0; p * p];
        let m = feats.len() as f64;
        let idx = |k: usize, j: usize| if j < h { k * h + j } else { c * h + k };
        for i in 0..feats.len() {
            let mut f = feats.row(i).to_vec();
            f.push(1.0);
            let prob = [0.5, 0.5];
            for k in 0..c {
                for l in 0..c {
                    let s_kl = if k == l { prob[k] } else { 0.0 } - prob[k] * prob[l];
                    for a in 0..=h {
                        for b in 0..=h {
                            hess[idx(k, a) * p + idx(l, b)] += (1.0 - mu) * (1.0 - mu) * s_kl * f[a] * f[b] / m;
                        }
                    }
                }
            }
        }
        let top = symmetric_eigenvalues(p, &hess).unwrap()[0];
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_assumptions(&st, 10, 8, &mut r).unwrap();
        let ratio = est.lipschitz_l / top;
        assert!((0.5..=2.0).contains(&ratio), "estimate {} vs oracle {top}", est.lipschitz_l);
    }

    #[test]
    fn metrics_rows_are_consistent() {
        let bb = Arc::new(Backbone::random(3, 4, 2).unwrap());
        let sets = (0..3).map(|i| dataset(i, random_samples(20, 3, 3, i as u64), 3, 3)).collect();
        let mut st = state_from(bb, sets, 0.5);
        let cfg = TrainConfig {
            rounds: 4,
            local_epochs: 2,
            rate_schedule: RateSchedule::Manual { eta_w: 0.4, eta_v: 0.2 },
            batch_size: 5,
            ..TrainConfig::default()
        };
        let rows = run_experiment(&cfg, &mut st).unwrap();
        assert_eq!(rows[0].consensus_error, 0.0);
        for row in &rows {
            let m = lyapunov_m(row.consensus_error, row.grad_w_sq, row.grad_v_sq, 0.2, 0.4, 2).unwrap();
            assert_eq!(row.lyapunov_m, m);
            assert_eq!(row.communicated_params, 3 * 2 * 15);
            assert!(row.per_agent_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let mut buf = Vec::new();
        {
            let mut w = MetricsWriter::new(&mut buf, 3).unwrap();
            for row in &rows {
                w.write_row(row).unwrap();
            }
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,consensus_error,grad_w_sq,grad_v_sq,lyapunov_m,mean_acc,acc_agent_0,acc_agent_1,acc_agent_2,comm_params,train_loss"
        );
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn metrics_do_not_touch_state() {
        let bb = Arc::new(Backbone::random(3, 4, 2).unwrap());
        let sets = (0..2).map(|i| dataset(i, random_samples(20, 3, 3, i as u64), 3, 3)).collect();
        let st = state_from(bb, sets, 0.5);
        let before = (st.shared(), st.personalized(), st.mus(), st.round);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        global_partial_grads(&st, true).unwrap();
        estimate_assumptions(&st, 10, 4, &mut r).unwrap();
        assert_eq!(before, (st.shared(), st.personalized(), st.mus(), st.round));
    }
}
