//! Round orchestration.
//!
//! A round is: draw the online mask, run each online agent's local phase
//! (nested or parallel), gossip the staged shared adapters, optionally adapt
//! each agent's μ, then snapshot metrics. Every agent's local phase reads and
//! writes only that agent's state and draws from a stream keyed by
//! `(seed, agent, round)`, so a round's outcome does not depend on the order
//! agents are processed in.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{draw_indices, AgentDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, RoundMetrics};
use crate::model::{AdapterParams, Backbone, DualAdapterModel, FeatureMatrix, HeadGrads};
use crate::rng::{self, StreamRng};
use crate::topology::{induced_weights, MixingMatrix, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuPolicy {
    Fixed { mu: f64 },
    PerAgent { mus: Vec<f64> },
    /// Starts every agent at `initial` and moves μ toward the holdout-best
    /// grid point after each round.
    Adaptive {
        initial: f64,
        grid_step: f64,
        ema_decay: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// τ personalized epochs with w frozen, then a single shared step.
    Nested,
    /// Both adapters step together from a common evaluation point.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateSchedule {
    Manual { eta_w: f64, eta_v: f64 },
    /// `η_v = 1/(τ√K)`, `η_w = √(N/K)`.
    Corollary1,
}

/// How many optimizer steps one local epoch takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Shuffle, then one step per minibatch until the train split is covered.
    PerBatch,
    /// One step on a single sampled minibatch.
    PerEpoch,
}

/// What gets averaged during gossip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GossipScope {
    Shared,
    /// Reference baseline that exchanges the whole model: both heads are
    /// averaged and the frozen backbone is counted as transmitted.
    FullModel,
    /// No communication at all (the independent baseline).
    Disabled,
}

/// Reading of the personalized-gradient term in M(t).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradVNorm {
    /// `‖(1/N)·stack(g_1, …, g_N)‖² = (1/N²)·Σ‖g_i‖²`.
    Stacked,
    /// `(1/N)·Σ‖g_i‖²`.
    PerAgentMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub rate_schedule: RateSchedule,
    pub mu_policy: MuPolicy,
    pub variant: Variant,
    pub step_mode: StepMode,
    pub batch_size: usize,
    pub dropout_prob: f64,
    pub seed: u64,
    pub gossip_scope: GossipScope,
    pub grad_v_norm: GradVNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 100,
            local_epochs: 5,
            rate_schedule: RateSchedule::Corollary1,
            mu_policy: MuPolicy::Fixed { mu: 0.5 },
            variant: Variant::Nested,
            step_mode: StepMode::PerBatch,
            batch_size: 128,
            dropout_prob: 0.0,
            seed: 0,
            gossip_scope: GossipScope::Shared,
            grad_v_norm: GradVNorm::Stacked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub eta_w: f64,
    pub eta_v: f64,
}

impl TrainConfig {
    pub fn rates(&self, n_agents: usize) -> Result<Rates> {
        match self.rate_schedule {
            RateSchedule::Manual { eta_w, eta_v } => Ok(Rates { eta_w, eta_v }),
            RateSchedule::Corollary1 => {
                if self.rounds == 0 {
                    return Err(Error::config("train.rounds", "corollary1 rates need at least one round"));
                }
                let k = self.rounds as f64;
                Ok(Rates {
                    eta_v: 1.0 / (self.local_epochs as f64 * k.sqrt()),
                    eta_w: (n_agents as f64 / k).sqrt(),
                })
            }
        }
    }

    /// The independent baseline: same schedule, no communication, μ = 1.
    pub fn indep(&self) -> TrainConfig {
        TrainConfig {
            mu_policy: MuPolicy::Fixed { mu: 1.0 },
            gossip_scope: GossipScope::Disabled,
            ..self.clone()
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("train.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("train.dropout_prob", "must lie in [0, 1)"));
        }
        if let RateSchedule::Manual { eta_w, eta_v } = self.rate_schedule {
            if !(eta_w >= 0.0 && eta_w.is_finite()) {
                return Err(Error::config("train.eta_w", "must be finite and nonnegative"));
            }
            if !(eta_v >= 0.0 && eta_v.is_finite()) {
                return Err(Error::config("train.eta_v", "must be finite and nonnegative"));
            }
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        match &self.mu_policy {
            MuPolicy::Fixed { mu } => {
                if !in_unit(*mu) {
                    return Err(Error::config("train.mu", format!("must lie in [0, 1], got {mu}")));
                }
            }
            MuPolicy::PerAgent { mus } => {
                if mus.len() != n_agents {
                    return Err(Error::config(
                        "train.mu_per_agent",
                        format!("expected {n_agents} entries, got {}", mus.len()),
                    ));
                }
                if let Some(m) = mus.iter().find(|m| !in_unit(**m)) {
                    return Err(Error::config("train.mu_per_agent", format!("{m} outside [0, 1]")));
                }
            }
            MuPolicy::Adaptive {
                initial,
                grid_step,
                ema_decay,
            } => {
                if !in_unit(*initial) {
                    return Err(Error::config("train.mu", format!("must lie in [0, 1], got {initial}")));
                }
                mu_grid(*grid_step)?;
                if !in_unit(*ema_decay) {
                    return Err(Error::config("train.mu_ema_decay", "must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// The grid `{0, step, 2·step, …, 1}`; `1/step` must be a whole number.
pub fn mu_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("train.mu_grid_step", "must lie in (0, 1]"));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::config("train.mu_grid_step", "1/step must be a whole number"));
    }
    let n = n as usize;
    Ok((0..=n).map(|k| k as f64 / n as f64).collect())
}

/// Grid point with the smallest loss. Losses within `1e-12` (relative) of
/// each other count as tied, and ties go to the larger μ.
pub fn grid_argmin(grid: &[f64], losses: &[f64]) -> Result<f64> {
    if grid.is_empty() || grid.len() != losses.len() {
        return Err(Error::InvalidInput(format!(
            "grid of {} points with {} losses",
            grid.len(),
            losses.len()
        )));
    }
    let mut best = 0;
    for k in 1..grid.len() {
        let tol = 1e-12 * losses[best].abs().max(1.0);
        if losses[k] <= losses[best] + tol {
            best = k;
        }
    }
    Ok(grid[best])
}

/// One agent with its cached backbone features.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub model: DualAdapterModel,
    pub data: AgentDataset,
    train_feats: FeatureMatrix,
    holdout_feats: FeatureMatrix,
}

impl AgentState {
    pub fn new(model: DualAdapterModel, data: AgentDataset) -> Result<Self> {
        let bb = model.backbone().clone();
        if data.input_dim != bb.input_dim() {
            return Err(Error::shape("agent input dimension", bb.input_dim(), data.input_dim));
        }
        if data.classes != model.classes() {
            return Err(Error::shape("agent class count", model.classes(), data.classes));
        }
        let train_feats = bb.featurize(&data.train)?;
        let holdout_feats = bb.featurize(&data.holdout)?;
        Ok(AgentState {
            model,
            data,
            train_feats,
            holdout_feats,
        })
    }

    pub fn train_features(&self) -> &FeatureMatrix {
        &self.train_feats
    }

    pub fn holdout_features(&self) -> &FeatureMatrix {
        &self.holdout_feats
    }
}

#[derive(Debug, Clone)]
pub struct FederationState {
    pub agents: Vec<AgentState>,
    pub topology: Topology,
    pub mixing: MixingMatrix,
    /// Number of completed rounds.
    pub round: usize,
}

impl FederationState {
    /// Zero-initialized adapters, so every shared adapter starts identical.
    pub fn new(
        backbone: Arc<Backbone>,
        datasets: Vec<AgentDataset>,
        topology: Topology,
        mu_policy: &MuPolicy,
    ) -> Result<Self> {
        let n = datasets.len();
        if topology.n != n {
            return Err(Error::shape("topology size", n, topology.n));
        }
        let mixing = MixingMatrix::from_topology(&topology)?;
        let classes = datasets.first().map_or(0, |d| d.classes);
        let agents = datasets
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                let mu = initial_mu(mu_policy, i, n)?;
                let model = DualAdapterModel::new(backbone.clone(), classes, mu)?;
                AgentState::new(model, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FederationState {
            agents,
            topology,
            mixing,
            round: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn shared(&self) -> Vec<AdapterParams> {
        self.agents.iter().map(|a| a.model.shared.clone()).collect()
    }

    pub fn personalized(&self) -> Vec<AdapterParams> {
        self.agents.iter().map(|a| a.model.personalized.clone()).collect()
    }

    pub fn mus(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.model.mu()).collect()
    }

    /// Coordinatewise mean of the shared adapters.
    pub fn mean_shared(&self) -> AdapterParams {
        let mut acc = self.agents[0].model.shared.clone();
        let n = self.n() as f64;
        let sum = acc.as_mut_slice();
        sum.iter_mut().for_each(|v| *v = 0.0);
        for a in &self.agents {
            for (s, v) in sum.iter_mut().zip(a.model.shared.as_slice()) {
                *s += v;
            }
        }
        sum.iter_mut().for_each(|v| *v /= n);
        acc
    }

    pub fn set_shared(&mut self, shared: Vec<AdapterParams>) -> Result<()> {
        if shared.len() != self.n() {
            return Err(Error::shape("shared adapters", self.n(), shared.len()));
        }
        for (a, w) in self.agents.iter_mut().zip(shared) {
            if !w.same_shape(&a.model.shared) {
                return Err(Error::shape("shared adapter", a.model.shared.len(), w.len()));
            }
            a.model.shared = w;
        }
        Ok(())
    }
}

fn initial_mu(policy: &MuPolicy, agent: usize, n: usize) -> Result<f64> {
    Ok(match policy {
        MuPolicy::Fixed { mu } => *mu,
        MuPolicy::PerAgent { mus } => *mus.get(agent).ok_or_else(|| {
            Error::config("train.mu_per_agent", format!("expected {n} entries, got {}", mus.len()))
        })?,
        MuPolicy::Adaptive { initial, .. } => *initial,
    })
}

fn check_step(g: &HeadGrads, agent: usize, round: usize) -> Result<()> {
    let detail = if !g.loss.is_finite() {
        "non-finite loss"
    } else if !g.shared.iter().chain(&g.personalized).all(|v| v.is_finite()) {
        "non-finite gradient"
    } else {
        return Ok(());
    };
    Err(Error::Divergence {
        agent,
        round,
        detail: detail.into(),
    })
}

/// Row-index batches for one local epoch. Batch sizes larger than the train
/// split are clamped to it.
fn epoch_batches(n: usize, batch_size: usize, mode: StepMode, r: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
    let bs = batch_size.min(n);
    match mode {
        StepMode::PerBatch => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(r);
            Ok(order.chunks(bs).map(<[usize]>::to_vec).collect())
        }
        StepMode::PerEpoch => Ok(vec![draw_indices(n, bs, r)?]),
    }
}

/// The local phase of one agent, returning `(staged w, new v)`.
fn local_update(
    agent: &AgentState,
    id: usize,
    round: usize,
    cfg: &TrainConfig,
    rates: Rates,
    variant: Variant,
) -> Result<(AdapterParams, AdapterParams)> {
    let mut r = rng::stream(cfg.seed, &[rng::tag::LOCAL_TRAIN, id as u64, round as u64]);
    let feats = &agent.train_feats;
    let mut model = agent.model.clone();
    match variant {
        Variant::Nested => {
            for _ in 0..cfg.local_epochs {
                for batch in epoch_batches(feats.len(), cfg.batch_size, cfg.step_mode, &mut r)? {
                    let g = model.grads_on(feats, Some(&batch))?;
                    check_step(&g, id, round)?;
                    model.personalized.descend(rates.eta_v, &g.personalized);
                }
            }
            let batch = draw_indices(feats.len(), cfg.batch_size.min(feats.len()), &mut r)?;
            let g = model.grads_on(feats, Some(&batch))?;
            check_step(&g, id, round)?;
            model.shared.descend(rates.eta_w, &g.shared);
        }
        Variant::Parallel => {
            for _ in 0..cfg.local_epochs {
                for batch in epoch_batches(feats.len(), cfg.batch_size, cfg.step_mode, &mut r)? {
                    let g = model.grads_on(feats, Some(&batch))?;
                    check_step(&g, id, round)?;
                    model.personalized.descend(rates.eta_v, &g.personalized);
                    model.shared.descend(rates.eta_w, &g.shared);
                }
            }
        }
    }
    Ok((model.shared, model.personalized))
}

fn local_phase_as(
    state: &mut FederationState,
    cfg: &TrainConfig,
    rates: Rates,
    online: &[bool],
    variant: Variant,
) -> Result<Vec<AdapterParams>> {
    if online.len() != state.n() {
        return Err(Error::shape("online mask", state.n(), online.len()));
    }
    let round = state.round;
    let mut staged = Vec::with_capacity(state.n());
    for (id, agent) in state.agents.iter_mut().enumerate() {
        if !online[id] {
            staged.push(agent.model.shared.clone());
            continue;
        }
        let (w, v) = local_update(agent, id, round, cfg, rates, variant)?;
        agent.model.personalized = v;
        staged.push(w);
    }
    Ok(staged)
}

/// Nested local phase for every online agent. Personalized adapters are
/// updated in place; the staged shared adapters `w_i(t+½)` are returned and
/// the agents' current shared adapters are left untouched.
pub fn local_phase_nested(
    state: &mut FederationState,
    cfg: &TrainConfig,
    rates: Rates,
    online: &[bool],
) -> Result<Vec<AdapterParams>> {
    local_phase_as(state, cfg, rates, online, Variant::Nested)
}

/// Parallel local phase; same contract as [`local_phase_nested`].
pub fn local_phase_parallel(
    state: &mut FederationState,
    cfg: &TrainConfig,
    rates: Rates,
    online: &[bool],
) -> Result<Vec<AdapterParams>> {
    local_phase_as(state, cfg, rates, online, Variant::Parallel)
}

fn mix(staged: &[AdapterParams], n: usize, weights: &[f64]) -> Result<Vec<AdapterParams>> {
    if staged.len() != n {
        return Err(Error::shape("staged adapters", n, staged.len()));
    }
    let first = &staged[0];
    if let Some(bad) = staged.iter().find(|s| !s.same_shape(first)) {
        return Err(Error::shape("staged adapter", first.len(), bad.len()));
    }
    Ok((0..n)
        .map(|i| {
            let mut out = first.clone();
            let acc = out.as_mut_slice();
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (j, s) in staged.iter().enumerate() {
                let p = weights[i * n + j];
                if p == 0.0 {
                    continue;
                }
                for (a, x) in acc.iter_mut().zip(s.as_slice()) {
                    *a += p * x;
                }
            }
            out
        })
        .collect())
}

/// `w_i ← Σ_j P_ij w_j` for every agent.
pub fn gossip_round(staged: &[AdapterParams], mixing: &MixingMatrix) -> Result<Vec<AdapterParams>> {
    mix(staged, mixing.n(), mixing.weights())
}

/// Gossip restricted to the online agents; offline agents keep their value.
pub fn masked_gossip(
    staged: &[AdapterParams],
    topo: &Topology,
    mixing: &MixingMatrix,
    online: &[bool],
) -> Result<Vec<AdapterParams>> {
    if online.len() != mixing.n() {
        return Err(Error::shape("online mask", mixing.n(), online.len()));
    }
    mix(staged, mixing.n(), &induced_weights(topo, mixing, online))
}

/// Each agent is independently offline with probability `p`. With `p = 0`
/// nothing is drawn.
pub fn draw_online_mask<R: Rng>(n: usize, p: f64, r: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return vec![true; n];
    }
    (0..n).map(|_| !r.random_bool(p)).collect()
}

pub fn dropout_gossip<R: Rng>(
    staged: &[AdapterParams],
    topo: &Topology,
    mixing: &MixingMatrix,
    dropout_prob: f64,
    r: &mut R,
) -> Result<(Vec<AdapterParams>, Vec<bool>)> {
    if !(0.0..1.0).contains(&dropout_prob) {
        return Err(Error::config("train.dropout_prob", "must lie in [0, 1)"));
    }
    let online = draw_online_mask(mixing.n(), dropout_prob, r);
    let next = masked_gossip(staged, topo, mixing, &online)?;
    Ok((next, online))
}

/// Parameters sent in one round: every online agent sends `payload` values
/// to each online neighbor.
pub fn communicated_params(topo: &Topology, online: &[bool], payload: usize) -> u64 {
    topo.edges
        .iter()
        .filter(|&&(a, b)| online[a] && online[b])
        .count() as u64
        * 2
        * payload as u64
}

/// Moves μ toward the holdout-loss minimizer on the μ grid:
/// `μ ← ema_decay·μ + (1 − ema_decay)·argmin`.
pub fn adapt_mu(model: &mut DualAdapterModel, holdout: &FeatureMatrix, grid_step: f64, ema_decay: f64) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::InvalidInput("adaptive μ needs a nonempty holdout".into()));
    }
    let grid = mu_grid(grid_step)?;
    let mut probe = model.clone();
    let losses = grid
        .iter()
        .map(|&m| {
            probe.set_mu(m)?;
            probe.loss_on(holdout, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = grid_argmin(&grid, &losses)?;
    let mu = (ema_decay * model.mu() + (1.0 - ema_decay) * target).clamp(0.0, 1.0);
    model.set_mu(mu)?;
    Ok(mu)
}

/// Which term of the shared-rate bound is smallest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaBinding {
    InverseLipschitz,
    HalfAgents,
    Mixing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub eta_w: f64,
    pub eta_v: f64,
    pub lipschitz: f64,
    /// `min(1/L, N/2, (1−q)/(3√2·C·L·N))`.
    pub eta_w_bound: f64,
    pub eta_w_binding: BetaBinding,
    pub eta_w_ok: bool,
    /// `η_v·τ·L·(1+36τ²)`, required to be at most 1.
    pub eta_v_product: f64,
    pub eta_v_ok: bool,
    /// The alternative reading `η_v ≤ (1+36τ²)/(τL)`, reported only.
    pub eta_v_alt_bound: f64,
    pub eta_v_alt_ok: bool,
    /// `max(18C²L²N³/(1−q)², (2L²+2)²/(NL⁴), NL²)`.
    pub min_rounds: f64,
}

impl RateReport {
    pub fn passes(&self) -> bool {
        self.eta_w_ok && self.eta_v_ok
    }
}

/// Checks the step sizes against the sufficient conditions of the
/// convergence theorem. Advisory: callers log and continue on failure.
pub fn validate_learning_rates(rates: Rates, tau: usize, mixing: &MixingMatrix, lipschitz: f64) -> Result<RateReport> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::InvalidInput(format!("Lipschitz estimate must be positive, got {lipschitz}")));
    }
    let l = lipschitz;
    let n = mixing.n() as f64;
    let c = mixing.c_const();
    let omq = mixing.one_minus_q();
    let t = tau as f64;
    let terms = [
        (1.0 / l, BetaBinding::InverseLipschitz),
        (n / 2.0, BetaBinding::HalfAgents),
        (omq / (3.0 * 2f64.sqrt() * c * l * n), BetaBinding::Mixing),
    ];
    let (eta_w_bound, eta_w_binding) = terms
        .into_iter()
        .fold((f64::INFINITY, BetaBinding::InverseLipschitz), |acc, x| if x.0 < acc.0 { x } else { acc });
    let eta_v_product = rates.eta_v * t * l * (1.0 + 36.0 * t * t);
    let eta_v_alt_bound = (1.0 + 36.0 * t * t) / (t * l);
    let min_rounds = (18.0 * c * c * l * l * n.powi(3) / (omq * omq))
        .max((2.0 * l * l + 2.0).powi(2) / (n * l.powi(4)))
        .max(n * l * l);
    Ok(RateReport {
        eta_w: rates.eta_w,
        eta_v: rates.eta_v,
        lipschitz: l,
        eta_w_bound,
        eta_w_binding,
        eta_w_ok: rates.eta_w <= eta_w_bound,
        eta_v_product,
        eta_v_ok: eta_v_product <= 1.0 + 1e-12,
        eta_v_alt_bound,
        eta_v_alt_ok: rates.eta_v <= eta_v_alt_bound,
        min_rounds,
    })
}

/// Runs one full round on `state` and returns its metrics row.
pub fn step_round(state: &mut FederationState, cfg: &TrainConfig, rates: Rates) -> Result<RoundMetrics> {
    let t = state.round;
    let n = state.n();
    let w_bar = state.mean_shared();
    let v_before = state.personalized();
    let consensus = metrics::consensus_error(&state.shared())?;

    let mut drop_rng = rng::stream(cfg.seed, &[rng::tag::DROPOUT, t as u64]);
    let online = draw_online_mask(n, cfg.dropout_prob, &mut drop_rng);

    let staged = local_phase_as(state, cfg, rates, &online, cfg.variant)?;
    let payload = match cfg.gossip_scope {
        GossipScope::Shared => staged[0].len(),
        GossipScope::FullModel => {
            let m = &state.agents[0].model;
            m.shared.len() + m.personalized.len() + m.backbone().param_count()
        }
        GossipScope::Disabled => 0,
    };
    let comm = communicated_params(&state.topology, &online, payload);
    match cfg.gossip_scope {
        GossipScope::Disabled => state.set_shared(staged)?,
        GossipScope::Shared => {
            let next = masked_gossip(&staged, &state.topology, &state.mixing, &online)?;
            state.set_shared(next)?;
        }
        GossipScope::FullModel => {
            let next = masked_gossip(&staged, &state.topology, &state.mixing, &online)?;
            state.set_shared(next)?;
            let v = masked_gossip(&state.personalized(), &state.topology, &state.mixing, &online)?;
            for (a, v) in state.agents.iter_mut().zip(v) {
                a.model.personalized = v;
            }
        }
    }

    if let MuPolicy::Adaptive {
        grid_step, ema_decay, ..
    } = cfg.mu_policy
    {
        for (i, a) in state.agents.iter_mut().enumerate() {
            if online[i] {
                adapt_mu(&mut a.model, &a.holdout_feats, grid_step, ema_decay)?;
            }
        }
    }

    let row = metrics::snapshot(state, t, &w_bar, &v_before, consensus, comm, rates, cfg)?;
    state.round += 1;
    Ok(row)
}

/// Runs the remaining rounds up to `cfg.rounds`, calling `on_round` after
/// each one (for streaming output or checkpoints).
pub fn run_experiment_with<F>(cfg: &TrainConfig, state: &mut FederationState, mut on_round: F) -> Result<Vec<RoundMetrics>>
where
    F: FnMut(&RoundMetrics, &FederationState) -> Result<()>,
{
    cfg.validate(state.n())?;
    let mut rows = Vec::new();
    if state.round >= cfg.rounds {
        return Ok(rows);
    }
    let rates = cfg.rates(state.n())?;
    while state.round < cfg.rounds {
        let row = step_round(state, cfg, rates)?;
        on_round(&row, state)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_experiment(cfg: &TrainConfig, state: &mut FederationState) -> Result<Vec<RoundMetrics>> {
    run_experiment_with(cfg, state, |_, _| Ok(()))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PEMACKP1";

/// Round counter, per-agent μ and both adapters of every agent. Random
/// streams are keyed by round, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub mus: Vec<f64>,
    pub shared: Vec<AdapterParams>,
    pub personalized: Vec<AdapterParams>,
}

impl Checkpoint {
    pub fn capture(state: &FederationState) -> Self {
        Checkpoint {
            round: state.round,
            mus: state.mus(),
            shared: state.shared(),
            personalized: state.personalized(),
        }
    }

    /// Header `(magic, round, N, c, h)`, then per agent μ followed by the
    /// shared and personalized adapter records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let (c, h) = self.shared.first().map_or((0, 0), |w| (w.classes(), w.features()));
        for word in [self.round, self.mus.len(), c, h] {
            out.extend_from_slice(&(word as u64).to_le_bytes());
        }
        for i in 0..self.mus.len() {
            out.extend_from_slice(&self.mus[i].to_le_bytes());
            self.shared[i].write_bytes(&mut out);
            self.personalized[i].write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidInput(format!("corrupt checkpoint: {why}"));
        if bytes.len() < 40 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize;
        let (round, n) = (word(0), word(1));
        let mut pos = 40;
        let mut ck = Checkpoint {
            round,
            mus: Vec::with_capacity(n),
            shared: Vec::with_capacity(n),
            personalized: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let mu = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
            ck.mus.push(f64::from_le_bytes(mu.try_into().unwrap()));
            pos += 8;
            let (w, used) = AdapterParams::from_bytes(&bytes[pos..])?;
            pos += used;
            let (v, used) = AdapterParams::from_bytes(&bytes[pos..])?;
            pos += used;
            if w.classes() != word(2) || w.features() != word(3) || !w.same_shape(&v) {
                return Err(bad("adapter shape disagrees with header"));
            }
            ck.shared.push(w);
            ck.personalized.push(v);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Overwrites the adapters, μ values and round counter of `state`.
    pub fn restore(&self, state: &mut FederationState) -> Result<()> {
        if self.mus.len() != state.n() {
            return Err(Error::shape("checkpoint agents", state.n(), self.mus.len()));
        }
        for (i, a) in state.agents.iter_mut().enumerate() {
            if !self.shared[i].same_shape(&a.model.shared) {
                return Err(Error::shape("checkpoint adapter", a.model.shared.len(), self.shared[i].len()));
            }
            a.model.set_mu(self.mus[i])?;
            a.model.shared = self.shared[i].clone();
            a.model.personalized = self.personalized[i].clone();
        }
        state.round = self.round;
        Ok(())
    }
}
