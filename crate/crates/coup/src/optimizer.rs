//! Core round logic: leader/challenger selection, incumbent and
//! epsilon/gamma tracking, pool expansion, certification, and
//! repulsion-adjusted challenger scoring.
//!
//! Each round samples two arms: the highest empirical mean (leader) and the
//! highest upper confidence bound among the rest (challenger). The run
//! tracks an incumbent (highest lcb), the optimality gap `epsilon` between
//! the largest ucb and the incumbent's lcb, and a coverage estimate `gamma`
//! that shrinks as uniform proposals accumulate. When `epsilon^2 <= c *
//! gamma`, remaining pool uncertainty dominates space-coverage uncertainty
//! and the pool expands: half the proposals are uniform, half come from the
//! surrogate model.
//!
//! Certification retires arms whose lcb clears a threshold. The fixed
//! policy removes them from sampling; the adaptive policy keeps them active,
//! switches selection to a top-K tournament, and ratchets the threshold up
//! by balancing the evidence the certified set would need at a higher bar
//! against the evidence the best outsider would need to join.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, ArmStats, Bounds};
use crate::oracle::{utility, DrawKey, MeanFn, Oracle, SyntheticOracle, UtilitySpec};
use crate::rng::{derive_rng, stream};
use crate::space::{Space, TemplateId};
use crate::surrogate::{proximity_from_leaves, ForestModel, ForestParams};
use crate::{Error, Result};

/// How certification behaves during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertPolicy {
    None,
    /// Certify-and-retire at a fixed lcb threshold.
    Fixed { tau: f64 },
    /// Certified arms stay in play; the threshold ratchets upward.
    Adaptive { tau0: f64 },
}

impl CertPolicy {
    fn initial_threshold(&self) -> f64 {
        match self {
            CertPolicy::None => 0.0,
            CertPolicy::Fixed { tau } => *tau,
            CertPolicy::Adaptive { tau0 } => *tau0,
        }
    }
}

fn default_lambda() -> f64 {
    0.1
}

/// Challenger-score repulsion away from already-certified regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsionPolicy {
    pub enabled: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Reference-set tolerance. Zero selects exactly the certified set;
    /// positive values admit every arm with lcb within `epsilon_ref` of the
    /// best empirical mean.
    #[serde(default)]
    pub epsilon_ref: f64,
}

impl Default for RepulsionPolicy {
    fn default() -> RepulsionPolicy {
        RepulsionPolicy {
            enabled: false,
            lambda: default_lambda(),
            epsilon_ref: 0.0,
        }
    }
}

fn default_initial_pool() -> u64 {
    50
}

fn default_delta() -> f64 {
    0.01
}

fn default_expansion_c() -> f64 {
    1.0
}

fn default_rejection_cap() -> u32 {
    crate::space::DEFAULT_REJECTION_CAP
}

fn default_cert() -> CertPolicy {
    CertPolicy::None
}

fn default_exploration_e() -> f64 {
    1.0
}

/// Optimizer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupParams {
    /// Global failure probability; split evenly between the confidence
    /// bounds and the coverage estimator.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Initial pool size n0.
    #[serde(default = "default_initial_pool")]
    pub initial_pool: u64,
    /// Expansion aggressiveness c in `epsilon^2 <= c * gamma`; zero or
    /// negative disables expansion outright.
    #[serde(default = "default_expansion_c")]
    pub expansion_c: f64,
    #[serde(default = "default_rejection_cap")]
    pub rejection_cap: u32,
    #[serde(default = "default_cert")]
    pub cert: CertPolicy,
    #[serde(default)]
    pub repulsion: RepulsionPolicy,
    /// Surrogate settings; `None` turns model-guided proposals off.
    #[serde(default)]
    pub surrogate: Option<ForestParams>,
    /// Feed the batch schedule simulation each sampled arm's frozen
    /// pre-batch lcb instead of its empirical mean. More pessimistic about
    /// pool uncertainty, so expansions fire no later than under the default
    /// expected-mean simulation. Kept for comparison runs.
    #[serde(default)]
    pub pessimistic_schedule: bool,
    /// Accepted and recorded for config compatibility; no equation in this
    /// implementation consumes it.
    #[serde(default = "default_exploration_e")]
    pub exploration_e: f64,
}

impl Default for CoupParams {
    fn default() -> CoupParams {
        CoupParams {
            delta: default_delta(),
            initial_pool: default_initial_pool(),
            expansion_c: default_expansion_c(),
            rejection_cap: default_rejection_cap(),
            cert: default_cert(),
            repulsion: RepulsionPolicy::default(),
            surrogate: Some(ForestParams::default()),
            pessimistic_schedule: false,
            exploration_e: default_exploration_e(),
        }
    }
}

impl CoupParams {
    /// Confidence share for the interval bounds.
    pub fn bounds_delta(&self) -> f64 {
        self.delta / 2.0
    }

    /// Confidence share for the gamma coverage estimator.
    pub fn gamma_delta(&self) -> f64 {
        self.delta / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmStatus {
    Active,
    Certified,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub id: TemplateId,
    pub stats: ArmStats,
    pub bounds: Bounds,
    pub status: ArmStatus,
    /// Round index at which the arm entered the pool (0 for the seed pool).
    pub activation_step: u64,
    /// Cached feature encoding; derivable from the id, stored so shadow
    /// copies and the surrogate never re-encode.
    pub features: Vec<f64>,
}

impl ArmRecord {
    /// Retired arms receive no further samples; under the fixed policy
    /// certified arms are retired from sampling too, but keep informing
    /// the incumbent and epsilon.
    pub fn samplable(&self) -> bool {
        self.status == ArmStatus::Active
    }

    pub fn non_retired(&self) -> bool {
        self.status != ArmStatus::Retired
    }
}

/// Full optimizer state. Plain data: no generator objects live here, so
/// snapshots serialize losslessly and resumed runs replay exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub arms: Vec<ArmRecord>,
    #[serde(skip)]
    index: HashMap<TemplateId, usize>,
    pub epsilon: f64,
    pub gamma: f64,
    /// Index of the highest-lcb non-retired arm.
    pub incumbent: Option<usize>,
    /// Cumulative uniform proposals made by expansion; drives gamma.
    pub uniform_proposal_count: u64,
    /// Expansion events so far; keys per-event randomness.
    pub expansion_events: u64,
    /// Completed leader/challenger rounds; keys per-round randomness.
    pub round_count: u64,
    pub budget_used: u64,
    pub budget_total: u64,
    /// Arm indices in certification order.
    pub certified: Vec<usize>,
    /// Current certification threshold (fixed tau, or the adaptive ratchet).
    pub cert_threshold: f64,
    pub last_refresh_pool_size: u64,
    pub seed: u64,
}

impl RunState {
    pub fn pool_size(&self) -> u64 {
        self.arms.len() as u64
    }

    pub fn arm(&self, i: usize) -> &ArmRecord {
        &self.arms[i]
    }

    pub fn contains(&self, id: &TemplateId) -> bool {
        self.index.contains_key(id)
    }

    pub fn arm_index(&self, id: &TemplateId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Rebuilds the id index; required after deserializing a snapshot.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .arms
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();
    }

    /// Count of configurations with at least two samples; the surrogate's
    /// retraining census.
    pub fn configs_with_two_samples(&self) -> u64 {
        self.arms.iter().filter(|a| a.stats.m >= 2).count() as u64
    }

    pub fn samplable_count(&self) -> usize {
        self.arms.iter().filter(|a| a.samplable()).count()
    }

    pub(crate) fn push_arm(
        &mut self,
        id: TemplateId,
        features: Vec<f64>,
        activation_step: u64,
    ) -> usize {
        let i = self.arms.len();
        self.index.insert(id.clone(), i);
        self.arms.push(ArmRecord {
            id,
            stats: ArmStats::default(),
            bounds: Bounds::vacuous(self.pool_size() + 1),
            status: ArmStatus::Active,
            activation_step,
            features,
        });
        i
    }
}

/// Deterministic secondary key used wherever ties must not consume RNG:
/// earlier activation first, then the id's canonical bytes.
fn tie_key(arm: &ArmRecord) -> (u64, Vec<u8>) {
    (arm.activation_step, arm.id.canonical_bytes())
}

/// Seeds the initial pool with `initial_pool` distinct uniform ids, all
/// unsampled with vacuous bounds; epsilon and gamma start at 1.
pub fn init(space: &Space, params: &CoupParams, seed: u64, budget_total: u64) -> Result<RunState> {
    let mut state = RunState {
        arms: Vec::new(),
        index: HashMap::new(),
        epsilon: 1.0,
        gamma: 1.0,
        incumbent: None,
        uniform_proposal_count: 0,
        expansion_events: 0,
        round_count: 0,
        budget_used: 0,
        budget_total,
        certified: Vec::new(),
        cert_threshold: params.cert.initial_threshold(),
        last_refresh_pool_size: params.initial_pool.max(1),
        seed,
    };
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let mut attempts = 0u64;
    while state.pool_size() < params.initial_pool {
        attempts += 1;
        if attempts > params.rejection_cap as u64 + params.initial_pool {
            return Err(Error::Config(format!(
                "could not seed {} distinct templates; space too small?",
                params.initial_pool
            )));
        }
        let id = space.sample_uniform(&mut rng, params.rejection_cap)?;
        if !state.contains(&id) {
            let features = space.encode_features(&id)?;
            state.push_arm(id, features, 0);
        }
    }
    update_control_quantities(&mut state, params);
    Ok(state)
}

/// Recomputes incumbent, epsilon, and gamma from current bounds.
pub fn update_control_quantities(state: &mut RunState, params: &CoupParams) {
    state.incumbent = state
        .arms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.non_retired())
        .max_by(|(_, a), (_, b)| {
            a.bounds
                .lcb
                .total_cmp(&b.bounds.lcb)
                .then_with(|| tie_key(b).cmp(&tie_key(a)))
        })
        .map(|(i, _)| i);
    let max_ucb = state
        .arms
        .iter()
        .filter(|a| a.non_retired())
        .map(|a| a.bounds.ucb)
        .fold(f64::NEG_INFINITY, f64::max);
    state.epsilon = match state.incumbent {
        Some(i) => (max_ucb - state.arms[i].bounds.lcb).max(0.0),
        None => 1.0,
    };
    let k = state.uniform_proposal_count.max(1);
    state.gamma = ((1.0 / params.gamma_delta()).ln() / k as f64).min(1.0);
}

/// The expansion trigger `epsilon^2 <= c * gamma`; non-positive `c`
/// disables expansion entirely.
pub fn expansion_due(state: &RunState, params: &CoupParams) -> bool {
    if params.expansion_c <= 0.0 {
        return false;
    }
    state.epsilon * state.epsilon <= params.expansion_c * state.gamma
}

/// Repulsion scorer for one selection context: a fixed forest and a fixed
/// reference set. Penalties are the max shared-leaf proximity to any
/// reference arm, cached per arm index.
pub struct RepulsionScorer {
    lambda: f64,
    ref_leaves: Vec<Vec<u32>>,
    forest_trees: usize,
    cache: std::cell::RefCell<HashMap<usize, f64>>,
    forest: ForestSnapshot,
}

/// Just enough of the forest to compute leaf ids.
struct ForestSnapshot {
    trees: Vec<crate::surrogate::Tree>,
}

impl RepulsionScorer {
    /// Builds the scorer, or `None` when repulsion cannot act (disabled,
    /// no trained forest, zero lambda, or empty reference set).
    pub fn build(
        state: &RunState,
        policy: &RepulsionPolicy,
        forest: Option<&ForestModel>,
    ) -> Option<RepulsionScorer> {
        if !policy.enabled || policy.lambda == 0.0 {
            return None;
        }
        let forest = forest?;
        let refs = reference_set(state, policy);
        if refs.is_empty() {
            return None;
        }
        let ref_leaves = refs
            .iter()
            .map(|&i| forest.leaf_ids(&state.arms[i].features))
            .collect();
        Some(RepulsionScorer {
            lambda: policy.lambda,
            ref_leaves,
            forest_trees: forest.trees.len(),
            cache: std::cell::RefCell::new(HashMap::new()),
            forest: ForestSnapshot {
                trees: forest.trees.clone(),
            },
        })
    }

    /// `lambda * max_ref proximity(arm, ref)`, subtracted from the ucb.
    pub fn penalty(&self, arm_index: usize, features: &[f64]) -> f64 {
        if let Some(&p) = self.cache.borrow().get(&arm_index) {
            return p;
        }
        let leaves: Vec<u32> = self
            .forest
            .trees
            .iter()
            .map(|t| t.leaf_index(features) as u32)
            .collect();
        debug_assert_eq!(leaves.len(), self.forest_trees);
        let max_prox = self
            .ref_leaves
            .iter()
            .map(|r| proximity_from_leaves(&leaves, r))
            .fold(0.0, f64::max);
        let p = self.lambda * max_prox;
        self.cache.borrow_mut().insert(arm_index, p);
        p
    }
}

/// The repulsion reference set. Zero tolerance means exactly the certified
/// list; otherwise every non-retired arm whose lcb is within `epsilon_ref`
/// of the best empirical mean qualifies.
pub fn reference_set(state: &RunState, policy: &RepulsionPolicy) -> Vec<usize> {
    if policy.epsilon_ref == 0.0 {
        return state.certified.clone();
    }
    let best_mean = state
        .arms
        .iter()
        .filter(|a| a.non_retired())
        .map(|a| a.stats.mean_or_zero())
        .fold(0.0, f64::max);
    (0..state.arms.len())
        .filter(|&i| {
            let a = &state.arms[i];
            a.non_retired() && a.bounds.lcb >= best_mean - policy.epsilon_ref
        })
        .collect()
}

fn rng_tie_pick(candidates: &[usize], seed: u64, tag: u64, step: u64) -> usize {
    if candidates.len() == 1 {
        return candidates[0];
    }
    let mut rng = derive_rng(seed, &[tag, step]);
    candidates[rng.gen_range(0..candidates.len())]
}

/// Argmax over `pool` of `score`, breaking exact ties with the RNG stream
/// `(tag, step)`.
fn argmax_with_rng_ties(
    pool: impl Iterator<Item = usize> + Clone,
    score: impl Fn(usize) -> f64,
    seed: u64,
    tag: u64,
    step: u64,
) -> Option<usize> {
    let best = pool
        .clone()
        .map(&score)
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return None;
    }
    let tied: Vec<usize> = pool.filter(|&i| score(i) == best).collect();
    Some(rng_tie_pick(&tied, seed, tag, step))
}

fn samplable_indices(state: &RunState) -> Vec<usize> {
    (0..state.arms.len())
        .filter(|&i| state.arms[i].samplable())
        .collect()
}

/// Size of the top-K tournament, or 0 when standard selection applies.
fn adaptive_k(state: &RunState, params: &CoupParams) -> usize {
    match params.cert {
        CertPolicy::Adaptive { .. } => state.certified.len(),
        _ => 0,
    }
}

/// Samplable arms sorted by empirical mean (descending), ties by the
/// deterministic secondary key; the top-K boundary never consumes RNG.
fn by_mean_desc(state: &RunState, actives: &[usize]) -> Vec<usize> {
    let mut sorted = actives.to_vec();
    sorted.sort_by(|&a, &b| {
        let (aa, ab) = (&state.arms[a], &state.arms[b]);
        ab.stats
            .mean_or_zero()
            .total_cmp(&aa.stats.mean_or_zero())
            .then_with(|| tie_key(aa).cmp(&tie_key(ab)))
    });
    sorted
}

/// The round's pinned side: highest empirical mean (unsampled arms count
/// as 0), or the weakest-by-lcb member of the top-K means once adaptive
/// certification has a non-empty certified list.
pub fn select_leader(state: &RunState, params: &CoupParams, step: u64) -> Result<usize> {
    let actives = samplable_indices(state);
    if actives.is_empty() {
        return Err(Error::Config("no samplable arms".into()));
    }
    let k = adaptive_k(state, params);
    if k > 0 && actives.len() > k {
        let members = &by_mean_desc(state, &actives)[..k];
        return Ok(argmax_with_rng_ties(
            members.iter().copied(),
            |i| -state.arms[i].bounds.lcb,
            state.seed,
            stream::LEADER_TIE,
            step,
        )
        .expect("members nonempty"));
    }
    Ok(argmax_with_rng_ties(
        actives.iter().copied(),
        |i| state.arms[i].stats.mean_or_zero(),
        state.seed,
        stream::LEADER_TIE,
        step,
    )
    .expect("actives nonempty"))
}

/// The round's exploratory side: highest challenger score (ucb minus the
/// repulsion penalty when a scorer is supplied) among samplable arms other
/// than `exclude`. Under an active top-K tournament the candidates are the
/// arms outside the top K.
pub fn select_challenger(
    state: &RunState,
    params: &CoupParams,
    scorer: Option<&RepulsionScorer>,
    exclude: usize,
    step: u64,
) -> Result<usize> {
    let actives = samplable_indices(state);
    let challenger_score = |i: usize| {
        let ucb = state.arms[i].bounds.ucb;
        match scorer {
            Some(s) => ucb - s.penalty(i, &state.arms[i].features),
            None => ucb,
        }
    };
    let k = adaptive_k(state, params);
    if k > 0 && actives.len() > k {
        let sorted = by_mean_desc(state, &actives);
        let outsiders: Vec<usize> = sorted[k..].iter().copied().filter(|&i| i != exclude).collect();
        if !outsiders.is_empty() {
            return Ok(argmax_with_rng_ties(
                outsiders.iter().copied(),
                challenger_score,
                state.seed,
                stream::CHALLENGER_TIE,
                step,
            )
            .expect("outsiders nonempty"));
        }
        // Every non-excluded arm sits inside the tournament; fall through
        // to the standard rule over the remainder.
    }
    argmax_with_rng_ties(
        actives.iter().copied().filter(|&i| i != exclude),
        challenger_score,
        state.seed,
        stream::CHALLENGER_TIE,
        step,
    )
    .ok_or_else(|| Error::Config("no challenger candidates".into()))
}

/// Picks the round's two arms. `step` keys the tie-break randomness; both
/// the batched worlds and the sequential reference pass the same global
/// round index, so their tie-breaks agree.
pub fn select_pair(
    state: &RunState,
    params: &CoupParams,
    scorer: Option<&RepulsionScorer>,
    step: u64,
) -> Result<(usize, usize)> {
    let samplable = state.samplable_count();
    if samplable < 2 {
        return Err(Error::Config(format!(
            "{samplable} samplable arms; selection needs two"
        )));
    }
    let leader = select_leader(state, params, step)?;
    let challenger = select_challenger(state, params, scorer, leader, step)?;
    Ok((leader, challenger))
}

/// Result of one expansion event. Uniform draws are counted even when the
/// event ultimately fails: every uniform draw that lands inside the pool is
/// still coverage evidence, and gamma consumes exactly that count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expansion {
    Added {
        arm: usize,
        was_uniform: bool,
        uniform_draws: u64,
    },
    /// Retry cap exhausted without finding an id outside the pool.
    Saturated { uniform_draws: u64 },
}

/// Adds one new arm to the pool. Each attempt flips the exploration coin:
/// heads draws uniformly, tails asks the surrogate (falling back to a
/// uniform draw, which still counts as one, when no model is trained).
/// Ids already in the pool are redrawn up to the rejection cap.
pub fn propose_expansion(
    state: &mut RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    step: u64,
) -> Result<Expansion> {
    let mut rng = derive_rng(state.seed, &[stream::EXPANSION, state.expansion_events]);
    state.expansion_events += 1;
    let candidates = params
        .surrogate
        .as_ref()
        .map(|p| p.candidates)
        .unwrap_or_else(|| ForestParams::default().candidates);
    let mut uniform_draws = 0u64;
    for _ in 0..params.rejection_cap {
        let explore = rng.gen_bool(0.5);
        let (id, was_uniform) = match (explore, forest) {
            (false, Some(model)) => (
                crate::surrogate::propose(model, space, &mut rng, candidates, params.rejection_cap)?,
                false,
            ),
            _ => {
                let id = space.sample_uniform(&mut rng, params.rejection_cap)?;
                uniform_draws += 1;
                state.uniform_proposal_count += 1;
                (id, true)
            }
        };
        if state.contains(&id) {
            continue;
        }
        let features = space.encode_features(&id)?;
        let arm = state.push_arm(id, features, step);
        return Ok(Expansion::Added {
            arm,
            was_uniform,
            uniform_draws,
        });
    }
    Ok(Expansion::Saturated { uniform_draws })
}

/// Folds one observed utility into an arm: stats update, bounds recompute
/// at the current pool size, budget tick.
pub fn apply_observation(
    state: &mut RunState,
    arm: usize,
    utility: f64,
    params: &CoupParams,
) -> Result<()> {
    state.arms[arm].stats.record_observation(utility)?;
    let n = state.pool_size();
    state.arms[arm].bounds =
        bounds::compute_bounds(&state.arms[arm].stats, params.bounds_delta(), n);
    state.budget_used += 1;
    Ok(())
}

/// What a certification pass did.
#[derive(Debug, Clone, PartialEq)]
pub struct CertOutcome {
    pub newly_certified: Vec<usize>,
    pub threshold_before: f64,
    pub threshold_after: f64,
}

/// Applies the certification policy to current bounds.
pub fn certify_step(state: &mut RunState, params: &CoupParams) -> CertOutcome {
    let threshold_before = state.cert_threshold;
    let mut newly = Vec::new();
    match params.cert {
        CertPolicy::None => {}
        CertPolicy::Fixed { tau } => {
            for i in 0..state.arms.len() {
                let a = &mut state.arms[i];
                if a.status == ArmStatus::Active && a.bounds.lcb >= tau {
                    a.status = ArmStatus::Certified;
                    state.certified.push(i);
                    newly.push(i);
                }
            }
        }
        CertPolicy::Adaptive { .. } => {
            for i in 0..state.arms.len() {
                let a = &state.arms[i];
                if a.status == ArmStatus::Active
                    && a.bounds.lcb >= state.cert_threshold
                    && !state.certified.contains(&i)
                {
                    state.certified.push(i);
                    newly.push(i);
                }
            }
            if !newly.is_empty() {
                raise_adaptive_threshold(state, params);
            }
        }
    }
    CertOutcome {
        newly_certified: newly,
        threshold_before,
        threshold_after: state.cert_threshold,
    }
}

/// Samples needed to push an interval with center `mean` above `t` under
/// the arm's current confidence share; gaps are floored so the model stays
/// finite when the mean sits at or below the candidate threshold.
fn samples_to_reach(t: f64, mean: f64, delta_i: f64) -> f64 {
    let gap = (mean - t).max(0.01);
    (2.0 / delta_i).ln() / (2.0 * gap * gap)
}

/// Adaptive threshold ratchet: choose the largest t, capped at the weakest
/// certified lcb plus the certified set's mean radius, at which the whole
/// certified set could re-prove itself at least as cheaply as the best
/// uncertified arm could join. The threshold never moves down.
fn raise_adaptive_threshold(state: &mut RunState, _params: &CoupParams) {
    let cert = &state.certified;
    if cert.is_empty() {
        return;
    }
    let min_lcb = cert
        .iter()
        .map(|&i| state.arms[i].bounds.lcb)
        .fold(f64::INFINITY, f64::min);
    let mean_radius = cert
        .iter()
        .map(|&i| {
            let a = &state.arms[i];
            bounds::hoeffding_radius(a.bounds.delta_i, a.stats.m.max(1))
        })
        .sum::<f64>()
        / cert.len() as f64;
    let cap = (min_lcb + mean_radius).min(0.9999);

    let best_outsider = (0..state.arms.len())
        .filter(|i| !cert.contains(i))
        .filter(|&i| state.arms[i].non_retired())
        .max_by(|&a, &b| {
            state.arms[a]
                .stats
                .mean_or_zero()
                .total_cmp(&state.arms[b].stats.mean_or_zero())
                .then_with(|| tie_key(&state.arms[b]).cmp(&tie_key(&state.arms[a])))
        });
    let Some(out) = best_outsider else {
        return; // everything is certified; nothing to balance against
    };
    let out_mean = state.arms[out].stats.mean_or_zero();
    let out_delta = state.arms[out].bounds.delta_i;

    // Descending grid scan: the first admissible t is the largest.
    let step = 1e-3;
    let mut t = cap;
    while t > state.cert_threshold {
        let cert_cost: f64 = cert
            .iter()
            .map(|&i| {
                let a = &state.arms[i];
                samples_to_reach(t, a.stats.mean_or_zero(), a.bounds.delta_i)
            })
            .sum();
        let outsider_cost = samples_to_reach(t, out_mean, out_delta);
        if cert_cost <= outsider_cost {
            state.cert_threshold = t;
            return;
        }
        t -= step;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Lcb,
    Mean,
}

/// Ranks certified and active arms (retired-without-certification arms are
/// dropped) in descending score order, ties broken by the deterministic
/// secondary key so output is replayable.
pub fn rank(state: &RunState, by: RankBy) -> Vec<(usize, f64)> {
    let mut rows: Vec<(usize, f64)> = (0..state.arms.len())
        .filter(|&i| state.arms[i].status != ArmStatus::Retired)
        .map(|i| {
            let score = match by {
                RankBy::Lcb => state.arms[i].bounds.lcb,
                RankBy::Mean => state.arms[i].stats.mean_or_zero(),
            };
            (i, score)
        })
        .collect();
    rows.sort_by(|&(a, sa), &(b, sb)| {
        sb.total_cmp(&sa)
            .then_with(|| tie_key(&state.arms[a]).cmp(&tie_key(&state.arms[b])))
    });
    rows
}

/// Monte Carlo validity check over seeded mini-runs: fraction of runs where
/// some arm's true mean ever left its interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub runs: u64,
    pub violation_runs: u64,
    pub violation_fraction: f64,
}

impl CoverageReport {
    pub fn passes(&self, delta: f64) -> bool {
        self.violation_fraction <= delta
    }
}

fn coverage_run_violates(
    space: &Space,
    means: &MeanFn,
    params: &CoupParams,
    draws: u64,
    seed: u64,
) -> Result<bool> {
    let oracle = SyntheticOracle::new(seed, means.clone());
    let mut state = init(space, params, seed, draws)?;
    let mu: Vec<f64> = state.arms.iter().map(|a| means.mean(&a.id)).collect();
    while state.budget_used + 2 <= draws {
        let step = state.round_count;
        let (leader, challenger) = select_pair(&state, params, None, step)?;
        state.round_count += 1;
        for arm in [leader, challenger] {
            let key = DrawKey::run(state.arms[arm].stats.m);
            let outcome = oracle.evaluate(&state.arms[arm].id, key)?;
            let y = utility(&UtilitySpec::ErrorRate, &outcome, &state.arms[arm].id)?;
            apply_observation(&mut state, arm, y, params)?;
            let b = &state.arms[arm].bounds;
            if mu[arm] < b.lcb || mu[arm] > b.ucb {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Replays the sequential leader/challenger loop on a known-mean synthetic
/// environment, once per seed, checking every interval update against the
/// arm's true mean. Bounds only move on the sampled arm, so checking the
/// two updated arms per round covers the whole anytime trajectory.
pub fn verify_coverage(
    space: &Space,
    means: &MeanFn,
    params: &CoupParams,
    draws: u64,
    seeds: &[u64],
) -> Result<CoverageReport> {
    let mut violation_runs = 0u64;
    for &seed in seeds {
        if coverage_run_violates(space, means, params, draws, seed)? {
            violation_runs += 1;
        }
    }
    Ok(CoverageReport {
        runs: seeds.len() as u64,
        violation_runs,
        violation_fraction: violation_runs as f64 / seeds.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ParamKind, ParamSpec, ParamValue, SpaceSpec};
    use crate::surrogate::{Node, Tree};
    use approx::assert_relative_eq;

    fn line_space(n: i64) -> Space {
        Space::new(SpaceSpec {
            params: vec![ParamSpec {
                name: "x".into(),
                kind: ParamKind::Int { lo: 0, hi: n - 1 },
            }],
            constraints: vec![],
        })
        .unwrap()
    }

    fn params() -> CoupParams {
        CoupParams {
            surrogate: None,
            ..CoupParams::default()
        }
    }

    fn arm(x: i64, m: u64, mean: f64, lcb: f64, ucb: f64) -> ArmRecord {
        ArmRecord {
            id: TemplateId {
                values: vec![("x".into(), ParamValue::Int(x))],
            },
            stats: ArmStats {
                m,
                total: mean * m as f64,
            },
            bounds: Bounds {
                lcb,
                ucb,
                delta_i: if m == 0 { 1.0 } else { 1e-9 },
                pool_size_at_compute: 10,
            },
            status: ArmStatus::Active,
            activation_step: 0,
            features: vec![x as f64],
        }
    }

    fn hand_state(arms: Vec<ArmRecord>) -> RunState {
        let mut state = RunState {
            arms,
            index: HashMap::new(),
            epsilon: 1.0,
            gamma: 1.0,
            incumbent: None,
            uniform_proposal_count: 0,
            expansion_events: 0,
            round_count: 0,
            budget_used: 0,
            budget_total: 1000,
            certified: Vec::new(),
            cert_threshold: 0.0,
            last_refresh_pool_size: 1,
            seed: 77,
        };
        state.rebuild_index();
        state
    }

    #[test]
    fn init_seeds_the_requested_pool() {
        let space = line_space(1000);
        let state = init(&space, &params(), 42, 20_000).unwrap();
        assert_eq!(state.pool_size(), 50);
        assert_eq!(state.epsilon, 1.0);
        assert_eq!(state.gamma, 1.0);
        assert_eq!(state.uniform_proposal_count, 0);
        assert!(state.arms.iter().all(|a| a.stats.m == 0));
        assert!(state
            .arms
            .iter()
            .all(|a| (a.bounds.lcb, a.bounds.ucb) == (0.0, 1.0)));
        // Distinctness and determinism.
        let again = init(&space, &params(), 42, 20_000).unwrap();
        let ids: Vec<_> = state.arms.iter().map(|a| a.id.clone()).collect();
        let ids_again: Vec<_> = again.arms.iter().map(|a| a.id.clone()).collect();
        assert_eq!(ids, ids_again);
        let other = init(&space, &params(), 43, 20_000).unwrap();
        let ids_other: Vec<_> = other.arms.iter().map(|a| a.id.clone()).collect();
        assert_ne!(ids, ids_other);
    }

    #[test]
    fn init_with_single_arm_makes_it_incumbent() {
        let space = line_space(10);
        let p = CoupParams {
            initial_pool: 1,
            ..params()
        };
        let state = init(&space, &p, 1, 100).unwrap();
        assert_eq!(state.incumbent, Some(0));
    }

    #[test]
    fn init_can_exhaust_small_spaces_exactly() {
        let space = line_space(6);
        let p = CoupParams {
            initial_pool: 6,
            ..params()
        };
        let state = init(&space, &p, 5, 100).unwrap();
        assert_eq!(state.pool_size(), 6);
        let p_too_many = CoupParams {
            initial_pool: 7,
            rejection_cap: 200,
            ..params()
        };
        assert!(init(&space, &p_too_many, 5, 100).is_err());
    }

    #[test]
    fn leader_takes_highest_mean_challenger_highest_ucb() {
        let state = hand_state(vec![
            arm(0, 10, 0.9, 0.85, 0.95),
            arm(1, 10, 0.5, 0.4, 0.97),
        ]);
        let (leader, challenger) = select_pair(&state, &params(), None, 0).unwrap();
        assert_eq!((leader, challenger), (0, 1));
    }

    #[test]
    fn selection_needs_two_samplable_arms() {
        let state = hand_state(vec![arm(0, 10, 0.9, 0.85, 0.95)]);
        assert!(select_pair(&state, &params(), None, 0).is_err());
    }

    #[test]
    fn challenger_ties_split_evenly_across_steps() {
        let state = hand_state(vec![
            arm(0, 10, 0.9, 0.85, 0.95),
            arm(1, 10, 0.5, 0.4, 0.97),
            arm(2, 10, 0.5, 0.4, 0.97),
        ]);
        let mut first = 0;
        for step in 0..1000 {
            let (_, challenger) = select_pair(&state, &params(), None, step).unwrap();
            assert_ne!(challenger, 0);
            first += u32::from(challenger == 1);
        }
        assert!((440..=560).contains(&first), "tie split {first}/1000");
    }

    fn one_split_forest() -> ForestModel {
        // Feature 0 <= 5 goes left; two trees so proximity is in {0, .5, 1}.
        let tree = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 5.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: 0.9 },
                Node::Leaf { value: 0.1 },
            ],
        };
        ForestModel {
            trees: vec![tree.clone(), tree],
            training_count_marker: 0,
        }
    }

    #[test]
    fn repulsion_penalty_redirects_the_challenger() {
        // Reference arm 0 at x=1; arm 1 (x=2) shares its leaf, arm 2 (x=9)
        // does not. Unpenalized ucbs: arm1 .97 vs arm2 .90; penalized:
        // .97 - .1 = .87 vs .90.
        let mut state = hand_state(vec![
            arm(1, 50, 0.95, 0.92, 0.99),
            arm(2, 10, 0.5, 0.4, 0.97),
            arm(9, 10, 0.5, 0.4, 0.90),
        ]);
        state.certified.push(0);
        let policy = RepulsionPolicy {
            enabled: true,
            lambda: 0.1,
            epsilon_ref: 0.0,
        };
        let forest = one_split_forest();
        let scorer = RepulsionScorer::build(&state, &policy, Some(&forest)).unwrap();
        assert_relative_eq!(scorer.penalty(1, &state.arms[1].features), 0.1);
        assert_relative_eq!(scorer.penalty(2, &state.arms[2].features), 0.0);
        let (_, challenger) = select_pair(&state, &params(), Some(&scorer), 0).unwrap();
        assert_eq!(challenger, 2);
        // Without repulsion the higher raw ucb wins.
        let (_, challenger) = select_pair(&state, &params(), None, 0).unwrap();
        assert_eq!(challenger, 1);
    }

    #[test]
    fn zero_lambda_never_builds_a_scorer() {
        let mut state = hand_state(vec![arm(1, 50, 0.95, 0.92, 0.99)]);
        state.certified.push(0);
        let policy = RepulsionPolicy {
            enabled: true,
            lambda: 0.0,
            epsilon_ref: 0.0,
        };
        assert!(RepulsionScorer::build(&state, &policy, Some(&one_split_forest())).is_none());
        let disabled = RepulsionPolicy {
            enabled: false,
            lambda: 0.1,
            epsilon_ref: 0.0,
        };
        assert!(RepulsionScorer::build(&state, &disabled, Some(&one_split_forest())).is_none());
    }

    #[test]
    fn positive_epsilon_ref_widens_the_reference_set() {
        let state = hand_state(vec![
            arm(0, 50, 0.95, 0.92, 0.99), // best mean 0.95
            arm(1, 50, 0.90, 0.88, 0.93),
            arm(2, 10, 0.5, 0.40, 0.97),
        ]);
        let policy = RepulsionPolicy {
            enabled: true,
            lambda: 0.1,
            epsilon_ref: 0.08,
        };
        // lcb >= 0.95 - 0.08 = 0.87: arms 0 and 1.
        assert_eq!(reference_set(&state, &policy), vec![0, 1]);
        let zero = RepulsionPolicy {
            epsilon_ref: 0.0,
            ..policy
        };
        assert!(reference_set(&state, &zero).is_empty());
    }

    #[test]
    fn control_quantities_match_definitions() {
        let mut state = hand_state(vec![
            arm(0, 10, 0.85, 0.8, 0.88),
            arm(1, 10, 0.6, 0.5, 0.9),
        ]);
        let p = params(); // delta 0.01, so gamma share is 0.005
        state.uniform_proposal_count = 100;
        update_control_quantities(&mut state, &p);
        assert_eq!(state.incumbent, Some(0));
        assert_relative_eq!(state.epsilon, 0.1, max_relative = 1e-12);
        assert_relative_eq!(state.gamma, 200f64.ln() / 100.0, max_relative = 1e-12);

        // Unsampled pool: vacuous bounds give epsilon 1, gamma clips to 1.
        let mut fresh = hand_state(vec![arm(0, 0, 0.0, 0.0, 1.0)]);
        fresh.uniform_proposal_count = 0;
        update_control_quantities(&mut fresh, &p);
        assert_eq!(fresh.epsilon, 1.0);
        assert_eq!(fresh.gamma, 1.0);
    }

    #[test]
    fn expansion_trigger_arithmetic() {
        let mut state = hand_state(vec![arm(0, 0, 0.0, 0.0, 1.0)]);
        let p = params();
        state.epsilon = 0.1;
        state.gamma = 0.053;
        assert!(expansion_due(&state, &p));
        state.epsilon = 1.0;
        state.gamma = 0.01;
        assert!(!expansion_due(&state, &p));
        // c <= 0 disables expansion even at epsilon 0.
        let disabled = CoupParams {
            expansion_c: 0.0,
            ..params()
        };
        state.epsilon = 0.0;
        assert!(!expansion_due(&state, &disabled));
    }

    #[test]
    fn expansion_adds_distinct_arms_and_counts_uniform_draws() {
        let space = line_space(10);
        let p = CoupParams {
            initial_pool: 5,
            ..params()
        };
        let mut state = init(&space, &p, 3, 100).unwrap();
        for _ in 0..5 {
            let before = state.pool_size();
            match propose_expansion(&mut state, &space, &p, None, 7).unwrap() {
                Expansion::Added {
                    arm, was_uniform, ..
                } => {
                    assert!(was_uniform, "no forest, so every draw is uniform");
                    assert_eq!(state.pool_size(), before + 1);
                    assert_eq!(state.arms[arm].activation_step, 7);
                }
                Expansion::Saturated { .. } => panic!("space not yet exhausted"),
            }
        }
        assert_eq!(state.pool_size(), 10);
        let used_before = state.uniform_proposal_count;
        match propose_expansion(&mut state, &space, &p, None, 8).unwrap() {
            Expansion::Saturated { uniform_draws } => {
                assert_eq!(uniform_draws, p.rejection_cap as u64);
                assert_eq!(
                    state.uniform_proposal_count,
                    used_before + p.rejection_cap as u64
                );
            }
            other => panic!("expected saturation, got {other:?}"),
        }
        assert_eq!(state.pool_size(), 10);
    }

    #[test]
    fn expansion_coin_is_fair_with_a_trained_forest() {
        let space = line_space(100_000);
        let p = CoupParams {
            initial_pool: 10,
            surrogate: Some(ForestParams {
                trees: 1,
                ..ForestParams::default()
            }),
            ..CoupParams::default()
        };
        let mut state = init(&space, &p, 11, 100).unwrap();
        let forest = crate::surrogate::train(
            &[(vec![0.0], 0.5), (vec![1.0], 0.5)],
            p.surrogate.as_ref().unwrap(),
            1,
            11,
            0,
        )
        .unwrap();
        let mut uniform = 0u32;
        let total = 10_000;
        for _ in 0..total {
            match propose_expansion(&mut state, &space, &p, Some(&forest), 0).unwrap() {
                Expansion::Added { was_uniform, .. } => uniform += u32::from(was_uniform),
                Expansion::Saturated { .. } => panic!("huge space cannot saturate"),
            }
        }
        let frac = f64::from(uniform) / f64::from(total);
        assert!((frac - 0.5).abs() < 0.015, "uniform fraction {frac}");
    }

    #[test]
    fn fixed_certification_retires_cleared_arms() {
        let mut state = hand_state(vec![
            arm(0, 200, 0.95, 0.91, 0.99),
            arm(1, 200, 0.9, 0.89, 0.93),
            arm(2, 10, 0.5, 0.4, 0.97),
        ]);
        let p = CoupParams {
            cert: CertPolicy::Fixed { tau: 0.9 },
            ..params()
        };
        let outcome = certify_step(&mut state, &p);
        assert_eq!(outcome.newly_certified, vec![0]);
        assert_eq!(state.arms[0].status, ArmStatus::Certified);
        assert_eq!(state.arms[1].status, ArmStatus::Active);
        assert!(!state.arms[0].samplable());
        assert!(state.arms[0].non_retired());
        // Selection now skips the certified arm.
        let (leader, challenger) = select_pair(&state, &p, None, 0).unwrap();
        assert_eq!((leader, challenger), (1, 2));
        // Certification must not touch anyone's bounds.
        assert_eq!(state.arms[1].bounds.lcb, 0.89);
        let again = certify_step(&mut state, &p);
        assert!(again.newly_certified.is_empty(), "no re-certification");
    }

    #[test]
    fn adaptive_certification_switches_to_top_k_selection() {
        // Four arms; 0 and 1 certified. Top-2 by mean = {0, 1}; weakest by
        // lcb is 1; best outsider by ucb is 3.
        let mut state = hand_state(vec![
            arm(0, 300, 0.95, 0.90, 0.99),
            arm(1, 300, 0.93, 0.86, 0.98),
            arm(2, 50, 0.60, 0.45, 0.80),
            arm(3, 50, 0.55, 0.40, 0.85),
        ]);
        let p = CoupParams {
            cert: CertPolicy::Adaptive { tau0: 0.85 },
            ..params()
        };
        state.cert_threshold = 0.85;
        let outcome = certify_step(&mut state, &p);
        assert_eq!(outcome.newly_certified, vec![0, 1]);
        // Adaptive keeps certified arms active and samplable.
        assert!(state.arms[0].samplable());
        let (member, outsider) = select_pair(&state, &p, None, 0).unwrap();
        assert_eq!((member, outsider), (1, 3));
    }

    #[test]
    fn adaptive_threshold_only_ratchets_upward() {
        let mut state = hand_state(vec![
            arm(0, 400, 0.95, 0.90, 0.99),
            arm(1, 10, 0.30, 0.10, 0.70),
        ]);
        let p = CoupParams {
            cert: CertPolicy::Adaptive { tau0: 0.8 },
            ..params()
        };
        state.cert_threshold = 0.8;
        let outcome = certify_step(&mut state, &p);
        assert_eq!(outcome.newly_certified, vec![0]);
        // A strong certified arm against a weak outsider warrants a raise.
        assert!(outcome.threshold_after > outcome.threshold_before);
        let raised = state.cert_threshold;
        // Nothing new to certify: threshold must hold still.
        let outcome = certify_step(&mut state, &p);
        assert!(outcome.newly_certified.is_empty());
        assert_eq!(state.cert_threshold, raised);
    }

    #[test]
    fn ranking_orders_scores_and_drops_plain_retired() {
        let mut state = hand_state(vec![
            arm(0, 10, 0.5, 0.7, 0.95),
            arm(1, 10, 0.5, 0.9, 0.99),
            arm(2, 10, 0.5, 0.8, 0.97),
            arm(3, 10, 0.5, 0.6, 0.90),
        ]);
        state.arms[1].status = ArmStatus::Certified;
        state.arms[3].status = ArmStatus::Retired;
        let ranked = rank(&state, RankBy::Lcb);
        let order: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
        assert_eq!(order, vec![1, 2, 0]);
        // Mean ties fall back to activation step, then id bytes.
        let mut tied = hand_state(vec![
            arm(3, 10, 0.5, 0.1, 0.9),
            arm(1, 10, 0.5, 0.2, 0.9),
            arm(2, 4, 0.5, 0.3, 0.9),
        ]);
        tied.arms[0].activation_step = 2;
        let by_mean = rank(&tied, RankBy::Mean);
        let order: Vec<usize> = by_mean.iter().map(|&(i, _)| i).collect();
        assert_eq!(order, vec![1, 2, 0], "step asc, then id bytes");
        assert!(rank(&hand_state(vec![]), RankBy::Lcb).is_empty());
    }

    #[test]
    fn certification_preserves_relative_lcb_order() {
        let mut state = hand_state(vec![
            arm(0, 200, 0.95, 0.91, 0.99),
            arm(1, 100, 0.8, 0.7, 0.9),
            arm(2, 100, 0.75, 0.65, 0.85),
        ]);
        let p = CoupParams {
            cert: CertPolicy::Fixed { tau: 0.9 },
            ..params()
        };
        let before: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
        certify_step(&mut state, &p);
        let after: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn epsilon_never_rises_while_feeding_means_without_refresh() {
        // Expected-outcome world: every observation equals the arm's mean,
        // so bounds only tighten while the pool stays fixed.
        let space = line_space(50);
        let p = CoupParams {
            initial_pool: 10,
            expansion_c: 0.0, // pool fixed: no expansion, no refresh
            ..params()
        };
        let mut state = init(&space, &p, 21, 100_000).unwrap();
        let mut means = HashMap::new();
        for (i, a) in state.arms.iter().enumerate() {
            means.insert(i, 0.2 + 0.6 * (i as f64 / 10.0));
            let _ = a;
        }
        let mut last_epsilon = state.epsilon;
        for round in 0..200 {
            let (leader, challenger) = select_pair(&state, &p, None, round).unwrap();
            for arm in [leader, challenger] {
                let y = means[&arm];
                apply_observation(&mut state, arm, y, &p).unwrap();
            }
            update_control_quantities(&mut state, &p);
            assert!(
                state.epsilon <= last_epsilon + 1e-12,
                "epsilon rose {last_epsilon} -> {} at round {round}",
                state.epsilon
            );
            last_epsilon = state.epsilon;
        }
        assert!(last_epsilon < 1.0, "bounds should have tightened");
    }

    #[test]
    fn snapshot_round_trip_preserves_state() {
        let space = line_space(1000);
        let mut state = init(&space, &params(), 9, 1000).unwrap();
        for i in 0..4 {
            apply_observation(&mut state, i, 0.5 + 0.1 * i as f64, &params()).unwrap();
        }
        update_control_quantities(&mut state, &params());
        let json = serde_json::to_string(&state).unwrap();
        let mut back: RunState = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back.arms, state.arms);
        assert_eq!(back.epsilon, state.epsilon);
        assert_eq!(back.incumbent, state.incumbent);
        assert_eq!(
            back.arm_index(&state.arms[3].id),
            Some(3),
            "index rebuilt from arm order"
        );
    }

    #[test]
    fn coverage_runs_spend_the_budget_and_stay_valid() {
        let space = line_space(10);
        let mut planted = HashMap::new();
        for x in 0..10i64 {
            planted.insert(
                TemplateId {
                    values: vec![("x".into(), ParamValue::Int(x))],
                },
                0.05 + 0.09 * x as f64,
            );
        }
        let means = MeanFn::Table {
            default: 0.3,
            planted,
        };
        let mut p = params();
        p.initial_pool = 10;
        p.expansion_c = 0.0;
        let seeds: Vec<u64> = (0..50).collect();
        let report = verify_coverage(&space, &means, &p, 400, &seeds).unwrap();
        assert_eq!(report.runs, 50);
        assert_eq!(
            report.violation_runs as f64 / report.runs as f64,
            report.violation_fraction
        );
        // The union bound leaves orders of magnitude of slack, so even a
        // small batch of seeds should come back clean.
        assert!(report.passes(0.01), "{report:?}");
    }
}
