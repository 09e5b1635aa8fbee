//! Parallel batch construction via two-stage frozen-LCB simulation, plus
//! test oracles for the batching guarantees.
//!
//! Stage one replays the sequential process in an expected-outcome shadow
//! world (each sampled arm is fed its own empirical mean) to decide where
//! pool expansions would fire within the batch. Stage two builds the batch
//! plan: half the slots go to the pre-batch leader, and the challenger
//! slots are chosen one at a time against shadow statistics that absorb a
//! pessimistic pseudo-outcome, the arm's pre-batch lcb, frozen at batch
//! start. The pessimism keeps simulated upper bounds conservative, so a
//! batch never explores less than its sequential counterpart would.
//!
//! All shadow work is discarded; only the schedule and the plan escape.
//! Real statistics change solely in [`execute_batch`], which dispatches the
//! oracle calls (optionally in parallel), applies the outcomes in plan
//! order, and replays the schedule's expansion bookkeeping so a batched run
//! stays step-for-step identical to a sequential one at batch size 2.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{compute_bounds, deferred_refresh};
use crate::optimizer::{
    expansion_due, propose_expansion, select_challenger, select_leader, select_pair,
    update_control_quantities, ArmRecord, CoupParams, Expansion, RepulsionScorer, RunState,
};
use crate::oracle::{utility, DrawKey, Oracle, Outcome, UtilitySpec};
use crate::rng::{derive_rng, stream};
use crate::space::{Space, TemplateId};
use crate::surrogate::ForestModel;
use crate::{Error, Result};

/// One expansion event predicted by the schedule simulation. Uniform draw
/// counts ride along so the real state can replay the bookkeeping without
/// re-drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduledExpansion {
    Added {
        id: TemplateId,
        was_uniform: bool,
        uniform_draws: u64,
    },
    Saturated {
        uniform_draws: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// 1-based round within the batch at which the event fires.
    pub round: u64,
    pub outcome: ScheduledExpansion,
}

/// Where the batch will grow the pool; rounds are strictly increasing and
/// every added id is absent from the pre-batch pool.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationSchedule {
    pub entries: Vec<ScheduleEntry>,
}

/// The batch to dispatch: `entries.len()` oracle calls, exactly
/// `incumbent_share` of them aimed at the pre-batch leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub entries: Vec<TemplateId>,
    pub incumbent: TemplateId,
    pub incumbent_share: u64,
}

fn ensure_even_batch(n_batch: u64) -> Result<u64> {
    if n_batch < 2 || !n_batch.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch size must be even and at least 2, got {n_batch}"
        )));
    }
    Ok(n_batch / 2)
}

fn scorer_for(
    state: &RunState,
    params: &CoupParams,
    forest: Option<&ForestModel>,
) -> Option<RepulsionScorer> {
    RepulsionScorer::build(state, &params.repulsion, forest)
}

/// Runs `n_batch` counterfactual samples (half that many rounds) from a
/// shadow copy of `state`, feeding every sampled arm its current empirical
/// mean, and records each expansion the trigger would fire. The real state
/// is untouched.
pub fn simulate_activation_schedule(
    state: &RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    n_batch: u64,
) -> Result<ActivationSchedule> {
    let rounds = ensure_even_batch(n_batch)?;
    let mut shadow = state.clone();
    let pre_pool = state.pool_size();
    let base = state.round_count;
    let mut entries = Vec::new();
    // Pessimistic mode feeds frozen pre-batch lcbs instead of empirical
    // means; arms the simulation itself activates freeze at zero.
    let mut frozen: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
    // With a zero reference tolerance the reference set is the certified
    // list, which no shadow world mutates; penalties depend only on features
    // and that fixed set, so one cached scorer serves the whole batch.
    let static_scorer = if params.repulsion.epsilon_ref == 0.0 {
        Some(scorer_for(&shadow, params, forest))
    } else {
        None
    };
    for t in 0..rounds {
        let step = base + t;
        update_control_quantities(&mut shadow, params);
        if expansion_due(&shadow, params) {
            let outcome = match propose_expansion(&mut shadow, space, params, forest, step)? {
                Expansion::Added {
                    arm,
                    was_uniform,
                    uniform_draws,
                } => {
                    frozen.push(0.0);
                    ScheduledExpansion::Added {
                        id: shadow.arms[arm].id.clone(),
                        was_uniform,
                        uniform_draws,
                    }
                }
                Expansion::Saturated { uniform_draws } => {
                    ScheduledExpansion::Saturated { uniform_draws }
                }
            };
            entries.push(ScheduleEntry {
                round: t + 1,
                outcome,
            });
        }
        if shadow.samplable_count() < 2 {
            continue;
        }
        let round_scorer;
        let scorer = match &static_scorer {
            Some(s) => s.as_ref(),
            None => {
                round_scorer = scorer_for(&shadow, params, forest);
                round_scorer.as_ref()
            }
        };
        let (leader, challenger) = select_pair(&shadow, params, scorer, step)?;
        for arm in [leader, challenger] {
            let y = if params.pessimistic_schedule {
                frozen[arm]
            } else {
                shadow.arms[arm].stats.mean_or_zero()
            };
            shadow.arms[arm].stats.record_observation(y)?;
            shadow.arms[arm].bounds =
                compute_bounds(&shadow.arms[arm].stats, params.bounds_delta(), pre_pool);
        }
    }
    Ok(ActivationSchedule { entries })
}

/// Builds the batch plan against frozen shadow statistics. Half the slots
/// are pre-assigned to the pre-batch leader; each challenger slot is chosen
/// from the shadow after activating any scheduled arms for that round, then
/// the chosen arm's shadow absorbs its frozen pre-batch lcb (zero for arms
/// activated mid-batch) as a pseudo-outcome. Shadow updates are discarded.
pub fn build_batch(
    state: &RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    schedule: &ActivationSchedule,
    n_batch: u64,
) -> Result<BatchPlan> {
    let rounds = ensure_even_batch(n_batch)?;
    if let Some(e) = schedule
        .entries
        .iter()
        .find(|e| e.round == 0 || e.round > rounds)
    {
        return Err(Error::Config(format!(
            "schedule entry at round {} outside batch of {} rounds",
            e.round, rounds
        )));
    }
    let mut shadow = state.clone();
    let pre_pool = state.pool_size();
    let base = state.round_count;
    let mut frozen: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
    let mut leader = None;
    let mut entries = Vec::with_capacity(n_batch as usize);
    let static_scorer = if params.repulsion.epsilon_ref == 0.0 {
        Some(scorer_for(&shadow, params, forest))
    } else {
        None
    };
    for t in 1..=rounds {
        for e in schedule.entries.iter().filter(|e| e.round == t) {
            if let ScheduledExpansion::Added { id, .. } = &e.outcome {
                let features = space.encode_features(id)?;
                shadow.push_arm(id.clone(), features, base + t - 1);
                frozen.push(0.0);
            }
        }
        // The leader is pinned once, before any batch samples land but after
        // the first round's scheduled activations: that is exactly the
        // candidate set a sequential run would see at its next selection,
        // which keeps batch size 2 step-identical to the sequential process.
        let leader = match leader {
            Some(l) => l,
            None => {
                let l = select_leader(&shadow, params, base)?;
                leader = Some(l);
                l
            }
        };
        let round_scorer;
        let scorer = match &static_scorer {
            Some(s) => s.as_ref(),
            None => {
                round_scorer = scorer_for(&shadow, params, forest);
                round_scorer.as_ref()
            }
        };
        let challenger = select_challenger(&shadow, params, scorer, leader, base + t - 1)?;
        entries.push(shadow.arms[leader].id.clone());
        entries.push(shadow.arms[challenger].id.clone());
        let f = frozen[challenger];
        shadow.arms[challenger].stats.record_observation(f)?;
        shadow.arms[challenger].bounds = compute_bounds(
            &shadow.arms[challenger].stats,
            params.bounds_delta(),
            pre_pool,
        );
    }
    let leader = leader.expect("at least one round");
    Ok(BatchPlan {
        entries,
        incumbent: shadow.arms[leader].id.clone(),
        incumbent_share: rounds,
    })
}

/// One dispatched slot, after the outcome came back.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub id: TemplateId,
    pub arm: usize,
    pub draw_index: u64,
    pub utility: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub activated: Vec<TemplateId>,
    pub slots: Vec<SlotOutcome>,
    pub refreshed: bool,
}

pub(crate) fn dispatch_all(
    oracle: &dyn Oracle,
    ids: &[&TemplateId],
    keys: &[DrawKey],
    parallelism: usize,
) -> Vec<Result<Outcome>> {
    if parallelism <= 1 || ids.len() <= 1 {
        return ids
            .iter()
            .zip(keys)
            .map(|(id, key)| oracle.evaluate(id, *key))
            .collect();
    }
    let mut results: Vec<Option<Result<Outcome>>> = ids.iter().map(|_| None).collect();
    for wave in (0..ids.len()).step_by(parallelism) {
        let hi = (wave + parallelism).min(ids.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = (wave..hi)
                .map(|i| {
                    let (id, key) = (ids[i], keys[i]);
                    scope.spawn(move || oracle.evaluate(id, key))
                })
                .collect();
            for (offset, handle) in handles.into_iter().enumerate() {
                results[wave + offset] = Some(handle.join().unwrap_or_else(|_| {
                    Err(Error::Backend("oracle dispatch thread panicked".into()))
                }));
            }
        });
    }
    results.into_iter().map(|r| r.expect("slot filled")).collect()
}

/// Dispatches the plan's oracle calls and applies the realized outcomes to
/// the real state. Draw indices are precomputed per arm (current count plus
/// occurrence number within the plan), so dispatch interleaving cannot
/// change which synthetic draw any slot sees. Scheduled expansions are
/// replayed onto the real pool, including their uniform-draw bookkeeping,
/// before any sampling. Backend failure outcomes become utility-0
/// observations; protocol-level errors abort with the state unchanged.
#[allow(clippy::too_many_arguments)]
pub fn execute_batch(
    state: &mut RunState,
    space: &Space,
    params: &CoupParams,
    oracle: &dyn Oracle,
    utility_spec: &UtilitySpec,
    schedule: &ActivationSchedule,
    plan: &BatchPlan,
    parallelism: usize,
) -> Result<BatchReport> {
    let rounds = ensure_even_batch(plan.entries.len() as u64)?;
    let base = state.round_count;
    let mut activated = Vec::new();
    for e in &schedule.entries {
        state.expansion_events += 1;
        match &e.outcome {
            ScheduledExpansion::Added {
                id, uniform_draws, ..
            } => {
                state.uniform_proposal_count += uniform_draws;
                let features = space.encode_features(id)?;
                state.push_arm(id.clone(), features, base + e.round - 1);
                activated.push(id.clone());
            }
            ScheduledExpansion::Saturated { uniform_draws } => {
                state.uniform_proposal_count += uniform_draws;
            }
        }
    }

    let mut occurrences: HashMap<usize, u64> = HashMap::new();
    let mut slots = Vec::with_capacity(plan.entries.len());
    for id in &plan.entries {
        let arm = state.arm_index(id).ok_or_else(|| {
            Error::Config("batch plan references an arm missing from the pool".into())
        })?;
        let seen = occurrences.entry(arm).or_insert(0);
        slots.push((arm, state.arms[arm].stats.m + *seen));
        *seen += 1;
    }
    let keys: Vec<DrawKey> = slots.iter().map(|&(_, k)| DrawKey::run(k)).collect();
    let ids: Vec<&TemplateId> = plan.entries.iter().collect();
    let mut outcomes = Vec::with_capacity(slots.len());
    for result in dispatch_all(oracle, &ids, &keys, parallelism) {
        outcomes.push(result?);
    }

    let mut report_slots = Vec::with_capacity(outcomes.len());
    for ((&(arm, draw_index), outcome), id) in slots.iter().zip(outcomes).zip(&plan.entries) {
        let u = utility(utility_spec, &outcome, id)?;
        crate::optimizer::apply_observation(state, arm, u, params)?;
        report_slots.push(SlotOutcome {
            id: id.clone(),
            arm,
            draw_index,
            utility: u,
            outcome,
        });
    }
    state.round_count += rounds;

    let pool = state.pool_size();
    let state_mut = &mut *state;
    let refreshed = deferred_refresh(
        state_mut.arms.iter_mut().map(|a| {
            let ArmRecord { stats, bounds, .. } = a;
            (&*stats, bounds)
        }),
        params.bounds_delta(),
        pool,
        &mut state_mut.last_refresh_pool_size,
    );
    Ok(BatchReport {
        activated,
        slots: report_slots,
        refreshed,
    })
}

/// Convenience wrapper for one full batch: refresh control quantities,
/// simulate the activation schedule, build the plan, execute it.
/// Certification and surrogate retraining stay with the caller.
#[allow(clippy::too_many_arguments)]
pub fn run_one_batch(
    state: &mut RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    oracle: &dyn Oracle,
    utility_spec: &UtilitySpec,
    n_batch: u64,
    parallelism: usize,
) -> Result<(ActivationSchedule, BatchPlan, BatchReport)> {
    update_control_quantities(state, params);
    let schedule = simulate_activation_schedule(state, space, params, forest, n_batch)?;
    let plan = build_batch(state, space, params, forest, &schedule, n_batch)?;
    let report = execute_batch(
        state,
        space,
        params,
        oracle,
        utility_spec,
        &schedule,
        &plan,
        parallelism,
    )?;
    Ok((schedule, plan, report))
}

/// Redraws every sampled arm's history as Bernoulli outcomes at its true
/// mean and recomputes bounds, giving each verification seed an honestly
/// random state with the same sample counts.
fn resample_histories(
    base: &RunState,
    true_means: &[f64],
    params: &CoupParams,
    seed: u64,
) -> Result<RunState> {
    if true_means.len() != base.arms.len() {
        return Err(Error::Config(format!(
            "{} true means for {} arms",
            true_means.len(),
            base.arms.len()
        )));
    }
    let mut state = base.clone();
    let n = state.pool_size();
    for (i, arm) in state.arms.iter_mut().enumerate() {
        if arm.stats.m == 0 {
            continue;
        }
        let mut rng = derive_rng(seed, &[stream::ORACLE, i as u64]);
        let mut total = 0.0;
        for _ in 0..arm.stats.m {
            total += f64::from(u8::from(rng.gen_bool(true_means[i])));
        }
        arm.stats.total = total;
        arm.bounds = compute_bounds(&arm.stats, params.bounds_delta(), n);
    }
    update_control_quantities(&mut state, params);
    Ok(state)
}

/// One seed's frozen-vs-true update comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct G1Seed {
    /// Whether every frozen value sat at or below its arm's true mean.
    pub lcb_valid: bool,
    /// A step where the frozen post-update ucb exceeded the true-mean
    /// post-update ucb while `lcb_valid` held.
    pub violated: bool,
}

/// Walks the frozen-LCB challenger trajectory and, at every step, compares
/// the selected arm's post-update ucb under the frozen pseudo-outcome
/// against the same update fed the arm's true mean.
pub fn g1_trajectory(
    state: &RunState,
    true_means: &[f64],
    params: &CoupParams,
    n_batch: u64,
) -> Result<G1Seed> {
    let rounds = ensure_even_batch(n_batch)?;
    let frozen: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
    let lcb_valid = frozen
        .iter()
        .zip(true_means)
        .all(|(f, mu)| f <= mu);
    let mut shadow = state.clone();
    let pre_pool = state.pool_size();
    let base = state.round_count;
    let leader = select_leader(state, params, base)?;
    let mut violated = false;
    for t in 0..rounds {
        if shadow.samplable_count() < 2 {
            break;
        }
        let c = select_challenger(&shadow, params, None, leader, base + t)?;
        let mut with_frozen = shadow.arms[c].stats;
        with_frozen.record_observation(frozen[c])?;
        let ucb_frozen = compute_bounds(&with_frozen, params.bounds_delta(), pre_pool).ucb;
        let mut with_true = shadow.arms[c].stats;
        with_true.record_observation(true_means[c])?;
        let ucb_true = compute_bounds(&with_true, params.bounds_delta(), pre_pool).ucb;
        if lcb_valid && ucb_frozen > ucb_true {
            violated = true;
        }
        shadow.arms[c].stats = with_frozen;
        shadow.arms[c].bounds =
            compute_bounds(&shadow.arms[c].stats, params.bounds_delta(), pre_pool);
    }
    Ok(G1Seed { lcb_valid, violated })
}

#[derive(Debug, Clone, PartialEq)]
pub struct G1Report {
    pub seeds: u64,
    pub lcb_valid_seeds: u64,
    pub violation_seeds: u64,
    pub violation_fraction: f64,
}

impl G1Report {
    pub fn passes(&self, delta: f64) -> bool {
        self.violation_fraction <= delta
    }
}

/// Conservativeness check: across seeds with freshly resampled histories,
/// the frozen pseudo-update must never yield a higher post-update ucb than
/// the true-mean update would, whenever every frozen value lower-bounds its
/// true mean.
pub fn verify_g1(
    base: &RunState,
    true_means: &[f64],
    params: &CoupParams,
    n_batch: u64,
    seeds: &[u64],
) -> Result<G1Report> {
    let mut lcb_valid_seeds = 0;
    let mut violation_seeds = 0;
    for &seed in seeds {
        let rolled = resample_histories(base, true_means, params, seed)?;
        let outcome = g1_trajectory(&rolled, true_means, params, n_batch)?;
        lcb_valid_seeds += u64::from(outcome.lcb_valid);
        violation_seeds += u64::from(outcome.violated);
    }
    Ok(G1Report {
        seeds: seeds.len() as u64,
        lcb_valid_seeds,
        violation_seeds,
        violation_fraction: if seeds.is_empty() {
            0.0
        } else {
            violation_seeds as f64 / seeds.len() as f64
        },
    })
}

/// Sample sets and allocations from one seed's paired worlds.
#[derive(Debug, Clone, PartialEq)]
pub struct G2Worlds {
    pub sampled_real: HashSet<usize>,
    pub sampled_sim: HashSet<usize>,
    pub alloc_real: HashMap<usize, u64>,
    pub alloc_sim: HashMap<usize, u64>,
}

impl G2Worlds {
    pub fn contained(&self) -> bool {
        self.sampled_real.is_subset(&self.sampled_sim)
    }

    pub fn strict(&self) -> bool {
        self.contained() && self.sampled_sim.len() > self.sampled_real.len()
    }

    /// Average per-arm allocation over the really-sampled set, in each
    /// world.
    pub fn real_set_averages(&self) -> (f64, f64) {
        let count = self.sampled_real.len().max(1) as f64;
        let real: u64 = self
            .sampled_real
            .iter()
            .map(|a| self.alloc_real.get(a).copied().unwrap_or(0))
            .sum();
        let sim: u64 = self
            .sampled_real
            .iter()
            .map(|a| self.alloc_sim.get(a).copied().unwrap_or(0))
            .sum();
        (real as f64 / count, sim as f64 / count)
    }
}

/// Runs the expected-outcome sequential world and the frozen-LCB simulated
/// world from the same state for `budget` samples each, tracking which arms
/// each one touches. The simulated world consumes the activation schedule
/// the sequential world generated, exactly as the production pipeline does.
pub fn g2_worlds(
    state: &RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    budget: u64,
) -> Result<G2Worlds> {
    let rounds = ensure_even_batch(budget)?;
    let base = state.round_count;

    let mut expected = state.clone();
    let mut schedule = Vec::new();
    let mut sampled_real = HashSet::new();
    let mut alloc_real: HashMap<usize, u64> = HashMap::new();
    for t in 0..rounds {
        let step = base + t;
        update_control_quantities(&mut expected, params);
        if expansion_due(&expected, params) {
            match propose_expansion(&mut expected, space, params, forest, step)? {
                Expansion::Added { arm, .. } => {
                    schedule.push((t + 1, Some(expected.arms[arm].id.clone())));
                }
                Expansion::Saturated { .. } => schedule.push((t + 1, None)),
            }
        }
        if expected.samplable_count() < 2 {
            continue;
        }
        let scorer = scorer_for(&expected, params, forest);
        let (leader, challenger) = select_pair(&expected, params, scorer.as_ref(), step)?;
        let pool = expected.pool_size();
        for arm in [leader, challenger] {
            let y = expected.arms[arm].stats.mean_or_zero();
            expected.arms[arm].stats.record_observation(y)?;
            expected.arms[arm].bounds =
                compute_bounds(&expected.arms[arm].stats, params.bounds_delta(), pool);
            sampled_real.insert(arm);
            *alloc_real.entry(arm).or_insert(0) += 1;
        }
    }

    let mut sim = state.clone();
    let pre_pool = state.pool_size();
    let mut frozen: Vec<f64> = state.arms.iter().map(|a| a.bounds.lcb).collect();
    let mut leader = None;
    let mut sampled_sim = HashSet::new();
    let mut alloc_sim: HashMap<usize, u64> = HashMap::new();
    for t in 0..rounds {
        for id in schedule
            .iter()
            .filter(|(round, _)| *round == t + 1)
            .filter_map(|(_, id)| id.as_ref())
        {
            let features = space.encode_features(id)?;
            sim.push_arm(id.clone(), features, base + t);
            frozen.push(0.0);
        }
        // Same pin point as the batch builder: after the first round's
        // activations, before any samples.
        let leader = match leader {
            Some(l) => l,
            None => {
                let l = select_leader(&sim, params, base)?;
                leader = Some(l);
                sampled_sim.insert(l);
                alloc_sim.insert(l, rounds);
                l
            }
        };
        if sim.samplable_count() < 2 {
            continue;
        }
        let scorer = scorer_for(&sim, params, forest);
        let challenger = select_challenger(&sim, params, scorer.as_ref(), leader, base + t)?;
        sampled_sim.insert(challenger);
        *alloc_sim.entry(challenger).or_insert(0) += 1;
        let f = frozen[challenger];
        sim.arms[challenger].stats.record_observation(f)?;
        sim.arms[challenger].bounds =
            compute_bounds(&sim.arms[challenger].stats, params.bounds_delta(), pre_pool);
    }

    Ok(G2Worlds {
        sampled_real,
        sampled_sim,
        alloc_real,
        alloc_sim,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Report {
    pub seeds: u64,
    pub contained_seeds: u64,
    pub strict_seeds: u64,
    /// Strict-containment seeds where the simulated world failed to spread
    /// thinner over the really-sampled set.
    pub allocation_violations: u64,
    pub containment_fraction: f64,
}

impl G2Report {
    pub fn passes(&self, delta: f64) -> bool {
        self.containment_fraction >= 1.0 - delta && self.allocation_violations == 0
    }
}

/// Coverage check: the simulated world's sampled set must contain the
/// sequential world's in at least a `1 - delta` fraction of seeds, and
/// whenever the containment is strict the simulation must allocate strictly
/// fewer samples per arm over the really-sampled set.
pub fn verify_g2(
    base: &RunState,
    space: &Space,
    params: &CoupParams,
    forest: Option<&ForestModel>,
    true_means: &[f64],
    budget: u64,
    seeds: &[u64],
) -> Result<G2Report> {
    let mut contained_seeds = 0;
    let mut strict_seeds = 0;
    let mut allocation_violations = 0;
    for &seed in seeds {
        let rolled = resample_histories(base, true_means, params, seed)?;
        let worlds = g2_worlds(&rolled, space, params, forest, budget)?;
        contained_seeds += u64::from(worlds.contained());
        if worlds.strict() {
            strict_seeds += 1;
            let (avg_real, avg_sim) = worlds.real_set_averages();
            allocation_violations += u64::from(avg_sim >= avg_real);
        }
    }
    Ok(G2Report {
        seeds: seeds.len() as u64,
        contained_seeds,
        strict_seeds,
        allocation_violations,
        containment_fraction: if seeds.is_empty() {
            1.0
        } else {
            contained_seeds as f64 / seeds.len() as f64
        },
    })
}
