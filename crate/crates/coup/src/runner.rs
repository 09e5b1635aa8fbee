//! Run orchestration: the batch loop, the uniform baseline, top-K
//! re-evaluation, trace replay, and snapshot/resume.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batching::{dispatch_all, run_one_batch, ScheduledExpansion};
use crate::bounds::deferred_refresh;
use crate::config::{RunConfig, RunMode};
use crate::optimizer::{
    apply_observation, certify_step, init, propose_expansion, rank, update_control_quantities,
    ArmRecord, CoupParams, Expansion, RankBy, RunState,
};
use crate::oracle::{utility, DrawKey, Oracle, UtilitySpec};
use crate::rng::{derive_rng, stream, Fnv64};
use crate::space::{Space, TemplateId};
use crate::surrogate::{retrain_due, train, ForestModel};
use crate::trace::{
    digest_prefix, read_trace, Trace, TraceEvent, TraceHeader, TraceWriter, TRACE_FORMAT,
};
use crate::{Error, Result};

/// Recomputes every eligible arm's bounds if the pool grew past the 1.5x
/// marker; reports whether the refresh fired.
fn refresh_all(state: &mut RunState, delta: f64) -> bool {
    let pool = state.pool_size();
    deferred_refresh(
        state.arms.iter_mut().map(|a| {
            let ArmRecord { stats, bounds, .. } = a;
            (&*stats, bounds)
        }),
        delta,
        pool,
        &mut state.last_refresh_pool_size,
    )
}

fn coup_header(config: &RunConfig, mode: RunMode) -> TraceHeader {
    TraceHeader {
        format: TRACE_FORMAT.into(),
        mode,
        config_digest: config.digest(),
        config: config.clone(),
    }
}

/// Drives one adaptive run batch by batch, persisting the trace as it goes.
pub struct Runner<'a> {
    pub config: RunConfig,
    params: CoupParams,
    space: &'a Space,
    oracle: &'a dyn Oracle,
    pub state: RunState,
    pub forest: Option<ForestModel>,
    pub train_count: u64,
    pub batch_index: u64,
    pub saturated: bool,
    writer: TraceWriter,
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub state: RunState,
    pub forest: Option<ForestModel>,
    pub train_count: u64,
    pub batch_index: u64,
    pub saturated: bool,
    pub trace: Trace,
}

impl<'a> Runner<'a> {
    pub fn new(
        config: &RunConfig,
        space: &'a Space,
        oracle: &'a dyn Oracle,
        trace_path: Option<&Path>,
    ) -> Result<Runner<'a>> {
        config.validate(RunMode::Coup)?;
        let params = config.coup_params();
        let state = init(space, &params, config.seed, config.budget_total)?;
        let mut writer = TraceWriter::create(trace_path, coup_header(config, RunMode::Coup))?;
        for arm in &state.arms {
            writer.push(
                0,
                TraceEvent::ArmAdded {
                    id: arm.id.clone(),
                    activation_step: 0,
                },
            )?;
        }
        writer.flush()?;
        Ok(Runner {
            config: config.clone(),
            params,
            space,
            oracle,
            state,
            forest: None,
            train_count: 0,
            batch_index: 0,
            saturated: false,
            writer,
        })
    }

    /// Reconstructs a runner from a snapshot, verifying that the config and
    /// the on-disk trace prefix are the ones the snapshot was taken under.
    /// Bytes past the snapshot point (a re-evaluation appendix, a torn
    /// write) are truncated away so appending continues the exact stream.
    pub fn resume(
        config: &RunConfig,
        space: &'a Space,
        oracle: &'a dyn Oracle,
        snapshot_path: &Path,
        trace_path: &Path,
    ) -> Result<Runner<'a>> {
        config.validate(RunMode::Coup)?;
        let snap = load_snapshot(snapshot_path)?;
        if snap.mode != RunMode::Coup {
            return Err(Error::Snapshot(
                "snapshot was not taken by an adaptive run".into(),
            ));
        }
        if snap.config_digest != config.digest() {
            return Err(Error::Snapshot(format!(
                "config digest {} does not match the snapshot's {}",
                config.digest(),
                snap.config_digest
            )));
        }
        let (prefix_hex, digest_state) = digest_prefix(trace_path, snap.trace_bytes)?;
        if prefix_hex != snap.trace_digest {
            return Err(Error::Snapshot(
                "trace prefix does not match the snapshot digest".into(),
            ));
        }
        let file = File::options().write(true).open(trace_path)?;
        file.set_len(snap.trace_bytes)?;
        drop(file);
        let trace = read_trace(trace_path)?;
        if trace.header.config_digest != snap.config_digest {
            return Err(Error::Snapshot(
                "trace header belongs to a different config".into(),
            ));
        }
        let mut state = snap.state;
        state.rebuild_index();
        let writer = TraceWriter::reopen(
            Some(trace_path),
            trace.header,
            trace.records,
            snap.trace_bytes,
            digest_state,
        )?;
        Ok(Runner {
            config: config.clone(),
            params: config.coup_params(),
            space,
            oracle,
            state,
            forest: snap.forest,
            train_count: snap.train_count,
            batch_index: snap.batch_index,
            saturated: snap.saturated,
            writer,
        })
    }

    /// Runs one batch. Returns false, without consuming budget, once the
    /// remaining budget cannot fit a batch or the pool cannot offer a
    /// leader-challenger pair even after expansion.
    pub fn step_batch(&mut self) -> Result<bool> {
        if self.saturated {
            return Ok(false);
        }

        if let Some(fp) = &self.params.surrogate {
            let m2 = self.state.configs_with_two_samples();
            if retrain_due(self.forest.as_ref(), m2) {
                let examples: Vec<(Vec<f64>, f64)> = self
                    .state
                    .arms
                    .iter()
                    .filter(|a| a.stats.m >= 2)
                    .map(|a| (a.features.clone(), a.stats.mean_or_zero()))
                    .collect();
                self.forest = Some(train(
                    &examples,
                    fp,
                    m2,
                    self.state.seed,
                    self.train_count,
                )?);
                self.train_count += 1;
            }
        }

        // The pair selector needs two samplable arms; grow the pool first if
        // certification or retirement drained it.
        while self.state.samplable_count() < 2 {
            let step = self.state.round_count;
            match propose_expansion(
                &mut self.state,
                self.space,
                &self.params,
                self.forest.as_ref(),
                step,
            )? {
                Expansion::Added {
                    arm,
                    was_uniform,
                    uniform_draws,
                } => {
                    let id = self.state.arms[arm].id.clone();
                    self.writer.push(
                        self.state.budget_used,
                        TraceEvent::Expansion {
                            round: step,
                            added: Some(id.clone()),
                            was_uniform: Some(was_uniform),
                            uniform_draws,
                        },
                    )?;
                    self.writer.push(
                        self.state.budget_used,
                        TraceEvent::ArmAdded {
                            id,
                            activation_step: step,
                        },
                    )?;
                }
                Expansion::Saturated { uniform_draws } => {
                    // The space has no unexplored ids left to offer; the run
                    // ends early with whatever budget remains unspent.
                    self.writer.push(
                        self.state.budget_used,
                        TraceEvent::Expansion {
                            round: step,
                            added: None,
                            was_uniform: None,
                            uniform_draws,
                        },
                    )?;
                    self.saturated = true;
                    self.writer.flush()?;
                    return Ok(false);
                }
            }
        }

        if refresh_all(&mut self.state, self.params.bounds_delta()) {
            self.writer.push(
                self.state.budget_used,
                TraceEvent::BoundsRefreshed {
                    pool_size: self.state.pool_size(),
                },
            )?;
        }

        if self.state.budget_used + self.config.batch_size > self.state.budget_total {
            return Ok(false);
        }

        let base = self.state.round_count;
        let budget_pre = self.state.budget_used;
        let (schedule, plan, report) = run_one_batch(
            &mut self.state,
            self.space,
            &self.params,
            self.forest.as_ref(),
            self.oracle,
            &self.config.utility,
            self.config.batch_size,
            self.config.parallelism,
        )?;

        for e in &schedule.entries {
            let at = base + e.round - 1;
            match &e.outcome {
                ScheduledExpansion::Added {
                    id,
                    was_uniform,
                    uniform_draws,
                } => {
                    self.writer.push(
                        budget_pre,
                        TraceEvent::Expansion {
                            round: at,
                            added: Some(id.clone()),
                            was_uniform: Some(*was_uniform),
                            uniform_draws: *uniform_draws,
                        },
                    )?;
                    self.writer.push(
                        budget_pre,
                        TraceEvent::ArmAdded {
                            id: id.clone(),
                            activation_step: at,
                        },
                    )?;
                }
                ScheduledExpansion::Saturated { uniform_draws } => {
                    self.writer.push(
                        budget_pre,
                        TraceEvent::Expansion {
                            round: at,
                            added: None,
                            was_uniform: None,
                            uniform_draws: *uniform_draws,
                        },
                    )?;
                }
            }
        }
        let rounds = plan.incumbent_share;
        for t in 0..rounds {
            self.writer.push(
                budget_pre,
                TraceEvent::PairSelected {
                    round: base + t,
                    leader: plan.incumbent.clone(),
                    challenger: plan.entries[(2 * t + 1) as usize].clone(),
                },
            )?;
        }
        for (j, slot) in report.slots.iter().enumerate() {
            self.writer.push(
                budget_pre + j as u64 + 1,
                TraceEvent::Observation {
                    id: slot.id.clone(),
                    draw_index: slot.draw_index,
                    utility: slot.utility,
                },
            )?;
        }
        if report.refreshed {
            self.writer.push(
                self.state.budget_used,
                TraceEvent::BoundsRefreshed {
                    pool_size: self.state.pool_size(),
                },
            )?;
        }
        self.batch_index += 1;
        self.writer.push(
            self.state.budget_used,
            TraceEvent::BatchExecuted {
                index: self.batch_index,
                rounds,
                epsilon: self.state.epsilon,
                gamma: self.state.gamma,
            },
        )?;

        let cert = certify_step(&mut self.state, &self.params);
        for &i in &cert.newly_certified {
            self.writer.push(
                self.state.budget_used,
                TraceEvent::Certified {
                    id: self.state.arms[i].id.clone(),
                    lcb: self.state.arms[i].bounds.lcb,
                    threshold: cert.threshold_before,
                },
            )?;
        }
        if cert.threshold_after > cert.threshold_before {
            self.writer.push(
                self.state.budget_used,
                TraceEvent::ThresholdRaised {
                    from: cert.threshold_before,
                    to: cert.threshold_after,
                },
            )?;
        }
        self.writer.flush()?;
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step_batch()? {}
        Ok(())
    }

    /// Captures a resumable snapshot; valid only at batch boundaries, which
    /// is the only place the caller can observe the runner.
    pub fn snapshot(&mut self) -> Result<Snapshot> {
        update_control_quantities(&mut self.state, &self.params);
        self.writer.flush()?;
        Ok(Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            mode: RunMode::Coup,
            config_digest: self.config.digest(),
            batch_index: self.batch_index,
            train_count: self.train_count,
            saturated: self.saturated,
            trace_bytes: self.writer.bytes_written(),
            trace_digest: self.writer.digest(),
            state: self.state.clone(),
            forest: self.forest.clone(),
        })
    }

    pub fn finish(mut self) -> Result<RunOutcome> {
        update_control_quantities(&mut self.state, &self.params);
        self.writer.flush()?;
        Ok(RunOutcome {
            state: self.state,
            forest: self.forest,
            train_count: self.train_count,
            batch_index: self.batch_index,
            saturated: self.saturated,
            trace: self.writer.into_trace(),
        })
    }
}

/// Full adaptive run: init, batch loop to budget exhaustion, final control
/// refresh.
pub fn run(
    config: &RunConfig,
    space: &Space,
    oracle: &dyn Oracle,
    trace_path: Option<&Path>,
) -> Result<RunOutcome> {
    let mut runner = Runner::new(config, space, oracle, trace_path)?;
    runner.run_to_end()?;
    runner.finish()
}

/// Uniform baseline: `budget_total` with-replacement draws over the space,
/// with the same stats and bounds bookkeeping but no adaptive allocation
/// and no certification.
pub fn run_uniform(
    config: &RunConfig,
    space: &Space,
    oracle: &dyn Oracle,
    trace_path: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate(RunMode::Uniform)?;
    let mut params = config.coup_params();
    params.initial_pool = 0;
    let mut state = init(space, &params, config.seed, config.budget_total)?;
    let mut writer = TraceWriter::create(trace_path, coup_header(config, RunMode::Uniform))?;
    for i in 0..config.budget_total {
        let mut rng = derive_rng(config.seed, &[stream::UNIFORM_RUN, i]);
        let id = space.sample_uniform(&mut rng, config.rejection_cap)?;
        let arm = match state.arm_index(&id) {
            Some(a) => a,
            None => {
                let features = space.encode_features(&id)?;
                let a = state.push_arm(id.clone(), features, i);
                writer.push(
                    state.budget_used,
                    TraceEvent::ArmAdded {
                        id: id.clone(),
                        activation_step: i,
                    },
                )?;
                a
            }
        };
        let key = DrawKey::run(state.arms[arm].stats.m);
        let outcome = oracle.evaluate(&id, key)?;
        let u = utility(&config.utility, &outcome, &id)?;
        apply_observation(&mut state, arm, u, &params)?;
        writer.push(
            state.budget_used,
            TraceEvent::Observation {
                id,
                draw_index: key.index,
                utility: u,
            },
        )?;
        if refresh_all(&mut state, params.bounds_delta()) {
            writer.push(
                state.budget_used,
                TraceEvent::BoundsRefreshed {
                    pool_size: state.pool_size(),
                },
            )?;
        }
    }
    update_control_quantities(&mut state, &params);
    writer.flush()?;
    Ok(RunOutcome {
        state,
        forest: None,
        train_count: 0,
        batch_index: 0,
        saturated: false,
        trace: writer.into_trace(),
    })
}

pub const REEVAL_FORMAT: &str = "coup-reeval/v1";

/// One re-evaluated arm, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReevalEntry {
    pub rank: u64,
    pub id: TemplateId,
    /// Ranking score (lcb or mean, per the ranking mode).
    pub score: f64,
    pub run_m: u64,
    pub run_mean: f64,
    pub lcb: f64,
    pub ucb: f64,
    pub fresh_m: u64,
    /// Mean over all samples, run draws and fresh draws pooled.
    pub reeval_mean: f64,
    /// The fresh utilities, for report recomputation and trace appending.
    pub fresh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReevalReport {
    pub format: String,
    pub rank_by: RankBy,
    pub min_samples: u64,
    pub entries: Vec<ReevalEntry>,
}

/// How many ranked arms re-evaluation covers. Mean rankings extend the cut
/// to the end of any tie group straddling it, so expected tie-broken curves
/// have re-evaluation data for every occupant a split slot could hold.
fn reeval_take(ranking: &[(usize, f64)], rank_by: RankBy, top_k: usize) -> usize {
    let mut take = ranking.len().min(top_k);
    if rank_by == RankBy::Mean {
        while take > 0 && take < ranking.len() && ranking[take].1 == ranking[take - 1].1 {
            take += 1;
        }
    }
    take
}

fn assemble_reeval(
    state: &RunState,
    ranking: &[(usize, f64)],
    mut fresh: HashMap<usize, Vec<f64>>,
    rank_by: RankBy,
    min_samples: u64,
) -> ReevalReport {
    let mut entries = Vec::with_capacity(ranking.len());
    for (pos, &(arm, score)) in ranking.iter().enumerate() {
        let a = &state.arms[arm];
        let f = fresh.remove(&arm).unwrap_or_default();
        let fresh_total: f64 = f.iter().sum();
        let total_m = a.stats.m + f.len() as u64;
        let reeval_mean = if total_m == 0 {
            0.0
        } else {
            (a.stats.total + fresh_total) / total_m as f64
        };
        entries.push(ReevalEntry {
            rank: pos as u64 + 1,
            id: a.id.clone(),
            score,
            run_m: a.stats.m,
            run_mean: a.stats.mean_or_zero(),
            lcb: a.bounds.lcb,
            ucb: a.bounds.ucb,
            fresh_m: f.len() as u64,
            reeval_mean,
            fresh: f,
        });
    }
    ReevalReport {
        format: REEVAL_FORMAT.into(),
        rank_by,
        min_samples,
        entries,
    }
}

/// Tops up each of the top-K ranked arms to `min_samples` total draws with
/// fresh evaluations on the re-evaluation stream. Fresh samples are never
/// fed back into the optimizer's bounds; backend failure outcomes count as
/// samples at their failure utility.
pub fn reevaluate(
    state: &RunState,
    rank_by: RankBy,
    top_k: usize,
    min_samples: u64,
    oracle: &dyn Oracle,
    utility_spec: &UtilitySpec,
    parallelism: usize,
) -> Result<ReevalReport> {
    let ranking = rank(state, rank_by);
    let take = reeval_take(&ranking, rank_by, top_k);
    let mut jobs: Vec<(usize, u64)> = Vec::new();
    for &(arm, _) in &ranking[..take] {
        for j in 0..min_samples.saturating_sub(state.arms[arm].stats.m) {
            jobs.push((arm, j));
        }
    }
    let ids: Vec<&TemplateId> = jobs.iter().map(|&(a, _)| &state.arms[a].id).collect();
    let keys: Vec<DrawKey> = jobs.iter().map(|&(_, j)| DrawKey::reeval(j)).collect();
    let mut fresh: HashMap<usize, Vec<f64>> = HashMap::new();
    for (&(arm, _), outcome) in jobs
        .iter()
        .zip(dispatch_all(oracle, &ids, &keys, parallelism))
    {
        let outcome = outcome?;
        let u = utility(utility_spec, &outcome, &state.arms[arm].id)?;
        fresh.entry(arm).or_default().push(u);
    }
    Ok(assemble_reeval(
        state,
        &ranking[..take],
        fresh,
        rank_by,
        min_samples,
    ))
}

/// Rebuilds a re-evaluation report from the trace's re-evaluation events
/// plus a (replayed) final state, for verifying that emitted reports are
/// pure functions of the trace.
pub fn reeval_from_trace(
    state: &RunState,
    trace: &Trace,
    rank_by: RankBy,
    top_k: usize,
    min_samples: u64,
) -> Result<ReevalReport> {
    let mut by_id: HashMap<&TemplateId, Vec<(u64, f64)>> = HashMap::new();
    for rec in &trace.records {
        if let TraceEvent::ReevalObservation {
            id,
            draw_index,
            utility,
        } = &rec.event
        {
            by_id.entry(id).or_default().push((*draw_index, *utility));
        }
    }
    let ranking = rank(state, rank_by);
    let take = reeval_take(&ranking, rank_by, top_k);
    let mut fresh: HashMap<usize, Vec<f64>> = HashMap::new();
    for &(arm, _) in &ranking[..take] {
        if let Some(mut draws) = by_id.remove(&state.arms[arm].id) {
            draws.sort_by_key(|&(j, _)| j);
            fresh.insert(arm, draws.into_iter().map(|(_, u)| u).collect());
        }
    }
    Ok(assemble_reeval(
        state,
        &ranking[..take],
        fresh,
        rank_by,
        min_samples,
    ))
}

/// Appends the report's fresh draws to the trace as re-evaluation events,
/// first truncating the file back to the snapshot point so repeated
/// re-evaluations never double-count. Budget accounting over the resulting
/// file is exact: run observations plus re-evaluation top-ups.
pub fn append_reeval_to_trace(
    trace_path: &Path,
    snap: &Snapshot,
    report: &ReevalReport,
) -> Result<()> {
    let (prefix_hex, digest_state) = digest_prefix(trace_path, snap.trace_bytes)?;
    if prefix_hex != snap.trace_digest {
        return Err(Error::Snapshot(
            "trace prefix does not match the snapshot digest".into(),
        ));
    }
    let file = File::options().write(true).open(trace_path)?;
    file.set_len(snap.trace_bytes)?;
    drop(file);
    let trace = read_trace(trace_path)?;
    let budget = trace.records.last().map(|r| r.budget_used).unwrap_or(0);
    let mut writer = TraceWriter::reopen(
        Some(trace_path),
        trace.header,
        trace.records,
        snap.trace_bytes,
        digest_state,
    )?;
    for e in &report.entries {
        for (j, &u) in e.fresh.iter().enumerate() {
            writer.push(
                budget,
                TraceEvent::ReevalObservation {
                    id: e.id.clone(),
                    draw_index: j as u64,
                    utility: u,
                },
            )?;
        }
    }
    writer.flush()
}

pub const SNAPSHOT_FORMAT: &str = "coup-snapshot/v1";

/// Resumable image of a run at a batch boundary, bound to its config and
/// its trace prefix by digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub mode: RunMode,
    pub config_digest: String,
    pub batch_index: u64,
    pub train_count: u64,
    pub saturated: bool,
    pub trace_bytes: u64,
    pub trace_digest: String,
    pub state: RunState,
    pub forest: Option<ForestModel>,
}

/// End-of-run snapshot for a finished outcome (adaptive or uniform), so the
/// re-evaluation and report stages can pick the state back up.
pub fn outcome_snapshot(outcome: &RunOutcome, config: &RunConfig, mode: RunMode) -> Snapshot {
    let mut digest = Fnv64::new();
    let mut bytes = 0u64;
    let mut fold = |line: String| {
        digest.update(line.as_bytes());
        digest.update(b"\n");
        bytes += line.len() as u64 + 1;
    };
    fold(serde_json::to_string(&outcome.trace.header).expect("header serializes"));
    for r in &outcome.trace.records {
        fold(serde_json::to_string(r).expect("record serializes"));
    }
    Snapshot {
        format: SNAPSHOT_FORMAT.into(),
        mode,
        config_digest: config.digest(),
        batch_index: outcome.batch_index,
        train_count: outcome.train_count,
        saturated: outcome.saturated,
        trace_bytes: bytes,
        trace_digest: format!("{:016x}", digest.finish()),
        state: outcome.state.clone(),
        forest: outcome.forest.clone(),
    }
}

pub fn save_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), snap)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Snapshot(format!("cannot read snapshot {}: {e}", path.display())))?;
    let snap: Snapshot = serde_json::from_str(&text)
        .map_err(|e| Error::Snapshot(format!("bad snapshot: {e}")))?;
    if snap.format != SNAPSHOT_FORMAT {
        return Err(Error::Snapshot(format!(
            "snapshot format {:?} is not {SNAPSHOT_FORMAT:?}",
            snap.format
        )));
    }
    Ok(snap)
}

/// Rebuilds the final run state purely from trace bookkeeping: arm
/// activations, counter bumps, observations, refreshes, and per-batch
/// certification. Re-evaluation events are skipped by construction.
pub fn replay(trace: &Trace, space: &Space) -> Result<RunState> {
    let config = &trace.header.config;
    let params = config.coup_params();
    let mut zero_pool = params.clone();
    zero_pool.initial_pool = 0;
    let mut state = init(space, &zero_pool, config.seed, config.budget_total)?;
    state.last_refresh_pool_size = match trace.header.mode {
        RunMode::Coup => params.initial_pool.max(1),
        RunMode::Uniform => 1,
    };
    for rec in &trace.records {
        match &rec.event {
            TraceEvent::ArmAdded {
                id,
                activation_step,
            } => {
                let features = space.encode_features(id)?;
                state.push_arm(id.clone(), features, *activation_step);
            }
            TraceEvent::Expansion { uniform_draws, .. } => {
                state.expansion_events += 1;
                state.uniform_proposal_count += uniform_draws;
            }
            TraceEvent::Observation { id, utility, .. } => {
                let arm = state.arm_index(id).ok_or_else(|| {
                    Error::Snapshot(format!(
                        "step {}: observation for an arm the trace never added",
                        rec.step
                    ))
                })?;
                apply_observation(&mut state, arm, *utility, &params)?;
            }
            TraceEvent::BoundsRefreshed { pool_size } => {
                if state.pool_size() != *pool_size {
                    return Err(Error::Snapshot(format!(
                        "step {}: refresh recorded at pool {} but replay reached {}",
                        rec.step,
                        pool_size,
                        state.pool_size()
                    )));
                }
                if !refresh_all(&mut state, params.bounds_delta()) {
                    return Err(Error::Snapshot(format!(
                        "step {}: recorded refresh did not fire on replay",
                        rec.step
                    )));
                }
            }
            TraceEvent::BatchExecuted { rounds, .. } => {
                state.round_count += rounds;
                certify_step(&mut state, &params);
            }
            TraceEvent::PairSelected { .. }
            | TraceEvent::ReevalObservation { .. }
            | TraceEvent::Certified { .. }
            | TraceEvent::ThresholdRaised { .. } => {}
        }
    }
    update_control_quantities(&mut state, &params);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackendSpec, PlantedMean, SurrogateConfig};
    use crate::oracle::{Outcome, ScriptedArm, ScriptedOracle, SyntheticOracle};
    use crate::space::{ParamKind, ParamSpec, ParamValue, SpaceSpec};
    use std::collections::HashMap as Map;
    use tempfile::tempdir;

    fn line_space(hi: i64) -> Space {
        Space::new(SpaceSpec {
            params: vec![ParamSpec {
                name: "x".into(),
                kind: ParamKind::Int { lo: 0, hi },
            }],
            constraints: vec![],
        })
        .unwrap()
    }

    fn small_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            budget_total: 60,
            batch_size: 6,
            initial_pool: 5,
            backend: BackendSpec::Synthetic {
                default_mean: 0.3,
                planted: vec![PlantedMean {
                    id: std::collections::BTreeMap::from([("x".into(), ParamValue::Int(7))]),
                    mean: 0.9,
                }],
            },
            surrogate: SurrogateConfig {
                enabled: true,
                params: crate::surrogate::ForestParams {
                    trees: 10,
                    min_leaf: 2,
                    candidates: 8,
                },
            },
            ..RunConfig::default()
        }
    }

    fn synthetic_for(config: &RunConfig) -> SyntheticOracle {
        match config.resolve().expect("resolvable").oracle {
            crate::config::ResolvedOracle::Synthetic(o) => o,
            _ => panic!("expected synthetic"),
        }
    }

    fn state_json(state: &RunState) -> String {
        serde_json::to_string(state).unwrap()
    }

    #[test]
    fn run_spends_the_exact_budget_in_batches() {
        let mut config = small_config(11);
        config.space = Some(line_space(9).spec().clone());
        let space = line_space(9);
        let oracle = synthetic_for(&config);
        let out = run(&config, &space, &oracle, None).unwrap();
        assert_eq!(out.state.budget_used, 60);
        assert_eq!(out.batch_index, 10);
        let observations = out
            .trace
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::Observation { .. }))
            .count();
        assert_eq!(observations, 60);
        let batches = out
            .trace
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::BatchExecuted { .. }))
            .count();
        assert_eq!(batches, 10);
        let pairs = out
            .trace
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::PairSelected { .. }))
            .count();
        assert_eq!(pairs, 30, "three pairs per six-call batch");
        assert_eq!(out.trace.records.last().unwrap().budget_used, 60);
    }

    #[test]
    fn scripted_runs_are_byte_identical() {
        let dir = tempdir().unwrap();
        let space = line_space(3);
        let mut table = Map::new();
        for x in 0..=3i64 {
            let id = TemplateId {
                values: vec![("x".into(), ParamValue::Int(x))],
            };
            let outcomes: Vec<Outcome> = (0..40)
                .map(|i| {
                    if (i + x) % 3 == 0 {
                        Outcome::incorrect()
                    } else {
                        Outcome::correct()
                    }
                })
                .collect();
            table.insert(
                id,
                ScriptedArm {
                    outcomes,
                    reeval_outcomes: vec![],
                },
            );
        }
        let oracle = ScriptedOracle::new(table);
        let mut config = small_config(5);
        config.space = Some(space.spec().clone());
        config.budget_total = 24;
        config.batch_size = 4;
        config.initial_pool = 3;

        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        let out_a = run(&config, &space, &oracle, Some(&path_a)).unwrap();
        let out_b = run(&config, &space, &oracle, Some(&path_b)).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
        assert_eq!(state_json(&out_a.state), state_json(&out_b.state));
    }

    #[test]
    fn replay_rebuilds_the_final_state() {
        let mut config = small_config(23);
        config.space = Some(line_space(9).spec().clone());
        config.cert = crate::optimizer::CertPolicy::Fixed { tau: 0.05 };
        let space = line_space(9);
        let oracle = synthetic_for(&config);
        let out = run(&config, &space, &oracle, None).unwrap();
        let replayed = replay(&out.trace, &space).unwrap();
        assert_eq!(state_json(&replayed), state_json(&out.state));
    }

    #[test]
    fn uniform_draws_concentrate_and_replay_matches() {
        let space = line_space(9);
        let mut config = small_config(3);
        config.space = Some(space.spec().clone());
        config.budget_total = 1_000;
        let oracle = synthetic_for(&config);
        let out = run_uniform(&config, &space, &oracle, None).unwrap();
        assert_eq!(out.state.budget_used, 1_000);
        assert_eq!(out.state.arms.len(), 10);
        for arm in &out.state.arms {
            // 3 sigma around 100 for multinomial(1000, 1/10)
            assert!(
                (70..=130).contains(&(arm.stats.m as i64)),
                "arm {} drawn {} times",
                arm.id,
                arm.stats.m
            );
        }
        let replayed = replay(&out.trace, &space).unwrap();
        assert_eq!(state_json(&replayed), state_json(&out.state));

        let again = run_uniform(&config, &space, &oracle, None).unwrap();
        assert_eq!(again.trace.records, out.trace.records);
    }

    #[test]
    fn snapshot_resume_equals_the_uninterrupted_run() {
        let dir = tempdir().unwrap();
        let space = line_space(9);
        let mut config = small_config(41);
        config.space = Some(space.spec().clone());
        let oracle = synthetic_for(&config);

        let full_path = dir.path().join("full.jsonl");
        let full = run(&config, &space, &oracle, Some(&full_path)).unwrap();

        let part_path = dir.path().join("part.jsonl");
        let snap_path = dir.path().join("snapshot.json");
        let mut runner = Runner::new(&config, &space, &oracle, Some(&part_path)).unwrap();
        for _ in 0..4 {
            assert!(runner.step_batch().unwrap());
        }
        let snap = runner.snapshot().unwrap();
        save_snapshot(&snap_path, &snap).unwrap();
        drop(runner);

        let mut resumed =
            Runner::resume(&config, &space, &oracle, &snap_path, &part_path).unwrap();
        resumed.run_to_end().unwrap();
        let out = resumed.finish().unwrap();
        assert_eq!(state_json(&out.state), state_json(&full.state));
        assert_eq!(out.batch_index, full.batch_index);
        assert_eq!(
            std::fs::read(&part_path).unwrap(),
            std::fs::read(&full_path).unwrap()
        );
    }

    #[test]
    fn resume_rejects_tampering() {
        let dir = tempdir().unwrap();
        let space = line_space(9);
        let mut config = small_config(2);
        config.space = Some(space.spec().clone());
        let oracle = synthetic_for(&config);
        let trace_path = dir.path().join("t.jsonl");
        let snap_path = dir.path().join("s.json");
        let mut runner = Runner::new(&config, &space, &oracle, Some(&trace_path)).unwrap();
        runner.step_batch().unwrap();
        save_snapshot(&snap_path, &runner.snapshot().unwrap()).unwrap();
        drop(runner);

        let mut altered = config.clone();
        altered.delta = 0.02;
        assert!(matches!(
            Runner::resume(&altered, &space, &oracle, &snap_path, &trace_path),
            Err(Error::Snapshot(_))
        ));

        let missing = dir.path().join("gone.jsonl");
        assert!(matches!(
            Runner::resume(&config, &space, &oracle, &snap_path, &missing),
            Err(Error::Snapshot(_))
        ));

        let bytes = std::fs::read(&trace_path).unwrap();
        std::fs::write(&trace_path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Runner::resume(&config, &space, &oracle, &snap_path, &trace_path),
            Err(Error::Snapshot(_))
        ));
    }

    #[test]
    fn reevaluation_tops_up_to_the_sample_floor() {
        let space = line_space(9);
        let mut config = small_config(17);
        config.space = Some(space.spec().clone());
        let oracle = synthetic_for(&config);
        let out = run(&config, &space, &oracle, None).unwrap();

        let report = reevaluate(
            &out.state,
            RankBy::Lcb,
            3,
            20,
            &oracle,
            &config.utility,
            1,
        )
        .unwrap();
        assert_eq!(report.entries.len(), 3);
        for e in &report.entries {
            assert_eq!(e.fresh_m, 20u64.saturating_sub(e.run_m));
            assert_eq!(e.run_m + e.fresh_m, e.run_m.max(20));
            let pooled = (e.run_mean * e.run_m as f64 + e.fresh.iter().sum::<f64>())
                / (e.run_m + e.fresh_m) as f64;
            approx::assert_relative_eq!(e.reeval_mean, pooled, max_relative = 1e-12);
        }
        // Fresh draws come from the disjoint re-evaluation stream.
        let first = &report.entries[0];
        if first.fresh_m > 0 {
            let direct = oracle
                .evaluate(&first.id, DrawKey::reeval(0))
                .unwrap();
            let direct_u = utility(&config.utility, &direct, &first.id).unwrap();
            approx::assert_relative_eq!(first.fresh[0], direct_u);
        }
        let already_full = reevaluate(
            &out.state,
            RankBy::Lcb,
            1,
            1,
            &oracle,
            &config.utility,
            1,
        )
        .unwrap();
        assert_eq!(already_full.entries[0].fresh_m, 0);
    }

    #[test]
    fn reeval_events_append_for_exact_accounting() {
        let dir = tempdir().unwrap();
        let space = line_space(9);
        let mut config = small_config(29);
        config.space = Some(space.spec().clone());
        let oracle = synthetic_for(&config);
        let trace_path = dir.path().join("t.jsonl");
        let out = run(&config, &space, &oracle, Some(&trace_path)).unwrap();
        let snap = outcome_snapshot(&out, &config, RunMode::Coup);

        let report =
            reevaluate(&out.state, RankBy::Lcb, 2, 15, &oracle, &config.utility, 1).unwrap();
        // Run it twice: truncation makes appending idempotent.
        append_reeval_to_trace(&trace_path, &snap, &report).unwrap();
        append_reeval_to_trace(&trace_path, &snap, &report).unwrap();

        let trace = read_trace(&trace_path).unwrap();
        let run_calls = trace
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::Observation { .. }))
            .count() as u64;
        let reeval_calls = trace
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::ReevalObservation { .. }))
            .count() as u64;
        assert_eq!(run_calls, config.budget_total);
        let expected: u64 = report.entries.iter().map(|e| e.fresh_m).sum();
        assert_eq!(reeval_calls, expected);
        // Replay ignores the appendix.
        let replayed = replay(&trace, &space).unwrap();
        assert_eq!(state_json(&replayed), state_json(&out.state));
    }

    #[test]
    fn trace_replay_recovers_the_reeval_report() {
        let dir = tempdir().unwrap();
        let space = line_space(9);
        let mut config = small_config(31);
        config.space = Some(space.spec().clone());
        let oracle = synthetic_for(&config);
        let trace_path = dir.path().join("t.jsonl");
        let out = run(&config, &space, &oracle, Some(&trace_path)).unwrap();
        let snap = outcome_snapshot(&out, &config, RunMode::Coup);

        let report =
            reevaluate(&out.state, RankBy::Lcb, 3, 12, &oracle, &config.utility, 1).unwrap();
        append_reeval_to_trace(&trace_path, &snap, &report).unwrap();

        // A cold process recovers the exact report from trace bytes alone.
        let trace = read_trace(&trace_path).unwrap();
        let replayed = replay(&trace, &space).unwrap();
        let recovered = reeval_from_trace(&replayed, &trace, RankBy::Lcb, 3, 12).unwrap();
        assert_eq!(recovered, report);
    }

    #[test]
    fn exhausted_space_ends_the_run_early() {
        let space = line_space(1); // two templates only
        let mut table = Map::new();
        for x in 0..=1i64 {
            table.insert(
                TemplateId {
                    values: vec![("x".into(), ParamValue::Int(x))],
                },
                ScriptedArm {
                    outcomes: (0..40).map(|_| Outcome::incorrect()).collect(),
                    reeval_outcomes: vec![],
                },
            );
        }
        let oracle = ScriptedOracle::new(table);
        let mut config = small_config(1);
        config.space = Some(space.spec().clone());
        config.budget_total = 80;
        config.batch_size = 2;
        config.initial_pool = 2;
        config.surrogate.enabled = false;
        config.cert = crate::optimizer::CertPolicy::Fixed { tau: 0.05 };

        let out = run(&config, &space, &oracle, None).unwrap();
        assert!(out.saturated);
        assert!(out.state.budget_used < 80, "budget left unspent");
        assert_eq!(out.state.certified.len(), 2);
        assert!(matches!(
            out.trace.records.last().unwrap().event,
            TraceEvent::Expansion { added: None, .. }
        ));
        let replayed = replay(&out.trace, &space).unwrap();
        assert_eq!(state_json(&replayed), state_json(&out.state));
    }
}
