//! Oracle backends and utility functions.
//!
//! A backend turns a template identifier into an evaluation [`Outcome`];
//! a [`UtilitySpec`] turns the outcome into a scalar utility in `[0,1]`.
//! Three backends ship: seeded synthetic Bernoulli environments (ground
//! truth known, used by the verification suites), scripted replay tables,
//! and an external worker process speaking newline-delimited JSON.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::expr::{Expr, Value};
use crate::rng::{self, derive_key, derive_rng};
use crate::space::{ParamValue, TemplateId};
use crate::{Error, Result};

/// Default per-request timeout for external backends, in milliseconds.
pub const DEFAULT_TIMEOUT_MS: u64 = 120_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Timeout,
    GenerationFailure,
    Unparseable,
}

/// One evaluation result. A set `failure` makes the outcome count as
/// correct downstream: the default utility layer maps it to 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl Outcome {
    pub fn correct() -> Outcome {
        Outcome {
            correct: Some(true),
            ..Outcome::default()
        }
    }

    pub fn incorrect() -> Outcome {
        Outcome {
            correct: Some(false),
            ..Outcome::default()
        }
    }

    pub fn failed(failure: Failure) -> Outcome {
        Outcome {
            failure: Some(failure),
            ..Outcome::default()
        }
    }
}

/// How outcomes map to scalar utilities. Every kind clips to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// 1 for an incorrect outcome, 0 for a correct one.
    ErrorRate,
    /// Error weighted inversely by template complexity:
    /// `(1 - acc) / (depth * log2(children))`. Upweights errors on
    /// shallow, simple instances.
    ComplexityWeightedError {
        #[serde(default = "default_depth_param")]
        depth_param: String,
        #[serde(default = "default_children_param")]
        children_param: String,
    },
    /// Arbitrary expression over the outcome's metrics map.
    CustomExpression { expression: String },
}

fn default_depth_param() -> String {
    "depth".into()
}

fn default_children_param() -> String {
    "children".into()
}

/// Evaluates a utility in `[0,1]`.
///
/// Failed outcomes short-circuit to 0 for every kind. The check lives here
/// rather than in the backends so a future utility could opt into different
/// failure handling; the default treats failures as correct.
pub fn utility(spec: &UtilitySpec, outcome: &Outcome, id: &TemplateId) -> Result<f64> {
    if outcome.failure.is_some() {
        return Ok(0.0);
    }
    match spec {
        UtilitySpec::ErrorRate => Ok(if outcome_correct(outcome)? { 0.0 } else { 1.0 }),
        UtilitySpec::ComplexityWeightedError {
            depth_param,
            children_param,
        } => {
            let error = if outcome_correct(outcome)? { 0.0 } else { 1.0 };
            let depth = int_param(id, depth_param)?;
            let children = int_param(id, children_param)?;
            // log2(children^depth), computed in log space; ill-posed when
            // the exponent tower collapses (children 1 or depth 0).
            let denominator = depth as f64 * (children as f64).log2();
            if depth <= 0 || children <= 1 || denominator <= 0.0 {
                return Err(Error::Config(format!(
                    "complexity weight undefined for depth={depth}, children={children}"
                )));
            }
            Ok((error / denominator).clamp(0.0, 1.0))
        }
        UtilitySpec::CustomExpression { expression } => {
            let expr = Expr::parse(expression)?;
            let env = |name: &str| -> Option<Value> {
                if name == "correct" {
                    return outcome.correct.map(Value::Bool);
                }
                outcome.metrics.get(name).map(|&x| Value::Num(x))
            };
            let value = match expr.eval(&env)? {
                crate::expr::Partial::Val(v) => v,
                crate::expr::Partial::Unknown => {
                    return Err(Error::Config(format!(
                        "custom utility {expression:?} references a missing metric"
                    )));
                }
            };
            let x = match value {
                Value::Num(x) => x,
                Value::Bool(b) => {
                    if b {
                        1.0
                    } else {
                        0.0
                    }
                }
                Value::Str(s) => {
                    return Err(Error::Config(format!(
                        "custom utility produced string {s:?}"
                    )));
                }
            };
            if !x.is_finite() {
                return Err(Error::Config(format!(
                    "custom utility produced non-finite value {x}"
                )));
            }
            Ok(x.clamp(0.0, 1.0))
        }
    }
}

fn outcome_correct(outcome: &Outcome) -> Result<bool> {
    outcome.correct.ok_or_else(|| {
        Error::Backend("outcome carries neither a correctness flag nor a failure".into())
    })
}

fn int_param(id: &TemplateId, name: &str) -> Result<i64> {
    match id.get(name) {
        Some(ParamValue::Int(v)) => Ok(*v),
        Some(other) => Err(Error::Config(format!(
            "parameter {name:?} must be an integer, got {other}"
        ))),
        None => Err(Error::Config(format!(
            "template {id} lacks parameter {name:?}"
        ))),
    }
}

/// Names the independent draw an evaluation belongs to. `stream` separates
/// optimizer-run draws from re-evaluation draws; `index` is the per-id draw
/// counter within the stream. Backends key their randomness on the pair, so
/// concurrent dispatch cannot perturb outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawKey {
    pub stream: u64,
    pub index: u64,
}

impl DrawKey {
    pub fn run(index: u64) -> DrawKey {
        DrawKey {
            stream: rng::stream::ORACLE,
            index,
        }
    }

    pub fn reeval(index: u64) -> DrawKey {
        DrawKey {
            stream: rng::stream::REEVAL,
            index,
        }
    }
}

/// An oracle backend. Implementations tolerate concurrent `evaluate` calls.
pub trait Oracle: Send + Sync {
    fn evaluate(&self, id: &TemplateId, key: DrawKey) -> Result<Outcome>;

    /// Ground-truth mean utility, where the backend knows it (synthetic
    /// environments only); verification suites lean on this.
    fn true_mean(&self, _id: &TemplateId) -> Option<f64> {
        None
    }
}

/// Per-id mean utility of a synthetic environment.
#[derive(Debug, Clone)]
pub enum MeanFn {
    Constant(f64),
    /// Planted table: listed ids get their planted mean, the rest fall back.
    Table {
        default: f64,
        planted: HashMap<TemplateId, f64>,
    },
}

impl MeanFn {
    pub fn mean(&self, id: &TemplateId) -> f64 {
        match self {
            MeanFn::Constant(mean) => *mean,
            MeanFn::Table { default, planted } => {
                planted.get(id).copied().unwrap_or(*default)
            }
        }
    }
}

/// Synthetic Bernoulli environment: `correct ~ Bernoulli(1 - mean(id))`,
/// so error-rate utility has mean `mean(id)`. Bit-reproducible: outcome
/// randomness is keyed on (seed, stream, id, draw index) only.
pub struct SyntheticOracle {
    seed: u64,
    means: MeanFn,
}

impl SyntheticOracle {
    pub fn new(seed: u64, means: MeanFn) -> SyntheticOracle {
        SyntheticOracle { seed, means }
    }
}

impl Oracle for SyntheticOracle {
    fn evaluate(&self, id: &TemplateId, key: DrawKey) -> Result<Outcome> {
        let mean = self.means.mean(id);
        debug_assert!((0.0..=1.0).contains(&mean));
        let mut rng = derive_rng(
            self.seed,
            &[key.stream, rng::fnv1a64(&id.canonical_bytes()), key.index],
        );
        use rand::Rng;
        let correct = rng.gen_bool(1.0 - mean);
        Ok(if correct {
            Outcome::correct()
        } else {
            Outcome::incorrect()
        })
    }

    fn true_mean(&self, id: &TemplateId) -> Option<f64> {
        Some(self.means.mean(id))
    }
}

/// Recorded outcomes for one scripted arm, consumed by draw index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedArm {
    #[serde(default)]
    pub outcomes: Vec<Outcome>,
    #[serde(default)]
    pub reeval_outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptedEntry {
    id: TemplateId,
    #[serde(flatten)]
    arm: ScriptedArm,
}

/// Replays recorded outcomes. Requesting past the end of an arm's table is
/// a hard error: replay must never silently invent data.
pub struct ScriptedOracle {
    table: HashMap<TemplateId, ScriptedArm>,
}

impl ScriptedOracle {
    pub fn new(table: HashMap<TemplateId, ScriptedArm>) -> ScriptedOracle {
        ScriptedOracle { table }
    }

    pub fn from_json(text: &str) -> Result<ScriptedOracle> {
        let entries: Vec<ScriptedEntry> = serde_json::from_str(text)?;
        Ok(ScriptedOracle {
            table: entries.into_iter().map(|e| (e.id, e.arm)).collect(),
        })
    }
}

impl Oracle for ScriptedOracle {
    fn evaluate(&self, id: &TemplateId, key: DrawKey) -> Result<Outcome> {
        let arm = self
            .table
            .get(id)
            .ok_or_else(|| Error::Backend(format!("scripted oracle has no arm {id}")))?;
        let seq = match key.stream {
            rng::stream::ORACLE => &arm.outcomes,
            rng::stream::REEVAL => &arm.reeval_outcomes,
            other => {
                return Err(Error::Backend(format!(
                    "scripted oracle cannot serve stream {other}"
                )));
            }
        };
        seq.get(key.index as usize).cloned().ok_or_else(|| {
            Error::Backend(format!(
                "scripted oracle exhausted for {id} at draw {}",
                key.index
            ))
        })
    }
}

#[derive(Serialize)]
struct WireRequest {
    request_id: u64,
    template: serde_json::Map<String, serde_json::Value>,
    instance_seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    request_id: u64,
    #[serde(default)]
    correct: Option<bool>,
    #[serde(default)]
    metrics: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    failure: Option<Failure>,
}

#[derive(Default)]
struct ExternalShared {
    responses: HashMap<u64, Outcome>,
    abandoned: HashSet<u64>,
    dead: Option<String>,
}

/// External worker process. Requests go to the child's stdin as
/// newline-delimited JSON `{request_id, template, instance_seed}`; replies
/// come back on stdout as `{request_id, correct | metrics, failure?}`.
/// Replies may arrive out of order, so callers can pipeline up to the
/// configured parallelism width. A request that exceeds the timeout
/// resolves to `failure=timeout`; a reply carrying neither a verdict nor a
/// failure resolves to `failure=generation_failure`; a corrupt stream or a
/// dead child is a hard backend error.
pub struct ExternalOracle {
    command: Vec<String>,
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    shared: Mutex<ExternalShared>,
    arrived: Condvar,
    timeout: Duration,
    next_request: AtomicU64,
    seed: u64,
}

impl ExternalOracle {
    fn spawn(command: &[String], timeout: Duration, seed: u64) -> Result<ExternalOracle> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("external oracle command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("failed to spawn {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let oracle = ExternalOracle {
            command: command.to_vec(),
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            shared: Mutex::new(ExternalShared::default()),
            arrived: Condvar::new(),
            timeout,
            next_request: AtomicU64::new(0),
            seed,
        };
        Ok(oracle)
    }

    /// Body of the reader thread: parses reply lines and wakes waiters.
    fn reader_loop(&self, stdout: std::process::ChildStdout) {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.mark_dead(format!("worker stdout read failed: {e}"));
                    return;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<WireResponse, _> = serde_json::from_str(&line);
            let response = match parsed {
                Ok(r) => r,
                Err(e) => {
                    // Without a request id there is nothing to attribute the
                    // line to; the stream is corrupt.
                    self.mark_dead(format!("unparseable worker reply {line:?}: {e}"));
                    return;
                }
            };
            let outcome = Self::outcome_from_response(response.correct, response.metrics, response.failure);
            let mut shared = self.shared.lock().unwrap();
            if !shared.abandoned.remove(&response.request_id) {
                shared.responses.insert(response.request_id, outcome);
            }
            drop(shared);
            self.arrived.notify_all();
        }
        self.mark_dead("worker closed its stdout".into());
    }

    fn outcome_from_response(
        correct: Option<bool>,
        metrics: Option<BTreeMap<String, f64>>,
        failure: Option<Failure>,
    ) -> Outcome {
        let metrics = metrics.unwrap_or_default();
        if metrics.values().any(|v| !v.is_finite()) {
            return Outcome::failed(Failure::GenerationFailure);
        }
        if correct.is_none() && metrics.is_empty() && failure.is_none() {
            return Outcome::failed(Failure::GenerationFailure);
        }
        Outcome {
            correct,
            metrics,
            failure,
        }
    }

    fn mark_dead(&self, reason: String) {
        let mut shared = self.shared.lock().unwrap();
        if shared.dead.is_none() {
            shared.dead = Some(reason);
        }
        drop(shared);
        self.arrived.notify_all();
    }
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Oracle for ExternalOracle {
    fn evaluate(&self, id: &TemplateId, key: DrawKey) -> Result<Outcome> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let instance_seed = derive_key(
            self.seed,
            &[key.stream, rng::fnv1a64(&id.canonical_bytes()), key.index],
        );
        let request = WireRequest {
            request_id,
            template: id.to_json_map(),
            instance_seed,
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        {
            let mut stdin = self.stdin.lock().unwrap();
            stdin
                .write_all(line.as_bytes())
                .and_then(|_| stdin.flush())
                .map_err(|e| Error::Backend(format!("worker stdin write failed: {e}")))?;
        }

        let deadline = Instant::now() + self.timeout;
        let mut shared = self.shared.lock().unwrap();
        loop {
            if let Some(outcome) = shared.responses.remove(&request_id) {
                return Ok(outcome);
            }
            if let Some(reason) = &shared.dead {
                return Err(Error::Backend(reason.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                shared.abandoned.insert(request_id);
                return Ok(Outcome::failed(Failure::Timeout));
            }
            let (guard, _) = self
                .arrived
                .wait_timeout(shared, deadline - now)
                .unwrap();
            shared = guard;
        }
    }
}

/// Spawns an external oracle together with its reader thread. The reader
/// parks on the worker's stdout and exits when the worker closes it.
pub fn spawn_external(
    command: &[String],
    timeout: Duration,
    seed: u64,
) -> Result<std::sync::Arc<ExternalOracle>> {
    let oracle = ExternalOracle::spawn(command, timeout, seed)?;
    let stdout = oracle
        .child
        .lock()
        .unwrap()
        .stdout
        .take()
        .expect("piped stdout");
    let oracle = std::sync::Arc::new(oracle);
    let for_reader = std::sync::Arc::clone(&oracle);
    std::thread::Builder::new()
        .name("oracle-reader".into())
        .spawn(move || for_reader.reader_loop(stdout))
        .map_err(|e| Error::Backend(format!("failed to start reader thread: {e}")))?;
    Ok(oracle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dag_id(depth: i64, children: i64) -> TemplateId {
        TemplateId {
            values: vec![
                ("depth".into(), ParamValue::Int(depth)),
                ("children".into(), ParamValue::Int(children)),
            ],
        }
    }

    #[test]
    fn error_rate_dispatch() {
        let id = dag_id(3, 2);
        let spec = UtilitySpec::ErrorRate;
        assert_eq!(utility(&spec, &Outcome::correct(), &id).unwrap(), 0.0);
        assert_eq!(utility(&spec, &Outcome::incorrect(), &id).unwrap(), 1.0);
        assert!(utility(&spec, &Outcome::default(), &id).is_err());
    }

    #[test]
    fn failures_count_as_correct() {
        let id = dag_id(3, 2);
        for failure in [
            Failure::Timeout,
            Failure::GenerationFailure,
            Failure::Unparseable,
        ] {
            let outcome = Outcome {
                correct: Some(false),
                failure: Some(failure),
                ..Outcome::default()
            };
            assert_eq!(utility(&UtilitySpec::ErrorRate, &outcome, &id).unwrap(), 0.0);
            let cwe = UtilitySpec::ComplexityWeightedError {
                depth_param: "depth".into(),
                children_param: "children".into(),
            };
            assert_eq!(utility(&cwe, &outcome, &id).unwrap(), 0.0);
            let custom = UtilitySpec::CustomExpression {
                expression: "missing_metric + 1".into(),
            };
            assert_eq!(utility(&custom, &outcome, &id).unwrap(), 0.0);
        }
    }

    #[test]
    fn complexity_weighting_matches_hand_arithmetic() {
        let cwe = UtilitySpec::ComplexityWeightedError {
            depth_param: "depth".into(),
            children_param: "children".into(),
        };
        // 1 / log2(2^10) = 0.1 and 1 / log2(2^2) = 0.5.
        assert_eq!(
            utility(&cwe, &Outcome::incorrect(), &dag_id(10, 2)).unwrap(),
            0.1
        );
        assert_eq!(
            utility(&cwe, &Outcome::incorrect(), &dag_id(2, 2)).unwrap(),
            0.5
        );
        assert_eq!(
            utility(&cwe, &Outcome::correct(), &dag_id(10, 2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn complexity_weighting_rejects_degenerate_shapes() {
        let cwe = UtilitySpec::ComplexityWeightedError {
            depth_param: "depth".into(),
            children_param: "children".into(),
        };
        assert!(utility(&cwe, &Outcome::incorrect(), &dag_id(10, 1)).is_err());
        assert!(utility(&cwe, &Outcome::incorrect(), &dag_id(0, 2)).is_err());
        let missing = TemplateId {
            values: vec![("depth".into(), ParamValue::Int(3))],
        };
        assert!(utility(&cwe, &Outcome::incorrect(), &missing).is_err());
    }

    #[test]
    fn complexity_weighting_never_exceeds_error_rate_on_the_grid() {
        let cwe = UtilitySpec::ComplexityWeightedError {
            depth_param: "depth".into(),
            children_param: "children".into(),
        };
        for depth in 2..=10 {
            for children in 2..=4 {
                for outcome in [Outcome::correct(), Outcome::incorrect()] {
                    let id = dag_id(depth, children);
                    let weighted = utility(&cwe, &outcome, &id).unwrap();
                    let plain = utility(&UtilitySpec::ErrorRate, &outcome, &id).unwrap();
                    assert!(weighted <= plain, "depth={depth} children={children}");
                    if plain == 0.0 {
                        assert_eq!(weighted, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn custom_expressions_clip_and_validate() {
        let id = dag_id(3, 2);
        let mut outcome = Outcome::correct();
        outcome.metrics.insert("acc".into(), 0.25);
        outcome.metrics.insert("latency".into(), 2.0);

        let spec = |s: &str| UtilitySpec::CustomExpression {
            expression: s.into(),
        };
        assert_eq!(utility(&spec("1 - acc"), &outcome, &id).unwrap(), 0.75);
        assert_eq!(utility(&spec("acc * 8"), &outcome, &id).unwrap(), 1.0);
        assert_eq!(utility(&spec("0 - acc"), &outcome, &id).unwrap(), 0.0);
        assert_eq!(utility(&spec("latency < 5"), &outcome, &id).unwrap(), 1.0);
        assert_eq!(utility(&spec("!correct"), &outcome, &id).unwrap(), 0.0);
        assert!(utility(&spec("acc / 0 + 1"), &outcome, &id).is_err());
        assert!(utility(&spec("nope + 1"), &outcome, &id).is_err());
    }

    #[test]
    fn synthetic_mean_one_never_answers_correctly() {
        let oracle = SyntheticOracle::new(3, MeanFn::Constant(1.0));
        let id = dag_id(2, 2);
        for i in 0..50 {
            let outcome = oracle.evaluate(&id, DrawKey::run(i)).unwrap();
            assert_eq!(outcome.correct, Some(false));
        }
    }

    #[test]
    fn synthetic_error_rate_concentrates_on_the_planted_mean() {
        let oracle = SyntheticOracle::new(5, MeanFn::Constant(0.3));
        let id = dag_id(2, 2);
        let mut errors = 0u32;
        for i in 0..10_000 {
            let outcome = oracle.evaluate(&id, DrawKey::run(i)).unwrap();
            errors += u32::from(outcome.correct == Some(false));
        }
        let rate = f64::from(errors) / 10_000.0;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
        assert_eq!(oracle.true_mean(&id), Some(0.3));
    }

    #[test]
    fn synthetic_draws_are_keyed_not_sequenced() {
        let oracle = SyntheticOracle::new(7, MeanFn::Constant(0.5));
        let id = dag_id(2, 2);
        // Same key replays; run and reeval streams are disjoint.
        let a = oracle.evaluate(&id, DrawKey::run(4)).unwrap();
        let b = oracle.evaluate(&id, DrawKey::run(4)).unwrap();
        assert_eq!(a, b);
        let runs: Vec<bool> = (0..64)
            .map(|i| oracle.evaluate(&id, DrawKey::run(i)).unwrap().correct.unwrap())
            .collect();
        let reevals: Vec<bool> = (0..64)
            .map(|i| {
                oracle
                    .evaluate(&id, DrawKey::reeval(i))
                    .unwrap()
                    .correct
                    .unwrap()
            })
            .collect();
        assert_ne!(runs, reevals);
    }

    #[test]
    fn planted_table_falls_back_to_default() {
        let hard = dag_id(2, 2);
        let easy = dag_id(3, 2);
        let mut planted = HashMap::new();
        planted.insert(hard.clone(), 0.95);
        let means = MeanFn::Table {
            default: 0.3,
            planted,
        };
        let oracle = SyntheticOracle::new(1, means);
        assert_eq!(oracle.true_mean(&hard), Some(0.95));
        assert_eq!(oracle.true_mean(&easy), Some(0.3));
    }

    #[test]
    fn scripted_replays_in_order_and_errors_on_exhaustion() {
        let id = dag_id(2, 2);
        let mut table = HashMap::new();
        table.insert(
            id.clone(),
            ScriptedArm {
                outcomes: vec![Outcome::correct(), Outcome::incorrect()],
                reeval_outcomes: vec![Outcome::failed(Failure::Timeout)],
            },
        );
        let oracle = ScriptedOracle::new(table);
        assert_eq!(
            oracle.evaluate(&id, DrawKey::run(0)).unwrap(),
            Outcome::correct()
        );
        assert_eq!(
            oracle.evaluate(&id, DrawKey::run(1)).unwrap(),
            Outcome::incorrect()
        );
        assert!(oracle.evaluate(&id, DrawKey::run(2)).is_err());
        assert_eq!(
            oracle.evaluate(&id, DrawKey::reeval(0)).unwrap(),
            Outcome::failed(Failure::Timeout)
        );
        let other = dag_id(9, 2);
        assert!(oracle.evaluate(&other, DrawKey::run(0)).is_err());
    }

    #[test]
    fn scripted_tables_load_from_json() {
        let text = r#"[
            {"id": {"values": [["depth", 2], ["children", 2]]},
             "outcomes": [{"correct": true}, {"failure": "timeout"}]}
        ]"#;
        let oracle = ScriptedOracle::from_json(text).unwrap();
        let id = dag_id(2, 2);
        assert_eq!(
            oracle.evaluate(&id, DrawKey::run(0)).unwrap(),
            Outcome::correct()
        );
        assert_eq!(
            oracle.evaluate(&id, DrawKey::run(1)).unwrap(),
            Outcome::failed(Failure::Timeout)
        );
    }
}
