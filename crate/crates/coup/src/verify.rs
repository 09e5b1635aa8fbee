//! Seeded verification suites: interval coverage under the live allocation
//! rule, frozen-bound conservativeness, and simulated-world containment.
//! The CLI's verify verb and the acceptance tests drive the same fixtures,
//! only at different seed counts.

use std::collections::HashMap;

use crate::batching::{verify_g1, verify_g2, G1Report, G2Report};
use crate::bounds::{compute_bounds, ArmStats};
use crate::config::{BackendSpec, RunConfig};
use crate::optimizer::{
    init, update_control_quantities, verify_coverage, CoupParams, CoverageReport, RunState,
};
use crate::oracle::MeanFn;
use crate::runner::run;
use crate::space::{ParamKind, ParamSpec, ParamValue, Space, SpaceSpec, TemplateId};
use crate::Result;

pub const COVERAGE_ARMS: u64 = 20;
pub const COVERAGE_DRAWS: u64 = 2_000;

fn no_surrogate_defaults() -> CoupParams {
    let mut params = RunConfig::default().coup_params();
    params.surrogate = None;
    params
}

/// Interval coverage on a fixed pool of Bernoulli arms with means spread
/// across the unit interval, sampled by the sequential leader/challenger
/// rule for the full draw budget.
pub fn coverage_suite(n_seeds: u64) -> Result<CoverageReport> {
    let space = Space::new(SpaceSpec {
        params: vec![ParamSpec {
            name: "x".into(),
            kind: ParamKind::Int {
                lo: 0,
                hi: COVERAGE_ARMS as i64 - 1,
            },
        }],
        constraints: vec![],
    })?;
    let mut planted = HashMap::new();
    for i in 0..COVERAGE_ARMS {
        let id = TemplateId {
            values: vec![("x".into(), ParamValue::Int(i as i64))],
        };
        planted.insert(id, 0.05 + 0.9 * i as f64 / (COVERAGE_ARMS - 1) as f64);
    }
    let means = MeanFn::Table {
        default: 0.3,
        planted,
    };
    let mut params = no_surrogate_defaults();
    params.initial_pool = COVERAGE_ARMS;
    params.expansion_c = 0.0;
    let seeds: Vec<u64> = (0..n_seeds).collect();
    verify_coverage(&space, &means, &params, COVERAGE_DRAWS, &seeds)
}

/// A finished short run on the needles preset, the shared base state the
/// conservativeness and containment suites resample from.
pub struct WarmedRun {
    pub state: RunState,
    pub space: Space,
    pub true_means: Vec<f64>,
    pub params: CoupParams,
}

pub fn warmed_needles(warm_budget: u64) -> Result<WarmedRun> {
    let mut config = RunConfig {
        seed: 7,
        budget_total: warm_budget,
        backend: BackendSpec::Preset {
            name: "needles".into(),
        },
        ..RunConfig::default()
    };
    config.surrogate.enabled = false;
    let env = config.resolve()?;
    let out = run(&config, &env.space, &env.oracle, None)?;
    let means = env.means.expect("preset backends carry ground truth");
    let true_means = out.state.arms.iter().map(|a| means.mean(&a.id)).collect();
    Ok(WarmedRun {
        state: out.state,
        space: env.space,
        true_means,
        params: config.coup_params(),
    })
}

pub fn g1_suite(n_seeds: u64) -> Result<G1Report> {
    let w = warmed_needles(2_000)?;
    let seeds: Vec<u64> = (0..n_seeds).collect();
    verify_g1(&w.state, &w.true_means, &w.params, 20, &seeds)
}

/// Builds a fully-specified pool over a line space: arm x gets the given
/// (mean, sample count) and bounds computed at the final pool size. The
/// containment suite and hand-traced instances start from states like this.
pub fn fixture_state(stats: &[(f64, u64)]) -> Result<(RunState, Space, CoupParams)> {
    let space = Space::new(SpaceSpec {
        params: vec![ParamSpec {
            name: "x".into(),
            kind: ParamKind::Int {
                lo: 0,
                hi: stats.len() as i64 - 1,
            },
        }],
        constraints: vec![],
    })?;
    let mut params = no_surrogate_defaults();
    params.initial_pool = 0;
    params.expansion_c = 0.0;
    let mut state = init(&space, &params, 0, 1_000_000)?;
    for (x, &(mean, m)) in stats.iter().enumerate() {
        let id = TemplateId {
            values: vec![("x".into(), ParamValue::Int(x as i64))],
        };
        let features = space.encode_features(&id)?;
        state.push_arm(id, features, 0);
        let arm = state.arms.last_mut().expect("just pushed");
        arm.stats = ArmStats {
            m,
            total: mean * m as f64,
        };
    }
    let pool = state.pool_size();
    state.last_refresh_pool_size = pool;
    for arm in &mut state.arms {
        arm.bounds = compute_bounds(&arm.stats, params.bounds_delta(), pool);
    }
    update_control_quantities(&mut state, &params);
    Ok((state, space, params))
}

/// Arms for the containment suite: distinct prime sample counts make
/// resampled empirical means collide only at exactly 0 or 1, and the unique
/// top mean keeps the sequential world's leader fixed, which is the regime
/// the frozen-simulation containment argument covers.
pub fn containment_fixture() -> Vec<(f64, u64)> {
    let primes = [53u64, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103];
    primes
        .iter()
        .enumerate()
        .map(|(i, &m)| (0.20 + 0.05 * i as f64, m))
        .collect()
}

pub fn g2_suite(n_seeds: u64) -> Result<G2Report> {
    let stats = containment_fixture();
    let (state, space, params) = fixture_state(&stats)?;
    let true_means: Vec<f64> = stats.iter().map(|&(mean, _)| mean).collect();
    let seeds: Vec<u64> = (0..n_seeds).collect();
    verify_g2(&state, &space, &params, None, &true_means, 40, &seeds)
}
