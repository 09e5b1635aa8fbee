//! Named synthetic environments with planted ground truth, for acceptance
//! runs and benchmarking against known means.

use rand::seq::SliceRandom;

use crate::oracle::MeanFn;
use crate::rng::{derive_rng, stream};
use crate::space::{ParamKind, ParamSpec, ParamValue, Space, SpaceSpec, TemplateId};
use crate::{Error, Result};

/// A space plus a ground-truth mean for every template in it.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub space: SpaceSpec,
    pub means: MeanFn,
    /// The planted high-mean templates, hardest tier first.
    pub planted: Vec<TemplateId>,
}

fn int(name: &str, lo: i64, hi: i64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Int { lo, hi },
    }
}

fn cat(name: &str, levels: &[&str]) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Categorical {
            levels: levels.iter().map(|s| (*s).into()).collect(),
        },
    }
}

fn grid_space() -> SpaceSpec {
    SpaceSpec {
        params: vec![int("x", 0, 39), int("y", 0, 24)],
        constraints: vec![],
    }
}

fn planted_table(
    space: &SpaceSpec,
    seed: u64,
    tiers: &[(usize, f64)],
    default: f64,
) -> Result<(MeanFn, Vec<TemplateId>)> {
    let space = Space::new(space.clone())?;
    let mut ids = space.enumerate_discrete(crate::space::DEFAULT_ENUMERATION_CAP)?;
    let mut rng = derive_rng(seed, &[stream::PLANT]);
    ids.shuffle(&mut rng);
    let mut planted = std::collections::HashMap::new();
    let mut hard = Vec::new();
    let mut at = 0;
    for &(count, mean) in tiers {
        for id in &ids[at..at + count] {
            planted.insert(id.clone(), mean);
        }
        hard.extend_from_slice(&ids[at..at + count]);
        at += count;
    }
    Ok((MeanFn::Table { default, planted }, hard))
}

/// 1,000 templates; ten planted at mean 0.95, the rest at 0.30. Positions
/// are a seeded shuffle, so every seed gets its own needle layout.
pub fn needles(seed: u64) -> Result<Preset> {
    let space = grid_space();
    let (means, planted) = planted_table(&space, seed, &[(10, 0.95)], 0.30)?;
    Ok(Preset {
        name: "needles".into(),
        space,
        means,
        planted,
    })
}

/// Same 1,000-template grid with a middle tier: ten arms at 0.95, ten at
/// 0.85, the remaining 980 at 0.30. Ground for certification studies where
/// a fixed threshold of 0.9 must separate the tiers.
pub fn cert_tiered(seed: u64) -> Result<Preset> {
    let space = grid_space();
    let (means, planted) = planted_table(&space, seed, &[(10, 0.95), (10, 0.85)], 0.30)?;
    Ok(Preset {
        name: "cert_tiered".into(),
        space,
        means,
        planted,
    })
}

/// Which planted region of the two-cluster preset a template sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cluster {
    A,
    B,
}

/// Classifies a template against the two planted blobs; `None` for the
/// easy background.
pub fn two_cluster_side(id: &TemplateId) -> Option<Cluster> {
    let cluster = match id.get("cluster")? {
        ParamValue::Cat(s) => s.as_str(),
        _ => return None,
    };
    let x = match id.get("x")? {
        ParamValue::Int(v) => *v,
        _ => return None,
    };
    let y = match id.get("y")? {
        ParamValue::Int(v) => *v,
        _ => return None,
    };
    match cluster {
        "a" if (0..=3).contains(&x) && (0..=3).contains(&y) => Some(Cluster::A),
        "b" if (10..=12).contains(&x) && y == 4 => Some(Cluster::B),
        _ => None,
    }
}

/// 130 templates in two disjoint regions: a 16-cell blob at mean 0.95 in
/// cluster `a`, a 3-cell blob at 0.91 in cluster `b`, background 0.10.
/// Blob positions are fixed (region coherence is the point); the seed only
/// drives the run itself.
pub fn two_cluster() -> Result<Preset> {
    let space = SpaceSpec {
        params: vec![cat("cluster", &["a", "b"]), int("x", 0, 12), int("y", 0, 4)],
        constraints: vec![],
    };
    let concrete = Space::new(space.clone())?;
    let ids = concrete.enumerate_discrete(crate::space::DEFAULT_ENUMERATION_CAP)?;
    let mut planted = std::collections::HashMap::new();
    let mut hard = Vec::new();
    for id in ids {
        let mean = match two_cluster_side(&id) {
            Some(Cluster::A) => 0.95,
            Some(Cluster::B) => 0.91,
            None => continue,
        };
        planted.insert(id.clone(), mean);
        hard.push(id);
    }
    Ok(Preset {
        name: "two_cluster".into(),
        space,
        means: MeanFn::Table {
            default: 0.10,
            planted,
        },
        planted: hard,
    })
}

/// Structured-template space shaped like a dynamic graph benchmark: task
/// family, tree depth, branching, link/perturbation counts, and traversal
/// order (6,480 templates). Accuracy decays with structural complexity.
/// Constraints stay config-side; the preset only fixes the space and means.
pub fn dyval_shaped() -> Result<Preset> {
    let space = SpaceSpec {
        params: vec![
            cat(
                "task",
                &["arithmetic", "boolean", "deduction", "abduction", "sorting"],
            ),
            int("depth", 2, 10),
            int("children", 2, 4),
            int("extra_links", 0, 3),
            int("perturbations", 0, 3),
            cat("order", &["topological", "reversed", "random"]),
        ],
        constraints: vec![],
    };
    let concrete = Space::new(space.clone())?;
    let ids = concrete.enumerate_discrete(crate::space::DEFAULT_ENUMERATION_CAP)?;
    let mut planted = std::collections::HashMap::new();
    for id in ids {
        planted.insert(id.clone(), dyval_mean(&id));
    }
    Ok(Preset {
        name: "dyval_shaped".into(),
        space,
        means: MeanFn::Table {
            default: 0.5,
            planted,
        },
        planted: Vec::new(),
    })
}

fn dyval_mean(id: &TemplateId) -> f64 {
    let as_i = |name: &str| match id.get(name) {
        Some(ParamValue::Int(v)) => *v as f64,
        _ => 0.0,
    };
    let depth = as_i("depth");
    let children = as_i("children");
    let links = as_i("extra_links");
    let perturbations = as_i("perturbations");
    (0.97 - 0.06 * (depth - 2.0) - 0.08 * (children - 2.0) - 0.02 * links
        - 0.04 * perturbations)
        .clamp(0.03, 0.97)
}

pub fn by_name(name: &str, seed: u64) -> Result<Preset> {
    match name {
        "needles" => needles(seed),
        "cert_tiered" => cert_tiered(seed),
        "two_cluster" => two_cluster(),
        "dyval_shaped" => dyval_shaped(),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected needles, cert_tiered, two_cluster, or dyval_shaped"
        ))),
    }
}
