//! Parameterized template spaces: validation, counting, uniform sampling,
//! and feature encoding.
//!
//! A space declares an ordered list of parameters (categorical, integer
//! range, continuous range) plus constraint expressions over them. Template
//! identifiers are full assignments, one value per parameter, satisfying
//! every constraint. Continuous parameters are sampled, never enumerated;
//! counting treats each as a single degree of freedom and keeps constraints
//! that mention them satisfiable via three-valued evaluation.

use std::collections::HashSet;
use std::fmt;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{Expr, Value};
use crate::{Error, Result};

/// Default attempt cap for rejection sampling under constraints.
pub const DEFAULT_REJECTION_CAP: u32 = 10_000;
/// Default cap on exhaustive enumeration of the discrete projection.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;
/// Feasibility of the discrete projection is only verified at validation
/// time when the unconstrained product is at most this large.
const FEASIBILITY_CHECK_CAP: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Categorical { levels: Vec<String> },
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl ParamSpec {
    /// Cardinality of the discrete projection: continuous params count 1.
    fn discrete_cardinality(&self) -> u64 {
        match &self.kind {
            ParamKind::Categorical { levels } => levels.len() as u64,
            ParamKind::Int { lo, hi } => (hi - lo) as u64 + 1,
            ParamKind::Float { .. } => 1,
        }
    }

    fn is_continuous(&self) -> bool {
        matches!(self.kind, ParamKind::Float { .. })
    }

    /// Width of this parameter's slice of the feature vector.
    fn feature_width(&self) -> usize {
        match &self.kind {
            ParamKind::Categorical { levels } => levels.len(),
            _ => 1,
        }
    }
}

/// Declarative space description as loaded from config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub constraints: Vec<String>,
}

/// One parameter value inside a template identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(OrderedFloat<f64>),
    Cat(String),
}

impl ParamValue {
    pub fn float(x: f64) -> ParamValue {
        ParamValue::Float(OrderedFloat(x))
    }

    fn to_expr_value(&self) -> Value {
        match self {
            ParamValue::Int(v) => Value::Num(*v as f64),
            ParamValue::Float(v) => Value::Num(v.0),
            ParamValue::Cat(s) => Value::Str(s.clone()),
        }
    }

    fn write_canonical(&self, out: &mut Vec<u8>) {
        match self {
            ParamValue::Int(v) => {
                out.push(b'i');
                out.extend_from_slice(v.to_string().as_bytes());
            }
            ParamValue::Float(v) => {
                out.push(b'f');
                out.extend_from_slice(&v.0.to_bits().to_le_bytes());
            }
            ParamValue::Cat(s) => {
                out.push(b'c');
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{}", v.0),
            ParamValue::Cat(s) => write!(f, "{s}"),
        }
    }
}

/// A full assignment, one `(name, value)` pair per parameter in declaration
/// order. Identifiers are compared and hashed by their full value tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateId {
    pub values: Vec<(String, ParamValue)>,
}

impl TemplateId {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    /// Stable byte form used to key per-arm RNG streams.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, value) in &self.values {
            out.extend_from_slice(name.as_bytes());
            out.push(b'=');
            value.write_canonical(&mut out);
            out.push(0x1e);
        }
        out
    }

    /// JSON object form (`name -> value`) used by the worker protocol.
    pub fn to_json_map(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut map = serde_json::Map::new();
        for (name, value) in &self.values {
            let v = match value {
                ParamValue::Int(x) => serde_json::json!(x),
                ParamValue::Float(x) => serde_json::json!(x.0),
                ParamValue::Cat(s) => serde_json::json!(s),
            };
            map.insert(name.clone(), v);
        }
        map
    }

    fn env(&self) -> impl Fn(&str) -> Option<Value> + '_ {
        move |name| self.get(name).map(|v| v.to_expr_value())
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{name}={value}")?;
        }
        Ok(())
    }
}

/// Returns every invariant violation in the spec; empty means valid.
pub fn validate_space(spec: &SpaceSpec) -> Vec<String> {
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for p in &spec.params {
        if !seen.insert(p.name.as_str()) {
            errors.push(format!("duplicate parameter name {:?}", p.name));
        }
        match &p.kind {
            ParamKind::Categorical { levels } => {
                if levels.is_empty() {
                    errors.push(format!("empty categorical {:?}", p.name));
                }
            }
            ParamKind::Int { lo, hi } => {
                if lo > hi {
                    errors.push(format!("inverted range {:?}: {lo} > {hi}", p.name));
                }
            }
            ParamKind::Float { lo, hi } => {
                if lo > hi {
                    errors.push(format!("inverted range {:?}: {lo} > {hi}", p.name));
                }
            }
        }
    }

    let mut parsed = Vec::new();
    for text in &spec.constraints {
        match Expr::parse(text) {
            Err(e) => errors.push(format!("constraint {text:?}: {e}")),
            Ok(expr) => {
                for name in expr.referenced_names() {
                    if !spec.params.iter().any(|p| p.name == name) {
                        errors.push(format!(
                            "constraint {text:?} references unknown name {name:?}"
                        ));
                    }
                }
                parsed.push((text, expr));
            }
        }
    }

    if !errors.is_empty() {
        return errors;
    }

    // Probe with the first value of every parameter to surface type errors
    // (string compared against number, arithmetic on a categorical).
    let probe: Vec<(String, ParamValue)> = spec
        .params
        .iter()
        .map(|p| {
            let v = match &p.kind {
                ParamKind::Categorical { levels } => ParamValue::Cat(levels[0].clone()),
                ParamKind::Int { lo, .. } => ParamValue::Int(*lo),
                ParamKind::Float { lo, .. } => ParamValue::float(*lo),
            };
            (p.name.clone(), v)
        })
        .collect();
    let probe_id = TemplateId { values: probe };
    for (text, expr) in &parsed {
        if let Err(e) = expr.satisfied(&probe_id.env()) {
            errors.push(format!("constraint {text:?}: {e}"));
        }
    }
    if !errors.is_empty() {
        return errors;
    }

    // Feasibility of the discrete projection is an invariant too, but only
    // checkable by enumeration; skip it for products too large to scan.
    let product: u64 = spec
        .params
        .iter()
        .map(ParamSpec::discrete_cardinality)
        .fold(1u64, |acc, c| acc.saturating_mul(c));
    if product <= FEASIBILITY_CHECK_CAP {
        let space = Space {
            spec: spec.clone(),
            constraints: parsed.into_iter().map(|(_, e)| e).collect(),
        };
        if let Ok(0) = space.count_discrete(FEASIBILITY_CHECK_CAP) {
            errors.push("no valid discrete assignment".into());
        }
    }
    errors
}

/// A validated space with compiled constraints.
#[derive(Debug, Clone)]
pub struct Space {
    spec: SpaceSpec,
    constraints: Vec<Expr>,
}

impl Space {
    pub fn new(spec: SpaceSpec) -> Result<Space> {
        let errors = validate_space(&spec);
        if !errors.is_empty() {
            return Err(Error::InvalidSpace(errors.join("; ")));
        }
        let constraints = spec
            .constraints
            .iter()
            .map(|text| Expr::parse(text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Space { spec, constraints })
    }

    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.spec.params
    }

    pub fn has_continuous(&self) -> bool {
        self.spec.params.iter().any(ParamSpec::is_continuous)
    }

    /// Unconstrained product of discrete cardinalities (continuous count 1).
    pub fn discrete_product(&self) -> u64 {
        self.spec
            .params
            .iter()
            .map(ParamSpec::discrete_cardinality)
            .fold(1u64, |acc, c| acc.saturating_mul(c))
    }

    fn satisfies(&self, id: &TemplateId) -> Result<bool> {
        for c in &self.constraints {
            if !c.satisfied(&id.env())? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// True when the partial assignment cannot be ruled out: constraints
    /// that depend on unbound (continuous) names stay satisfiable.
    fn satisfiable_partial(&self, id: &TemplateId) -> Result<bool> {
        for c in &self.constraints {
            if c.satisfied_partial(&id.env())? == Some(false) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Counts discrete assignments satisfying all constraints by exhaustive
    /// enumeration. Errors when the unconstrained product exceeds `cap`.
    pub fn count_discrete(&self, cap: u64) -> Result<u64> {
        let mut count = 0u64;
        self.walk_discrete(cap, &mut |_| {
            count += 1;
            Ok(())
        })?;
        Ok(count)
    }

    /// Enumerates the discrete projection in declaration order. Errors on
    /// spaces with continuous parameters, whose ids cannot be enumerated.
    pub fn enumerate_discrete(&self, cap: u64) -> Result<Vec<TemplateId>> {
        if self.has_continuous() {
            return Err(Error::InvalidSpace(
                "cannot enumerate a space with continuous parameters".into(),
            ));
        }
        let mut out = Vec::new();
        self.walk_discrete(cap, &mut |id| {
            out.push(id.clone());
            Ok(())
        })?;
        Ok(out)
    }

    fn walk_discrete(
        &self,
        cap: u64,
        visit: &mut dyn FnMut(&TemplateId) -> Result<()>,
    ) -> Result<()> {
        let product = self.discrete_product();
        if product > cap {
            return Err(Error::InvalidSpace(format!(
                "discrete product {product} exceeds enumeration cap {cap}"
            )));
        }
        // Mixed-radix counter over discrete params, declaration order; the
        // last parameter varies fastest. Continuous params stay unbound.
        let discrete: Vec<&ParamSpec> = self
            .spec
            .params
            .iter()
            .filter(|p| !p.is_continuous())
            .collect();
        let radices: Vec<u64> = discrete
            .iter()
            .map(|p| p.discrete_cardinality())
            .collect();
        let mut digits = vec![0u64; discrete.len()];
        loop {
            let values: Vec<(String, ParamValue)> = discrete
                .iter()
                .zip(&digits)
                .map(|(p, &d)| {
                    let v = match &p.kind {
                        ParamKind::Categorical { levels } => {
                            ParamValue::Cat(levels[d as usize].clone())
                        }
                        ParamKind::Int { lo, .. } => ParamValue::Int(lo + d as i64),
                        ParamKind::Float { .. } => unreachable!(),
                    };
                    (p.name.clone(), v)
                })
                .collect();
            let id = TemplateId { values };
            if self.satisfiable_partial(&id)? {
                visit(&id)?;
            }
            // Increment, carrying from the last digit.
            let mut pos = digits.len();
            loop {
                if pos == 0 {
                    return Ok(());
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < radices[pos] {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }

    /// Draws a constraint-satisfying id by rejection sampling. Each attempt
    /// draws every parameter independently; `attempt_cap` failures signal a
    /// near-infeasible constraint set.
    pub fn sample_uniform(
        &self,
        rng: &mut ChaCha8Rng,
        attempt_cap: u32,
    ) -> Result<TemplateId> {
        for _ in 0..attempt_cap {
            let values: Vec<(String, ParamValue)> = self
                .spec
                .params
                .iter()
                .map(|p| {
                    let v = match &p.kind {
                        ParamKind::Categorical { levels } => {
                            ParamValue::Cat(levels[rng.gen_range(0..levels.len())].clone())
                        }
                        ParamKind::Int { lo, hi } => {
                            ParamValue::Int(rng.gen_range(*lo..=*hi))
                        }
                        ParamKind::Float { lo, hi } => {
                            let x = if lo == hi { *lo } else { rng.gen_range(*lo..*hi) };
                            ParamValue::float(x)
                        }
                    };
                    (p.name.clone(), v)
                })
                .collect();
            let id = TemplateId { values };
            if self.satisfies(&id)? {
                return Ok(id);
            }
        }
        Err(Error::InvalidSpace(format!(
            "rejection sampling exceeded {attempt_cap} attempts; constraints nearly infeasible"
        )))
    }

    /// Total length of feature vectors for this space.
    pub fn feature_len(&self) -> usize {
        self.spec.params.iter().map(ParamSpec::feature_width).sum()
    }

    /// Deterministic numeric encoding: integers and continuous values pass
    /// through, categoricals one-hot.
    pub fn encode_features(&self, id: &TemplateId) -> Result<Vec<f64>> {
        if id.values.len() != self.spec.params.len() {
            return Err(Error::InvalidSpace(format!(
                "id {id} has {} values, space has {} params",
                id.values.len(),
                self.spec.params.len()
            )));
        }
        let mut out = Vec::with_capacity(self.feature_len());
        for (p, (name, value)) in self.spec.params.iter().zip(&id.values) {
            if *name != p.name {
                return Err(Error::InvalidSpace(format!(
                    "id {id} names {name:?} where space declares {:?}",
                    p.name
                )));
            }
            match (&p.kind, value) {
                (ParamKind::Categorical { levels }, ParamValue::Cat(s)) => {
                    let pos = levels.iter().position(|l| l == s).ok_or_else(|| {
                        Error::InvalidSpace(format!("{s:?} not a level of {name:?}"))
                    })?;
                    for i in 0..levels.len() {
                        out.push(if i == pos { 1.0 } else { 0.0 });
                    }
                }
                (ParamKind::Int { lo, hi }, ParamValue::Int(v)) => {
                    if v < lo || v > hi {
                        return Err(Error::InvalidSpace(format!(
                            "{v} outside {name:?} range [{lo}, {hi}]"
                        )));
                    }
                    out.push(*v as f64);
                }
                (ParamKind::Float { lo, hi }, ParamValue::Float(v)) => {
                    if v.0 < *lo || v.0 > *hi {
                        return Err(Error::InvalidSpace(format!(
                            "{v} outside {name:?} range [{lo}, {hi}]"
                        )));
                    }
                    out.push(v.0);
                }
                _ => {
                    return Err(Error::InvalidSpace(format!(
                        "value {value} has the wrong type for {name:?}"
                    )));
                }
            }
        }
        if !self.satisfies(id)? {
            return Err(Error::InvalidSpace(format!("id {id} violates constraints")));
        }
        Ok(out)
    }
}
