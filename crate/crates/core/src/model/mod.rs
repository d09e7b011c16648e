//! ODE patient model definitions.
//!
//! A model is a set of named states with initial values, named parameters
//! with defaults, drugs that dose into a target state, observables computed
//! from states and parameters, and one right-hand-side expression per state.
//! Models are written as TOML; see `surrogate.toml` for the shipped model.

pub mod expr;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expr::{Compiled, Expr, ParseError, Slot};

const SURROGATE_SRC: &str = include_str!("surrogate.toml");

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model file is not valid TOML: {0}")]
    Syntax(String),
    #[error("duplicate {kind} name '{name}'")]
    Duplicate { kind: &'static str, name: String },
    #[error("'t' is reserved for time and cannot name a state or parameter")]
    ReservedName,
    #[error("drug '{drug}' targets unknown state '{target}'")]
    UnknownTarget { drug: String, target: String },
    #[error("no right-hand side given for state '{0}'")]
    MissingRhs(String),
    #[error("right-hand side given for unknown state '{0}'")]
    UnknownRhs(String),
    #[error("{context}: {source}")]
    Expr { context: String, source: ParseError },
    #[error("{context}: unknown identifier '{name}'")]
    UnknownIdent { context: String, name: String },
    #[error("{context} must not reference time")]
    TimeInObservable { context: String },
    #[error("non-finite value for {0}")]
    NonFinite(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateDecl {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub init: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub default: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DrugDecl {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    /// State receiving each administered amount.
    pub target: String,
    /// Optional state that also receives every administered amount; used to
    /// track cumulative exposure without touching the pharmacology.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulator: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservableDecl {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub expr: String,
}

/// On-disk shape of a model definition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub name: String,
    pub states: Vec<StateDecl>,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    #[serde(default)]
    pub drugs: Vec<DrugDecl>,
    #[serde(default)]
    pub observables: Vec<ObservableDecl>,
    pub rhs: BTreeMap<String, String>,
}

/// A drug with its target resolved to state indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Drug {
    pub name: String,
    pub unit: String,
    pub target: usize,
    pub accumulator: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub name: String,
    pub unit: String,
    pub source: String,
    pub expr: Compiled,
}

/// A validated, compiled ODE patient model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDefinition {
    name: String,
    states: Vec<StateDecl>,
    params: Vec<ParamDecl>,
    drugs: Vec<Drug>,
    observables: Vec<Observable>,
    rhs: Vec<Compiled>,
    rhs_source: Vec<String>,
    fingerprint: u64,
}

fn check_unique<'a>(
    kind: &'static str,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ModelError::Duplicate { kind, name: n.to_string() });
        }
    }
    Ok(())
}

impl ModelDefinition {
    /// The shipped reduced hormonal surrogate (depot, pituitary response,
    /// LH-like and FSH-like hormones, cumulative dose tracker).
    pub fn surrogate() -> ModelDefinition {
        Self::from_toml_str(SURROGATE_SRC).expect("shipped surrogate model is valid")
    }

    /// Source text of the shipped surrogate model.
    pub fn surrogate_source() -> &'static str {
        SURROGATE_SRC
    }

    /// Resolves `surrogate` to the built-in model, anything else as a path.
    pub fn load(name_or_path: &str) -> Result<ModelDefinition, ModelError> {
        if name_or_path == "surrogate" {
            return Ok(Self::surrogate());
        }
        Self::from_file(name_or_path)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<ModelDefinition, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<ModelDefinition, ModelError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
        Self::from_model_file(file)
    }

    pub fn from_model_file(file: ModelFile) -> Result<ModelDefinition, ModelError> {
        check_unique(
            "state/parameter",
            file.states.iter().map(|s| s.name.as_str()).chain(file.params.iter().map(|p| p.name.as_str())),
        )?;
        check_unique("drug", file.drugs.iter().map(|d| d.name.as_str()))?;
        check_unique("observable", file.observables.iter().map(|o| o.name.as_str()))?;
        if file.states.iter().any(|s| s.name == "t") || file.params.iter().any(|p| p.name == "t") {
            return Err(ModelError::ReservedName);
        }
        for s in &file.states {
            if !s.init.is_finite() {
                return Err(ModelError::NonFinite(format!("initial value of '{}'", s.name)));
            }
        }
        for p in &file.params {
            if !p.default.is_finite() {
                return Err(ModelError::NonFinite(format!("default of '{}'", p.name)));
            }
        }

        let state_index = |n: &str| file.states.iter().position(|s| s.name == n);
        let param_index = |n: &str| file.params.iter().position(|p| p.name == n);
        let resolve = |n: &str| {
            if n == "t" {
                Some(Slot::Time)
            } else if let Some(i) = state_index(n) {
                Some(Slot::State(i))
            } else {
                param_index(n).map(Slot::Param)
            }
        };
        let compile = |context: String, src: &str| -> Result<Compiled, ModelError> {
            let parsed =
                Expr::parse(src).map_err(|source| ModelError::Expr { context: context.clone(), source })?;
            parsed.compile(&resolve).map_err(|name| ModelError::UnknownIdent { context, name })
        };

        let mut drugs = Vec::with_capacity(file.drugs.len());
        for d in &file.drugs {
            let target = state_index(&d.target)
                .ok_or_else(|| ModelError::UnknownTarget { drug: d.name.clone(), target: d.target.clone() })?;
            let accumulator = match &d.accumulator {
                None => None,
                Some(a) => Some(state_index(a).ok_or_else(|| ModelError::UnknownTarget {
                    drug: d.name.clone(),
                    target: a.clone(),
                })?),
            };
            drugs.push(Drug { name: d.name.clone(), unit: d.unit.clone(), target, accumulator });
        }

        let mut observables = Vec::with_capacity(file.observables.len());
        for o in &file.observables {
            let context = format!("observable '{}'", o.name);
            let expr = compile(context.clone(), &o.expr)?;
            if Expr::parse(&o.expr).map(|e| e.identifiers().contains(&"t")).unwrap_or(false) {
                return Err(ModelError::TimeInObservable { context });
            }
            observables.push(Observable { name: o.name.clone(), unit: o.unit.clone(), source: o.expr.clone(), expr });
        }

        for key in file.rhs.keys() {
            if state_index(key).is_none() {
                return Err(ModelError::UnknownRhs(key.clone()));
            }
        }
        let mut rhs = Vec::with_capacity(file.states.len());
        let mut rhs_source = Vec::with_capacity(file.states.len());
        for s in &file.states {
            let src = file.rhs.get(&s.name).ok_or_else(|| ModelError::MissingRhs(s.name.clone()))?;
            rhs.push(compile(format!("rhs of '{}'", s.name), src)?);
            rhs_source.push(src.clone());
        }

        let mut model = ModelDefinition {
            name: file.name,
            states: file.states,
            params: file.params,
            drugs,
            observables,
            rhs,
            rhs_source,
            fingerprint: 0,
        };
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &[StateDecl] {
        &self.states
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn drugs(&self) -> &[Drug] {
        &self.drugs
    }

    pub fn observables(&self) -> &[Observable] {
        &self.observables
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn drug_index(&self, name: &str) -> Option<usize> {
        self.drugs.iter().position(|d| d.name == name)
    }

    pub fn observable_index(&self, name: &str) -> Option<usize> {
        self.observables.iter().position(|o| o.name == name)
    }

    pub fn default_params(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.default).collect()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.init).collect()
    }

    /// Structural hash of the model; identical definitions hash identically.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    #[inline]
    pub fn derivatives(&self, t: f64, states: &[f64], params: &[f64], out: &mut [f64]) {
        for (slot, f) in out.iter_mut().zip(&self.rhs) {
            *slot = f.eval(t, states, params);
        }
    }

    /// Observable values for one state row. Non-finite inputs propagate as
    /// non-finite outputs.
    pub fn evaluate_observables(&self, states: &[f64], params: &[f64]) -> Vec<f64> {
        self.observables.iter().map(|o| o.expr.eval(0.0, states, params)).collect()
    }

    /// States whose trajectory can change when `drug` is administered: the
    /// drug's target and accumulator plus everything downstream of them in
    /// the right-hand-side dependency graph.
    pub fn influenced_states(&self, drug: usize) -> Vec<bool> {
        let n = self.states.len();
        // readers[s] = states whose rhs reads s
        let mut readers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (u, f) in self.rhs.iter().enumerate() {
            let mut refs = Vec::new();
            f.state_refs(&mut refs);
            for s in refs {
                readers[s].push(u);
            }
        }
        let mut reached = vec![false; n];
        let d = &self.drugs[drug];
        let mut stack: Vec<usize> = std::iter::once(d.target).chain(d.accumulator).collect();
        while let Some(s) = stack.pop() {
            if reached[s] {
                continue;
            }
            reached[s] = true;
            stack.extend(readers[s].iter().copied().filter(|u| !reached[*u]));
        }
        reached
    }

    /// Whether observable `obs` can be affected by administering `drug`.
    pub fn drug_influences_observable(&self, drug: usize, obs: usize) -> bool {
        let reached = self.influenced_states(drug);
        let mut refs = Vec::new();
        self.observables[obs].expr.state_refs(&mut refs);
        refs.into_iter().any(|s| reached[s])
    }

    /// Reconstructs the on-disk form.
    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            name: self.name.clone(),
            states: self.states.clone(),
            params: self.params.clone(),
            drugs: self
                .drugs
                .iter()
                .map(|d| DrugDecl {
                    name: d.name.clone(),
                    unit: d.unit.clone(),
                    target: self.states[d.target].name.clone(),
                    accumulator: d.accumulator.map(|a| self.states[a].name.clone()),
                })
                .collect(),
            observables: self
                .observables
                .iter()
                .map(|o| ObservableDecl { name: o.name.clone(), unit: o.unit.clone(), expr: o.source.clone() })
                .collect(),
            rhs: self
                .states
                .iter()
                .zip(&self.rhs_source)
                .map(|(s, src)| (s.name.clone(), src.clone()))
                .collect(),
        }
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_str(&self.name);
        for s in &self.states {
            h.write_str(&s.name);
            h.write_u64(s.init.to_bits());
        }
        for p in &self.params {
            h.write_str(&p.name);
        }
        for d in &self.drugs {
            h.write_str(&d.name);
            h.write_u64(d.target as u64);
            h.write_u64(d.accumulator.map_or(u64::MAX, |a| a as u64));
        }
        for src in &self.rhs_source {
            h.write_str(src);
        }
        for o in &self.observables {
            h.write_str(&o.name);
            h.write_str(&o.source);
        }
        h.finish()
    }
}

/// FNV-1a, used for stable fingerprints that must not vary across builds.
#[derive(Debug, Clone)]
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn write_str(&mut self, s: &str) {
        self.write(s.as_bytes());
        self.write(&[0xff]);
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_STATE: &str = r#"
        name = "osc"
        states = [ { name = "x", init = 1.0 }, { name = "y", init = 0.0 } ]
        params = [ { name = "p", default = 0.5 } ]
        observables = [
            { name = "sum", expr = "x + y" },
            { name = "scaled", expr = "2*x*p" },
        ]
        [rhs]
        x = "y"
        y = "-x"
    "#;

    #[test]
    fn parses_and_evaluates_observables() {
        let m = ModelDefinition::from_toml_str(TWO_STATE).unwrap();
        assert_eq!(m.state_count(), 2);
        assert_eq!(m.evaluate_observables(&[1.0, 2.0], &[0.5]), vec![3.0, 1.0]);
        assert_eq!(m.evaluate_observables(&[4.0, 0.0], &[0.5])[1], 4.0);
        let mut d = [0.0; 2];
        m.derivatives(0.0, &[1.0, 2.0], &[0.5], &mut d);
        assert_eq!(d, [2.0, -1.0]);
    }

    #[test]
    fn rejects_bad_models() {
        let dup = TWO_STATE.replace(r#"{ name = "p", default"#, r#"{ name = "x", default"#);
        assert!(matches!(ModelDefinition::from_toml_str(&dup), Err(ModelError::Duplicate { .. })));

        let unknown = TWO_STATE.replace(r#"x = "y""#, r#"x = "z""#);
        assert!(matches!(ModelDefinition::from_toml_str(&unknown), Err(ModelError::UnknownIdent { .. })));

        let missing = TWO_STATE.replace(r#"y = "-x""#, "");
        assert!(matches!(ModelDefinition::from_toml_str(&missing), Err(ModelError::MissingRhs(_))));

        let drug = r#"
            name = "bad"
            states = [ { name = "x", init = 0.0 } ]
            drugs = [ { name = "d", target = "nope" } ]
            [rhs]
            x = "-x"
        "#;
        assert!(matches!(ModelDefinition::from_toml_str(drug), Err(ModelError::UnknownTarget { .. })));

        let timed = TWO_STATE.replace(r#"expr = "x + y""#, r#"expr = "x + t""#);
        assert!(matches!(ModelDefinition::from_toml_str(&timed), Err(ModelError::TimeInObservable { .. })));
    }

    #[test]
    fn surrogate_is_well_formed() {
        let m = ModelDefinition::surrogate();
        assert_eq!(m.name(), "surrogate");
        for name in ["D", "R", "L", "F", "C"] {
            assert!(m.state_index(name).is_some(), "{name}");
        }
        assert_eq!(m.drugs().len(), 1);
        let l = m.observable_index("L").unwrap();
        let f = m.observable_index("F").unwrap();
        assert!(m.drug_influences_observable(0, l));
        assert!(m.drug_influences_observable(0, f));
    }

    #[test]
    fn file_round_trip_preserves_fingerprint() {
        let m = ModelDefinition::surrogate();
        let text = toml::to_string(&m.to_model_file()).unwrap();
        let back = ModelDefinition::from_toml_str(&text).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back, m);
    }

    #[test]
    fn influence_follows_dependencies() {
        let src = r#"
            name = "split"
            states = [ { name = "a", init = 0.0 }, { name = "b", init = 0.0 }, { name = "c", init = 1.0 } ]
            drugs = [ { name = "d", target = "a" } ]
            observables = [ { name = "B", expr = "b" }, { name = "C", expr = "c" } ]
            [rhs]
            a = "-a"
            b = "a - b"
            c = "-c"
        "#;
        let m = ModelDefinition::from_toml_str(src).unwrap();
        assert_eq!(m.influenced_states(0), vec![true, true, false]);
        assert!(m.drug_influences_observable(0, 0));
        assert!(!m.drug_influences_observable(0, 1));
    }
}
