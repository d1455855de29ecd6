//! Adam with named parameter groups and the exponential learning-rate decay
//! used by every training stage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, decode_f64, encode_f64, parse_json};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// First/second moment accumulators for every parameter group plus the shared
/// step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub groups: BTreeMap<String, Moments>,
}

/// A named parameter slice paired with its gradient.
pub struct ParamGroup<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

impl<'a> ParamGroup<'a> {
    pub fn new(name: &'a str, params: &'a mut [f64], grads: &'a [f64]) -> Self {
        Self { name, params, grads }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based step index used for bias correction.
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, step: u64, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "parameter/gradient length mismatch: {} vs {}",
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite gradient; step rejected".into()));
    }
    if moments.m.len() != params.len() {
        *moments = Moments::zeros(params.len());
    }
    let step = step.max(1) as i32;
    let c1 = 1.0 - BETA1.powi(step);
    let c2 = 1.0 - BETA2.powi(step);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

impl OptimizerState {
    /// Updates all groups with one shared step. Any non-finite gradient
    /// rejects the whole step and leaves parameters and moments untouched.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) -> Result<()> {
        for g in groups.iter() {
            if g.params.len() != g.grads.len() {
                return Err(Error::Contract(format!("group {}: shape mismatch", g.name)));
            }
            if let Some(bad) = g.grads.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in group {} at {bad}; step rejected",
                    g.name
                )));
            }
        }
        self.step += 1;
        for g in groups.iter_mut() {
            let moments = self
                .groups
                .entry(g.name.to_string())
                .or_insert_with(|| Moments::zeros(g.params.len()));
            adam_update(g.params, g.grads, moments, self.step, lr)?;
        }
        Ok(())
    }
}

/// `lr_i * (lr_f / lr_i)^(step / total)`.
pub fn lr_schedule(step: usize, total: usize, lr_initial: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_initial;
    }
    let t = (step.min(total)) as f64 / total as f64;
    lr_initial * (lr_final / lr_initial).powf(t)
}

pub const OPTIMIZER_SCHEMA: &str = "supergseg-opt/1";

#[derive(Serialize, Deserialize)]
struct MomentsDoc {
    len: usize,
    m: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerDoc {
    schema: String,
    step: u64,
    groups: BTreeMap<String, MomentsDoc>,
}

/// Moments are stored in f64 so that a resumed run continues the exact
/// trajectory.
pub fn optimizer_to_json(state: &OptimizerState) -> String {
    let groups = state
        .groups
        .iter()
        .map(|(name, mo)| (name.clone(), MomentsDoc { len: mo.m.len(), m: encode_f64(&mo.m), v: encode_f64(&mo.v) }))
        .collect();
    let doc = OptimizerDoc { schema: OPTIMIZER_SCHEMA.into(), step: state.step, groups };
    serde_json::to_string(&doc).expect("optimizer state serializes")
}

pub fn optimizer_from_json(text: &str) -> Result<OptimizerState> {
    let doc: OptimizerDoc = parse_json(text)?;
    if doc.schema != OPTIMIZER_SCHEMA {
        return Err(Error::parse(codec::value_offset(text, &doc.schema), format!("unknown schema '{}'", doc.schema)));
    }
    let mut groups = BTreeMap::new();
    for (name, d) in doc.groups {
        let m = decode_f64(text, "m", &d.m, Some(d.len))?;
        let v = decode_f64(text, "v", &d.v, Some(d.len))?;
        groups.insert(name, Moments { m, v });
    }
    Ok(OptimizerState { step: doc.step, groups })
}

pub fn save_optimizer(state: &OptimizerState, path: &Path) -> Result<()> {
    std::fs::write(path, optimizer_to_json(state))?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<OptimizerState> {
    optimizer_from_json(&std::fs::read_to_string(path)?)
}
