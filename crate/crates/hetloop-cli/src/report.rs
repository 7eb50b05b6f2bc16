//! Consolidated report over whatever stage artifacts an output directory holds.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::Stage;
use crate::pipeline::{
    load_artifact, EvolveArtifact, LoopArtifact, Manifest, MelnikovArtifact, PipelineError, ReduceArtifact,
    SweepArtifact,
};

pub const SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const FORMAT: &str = "hetloop-report-v1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no stage artifacts in {0}")]
    Empty(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub json: Value,
    pub constants_csv: String,
    pub gates_csv: String,
    pub all_gates_pass: bool,
}

pub fn bundled_schema() -> Value {
    serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON")
}

pub fn emit_report(out: &Path) -> Result<ReportBundle, ReportError> {
    let empty = || ReportError::Empty(out.display().to_string());
    let manifest = Manifest::load(out)?.ok_or_else(empty)?;
    let present: Vec<_> = manifest
        .stages
        .values()
        .filter(|r| r.stage != Stage::Report && r.succeeded())
        .filter(|r| r.data_file().is_some_and(|f| out.join(&f.path).exists()))
        .collect();
    if present.is_empty() {
        return Err(empty());
    }

    let mut cert = BTreeMap::new();
    let mut constants = Map::new();
    let mut classification = Map::new();
    let mut gates = Vec::new();
    let mut files = Vec::new();
    let mut flat: Vec<(String, f64)> = Vec::new();
    let mut all_pass = true;
    for r in &present {
        cert.insert(format!("{}_gates", r.stage.name()), r.gates_pass());
        all_pass &= r.gates_pass();
        for g in &r.gates {
            gates.push(json!({
                "stage": r.stage.name(),
                "name": g.name,
                "value": g.value,
                "limit": g.limit,
                "relation": g.relation,
                "pass": g.pass,
            }));
        }
        for f in &r.outputs {
            files.push(json!({ "path": f.path, "sha256": f.sha256, "bytes": f.bytes }));
        }
    }

    if let Some(l) = load_artifact::<LoopArtifact>(out, Stage::Loop) {
        let p = l.locus.h1.params;
        put(&mut flat, &mut constants, "a", l.a);
        put(&mut flat, &mut constants, "epsilon", l.locus.epsilon);
        put(&mut flat, &mut constants, "gamma0", l.locus.gamma0);
        put(&mut flat, &mut constants, "c_star", l.locus.c_star);
        let mut alpha = Map::new();
        put(&mut flat, &mut alpha, "alpha.alpha_1s", l.rates[0][0]);
        put(&mut flat, &mut alpha, "alpha.alpha_1u", l.rates[0][1]);
        put(&mut flat, &mut alpha, "alpha.alpha_2s", l.rates[1][0]);
        put(&mut flat, &mut alpha, "alpha.alpha_2u", l.rates[1][1]);
        constants.insert("alpha".into(), Value::Object(alpha));
        classification.insert("case_tag".into(), json!(l.case_tag));
        classification.insert("gray_zone".into(), json!(l.gray_zone));
        cert.insert(
            "loop_converged".into(),
            l.locus.splitting_residuals.iter().all(|r| *r <= 1e-8) && p.validate().is_ok(),
        );
    }
    if let Some(m) = load_artifact::<MelnikovArtifact>(out, Stage::Melnikov) {
        put(&mut flat, &mut constants, "m1", m.data.m[0]);
        put(&mut flat, &mut constants, "m2", m.data.m[1]);
        put(&mut flat, &mut constants, "det_n", m.data.det_n);
        cert.insert("melnikov_signs".into(), m.data.m[0] < 0.0 && m.data.m[1] < 0.0);
    }
    if let Some(r) = load_artifact::<ReduceArtifact>(out, Stage::Reduce) {
        let rows: Vec<Value> = r
            .entries
            .iter()
            .map(|e| {
                let c = &e.curve;
                flat.push((format!("reduced.T{}.b", c.period), c.quadratic_bd.0));
                flat.push((format!("reduced.T{}.d", c.period), c.quadratic_bd.1));
                json!({
                    "period": c.period,
                    "b": c.quadratic_bd.0,
                    "d": c.quadratic_bd.1,
                    "b_closed_form": c.analytic_bd.0,
                    "d_closed_form": c.analytic_bd.1,
                    "interface_eigenvalue": c.interface_eigenvalue,
                })
            })
            .collect();
        constants.insert("reduced".into(), Value::Array(rows));
    }
    if let Some(s) = load_artifact::<SweepArtifact>(out, Stage::Sweep) {
        let mut stable = true;
        let rows: Vec<Value> = s
            .entries
            .iter()
            .map(|e| {
                let c = &e.sweep.certification;
                let (b, d) = e.sweep.fit.map(|f| (f.b, f.d)).unwrap_or((0.0, 0.0));
                stable &= c.cond1 && c.cond2 && c.cond3 && e.sweep.fit.is_some() && d > 0.0 && c.theta > 0.0;
                let t = e.wave.period;
                flat.push((format!("tangency.T{t}.b"), b));
                flat.push((format!("tangency.T{t}.d"), d));
                flat.push((format!("tangency.T{t}.theta"), c.theta));
                json!({
                    "period": t,
                    "k": e.sweep.k,
                    "b": b,
                    "d": d,
                    "theta": c.theta,
                    "max_abs_lambda_c": e.sweep.max_critical(),
                    "quadratic_error": e.cross.quadratic_error,
                    "closed_form_error": e.cross.closed_error,
                })
            })
            .collect();
        constants.insert("tangency".into(), Value::Array(rows));
        put(&mut flat, &mut constants, "scaling_slope", s.scaling.slope);
        cert.insert("diffusive_stability".into(), stable);
    }
    if let Some(e) = load_artifact::<EvolveArtifact>(out, Stage::Evolve) {
        let mut decay = Map::new();
        put(&mut flat, &mut decay, "decay.vtilde_l2", e.decay.vtilde_l2.exponent);
        for (name, fit) in [
            ("decay.v_l2", e.decay.v_l2),
            ("decay.phi_l2", e.decay.phi_l2),
            ("decay.phi_x_l2", e.decay.phi_x_l2),
            ("decay.phi_t_l2", e.decay.phi_t_l2),
        ] {
            if let Some(f) = fit {
                put(&mut flat, &mut decay, name, f.exponent);
            }
        }
        constants.insert("decay".into(), Value::Object(decay));
        put(&mut flat, &mut constants, "damping_constant", e.damping.c_uniform);
        cert.insert("damping".into(), e.damping.certified);
        let v_ok = e.decay.v_l2.is_some_and(|v| v.exponent <= -0.5 && e.decay.vtilde_l2.exponent - v.exponent >= 0.25);
        let vt = e.decay.vtilde_l2.exponent;
        cert.insert("decay_brackets".into(), (-0.45..=-0.10).contains(&vt) && v_ok);
    }

    let json = json!({
        "format": FORMAT,
        "certification": cert,
        "classification": classification,
        "constants": constants,
        "gates": gates,
        "files": files,
    });
    let mut constants_csv = String::from("name,value\n");
    for (k, v) in &flat {
        constants_csv += &format!("{k},{v:e}\n");
    }
    let mut gates_csv = String::from("stage,name,value,limit,relation,pass\n");
    for r in &present {
        for g in &r.gates {
            gates_csv += &format!(
                "{},\"{}\",{:e},{:e},{},{}\n",
                r.stage.name(),
                g.name.replace('"', "'"),
                g.value,
                g.limit,
                serde_json::to_value(g.relation).unwrap().as_str().unwrap(),
                g.pass
            );
        }
    }
    Ok(ReportBundle { json, constants_csv, gates_csv, all_gates_pass: all_pass })
}

fn put(flat: &mut Vec<(String, f64)>, m: &mut Map<String, Value>, key: &str, v: f64) {
    flat.push((key.to_string(), v));
    m.insert(key.rsplit('.').next().unwrap().to_string(), json!(v));
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.as_f64().is_some_and(f64::is_finite),
        "integer" => v.is_i64() || v.is_u64(),
        _ => false,
    }
}

/// Validates `doc` against the subset of JSON Schema used by the bundled
/// schema: `type`, `enum`, `required`, `properties`, `additionalProperties`,
/// `items`, `minItems`, `minProperties`, `minimum`, `maximum`, `minLength`.
/// Returns one message per violation, each prefixed with a JSON pointer.
pub fn validate(schema: &Value, doc: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    check(schema, doc, "", &mut errs);
    errs
}

fn check(schema: &Value, v: &Value, at: &str, errs: &mut Vec<String>) {
    let Some(s) = schema.as_object() else { return };
    let here = if at.is_empty() { "/" } else { at };
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, v)),
            _ => true,
        };
        if !ok {
            errs.push(format!("{here}: expected type {t}, found {v}"));
            return;
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(v) {
            errs.push(format!("{here}: {v} not among {}", Value::Array(options.clone())));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(min) = s.get("minimum").and_then(Value::as_f64) {
            if x < min {
                errs.push(format!("{here}: {x} below minimum {min}"));
            }
        }
        if let Some(max) = s.get("maximum").and_then(Value::as_f64) {
            if x > max {
                errs.push(format!("{here}: {x} above maximum {max}"));
            }
        }
    }
    if let (Some(min), Some(text)) = (s.get("minLength").and_then(Value::as_u64), v.as_str()) {
        if (text.chars().count() as u64) < min {
            errs.push(format!("{here}: string shorter than {min}"));
        }
    }
    if let Some(obj) = v.as_object() {
        if let Some(min) = s.get("minProperties").and_then(Value::as_u64) {
            if (obj.len() as u64) < min {
                errs.push(format!("{here}: fewer than {min} properties"));
            }
        }
        if let Some(Value::Array(req)) = s.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(k) {
                    errs.push(format!("{here}: missing required key {k:?}"));
                }
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, val) in obj {
            let path = format!("{at}/{k}");
            match props.and_then(|p| p.get(k)) {
                Some(sub) => check(sub, val, &path, errs),
                None => match s.get("additionalProperties") {
                    Some(Value::Bool(false)) => errs.push(format!("{here}: unexpected key {k:?}")),
                    Some(sub @ Value::Object(_)) => check(sub, val, &path, errs),
                    _ => {}
                },
            }
        }
    }
    if let Some(arr) = v.as_array() {
        if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < min {
                errs.push(format!("{here}: fewer than {min} items"));
            }
        }
        if let Some(items) = s.get("items") {
            for (i, val) in arr.iter().enumerate() {
                check(items, val, &format!("{at}/{i}"), errs);
            }
        }
    }
}
