//! JSON model files, CSV traces, and run manifests.
//!
//! Floats are written with 17 significant digits so that every value
//! round-trips exactly and repeated writes of the same model are
//! byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MdpModel, RiskParams};
use crate::mpi::MpiTrace;
use crate::transform::TransformedMdp;

#[derive(Debug, Deserialize)]
struct ModelFile {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    cost: Vec<Vec<f64>>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

fn fmt_f64(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::param(format!("cannot write non-finite value {x} to JSON")));
    }
    Ok(format!("{x:.16e}"))
}

fn push_nested(out: &mut String, n: usize, m: usize, p: &[f64], c: &[f64]) -> Result<()> {
    out.push_str("  \"transition\": [\n");
    for s in 0..n {
        out.push_str("    [\n");
        for a in 0..m {
            let row = &p[(s * m + a) * n..(s * m + a + 1) * n];
            let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect::<Result<_>>()?;
            let sep = if a + 1 < m { "," } else { "" };
            let _ = writeln!(out, "      [{}]{sep}", cells.join(", "));
        }
        let sep = if s + 1 < n { "," } else { "" };
        let _ = writeln!(out, "    ]{sep}");
    }
    out.push_str("  ],\n  \"cost\": [\n");
    for s in 0..n {
        let cells: Vec<String> = c[s * m..(s + 1) * m].iter().map(|&x| fmt_f64(x)).collect::<Result<_>>()?;
        let sep = if s + 1 < n { "," } else { "" };
        let _ = writeln!(out, "    [{}]{sep}", cells.join(", "));
    }
    out.push_str("  ]");
    Ok(())
}

pub fn model_to_json(model: &MdpModel) -> Result<String> {
    let (n, m) = (model.n_states(), model.n_actions());
    let mut out = String::new();
    let _ = writeln!(out, "{{\n  \"n_states\": {n},\n  \"n_actions\": {m},");
    push_nested(&mut out, n, m, model.transition_flat(), model.cost_flat())?;
    if let Some(labels) = model.labels() {
        let _ = write!(out, ",\n  \"labels\": {}", serde_json::to_string(labels)?);
    }
    out.push_str("\n}\n");
    Ok(out)
}

pub fn model_from_json(text: &str) -> Result<MdpModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.transition.len() != file.n_states {
        return Err(Error::Shape(format!(
            "n_states = {} but transition has {} states",
            file.n_states,
            file.transition.len()
        )));
    }
    if let Some(row) = file.transition.first() {
        if row.len() != file.n_actions {
            return Err(Error::Shape(format!(
                "n_actions = {} but transition[0] has {} actions",
                file.n_actions,
                row.len()
            )));
        }
    }
    let model = MdpModel::from_nested(&file.transition, &file.cost)?;
    match file.labels {
        Some(labels) => model.with_labels(labels),
        None => Ok(model),
    }
}

pub fn read_model(path: &Path) -> Result<MdpModel> {
    model_from_json(&fs::read_to_string(path)?)
}

pub fn write_model(model: &MdpModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

/// Model schema with `alpha`, `kappa` and `source_digest` added.
pub fn transformed_to_json(tmdp: &TransformedMdp) -> Result<String> {
    let (n, m) = (tmdp.n_states(), tmdp.n_actions());
    let mut out = String::new();
    let _ = writeln!(out, "{{\n  \"n_states\": {n},\n  \"n_actions\": {m},");
    push_nested(&mut out, n, m, tmdp.transition_flat(), tmdp.cost_flat())?;
    let _ = write!(
        out,
        ",\n  \"alpha\": {},\n  \"kappa\": {},\n  \"source_digest\": \"{}\"\n}}\n",
        fmt_f64(tmdp.alpha())?,
        fmt_f64(tmdp.kappa())?,
        tmdp.source_digest()
    );
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

/// One row per record. Approximate runs get three extra columns.
pub fn write_trace_csv<W: Write>(trace: &MpiTrace, out: W) -> Result<()> {
    let approx = trace.records.iter().any(|r| r.approx.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "iter",
        "u",
        "l",
        "u_minus_l",
        "policy",
        "lambda_tilde_policy",
        "min_value_entry",
    ];
    if approx {
        header.extend(["epsilon_ratio_max", "eval_ratio_min", "eval_ratio_max"]);
    }
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![
            r.index.to_string(),
            format!("{:.16e}", r.u),
            format!("{:.16e}", r.l),
            format!("{:.16e}", r.u - r.l),
            r.policy.to_string(),
            opt(r.policy_lambda_tilde),
            format!("{:.16e}", r.value_normalized.min_weight()),
        ];
        if approx {
            let s = r.approx;
            row.push(opt(s.map(|s| s.epsilon_ratio_max)));
            row.push(opt(s.and_then(|s| s.eval_ratio_min)));
            row.push(opt(s.and_then(|s| s.eval_ratio_max)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &MpiTrace, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_trace_csv(trace, std::io::BufWriter::new(file))
}

/// Everything needed to replay a CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub model_path: Option<String>,
    pub params: Option<RiskParams>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp: String,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
