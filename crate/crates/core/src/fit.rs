//! Estimation results shared by the EM and quasi-Newton fitters.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Em,
    Score,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::Score => "score",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub names: Vec<String>,
    pub n_fixed: usize,
    /// `Δ̂`
    pub params: Params,
    /// Parameter value after every iteration (the starting point first).
    pub trace: Vec<Params>,
    /// Monitored criterion per iteration: the exact log-likelihood when `θ` is
    /// known, otherwise the posterior mean of `log f(y | θ, δ)`.
    pub criterion: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    pub elapsed_secs: f64,
    /// Mean Metropolis acceptance rate per iteration.
    pub acceptance: Vec<f64>,
    /// Final score and its Monte-Carlo standard errors, when computed.
    pub score: Option<(Vec<f64>, Vec<f64>)>,
    pub message: String,
}

fn params_json(names: &[String], p: &Params) -> Value {
    let map: serde_json::Map<String, Value> = names.iter().cloned().zip(p.to_vec().into_iter().map(Value::from)).collect();
    Value::Object(map)
}

impl FitResult {
    pub fn to_json(&self) -> Value {
        json!({
            "schema": 1,
            "method": self.method.as_str(),
            "converged": self.converged,
            "iterations": self.iterations,
            "seed": self.seed,
            "elapsed_secs": self.elapsed_secs,
            "message": self.message,
            "names": self.names,
            "estimate": params_json(&self.names, &self.params),
            "fixed": self.params.fixed.as_slice(),
            "delta": self.params.delta.as_slice(),
            "criterion": self.criterion,
            "acceptance": self.acceptance,
            "score": self.score.as_ref().map(|(s, se)| json!({ "value": s, "mc_se": se })),
            "trace": self.trace.iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
        })
    }

    /// One row per iteration: `iteration,<names…>,criterion`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("criterion".into());
        wr.write_record(&header)?;
        for (k, p) in self.trace.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(p.to_vec().iter().map(|v| format!("{v}")));
            row.push(self.criterion.get(k).map_or(String::new(), |c| format!("{c}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Parameter file: `{"fixed": [...], "delta": [...]}`.
pub fn params_from_json(v: &Value) -> Option<Params> {
    let list = |key: &str| -> Option<Vec<f64>> { v.get(key)?.as_array()?.iter().map(Value::as_f64).collect() };
    Some(Params::new(list("fixed").unwrap_or_default(), list("delta")?))
}

pub fn params_to_json(names: &[String], p: &Params) -> Value {
    json!({
        "schema": 1,
        "fixed": p.fixed.as_slice(),
        "delta": p.delta.as_slice(),
        "named": params_json(names, p),
    })
}

pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}
