//! Panel observations `y_it` with a missingness mask, and the long CSV format
//! `individual,t,component,value,observed` (1-based indices).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kalman::Observations;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub m: usize,
    pub n_time: usize,
    pub obs_dim: usize,
    y: Vec<f64>,
    mask: Vec<bool>,
}

impl PanelData {
    /// Panel with every cell missing.
    pub fn new(m: usize, n_time: usize, obs_dim: usize) -> Self {
        PanelData {
            m,
            n_time,
            obs_dim,
            y: vec![f64::NAN; m * n_time * obs_dim],
            mask: vec![false; m * n_time],
        }
    }

    fn cell(&self, i: usize, t: usize) -> usize {
        debug_assert!(i < self.m && t < self.n_time);
        i * self.n_time + t
    }

    /// Observation of individual `i` at 0-based time `t` (NaN where missing).
    pub fn get(&self, i: usize, t: usize) -> &[f64] {
        let c = self.cell(i, t) * self.obs_dim;
        &self.y[c..c + self.obs_dim]
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[self.cell(i, t)]
    }

    pub fn set(&mut self, i: usize, t: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.obs_dim {
            return Err(Error::dim(format!("observation has {} components, expected {}", value.len(), self.obs_dim)));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("observation ({}, {}) is not finite", i + 1, t + 1)));
        }
        let c = self.cell(i, t);
        self.y[c * self.obs_dim..(c + 1) * self.obs_dim].copy_from_slice(value);
        self.mask[c] = true;
        Ok(())
    }

    /// Marks a cell missing; the stored value is discarded.
    pub fn set_missing(&mut self, i: usize, t: usize) {
        let c = self.cell(i, t);
        self.mask[c] = false;
        self.y[c * self.obs_dim..(c + 1) * self.obs_dim].fill(f64::NAN);
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// True when nobody is observed at 0-based time `t`.
    pub fn fully_missing(&self, t: usize) -> bool {
        (0..self.m).all(|i| !self.is_observed(i, t))
    }

    /// Stacked observation sequence for a set of individuals, in member order.
    pub fn unit_observations(&self, members: &[usize]) -> Observations {
        let q = self.obs_dim;
        let mut y = Vec::with_capacity(self.n_time);
        let mut observed = Vec::with_capacity(self.n_time);
        for t in 0..self.n_time {
            let mut v = DVector::zeros(members.len() * q);
            let mut mask = vec![false; members.len() * q];
            for (k, &i) in members.iter().enumerate() {
                if self.is_observed(i, t) {
                    v.rows_mut(k * q, q).copy_from_slice(self.get(i, t));
                    mask[k * q..(k + 1) * q].fill(true);
                }
            }
            y.push(v);
            observed.push(mask);
        }
        Observations { y, observed }
    }

    /// Keeps only the listed individuals, in the given order.
    pub fn select(&self, members: &[usize]) -> PanelData {
        let mut out = PanelData::new(members.len(), self.n_time, self.obs_dim);
        for (k, &i) in members.iter().enumerate() {
            for t in 0..self.n_time {
                if self.is_observed(i, t) {
                    let c = out.cell(k, t);
                    out.y[c * self.obs_dim..(c + 1) * self.obs_dim].copy_from_slice(self.get(i, t));
                    out.mask[c] = true;
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["individual", "t", "component", "value", "observed"])?;
        for i in 0..self.m {
            for t in 0..self.n_time {
                let obs = self.is_observed(i, t);
                for (c, v) in self.get(i, t).iter().enumerate() {
                    let value = if obs { format!("{v}") } else { String::new() };
                    wr.write_record([
                        (i + 1).to_string(),
                        (t + 1).to_string(),
                        (c + 1).to_string(),
                        value,
                        u8::from(obs).to_string(),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the long format. Cells absent from the file are missing;
    /// `m`, `T` and `q` are the largest indices seen.
    pub fn read_csv<R: Read>(r: R) -> Result<PanelData> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data {
                    row: 1,
                    message: format!("missing column `{name}`"),
                })
        };
        let (ci, ct, cc, cv) = (col("individual")?, col("t")?, col("component")?, col("value")?);
        let co = headers.iter().position(|h| h == "observed");

        struct Entry {
            i: usize,
            t: usize,
            c: usize,
            value: Option<f64>,
            row: usize,
        }
        let mut entries = Vec::new();
        for (k, rec) in rd.records().enumerate() {
            let row = k + 2;
            let rec = rec.map_err(|e| Error::Data {
                row,
                message: e.to_string(),
            })?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let index = |c: usize, name: &str| -> Result<usize> {
                match field(c).parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(Error::Data {
                        row,
                        message: format!("`{name}` must be a positive integer, got `{}`", field(c)),
                    }),
                }
            };
            let (i, t, c) = (index(ci, "individual")?, index(ct, "t")?, index(cc, "component")?);
            let observed = match co.map(field) {
                None => !matches!(field(cv), "" | "NA" | "NaN" | "nan"),
                Some("1" | "true" | "TRUE") => true,
                Some("0" | "false" | "FALSE") => false,
                Some(other) => {
                    return Err(Error::Data {
                        row,
                        message: format!("`observed` must be 0/1, got `{other}`"),
                    })
                }
            };
            let value = if observed {
                match field(cv).parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        return Err(Error::Data {
                            row,
                            message: format!("observed value `{}` is not a finite number", field(cv)),
                        })
                    }
                }
            } else {
                None
            };
            entries.push(Entry { i, t, c, value, row });
        }
        if entries.is_empty() {
            return Err(Error::Data {
                row: 1,
                message: "no observations".into(),
            });
        }
        let m = entries.iter().map(|e| e.i).max().unwrap_or(0) + 1;
        let n_time = entries.iter().map(|e| e.t).max().unwrap_or(0) + 1;
        let q = entries.iter().map(|e| e.c).max().unwrap_or(0) + 1;

        let mut data = PanelData::new(m, n_time, q);
        // per cell: number of observed components written, and first row
        let mut seen = vec![0usize; m * n_time];
        let mut state = vec![None::<bool>; m * n_time];
        for e in &entries {
            let cell = data.cell(e.i, e.t);
            match (state[cell], e.value.is_some()) {
                (Some(prev), now) if prev != now => {
                    return Err(Error::Data {
                        row: e.row,
                        message: "components of one observation must be all observed or all missing".into(),
                    })
                }
                _ => state[cell] = Some(e.value.is_some()),
            }
            if let Some(v) = e.value {
                let slot = &mut data.y[cell * q + e.c];
                if !slot.is_nan() {
                    return Err(Error::Data {
                        row: e.row,
                        message: "duplicate observation".into(),
                    });
                }
                *slot = v;
                seen[cell] += 1;
            }
        }
        for e in &entries {
            let cell = data.cell(e.i, e.t);
            if state[cell] == Some(true) {
                if seen[cell] != q {
                    return Err(Error::Data {
                        row: e.row,
                        message: format!("observation has {} of {q} components", seen[cell]),
                    });
                }
                data.mask[cell] = true;
            }
        }
        Ok(data)
    }

    pub fn load_csv(path: &Path) -> Result<PanelData> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
