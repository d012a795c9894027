//! Pose errors, success rates and the per-sequence summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_error_deg, Pose};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no frames selected")]
    EmptySelection,
    #[error("thresholds must be positive (rho {rho}, sigma {sigma})")]
    BadThresholds { rho: f64, sigma: f64 },
    #[error("method {method:?} missing from the column list")]
    UnknownMethod { method: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame: usize,
    /// Translation error in meters.
    pub omega: f64,
    /// Rotation error in degrees.
    pub theta: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessConfig {
    pub rho: f64,
    pub sigma: f64,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self { rho: 0.010, sigma: 10.0 }
    }
}

impl SuccessConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.rho > 0.0 && self.sigma > 0.0 {
            Ok(())
        } else {
            Err(MetricsError::BadThresholds {
                rho: self.rho,
                sigma: self.sigma,
            })
        }
    }
}

/// Error of `pred` against `gt`. Degenerate predictions are scored as the
/// zero pose.
pub fn frame_error(frame: usize, gt: &Pose, pred: &Pose, degenerate: bool) -> FrameError {
    let pred = if degenerate { Pose::identity() } else { *pred };
    FrameError {
        frame,
        omega: (gt.t - pred.t).norm(),
        theta: rotation_error_deg(gt, &pred),
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    pub omega: f64,
    pub theta: f64,
    pub count: usize,
}

/// Fractions of frames with `omega < rho` and `theta < sigma`, optionally
/// restricted to the frames in `subset`.
pub fn success_rates(
    errors: &[FrameError],
    cfg: &SuccessConfig,
    subset: Option<&BTreeSet<usize>>,
) -> Result<SuccessRates, MetricsError> {
    cfg.validate()?;
    let selected: Vec<&FrameError> = errors
        .iter()
        .filter(|e| subset.is_none_or(|s| s.contains(&e.frame)))
        .collect();
    if selected.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let n = selected.len() as f64;
    Ok(SuccessRates {
        omega: selected.iter().filter(|e| e.omega < cfg.rho).count() as f64 / n,
        theta: selected.iter().filter(|e| e.theta < cfg.sigma).count() as f64 / n,
        count: selected.len(),
    })
}

/// Ω and Θ for one method on one sequence, over all frames and over the
/// adverse-condition subset Ψ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodRates {
    pub omega_all: Option<f64>,
    pub omega_psi: Option<f64>,
    pub theta_all: Option<f64>,
    pub theta_psi: Option<f64>,
}

/// sequence → method → rates.
pub type RatesBySequence = BTreeMap<String, BTreeMap<String, MethodRates>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub metric: String,
    pub sequence: String,
    pub cells: Vec<Option<f64>>,
}

impl Table {
    pub fn row(&self, metric: &str, sequence: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.metric == metric && r.sequence == sequence)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().skip(2).position(|h| h == name)
    }

    /// Missing cells are written as empty fields.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            let mut rec = vec![r.metric.clone(), r.sequence.clone()];
            rec.extend(r.cells.iter().map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Omega rows per sequence followed by their unweighted average, then the
/// same for Theta. Columns are `<method>_all, <method>_psi` in `methods` order.
pub fn aggregate_table(per_sequence: &RatesBySequence, methods: &[String]) -> Result<Table, MetricsError> {
    for m in per_sequence.values().flat_map(|by| by.keys()) {
        if !methods.contains(m) {
            return Err(MetricsError::UnknownMethod { method: m.clone() });
        }
    }
    let mut header = vec!["metric".to_string(), "sequence".to_string()];
    for m in methods {
        header.push(format!("{m}_all"));
        header.push(format!("{m}_psi"));
    }
    type Pick = fn(&MethodRates) -> (Option<f64>, Option<f64>);
    let sections: [(&str, Pick); 2] = [
        ("omega", |r| (r.omega_all, r.omega_psi)),
        ("theta", |r| (r.theta_all, r.theta_psi)),
    ];
    let mut rows = Vec::new();
    for (metric, pick) in sections {
        let first = rows.len();
        for (seq, by_method) in per_sequence {
            let cells = methods
                .iter()
                .flat_map(|m| {
                    let (a, p) = by_method.get(m).map(pick).unwrap_or((None, None));
                    [a, p]
                })
                .collect();
            rows.push(TableRow {
                metric: metric.to_string(),
                sequence: seq.clone(),
                cells,
            });
        }
        let section: &[TableRow] = &rows[first..];
        let avg = (0..methods.len() * 2)
            .map(|c| {
                let vals: Vec<f64> = section.iter().filter_map(|r| r.cells[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        rows.push(TableRow {
            metric: metric.to_string(),
            sequence: "avg".to_string(),
            cells: avg,
        });
    }
    Ok(Table { header, rows })
}
