use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;

pub const REPORT_HEADER: &str = "variant,seed,alpha,accuracy,p_at_k_ww,p_at_k_wo";
pub const SUMMARY_HEADER: &str =
    "variant,alpha,runs,accuracy_mean,accuracy_std,p_at_k_ww_mean,p_at_k_ww_std,p_at_k_wo_mean,p_at_k_wo_std";

/// One (variant, alpha, seed) result. Precision is absent for variants whose
/// edges are not learned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    pub alpha: f64,
    pub accuracy: f64,
    pub p_at_k_ww: Option<f64>,
    pub p_at_k_wo: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant,
            self.seed,
            self.alpha,
            self.accuracy,
            cell(self.p_at_k_ww),
            cell(self.p_at_k_wo)
        )
    }
}

/// Mean and sample standard deviation; the deviation of fewer than two
/// values is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    /// Rows grouped by (variant, alpha) in first-appearance order.
    pub fn groups(&self) -> Vec<((String, f64), Vec<&ReportRow>)> {
        let mut order: Vec<(String, u64)> = Vec::new();
        let mut by: BTreeMap<(String, u64), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.variant.clone(), r.alpha.to_bits());
            if !by.contains_key(&key) {
                order.push(key.clone());
            }
            by.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|k| {
                let rows = by.remove(&k).expect("key recorded");
                ((k.0, f64::from_bits(k.1)), rows)
            })
            .collect()
    }

    /// Accuracy of the rows of one group, in row order.
    pub fn accuracies(&self, variant: &str, alpha: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.alpha == alpha)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for ((variant, alpha), rows) in self.groups() {
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let ww: Vec<f64> = rows.iter().filter_map(|r| r.p_at_k_ww).collect();
            let wo: Vec<f64> = rows.iter().filter_map(|r| r.p_at_k_wo).collect();
            let pair = |v: &[f64]| {
                if v.is_empty() {
                    ",".to_string()
                } else {
                    let (m, s) = mean_std(v);
                    format!("{m},{s}")
                }
            };
            out.push_str(&format!(
                "{variant},{alpha},{},{},{},{}\n",
                rows.len(),
                pair(&acc),
                pair(&ww),
                pair(&wo)
            ));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>_summary.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), ExperimentError> {
        write_pair(dir, stem, self.csv(), self.summary_csv())
    }
}

pub const BASELINE_HEADER: &str = "method,seed,alpha,k,p_at_k_ww";

/// Held-out word–word precision of one ranking method for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub seed: u64,
    pub alpha: f64,
    pub k: usize,
    pub p_at_k_ww: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

impl BaselineReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(BASELINE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.method, r.seed, r.alpha, r.k, r.p_at_k_ww));
        }
        out
    }

    /// Precision of one method, in seed order.
    pub fn precisions(&self, method: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.p_at_k_ww).collect()
    }

    /// `method,runs,mean,std` per method in first-appearance order.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,runs,p_at_k_ww_mean,p_at_k_ww_std\n");
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.method.as_str()) {
                seen.push(&r.method);
            }
        }
        for m in seen {
            let v = self.precisions(m);
            let (mean, std) = mean_std(&v);
            out.push_str(&format!("{m},{},{mean},{std}\n", v.len()));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), ExperimentError> {
        write_pair(dir, stem, self.csv(), self.summary_csv())
    }
}

fn write_pair(dir: &Path, stem: &str, csv: String, summary: String) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(dir.display().to_string(), e))?;
    for (name, text) in [(format!("{stem}.csv"), csv), (format!("{stem}_summary.csv"), summary)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| ExperimentError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}
