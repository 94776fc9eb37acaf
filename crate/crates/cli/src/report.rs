//! Aggregated benchmark rows: one per (method, N), mean and population
//! standard deviation over seeds.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const REPORT_CSV_HEADER: &str = "method,input_size,accuracy_mean,accuracy_std,auc_mean,auc_std,seeds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub input_size: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub seeds: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ReportRow {
    pub fn aggregate(method: &str, input_size: usize, accuracies: &[f64], aucs: &[f64]) -> Self {
        let (accuracy_mean, accuracy_std) = mean_std(accuracies);
        let (auc_mean, auc_std) = mean_std(aucs);
        ReportRow {
            method: method.to_string(),
            input_size,
            accuracy_mean,
            accuracy_std,
            auc_mean,
            auc_std,
            seeds: accuracies.len(),
        }
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Splits one CSV line, honouring double-quoted fields.
pub(crate) fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{}\n",
            quote(&r.method),
            r.input_size,
            r.accuracy_mean,
            r.accuracy_std,
            r.auc_mean,
            r.auc_std,
            r.seeds
        ));
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |line: usize, msg: &str| HarnessError::Config {
        path: format!("report.csv:{line}"),
        message: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f = split_csv_line(line);
        if f.len() != 7 {
            return Err(bad(i + 2, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 2, "bad integer"));
        rows.push(ReportRow {
            method: f[0].clone(),
            input_size: int(&f[1])?,
            accuracy_mean: num(&f[2])?,
            accuracy_std: num(&f[3])?,
            auc_mean: num(&f[4])?,
            auc_std: num(&f[5])?,
            seeds: int(&f[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_population_std() {
        let r = ReportRow::aggregate("m", 5, &[1.0, 0.0], &[0.5, 0.5]);
        assert_eq!(r.accuracy_mean, 0.5);
        assert_eq!(r.accuracy_std, 0.5);
        assert_eq!(r.auc_std, 0.0);
        assert_eq!(r.seeds, 2);
    }

    #[test]
    fn csv_round_trip_with_awkward_names() {
        let rows = vec![
            ReportRow::aggregate("MIA Filter + KL", 100, &[0.1, 0.7, 1.0 / 3.0], &[0.2, 0.9, 0.6]),
            ReportRow::aggregate("a,\"b\"", 1, &[1.0], &[1.0]),
        ];
        let text = rows_to_csv(&rows);
        assert_eq!(rows_from_csv(&text).unwrap(), rows);
        assert_eq!(rows_from_csv(REPORT_CSV_HEADER).unwrap(), vec![]);
    }
}
