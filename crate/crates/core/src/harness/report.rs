//! CSV and plain-text renderings of run results.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::aggregate::MetricSummary;
use super::train::RunReport;
use crate::error::{Error, Result};

/// Serializes rows with a header derived from the row type.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per run: seed, method label, config hash, then every summary
/// metric in name order (empty when a run lacks it).
pub fn runs_csv(reports: &[RunReport]) -> Result<String> {
    let keys: BTreeSet<String> = reports
        .iter()
        .flat_map(|r| r.summary_metrics().into_keys())
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let mut header = vec!["seed".to_string(), "method".into(), "config_hash".into()];
    header.extend(keys.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let m = r.summary_metrics();
        let mut row = vec![
            r.seed.to_string(),
            r.method.spec.label(),
            r.config_hash.clone(),
        ];
        row.extend(
            keys.iter()
                .map(|k| m.get(k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Square matrix with a leading name column.
pub fn matrix_csv(names: &[String], matrix: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in names.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width table of `mean (max)` cells, one row per label.
pub fn mean_max_table(rows: &[(String, BTreeMap<String, MetricSummary>)]) -> String {
    let metrics: BTreeSet<&String> = rows.iter().flat_map(|(_, m)| m.keys()).collect();
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut header = vec!["method".to_string()];
    header.extend(metrics.iter().map(|m| m.to_string()));
    cells.push(header);
    for (label, m) in rows {
        let mut row = vec![label.clone()];
        row.extend(metrics.iter().map(|k| match m.get(*k) {
            Some(s) => format!("{:.4} ({:.4})", s.mean, s.max),
            None => "-".into(),
        }));
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let s = MetricSummary::of(&[0.8, 0.9]).unwrap();
        let rows = vec![(
            "vanilla".to_string(),
            BTreeMap::from([("acc".to_string(), s)]),
        )];
        assert_eq!(
            mean_max_table(&rows),
            "method   acc\nvanilla  0.8500 (0.9000)\n"
        );
    }

    #[test]
    fn matrix_layout() {
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = matrix_csv(&names, &[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(csv, ",a,b\na,1,0.5\nb,0.5,1\n");
    }
}
