use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::evalkit::{mean_report, MetricReport};

#[derive(Serialize)]
struct Record<'a> {
    id: &'a str,
    mae: f64,
    #[serde(rename = "maxF")]
    max_f: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "Emax")]
    e_max: f64,
}

/// One JSON object per line: `id`, `mae`, `maxF`, `S`, `Emax`.
pub fn jsonl(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    for (id, r) in rows {
        let rec = Record {
            id,
            mae: r.mae,
            max_f: r.max_f,
            s: r.s_measure,
            e_max: r.e_max,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record"));
        out.push('\n');
    }
    out
}

/// Aligned plain-text table with a trailing mean row.
pub fn table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(id, _)| id.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}", "id", "MAE", "maxF", "S", "Emax");
    let mut line = |id: &str, r: &MetricReport| {
        let _ = writeln!(
            out,
            "{id:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.mae, r.max_f, r.s_measure, r.e_max
        );
    };
    for (id, r) in rows {
        line(id, r);
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    if let Some(m) = mean_report(&reports) {
        line("mean", &m);
    }
    out
}

/// Writes `metrics.txt` and `metrics.jsonl` into `dir`.
pub fn write_reports(dir: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.txt"), table(rows))?;
    fs::write(dir.join("metrics.jsonl"), jsonl(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::evaluate;
    use crate::numerics::Tensor;

    #[test]
    fn formats() {
        let gt = Tensor::new(&[2, 2], vec![1., 0., 0., 0.]).unwrap();
        let rows = vec![("a".to_string(), evaluate(&gt, &gt).unwrap())];
        let j = jsonl(&rows);
        let v: serde_json::Value = serde_json::from_str(j.trim()).unwrap();
        assert_eq!(v["id"], "a");
        assert_eq!(v["maxF"], 1.0);
        let t = table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().starts_with("mean"));
    }
}
