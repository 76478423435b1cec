//! Schema-versioned, append-only CSV files.
//!
//! Each file starts with `#schema=N` followed by a header line. Appending to
//! an existing file first checks both, and readers reject other versions.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{TERM_DSM, TERM_GAN_D, TERM_GAN_G, TERM_KL, TERM_LPIPS, TERM_REC};

pub const CSV_SCHEMA: u32 = 1;
pub const TRAIN_LOG_HEADER: &str = "step,lr,total,term:dsm,term:kl,term:lpips,term:gan_g,term:gan_d";

/// Loss values of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Completed steps after this one.
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Running sums between two log rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogWindow {
    pub steps: u64,
    pub total: f64,
    pub sums: BTreeMap<String, (f64, u64)>,
}

impl LogWindow {
    pub fn push(&mut self, r: &StepRecord) {
        self.steps += 1;
        self.total += r.total;
        for (k, v) in &r.terms {
            let e = self.sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    fn mean(&self, key: &str) -> Option<f64> {
        self.sums.get(key).filter(|e| e.1 > 0).map(|e| e.0 / e.1 as f64)
    }

    /// Window means as a training-log row. The Gaussian decoder's
    /// reconstruction term fills the `term:dsm` column.
    pub fn row(&self, step: u64, lr: f64) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let first = self.mean(TERM_DSM).or_else(|| self.mean(TERM_REC));
        format!(
            "{step},{lr},{},{},{},{},{},{}",
            self.total / self.steps.max(1) as f64,
            cell(first),
            cell(self.mean(TERM_KL)),
            cell(self.mean(TERM_LPIPS)),
            cell(self.mean(TERM_GAN_G)),
            cell(self.mean(TERM_GAN_D)),
        )
    }
}

/// Append `rows` to `path`, creating it with the schema line and `header` if needed.
pub fn append_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (_, found) = parse_preamble(&text, path)?;
        if found != header {
            return Err(Error::Corrupt(format!(
                "{}: header `{found}` differs from `{header}`",
                path.display()
            )));
        }
    } else {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, format!("#schema={CSV_SCHEMA}\n{header}\n")).map_err(|e| Error::io(path, e))?;
    }
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_preamble<'a>(text: &'a str, path: &Path) -> Result<(u32, &'a str)> {
    let mut lines = text.lines();
    let schema = lines
        .next()
        .and_then(|l| l.strip_prefix("#schema="))
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Corrupt(format!("{}: missing #schema line", path.display())))?;
    if schema != CSV_SCHEMA {
        return Err(Error::Corrupt(format!(
            "{}: unsupported schema version {schema}",
            path.display()
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::Corrupt(format!("{}: missing header", path.display())))?;
    Ok((schema, header))
}

/// Header and data rows (split on commas) of a schema-versioned CSV file.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = parse_preamble(&text, path)?;
    let cols: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(2) {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != cols.len() {
            return Err(Error::Corrupt(format!(
                "{}: line {} has {} cells, expected {}",
                path.display(),
                i + 1,
                cells.len(),
                cols.len()
            )));
        }
        rows.push(cells);
    }
    Ok((cols, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_means_and_empty_cells() {
        let mut w = LogWindow::default();
        for (i, d) in [1.0, 3.0].into_iter().enumerate() {
            let terms = [(TERM_DSM.to_string(), d), (TERM_KL.to_string(), 10.0)].into_iter().collect();
            w.push(&StepRecord {
                step: i as u64 + 1,
                lr: 0.1,
                total: d + 1.0,
                terms,
            });
        }
        assert_eq!(w.row(2, 0.1), "2,0.1,3,2,10,,,");
    }

    #[test]
    fn append_and_reject_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        append_rows(&p, "x,y", &["1,2".into()]).unwrap();
        append_rows(&p, "x,y", &["3,4".into()]).unwrap();
        let (h, rows) = read_rows(&p).unwrap();
        assert_eq!(h, ["x", "y"]);
        assert_eq!(rows.len(), 2);
        assert!(append_rows(&p, "x,z", &[]).is_err());
        std::fs::write(&p, "#schema=9\nx,y\n").unwrap();
        assert!(matches!(read_rows(&p), Err(Error::Corrupt(_))));
    }
}
