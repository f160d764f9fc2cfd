//! Plot-ready CSV tables with a column schema file, and pass/fail checks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A CSV table whose columns carry a one-line description.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnDoc {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSchema {
    pub file: String,
    pub columns: Vec<ColumnDoc>,
}

impl CsvTable {
    pub fn new<S: Into<String>, D: Into<String>>(columns: impl IntoIterator<Item = (S, D)>) -> Self {
        Self {
            columns: columns.into_iter().map(|(s, d)| (s.into(), d.into())).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Writes `<stem>.csv` and `<stem>.schema.json` into `dir`; returns the CSV path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(self.columns.iter().map(|c| c.0.as_str()))?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let schema = TableSchema {
            file: format!("{stem}.csv"),
            columns: self
                .columns
                .iter()
                .map(|(n, d)| ColumnDoc {
                    name: n.clone(),
                    description: d.clone(),
                })
                .collect(),
        };
        let spath = dir.join(format!("{stem}.schema.json"));
        fs::write(&spath, serde_json::to_string_pretty(&schema)? + "\n").map_err(|e| Error::io(&spath, e))?;
        Ok(path)
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// One verdict on a named invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub invariant: String,
    pub observed: String,
    pub threshold: String,
    pub passed: bool,
    /// Informational checks are reported but do not decide the suite.
    pub gating: bool,
}

impl Check {
    pub fn new(
        invariant: impl Into<String>,
        observed: impl Into<String>,
        threshold: impl Into<String>,
        passed: bool,
    ) -> Self {
        Self {
            invariant: invariant.into(),
            observed: observed.into(),
            threshold: threshold.into(),
            passed,
            gating: true,
        }
    }

    pub fn informational(mut self) -> Self {
        self.gating = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteTable {
    pub fn new(suite: impl Into<String>) -> Self {
        Self {
            suite: suite.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new([
            ("suite", "suite name"),
            ("invariant", "property under test"),
            ("observed", "measured statistic"),
            ("threshold", "acceptance condition"),
            ("passed", "whether the condition holds"),
            ("gating", "whether the check decides the suite verdict"),
        ]);
        for c in &self.checks {
            t.push(vec![
                self.suite.clone(),
                c.invariant.clone(),
                c.observed.clone(),
                c.threshold.clone(),
                c.passed.to_string(),
                c.gating.to_string(),
            ]);
        }
        t
    }

    /// Human-readable table, one line per check.
    pub fn render(&self) -> String {
        let mut s = format!(
            "suite {}: {}\n",
            self.suite,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            let tag = match (c.passed, c.gating) {
                (true, _) => "pass",
                (false, true) => "FAIL",
                (false, false) => "info",
            };
            s.push_str(&format!(
                "  [{tag}] {} | observed {} | need {}\n",
                c.invariant, c.observed, c.threshold
            ));
        }
        s
    }
}
