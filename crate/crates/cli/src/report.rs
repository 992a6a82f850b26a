use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::OutputFormat;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

/// What a suite hands back: a CSV table, scalar metrics and the verdicts.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn new(suite: &str, seed: u64, header: Vec<&'static str>) -> Self {
        SuiteReport { suite: suite.to_string(), seed, header, rows: Vec::new(), metrics: Map::new(), checks: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.to_string(), serde_json::to_value(value).expect("metric serializes"));
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, passed, detail));
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// Summary document; `config` is echoed under the `config` key.
    pub fn to_json(&self, master_seed: u64, config: &Value) -> String {
        let mut doc = Map::new();
        doc.insert("suite".into(), Value::from(self.suite.clone()));
        doc.insert("passed".into(), Value::from(self.passed()));
        doc.insert("master_seed".into(), Value::from(master_seed));
        doc.insert("seed".into(), Value::from(self.seed));
        for (k, v) in &self.metrics {
            doc.insert(k.clone(), v.clone());
        }
        doc.insert("checks".into(), serde_json::to_value(&self.checks).expect("checks serialize"));
        doc.insert("config".into(), config.clone());
        let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, f) in widths.iter_mut().zip(row) {
                *w = (*w).max(f.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "== {} (seed {})", self.suite, self.seed);
        let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
            cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let _ = writeln!(out, "{}", line(&mut self.header.iter().copied()));
        for row in &self.rows {
            let _ = writeln!(out, "{}", line(&mut row.iter().map(String::as_str)));
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k}: {v}");
        }
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }

    pub fn render(&self, format: OutputFormat, master_seed: u64, config: &Value) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(master_seed, config),
            OutputFormat::Table => self.to_table(),
        }
    }

    /// Writes `<suite>.csv`, `<suite>.summary.json` and `<suite>.table.txt`
    /// under `dir`; returns the CSV path.
    pub fn write(&self, dir: &Path, master_seed: u64, config: &Value) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.suite));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(dir.join(format!("{}.summary.json", self.suite)), self.to_json(master_seed, config))?;
        std::fs::write(dir.join(format!("{}.table.txt", self.suite)), self.to_table())?;
        Ok(csv)
    }
}

fn csv_field(f: &str) -> String {
    if f.contains([',', '"', '\n']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

/// Shortest round-trip decimal; NaN and infinities spelled out.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        let mut r = SuiteReport::new("s", 1, vec!["a", "b"]);
        r.rows.push(vec!["1".into(), "x,y".into()]);
        assert_eq!(r.to_csv(), "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn verdict_and_json() {
        let mut r = SuiteReport::new("s", 1, vec!["a"]);
        r.check("ok", true, "");
        assert!(r.passed());
        r.check("bad", false, "too big");
        assert!(!r.passed());
        r.metric("slope", -0.5);
        let v: Value = serde_json::from_str(&r.to_json(9, &Value::Null)).unwrap();
        assert_eq!(v["slope"], -0.5);
        assert_eq!(v["passed"], false);
        assert_eq!(v["checks"][1]["name"], "bad");
    }

    #[test]
    fn float_format_roundtrips() {
        for x in [0.1, 1e-300, -2.5e7, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }
}
