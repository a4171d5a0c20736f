use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::protocol::{BranchMetrics, EvalReport, LocalGlobalReport, DECISION_TREE, KNN, SP, UAMAT};
use crate::error::Result;

fn display_name(branch: &str) -> &str {
    match branch {
        UAMAT => "UAMAT",
        SP => "SP",
        DECISION_TREE => "DT",
        KNN => "kNN",
        other => other,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per (seed, branch) plus `mean` and `std` rows per branch;
    /// overlap rows carry the joint accuracies in the accuracy column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["protocol", "c", "seed", "branch", "auc", "accuracy", &format!("accuracy_at_{}", self.k)])?;
        let (kind, c) = (self.kind.as_str(), self.c.to_string());
        let f = |v: f64| format!("{v}");
        for row in &self.rows {
            let seed = row.seed.to_string();
            for (name, m) in &row.branches {
                w.write_record([kind, &c, &seed, name, &f(m.auc), &f(m.accuracy), &f(m.accuracy_at_k)])?;
            }
            if let Some(o) = &row.overlap {
                w.write_record([kind, &c, &seed, "overlap", "", &f(o.overlap), ""])?;
            }
        }
        for (name, s) in &self.summary {
            w.write_record([kind, &c, "mean", name, &f(s.auc.mean), &f(s.accuracy.mean), &f(s.accuracy_at_k.mean)])?;
            w.write_record([kind, &c, "std", name, &f(s.auc.std), &f(s.accuracy.std), &f(s.accuracy_at_k.std)])?;
        }
        if let Some(o) = &self.overlap {
            w.write_record([kind, &c, "mean", "overlap", "", &f(o.overlap.mean), ""])?;
            w.write_record([kind, &c, "std", "overlap", "", &f(o.overlap.std), ""])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Plain-text tables: per-branch AUC / Accuracy / Accuracy@K as
    /// mean(std), then the joint UAMAT / SP / Overlap accuracies.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Protocol: {}   C = {}   seeds: {:?}", self.kind, self.c, self.seeds);
        let _ = writeln!(out);
        let acc_k = format!("Accuracy@{}", self.k);
        let _ = writeln!(out, "{:<8} {:>14} {:>14} {:>14}", "Model", "AUC", "Accuracy", acc_k);
        for (name, s) in &self.summary {
            let auc = format!("{:.3}", s.auc);
            let acc = format!("{:.2}", s.accuracy);
            let at_k = format!("{:.2}", s.accuracy_at_k);
            let _ = writeln!(out, "{:<8} {:>14} {:>14} {:>14}", display_name(name), auc, acc, at_k);
        }
        if let Some(o) = &self.overlap {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<8} {:>14}", "Joint", "Accuracy");
            for (label, v) in [("UAMAT", o.uamat_accuracy), ("SP", o.sp_accuracy), ("Overlap", o.overlap)] {
                let _ = writeln!(out, "{:<8} {:>14}", label, format!("{v:.2}"));
            }
        }
        for row in &self.rows {
            if row.uamat_skipped > 0 {
                let _ = writeln!(out, "seed {}: {} test streams lacked UAMAT inputs", row.seed, row.uamat_skipped);
            }
            for (name, m) in &row.branches {
                if !m.auc_skipped.is_empty() {
                    let _ = writeln!(out, "seed {}: {} AUC skipped absent classes {:?}", row.seed, display_name(name), m.auc_skipped);
                }
            }
        }
        out
    }

    /// Writes `<stem>.json`, `<stem>.csv`, `<stem>.txt` and one
    /// `<stem>_confusion_<branch>.csv` per branch; returns the paths.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put(format!("{stem}.json"), self.to_json()?)?;
        put(format!("{stem}.csv"), self.to_csv()?)?;
        put(format!("{stem}.txt"), self.render_text())?;
        for (name, m) in &self.confusion {
            put(format!("{stem}_confusion_{name}.csv"), m.to_csv())?;
        }
        Ok(written)
    }

    pub fn branch(&self, seed_row: usize, name: &str) -> Option<&BranchMetrics> {
        self.rows.get(seed_row)?.branches.get(name)
    }
}

/// Several protocol cells as one table: rows = model, columns = protocol,
/// cells = accuracy mean(std).
pub fn render_grid(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let mut cols: Vec<(String, &EvalReport)> = reports.iter().map(|r| (format!("{} C={}", r.kind, r.c), r)).collect();
    cols.sort_by(|a, b| a.0.cmp(&b.0));
    let mut names: Vec<&String> = reports.iter().flat_map(|r| r.summary.keys()).collect();
    names.sort();
    names.dedup();
    let _ = write!(out, "{:<8}", "Model");
    for (c, _) in &cols {
        let _ = write!(out, " {c:>18}");
    }
    let _ = writeln!(out);
    for name in names {
        let _ = write!(out, "{:<8}", display_name(name));
        for (_, r) in &cols {
            let cell = r.summary.get(name).map(|s| format!("{:.2}", s.accuracy)).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>18}");
        }
        let _ = writeln!(out);
    }
    out
}

impl LocalGlobalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Local vs global SP, C = {}, seed {}", self.c, self.seed);
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>10} {:>10}", "Location", "train", "test", "Global", "Local");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>8} {:>10.2} {:>10.2}",
                r.location, r.n_train, r.n_test, r.global_accuracy, r.local_accuracy
            );
        }
        for (loc, n) in &self.skipped {
            let _ = writeln!(out, "skipped {loc}: {n} streams");
        }
        out
    }
}
