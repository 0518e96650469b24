//! Aggregation of run logs and recovery histories into tables and
//! plot-ready series.
//!
//! Written files:
//!
//! | file                       | columns                                 |
//! |----------------------------|-----------------------------------------|
//! | `stages.csv`               | stage, accuracy, flops                  |
//! | `loss_vs_epoch.csv`        | source, epoch, tap, loss, accuracy      |
//! | `accuracy_vs_taps.csv`     | function, taps, accuracy, final_loss    |
//! | `accuracy_vs_function.csv` | taps, function, accuracy, final_loss    |
//! | `report.json`              | everything above plus config and version|
//! | `report.md`                | the same as markdown tables             |

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::TOOLKIT_VERSION;
use crate::error::{Error, Result};
use crate::pipeline::{AblationRow, Ckpt};
use crate::recovery::HistoryRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub accuracy: f64,
    pub flops: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Checkpoint or log the history came from.
    pub source: String,
    pub epoch: usize,
    pub tap: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub toolkit_version: String,
    pub config: Value,
    pub stages: Vec<StageRow>,
    pub loss: Vec<LossPoint>,
    pub ablation: Vec<AblationRow>,
}

const STAGE_EVENTS: [&str; 6] = ["train", "prune", "recover", "finetune", "iterative", "eval"];

impl Report {
    pub fn new() -> Self {
        Report {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config: Value::Null,
            ..Report::default()
        }
    }

    /// Folds in parsed run-log records.
    pub fn add_log(&mut self, source: &str, records: &[Value]) -> Result<()> {
        for r in records {
            let event = r.get("event").and_then(Value::as_str).unwrap_or_default();
            match event {
                "config" => {
                    let mut c = r.clone();
                    if let Some(m) = c.as_object_mut() {
                        m.remove("event");
                    }
                    self.config = c;
                }
                "ablation" => self.ablation.push(
                    serde_json::from_value(r.clone()).map_err(|e| Error::format("ablation record", e.to_string()))?,
                ),
                "recover_epoch" => {
                    if let (Some(epoch), Some(loss)) = (r["epoch"].as_u64(), r["loss"].as_f64()) {
                        self.loss.push(LossPoint {
                            source: source.to_string(),
                            epoch: epoch as usize,
                            tap: "mean".into(),
                            loss,
                            accuracy: r["accuracy"].as_f64(),
                        });
                    }
                }
                e if STAGE_EVENTS.contains(&e) => {
                    if let Some(acc) = r["accuracy"].as_f64() {
                        let stage = match r["stage"].as_str() {
                            Some(s) if e == "eval" => format!("eval:{s}"),
                            _ => e.to_string(),
                        };
                        self.stages.push(StageRow {
                            stage,
                            accuracy: acc,
                            flops: r["flops"].as_u64(),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Folds in a checkpoint's per-tap recovery history. Replaces any
    /// mean-only points already taken from a log under the same source.
    pub fn add_checkpoint(&mut self, source: &str, ck: &Ckpt) {
        if ck.history.is_empty() {
            return;
        }
        self.loss.retain(|p| p.source != source);
        self.loss.extend(ck.history.iter().map(|h: &HistoryRow| LossPoint {
            source: source.to_string(),
            epoch: h.epoch,
            tap: h.tap.clone(),
            loss: h.loss,
            accuracy: h.accuracy,
        }));
        if self.config.is_null() {
            self.config = ck.config.clone();
        }
    }

    fn by_taps(&self) -> Vec<&AblationRow> {
        let mut v: Vec<_> = self.ablation.iter().collect();
        v.sort_by(|a, b| (a.function.name(), a.taps).cmp(&(b.function.name(), b.taps)));
        v
    }

    fn by_function(&self) -> Vec<&AblationRow> {
        let mut v: Vec<_> = self.ablation.iter().collect();
        v.sort_by(|a, b| (a.taps, a.function.name()).cmp(&(b.taps, b.function.name())));
        v
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Run report\n\ntoolkit {}\n", self.toolkit_version);
        if !self.stages.is_empty() {
            s.push_str("## Stages\n\n| stage | accuracy | FLOPs |\n|---|---|---|\n");
            for r in &self.stages {
                let flops = r.flops.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
                let _ = writeln!(s, "| {} | {:.4} | {} |", r.stage, r.accuracy, flops);
            }
            s.push('\n');
        }
        if !self.ablation.is_empty() {
            s.push_str("## Recovery ablation\n\n| function | taps | nodes | accuracy | final loss | steps |\n|---|---|---|---|---|---|\n");
            for r in self.by_taps() {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.4} | {:.5} | {} |",
                    r.function.name(),
                    r.taps,
                    r.tap_ids.join(", "),
                    r.accuracy,
                    r.final_loss,
                    r.steps
                );
            }
            s.push('\n');
        }
        if !self.loss.is_empty() {
            s.push_str("## Final reconstruction loss per tap\n\n| source | tap | epoch | loss |\n|---|---|---|---|\n");
            let mut last: Vec<&LossPoint> = Vec::new();
            for p in &self.loss {
                match last.iter_mut().find(|q| q.source == p.source && q.tap == p.tap) {
                    Some(q) if q.epoch <= p.epoch => *q = p,
                    Some(_) => {}
                    None => last.push(p),
                }
            }
            for p in last {
                let _ = writeln!(s, "| {} | {} | {} | {:.6} |", p.source, p.tap, p.epoch, p.loss);
            }
            s.push('\n');
        }
        s.push_str("## Configuration\n\n```json\n");
        s.push_str(&serde_json::to_string_pretty(&self.config).expect("json value"));
        s.push_str("\n```\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("stages.csv"), self.stages.iter())?;
        write_csv(&dir.join("loss_vs_epoch.csv"), self.loss.iter())?;
        write_csv(&dir.join("accuracy_vs_taps.csv"), self.by_taps().into_iter().map(series_row))?;
        write_csv(
            &dir.join("accuracy_vs_function.csv"),
            self.by_function().into_iter().map(series_row),
        )?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format("report", e.to_string()))?;
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.md");
        std::fs::write(&p, self.markdown()).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Serialize)]
struct SeriesRow {
    function: &'static str,
    taps: usize,
    accuracy: f64,
    final_loss: f64,
}

fn series_row(r: &AblationRow) -> SeriesRow {
    SeriesRow {
        function: r.function.name(),
        taps: r.taps,
        accuracy: r.accuracy,
        final_loss: r.final_loss,
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: impl Iterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("csv", e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::MimicFunction;
    use serde_json::json;

    fn row(f: MimicFunction, taps: usize, acc: f64) -> Value {
        let mut v = serde_json::to_value(AblationRow {
            function: f,
            taps,
            tap_ids: vec!["a".into(); taps],
            accuracy: acc,
            final_loss: 0.1,
            steps: 8,
        })
        .unwrap();
        v["event"] = json!("ablation");
        v
    }

    #[test]
    fn series_are_sorted_per_axis() {
        let mut r = Report::new();
        let recs = vec![
            json!({"event": "config", "seed": 3}),
            json!({"event": "train", "accuracy": 0.9, "flops": 100}),
            json!({"event": "recover_epoch", "epoch": 0, "loss": 0.5, "accuracy": 0.7}),
            row(MimicFunction::Mse, 3, 0.8),
            row(MimicFunction::Kl, 3, 0.85),
            row(MimicFunction::Mse, 1, 0.7),
        ];
        r.add_log("run", &recs).unwrap();
        assert_eq!(r.config, json!({"seed": 3}));
        assert_eq!(r.stages.len(), 1);
        let taps: Vec<_> = r.by_taps().iter().map(|a| (a.function.name(), a.taps)).collect();
        assert_eq!(taps, [("kl", 3), ("mse", 1), ("mse", 3)]);
        let funcs: Vec<_> = r.by_function().iter().map(|a| (a.taps, a.function.name())).collect();
        assert_eq!(funcs, [(1, "mse"), (3, "kl"), (3, "mse")]);

        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("accuracy_vs_taps.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("function,taps,accuracy,final_loss"));
        assert_eq!(text.lines().count(), 4);
        assert!(std::fs::read_to_string(dir.path().join("report.md")).unwrap().contains("| mse | 1 |"));
    }
}
