use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Comparison, HeatmapTable, LossModeRow, PoolSizeRow};
use crate::error::{Error, Result};
use crate::pipeline::SpeedupCell;

/// Everything a bench run may produce; absent parts are not written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub heatmap: Option<HeatmapTable>,
    pub comparison: Option<Comparison>,
    pub pool_sizes: Option<Vec<PoolSizeRow>>,
    pub loss_modes: Option<Vec<LossModeRow>>,
    pub speedup: Option<Vec<SpeedupCell>>,
}

/// Header plus string cells, as written to and read from CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let bad = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?;
        Ok(Self { header, rows })
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn sets(xs: impl IntoIterator<Item = String>) -> String {
    xs.into_iter().collect::<Vec<_>>().join(";")
}

impl HeatmapTable {
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            ["task".to_string(), "prompts".to_string()]
                .into_iter()
                .chain((1..=self.n_blocks).map(|j| format!("block_{j}"))),
        );
        for ((name, n), rates) in self.tasks.iter().zip(&self.prompts).zip(&self.rates) {
            t.push(
                [name.clone(), n.to_string()]
                    .into_iter()
                    .chain(rates.iter().map(|&r| num(r)))
                    .collect(),
            );
        }
        t
    }

    /// Whitespace-separated `n_tasks x n_blocks` matrix for gnuplot `matrix` plots.
    pub fn to_matrix(&self) -> String {
        let mut s = format!(
            "# rows: {}\n# columns: blocks 1..{}\n",
            self.tasks.join(" "),
            self.n_blocks
        );
        for row in &self.rates {
            s.push_str(&row.iter().map(|&r| num(r)).collect::<Vec<_>>().join(" "));
            s.push('\n');
        }
        s
    }
}

impl Comparison {
    pub fn to_table(&self) -> CsvTable {
        let with_acc = self.rows.iter().all(|r| r.accuracy.is_some());
        let mut header = vec!["method".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("average".into());
        if with_acc {
            header.extend(self.tasks.iter().map(|t| format!("accuracy_{t}")));
        }
        header.extend(["omission".to_string(), "eval_hash".to_string()]);
        let mut t = CsvTable::new(header);
        for r in &self.rows {
            let mut row = vec![r.method.to_string()];
            row.extend(r.per_task.iter().map(|&x| num(x)));
            row.push(num(r.average));
            if let (true, Some(acc)) = (with_acc, &r.accuracy) {
                row.extend(acc.iter().map(|&x| num(x)));
            }
            row.push(sets(r.omission.iter().map(|s| s.to_string())));
            row.push(self.eval_hash.clone());
            t.push(row);
        }
        t
    }
}

fn pool_size_table(rows: &[PoolSizeRow]) -> CsvTable {
    let mut t = CsvTable::new([
        "size",
        "routed_average",
        "oracle_average",
        "oracle_regret",
        "router_regret",
        "entries",
    ]);
    for r in rows {
        t.push(vec![
            r.size.to_string(),
            num(r.routed_average),
            num(r.oracle_average),
            num(r.oracle_regret),
            num(r.router_regret),
            sets(r.entries.iter().map(|e| e.to_string())),
        ]);
    }
    t
}

fn loss_mode_table(rows: &[LossModeRow]) -> CsvTable {
    let mut t = CsvTable::new([
        "mode",
        "initial_loss",
        "final_loss",
        "floor",
        "converged",
        "routing_accuracy",
    ]);
    for r in rows {
        let mode = serde_json::to_value(r.mode).expect("enum serializes");
        t.push(vec![
            mode.as_str().unwrap_or_default().to_string(),
            num(r.initial_loss),
            num(r.final_loss),
            num(r.floor),
            r.converged.to_string(),
            num(r.routing_accuracy),
        ]);
    }
    t
}

fn speedup_table(cells: &[SpeedupCell]) -> CsvTable {
    let mut t = CsvTable::new([
        "prompt_len",
        "gen_len",
        "prompts",
        "dense_prefill_ms",
        "routed_prefill_ms",
        "dense_ms",
        "routed_ms",
        "router_ms",
        "ratio",
        "ratio_with_router",
    ]);
    for c in cells {
        t.push(vec![
            c.prompt_len.to_string(),
            c.gen_len.to_string(),
            c.prompts.to_string(),
            num(c.dense_prefill_ms),
            num(c.routed_prefill_ms),
            num(c.dense_ms),
            num(c.routed_ms),
            num(c.router_ms),
            num(c.ratio),
            num(c.ratio_with_router),
        ]);
    }
    t
}

/// Writes one CSV per result kind, `heatmap.dat` for heatmaps and
/// `bench.json` with everything. Returns the written paths in order.
pub fn emit_reports(results: &BenchResults, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(h) = &results.heatmap {
        files.push(("heatmap.csv", h.to_table().to_csv()));
        files.push(("heatmap.dat", h.to_matrix()));
    }
    if let Some(c) = &results.comparison {
        files.push(("comparison.csv", c.to_table().to_csv()));
    }
    if let Some(p) = &results.pool_sizes {
        files.push(("pool_size.csv", pool_size_table(p).to_csv()));
    }
    if let Some(l) = &results.loss_modes {
        files.push(("loss_mode.csv", loss_mode_table(l).to_csv()));
    }
    if let Some(s) = &results.speedup {
        files.push(("speedup.csv", speedup_table(s).to_csv()));
    }
    let mut json = serde_json::to_string_pretty(results)?;
    json.push('\n');
    files.push(("bench.json", json));

    files
        .into_iter()
        .map(|(name, body)| {
            let path = out_dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{ComparisonRow, Method};
    use crate::losses::Criterion;
    use crate::model::OmissionSet;

    fn results() -> BenchResults {
        BenchResults {
            heatmap: Some(HeatmapTable {
                tasks: vec!["a".into(), "b,c".into()],
                n_blocks: 4,
                k: 1,
                prompts: vec![3, 2],
                rates: vec![vec![1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]],
                skipped: vec![],
            }),
            comparison: Some(Comparison {
                criterion: Criterion::Tl,
                eval_hash: "ff".into(),
                tasks: vec!["a".into()],
                rows: vec![ComparisonRow {
                    method: Method::StaticGlobal,
                    omission: vec![OmissionSet::new([2]).unwrap()],
                    per_task: vec![0.1 + 0.2],
                    average: 0.1 + 0.2,
                    accuracy: None,
                }],
            }),
            ..BenchResults::default()
        }
    }

    #[test]
    fn csv_round_trip() {
        let r = results();
        for table in [
            r.heatmap.as_ref().unwrap().to_table(),
            r.comparison.as_ref().unwrap().to_table(),
        ] {
            let text = table.to_csv();
            assert!(!text.contains('\r'));
            assert_eq!(CsvTable::parse(&text).unwrap(), table);
        }
        let parsed = CsvTable::parse(&r.heatmap.unwrap().to_table().to_csv()).unwrap();
        assert_eq!(parsed.rows[0][2].parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn files_are_stable_and_matrix_has_task_rows() {
        let dir = tempfile::tempdir().unwrap();
        let a = emit_reports(&results(), &dir.path().join("a")).unwrap();
        let b = emit_reports(&results(), &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let matrix = std::fs::read_to_string(dir.path().join("a/heatmap.dat")).unwrap();
        let rows: Vec<&str> = matrix.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.split_whitespace().count() == 4));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(
            emit_reports(&results(), &file.join("sub")),
            Err(Error::Io { .. })
        ));
    }
}
