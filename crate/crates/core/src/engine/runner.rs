//! Run directories, overlap sweeps and alignment sweeps.

use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::ExperimentConfig;
use super::trainer::{CollectObserver, MetricsRecord, RunObserver, RunSummary, Trainer, METRICS_CSV_HEADER};
use crate::data::{load_dataset, Dataset};
use crate::diagnostics::{memory_report, AlignmentSample, ALIGNMENT_CSV_HEADER};
use crate::error::{Error, Result};
use crate::masking::Strategy;
use crate::model::save_checkpoint;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

struct CsvObserver {
    metrics: BufWriter<File>,
    alignment: BufWriter<File>,
}

impl RunObserver for CsvObserver {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.metrics, "{}", record.csv_row())?;
        Ok(())
    }

    fn alignment(&mut self, samples: &[AlignmentSample]) -> Result<()> {
        for s in samples {
            writeln!(self.alignment, "{}", s.csv_row())?;
        }
        Ok(())
    }
}

/// Trains one configuration and writes its run directory: config copy,
/// seed, masks, memory report, metrics and alignment CSVs, summary and the
/// final checkpoint.
pub fn execute(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let dataset = Arc::new(load_dataset(&config.dataset)?);
    execute_with(config, dataset, out)
}

pub fn execute_with(config: &ExperimentConfig, dataset: Arc<Dataset>, out: &Path) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;
    fs::write(out.join("seed.txt"), format!("{}\n", config.seed))?;
    fs::write(out.join("masks.json"), trainer.assignment.to_json()?)?;
    let memory = memory_report(
        &trainer.model.topology,
        &trainer.assignment,
        config.optimizer.state_per_param(),
    );
    fs::write(out.join("memory.json"), serde_json::to_string_pretty(&memory)?)?;
    let mut obs = CsvObserver {
        metrics: BufWriter::new(File::create(out.join(METRICS_FILE))?),
        alignment: BufWriter::new(File::create(out.join(ALIGNMENT_FILE))?),
    };
    writeln!(obs.metrics, "{METRICS_CSV_HEADER}")?;
    writeln!(obs.alignment, "{ALIGNMENT_CSV_HEADER}")?;
    let summary = trainer.run(&mut obs)?;
    obs.metrics.flush()?;
    obs.alignment.flush()?;
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    save_checkpoint(&trainer.model, &out.join("theta.bin"))?;
    Ok(summary)
}

/// Re-runs the configuration stored in a run directory into `out`.
pub fn rerun(run_dir: &Path, out: &Path) -> Result<RunSummary> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    execute(&config, out)
}

/// One cell of the overlap table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub overlap: usize,
    pub ratio: f64,
    pub final_eval_acc: f64,
    pub total_steps: usize,
    pub run_dir: Option<PathBuf>,
}

/// Final accuracies laid out as rows of strategies and columns of P/N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub workers: usize,
    pub overlaps: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, strategy: Strategy, overlap: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.overlap == overlap)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.overlaps.iter().map(|&p| p as f64 / self.workers as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy");
        for r in self.ratios() {
            s.push_str(&format!(",{r:.3}"));
        }
        s.push('\n');
        for &st in &self.strategies {
            s.push_str(st.as_str());
            for &p in &self.overlaps {
                let acc = self.cell(st, p).map_or(String::new(), |c| format!("{:.2}", 100.0 * c.final_eval_acc));
                s.push_str(&format!(",{acc}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let ratios = self.ratios();
        let mut s = String::from("| strategy |");
        for r in &ratios {
            s.push_str(&format!(" P/N={r:.3} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(ratios.len()));
        s.push('\n');
        for &st in &self.strategies {
            s.push_str(&format!("| {st} |"));
            for &p in &self.overlaps {
                match self.cell(st, p) {
                    Some(c) => s.push_str(&format!(" {:.2} |", 100.0 * c.final_eval_acc)),
                    None => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every (strategy, P) cell with FLOP matching as configured. The P = N
/// baseline has all-ones masks under either strategy, so it runs once and
/// fills both rows.
pub fn sweep(config: &ExperimentConfig, overlaps: &[usize], strategies: &[Strategy], out: Option<&Path>) -> Result<SweepTable> {
    if overlaps.is_empty() || strategies.is_empty() {
        return Err(Error::config("sweep needs at least one overlap and one strategy"));
    }
    let dataset = Arc::new(load_dataset(&config.dataset)?);
    let mut cells = Vec::new();
    let mut baseline: Option<SweepCell> = None;
    for &strategy in strategies {
        for &p in overlaps {
            let cfg = config.with_overlap(p, strategy);
            cfg.validate()?;
            if p == config.workers {
                if let Some(b) = &baseline {
                    cells.push(SweepCell { strategy, ..b.clone() });
                    continue;
                }
            }
            let dir = out.map(|o| {
                if p == config.workers {
                    o.join(format!("dp_p{p}"))
                } else {
                    o.join(format!("{strategy}_p{p}"))
                }
            });
            let summary = match &dir {
                Some(d) => execute_with(&cfg, dataset.clone(), d)?,
                None => Trainer::new(cfg, dataset.clone())?.run(&mut CollectObserver::default())?,
            };
            let cell = SweepCell {
                strategy,
                overlap: p,
                ratio: p as f64 / config.workers as f64,
                final_eval_acc: summary.final_eval_acc,
                total_steps: summary.total_steps,
                run_dir: dir,
            };
            if p == config.workers {
                baseline = Some(cell.clone());
            }
            cells.push(cell);
        }
    }
    let table = SweepTable {
        workers: config.workers,
        overlaps: overlaps.to_vec(),
        strategies: strategies.to_vec(),
        cells,
    };
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("results.csv"), table.to_csv())?;
        fs::write(o.join("results.md"), table.to_markdown())?;
        fs::write(o.join("results.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

/// Short trainings for every (P, strategy) with alignment logging on.
pub fn alignment_sweep(config: &ExperimentConfig, overlaps: &[usize], strategies: &[Strategy]) -> Result<Vec<AlignmentSample>> {
    if config.alignment.every == 0 || config.alignment.layers.is_empty() {
        return Err(Error::config("alignment sweep needs alignment.every > 0 and at least one layer"));
    }
    let dataset = Arc::new(load_dataset(&config.dataset)?);
    let mut all = Vec::new();
    for &strategy in strategies {
        for &p in overlaps {
            let mut trainer = Trainer::new(config.with_overlap(p, strategy), dataset.clone())?;
            let mut obs = CollectObserver::default();
            trainer.run(&mut obs)?;
            all.extend(obs.alignment);
        }
    }
    Ok(all)
}

pub fn write_alignment_csv(samples: &[AlignmentSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{ALIGNMENT_CSV_HEADER}")?;
    for s in samples {
        writeln!(w, "{}", s.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Digest of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub final_eval_acc: Option<f64>,
    pub best_eval_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub alignment_mean: Option<f64>,
    pub alignment_min: Option<f64>,
    pub alignment_max: Option<f64>,
    pub alignment_absent: usize,
}

fn parse_field(s: &str, what: &str, row: usize) -> Result<Option<f64>> {
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Data(format!("{what} {s:?} on line {row} is not a number")))
}

/// Summarizes the metrics and alignment CSVs of a run directory.
pub fn report(run_dir: &Path) -> Result<RunReport> {
    let metrics_path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", metrics_path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_CSV_HEADER) {
        return Err(Error::Data(format!("{} has an unexpected header", metrics_path.display())));
    }
    let (mut steps, mut final_acc, mut best, mut loss) = (0, None, None::<f64>, None);
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!("line {} of metrics.csv has {} fields", i + 2, f.len())));
        }
        steps = f[0].parse().map_err(|_| Error::Data(format!("bad step on line {}", i + 2)))?;
        if let Some(acc) = parse_field(f[4], "eval_acc", i + 2)? {
            final_acc = Some(acc);
            best = Some(best.map_or(acc, |b: f64| b.max(acc)));
        }
        if let Some(l) = parse_field(f[3], "train_loss_mean", i + 2)? {
            loss = Some(l);
        }
    }
    let mut cos = Vec::new();
    let mut absent = 0;
    if let Ok(text) = fs::read_to_string(run_dir.join(ALIGNMENT_FILE)) {
        for (i, line) in text.lines().skip(1).enumerate() {
            let last = line.rsplit(',').next().unwrap_or("");
            match parse_field(last, "cosine", i + 2)? {
                Some(c) => cos.push(c),
                None => absent += 1,
            }
        }
    }
    Ok(RunReport {
        run_dir: run_dir.to_path_buf(),
        steps,
        final_eval_acc: final_acc,
        best_eval_acc: best,
        final_train_loss: loss,
        alignment_mean: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
        alignment_min: cos.iter().copied().reduce(f64::min),
        alignment_max: cos.iter().copied().reduce(f64::max),
        alignment_absent: absent,
    })
}
