//! Trajectory error, runtime reporting and model comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::model::{Measurement, Timestamp};
use crate::pipeline::{run, EpochResult, ModelSelector, PipelineConfig, ESTIMATE_HEADER};
use crate::stream::TruthRecord;

/// Position of one trajectory sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub time: Timestamp,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn trajectory_from_results(results: &[EpochResult]) -> Vec<TrajectoryPoint> {
    results.iter().map(|r| TrajectoryPoint { time: r.time, x: r.pose.x, y: r.pose.y, z: r.pose.z }).collect()
}

pub fn trajectory_from_truth(truth: &[TruthRecord]) -> Vec<TrajectoryPoint> {
    truth.iter().map(|t| TrajectoryPoint { time: t.time, x: t.pose.x, y: t.pose.y, z: t.pose.z }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteReport {
    pub mean: f64,
    pub median: f64,
    /// Horizontal error per estimated epoch.
    pub series: Vec<(Timestamp, f64)>,
    /// Total pipeline runtime in seconds.
    pub runtime: f64,
}

/// Horizontal position error of every estimate against the truth sample
/// with exactly the same timestamp. No alignment is applied.
pub fn ate(estimates: &[TrajectoryPoint], truth: &[TrajectoryPoint], runtime: f64) -> Result<AteReport> {
    let mut index: BTreeMap<Timestamp, &TrajectoryPoint> = BTreeMap::new();
    for t in truth {
        index.entry(t.time).or_insert(t);
    }
    let mut series = Vec::with_capacity(estimates.len());
    for e in estimates {
        let t = index.get(&e.time).ok_or(Error::MissingTruth(e.time.0))?;
        let err = (e.x - t.x).hypot(e.y - t.y);
        if !err.is_finite() {
            return invalid(format!("non-finite trajectory error at t = {}", e.time));
        }
        series.push((e.time, err));
    }
    let n = series.len();
    let (mean, median) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mut sorted: Vec<f64> = series.iter().map(|s| s.1).collect();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        (sorted.iter().sum::<f64>() / n as f64, median)
    };
    Ok(AteReport { mean, median, series, runtime })
}

/// Report for a finished pipeline run; runtime is the sum of epoch runtimes.
pub fn ate_of_results(results: &[EpochResult], truth: &[TruthRecord]) -> Result<AteReport> {
    let runtime = results.iter().map(|r| r.runtime).sum();
    ate(&trajectory_from_results(results), &trajectory_from_truth(truth), runtime)
}

/// One row of an estimates CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateRow {
    pub point: TrajectoryPoint,
    pub phi: f64,
    pub delta: f64,
    pub delta_dot: f64,
    pub k: usize,
    pub runtime: f64,
}

/// Parse the CSV written by [`crate::pipeline::estimates_csv`].
pub fn parse_estimates_csv(text: &str) -> Result<Vec<EstimateRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ESTIMATE_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header `{ESTIMATE_HEADER}`") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse { line: line_no, message: format!("expected 9 fields, found {}", f.len()) });
        }
        let num = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse { line: line_no, message: format!("bad number `{s}`: {e}") })
        };
        let k = f[7]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Parse { line: line_no, message: format!("bad component count `{}`: {e}", f[7]) })?;
        let time = Timestamp::new(num(f[0])?).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        rows.push(EstimateRow {
            point: TrajectoryPoint { time, x: num(f[1])?, y: num(f[2])?, z: num(f[3])? },
            phi: num(f[4])?,
            delta: num(f[5])?,
            delta_dot: num(f[6])?,
            k,
            runtime: num(f[8])?,
        });
    }
    Ok(rows)
}

/// Mean ATE and runtime of one model on one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub ate: f64,
    pub time: f64,
}

/// Models as rows, datasets as column pairs (ATE, time).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonTable {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    /// `cells[model][dataset]`
    pub cells: Vec<Vec<Option<Cell>>>,
}

impl ComparisonTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn index_of(list: &mut Vec<String>, name: &str) -> Result<usize> {
        if name.is_empty() || name.contains([',', '\n']) {
            return invalid(format!("table labels must be non-empty without commas or newlines: `{name}`"));
        }
        Ok(match list.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                list.push(name.to_string());
                list.len() - 1
            }
        })
    }

    /// Insert or replace one cell.
    pub fn insert(&mut self, dataset: &str, model: &str, cell: Cell) -> Result<()> {
        let d = Self::index_of(&mut self.datasets, dataset)?;
        let m = Self::index_of(&mut self.models, model)?;
        self.cells.resize(self.models.len(), Vec::new());
        for row in &mut self.cells {
            row.resize(self.datasets.len(), None);
        }
        self.cells[m][d] = Some(cell);
        Ok(())
    }

    pub fn get(&self, dataset: &str, model: &str) -> Option<Cell> {
        let d = self.datasets.iter().position(|n| n == dataset)?;
        let m = self.models.iter().position(|n| n == model)?;
        self.cells[m][d]
    }

    /// Row index of the lowest ATE in a dataset column; ties go to the
    /// earlier row.
    pub fn best(&self, dataset: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (m, row) in self.cells.iter().enumerate() {
            if let Some(c) = row.get(dataset).copied().flatten() {
                if best.is_none_or(|(_, a)| c.ate < a) {
                    best = Some((m, c.ate));
                }
            }
        }
        best.map(|(m, _)| m)
    }

    /// Aligned text table; the best ATE of each dataset is marked with `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Model".to_string()];
        for d in &self.datasets {
            header.push(format!("{d} ATE [m]"));
            header.push(format!("{d} Time [s]"));
        }
        let best: Vec<Option<usize>> = (0..self.datasets.len()).map(|d| self.best(d)).collect();
        let mut rows = vec![header];
        for (m, name) in self.models.iter().enumerate() {
            let mut row = vec![name.clone()];
            for d in 0..self.datasets.len() {
                match self.cells[m][d] {
                    Some(c) => {
                        let mark = if best[d] == Some(m) { "*" } else { "" };
                        row.push(format!("{}{mark}", format_sig(c.ate)));
                        row.push(format_sig(c.time));
                    }
                    None => {
                        row.push("-".into());
                        row.push("-".into());
                    }
                }
            }
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// CSV with header `model,<dataset>:ate_m,<dataset>:time_s,...`;
    /// missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for d in &self.datasets {
            write!(out, ",{d}:ate_m,{d}:time_s").unwrap();
        }
        out.push('\n');
        for (m, name) in self.models.iter().enumerate() {
            out.push_str(name);
            for c in &self.cells[m] {
                match c {
                    Some(c) => write!(out, ",{},{}", c.ate, c.time).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty table".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"model") || cols.len() % 2 != 1 {
            return Err(perr(1, "header must be `model` followed by ate/time column pairs".into()));
        }
        let mut datasets = Vec::new();
        for pair in cols[1..].chunks(2) {
            let d = pair[0]
                .strip_suffix(":ate_m")
                .filter(|d| pair[1].strip_suffix(":time_s") == Some(*d))
                .ok_or_else(|| perr(1, format!("bad column pair `{},{}`", pair[0], pair[1])))?;
            datasets.push(d.to_string());
        }
        let mut table = ComparisonTable { datasets, models: Vec::new(), cells: Vec::new() };
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(perr(i + 1, format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let mut row = Vec::with_capacity(table.datasets.len());
            for pair in f[1..].chunks(2) {
                row.push(match (pair[0], pair[1]) {
                    ("", "") => None,
                    (a, t) => {
                        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(i + 1, format!("bad number `{s}`: {e}")));
                        Some(Cell { ate: num(a)?, time: num(t)? })
                    }
                });
            }
            table.models.push(f[0].to_string());
            table.cells.push(row);
        }
        Ok(table)
    }
}

/// Three significant digits, never in exponent form.
fn format_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = (2 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.digits$}")
}

/// Table with one row per model for a single dataset.
pub fn compare(dataset: &str, runs: &[(ModelSelector, AteReport)]) -> Result<ComparisonTable> {
    let mut table = ComparisonTable::new();
    for (m, r) in runs {
        table.insert(dataset, m.label(), Cell { ate: r.mean, time: r.runtime })?;
    }
    Ok(table)
}

/// Outcome of one model in a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub model: ModelSelector,
    pub results: Vec<EpochResult>,
    pub report: AteReport,
    /// Wall-clock seconds of the whole run.
    pub wall_time: f64,
}

/// Run several models on the same stream, `threads` at a time. Runs share
/// nothing mutable; output order follows `models`.
pub fn sweep(
    measurements: &[Measurement],
    truth: &[TruthRecord],
    models: &[ModelSelector],
    base: &PipelineConfig,
    threads: usize,
) -> Result<Vec<SweepRun>> {
    let threads = threads.max(1);
    let one = |model: ModelSelector| -> Result<SweepRun> {
        let cfg = PipelineConfig { model, ..base.clone() };
        let start = Instant::now();
        let results = run(measurements, &cfg)?;
        let wall_time = start.elapsed().as_secs_f64();
        let report = ate_of_results(&results, truth)?;
        Ok(SweepRun { model, results, report, wall_time })
    };
    let mut out = Vec::with_capacity(models.len());
    for chunk in models.chunks(threads) {
        let batch: Vec<Result<SweepRun>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&m| s.spawn(move || one(m))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::NumericalFailure("sweep worker panicked".into()))))
                .collect()
        });
        for r in batch {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Published urban-driving results (mean ATE in m, runtime in s) for the
/// seven model rows over five datasets, kept as a rendering fixture.
pub fn reference_urban_results() -> ComparisonTable {
    let datasets = ["Chemnitz", "Berlin PP", "Berlin GM", "Frankfurt MT", "Frankfurt WT"];
    let rows: [(&str, [(f64, f64); 5]); 7] = [
        ("Gaussian", [(30.0, 58.6), (29.2, 9.5), (13.38, 49.7), (30.97, 58.1), (23.54, 31.9)]),
        ("DCS", [(4.403, 54.9), (25.04, 14.7), (19.11, 64.5), (13.25, 69.5), (11.39, 35.2)]),
        ("cDCE", [(4.326, 54.5), (17.91, 14.3), (14.59, 65.3), (14.93, 73.6), (11.12, 34.9)]),
        ("SM+EM", [(2.378, 102.0), (12.45, 39.8), (13.88, 163.0), (10.72, 136.0), (6.42, 76.5)]),
        ("SM+VBI", [(3.106, 119.0), (12.4, 33.3), (13.55, 186.0), (11.23, 131.0), (4.117, 84.4)]),
        ("SM+EM+CL", [(6.723, 172.0), (12.23, 45.0), (13.37, 312.0), (10.41, 214.0), (9.706, 152.0)]),
        ("IVM", [(2.48, 122.0), (11.56, 59.4), (10.99, 352.0), (8.586, 248.0), (4.626, 146.0)]),
    ];
    let mut table = ComparisonTable::new();
    for (model, cells) in rows {
        for (d, (ate, time)) in datasets.iter().zip(cells) {
            table.insert(d, model, Cell { ate, time }).expect("fixture labels are valid");
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(t: f64, x: f64, y: f64, z: f64) -> TrajectoryPoint {
        TrajectoryPoint { time: Timestamp(t), x, y, z }
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t: Vec<_> = (0..10).map(|i| point(i as f64, i as f64, 2.0 * i as f64, 1.0)).collect();
        let r = ate(&t, &t, 0.0).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.median, 0.0);
        assert_eq!(r.series.len(), 10);
    }

    #[test]
    fn constant_offset_gives_three_four_five() {
        let truth: Vec<_> = (0..5).map(|i| point(i as f64, 0.0, 0.0, 0.0)).collect();
        let est: Vec<_> = (0..5).map(|i| point(i as f64, 3.0, 4.0, 100.0 * i as f64)).collect();
        let r = ate(&est, &truth, 1.5).unwrap();
        assert!(r.series.iter().all(|(_, e)| (*e - 5.0).abs() < 1e-12));
        assert!((r.mean - 5.0).abs() < 1e-12);
        assert_eq!(r.runtime, 1.5);
    }

    #[test]
    fn missing_truth_names_timestamp() {
        let truth = vec![point(0.0, 0.0, 0.0, 0.0)];
        let est = vec![point(0.0, 0.0, 0.0, 0.0), point(2.5, 0.0, 0.0, 0.0)];
        match ate(&est, &truth, 0.0) {
            Err(Error::MissingTruth(t)) => assert_eq!(t, 2.5),
            other => panic!("expected missing truth, got {other:?}"),
        }
    }

    #[test]
    fn median_of_even_count_averages() {
        let truth: Vec<_> = (0..4).map(|i| point(i as f64, 0.0, 0.0, 0.0)).collect();
        let est: Vec<_> = (0..4).map(|i| point(i as f64, i as f64, 0.0, 0.0)).collect();
        assert_eq!(ate(&est, &truth, 0.0).unwrap().median, 1.5);
    }

    #[test]
    fn reference_table_flags_best_per_dataset() {
        let t = reference_urban_results();
        assert_eq!(t.datasets.len(), 5);
        assert_eq!(t.models.len(), 7);
        let best: Vec<&str> = (0..5).map(|d| t.models[t.best(d).unwrap()].as_str()).collect();
        assert_eq!(best, ["SM+EM", "IVM", "IVM", "IVM", "SM+VBI"]);
        assert_eq!(t.get("Chemnitz", "Gaussian").unwrap().ate, 30.0);
        assert_eq!(t.get("Chemnitz", "IVM").unwrap().ate, 2.48);
        let text = t.to_text();
        assert!(text.contains("2.38*"));
        assert!(text.contains("Chemnitz ATE [m]"));
        let header_cols = text.lines().next().unwrap().matches("[m]").count();
        assert_eq!(header_cols, 5);
        assert_eq!(text.lines().next().unwrap().matches("Time [s]").count(), 5);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = reference_urban_results();
        t.insert("Synthetic", "IVM", Cell { ate: 0.123456789, time: 1.0 / 3.0 }).unwrap();
        let back = ComparisonTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(back.get("Synthetic", "Gaussian").is_none());
    }

    #[test]
    fn rejects_bad_labels_and_csv() {
        let mut t = ComparisonTable::new();
        assert!(t.insert("a,b", "m", Cell { ate: 1.0, time: 1.0 }).is_err());
        assert!(ComparisonTable::from_csv("nope\n").is_err());
        assert!(ComparisonTable::from_csv("model,a:ate_m,b:time_s\n").is_err());
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(2.378), "2.38");
        assert_eq!(format_sig(30.0), "30.0");
        assert_eq!(format_sig(352.0), "352");
        assert_eq!(format_sig(0.01234), "0.0123");
    }

    #[test]
    fn estimates_csv_parses() {
        let text = format!("{ESTIMATE_HEADER}\n0,1,2,3,0.1,5,0.5,2,0.01\n1,1.5,2,3,0.1,5,0.5,3,0.02\n");
        let rows = parse_estimates_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].k, 3);
        assert_eq!(rows[1].point.x, 1.5);
        assert!(parse_estimates_csv("time,x\n").is_err());
        assert!(matches!(parse_estimates_csv(&format!("{ESTIMATE_HEADER}\n0,1\n")), Err(Error::Parse { line: 2, .. })));
    }
}
