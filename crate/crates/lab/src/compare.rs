//! Cross-seed curves, summary tables and the SVG plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{Equalize, ExperimentConfig};
use crate::kv::KvError;
use crate::runner::{RunRow, CSV_HEADER};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Meta { path: PathBuf, source: KvError },
    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },
    #[error("{0}: no seed CSVs")]
    Empty(PathBuf),
    #[error("record sets mix x-axis accounting ({0} vs {1})")]
    MixedAccounting(Equalize, Equalize),
    #[error("nothing to compare")]
    NoRecords,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub label: String,
    pub algorithm: String,
    pub equalize_by: Equalize,
    /// `(seed, rows)` sorted by seed.
    pub seeds: Vec<(u64, Vec<RunRow>)>,
}

fn read_rows(path: &Path) -> Result<Vec<RunRow>, CompareError> {
    let text = fs::read_to_string(path).map_err(|source| CompareError::Io {
        path: path.into(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(CompareError::Csv {
            path: path.into(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            RunRow::from_csv(l).map_err(|message| CompareError::Csv {
                path: path.into(),
                line: i + 2,
                message,
            })
        })
        .collect()
}

/// Reads `run.meta` and every `seed_<n>.csv` in `dir`.
pub fn load_record_set(dir: &Path) -> Result<RecordSet, CompareError> {
    let meta_path = dir.join("run.meta");
    let meta = fs::read_to_string(&meta_path).map_err(|source| CompareError::Io {
        path: meta_path.clone(),
        source,
    })?;
    let config = ExperimentConfig::parse(&meta).map_err(|source| CompareError::Meta {
        path: meta_path,
        source,
    })?;
    let entries = fs::read_dir(dir).map_err(|source| CompareError::Io {
        path: dir.into(),
        source,
    })?;
    let mut seeds = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let seed = name
            .strip_prefix("seed_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(seed) = seed {
            seeds.push((seed, read_rows(&entry.path())?));
        }
    }
    if seeds.is_empty() {
        return Err(CompareError::Empty(dir.into()));
    }
    seeds.sort_by_key(|(s, _)| *s);
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| config.algorithm.to_string());
    Ok(RecordSet {
        label,
        algorithm: config.algorithm.to_string(),
        equalize_by: config.equalize_by,
        seeds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub update: usize,
    /// Mean over seeds of the accounting column.
    pub x: f64,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub algorithm: String,
    pub seeds: usize,
    pub updates: usize,
    pub window: usize,
    pub final_mean_return: f64,
    pub final_std_return: f64,
    pub diff_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub equalize_by: Equalize,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub summary: Vec<SummaryRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Curves run up to the shortest seed; the final window covers each seed's
/// last `window` rows.
pub fn compare(sets: &[RecordSet], window: usize) -> Result<Comparison, CompareError> {
    let first = sets.first().ok_or(CompareError::NoRecords)?;
    if let Some(s) = sets.iter().find(|s| s.equalize_by != first.equalize_by) {
        return Err(CompareError::MixedAccounting(first.equalize_by, s.equalize_by));
    }
    let by = first.equalize_by;
    let window = window.max(1);
    let mut curves = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    for set in sets {
        let len = set.seeds.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
        let points = (0..len)
            .map(|k| {
                let xs: Vec<f64> = set.seeds.iter().map(|(_, r)| r[k].budget(by) as f64).collect();
                let ys: Vec<f64> = set.seeds.iter().map(|(_, r)| r[k].mean_return).collect();
                let (mean, std) = mean_std(&ys);
                CurvePoint {
                    update: k + 1,
                    x: mean_std(&xs).0,
                    mean,
                    std,
                }
            })
            .collect();
        let finals: Vec<f64> = set
            .seeds
            .iter()
            .map(|(_, r)| {
                let tail = &r[r.len().saturating_sub(window)..];
                tail.iter().map(|row| row.mean_return).sum::<f64>() / tail.len().max(1) as f64
            })
            .collect();
        let (fm, fs) = mean_std(&finals);
        let base = summary.first().map_or(fm, |s| s.final_mean_return);
        summary.push(SummaryRow {
            label: set.label.clone(),
            algorithm: set.algorithm.clone(),
            seeds: set.seeds.len(),
            updates: len,
            window,
            final_mean_return: fm,
            final_std_return: fs,
            diff_vs_first: fm - base,
        });
        curves.push((set.label.clone(), points));
    }
    // distinct labels for the legend
    for i in 1..curves.len() {
        let dup = curves[..i].iter().filter(|(l, _)| *l == curves[i].0).count();
        if dup > 0 {
            let l = format!("{}#{}", curves[i].0, dup + 1);
            curves[i].0 = l.clone();
            summary[i].label = l;
        }
    }
    Ok(Comparison {
        equalize_by: by,
        curves,
        summary,
    })
}

pub const SUMMARY_HEADER: &str =
    "label,algorithm,seeds,updates,final_window,final_mean_return,final_std_return,diff_vs_first";
pub const CURVES_HEADER: &str = "label,update,x,mean_return,std_return";

impl Comparison {
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.label, r.algorithm, r.seeds, r.updates, r.window, r.final_mean_return, r.final_std_return, r.diff_vs_first
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = format!("{CURVES_HEADER}\n");
        for (label, pts) in &self.curves {
            for p in pts {
                let _ = writeln!(s, "{label},{},{},{},{}", p.update, p.x, p.mean, p.std);
            }
        }
        s
    }

    /// Writes `summary.csv`, `curves.csv` and `plot.svg`.
    pub fn write(&self, dir: &Path, smooth: usize) -> Result<(), CompareError> {
        let io = |path: PathBuf| move |source| CompareError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.into()))?;
        for (name, body) in [
            ("summary.csv", self.summary_csv()),
            ("curves.csv", self.curves_csv()),
            ("plot.svg", crate::svg::plot(self, smooth)),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(p.clone()))?;
        }
        Ok(())
    }
}
