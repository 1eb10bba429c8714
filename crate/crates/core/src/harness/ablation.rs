//! Ablation grids: named cells of config overrides, expanded against a base
//! config, trained concurrently and summarized one row per cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Toggles};
use super::metrics::{write_merged_csv, MetricsRecord};
use super::report::{report, run_experiment};
use super::train::{load_data, train_with, EvalData, TrainData, TrainHooks};
use crate::error::{Error, Result};

/// One cell: a name and a partial config deep-merged over the base.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

/// A grid file. The shorthands expand to cells in this order: `chain`, then
/// one cell per `zeta`, then one per `pool`, then the explicit `cell`s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    /// Add the cumulative component chain MDA, +SPM, +SBC, +ASM, +SCR.
    pub chain: bool,
    pub zeta: Vec<f64>,
    pub pool: Vec<[usize; 2]>,
    pub cell: Vec<GridCell>,
    /// Concurrent cells; 0 means the available parallelism.
    pub workers: usize,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn chain() -> Self {
        Self {
            chain: true,
            ..Self::default()
        }
    }

    fn cells(&self) -> Result<Vec<GridCell>> {
        let mut cells = Vec::new();
        if self.chain {
            for (name, t) in Toggles::chain() {
                cells.push(GridCell {
                    name: name.into(),
                    set: single("toggles", toml::Value::try_from(t)?),
                });
            }
        }
        for z in &self.zeta {
            let mut lab = toml::Table::new();
            lab.insert("zeta".into(), toml::Value::Float(*z));
            cells.push(GridCell {
                name: format!("zeta={z}"),
                set: single("labeling", toml::Value::Table(lab)),
            });
        }
        for p in &self.pool {
            let mut cons = toml::Table::new();
            cons.insert("pool".into(), toml::Value::try_from(p)?);
            cells.push(GridCell {
                name: format!("pool={}x{}", p[0], p[1]),
                set: single("consistency", toml::Value::Table(cons)),
            });
        }
        cells.extend(self.cell.iter().cloned());
        if cells.is_empty() {
            return Err(Error::InvalidConfig("ablation grid has no cells".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &cells {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate grid cell `{}`", c.name)));
            }
        }
        Ok(cells)
    }

    /// Merges every cell over `base` and validates the result; nothing runs
    /// unless every cell is valid.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let base_v = toml::Value::try_from(base)?;
        self.cells()?
            .into_iter()
            .map(|c| {
                let mut v = base_v.clone();
                merge(&mut v, toml::Value::Table(c.set));
                let mut cfg: ExperimentConfig = v.try_into()?;
                cfg.name = c.name.clone();
                cfg.validate().map_err(|e| Error::InvalidConfig(format!("cell `{}`: {e}", c.name)))?;
                Ok((c.name, cfg))
            })
            .collect()
    }
}

fn single(key: &str, v: toml::Value) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert(key.into(), v);
    t
}

/// Tables merge key by key; any other value replaces.
pub fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub toggles: Toggles,
    pub zeta: f64,
    pub pool: [usize; 2],
    pub seed: u64,
    pub score: Option<f64>,
    pub dh_f2: Option<f64>,
    pub status: CellStatus,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Each cell's metrics history, in row order.
    pub histories: Vec<(String, Vec<MetricsRecord>)>,
}

pub const ABLATION_HEADER: [&str; 14] = [
    "cell", "base_da", "MDA", "SPM", "SBC", "ASM", "SCR", "zeta", "pool", "seed", "score", "dH_F2", "status", "message",
];

impl AblationReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == CellStatus::Ok)
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(ABLATION_HEADER)?;
        let mark = |b: bool| if b { "1" } else { "0" }.to_string();
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for r in &self.rows {
            let t = r.toggles;
            wr.write_record([
                r.cell.clone(),
                mark(t.base_da),
                mark(t.mda),
                mark(t.spm),
                mark(t.sbc),
                mark(t.asm),
                mark(t.scr),
                format!("{}", r.zeta),
                format!("{}x{}", r.pool[0], r.pool[1]),
                r.seed.to_string(),
                opt(r.score),
                opt(r.dh_f2),
                serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string(),
                r.message.clone().unwrap_or_default(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<ablation>", e))?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Paths written by [`run_ablation`] when given an output directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationFiles {
    pub table: PathBuf,
    pub metrics_csv: PathBuf,
    pub cell_dirs: Vec<PathBuf>,
}

fn dir_name(cell: &str) -> String {
    cell.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Trains every cell of `grid` over `base`. Cells sharing a data section
/// share one loaded dataset. A cell that fails is recorded in its row and
/// the others still run. With `out`, each cell gets its own run directory
/// and `ablation.csv` plus a merged `metrics.csv` and plots are written.
pub fn run_ablation(base: &ExperimentConfig, grid: &AblationGrid, out: Option<&Path>) -> Result<(AblationReport, Option<AblationFiles>)> {
    let cells = grid.expand(base)?;

    let mut datasets: BTreeMap<String, (TrainData, EvalData)> = BTreeMap::new();
    let mut keys = Vec::with_capacity(cells.len());
    for (_, cfg) in &cells {
        let key = serde_json::to_string(&cfg.data)?;
        if !datasets.contains_key(&key) {
            datasets.insert(key.clone(), load_data(cfg)?);
        }
        keys.push(key);
    }

    let workers = match grid.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cells.len());
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<(AblationRow, Vec<MetricsRecord>, Option<PathBuf>)>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some((name, cfg)) = cells.get(i) else { break };
                let (data, eval) = &datasets[&keys[i]];
                let dir = out.map(|o| o.join("cells").join(dir_name(name)));
                tracing::info!(cell = %name, "ablation cell started");
                let res = match &dir {
                    Some(d) => run_experiment(cfg, data, eval, d, &TrainHooks::default()).map(|(o, _)| o),
                    None => train_with(cfg, data, eval, &TrainHooks::default()),
                };
                let mut row = AblationRow {
                    cell: name.clone(),
                    toggles: cfg.toggles,
                    zeta: cfg.labeling.zeta,
                    pool: cfg.consistency.pool,
                    seed: cfg.seed,
                    score: None,
                    dh_f2: None,
                    status: CellStatus::Ok,
                    message: None,
                };
                let history = match res {
                    Ok(o) => {
                        let last = o.history.last();
                        row.score = last.and_then(|m| m.score);
                        row.dh_f2 = last.and_then(|m| m.dh_f2);
                        o.history
                    }
                    Err(e) => {
                        row.status = if matches!(e, Error::Diverged { .. }) { CellStatus::Diverged } else { CellStatus::Failed };
                        row.message = Some(e.to_string());
                        Vec::new()
                    }
                };
                tracing::info!(cell = %name, status = ?row.status, score = ?row.score, dh_f2 = ?row.dh_f2, "ablation cell finished");
                *results[i].lock().expect("result lock") = Some((row, history, dir));
            });
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    let mut histories = Vec::with_capacity(cells.len());
    let mut cell_dirs = Vec::new();
    for r in results {
        let (row, hist, dir) = r.into_inner().expect("result lock").expect("every cell ran");
        histories.push((row.cell.clone(), hist));
        rows.push(row);
        cell_dirs.extend(dir);
    }
    let rep = AblationReport { rows, histories };

    let files = match out {
        None => None,
        Some(o) => {
            fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
            let table = o.join("ablation.csv");
            rep.write_csv(fs::File::create(&table).map_err(|e| Error::io(&table, e))?)?;
            let ran: Vec<_> = rep.histories.iter().filter(|(_, h)| !h.is_empty()).cloned().collect();
            let metrics_csv = if ran.is_empty() {
                let p = o.join("metrics.csv");
                write_merged_csv(fs::File::create(&p).map_err(|e| Error::io(&p, e))?, &[])?;
                p
            } else {
                report(&ran, o)?.metrics_csv
            };
            Some(AblationFiles {
                table,
                metrics_csv,
                cell_dirs,
            })
        }
    };
    Ok((rep, files))
}
