//! Per-interval metrics and their fixed-column CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerms;

pub const METRICS_HEADER: [&str; 13] = [
    "iter", "L_det", "L_Sl", "L_Sm", "L_Sg", "L_l", "L_m", "L_g", "L_CR", "L_all", "dH_F2", "score", "seconds",
];

/// One logging interval. Loss columns are interval means; disabled
/// components and unmeasured quantities are `None` and written as empty
/// cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub losses: LossTerms<f64>,
    pub l_all: Option<f64>,
    pub dh_f2: Option<f64>,
    pub score: Option<f64>,
    pub seconds: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidConfig(format!("bad metrics cell `{s}`: {e}")))
}

impl MetricsRecord {
    pub fn row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut out = vec![self.iter.to_string()];
        out.extend([l.det, l.s_local, l.s_mid, l.s_global, l.local, l.mid, l.global, l.cr].map(cell));
        out.extend([self.l_all, self.dh_f2, self.score, self.seconds].map(cell));
        out
    }

    pub fn from_row(cells: &[&str]) -> Result<Self> {
        if cells.len() != METRICS_HEADER.len() {
            return Err(Error::InvalidConfig(format!("metrics row has {} cells, expected {}", cells.len(), METRICS_HEADER.len())));
        }
        let c = |i: usize| parse_cell(cells[i]);
        Ok(Self {
            iter: cells[0]
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("bad iteration `{}`: {e}", cells[0])))?,
            losses: LossTerms {
                det: c(1)?,
                s_local: c(2)?,
                s_mid: c(3)?,
                s_global: c(4)?,
                local: c(5)?,
                mid: c(6)?,
                global: c(7)?,
                cr: c(8)?,
            },
            l_all: c(9)?,
            dh_f2: c(10)?,
            score: c(11)?,
            seconds: c(12)?,
        })
    }
}

pub fn write_metrics_csv(w: impl Write, history: &[MetricsRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(METRICS_HEADER)?;
    for r in history {
        wr.write_record(r.row())?;
    }
    wr.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn metrics_csv_string(history: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, history)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

/// Reads a metrics CSV, with or without a leading `run` column.
pub fn read_metrics_csv(r: impl Read) -> Result<Vec<(Option<String>, MetricsRecord)>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let tagged = headers.get(0) == Some("run");
    let cols: Vec<&str> = headers.iter().skip(tagged as usize).collect();
    if cols != METRICS_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected metrics header: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let cells: Vec<&str> = rec.iter().collect();
        let (run, rest) = if tagged {
            (Some(cells[0].to_string()), &cells[1..])
        } else {
            (None, &cells[..])
        };
        out.push((run, MetricsRecord::from_row(rest)?));
    }
    Ok(out)
}

/// Merges several histories into one CSV with a leading `run` column.
pub fn write_merged_csv(w: impl Write, runs: &[(String, Vec<MetricsRecord>)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["run"];
    header.extend(METRICS_HEADER);
    wr.write_record(&header)?;
    for (run, hist) in runs {
        for r in hist {
            let mut row = vec![run.clone()];
            row.extend(r.row());
            wr.write_record(&row)?;
        }
    }
    wr.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}
