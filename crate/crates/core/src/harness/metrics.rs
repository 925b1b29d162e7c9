//! The six evaluation metrics, sliced by task label.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EpisodeRecord;
use crate::error::{Error, Result};
use crate::taskgen::TaskLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slice {
    Single,
    Cross,
    All,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Single, Slice::Cross, Slice::All];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Single => "Single",
            Slice::Cross => "Cross",
            Slice::All => "All",
        }
    }

    fn admits(self, label: TaskLabel) -> bool {
        match self {
            Slice::Single => label == TaskLabel::Single,
            Slice::Cross => label == TaskLabel::Cross,
            Slice::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub suc: f64,
    pub ps: f64,
    pub fm: f64,
    pub pl: f64,
    pub acm: f64,
    /// `None` when no dimensions were sent or no baseline is known.
    pub ces: Option<f64>,
}

/// Single-agent baseline success per slice.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceSuc {
    pub single: Option<f64>,
    pub cross: Option<f64>,
    pub all: Option<f64>,
}

impl SliceSuc {
    pub fn get(&self, s: Slice) -> Option<f64> {
        match s {
            Slice::Single => self.single,
            Slice::Cross => self.cross,
            Slice::All => self.all,
        }
    }

    pub fn from_report(r: &MetricsReport) -> SliceSuc {
        SliceSuc {
            single: r.single.map(|m| m.suc),
            cross: r.cross.map(|m| m.suc),
            all: r.all.map(|m| m.suc),
        }
    }
}

/// One metrics row per slice; an empty slice is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub single: Option<Metrics>,
    pub cross: Option<Metrics>,
    pub all: Option<Metrics>,
}

impl MetricsReport {
    pub fn get(&self, s: Slice) -> Option<&Metrics> {
        match s {
            Slice::Single => self.single.as_ref(),
            Slice::Cross => self.cross.as_ref(),
            Slice::All => self.all.as_ref(),
        }
    }
}

/// `max(0, 10000 · (suc − sa_suc) / acm)`, undefined when `acm` is zero.
pub fn ces(suc: f64, sa_suc: f64, acm: f64) -> Option<f64> {
    (acm > 0.0).then(|| (10_000.0 * (suc - sa_suc) / acm).max(0.0))
}

fn slice_metrics(records: &[&EpisodeRecord], sa_suc: Option<f64>) -> Option<Metrics> {
    if records.is_empty() {
        return None;
    }
    let m = records.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / m;
    let suc = mean(&|r| r.success as u8 as f64);
    let ps = mean(&|r| r.replaced() as f64 / r.k.max(1) as f64);
    let fm = mean(&|r| r.found() as f64 / r.k.max(1) as f64);
    let pl = mean(&|r| r.len as f64);
    let acm = mean(&|r| {
        let denom = (r.comm_rounds * r.n_agents) as f64;
        if denom > 0.0 {
            r.total_dims as f64 / denom
        } else {
            0.0
        }
    });
    Some(Metrics {
        episodes: records.len(),
        suc,
        ps,
        fm,
        pl,
        acm,
        ces: sa_suc.and_then(|sa| ces(suc, sa, acm)),
    })
}

/// Averages per-episode metrics over each slice.
///
/// Suc is the fraction of tidied episodes; %PS and %FM average the re-placed
/// and picked-up fractions of the misplaced objects; #PL averages Len; ACm
/// averages dimensions per agent per communication round.
pub fn compute_metrics(records: &[EpisodeRecord], sa_suc: &SliceSuc) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Config("no episode records to summarise".into()));
    }
    let pick = |s: Slice| -> Option<Metrics> {
        let rs: Vec<&EpisodeRecord> = records.iter().filter(|r| s.admits(r.label)).collect();
        slice_metrics(&rs, sa_suc.get(s))
    };
    Ok(MetricsReport {
        single: pick(Slice::Single),
        cross: pick(Slice::Cross),
        all: pick(Slice::All),
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "—".to_string(), |v| format!("{v:.digits$}"))
}

/// Fixed-width table: one row per configuration, six columns per slice.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(6).max(6);
    let cols = ["Suc", "%PS", "%FM", "#PL", "ACm", "CES"];
    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "");
    for s in Slice::ALL {
        let _ = write!(out, " | {:^47}", s.name());
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "config");
    for _ in Slice::ALL {
        out.push_str(" |");
        for c in cols {
            let _ = write!(out, " {c:>7}");
        }
    }
    out.push('\n');
    for (name, report) in rows {
        let pad = name_w - name.chars().count();
        let _ = write!(out, "{name}{:pad$}", "");
        for s in Slice::ALL {
            out.push_str(" |");
            match report.get(s) {
                Some(m) => {
                    let vals = [
                        cell(Some(m.suc), 3),
                        cell(Some(m.ps), 3),
                        cell(Some(m.fm), 3),
                        cell(Some(m.pl), 1),
                        cell(Some(m.acm), 1),
                        cell(m.ces, 1),
                    ];
                    for v in vals {
                        let _ = write!(out, " {v:>7}");
                    }
                }
                None => {
                    for _ in cols {
                        let _ = write!(out, " {:>7}", "n/a");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Comma-separated rows `config,slice,episodes,suc,ps,fm,pl,acm,ces`;
/// undefined cells are empty.
pub fn to_csv(rows: &[(String, MetricsReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    w.write_record(["config", "slice", "episodes", "suc", "ps", "fm", "pl", "acm", "ces"])
        .map_err(fail)?;
    for (name, report) in rows {
        for s in Slice::ALL {
            let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
            let rec = match report.get(s) {
                Some(m) => vec![
                    name.clone(),
                    s.name().to_string(),
                    m.episodes.to_string(),
                    m.suc.to_string(),
                    m.ps.to_string(),
                    m.fm.to_string(),
                    m.pl.to_string(),
                    m.acm.to_string(),
                    opt(m.ces),
                ],
                None => {
                    let mut v = vec![name.clone(), s.name().to_string(), "0".into()];
                    v.extend(std::iter::repeat_n(String::new(), 6));
                    v
                }
            };
            w.write_record(&rec).map_err(fail)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Domain(format!("csv: {e}")))
}
