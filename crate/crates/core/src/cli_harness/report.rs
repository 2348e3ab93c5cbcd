//! Summaries over metrics CSVs.
//!
//! Rows are grouped by `mode`. Within a method, rows sharing a `seed` are
//! averaged clip by clip into one drift curve, so two methods are compared
//! seed against seed on the seeds they have in common.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::error_bank::ErrorBank;
use crate::rollout::{compare_curves, method_stats, DriftCurve, MethodStats, RunComparison};

use super::run::{write_new, MetricRow, METRICS_HEADER};

/// `A>B`: method A must end with lower norm drift than B and grow no faster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dominance {
    pub better: String,
    pub worse: String,
}

impl FromStr for Dominance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('>') {
            Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => Ok(Dominance {
                better: a.trim().to_string(),
                worse: b.trim().to_string(),
            }),
            _ => Err(Error::invalid(format!(
                "dominance must look like `A>B`, got `{s}`"
            ))),
        }
    }
}

impl Dominance {
    pub fn holds(a: &MethodStats, b: &MethodStats) -> bool {
        a.terminal_norm < b.terminal_norm && a.norm_slope <= b.norm_slope
    }
}

#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub method: String,
    pub curves: Vec<DriftCurve>,
    pub stats: MethodStats,
}

#[derive(Clone, Debug)]
pub struct PairSummary {
    pub a: String,
    pub b: String,
    pub seeds: Vec<u64>,
    pub comparison: RunComparison,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
    pub pairs: Vec<PairSummary>,
    pub dominance: Vec<(Dominance, bool)>,
}

impl Report {
    pub fn dominance_holds(&self) -> bool {
        self.dominance.iter().all(|(_, ok)| *ok)
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for m in &self.methods {
            let st = &m.stats;
            let _ = writeln!(
                s,
                "method {}: seeds={} clips={} terminal_norm={:.6} terminal_step={:.6} norm_slope={:.6} step_slope={:.6}",
                m.method,
                m.curves.len(),
                st.mean_norm.len(),
                st.terminal_norm,
                st.terminal_step,
                st.norm_slope,
                st.step_slope
            );
            let curve: Vec<String> = st.mean_norm.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "  norm_drift by clip: {}", curve.join(" "));
        }
        if !self.pairs.is_empty() {
            let _ = writeln!(s, "comparisons:");
        }
        for p in &self.pairs {
            let c = &p.comparison;
            let _ = writeln!(
                s,
                "  {} vs {} over {} seeds: wins {}-{} ties {} terminal_norm {:.6} vs {:.6} norm_slope {:.6} vs {:.6}",
                p.a,
                p.b,
                p.seeds.len(),
                c.wins_a,
                c.wins_b,
                c.ties,
                c.a.terminal_norm,
                c.b.terminal_norm,
                c.a.norm_slope,
                c.b.norm_slope
            );
        }
        for (d, ok) in &self.dominance {
            let _ = writeln!(
                s,
                "dominance {}>{}: {}",
                d.better,
                d.worse,
                if *ok { "holds" } else { "FAILS" }
            );
        }
        s
    }

    /// `method,clip_index,mean_norm_drift,mean_step_drift`, clip_index 1-based.
    pub fn comparison_csv(&self) -> String {
        let mut s = String::from("method,clip_index,mean_norm_drift,mean_step_drift\n");
        for m in &self.methods {
            for (i, (n, st)) in m.stats.mean_norm.iter().zip(&m.stats.mean_step).enumerate() {
                let _ = writeln!(s, "{},{},{},{}", m.method, i + 1, n, st);
            }
        }
        s
    }
}

fn parse_field<T: FromStr>(field: &str, name: &str, path: &Path, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("bad {name} `{field}`"),
    })
}

/// Parses a metrics CSV. Line numbers in errors are 1-based and count the header.
pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected header `{METRICS_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end();
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected 7 fields, found {}", f.len()),
            });
        }
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("{name} is not finite"),
                })
            }
        };
        let clip_index: usize = parse_field(f[3], "clip_index", path, line)?;
        if clip_index == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: "clip_index is 1-based".into(),
            });
        }
        rows.push(MetricRow {
            run_id: f[0].to_string(),
            mode: f[1].to_string(),
            seed: parse_field(f[2], "seed", path, line)?,
            clip_index,
            norm_drift: finite(parse_field(f[4], "norm_drift", path, line)?, "norm_drift")?,
            step_drift: finite(parse_field(f[5], "step_drift", path, line)?, "step_drift")?,
            loss_final: if f[6].is_empty() {
                None
            } else {
                Some(parse_field(f[6], "loss_final", path, line)?)
            },
        });
    }
    Ok(rows)
}

/// clip_index -> (sum of norm_drift, sum of step_drift, rows)
type ClipSums = BTreeMap<usize, (f64, f64, usize)>;

/// Per-method curves in order of first appearance, one curve per seed.
pub fn group_curves(rows: &[MetricRow]) -> Result<Vec<(String, Vec<DriftCurve>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<&str, BTreeMap<u64, ClipSums>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.mode) {
            order.push(r.mode.clone());
        }
        let e = acc
            .entry(&r.mode)
            .or_default()
            .entry(r.seed)
            .or_default()
            .entry(r.clip_index)
            .or_insert((0.0, 0.0, 0));
        e.0 += r.norm_drift;
        e.1 += r.step_drift;
        e.2 += 1;
    }
    let mut out = Vec::new();
    for method in order {
        let mut curves = Vec::new();
        for (&seed, clips) in &acc[method.as_str()] {
            let k = clips.len();
            if clips.keys().copied().ne(1..=k) {
                return Err(Error::invalid(format!(
                    "method {method} seed {seed}: clip indices are not 1..={k}"
                )));
            }
            let counts: Vec<usize> = clips.values().map(|v| v.2).collect();
            if counts.iter().any(|&c| c != counts[0]) {
                return Err(Error::invalid(format!(
                    "method {method} seed {seed}: clips have unequal row counts"
                )));
            }
            curves.push(DriftCurve {
                seed,
                norm: clips.values().map(|v| v.0 / v.2 as f64).collect(),
                step: clips.values().map(|v| v.1 / v.2 as f64).collect(),
            });
        }
        out.push((method, curves));
    }
    Ok(out)
}

pub fn build_report(rows: &[MetricRow], dominance: &[Dominance]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::invalid("no metric rows to report on"));
    }
    let grouped = group_curves(rows)?;
    let mut methods = Vec::new();
    for (method, curves) in &grouped {
        methods.push(MethodSummary {
            method: method.clone(),
            stats: method_stats(curves)
                .map_err(|e| Error::invalid(format!("method {method}: {e}")))?,
            curves: curves.clone(),
        });
    }
    let mut pairs = Vec::new();
    for i in 0..grouped.len() {
        for j in i + 1..grouped.len() {
            let (a, ca) = &grouped[i];
            let (b, cb) = &grouped[j];
            let seeds: Vec<u64> = ca
                .iter()
                .map(|c| c.seed)
                .filter(|s| cb.iter().any(|d| d.seed == *s))
                .collect();
            if seeds.is_empty() {
                continue;
            }
            let pick = |cs: &[DriftCurve]| -> Vec<DriftCurve> {
                seeds
                    .iter()
                    .map(|s| {
                        cs.iter()
                            .find(|c| c.seed == *s)
                            .expect("seed present")
                            .clone()
                    })
                    .collect()
            };
            pairs.push(PairSummary {
                a: a.clone(),
                b: b.clone(),
                comparison: compare_curves(&pick(ca), &pick(cb))?,
                seeds,
            });
        }
    }
    let mut checks = Vec::new();
    for d in dominance {
        let find = |name: &str| {
            methods
                .iter()
                .find(|m| m.method == name)
                .map(|m| &m.stats)
                .ok_or_else(|| Error::invalid(format!("dominance names unknown method `{name}`")))
        };
        let ok = Dominance::holds(find(&d.better)?, find(&d.worse)?);
        checks.push((d.clone(), ok));
    }
    Ok(Report {
        methods,
        pairs,
        dominance: checks,
    })
}

/// Reads every CSV, builds the report and writes the comparison CSV if asked.
pub fn run_report(
    paths: &[PathBuf],
    dominance: &[Dominance],
    comparison_out: Option<&Path>,
) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::invalid("report needs at least one metrics CSV"));
    }
    let mut rows = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        rows.extend(parse_metrics(&text, p)?);
    }
    let report = build_report(&rows, dominance)?;
    if let Some(out) = comparison_out {
        write_new(out, report.comparison_csv().as_bytes())?;
    }
    Ok(report)
}

/// Writes a bank snapshot's occupancy as `channel,grid_index,grid_t,occupancy`.
pub fn export_occupancy(bank: &Path, out: &Path) -> Result<()> {
    let bank = ErrorBank::load(bank)?;
    let mut s = String::from("channel,grid_index,grid_t,occupancy\n");
    for r in bank.occupancy() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.channel.name(),
            r.grid_index,
            r.grid_t,
            r.occupancy
        );
    }
    write_new(out, s.as_bytes())
}
