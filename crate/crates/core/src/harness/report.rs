//! Summary tables over sweep rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::sweep::{write_rows, BaselineRow, SweepRow};
use super::HarnessError;

/// Five-number summary plus mean. Quartiles use linear interpolation
/// between order statistics (type 7).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<BoxStats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(BoxStats {
            n: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

struct GroupRow {
    value: String,
    stats: BoxStats,
}

impl Serialize for GroupRow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let b = &self.stats;
        let mut st = s.serialize_struct("GroupRow", 8)?;
        st.serialize_field("value", &self.value)?;
        st.serialize_field("n", &b.n)?;
        st.serialize_field("min", &b.min)?;
        st.serialize_field("q1", &b.q1)?;
        st.serialize_field("median", &b.median)?;
        st.serialize_field("q3", &b.q3)?;
        st.serialize_field("max", &b.max)?;
        st.serialize_field("mean", &b.mean)?;
        st.end()
    }
}

fn group_by(rows: &[SweepRow], key: impl Fn(&SweepRow) -> String) -> Vec<GroupRow> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r.acc_forget_after);
    }
    let mut out: Vec<GroupRow> = groups
        .into_iter()
        .filter_map(|(value, v)| BoxStats::of(&v).map(|stats| GroupRow { value, stats }))
        .collect();
    // Numeric order, not lexicographic.
    out.sort_by(|a, b| {
        let (x, y) = (a.value.parse::<f64>(), b.value.parse::<f64>());
        match (x, y) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => a.value.cmp(&b.value),
        }
    });
    out
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    n: usize,
    acc_forget_mean: f64,
    acc_retain_mean: f64,
    sim_time_s_mean: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Serialize)]
struct TrendRow {
    hyperparameter: &'static str,
    lowest: String,
    highest: String,
    median_at_lowest: f64,
    median_at_highest: f64,
    direction: &'static str,
}

fn trend(name: &'static str, groups: &[GroupRow]) -> Option<TrendRow> {
    let (lo, hi) = (groups.first()?, groups.last()?);
    let d = hi.stats.median - lo.stats.median;
    let direction = if d.abs() < 1e-9 {
        "flat"
    } else if d > 0.0 {
        "increasing"
    } else {
        "decreasing"
    };
    Some(TrendRow {
        hyperparameter: name,
        lowest: lo.value.clone(),
        highest: hi.value.clone(),
        median_at_lowest: lo.stats.median,
        median_at_highest: hi.stats.median,
        direction,
    })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    write_rows(rows, &mut buf)?;
    Ok(buf)
}

/// Writes `sweep.csv`, `by_r.csv`, `by_alpha.csv`, `by_dropout.csv`,
/// `summary.csv`, `trends.csv` and, when present, `baseline.csv` into `dir`.
/// Output depends only on the rows, so identical inputs give identical
/// files.
pub fn emit_report(dir: &Path, rows: &[SweepRow], baselines: &[BaselineRow]) -> Result<Vec<PathBuf>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::InvalidConfig("no sweep rows to report".into()));
    }
    fs::create_dir_all(dir)?;
    let by_r = group_by(rows, |r| r.r.to_string());
    let by_alpha = group_by(rows, |r| r.alpha.to_string());
    let by_dropout = group_by(rows, |r| r.dropout.to_string());

    let mut summary = vec![SummaryRow {
        method: "lora_unlearn".into(),
        n: rows.len(),
        acc_forget_mean: mean(rows.iter().map(|r| r.acc_forget_after)),
        acc_retain_mean: mean(rows.iter().map(|r| r.acc_retain_after)),
        sim_time_s_mean: mean(rows.iter().map(|r| r.sim_time_s)),
    }];
    if !baselines.is_empty() {
        summary.push(SummaryRow {
            method: "retrain_from_scratch".into(),
            n: baselines.len(),
            acc_forget_mean: mean(baselines.iter().map(|b| b.acc_forget)),
            acc_retain_mean: mean(baselines.iter().map(|b| b.acc_retain)),
            sim_time_s_mean: mean(baselines.iter().map(|b| b.sim_time_s)),
        });
    }
    let trends: Vec<TrendRow> = [("r", &by_r), ("alpha", &by_alpha), ("dropout", &by_dropout)]
        .into_iter()
        .filter_map(|(n, g)| trend(n, g))
        .collect();

    let mut files = vec![
        ("sweep.csv", csv_bytes(rows)?),
        ("by_r.csv", csv_bytes(&by_r)?),
        ("by_alpha.csv", csv_bytes(&by_alpha)?),
        ("by_dropout.csv", csv_bytes(&by_dropout)?),
        ("summary.csv", csv_bytes(&summary)?),
        ("trends.csv", csv_bytes(&trends)?),
    ];
    if !baselines.is_empty() {
        files.push(("baseline.csv", csv_bytes(baselines)?));
    }
    let mut out = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        out.push(p);
    }
    Ok(out)
}
