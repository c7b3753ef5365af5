//! Image-level metrics, score histograms and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::write_json;
use crate::error::{Error, Result};
use crate::scoring::ScoreKind;

pub const REPORT_TABLE: &str = "report.csv";
pub const REPORT_SUMMARY: &str = "report.json";
pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub items: Vec<ScoredItem>,
}

impl ScoredSet {
    pub fn new(items: Vec<ScoredItem>) -> Self {
        ScoredSet { items }
    }

    pub fn from_parts<S: Into<String>>(ids: impl IntoIterator<Item = S>, scores: &[f64], labels: &[u8]) -> Self {
        ScoredSet {
            items: ids
                .into_iter()
                .zip(scores.iter().zip(labels))
                .map(|(id, (s, l))| ScoredItem { id: id.into(), score: *s, label: *l })
                .collect(),
        }
    }

    fn check(&self) -> Result<(usize, usize)> {
        if let Some(it) = self.items.iter().find(|i| !i.score.is_finite() || i.label > 1) {
            return Err(Error::validation(format!("item {} has score {} and label {}", it.id, it.score, it.label)));
        }
        let pos = self.items.iter().filter(|i| i.label == 1).count();
        Ok((pos, self.items.len() - pos))
    }

    pub fn normal_scores(&self) -> Vec<f64> {
        self.items.iter().filter(|i| i.label == 0).map(|i| i.score).collect()
    }

    pub fn abnormal_scores(&self) -> Vec<f64> {
        self.items.iter().filter(|i| i.label == 1).map(|i| i.score).collect()
    }
}

/// Mann–Whitney AUC with half credit for ties, from average ranks.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.check()?;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("auc needs both normal and abnormal items"));
    }
    let ranks = average_ranks(&set.items.iter().map(|i| i.score).collect::<Vec<_>>());
    let pos_rank_sum: f64 = set.items.iter().zip(&ranks).filter(|(i, _)| i.label == 1).map(|(_, r)| *r).sum();
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// 1-based ranks in ascending order, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Items sorted by descending score; equal scores keep ascending id order.
pub fn ranking(set: &ScoredSet) -> Vec<&ScoredItem> {
    let mut v: Vec<&ScoredItem> = set.items.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    v
}

/// Mean over positives of the precision at each positive's rank.
pub fn ap(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.check()?;
    if pos == 0 {
        return Err(Error::validation("ap needs at least one abnormal item"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, item) in ranking(set).into_iter().enumerate() {
        if item.label == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Spearman rank correlation (average ranks for ties). Zero when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::validation("spearman needs two equal-length series of at least 2 values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Normal and abnormal score histograms over shared bins after joint min-max scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bins: usize,
    pub min: f64,
    pub max: f64,
    pub normal_counts: Vec<usize>,
    pub abnormal_counts: Vec<usize>,
    pub normal_hist: Vec<f64>,
    pub abnormal_hist: Vec<f64>,
}

impl HistogramPair {
    pub fn new(normal: &[f64], abnormal: &[f64], bins: usize) -> Result<Self> {
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::validation("histograms need non-empty normal and abnormal scores"));
        }
        if bins < 2 {
            return Err(Error::validation(format!("histogram needs at least 2 bins, got {bins}")));
        }
        if normal.iter().chain(abnormal).any(|v| !v.is_finite()) {
            return Err(Error::validation("histogram scores must be finite"));
        }
        let min = normal.iter().chain(abnormal).copied().fold(f64::INFINITY, f64::min);
        let max = normal.iter().chain(abnormal).copied().fold(f64::NEG_INFINITY, f64::max);
        let count = |vals: &[f64]| {
            let mut c = vec![0usize; bins];
            for v in vals {
                let t = if max > min { (v - min) / (max - min) } else { 0.0 };
                c[((t * bins as f64) as usize).min(bins - 1)] += 1;
            }
            c
        };
        let norm = |c: &[usize]| {
            let total = c.iter().sum::<usize>() as f64;
            c.iter().map(|x| *x as f64 / total).collect()
        };
        let (nc, ac) = (count(normal), count(abnormal));
        Ok(HistogramPair {
            bins,
            min,
            max,
            normal_hist: norm(&nc),
            abnormal_hist: norm(&ac),
            normal_counts: nc,
            abnormal_counts: ac,
        })
    }

    /// `½ Σ (h − g)² / (h + g)`, empty bins contributing nothing.
    pub fn chi2(&self) -> f64 {
        chi2_distance(&self.normal_hist, &self.abnormal_hist)
    }

    /// Write `bin,lower,upper,normal_count,abnormal_count` rows over the normalized axis.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin,lower,upper,normal_count,abnormal_count\n");
        for b in 0..self.bins {
            let (lo, hi) = (b as f64 / self.bins as f64, (b + 1) as f64 / self.bins as f64);
            writeln!(out, "{b},{lo},{hi},{},{}", self.normal_counts[b], self.abnormal_counts[b]).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn chi2_distance(h: &[f64], g: &[f64]) -> f64 {
    0.5 * h.iter().zip(g).filter(|(a, b)| **a + **b > 0.0).map(|(a, b)| (a - b).powi(2) / (a + b)).sum::<f64>()
}

pub fn histogram_chi2(normal: &[f64], abnormal: &[f64], bins: usize) -> Result<f64> {
    Ok(HistogramPair::new(normal, abnormal, bins)?.chi2())
}

/// AUC and AP of one score kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub kind: ScoreKind,
    pub auc: f64,
    pub ap: f64,
    /// χ² between the normal and abnormal score histograms.
    pub chi2: Option<f64>,
}

impl MetricRow {
    pub fn compute(kind: ScoreKind, set: &ScoredSet, bins: Option<usize>) -> Result<Self> {
        Ok(MetricRow {
            kind,
            auc: auc(set)?,
            ap: ap(set)?,
            chi2: bins.map(|b| histogram_chi2(&set.normal_scores(), &set.abnormal_scores(), b)).transpose()?,
        })
    }
}

/// Context recorded with every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_digest: String,
    pub seed: u64,
    pub anomaly_ratio: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn row(&self, kind: ScoreKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

/// Write `report.csv` (metadata as `#` lines, then `score_kind,AUC,AP`) and `report.json` into
/// `dir`; returns both paths.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.rows.is_empty() {
        return Err(Error::validation("cannot export an empty report"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join(REPORT_TABLE);
    fs::write(&table, report_table_text(report)).map_err(|e| Error::io(&table, e))?;
    let summary = dir.join(REPORT_SUMMARY);
    write_json(&summary, report)?;
    Ok((table, summary))
}

pub fn report_table_text(report: &EvalReport) -> String {
    let m = &report.meta;
    let mut out = String::new();
    writeln!(out, "# config_digest={}", m.config_digest).unwrap();
    writeln!(out, "# seed={}", m.seed).unwrap();
    match m.anomaly_ratio {
        Some(ar) => writeln!(out, "# anomaly_ratio={ar}").unwrap(),
        None => writeln!(out, "# anomaly_ratio=").unwrap(),
    }
    writeln!(out, "# ap=mean precision at each positive rank; ties ordered by ascending id").unwrap();
    writeln!(out, "# auc=Mann-Whitney with half credit for ties").unwrap();
    for (k, v) in &m.extra {
        writeln!(out, "# {k}={v}").unwrap();
    }
    writeln!(out, "score_kind,AUC,AP").unwrap();
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.kind, r.auc, r.ap).unwrap();
    }
    out
}

/// Parse a table written by [`export_report`]. χ² values live only in the JSON summary.
pub fn parse_report_table(text: &str) -> Result<EvalReport> {
    let mut meta = ReportMeta::default();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let perr = |message: String| Error::Parse { line: line_no, message };
        if let Some(rest) = line.strip_prefix('#') {
            let Some((k, v)) = rest.trim().split_once('=') else { continue };
            match k {
                "config_digest" => meta.config_digest = v.to_string(),
                "seed" => meta.seed = v.parse().map_err(|e| perr(format!("seed: {e}")))?,
                "anomaly_ratio" => {
                    meta.anomaly_ratio = (!v.is_empty())
                        .then(|| v.parse())
                        .transpose()
                        .map_err(|e| perr(format!("anomaly_ratio: {e}")))?
                }
                "ap" | "auc" => {}
                _ => {
                    meta.extra.insert(k.to_string(), v.to_string());
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != "score_kind,AUC,AP" {
                return Err(perr(format!("expected header score_kind,AUC,AP, found {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(perr(format!("expected 3 fields, found {}", f.len())));
        }
        rows.push(MetricRow {
            kind: f[0].parse().map_err(|e: Error| perr(e.to_string()))?,
            auc: f[1].parse().map_err(|e| perr(format!("AUC: {e}")))?,
            ap: f[2].parse().map_err(|e| perr(format!("AP: {e}")))?,
            chi2: None,
        });
    }
    if !header_seen {
        return Err(Error::Parse { line: 0, message: "missing header row".into() });
    }
    Ok(EvalReport { meta, rows })
}

/// One AR of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub anomaly_ratio: f64,
    pub rows: Vec<MetricRow>,
}

impl SweepRow {
    pub fn auc_of(&self, kind: ScoreKind) -> Option<f64> {
        self.rows.iter().find(|r| r.kind == kind).map(|r| r.auc)
    }
}

/// `anomaly_ratio,score_kind,AUC,AP` rows.
pub fn sweep_table_text(rows: &[SweepRow]) -> String {
    let mut out = String::from("anomaly_ratio,score_kind,AUC,AP\n");
    for r in rows {
        for m in &r.rows {
            writeln!(out, "{},{},{},{}", r.anomaly_ratio, m.kind, m.auc, m.ap).unwrap();
        }
    }
    out
}
