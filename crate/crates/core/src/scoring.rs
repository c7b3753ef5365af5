//! Stage-1 anomaly scores: reconstruction error, intra- and inter-discrepancy, uncertainty
//! refinement and image-level aggregation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blob::{write_blob, write_json};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::training::EnsembleCheckpoint;

/// Guard added to σ before dividing.
pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Reconstruction error of ensemble member 0.
    ARec,
    /// Reconstruction error of the ensemble mean.
    ARecEnsemble,
    AIntra,
    AInter,
    RIntra,
    RDual,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::ARec,
        ScoreKind::ARecEnsemble,
        ScoreKind::AIntra,
        ScoreKind::AInter,
        ScoreKind::RIntra,
        ScoreKind::RDual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::ARec => "a_rec",
            ScoreKind::ARecEnsemble => "a_rec_ensemble",
            ScoreKind::AIntra => "a_intra",
            ScoreKind::AInter => "a_inter",
            ScoreKind::RIntra => "r_intra",
            ScoreKind::RDual => "r_dual",
        }
    }

    /// Whether the kind needs an ASR network.
    pub fn is_refined(self) -> bool {
        matches!(self, ScoreKind::RIntra | ScoreKind::RDual)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ScoreKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            let valid: Vec<&str> = ScoreKind::ALL.iter().map(|k| k.as_str()).collect();
            Error::validation(format!("unknown score kind {s:?}; valid kinds: {}", valid.join(", ")))
        })
    }
}

/// Parse a comma-separated kind list, keeping the order given and dropping repeats.
pub fn parse_kinds(list: &str) -> Result<Vec<ScoreKind>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let k: ScoreKind = part.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::validation("no score kinds given"));
    }
    Ok(out)
}

/// How the per-member AE-U variances are pooled into σ_p.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaAgg {
    /// `sqrt(mean_i σ²_i)`
    #[default]
    VarMean,
    /// `mean_i σ_i`
    StdMean,
}

impl FromStr for SigmaAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "var_mean" => Ok(SigmaAgg::VarMean),
            "std_mean" => Ok(SigmaAgg::StdMean),
            other => Err(Error::validation(format!("unknown sigma aggregation {other:?} (var_mean | std_mean)"))),
        }
    }
}

/// A per-pixel score grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub side: usize,
    pub values: Vec<f32>,
    pub kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(side: usize, values: Vec<f32>, kind: ScoreKind) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::validation(format!(
                "score map of side {side} needs {} values, got {}",
                side * side,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!("score map values must be finite and non-negative, found {v}")));
        }
        Ok(ScoreMap { side, values, kind })
    }
}

/// All member reconstructions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForward {
    pub side: usize,
    pub recons: Vec<Vec<f32>>,
    pub mean: Vec<f32>,
    /// Pooled σ_p, present for AE-U ensembles.
    pub sigma: Option<Vec<f32>>,
}

impl EnsembleForward {
    /// Assemble from raw member outputs. `log_vars` is either empty or one grid per member.
    pub fn from_members(side: usize, recons: Vec<Vec<f32>>, log_vars: &[Vec<f32>], agg: SigmaAgg) -> Result<Self> {
        let n = side * side;
        if recons.is_empty() {
            return Err(Error::validation("ensemble forward needs at least one member"));
        }
        if recons.iter().chain(log_vars).any(|r| r.len() != n) {
            return Err(Error::validation(format!("member grids must have {n} values")));
        }
        if !log_vars.is_empty() && log_vars.len() != recons.len() {
            return Err(Error::validation("log-variance grids must match the member count"));
        }
        let k = recons.len() as f64;
        let mean = (0..n).map(|p| (recons.iter().map(|r| f64::from(r[p])).sum::<f64>() / k) as f32).collect();
        let sigma = (!log_vars.is_empty()).then(|| {
            (0..n)
                .map(|p| {
                    let s = match agg {
                        SigmaAgg::VarMean => (log_vars.iter().map(|lv| f64::from(lv[p]).exp()).sum::<f64>() / k).sqrt(),
                        SigmaAgg::StdMean => log_vars.iter().map(|lv| (0.5 * f64::from(lv[p])).exp()).sum::<f64>() / k,
                    };
                    s as f32
                })
                .collect()
        });
        Ok(EnsembleForward { side, recons, mean, sigma })
    }

    pub fn k(&self) -> usize {
        self.recons.len()
    }
}

/// Run every member of `ckpt` in eval mode on each image of `batch`.
pub fn ensemble_forward_batch(
    ckpt: &EnsembleCheckpoint,
    batch: &[ImageTensor],
    agg: SigmaAgg,
) -> Result<Vec<EnsembleForward>> {
    let side = ckpt.side();
    if let Some(bad) = batch.iter().find(|x| x.side() != side) {
        return Err(Error::validation(format!("image side {} does not match checkpoint side {side}", bad.side())));
    }
    let outs = ckpt.members.iter().map(|m| m.forward(batch)).collect::<Result<Vec<_>>>()?;
    (0..batch.len())
        .map(|i| {
            let recons = outs.iter().map(|o| o[i].recon.clone()).collect();
            let log_vars: Vec<Vec<f32>> = outs.iter().filter_map(|o| o[i].log_variance.clone()).collect();
            EnsembleForward::from_members(side, recons, &log_vars, agg)
        })
        .collect()
}

pub fn ensemble_forward(ckpt: &EnsembleCheckpoint, x: &ImageTensor, agg: SigmaAgg) -> Result<EnsembleForward> {
    Ok(ensemble_forward_batch(ckpt, std::slice::from_ref(x), agg)?.remove(0))
}

/// Per-pixel squared reconstruction error.
pub fn score_rec(x: &ImageTensor, recon: &[f32], kind: ScoreKind) -> Result<ScoreMap> {
    if recon.len() != x.data().len() {
        return Err(Error::validation(format!(
            "reconstruction has {} values, image has {}",
            recon.len(),
            x.data().len()
        )));
    }
    let values = x
        .data()
        .iter()
        .zip(recon)
        .map(|(a, b)| {
            let r = f64::from(*a) - f64::from(*b);
            (r * r) as f32
        })
        .collect();
    Ok(ScoreMap { side: x.side(), values, kind })
}

/// Population standard deviation across the members.
pub fn score_intra(ndm: &EnsembleForward) -> ScoreMap {
    let k = ndm.k() as f64;
    let values = ndm
        .mean
        .iter()
        .enumerate()
        .map(|(p, _)| {
            let mu = ndm.recons.iter().map(|r| f64::from(r[p])).sum::<f64>() / k;
            let var = ndm.recons.iter().map(|r| (mu - f64::from(r[p])).powi(2)).sum::<f64>() / k;
            var.sqrt() as f32
        })
        .collect();
    ScoreMap { side: ndm.side, values, kind: ScoreKind::AIntra }
}

/// Absolute difference of the two ensemble means.
pub fn score_inter(ndm: &EnsembleForward, udm: &EnsembleForward) -> Result<ScoreMap> {
    if ndm.side != udm.side {
        return Err(Error::validation(format!("ensemble sides differ: {} vs {}", ndm.side, udm.side)));
    }
    let values = ndm.mean.iter().zip(&udm.mean).map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs() as f32).collect();
    Ok(ScoreMap { side: ndm.side, values, kind: ScoreKind::AInter })
}

/// Divide a discrepancy map by `sigma + 1e-8` pixel-wise.
pub fn refine_by_uncertainty(map: &ScoreMap, sigma: &[f32]) -> Result<ScoreMap> {
    if !matches!(map.kind, ScoreKind::AIntra | ScoreKind::AInter) {
        return Err(Error::contract(format!("uncertainty refinement applies to a_intra/a_inter, not {}", map.kind)));
    }
    if sigma.len() != map.values.len() {
        return Err(Error::validation("sigma grid does not match the score map"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::contract(format!("sigma must be positive, found {s}")));
    }
    let values =
        map.values.iter().zip(sigma).map(|(v, s)| (f64::from(*v) / (f64::from(*s) + SIGMA_EPS)) as f32).collect();
    Ok(ScoreMap { side: map.side, values, kind: map.kind })
}

/// Mean over pixels.
pub fn image_score(map: &ScoreMap) -> Result<f64> {
    if map.values.is_empty() {
        return Err(Error::validation("cannot score an empty map"));
    }
    Ok(map.values.iter().map(|v| f64::from(*v)).sum::<f64>() / map.values.len() as f64)
}

/// The stage-1 maps of one image.
#[derive(Clone, Debug)]
pub struct StageOneMaps {
    pub a_rec: ScoreMap,
    pub a_rec_ensemble: ScoreMap,
    /// Uncertainty-refined when the NDM carries σ.
    pub a_intra: ScoreMap,
    pub a_inter: Option<ScoreMap>,
}

/// Compute every stage-1 map from precomputed ensemble outputs.
pub fn stage_one_maps(x: &ImageTensor, ndm: &EnsembleForward, udm: Option<&EnsembleForward>) -> Result<StageOneMaps> {
    let refine = |m: ScoreMap| match &ndm.sigma {
        Some(s) => refine_by_uncertainty(&m, s),
        None => Ok(m),
    };
    Ok(StageOneMaps {
        a_rec: score_rec(x, &ndm.recons[0], ScoreKind::ARec)?,
        a_rec_ensemble: score_rec(x, &ndm.mean, ScoreKind::ARecEnsemble)?,
        a_intra: refine(score_intra(ndm))?,
        a_inter: udm.map(|u| score_inter(ndm, u).and_then(refine)).transpose()?,
    })
}

/// Sidecar written next to a 16-bit map image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapScaleDescriptor {
    pub kind: ScoreKind,
    pub side: usize,
    /// Stored value `q` maps back to `min + q / 65535 * (max - min)`.
    pub min: f32,
    pub max: f32,
}

/// Write `map` as a 16-bit grayscale PNG scaled by its own min and max, plus a JSON sidecar.
pub fn export_map_png16(map: &ScoreMap, path: &Path) -> Result<()> {
    let (min, max) = map.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = f64::from(max) - f64::from(min);
    let pixels: Vec<u16> = map
        .values
        .iter()
        .map(|v| if range > 0.0 { ((f64::from(*v) - f64::from(min)) / range * 65535.0).round() as u16 } else { 0 })
        .collect();
    let side = map.side as u32;
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(side, side, pixels)
        .ok_or_else(|| Error::validation("score map size mismatch"))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| crate::data::image_error(path, e))?;
    write_json(&path.with_extension("json"), &MapScaleDescriptor { kind: map.kind, side: map.side, min, max })
}

/// Write `map` losslessly in the tensor-blob format.
pub fn export_map_blob(map: &ScoreMap, dir: &Path) -> Result<()> {
    write_blob(dir, [(map.kind.as_str(), &[map.side, map.side][..], &map.values[..])])
}

/// One row of the per-image score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub kind: ScoreKind,
    pub score: f64,
    pub label: Option<u8>,
}

/// Write rows as `path,kind,score,label` text (label empty when unknown).
pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() }))
        .collect()
}
