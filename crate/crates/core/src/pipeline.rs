//! End-to-end orchestration shared by the command-line tool and the integration tests.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! run.json              resolved configuration of the last command
//! splits.json           D_n, D_u (paths only) and labeled D_t
//! NDM/ UDM/             stage-1 ensembles
//! ASR_dual/ ASR_intra/  refinement networks
//! eval/                 report.csv, report.json, scores.csv, histograms/, maps/
//! sweep/                sweep.csv and one isolated run directory per anomaly ratio
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::{refine_batch, train_asr, AsrCheckpoint, AsrConfig};
use crate::blob::{read_json, write_json};
use crate::data::{build_splits, load_images, DatasetSplit, ImageTensor, Manifest, SplitConfig, SplitKind};
use crate::error::{Error, Result};
use crate::eval::{export_report, EvalReport, HistogramPair, MetricRow, ReportMeta, ScoredSet, SweepRow, DEFAULT_BINS};
use crate::nets::{Backbone, NetworkConfig};
use crate::scoring::{
    ensemble_forward_batch, export_map_png16, image_score, stage_one_maps, write_score_table, ScoreKind, ScoreMap,
    ScoreRow, SigmaAgg,
};
use crate::training::{train_ensemble, EnsembleCheckpoint, LossKind, ModuleTag, TrainConfig};

pub const RUN_DESCRIPTOR: &str = "run.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const ASR_DUAL_DIR: &str = "ASR_dual";
pub const ASR_INTRA_DIR: &str = "ASR_intra";
pub const EVAL_DIR: &str = "eval";
pub const SWEEP_DIR: &str = "sweep";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Settings {
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Stage1Settings { k: 3, epochs: 250, learning_rate: 5e-4, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrSettings {
    pub conv_layers: usize,
    pub hidden_channels: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub pairs_per_epoch: Option<usize>,
}

impl Default for AsrSettings {
    fn default() -> Self {
        let d = AsrConfig::default();
        AsrSettings {
            conv_layers: d.conv_layers,
            hidden_channels: d.hidden_channels,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            gamma: d.gamma,
            batch_size: d.batch_size,
            pairs_per_epoch: d.pairs_per_epoch,
        }
    }
}

impl AsrSettings {
    pub fn to_config(&self, in_channels: usize) -> AsrConfig {
        AsrConfig {
            in_channels,
            conv_layers: self.conv_layers,
            hidden_channels: self.hidden_channels,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            gamma: self.gamma,
            batch_size: self.batch_size,
            pairs_per_epoch: self.pairs_per_epoch,
        }
    }
}

/// Split sizes; `None` takes everything the manifest pool offers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub n_normal: Option<usize>,
    pub n_unlabeled: Option<usize>,
    pub anomaly_ratio: Option<f64>,
    pub n_test_normal: Option<usize>,
    pub n_test_abnormal: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub bins: usize,
    pub kinds: Vec<ScoreKind>,
    pub sigma_agg: SigmaAgg,
    pub export_maps: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bins: DEFAULT_BINS,
            kinds: ScoreKind::ALL.to_vec(),
            sigma_agg: SigmaAgg::VarMean,
            export_maps: false,
        }
    }
}

/// Everything a run needs. Loadable from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub net: NetworkConfig,
    pub stage1: Stage1Settings,
    pub asr: AsrSettings,
    pub split: SplitSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            manifest: PathBuf::from("manifest.csv"),
            out_dir: PathBuf::from("runs/default"),
            net: NetworkConfig::default(),
            stage1: Stage1Settings::default(),
            asr: AsrSettings::default(),
            split: SplitSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.stage_config(ModuleTag::Ndm).validate()?;
        self.asr.to_config(2).validate()?;
        if let Some(ar) = self.split.anomaly_ratio {
            if !(0.0..=1.0).contains(&ar) {
                return Err(Error::validation(format!("anomaly_ratio {ar} outside [0, 1]")));
            }
        }
        if self.eval.bins < 2 {
            return Err(Error::validation("eval.bins must be at least 2"));
        }
        if self.eval.kinds.is_empty() {
            return Err(Error::validation("eval.kinds is empty"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossKind {
        match self.net.backbone {
            Backbone::Ae => LossKind::Mse,
            Backbone::Aeu => LossKind::Aeu,
        }
    }

    /// Training config of one module with member seeds derived from the global seed.
    pub fn stage_config(&self, tag: ModuleTag) -> TrainConfig {
        let mut t = TrainConfig::for_module(tag, self.seed, self.stage1.k);
        t.epochs = self.stage1.epochs;
        t.learning_rate = self.stage1.learning_rate;
        t.batch_size = self.stage1.batch_size;
        t.loss = self.loss();
        t
    }

    /// Digest of everything except the output location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&c).expect("config serializes"));
        hex::encode(h.finalize())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }
}

/// Resolved run configuration plus the command that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub command: String,
    pub version: String,
    pub config_digest: String,
    pub config: RunConfig,
}

pub fn write_run_descriptor(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json(
        &cfg.path(RUN_DESCRIPTOR),
        &RunDescriptor {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_digest: cfg.digest(),
            config: cfg.clone(),
        },
    )
}

/// Largest unlabeled set the pools can fill at `ar`.
fn max_unlabeled(abnormal: usize, normal: usize, ar: f64) -> usize {
    (0..=abnormal + normal)
        .rev()
        .find(|&n| {
            let a = (ar * n as f64).round() as usize;
            a <= abnormal && n - a <= normal
        })
        .unwrap_or(0)
}

/// Fill unspecified split sizes from the manifest pools.
pub fn resolve_split(cfg: &RunConfig, manifest: &Manifest) -> SplitConfig {
    let count = |split: SplitKind, label: Option<u8>| {
        manifest.entries.iter().filter(|e| e.split == split && (label.is_none() || e.label == label)).count()
    };
    let s = &cfg.split;
    let n_unlabeled = s.n_unlabeled.unwrap_or_else(|| match s.anomaly_ratio {
        Some(ar) => max_unlabeled(count(SplitKind::Unlabeled, Some(1)), count(SplitKind::Unlabeled, Some(0)), ar),
        None => count(SplitKind::Unlabeled, None),
    });
    SplitConfig {
        n_normal: s.n_normal.unwrap_or_else(|| count(SplitKind::Normal, None)),
        n_unlabeled,
        anomaly_ratio: s.anomaly_ratio,
        n_test_normal: s.n_test_normal.unwrap_or_else(|| count(SplitKind::Test, Some(0))),
        n_test_abnormal: s.n_test_abnormal.unwrap_or_else(|| count(SplitKind::Test, Some(1))),
        seed: cfg.seed,
    }
}

/// Build the splits from the manifest and write `splits.json`.
pub fn prepare(cfg: &RunConfig) -> Result<DatasetSplit> {
    let manifest = Manifest::load(&cfg.manifest)?;
    let split = build_splits(&manifest, &resolve_split(cfg, &manifest))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    split.save(&cfg.path(SPLITS_FILE))?;
    log::info!("splits: {} normal, {} unlabeled, {} test", split.normal.len(), split.unlabeled.len(), split.test.len());
    Ok(split)
}

pub fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let p = cfg.path(SPLITS_FILE);
    if !p.exists() {
        return Err(Error::validation(format!("{} not found; run `prepare` first", p.display())));
    }
    DatasetSplit::load(&p)
}

fn load_paths(split: &DatasetSplit, paths: &[String], side: usize) -> Result<Vec<ImageTensor>> {
    let full: Vec<PathBuf> = paths.iter().map(|p| split.resolve(p)).collect();
    load_images(&full, side)
}

/// Train one module on its view of `split` and save it under `out_dir`.
pub fn train_module(
    cfg: &RunConfig,
    split: &DatasetSplit,
    tag: ModuleTag,
    out_dir: &Path,
) -> Result<EnsembleCheckpoint> {
    let paths = match tag {
        ModuleTag::Ndm => split.ndm_view(),
        ModuleTag::Udm => split.udm_view(),
    };
    let images = load_paths(split, &paths, cfg.net.side)?;
    log::info!("training {} on {} images", tag.dir_name(), images.len());
    let ck = train_ensemble(&images, &paths, &cfg.stage_config(tag), &cfg.net, tag)?;
    ck.save(&out_dir.join(tag.dir_name()))?;
    Ok(ck)
}

pub fn load_module(out_dir: &Path, tag: ModuleTag) -> Result<EnsembleCheckpoint> {
    let dir = out_dir.join(tag.dir_name());
    if !dir.exists() {
        return Err(Error::validation(format!("{} not found; run `train-stage1` first", dir.display())));
    }
    EnsembleCheckpoint::load(&dir)
}

/// Train the requested refinement networks and save them under `out_dir`.
pub fn train_refiners(
    cfg: &RunConfig,
    split: &DatasetSplit,
    ndm: &EnsembleCheckpoint,
    udm: Option<&EnsembleCheckpoint>,
    intra: bool,
    out_dir: &Path,
) -> Result<(Option<AsrCheckpoint>, Option<AsrCheckpoint>)> {
    let normals = load_paths(split, &split.normal, ndm.side())?;
    let agg = cfg.eval.sigma_agg;
    let dual = udm
        .map(|u| {
            log::info!("training the dual refinement network");
            let ck = train_asr(ndm, Some(u), &normals, &cfg.asr.to_config(2), cfg.seed, agg)?;
            ck.save(&out_dir.join(ASR_DUAL_DIR))?;
            Ok::<_, Error>(ck)
        })
        .transpose()?;
    let single = if intra {
        log::info!("training the intra-only refinement network");
        let ck = train_asr(ndm, None, &normals, &cfg.asr.to_config(1), cfg.seed, agg)?;
        ck.save(&out_dir.join(ASR_INTRA_DIR))?;
        Some(ck)
    } else {
        None
    };
    Ok((dual, single))
}

/// Trained models available for scoring.
#[derive(Clone, Debug)]
pub struct Models {
    pub ndm: EnsembleCheckpoint,
    pub udm: Option<EnsembleCheckpoint>,
    pub r_dual: Option<AsrCheckpoint>,
    pub r_intra: Option<AsrCheckpoint>,
}

impl Models {
    /// Load whatever exists under `out_dir` (the NDM is required).
    pub fn load(out_dir: &Path) -> Result<Self> {
        let opt = |dir: PathBuf, f: fn(&Path) -> Result<AsrCheckpoint>| dir.exists().then(|| f(&dir)).transpose();
        let udm_dir = out_dir.join(ModuleTag::Udm.dir_name());
        Ok(Models {
            ndm: load_module(out_dir, ModuleTag::Ndm)?,
            udm: udm_dir.exists().then(|| EnsembleCheckpoint::load(&udm_dir)).transpose()?,
            r_dual: opt(out_dir.join(ASR_DUAL_DIR), AsrCheckpoint::load)?,
            r_intra: opt(out_dir.join(ASR_INTRA_DIR), AsrCheckpoint::load)?,
        })
    }

    fn check(&self, kinds: &[ScoreKind]) -> Result<()> {
        for k in kinds {
            let missing = match k {
                ScoreKind::AInter => self.udm.is_none().then_some("a UDM checkpoint"),
                ScoreKind::RDual => self.r_dual.is_none().then_some("the dual refinement network"),
                ScoreKind::RIntra => self.r_intra.is_none().then_some("the intra-only refinement network"),
                _ => None,
            };
            if let Some(what) = missing {
                return Err(Error::validation(format!("score kind {k} needs {what}")));
            }
        }
        if let Some(r) = &self.r_dual {
            r.matches_stage1(&self.ndm, self.udm.as_ref());
        }
        if let Some(r) = &self.r_intra {
            r.matches_stage1(&self.ndm, None);
        }
        Ok(())
    }
}

/// Per-image maps of the requested kinds, in kind order.
pub fn score_maps(
    models: &Models,
    images: &[ImageTensor],
    kinds: &[ScoreKind],
    agg: SigmaAgg,
) -> Result<Vec<Vec<ScoreMap>>> {
    models.check(kinds)?;
    let need_udm = kinds.iter().any(|k| matches!(k, ScoreKind::AInter | ScoreKind::RDual));
    let chunks: Vec<Vec<Vec<ScoreMap>>> = images
        .par_chunks(32)
        .map(|chunk| {
            let a = ensemble_forward_batch(&models.ndm, chunk, agg)?;
            let b = match (&models.udm, need_udm) {
                (Some(u), true) => Some(ensemble_forward_batch(u, chunk, agg)?),
                _ => None,
            };
            let stage1 = chunk
                .iter()
                .enumerate()
                .map(|(i, x)| stage_one_maps(x, &a[i], b.as_ref().map(|b| &b[i])))
                .collect::<Result<Vec<_>>>()?;
            let dual = match &models.r_dual {
                Some(r) if kinds.contains(&ScoreKind::RDual) => {
                    let inputs: Vec<Vec<ScoreMap>> = stage1
                        .iter()
                        .map(|s| vec![s.a_intra.clone(), s.a_inter.clone().expect("udm present")])
                        .collect();
                    Some(refine_batch(r, &inputs)?)
                }
                _ => None,
            };
            let intra = match &models.r_intra {
                Some(r) if kinds.contains(&ScoreKind::RIntra) => {
                    let inputs: Vec<Vec<ScoreMap>> = stage1.iter().map(|s| vec![s.a_intra.clone()]).collect();
                    Some(refine_batch(r, &inputs)?)
                }
                _ => None,
            };
            Ok(stage1
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    kinds
                        .iter()
                        .map(|k| match k {
                            ScoreKind::ARec => s.a_rec.clone(),
                            ScoreKind::ARecEnsemble => s.a_rec_ensemble.clone(),
                            ScoreKind::AIntra => s.a_intra.clone(),
                            ScoreKind::AInter => s.a_inter.clone().expect("checked"),
                            ScoreKind::RDual => dual.as_ref().expect("checked")[i].clone(),
                            ScoreKind::RIntra => intra.as_ref().expect("checked")[i].clone(),
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Metrics and per-image scores of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub scores: Vec<ScoreRow>,
}

/// Score the labeled test set with every requested kind and write reports under `dir`.
pub fn evaluate(
    cfg: &RunConfig,
    split: &DatasetSplit,
    models: &Models,
    kinds: &[ScoreKind],
    dir: &Path,
) -> Result<EvalOutput> {
    models.check(kinds)?;
    if split.test.is_empty() {
        return Err(Error::validation("the test split is empty"));
    }
    let paths: Vec<String> = split.test.iter().map(|t| t.path.clone()).collect();
    let labels: Vec<u8> = split.test.iter().map(|t| t.label).collect();
    let images = load_paths(split, &paths, models.ndm.side())?;
    let maps = score_maps(models, &images, kinds, cfg.eval.sigma_agg)?;

    let mut rows = Vec::new();
    let mut scores = Vec::new();
    fs::create_dir_all(dir.join("histograms")).map_err(|e| Error::io(dir, e))?;
    for (ki, kind) in kinds.iter().enumerate() {
        let s: Vec<f64> = maps.iter().map(|m| image_score(&m[ki])).collect::<Result<_>>()?;
        let set = ScoredSet::from_parts(paths.iter().cloned(), &s, &labels);
        let row = MetricRow::compute(*kind, &set, Some(cfg.eval.bins))?;
        log::info!("{kind}: AUC {:.4} AP {:.4}", row.auc, row.ap);
        HistogramPair::new(&set.normal_scores(), &set.abnormal_scores(), cfg.eval.bins)?
            .write_csv(&dir.join("histograms").join(format!("{kind}.csv")))?;
        rows.push(row);
        scores.extend(paths.iter().zip(&s).zip(&labels).map(|((p, v), l)| ScoreRow {
            path: p.clone(),
            kind: *kind,
            score: *v,
            label: Some(*l),
        }));
        if cfg.eval.export_maps {
            for (p, m) in paths.iter().zip(&maps) {
                let stem = Path::new(p).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                export_map_png16(&m[ki], &dir.join("maps").join(kind.as_str()).join(format!("{stem}.png")))?;
            }
        }
    }
    let report = EvalReport { meta: report_meta(cfg, split), rows };
    export_report(&report, dir)?;
    write_score_table(&dir.join("scores.csv"), &scores)?;
    Ok(EvalOutput { report, scores })
}

fn report_meta(cfg: &RunConfig, split: &DatasetSplit) -> ReportMeta {
    let mut extra = BTreeMap::new();
    extra.insert("backbone".into(), format!("{:?}", cfg.net.backbone).to_ascii_lowercase());
    extra.insert("side".into(), cfg.net.side.to_string());
    extra.insert("k".into(), cfg.stage1.k.to_string());
    extra.insert("stage1_epochs".into(), cfg.stage1.epochs.to_string());
    extra.insert("asr_epochs".into(), cfg.asr.epochs.to_string());
    extra.insert("sigma_agg".into(), format!("{:?}", cfg.eval.sigma_agg).to_ascii_lowercase());
    extra.insert("n_test".into(), split.test.len().to_string());
    ReportMeta { config_digest: cfg.digest(), seed: cfg.seed, anomaly_ratio: split.meta.anomaly_ratio, extra }
}

/// Which stage-1 modules and refiners a full run trains, given the requested kinds.
fn needs(kinds: &[ScoreKind]) -> (bool, bool, bool) {
    let udm = kinds.iter().any(|k| matches!(k, ScoreKind::AInter | ScoreKind::RDual));
    let dual = kinds.contains(&ScoreKind::RDual);
    let intra = kinds.contains(&ScoreKind::RIntra);
    (udm, dual, intra)
}

/// prepare, train both stages and evaluate, all under `cfg.out_dir`.
pub fn run_all(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    write_run_descriptor(cfg, "run")?;
    let split = prepare(cfg)?;
    let kinds = cfg.eval.kinds.clone();
    let (want_udm, want_dual, want_intra) = needs(&kinds);
    let ndm = train_module(cfg, &split, ModuleTag::Ndm, &cfg.out_dir)?;
    let udm = want_udm.then(|| train_module(cfg, &split, ModuleTag::Udm, &cfg.out_dir)).transpose()?;
    let (r_dual, r_intra) = if want_dual || want_intra {
        train_refiners(cfg, &split, &ndm, udm.as_ref().filter(|_| want_dual), want_intra, &cfg.out_dir)?
    } else {
        (None, None)
    };
    let models = Models { ndm, udm, r_dual, r_intra };
    evaluate(cfg, &split, &models, &kinds, &cfg.path(EVAL_DIR))
}

/// Directory name of one sweep point.
pub fn sweep_point_dir(ar: f64) -> String {
    format!("ar_{ar}")
}

/// For each anomaly ratio: rebuild D_u, retrain the UDM (the NDM and the intra-only refiner are
/// trained once), retrain the dual refiner and evaluate. Writes `sweep/sweep.csv`.
pub fn ar_sweep(cfg: &RunConfig, ar_values: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if let Some(bad) = ar_values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::validation(format!("anomaly ratio {bad} outside [0, 1]")));
    }
    if ar_values.is_empty() {
        return Ok(Vec::new());
    }
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg.path(SWEEP_DIR);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let kinds = cfg.eval.kinds.clone();
    let (_, want_dual, want_intra) = needs(&kinds);

    let base = build_splits(&manifest, &resolve_split(cfg, &manifest))?;
    let shared = root.join("shared");
    let ndm = train_module(cfg, &base, ModuleTag::Ndm, &shared)?;
    let r_intra = if want_intra { train_refiners(cfg, &base, &ndm, None, true, &shared)?.1 } else { None };

    let mut table = Vec::new();
    for &ar in ar_values {
        let mut point = cfg.clone();
        point.split.anomaly_ratio = Some(ar);
        point.out_dir = root.join(sweep_point_dir(ar));
        write_run_descriptor(&point, "sweep-ar")?;
        let split = build_splits(&manifest, &resolve_split(&point, &manifest))?;
        if split.normal != base.normal || split.test != base.test {
            return Err(Error::contract("sweep points must share D_n and D_t"));
        }
        split.save(&point.path(SPLITS_FILE))?;
        log::info!("sweep AR {ar}: {} unlabeled images", split.unlabeled.len());
        let udm = train_module(&point, &split, ModuleTag::Udm, &point.out_dir)?;
        let r_dual =
            if want_dual { train_refiners(&point, &split, &ndm, Some(&udm), false, &point.out_dir)?.0 } else { None };
        let models = Models { ndm: ndm.clone(), udm: Some(udm), r_dual, r_intra: r_intra.clone() };
        let out = evaluate(&point, &split, &models, &kinds, &point.path(EVAL_DIR))?;
        table.push(SweepRow { anomaly_ratio: ar, rows: out.report.rows });
    }
    let csv = root.join("sweep.csv");
    fs::write(&csv, crate::eval::sweep_table_text(&table)).map_err(|e| Error::io(&csv, e))?;
    write_json(&root.join("sweep.json"), &table)?;
    Ok(table)
}

pub fn read_run_descriptor(out_dir: &Path) -> Result<RunDescriptor> {
    read_json(&out_dir.join(RUN_DESCRIPTOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 5\n[stage1]\nepochs = 3\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.stage1.epochs, 3);
        assert_eq!(partial.stage1.k, 3);
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Parse { .. })));
        let kinds = RunConfig::from_toml("[eval]\nkinds = [\"a_rec\", \"r_dual\"]\n").unwrap();
        assert_eq!(kinds.eval.kinds, vec![ScoreKind::ARec, ScoreKind::RDual]);
    }

    #[test]
    fn digest_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), RunConfig { seed: 1, ..a }.digest());
    }

    #[test]
    fn stage_configs_use_disjoint_seeds() {
        let cfg = RunConfig::default();
        let n = cfg.stage_config(ModuleTag::Ndm);
        let u = cfg.stage_config(ModuleTag::Udm);
        assert!(n.member_seeds.iter().all(|s| !u.member_seeds.contains(s)));
        let aeu = RunConfig { net: NetworkConfig { backbone: Backbone::Aeu, ..NetworkConfig::default() }, ..cfg };
        assert_eq!(aeu.stage_config(ModuleTag::Ndm).loss, LossKind::Aeu);
    }

    #[test]
    fn unlabeled_capacity() {
        assert_eq!(max_unlabeled(600, 600, 0.6), 1000);
        assert_eq!(max_unlabeled(600, 600, 1.0), 600);
        assert_eq!(max_unlabeled(600, 600, 0.0), 600);
        assert_eq!(max_unlabeled(0, 0, 0.5), 0);
    }
}
