//! Anomaly score refinement: a small fully convolutional network that maps raw discrepancy maps
//! to per-pixel anomaly probabilities, trained with focal loss on synthetic pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, read_json, write_blob, write_json};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nets::load_params;
use crate::nn::{Adam, BatchNorm, Block, Conv2d, Op, Param, Real, Tensor};
use crate::scoring::{
    ensemble_forward_batch, refine_by_uncertainty, score_inter, score_intra, ScoreKind, ScoreMap, SigmaAgg,
};
use crate::seed;
use crate::synthesis::synth_pair;
use crate::training::EnsembleCheckpoint;

pub const ASR_FILE: &str = "asr.json";
pub const ASR_SCHEMA_VERSION: u32 = 1;
/// Probability clamp inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    /// 1 for the intra-only network, 2 for the dual network.
    pub in_channels: usize,
    pub conv_layers: usize,
    pub hidden_channels: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Synthetic pairs per epoch; `None` means one per normal image.
    pub pairs_per_epoch: Option<usize>,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            in_channels: 2,
            conv_layers: 3,
            hidden_channels: 32,
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            gamma: 2.0,
            batch_size: 32,
            pairs_per_epoch: None,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::validation(format!("asr in_channels must be 1 or 2, got {}", self.in_channels)));
        }
        if self.conv_layers < 2 || self.hidden_channels == 0 {
            return Err(Error::validation("asr needs at least 2 conv layers and a positive hidden width"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("asr learning rate must be positive and weight decay non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == Some(0) {
            return Err(Error::validation("asr epochs, batch size and pairs per epoch must be positive"));
        }
        Ok(())
    }

    pub fn output_kind(&self) -> ScoreKind {
        if self.in_channels == 2 {
            ScoreKind::RDual
        } else {
            ScoreKind::RIntra
        }
    }
}

/// Mean focal loss and its gradient w.r.t. `pred`.
pub fn focal_loss_grad<F: Real>(pred: &[F], target: &[u8], gamma: f64) -> (f64, Vec<F>) {
    let inv_n = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let raw = p.to_f64().unwrap();
            let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let (pt, sign) = if *t == 1 { (p, 1.0) } else { (1.0 - p, -1.0) };
            let q = 1.0 - pt;
            let ln = pt.ln();
            loss -= q.powf(gamma) * ln;
            if raw != p {
                return F::zero();
            }
            let mut d = -q.powf(gamma) / pt;
            if gamma != 0.0 {
                d += gamma * q.powf(gamma - 1.0) * ln;
            }
            F::lit(sign * d * inv_n)
        })
        .collect();
    (loss * inv_n, grad)
}

pub fn focal_loss(pred: &[f32], target: &[u8], gamma: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::validation(format!("focal loss: {} predictions vs {} targets", pred.len(), target.len())));
    }
    if target.iter().any(|t| *t > 1) {
        return Err(Error::validation("focal loss targets must be 0 or 1"));
    }
    if pred.is_empty() {
        return Err(Error::validation("focal loss over an empty grid"));
    }
    Ok(focal_loss_grad(pred, target, gamma).0)
}

#[derive(Clone, Debug)]
pub struct AsrNet<F> {
    cfg: AsrConfig,
    init_seed: u64,
    blocks: Vec<Block<F>>,
    head: Conv2d<F>,
    probs: Option<Tensor<F>>,
}

impl<F: Real> AsrNet<F> {
    pub fn new(cfg: &AsrConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.conv_layers - 1 {
            let conv = Conv2d::new(&format!("asr.{i}.conv"), cin, cfg.hidden_channels, 3, 1, 1, &mut rng);
            let bn = BatchNorm::new(&format!("asr.{i}.bn"), cfg.hidden_channels);
            blocks.push(Block::new(Op::Conv(conv), Some(bn), true));
            cin = cfg.hidden_channels;
        }
        let head = Conv2d::new("asr.head.conv", cin, 1, 3, 1, 1, &mut rng);
        Ok(AsrNet { cfg: cfg.clone(), init_seed, blocks, head, probs: None })
    }

    pub fn config(&self) -> &AsrConfig {
        &self.cfg
    }

    /// Evaluation-mode forward: `[in_channels, n, h, w]` to probabilities `[1, n, h, w]`.
    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cfg.in_channels, "asr: input channel mismatch");
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.eval(&h);
        }
        let mut y = self.head.eval(&h);
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        y
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cfg.in_channels, "asr: input channel mismatch");
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.train_forward(&h);
        }
        let mut y = self.head.train_forward(&h);
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.probs = Some(y.clone());
        y
    }

    /// Accumulate parameter gradients given the loss gradient w.r.t. the probabilities.
    pub fn backward(&mut self, d_prob: &Tensor<F>) {
        let probs = self.probs.take().expect("backward without train_forward");
        let mut g = d_prob.clone();
        for (gv, p) in g.data.iter_mut().zip(&probs.data) {
            *gv *= *p * (F::one() - *p);
        }
        let mut dh = self.head.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            dh = b.backward(&dh);
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out: Vec<&Param<F>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub type AsrNetwork = AsrNet<f32>;

pub fn build_asr(cfg: &AsrConfig, init_seed: u64) -> Result<AsrNetwork> {
    AsrNet::new(cfg, init_seed)
}

/// A trained refinement network and the stage-1 checkpoints it was fitted against.
#[derive(Clone, Debug)]
pub struct AsrCheckpoint {
    pub net: AsrNetwork,
    pub ndm_fingerprint: String,
    pub udm_fingerprint: Option<String>,
    /// Mean focal loss per epoch.
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AsrDescriptor {
    schema_version: u32,
    in_channels: usize,
    gamma: f64,
    init_seed: u64,
    config: AsrConfig,
    ndm_fingerprint: String,
    udm_fingerprint: Option<String>,
    history: Vec<f64>,
}

impl AsrCheckpoint {
    pub fn config(&self) -> &AsrConfig {
        self.net.config()
    }

    pub fn kind(&self) -> ScoreKind {
        self.config().output_kind()
    }

    /// Whether `ndm`/`udm` are the checkpoints this network was trained on. Logs a warning on
    /// mismatch.
    pub fn matches_stage1(&self, ndm: &EnsembleCheckpoint, udm: Option<&EnsembleCheckpoint>) -> bool {
        let ok = ndm.data_fingerprint == self.ndm_fingerprint
            && (self.udm_fingerprint.is_none() || udm.map(|u| &u.data_fingerprint) == self.udm_fingerprint.as_ref());
        if !ok {
            log::warn!("{} network was trained against different stage-1 checkpoints", self.kind());
        }
        ok
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = self.net.params();
        write_blob(dir, params.iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.value.as_slice())))?;
        let cfg = self.config();
        write_json(
            &dir.join(ASR_FILE),
            &AsrDescriptor {
                schema_version: ASR_SCHEMA_VERSION,
                in_channels: cfg.in_channels,
                gamma: cfg.gamma,
                init_seed: self.net.init_seed,
                config: cfg.clone(),
                ndm_fingerprint: self.ndm_fingerprint.clone(),
                udm_fingerprint: self.udm_fingerprint.clone(),
                history: self.history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let desc: AsrDescriptor = read_json(&dir.join(ASR_FILE))?;
        if desc.schema_version != ASR_SCHEMA_VERSION {
            return Err(Error::validation(format!("unsupported asr schema_version {}", desc.schema_version)));
        }
        if desc.in_channels != desc.config.in_channels || desc.gamma != desc.config.gamma {
            return Err(Error::validation(format!("{}: inconsistent asr descriptor", dir.display())));
        }
        let mut net = AsrNet::new(&desc.config, desc.init_seed)?;
        load_params(&mut net.params_mut(), read_blob(dir)?, dir)?;
        Ok(AsrCheckpoint {
            net,
            ndm_fingerprint: desc.ndm_fingerprint,
            udm_fingerprint: desc.udm_fingerprint,
            history: desc.history,
        })
    }
}

/// The raw discrepancy channels the refinement network consumes for each image: `[A_intra]` or
/// `[A_intra, A_inter]`, uncertainty-refined when the NDM predicts σ.
pub fn discrepancy_channels(
    ndm: &EnsembleCheckpoint,
    udm: Option<&EnsembleCheckpoint>,
    images: &[ImageTensor],
    agg: SigmaAgg,
) -> Result<Vec<Vec<ScoreMap>>> {
    let per_chunk: Vec<Vec<Vec<ScoreMap>>> = images
        .par_chunks(32)
        .map(|chunk| {
            let a = ensemble_forward_batch(ndm, chunk, agg)?;
            let b = udm.map(|u| ensemble_forward_batch(u, chunk, agg)).transpose()?;
            (0..chunk.len())
                .map(|i| {
                    let refine = |m: ScoreMap| match &a[i].sigma {
                        Some(s) => refine_by_uncertainty(&m, s),
                        None => Ok(m),
                    };
                    let mut maps = vec![refine(score_intra(&a[i]))?];
                    if let Some(b) = &b {
                        maps.push(refine(score_inter(&a[i], &b[i])?)?);
                    }
                    Ok(maps)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

fn stack_inputs<F: Real>(samples: &[&[ScoreMap]], side: usize) -> Tensor<F> {
    let c = samples[0].len();
    let n = samples.len();
    let hw = side * side;
    let mut t = Tensor::zeros(c, n, side, side);
    for (i, maps) in samples.iter().enumerate() {
        for (ch, m) in maps.iter().enumerate() {
            let dst = &mut t.data[(ch * n + i) * hw..(ch * n + i + 1) * hw];
            dst.iter_mut().zip(&m.values).for_each(|(d, v)| *d = F::lit(f64::from(*v)));
        }
    }
    t
}

/// Train a refinement network on freshly synthesized pairs each epoch. Stage-1 checkpoints are
/// only read.
pub fn train_asr(
    ndm: &EnsembleCheckpoint,
    udm: Option<&EnsembleCheckpoint>,
    normals: &[ImageTensor],
    cfg: &AsrConfig,
    run_seed: u64,
    agg: SigmaAgg,
) -> Result<AsrCheckpoint> {
    cfg.validate()?;
    match (cfg.in_channels, udm) {
        (2, None) => return Err(Error::contract("the dual refinement network needs a UDM checkpoint")),
        (1, Some(_)) => return Err(Error::contract("the intra-only refinement network takes no UDM checkpoint")),
        _ => {}
    }
    if let Some(u) = udm {
        if u.net_config() != ndm.net_config() {
            return Err(Error::validation("NDM and UDM network configs differ"));
        }
    }
    let side = ndm.side();
    if let Some(bad) = normals.iter().find(|x| x.side() != side) {
        return Err(Error::validation(format!("normal image side {} != checkpoint side {side}", bad.side())));
    }
    let kind_idx = cfg.in_channels as u64;
    let mut net = AsrNet::<f32>::new(cfg, seed::derive(run_seed, seed::tags::ASR_INIT, kind_idx))?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed::derive(run_seed, seed::tags::ASR_SHUFFLE, kind_idx));
    let pairs = cfg.pairs_per_epoch.unwrap_or(normals.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stream_seed = seed::derive(run_seed, seed::tags::SYNTH, epoch as u64);
        let synth =
            (0..pairs).into_par_iter().map(|i| synth_pair(normals, stream_seed, i)).collect::<Result<Vec<_>>>()?;
        let images: Vec<ImageTensor> = synth.iter().map(|p| p.x_s.clone()).collect();
        let inputs = discrepancy_channels(ndm, udm, &images, agg)?;
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in crate::training::epoch_batches(&order, cfg.batch_size) {
            let samples: Vec<&[ScoreMap]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let x = stack_inputs::<f32>(&samples, side);
            let target: Vec<u8> = batch.iter().flat_map(|&i| synth[i].y_s.iter().copied()).collect();
            net.zero_grad();
            let probs = net.train_forward(&x);
            let (loss, grad) = focal_loss_grad(&probs.data, &target, cfg.gamma);
            if !loss.is_finite() {
                return Err(Error::Divergence { member: 0, epoch, loss });
            }
            net.backward(&Tensor::from_vec(1, batch.len(), side, side, grad));
            opt.step(&mut net.params_mut());
            total += loss * batch.len() as f64;
        }
        if !net.params().iter().all(|p| p.value.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence { member: 0, epoch, loss: f64::NAN });
        }
        let mean = total / pairs as f64;
        log::debug!("{} epoch {epoch}: focal loss {mean:.6}", cfg.output_kind());
        history.push(mean);
    }
    Ok(AsrCheckpoint {
        net,
        ndm_fingerprint: ndm.data_fingerprint.clone(),
        udm_fingerprint: udm.map(|u| u.data_fingerprint.clone()),
        history,
    })
}

/// Refined map of one image, per `[A_intra]` or `[A_intra, A_inter]`.
pub type RefinedMap = ScoreMap;

pub fn refine(asr: &AsrCheckpoint, maps: &[&ScoreMap]) -> Result<RefinedMap> {
    let owned: Vec<ScoreMap> = maps.iter().map(|m| (*m).clone()).collect();
    Ok(refine_batch(asr, &[owned])?.remove(0))
}

/// Refine many images at once; each entry holds the input channels of one image.
pub fn refine_batch(asr: &AsrCheckpoint, inputs: &[Vec<ScoreMap>]) -> Result<Vec<RefinedMap>> {
    let want = asr.config().in_channels;
    let expected = [ScoreKind::AIntra, ScoreKind::AInter];
    for maps in inputs {
        if maps.len() != want {
            return Err(Error::contract(format!(
                "{} network expects {want} score maps, got {}",
                asr.kind(),
                maps.len()
            )));
        }
        if maps.iter().zip(expected).any(|(m, k)| m.kind != k) {
            return Err(Error::contract("refinement inputs must be ordered [a_intra, a_inter]"));
        }
        if maps.iter().any(|m| m.side != maps[0].side) {
            return Err(Error::validation("refinement inputs differ in side"));
        }
    }
    let kind = asr.kind();
    let chunks: Vec<Vec<RefinedMap>> = inputs
        .par_chunks(64)
        .map(|chunk| {
            if chunk.is_empty() {
                return Vec::new();
            }
            let side = chunk[0][0].side;
            let samples: Vec<&[ScoreMap]> = chunk.iter().map(Vec::as_slice).collect();
            let out = asr.net.eval(&stack_inputs(&samples, side));
            (0..chunk.len()).map(|i| ScoreMap { side, values: out.sample_plane(0, i).to_vec(), kind }).collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}
