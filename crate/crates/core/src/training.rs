//! Stage-1 ensemble training.
//!
//! Each module (normal-only NDM, normal+unlabeled UDM) is an ensemble of `k` reconstruction
//! networks that differ only in their initialization seed and the order in which they visit
//! the training images.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{read_json, write_json};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nets::{Backbone, Network, NetworkConfig, ReconNet, ReconstructionOutput};
use crate::nn::{Adam, Real, Tensor};
use crate::seed;

pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Aeu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModuleTag {
    Ndm,
    Udm,
}

impl ModuleTag {
    pub fn dir_name(self) -> &'static str {
        match self {
            ModuleTag::Ndm => "NDM",
            ModuleTag::Udm => "UDM",
        }
    }

    fn seed_tag(self) -> &'static str {
        match self {
            ModuleTag::Ndm => seed::tags::NDM_MEMBER,
            ModuleTag::Udm => seed::tags::UDM_MEMBER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub member_seeds: Vec<u64>,
    pub loss: LossKind,
}

impl TrainConfig {
    /// Defaults with member seeds derived from `global_seed` in a range private to `tag`.
    pub fn for_module(tag: ModuleTag, global_seed: u64, k: usize) -> Self {
        TrainConfig {
            k,
            epochs: 250,
            learning_rate: 5e-4,
            batch_size: 64,
            member_seeds: (0..k as u64).map(|i| seed::derive(global_seed, tag.seed_tag(), i)).collect(),
            loss: LossKind::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("ensemble size k must be at least 1"));
        }
        if self.member_seeds.len() != self.k {
            return Err(Error::validation(format!(
                "{} member seeds given for k = {}",
                self.member_seeds.len(),
                self.k
            )));
        }
        let distinct: BTreeSet<_> = self.member_seeds.iter().collect();
        if distinct.len() != self.k {
            return Err(Error::validation("member seeds must be distinct"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Mean squared error over every pixel and its gradient w.r.t. the reconstruction.
pub fn mse_loss_grad<F: Real>(x: &[F], recon: &[F]) -> (f64, Vec<F>) {
    assert_eq!(x.len(), recon.len());
    let n = x.len() as f64;
    let scale = F::lit(2.0 / n);
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(recon)
        .map(|(a, b)| {
            let r = *b - *a;
            loss += r.to_f64().unwrap().powi(2);
            r * scale
        })
        .collect();
    (loss / n, grad)
}

/// Uncertainty-weighted loss `mean((x - x̂)² exp(-s) + s)` with `s = log σ²`, and its gradients
/// w.r.t. the reconstruction and `s`.
pub fn aeu_loss_grad<F: Real>(x: &[F], recon: &[F], log_var: &[F]) -> (f64, Vec<F>, Vec<F>) {
    assert!(x.len() == recon.len() && x.len() == log_var.len());
    let n = x.len() as f64;
    let inv_n = F::lit(1.0 / n);
    let two = F::lit(2.0);
    let mut loss = 0.0;
    let mut d_recon = Vec::with_capacity(x.len());
    let mut d_lv = Vec::with_capacity(x.len());
    for ((a, b), s) in x.iter().zip(recon).zip(log_var) {
        let r = *b - *a;
        let prec = (-*s).exp();
        let weighted = r * r * prec;
        let (r64, s64) = (r.to_f64().unwrap(), s.to_f64().unwrap());
        loss += r64 * r64 * (-s64).exp() + s64;
        d_recon.push(two * r * prec * inv_n);
        d_lv.push((F::one() - weighted) * inv_n);
    }
    (loss / n, d_recon, d_lv)
}

fn check_pairs(batch: &[ImageTensor], outputs: &[ReconstructionOutput]) -> Result<()> {
    if batch.len() != outputs.len() {
        return Err(Error::validation(format!("{} images but {} reconstructions", batch.len(), outputs.len())));
    }
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    for (x, o) in batch.iter().zip(outputs) {
        if x.data().len() != o.recon.len() {
            return Err(Error::validation("image and reconstruction shapes differ"));
        }
    }
    Ok(())
}

/// Mean over batch and pixels of `(x - x̂)²`.
pub fn loss_mse(batch: &[ImageTensor], outputs: &[ReconstructionOutput]) -> Result<f64> {
    check_pairs(batch, outputs)?;
    let x: Vec<f32> = batch.iter().flat_map(|b| b.data().iter().copied()).collect();
    let r: Vec<f32> = outputs.iter().flat_map(|o| o.recon.iter().copied()).collect();
    Ok(mse_loss_grad(&x, &r).0)
}

/// Mean over batch and pixels of `(x - x̂)²/σ² + log σ²`.
pub fn loss_aeu(batch: &[ImageTensor], outputs: &[ReconstructionOutput]) -> Result<f64> {
    check_pairs(batch, outputs)?;
    let mut lv = Vec::new();
    for o in outputs {
        let v = o.log_variance.as_ref().ok_or_else(|| Error::contract("AE-U loss needs a log-variance head"))?;
        if v.len() != o.recon.len() {
            return Err(Error::validation("log-variance and reconstruction shapes differ"));
        }
        lv.extend_from_slice(v);
    }
    let x: Vec<f32> = batch.iter().flat_map(|b| b.data().iter().copied()).collect();
    let r: Vec<f32> = outputs.iter().flat_map(|o| o.recon.iter().copied()).collect();
    Ok(aeu_loss_grad(&x, &r, &lv).0)
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step<F: Real>(net: &mut ReconNet<F>, opt: &mut Adam<F>, x: &Tensor<F>, loss: LossKind) -> f64 {
    net.zero_grad();
    let out = net.train_forward(x);
    let value = match (loss, out.log_var) {
        (LossKind::Mse, _) => {
            let (l, g) = mse_loss_grad(&x.data, &out.recon.data);
            net.backward(&Tensor::from_vec(1, x.n, x.h, x.w, g), None);
            l
        }
        (LossKind::Aeu, Some(lv)) => {
            let (l, gr, gv) = aeu_loss_grad(&x.data, &out.recon.data, &lv.data);
            let gv = Tensor::from_vec(1, x.n, x.h, x.w, gv);
            net.backward(&Tensor::from_vec(1, x.n, x.h, x.w, gr), Some(&gv));
            l
        }
        (LossKind::Aeu, None) => panic!("AE-U loss on a network without a variance head"),
    };
    opt.step(&mut net.params_mut());
    value
}

/// Batches of a shuffled epoch. A trailing batch of one image is dropped when other batches
/// exist, because batch statistics are undefined for the fully connected layers on it.
pub(crate) fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

/// Train a single member; returns the network and its per-epoch mean losses.
pub fn train_member(
    images: &[ImageTensor],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    member: usize,
) -> Result<(Network, Vec<f64>)> {
    let seed = cfg.member_seeds[member];
    let mut net = Network::new(net_cfg, seed)?;
    let mut opt = Adam::new(cfg.learning_rate, 0.0);
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed::splitmix64(seed));
    let side = net_cfg.side;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(&order, cfg.batch_size) {
            let planes: Vec<&[f32]> = batch.iter().map(|&i| images[i].data()).collect();
            let x = Tensor::from_planes(&planes, side, side);
            let l = train_step(&mut net, &mut opt, &x, cfg.loss);
            if !l.is_finite() {
                return Err(Error::Divergence { member, epoch, loss: l });
            }
            total += l * batch.len() as f64;
            seen += batch.len();
        }
        let mean = total / seen as f64;
        if !net.params().iter().all(|p| p.value.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence { member, epoch, loss: f64::NAN });
        }
        log::debug!("member {member} epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok((net, history))
}

/// Order-insensitive digest of a set of image paths.
pub fn fingerprint_split<S: AsRef<str>>(paths: &[S]) -> String {
    let set: BTreeSet<&str> = paths.iter().map(AsRef::as_ref).collect();
    if set.is_empty() {
        return "0".repeat(64);
    }
    let mut h = Sha256::new();
    for p in set {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// A trained ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleCheckpoint {
    pub members: Vec<Network>,
    pub module_tag: ModuleTag,
    pub train_config: TrainConfig,
    pub data_fingerprint: String,
    /// Per-member mean training loss of every epoch.
    pub history: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDescriptor {
    schema_version: u32,
    module_tag: ModuleTag,
    train_config: TrainConfig,
    data_fingerprint: String,
    history: Vec<Vec<f64>>,
}

/// Train all members of one module on `images` (whose manifest paths are `paths`).
pub fn train_ensemble<S: AsRef<str> + Sync>(
    images: &[ImageTensor],
    paths: &[S],
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    module_tag: ModuleTag,
) -> Result<EnsembleCheckpoint> {
    cfg.validate()?;
    net_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if images.len() != paths.len() {
        return Err(Error::validation("images and paths differ in length"));
    }
    if let Some(bad) = images.iter().find(|x| x.side() != net_cfg.side) {
        return Err(Error::validation(format!("training image side {} != {}", bad.side(), net_cfg.side)));
    }
    match (cfg.loss, net_cfg.backbone) {
        (LossKind::Aeu, Backbone::Ae) => {
            return Err(Error::contract("aeu loss requires the AE-U backbone"));
        }
        (LossKind::Mse, Backbone::Aeu) => {
            return Err(Error::contract("the AE-U backbone must be trained with the aeu loss"));
        }
        _ => {}
    }
    let trained: Vec<(Network, Vec<f64>)> =
        (0..cfg.k).into_par_iter().map(|m| train_member(images, net_cfg, cfg, m)).collect::<Result<_>>()?;
    let (members, history) = trained.into_iter().unzip();
    Ok(EnsembleCheckpoint {
        members,
        module_tag,
        train_config: cfg.clone(),
        data_fingerprint: fingerprint_split(paths),
        history,
    })
}

impl EnsembleCheckpoint {
    pub fn net_config(&self) -> &NetworkConfig {
        self.members[0].config()
    }

    pub fn side(&self) -> usize {
        self.net_config().side
    }

    /// Write `member_<i>/` directories and `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member_{i}")))?;
        }
        write_json(
            &dir.join(ENSEMBLE_FILE),
            &EnsembleDescriptor {
                schema_version: ENSEMBLE_SCHEMA_VERSION,
                module_tag: self.module_tag,
                train_config: self.train_config.clone(),
                data_fingerprint: self.data_fingerprint.clone(),
                history: self.history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let desc: EnsembleDescriptor = read_json(&dir.join(ENSEMBLE_FILE))?;
        if desc.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(Error::validation(format!("unsupported ensemble schema_version {}", desc.schema_version)));
        }
        let members = (0..desc.train_config.k)
            .map(|i| Network::load(&dir.join(format!("member_{i}"))))
            .collect::<Result<Vec<_>>>()?;
        if members.iter().any(|m| m.config() != members[0].config()) {
            return Err(Error::validation("ensemble members disagree on their network config"));
        }
        Ok(EnsembleCheckpoint {
            members,
            module_tag: desc.module_tag,
            train_config: desc.train_config,
            data_fingerprint: desc.data_fingerprint,
            history: desc.history,
        })
    }
}

/// Worst relative error between backpropagated and central-difference gradients over every
/// trainable weight of a 4x4 network, evaluated in f64.
pub fn network_gradient_error(backbone: Backbone, loss: LossKind) -> f64 {
    let cfg =
        NetworkConfig { side: 4, encoder_channels: vec![2, 2], kernel: 4, stride: 2, fc_widths: vec![3], backbone };
    let mut net = ReconNet::<f64>::new(&cfg, 17).expect("valid toy network");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_vec(1, 3, 4, 4, (0..48).map(|_| rng.random::<f64>()).collect());
    let eval_loss = |net: &mut ReconNet<f64>| {
        let o = net.train_forward(&x);
        match loss {
            LossKind::Mse => mse_loss_grad(&x.data, &o.recon.data).0,
            LossKind::Aeu => {
                aeu_loss_grad(&x.data, &o.recon.data, &o.log_var.expect("AE-U loss needs the variance head").data).0
            }
        }
    };
    net.zero_grad();
    let o = net.train_forward(&x);
    match loss {
        LossKind::Mse => {
            let (_, g) = mse_loss_grad(&x.data, &o.recon.data);
            net.backward(&Tensor::from_vec(1, 3, 4, 4, g), None);
        }
        LossKind::Aeu => {
            let (_, gr, gv) =
                aeu_loss_grad(&x.data, &o.recon.data, &o.log_var.expect("AE-U loss needs the variance head").data);
            let gv = Tensor::from_vec(1, 3, 4, 4, gv);
            net.backward(&Tensor::from_vec(1, 3, 4, 4, gr), Some(&gv));
        }
    }
    let analytic: Vec<Vec<f64>> = net.params().iter().filter(|p| p.trainable).map(|p| p.grad.clone()).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let bump = |net: &mut ReconNet<f64>, d: f64| {
                let mut ps: Vec<_> = net.params_mut().into_iter().filter(|p| p.trainable).collect();
                ps[pi].value[j] += d;
            };
            bump(&mut net, h);
            let lp = eval_loss(&mut net);
            bump(&mut net, -2.0 * h);
            let lm = eval_loss(&mut net);
            bump(&mut net, h);
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - g).abs() / (num.abs().max(g.abs()).max(1e-6));
            worst = worst.max(rel);
        }
    }
    worst
}
