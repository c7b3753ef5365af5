//! Reconstruction backbones: a convolutional autoencoder (AE) and its variant with a per-pixel
//! log-variance head (AE-U).

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, read_json, write_blob, write_json};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Block, Conv2d, ConvTranspose2d, Linear, Op, Param, Real, Tensor};

pub const NET_SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";

/// Clamp range of the predicted log-variance.
pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Ae,
    Aeu,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ae" => Ok(Backbone::Ae),
            "aeu" => Ok(Backbone::Aeu),
            _ => Err(Error::validation(format!("unknown backbone {s:?} (expected ae | aeu)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub side: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Widths of the fully connected bottleneck before the layer that maps back to the
    /// flattened encoder output; the bottleneck therefore has `fc_widths.len() + 1` layers.
    pub fc_widths: Vec<usize>,
    pub backbone: Backbone,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            side: 64,
            encoder_channels: vec![16, 32, 64, 64],
            kernel: 4,
            stride: 2,
            fc_widths: vec![128, 16],
            backbone: Backbone::Ae,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::validation("kernel and stride must be positive"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::validation("encoder_channels must be non-empty and positive"));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::validation("fc_widths must be positive"));
        }
        if self.kernel < self.stride || !(self.kernel - self.stride).is_multiple_of(2) {
            return Err(Error::validation(format!(
                "kernel {} and stride {} do not give exact downsampling with symmetric padding",
                self.kernel, self.stride
            )));
        }
        let factor = self
            .stride
            .checked_pow(self.encoder_channels.len() as u32)
            .ok_or_else(|| Error::validation("too many encoder layers"))?;
        if self.side == 0 || !self.side.is_multiple_of(factor) {
            return Err(Error::validation(format!("side {} is not divisible by stride^layers = {factor}", self.side)));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    /// Spatial extent at the bottom of the encoder.
    pub fn bottom_side(&self) -> usize {
        self.side / self.stride.pow(self.encoder_channels.len() as u32)
    }

    /// Output channels of each decoder block, ending with the single-channel output layer.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut ch: Vec<usize> = self.encoder_channels.iter().rev().skip(1).copied().collect();
        ch.push(1);
        ch
    }
}

/// Reconstruction and, for AE-U, the clamped log-variance map, as `[1, n, side, side]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput<F> {
    pub recon: Tensor<F>,
    pub log_var: Option<Tensor<F>>,
}

/// Per-image output of [`Network::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionOutput {
    pub recon: Vec<f32>,
    pub log_variance: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct ReconNet<F> {
    cfg: NetworkConfig,
    init_seed: u64,
    encoder: Vec<Block<F>>,
    bottleneck: Vec<Block<F>>,
    decoder: Vec<Block<F>>,
    recon_head: ConvTranspose2d<F>,
    var_head: Option<ConvTranspose2d<F>>,
    cache: Option<TrainCache<F>>,
}

#[derive(Clone, Debug)]
struct TrainCache<F> {
    recon: Tensor<F>,
    var_in_range: Option<Vec<bool>>,
}

/// Production precision network.
pub type Network = ReconNet<f32>;

impl<F: Real> ReconNet<F> {
    /// Build a network with weights drawn deterministically from `init_seed`. The variance head
    /// is initialized last, so AE and AE-U built from one seed share every other weight.
    pub fn new(cfg: &NetworkConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let (k, s, p) = (cfg.kernel, cfg.stride, cfg.padding());

        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &cout) in cfg.encoder_channels.iter().enumerate() {
            let conv = Conv2d::new(&format!("encoder.{i}.conv"), cin, cout, k, s, p, &mut rng);
            encoder.push(Block::new(Op::Conv(conv), Some(BatchNorm::new(&format!("encoder.{i}.bn"), cout)), true));
            cin = cout;
        }

        let bottom = cfg.bottom_side();
        let flat = cin * bottom * bottom;
        let mut bottleneck = Vec::new();
        let mut fin = flat;
        for (i, &fout) in cfg.fc_widths.iter().chain(std::iter::once(&flat)).enumerate() {
            let lin = Linear::new(&format!("bottleneck.{i}.fc"), fin, fout, &mut rng);
            bottleneck.push(Block::new(
                Op::Linear(lin),
                Some(BatchNorm::new(&format!("bottleneck.{i}.bn"), fout)),
                true,
            ));
            fin = fout;
        }

        let dec = cfg.decoder_channels();
        let mut decoder = Vec::new();
        for (i, &cout) in dec[..dec.len() - 1].iter().enumerate() {
            let de = ConvTranspose2d::new(&format!("decoder.{i}.deconv"), cin, cout, k, s, p, &mut rng);
            decoder.push(Block::new(Op::Deconv(de), Some(BatchNorm::new(&format!("decoder.{i}.bn"), cout)), true));
            cin = cout;
        }
        let recon_head = ConvTranspose2d::new("recon_head", cin, 1, k, s, p, &mut rng);
        let var_head =
            (cfg.backbone == Backbone::Aeu).then(|| ConvTranspose2d::new("var_head", cin, 1, k, s, p, &mut rng));

        Ok(ReconNet { cfg: cfg.clone(), init_seed, encoder, bottleneck, decoder, recon_head, var_head, cache: None })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn check_input(&self, x: &Tensor<F>) {
        assert!(
            x.c == 1 && x.h == self.cfg.side && x.w == self.cfg.side,
            "network input must be [1, n, {0}, {0}]",
            self.cfg.side
        );
    }

    fn bottom_shape(&self) -> (usize, usize) {
        (*self.cfg.encoder_channels.last().unwrap(), self.cfg.bottom_side())
    }

    /// Evaluation-mode forward (batch-norm uses running statistics).
    pub fn eval(&self, x: &Tensor<F>) -> NetOutput<F> {
        self.check_input(x);
        let mut h = x.clone();
        for b in &self.encoder {
            h = b.eval(&h);
        }
        let mut z = h.flatten();
        for b in &self.bottleneck {
            z = b.eval(&z);
        }
        let (c, side) = self.bottom_shape();
        let mut h = z.unflatten(c, side, side);
        for b in &self.decoder {
            h = b.eval(&h);
        }
        let mut recon = self.recon_head.eval(&h);
        recon.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let log_var = self.var_head.as_ref().map(|head| {
            let mut lv = head.eval(&h);
            let (lo, hi) = (F::lit(LOG_VAR_MIN as f64), F::lit(LOG_VAR_MAX as f64));
            lv.data.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
            lv
        });
        NetOutput { recon, log_var }
    }

    /// Training-mode forward; caches what [`ReconNet::backward`] needs.
    pub fn train_forward(&mut self, x: &Tensor<F>) -> NetOutput<F> {
        self.check_input(x);
        let mut h = x.clone();
        for b in &mut self.encoder {
            h = b.train_forward(&h);
        }
        let mut z = h.flatten();
        for b in &mut self.bottleneck {
            z = b.train_forward(&z);
        }
        let (c, side) = self.bottom_shape();
        let mut h = z.unflatten(c, side, side);
        for b in &mut self.decoder {
            h = b.train_forward(&h);
        }
        let mut recon = self.recon_head.train_forward(&h);
        recon.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let (lo, hi) = (F::lit(LOG_VAR_MIN as f64), F::lit(LOG_VAR_MAX as f64));
        let (log_var, var_in_range) = match &mut self.var_head {
            Some(head) => {
                let mut lv = head.train_forward(&h);
                let inside = lv.data.iter().map(|v| *v > lo && *v < hi).collect();
                lv.data.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
                (Some(lv), Some(inside))
            }
            None => (None, None),
        };
        self.cache = Some(TrainCache { recon: recon.clone(), var_in_range });
        NetOutput { recon, log_var }
    }

    /// Accumulate parameter gradients given the loss gradients w.r.t. the (post-sigmoid)
    /// reconstruction and the (post-clamp) log-variance.
    pub fn backward(&mut self, d_recon: &Tensor<F>, d_log_var: Option<&Tensor<F>>) {
        let cache = self.cache.take().expect("backward without train_forward");
        let mut g = d_recon.clone();
        for (gv, y) in g.data.iter_mut().zip(&cache.recon.data) {
            *gv *= *y * (F::one() - *y);
        }
        let mut dh = self.recon_head.backward(&g);
        match (&mut self.var_head, d_log_var, cache.var_in_range) {
            (Some(head), Some(dlv), Some(inside)) => {
                let mut g = dlv.clone();
                for (gv, keep) in g.data.iter_mut().zip(&inside) {
                    if !keep {
                        *gv = F::zero();
                    }
                }
                let dv = head.backward(&g);
                dh.data.iter_mut().zip(&dv.data).for_each(|(a, b)| *a += *b);
            }
            (Some(_), None, _) => panic!("AE-U backward needs a log-variance gradient"),
            _ => {}
        }
        for b in self.decoder.iter_mut().rev() {
            dh = b.backward(&dh);
        }
        let mut dz = dh.flatten();
        for b in self.bottleneck.iter_mut().rev() {
            dz = b.backward(&dz);
        }
        let (c, side) = self.bottom_shape();
        let mut dh = dz.unflatten(c, side, side);
        for b in self.encoder.iter_mut().rev() {
            dh = b.backward(&dh);
        }
    }

    /// Every named tensor (weights and batch-norm buffers) in a fixed order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for b in self.encoder.iter().chain(&self.bottleneck).chain(&self.decoder) {
            out.extend(b.params());
        }
        out.extend(self.recon_head.params());
        if let Some(h) = &self.var_head {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.bottleneck.iter_mut()).chain(self.decoder.iter_mut()) {
            out.extend(b.params_mut());
        }
        out.extend(self.recon_head.params_mut());
        if let Some(h) = &mut self.var_head {
            out.extend(h.params_mut());
        }
        out
    }

    /// Parameters of the variance head only (empty for AE).
    pub fn var_head_params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.var_head.as_mut().map(|h| h.params_mut()).unwrap_or_default()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[derive(Serialize, Deserialize)]
struct MemberDescriptor {
    schema_version: u32,
    init_seed: u64,
    #[serde(flatten)]
    config: NetworkConfig,
}

impl Network {
    /// Evaluation-mode forward over a batch of images.
    pub fn forward(&self, batch: &[ImageTensor]) -> Result<Vec<ReconstructionOutput>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = batch.iter().find(|x| x.side() != self.cfg.side) {
            return Err(Error::validation(format!(
                "input side {} does not match network side {}",
                bad.side(),
                self.cfg.side
            )));
        }
        let planes: Vec<&[f32]> = batch.iter().map(|x| x.data()).collect();
        let out = self.eval(&Tensor::from_planes(&planes, self.cfg.side, self.cfg.side));
        Ok((0..batch.len())
            .map(|i| ReconstructionOutput {
                recon: out.recon.sample_plane(0, i).to_vec(),
                log_variance: out.log_var.as_ref().map(|lv| lv.sample_plane(0, i).to_vec()),
            })
            .collect())
    }

    /// Persist as `config.json` plus a tensor blob in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = self.params();
        write_blob(dir, params.iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.value.as_slice())))?;
        write_json(
            &dir.join(CONFIG_FILE),
            &MemberDescriptor {
                schema_version: NET_SCHEMA_VERSION,
                init_seed: self.init_seed,
                config: self.cfg.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Network> {
        let desc: MemberDescriptor = read_json(&dir.join(CONFIG_FILE))?;
        if desc.schema_version != NET_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "{}: unsupported network schema_version {}",
                dir.display(),
                desc.schema_version
            )));
        }
        let mut net = Network::new(&desc.config, desc.init_seed)?;
        load_params(&mut net.params_mut(), read_blob(dir)?, dir)?;
        Ok(net)
    }
}

/// Copy stored tensors into `params` by name, requiring an exact one-to-one match.
pub(crate) fn load_params(
    params: &mut [&mut Param<f32>],
    stored: Vec<crate::blob::NamedTensor>,
    dir: &Path,
) -> Result<()> {
    let mut by_name: HashMap<String, crate::blob::NamedTensor> =
        stored.into_iter().map(|t| (t.name.clone(), t)).collect();
    for p in params.iter_mut() {
        let t = by_name
            .remove(&p.name)
            .ok_or_else(|| Error::validation(format!("{}: checkpoint is missing tensor {}", dir.display(), p.name)))?;
        if t.shape != p.shape {
            return Err(Error::validation(format!(
                "{}: tensor {} has shape {:?}, expected {:?}",
                dir.display(),
                p.name,
                t.shape,
                p.shape
            )));
        }
        p.value = t.data;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::validation(format!("{}: unexpected tensor {extra}", dir.display())));
    }
    Ok(())
}
