//! Classifier architectures.

use std::collections::BTreeMap;

use accent_core::frontend::FeatureMatrix;
use candle_core::{DType, Device, Module, ModuleT, Tensor, Var, D};
use candle_nn::rnn::{LSTMConfig, LSTM, RNN};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, Variant};
use crate::store::SeededVarStore;
use crate::NnError;

type CResult<T> = candle_core::Result<T>;

pub const BONA_FIDE_CLASS: usize = 0;
pub const ENCODER_PREFIX: &str = "encoder.";

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(c_in: usize, c_out: usize, kernel: usize, vb: VarBuilder) -> CResult<Self> {
        let cfg = Conv2dConfig {
            padding: kernel / 2,
            ..Default::default()
        };
        Ok(Self {
            conv: candle_nn::conv2d_no_bias(c_in, c_out, kernel, cfg, vb.pp("conv"))?,
            bn: candle_nn::batch_norm(c_out, 1e-5, vb.pp("bn"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> CResult<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

fn gap(x: &Tensor) -> CResult<Tensor> {
    x.mean((2, 3))
}

fn pool(x: &Tensor, (sf, st): (usize, usize)) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let kf = sf.min(h).max(1);
    let kt = st.min(w).max(1);
    if kf == 1 && kt == 1 {
        return Ok(x.clone());
    }
    x.avg_pool2d_with_stride((kf, kt), (kf, kt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Squeeze-excitation on a block output.
    Se,
    /// Gate on a feature group computed from that group.
    Scg,
    /// Gate on a feature group computed from it and the group it feeds.
    Mlcg,
}

/// Sigmoid channel gate: `x * sigmoid(W2 relu(W1 pooled))` where `pooled` is
/// the global average of `x`, concatenated with that of the context for
/// [`GateKind::Mlcg`].
pub struct ChannelGate {
    kind: GateKind,
    fc1: Linear,
    fc2: Linear,
}

impl ChannelGate {
    pub fn new(kind: GateKind, channels: usize, reduction: usize, vb: VarBuilder) -> CResult<Self> {
        let c_in = if kind == GateKind::Mlcg { 2 * channels } else { channels };
        let hidden = (c_in / reduction.max(1)).max(1);
        Ok(Self {
            kind,
            fc1: candle_nn::linear(c_in, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, channels, vb.pp("fc2"))?,
        })
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    /// Per-channel multipliers `[batch, channels]`.
    pub fn multipliers(&self, x: &Tensor, context: Option<&Tensor>) -> CResult<Tensor> {
        let mut pooled = gap(x)?;
        if self.kind == GateKind::Mlcg {
            let ctx = match context {
                Some(c) => c,
                None => candle_core::bail!("mlcg gate needs a context tensor"),
            };
            pooled = Tensor::cat(&[&pooled, &gap(ctx)?], 1)?;
        }
        let h = self.fc1.forward(&pooled)?.relu()?;
        candle_nn::ops::sigmoid(&self.fc2.forward(&h)?)
    }

    pub fn gate_channels(&self, x: &Tensor, context: Option<&Tensor>) -> CResult<Tensor> {
        let m = self.multipliers(x, context)?;
        x.broadcast_mul(&m.unsqueeze(2)?.unsqueeze(3)?)
    }

    /// Zero the output weights and push the bias far into saturation so
    /// every multiplier rounds to exactly 1.
    pub fn saturate(&self) -> CResult<()> {
        let w = Var::from_tensor(self.fc2.weight())?;
        w.set(&w.as_tensor().zeros_like()?)?;
        if let Some(b) = self.fc2.bias() {
            let b = Var::from_tensor(b)?;
            b.set(&b.as_tensor().ones_like()?.affine(50.0, 0.0)?)?;
        }
        Ok(())
    }
}

struct BasicBlock {
    pool: Option<(usize, usize)>,
    c1: ConvBn,
    c2: ConvBn,
    se: ChannelGate,
    shortcut: Option<ConvBn>,
}

struct Res2Block {
    pool: Option<(usize, usize)>,
    scale: usize,
    c1: ConvBn,
    convs: Vec<ConvBn>,
    group_gates: Vec<ChannelGate>,
    c3: ConvBn,
    se: ChannelGate,
    shortcut: Option<ConvBn>,
}

enum Block {
    Basic(BasicBlock),
    Res2(Res2Block),
}

fn residual(out: Tensor, x: &Tensor, shortcut: &Option<ConvBn>, train: bool) -> CResult<Tensor> {
    let s = match shortcut {
        Some(sc) => sc.forward(x, train)?,
        None => x.clone(),
    };
    (out + s)?.relu()
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> CResult<Tensor> {
        match self {
            Block::Basic(b) => {
                let x = match b.pool {
                    Some(p) => pool(x, p)?,
                    None => x.clone(),
                };
                let out = b.c1.forward(&x, train)?.relu()?;
                let out = b.c2.forward(&out, train)?;
                let out = b.se.gate_channels(&out, None)?;
                residual(out, &x, &b.shortcut, train)
            }
            Block::Res2(b) => {
                let x = match b.pool {
                    Some(p) => pool(x, p)?,
                    None => x.clone(),
                };
                let out = b.c1.forward(&x, train)?.relu()?;
                let w = out.dim(1)? / b.scale;
                let xs: Vec<Tensor> = (0..b.scale)
                    .map(|i| out.narrow(1, i * w, w))
                    .collect::<CResult<_>>()?;
                let mut ys = vec![xs[0].clone()];
                let mut prev: Option<Tensor> = None;
                for i in 1..b.scale {
                    let input = match prev {
                        None => xs[i].clone(),
                        Some(p) => {
                            let p = match b.group_gates.get(i - 2) {
                                Some(g) => g.gate_channels(&p, Some(&xs[i]))?,
                                None => p,
                            };
                            (&xs[i] + p)?
                        }
                    };
                    let y = b.convs[i - 1].forward(&input, train)?.relu()?;
                    ys.push(y.clone());
                    prev = Some(y);
                }
                let out = b.c3.forward(&Tensor::cat(&ys, 1)?, train)?;
                let out = b.se.gate_channels(&out, None)?;
                residual(out, &x, &b.shortcut, train)
            }
        }
    }
}

fn build_block(
    cfg: &ModelConfig,
    c_in: usize,
    c_out: usize,
    pool: Option<(usize, usize)>,
    vb: VarBuilder,
) -> CResult<Block> {
    let shortcut = if c_in != c_out {
        Some(ConvBn::new(c_in, c_out, 1, vb.pp("shortcut"))?)
    } else {
        None
    };
    let se = ChannelGate::new(GateKind::Se, c_out, cfg.se_reduction, vb.pp("se"))?;
    if cfg.variant == Variant::Senet {
        return Ok(Block::Basic(BasicBlock {
            pool,
            c1: ConvBn::new(c_in, c_out, 3, vb.pp("c1"))?,
            c2: ConvBn::new(c_out, c_out, 3, vb.pp("c2"))?,
            se,
            shortcut,
        }));
    }
    let scale = cfg.res2net_scale;
    let w = c_out / scale;
    let convs = (0..scale - 1)
        .map(|i| ConvBn::new(w, w, 3, vb.pp(format!("group{i}"))))
        .collect::<CResult<_>>()?;
    let gate_kind = match cfg.variant {
        Variant::ScgRes2net => Some(GateKind::Scg),
        Variant::MlcgRes2net => Some(GateKind::Mlcg),
        _ => None,
    };
    let group_gates = match gate_kind {
        Some(kind) => (0..scale.saturating_sub(2))
            .map(|i| ChannelGate::new(kind, w, cfg.se_reduction, vb.pp(format!("gate{i}"))))
            .collect::<CResult<_>>()?,
        None => Vec::new(),
    };
    Ok(Block::Res2(Res2Block {
        pool,
        scale,
        c1: ConvBn::new(c_in, c_out, 1, vb.pp("c1"))?,
        convs,
        group_gates,
        c3: ConvBn::new(c_out, c_out, 1, vb.pp("c3"))?,
        se,
        shortcut,
    }))
}

struct CnnNet {
    stem: ConvBn,
    blocks: Vec<Block>,
    fc: Linear,
}

/// Produces frame embeddings `[batch, frames, dim]` from features
/// `[batch, 1, bins, frames]`.
pub trait FrameEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, features: &Tensor) -> CResult<Tensor>;
}

/// Per-frame linear projection of the filterbank vector, standing in for a
/// pretrained self-supervised encoder.
pub struct StubEncoder {
    proj: Linear,
    dim: usize,
}

impl StubEncoder {
    pub fn new(input_bins: usize, dim: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            proj: candle_nn::linear(input_bins, dim, vb.pp("proj"))?,
            dim,
        })
    }
}

impl FrameEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, features: &Tensor) -> CResult<Tensor> {
        let frames = features.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        self.proj.forward(&frames)?.tanh()
    }
}

struct SslNet {
    encoder: Box<dyn FrameEncoder>,
    lstm: LSTM,
    fc: Linear,
}

enum Net {
    Cnn(CnnNet),
    Ssl(SslNet),
}

pub struct Classifier {
    config: ModelConfig,
    store: SeededVarStore,
    net: Net,
    dtype: DType,
    device: Device,
    encoder_frozen: bool,
}

/// Build a classifier with weights drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Classifier, NnError> {
    build_model_with(config, seed, DType::F32, &Device::Cpu)
}

pub fn build_model_with(
    config: &ModelConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Classifier, NnError> {
    config.validate()?;
    if config.variant == Variant::SslRecurrent {
        let bins = config.input_bins;
        let dim = config.ssl_dim;
        return build_ssl_head_with(config, seed, dtype, device, &|vb| {
            Ok(Box::new(StubEncoder::new(bins, dim, vb)?))
        });
    }
    let store = SeededVarStore::new(seed);
    let vb = store.var_builder(dtype, device);
    let stem = ConvBn::new(1, config.width[0], 3, vb.pp("stem"))?;
    let mut blocks = Vec::new();
    let mut c_in = config.width[0];
    for (s, &c_out) in config.width.iter().enumerate() {
        for d in 0..config.depth {
            let pool = (s > 0 && d == 0).then(|| config.stage_pool());
            let vbb = vb.pp(format!("stage{s}.block{d}"));
            blocks.push(build_block(config, c_in, c_out, pool, vbb)?);
            c_in = c_out;
        }
    }
    let fc = candle_nn::linear(c_in, config.num_classes, vb.pp("fc"))?;
    Ok(Classifier {
        config: config.clone(),
        store,
        net: Net::Cnn(CnnNet { stem, blocks, fc }),
        dtype,
        device: device.clone(),
        encoder_frozen: false,
    })
}

pub type EncoderFactory<'a> = dyn Fn(VarBuilder) -> CResult<Box<dyn FrameEncoder>> + 'a;

/// Encoder plus LSTM head. The factory receives a builder scoped to the
/// `encoder` prefix so its parameters can be frozen as a group.
pub fn build_ssl_head(
    config: &ModelConfig,
    seed: u64,
    make_encoder: &EncoderFactory,
) -> Result<Classifier, NnError> {
    build_ssl_head_with(config, seed, DType::F32, &Device::Cpu, make_encoder)
}

pub fn build_ssl_head_with(
    config: &ModelConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
    make_encoder: &EncoderFactory,
) -> Result<Classifier, NnError> {
    let mut config = config.clone();
    config.variant = Variant::SslRecurrent;
    config.validate()?;
    let store = SeededVarStore::new(seed);
    let vb = store.var_builder(dtype, device);
    let encoder = make_encoder(vb.pp("encoder"))?;
    if encoder.dim() != config.ssl_dim {
        return Err(NnError::DimensionMismatch {
            expected: config.ssl_dim,
            actual: encoder.dim(),
        });
    }
    let lstm = candle_nn::rnn::lstm(
        config.ssl_dim,
        config.recurrent_hidden,
        LSTMConfig::default(),
        vb.pp("lstm"),
    )?;
    let fc = candle_nn::linear(config.recurrent_hidden, config.num_classes, vb.pp("fc"))?;
    Ok(Classifier {
        config,
        store,
        net: Net::Ssl(SslNet { encoder, lstm, fc }),
        dtype,
        device: device.clone(),
        encoder_frozen: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Classifier {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    /// No effect on CNN variants.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    /// Stack features into `[batch, 1, bins, frames]`.
    pub fn batch_tensor(&self, batch: &[&FeatureMatrix]) -> Result<Tensor, NnError> {
        let first = batch.first().ok_or_else(|| NnError::Shape("empty batch".into()))?;
        let (bins, frames) = (first.n_bins, first.n_frames);
        if bins != self.config.input_bins {
            return Err(NnError::Shape(format!(
                "model expects {} bins, features have {bins}",
                self.config.input_bins
            )));
        }
        let mut values = Vec::with_capacity(batch.len() * bins * frames);
        for f in batch {
            if (f.n_bins, f.n_frames) != (bins, frames) {
                return Err(NnError::Shape(format!(
                    "batch mixes shapes {bins}x{frames} and {}x{}",
                    f.n_bins, f.n_frames
                )));
            }
            values.extend_from_slice(&f.values);
        }
        let t = Tensor::from_vec(values, (batch.len(), 1, bins, frames), &self.device)?;
        Ok(t.to_dtype(self.dtype)?)
    }

    /// Log-probabilities `[batch, 2]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != self.config.input_bins {
            return Err(NnError::Shape(format!(
                "expected [batch, 1, {}, frames], got {dims:?}",
                self.config.input_bins
            )));
        }
        let logits = match &self.net {
            Net::Cnn(net) => {
                let mut h = net.stem.forward(x, train)?.relu()?;
                for b in &net.blocks {
                    h = b.forward(&h, train)?;
                }
                net.fc.forward(&gap(&h)?)?
            }
            Net::Ssl(net) => {
                let mut frames = net.encoder.encode(x)?;
                if frames.dim(D::Minus1)? != net.encoder.dim() {
                    return Err(NnError::DimensionMismatch {
                        expected: net.encoder.dim(),
                        actual: frames.dim(D::Minus1)?,
                    });
                }
                if self.encoder_frozen {
                    frames = frames.detach();
                }
                let states = net.lstm.seq(&frames)?;
                let last = states.last().ok_or_else(|| NnError::Shape("no frames".into()))?;
                net.fc.forward(last.h())?
            }
        };
        Ok(candle_nn::ops::log_softmax(&logits, 1)?)
    }

    /// Evaluation-mode log-probabilities.
    pub fn forward(&self, batch: &[&FeatureMatrix]) -> Result<Tensor, NnError> {
        self.forward_t(&self.batch_tensor(batch)?, false)
    }

    /// `log p(bona fide) - log p(spoof)` per item.
    pub fn scores(&self, batch: &[&FeatureMatrix]) -> Result<Vec<f64>, NnError> {
        let lp = self.forward(batch)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(lp.iter().map(|r| r[BONA_FIDE_CLASS] - r[1 - BONA_FIDE_CLASS]).collect())
    }

    /// Every variable, including normalization statistics.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.store.named_vars()
    }

    /// Learnable parameters, excluding normalization statistics.
    pub fn parameters(&self) -> Vec<(String, Var)> {
        self.named_vars().into_iter().filter(|(n, _)| !is_buffer(n)).collect()
    }

    /// Parameters the optimizer should update right now.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.parameters()
            .into_iter()
            .filter(|(n, _)| !(self.encoder_frozen && n.starts_with(ENCODER_PREFIX)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn state_dict(&self) -> Result<BTreeMap<String, ParamBlob>, NnError> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| {
                let t = v.as_tensor();
                let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((
                    n,
                    ParamBlob {
                        shape: t.dims().to_vec(),
                        data,
                    },
                ))
            })
            .collect()
    }

    pub fn load_state_dict(&self, params: &BTreeMap<String, ParamBlob>) -> Result<(), NnError> {
        let vars = self.named_vars();
        for (name, var) in &vars {
            let blob = params
                .get(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {name}")))?;
            if blob.shape != var.dims() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs model {:?}",
                    blob.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(blob.data.clone(), blob.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        if let Some(extra) = params.keys().find(|k| !vars.iter().any(|(n, _)| n == *k)) {
            return Err(NnError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values of the variables accepted by
    /// `filter`.
    pub fn checksum_with(&self, filter: impl Fn(&str) -> bool) -> Result<String, NnError> {
        let mut h = Sha256::new();
        for (name, blob) in self.state_dict()? {
            if !filter(&name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in &blob.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for x in &blob.data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn checksum(&self) -> Result<String, NnError> {
        self.checksum_with(|_| true)
    }

    pub fn encoder_checksum(&self) -> Result<String, NnError> {
        self.checksum_with(|n| n.starts_with(ENCODER_PREFIX))
    }

    /// Gates in CNN blocks, in construction order: each block's SE gate
    /// followed by its group gates.
    pub fn gates(&self) -> Vec<&ChannelGate> {
        let Net::Cnn(net) = &self.net else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for b in &net.blocks {
            match b {
                Block::Basic(b) => out.push(&b.se),
                Block::Res2(b) => {
                    out.push(&b.se);
                    out.extend(b.group_gates.iter());
                }
            }
        }
        out
    }
}
