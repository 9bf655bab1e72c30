//! Feature extractor with one squeeze-and-excitation block and two
//! interchangeable heads: softmax logits for pretraining and an
//! L2-normalized embedding for cross-modality matching.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{AnyTensor, Archive};
use crate::autograd::{Graph, Var};
use crate::cmd::{self, CmdConfig};
use crate::error::{Error, Result};
use crate::nn::{conv2d, conv_out_side, dense, glorot_uniform, se_block, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    Vector { dim: usize },
    /// Single-channel square image of `side x side` pixels, flattened row-major.
    Image { side: usize },
}

impl InputSpec {
    pub fn flat_dim(&self) -> usize {
        match *self {
            InputSpec::Vector { dim } => dim,
            InputSpec::Image { side } => side * side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input: InputSpec,
    /// Dense widths in vector mode; the last one is viewed as
    /// `se_channels x (width / se_channels)` for the SE block.
    pub hidden: Vec<usize>,
    /// Channels of the two stride-2 convolutions in image mode.
    pub conv_channels: [usize; 2],
    pub se_channels: usize,
    pub se_reduction: usize,
    pub embedding_dim: usize,
    pub num_pretrain_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: InputSpec::Vector { dim: 64 },
            hidden: vec![128, 128],
            conv_channels: [16, 32],
            se_channels: 32,
            se_reduction: 16,
            embedding_dim: 256,
            num_pretrain_classes: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim < 2 {
            return bad(format!("embedding_dim must be >= 2, got {}", self.embedding_dim));
        }
        if self.num_pretrain_classes < 2 {
            return bad(format!(
                "num_pretrain_classes must be >= 2, got {}",
                self.num_pretrain_classes
            ));
        }
        if self.se_reduction == 0
            || self.se_channels == 0
            || !self.se_channels.is_multiple_of(self.se_reduction)
        {
            return bad(format!(
                "se_reduction {} must divide se_channels {}",
                self.se_reduction, self.se_channels
            ));
        }
        match self.input {
            InputSpec::Vector { dim } => {
                if dim == 0 {
                    return bad("input dim must be positive".into());
                }
                let Some(&last) = self.hidden.last() else {
                    return bad("vector mode needs at least one hidden layer".into());
                };
                if self.hidden.contains(&0) || last % self.se_channels != 0 {
                    return bad(format!(
                        "last hidden width {last} must be a positive multiple of se_channels {}",
                        self.se_channels
                    ));
                }
            }
            InputSpec::Image { side } => {
                if side < 4 {
                    return bad(format!("image side {side} too small"));
                }
                if self.conv_channels[1] != self.se_channels || self.conv_channels[0] == 0 {
                    return bad(format!(
                        "image mode needs conv_channels[1] == se_channels ({})",
                        self.se_channels
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the trunk output that feeds either head.
    pub fn trunk_width(&self) -> usize {
        match self.input {
            InputSpec::Vector { .. } => *self.hidden.last().expect("validated"),
            InputSpec::Image { side } => {
                let s = conv_out_side(conv_out_side(side, CONV_KERNEL, CONV_STRIDE), CONV_KERNEL, CONV_STRIDE);
                self.conv_channels[1] * s * s
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Hfr,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Pretrained => f.write_str("pretrained"),
            Stage::Hfr => f.write_str("hfr"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Pretrain,
    Hfr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real> {
    pub config: BackboneConfig,
    pub cmd: Option<CmdConfig>,
    pub mode: HeadMode,
    pub params: ParamStore<T>,
}

fn init_dense<T: Real>(p: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn init_trunk<T: Real>(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    match cfg.input {
        InputSpec::Vector { dim } => {
            let mut fan_in = dim;
            for (i, &w) in cfg.hidden.iter().enumerate() {
                init_dense(&mut p, &format!("trunk.dense{i}"), fan_in, w, rng);
                fan_in = w;
            }
        }
        InputSpec::Image { .. } => {
            let k2 = CONV_KERNEL * CONV_KERNEL;
            let mut cin = 1;
            for (i, &cout) in cfg.conv_channels.iter().enumerate() {
                p.insert(
                    format!("trunk.conv{i}.w"),
                    glorot_uniform(&[cout, cin, CONV_KERNEL, CONV_KERNEL], cin * k2, cout * k2, rng),
                );
                p.insert(format!("trunk.conv{i}.b"), Tensor::zeros(&[cout]));
                cin = cout;
            }
        }
    }
    let c = cfg.se_channels;
    let r = c / cfg.se_reduction;
    p.insert("trunk.se.w1", glorot_uniform(&[c, r], c, r, rng));
    p.insert("trunk.se.w2", glorot_uniform(&[r, c], r, c, rng));
    p
}

/// Independent stream per purpose so that head init never depends on trunk init order.
pub(crate) fn init_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_TRUNK: u64 = 1;
const STREAM_CLS_HEAD: u64 = 2;
const STREAM_EMBD_HEAD: u64 = 3;
const STREAM_CMD: u64 = 4;

impl<T: Real> Network<T> {
    /// Fresh network with the classification head, seeded.
    pub fn new_pretrain(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = init_trunk(&config, &mut init_rng(seed, STREAM_TRUNK));
        init_dense(
            &mut params,
            "head.cls",
            config.trunk_width(),
            config.num_pretrain_classes,
            &mut init_rng(seed, STREAM_CLS_HEAD),
        );
        Ok(Self {
            config,
            cmd: None,
            mode: HeadMode::Pretrain,
            params,
        })
    }

    /// Keeps the pretrained trunk, drops the softmax head, and attaches a fresh
    /// embedding head plus discriminator initialized from `seed`.
    pub fn swap_head(ckpt: &Checkpoint, cmd_cfg: CmdConfig, seed: u64) -> Result<Self> {
        if ckpt.stage != Stage::Pretrained {
            return Err(Error::Stage {
                expected: Stage::Pretrained.to_string(),
                found: ckpt.stage.to_string(),
            });
        }
        let pretrained: Network<T> = Network::from_checkpoint(ckpt)?;
        let mut params = pretrained.params.subset("trunk.");
        let config = pretrained.config;
        let d = config.embedding_dim;
        init_dense(
            &mut params,
            "head.embd",
            config.trunk_width(),
            d,
            &mut init_rng(seed, STREAM_EMBD_HEAD),
        );
        cmd::init_params(&mut params, &cmd_cfg, d, &mut init_rng(seed, STREAM_CMD))?;
        Ok(Self {
            config,
            cmd: Some(cmd_cfg),
            mode: HeadMode::Hfr,
            params,
        })
    }

    pub fn stage(&self) -> Stage {
        match self.mode {
            HeadMode::Pretrain => Stage::Pretrained,
            HeadMode::Hfr => Stage::Hfr,
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let shape = g.shape(x);
        let want = self.config.input.flat_dim();
        if shape.len() != 2 || shape[1] != want {
            return Err(Error::Shape(format!("input {shape:?} does not match [b, {want}]")));
        }
        Ok(shape[0])
    }

    /// Shared feature extractor, `[b, input] -> [b, trunk_width]`.
    pub fn trunk(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.check_input(g, x)?;
        let c = self.config.se_channels;
        let (features, spatial) = match self.config.input {
            InputSpec::Vector { .. } => {
                let mut h = x;
                for i in 0..self.config.hidden.len() {
                    let w = p.var(&format!("trunk.dense{i}.w"))?;
                    let bias = p.var(&format!("trunk.dense{i}.b"))?;
                    h = dense(g, h, w, bias)?;
                    h = g.relu(h);
                }
                let width = *self.config.hidden.last().unwrap();
                (h, width / c)
            }
            InputSpec::Image { side } => {
                let mut h = g.reshape(x, &[b, 1, side, side])?;
                for i in 0..2 {
                    let w = p.var(&format!("trunk.conv{i}.w"))?;
                    let bias = p.var(&format!("trunk.conv{i}.b"))?;
                    h = conv2d(g, h, w, bias, CONV_STRIDE)?;
                    h = g.relu(h);
                }
                let s = g.shape(h);
                let spatial = s[2] * s[3];
                (h, spatial)
            }
        };
        let cube = g.reshape(features, &[b, c, spatial])?;
        let w1 = p.var("trunk.se.w1")?;
        let w2 = p.var("trunk.se.w2")?;
        let scaled = se_block(g, cube, w1, w2)?;
        g.reshape(scaled, &[b, c * spatial])
    }

    pub fn classify_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.mode != HeadMode::Pretrain {
            return Err(Error::HeadMode("classify needs the pretraining head".into()));
        }
        let h = self.trunk(g, p, x)?;
        dense(g, h, p.var("head.cls.w")?, p.var("head.cls.b")?)
    }

    pub fn embed_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.mode != HeadMode::Hfr {
            return Err(Error::HeadMode("embed needs the HFR head".into()));
        }
        let h = self.trunk(g, p, x)?;
        let z = dense(g, h, p.var("head.embd.w")?, p.var("head.embd.b")?)?;
        g.l2_normalize_rows(z)
    }

    /// Raw logits `[b, C]`.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.classify_graph(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    /// Unit-norm embeddings `[b, d]`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.embed_graph(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.backbone.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in &ckpt.params {
            params.insert(name.clone(), t.to());
        }
        let mode = match ckpt.stage {
            Stage::Pretrained => HeadMode::Pretrain,
            Stage::Hfr => HeadMode::Hfr,
        };
        let required: &[&str] = match mode {
            HeadMode::Pretrain => &["head.cls.w", "head.cls.b"],
            HeadMode::Hfr => &["head.embd.w", "head.embd.b"],
        };
        for name in required.iter().copied().chain(["trunk.se.w1", "trunk.se.w2"]) {
            params.get(name)?;
        }
        Ok(Self {
            config: ckpt.backbone.clone(),
            cmd: ckpt.cmd.clone(),
            mode,
            params,
        })
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Checkpoint {
        Checkpoint {
            stage: self.stage(),
            backbone: self.config.clone(),
            cmd: self.cmd.clone(),
            provenance,
            train_state: serde_json::Value::Null,
            params: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), AnyTensor::from_tensor(t)))
                .collect(),
            extra: Vec::new(),
        }
    }
}

/// Where an artifact came from: its seed and the hash of the producing config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    /// The full run configuration, when produced by the CLI.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    stage: Stage,
    backbone: BackboneConfig,
    cmd: Option<CmdConfig>,
    provenance: Provenance,
    train_state: serde_json::Value,
    num_params: usize,
}

/// Serialized network state. Optimizer moments and other trainer state
/// travel in `extra` and `train_state`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub backbone: BackboneConfig,
    pub cmd: Option<CmdConfig>,
    pub provenance: Provenance,
    pub train_state: serde_json::Value,
    pub params: Vec<(String, AnyTensor)>,
    pub extra: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            stage: self.stage,
            backbone: self.backbone.clone(),
            cmd: self.cmd.clone(),
            provenance: self.provenance.clone(),
            train_state: self.train_state.clone(),
            num_params: self.params.len(),
        };
        let mut a = Archive::new(serde_json::to_value(meta)?);
        for (k, t) in self.params.iter().chain(&self.extra) {
            a.push(k.clone(), t.clone());
        }
        Ok(a)
    }

    pub fn from_archive(a: Archive) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(a.meta)?;
        if meta.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a checkpoint, found `{}`", meta.kind)));
        }
        if meta.num_params > a.tensors.len() {
            return Err(Error::Format("fewer tensors than declared parameters".into()));
        }
        let mut params = a.tensors;
        let extra = params.split_off(meta.num_params);
        Ok(Self {
            stage: meta.stage,
            backbone: meta.backbone,
            cmd: meta.cmd,
            provenance: meta.provenance,
            train_state: meta.train_state,
            params,
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    pub fn dtype(&self) -> Option<crate::tensor::DType> {
        self.params.first().map(|(_, t)| t.dtype())
    }
}
