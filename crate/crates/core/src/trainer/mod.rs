//! Adam, reduce-on-plateau scheduling, and the two training stages:
//! softmax pretraining of the backbone, then joint metric-loss and
//! discriminator training of the embedding network.

mod ablation;
mod log;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{init_rng, BackboneConfig, Checkpoint, Network, Provenance, Stage};
use crate::cmd::{cmd_forward_graph, cmd_loss_graph, genuine_labels, CmdConfig};
use crate::data::{augment, AugmentConfig, BatchSampler, Dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{metric_loss_graph, BatchLabels, LossConfig, LossKind};
use crate::nn::Bound;
use crate::tensor::{Real, Tensor};

pub use ablation::{
    run_ablation, loss_matrix_cells, margin_grid_cells, AblationCell, AblationReport, AblationSpec, CellMetrics,
    ABLATION_DETAIL_HEADER, ABLATION_HEADER,
};
pub use log::{EpochRecord, TrainLog, LOG_HEADER};
pub use optim::{AdamConfig, OptimState, PlateauConfig, PlateauEvent, PlateauState};

const STREAM_AUGMENT: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub rel_tol: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let (a, p) = (AdamConfig::default(), PlateauConfig::default());
        Self {
            lr: 3e-4,
            pretrain_epochs: 100,
            max_epochs: 100,
            patience: p.patience,
            factor: p.factor,
            rel_tol: p.rel_tol,
            min_lr: p.min_lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.patience,
            factor: self.factor,
            rel_tol: self.rel_tol,
            min_lr: self.min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.plateau().validate()
    }
}

/// Settings shared by both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    /// Seeds weight init and augmentation; batch order follows `sampler.seed`.
    pub seed: u64,
    pub provenance: Provenance,
}

impl TrainOptions {
    pub fn new(optim: OptimConfig, sampler: SamplerConfig, seed: u64) -> Self {
        Self {
            optim,
            sampler,
            augment: AugmentConfig::default(),
            seed,
            provenance: Provenance {
                seed,
                ..Provenance::default()
            },
        }
    }
}

/// What the joint stage optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfrOptions {
    pub kind: LossKind,
    pub loss: LossConfig,
    /// `None` trains the metric loss alone and drops the discriminator.
    pub cmd: Option<CmdConfig>,
}

impl Default for HfrOptions {
    fn default() -> Self {
        Self {
            kind: LossKind::UnitClass,
            loss: LossConfig::default(),
            cmd: Some(CmdConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    epoch: usize,
    step: u64,
    plateau: PlateauState,
    stopped: bool,
    log: TrainLog,
    #[serde(default)]
    hfr: Option<HfrOptions>,
}

struct StepLosses {
    total: Var,
    metric: Option<Var>,
    cmd: Option<Var>,
}

struct Loop<T: Real> {
    net: Network<T>,
    opt: OptimState<T>,
    plateau: PlateauState,
    epoch: usize,
    stopped: bool,
    log: TrainLog,
}

impl<T: Real> Loop<T> {
    fn fresh(net: Network<T>, optim: &OptimConfig, log: TrainLog) -> Self {
        Self {
            opt: OptimState::new(&net.params, optim.lr, optim.adam()),
            plateau: PlateauState::new(optim.lr, optim.plateau()),
            net,
            epoch: 0,
            stopped: false,
            log,
        }
    }

    fn resume(ckpt: &Checkpoint, optim: &OptimConfig) -> Result<(Self, Option<HfrOptions>)> {
        let state: TrainState = serde_json::from_value(ckpt.train_state.clone())
            .map_err(|e| Error::Format(format!("checkpoint has no resumable train state: {e}")))?;
        let net = Network::<T>::from_checkpoint(ckpt)?;
        let opt = OptimState::from_tensors(&ckpt.extra, &net.params, state.step, state.plateau.lr, optim.adam())?;
        Ok((
            Self {
                net,
                opt,
                plateau: state.plateau,
                epoch: state.epoch,
                stopped: state.stopped,
                log: state.log,
            },
            state.hfr,
        ))
    }

    fn batch_input(train: &Dataset, idx: &[usize], aug: &AugmentConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<T> {
        if aug.is_identity() {
            return train.batch(idx);
        }
        let d = train.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let s = augment(&train.sample(i), train.image_side, aug, rng);
            data.extend(s.features.into_iter().map(T::of_f64));
        }
        Tensor::new(vec![idx.len(), d], data).expect("non-empty batch")
    }

    fn run<F>(&mut self, train: &Dataset, opts: &TrainOptions, max_epochs: usize, mut build: F) -> Result<()>
    where
        F: FnMut(&Network<T>, &mut Graph<T>, &Bound, Var, &[usize]) -> Result<StepLosses>,
    {
        let sampler = BatchSampler::new(train, opts.sampler)?;
        while self.epoch < max_epochs && !self.stopped {
            let epoch = self.epoch + 1;
            let started = Instant::now();
            let batches = sampler.epoch(epoch);
            let mut rng = init_rng(opts.seed, STREAM_AUGMENT + epoch as u64);
            let (mut sum_total, mut sum_metric, mut sum_cmd) = (0.0, 0.0, 0.0);
            let (mut has_metric, mut has_cmd) = (false, false);
            let lr = self.plateau.lr;
            self.opt.lr = lr;
            for idx in &batches {
                let x = Self::batch_input(train, idx, &opts.augment, &mut rng);
                let mut g = Graph::new();
                let p = self.net.params.bind(&mut g, true);
                let xv = g.constant(x);
                let losses = build(&self.net, &mut g, &p, xv, idx).map_err(|e| match e {
                    Error::Degenerate { .. } => Error::Divergence {
                        epoch,
                        what: e.to_string(),
                    },
                    e => e,
                })?;
                let total = g.value(losses.total).item().as_f64();
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        what: format!("loss is {total}"),
                    });
                }
                sum_total += total;
                if let Some(m) = losses.metric {
                    sum_metric += g.value(m).item().as_f64();
                    has_metric = true;
                }
                if let Some(c) = losses.cmd {
                    sum_cmd += g.value(c).item().as_f64();
                    has_cmd = true;
                }
                let mut grads = g.backward(losses.total)?;
                let pg = p.gradients(&mut grads, &self.net.params);
                self.opt.step(&mut self.net.params, &pg).map_err(|e| Error::Divergence {
                    epoch,
                    what: e.to_string(),
                })?;
            }
            let n = batches.len() as f64;
            let mean_total = sum_total / n;
            self.log.push(EpochRecord {
                epoch,
                l_uc: has_metric.then(|| sum_metric / n),
                l_cmd: has_cmd.then(|| sum_cmd / n),
                total: mean_total,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            });
            ::log::debug!("epoch {epoch}: total {mean_total:.6} lr {lr:e}");
            if self.plateau.update(mean_total) == PlateauEvent::Exhausted {
                self.stopped = true;
            }
            self.epoch = epoch;
        }
        Ok(())
    }

    fn finish(self, provenance: &Provenance, hfr: Option<HfrOptions>) -> Result<TrainOutput> {
        let mut checkpoint = self.net.to_checkpoint(provenance.clone());
        checkpoint.extra = self.opt.to_tensors();
        checkpoint.train_state = serde_json::to_value(TrainState {
            epoch: self.epoch,
            step: self.opt.step,
            plateau: self.plateau,
            stopped: self.stopped,
            log: self.log.without_timing(),
            hfr,
        })?;
        Ok(TrainOutput {
            checkpoint,
            log: self.log,
        })
    }
}

fn base_meta(opts: &TrainOptions, stage: Stage) -> Vec<(String, String)> {
    vec![
        ("seed".into(), opts.seed.to_string()),
        ("config_hash".into(), opts.provenance.config_hash.clone()),
        ("stage".into(), stage.to_string()),
    ]
}

fn dense_labels(train: &Dataset) -> (Vec<usize>, usize) {
    let classes = train.classes();
    let labels = train
        .class_ids
        .iter()
        .map(|c| classes.binary_search(c).expect("class listed"))
        .collect();
    (labels, classes.len())
}

/// Trains the backbone with a softmax head over the training classes, both
/// modalities sharing their class label. `num_pretrain_classes` is taken from
/// the data. Passing a checkpoint from an earlier call continues that run.
pub fn pretrain<T: Real>(
    train: &Dataset,
    backbone: &BackboneConfig,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutput> {
    opts.optim.validate()?;
    train.check_both_modalities()?;
    let (labels, n_classes) = dense_labels(train);
    let mut lp = match resume {
        Some(ckpt) => {
            if ckpt.stage != Stage::Pretrained {
                return Err(Error::Stage {
                    expected: Stage::Pretrained.to_string(),
                    found: ckpt.stage.to_string(),
                });
            }
            Loop::<T>::resume(ckpt, &opts.optim)?.0
        }
        None => {
            let cfg = BackboneConfig {
                num_pretrain_classes: n_classes,
                ..backbone.clone()
            };
            let net = Network::new_pretrain(cfg, opts.seed)?;
            Loop::fresh(net, &opts.optim, TrainLog::new(base_meta(opts, Stage::Pretrained)))
        }
    };
    if lp.net.config.num_pretrain_classes != n_classes {
        return Err(Error::Config(format!(
            "checkpoint classifies {} classes, data has {n_classes}",
            lp.net.config.num_pretrain_classes
        )));
    }
    lp.run(train, opts, opts.optim.pretrain_epochs, |net, g, p, x, idx| {
        let logits = net.classify_graph(g, p, x)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let total = g.softmax_cross_entropy(logits, &y)?;
        Ok(StepLosses {
            total,
            metric: None,
            cmd: None,
        })
    })?;
    lp.finish(&opts.provenance, None)
}

/// Replaces the softmax head of a pretrained checkpoint with the embedding
/// head (and discriminator, when enabled) and trains
/// `mu * L_metric + L_cmd` with one optimizer. A checkpoint already in the
/// joint stage is resumed with the options it was started with.
pub fn train_hfr<T: Real>(
    train: &Dataset,
    init: &Checkpoint,
    hfr: &HfrOptions,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    opts.optim.validate()?;
    hfr.loss.validate()?;
    train.check_both_modalities()?;
    let (mut lp, hfr) = match init.stage {
        Stage::Pretrained => {
            let mut net = Network::<T>::swap_head(init, hfr.cmd.clone().unwrap_or_default(), opts.seed)?;
            if hfr.cmd.is_none() {
                net.params.remove_prefix("cmd.");
                net.cmd = None;
            }
            let mut meta = base_meta(opts, Stage::Hfr);
            meta.extend([
                ("loss".into(), serde_json::to_value(hfr.kind)?.as_str().unwrap_or_default().to_string()),
                ("alpha".into(), hfr.loss.alpha.to_string()),
                ("beta".into(), hfr.loss.beta.to_string()),
                ("mu".into(), hfr.loss.mu.to_string()),
                ("cmd".into(), hfr.cmd.is_some().to_string()),
            ]);
            (Loop::fresh(net, &opts.optim, TrainLog::new(meta)), hfr.clone())
        }
        Stage::Hfr => {
            let (lp, saved) = Loop::<T>::resume(init, &opts.optim)?;
            let saved = saved.ok_or_else(|| Error::Format("joint-stage checkpoint without loss options".into()))?;
            (lp, saved)
        }
    };
    let mu = T::of_f64(hfr.loss.mu);
    lp.run(train, opts, opts.optim.max_epochs, |net, g, p, x, idx| {
        let class_ids: Vec<u32> = idx.iter().map(|&i| train.class_ids[i]).collect();
        let modalities: Vec<_> = idx.iter().map(|&i| train.modalities[i]).collect();
        let e = net.embed_graph(g, p, x)?;
        let labels = BatchLabels {
            class_ids: &class_ids,
            modalities: &modalities,
        };
        let metric = metric_loss_graph(g, hfr.kind, e, &labels, &hfr.loss)?;
        let weighted = g.scale(metric, mu);
        let (total, cmd) = match &hfr.cmd {
            Some(cfg) => {
                let probs = cmd_forward_graph(g, p, e)?;
                let lc = cmd_loss_graph(g, probs, &genuine_labels(&class_ids), cfg.mask, &modalities)?;
                (g.add(weighted, lc)?, Some(lc))
            }
            None => (weighted, None),
        };
        Ok(StepLosses {
            total,
            metric: Some(metric),
            cmd,
        })
    })?;
    lp.finish(&opts.provenance, Some(hfr))
}
