use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{pretrain, train_hfr, HfrOptions, TrainOptions};
use crate::backbone::{BackboneConfig, Checkpoint, Network};
use crate::cmd::CmdConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, fmt_opt, EvalConfig, Mode};
use crate::losses::{LossConfig, LossKind};
use crate::tensor::Real;

/// One training configuration of an ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub kind: LossKind,
    pub cmd: bool,
    pub loss: LossConfig,
}

/// Loss-by-discriminator matrix, in reporting order.
pub fn loss_matrix_cells(base: &LossConfig) -> Vec<AblationCell> {
    [
        ("Exp. 1: Triplet Loss", LossKind::Triplet, false),
        ("Exp. 2: Class mean Loss", LossKind::ClassMean, false),
        ("Exp. 3: Class mean Loss + CMD block", LossKind::ClassMean, true),
        ("Exp. 4: Unit-Class Loss", LossKind::UnitClass, false),
        ("Exp. 5: Triplet Loss + CMD block", LossKind::Triplet, true),
        ("Exp. 6: Proposed (Unit-Class Loss + CMD block)", LossKind::UnitClass, true),
    ]
    .into_iter()
    .map(|(name, kind, cmd)| AblationCell {
        name: name.into(),
        kind,
        cmd,
        loss: *base,
    })
    .collect()
}

/// Margin / blend grid for Unit-Class + discriminator, beta-major.
pub fn margin_grid_cells(base: &LossConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for beta in [0.2, 0.5, 0.8] {
        for alpha in [0.5, 1.0, 2.0] {
            cells.push(AblationCell {
                name: format!("alpha={alpha} beta={beta}"),
                kind: LossKind::UnitClass,
                cmd: true,
                loss: LossConfig { alpha, beta, ..*base },
            });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub cells: Vec<AblationCell>,
    /// Each seed drives pretraining, head init and batch order of its runs.
    pub seeds: Vec<u64>,
    pub cmd: CmdConfig,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub rank1: f64,
    pub tpr_at_far_1pct: Option<f64>,
    pub tpr_at_far_0p1pct: Option<f64>,
    pub fusion_rank1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    /// `results[cell][seed]`; failures keep their message.
    pub results: Vec<Vec<std::result::Result<CellMetrics, String>>>,
}

pub const ABLATION_HEADER: &str =
    "experiment,loss,cmd,alpha,beta,rank1,tpr_far_1pct,tpr_far_0p1pct,fusion_rank1,n_ok,n_failed";
pub const ABLATION_DETAIL_HEADER: &str =
    "experiment,seed,status,rank1,tpr_far_1pct,tpr_far_0p1pct,fusion_rank1";

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationReport {
    /// Seed-mean metrics of one cell over its successful runs.
    pub fn mean_metrics(&self, cell: usize) -> Option<CellMetrics> {
        let ok: Vec<&CellMetrics> = self.results[cell].iter().filter_map(|r| r.as_ref().ok()).collect();
        Some(CellMetrics {
            rank1: mean(ok.iter().map(|m| Some(m.rank1)))?,
            tpr_at_far_1pct: mean(ok.iter().map(|m| m.tpr_at_far_1pct)),
            tpr_at_far_0p1pct: mean(ok.iter().map(|m| m.tpr_at_far_0p1pct)),
            fusion_rank1: mean(ok.iter().map(|m| m.fusion_rank1)),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for (i, c) in self.cells.iter().enumerate() {
            let m = self.mean_metrics(i);
            let n_ok = self.results[i].iter().filter(|r| r.is_ok()).count();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&c.name),
                serde_json::to_value(c.kind).unwrap().as_str().unwrap(),
                c.cmd,
                c.loss.alpha,
                c.loss.beta,
                fmt_opt(m.map(|m| m.rank1)),
                fmt_opt(m.and_then(|m| m.tpr_at_far_1pct)),
                fmt_opt(m.and_then(|m| m.tpr_at_far_0p1pct)),
                fmt_opt(m.and_then(|m| m.fusion_rank1)),
                n_ok,
                self.results[i].len() - n_ok
            )
            .unwrap();
        }
        out
    }

    pub fn detail_csv(&self) -> String {
        let mut out = format!("{ABLATION_DETAIL_HEADER}\n");
        for (c, row) in self.cells.iter().zip(&self.results) {
            for (seed, r) in self.seeds.iter().zip(row) {
                let name = csv_field(&c.name);
                match r {
                    Ok(m) => writeln!(
                        out,
                        "{name},{seed},ok,{},{},{},{}",
                        m.rank1,
                        fmt_opt(m.tpr_at_far_1pct),
                        fmt_opt(m.tpr_at_far_0p1pct),
                        fmt_opt(m.fusion_rank1)
                    ),
                    Err(e) => writeln!(out, "{name},{seed},{},NA,NA,NA,NA", csv_field(&format!("failed: {e}"))),
                }
                .unwrap();
            }
        }
        out
    }
}

/// Runs `jobs` on up to `threads` workers; results come back in job order.
fn parallel_map<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("job ran")).collect()
}

fn seeded(opts: &TrainOptions, seed: u64) -> TrainOptions {
    let mut o = opts.clone();
    o.seed = seed;
    o.sampler.seed = seed;
    o.provenance.seed = seed;
    o
}

fn run_cell<T: Real>(
    train: &Dataset,
    test: &Dataset,
    pre: &Checkpoint,
    cell: &AblationCell,
    spec: &AblationSpec,
    opts: &TrainOptions,
    eval: &EvalConfig,
) -> Result<CellMetrics> {
    let hfr = HfrOptions {
        kind: cell.kind,
        loss: cell.loss,
        cmd: cell.cmd.then(|| spec.cmd.clone()),
    };
    let out = train_hfr::<T>(train, pre, &hfr, opts)?;
    let net = Network::<T>::from_checkpoint(&out.checkpoint)?;
    let report = evaluate(&net, test, eval)?;
    let embd = report.mode(Mode::Embd).expect("embedding mode always present");
    Ok(CellMetrics {
        rank1: embd.rank1,
        tpr_at_far_1pct: embd.tpr_at_far_1pct,
        tpr_at_far_0p1pct: embd.tpr_at_far_0p1pct,
        fusion_rank1: report.mode(Mode::Fusion).map(|m| m.rank1),
    })
}

/// Pretrains once per seed, then trains and evaluates every cell from that
/// shared checkpoint. Cell failures are recorded and the rest continue;
/// a failed pretraining fails every cell of its seed.
pub fn run_ablation<T: Real>(
    train: &Dataset,
    test: &Dataset,
    backbone: &BackboneConfig,
    opts: &TrainOptions,
    eval: &EvalConfig,
    spec: &AblationSpec,
) -> Result<AblationReport> {
    if spec.cells.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let pretrained: Vec<std::result::Result<Checkpoint, String>> = parallel_map(&spec.seeds, spec.threads, |&s| {
        pretrain::<T>(train, backbone, &seeded(opts, s), None)
            .map(|o| o.checkpoint)
            .map_err(|e| format!("pretraining: {e}"))
    });
    let jobs: Vec<(usize, usize)> = (0..spec.cells.len())
        .flat_map(|c| (0..spec.seeds.len()).map(move |s| (c, s)))
        .collect();
    let flat = parallel_map(&jobs, spec.threads, |&(c, s)| {
        let pre = pretrained[s].as_ref().map_err(Clone::clone)?;
        run_cell::<T>(train, test, pre, &spec.cells[c], spec, &seeded(opts, spec.seeds[s]), eval)
            .map_err(|e| e.to_string())
    });
    let mut it = flat.into_iter();
    let results = (0..spec.cells.len())
        .map(|_| it.by_ref().take(spec.seeds.len()).collect())
        .collect();
    Ok(AblationReport {
        cells: spec.cells.clone(),
        seeds: spec.seeds.clone(),
        results,
    })
}
