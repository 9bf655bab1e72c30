//! Finite-difference suite over every differentiable operation, the three
//! metric losses, the discriminator path, and whole-network compositions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Metric, Var};
use crate::backbone::{BackboneConfig, InputSpec, Network, Provenance};
use crate::cmd::{cmd_forward_graph, cmd_loss_graph, genuine_labels, pair_concat_graph, CmdConfig, MaskPolicy};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_many, GradcheckConfig, GradcheckReport};
use crate::losses::{metric_loss_graph, BatchLabels, LossConfig, LossKind};
use crate::nn::{conv2d, dense, se_block, Bound, ParamStore};
use crate::tensor::Tensor;

/// Instances closer than this to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub error: Option<String>,
}

type Check = fn(&mut ChaCha8Rng, GradcheckConfig) -> Result<GradcheckReport>;
type BoxedCheck = Box<dyn Fn(&mut ChaCha8Rng, GradcheckConfig) -> Result<GradcheckReport>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Random fixed weights so every output coordinate reaches the scalar.
fn project(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = g.constant(uniform(rng, g.shape(y).to_vec().as_slice(), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(
    cfg: GradcheckConfig,
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    let proj_seed: u64 = rng.random();
    gradcheck_many(
        |g, v| {
            let y = f(g, v)?;
            if g.value(y).numel() == 1 {
                return Ok(y);
            }
            project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
        },
        &inputs,
        cfg,
    )
}

/// Three classes, two samples per class and modality, rows grouped by class.
fn labels() -> (Vec<u32>, Vec<Modality>) {
    let mut ids = Vec::new();
    let mut mods = Vec::new();
    for c in 0..3 {
        for m in [Modality::A, Modality::A, Modality::B, Modality::B] {
            ids.push(c);
            mods.push(m);
        }
    }
    (ids, mods)
}

/// One sample per class and modality; keeps the pair count small.
fn pair_labels(classes: u32) -> (Vec<u32>, Vec<Modality>) {
    (0..classes).flat_map(|c| [(c, Modality::A), (c, Modality::B)]).unzip()
}

fn loss_check(kind: LossKind, metric: Metric) -> impl Fn(&mut ChaCha8Rng, GradcheckConfig) -> Result<GradcheckReport> {
    move |rng, cfg| {
        let (ids, mods) = labels();
        let x = uniform(rng, &[ids.len(), 5], 1.0);
        let loss = LossConfig {
            alpha: rng.random_range(0.2..1.5),
            beta: rng.random_range(0.0..1.0),
            distance: metric,
            ..LossConfig::default()
        };
        check(cfg, vec![x], rng, |g, v| {
            let e = g.l2_normalize_rows(v[0])?;
            let bl = BatchLabels {
                class_ids: &ids,
                modalities: &mods,
            };
            metric_loss_graph(g, kind, e, &bl, &loss)
        })
    }
}

fn bound_params(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn store_inputs(p: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    p.iter().map(|(k, t)| (k.clone(), t.clone())).unzip()
}

fn cmd_params(rng: &mut ChaCha8Rng, d: usize, hidden: [usize; 2]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    let widths = [2 * d, hidden[0], hidden[1], 1];
    for (i, name) in ["cmd.dense0", "cmd.dense1", "cmd.out"].iter().enumerate() {
        p.insert(format!("{name}.w"), uniform(rng, &[widths[i], widths[i + 1]], 0.6));
        p.insert(format!("{name}.b"), uniform(rng, &[widths[i + 1]], 0.2));
    }
    p
}

fn cmd_path(rng: &mut ChaCha8Rng, cfg: GradcheckConfig, policy: MaskPolicy) -> Result<GradcheckReport> {
    let (ids, mods) = pair_labels(2);
    let d = 4;
    let (names, mut inputs) = store_inputs(&cmd_params(rng, d, [6, 5]));
    inputs.push(uniform(rng, &[ids.len(), d], 1.0));
    let genuine = genuine_labels(&ids);
    check(cfg, inputs, rng, |g, v| {
        let (e_raw, params) = v.split_last().expect("inputs");
        let p = bound_params(&names, params);
        let e = g.l2_normalize_rows(*e_raw)?;
        let probs = cmd_forward_graph(g, &p, e)?;
        cmd_loss_graph(g, probs, &genuine, policy, &mods)
    })
}

fn small_backbone(input: InputSpec) -> BackboneConfig {
    BackboneConfig {
        input,
        hidden: vec![12, 8],
        conv_channels: [3, 4],
        se_channels: 4,
        se_reduction: 2,
        embedding_dim: 4,
        num_pretrain_classes: 3,
    }
}

fn jitter(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn network_classify(rng: &mut ChaCha8Rng, cfg: GradcheckConfig, input: InputSpec) -> Result<GradcheckReport> {
    let mut net = Network::<f64>::new_pretrain(small_backbone(input), rng.random())?;
    jitter(&mut net.params, rng);
    let (names, mut inputs) = store_inputs(&net.params);
    inputs.push(uniform(rng, &[6, input.flat_dim()], 1.0));
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    check(cfg, inputs, rng, |g, v| {
        let (x, params) = v.split_last().expect("inputs");
        let p = bound_params(&names, params);
        let logits = net.classify_graph(g, &p, *x)?;
        g.softmax_cross_entropy(logits, &labels)
    })
}

fn network_hfr(rng: &mut ChaCha8Rng, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let bb = small_backbone(InputSpec::Vector { dim: 6 });
    let pre = Network::<f64>::new_pretrain(bb, rng.random())?;
    let cmd_cfg = CmdConfig {
        hidden: [6, 4],
        mask: MaskPolicy::OffDiagonal,
    };
    let mut net = Network::<f64>::swap_head(&pre.to_checkpoint(Provenance::default()), cmd_cfg, rng.random())?;
    jitter(&mut net.params, rng);
    let (ids, mods) = pair_labels(3);
    let genuine = genuine_labels(&ids);
    let (names, mut inputs) = store_inputs(&net.params);
    inputs.push(uniform(rng, &[ids.len(), 6], 1.0));
    let loss = LossConfig::default();
    check(cfg, inputs, rng, |g, v| {
        let (x, params) = v.split_last().expect("inputs");
        let p = bound_params(&names, params);
        let e = net.embed_graph(g, &p, *x)?;
        let bl = BatchLabels {
            class_ids: &ids,
            modalities: &mods,
        };
        let metric = metric_loss_graph(g, LossKind::UnitClass, e, &bl, &loss)?;
        let metric = g.scale(metric, loss.mu);
        let probs = cmd_forward_graph(g, &p, e)?;
        let bce = cmd_loss_graph(g, probs, &genuine, MaskPolicy::OffDiagonal, &mods)?;
        g.add(metric, bce)
    })
}

fn suite() -> Vec<(&'static str, BoxedCheck)> {
    fn boxed(f: Check) -> BoxedCheck {
        Box::new(f)
    }
    vec![
        ("matmul", boxed(|r, c| {
            let xs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[4, 5], 1.0)];
            check(c, xs, r, |g, v| g.matmul(v[0], v[1]))
        })),
        ("transpose", boxed(|r, c| check(c, vec![uniform(r, &[3, 5], 1.0)], r, |g, v| g.transpose(v[0])))),
        ("add", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 3], 1.0), uniform(r, &[2, 3], 1.0)];
            check(c, xs, r, |g, v| g.add(v[0], v[1]))
        })),
        ("sub", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 3], 1.0), uniform(r, &[2, 3], 1.0)];
            check(c, xs, r, |g, v| g.sub(v[0], v[1]))
        })),
        ("mul", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 3], 1.0), uniform(r, &[2, 3], 1.0)];
            check(c, xs, r, |g, v| g.mul(v[0], v[1]))
        })),
        ("scale", boxed(|r, c| {
            let k = r.random_range(-2.0..2.0);
            check(c, vec![uniform(r, &[4], 1.0)], r, move |g, v| Ok(g.scale(v[0], k)))
        })),
        ("add_row", boxed(|r, c| {
            let xs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[4], 1.0)];
            check(c, xs, r, |g, v| g.add_row(v[0], v[1]))
        })),
        ("relu", boxed(|r, c| check(c, vec![uniform(r, &[3, 4], 1.0)], r, |g, v| Ok(g.relu(v[0]))))),
        ("sigmoid", boxed(|r, c| check(c, vec![uniform(r, &[3, 4], 3.0)], r, |g, v| Ok(g.sigmoid(v[0]))))),
        ("tanh", boxed(|r, c| check(c, vec![uniform(r, &[3, 4], 2.0)], r, |g, v| Ok(g.tanh(v[0]))))),
        ("reshape", boxed(|r, c| check(c, vec![uniform(r, &[2, 6], 1.0)], r, |g, v| g.reshape(v[0], &[3, 4])))),
        ("sum", boxed(|r, c| check(c, vec![uniform(r, &[2, 3], 1.0)], r, |g, v| Ok(g.sum(v[0]))))),
        ("mean", boxed(|r, c| check(c, vec![uniform(r, &[2, 3], 1.0)], r, |g, v| Ok(g.mean(v[0]))))),
        ("l2_normalize_rows", boxed(|r, c| {
            check(c, vec![uniform(r, &[4, 5], 1.0)], r, |g, v| g.l2_normalize_rows(v[0]))
        })),
        ("softmax_cross_entropy", boxed(|r, c| {
            let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
            check(c, vec![uniform(r, &[5, 4], 2.0)], r, move |g, v| g.softmax_cross_entropy(v[0], &labels))
        })),
        ("binary_cross_entropy", boxed(|r, c| {
            let targets: Vec<f64> = (0..12).map(|_| f64::from(r.random_range(0..2u8))).collect();
            let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
            check(c, vec![uniform(r, &[3, 4], 2.0)], r, move |g, v| {
                let p = g.sigmoid(v[0]);
                g.binary_cross_entropy(p, &targets, Some(&mask))
            })
        })),
        ("channel_mean", boxed(|r, c| check(c, vec![uniform(r, &[2, 3, 4], 1.0)], r, |g, v| g.channel_mean(v[0])))),
        ("channel_scale", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 3, 4], 1.0), uniform(r, &[2, 3], 1.0)];
            check(c, xs, r, |g, v| g.channel_scale(v[0], v[1]))
        })),
        ("concat_rows", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 3], 1.0), uniform(r, &[4, 3], 1.0)];
            check(c, xs, r, |g, v| g.concat_rows(&[v[0], v[1]]))
        })),
        ("cross_distance_cosine", boxed(|r, c| {
            let xs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[5, 4], 1.0)];
            check(c, xs, r, |g, v| {
                let (x, y) = (g.l2_normalize_rows(v[0])?, g.l2_normalize_rows(v[1])?);
                g.cross_distance(x, y, Metric::Cosine)
            })
        })),
        ("cross_distance_l2", boxed(|r, c| {
            let xs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[5, 4], 1.0)];
            check(c, xs, r, |g, v| g.cross_distance(v[0], v[1], Metric::L2))
        })),
        ("dense", boxed(|r, c| {
            let xs = vec![uniform(r, &[3, 4], 1.0), uniform(r, &[4, 2], 1.0), uniform(r, &[2], 1.0)];
            check(c, xs, r, |g, v| dense(g, v[0], v[1], v[2]))
        })),
        ("se_block", boxed(|r, c| {
            let xs = vec![uniform(r, &[2, 4, 3], 1.0), uniform(r, &[4, 2], 1.0), uniform(r, &[2, 4], 1.0)];
            check(c, xs, r, |g, v| se_block(g, v[0], v[1], v[2]))
        })),
        ("conv2d", boxed(|r, c| {
            let stride = r.random_range(1..=2);
            let xs = vec![uniform(r, &[2, 2, 5, 5], 1.0), uniform(r, &[3, 2, 3, 3], 1.0), uniform(r, &[3], 1.0)];
            check(c, xs, r, move |g, v| conv2d(g, v[0], v[1], v[2], stride))
        })),
        ("pair_concat", boxed(|r, c| {
            check(c, vec![uniform(r, &[4, 3], 1.0)], r, |g, v| pair_concat_graph(g, v[0], 0..4))
        })),
        ("triplet_loss", Box::new(loss_check(LossKind::Triplet, Metric::Cosine))),
        ("class_mean_loss", Box::new(loss_check(LossKind::ClassMean, Metric::Cosine))),
        ("unit_class_loss", Box::new(loss_check(LossKind::UnitClass, Metric::Cosine))),
        ("unit_class_loss_l2", Box::new(loss_check(LossKind::UnitClass, Metric::L2))),
        ("cmd_path", boxed(|r, c| cmd_path(r, c, MaskPolicy::OffDiagonal))),
        ("cmd_path_cross_modal", boxed(|r, c| cmd_path(r, c, MaskPolicy::CrossModal))),
        ("network_vector_classify", boxed(|r, c| network_classify(r, c, InputSpec::Vector { dim: 6 }))),
        ("network_image_classify", boxed(|r, c| network_classify(r, c, InputSpec::Image { side: 7 }))),
        ("network_hfr_total", boxed(network_hfr)),
    ]
}

/// Runs every check on `instances` random instances at `tol`.
pub fn gradient_suite(instances: usize, seed: u64, tol: f64) -> Vec<SuiteRow> {
    let cfg = GradcheckConfig::with_tol(tol);
    suite()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut row = SuiteRow {
                name: name.into(),
                instances: 0,
                redrawn: 0,
                max_rel_err: 0.0,
                passed: true,
                error: None,
            };
            while row.instances < instances {
                let outcome = f(&mut rng, cfg).and_then(|r| {
                    if r.kink_distance < KINK_MARGIN {
                        Err(Error::InvalidArgument("near kink".into()))
                    } else {
                        Ok(r)
                    }
                });
                match outcome {
                    Ok(r) => {
                        row.instances += 1;
                        row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
                        row.passed &= r.passed;
                    }
                    Err(Error::InvalidArgument(m)) if m == "near kink" && row.redrawn < MAX_REDRAWS => {
                        row.redrawn += 1;
                    }
                    Err(e) => {
                        row.passed = false;
                        row.error = Some(e.to_string());
                        break;
                    }
                }
            }
            row
        })
        .collect()
}
