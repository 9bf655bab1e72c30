mod common;

use common::batches;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uchfr_core::autograd::{Graph, Var};
use uchfr_core::checks::{gradient_suite, KINK_MARGIN};
use uchfr_core::cmd::{cmd_forward_graph, cmd_loss_graph, genuine_labels, MaskPolicy};
use uchfr_core::data::Modality;
use uchfr_core::gradcheck::{gradcheck, gradcheck_many, GradcheckConfig};
use uchfr_core::losses::{metric_loss_graph, unit_class_loss_graph, BatchLabels, LossConfig, LossKind};
use uchfr_core::nn::ParamStore;
use uchfr_core::{Result, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn cmd_params(d: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, fi, fo) in [("cmd.dense0", 2 * d, 6), ("cmd.dense1", 6, 4), ("cmd.out", 4, 1)] {
        p.insert(format!("{name}.w"), random(rng, &[fi, fo], 0.8));
        p.insert(format!("{name}.b"), random(rng, &[fo], 0.2));
    }
    p
}

#[test]
fn full_suite_passes_at_default_tolerance() {
    let rows = gradient_suite(10, 7, 1e-4);
    for want in [
        "matmul",
        "relu",
        "sigmoid",
        "l2_normalize_rows",
        "binary_cross_entropy",
        "conv2d",
        "se_block",
        "pair_concat",
        "triplet_loss",
        "class_mean_loss",
        "unit_class_loss",
        "cmd_path",
        "network_hfr_total",
    ] {
        assert!(rows.iter().any(|r| r.name.starts_with(want)), "{want} not in suite");
    }
    for r in &rows {
        assert!(r.passed, "{} failed: err {:e} {:?}", r.name, r.max_rel_err, r.error);
        assert_eq!(r.instances, 10);
    }
}

#[test]
fn reused_variables_accumulate() {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.add(sq, v).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    let got = grads.get(v).unwrap();
    for (gv, xv) in got.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv + 1.0);
    }
}

fn hfr_terms(g: &mut Graph<f64>, e: Var, p: &ParamStore<f64>, ids: &[u32], mods: &[Modality]) -> Result<(Var, Var)> {
    let labels = BatchLabels { class_ids: ids, modalities: mods };
    let l_uc = unit_class_loss_graph(g, e, &labels, &LossConfig::default())?;
    let bound = p.bind(g, true);
    let probs = cmd_forward_graph(g, &bound, e)?;
    let l_cmd = cmd_loss_graph(g, probs, &genuine_labels(ids), MaskPolicy::OffDiagonal, mods)?;
    Ok((l_uc, l_cmd))
}

#[test]
fn joint_gradient_is_linear_in_the_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 5;
    let (ids, mods): (Vec<u32>, Vec<Modality>) = (0..3u32)
        .flat_map(|c| [Modality::A, Modality::A, Modality::B, Modality::B].map(|m| (c, m)))
        .unzip();
    let x = random(&mut rng, &[ids.len(), d], 1.0);
    let p = cmd_params(d, &mut rng);
    for mu in [0.0, 0.5, 1.0, 3.0] {
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let raw = g.param(x.clone());
            let e = g.l2_normalize_rows(raw).unwrap();
            let (uc, cmd) = hfr_terms(&mut g, e, &p, &ids, &mods).unwrap();
            let out = match which {
                0 => {
                    let s = g.scale(uc, mu);
                    g.add(s, cmd).unwrap()
                }
                1 => uc,
                _ => cmd,
            };
            g.backward(out).unwrap().get(raw).unwrap().clone()
        };
        let (total, uc, cmd) = (grad_of(0), grad_of(1), grad_of(2));
        for ((t, u), c) in total.data().iter().zip(uc.data()).zip(cmd.data()) {
            assert!((t - (mu * u + c)).abs() < 1e-12, "mu {mu}: {t} vs {}", mu * u + c);
        }
    }
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    let x = Tensor::new(vec![3], vec![0.3, -0.4, 1.2]).unwrap();
    let ok = gradcheck(|g, v| {
        let r = g.tanh(v);
        Ok(g.sum(r))
    }, &x, 1e-6)
    .unwrap();
    assert!(ok.passed);
    let scaled = gradcheck_many(
        |g, vs| {
            let s = g.scale(vs[0], 2.0);
            let c = g.constant(g.value(s).clone());
            let m = g.mul(c, vs[0])?;
            Ok(g.sum(m))
        },
        std::slice::from_ref(&x),
        GradcheckConfig::default(),
    )
    .unwrap();
    assert!(!scaled.passed, "detached factor should disagree with finite differences");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metric_losses_match_finite_differences(batch in batches(), beta in 0.0f64..=1.0, which in 0usize..3) {
        let kind = [LossKind::Triplet, LossKind::ClassMean, LossKind::UnitClass][which];
        let cfg = LossConfig { beta, alpha: 0.7, ..LossConfig::default() };
        let ids = batch.class_ids.clone();
        let mods = batch.modalities.clone();
        let f = |g: &mut Graph<f64>, vs: &[Var]| {
            let e = g.l2_normalize_rows(vs[0])?;
            metric_loss_graph(g, kind, e, &BatchLabels { class_ids: &ids, modalities: &mods }, &cfg)
        };
        let mut g = Graph::new();
        let v = g.param(batch.embeddings.clone());
        f(&mut g, &[v]).unwrap();
        prop_assume!(g.kink_distance() > KINK_MARGIN);
        let r = gradcheck_many(f, std::slice::from_ref(&batch.embeddings), GradcheckConfig::default()).unwrap();
        prop_assert!(r.passed, "{kind:?} rel err {:e}", r.max_rel_err);
    }
}
