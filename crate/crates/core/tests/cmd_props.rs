use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uchfr_core::autograd::Graph;
use uchfr_core::cmd::{
    cmd_forward, cmd_forward_graph, cmd_forward_tiled, cmd_loss, cmd_score, genuine_labels, loss_mask, pair_concat,
    symmetric_score, MaskPolicy,
};
use uchfr_core::data::Modality;
use uchfr_core::nn::ParamStore;
use uchfr_core::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn params(d: usize, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, fi, fo) in [("cmd.dense0", 2 * d, 7), ("cmd.dense1", 7, 3), ("cmd.out", 3, 1)] {
        p.insert(format!("{name}.w"), random(&mut rng, &[fi, fo], 0.9));
        p.insert(format!("{name}.b"), random(&mut rng, &[fo], 0.3));
    }
    p
}

/// Plain-loop forward pass of the discriminator.
fn mlp_oracle(x: &[f64], p: &ParamStore<f64>) -> f64 {
    let mut h = x.to_vec();
    for (i, name) in ["cmd.dense0", "cmd.dense1", "cmd.out"].iter().enumerate() {
        let w = p.get(&format!("{name}.w")).unwrap();
        let b = p.get(&format!("{name}.b")).unwrap();
        let (fi, fo) = w.dims2();
        assert_eq!(fi, h.len());
        h = (0..fo)
            .map(|o| {
                let z = b.data()[o] + (0..fi).map(|k| h[k] * w.data()[k * fo + o]).sum::<f64>();
                if i < 2 { z.max(0.0) } else { 1.0 / (1.0 + (-z).exp()) }
            })
            .collect();
    }
    h[0]
}

fn embeddings() -> impl Strategy<Value = Tensor<f64>> {
    (2usize..=9, 1usize..=5).prop_flat_map(|(b, d)| {
        prop::collection::vec(-2.0f64..2.0, b * d).prop_map(move |v| Tensor::new(vec![b, d], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_slots_are_exact_concatenations(e in embeddings()) {
        let (b, d) = e.dims2();
        let pairs = pair_concat(&e).unwrap();
        prop_assert_eq!(pairs.values.shape(), &[b, b, 2 * d]);
        for i in 0..b {
            for j in 0..b {
                let s = pairs.slot(i, j);
                prop_assert_eq!(&s[..d], e.row(i));
                prop_assert_eq!(&s[d..], e.row(j));
            }
        }
    }

    #[test]
    fn genuine_matrix_matches_class_equality(ids in prop::collection::vec(0u32..5, 1..30)) {
        let m = genuine_labels(&ids);
        prop_assert!(m.is_symmetric());
        for i in 0..ids.len() {
            prop_assert_eq!(m.get(i, i), 1);
            for j in 0..ids.len() {
                prop_assert_eq!(m.get(i, j), u8::from(ids[i] == ids[j]));
            }
        }
    }

    #[test]
    fn forward_matches_plain_oracle(e in embeddings(), seed in any::<u64>()) {
        let d = e.dims2().1;
        let p = params(d, seed);
        let pairs = pair_concat(&e).unwrap();
        let probs = cmd_forward(&pairs, &p).unwrap();
        let b = pairs.batch();
        for i in 0..b {
            for j in 0..b {
                let want = mlp_oracle(pairs.slot(i, j), &p);
                prop_assert!((probs.data()[i * b + j] - want).abs() < 1e-12);
                prop_assert!((cmd_score(e.row(i), e.row(j), &p).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_permutation_equivariant(e in embeddings(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (b, d) = e.dims2();
        let p = params(d, seed);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let shuffled = Tensor::new(vec![b, d], perm.iter().flat_map(|&i| e.row(i).to_vec()).collect()).unwrap();
        let s = cmd_forward(&pair_concat(&e).unwrap(), &p).unwrap();
        let t = cmd_forward(&pair_concat(&shuffled).unwrap(), &p).unwrap();
        for i in 0..b {
            for j in 0..b {
                prop_assert!((t.data()[i * b + j] - s.data()[perm[i] * b + perm[j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_score_ignores_order(e in embeddings(), seed in any::<u64>()) {
        let p = params(e.dims2().1, seed);
        let (x, y) = (e.row(0), e.row(1));
        prop_assert_eq!(symmetric_score(x, y, &p).unwrap(), symmetric_score(y, x, &p).unwrap());
        let avg = (cmd_score(x, y, &p).unwrap() + cmd_score(y, x, &p).unwrap()) / 2.0;
        prop_assert!((symmetric_score(x, y, &p).unwrap() - avg).abs() < 1e-15);
    }

    #[test]
    fn tiling_does_not_change_probabilities(e in embeddings(), seed in any::<u64>(), tile in 1usize..10) {
        let p = params(e.dims2().1, seed);
        let full = {
            let mut g = Graph::new();
            let bound = p.bind(&mut g, false);
            let v = g.constant(e.clone());
            let out = cmd_forward_graph(&mut g, &bound, v).unwrap();
            g.value(out).clone()
        };
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let v = g.constant(e.clone());
        let out = cmd_forward_tiled(&mut g, &bound, v, tile).unwrap();
        for (a, b) in g.value(out).data().iter().zip(full.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn off_diagonal_mask_ignores_self_pairs(b in 2usize..8, fill in 0.01f64..0.99, diag in 0.01f64..0.99) {
        let ids: Vec<u32> = (0..b as u32).map(|i| i / 2).collect();
        let mods = vec![Modality::A; b];
        let labels = genuine_labels(&ids);
        let base = Tensor::full(&[b, b], fill);
        let mut changed = base.clone();
        for i in 0..b {
            changed.data_mut()[i * b + i] = diag;
        }
        let l0 = cmd_loss(&base, &labels, MaskPolicy::OffDiagonal, &mods).unwrap();
        let l1 = cmd_loss(&changed, &labels, MaskPolicy::OffDiagonal, &mods).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-12);
    }
}

#[test]
fn mask_policies() {
    let mods = [Modality::A, Modality::B, Modality::A];
    let off = loss_mask(3, MaskPolicy::OffDiagonal, &[]).unwrap();
    assert_eq!(off.iter().filter(|&&m| m).count(), 6);
    assert!(loss_mask(3, MaskPolicy::All, &[]).unwrap().iter().all(|&m| m));
    let cross = loss_mask(3, MaskPolicy::CrossModal, &mods).unwrap();
    assert_eq!(cross, vec![false, true, false, true, false, true, false, true, false]);
    assert!(loss_mask(3, MaskPolicy::CrossModal, &mods[..2]).is_err());
}

#[test]
fn bce_against_hand_value() {
    // genuine pairs at 0.9, imposters at 0.2, diagonal excluded
    let ids = [0, 0, 1];
    let labels = genuine_labels(&ids);
    let mut probs = Tensor::full(&[3, 3], 0.2);
    probs.data_mut()[1] = 0.9;
    probs.data_mut()[3] = 0.9;
    let got = cmd_loss(&probs, &labels, MaskPolicy::OffDiagonal, &[]).unwrap();
    let want = (2.0 * -(0.9f64).ln() + 4.0 * -(0.8f64).ln()) / 6.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn full_size_pair_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random(&mut rng, &[64, 256], 1.0);
    let pairs = pair_concat(&e).unwrap();
    assert_eq!(pairs.values.shape(), &[64, 64, 512]);
    assert_eq!(pairs.slot(63, 0)[..256], *e.row(63));
    assert_eq!(pairs.slot(63, 0)[256..], *e.row(0));
}
