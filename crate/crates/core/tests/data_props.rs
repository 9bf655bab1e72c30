use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uchfr_core::config::RunConfig;
use uchfr_core::data::{generate_synth, BatchSampler, Dataset, FeatureStats, Modality, SamplerConfig, SynthConfig};
use uchfr_core::eval::{raw_feature_rank1, EvalConfig};

fn synth(classes: usize, k: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: classes,
        samples_per_class_per_modality: k,
        raw_dim: 12,
        seed,
        ..SynthConfig::default()
    }
}

fn check_batch(ds: &Dataset, batch: &[usize], p: usize, k: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(batch.len(), 2 * p * k);
    let mut classes = BTreeSet::new();
    for block in batch.chunks_exact(2 * k) {
        let c = ds.class_ids[block[0]];
        prop_assert!(classes.insert(c), "class {} appears in two blocks", c);
        for (i, &s) in block.iter().enumerate() {
            prop_assert_eq!(ds.class_ids[s], c);
            let want = if i < k { Modality::A } else { Modality::B };
            prop_assert_eq!(ds.modalities[s], want);
        }
    }
    let distinct: BTreeSet<_> = batch.iter().collect();
    prop_assert_eq!(distinct.len(), batch.len());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_are_class_and_modality_balanced(
        classes in 4usize..12,
        per in 2usize..7,
        p in 2usize..4,
        k in 2usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(per >= k && classes >= p);
        let ds = generate_synth(&synth(classes, per, seed)).unwrap();
        let cfg = SamplerConfig { batch_size: 2 * p * k, classes_per_batch: p, samples_per_class_per_modality: k, seed };
        let sampler = BatchSampler::new(&ds, cfg).unwrap();
        let mut seen = BTreeSet::new();
        for batch in sampler.epoch(3) {
            check_batch(&ds, &batch, p, k)?;
            for &i in &batch {
                prop_assert!(seen.insert(i), "sample {} drawn twice in one epoch", i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            check_batch(&ds, &sampler.sample_batch(&mut rng), p, k)?;
        }
    }

    #[test]
    fn epochs_are_reproducible(seed in any::<u64>(), epoch in 0usize..50) {
        let ds = generate_synth(&synth(8, 4, 1)).unwrap();
        let cfg = SamplerConfig { batch_size: 8, classes_per_batch: 2, samples_per_class_per_modality: 2, seed };
        let a = BatchSampler::new(&ds, cfg).unwrap();
        let b = BatchSampler::new(&ds, cfg).unwrap();
        prop_assert_eq!(a.epoch(epoch), b.epoch(epoch));
    }

    #[test]
    fn synthesis_is_seeded(seed in any::<u64>()) {
        let a = generate_synth(&synth(5, 3, seed)).unwrap();
        prop_assert_eq!(&a, &generate_synth(&synth(5, 3, seed)).unwrap());
        prop_assert_ne!(a.features, generate_synth(&synth(5, 3, seed.wrapping_add(1))).unwrap().features);
    }
}

#[test]
fn synthetic_layout() {
    let ds = generate_synth(&synth(6, 3, 0)).unwrap();
    assert_eq!(ds.len(), 36);
    assert_eq!(ds.dim(), 12);
    let idx = ds.index();
    assert_eq!(idx.len(), 6);
    for [a, b] in idx.values() {
        assert_eq!((a.len(), b.len()), (3, 3));
    }
}

#[test]
fn infeasible_sampler_is_rejected() {
    let ds = generate_synth(&synth(3, 2, 0)).unwrap();
    let cfg = SamplerConfig { batch_size: 16, classes_per_batch: 4, samples_per_class_per_modality: 2, seed: 0 };
    assert!(BatchSampler::new(&ds, cfg).is_err());
    let cfg = SamplerConfig { batch_size: 12, classes_per_batch: 2, samples_per_class_per_modality: 3, seed: 0 };
    assert!(BatchSampler::new(&ds, cfg).is_err());
    let bad = SamplerConfig { batch_size: 10, ..SamplerConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn degenerate_synth_configs_are_rejected() {
    assert!(generate_synth(&synth(1, 4, 0)).is_err());
    assert!(generate_synth(&synth(4, 1, 0)).is_err());
    assert!(generate_synth(&SynthConfig { gap_severity: -1.0, ..SynthConfig::default() }).is_err());
    assert!(generate_synth(&SynthConfig { mixing_correlation: 1.5, ..SynthConfig::default() }).is_err());
}

#[test]
fn modality_gap_defeats_raw_matching() {
    let eval = EvalConfig::default();
    let raw = |cfg: SynthConfig| raw_feature_rank1(&generate_synth(&cfg).unwrap(), &eval).unwrap();
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for seed in 0..3 {
        let base = SynthConfig { num_classes: 20, seed, ..SynthConfig::default() };
        easy.push(raw(SynthConfig { gap_severity: 0.0, mixing_correlation: 1.0, noise_scale: 0.02, ..base.clone() }));
        hard.push(raw(SynthConfig { gap_severity: 4.0, ..base }));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&easy) > mean(&hard) + 0.2, "easy {easy:?} hard {hard:?}");
}

#[test]
fn normalization_uses_training_statistics_only() {
    let mut cfg = RunConfig::default();
    cfg.data.synth = Some(SynthConfig { num_classes: 12, raw_dim: 64, ..SynthConfig::default() });
    cfg.data.test_classes = 4;
    cfg.data.normalize = true;
    let ds = cfg.build_dataset().unwrap();
    let (train, test) = cfg.splits(&ds).unwrap();

    let (raw_train, mut raw_test) = ds.split_by_class(4).unwrap();
    let stats = FeatureStats::compute(&raw_train);
    stats.apply(&mut raw_test);
    assert_eq!(test.features, raw_test.features);

    let after = FeatureStats::compute(&train);
    assert!(after.mean.iter().all(|m| m.abs() < 1e-9));
    assert!(after.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    let test_stats = FeatureStats::compute(&test);
    assert!(test_stats.mean.iter().any(|m| m.abs() > 1e-3));
}

#[test]
fn held_out_classes_are_disjoint() {
    let ds = generate_synth(&synth(10, 2, 4)).unwrap();
    let (train, test) = ds.split_by_class(3).unwrap();
    let tr: BTreeSet<u32> = train.classes().into_iter().collect();
    let te: BTreeSet<u32> = test.classes().into_iter().collect();
    assert!(tr.is_disjoint(&te));
    assert_eq!((tr.len(), te.len()), (7, 3));
    assert!(te.iter().all(|c| tr.iter().all(|t| t < c)));
    assert!(ds.split_by_class(0).is_err());
    assert!(ds.split_by_class(10).is_err());
}

#[test]
fn export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let mut cfg = RunConfig::default();
    cfg.data.synth = Some(SynthConfig { num_classes: 5, ..SynthConfig::default() });
    let ds = cfg.build_dataset().unwrap();
    ds.export(&path).unwrap();
    let back = Dataset::import(&path).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.class_ids, ds.class_ids);
    assert_eq!(back.modalities, ds.modalities);
    assert_eq!(back.provenance.config_hash, cfg.hash().unwrap());
    let counts: BTreeMap<u32, usize> = back.class_ids.iter().fold(BTreeMap::new(), |mut m, &c| {
        *m.entry(c).or_default() += 1;
        m
    });
    assert!(counts.values().all(|&n| n == 8));
}
