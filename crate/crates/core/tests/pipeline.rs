mod common;

use facetex_core::ablation::run_ablation;
use facetex_core::geometry::Pose;
use facetex_core::losses::{weighted_total, LossRecord};
use facetex_core::metrics::Embedder;
use facetex_core::networks::PerceptualExtractor;
use facetex_core::pipeline::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_state() -> (ExperimentConfig, facetex_core::synthdata::Dataset, TrainState) {
    let cfg = common::tiny_config();
    let ds = cfg.dataset().unwrap();
    let st = TrainState::for_dataset(&cfg, &ds).unwrap();
    (cfg, ds, st)
}

#[test]
fn zero_adversarial_weight_leaves_the_discriminator_untouched() {
    let mut cfg = common::tiny_config();
    cfg.loss.adv = 0.0;
    let ds = cfg.dataset().unwrap();
    let mut st = TrainState::for_dataset(&cfg, &ds).unwrap();
    let before = st.discriminator.store.clone();
    let gen_before = st.generator.store.fingerprint();
    st.train(&ds, 2, |_, _| {}).unwrap();
    for ((_, _, a), (_, _, b)) in before.iter().zip(st.discriminator.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_ne!(st.generator.store.fingerprint(), gen_before);
}

#[test]
fn loss_record_holds_the_generator_terms_and_discriminator_loss() {
    let (cfg, ds, mut st) = tiny_state();
    let r = st.train(&ds, 1, |_, _| {}).unwrap().remove(0);
    assert_eq!(r.step, 0);
    assert_eq!(r.rgb, 0.0);
    assert!(r.is_finite() && r.discriminator > 0.0);
    let total = weighted_total(&r.raw(), &cfg.loss);
    assert!((total - r.generator_total).abs() < 1e-4 * total.abs().max(1.0));
    let header: Vec<&str> = LossRecord::CSV_HEADER.split(',').collect();
    for name in ["l2", "vgg", "mask", "kl", "adv", "discriminator"] {
        assert!(header.contains(&name));
    }
}

#[test]
fn rgb_term_is_recorded_when_enabled() {
    let mut cfg = common::tiny_config();
    cfg.rgb_loss = true;
    let ds = cfg.dataset().unwrap();
    let mut st = TrainState::for_dataset(&cfg, &ds).unwrap();
    let r = st.train(&ds, 1, |_, _| {}).unwrap().remove(0);
    assert!(r.rgb > 0.0);
    assert!(r.generator_total > weighted_total(&r.raw(), &cfg.loss));
}

#[test]
fn generation_is_deterministic_and_texture_is_pose_free() {
    let (_, _, st) = tiny_state();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = sample_prior(&mut rng).unwrap();
    let (a, b) = (vec![0.2; 8], vec![-0.1; 8]);
    let p = Pose::from_euler_deg(10.0, -5.0, 0.0);
    assert_eq!(st.generate(&z, &a, &b, &p).unwrap(), st.generate(&z, &a, &b, &p).unwrap());
    let q = st.generate(&z, &a, &b, &Pose::from_euler_deg(-30.0, 12.0, 0.0)).unwrap();
    assert_eq!(q.texture, st.generate(&z, &a, &b, &p).unwrap().texture);
    assert_eq!(q.texture, st.decode_texture(z.face()).unwrap());
}

#[test]
fn repose_grid_layout_and_frontal_cell() {
    let (cfg, _, st) = tiny_state();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = sample_prior(&mut rng).unwrap();
    let (a, b) = (vec![0.0; 8], vec![0.0; 8]);
    let angles = [(-45.0, 0.0), (0.0, 0.0), (45.0, 0.0), (0.0, -60.0), (0.0, 60.0)];
    let grid = st.repose_grid(&z, &a, &b, &angles, angles.len()).unwrap();
    let n = cfg.network.image_size;
    assert_eq!(grid.image.shape(), &[3, n, angles.len() * n]);
    assert_eq!(grid.cells.len(), angles.len());
    let frontal = st.generate(&z, &a, &b, &Pose::identity()).unwrap().masked_image();
    assert_eq!(grid.cells[1], frontal);
}

#[test]
fn sampling_modes_and_interpolation_bounds() {
    let (_, ds, st) = tiny_state();
    let mut r1 = ChaCha8Rng::seed_from_u64(4);
    let mut r2 = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(st.sample_identity(&mut r1, SampleMode::Prior).unwrap(), st.sample_identity(&mut r2, SampleMode::Prior).unwrap());
    assert!(st.sample_identity(&mut r1, SampleMode::Posterior(None)).is_err());
    let img = ds.samples[0].masked_image();
    assert!(st.sample_identity(&mut r1, SampleMode::Posterior(Some(&img))).is_ok());
    let z = sample_prior(&mut r1).unwrap();
    assert!(interpolate(&z, &z, -0.1).is_err());
    assert!(interpolate(&z, &z, 1.5).is_err());
}

#[test]
fn encoder_input_is_never_the_augmented_image() {
    let (_, ds, mut st) = tiny_state();
    let batch = st.next_batch(&ds).unwrap();
    batch.verify_unaugmented().unwrap();
    for (k, &idx) in batch.sample_indices.iter().enumerate() {
        assert_eq!(batch.encoder_input.item(k), ds.samples[idx].masked_image().data());
    }
    let mut tampered = batch.clone();
    tampered.encoder_input = tampered.target_image.clone();
    if batch.transforms.iter().any(|a| !a.is_identity()) {
        assert!(tampered.verify_unaugmented().is_err());
        assert!(st.train_step(&tampered).is_err());
    }
}

#[test]
fn training_never_touches_the_perceptual_extractor() {
    let (_, ds, mut st) = tiny_state();
    let before = PerceptualExtractor::<f32>::fingerprint(&st.extractor);
    st.train(&ds, 3, |s, _| assert_eq!(PerceptualExtractor::<f32>::fingerprint(&s.extractor), before)).unwrap();
}

#[test]
fn identical_seeds_reproduce_losses_and_resume_is_exact() {
    let (cfg, ds, mut a) = tiny_state();
    let mut b = TrainState::for_dataset(&cfg, &ds).unwrap();
    let (ra, rb) = (a.train(&ds, 4, |_, _| {}).unwrap(), b.train(&ds, 4, |_, _| {}).unwrap());
    assert_eq!(ra, rb);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    a.save(&path).unwrap();
    let mut c = TrainState::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = sample_prior(&mut rng).unwrap();
    let p = Pose::from_euler_deg(5.0, 5.0, 0.0);
    assert_eq!(a.generate(&z, &[0.1; 8], &[0.0; 8], &p).unwrap(), c.generate(&z, &[0.1; 8], &[0.0; 8], &p).unwrap());
    assert_eq!(a.train(&ds, 2, |_, _| {}).unwrap(), c.train(&ds, 2, |_, _| {}).unwrap());
}

#[test]
fn ablation_table_has_four_rows_of_two_metrics() {
    let mut cfg = common::tiny_config();
    cfg.dataset.samples_per_identity = 40;
    cfg.eval.ablation_seeds = vec![0];
    cfg.eval.ablation_steps = 1;
    cfg.eval.ablation_identities = 2;
    cfg.eval.ffd_samples = 100;
    let ds = cfg.dataset().unwrap();
    let emb = Embedder::new(4, cfg.network.image_size, 3, 0).unwrap();
    let table = run_ablation(&cfg, &ds, &emb).unwrap();
    assert_eq!(table.rows.len(), 4);
    for row in &table.rows {
        assert!(row.failures.is_empty(), "{:?}", row.failures);
        assert_eq!((row.ffd.len(), row.consistency.len()), (1, 1));
    }
    assert!(table.row(16, false).is_some() && table.row(3, true).is_some());
    let text = table.to_table();
    assert_eq!(text.lines().filter(|l| l.contains("-dim ")).count(), 4, "{text}");
}
