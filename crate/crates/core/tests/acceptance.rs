//! Acceptance suite. Runs sequentially and prints one PASS/FAIL line per
//! criterion; exits non-zero if any fail. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 1 2 3`; `--skip
//! acceptance` runs nothing.

mod common;

use std::time::Instant;

use facetex_core::ablation::run_ablation;
use facetex_core::geometry::Pose;
use facetex_core::losses::*;
use facetex_core::metrics::{identity_consistency, psnr_in_mask, train_embedder, Axis, ConsistencyReport, Embedder};
use facetex_core::networks::IdentityExtractor;
use facetex_core::pipeline::{sample_prior, ExperimentConfig, TrainState};
use facetex_core::raster::rasterize;
use facetex_core::synthdata::Dataset;
use facetex_grad::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rasterizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut cov, mut tri, mut uv) = (0, 0, 0.0f64);
    for _ in 0..50 {
        let s = common::random_scene(&mut rng);
        let r = rasterize(&s.points, &s.depth, &s.triangles, &s.uvs, s.size);
        let c = common::compare_with_oracle(&r, &common::oracle_rasterize(&s.points, &s.depth, &s.triangles, &s.uvs, s.size));
        cov += c.coverage_mismatch;
        tri += c.tri_mismatch;
        uv = uv.max(c.max_uv_error);
    }
    check(cov == 0 && tri == 0 && uv < 1e-5, format!("50 scenes: coverage mismatches {cov}, triangle mismatches {tri}, max uv error {uv:.2e}"))
}

fn texture_gradient() -> Outcome {
    let r = common::texture_gradient_check(102, 120);
    check(r.checked >= 100 && r.max_relative_error < 1e-3, format!("{} texels, max relative error {:.2e}", r.checked, r.max_relative_error))
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v)[0]
}

fn losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut fails = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            fails.push(format!("{name}: {got} vs {want}"));
        }
    };
    let g = Graph::<f64>::new();
    let vals = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
    let c = |v: &[f64], shape: &[usize]| g.constant(Tensor::new(shape, v.to_vec()));
    let shape = [1, 3, 4, 4];
    let (a, b) = (vals(&mut rng, 48, -1.0, 1.0), vals(&mut rng, 48, -1.0, 1.0));
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        v.iter().sum::<f64>() / v.len() as f64
    };

    expect("l2 zero", scalar(&g, photometric_l2(&g, c(&a, &shape), c(&a, &shape)).unwrap()), 0.0, 0.0);
    expect("l2 loop", scalar(&g, photometric_l2(&g, c(&a, &shape), c(&b, &shape)).unwrap()), mean(&mut a.iter().zip(&b).map(|(x, y)| (x - y).powi(2))), 1e-9);

    let id = IdentityExtractor;
    expect("perceptual zero", scalar(&g, perceptual(&g, c(&a, &shape), c(&a, &shape), &id).unwrap()), 0.0, 0.0);
    expect("perceptual loop", scalar(&g, perceptual(&g, c(&a, &shape), c(&b, &shape), &id).unwrap()), mean(&mut a.iter().zip(&b).map(|(x, y)| (x - y).abs())), 1e-9);

    let m: Vec<f64> = (0..48).map(|k| (k % 3 == 0) as u8 as f64).collect();
    let p = vals(&mut rng, 48, 0.05, 0.95);
    expect("bce fixed point", scalar(&g, mask_bce(&g, c(&m, &shape), c(&m, &shape)).unwrap()), -(1.0 - BCE_EPS).ln(), 1e-9);
    expect("bce loop", scalar(&g, mask_bce(&g, c(&p, &shape), c(&m, &shape)).unwrap()), mean(&mut p.iter().zip(&m).map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))), 1e-9);

    let zeros = vec![0.0; 8];
    expect("kl zero", scalar(&g, kl_divergence(&g, c(&zeros, &[1, 8]), c(&zeros, &[1, 8])).unwrap()), 0.0, 0.0);
    let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(0.3..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let lv = vals(&mut rng, 4, -1.5, 1.0);
    let closed = scalar(&g, kl_divergence(&g, c(&mu, &[1, 4]), c(&lv, &[1, 4])).unwrap());
    let mut acc = 0.0;
    let draws = 1_000_000;
    for _ in 0..draws {
        for k in 0..4 {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu[k] + (0.5 * lv[k]).exp() * e;
            acc += -0.5 * lv[k] - 0.5 * e * e + 0.5 * z * z;
        }
    }
    let mc = acc / (4 * draws) as f64;
    let kl_rel = (closed - mc).abs() / closed;
    expect("kl monte carlo relative error", kl_rel, 0.0, 0.01);

    let (sf, sr) = (vals(&mut rng, 16, -1.0, 2.0), vals(&mut rng, 16, -1.0, 2.0));
    let ones = vec![1.0; 16];
    let s = [16];
    expect("adv G fixed point", scalar(&g, adv_generator(&g, &[c(&ones, &s)], &[vec![c(&a, &shape)]], &[vec![c(&a, &shape)]]).unwrap()), 0.0, 0.0);
    let fm = mean(&mut a.iter().zip(&b).map(|(x, y)| (x - y).abs()));
    expect(
        "adv G loop",
        scalar(&g, adv_generator(&g, &[c(&sf, &s)], &[vec![c(&a, &shape)]], &[vec![c(&b, &shape)]]).unwrap()),
        mean(&mut sf.iter().map(|x| (1.0 - x).powi(2))) + fm,
        1e-9,
    );
    expect("adv D fixed point", scalar(&g, adv_discriminator(&g, &[c(&vec![0.0; 16], &s)], &[c(&ones, &s)], 1.0).unwrap()), 0.0, 0.0);
    expect(
        "adv D loop",
        scalar(&g, adv_discriminator(&g, &[c(&sf, &s)], &[c(&sr, &s)], 1.0).unwrap()),
        0.5 * (mean(&mut sf.iter().map(|x| x * x)) + mean(&mut sr.iter().map(|x| (1.0 - x).powi(2)))),
        1e-9,
    );

    let feat = vals(&mut rng, 5 * 16, -1.0, 1.0);
    expect("rgb zero", scalar(&g, rgb_texture_loss(&g, c(&a, &shape), c(&a, &shape)).unwrap()), 0.0, 0.0);
    expect("rgb loop", scalar(&g, rgb_texture_loss(&g, c(&feat, &[1, 5, 4, 4]), c(&b, &shape)).unwrap()), mean(&mut feat[..48].iter().zip(&b).map(|(x, y)| (x - y).powi(2))), 1e-9);

    let one = g.constant(Tensor::scalar(1.0));
    let terms = GeneratorTerms { l2: one, vgg: one, mask: one, kl: one, adv: one, rgb: None };
    let total = scalar(&g, total_generator_loss(&g, &terms, &LossWeights::default()));
    expect("total of unit terms", total, 5.1, 1e-12);

    check(fails.is_empty(), if fails.is_empty() { format!("all terms match; KL rel. error {:.2}%, unit total {total}", 100.0 * kl_rel) } else { fails.join("; ") })
}

fn alignment() -> Outcome {
    let ious = common::alignment_ious(104, 100, 64);
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
    check(mean >= 0.98, format!("100 transforms at 64×64: mean IoU {mean:.4} (min {min:.4})"))
}

fn architecture() -> Outcome {
    let r = common::architecture_report(&ExperimentConfig::default());
    check(
        r.texture_pose_independent && r.texture_ignores_additive && r.gradient_paths_split && r.dead_parameters.is_empty(),
        format!(
            "pose-independent texture {}, additive isolation {}, split gradient paths {}, parameters without gradient {:?}",
            r.texture_pose_independent, r.texture_ignores_additive, r.gradient_paths_split, r.dead_parameters
        ),
    )
}

fn smoke_training() -> Outcome {
    let cfg = common::micro_config();
    let ds = cfg.dataset().map_err(|e| e.to_string())?;
    let mut st = TrainState::for_dataset(&cfg, &ds).map_err(|e| e.to_string())?;
    let rec = st.train(&ds, 200, |_, _| {}).map_err(|e| e.to_string())?;
    let avg = |r: &[LossRecord]| r.iter().map(|x| x.l2).sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(&rec[..10]), avg(&rec[rec.len() - 10..]));
    let reduction = 1.0 - last / first;
    let mut total = 0.0;
    for s in &ds.samples {
        let g = st.reconstruct(s).map_err(|e| e.to_string())?;
        total += psnr_in_mask(&g.image, &s.image, &s.mask).map_err(|e| e.to_string())?.unwrap_or(0.0);
    }
    let psnr = total / ds.samples.len() as f64;
    check(
        reduction >= 0.5 && psnr >= 18.0,
        format!("{} samples, 200 steps: L2 {first:.4} -> {last:.4} ({:.0}% reduction), mean PSNR in mask {psnr:.2} dB", ds.samples.len(), 100.0 * reduction),
    )
}

/// Default-config model trained for 2000 steps plus the embedder, shared by
/// the long-running criteria.
struct Trained {
    config: ExperimentConfig,
    dataset: Dataset,
    state: TrainState,
    embedder: Embedder,
    report: ConsistencyReport,
}

fn train_default() -> Result<Trained, String> {
    let config = ExperimentConfig::default();
    let dataset = config.dataset().map_err(|e| e.to_string())?;
    let mut state = TrainState::for_dataset(&config, &dataset).map_err(|e| e.to_string())?;
    state.train(&dataset, config.training.steps, |_, _| {}).map_err(|e| e.to_string())?;
    let embedder = train_embedder(&dataset, &config.eval.embedder, &config.augment, config.seed).map_err(|e| e.to_string())?;
    let mut angles = config.eval.angles_deg.clone();
    angles.extend(&config.eval.probe_angles_deg);
    let report = identity_consistency(&state, &embedder, config.eval.n_identities, &angles, config.seed).map_err(|e| e.to_string())?;
    Ok(Trained { config, dataset, state, embedder, report })
}

fn consistency(t: &Trained) -> Outcome {
    let r = &t.report;
    let mut ok = true;
    let mut parts = Vec::new();
    for axis in [Axis::Yaw, Axis::Pitch] {
        let (near, far) = (r.symmetric_mean(axis, 15.0).unwrap_or(f64::NAN), r.symmetric_mean(axis, 45.0).unwrap_or(f64::NAN));
        ok &= near > far;
        parts.push(format!("{axis:?} ±15° {near:.4} vs ±45° {far:.4}"));
    }
    let steps = t.state.step;
    check(ok, format!("{steps} steps, {} identities: {}; embedder reliable {}", r.n_identities, parts.join(", "), r.embedder_reliable))
}

fn ablation(t: &Trained) -> Outcome {
    let table = run_ablation(&t.config, &t.dataset, &t.embedder).map_err(|e| e.to_string())?;
    for line in table.to_table().lines() {
        println!("    {line}");
    }
    let ffd = |c, rgb| table.row(c, rgb).and_then(|r| r.ffd_mean());
    match (ffd(16, false), ffd(3, true)) {
        (Some(a), Some(b)) => check(a <= b, format!("16-dim w/o RGB term FFD {a:.4} vs 3-dim with RGB term {b:.4}, seeds {:?}", table.seeds)),
        _ => Err("an ablation variant failed on every seed".into()),
    }
}

fn reproducibility() -> Outcome {
    let cfg = ExperimentConfig::default();
    let ds = cfg.dataset().map_err(|e| e.to_string())?;
    let run = || -> Result<(TrainState, Vec<LossRecord>), String> {
        let mut st = TrainState::for_dataset(&cfg, &ds).map_err(|e| e.to_string())?;
        let rec = st.train(&ds, 50, |_, _| {}).map_err(|e| e.to_string())?;
        Ok((st, rec))
    };
    let (st, a) = run()?;
    let (_, b) = run()?;
    let same_losses = a.len() == 50 && a == b;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("state.ckpt");
    st.save(&path).map_err(|e| e.to_string())?;
    let loaded = TrainState::load(&path).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut identical = true;
    for k in 0..4 {
        let z = sample_prior(&mut rng).map_err(|e| e.to_string())?;
        let alpha: Vec<f64> = (0..st.model.d_alpha).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta: Vec<f64> = (0..st.model.d_beta).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pose = Pose::from_euler_deg(-30.0 + 20.0 * k as f64, 10.0, 0.0);
        let (x, y) = (st.generate(&z, &alpha, &beta, &pose), loaded.generate(&z, &alpha, &beta, &pose));
        identical &= matches!((x, y), (Ok(x), Ok(y)) if x == y);
    }
    check(same_losses && identical, format!("first 50 loss records identical {same_losses}; checkpoint round-trip bit-identical {identical}"))
}

fn pose_probe(t: &Trained) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let z = sample_prior(&mut rng).map_err(|e| e.to_string())?;
    let (alpha, beta) = (vec![0.0; t.state.model.d_alpha], vec![0.0; t.state.model.d_beta]);
    let angles = [(-60.0, 0.0), (60.0, 0.0), (0.0, -60.0), (0.0, 60.0)];
    let grid = t.state.repose_grid(&z, &alpha, &beta, &angles, angles.len()).map_err(|e| e.to_string())?;
    let finite = grid.cells.iter().all(|c| c.is_finite());
    let table = t.report.to_table();
    let probes: Vec<_> = t.report.entries.iter().filter(|e| e.angle_deg.abs() > 45.0).collect();
    let flagged = !probes.is_empty() && probes.iter().all(|e| e.extrapolated);
    let degraded = probes.iter().filter(|e| e.degraded).count();
    let annotated = table.contains('*') || table.contains('!');
    for line in table.lines() {
        println!("    {line}");
    }
    check(
        finite && flagged && annotated,
        format!("±60° grid rendered ({} cells, finite {finite}); {} probe entries flagged beyond range, {degraded} marked degraded", grid.cells.len(), probes.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.windows(2).any(|w| w[0] == "--skip" && "acceptance".contains(w[1].as_str())) {
        return;
    }
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !run(n) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name} [{secs:.0}s]: {d}"),
            Err(d) => {
                println!("criterion {n:>2} FAIL  {name} [{secs:.0}s]: {d}");
                failed.push(n);
            }
        }
    };

    report(1, "rasterizer oracle equivalence", &mut rasterizer_oracle);
    report(2, "texture gradient", &mut texture_gradient);
    report(3, "loss fixed points and oracles", &mut losses);
    report(4, "augmentation alignment", &mut alignment);
    report(5, "architecture invariants", &mut architecture);
    report(6, "smoke training", &mut smoke_training);

    let trained = if [7, 8, 10].iter().any(|&n| run(n)) {
        let t = Instant::now();
        let r = train_default();
        println!("    trained default model and embedder in {:.0}s", t.elapsed().as_secs_f64());
        Some(r)
    } else {
        None
    };
    let with_trained = |f: fn(&Trained) -> Outcome| match &trained {
        Some(Ok(t)) => f(t),
        Some(Err(e)) => Err(format!("training failed: {e}")),
        None => unreachable!(),
    };
    report(7, "consistency falloff", &mut || with_trained(consistency));
    report(8, "ablation direction", &mut || with_trained(ablation));
    report(9, "reproducibility and persistence", &mut reproducibility);
    report(10, "out-of-range pose probe", &mut || with_trained(pose_probe));

    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
