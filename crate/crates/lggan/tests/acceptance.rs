//! Acceptance gate: one test per criterion, each printing a single
//! `acceptance N (<name>): PASS|FAIL` line directly to stderr so the
//! verdicts are visible even under output capture. Tests are named
//! `a1_…`–`a9_…` so the harness runs them in criterion order.

use lggan::cli::{cmd_inspect, InspectArgs};
use lggan::config::{LocalVariant, ModelConfig, Setup};
use lggan::data::{one_hot, synth_dataset, Batch, Mode, PairedSample, SemanticMap};
use lggan::graph::{filtered_cross_entropy, Tensor};
use lggan::model::{
    d_loss, filter_class_features, fuse, masked_l1_loss, semantic_avg_pool, Classifier, LgGan,
    WeightMapGenerator,
};
use lggan::trainer::{run_steps, Trainer};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::Instant;

/// Write a line straight to stderr, past the test harness's capture.
fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn criterion<F: FnOnce()>(n: usize, name: &str, body: F) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let secs = start.elapsed().as_secs_f32();
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    report(&format!("acceptance {n} ({name}): {verdict} ({secs:.1}s)"));
    if let Err(panic) = result {
        resume_unwind(panic);
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi)))
}

/// Random void-free labels, as a map plus `[1, c, h, w]` mask tensor.
fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (SemanticMap, Tensor) {
    let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c) as u32);
    let map = SemanticMap::new(labels, c);
    let masks = one_hot(&map).insert_axis(ndarray::Axis(0)).into_dyn();
    (map, Tensor::constant(masks))
}

fn small_config(setup: Setup, mode: Mode, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        c: 3,
        nf: 8,
        nf_d: 8,
        r: 1,
        setup,
        local_variant: if setup == Setup::S2 { LocalVariant::Add } else { LocalVariant::Conv },
        seed,
        image_h: 32,
        image_w: 32,
        ..ModelConfig::default()
    }
}

fn build_trainer(config: &ModelConfig) -> Trainer {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Trainer::new(LgGan::new(config, &mut rng))
}

// ---------------------------------------------------------------------------

#[test]
fn a1_mask_partition_identity() {
    criterion(1, "mask-partition identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
        for case in 0..100 {
            let c = rng.random_range(2..=6);
            let h = rng.random_range(2..=16);
            let w = rng.random_range(2..=16);
            let nf = rng.random_range(1..=8);
            let features = rand_tensor(&mut rng, &[1, nf, h, w], -2.0, 2.0);
            let (_, masks) = random_labels(&mut rng, c, h, w);

            let filtered = filter_class_features(&features, &masks);
            assert_eq!(filtered.len(), c);
            let mut sum = ArrayD::<f32>::zeros(IxDyn(&[1, nf, h, w]));
            for f in &filtered {
                sum += &*f.data();
            }
            for (si, fi) in sum.iter().zip(features.data().iter()) {
                assert!(
                    (si - fi).abs() <= 1e-6,
                    "case {case}: filtered features do not sum back to the shared map"
                );
            }
        }
    });
}

#[test]
fn a2_weight_map_normalization_and_envelope() {
    criterion(2, "weight-map normalization & fusion envelope", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
        for case in 0..10 {
            let nf = rng.random_range(2..=8);
            let (h, w) = (4 * rng.random_range(2..=8), 4 * rng.random_range(2..=8));
            let fusion = WeightMapGenerator::new(&mut rng, nf);
            let features = rand_tensor(&mut rng, &[1, 4 * nf, h / 4, w / 4], -1.5, 1.5);
            let (w_g, w_l) = fusion.forward(&features, false);

            for (g, l) in w_g.data().iter().zip(w_l.data().iter()) {
                assert!((g + l - 1.0).abs() <= 1e-6, "case {case}: weights sum to {}", g + l);
                assert!(*g >= 0.0 && *l >= 0.0, "case {case}: negative weight");
            }

            let global = rand_tensor(&mut rng, &[1, 3, h, w], -1.0, 1.0);
            let local = rand_tensor(&mut rng, &[1, 3, h, w], -1.0, 1.0);
            let fused = fuse(&global, &local, &w_g, &w_l);
            let fd = fused.data();
            let gd = global.data();
            let ld = local.data();
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (f, g, l) =
                            (fd[[0, ch, y, x]], gd[[0, ch, y, x]], ld[[0, ch, y, x]]);
                        assert!(
                            f >= g.min(l) - 1e-6 && f <= g.max(l) + 1e-6,
                            "case {case}: fused {f} outside [{}, {}]",
                            g.min(l),
                            g.max(l)
                        );
                    }
                }
            }
        }
    });
}

#[test]
fn a3_pooling_and_masked_l1_match_loop_oracles() {
    criterion(3, "pooling & masked-L1 oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA3);

        // Semantic-guided pooling against a per-entry loop.
        for case in 0..100 {
            let n = rng.random_range(1..=2);
            let c = rng.random_range(2..=5);
            let nf = rng.random_range(1..=6);
            let h = rng.random_range(2..=8);
            let w = rng.random_range(2..=8);
            let masks = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| {
                f32::from(rng.random_bool(0.6))
            }));
            let filtered: Vec<Tensor> =
                (0..c).map(|_| rand_tensor(&mut rng, &[n, nf, h, w], -2.0, 2.0)).collect();

            let pooled = semantic_avg_pool(&filtered, &masks);
            assert_eq!(pooled.shape(), vec![n, c, nf]);
            let pd = pooled.data();
            let md = masks.data();
            for ni in 0..n {
                for i in 0..c {
                    let fd = filtered[i].data();
                    let mut count = 0.0f32;
                    for y in 0..h {
                        for x in 0..w {
                            count += md[[ni, i, y, x]];
                        }
                    }
                    for f in 0..nf {
                        let mut sum = 0.0f32;
                        for y in 0..h {
                            for x in 0..w {
                                sum += fd[[ni, f, y, x]] * md[[ni, i, y, x]];
                            }
                        }
                        let expect = sum / count.max(1.0);
                        let got = pd[[ni, i, f]];
                        assert!(
                            (got - expect).abs() <= 1e-6,
                            "case {case}: pooled ({ni},{i},{f}) = {got}, oracle {expect}"
                        );
                    }
                }
            }
        }

        // Class-wise masked reconstruction loss against an explicit sum.
        for case in 0..100 {
            let n = rng.random_range(1..=2);
            let c = rng.random_range(2..=4);
            let h = rng.random_range(2..=6);
            let w = rng.random_range(2..=6);
            let masks = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| {
                f32::from(rng.random_bool(0.5))
            }));
            let target = rand_tensor(&mut rng, &[n, 3, h, w], -1.0, 1.0);
            let per_class: Vec<Tensor> =
                (0..c).map(|_| rand_tensor(&mut rng, &[n, 3, h, w], -1.0, 1.0)).collect();
            let valid =
                Array2::from_shape_fn((n, c), |_| f32::from(rng.random_bool(0.7)));

            let loss = masked_l1_loss(&per_class, &target, &masks, &valid).item();

            let md = masks.data();
            let td = target.data();
            let mut expect = 0.0f32;
            for (i, pred) in per_class.iter().enumerate() {
                let pd = pred.data();
                for ni in 0..n {
                    let mut s = 0.0f32;
                    for ch in 0..3 {
                        for y in 0..h {
                            for x in 0..w {
                                let masked_target = md[[ni, i, y, x]] * td[[ni, ch, y, x]];
                                s += (pd[[ni, ch, y, x]] - masked_target).abs();
                            }
                        }
                    }
                    expect += valid[[ni, i]] * s / (3 * h * w) as f32 / n as f32;
                }
            }
            assert!(
                (loss - expect).abs() <= 1e-6,
                "case {case}: masked L1 {loss}, oracle {expect}"
            );
        }
    });
}

#[test]
fn a4_void_classes_are_filtered_exactly() {
    criterion(4, "void-class filtering", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
        let (c, nf, h, w) = (4, 6, 8, 8);
        for j in 0..c {
            let filtered: Vec<Tensor> = (0..c)
                .map(|_| {
                    Tensor::parameter(ArrayD::from_shape_fn(IxDyn(&[1, nf, h, w]), |_| {
                        rng.random_range(-1.0f32..1.0)
                    }))
                })
                .collect();
            let masks = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |_| {
                f32::from(rng.random_bool(0.5))
            }));
            let classifier = Classifier::new(&mut rng, nf, c);
            let pooled = semantic_avg_pool(&filtered, &masks);
            let logits = classifier.classify(&pooled);

            let mut valid = Array2::<f32>::ones((1, c));
            valid[[0, j]] = 0.0;
            let loss = classifier.loss(&logits, &valid);
            loss.backward();

            let grad = filtered[j].grad().expect("leaf participates in the graph");
            assert!(
                grad.iter().all(|&g| g == 0.0),
                "class {j}: absent class received a nonzero feature gradient"
            );
            let present = (j + 1) % c;
            let other = filtered[present].grad().expect("present class has a gradient");
            assert!(
                other.iter().any(|&g| g != 0.0),
                "class {present}: present class unexpectedly has an all-zero gradient"
            );
        }

        // Nothing labeled at all: the objective is exactly zero.
        let filtered: Vec<Tensor> = (0..c)
            .map(|_| {
                Tensor::parameter(ArrayD::from_shape_fn(IxDyn(&[1, nf, h, w]), |_| {
                    rng.random_range(-1.0f32..1.0)
                }))
            })
            .collect();
        let masks = Tensor::constant(ArrayD::zeros(IxDyn(&[1, c, h, w])));
        let classifier = Classifier::new(&mut rng, nf, c);
        let logits = classifier.classify(&semantic_avg_pool(&filtered, &masks));
        let loss = classifier.loss(&logits, &Array2::<f32>::zeros((1, c)));
        assert_eq!(loss.item(), 0.0, "all-void batch must produce a hard zero loss");
    });
}

#[test]
fn a5_analytic_loss_values() {
    criterion(5, "analytic loss values", || {
        for c in [2usize, 3, 5, 7] {
            // One present class with uniform logits: the classifier is
            // maximally unsure, so its objective sits exactly at ln c.
            let logits = Tensor::constant(ArrayD::zeros(IxDyn(&[1, c, c])));
            let mut only_first = Array2::<f32>::zeros((1, c));
            only_first[[0, 0]] = 1.0;
            let valid = Tensor::constant(only_first.into_dyn());
            let ce = filtered_cross_entropy(&logits, &valid).item();
            assert!(
                (ce - (c as f32).ln()).abs() <= 1e-6,
                "uniform CE for c={c} is {ce}, expected ln {c}"
            );

            // With every class present the per-branch terms add up.
            let all = Tensor::constant(Array2::<f32>::ones((1, c)).into_dyn());
            let summed = filtered_cross_entropy(&logits, &all).item();
            assert!(
                (summed - c as f32 * (c as f32).ln()).abs() <= 1e-5,
                "all-branch CE for c={c} is {summed}, expected c·ln c"
            );
        }

        let ln2 = std::f32::consts::LN_2;
        let real = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let fake = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let per_d = d_loss(&real, &fake).item();
        assert!((per_d - ln2).abs() <= 1e-6, "indifferent D loss {per_d}, expected ln 2");

        // Cross-view runs score with two discriminators; the combined loss
        // at indifference is ln 2 per active discriminator.
        let both = d_loss(&real, &fake).item() + d_loss(&real, &fake).item();
        assert!((both - 2.0 * ln2).abs() <= 1e-6, "two indifferent Ds give {both}");
    });
}

#[test]
fn a6_ablation_matrix_trains_five_steps() {
    criterion(6, "ablation matrix S1–S5 × both modes", || {
        for mode in [Mode::Semantic, Mode::CrossView] {
            for setup in Setup::ALL {
                let config = small_config(setup, mode, 5);
                let dataset =
                    synth_dataset(config.seed, 4, config.c, config.image_h, config.image_w, mode);
                let mut trainer = build_trainer(&config);
                let records = run_steps(&mut trainer, &dataset, 5).unwrap();
                assert_eq!(records.len(), 5);
                for r in &records {
                    let mut terms = vec![
                        ("d_semantic", r.d_semantic),
                        ("g_adv", r.g_adv),
                        ("l1_local", r.l1_local),
                        ("ce", r.ce),
                        ("l1_fused", r.l1_fused),
                        ("g_total", r.g_total),
                    ];
                    if let Some(di) = r.d_image {
                        terms.push(("d_image", di));
                    }
                    for (name, v) in terms {
                        assert!(
                            v.is_finite(),
                            "{setup:?}/{mode:?} step {}: {name} = {v}",
                            r.step
                        );
                    }
                    assert_eq!(r.d_image.is_some(), mode == Mode::CrossView);
                    if setup == Setup::S1 {
                        assert_eq!(r.l1_local, 0.0, "S1 must report a hard-zero local term");
                        assert_eq!(r.ce, 0.0, "S1 must report a hard-zero class term");
                    }
                }
            }
        }
    });
}

/// Mean |fused − target| over a dataset, in eval mode, sample by sample.
fn dataset_mean_l1(model: &LgGan, dataset: &[PairedSample]) -> f32 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for sample in dataset {
        let batch = Batch::from_samples(&[sample]);
        let out = model.generate(&batch, false).unwrap();
        let fused = out.fused.data();
        total += fused
            .iter()
            .zip(batch.target.iter())
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum::<f64>();
        count += fused.len();
    }
    (total / count as f64) as f32
}

#[test]
fn a7_overfit_gate() {
    criterion(7, "synthetic overfit", || {
        // Full default model (S5, semantic synthesis, default widths and
        // loss weights) on 16 held-fixed synthetic scenes.
        const GATE: f32 = 0.10;
        const MAX_STEPS: u64 = 2000;
        const CHECK_EVERY: u64 = 50;
        let config = ModelConfig { seed: 17, ..ModelConfig::default() };
        let dataset =
            synth_dataset(config.seed, 16, config.c, config.image_h, config.image_w, config.mode);
        let mut trainer = build_trainer(&config);

        let mut best = f32::INFINITY;
        let mut crossed_at = None;
        let mut done = 0;
        while done < MAX_STEPS {
            run_steps(&mut trainer, &dataset, CHECK_EVERY).unwrap();
            done += CHECK_EVERY;
            let l1 = dataset_mean_l1(&trainer.model, &dataset);
            best = best.min(l1);
            report(&format!("  overfit: step {done} mean-l1 {l1:.4}"));
            if l1 < GATE {
                crossed_at = Some(done);
                break;
            }
        }
        assert!(
            crossed_at.is_some(),
            "fused mean-L1 stayed at {best:.4} (> {GATE}) after {MAX_STEPS} steps"
        );
    });
}

#[test]
fn a8_determinism_and_resume() {
    criterion(8, "determinism & bit-exact resume", || {
        let config = small_config(Setup::S5, Mode::Semantic, 23);
        let dataset =
            synth_dataset(config.seed, 6, config.c, config.image_h, config.image_w, config.mode);

        let mut first = build_trainer(&config);
        let mut second = build_trainer(&config);
        let run_a = run_steps(&mut first, &dataset, 10).unwrap();
        let run_b = run_steps(&mut second, &dataset, 10).unwrap();
        assert_eq!(run_a, run_b, "same seed must give identical loss trajectories");

        let mut resumed = Trainer::from_checkpoint(&first.checkpoint()).unwrap();
        let next_original = run_steps(&mut first, &dataset, 1).unwrap();
        let next_resumed = run_steps(&mut resumed, &dataset, 1).unwrap();
        assert_eq!(
            next_original, next_resumed,
            "the step after a checkpoint round trip must be bit-identical"
        );
    });
}

#[test]
fn a9_inspection_artifacts() {
    criterion(9, "inspection artifacts", || {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig { c: 3, nf: 4, nf_d: 4, r: 1, seed: 9, ..small_config(Setup::S5, Mode::Semantic, 9) };
        let trainer = build_trainer(&config);
        let ckpt_path = dir.path().join("fresh.bin");
        trainer.checkpoint().save(&ckpt_path).unwrap();

        let out = dir.path().join("inspect");
        cmd_inspect(&InspectArgs {
            ckpt: ckpt_path,
            index: 0,
            out: Some(out.clone()),
            data: None,
            void_id: 255,
            channels: 4,
        })
        .unwrap();

        // Exactly c per-class images, two weight maps, three composites.
        let names: Vec<String> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
        assert_eq!(count("class-"), config.c);
        assert_eq!(count("weight-"), 2);
        for composite in ["global.png", "local.png", "fused.png"] {
            assert!(names.iter().any(|n| n == composite), "missing {composite}");
        }

        // Per-class images are black outside their masks.
        let sample = synth_dataset(
            config.seed,
            1,
            config.c,
            config.image_h,
            config.image_w,
            config.mode,
        )
        .pop()
        .unwrap();
        let onehot = one_hot(&sample.semantic);
        for i in 0..config.c {
            let img = image::open(out.join(format!("class-{i:02}.png"))).unwrap().to_rgb8();
            for (x, y, px) in img.enumerate_pixels() {
                if onehot[[i, y as usize, x as usize]] == 0.0 {
                    assert_eq!(
                        px.0,
                        [0, 0, 0],
                        "class {i}: pixel ({x},{y}) outside the mask is not black"
                    );
                }
            }
        }

        // Quantized weight maps partition 255 within ±1 everywhere.
        let wg = image::open(out.join("weight-global.png")).unwrap().to_luma8();
        let wl = image::open(out.join("weight-local.png")).unwrap().to_luma8();
        for (g, l) in wg.pixels().zip(wl.pixels()) {
            let sum = g.0[0] as i32 + l.0[0] as i32;
            assert!((254..=256).contains(&sum), "weight maps sum to {sum}");
        }
    });
}
