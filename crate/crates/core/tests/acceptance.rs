//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{desk_config, desk_data, desk_samples, encode};
use monoview::consistency::{blend, confidence_maps, ConsistencyParams};
use monoview::datapipe::TrainingData;
use monoview::gradcheck::{
    confidence_gradient_check, phase1_gradient_check, phase2_gradient_check, phase3_gradient_check,
    warp_gradient_check_seeded,
};
use monoview::metrics::{gaussian_taps, psnr_levels, ssim_levels, Levels, PEAK};
use monoview::netdef::{
    build_model, cbm_table, disparity_estimator_table, feature_extractor_table, refiner_table,
    ModelGraph,
};
use monoview::synth::{interpolate_tensor, synthesize_tensor};
use monoview::tensor::{Shape, Tensor};
use monoview::trainer::{PhaseRun, Schedule, TrainConfig, Trainer, LOG_FILE};
use monoview::{count_parameters, warp, WarpDirection};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(lo..hi))
}

fn warp_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let shape = Shape::new(
            rng.gen_range(1..=3),
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
        );
        let img: Tensor<f32> = Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0));
        let zero = Tensor::zeros(Shape::new(1, shape.height, shape.width));
        for dir in [WarpDirection::LeftToRight, WarpDirection::RightToLeft] {
            let out = warp(&img, &zero, dir).map_err(|e| e.to_string())?;
            let max = out
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            ensure(max == 0.0, format!("max abs error {max} on {shape:?}"))?;
        }
    }
    Ok("100 images, both directions, max abs error 0".into())
}

fn gradient_checks() -> Outcome {
    let (h, tol) = (1e-5, 1e-4);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        for r in [
            warp_gradient_check_seeded(h, tol, seed),
            confidence_gradient_check(h, tol, seed),
            phase1_gradient_check(h, tol, seed),
            phase2_gradient_check(h, tol, seed),
            phase3_gradient_check(h, tol, seed),
        ] {
            worst = worst.max(r.map_err(|e| e.to_string())?.max_rel_error);
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), format!("took {t:?}"))?;
    Ok(format!("max relative error {worst:.2e} in {t:.2?}"))
}

/// Scalar linear sample with border clamp, written independently of the library.
fn sample_row(row: &[f64], pos: f64) -> f64 {
    let p = pos.clamp(0.0, (row.len() - 1) as f64);
    let i = p.floor() as usize;
    let j = (i + 1).min(row.len() - 1);
    let f = p - i as f64;
    row[i] * (1.0 - f) + row[j] * f
}

fn confidence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ConsistencyParams::default();
    let gamma = params.gamma();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let shape = Shape::new(1, 8, 8);
        let d_lr = random_tensor(&mut rng, shape, 0.0, 4.0);
        let d_rl = random_tensor(&mut rng, shape, 0.0, 4.0);
        let (c_lr, c_rl) = confidence_maps(&d_lr, &d_rl, params).map_err(|e| e.to_string())?;
        for y in 0..8 {
            let (a, b) = (d_lr.row(0, y), d_rl.row(0, y));
            for x in 0..8 {
                let r_lr = a[x] - sample_row(b, x as f64 + a[x]);
                let r_rl = b[x] - sample_row(a, x as f64 - b[x]);
                worst = worst
                    .max((c_lr.get(0, y, x) - (-gamma * r_lr.abs()).exp()).abs())
                    .max((c_rl.get(0, y, x) - (-gamma * r_rl.abs()).exp()).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    for k in [0.0, 0.37, 1.3, 2.71, 7.75] {
        let d = Tensor::filled(Shape::new(1, 8, 8), k);
        let (a, b) = confidence_maps(&d, &d, params).map_err(|e| e.to_string())?;
        ensure(
            a.data().iter().chain(b.data()).all(|&c| c == 1.0),
            format!("constant disparity {k} does not give C = 1"),
        )?;
    }
    Ok(format!(
        "50 instances, max deviation {worst:.1e}; constant disparities give C = 1"
    ))
}

fn blend_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Shape::new(3, 16, 16);
    let dbp: Tensor<f32> = Tensor::from_fn(img, |_, _, _| rng.gen_range(-1.0..1.0));
    let refined: Tensor<f32> = Tensor::from_fn(img, |_, _, _| rng.gen_range(-1.0..1.0));
    let zeros = Tensor::zeros(Shape::new(1, 16, 16));
    let ones = Tensor::filled(Shape::new(1, 16, 16), 1.0);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let at0 = blend(&dbp, &refined, &zeros).map_err(|e| e.to_string())?;
    let at1 = blend(&dbp, &refined, &ones).map_err(|e| e.to_string())?;
    ensure(bits(&at0) == bits(&dbp), "v = 0 differs from DBP")?;
    ensure(bits(&at1) == bits(&refined), "v = 1 differs from REF")?;
    Ok("v = 0 gives DBP, v = 1 gives REF, bit for bit".into())
}

fn architecture_audit() -> Outcome {
    let tables = [
        (
            "feature extractor",
            encode(&feature_extractor_table()),
            common::golden_encoder(),
        ),
        (
            "disparity estimator",
            encode(&disparity_estimator_table()),
            common::golden_decoder(),
        ),
        (
            "refiner",
            encode(&refiner_table()),
            common::golden_refiner(),
        ),
        ("merger", encode(&cbm_table()), common::golden_cbm()),
    ];
    for (name, got, want) in &tables {
        ensure(
            got.len() == want.len(),
            format!("{name}: {} rows, expected {}", got.len(), want.len()),
        )?;
        for (g, w) in got.iter().zip(want) {
            ensure(g == w, format!("{name}: row `{g}` expected `{w}`"))?;
        }
    }
    let graph = build_model(0, None).map_err(|e| e.to_string())?;
    let input = Tensor::from_fn(Shape::new(3, 256, 256), |c, y, x| {
        ((c * 11 + y * 5 + x * 3) % 29) as f32 / 14.5 - 1.0
    });
    let d = graph
        .predict_disparity(&input, WarpDirection::LeftToRight)
        .map_err(|e| e.to_string())?;
    ensure(
        d.shape() == Shape::new(1, 256, 256),
        format!("disparity shape {:?}", d.shape()),
    )?;
    let total = count_parameters(&graph);
    let dbp = graph.dbp_parameter_count();
    ensure(total < 7_000_000, format!("total {total}"))?;
    ensure((5_000_000..=7_000_000).contains(&dbp), format!("DBP {dbp}"))?;
    Ok(format!(
        "{} rows match; total {total}, DBP {dbp}",
        tables.iter().map(|t| t.1.len()).sum::<usize>()
    ))
}

fn freeze_contract() -> Outcome {
    let err = |e: monoview::Error| e.to_string();
    let mut t = Trainer::new(build_model(5, None).map_err(err)?, desk_config(1)).map_err(err)?;
    t.train_phase(PhaseRun::I, &desk_data(), 1).map_err(err)?;
    let before = t.graph.params.clone();
    t.cfg.max_epochs = Some(5);
    let out = t.train_phase(PhaseRun::III, &desk_data(), 2).map_err(err)?;
    ensure(out.epochs == 5, format!("ran {} epochs", out.epochs))?;
    let g = &t.graph;
    ensure(
        g.params.bit_equal_where(&before, |n| g.is_dbp_parameter(n)),
        "a DBP parameter changed",
    )?;
    for c in ["refiner_l", "refiner_r", "cbm_l", "cbm_r"] {
        let prefix = format!("{c}.");
        ensure(
            !g.params
                .bit_equal_where(&before, |n| n.starts_with(&prefix)),
            format!("{c} did not change"),
        )?;
    }
    Ok("5 phase-III epochs: DBP bit-identical, refiners and mergers updated".into())
}

fn desk_overfit() -> Outcome {
    let err = |e: monoview::Error| e.to_string();
    let start = Instant::now();
    let cfg = TrainConfig {
        adam: monoview::optim::AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        batch_size: 2,
        patch: (64, 64),
        max_steps: Some(200),
        lr_patience: 1000,
        stop_patience: 1000,
        augment_fraction: 0.0,
        seed: 3,
        ..Default::default()
    };
    let samples = desk_samples();
    let mut t = Trainer::new(build_model(3, None).map_err(err)?, cfg).map_err(err)?;
    let initial = t.evaluate(PhaseRun::I, &samples).map_err(err)?;
    let data = TrainingData::from_samples(samples.clone(), samples.clone());
    let out = t.train_phase(PhaseRun::I, &data, 3).map_err(err)?;
    let last = t.evaluate(PhaseRun::I, &samples).map_err(err)?;
    let took = start.elapsed();
    ensure(out.steps == 200, format!("ran {} steps", out.steps))?;
    ensure(
        last < 0.5 * initial,
        format!("loss {initial:.4} -> {last:.4}"),
    )?;
    ensure(took < Duration::from_secs(600), format!("took {took:?}"))?;
    Ok(format!(
        "loss {initial:.4} -> {last:.4} ({:.0}%) in {took:.1?}",
        100.0 * last / initial
    ))
}

fn ablation_plumbing() -> Outcome {
    let err = |e: monoview::Error| e.to_string();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut finals: Vec<(String, monoview::params::ParamStore, String)> = Vec::new();
    for schedule in Schedule::ablations() {
        let tag = schedule.tag();
        let dir = root.path().join(&tag);
        let mut t =
            Trainer::new(build_model(9, None).map_err(err)?, desk_config(2)).map_err(err)?;
        let ck = t
            .run_schedule(&schedule, &desk_data(), Some(&dir))
            .map_err(err)?;
        ensure(
            ck.meta.completed == schedule.0,
            format!("{tag}: completed {:?}", ck.meta.completed),
        )?;
        ensure(
            dir.join("final").join("meta.txt").exists(),
            format!("{tag}: no final checkpoint"),
        )?;
        let log = std::fs::read_to_string(dir.join(LOG_FILE)).map_err(|e| e.to_string())?;
        ensure(!log.is_empty(), format!("{tag}: empty log"))?;
        finals.push((tag, ck.params, log));
    }
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let (a, b) = (&finals[i], &finals[j]);
            ensure(
                !a.1.bit_equal(&b.1),
                format!("{} and {} have equal checkpoints", a.0, b.0),
            )?;
            ensure(a.2 != b.2, format!("{} and {} have equal logs", a.0, b.0))?;
        }
    }
    let tags: Vec<&str> = finals.iter().map(|f| f.0.as_str()).collect();
    Ok(format!(
        "{} runs with distinct checkpoints and logs",
        tags.join(", ")
    ))
}

fn interpolation_endpoints() -> Outcome {
    let err = |e: monoview::Error| e.to_string();
    let mut graph: ModelGraph = build_model(4, None).map_err(err)?;
    // a visible shift, so the two endpoints differ
    graph
        .params
        .get_mut("decoder_lr.l47.bias")
        .expect("bias")
        .data[0] = 2.5;
    let input = Tensor::from_fn(Shape::new(3, 50, 70), |c, y, x| {
        ((c * 7 + y * 3 + x * 5) % 17) as f32 / 8.5 - 1.0
    });
    let dir = WarpDirection::LeftToRight;
    let frames = interpolate_tensor(&graph, &input, dir, &[0.0, 0.5, 1.0]).map_err(err)?;
    let dbp = synthesize_tensor(&graph, &input, dir).map_err(err)?.dbp;
    ensure(frames[0].warped == input, "alpha 0 differs from the input")?;
    ensure(
        frames[2].warped == dbp,
        "alpha 1 differs from the DBP prediction",
    )?;
    ensure(dbp != input, "degenerate test: DBP equals the input")?;
    Ok("alpha 0 = input, alpha 1 = DBP, exactly".into())
}

/// Per-window SSIM written as direct loops over each 11×11 window.
fn ssim_loop_oracle(a: &Levels, b: &Levels) -> f64 {
    let g = gaussian_taps();
    let (c1, c2) = ((0.01 * PEAK).powi(2), (0.03 * PEAK).powi(2));
    let (h, w) = (a.height, a.width);
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..a.channels {
        let at = |l: &Levels, y: usize, x: usize| l.data[c * h * w + y * w + x];
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        mx += g[i] * g[j] * at(a, y0 + i, x0 + j);
                        my += g[i] * g[j] * at(b, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let (p, q) = (at(a, y0 + i, x0 + j) - mx, at(b, y0 + i, x0 + j) - my);
                        vx += g[i] * g[j] * p * p;
                        vy += g[i] * g[j] * q * q;
                        cov += g[i] * g[j] * p * q;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn metrics_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let levels = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| Levels {
        channels: 3,
        height: 16,
        width: 16,
        data: (0..3 * 256).map(|_| rng.gen_range(lo..hi) as f64).collect(),
    };
    let gt = levels(&mut rng, 0, 255);
    let off = Levels {
        data: gt.data.iter().map(|v| v + 1.0).collect(),
        ..gt.clone()
    };
    let p = psnr_levels(&off, &gt, None).map_err(|e| e.to_string())?;
    let expected = 20.0 * 255f64.log10();
    ensure(
        (p - expected).abs() <= 1e-6,
        format!("PSNR {p}, expected {expected}"),
    )?;
    let s = ssim_levels(&gt, &gt).map_err(|e| e.to_string())?;
    ensure(s == 1.0, format!("SSIM(self) = {s}"))?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let a = levels(&mut rng, 0, 256);
        let b = Levels {
            data: a
                .data
                .iter()
                .map(|v| {
                    (v + rng.gen_range(-40.0..40.0f64))
                        .clamp(0.0, 255.0)
                        .round()
                })
                .collect(),
            ..a.clone()
        };
        let got = ssim_levels(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - ssim_loop_oracle(&a, &b)).abs());
    }
    ensure(
        worst <= 1e-6,
        format!("SSIM deviates from loop oracle by {worst:e}"),
    )?;
    Ok(format!(
        "PSNR {p:.6} dB; SSIM(self) = 1; loop oracle deviation {worst:.1e}"
    ))
}

fn determinism() -> Outcome {
    let err = |e: monoview::Error| e.to_string();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut blobs = Vec::new();
    for run in 0..2 {
        let dir = root.path().join(format!("run{run}"));
        let mut t =
            Trainer::new(build_model(6, None).map_err(err)?, desk_config(2)).map_err(err)?;
        t.run_schedule(&Schedule::full(), &desk_data(), Some(&dir))
            .map_err(err)?;
        let read = |f: &str| std::fs::read(dir.join("final").join(f)).map_err(|e| e.to_string());
        blobs.push((
            read("model/weights.bin")?,
            read("optimizer/weights.bin")?,
            read("meta.txt")?,
        ));
    }
    ensure(blobs[0] == blobs[1], "final checkpoints differ")?;
    Ok(format!(
        "two {} runs, final checkpoints byte-identical",
        Schedule::full().tag()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("warp identity", warp_identity),
        ("gradient checks", gradient_checks),
        ("confidence oracle", confidence_oracle),
        ("blend exactness", blend_exactness),
        ("architecture audit", architecture_audit),
        ("freeze contract", freeze_contract),
        ("desk-scale overfit", desk_overfit),
        ("schedule ablation plumbing", ablation_plumbing),
        ("interpolation endpoints", interpolation_endpoints),
        ("metrics", metrics_checks),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
