//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use molscale_core::diffcore::gradcheck::{run_primitive_suite, PRIMITIVE_TOLERANCE};
use molscale_core::diffcore::{Graph, Real};
use molscale_core::model::gradcheck::{check_config, END_TO_END_TOLERANCE};
use molscale_core::model::{
    bundle, make_noised_sample, Batch, Model, ModelConfig, NoiseConfig, TOKEN_VOCAB,
};
use molscale_core::molgraph::synthetic::{random_dataset, random_molecule};
use molscale_core::sampler::{
    build_plan, plan_batches, MoleculeSampler, ScaffoldEntry, ScaffoldTable,
};
use molscale_core::scaling::{
    evaluate, fit, fit_metrics, FitOptions, ScalingLawFit, ScalingObservation,
};
use molscale_core::trainer::{
    checkpoint_path, list_checkpoints, train, LossLogRow, TrainConfig, TrainOptions,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn published() -> ScalingLawFit {
    ScalingLawFit::from_coefficients([2.660, 1.848, 0.588], [-1.137, -0.225, -1.479])
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    if took > budget {
        Err(format!("{detail}; took {took:.1?}, budget {budget:?}"))
    } else {
        Ok(format!("{detail}; {took:.1?}"))
    }
}

fn anchors() -> Outcome {
    let f = published();
    let mid = evaluate(&f, 570.0, 810_000.0).map_err(|e| e.to_string())?;
    let big = evaluate(&f, 1100.0, 810_000.0).map_err(|e| e.to_string())?;
    check(
        (mid - 0.088).abs() <= 1e-3 && (big - 0.0871).abs() <= 1e-3,
        format!("L(570, 810k) = {mid:.5} vs 0.088; L(1100, 810k) = {big:.5} vs 0.0871 (tol 1e-3)"),
    )
}

fn unit_convention() -> Outcome {
    let v = evaluate(&published(), 84.0, 810_000.0).map_err(|e| e.to_string())?;
    check(
        (v - 0.104).abs() <= 2e-3,
        format!("L(84, 810k) = {v:.5} vs 0.104 (tol 2e-3)"),
    )
}

fn planted_grid(noise: Option<(f64, u64)>) -> Vec<ScalingObservation> {
    let law = published();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.map_or(0, |n| n.1));
    let normal = Normal::new(0.0, noise.map_or(1.0, |n| n.0)).expect("positive sigma");
    let mut out = Vec::new();
    for m in [42.0, 84.0, 164.0, 310.0] {
        for s in (200_000..=800_000).step_by(10_000) {
            let mut loss = evaluate(&law, m, s as f64).expect("positive inputs");
            if noise.is_some() {
                loss += normal.sample(&mut rng);
            }
            out.push(ScalingObservation::new(m, s as f64, loss).expect("positive inputs"));
        }
    }
    out
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let want = evaluate(&published(), 1100.0, 810_000.0).map_err(|e| e.to_string())?;
    let clean = fit(&planted_grid(None), &FitOptions::default()).map_err(|e| e.to_string())?;
    let noisy = fit(&planted_grid(Some((1e-3, 2024))), &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let e_clean = (evaluate(&clean, 1100.0, 810_000.0).map_err(|e| e.to_string())? - want).abs();
    let e_noisy = (evaluate(&noisy, 1100.0, 810_000.0).map_err(|e| e.to_string())? - want).abs();
    let detail = format!("|error| at (1100, 810k): noiseless {e_clean:.2e} (tol 1e-3), sigma=1e-3 {e_noisy:.2e} (tol 3e-3)");
    if e_clean < 1e-3 && e_noisy < 3e-3 {
        within_budget(start, Duration::from_secs(60), detail)
    } else {
        Err(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let reports = run_primitive_suite(0, None).map_err(|e| e.to_string())?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty registry");
    let failing: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed(PRIMITIVE_TOLERANCE))
        .map(|r| r.kind.name())
        .collect();
    let checks = check_config(&ModelConfig::tiny(), 50, 0, None).map_err(|e| e.to_string())?;
    let e2e = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let detail = format!(
        "{} primitive cases, worst {:.2e} ({}) (tol 1e-4); end-to-end 50 params worst {e2e:.2e} (tol 1e-3)",
        reports.len(),
        worst.max_rel_err,
        worst.kind.name()
    );
    if failing.is_empty() && checks.len() == 50 && e2e < END_TO_END_TOLERANCE {
        within_budget(start, Duration::from_secs(300), detail)
    } else {
        Err(format!("{detail}; failing ops {failing:?}"))
    }
}

fn equivariance() -> Outcome {
    let start = Instant::now();
    let (mut perm_err, mut trans_err) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let mut model = Model::<f32>::init(ModelConfig::tiny(), seed).map_err(|e| e.to_string())?;
        let id = model
            .params
            .id("pos_head.fc2.weight")
            .expect("position head");
        for v in model.params.get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let mol = random_molecule(&mut rng, &format!("m{seed}"), "s", n);
        let s = make_noised_sample(&mol, &mut rng, &NoiseConfig::default())
            .map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let t = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];

        let g = Graph::new();
        let batches = [
            Batch::new(std::slice::from_ref(&s)),
            Batch::new(&[s.permuted(&perm)]),
            Batch::new(&[s.translated(t)]),
        ];
        let outs = batches
            .iter()
            .map(|b| model.forward(&g, b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let logits: Vec<Vec<f32>> = outs
            .iter()
            .map(|o| g.value(o.logits).data().to_vec())
            .collect();
        let coords: Vec<Vec<f32>> = outs
            .iter()
            .map(|o| g.value(o.coords).data().to_vec())
            .collect();
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..TOKEN_VOCAB {
                perm_err = perm_err.max(
                    (logits[1][k * TOKEN_VOCAB + c] - logits[0][p * TOKEN_VOCAB + c])
                        .abs()
                        .f64(),
                );
            }
            for a in 0..3 {
                perm_err = perm_err.max((coords[1][k * 3 + a] - coords[0][p * 3 + a]).abs().f64());
            }
        }
        for i in 0..n * 3 {
            trans_err = trans_err.max(
                (coords[2][i] - (coords[0][i] + t[i % 3] as f32))
                    .abs()
                    .f64(),
            );
        }
        let l0 = bundle(
            &g,
            &model
                .losses(&g, &batches[0], &outs[0])
                .map_err(|e| e.to_string())?,
        );
        let l1 = bundle(
            &g,
            &model
                .losses(&g, &batches[1], &outs[1])
                .map_err(|e| e.to_string())?,
        );
        perm_err = perm_err.max((l0.loss_total - l1.loss_total).abs());
    }
    let detail = format!("20 molecules: permutation max err {perm_err:.2e}, translation max err {trans_err:.2e} (tol 1e-5)");
    if perm_err < 1e-5 && trans_err < 1e-5 {
        within_budget(start, Duration::from_secs(60), detail)
    } else {
        Err(detail)
    }
}

fn mean(rows: &[LossLogRow], f: fn(&LossLogRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = random_dataset(&mut rng, 64, 8, 4, 12);
    let cfg = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 20,
        total_steps: 200,
        token_budget: 128,
        log_every: 1,
        ..TrainConfig::default()
    };
    let out = train(&ModelConfig::tiny(), &cfg, &data, &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    if out.log.len() != 200 {
        return Err(format!("expected 200 log rows, got {}", out.log.len()));
    }
    let (first, last) = (&out.log[..10], &out.log[190..]);
    let (t0, t1) = (mean(first, |r| r.loss_total), mean(last, |r| r.loss_total));
    let (a0, a1) = (mean(first, |r| r.loss_atom), mean(last, |r| r.loss_atom));
    let drop = 1.0 - t1 / t0;
    let detail = format!(
        "loss_total {t0:.3} -> {t1:.3} ({:.1}% drop, need >= 30%); loss_atom {a0:.3} -> {a1:.3}",
        100.0 * drop
    );
    if drop >= 0.30 && a1 < a0 {
        within_budget(start, Duration::from_secs(600), detail)
    } else {
        Err(detail)
    }
}

fn table(counts: &[usize]) -> Result<ScaffoldTable, String> {
    ScaffoldTable::new(
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ScaffoldEntry::new(
                    format!("s{i}"),
                    (0..c).map(|m| format!("s{i}m{m}")).collect(),
                )
            })
            .collect(),
    )
    .map_err(|e| e.to_string())
}

fn sampler_distribution() -> Outcome {
    let t = table(&[3, 1])?;
    let plan = build_plan(&t, 1.0, 17).map_err(|e| e.to_string())?;
    let mut sampler = MoleculeSampler::new(&plan, &t).map_err(|e| e.to_string())?;
    let draws = 100_000;
    let hits = (0..draws).filter(|_| sampler.draw().0 == 0).count();
    let freq = hits as f64 / draws as f64;
    let scaled = build_plan(&table(&[300, 100])?, 1.0, 17).map_err(|e| e.to_string())?;
    let rescale = plan
        .probs
        .iter()
        .zip(&scaled.probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        (freq - 0.6225).abs() <= 0.01 && rescale <= 1e-12,
        format!("scaffold-1 frequency {freq:.4} vs 0.6225 (tol 0.01); rescale max diff {rescale:.1e} (tol 1e-12)"),
    )
}

fn infrastructure() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = random_dataset(&mut rng, 24, 6, 4, 10);
    let base = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 5,
        token_budget: 64,
        log_every: 1,
        seed: 3,
        ..TrainConfig::default()
    };

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let retention = TrainConfig {
        total_steps: 100,
        checkpoint_every: 10,
        checkpoint_keep: 3,
        ..base.clone()
    };
    let opts = TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train(&ModelConfig::tiny(), &retention, &data, &opts).map_err(|e| e.to_string())?;
    let kept: Vec<u64> = list_checkpoints(dir.path())
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(s, _)| s)
        .collect();

    let resume_cfg = TrainConfig {
        total_steps: 100,
        checkpoint_every: 50,
        ..base.clone()
    };
    let full = train(
        &ModelConfig::tiny(),
        &resume_cfg,
        &data,
        &TrainOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let dir2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts2 = TrainOptions {
        run_dir: Some(dir2.path().to_path_buf()),
        ..TrainOptions::default()
    };
    // Resume a separate run from its step-50 checkpoint.
    train(&ModelConfig::tiny(), &resume_cfg, &data, &opts2).map_err(|e| e.to_string())?;
    let resumed = train(
        &ModelConfig::tiny(),
        &resume_cfg,
        &data,
        &TrainOptions {
            resume: Some(checkpoint_path(dir2.path(), 50)),
            ..opts2.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    let resume_err = full.log[50..]
        .iter()
        .zip(&resumed.log)
        .map(|(a, b)| {
            if a.step == b.step {
                (a.loss_total - b.loss_total).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let resume_ok = resumed.log.len() == 50 && resume_err <= 1e-6;

    let mut over = 0usize;
    let mut batches = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lengths: Vec<usize> = (0..rng.random_range(1..300))
            .map(|_| rng.random_range(1..=64))
            .collect();
        let budget = rng.random_range(64..=1024);
        let plan = plan_batches(&lengths, budget, seed).map_err(|e| e.to_string())?;
        for b in &plan.batches {
            batches += 1;
            let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            over += usize::from(b.len() * max > budget);
        }
    }
    let detail = format!(
        "retained {kept:?} (want [80, 90, 100]); resume from 50 max |diff| {resume_err:.1e} over {} rows (tol 1e-6); {over} of {batches} batches over budget",
        resumed.log.len()
    );
    if kept == [80, 90, 100] && resume_ok && over == 0 {
        within_budget(start, Duration::from_secs(120), detail)
    } else {
        Err(detail)
    }
}

fn metrics_oracle() -> Outcome {
    let hand = fit_metrics(&[2.0, 4.0], &[1.0, 2.0]).map_err(|e| e.to_string())?;
    let perfect = fit_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    let actual = [0.3, -1.2, 2.5, 0.9];
    let negated: Vec<f64> = actual.iter().map(|a| -a).collect();
    let anti = fit_metrics(&negated, &actual).map_err(|e| e.to_string())?;
    let ok = hand.mae == 1.5
        && hand.rmae == Some(1.0)
        && hand.mse == 2.5
        && perfect.mae == 0.0
        && perfect.mse == 0.0
        && perfect.rmae == Some(0.0)
        && perfect.r_squared == Some(1.0)
        && perfect.pearson == Some(1.0)
        && anti.pearson == Some(-1.0);
    check(
        ok,
        format!(
            "hand case mae {} rmae {:?} mse {}; perfect r2 {:?} pearson {:?}; negated pearson {:?}",
            hand.mae, hand.rmae, hand.mse, perfect.r_squared, perfect.pearson, anti.pearson
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("scaling-law anchors", anchors),
        ("unit convention", unit_convention),
        ("planted-coefficient recovery", planted_recovery),
        ("gradient integrity", gradient_integrity),
        ("equivariance", equivariance),
        ("training smoke test", training_smoke),
        ("sampler distribution", sampler_distribution),
        ("infrastructure contracts", infrastructure),
        ("metrics oracle", metrics_oracle),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("[{}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
