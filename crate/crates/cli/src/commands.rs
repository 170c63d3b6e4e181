use crate::error::{io_error, CliError};
use crate::manifest::{beside, RunManifest, MANIFEST_FILE};
use crate::Cmd;
use molscale_core::diffcore::gradcheck::{run_primitive_suite, PRIMITIVE_TOLERANCE};
use molscale_core::diffcore::OpKind;
use molscale_core::model::gradcheck::{check_config, END_TO_END_TOLERANCE};
use molscale_core::model::{
    make_noised_sample, Batch, Checkpoint, LossBundle, Model, ModelConfig, NoiseConfig,
};
use molscale_core::molgraph::synthetic::random_dataset;
use molscale_core::molgraph::{read_dataset, write_dataset, MolecularGraph};
use molscale_core::sampler::{build_plan, plan_batches, sample_molecules, ScaffoldTable};
use molscale_core::scaling::{
    evaluate, fit, fit_metrics, observations_from_log, read_fit, write_fit, write_predictions,
    FitOptions,
};
use molscale_core::trainer::{
    list_checkpoints, read_loss_log, stream_seed, train, RunConfig, TrainOptions, LOSS_LOG_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

pub fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Synth {
            count,
            scaffolds,
            min_atoms,
            max_atoms,
            seed,
            out,
            table,
        } => synth(count, scaffolds, (min_atoms, max_atoms), seed, &out, table),
        Cmd::Sample {
            scaffolds,
            tau,
            count,
            seed,
            out,
            plan,
        } => sample(&scaffolds, tau, count, seed, &out, plan.as_deref()),
        Cmd::Pretrain {
            config,
            data,
            out,
            resume,
        } => pretrain(&config, &data, &out, resume),
        Cmd::Validate {
            checkpoint,
            data,
            config,
            seed,
            sigma,
            mask_rate,
            token_budget,
            manifest,
        } => {
            let noise = NoiseConfig {
                mask_rate,
                sigma,
                ..NoiseConfig::default()
            };
            validate(
                &checkpoint,
                &data,
                config.as_deref(),
                seed,
                noise,
                token_budget,
                manifest,
            )
        }
        Cmd::FitScaling {
            logs,
            params_millions,
            min_step,
            stride,
            out,
            predictions,
        } => fit_scaling(
            &logs,
            &params_millions,
            FitOptions { min_step, stride },
            &out,
            predictions,
        ),
        Cmd::PredictLoss {
            fit,
            params_millions,
            steps,
            manifest,
        } => predict_loss(&fit, params_millions, steps, manifest),
        Cmd::Metrics {
            pred,
            actual,
            window,
            manifest,
        } => metrics(&pred, &actual, window, manifest),
        Cmd::Gradcheck {
            preset,
            samples,
            seed,
            corrupt_op,
            manifest,
        } => gradcheck(&preset, samples, seed, corrupt_op.as_deref(), manifest),
    }
}

fn load_dataset(path: &Path) -> Result<Vec<MolecularGraph>, CliError> {
    Ok(read_dataset(path)?.collect::<Result<Vec<_>, _>>()?)
}

fn finish_optional(manifest: RunManifest, path: Option<PathBuf>) -> Result<(), CliError> {
    match path {
        Some(p) => manifest.finish(&p),
        None => Ok(()),
    }
}

fn synth(
    count: usize,
    scaffolds: usize,
    (min_atoms, max_atoms): (usize, usize),
    seed: u64,
    out: &Path,
    table: Option<PathBuf>,
) -> Result<(), CliError> {
    if min_atoms == 0 || min_atoms > max_atoms {
        return Err(CliError::Input(format!(
            "need 0 < min_atoms <= max_atoms, got {min_atoms} and {max_atoms}"
        )));
    }
    let mut manifest = RunManifest::start(
        "synth",
        json!({ "count": count, "scaffolds": scaffolds, "min_atoms": min_atoms, "max_atoms": max_atoms }),
        Some(seed),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols = random_dataset(&mut rng, count, scaffolds, min_atoms, max_atoms);
    write_dataset(&mols, out)?;
    let table_path = table.unwrap_or_else(|| out.with_extension("tsv"));
    fs::write(&table_path, ScaffoldTable::from_molecules(&mols).to_tsv())
        .map_err(|e| io_error(&table_path, e))?;
    manifest.outputs = vec![out.to_path_buf(), table_path];
    manifest.finish(&beside(out))
}

fn sample(
    scaffolds: &Path,
    tau: f64,
    count: usize,
    seed: u64,
    out: &Path,
    plan_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut manifest =
        RunManifest::start("sample", json!({ "tau": tau, "count": count }), Some(seed));
    let table = ScaffoldTable::read_tsv(scaffolds)?;
    let plan = build_plan(&table, tau, seed)?;
    let ids = sample_molecules(&plan, &table, count)?;
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(out, text).map_err(|e| io_error(out, e))?;
    manifest.outputs.push(out.to_path_buf());
    if let Some(p) = plan_out {
        fs::write(p, plan.to_json(&table) + "\n").map_err(|e| io_error(p, e))?;
        manifest.outputs.push(p.to_path_buf());
    }
    manifest.finish(&beside(out))
}

fn pretrain(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| io_error(config, e))?;
    let run = RunConfig::parse(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", config.display())))?;
    let mut manifest = RunManifest::start(
        "pretrain",
        serde_json::to_value(&run).expect("config serialises"),
        Some(run.train.seed),
    );
    let dataset = load_dataset(data)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let opts = TrainOptions {
        run_dir: Some(out.to_path_buf()),
        resume,
        ..TrainOptions::default()
    };
    let outcome = train(&run.model, &run.train, &dataset, &opts)?;
    if outcome.log.is_empty() && outcome.start_step >= run.train.total_steps {
        eprintln!(
            "run already finished at step {}; nothing to do",
            outcome.start_step
        );
    } else if let Some(last) = outcome.log.last() {
        eprintln!(
            "steps {}..={}: final loss_total {:.4} (atom {:.4}, coor {:.4}, distance {:.4})",
            outcome.start_step + 1,
            outcome.final_step,
            last.loss_total,
            last.loss_atom,
            last.loss_coor,
            last.loss_distance
        );
    }
    manifest.outputs.push(out.join(LOSS_LOG_FILE));
    manifest
        .outputs
        .extend(list_checkpoints(out)?.into_iter().map(|(_, p)| p));
    manifest.finish(&out.join(MANIFEST_FILE))
}

fn validate(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    seed: u64,
    noise: NoiseConfig,
    token_budget: usize,
    manifest_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let run = RunConfig::parse(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if !same_shape(&run.model, &ckpt.config) {
            return Err(CliError::Input(format!(
                "{} does not match the dimensions in {}",
                checkpoint.display(),
                path.display()
            )));
        }
    }
    let manifest = RunManifest::start(
        "validate",
        json!({ "model": &ckpt.config, "sigma": noise.sigma, "mask_rate": noise.mask_rate, "token_budget": token_budget }),
        Some(seed),
    );
    let model = Model::<f32>::from_checkpoint(&ckpt)?;
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(CliError::InsufficientData(format!(
            "{} has no molecules",
            data.display()
        )));
    }
    let samples = dataset
        .iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, &m.mol_id));
            make_noised_sample(m, &mut rng, &noise)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let lengths: Vec<usize> = dataset.iter().map(MolecularGraph::num_atoms).collect();
    let budget = token_budget.max(lengths.iter().copied().max().unwrap_or(1));
    let plan = plan_batches(&lengths, budget, seed)?;
    let (mut atom, mut coor, mut dist) = (0.0, 0.0, 0.0);
    for members in &plan.batches {
        let picked: Vec<_> = members.iter().map(|&i| samples[i].clone()).collect();
        let b = model.evaluate(&Batch::<f32>::new(&picked))?;
        let w = members.len() as f64 / dataset.len() as f64;
        atom += w * b.loss_atom;
        coor += w * b.loss_coor;
        dist += w * b.loss_distance;
    }
    let bundle = LossBundle::new(atom, coor, dist);
    if !bundle.loss_total.is_finite() {
        return Err(CliError::Numerical(format!("non-finite loss {bundle:?}")));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&bundle).expect("bundle serialises")
    );
    finish_optional(manifest, manifest_path)
}

/// Everything except the learning rate, which does not shape the parameters.
fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig {
        learning_rate: b.learning_rate,
        batch_size: b.batch_size,
        ..a.clone()
    } == *b
}

fn fit_scaling(
    logs: &[PathBuf],
    params_millions: &[f64],
    opts: FitOptions,
    out: &Path,
    predictions: Option<PathBuf>,
) -> Result<(), CliError> {
    if logs.len() != params_millions.len() {
        return Err(CliError::Input(format!(
            "{} --logs but {} --params-millions values",
            logs.len(),
            params_millions.len()
        )));
    }
    let mut manifest = RunManifest::start(
        "fit-scaling",
        json!({ "logs": logs, "params_millions": params_millions, "min_step": opts.min_step, "stride": opts.stride }),
        None,
    );
    let mut observations = Vec::new();
    for (path, &m) in logs.iter().zip(params_millions) {
        observations.extend(observations_from_log(&read_loss_log(path)?, m)?);
    }
    let law = fit(&observations, &opts)?;
    write_fit(&law, out)?;
    let pred_path = predictions.unwrap_or_else(|| out.with_extension("predictions.csv"));
    let kept: Vec<_> = observations
        .into_iter()
        .filter(|o| o.s >= opts.min_step as f64)
        .collect();
    write_predictions(&law, &kept, &pred_path)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&law).expect("fit serialises")
    );
    manifest.outputs = vec![out.to_path_buf(), pred_path];
    manifest.finish(&beside(out))?;
    if !law.converged {
        return Err(CliError::Numerical(format!(
            "fit did not converge; best effort written to {}",
            out.display()
        )));
    }
    if !law.is_decreasing() {
        eprintln!("warning: fitted exponents are not all negative");
    }
    Ok(())
}

fn predict_loss(
    fit_path: &Path,
    m: f64,
    steps: f64,
    manifest_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let manifest = RunManifest::start(
        "predict-loss",
        json!({ "fit": fit_path, "m": m, "steps": steps }),
        None,
    );
    let law = read_fit(fit_path)?;
    println!("{}", evaluate(&law, m, steps)?);
    finish_optional(manifest, manifest_path)
}

fn read_values(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|_| {
                CliError::Input(format!("{}:{}: not a number: {l:?}", path.display(), i + 1))
            })
        })
        .collect()
}

fn metrics(
    pred: &Path,
    actual: &Path,
    window: Option<usize>,
    manifest_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let manifest = RunManifest::start(
        "metrics",
        json!({ "pred": pred, "actual": actual, "window": window }),
        None,
    );
    let (p, a) = (read_values(pred)?, read_values(actual)?);
    if p.len() != a.len() {
        return Err(CliError::Input(format!(
            "{} has {} values, {} has {}",
            pred.display(),
            p.len(),
            actual.display(),
            a.len()
        )));
    }
    let from = window.map_or(0, |w| p.len().saturating_sub(w));
    let m = fit_metrics(&p[from..], &a[from..])?;
    println!(
        "{}",
        serde_json::to_string_pretty(&m).expect("metrics serialise")
    );
    finish_optional(manifest, manifest_path)
}

fn gradcheck(
    preset: &str,
    samples: usize,
    seed: u64,
    corrupt: Option<&str>,
    manifest_path: Option<PathBuf>,
) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Input("--samples must be at least 1".into()));
    }
    let config = ModelConfig::preset(preset)?;
    let corrupt = corrupt
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| CliError::Input(format!("unknown op {name:?}")))
        })
        .transpose()?;
    let manifest = RunManifest::start(
        "gradcheck",
        json!({ "preset": preset, "samples": samples, "corrupt_op": corrupt.map(OpKind::name) }),
        Some(seed),
    );

    let mut failed_ops: Vec<&str> = Vec::new();
    let reports =
        run_primitive_suite(seed, corrupt).map_err(|e| CliError::Numerical(e.to_string()))?;
    for r in &reports {
        let ok = r.passed(PRIMITIVE_TOLERANCE);
        println!(
            "{} primitive {:<14} {:<28} max_rel_err {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            r.kind.name(),
            r.label,
            r.max_rel_err
        );
        if !ok && !failed_ops.contains(&r.kind.name()) {
            failed_ops.push(r.kind.name());
        }
    }
    let checks = check_config(&config, samples, seed, corrupt)?;
    let mut failed_params = 0;
    for c in &checks {
        let ok = c.rel_err < END_TO_END_TOLERANCE;
        failed_params += usize::from(!ok);
        println!(
            "{} param {}[{}] analytic {:.6e} numeric {:.6e} rel_err {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.index,
            c.analytic,
            c.numeric,
            c.rel_err
        );
    }
    finish_optional(manifest, manifest_path)?;
    if failed_ops.is_empty() && failed_params == 0 {
        println!(
            "all {} primitive and {} parameter checks passed",
            reports.len(),
            checks.len()
        );
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: ops [{}], {failed_params} of {} parameter checks",
            failed_ops.join(", "),
            checks.len()
        )))
    }
}
