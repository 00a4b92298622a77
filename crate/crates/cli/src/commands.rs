//! Command implementations. Each returns a `CoreError` whose class the
//! binary maps onto the exit-code contract: config errors exit 1, I/O and
//! generation failures exit 2, divergence and failed checks exit 3.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use lacuna_core::error::{CoreError, Result};
use lacuna_core::evalkit::{self, EvalReport, Region};
use lacuna_core::io;
use lacuna_core::masks::coverage_diagnostic;
use lacuna_core::pdegen;
use lacuna_core::sampling::{multi_step_impute, single_step_impute, NetDenoiser};
use lacuna_core::schedule::NoiseSchedule;
use lacuna_core::training::{self, TrainConfig};

use crate::config::{RunConfig, SampleMethod};
use crate::suites::{self, SuiteOutcome};

fn section_err(command: &str, section: &str) -> CoreError {
    CoreError::config(format!("{command} needs a `{section}` section in the config"))
}

/// Every output embeds this digest so results can be traced back to the
/// exact configuration and inputs that produced them.
fn run_fingerprint<M: Serialize>(
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    manifest: &M,
) -> Result<String> {
    evalkit::fingerprint(&json!({ "command": command, "config": cfg, "seed": seed }), manifest)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    Ok(fs::write(path, serde_json::to_vec_pretty(value)?)?)
}

fn truth_name(i: usize) -> String {
    format!("sample_{i:04}.truth")
}

fn imputed_name(i: usize) -> String {
    format!("imputed_{i:04}.field")
}

pub fn gen_data(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut data = cfg.data.clone().ok_or_else(|| section_err("gen-data", "data"))?;
    let mask_spec = cfg.masks.ok_or_else(|| section_err("gen-data", "masks"))?;
    if let Some(s) = seed {
        data.seed = s;
    }
    log::info!(
        "generating {} {} samples on grid {:?}",
        data.n_samples,
        data.system.system_name(),
        data.grid
    );
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let set = pdegen::generate::<f64, _>(&data, &mut rng)?;
    let dataset = pdegen::build_incomplete_dataset(&set, &mask_spec, &mut rng)?;

    let dir = out.join("dataset");
    let manifest = io::write_dataset(&dir, &dataset.samples, &dataset.manifest)?;
    for (i, field) in set.fields.iter().enumerate() {
        io::write_field(&dir.join(truth_name(i)), field)?;
    }

    let observed: usize = dataset.samples.iter().map(|s| s.mask.count_ones()).sum();
    let total: usize = dataset.samples.iter().map(|s| s.mask.numel()).sum();
    let frac = observed as f64 / total as f64;
    let fingerprint = run_fingerprint("gen-data", cfg, data.seed, &manifest)?;
    write_json(
        &out.join("gen_meta.json"),
        &json!({
            "command": "gen-data",
            "fingerprint": fingerprint,
            "seed": data.seed,
            "n_samples": manifest.files.len(),
            "shape": manifest.shape,
            "observed_fraction": frac,
        }),
    )?;
    println!(
        "generated {} samples of shape {:?} (observed fraction {:.4}) -> {}",
        manifest.files.len(),
        manifest.shape,
        frac,
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let section = cfg.train.clone().ok_or_else(|| section_err("train", "train"))?;
    let model = cfg.model.ok_or_else(|| section_err("train", "model"))?;
    let partition = cfg.partition.ok_or_else(|| section_err("train", "partition"))?;

    let (samples, manifest) = io::read_dataset::<f64>(&section.dataset)?;
    let normalized: Vec<_> = samples
        .iter()
        .map(|s| evalkit::normalize_sample(s, &manifest.normalization))
        .collect::<Result<_>>()?;

    let train_cfg = TrainConfig {
        denoiser: model,
        partition,
        batch_size: section.batch_size,
        steps: section.steps,
        learning_rate: section.learning_rate,
        adam_betas: section.adam_betas,
        seed,
        determinism: true,
        checkpoint_every: section.checkpoint_every,
    };
    let schedule = NoiseSchedule::cosine_vp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    log::info!("training for {} steps on {} samples", train_cfg.steps, normalized.len());
    let result = training::fit_with_checkpoints(
        &normalized,
        &train_cfg,
        &schedule,
        &mut rng,
        |step, params| {
            if step == train_cfg.steps {
                return Ok(()); // the final state is written once below
            }
            log::debug!("checkpoint at step {step}");
            io::write_checkpoint(
                &out.join(format!("checkpoint_step_{step:06}.lckp")),
                params,
                &schedule,
            )
        },
    )?;
    io::write_checkpoint(&out.join("checkpoint.lckp"), &result.params, &schedule)?;

    // wallclock is omitted so reruns are byte-identical
    let mut csv = String::from("step,loss,lr\n");
    for row in &result.metric_log {
        csv.push_str(&format!("{},{:.17e},{}\n", row.step, row.loss, row.lr));
    }
    fs::write(out.join("metrics.csv"), csv)?;

    let final_loss = result.metric_log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let fingerprint = run_fingerprint("train", cfg, seed, &manifest)?;
    write_json(
        &out.join("train_meta.json"),
        &json!({
            "command": "train",
            "fingerprint": fingerprint,
            "seed": seed,
            "steps": train_cfg.steps,
            "final_loss": final_loss,
            "normalized_inputs": true,
        }),
    )?;
    println!(
        "trained {} steps (final loss {:.6e}) -> {}",
        train_cfg.steps,
        final_loss,
        out.join("checkpoint.lckp").display()
    );
    Ok(())
}

pub fn impute(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let section = cfg.sample.clone().ok_or_else(|| section_err("impute", "sample"))?;
    let partition = cfg.partition.ok_or_else(|| section_err("impute", "partition"))?;

    let checkpoint = io::read_checkpoint::<f64>(&section.checkpoint)?;
    let (samples, manifest) = io::read_dataset::<f64>(&section.dataset)?;
    // the sampler redraws observation masks from the family the data used,
    // unless the config overrides it
    let mask_spec = cfg.masks.unwrap_or(manifest.mask_spec);
    let sampler = section.sampler(seed);
    sampler.validate()?;
    let model = NetDenoiser::new(&checkpoint.params);
    let n = section.limit.unwrap_or(samples.len()).min(samples.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, sample) in samples.iter().take(n).enumerate() {
        let normed = evalkit::normalize_sample(sample, &manifest.normalization)?;
        let imputed = match section.method {
            SampleMethod::MultiStep => multi_step_impute(
                &model,
                &normed.x_obs,
                &normed.mask,
                &mask_spec,
                &partition,
                &sampler,
                &checkpoint.schedule,
                &mut rng,
            )?,
            SampleMethod::SingleStep => single_step_impute(
                &model,
                &normed.x_obs,
                &normed.mask,
                &partition,
                &sampler,
                &checkpoint.schedule,
                &mut rng,
            )?,
        };
        let physical = evalkit::denormalize_field(&imputed, &manifest.normalization)?;
        // observed entries come back bit-exact, not through the round trip
        let spliced = sample.mask.select(&sample.x_obs, &physical)?;
        io::write_field(&out.join(imputed_name(i)), &spliced)?;
        log::debug!("imputed sample {i}");
    }

    let fingerprint = run_fingerprint("impute", cfg, seed, &manifest)?;
    write_json(
        &out.join("impute_meta.json"),
        &json!({
            "command": "impute",
            "fingerprint": fingerprint,
            "k": sampler.k,
            "seed": seed,
            "steps": sampler.steps,
            "delta": sampler.delta,
            "omega": section.omega,
            "method": section.method,
            "n_imputed": n,
        }),
    )?;
    println!("imputed {n} samples (K = {}) -> {}", sampler.k, out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let section = cfg.eval.clone().ok_or_else(|| section_err("eval", "eval"))?;
    let (samples, manifest) = io::read_dataset::<f64>(&section.dataset)?;

    let mut values = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let path = section.imputed.join(imputed_name(i));
        if i > 0 && !path.exists() {
            break; // impute ran with a limit; score the prefix it produced
        }
        let imputed = io::read_field::<f64>(&path)?;
        let truth = io::read_field::<f64>(&section.dataset.join(truth_name(i)))?;
        values.push(evalkit::mse(&imputed, &truth, &sample.mask, section.region)?);
    }

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let metric = match section.region {
        Region::Unobserved => "unobserved_mse",
        Region::All => "all_mse",
    };
    let report = EvalReport {
        metric: metric.into(),
        values,
        mean,
        std,
        fingerprint: run_fingerprint("eval", cfg, seed, &manifest)?,
    };
    fs::write(out.join("report.csv"), report.to_csv())?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{metric} over {} samples: mean {:.6e} (std {:.6e}) -> {}",
        report.values.len(),
        report.mean,
        report.std,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Thm1,
    Thm2,
    Lemma1,
    Masks,
    All,
}

impl Suite {
    fn runs(
        self,
    ) -> Vec<(&'static str, fn(&RunConfig, u64) -> Result<SuiteOutcome>)> {
        let thm1: (&str, fn(&RunConfig, u64) -> Result<SuiteOutcome>) =
            ("thm1", suites::training_identities);
        let thm2: (&str, fn(&RunConfig, u64) -> Result<SuiteOutcome>) =
            ("thm2", suites::posterior_identities);
        let lemma1: (&str, fn(&RunConfig, u64) -> Result<SuiteOutcome>) =
            ("lemma1", suites::pointwise_optimum);
        let masks: (&str, fn(&RunConfig, u64) -> Result<SuiteOutcome>) =
            ("masks", suites::mask_coverage);
        match self {
            Suite::Thm1 => vec![thm1],
            Suite::Thm2 => vec![thm2],
            Suite::Lemma1 => vec![lemma1],
            Suite::Masks => vec![masks],
            Suite::All => vec![thm1, thm2, lemma1, masks],
        }
    }
}

/// Runs the requested suites and prints the table; returns whether every
/// check passed.
pub fn verify(cfg: &RunConfig, out: &Path, seed: u64, suite: Suite) -> Result<bool> {
    let mut results: Vec<(&'static str, SuiteOutcome)> = Vec::new();
    for (name, run) in suite.runs() {
        log::info!("running verify suite `{name}`");
        results.push((name, run(cfg, seed)?));
    }

    println!(
        "{:<8} {:<28} {:>13} {:>13} {:>11}  result",
        "suite", "check", "statistic", "expected", "tolerance"
    );
    println!("{}", "-".repeat(86));
    let mut all_pass = true;
    for (name, outcome) in &results {
        for r in &outcome.rows {
            all_pass &= r.pass;
            println!(
                "{:<8} {:<28} {:>13.4e} {:>13.4e} {:>11.2e}  {}",
                name,
                r.check,
                r.statistic,
                r.expected,
                r.tolerance,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        for note in &outcome.notes {
            println!("         {note}");
        }
    }
    println!("{}", if all_pass { "all checks passed" } else { "some checks FAILED" });

    let fingerprint = run_fingerprint(
        "verify",
        cfg,
        seed,
        &json!({ "suites": results.iter().map(|(n, _)| *n).collect::<Vec<_>>() }),
    )?;
    let rows: Vec<_> = results
        .iter()
        .flat_map(|(name, o)| o.rows.iter().map(move |r| json!({ "suite": name, "row": r })))
        .collect();
    write_json(
        &out.join("verify_report.json"),
        &json!({
            "command": "verify",
            "fingerprint": fingerprint,
            "seed": seed,
            "all_pass": all_pass,
            "rows": rows,
        }),
    )?;
    Ok(all_pass)
}

pub fn diag_masks(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let (mask_spec, part, shape) = suites::coverage_inputs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7434);
    let report = coverage_diagnostic(&mask_spec, &part, &shape, 2_000, &mut rng)?;

    let fingerprint = run_fingerprint("diag-masks", cfg, seed, &json!({ "shape": shape }))?;
    write_json(
        &out.join("coverage.json"),
        &json!({
            "command": "diag-masks",
            "fingerprint": fingerprint,
            "seed": seed,
            "shape": shape,
            "report": report,
        }),
    )?;
    println!(
        "query coverage over shape {:?}: min {:.4}, max {:.4}, {} zero dims ({} trials)",
        shape,
        report.min_prob,
        report.max_prob,
        report.zero_dims.len(),
        report.n_samples
    );
    if let Some(u) = report.uniformity {
        println!("max/min ratio over nonzero estimates: {u:.2}");
    }
    if !report.zero_dims.is_empty() {
        println!("zero-probability dims: {}", suites::preview(&report.zero_dims));
    }
    Ok(())
}
