use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use wdsurv::checkpoint::Checkpoint;
use wdsurv::dataio::{
    load_dataset, load_manifest, load_manifest_with, save_synthetic_cohort, Dataset, Outcomes,
};
use wdsurv::experiment::{
    medians, predict_manifest, repeat_csv, run_repeats, run_search, run_split, RunConfig,
};
use wdsurv::metrics::concordance_index_fast;
use wdsurv::synth::{generate_cohort, CohortSpec};
use wdsurv::{Error, Result};

use crate::{Command, RunArgs};

pub const SEED_ENV: &str = "WDSURV_SEED";

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::InvalidArgument(format!("{SEED_ENV}='{v}' is not an unsigned integer"))
        }),
        Err(_) => Ok(None),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("json value");
    emit(out, &format!("{s}\n"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Loaded {
    config: RunConfig,
    data: Dataset,
    seed: u64,
}

fn load_run(args: &RunArgs) -> Result<Loaded> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if args.with_volume {
        config.features.include_volume = true;
    }
    let seed = seed_override()?.unwrap_or(config.train.rng_seed);
    config.train.rng_seed = seed;
    let manifest = load_manifest(&args.manifest)?;
    let data = load_dataset(&manifest, config.data.points_per_cloud, seed)?;
    log::info!(
        "loaded {} subjects from {}",
        data.len(),
        args.manifest.display()
    );
    Ok(Loaded { config, data, seed })
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Generate { spec, out_dir } => generate(spec.as_deref(), &out_dir, out),
        Command::Train {
            run,
            variant,
            checkpoint,
            report,
        } => {
            let Loaded { config, data, seed } = load_run(&run)?;
            let config = config.with_variant(variant);
            let result = run_split(&data, &config, seed)?;
            let ck = result.checkpoint(&config)?;
            ck.save(&checkpoint)?;
            let report_path = report.unwrap_or_else(|| {
                let mut p = checkpoint.clone().into_os_string();
                p.push(".epochs.csv");
                PathBuf::from(p)
            });
            write_file(&report_path, &result.report.epochs_csv())?;
            let mut summary = json!({
                "variant": variant,
                "with_volume": config.features.include_volume,
                "seed": seed,
                "n_train": result.split.train.len(),
                "n_val": result.split.val.len(),
                "n_test": result.split.test.len(),
                "epochs": config.train.epochs,
                "selected_epoch": result.report.selected_epoch,
                "best_val_c_index": result.report.best_val_c_index,
                "test_c_index": result.test.c_index,
                "test_comparable_pairs": result.test.num_comparable_pairs,
                "seconds": result.report.seconds,
                "checkpoint": checkpoint,
                "report": report_path,
            });
            if variant.has_wide() {
                let table: Vec<_> = ck
                    .coefficients()?
                    .into_iter()
                    .map(|(feature, coef)| json!({ "feature": feature, "coefficient": coef }))
                    .collect();
                summary["coefficients"] = json!(table);
            }
            if let Some(d) = result.decomposition()? {
                summary["decomposition"] = json!(d);
            }
            emit_json(out, &summary)
        }
        Command::Repeat {
            run,
            n_repeats,
            variants,
            out_dir,
        } => {
            let Loaded { config, data, seed } = load_run(&run)?;
            let n = n_repeats.unwrap_or(config.train.n_repeats);
            let rows = run_repeats(&data, &config, &variants, n, seed)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            write_file(&out_dir.join("repeats.csv"), &repeat_csv(&rows))?;
            let mut table = String::from("variant,median_test_c_index\n");
            for (v, m) in medians(&rows) {
                table.push_str(&format!("{v},{m}\n"));
            }
            write_file(&out_dir.join("medians.csv"), &table)?;
            emit(out, &table)
        }
        Command::Search { run, variant } => {
            let Loaded { config, data, seed } = load_run(&run)?;
            let result = run_search(&data, &config.with_variant(variant), seed)?;
            log::info!(
                "best candidate: {:?} (validation c-index {})",
                result.best_candidate(),
                result.rows[result.best].1
            );
            emit(out, &result.to_csv())
        }
        Command::Predict {
            checkpoint,
            manifest,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = load_manifest_with(&manifest, Outcomes::Optional)?;
            let seed = seed_override()?.unwrap_or(ck.train.rng_seed);
            let scores = predict_manifest(&ck, &m, seed)?;
            let mut table = String::from("subject_id,risk_score\n");
            for (row, s) in m.rows.iter().zip(&scores) {
                table.push_str(&format!("{},{}\n", row.raw.subject_id, s.total));
            }
            emit(out, &table)
        }
        Command::Evaluate {
            checkpoint,
            manifest,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = load_manifest(&manifest)?;
            let seed = seed_override()?.unwrap_or(ck.train.rng_seed);
            let scores: Vec<f64> = predict_manifest(&ck, &m, seed)?
                .iter()
                .map(|s| s.total)
                .collect();
            let records = m.records().expect("manifest loaded with outcomes");
            let r = concordance_index_fast(&scores, &records)?;
            emit_json(
                out,
                &json!({
                    "n_subjects": records.len(),
                    "c_index": r.c_index,
                    "comparable_pairs": r.num_comparable_pairs,
                    "concordant_pairs": r.num_concordant,
                    "tied_scores": r.num_tied_scores,
                }),
            )
        }
        Command::Coefficients { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut table = String::from("feature,coefficient\n");
            for (name, v) in ck.coefficients()? {
                table.push_str(&format!("{name},{v}\n"));
            }
            emit(out, &table)
        }
    }
}

fn generate(spec: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut spec = match spec {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<CohortSpec>(&s)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CohortSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        spec.rng_seed = seed;
    }
    spec.validate()?;
    let subjects = generate_cohort(&spec)?;
    let manifest = save_synthetic_cohort(&subjects, out_dir)?;
    let censored = subjects.iter().filter(|s| !s.record.event).count();
    log::info!("wrote {} subjects to {}", subjects.len(), out_dir.display());
    emit_json(
        out,
        &json!({
            "manifest": manifest,
            "n_subjects": subjects.len(),
            "censored_fraction": censored as f64 / subjects.len() as f64,
            "seed": spec.rng_seed,
        }),
    )
}
