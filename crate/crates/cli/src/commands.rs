//! Subcommand bodies.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;

use relagg_core::aggregator::buckets_csv;
use relagg_core::autodiff::Graph;
use relagg_core::checkpoint::Checkpoint;
use relagg_core::event_store::{cohort_observation_stats, synthesize_events, write_events, write_labels, Normalizer};
use relagg_core::experiment::{cohort_split, resolve_variants, run_ablation, run_sweep, test_metrics, RunConfig, SweepAxis};
use relagg_core::metrics::{Metrics, RESULTS_HEADER};
use relagg_core::model::ForwardOptions;
use relagg_core::reliability::decay_report;
use relagg_core::router::{routing_csv_header, routing_csv_rows};
use relagg_core::tokenizer::tokens_csv;
use relagg_core::train::{evaluate, train, Prepared, Split};
use relagg_core::{CohortSpec, Error, EventWindow, MetricsReport, Model};

use crate::io::{assemble, load_dataset, Dataset, OutDir, EVENTS, GROUPS, LABELS, VARIABLES};
use crate::{Command, Common, DataArgs, DumpArgs, Failure, SplitPart};

pub fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, data, budget, dry_run } => train_cmd(&common, &data, budget, dry_run),
        Command::Eval { common, data, checkpoint, split } => eval_cmd(&common, &data, &checkpoint, split),
        Command::Ablate { common, data, variants, budget, dry_run } => ablate(&common, &data, &variants, budget, dry_run),
        Command::Sweep { common, data, axis, values, dry_run } => sweep(&common, &data, &axis, &values, dry_run),
        Command::DecayReport { common, data, checkpoint } => decay(&common, &data, &checkpoint),
        Command::DumpTokens { common, data, dump } => dump_cmd(&common, &data, &dump, None, Dump::Tokens),
        Command::DumpBuckets { common, data, dump } => dump_cmd(&common, &data, &dump, None, Dump::Buckets),
        Command::DumpRouting { common, data, dump, budget } => dump_cmd(&common, &data, &dump, budget, Dump::Routing),
        Command::CohortStats { common, data } => cohort_stats(&common, &data),
    }
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let kv = assemble(common, &[("seed", common.seed.map(|s| s.to_string()))])?;
    let spec = CohortSpec::from_kv(&kv)?;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&spec.to_kv())?;
    let cohort = synthesize_events(&spec)?;
    write_events(&out.path(EVENTS), &cohort.records, &cohort.dictionary)?;
    write_labels(&out.path(LABELS), &cohort.labels)?;
    out.write(VARIABLES, &(cohort.dictionary.names().join("\n") + "\n"))?;
    let mut groups = String::new();
    for (name, g) in cohort.dictionary.names().iter().zip(&cohort.groups) {
        let _ = writeln!(groups, "{name},{g}");
    }
    out.write(GROUPS, &groups)?;
    let positives = cohort.labels.iter().filter(|(_, y)| *y == 1).count();
    log::info!(
        "generated {} patients ({positives} positive), {} events",
        cohort.labels.len(),
        cohort.records.len()
    );
    Ok(())
}

/// Run config from file and flags; `--seed` replaces the seed list.
fn run_config(common: &Common, budget: Option<usize>) -> Result<RunConfig, Failure> {
    let kv = assemble(
        common,
        &[("seeds", common.seed.map(|s| s.to_string())), ("budget", budget.map(|k| k.to_string()))],
    )?;
    Ok(RunConfig::from_kv(&kv)?)
}

fn results_csv(label: &str, seed: u64, m: Metrics) -> Result<String, Failure> {
    Ok(format!("{RESULTS_HEADER}{}", MetricsReport::new(vec![seed], vec![m])?.csv_rows(label)))
}

fn predictions_csv(windows: &[&EventWindow], probs: &[f64]) -> String {
    let mut s = String::from("patient_id,label,prob\n");
    for (w, p) in windows.iter().zip(probs) {
        let _ = writeln!(s, "{},{},{p}", w.patient_id, w.label);
    }
    s
}

fn pick<'a>(windows: &'a [EventWindow], idx: &[usize]) -> Vec<&'a EventWindow> {
    idx.iter().map(|&i| &windows[i]).collect()
}

fn train_cmd(common: &Common, data: &DataArgs, budget: Option<usize>, dry_run: bool) -> Result<(), Failure> {
    let run = run_config(common, budget)?;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    if dry_run {
        return Ok(());
    }
    let ds = load_dataset(&data.data, &run.load_options())?;
    let split = cohort_split(&ds.windows, &run.train)?;
    let seed = run.train.seeds[0];
    let log_path = out.path("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?);
    let outcome = match train(&ds.windows, &split, &run.model, run.ablation, &run.train, seed, Some(&mut log_file)) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, msg, last_good }) => {
            let normalizer = Normalizer::fit(&pick(&ds.windows, &split.train).into_iter().cloned().collect::<Vec<_>>())?;
            let mut model = Model::new(run.model.clone(), run.ablation, ds.dict.len(), seed)?;
            model.store = *last_good;
            let path = out.path("checkpoint_last_good.ckpt");
            Checkpoint { model, normalizer }.save(&path)?;
            return Err(Failure::Runtime(format!(
                "training diverged at epoch {epoch}: {msg}; last good parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    drop(log_file);
    log::info!("best epoch {} with validation auprc {:.4}", outcome.best_epoch, outcome.best_val_auprc);
    let (probs, m) = test_metrics(&ds.windows, &split, &outcome)?;
    log::info!("test auroc {:.4} auprc {:.4} brier {:.4} ece {:.4}", m.auroc, m.auprc, m.brier, m.ece);
    out.write("metrics.csv", &results_csv("test", seed, m)?)?;
    out.write("predictions.csv", &predictions_csv(&pick(&ds.windows, &split.test), &probs))?;
    let ck = Checkpoint { model: outcome.model, normalizer: outcome.normalizer };
    ck.save(&out.path("checkpoint.ckpt"))?;
    Ok(())
}

fn eval_cmd(common: &Common, data: &DataArgs, checkpoint: &std::path::Path, part: SplitPart) -> Result<(), Failure> {
    let mut run = run_config(common, None)?;
    let ck = Checkpoint::load(checkpoint)?;
    run.model = ck.model.config.clone();
    run.ablation = ck.model.ablation;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    let ds = load_dataset(&data.data, &run.load_options())?;
    if ds.dict.len() != ck.model.n_vars {
        return Err(Failure::Runtime(format!(
            "checkpoint expects {} variables, data has {}",
            ck.model.n_vars,
            ds.dict.len()
        )));
    }
    let idx: Vec<usize> = match part {
        SplitPart::All => (0..ds.windows.len()).collect(),
        _ => {
            let Split { train, val, test } = cohort_split(&ds.windows, &run.train)?;
            match part {
                SplitPart::Train => train,
                SplitPart::Val => val,
                _ => test,
            }
        }
    };
    let chosen = pick(&ds.windows, &idx);
    let (probs, m) = evaluate(&ck.model, &Prepared::new(&chosen, &ck.normalizer)?)?;
    let label = format!("{part:?}").to_lowercase();
    log::info!("{label} auroc {:.4} auprc {:.4} brier {:.4} ece {:.4}", m.auroc, m.auprc, m.brier, m.ece);
    out.write("metrics.csv", &results_csv(&label, ck.model.seed, m)?)?;
    out.write("predictions.csv", &predictions_csv(&chosen, &probs))?;
    Ok(())
}

fn ablate(common: &Common, data: &DataArgs, variants: &[String], budget: Option<usize>, dry_run: bool) -> Result<(), Failure> {
    let run = run_config(common, budget)?;
    let variants = resolve_variants(variants)?;
    if run.ablation != Default::default() {
        return Err(Failure::Usage("ablation flags cannot be combined with ablate; use --variants".into()));
    }
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    if dry_run {
        return Ok(());
    }
    let ds = load_dataset(&data.data, &run.load_options())?;
    let split = cohort_split(&ds.windows, &run.train)?;
    let table = run_ablation(&ds.windows, &split, &run.model, &run.train, &variants)?;
    out.write("results.csv", &table.to_csv())
}

fn sweep(common: &Common, data: &DataArgs, axis: &str, values: &[String], dry_run: bool) -> Result<(), Failure> {
    let run = run_config(common, None)?;
    let axis = SweepAxis::parse(axis, values)?;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    if dry_run {
        return Ok(());
    }
    let ds = load_dataset(&data.data, &run.load_options())?;
    let split = cohort_split(&ds.windows, &run.train)?;
    let table = run_sweep(&ds.windows, &split, &run.model, run.ablation, &run.train, &axis)?;
    out.write("results.csv", &table.to_csv())
}

fn decay(common: &Common, data: &DataArgs, checkpoint: &std::path::Path) -> Result<(), Failure> {
    let mut run = run_config(common, None)?;
    let ck = Checkpoint::load(checkpoint)?;
    run.model = ck.model.config.clone();
    run.ablation = ck.model.ablation;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    let ds = load_dataset(&data.data, &run.load_options())?;
    let report = decay_report(&ck.model.store, &ck.model.params.decay, &ds.dict, &ds.groups, &ds.windows)?;
    for row in &report.groups {
        log::info!("group {}: mean decay {:.6} coverage {:.4} mean gap {:.2} h", row.name, row.decay, row.coverage, row.mean_gap_h);
    }
    out.write("decay.csv", &report.to_csv())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Dump {
    Tokens,
    Buckets,
    Routing,
}

/// Prefixes every data row of a CSV with a sample column.
fn with_sample(csv: &str, sample: &str, header: bool, out: &mut String) {
    let mut lines = csv.lines();
    if let Some(h) = lines.next() {
        if header {
            let _ = writeln!(out, "sample,{h}");
        }
    }
    for l in lines {
        let _ = writeln!(out, "{sample},{l}");
    }
}

fn dump_cmd(common: &Common, data: &DataArgs, args: &DumpArgs, budget: Option<usize>, kind: Dump) -> Result<(), Failure> {
    let mut run = run_config(common, budget)?;
    let loaded = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &loaded {
        run.model = ck.model.config.clone();
        run.ablation = ck.model.ablation;
        if let Some(k) = budget {
            run.model.budget = k;
        }
    }
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    let Dataset { windows, dict, .. } = load_dataset(&data.data, &run.load_options())?;
    let (mut model, normalizer) = match loaded {
        Some(ck) => (ck.model, ck.normalizer),
        None => {
            log::info!("no checkpoint given; using a freshly initialized model");
            let split = cohort_split(&windows, &run.train)?;
            let train_w: Vec<EventWindow> = pick(&windows, &split.train).into_iter().cloned().collect();
            (Model::new(run.model.clone(), run.ablation, dict.len(), run.train.seeds[0])?, Normalizer::fit(&train_w)?)
        }
    };
    model.config.budget = run.model.budget;
    let n = if args.limit == 0 { windows.len() } else { args.limit.min(windows.len()) };
    let chosen: Vec<&EventWindow> = windows.iter().take(n).collect();
    let prepared = Prepared::new(&chosen, &normalizer)?;
    let mut body = String::new();
    let mut counts = String::from("sample,n_tokens,n_selected\n");
    let mut n_tokens = Vec::with_capacity(n);
    for (i, w) in chosen.iter().enumerate() {
        let mut g = Graph::no_grad();
        let f = model.forward(&mut g, &prepared.seqs[i], &ForwardOptions::eval(prepared.keys[i]), None)?;
        let id = &w.patient_id;
        match kind {
            Dump::Tokens => with_sample(&tokens_csv(&prepared.seqs[i], g.value(f.tokens)), id, i == 0, &mut body),
            Dump::Buckets => with_sample(&buckets_csv(&f.multiscale), id, i == 0, &mut body),
            Dump::Routing => {
                if i == 0 {
                    body.push_str(routing_csv_header());
                }
                let scores = f.scores.clone().unwrap_or_else(|| vec![f64::NAN; f.multiscale.len()]);
                body.push_str(&routing_csv_rows(id, &f.multiscale.provenance, &scores, &f.selected));
                let _ = writeln!(counts, "{id},{},{}", f.multiscale.len(), f.selected.len());
            }
        }
        n_tokens.push(f.multiscale.len() as f64);
    }
    let (mean, std) = relagg_core::metrics::mean_std(&n_tokens);
    log::info!("{n} samples, pre-routing tokens {mean:.2} +- {std:.2}");
    match kind {
        Dump::Tokens => out.write("tokens.csv", &body),
        Dump::Buckets => out.write("buckets.csv", &body),
        Dump::Routing => {
            out.write("routing.csv", &body)?;
            out.write("token_counts.csv", &counts)
        }
    }
}

fn cohort_stats(common: &Common, data: &DataArgs) -> Result<(), Failure> {
    let run = run_config(common, None)?;
    let out = OutDir::claim(&common.out)?;
    out.snapshot(&run.to_kv())?;
    let ds = load_dataset(&data.data, &run.load_options())?;
    let stats = cohort_observation_stats(&ds.windows)?;
    out.write("cohort_stats.csv", &stats.to_csv(&ds.dict))
}
