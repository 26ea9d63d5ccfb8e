use std::collections::HashSet;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;

use deftkit::corpus::{self, ExampleRecord, ParseOptions};
use deftkit::features::{self, build_vocabs, EncodedExample, FeatureConfig, Vocabs};
use deftkit::labels::{parse_tag, LabelVocab, RelationVocab};
use deftkit::metrics::{relation_metrics, token_metrics, TokenMode};
use deftkit::model::{self, Model, ModelConfig, TaskMode};
use deftkit::predictions::{self, PredictionRecord};
use deftkit::train::{self, EpochStats, TrainConfig};
use deftkit::{check, ensemble, fixture, Error, Result, Tensor};

use crate::{
    Command, ConvertArgs, EnsembleArgs, EvaluateArgs, FixtureArgs, GradcheckArgs, PredictArgs,
    StatsArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Convert(args) => convert(args),
        Command::Train(args) => train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Ensemble(args) => ensemble_cmd(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Stats(args) => stats(args),
        Command::Fixture(args) => fixture_cmd(args),
    }
}

/// On-disk training configuration; missing fields keep their defaults and
/// command-line flags override whatever the file says.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_mode(s: &str) -> Result<TaskMode> {
    match s {
        "simple" => Ok(TaskMode::Simple),
        "crf" => Ok(TaskMode::Crf),
        "joint" => Ok(TaskMode::Joint),
        _ => Err(Error::Config(format!(
            "unknown mode {s:?}; expected simple, crf or joint"
        ))),
    }
}

fn parse_token_mode(s: &str) -> Result<TokenMode> {
    match s {
        "type-token" => Ok(TokenMode::TypeToken),
        "bio-token" => Ok(TokenMode::BioToken),
        _ => Err(Error::Config(format!(
            "unknown token mode {s:?}; expected type-token or bio-token"
        ))),
    }
}

fn parse_options(permissive: bool) -> ParseOptions {
    if permissive {
        ParseOptions::permissive()
    } else {
        ParseOptions::default()
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn print_counts(title: &str, counts: &IndexMap<String, usize>) {
    println!("{title}:");
    for (name, n) in counts {
        println!("  {name:<24} {n:>6}");
    }
}

fn encode_set(
    records: &[ExampleRecord],
    vocabs: &Vocabs,
    config: &FeatureConfig,
    stack_path: Option<&Path>,
) -> Result<Vec<EncodedExample>> {
    let slices: Option<Vec<Tensor>> = match stack_path {
        Some(p) => Some(features::read_stack_file(p)?.slices(records)?),
        None => None,
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| features::encode(r, vocabs, config, slices.as_ref().map(|s| s[i].clone())))
        .collect()
}

fn convert(args: ConvertArgs) -> Result<()> {
    let files = corpus::list_deft_files(&args.input)?;
    if files.is_empty() {
        return Err(Error::Schema(format!(
            "no .deft or .tsv files in {}",
            args.input.display()
        )));
    }
    let opts = parse_options(args.permissive);
    let names: Vec<String> = files.iter().map(|f| file_name(f)).collect();
    let dev_names: HashSet<String> = match args.dev_files {
        Some(n) => corpus::choose_dev_files(&names, n, args.seed)?
            .into_iter()
            .collect(),
        None => HashSet::new(),
    };

    let mut train_records = Vec::new();
    let mut dev_records = Vec::new();
    for (file, name) in files.iter().zip(&names) {
        let parsed = corpus::parse_deft_file(file, &opts)?;
        for w in &parsed.warnings {
            eprintln!("warning: {w}");
        }
        if dev_names.contains(name) {
            dev_records.extend(parsed.records);
        } else {
            train_records.extend(parsed.records);
        }
    }

    corpus::write_records(&args.output, &train_records)?;
    println!(
        "wrote {} windows to {}",
        train_records.len(),
        args.output.display()
    );
    if let Some(dev_output) = &args.dev_output {
        corpus::write_records(dev_output, &dev_records)?;
        let mut held: Vec<&String> = dev_names.iter().collect();
        held.sort();
        println!(
            "wrote {} windows to {} (held out: {})",
            dev_records.len(),
            dev_output.display(),
            held.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        );
    }

    let all: Vec<ExampleRecord> = train_records.into_iter().chain(dev_records).collect();
    print_counts("spans", &corpus::split_stats(&all));
    print_counts("relations", &corpus::relation_stats(&all));
    Ok(())
}

fn apply_overrides(cfg: &mut FileConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = args.clip_norm {
        cfg.train.clip_norm = v;
    }
    if let Some(v) = args.tag_weight {
        cfg.train.loss_weights.0 = v;
    }
    if let Some(v) = args.rel_weight {
        cfg.train.loss_weights.1 = v;
    }
    if args.no_shuffle {
        cfg.train.shuffle = false;
    }
    if let Some(mode) = &args.mode {
        cfg.model.mode = parse_mode(mode)?;
    }
    Ok(())
}

fn write_epoch_log(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut out = String::new();
    for e in epochs {
        let line = serde_json::to_string(e).map_err(|err| Error::Schema(err.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args)?;

    let train_records = corpus::read_records(&args.train)?;
    let vocabs = build_vocabs(&train_records, &cfg.model.features)?;
    let train_set = encode_set(
        &train_records,
        &vocabs,
        &cfg.model.features,
        args.stack.as_deref(),
    )?;
    let dev_records = match &args.dev {
        Some(p) => corpus::read_records(p)?,
        None => Vec::new(),
    };
    let dev_set = encode_set(
        &dev_records,
        &vocabs,
        &cfg.model.features,
        args.dev_stack.as_deref(),
    )?;

    let mut model = Model::init(cfg.model.clone(), vocabs, cfg.train.seed)?;
    eprintln!(
        "training on {} windows ({} dev), seed {}",
        train_set.len(),
        dev_set.len(),
        cfg.train.seed
    );
    let report = train::train_with(&mut model, &train_set, &dev_set, &cfg.train, |s| {
        let dev = s
            .dev_token_f1
            .map(|f| format!("  dev token F1 {f:.4}"))
            .unwrap_or_default();
        eprintln!("epoch {:>3}  loss {:.4}{dev}", s.epoch, s.train_loss);
    })?;

    model.save(&args.output)?;
    let hash = model::checkpoint_hash(&args.output)?;
    if let Some(log) = &args.log {
        write_epoch_log(log, &report.epochs)?;
    }

    let early = if report.stopped_early { ", stopped early" } else { "" };
    match report.best_dev_f1 {
        Some(f) => println!(
            "{} epochs{early}; best epoch {} with dev token F1 {f:.4}",
            report.epochs.len(),
            report.best_epoch
        ),
        None => println!("{} epochs{early}", report.epochs.len()),
    }
    println!("checkpoint {} ({hash})", args.output.display());
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let hash = model::checkpoint_hash(&args.model)?;
    let records = corpus::read_records(&args.input)?;
    let set = encode_set(
        &records,
        &model.vocabs,
        &model.config.features,
        args.stack.as_deref(),
    )?;
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });

    let mut out = Vec::with_capacity(records.len());
    for (record, example) in records.iter().zip(&set) {
        let pred = model.predict(example)?;
        out.push(PredictionRecord::from_prediction(
            record,
            &pred,
            &model.labels,
            &model.relations,
            &run_id,
            &hash,
        ));
    }
    predictions::write_predictions(&args.output, &out)?;
    println!(
        "wrote {} predictions to {} (run {run_id})",
        out.len(),
        args.output.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mode = parse_token_mode(&args.mode)?;
    let labels = LabelVocab::new();
    let relations = RelationVocab::new();
    let gold = corpus::read_records(&args.gold)?;
    let preds = predictions::read_predictions(&args.predictions)?;
    if gold.len() != preds.len() {
        return Err(Error::Schema(format!(
            "{} gold windows but {} predictions",
            gold.len(),
            preds.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(&preds).enumerate() {
        if g.tokens != p.tokens {
            return Err(Error::Schema(format!(
                "window {i}: prediction tokens do not match gold"
            )));
        }
    }

    let gold_tags: Vec<Vec<usize>> = gold
        .iter()
        .map(|r| r.tags.iter().map(|t| parse_tag(&labels, t)).collect())
        .collect::<Result<_>>()?;
    let gold_rels: Vec<Vec<(usize, usize, usize)>> = gold
        .iter()
        .map(|r| {
            r.relations
                .iter()
                .map(|(h, t, l)| {
                    let k = relations.id(l).ok_or_else(|| {
                        Error::Schema(format!("unknown relation label {l:?}"))
                    })?;
                    Ok((*h, *t, k))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let run = predictions::to_run_predictions(&preds, &labels, &relations)?;
    let token_report = token_metrics(&gold_tags, &run.tags, mode)?;
    println!("token scores ({}):", args.mode);
    print!("{token_report}");
    let rel_report = match &run.relations {
        Some(r) => {
            let report = relation_metrics(&gold_rels, r)?;
            println!();
            println!("relation scores:");
            print!("{report}");
            Some(report)
        }
        None => None,
    };

    println!();
    println!("token macro F1    {:.4}", token_report.macro_f1);
    if let Some(r) = &rel_report {
        println!("relation macro F1 {:.4}", r.macro_f1);
    }

    if let Some(path) = &args.json {
        let payload = serde_json::json!({ "token": token_report, "relations": rel_report });
        let text = serde_json::to_string_pretty(&payload)
            .map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn ensemble_cmd(args: EnsembleArgs) -> Result<()> {
    let labels = LabelVocab::new();
    let relations = RelationVocab::new();
    let mut runs = Vec::new();
    let mut inputs: Vec<Vec<PredictionRecord>> = Vec::new();
    for path in &args.predictions {
        let recs = predictions::read_predictions(path)?;
        runs.push(predictions::to_run_predictions(&recs, &labels, &relations)?);
        inputs.push(recs);
    }
    let voted = ensemble::majority_vote(&runs, &labels)?;

    let mut checkpoints: Vec<String> = Vec::new();
    for recs in &inputs {
        for r in recs {
            if !checkpoints.contains(&r.checkpoint) {
                checkpoints.push(r.checkpoint.clone());
            }
        }
    }
    let checkpoint = checkpoints.join("+");

    let out: Vec<PredictionRecord> = inputs[0]
        .iter()
        .enumerate()
        .map(|(i, rec)| PredictionRecord {
            tokens: rec.tokens.clone(),
            tags: voted.tags[i]
                .iter()
                .map(|&t| labels.tag(t).to_string())
                .collect(),
            relations: voted
                .relations
                .as_ref()
                .map(|r| {
                    r[i].iter()
                        .map(|&(h, t, k)| (h, t, relations.label(k).to_string()))
                        .collect()
                })
                .unwrap_or_default(),
            run_id: voted.run_id.clone(),
            checkpoint: checkpoint.clone(),
        })
        .collect();
    predictions::write_predictions(&args.output, &out)?;
    println!(
        "voted {} windows over {} runs into {}",
        out.len(),
        runs.len(),
        args.output.display()
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = check::run_suite(&args.seeds)?;
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for r in &reports {
        println!(
            "{:<14} seed {:>3}  max rel err {:.3e}  {}",
            r.name,
            r.seed,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_err);
        failures += usize::from(!r.passed());
    }
    println!(
        "worst {:.3e} over {} checks, tolerance {:.0e}",
        worst,
        reports.len(),
        check::TOLERANCE
    );
    if failures > 0 {
        return Err(Error::Evaluation(format!(
            "{failures} gradient checks exceeded tolerance"
        )));
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let records = if args.input.is_dir() {
        let files = corpus::list_deft_files(&args.input)?;
        if files.is_empty() {
            return Err(Error::Schema(format!(
                "no .deft or .tsv files in {}",
                args.input.display()
            )));
        }
        let opts = parse_options(args.permissive);
        let mut all = Vec::new();
        for file in &files {
            let parsed = corpus::parse_deft_file(file, &opts)?;
            for w in &parsed.warnings {
                eprintln!("warning: {w}");
            }
            all.extend(parsed.records);
        }
        println!("{} files", files.len());
        all
    } else {
        corpus::read_records(&args.input)?
    };

    let tokens: usize = records.iter().map(|r| r.len()).sum();
    println!("{} windows, {tokens} tokens", records.len());
    print_counts("spans", &corpus::split_stats(&records));
    print_counts("relations", &corpus::relation_stats(&records));
    Ok(())
}

fn fixture_cmd(args: FixtureArgs) -> Result<()> {
    fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let fx = fixture::generate_fixture(&args.output, args.seed)?;
    for f in &fx.files {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", fx.stats_path.display());
    let stats = fixture::read_stats(&fx.stats_path)?;
    println!("{} files, {} windows", stats.files, stats.windows);
    Ok(())
}
