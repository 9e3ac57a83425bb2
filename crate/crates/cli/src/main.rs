use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moelab::bench::{benchmark_inference, benchmark_noop, compare_configs, BenchSpec};
use moelab::cost::{estimate_flops, instrumented_macs, table_csv};
use moelab::data::{read_corpus, write_atomic, write_corpus, Example};
use moelab::domain::DomainSchema;
use moelab::eval::{
    decode_examples, evaluate_all, label_sweep_similarity, scores_to_csv, similarity_matrix, top1_activity,
    wrong_label_matrix, ActivityProfile, Metric,
};
use moelab::experiment::ExperimentConfig;
use moelab::model::{Checkpoint, Model};
use moelab::train::{metric_header, Trainer};
use moelab::{Error, Result};

/// Environment variable supplying the model seed when the config omits it.
const SEED_VAR: &str = "MOELAB_SEED";
const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Parser)]
#[command(name = "moelab", version, about = "Multi-domain mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test corpora for every domain.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on generated corpora.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test corpora.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decode every labeled test set under every label.
        #[arg(long)]
        wrong_labels: bool,
        /// Expert activity per domain and their pairwise similarity.
        #[arg(long)]
        gate_stats: bool,
        /// Decode one test set under every label and compare activities.
        #[arg(long)]
        label_sweep: bool,
        /// Test set used by --label-sweep.
        #[arg(long, default_value = "generic")]
        sweep_domain: String,
        /// token-accuracy or bleu.
        #[arg(long, default_value = "token-accuracy")]
        metric: String,
    },
    /// Parameter and multiply-accumulate counts.
    Cost {
        /// One or more experiment files; each gives one row.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        src_len: usize,
        #[arg(long, default_value_t = 10)]
        tgt_len: usize,
        /// Also run the model under the runtime counter and compare.
        #[arg(long)]
        instrumented: bool,
        /// Print JSON reports instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Time greedy decoding of the test corpora.
    Bench {
        /// One or more checkpoints; the file stem names each.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Only this domain's test set; default is every labeled one.
        #[arg(long)]
        domain: Option<String>,
        /// Batch budgets in source tokens.
        #[arg(long, value_delimiter = ',', default_value = "1,64,512")]
        batch_tokens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Also time the harness with a decoder that does nothing.
        #[arg(long)]
        noop: bool,
        /// Print median-time ratios against this checkpoint.
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Large temporaries are allocated and freed at a high rate; serving them
/// from fresh mappings avoids re-zeroing recycled heap memory.
fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 20);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out } => generate(&load_config(&config)?, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&load_config(&config)?, &data, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            wrong_labels,
            gate_stats,
            label_sweep,
            sweep_domain,
            metric,
        } => {
            let flags = EvalFlags {
                wrong_labels,
                gate_stats,
                label_sweep: label_sweep.then_some(sweep_domain),
                metric: Metric::parse(&metric)?,
            };
            eval(&checkpoint, &data, &out, &flags)
        }
        Command::Cost {
            configs,
            src_len,
            tgt_len,
            instrumented,
            json,
        } => cost(&configs, src_len, tgt_len, instrumented, json),
        Command::Bench {
            checkpoints,
            data,
            domain,
            batch_tokens,
            repeats,
            warmup,
            noop,
            baseline,
        } => bench(&checkpoints, &data, domain.as_deref(), &batch_tokens, repeats, warmup, noop, baseline.as_deref()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut text = String::new();
    if let Ok(seed) = std::env::var(SEED_VAR) {
        text.push_str(&format!("seed = {seed}\n"));
    }
    if let Some(path) = &args.config {
        text.push_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    for o in &args.overrides {
        if !o.contains('=') {
            return Err(Error::config(format!("override `{o}` is not `key=value`")));
        }
        text.push_str(o);
        text.push('\n');
    }
    ExperimentConfig::parse(&text)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn corpus_path(dir: &Path, schema: &DomainSchema, d: moelab::domain::DomainId, split: &str) -> PathBuf {
    dir.join(format!("{}.{split}.tsv", schema.name(d)))
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let schema = cfg.build_schema()?;
    let data = cfg.generate(&schema)?;
    create_dir(out)?;
    let mut domains = Vec::new();
    for d in schema.ids() {
        let sets = [&data.train[d.0], &data.valid[d.0], &data.test[d.0]];
        for (split, set) in SPLITS.iter().zip(sets) {
            write_corpus(&corpus_path(out, &schema, d, split), &schema, set)?;
        }
        domains.push(serde_json::json!({
            "name": schema.name(d),
            "train": data.train[d.0].len(),
            "valid": data.valid[d.0].len(),
            "test": data.test[d.0].len(),
            "train_removed_by_dedup": data.removed[d.0],
        }));
    }
    let manifest = serde_json::json!({
        "schema_hash": schema.hash(),
        "data_seed": cfg.data.seed,
        "vocab_size": schema.vocab_size(),
        "domains": domains,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&out.join("manifest.json"), text.as_bytes())?;
    write_atomic(&out.join("config.cfg"), cfg.emit().as_bytes())?;
    eprintln!("wrote {} domains to {}", schema.len(), out.display());
    Ok(())
}

/// Reads one split of every domain, checking the manifest's schema hash.
fn read_split(dir: &Path, schema: &DomainSchema, split: &str) -> Result<Vec<Vec<Example>>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if manifest["schema_hash"].as_str() != Some(schema.hash().as_str()) {
        return Err(Error::Compat(format!("{} was generated for a different domain schema", dir.display())));
    }
    schema.ids().map(|d| read_corpus(&corpus_path(dir, schema, d, split), schema)).collect()
}

fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let schema = cfg.build_schema()?;
    let train_sets = read_split(data, &schema, "train")?;
    let valid = read_split(data, &schema, "valid")?;
    create_dir(out)?;
    let ck_path = out.join("checkpoint.bin");
    let mut cfg = cfg.clone();
    cfg.train.checkpoint_path = Some(ck_path.clone());
    let model = Model::build(&cfg.model, &schema)?;
    let stream = cfg.stream(&schema, train_sets)?;
    let mut trainer = Trainer::new(model, &schema, stream, cfg.train.clone())?
        .with_validation(valid)
        .with_config_echo(cfg.pairs());
    if let Some(path) = resume {
        trainer.resume(&Checkpoint::read(path)?)?;
        eprintln!("resumed at step {}", trainer.step());
    }
    let report = trainer.run()?;
    let metrics_path = out.join("metrics.csv");
    let mut log = match resume {
        Some(_) if metrics_path.exists() => std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
        _ => format!("{}\n", metric_header(&schema)),
    };
    for row in &report.metrics {
        log.push_str(&row.to_csv());
        log.push('\n');
        eprintln!("{}", row.to_csv());
    }
    write_atomic(&metrics_path, log.as_bytes())?;
    write_atomic(&out.join("config.cfg"), cfg.emit().as_bytes())?;
    // Runs with max_steps already reached write no periodic checkpoint.
    report.checkpoint.write(&ck_path)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(ExperimentConfig, DomainSchema, Model)> {
    let ck = Checkpoint::read(path)?;
    let cfg = ExperimentConfig::from_pairs(&ck.config)?;
    let schema = cfg.build_schema()?;
    let mut model = Model::build(&cfg.model, &schema)?;
    model.load_params(&ck)?;
    Ok((cfg, schema, model))
}

struct EvalFlags {
    wrong_labels: bool,
    gate_stats: bool,
    label_sweep: Option<String>,
    metric: Metric,
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, flags: &EvalFlags) -> Result<()> {
    let (_, schema, model) = load_model(checkpoint)?;
    let test = read_split(data, &schema, "test")?;
    create_dir(out)?;
    let scores = evaluate_all(&model, &schema, &test)?;
    let csv = scores_to_csv(&scores);
    print!("{csv}");
    write_atomic(&out.join("scores.csv"), csv.as_bytes())?;

    let labeled: Vec<_> = schema.labeled().collect();
    if flags.wrong_labels {
        let sets: Vec<&[Example]> = labeled.iter().map(|d| test[d.0].as_slice()).collect();
        let m = wrong_label_matrix(&model, &schema, &sets, &labeled, flags.metric)?;
        write_atomic(&out.join("wrong_labels.csv"), m.matrix.to_csv().as_bytes())?;
        eprintln!("mean wrong-label degradation: {}", m.degradation());
    }
    if flags.gate_stats {
        let mut names = Vec::new();
        let mut profiles: Vec<ActivityProfile> = Vec::new();
        let mut long = String::from("domain,layer,stack,expert,activity\n");
        for d in schema.ids() {
            let trace = decode_examples(&model, &schema, &test[d.0], None)?
                .trace
                .ok_or_else(|| Error::contract("gate statistics need a sparse model"))?;
            let p = top1_activity(&trace)?;
            for (l, stack) in p.layers.iter().enumerate() {
                for (e, v) in p.block(l).iter().enumerate() {
                    long.push_str(&format!("{},{l},{stack:?},{e},{v}\n", schema.name(d)));
                }
            }
            names.push(schema.name(d).to_string());
            profiles.push(p);
        }
        write_atomic(&out.join("activity.csv"), long.as_bytes())?;
        let sim = similarity_matrix(names, &profiles)?;
        write_atomic(&out.join("gate_similarity.csv"), sim.to_csv().as_bytes())?;
    }
    if let Some(name) = &flags.label_sweep {
        let d = schema.by_name(name)?;
        let m = label_sweep_similarity(&model, &schema, &test[d.0], &labeled)?;
        write_atomic(&out.join("label_sweep.csv"), m.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cost(configs: &[PathBuf], src_len: usize, tgt_len: usize, instrumented: bool, json: bool) -> Result<()> {
    let mut reports = Vec::new();
    let mut all_equal = true;
    for path in configs {
        let cfg = ExperimentConfig::load(path)?;
        let schema = cfg.build_schema()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let report = estimate_flops(&name, &cfg.model, &schema, src_len, tgt_len)?;
        if instrumented {
            let counted = instrumented_macs(&cfg.model, &schema, src_len, tgt_len, false)?;
            let analytic = report.tagged_total_macs.unwrap_or(report.total_macs);
            eprintln!("{name}: analytic {analytic} instrumented {counted} equal={}", analytic == counted);
            all_equal &= analytic == counted;
        }
        reports.push(report);
    }
    if json {
        for r in &reports {
            println!("{}", serde_json::to_string(r).expect("cost reports serialize"));
        }
    } else {
        print!("{}", table_csv(&reports));
    }
    if instrumented {
        println!("analytic_equals_instrumented={all_equal}");
        if !all_equal {
            return Err(Error::numeric("analytic and instrumented counts differ"));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    checkpoints: &[PathBuf],
    data: &Path,
    domain: Option<&str>,
    batch_tokens: &[usize],
    repeats: usize,
    warmup: usize,
    noop: bool,
    baseline: Option<&str>,
) -> Result<()> {
    let mut results = Vec::new();
    for path in checkpoints {
        let (_, schema, model) = load_model(path)?;
        let test = read_split(data, &schema, "test")?;
        let set: Vec<Example> = match domain {
            Some(name) => test[schema.by_name(name)?.0].clone(),
            None => schema.labeled().flat_map(|d| test[d.0].clone()).collect(),
        };
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for &bt in batch_tokens {
            let spec = BenchSpec {
                batch_tokens: bt,
                repeats,
                warmup,
            };
            let r = benchmark_inference(&model, &schema, &id, &set, spec)?;
            println!("{}", r.to_json_line());
            results.push(r);
            if noop && results.len() <= batch_tokens.len() {
                println!("{}", benchmark_noop(&model, &schema, &set, spec)?.to_json_line());
            }
        }
    }
    if let Some(base) = baseline {
        for &bt in batch_tokens {
            let same: Vec<_> = results.iter().filter(|r| r.batch_size == bt).cloned().collect();
            print!("{}", compare_configs(&same, base)?.to_csv());
        }
    }
    Ok(())
}
