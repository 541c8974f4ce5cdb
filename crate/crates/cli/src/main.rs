//! `endoalign` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 validation. Failures print one
//! JSON line on stderr: `{"error":{"kind":..,"exit_code":..,"message":..}}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use endoalign::ablation::{parse_variants, run_ablation};
use endoalign::config::RunConfig;
use endoalign::eval::{build_task, evaluate, export_embeddings, Setting, TaskKind};
use endoalign::json;
use endoalign::model::{StageCheckpoint, StageTag};
use endoalign::pipeline::{
    filter_summary, initial_model, run_all, run_stage1, stage2_train, stage3_train, Corpus,
    FilteredFrameSet, RunManifest, StageOutput, MANIFEST_FORMAT,
};
use endoalign::records::{
    corpus_stats, generate_corpus, read_corpus, write_corpus, MedicalCase, SchemaFile,
};
use endoalign::report::parse_case;
use endoalign::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "endoalign",
    version,
    about = "Staged image-text contrastive pre-training on synthetic colonoscopy records"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its schema and statistics.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse the reports of a corpus into per-polyp attribute vectors.
    ParseReports {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage, or all of them in sequence.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (stages 2 and 3).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Kept-frame set written by stage 1 (stages 2 and 3).
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a downstream task.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// `zero-shot` or `few-shot:<ratio>`.
        #[arg(long, default_value = "zero-shot")]
        setting: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus the checkpoint must have been trained on.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write task-item embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score component ablations over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants such as `SP,SP+MC,SP+MP+MC+CA`.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detection,
    Malignancy,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Detection => TaskKind::Detection,
            TaskArg::Malignancy => TaskKind::Malignancy,
        }
    }
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let _ = cmd.print_help();
        return ExitCode::from(EXIT_USAGE);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            let message = first.trim_start_matches("error: ");
            return fail("usage", EXIT_USAGE, message);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_io() => fail("io", EXIT_IO, &e.to_string()),
        Err(e) => fail("validation", EXIT_VALIDATION, &e.to_string()),
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = json!({"error": {"kind": kind, "exit_code": code, "message": message}});
    eprintln!("{line}");
    ExitCode::from(code)
}

type Result<T> = endoalign::Result<T>;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", out.display()),
        ))
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            gen_data(&cfg, &out)
        }
        Command::ParseReports {
            config,
            corpus,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            parse_reports(&cfg, &corpus, &out)
        }
        Command::Train {
            stage,
            config,
            corpus,
            out,
            init,
            filter,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            train(
                &cfg,
                stage,
                &corpus,
                &out,
                init.as_deref(),
                filter.as_deref(),
            )
        }
        Command::Evaluate {
            ckpt,
            task,
            setting,
            config,
            corpus,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let setting: Setting = setting.parse()?;
            evaluate_cmd(&cfg, &ckpt, task.into(), setting, corpus.as_deref(), &out)
        }
        Command::ExportEmbeddings {
            ckpt,
            task,
            config,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            export_cmd(&cfg, &ckpt, task.into(), &out)
        }
        Command::Ablate {
            config,
            out,
            variants,
            seeds,
        } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(v) = variants {
                cfg.ablation.variants = v;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            ablate(&cfg, &out)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let resolved = cfg.resolved();
    let schema = cfg.schema()?;
    create_dir(out)?;
    let mut cases = generate_corpus(&resolved.generator, &schema)?;
    for c in &mut cases {
        c.fingerprint = Some(fp.clone());
    }
    write_corpus(&out.join("corpus.jsonl"), &cases)?;
    json::write_pretty(
        &out.join("schema.json"),
        &SchemaFile {
            version: schema.version.clone(),
            schema,
            fingerprint: Some(fp.clone()),
        },
    )?;
    let stats = corpus_stats(&cases)?;
    json::write_pretty(
        &out.join("stats.json"),
        &json!({"fingerprint": fp, "stats": stats}),
    )?;
    json::write_pretty(
        &out.join("run_config.json"),
        &json!({"fingerprint": fp, "config": resolved}),
    )?;
    log::info!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}

/// Reads a corpus and checks that every case carries `fp`.
fn load_corpus(path: &Path, fp: &str) -> Result<Vec<MedicalCase>> {
    let cases = read_corpus(path)?;
    if cases.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    for c in &cases {
        match &c.fingerprint {
            Some(f) if f == fp => {}
            other => {
                return Err(Error::FingerprintMismatch {
                    expected: fp.to_string(),
                    found: other.clone().unwrap_or_else(|| "none".into()),
                })
            }
        }
    }
    Ok(cases)
}

fn parse_reports(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let schema = cfg.schema()?;
    let cases = load_corpus(corpus, &fp)?;
    let reports = cases
        .iter()
        .map(|c| {
            let mut r = parse_case(c, &schema)?;
            r.fingerprint = Some(fp.clone());
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    json::write_lines(&out.join("reports.jsonl"), &reports)
}

fn load_checkpoint(path: &Path, fp: &str) -> Result<StageCheckpoint> {
    let ck = StageCheckpoint::load(path)?;
    match &ck.run_fingerprint {
        Some(f) if f == fp => Ok(ck),
        other => Err(Error::FingerprintMismatch {
            expected: fp.to_string(),
            found: other.clone().unwrap_or_else(|| "none".into()),
        }),
    }
}

fn stage_file(out: &Path, stage: StageTag) -> PathBuf {
    out.join(format!("{}.json", stage.file_stem()))
}

fn save_checkpoint(out: &Path, mut ck: StageCheckpoint, fp: &str) -> Result<()> {
    ck.run_fingerprint = Some(fp.to_string());
    ck.save(&stage_file(out, ck.stage))
}

fn require<'a>(arg: Option<&'a Path>, flag: &str, stage: u8) -> Result<&'a Path> {
    arg.ok_or_else(|| Error::Config(format!("stage {stage} needs --{flag}")))
}

fn load_filter(path: &Path, fp: &str) -> Result<FilteredFrameSet> {
    let value: serde_json::Value = json::read(path)?;
    let found = value
        .get("fingerprint")
        .and_then(|f| f.as_str())
        .unwrap_or("none");
    if found != fp {
        return Err(Error::FingerprintMismatch {
            expected: fp.to_string(),
            found: found.to_string(),
        });
    }
    let set = value
        .get("filter")
        .cloned()
        .ok_or_else(|| Error::Config("filter file lacks `filter`".into()))?;
    Ok(serde_json::from_value(set)?)
}

fn train(
    cfg: &RunConfig,
    stage: StageArg,
    corpus_path: &Path,
    out: &Path,
    init: Option<&Path>,
    filter: Option<&Path>,
) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let schema = cfg.schema()?;
    let corpus = Corpus::parse(load_corpus(corpus_path, &fp)?, &schema)?;
    let pipeline = cfg.pipeline();
    create_dir(out)?;
    let write_filter = |set: &FilteredFrameSet| {
        json::write_pretty(
            &out.join("filter.json"),
            &json!({"fingerprint": fp, "filter": set}),
        )
    };
    let manifest = |stages: Vec<&StageOutput>, set: &FilteredFrameSet| RunManifest {
        format_version: MANIFEST_FORMAT.to_string(),
        run_fingerprint: Some(fp.clone()),
        init_seed: pipeline.seed,
        stages: stages.into_iter().map(|s| s.report.clone()).collect(),
        filter: filter_summary(set, &corpus),
    };
    let m = match stage {
        StageArg::All => {
            let run = run_all(&corpus, &pipeline)?;
            write_filter(&run.filtered)?;
            for ck in run.checkpoints {
                save_checkpoint(out, ck, &fp)?;
            }
            RunManifest {
                run_fingerprint: Some(fp.clone()),
                ..run.manifest
            }
        }
        StageArg::One => {
            let init = initial_model(&corpus, &pipeline);
            let (r1, set, r2) = run_stage1(&corpus, &init, &pipeline)?;
            write_filter(&set)?;
            let m = manifest(vec![&r1, &r2], &set);
            save_checkpoint(out, r1.checkpoint, &fp)?;
            save_checkpoint(out, r2.checkpoint, &fp)?;
            m
        }
        StageArg::Two | StageArg::Three => {
            let n = if matches!(stage, StageArg::Two) { 2 } else { 3 };
            let ck = load_checkpoint(require(init, "init", n)?, &fp)?;
            let set = load_filter(require(filter, "filter", n)?, &fp)?;
            let s = if n == 2 {
                stage2_train(&corpus, &set, &ck.model(), &pipeline.stage2)?
            } else {
                stage3_train(
                    &corpus,
                    &set,
                    &ck.model(),
                    &pipeline.model,
                    &pipeline.stage3,
                )?
            };
            let m = manifest(vec![&s], &set);
            save_checkpoint(out, s.checkpoint, &fp)?;
            m
        }
    };
    json::write_pretty(&out.join("manifest.json"), &m)
}

fn evaluate_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    task: TaskKind,
    setting: Setting,
    corpus: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let ck = load_checkpoint(ckpt, &fp)?;
    if let Some(c) = corpus {
        load_corpus(c, &fp)?;
    }
    let r = cfg.resolved();
    let task = build_task(task, &r.generator, &cfg.schema()?, &r.eval)?;
    let mut report = evaluate(&ck.model(), &task, setting, ck.temperature, &r.eval)?;
    report.fingerprint = Some(fp);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    json::write_pretty(out, &report)
}

fn export_cmd(cfg: &RunConfig, ckpt: &Path, task: TaskKind, out: &Path) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let ck = load_checkpoint(ckpt, &fp)?;
    let r = cfg.resolved();
    let task = build_task(task, &r.generator, &cfg.schema()?, &r.eval)?;
    let csv = export_embeddings(&ck.model(), &task.items)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    json::write_file(out, &csv)?;
    let mut meta = out.as_os_str().to_owned();
    meta.push(".meta.json");
    json::write_pretty(
        Path::new(&meta),
        &json!({
            "fingerprint": fp,
            "task": task.kind,
            "stage": ck.stage,
            "rows": task.items.len(),
            "dim": ck.model().embed_dim(),
        }),
    )
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let variants = parse_variants(&cfg.ablation.variants)?;
    let mut report = run_ablation(cfg, &variants)?;
    report.fingerprint = Some(fp.clone());
    create_dir(out)?;
    json::write_pretty(&out.join("ablation.json"), &report)?;
    let md = format!("<!-- fingerprint {fp} -->\n{}", report.to_markdown());
    json::write_file(&out.join("ablation.md"), &md)
}
