use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cascade_feedback::backends::external::{self, Server};
use cascade_feedback::backends::{AsrBackend, MtBackend, ReferenceAsr, ReferenceMt};
use cascade_feedback::cycle::{evaluate_cascade, run_ablation_mt_only, run_cycles};
use cascade_feedback::harness::{
    generate_synthetic_task, pretrain_reference, run_experiment_grid, ExperimentConfig, ExperimentPreset,
    TaskCorpora,
};
use cascade_feedback::metrics::{corpus_bleu, corpus_chrf, corpus_wer, ChrfParams};
use cascade_feedback::text::split_tokens;
use cascade_feedback::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cascade-feedback",
    version,
    about = "Cyclic feedback adaptation for ASR-MT cascades"
)]
struct Cli {
    /// JSON experiment config (task, loop, asr, mt sections)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the task and loop seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// `reference` or `external:<command>`
    #[arg(long, global = true, default_value = "reference")]
    backend: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task under <out>/corpora
    GenTask,
    /// Pre-train reference backends and write their snapshots
    Pretrain(PresetArg),
    /// Score the cascade on one split
    EvalCascade(EvalArgs),
    /// Run full cyclic feedback
    RunCycle(RunArgs),
    /// Run the MT-only ablation
    RunAblation(RunArgs),
    /// Run untuned / MT-only / full for several presets
    RunGrid {
        /// Comma-separated presets such as 100-100,25-25
        #[arg(long, default_value = "100-100,25-25,10-10")]
        presets: String,
    },
    /// ChrF, BLEU and WER of a hypothesis file against a reference file
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Serve reference backends over stdin/stdout
    ServeBackend(SnapshotArgs),
}

#[derive(Args)]
struct PresetArg {
    #[arg(long, default_value = "100-100")]
    preset: String,
}

#[derive(Args)]
struct SnapshotArgs {
    /// Defaults to <out>/snapshots/pretrained-asr.json
    #[arg(long)]
    asr_snapshot: Option<PathBuf>,
    /// Defaults to <out>/snapshots/pretrained-mt.json
    #[arg(long)]
    mt_snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    snapshots: SnapshotArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    snapshots: SnapshotArgs,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    backend: String,
}

impl Context {
    fn corpora_dir(&self) -> PathBuf {
        self.out.join("corpora")
    }

    fn corpora(&self) -> Result<TaskCorpora> {
        TaskCorpora::read(&self.corpora_dir())
    }

    fn snapshot_paths(&self, args: &SnapshotArgs) -> (PathBuf, PathBuf) {
        let dir = self.out.join("snapshots");
        (
            args.asr_snapshot
                .clone()
                .unwrap_or_else(|| dir.join("pretrained-asr.json")),
            args.mt_snapshot
                .clone()
                .unwrap_or_else(|| dir.join("pretrained-mt.json")),
        )
    }

    fn backends(&self, args: &SnapshotArgs) -> Result<(Box<dyn AsrBackend>, Box<dyn MtBackend>)> {
        if let Some(cmd) = self.backend.strip_prefix("external:") {
            let (asr, mt) = external::spawn(cmd)?;
            return Ok((Box::new(asr), Box::new(mt)));
        }
        if self.backend != "reference" {
            return Err(Error::input(format!("unknown backend {:?}", self.backend)));
        }
        let (asr_path, mt_path) = self.snapshot_paths(args);
        let read = |p: &Path| {
            fs::read(p).map_err(|e| Error::input(format!("cannot read snapshot {}: {e}", p.display())))
        };
        Ok((
            Box::new(ReferenceAsr::from_snapshot(&read(&asr_path)?)?),
            Box::new(ReferenceMt::from_snapshot(&read(&mt_path)?)?),
        ))
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    io::BufReader::new(file)
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}

#[derive(Serialize)]
struct ScoreReport {
    chrf: f64,
    bleu: f64,
    wer: f64,
    n_sentences: usize,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.task.seed = seed;
        cfg.loop_cfg.seed = seed;
    }
    let ctx = Context {
        cfg,
        out: cli.out,
        backend: cli.backend,
    };
    match cli.command {
        Command::GenTask => {
            let task = generate_synthetic_task(&ctx.cfg.task)?;
            task.write(&ctx.corpora_dir())?;
            print_json(&task.stats())?;
        }
        Command::Pretrain(p) => {
            let preset = ExperimentPreset::parse(&p.preset)?;
            let (asr, mt) = pretrain_reference(&ctx.corpora()?, &preset, &ctx.cfg.asr, &ctx.cfg.mt)?;
            let dir = ctx.out.join("snapshots");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("pretrained-asr.json"), asr.snapshot()?)?;
            fs::write(dir.join("pretrained-mt.json"), mt.snapshot()?)?;
        }
        Command::EvalCascade(args) => {
            let corpora = ctx.corpora()?;
            let split = match args.split.as_str() {
                "finetune" => &corpora.finetune,
                "dev" => &corpora.dev,
                "test" => &corpora.test,
                other => return Err(Error::input(format!("unknown split {other:?}"))),
            };
            let (asr, mt) = ctx.backends(&args.snapshots)?;
            print_json(&evaluate_cascade(asr.as_ref(), mt.as_ref(), split)?)?;
        }
        Command::RunCycle(args) => run_loop(&ctx, &args, false)?,
        Command::RunAblation(args) => run_loop(&ctx, &args, true)?,
        Command::RunGrid { presets } => {
            if ctx.backend != "reference" {
                return Err(Error::input(
                    "run-grid pre-trains reference backends; use --backend reference",
                ));
            }
            let presets = presets
                .split(',')
                .map(ExperimentPreset::parse)
                .collect::<Result<Vec<_>>>()?;
            let rows = run_experiment_grid(&ctx.corpora()?, &presets, &ctx.cfg, Some(&ctx.out))?;
            print_json(&rows)?;
        }
        Command::Score { hyp, reference } => {
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            let ht: Vec<_> = hyps.iter().map(|h| split_tokens(h)).collect();
            let rt: Vec<_> = refs.iter().map(|r| split_tokens(r)).collect();
            print_json(&ScoreReport {
                chrf: corpus_chrf(&hyps, &refs, &ChrfParams::default())?,
                bleu: corpus_bleu(&ht, &rt)?,
                wer: corpus_wer(&ht, &rt)?,
                n_sentences: hyps.len(),
            })?;
        }
        Command::ServeBackend(args) => {
            let (asr_path, mt_path) = ctx.snapshot_paths(&args);
            let asr = ReferenceAsr::from_snapshot(&fs::read(asr_path)?)?;
            let mt = ReferenceMt::from_snapshot(&fs::read(mt_path)?)?;
            let stdin = io::stdin();
            Server::new(Box::new(asr), Box::new(mt)).serve(stdin.lock(), io::stdout().lock())?;
        }
    }
    Ok(())
}

fn run_loop(ctx: &Context, args: &RunArgs, ablation: bool) -> Result<()> {
    let corpora = ctx.corpora()?;
    let (mut asr, mut mt) = ctx.backends(&args.snapshots)?;
    let run = if ablation {
        run_ablation_mt_only
    } else {
        run_cycles
    };
    let report = run(
        asr.as_mut(),
        mt.as_mut(),
        &corpora.finetune,
        &corpora.dev,
        Some(&corpora.test),
        &ctx.cfg.loop_cfg,
        Some(&ctx.out),
    )?;
    let dir = ctx.out.join("snapshots");
    fs::write(dir.join("final-asr.json"), asr.snapshot()?)?;
    fs::write(dir.join("final-mt.json"), mt.snapshot()?)?;
    print_json(&serde_json::json!({
        "ablation": report.ablation,
        "initial_dev": report.initial_dev,
        "final_dev": report.final_dev,
        "untuned_test": report.untuned_test,
        "final_test": report.final_test,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
