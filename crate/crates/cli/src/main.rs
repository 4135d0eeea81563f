//! `defectfill`: corpus, train, generate, eval and full-pipeline commands
//! driven by one JSON config with `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use defectfill_core::corpus::generate_corpus;
use defectfill_core::eval::{evaluate, EvalPart};
use defectfill_core::model::{load_checkpoint, save_checkpoint};
use defectfill_core::pipeline::{self, load_category_checkpoints, RunLayout};
use defectfill_core::trainer::write_loss_csv;
use defectfill_core::{
    Ablation, Dataset, Error, GeneratedSet, PipelineOptions, RunConfig, SelectionMetric,
};

#[derive(Parser, Debug)]
#[command(name = "defectfill", version, about = "Few-shot defect synthesis with a fine-tuned inpainting diffusion model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed copied into every stage except the corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus.
    Corpus,
    /// Pre-train the base model or fine-tune one defect category.
    Train(TrainArgs),
    /// Inpaint defects into reference normals with heldout masks.
    Generate(GenerateArgs),
    /// Score a generated set against the heldout split.
    Eval(EvalArgs),
    /// Corpus, training, generation and evaluation in one run.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Category to fine-tune; required with `--mode finetune`.
    #[arg(long)]
    category: Option<String>,
    /// Corpus directory; rendered from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base checkpoint to fine-tune from.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Step count for the chosen mode.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Corpus directory; rendered from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding `{category}.bin` checkpoints.
    #[arg(long)]
    ckpt: PathBuf,
    /// Categories to generate; all with a checkpoint when omitted.
    #[arg(long, value_delimiter = ',')]
    category: Vec<String>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Keep the first sample instead of selecting among candidates.
    #[arg(long)]
    no_lfs: bool,
    #[arg(long)]
    metric: Option<SelectionMetric>,
    /// Generated images per category (before repeats).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Corpus directory with the heldout split.
    #[arg(long)]
    data: PathBuf,
    /// Generated set directory.
    #[arg(long)]
    generated: PathBuf,
    /// Restrict to these parts (kid, ic_diversity, accuracy, auroc, ap, f1_max, pro).
    #[arg(long, value_delimiter = ',')]
    eval_only: Vec<EvalPart>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Drop one loss term during fine-tuning.
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Reuse a pre-trained base checkpoint.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateArg {
    Def,
    Obj,
    Attn,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::Def => Ablation::Def,
            AblateArg::Obj => Ablation::Obj,
            AblateArg::Attn => Ablation::Attn,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 data, 4 numeric; anything else is a data problem.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Numeric(_)) => 4,
        _ => 3,
    }
}

fn load_config(g: &Global, extra: &[String]) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    overrides.extend_from_slice(extra);
    let mut config = base.with_overrides(&overrides)?;
    if g.seed.is_some() {
        config.seed = g.seed;
    }
    Ok(config.resolve()?)
}

fn out_dir(g: &Global, config: &RunConfig) -> PathBuf {
    g.out.clone().unwrap_or_else(|| config.output_root.clone())
}

fn corpus_for(data: Option<&Path>, config: &RunConfig) -> Result<Dataset> {
    Ok(match data {
        Some(d) => Dataset::load(d).with_context(|| format!("loading corpus from {}", d.display()))?,
        None => generate_corpus(&config.corpus)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Corpus => {
            let config = load_config(g, &[])?;
            let out = out_dir(g, &config);
            let ds = generate_corpus(&config.corpus)?;
            ds.save(&out)?;
            config.write_echo(&out.join("config.json"))?;
            println!("wrote {} records to {}", ds.records().len(), out.display());
        }
        Command::Train(a) => train(g, a)?,
        Command::Generate(a) => generate(g, a)?,
        Command::Eval(a) => {
            let mut extra = Vec::new();
            if !a.eval_only.is_empty() {
                let parts: Vec<String> = a.eval_only.iter().map(|p| format!("{:?}", part_name(*p))).collect();
                extra.push(format!("eval.only=[{}]", parts.join(",")));
            }
            let config = load_config(g, &extra)?;
            let out = out_dir(g, &config);
            let corpus = Dataset::load(&a.data)?;
            let generated = GeneratedSet::load(&a.generated)?;
            let report = evaluate(&generated, &corpus, &config.eval, config.echo(), None)?;
            report.save(&out)?;
            config.write_echo(&out.join("config.json"))?;
            print!("{}", report.to_csv());
        }
        Command::Pipeline(a) => {
            let config = load_config(g, &[])?;
            let out = out_dir(g, &config);
            let options = PipelineOptions {
                base: a.base.clone(),
                ablate: a.ablate.map(Into::into),
            };
            let result = defectfill_core::run_pipeline(&config, &out, &options)?;
            print!("{}", result.report.to_csv());
        }
    }
    Ok(())
}

fn part_name(p: EvalPart) -> &'static str {
    match p {
        EvalPart::Kid => "kid",
        EvalPart::IcDiversity => "ic-diversity",
        EvalPart::Accuracy => "accuracy",
        EvalPart::Localization => "localization",
    }
}

fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = a.steps {
        let key = match a.mode {
            Mode::Pretrain => "train.pretrain_steps",
            Mode::Finetune => "train.steps",
        };
        extra.push(format!("{key}={s}"));
    }
    let config = load_config(g, &extra)?;
    let layout = RunLayout::new(out_dir(g, &config));
    let corpus = corpus_for(a.data.as_deref(), &config)?;
    match a.mode {
        Mode::Pretrain => {
            if a.category.is_some() {
                bail!(Error::InvalidArgument("--category applies to --mode finetune only".into()));
            }
            let ck = pipeline::pretrain(&config, &corpus, |s, l| log_step("pretrain", s, l))?;
            save_checkpoint(&ck, &layout.base_checkpoint())?;
            write_loss_csv(&ck.loss_history, &layout.loss_csv("base"))?;
            println!("wrote {}", layout.base_checkpoint().display());
        }
        Mode::Finetune => {
            let Some(category) = &a.category else {
                bail!(Error::InvalidArgument("--mode finetune needs --category".into()));
            };
            let base_path = a.base.clone().unwrap_or_else(|| layout.base_checkpoint());
            if !base_path.exists() {
                bail!(Error::Data(format!("missing base checkpoint {}", base_path.display())));
            }
            let base = load_checkpoint(&base_path)?;
            let ck = pipeline::finetune(&config.train, &base, &corpus, category, |s, l| log_step(category, s, l))?;
            save_checkpoint(&ck, &layout.category_checkpoint(category))?;
            write_loss_csv(&ck.loss_history, &layout.loss_csv(category))?;
            println!("wrote {}", layout.category_checkpoint(category).display());
        }
    }
    config.write_echo(&layout.config())?;
    Ok(())
}

fn log_step(name: &str, step: u64, loss: f64) {
    if step % 50 == 0 {
        log::info!("{name} step {step} loss {loss:.5}");
    }
}

fn generate(g: &Global, a: &GenerateArgs) -> Result<()> {
    let mut extra = Vec::new();
    if a.no_lfs {
        extra.push("generate.candidates=1".to_string());
    } else if let Some(c) = a.candidates {
        extra.push(format!("generate.candidates={c}"));
    }
    if let Some(m) = a.metric {
        extra.push(format!("generate.metric={:?}", metric_name(m)));
    }
    if let Some(c) = a.count {
        extra.push(format!("generate.count={c}"));
    }
    if let Some(s) = a.steps {
        extra.push(format!("generate.steps={s}"));
    }
    let config = load_config(g, &extra)?;
    let out = out_dir(g, &config);
    let corpus = corpus_for(a.data.as_deref(), &config)?;
    let categories: Vec<String> = if a.category.is_empty() {
        corpus
            .categories()
            .into_iter()
            .filter(|c| a.ckpt.join(format!("{c}.bin")).exists())
            .filter(|c| config.categories.is_empty() || config.categories.contains(c))
            .collect()
    } else {
        a.category.clone()
    };
    if categories.is_empty() {
        bail!(Error::Data(format!("no category checkpoints found in {}", a.ckpt.display())));
    }
    let checkpoints: BTreeMap<_, _> = load_category_checkpoints(&a.ckpt, &categories)?;
    let generated = pipeline::generate(&config, &corpus, &checkpoints, &categories)?;
    generated.save(&out)?;
    config.write_echo(&out.join("config.json"))?;
    println!("wrote {} generated images to {}", generated.records.len(), out.display());
    Ok(())
}

fn metric_name(m: SelectionMetric) -> &'static str {
    match m {
        SelectionMetric::Psnr => "psnr",
        SelectionMetric::Ssim => "ssim",
        SelectionMetric::Perceptual => "perceptual",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let e = anyhow::Error::new(Error::Config("x".into()));
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::Error::new(Error::Numeric("nan".into()))), 4);
        assert_eq!(exit_code(&anyhow::Error::new(Error::Data("gone".into())).context("outer")), 3);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "defectfill", "generate", "--ckpt", "c", "--no-lfs", "--metric", "psnr", "--set", "generate.count=4",
        ])
        .unwrap();
        assert_eq!(cli.global.overrides, vec!["generate.count=4".to_string()]);
        match cli.command {
            Command::Generate(a) => {
                assert!(a.no_lfs);
                assert_eq!(a.metric, Some(SelectionMetric::Psnr));
            }
            _ => panic!("wrong command"),
        }
    }
}
