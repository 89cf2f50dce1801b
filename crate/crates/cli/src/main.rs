use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hint_core::pipeline::{
    compare_baselines, run_with_data, sweep_k, Ablation, ModelSpec, PipelineConfig, PipelineData, RunOutput,
};
use hint_core::synth::{classification_task, generation_task, ClassificationSpec, GenerationSpec};
use hint_core::TaskKind;

#[derive(Parser)]
#[command(name = "hint", version, about = "Self-training for code models with hybrid pseudo-label selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-training loop.
    Run(RunArgs),
    /// Run every ablation variant with the same seed schedule.
    Compare(CompareArgs),
    /// Write a synthetic dataset and a matching config.
    GenToy(GenToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Generation,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::Generation => TaskKind::Generation,
        }
    }
}

/// Flags that override keys of the JSON config.
#[derive(Args)]
struct Overrides {
    /// JSON config mirroring the pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u32>,
    /// Percentage K kept by the loss filter.
    #[arg(long)]
    top_k: Option<f64>,
    /// Edit-distance threshold t.
    #[arg(long)]
    ned_threshold: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Constant substituted for log 0 in the reverse cross entropy.
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<f64>,
    #[arg(long)]
    transform_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// builtin-classifier, builtin-translator or adapter:<exec>.
    #[arg(long)]
    model: Option<ModelSpec>,
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t.into();
        }
        if let Some(p) = &self.labeled {
            cfg.labeled_path = p.clone();
        }
        if let Some(p) = &self.unlabeled {
            cfg.unlabeled_path = p.clone();
        }
        if let Some(p) = &self.heldout {
            cfg.heldout_path = Some(p.clone());
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.top_k {
            cfg.selection.top_k_percent = v;
        }
        if let Some(v) = self.ned_threshold {
            cfg.selection.t = v;
        }
        if let Some(v) = self.mu {
            cfg.objective.mu = v;
        }
        if let Some(v) = self.clip {
            cfg.objective.log_zero_clip = v;
        }
        if let Some(v) = self.transform_ratio {
            cfg.transform_ratio = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if cfg.labeled_path.as_os_str().is_empty() || cfg.unlabeled_path.as_os_str().is_empty() {
            bail!("labeled and unlabeled paths are required (via --config or --labeled/--unlabeled)");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Return the student with the best held-out score.
    #[arg(long)]
    select_best_iteration: bool,
    /// Run once per K in the grid instead of once.
    #[arg(long)]
    sweep_k: bool,
    /// Evaluation report path (JSON). Printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-example selection decisions (JSONL).
    #[arg(long)]
    emit_selection_report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_labeled: Option<usize>,
    #[arg(long)]
    n_unlabeled: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    /// Fraction of flipped labels in the labeled split (classification only).
    #[arg(long)]
    label_noise: Option<f64>,
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_selection_report(path: &Path, out: &RunOutput) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for (i, (report, ids)) in out.selections.iter().zip(&out.selected_ids).enumerate() {
        let iteration = i + 1;
        if report.decisions.is_empty() {
            // ablations that bypass the selector
            for id in ids {
                writeln!(w, "{}", json!({"iteration": iteration, "example_id": id, "verdict": "Accept", "reason": "unfiltered"}))?;
            }
            continue;
        }
        for d in &report.decisions {
            let mut line = serde_json::to_value(d)?;
            line["iteration"] = json!(iteration);
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn summary_line(out: &RunOutput) -> String {
    let r = &out.report;
    let metrics = r
        .final_heldout
        .as_ref()
        .map(|e| e.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" "))
        .unwrap_or_else(|| "no heldout set".into());
    format!("iteration {} returned: {metrics}", r.returned_iteration)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    cfg.select_best_iteration |= args.select_best_iteration;
    let data = PipelineData::load(&cfg)?;

    if args.sweep_k {
        let rows = sweep_k(&cfg, &data)?;
        let value = json!(rows.iter().map(|(k, r)| json!({"top_k_percent": k, "report": r})).collect::<Vec<_>>());
        return write_json(args.report.as_deref(), &value);
    }

    let out = run_with_data(&cfg, &data)?;
    if let Some(p) = &args.emit_selection_report {
        write_selection_report(p, &out)?;
    }
    eprintln!("{}", summary_line(&out));
    write_json(args.report.as_deref(), &serde_json::to_value(&out.report)?)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let data = PipelineData::load(&cfg)?;
    let rows = compare_baselines(&cfg, &data)?;
    let key = match cfg.task {
        TaskKind::Classification => "accuracy",
        TaskKind::Generation => "bleu4",
    };
    eprintln!("{:<20} {:>10}  selected per iteration", "variant", key);
    for r in &rows {
        let v = r.final_heldout.as_ref().and_then(|e| e.get(key)).map_or("-".into(), |v| format!("{v:.4}"));
        eprintln!("{:<20} {:>10}  {:?}", r.variant, v, r.selected_sizes);
    }
    write_json(args.report.as_deref(), &serde_json::to_value(&rows)?)
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<()> {
    let (task, kind, model) = match args.task {
        TaskArg::Classification => {
            let d = ClassificationSpec::default();
            let spec = ClassificationSpec {
                n_labeled: args.n_labeled.unwrap_or(d.n_labeled),
                n_unlabeled: args.n_unlabeled.unwrap_or(d.n_unlabeled),
                n_heldout: args.n_heldout.unwrap_or(d.n_heldout),
                label_noise: args.label_noise.unwrap_or(d.label_noise),
                seed: args.seed,
                ..d
            };
            (classification_task(&spec), TaskKind::Classification, ModelSpec::BuiltinClassifier)
        }
        TaskArg::Generation => {
            if args.label_noise.is_some() {
                bail!("--label-noise only applies to classification");
            }
            let d = GenerationSpec::default();
            let spec = GenerationSpec {
                n_labeled: args.n_labeled.unwrap_or(d.n_labeled),
                n_unlabeled: args.n_unlabeled.unwrap_or(d.n_unlabeled),
                n_heldout: args.n_heldout.unwrap_or(d.n_heldout),
                seed: args.seed,
                ..d
            };
            (generation_task(&spec), TaskKind::Generation, ModelSpec::BuiltinTranslator)
        }
    };
    task.write_to(&args.out)?;
    let cfg = PipelineConfig {
        task: kind,
        labeled_path: "labeled.jsonl".into(),
        unlabeled_path: "unlabeled.jsonl".into(),
        heldout_path: Some("heldout.jsonl".into()),
        model,
        seed: args.seed,
        ..PipelineConfig::default()
    };
    let path = args.out.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::GenToy(a) => cmd_gen_toy(a),
    }
}
