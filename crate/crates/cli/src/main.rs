use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use neuract::evaluation::{embed, evaluation_windows, run_task, Representation, Split, Task};
use neuract::synthgen::{generate_dataset, load_dataset, save_dataset, SyntheticDataset};
use neuract::training::{
    input_shape, load_checkpoint, save_checkpoint, training_windows, Adapt, Method, Trainer,
    CHECKPOINT_NAME, METRICS_NAME,
};
use neuract::{nart, CheckpointF64, RunConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Self-supervised behavioral-neural representation learning on synthetic recordings.
#[derive(Parser, Debug)]
#[command(name = "neuract", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train an encoder pair and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Linear-probe evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Export per-window representations.
    Embed(EmbedArgs),
    /// Print the fully resolved configuration.
    ShowConfig(ConfigArg),
    /// Run the invariant suite (gradient checks, loss closed forms, augmentation oracles).
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run config; absent keys take their defaults [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Overrides data.seed [default: value from config, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides data.n_animals [default: value from config, 8]
    #[arg(long)]
    animals: Option<usize>,
    /// Omit action labels [default: false]
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Ours,
    Simclr,
    Regression,
    Supervised,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdaptArg {
    None,
    Grl,
    Mmd,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics log and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.method [default: value from config, ours]
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Overrides train.adapt [default: value from config, none]
    #[arg(long, value_enum)]
    adapt: Option<AdaptArg>,
    /// Disable swapping augmentation [default: false]
    #[arg(long)]
    no_swap: bool,
    /// Disable calcium augmentation [default: false]
    #[arg(long)]
    no_calcium_aug: bool,
    /// Overrides train.seed [default: value from config, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.epochs [default: value from config, 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the checkpoint in --out; config flags are not allowed [default: false]
    #[arg(long, conflicts_with_all = ["config", "method", "adapt", "no_swap", "no_calcium_aug", "seed", "epochs"])]
    resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Single,
    Multi,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReprArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Heldout,
    Training,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint written by train
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Overrides eval.fraction [default: value from config, 1.0]
    #[arg(long)]
    fraction: Option<f64>,
    /// Overrides eval.seed [default: value from config, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides eval.representation [default: value from config, pre]
    #[arg(long, value_enum)]
    representation: Option<ReprArg>,
    /// Overrides eval.split [default: value from config, all]
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Report JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Checkpoint written by train
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Embedding tensor path; metadata goes to `<out>.json`
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReprArg::Pre)]
    representation: ReprArg,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    /// Windows per forward pass
    #[arg(long, default_value_t = 64)]
    chunk: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Print a machine-readable pass/fail map [default: false]
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Data(neuract::Error),
    Verify(String),
}

impl From<neuract::Error> for Failure {
    fn from(e: neuract::Error) -> Self {
        Failure::Data(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(neuract::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

type CliResult<T> = Result<T, Failure>;

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    Ok(match &arg.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    if let Some(n) = args.animals {
        cfg.data.n_animals = n;
    }
    if args.unlabeled {
        cfg.data.labeled = false;
    }
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.data)?;
    save_dataset(&dataset, &args.out)?;
    cfg.echo_into(&args.out)?;
    log::info!(
        "wrote {} recordings to {}",
        dataset.recordings.len(),
        args.out.display()
    );
    Ok(())
}

fn resolve_train(args: &TrainArgs, dataset: &SyntheticDataset) -> CliResult<RunConfig> {
    let mut cfg = load_config(&args.config)?;
    cfg.data = dataset.config.clone();
    let t = &mut cfg.train;
    if let Some(m) = args.method {
        t.method = match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Simclr => Method::Simclr,
            MethodArg::Regression => Method::Regression,
            MethodArg::Supervised => Method::Supervised,
        };
    }
    if let Some(a) = args.adapt {
        t.adapt = match a {
            AdaptArg::None => Adapt::None,
            AdaptArg::Grl => Adapt::Grl,
            AdaptArg::Mmd => Adapt::Mmd,
        };
    }
    if args.no_swap {
        t.swap = false;
    }
    if args.no_calcium_aug {
        t.calcium_aug = false;
    }
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        t.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn append_metric(
    log: &mut fs::File,
    path: &Path,
    rec: &neuract::training::MetricRecord,
) -> CliResult<()> {
    let line = serde_json::to_string(rec).expect("metric records serialize");
    writeln!(log, "{line}").map_err(|e| io_err(path, e))
}

fn train(args: TrainArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let ckpt_path = args.out.join(CHECKPOINT_NAME);
    let log_path = args.out.join(METRICS_NAME);
    let (setup, resumed) = if args.resume {
        let ck: CheckpointF64 = load_checkpoint(&ckpt_path)?;
        (ck.header.setup.clone(), Some(ck))
    } else {
        let cfg = resolve_train(&args, &dataset)?;
        fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
        cfg.echo_into(&args.out)?;
        (cfg.setup(), None)
    };
    let windows = training_windows(&dataset, &setup)?;
    let mut trainer = match resumed {
        Some(ck) => {
            let done = ck.header.epochs_completed;
            // drop log lines written after the checkpoint was taken
            let text = fs::read_to_string(&log_path).unwrap_or_default();
            let kept: String = text.lines().take(done).map(|l| format!("{l}\n")).collect();
            fs::write(&log_path, kept).map_err(|e| io_err(&log_path, e))?;
            Trainer::resume(ck, &windows)?
        }
        None => {
            fs::write(&log_path, b"").map_err(|e| io_err(&log_path, e))?;
            Trainer::new(
                setup.clone(),
                &windows,
                input_shape(&dataset, &setup.windows),
                dataset.class_names.len(),
            )?
        }
    };
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch()?;
        log::info!("epoch {} loss {:.6} lr {:.3e}", rec.epoch, rec.loss, rec.lr);
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
        append_metric(&mut log, &log_path, &rec)?;
    }
    if trainer.state().epochs_completed == 0 {
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }
    Ok(())
}

fn representation(r: ReprArg) -> Representation {
    match r {
        ReprArg::Pre => Representation::PreProjection,
        ReprArg::Post => Representation::PostProjection,
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::All => Split::All,
        SplitArg::Heldout => Split::Heldout,
        SplitArg::Training => Split::Training,
    }
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(f) = args.fraction {
        cfg.eval.fraction = f;
    }
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if let Some(r) = args.representation {
        cfg.eval.representation = representation(r);
    }
    if let Some(s) = args.split {
        cfg.eval.split = split(s);
    }
    cfg.eval.validate()?;
    let ck: CheckpointF64 = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let set = evaluation_windows(&dataset, &ck, cfg.eval.split)?;
    let emb = embed(&ck, &set, cfg.eval.representation, cfg.eval.chunk)?;
    let task = match args.task {
        TaskArg::Single => Task::Single,
        TaskArg::Multi => Task::Multi,
        TaskArg::Identity => Task::Identity,
    };
    let mut report = run_task(&emb, task, &cfg.eval)?;
    report.method = Some(method_tag(&ck));
    let mut text = serde_json::to_string_pretty(&report).expect("reports serialize");
    text.push('\n');
    write_file(&args.out, text.as_bytes())?;
    // the resolved settings land next to the report
    let mut resolved = cfg.clone();
    resolved.data = dataset.config.clone();
    let echo = sibling(&args.out, "config.json");
    write_file(&echo, resolved.to_json_pretty().as_bytes())?;
    println!(
        "{} accuracy {:.4} (chance {:.4})",
        args.task.to_possible_value().expect("named").get_name(),
        report.mean_accuracy,
        report.chance
    );
    Ok(())
}

fn method_tag(ck: &CheckpointF64) -> String {
    let t = &ck.header.setup.train;
    let mut tag = serde_json::to_value(t.method)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    if t.method == Method::Ours && !(t.uses_swap() && t.uses_calcium_aug()) {
        tag.push_str(if t.uses_swap() {
            "-no-calcium-aug"
        } else if t.uses_calcium_aug() {
            "-no-swap"
        } else {
            "-no-aug"
        });
    }
    match t.adapt {
        Adapt::None => {}
        Adapt::Grl => tag.push_str("+grl"),
        Adapt::Mmd => tag.push_str("+mmd"),
    }
    tag
}

/// `report.json` -> `report.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn embed_cmd(args: EmbedArgs) -> CliResult<()> {
    if args.chunk == 0 {
        return Err(Failure::Usage("--chunk must be >= 1".into()));
    }
    let ck: CheckpointF64 = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let set = evaluation_windows(&dataset, &ck, split(args.split))?;
    let emb = embed(&ck, &set, representation(args.representation), args.chunk)?;
    write_file(&args.out, &nart::encode(&emb.values))?;
    let sidecar = json!({
        "tensor": args.out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "shape": emb.values.shape(),
        "representation": emb_repr_name(args.representation),
        "method": method_tag(&ck),
        "class_names": dataset.class_names,
        "windows": emb.meta(),
    });
    let mut text = serde_json::to_string_pretty(&sidecar).expect("metadata serializes");
    text.push('\n');
    let mut meta = args.out.clone().into_os_string();
    meta.push(".json");
    write_file(Path::new(&meta), text.as_bytes())?;
    Ok(())
}

fn emb_repr_name(r: ReprArg) -> &'static str {
    match r {
        ReprArg::Pre => "pre_projection",
        ReprArg::Post => "post_projection",
    }
}

fn show_config(args: ConfigArg) -> CliResult<()> {
    print!("{}", load_config(&args)?.to_json_pretty());
    Ok(())
}

fn verify(args: VerifyArgs) -> CliResult<()> {
    let report = neuract::verify::run_all();
    if args.json {
        let map = json!({
            "passed": report.passed,
            "suites": report.summary(),
            "checks": report.suites.iter().map(|s| {
                (s.name.clone(), s.checks.iter().map(|c| (c.name.clone(), c.passed)).collect::<BTreeMap<_, _>>())
            }).collect::<BTreeMap<_, _>>(),
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&map).expect("report serializes")
        );
    } else {
        for suite in &report.suites {
            println!(
                "{} {}",
                if suite.passed { "PASS" } else { "FAIL" },
                suite.name
            );
            for c in &suite.checks {
                println!(
                    "  {} {}: {}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
        }
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.clone())
            .collect();
        Err(Failure::Verify(format!(
            "failing suites: {}",
            failed.join(", ")
        )))
    }
}

fn report_failure(f: Failure) -> ExitCode {
    let (code, kind, message) = match f {
        Failure::Usage(m) => (EXIT_USAGE, "usage", m),
        Failure::Data(e) => {
            let kind = match e {
                neuract::Error::Config { .. } => "config",
                neuract::Error::MissingLabels(_) => "missing_labels",
                neuract::Error::Io { .. } => "io",
                _ => "data",
            };
            (EXIT_DATA, kind, e.to_string())
        }
        Failure::Verify(m) => (EXIT_VERIFY, "verify", m),
    };
    eprintln!(
        "{}",
        json!({ "error": kind, "message": message, "exit_code": code })
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_failure(Failure::Usage(e.render().to_string().trim().to_string())),
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed_cmd(a),
        Command::ShowConfig(a) => show_config(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_replaces_the_extension() {
        assert_eq!(
            sibling(Path::new("out/report.json"), "config.json"),
            PathBuf::from("out/report.config.json")
        );
        assert_eq!(
            sibling(Path::new("r"), "config.json"),
            PathBuf::from("r.config.json")
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
