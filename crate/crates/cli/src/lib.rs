//! Command-line front end: corpus generation, incremental training,
//! evaluation, ablation grids and report collection.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edl_ciss::edl::Rectifier;
use edl_ciss::metrics::{self, MetricsReport};
use edl_ciss::model::{load_checkpoint, HeadMode};
use edl_ciss::protocol::{
    generate_shapes_corpus, load_corpus, save_corpus, ClassId, Corpus, IncrementPlan, Setting, SizeProfile,
};
use edl_ciss::trainer::{self, RunOutcome};

pub use config::RunConfig;

/// Keeps glibc from returning the tape's large per-iteration buffers to the
/// OS after every step, which otherwise costs about a third of training
/// time in page faults. No-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds and is called with
    // valid parameter constants.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 25);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[derive(Debug, Parser)]
#[command(name = "edl-ciss", version, about = "Class-incremental segmentation with an evidential head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes corpus on disk.
    GenData(GenDataArgs),
    /// Train every step of an incremental task.
    Train(RunArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Train a grid of variants and tabulate their metrics.
    Ablate(AblateArgs),
    /// Collect the per-step reports of finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Run seed; drives corpus generation and training [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of foreground classes [default: 10].
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of images [default: 200].
    #[arg(long)]
    pub images: Option<usize>,
    /// Square image size in pixels [default: 64].
    #[arg(long)]
    pub size: Option<usize>,
    /// Class size/frequency profile [default: balanced].
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Balanced,
    Imbalanced,
}

impl From<ProfileArg> for SizeProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Balanced => SizeProfile::Balanced,
            ProfileArg::Imbalanced => SizeProfile::Imbalanced,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory [default: $EDL_CISS_OUT/corpus-s<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `B-I` (e.g. 5-1) or `joint` [default: 5-1].
    #[arg(long)]
    pub task: Option<String>,
    /// overlapped, disjoint, pseudo_disjoint or joint [default: overlapped].
    #[arg(long)]
    pub setting: Option<Setting>,
    /// Comma-separated class ids [default: 1..=classes].
    #[arg(long, value_delimiter = ',')]
    pub class_order: Option<Vec<ClassId>>,
    /// Load the corpus from a gen-data directory instead of generating it.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub gen: CorpusArgs,
    /// relu, exp or exp_sigmoid [default: exp_sigmoid].
    #[arg(long)]
    pub rectifier: Option<Rectifier>,
    /// evidential_implicit_bg or softmax_explicit_bg [default: evidential_implicit_bg].
    #[arg(long)]
    pub head_mode: Option<HeadMode>,
    #[arg(long)]
    pub lambda_ce: Option<f64>,
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_incremental: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub lr_incremental: Option<f64>,
    /// Random crop as HxW.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<[usize; 2]>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fg_bg_balancing: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub increment_balancing: Option<bool>,
    /// Run directory [default: $EDL_CISS_OUT/<command>-<task>-<setting>-s<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_crop(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok([p(h)?, p(w)?])
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration used to regenerate the corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub gen: CorpusArgs,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub balancing: Option<bool>,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    pub train_split: bool,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Rectifier,
    HeadMode,
    Balancing,
    Kd,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Rectifier => "rectifier",
            Grid::HeadMode => "head_mode",
            Grid::Balancing => "balancing",
            Grid::Kd => "kd",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Grids to run; repeat or comma-separate [default: all].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub grid: Vec<Grid>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Also write the output here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

pub fn run(cli: Cli) -> Result<()> {
    tune_allocator();
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn apply_corpus_args(cfg: &mut RunConfig, args: &CorpusArgs) {
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(k) = args.classes {
        cfg.corpus.num_classes = k;
    }
    if let Some(n) = args.images {
        cfg.corpus.images = n;
    }
    if let Some(s) = args.size {
        cfg.corpus.height = s;
        cfg.corpus.width = s;
    }
    if let Some(p) = args.profile {
        cfg.corpus.size_profile = p.into();
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    apply_corpus_args(&mut cfg, &args.gen);
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = args.$flag.clone() { $target = v.into(); })*
        };
    }
    set! {
        lambda_ce => t.loss.lambda_ce,
        lambda_kd => t.loss.lambda_kd,
        epochs => t.epochs,
        batch_size => t.batch_size,
        lr_base => t.lr_base,
        lr_incremental => t.lr_incremental,
        fg_bg_balancing => t.loss.fg_bg_balancing,
        increment_balancing => t.increment_balancing,
    }
    if let Some(e) = args.epochs_incremental {
        t.epochs_incremental = Some(e);
    }
    if let Some(c) = args.crop {
        t.crop = Some(c);
    }
    set! {
        task => cfg.task,
        setting => cfg.setting,
        rectifier => cfg.model.rectifier,
        head_mode => cfg.model.head_mode,
    }
    if let Some(order) = &args.class_order {
        cfg.class_order = Some(order.clone());
    }
    if let Some(dir) = &args.corpus {
        cfg.corpus_dir = Some(dir.clone());
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the configured corpus or generates it in memory. A loaded corpus
/// replaces the generator settings in `cfg`.
pub fn obtain_corpus(cfg: &mut RunConfig) -> Result<Corpus> {
    match &cfg.corpus_dir {
        Some(dir) => {
            let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            cfg.corpus = corpus.config.clone();
            Ok(corpus)
        }
        None => Ok(generate_shapes_corpus(&cfg.corpus)?),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_artifacts(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing artifacts: {}", missing.join(", "));
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    apply_corpus_args(&mut cfg, &args.corpus);
    cfg.corpus.validate()?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| RunConfig::default().output_dir(&format!("corpus-s{}", cfg.corpus.seed)));
    let corpus = generate_shapes_corpus(&cfg.corpus)?;
    let manifest = save_corpus(&corpus, &dir)?;
    println!("corpus written to {}", dir.display());
    println!("{:>5} {:>7} {:>9}", "class", "images", "pixels");
    println!("{:>5} {:>7} {:>9}", 0, corpus.samples.len(), manifest.background_pixels);
    for stat in &manifest.class_histogram {
        println!("{:>5} {:>7} {:>9}", stat.class, stat.images, stat.pixels);
    }
    ensure_artifacts(&[dir.join("manifest.json")])
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Per-step table with values in percent.
pub fn summary_table(reports: &[&MetricsReport]) -> String {
    let mut out = format!("{:>4} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "step", "classes", "base", "new", "all", "inc");
    for r in reports {
        let _ = writeln!(
            out,
            "{:>4} {:>7} {:>7} {:>7} {:>7} {:>7}",
            r.step,
            r.learned_classes.len(),
            fmt_pct(r.base),
            fmt_pct(r.new),
            fmt_pct(r.all),
            fmt_pct(r.inc_miou)
        );
    }
    out
}

pub fn summary_csv(reports: &[&MetricsReport]) -> String {
    let mut out = format!("{}\n", metrics::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn run_name(command: &str, cfg: &RunConfig) -> String {
    format!("{command}-{}-{}-s{}", cfg.task, cfg.setting, cfg.train.seed)
}

/// Trains `cfg` into `dir`: resolved config, per-step checkpoints and
/// reports, training log, summary CSV and final report.
pub fn train_into(mut cfg: RunConfig, dir: &Path) -> Result<RunOutcome> {
    let corpus = obtain_corpus(&mut cfg)?;
    let plan = cfg.plan(corpus.num_classes())?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.output = Some(dir.to_path_buf());
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let outcome = trainer::run_plan(&plan, &corpus, &cfg.model, &cfg.train, Some(dir))?;
    let reports = outcome.reports();
    write_file(&dir.join("summary.csv"), summary_csv(&reports))?;
    write_file(
        &dir.join("final_report.json"),
        serde_json::to_string_pretty(outcome.final_report())? + "\n",
    )?;
    let mut expected = vec![
        dir.join("config.json"),
        dir.join("summary.csv"),
        dir.join("final_report.json"),
        dir.join("training_log.csv"),
    ];
    for t in 0..plan.num_increments() {
        let step = trainer::step_dir(dir, t);
        expected.push(step.join("checkpoint.bin"));
        expected.push(step.join("report.json"));
    }
    ensure_artifacts(&expected)?;
    Ok(outcome)
}

fn cmd_train(args: &RunArgs) -> Result<RunOutcome> {
    let cfg = resolve_config(args)?;
    let dir = cfg.output_dir(&run_name("train", &cfg));
    let outcome = train_into(cfg, &dir)?;
    print!("{}", summary_table(&outcome.reports()));
    println!("run written to {}", dir.display());
    Ok(outcome)
}

/// Plan covering a checkpoint's learned increments, with any remaining
/// classes as one trailing increment.
fn plan_for_checkpoint(increments: &[usize], class_order: &[ClassId]) -> Result<IncrementPlan> {
    let learned: usize = increments.iter().sum();
    if learned > class_order.len() {
        bail!("checkpoint learned {learned} classes but its class order lists {}", class_order.len());
    }
    let mut sizes = increments.to_vec();
    if learned < class_order.len() {
        sizes.push(class_order.len() - learned);
    }
    let setting = if sizes.len() == 1 {
        Setting::Joint
    } else {
        Setting::Overlapped
    };
    Ok(IncrementPlan::new(class_order.to_vec(), sizes, setting, None)?)
}

fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let (header, model) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    apply_corpus_args(&mut cfg, &args.gen);
    if let Some(dir) = &args.corpus {
        cfg.corpus_dir = Some(dir.clone());
    }
    let corpus = obtain_corpus(&mut cfg)?;
    let k = corpus.num_classes();
    if let Some(&c) = header.class_order.iter().find(|&&c| c as usize > k) {
        bail!("class order mismatch: checkpoint class {c} is not in the {k}-class corpus");
    }
    if let Some(order) = &cfg.class_order {
        if order != &header.class_order {
            bail!("class order mismatch: checkpoint {:?}, configuration {order:?}", header.class_order);
        }
    }
    let plan = plan_for_checkpoint(&header.increments, &header.class_order)?;
    let samples = if args.train_split { corpus.train() } else { corpus.test() };
    let balancing = args.balancing.unwrap_or(false);
    let report = metrics::evaluate(&model, &samples, &plan, header.increments.len() - 1, balancing)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    if let Some(out) = &args.out {
        write_file(out, &json)?;
        ensure_artifacts(&[out.clone()])?;
    }
    Ok(report)
}

/// Named variants of `base` for one grid.
pub fn grid_cells(grid: Grid, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Rectifier => Rectifier::ALL
            .iter()
            .map(|&r| (r.name().to_string(), with(&|c| c.model.rectifier = r)))
            .collect(),
        Grid::HeadMode => [HeadMode::EvidentialImplicitBg, HeadMode::SoftmaxExplicitBg]
            .iter()
            .map(|&m| (m.name().to_string(), with(&|c| c.model.head_mode = m)))
            .collect(),
        Grid::Balancing => [false, true]
            .iter()
            .map(|&on| {
                let name = if on { "with" } else { "without" };
                (
                    name.to_string(),
                    with(&|c| {
                        c.train.loss.fg_bg_balancing = on;
                        c.train.increment_balancing = on;
                    }),
                )
            })
            .collect(),
        Grid::Kd => [0.0, 10.0]
            .iter()
            .map(|&l| (format!("lambda_kd={l}"), with(&|c| c.train.loss.lambda_kd = l)))
            .collect(),
    }
}

pub const ABLATION_CSV_HEADER: &str = "grid,cell,status,base,new,all,inc_miou,error";

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = resolve_config(&args.run)?;
    let grids = if args.grid.is_empty() {
        vec![Grid::Rectifier, Grid::HeadMode, Grid::Balancing, Grid::Kd]
    } else {
        args.grid.clone()
    };
    let dir = base.output_dir(&run_name("ablate", &base));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&base)? + "\n")?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    let mut failures = 0;
    println!("{:<10} {:<24} {:>7} {:>7} {:>7} {:>7}", "grid", "cell", "base", "new", "all", "inc");
    for grid in grids {
        for (name, mut cell) in grid_cells(grid, &base) {
            let cell_dir = dir.join(format!("{}-{}", grid.name(), name));
            cell.output = Some(cell_dir.clone());
            match train_into(cell, &cell_dir) {
                Ok(outcome) => {
                    let r = outcome.final_report();
                    let _ = writeln!(
                        csv,
                        "{},{},ok,{},{},{},{},",
                        grid.name(),
                        name,
                        csv_opt(r.base),
                        csv_opt(r.new),
                        csv_opt(r.all),
                        csv_opt(r.inc_miou)
                    );
                    println!(
                        "{:<10} {:<24} {:>7} {:>7} {:>7} {:>7}",
                        grid.name(),
                        name,
                        fmt_pct(r.base),
                        fmt_pct(r.new),
                        fmt_pct(r.all),
                        fmt_pct(r.inc_miou)
                    );
                }
                Err(e) => {
                    failures += 1;
                    let _ = writeln!(csv, "{},{},error,,,,,{}", grid.name(), name, csv_escape(&format!("{e:#}")));
                    println!("{:<10} {:<24} error: {e:#}", grid.name(), name);
                }
            }
        }
    }
    let path = dir.join("ablation.csv");
    write_file(&path, &csv)?;
    ensure_artifacts(&[path.clone()])?;
    println!("ablation table written to {}", path.display());
    if failures > 0 {
        bail!("{failures} grid cell(s) failed; see {}", path.display());
    }
    Ok(())
}

/// Step reports of a run directory, in step order.
pub fn read_run_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for t in 0.. {
        let path = trainer::step_dir(dir, t).join("report.json");
        if !path.is_file() {
            break;
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        reports.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    if reports.is_empty() {
        bail!("no step reports under {}", dir.display());
    }
    Ok(reports)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut out = String::new();
    let mut json_runs = Vec::new();
    for (i, dir) in args.runs.iter().enumerate() {
        let reports = read_run_reports(dir)?;
        let refs: Vec<&MetricsReport> = reports.iter().collect();
        match args.format {
            ReportFormat::Table => {
                let _ = writeln!(out, "{}", dir.display());
                out.push_str(&summary_table(&refs));
            }
            ReportFormat::Csv => {
                let csv = summary_csv(&refs);
                let mut lines = csv.lines();
                let header = lines.next().unwrap_or_default();
                if i == 0 {
                    let _ = writeln!(out, "run,{header}");
                }
                for line in lines {
                    let _ = writeln!(out, "{},{line}", csv_escape(&dir.display().to_string()));
                }
            }
            ReportFormat::Json => json_runs.push(serde_json::json!({
                "run": dir.display().to_string(),
                "reports": reports,
            })),
        }
    }
    if let ReportFormat::Json = args.format {
        out = serde_json::to_string_pretty(&json_runs)? + "\n";
    }
    print!("{out}");
    if let Some(path) = &args.out {
        write_file(path, &out)?;
        ensure_artifacts(&[path.clone()])?;
    }
    Ok(())
}
