//! `cvqa`: generate, validate, train and evaluate continual VQA runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cvqa_core::curriculum::{
    evaluate_zero_shot, order_label, permutation_sweep, train_supervised, train_taskwise,
    ContinualRunner, CurriculumError, RunCheckpoint, RunConfig, SweepOptions, TrainMode,
};
use cvqa_core::datasets::{
    decode_prompt_table, encode_prompt_table, gen_synthetic, prompt_sets, validate_counts, Dataset,
    DatasetError, ExpectedCounts, SplitCounts, SplitDataset, SyntheticSpec,
};
use cvqa_core::embedding::{PromptSet, DEFAULT_TEMPERATURE};
use cvqa_core::evalreport::{emit_report, table1, ReportError, ReportFormat, RunReport};
use cvqa_core::replay::BufferPolicy;

use config::{FileConfig, RunSettings};

pub const DATA_DIR_ENV: &str = "CVQA_DATA_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<CurriculumError> for CliError {
    fn from(e: CurriculumError) -> Self {
        use CurriculumError as E;
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            E::RepeatedTask(_)
            | E::UnknownTask(_)
            | E::EmptyCurriculum
            | E::BadConfig(_)
            | E::WrongMode { .. }
            | E::TaskCount(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidSpec(_)
            | DatasetError::InfeasibleSeparation { .. }
            | DatasetError::BadFraction(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cvqa", version, about = "Continual-learning engine for embedding-based VQA")]
struct Cli {
    /// Flat TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a separable synthetic dataset, its manifest and a prompt table.
    GenSynthetic(GenArgs),
    /// Train in one mode and write the report, model and checkpoint.
    Train(TrainArgs),
    /// Zero-shot accuracy from prompt embeddings.
    Zeroshot(ZeroShotArgs),
    /// Continual runs over every task order and buffer policy.
    Sweep(SweepArgs),
    /// Check a dataset's structure and split counts.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output EMB1 path; relative paths live under the data directory.
    #[arg(long, default_value = "synthetic.emb1")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    #[arg(long, default_value_t = 3)]
    classes_per_task: usize,
    #[arg(long, default_value_t = 32)]
    dim_img: usize,
    #[arg(long, default_value_t = 32)]
    dim_txt: usize,
    /// Distance of every class mean from the origin, in noise standard deviations.
    #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
    separation: f64,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    run: RunSettings,
    /// Directory for the report, model and checkpoint.
    #[arg(long, default_value = "cvqa-out")]
    out: PathBuf,
    /// Continue a continual run from a RUN1 checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Store wall-clock time in the report (makes it nondeterministic).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Debug, Args)]
struct ZeroShotArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prompt-table EMB1; defaults to the one named in the manifest.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<u16>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    run: RunSettings,
    /// `all` or a comma-separated list of reservoir, ring, mof.
    #[arg(long, default_value = "all")]
    policies: String,
    /// `all` or orders separated by `;`, each a comma-separated id list.
    #[arg(long, default_value = "all")]
    orders: String,
    #[arg(long)]
    parallel: bool,
    /// Allow task counts other than three.
    #[arg(long)]
    allow_n: bool,
    #[arg(long, default_value = "cvqa-sweep")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// `floodnet` or a TOML file with expected counts. Without it the
    /// manifest's split assignment is the expectation.
    #[arg(long)]
    expected: Option<String>,
    /// Exit nonzero on any count mismatch.
    #[arg(long)]
    strict: bool,
}

fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn resolve_data(flag: Option<&PathBuf>, file: &FileConfig) -> Result<PathBuf, CliError> {
    let p = flag.cloned().or_else(|| file.data.as_ref().map(PathBuf::from)).ok_or_else(|| {
        CliError::Usage("no dataset given: pass --data or set `data` in the config file".into())
    })?;
    Ok(data_path(&p))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<SplitDataset, CliError> {
    Ok(Dataset::load(path)?.split(cfg.test_fraction, cfg.seed)?)
}

fn cmd_gen_synthetic(a: &GenArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        tasks: a.tasks,
        classes_per_task: a.classes_per_task,
        dim_img: a.dim_img,
        dim_txt: a.dim_txt,
        cluster_separation: a.separation,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        seed: a.seed,
    };
    let mut synth = gen_synthetic(&spec)?;
    let out = data_path(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("synthetic");
    let prompts_name = format!("{stem}.prompts.emb1");
    let prompts_path = out.with_file_name(&prompts_name);
    let table = encode_prompt_table(&synth.prompt_entries()?)?;
    std::fs::write(&prompts_path, table)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", prompts_path.display())))?;
    synth.dataset.manifest.prompts_file = Some(prompts_name);
    synth.dataset.save(&out)?;
    println!(
        "wrote {} ({} records, {} tasks x {} classes, dims {}/{})",
        out.display(),
        synth.dataset.records.len(),
        a.tasks,
        a.classes_per_task,
        a.dim_img,
        a.dim_txt
    );
    Ok(())
}

fn print_continual_summary(report: &RunReport) {
    let (Some(m), Some(avg)) = (&report.matrix, report.average_accuracy) else { return };
    let mut s = String::from("accuracy matrix (row i: after training task i)\n");
    for (i, row) in m.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:7.2}")).collect();
        let _ = writeln!(s, "  {}: {}", m.task_ids[i], cells.join(" "));
    }
    let _ = writeln!(s, "average accuracy {avg:.2}");
    if let Some(f) = &report.forgetting {
        let per: Vec<String> =
            m.task_ids.iter().zip(&f.per_task).map(|(id, v)| format!("task {id} {v:.2}")).collect();
        let _ = writeln!(s, "forgetting: {} (mean {:.2})", per.join(", "), f.mean);
    }
    print!("{s}");
}

fn write_run_outputs(report: &RunReport, out: &Path) -> Result<(), CliError> {
    emit_report(report, ReportFormat::Json, &out.join("report.json"))?;
    write_text(&out.join("tasks.csv"), &cvqa_core::evalreport::tasks_csv(report))?;
    if report.matrix.is_some() {
        emit_report(report, ReportFormat::Csv, &out.join("matrix.csv"))?;
        emit_report(report, ReportFormat::Svg, &out.join("curves.svg"))?;
    }
    Ok(())
}

fn save_model(model: &cvqa_core::nn::MlpModel<f32>, path: &Path) -> Result<(), CliError> {
    model.save(path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_file = resolve_data(a.data.as_ref(), file)?;
    let start = Instant::now();
    create_dir(&a.out)?;
    let ckpt_path = a.out.join("checkpoint.run1");

    let (report, cfg) = if let Some(resume) = &a.resume {
        if a.run != RunSettings::default() {
            return Err(CliError::Usage("--resume takes its run settings from the checkpoint".into()));
        }
        let ckpt = RunCheckpoint::load(resume)?;
        let data = load_split(&data_file, &ckpt.config)?;
        let cfg = ckpt.config.clone();
        let runner = ContinualRunner::resume(&data, ckpt)?;
        (run_continual(runner, &ckpt_path, &a.out)?, cfg)
    } else {
        let cfg = a.run.merged(&file.run).apply(RunConfig::default())?;
        let data = load_split(&data_file, &cfg)?;
        let report = match cfg.mode {
            TrainMode::Joint => {
                let (model, report) = train_supervised(&data, &cfg)?;
                save_model(&model, &a.out.join("model.mlp1"))?;
                report
            }
            TrainMode::Taskwise => {
                let (models, report) = train_taskwise(&data, &cfg)?;
                for (model, t) in models.iter().zip(&report.order) {
                    save_model(model, &a.out.join(format!("model-task{t}.mlp1")))?;
                }
                report
            }
            TrainMode::Continual | TrainMode::ContinualNoReplay => {
                run_continual(ContinualRunner::new(&data, &cfg)?, &ckpt_path, &a.out)?
            }
        };
        (report, cfg)
    };
    let mut report = report;
    if a.record_timing {
        report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    }
    write_run_outputs(&report, &a.out)?;
    print!("{}", table1(&[&report]));
    print_continual_summary(&report);
    for n in &report.notes {
        println!("note: {n}");
    }
    log::info!("{} finished; outputs in {}", cfg.method_label(), a.out.display());
    Ok(())
}

/// Steps through the remaining tasks, rewriting the checkpoint at every
/// task boundary.
fn run_continual(mut runner: ContinualRunner<'_>, ckpt: &Path, out: &Path) -> Result<RunReport, CliError> {
    while runner.step()? {
        runner.checkpoint().save(ckpt)?;
        log::info!("checkpoint after position {}", runner.state().next_position);
    }
    let (model, report) = runner.finish()?;
    save_model(&model, &out.join("model.mlp1"))?;
    Ok(report)
}

fn load_prompt_file(path: &Path) -> Result<Vec<PromptSet>, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("missing prompt table {}: {e}", path.display())))?;
    Ok(prompt_sets(&decode_prompt_table(&bytes)?)?)
}

fn cmd_zeroshot(a: &ZeroShotArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_file = resolve_data(a.data.as_ref(), file)?;
    let ds = Dataset::load(&data_file)?;
    let prompts = match &a.prompts {
        Some(p) => load_prompt_file(p)?,
        None => ds.load_prompts(&data_file)?,
    };
    let defaults = RunConfig::default();
    let fraction = a.test_fraction.or(file.run.test_fraction).unwrap_or(defaults.test_fraction);
    let seed = a.seed.or(file.run.seed).unwrap_or(defaults.seed);
    let data = ds.split(fraction, seed)?;
    let temperature = a.temperature.or(file.temperature).unwrap_or(DEFAULT_TEMPERATURE);
    let order = a.order.as_ref().or(file.run.order.as_ref());
    let report = evaluate_zero_shot(&data, &prompts, temperature, order.map(|o| o.as_slice()))?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_run_outputs(&report, out)?;
    }
    print!("{}", table1(&[&report]));
    Ok(())
}

fn parse_policies(s: &str) -> Result<Vec<BufferPolicy>, CliError> {
    if s == "all" {
        return Ok(BufferPolicy::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e: cvqa_core::replay::ReplayError| CliError::Usage(e.to_string())))
        .collect()
}

fn parse_orders(s: &str) -> Result<Option<Vec<Vec<u16>>>, CliError> {
    if s == "all" {
        return Ok(None);
    }
    s.split(';')
        .map(|o| {
            o.split(',')
                .map(|t| t.trim().parse::<u16>().map_err(|e| CliError::Usage(format!("bad task id `{t}`: {e}"))))
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn cmd_sweep(a: &SweepArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_file = resolve_data(a.data.as_ref(), file)?;
    let base = a.run.merged(&file.run).apply(RunConfig::default())?;
    let opts = SweepOptions {
        allow_n: a.allow_n,
        parallel: a.parallel,
        policies: parse_policies(&a.policies)?,
        orders: parse_orders(&a.orders)?,
    };
    let data = load_split(&data_file, &base)?;
    let result = permutation_sweep(&data, &base, &opts)?;
    create_dir(&a.out)?;
    for (row, report) in result.aggregate.rows.iter().zip(&result.reports) {
        let name = format!("run-{:02}-{}-{}.json", row.run_index, order_label(&row.order), row.policy);
        emit_report(report, ReportFormat::Json, &a.out.join(name))?;
    }
    write_text(&a.out.join("aggregate.csv"), &result.aggregate.to_csv())?;
    write_text(&a.out.join("ranking.csv"), &result.aggregate.ranking_csv())?;

    println!("{:<8}  {:<10}  {:>8}  {:>10}  {:>4}", "order", "policy", "final", "forgetting", "rank");
    for r in &result.aggregate.rows {
        let f = r.mean_forgetting.map_or_else(|| "-".to_string(), |f| format!("{f:.2}"));
        println!(
            "{:<8}  {:<10}  {:>8.2}  {:>10}  {:>4}",
            order_label(&r.order),
            r.policy.to_string(),
            r.final_average_accuracy,
            f,
            r.rank_within_order
        );
    }
    println!("ranking by mean final average accuracy:");
    for (i, (p, acc)) in result.aggregate.ranking.iter().enumerate() {
        println!("  {}. {p} {acc:.2}", i + 1);
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_file = resolve_data(a.data.as_ref(), file)?;
    let ds = Dataset::load(&data_file)?;
    let expected = match a.expected.as_deref() {
        Some("floodnet") => Some(ExpectedCounts::floodnet()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {path}: {e}")))?;
            Some(ExpectedCounts::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        None => ds.manifest.split.as_ref().map(|s| ExpectedCounts {
            name: ds.manifest.name.clone(),
            train: SplitCounts { records: s.train.len(), per_task: Default::default() },
            test: SplitCounts { records: s.test.len(), per_task: Default::default() },
        }),
    };
    println!(
        "{}: {} records, dims {}/{}, {} tasks, {} labels",
        data_file.display(),
        ds.records.len(),
        ds.manifest.dims.image,
        ds.manifest.dims.text,
        ds.manifest.tasks.len(),
        ds.manifest.num_labels()
    );
    let Some(expected) = expected else {
        println!("no split assignment and no --expected counts; structure is valid");
        return Ok(());
    };
    let report = validate_counts(&ds, &expected);
    print!("{report}");
    if report.is_ok() {
        println!("counts match");
    } else if a.strict {
        return Err(CliError::Data(format!("{} count mismatch(es)", report.mismatches.len())));
    } else {
        log::warn!("count mismatches found; rerun with --strict to fail");
    }
    Ok(())
}

fn run(args: impl IntoIterator<Item = OsString>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            return Err(CliError::Usage(text.trim_start_matches("error: ").to_string()));
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Train(a) => cmd_train(a, &file),
        Command::Zeroshot(a) => cmd_zeroshot(a, &file),
        Command::Sweep(a) => cmd_sweep(a, &file),
        Command::Validate(a) => cmd_validate(a, &file),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message().trim_end());
            ExitCode::from(e.code())
        }
    }
}
