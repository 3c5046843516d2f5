//! Command implementations behind the `organnet` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use organnet_core::data::{self, DataError, PhantomSpec};
use organnet_core::datamodel::{self, Spacing};
use organnet_core::engine::{self, CorpusReport, EngineError, NetworkSegmenter, OracleSegmenter, Segmenter};
use organnet_core::losses::{class_names, Dataset};
use organnet_core::network::{Network, NetworkError};
use organnet_core::report::{self, Column, TTest};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        data_err(e)
    }
}

impl From<datamodel::DataModelError> for CliError {
    fn from(e: datamodel::DataModelError) -> Self {
        data_err(e)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::ConfigHashMismatch { .. } => CliError::Config {
                path: "checkpoint".into(),
                message: e.to_string(),
            },
            NetworkError::InvalidConfig { field, .. } => CliError::Config {
                path: format!("network.{field}"),
                message: e.to_string(),
            },
            NetworkError::Gridding { .. } => CliError::Config {
                path: "network.hdc_dilations".into(),
                message: e.to_string(),
            },
            _ => data_err(e),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Diverged { .. } => CliError::Diverged(e.to_string()),
            EngineError::InvalidConfig { field, .. } => CliError::Config {
                path: format!("train.{field}"),
                message: e.to_string(),
            },
            EngineError::Network(n) => n.into(),
            _ => data_err(e),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io(path))
}

#[derive(Debug, Parser)]
#[command(name = "organnet", version, about = "Organ-at-risk segmentation: phantoms, training, evaluation")]
pub struct Cli {
    /// Run single-threaded so that every output is bit-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom corpus with a train/val/test split.
    Phantom(PhantomArgs),
    /// Train a network from a run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus and write report tables.
    Eval(EvalArgs),
    /// Segment one volume.
    Predict(PredictArgs),
    /// Combine several evaluation outputs into comparison tables.
    Report(ReportArgs),
    /// Print the run configuration JSON Schema.
    Schema,
}

/// `WxHxD` grid, e.g. `64x64x16`; stored as `[z, y, x]`.
fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected WxHxD, got `{s}`"));
    }
    let n: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a positive integer")))
        .collect::<Result<_, _>>()?;
    if n.contains(&0) {
        return Err("grid extents must be positive".into());
    }
    Ok([n[2], n[1], n[0]])
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Falls back to ORGANNET_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid as WxHxD (x, y, z).
    #[arg(long, value_parser = parse_grid, default_value = "64x64x16")]
    pub grid: [usize; 3],
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Train,val,test fractions.
    #[arg(long, value_parser = parse_triple, default_value = "0.75,0.125,0.125")]
    pub ratios: [f64; 3],
    /// Voxel spacing dx,dy,dz in mm.
    #[arg(long, value_parser = parse_triple, default_value = "1,1,2.5")]
    pub spacing: [f64; 3],
    #[arg(long)]
    pub size_ratio: Option<f64>,
    #[arg(long)]
    pub noise_hu: Option<f64>,
    #[arg(long)]
    pub smallest_voxels: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config leaf, e.g. `--set train.max_epochs=3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from `<output_dir>/last`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (weights.bin + manifest.json).
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Second checkpoint; adds its column and a paired t-test on per-case DSC.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Name classes after a dataset's organ list.
    #[arg(long)]
    pub dataset: Option<Dataset>,
    /// Column title (defaults to the variant name).
    #[arg(long)]
    pub title: Option<String>,
    /// Score the ground truth against itself instead of a network.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw-format case (stem or `.json`) or NIfTI image.
    #[arg(long)]
    pub input: PathBuf,
    /// Output label map stem (`.json` + `.seg`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories, one column each; the last one is the
    /// reference for the t-tests.
    #[arg(long = "eval", required = true)]
    pub evals: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the per-class table to these class ids.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub dataset: Option<Dataset>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let workers = if cli.deterministic { Some(1) } else { None };
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Train(a) => cmd_train(&a, workers),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Schema => {
            print!("{}", config::SCHEMA);
            Ok(())
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    match flag {
        Some(s) => Ok(s),
        None => config::env_seed().map(|s| s.unwrap_or(0)),
    }
}

pub fn cmd_phantom(a: &PhantomArgs) -> Result<(), CliError> {
    let [dx, dy, dz] = a.spacing;
    let spacing = Spacing::new(dx, dy, dz).map_err(|e| CliError::Config {
        path: "spacing".into(),
        message: e.to_string(),
    })?;
    let mut spec = PhantomSpec {
        spacing,
        ..PhantomSpec::new(resolve_seed(a.seed)?, a.grid, a.classes)
    };
    if let Some(v) = a.size_ratio {
        spec.size_ratio = v;
    }
    if let Some(v) = a.noise_hu {
        spec.noise_hu = v;
    }
    if let Some(v) = a.smallest_voxels {
        spec.smallest_voxels = v;
    }
    spec.validate().map_err(|e| match e {
        DataError::InvalidPhantom { field, .. } => CliError::Config {
            path: field.to_string(),
            message: e.to_string(),
        },
        e => data_err(e),
    })?;
    let corpus = data::phantom_corpus(&spec, a.n, a.ratios)?;
    data::write_corpus(&a.out, &corpus)?;
    let s = &corpus.split;
    println!(
        "wrote {} phantoms to {} (train {}, val {}, test {})",
        corpus.cases.len(),
        a.out.display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn prepare_corpus(cfg: &RunConfig) -> Result<data::Corpus, CliError> {
    let dir = &cfg.data.corpus;
    if !dir.join(data::SPLIT_FILE).exists() {
        if let Some(p) = &cfg.data.phantom {
            let corpus = data::phantom_corpus(&p.spec, p.cases, cfg.data.split_ratios)?;
            data::write_corpus(dir, &corpus)?;
            log::info!("generated {} phantoms in {}", p.cases, dir.display());
        }
    }
    Ok(data::load_corpus(dir)?)
}

pub fn cmd_train(a: &TrainArgs, workers: Option<usize>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    cfg.train.seed = Some(cfg.seed()?);
    if let Some(w) = workers {
        cfg.data.workers = w;
    }
    let corpus = prepare_corpus(&cfg)?;
    let shape = cfg.data.input_shape;
    let train = data::preprocess_corpus(&corpus.train(), shape, cfg.data.workers)?;
    let val = data::preprocess_corpus(&corpus.val(), shape, cfg.data.workers)?;
    let seed = cfg.train.seed.expect("resolved above");
    let net = Network::build(&cfg.network, seed)?;
    println!(
        "{}: {} parameters, {} training / {} validation cases at {:?}",
        cfg.network.variant.title(),
        net.count_parameters(),
        train.len(),
        val.len(),
        shape
    );
    fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serialises");
    write(&cfg.output_dir.join("run_config.json"), &(resolved + "\n"))?;
    let mut print = |r: &engine::EpochRecord| {
        println!(
            "epoch {:>4}  lr {:.1e}  loss {:.5} (focal {:.5}, dice {:.5})  val DSC {}",
            r.epoch,
            r.lr,
            r.train_loss.total,
            r.train_loss.focal,
            r.train_loss.dice,
            r.val_mean_dsc.map_or("-".into(), |d| format!("{d:.4}"))
        )
    };
    let opts = engine::TrainOptions {
        checkpoint_dir: Some(cfg.output_dir.clone()),
        resume_from: a.resume.then(|| cfg.output_dir.join("last")),
        on_epoch: Some(&mut print),
    };
    let (_, log) = engine::train(net, &train, &val, &cfg.train_config(), opts)?;
    if let Some(best) = &log.checkpoints.best {
        println!("best checkpoint: {}", best.display());
    }
    Ok(())
}

/// Everything `eval` writes to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: SplitChoice,
    pub columns: Vec<Column>,
    #[serde(default)]
    pub t_test: Option<TTest>,
}

fn select(corpus: &data::Corpus, split: SplitChoice) -> Vec<datamodel::CaseRecord> {
    match split {
        SplitChoice::Train => corpus.train(),
        SplitChoice::Val => corpus.val(),
        SplitChoice::Test => corpus.test(),
        SplitChoice::All => corpus.cases.clone(),
    }
}

fn load_segmenter(dir: &Path) -> Result<(NetworkSegmenter, String), CliError> {
    let (net, manifest) = Network::load_checkpoint(dir)?;
    let shape = manifest.input_shape.ok_or_else(|| {
        CliError::Data(format!("{}: checkpoint does not record its input shape", dir.display()))
    })?;
    let title = net.config().variant.title().to_string();
    Ok((NetworkSegmenter::new(net, shape)?, title))
}

fn names_for(dataset: Option<Dataset>, num_classes: usize) -> Result<Option<&'static [&'static str]>, CliError> {
    match dataset {
        None => Ok(None),
        Some(d) if d.num_classes() == num_classes => Ok(Some(class_names(d))),
        Some(d) => Err(CliError::Config {
            path: "dataset".into(),
            message: format!("{d} has {} classes, the model has {num_classes}", d.num_classes()),
        }),
    }
}

fn evaluate(seg: &dyn Segmenter, cases: &[datamodel::CaseRecord]) -> Result<CorpusReport, CliError> {
    Ok(engine::evaluate_corpus(seg, cases)?)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let corpus = data::load_corpus(&a.corpus)?;
    let cases = select(&corpus, a.split);
    if cases.is_empty() {
        return Err(CliError::Data(format!("split `{:?}` of {} is empty", a.split, a.corpus.display())));
    }
    let mut columns = Vec::new();
    if a.oracle {
        let c = cases[0]
            .labels()
            .ok_or_else(|| CliError::Data(format!("case `{}` has no labels", cases[0].id)))?
            .num_classes();
        let report = evaluate(&OracleSegmenter { num_classes: c }, &cases)?;
        columns.push(Column {
            title: a.title.clone().unwrap_or_else(|| "oracle".into()),
            report,
        });
    } else {
        let dir = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let (seg, title) = load_segmenter(dir)?;
        columns.push(Column {
            title: a.title.clone().unwrap_or(title),
            report: evaluate(&seg, &cases)?,
        });
    }
    let mut t_test = None;
    if let Some(other) = &a.compare {
        let (seg, title) = load_segmenter(other)?;
        let report = evaluate(&seg, &cases)?;
        let t = report::paired_t_test(&columns[0].report.case_dsc(), &report.case_dsc()).map_err(data_err)?;
        t_test = Some(t);
        let title = if title == columns[0].title { format!("{title} ({})", other.display()) } else { title };
        columns.push(Column { title, report });
    }
    let names = names_for(a.dataset, columns[0].report.num_classes)?;
    let out = EvalOutput {
        split: a.split,
        columns,
        t_test,
    };
    write_tables(&a.out, &out.columns, names, None, out.t_test.iter().map(|t| (out.columns[1].title.as_str(), *t)))?;
    let json = serde_json::to_string_pretty(&out).expect("report serialises");
    write(&a.out.join("report.json"), &(json + "\n"))?;
    for c in &out.columns {
        println!(
            "{}: mean DSC {:.4} ± {:.4}, mean 95HD {} over {} cases",
            c.title,
            c.report.mean_dsc.mean,
            c.report.mean_dsc.std,
            c.report.mean_hd95.map_or("undefined".into(), |m| format!("{:.2} mm", m.mean)),
            c.report.cases.len()
        );
    }
    if let Some(t) = out.t_test {
        println!("paired t-test on per-case DSC: t = {:.4}, p = {:.4}", t.t, t.p);
    }
    Ok(())
}

fn fmt_t(title: &str, t: &TTest) -> String {
    format!("| {title} | {:.4} | {} | {:.4} | {:+.4} |\n", t.t, t.df, t.p, t.mean_difference)
}

fn write_tables<'a>(
    dir: &Path,
    columns: &[Column],
    names: Option<&[&str]>,
    classes: Option<&[usize]>,
    tests: impl Iterator<Item = (&'a str, TTest)>,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut md = String::from("## Averaged over organs\n\n");
    md += &report::summary_markdown(columns).map_err(data_err)?;
    md += "\n## Per-organ DSC (%)\n\n";
    md += &report::class_markdown(columns, names, classes).map_err(data_err)?;
    let tests: Vec<_> = tests.collect();
    if !tests.is_empty() {
        md += "\n## Paired t-tests on per-case DSC\n\n| Against | t | df | p | mean difference |\n|---|---|---|---|---|\n";
        for (title, t) in &tests {
            md += &fmt_t(title, t);
        }
    }
    write(&dir.join("report.md"), &md)?;
    write(&dir.join("report.csv"), &report::csv(columns, names).map_err(data_err)?)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let (seg, _) = load_segmenter(&a.checkpoint)?;
    let case = datamodel::load_case(&a.input)?;
    let labels = seg.segment(&case)?;
    datamodel::save_labels(&labels, &a.out)?;
    let hist = labels.histogram();
    println!(
        "wrote {:?} labels to {} (voxels per class {:?})",
        labels.shape(),
        a.out.display(),
        hist
    );
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let mut columns = Vec::new();
    for dir in &a.evals {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let out: EvalOutput =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        columns.extend(out.columns.into_iter().take(1));
    }
    let num_classes = columns[0].report.num_classes;
    let names = names_for(a.dataset, num_classes)?;
    let reference = columns.last().expect("at least one --eval").clone();
    let mut tests = Vec::new();
    let ids = |c: &Column| c.report.cases.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    for c in &columns[..columns.len() - 1] {
        if ids(c) != ids(&reference) {
            return Err(CliError::Data(format!(
                "`{}` and `{}` were scored on different cases; paired tests need the same split",
                c.title, reference.title
            )));
        }
        let t =report::paired_t_test(&reference.report.case_dsc(), &c.report.case_dsc()).map_err(data_err)?;
        tests.push((c.title.clone(), t));
    }
    write_tables(
        &a.out,
        &columns,
        names,
        a.classes.as_deref(),
        tests.iter().map(|(s, t)| (s.as_str(), *t)),
    )?;
    let json = serde_json::json!({
        "columns": columns,
        "reference": reference.title,
        "t_tests": tests.iter().map(|(s, t)| serde_json::json!({"against": s, "test": t})).collect::<Vec<_>>(),
    });
    write(&a.out.join("report.json"), &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    print!("{}", fs::read_to_string(a.out.join("report.md")).map_err(io(&a.out))?);
    Ok(())
}
