//! Command-line front end. Every stage reads and writes plain files so the
//! stages can be re-run independently.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bank::{BankIndex, TextEmbeddingBank};
use crate::dataset::{build_dataset, GroupSpec};
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{compare_reports, evaluate, EvalReport, LabeledFeatures, WeightMode};
use crate::head::{HeadMeta, LinearHead};
use crate::projector::{
    estimate_gap, load_projector, ortho_diagnostics, save_gap, save_projector, search_lambda, write_json, RidgeConfig,
};
use crate::store::{self, EmbeddingMatrix, Manifest};
use crate::synth::{generate, write_bundle, Preset, SynthWorld};
use crate::templates::PromptTemplateSet;
use crate::train::{retrain, OptimizerKind, Schedule, TrainConfig};
use crate::vocab::{run_filter_pipeline_with, FilterOptions, FilteredVocabulary, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tldr", version, about = "Text-based last-layer retraining for frozen image classifiers")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Diagnostic log format on stderr.
    #[arg(long, global = true, default_value = "text", value_parser = ["text", "json"])]
    pub log: String,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Average image-minus-text differences over paired embeddings.
    GapEstimate(GapArgs),
    /// Fit the projector from joint-space embeddings to classifier features.
    FitProjector(FitArgs),
    /// Filter a generated vocabulary.
    Filter(FilterArgs),
    /// Write the (word, template) row layout a text bank must follow.
    BuildBankIndex(BankIndexArgs),
    /// Retrain the last layer on projected text embeddings.
    Retrain(RetrainArgs),
    /// Per-group and worst-group accuracy of a head.
    Evaluate(EvaluateArgs),
    /// Write a synthetic pipeline-ready directory.
    Synth(SynthArgs),
    /// Print a report, or the difference between two reports.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GapArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    /// Defaults to `<images stem>.manifest.json` when that file exists.
    #[arg(long)]
    pub images_manifest: Option<PathBuf>,
    #[arg(long)]
    pub texts_manifest: Option<PathBuf>,
    /// Use only the first N pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// l2-normalize each embedding first (diagnostics only).
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Joint-space image embeddings.
    #[arg(long)]
    pub x: PathBuf,
    /// Classifier features of the same images.
    #[arg(long)]
    pub y: PathBuf,
    /// Held-out pairs for choosing lambda; the fit pairs are used when absent.
    #[arg(long, requires = "val_y")]
    pub val_x: Option<PathBuf>,
    #[arg(long, requires = "val_x")]
    pub val_y: Option<PathBuf>,
    /// Gap vector to constrain against.
    #[arg(long, conflicts_with = "unconstrained", required_unless_present = "unconstrained")]
    pub gap: Option<PathBuf>,
    #[arg(long)]
    pub unconstrained: bool,
    /// Comma list or inclusive lo:hi:step range.
    #[arg(long, default_value = "1:100:1", value_parser = check_grid)]
    pub lambda_grid: String,
}

fn check_grid(s: &str) -> std::result::Result<String, String> {
    RidgeConfig::parse_grid(s)
        .and_then(|grid| RidgeConfig::new(grid, false))
        .map(|_| s.to_string())
        .map_err(|e| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct BankArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub bank_index: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Projector directory.
    #[arg(long)]
    pub projector: PathBuf,
    /// Frozen head directory.
    #[arg(long)]
    pub head: PathBuf,
    /// Group spec; every class pairs with every attribute when absent.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub relu: bool,
    /// Also drop attribute words that shift class logits.
    #[arg(long)]
    pub ttest: bool,
    /// Head for the t-test; the frozen head when absent.
    #[arg(long, requires = "ttest")]
    pub ttest_head: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub fdr_q: f64,
    /// Template index used for single-prompt embeddings.
    #[arg(long, default_value_t = 0)]
    pub template: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BankIndexArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Template list (JSON array); falls back to TLDR_TEMPLATES, then the built-in 80.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "sgd")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value = "none")]
    pub scheduler: Schedule,
    #[arg(long)]
    pub relu: bool,
    /// Project every bank row once before training.
    #[arg(long)]
    pub cache_projection: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrainArgs {
    /// Filtered vocabulary written by `filter`.
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long)]
    pub head_init: PathBuf,
    /// Validation features; labels and groups come from the manifest.
    #[arg(long)]
    pub val_features: PathBuf,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long, default_value = "train")]
    pub weights: WeightMode,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    pub report: PathBuf,
    /// Second report; prints per-group differences (this minus the first).
    #[arg(long)]
    pub against: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli.log);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            }
        }
    }
}

fn init_logging(format: &str) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    b.target(env_logger::Target::Stderr);
    if format == "json" {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn out_dir(cli: &Cli) -> std::result::Result<&Path, CliError> {
    let out = cli.out.as_deref().ok_or_else(|| CliError::Usage("the following required argument was not provided: --out <OUT>".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn run(cli: &Cli) -> std::result::Result<(), CliError> {
    let mut inputs = Inputs::default();
    match &cli.command {
        Command::GapEstimate(a) => {
            let out = out_dir(cli)?;
            gap_estimate(a, out, &mut inputs)?;
            write_run(cli, out, &inputs)?;
        }
        Command::FitProjector(a) => {
            let out = out_dir(cli)?;
            fit(a, out, &mut inputs)?;
            write_run(cli, out, &inputs)?;
        }
        Command::Filter(a) => {
            let out = out_dir(cli)?;
            filter(a, out, &mut inputs)?;
            write_run(cli, out, &inputs)?;
        }
        Command::BuildBankIndex(a) => {
            let out = out_dir(cli)?;
            bank_index(a, out, &mut inputs)?;
            write_run(cli, out, &inputs)?;
        }
        Command::Retrain(a) => {
            let out = out_dir(cli)?;
            retrain_cmd(a, cli.seed, out, &mut inputs)?;
            write_run(cli, out, &inputs)?;
        }
        Command::Evaluate(a) => {
            let out = out_dir(cli)?;
            let r = evaluate_cmd(a, out, &mut inputs)?;
            println!("{}", serde_json::json!({"wga": r.wga, "mean_acc": r.mean_acc}));
            write_run(cli, out, &inputs)?;
        }
        Command::Synth(a) => {
            let out = out_dir(cli)?;
            let world = SynthWorld::preset(a.preset, cli.seed);
            let bundle = generate(&world)?;
            write_bundle(&bundle, out)?;
            log::info!("wrote {:?} world (seed {}) to {}", a.preset, cli.seed, out.display());
            write_run(cli, out, &inputs)?;
        }
        Command::Report(a) => report(a, cli.out.as_deref(), &mut inputs)?,
    }
    Ok(())
}

/// Input files read by a command, keyed by path, with their SHA-256.
#[derive(Default, Serialize)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn add(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        self.0.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Every regular file directly inside `dir` except a previous `run.json`.
    fn add_dir(&mut self, dir: &Path) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file() && p.file_name() != Some("run.json".as_ref())).collect();
        files.sort();
        for f in files {
            self.add(&f)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a Command,
    seed: u64,
    threads: usize,
    log: &'a str,
    out: Option<&'a Path>,
    inputs: &'a Inputs,
}

fn write_run(cli: &Cli, out: &Path, inputs: &Inputs) -> Result<()> {
    let rec = RunRecord {
        command: &cli.command,
        seed: cli.seed,
        threads: cli.threads,
        log: &cli.log,
        out: cli.out.as_deref(),
        inputs,
    };
    write_json(&out.join("run.json"), &rec)
}

/// `foo.npy` → `foo.manifest.json`.
fn sibling_manifest(npy: &Path) -> PathBuf {
    npy.with_extension("manifest.json")
}

/// Loads a matrix and, if given or present next to it, its manifest, and
/// checks that the two agree.
fn load_paired(npy: &Path, manifest: Option<&Path>, inputs: &mut Inputs) -> Result<(EmbeddingMatrix, Option<Manifest>)> {
    let m = store::load_matrix(npy)?;
    inputs.add(npy)?;
    let path = match manifest {
        Some(p) => Some(p.to_path_buf()),
        None => Some(sibling_manifest(npy)).filter(|p| p.is_file()),
    };
    let Some(path) = path else { return Ok((m, None)) };
    let man = store::load_manifest(&path)?;
    inputs.add(&path)?;
    store::validate_pairing(&m, &man).map_err(|e| match e {
        Error::Pairing(msg) => Error::Pairing(format!("{} vs {}: {msg}", npy.display(), path.display())),
        other => other,
    })?;
    Ok((m, Some(man)))
}

fn load_labeled(npy: &Path, manifest: Option<&Path>, inputs: &mut Inputs) -> Result<LabeledFeatures> {
    let (m, man) = load_paired(npy, manifest, inputs)?;
    let man = man.ok_or_else(|| Error::Schema(format!("{} has no manifest with labels and groups", npy.display())))?;
    LabeledFeatures::from_manifest(m, &man)
}

fn load_bank(a: &BankArgs, inputs: &mut Inputs) -> Result<TextEmbeddingBank> {
    inputs.add(&a.bank)?;
    inputs.add(&a.bank_index)?;
    TextEmbeddingBank::load(&a.bank, &a.bank_index)
}

fn load_head(dir: &Path, inputs: &mut Inputs) -> Result<(LinearHead, Option<HeadMeta>)> {
    inputs.add_dir(dir)?;
    LinearHead::load(dir)
}

fn load_spec(path: &Path, inputs: &mut Inputs) -> Result<GroupSpec> {
    inputs.add(path)?;
    GroupSpec::load(path)
}

fn gap_estimate(a: &GapArgs, out: &Path, inputs: &mut Inputs) -> Result<()> {
    let (mut img, img_man) = load_paired(&a.images, a.images_manifest.as_deref(), inputs)?;
    let (mut txt, txt_man) = load_paired(&a.texts, a.texts_manifest.as_deref(), inputs)?;
    if let (Some(mi), Some(mt)) = (&img_man, &txt_man) {
        if mi.ids != mt.ids {
            return Err(Error::Pairing(format!(
                "{} and {} list different pair ids",
                a.images.display(),
                a.texts.display()
            )));
        }
    }
    let mut ids: Vec<String> = img_man.map(|m| m.ids).unwrap_or_default();
    if let Some(n) = a.pairs {
        if n == 0 || n > img.count() {
            return Err(Error::Data(format!("asked for {n} pairs, {} available", img.count())));
        }
        let rows: Vec<usize> = (0..n).collect();
        img = img.select(&rows);
        txt = txt.select(&rows);
        ids.truncate(n);
    }
    if a.normalize {
        log::warn!("normalizing embeddings; use for diagnostics only");
        img = img.l2_normalized();
        txt = txt.l2_normalized();
    }
    let est = estimate_gap(&img, &txt)?;
    log::info!(
        "gap from {} pairs: magnitude {:.4} ± {:.4}, direction {:.4} ± {:.4}",
        est.pair_count,
        est.magnitude.mean,
        est.magnitude.std,
        est.direction.mean,
        est.direction.std
    );
    save_gap(&est, &ids, a.normalize, out)
}

fn fit(a: &FitArgs, out: &Path, inputs: &mut Inputs) -> Result<()> {
    let (x, _) = load_paired(&a.x, None, inputs)?;
    let (y, _) = load_paired(&a.y, None, inputs)?;
    let (vx, vy) = match (&a.val_x, &a.val_y) {
        (Some(px), Some(py)) => (load_paired(px, None, inputs)?.0, load_paired(py, None, inputs)?.0),
        _ => {
            log::warn!("no held-out pairs given; choosing lambda on the fit pairs");
            (x.clone(), y.clone())
        }
    };
    let gap = match &a.gap {
        Some(p) => {
            inputs.add(p)?;
            Some(store::load_vector(p)?)
        }
        None => None,
    };
    let grid = RidgeConfig::parse_grid(&a.lambda_grid)?;
    let cfg = RidgeConfig::new(grid, gap.is_some())?;
    let (p, table) = search_lambda(&x, &y, &vx, &vy, gap.as_ref(), &cfg)?;
    if let Some(g) = &gap {
        let (l1, linf) = ortho_diagnostics(&p, g)?;
        log::info!("lambda {} ortho |W^T g|_1/d {:.3e}, max {:.3e}", p.lambda, l1, linf);
    } else {
        log::info!("lambda {} (unconstrained)", p.lambda);
    }
    save_projector(&p, out)?;
    write_json(&out.join("lambda_search.json"), &table)
}

fn filter(a: &FilterArgs, out: &Path, inputs: &mut Inputs) -> Result<()> {
    inputs.add(&a.vocab)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let bank = load_bank(&a.bank, inputs)?;
    inputs.add_dir(&a.projector)?;
    let (p, _) = load_projector(&a.projector)?;
    let (head, _) = load_head(&a.head, inputs)?;
    let ttest_head = match &a.ttest_head {
        Some(d) => Some(load_head(d, inputs)?.0),
        None => None,
    };
    let groups = match &a.groups {
        Some(g) => Some(load_spec(g, inputs)?.groups),
        None => None,
    };
    let opts = FilterOptions { relu: a.relu, ttest: a.ttest, fdr_q: a.fdr_q, template: a.template, groups };
    let fv = run_filter_pipeline_with(&vocab, &bank, &p, &head, ttest_head.as_ref(), &opts)?;
    let kept = fv.audit.iter().filter(|r| r.kept).count();
    log::info!("kept {kept} of {} words", fv.audit.len());
    fv.save(&out.join("filtered_vocab.json"))
}

fn bank_index(a: &BankIndexArgs, out: &Path, inputs: &mut Inputs) -> Result<()> {
    inputs.add(&a.vocab)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    if let Some(t) = &a.templates {
        inputs.add(t)?;
    }
    let templates = PromptTemplateSet::resolve(a.templates.as_deref())?;
    // anchors (category names) first, then every word
    let mut words: Vec<String> = Vec::new();
    for c in vocab.classes.iter().chain(&vocab.attributes) {
        words.push(c.name.clone());
    }
    for c in vocab.classes.iter().chain(&vocab.attributes) {
        words.extend(c.words.iter().cloned());
    }
    let index = BankIndex::word_major(&words, &templates);
    log::info!("{} rows ({} templates)", index.entries.len(), templates.len());
    index.save(&out.join("bank_index.json"))
}

fn retrain_cmd(a: &RetrainArgs, seed: u64, out: &Path, inputs: &mut Inputs) -> Result<()> {
    inputs.add(&a.vocab)?;
    let fv = FilteredVocabulary::load(&a.vocab)?;
    let bank = load_bank(&a.bank, inputs)?;
    inputs.add_dir(&a.projector)?;
    let (p, _) = load_projector(&a.projector)?;
    let (head_init, _) = load_head(&a.head_init, inputs)?;
    let val = load_labeled(&a.val_features, a.val_manifest.as_deref(), inputs)?;
    let spec = load_spec(&a.groups, inputs)?;
    let t = &a.train;
    let cfg = TrainConfig {
        optimizer: t.optimizer,
        lr: t.lr,
        weight_decay: t.weight_decay,
        momentum: t.momentum,
        batch_size: t.batch_size,
        epochs: t.epochs,
        scheduler: t.scheduler,
        relu_on_projection: t.relu,
        seed,
        cache_projection: t.cache_projection,
    };
    let ds = build_dataset(&fv, &spec, &bank)?;
    let (head, history) = retrain(&head_init, &ds, &p, &val, &spec, &cfg)?;
    let best = history.best_val_wga.unwrap_or(f64::NAN);
    log::info!("best epoch {} with validation WGA {best:.4}", history.best_epoch);
    let meta = HeadMeta {
        best_epoch: history.best_epoch,
        best_val_wga: best,
        config: serde_json::to_value(&cfg).expect("serializable"),
    };
    head.save(out, &meta)?;
    history.write_jsonl(&out.join("history.jsonl"))
}

fn evaluate_cmd(a: &EvaluateArgs, out: &Path, inputs: &mut Inputs) -> Result<EvalReport> {
    let (head, meta) = load_head(&a.head, inputs)?;
    let data = load_labeled(&a.features, a.manifest.as_deref(), inputs)?;
    let spec = load_spec(&a.groups, inputs)?;
    let mut report = evaluate(&head, &data, &spec, a.weights)?;
    report.head_meta = meta.map(|m| serde_json::to_value(m).expect("serializable"));
    report.save(&out.join("report.json"))?;
    Ok(report)
}

fn report(a: &ReportArgs, out: Option<&Path>, inputs: &mut Inputs) -> Result<()> {
    inputs.add(&a.report)?;
    let first = EvalReport::load(&a.report)?;
    let value = match &a.against {
        Some(b) => {
            inputs.add(b)?;
            let second = EvalReport::load(b)?;
            serde_json::to_value(compare_reports(&first, &second)?).expect("serializable")
        }
        None => {
            let mut t = String::from("y\ta\tn\tacc\n");
            for g in &first.per_group {
                t += &format!("{}\t{}\t{}\t{:.4}\n", g.y, g.a, g.n, g.acc);
            }
            eprintln!("{t}worst-group {:.4}  mean {:.4}", first.wga, first.mean_acc);
            serde_json::json!({"wga": first.wga, "mean_acc": first.mean_acc})
        }
    };
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report_summary.json"), &value)?;
    }
    Ok(())
}
