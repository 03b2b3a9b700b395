//! Command-line front end: data generation, training, evaluation, gradient
//! checking and ablation.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use code_core::checkpoint;
use code_core::data::{self, GeneratorSpec, Manifest, PostRecord};
use code_core::gradcheck::GradCheckConfig;
use code_core::model::{attention_maps, ModelConfig, ModelParams, Variant};
use code_core::optim::GroupRates;
use code_core::schema::{CategorySchema, WeightMode};
use code_core::train::{self, TrainConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "code",
    version,
    about = "Multimodal sentiment model with discrepancy-aware decomposition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test JSONL files.
    GenData(GenData),
    /// Train a model and write its best-validation checkpoint.
    Train(Train),
    /// Score a checkpoint on a JSONL file and print metrics as JSON.
    Eval(Eval),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(Gradcheck),
    /// Train each variant over several seeds and print a summary CSV.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    /// Built-in schema (mvsa, tumemo, hfm) or a schema JSON file.
    #[arg(long, default_value = "mvsa")]
    schema: String,
    #[arg(long, default_value_t = 4511)]
    n: usize,
    #[arg(long, default_value_t = 0.425)]
    sd_rate: f64,
    #[arg(long, default_value_t = 0.609)]
    ocr_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    cluster_sep: Option<f64>,
    #[arg(long)]
    token_purity: Option<f64>,
    /// Inclusive text length range, e.g. `8,16`.
    #[arg(long, value_parser = parse_range)]
    text_len: Option<(usize, usize)>,
    /// Inclusive OCR length range, e.g. `4,15`.
    #[arg(long, value_parser = parse_range)]
    ocr_len: Option<(usize, usize)>,
    /// Training posts; defaults to 80% with validation and test 10% each.
    #[arg(long, requires = "n_val")]
    n_train: Option<usize>,
    #[arg(long, requires = "n_train")]
    n_val: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the schema recorded with the dataset.
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    weight_mode: Option<WeightMode>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    text_len: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Base learning rates: `fine-tune` or `from-scratch`; the --lr-* flags
    /// override single groups.
    #[arg(long, default_value = "fine-tune")]
    rates: RateProfile,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    lr_image: Option<f64>,
    #[arg(long)]
    lr_text: Option<f64>,
    #[arg(long)]
    lr_classifier: Option<f64>,
    #[arg(long)]
    lr_other: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args)]
struct Train {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics history CSV; defaults to the checkpoint path plus `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Also write fusion attention weights of the first post as CSV files here.
    #[arg(long)]
    attention_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// JSON file with model settings; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated variants; all five by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Write the summary CSV here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RateProfile {
    FineTune,
    FromScratch,
}

/// Settings for `gradcheck`.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckFile {
    schema: String,
    variant: Variant,
    num_patches: usize,
    text_len: usize,
    dim: usize,
    patch_dim: usize,
    vocab_size: usize,
    heads: usize,
    init_std: f64,
    seed: u64,
    batch: usize,
}

impl Default for GradcheckFile {
    fn default() -> Self {
        let c = ModelConfig::new(CategorySchema::mvsa(), Variant::Full, 0);
        Self {
            schema: "mvsa".into(),
            variant: c.variant,
            num_patches: c.num_patches,
            text_len: c.text_len,
            dim: c.dim,
            patch_dim: c.patch_dim,
            vocab_size: c.vocab_size,
            heads: c.heads,
            init_std: c.init_std,
            seed: 0,
            batch: 2,
        }
    }
}

fn model_config(args: &ModelArgs, manifest: Option<&Manifest>) -> Result<ModelConfig> {
    let schema = match (&args.schema, manifest) {
        (Some(s), _) => CategorySchema::resolve(s)?,
        (None, Some(m)) => m.spec.schema.clone(),
        (None, None) => CategorySchema::mvsa(),
    };
    let schema = match args.weight_mode {
        Some(mode) => schema.with_weight_mode(mode),
        None => schema,
    };
    let mut c = ModelConfig::new(schema, args.variant, args.seed);
    if let Some(m) = manifest {
        c.num_patches = m.spec.num_patches;
        c.patch_dim = m.spec.patch_dim;
        c.vocab_size = m.spec.vocab_size;
    }
    c.dim = args.dim.unwrap_or(c.dim);
    c.text_len = args.text_len.unwrap_or(c.text_len);
    c.heads = args.heads.unwrap_or(c.heads);
    c.sigma = args.sigma.unwrap_or(c.sigma);
    c.tau = args.tau.unwrap_or(c.tau);
    c.validate()?;
    Ok(c)
}

fn train_config(args: &RunArgs) -> TrainConfig {
    let d = match args.rates {
        RateProfile::FineTune => GroupRates::default(),
        RateProfile::FromScratch => GroupRates::from_scratch(),
    };
    let mut run = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        rates: GroupRates {
            image_encoder: args.lr_image.unwrap_or(d.image_encoder),
            text_encoder: args.lr_text.unwrap_or(d.text_encoder),
            classifier: args.lr_classifier.unwrap_or(d.classifier),
            other: args.lr_other.unwrap_or(d.other),
        },
        ..TrainConfig::default()
    };
    if let Some(wd) = args.weight_decay {
        run.adamw.weight_decay = wd;
    }
    run
}

fn load_splits(dir: &Path) -> Result<(data::Splits, Option<Manifest>)> {
    let splits = data::read_split_dir(dir)
        .with_context(|| format!("reading dataset in {}", dir.display()))?;
    let manifest = if dir.join(data::MANIFEST_NAME).exists() {
        Some(data::read_manifest(dir)?)
    } else {
        None
    };
    Ok((splits, manifest))
}

fn gen_data(args: GenData) -> Result<()> {
    let mut spec = GeneratorSpec::new(CategorySchema::resolve(&args.schema)?, args.n, args.seed);
    spec.sd_rate = args.sd_rate;
    spec.ocr_rate = args.ocr_rate;
    spec.noise_std = args.noise_std.unwrap_or(spec.noise_std);
    spec.cluster_sep = args.cluster_sep.unwrap_or(spec.cluster_sep);
    spec.token_purity = args.token_purity.unwrap_or(spec.token_purity);
    spec.text_len = args.text_len.unwrap_or(spec.text_len);
    spec.ocr_len = args.ocr_len.unwrap_or(spec.ocr_len);
    let (records, manifest) = data::generate_dataset(&spec)?;
    let splits = match (args.n_train, args.n_val) {
        (Some(t), Some(v)) => data::split_counts(&records, args.seed, t, v)?,
        _ => data::split_default(&records, args.seed)?,
    };
    data::write_split_dir(&args.out, &splits, &manifest)?;
    eprintln!(
        "wrote {} posts ({} train / {} val / {} test) to {}",
        records.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        args.out.display()
    );
    println!("{}", serde_json::to_string_pretty(&manifest.stats)?);
    Ok(())
}

fn run_train(args: Train) -> Result<()> {
    let (splits, manifest) = load_splits(&args.data)?;
    let config = model_config(&args.model, manifest.as_ref())?;
    let run = train_config(&args.run);
    let outcome = train::train_observed(&config, &run, &splits.train, &splits.val, |rows| {
        for r in rows {
            eprintln!(
                "epoch {:>3} {:<5} acc {:.4} wF1 {:.4} mF1 {:.4} L_cls {:.4} L_exc {:.4} L_con {:.4}",
                r.epoch, r.split, r.accuracy, r.weighted_f1, r.macro_f1, r.loss.cls, r.loss.exc, r.loss.con
            );
        }
    })?;
    checkpoint::save(&args.out, &config, &outcome.best)?;
    let history = args.history.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".history.csv");
        p.into()
    });
    train::write_history(&outcome.history, &history)?;
    eprintln!(
        "best validation accuracy {:.4} at epoch {}; checkpoint {}, history {}",
        outcome.best_val_accuracy,
        outcome.best_epoch,
        args.out.display(),
        history.display()
    );
    Ok(())
}

fn run_eval(args: Eval) -> Result<()> {
    let (config, params) =
        checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let records = data::read_dataset(&args.data)?;
    let eval = train::evaluate(&params, &config, &records, args.batch)?;
    if let Some(dir) = &args.attention_dir {
        write_attention(dir, &params, &config, &records[..1])?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &eval.metrics)?;
    writeln!(out)?;
    Ok(())
}

fn write_attention(
    dir: &Path,
    params: &ModelParams,
    config: &ModelConfig,
    posts: &[PostRecord],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, weights) in attention_maps(posts, params, config)? {
        let file = fs::File::create(dir.join(format!("{name}.csv")))?;
        code_core::attention::write_weights_csv(&weights, BufWriter::new(file))?;
    }
    Ok(())
}

fn run_gradcheck(args: Gradcheck) -> Result<bool> {
    let file: GradcheckFile = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => GradcheckFile::default(),
    };
    if file.batch == 0 {
        bail!("batch must be at least 1");
    }
    let schema = CategorySchema::resolve(&file.schema)?;
    let mut config = ModelConfig::new(schema.clone(), file.variant, file.seed);
    config.num_patches = file.num_patches;
    config.text_len = file.text_len;
    config.dim = file.dim;
    config.patch_dim = file.patch_dim;
    config.vocab_size = file.vocab_size;
    config.heads = file.heads;
    config.init_std = file.init_std;
    config.validate()?;

    let mut spec = GeneratorSpec::new(schema, file.batch, file.seed);
    spec.num_patches = file.num_patches;
    spec.patch_dim = file.patch_dim;
    spec.vocab_size = file.vocab_size;
    let (batch, _) = data::generate_dataset(&spec)?;
    let params = ModelParams::init(&config, file.seed)?;

    let started = std::time::Instant::now();
    let report = train::model_grad_check(
        &params,
        &config,
        &batch,
        GradCheckConfig {
            step: args.step,
            tolerance: args.tol,
        },
    )?;
    let elapsed = started.elapsed();
    for p in &report.params {
        println!(
            "{:<6} {:<32} entries {:>6} max rel {:.3e} (analytic {:.6e}, numeric {:.6e})",
            if p.passed { "ok" } else { "FAIL" },
            p.name,
            p.entries,
            p.max_rel_error,
            p.analytic,
            p.numeric
        );
    }
    println!(
        "{} parameters, {} evaluations, max relative error {:.3e} (tolerance {:.1e}), {:.1} s",
        params.count(),
        report.evaluations,
        report.max_rel_error,
        report.tolerance,
        elapsed.as_secs_f64()
    );
    if !report.passed {
        println!(
            "{} failing entries; largest |analytic| among them {:.3e}, largest |analytic - numeric| {:.3e}",
            report.failing_entries, report.failing_max_analytic, report.failing_max_abs_error
        );
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

fn run_ablate(args: Ablate) -> Result<()> {
    let (splits, manifest) = load_splits(&args.data)?;
    let base = model_config(&args.model, manifest.as_ref())?;
    let run = train_config(&args.run);
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|k| args.model.seed + k).collect();
    let (_, summary) = train::ablate(
        &base,
        &run,
        &splits.train,
        &splits.val,
        &splits.test,
        &variants,
        &seeds,
        |r| {
            eprintln!(
                "{:<11} seed {:>3} test acc {:.4} wF1 {:.4} mF1 {:.4}",
                r.variant, r.seed, r.accuracy, r.weighted_f1, r.macro_f1
            )
        },
    )?;
    let csv = train::ablation_csv(&summary);
    if let Some(path) = &args.out {
        fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
