//! `hyperipc`: data generation, self-checks, pretraining and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use hyperipc::checks::{gradient_suite, loss_suite, CheckReport, Fault, GeometrySuite, Kernels};
use hyperipc::data::{gen_dataset, Dataset, HierarchySpec};
use hyperipc::eval::{self, embed_dataset, fewshot_eval, linear_probe};
use hyperipc::losses::{NegativeBank, Objective};
use hyperipc::pipeline::{self, json_f64, json_string, RunManifest};
use hyperipc::trainer::{Checkpoint, TrainConfig, Trainer};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "hyperipc", version, about = "Hyperbolic point/image contrastive pretraining toolkit")]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print line-delimited JSON records instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical point-cloud dataset.
    GenData(GenData),
    /// Run the geometry invariant suite, optionally with gradient and loss checks.
    CheckGeometry(CheckGeometry),
    /// Pretrain encoders on a dataset file.
    Pretrain(Pretrain),
    /// Linear-probe accuracy of a frozen checkpoint.
    Probe(Probe),
    /// N-way M-shot episodes on a frozen checkpoint.
    Fewshot(Fewshot),
    /// Draw the embeddings of a 2-D checkpoint on the Poincaré disk.
    Plot(Plot),
    /// Run the full desk-scale sweep and write a summary.
    Reproduce(Reproduce),
}

#[derive(Args)]
struct Seed {
    /// Defaults to $HYPERIPC_SEED, then 0.
    #[arg(long, env = "HYPERIPC_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 40)]
    per_leaf: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    /// Keep every cloud in its canonical pose.
    #[arg(long)]
    no_pose: bool,
    #[command(flatten)]
    seed: Seed,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGeometry {
    /// Also run finite-difference checks of every primitive.
    #[arg(long)]
    grad: bool,
    /// Also run finite-difference checks of the losses.
    #[arg(long)]
    losses: bool,
    /// Random points per family and curvature/dimension.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[command(flatten)]
    seed: Seed,
    #[arg(long, hide = true, default_value = "none")]
    inject_fault: Fault,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Objective>,
    #[arg(long)]
    curvature: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Dimension of the ball embeddings.
    #[arg(long)]
    ball_dim: Option<usize>,
    /// Keep the image branch at its initialisation.
    #[arg(long)]
    freeze_image: bool,
    #[arg(long)]
    neg_bank: Option<NegativeBank>,
    #[command(flatten)]
    seed: Seed,
    /// Training log; defaults to the checkpoint path with a `.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    seed: Seed,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
}

#[derive(Args)]
struct Fewshot {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    #[arg(long, default_value_t = eval::DEFAULT_QUERIES)]
    queries: usize,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    ckpt2d: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "disk.svg")]
    out: PathBuf,
}

#[derive(Args)]
struct Reproduce {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
    /// Training config file for every run; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    per_leaf: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// Comma-separated curvatures for the joint sweep.
    #[arg(long, value_delimiter = ',')]
    curvatures: Option<Vec<f64>>,
    #[arg(long)]
    no_plot: bool,
}

/// Distinguishes failed checks from aborted runs.
enum Outcome {
    Ok,
    ChecksFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let json = cli.json;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, json),
        Command::CheckGeometry(a) => check_geometry(a, json),
        Command::Pretrain(a) => pretrain(a, json),
        Command::Probe(a) => probe(a, json),
        Command::Fewshot(a) => fewshot(a, json),
        Command::Plot(a) => plot(a, json),
        Command::Reproduce(a) => reproduce(a, json),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn seeds(seed: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([("seed".to_string(), seed)])
}

/// Sidecar manifest written next to `primary`.
fn write_manifest(manifest: &mut RunManifest, primary: &Path, outputs: &[&Path], start: Instant) -> Result<PathBuf> {
    for p in outputs {
        manifest.record(p).with_context(|| format!("hashing {}", p.display()))?;
    }
    manifest.seconds = start.elapsed().as_secs_f64();
    let mut name = primary.as_os_str().to_owned();
    name.push(".manifest.json");
    let path = PathBuf::from(name);
    manifest.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// `name = sha256` line pinning an input file into a manifest config.
fn input_line(name: &str, path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{name} = {}\n", pipeline::sha256_hex(&bytes)))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn gen_data(a: GenData, json: bool) -> Result<Outcome> {
    let start = Instant::now();
    let seed = a.seed.seed.unwrap_or(0);
    let spec = HierarchySpec {
        depth: a.depth,
        branching: a.branching,
        samples_per_leaf: a.per_leaf,
        points_per_cloud: a.points,
        random_pose: !a.no_pose,
        ..HierarchySpec::default()
    };
    let config = format!(
        "depth={}\nbranching={}\nper_leaf={}\npoints={}\nrandom_pose={}\n",
        spec.depth, spec.branching, spec.samples_per_leaf, spec.points_per_cloud, spec.random_pose
    );
    let mut manifest = RunManifest::new(command_line(), config, seeds(seed));
    let data = gen_dataset(&spec, seed)?;
    data.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let listing = a.out.with_extension("txt");
    fs::write(&listing, format!("# manifest {}\n{}", manifest.short_hash(), data.listing()))?;
    write_manifest(&mut manifest, &a.out, &[&a.out, &listing], start)?;
    if json {
        println!(
            "{{\"manifest\":\"{}\",\"samples\":{},\"classes\":{},\"out\":{}}}",
            manifest.short_hash(),
            data.len(),
            data.num_classes(),
            json_string(&a.out.display().to_string())
        );
    } else {
        println!(
            "wrote {} samples in {} classes to {} (manifest {})",
            data.len(),
            data.num_classes(),
            a.out.display(),
            manifest.short_hash()
        );
    }
    Ok(Outcome::Ok)
}

fn check_geometry(a: CheckGeometry, json: bool) -> Result<Outcome> {
    let seed = a.seed.seed.unwrap_or(0);
    let suite = GeometrySuite {
        samples: a.samples,
        seed,
        ..GeometrySuite::default()
    };
    let mut report: CheckReport = suite.run(&Kernels::new(a.inject_fault));
    if a.grad {
        report.extend(gradient_suite(seed)?);
    }
    if a.losses {
        report.extend(loss_suite(seed)?);
    }
    if json {
        for r in &report.records {
            println!("{}", r.to_json());
        }
    } else {
        println!("{report}");
    }
    if report.passed() {
        return Ok(Outcome::Ok);
    }
    for r in report.failures() {
        eprintln!("failed: {} {} (max error {:e}, tolerance {:e})", r.suite, r.family, r.max_error, r.tolerance);
    }
    Ok(Outcome::ChecksFailed)
}

fn pretrain(a: Pretrain, json: bool) -> Result<Outcome> {
    let start = Instant::now();
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv(&text)?;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.curvature {
        cfg.curvature = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.ball_dim {
        cfg.widths.ball_dim = v;
    }
    if let Some(v) = a.neg_bank {
        cfg.bank = v;
    }
    if a.freeze_image {
        cfg.image_backprop = false;
    }
    if let Some(v) = a.seed.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let config = cfg.to_kv() + &input_line("data", &a.data)?;
    let mut manifest = RunManifest::new(command_line(), config, seeds(cfg.seed));
    let tag = manifest.short_hash().to_string();
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    let mut log = String::new();
    let mut trainer = Trainer::new(&cfg)?;
    let result = trainer.run(&data, |rec, _| {
        let line = format!("{{\"manifest\":\"{tag}\",{}", &rec.to_json()[1..]);
        if json {
            println!("{line}");
        } else {
            println!(
                "epoch {:>4}  intra {:.5}  cross {:.5}  dho {:.5}  total {:.5}",
                rec.epoch, rec.intra, rec.cross, rec.dho, rec.total
            );
        }
        log.push_str(&line);
        log.push('\n');
    });
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    if let Err(e) = result {
        // Leave the last good state behind for inspection.
        let partial = a.out.with_extension("partial.ckpt");
        trainer.checkpoint().save(&partial)?;
        write_manifest(&mut manifest, &a.out, &[&log_path, &partial], start)?;
        return Err(e).context("training aborted");
    }
    let ckpt = trainer.into_checkpoint();
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_manifest(&mut manifest, &a.out, &[&a.out, &log_path], start)?;
    if !json {
        println!("wrote {} (manifest {tag})", a.out.display());
    }
    Ok(Outcome::Ok)
}

fn probe(a: Probe, json: bool) -> Result<Outcome> {
    let seed = a.seed.seed.unwrap_or(0);
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let manifest = RunManifest::new(
        command_line(),
        format!(
            "{}{}train_frac = {}\n",
            input_line("ckpt", &a.ckpt)?,
            input_line("data", &a.data)?,
            a.train_frac
        ),
        seeds(seed),
    );
    let table = embed_dataset(&ckpt, &data.samples, None)?;
    let r = linear_probe(&table, seed, a.train_frac)?;
    if json {
        println!(
            "{{\"manifest\":\"{}\",\"accuracy\":{},\"train\":{},\"test\":{},\"classes\":{}}}",
            manifest.short_hash(),
            json_f64(r.accuracy),
            r.train_size,
            r.test_size,
            r.classes
        );
    } else {
        println!("| classes | train | test | accuracy |");
        println!("|---|---|---|---|");
        println!("| {} | {} | {} | {:.4} |", r.classes, r.train_size, r.test_size, r.accuracy);
        println!("manifest {}", manifest.short_hash());
    }
    Ok(Outcome::Ok)
}

fn fewshot(a: Fewshot, json: bool) -> Result<Outcome> {
    let seed = a.seed.seed.unwrap_or(0);
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let manifest = RunManifest::new(
        command_line(),
        format!(
            "{}{}n = {}\nm = {}\ntasks = {}\nqueries = {}\n",
            input_line("ckpt", &a.ckpt)?,
            input_line("data", &a.data)?,
            a.n,
            a.m,
            a.tasks,
            a.queries
        ),
        seeds(seed),
    );
    let table = embed_dataset(&ckpt, &data.samples, None)?;
    let r = fewshot_eval(&table, a.n, a.m, a.tasks, a.queries, seed)?;
    if json {
        let accs: Vec<String> = r.accuracies.iter().map(|v| json_f64(*v)).collect();
        println!(
            "{{\"manifest\":\"{}\",\"n_way\":{},\"m_shot\":{},\"tasks\":{},\"queries_per_class\":{},\"mean\":{},\"std\":{},\"accuracies\":[{}]}}",
            manifest.short_hash(),
            r.n_way,
            r.m_shot,
            r.tasks,
            r.queries_per_class,
            json_f64(r.mean),
            json_f64(r.std),
            accs.join(",")
        );
    } else {
        println!("| n-way | m-shot | tasks | queries/class | accuracy |");
        println!("|---|---|---|---|---|");
        println!(
            "| {} | {} | {} | {} | {:.4} ± {:.4} |",
            r.n_way, r.m_shot, r.tasks, r.queries_per_class, r.mean, r.std
        );
        println!("manifest {}", manifest.short_hash());
    }
    Ok(Outcome::Ok)
}

fn plot(a: Plot, json: bool) -> Result<Outcome> {
    let start = Instant::now();
    let ckpt = load_ckpt(&a.ckpt2d)?;
    let data = load_data(&a.data)?;
    let config = input_line("ckpt", &a.ckpt2d)? + &input_line("data", &a.data)?;
    let mut manifest = RunManifest::new(command_line(), config, seeds(ckpt.config.seed));
    let table = embed_dataset(&ckpt, &data.samples, None)?;
    let meta = pipeline::disk_metadata(&ckpt.config, manifest.short_hash());
    eval::plot_disk(&table, &a.out, &meta)?;
    write_manifest(&mut manifest, &a.out, &[&a.out], start)?;
    if json {
        println!(
            "{{\"manifest\":\"{}\",\"points\":{},\"out\":{}}}",
            manifest.short_hash(),
            table.len(),
            json_string(&a.out.display().to_string())
        );
    } else {
        println!("wrote {} points to {} (manifest {})", table.len(), a.out.display(), manifest.short_hash());
    }
    Ok(Outcome::Ok)
}

fn reproduce(a: Reproduce, json: bool) -> Result<Outcome> {
    let mut opts = pipeline::ReproduceOptions {
        out: a.out.clone(),
        seed: a.seed.seed.unwrap_or(0),
        plot: !a.no_plot,
        ..Default::default()
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        opts.config.apply_kv(&text)?;
    }
    if let Some(v) = a.epochs {
        opts.config.epochs = v;
    }
    if let Some(v) = a.per_leaf {
        opts.spec.samples_per_leaf = v;
    }
    if let Some(v) = a.points {
        opts.spec.points_per_cloud = v;
    }
    if let Some(v) = a.curvatures {
        opts.curvatures = v;
    }
    let out = pipeline::reproduce(&opts, command_line(), |stage| eprintln!("[reproduce] {stage}"))
        .with_context(|| format!("partial results kept in {}", a.out.display()))?;
    let tag = out.manifest.short_hash();
    if json {
        for r in &out.rows {
            println!("{}", r.to_json(tag));
        }
    } else {
        print!("{}", pipeline::summary_table(&out.rows, tag));
        println!("outputs in {} ({:.1}s)", a.out.display(), out.manifest.seconds);
    }
    Ok(Outcome::Ok)
}
