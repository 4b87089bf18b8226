//! End-to-end runs: the standard benchmark, its evaluation sets, the
//! reproduction sweep and the manifest that ties its outputs together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{gen_dataset, gen_multilevel, hash64, Dataset, HierarchySpec, Sample};
use crate::eval::{self, embed_dataset, fewshot_eval, level_radius_correlation, linear_probe, FewShotResult, DEFAULT_QUERIES};
use crate::losses::Objective;
use crate::trainer::{Checkpoint, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("invalid options: {0}")]
    Options(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage<T, E>(name: &str, r: std::result::Result<T, E>) -> Result<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.map_err(|e| PipelineError::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Quotes `s` as a JSON string.
pub fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// JSON number, `null` when not finite.
pub fn json_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

/// Output file with its digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

/// Provenance of one command invocation.
///
/// `config_hash` covers the effective configuration and seeds only, so two
/// invocations that differ in output paths share it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub version: &'static str,
    pub seconds: f64,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: String, seeds: BTreeMap<String, u64>) -> Self {
        let mut hashed = config.clone();
        for (k, v) in &seeds {
            let _ = writeln!(hashed, "seed.{k}={v}");
        }
        Self {
            command,
            config_hash: sha256_hex(hashed.as_bytes()),
            config,
            seeds,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
            seconds: 0.0,
        }
    }

    /// First 16 hex digits of the config hash, as stamped into outputs.
    pub fn short_hash(&self) -> &str {
        &self.config_hash[..16]
    }

    pub fn record(&mut self, path: &Path) -> std::io::Result<()> {
        let a = Artifact::of(path)?;
        self.artifacts.retain(|x| x.path != a.path);
        self.artifacts.push(a);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let command: Vec<String> = self.command.iter().map(|s| json_string(s)).collect();
        let seeds: Vec<String> = self.seeds.iter().map(|(k, v)| format!("{}:{v}", json_string(k))).collect();
        let artifacts: Vec<String> = self
            .artifacts
            .iter()
            .map(|a| {
                format!(
                    "{{\"path\":{},\"sha256\":\"{}\"}}",
                    json_string(&a.path.display().to_string()),
                    a.sha256
                )
            })
            .collect();
        format!(
            "{{\"manifest\":\"{}\",\"config_hash\":\"{}\",\"version\":\"{}\",\"command\":[{}],\"seeds\":{{{}}},\"config\":{},\"artifacts\":[{}],\"seconds\":{:.3}}}\n",
            self.short_hash(),
            self.config_hash,
            self.version,
            command.join(","),
            seeds.join(","),
            json_string(&self.config),
            artifacts.join(","),
            self.seconds
        )
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }
}

/// The datasets a checkpoint is scored on.
#[derive(Debug, Clone)]
pub struct EvalSets {
    /// Leaf-labelled pretraining benchmark, used for the probe.
    pub bench: Dataset,
    /// Wider tree (enough classes for 10-way episodes).
    pub downstream: Dataset,
    /// Samples from every tree node, labelled with their depth.
    pub multilevel: Vec<Sample>,
}

/// Branching of the few-shot tree: 16 leaf classes at depth 3.
pub const DOWNSTREAM_BRANCHING: usize = 4;

/// Samples per node of the multi-level set.
pub const MULTILEVEL_PER_NODE: usize = 20;

impl EvalSets {
    pub fn standard(spec: &HierarchySpec, data_seed: u64) -> Result<Self> {
        let bench = stage("gen-data", gen_dataset(spec, data_seed))?;
        Self::around(bench)
    }

    /// Builds the downstream and multi-level sets next to an existing
    /// benchmark.
    pub fn around(bench: Dataset) -> Result<Self> {
        let spec = bench.spec.clone();
        let seed = bench.seed;
        let downstream_spec = HierarchySpec {
            branching: DOWNSTREAM_BRANCHING,
            ..spec.clone()
        };
        let downstream = stage("gen-downstream", gen_dataset(&downstream_spec, hash64(seed, &[0x646f776e])))?;
        let multilevel = stage("gen-multilevel", gen_multilevel(&spec, seed, MULTILEVEL_PER_NODE))?;
        Ok(Self {
            bench,
            downstream,
            multilevel,
        })
    }
}

/// Downstream protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub train_frac: f64,
    pub tasks: usize,
    pub queries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            train_frac: 0.7,
            tasks: 10,
            queries: DEFAULT_QUERIES,
        }
    }
}

/// Frozen-encoder scores of one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub probe: f64,
    pub fewshot5: FewShotResult,
    pub fewshot10: FewShotResult,
    pub rho: f64,
    pub rho_unaligned: f64,
}

pub fn evaluate(ckpt: &Checkpoint, sets: &EvalSets, opts: &EvalOptions) -> Result<Metrics> {
    let bench = stage("embed", embed_dataset(ckpt, &sets.bench.samples, None))?;
    let probe = stage("probe", linear_probe(&bench, opts.seed, opts.train_frac))?;
    let down = stage("embed", embed_dataset(ckpt, &sets.downstream.samples, None))?;
    let fewshot5 = stage("fewshot", fewshot_eval(&down, 5, 10, opts.tasks, opts.queries, opts.seed))?;
    let fewshot10 = stage("fewshot", fewshot_eval(&down, 10, 20, opts.tasks, opts.queries, opts.seed))?;
    let multi = stage("embed", embed_dataset(ckpt, &sets.multilevel, None))?;
    let rho = stage("correlation", level_radius_correlation(&multi, true))?;
    let rho_unaligned = stage("correlation", level_radius_correlation(&multi, false))?;
    Ok(Metrics {
        probe: probe.accuracy,
        fewshot5,
        fewshot10,
        rho,
        rho_unaligned,
    })
}

/// One line of the reproduction summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// `joint`, `intra`, `cross`, or `random-init`.
    pub mode: String,
    pub curvature: f64,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    pub metrics: Metrics,
}

impl SummaryRow {
    pub fn loss_drop(&self) -> Option<f64> {
        Some(1.0 - self.last_total? / self.first_total?)
    }

    pub fn to_json(&self, manifest: &str) -> String {
        let m = &self.metrics;
        let opt = |v: Option<f64>| v.map_or("null".to_string(), json_f64);
        format!(
            "{{\"manifest\":\"{manifest}\",\"mode\":\"{}\",\"curvature\":{},\"first_total\":{},\"last_total\":{},\"probe\":{},\"fewshot_5w10s_mean\":{},\"fewshot_5w10s_std\":{},\"fewshot_10w20s_mean\":{},\"fewshot_10w20s_std\":{},\"rho\":{},\"rho_unaligned\":{}}}",
            self.mode,
            json_f64(self.curvature),
            opt(self.first_total),
            opt(self.last_total),
            json_f64(m.probe),
            json_f64(m.fewshot5.mean),
            json_f64(m.fewshot5.std),
            json_f64(m.fewshot10.mean),
            json_f64(m.fewshot10.std),
            json_f64(m.rho),
            json_f64(m.rho_unaligned),
        )
    }
}

/// Plain-text summary with one row per (mode, curvature) pair.
pub fn summary_table(rows: &[SummaryRow], manifest: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# reproduction summary (manifest {manifest})");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "| mode | c | loss epoch 1 | loss last | drop | probe acc | 5-way 10-shot | 10-way 20-shot | rho aligned | rho raw |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} | {:.4} |",
            r.mode,
            r.curvature,
            cell(r.first_total),
            cell(r.last_total),
            cell(r.loss_drop()),
            m.probe,
            m.fewshot5.mean,
            m.fewshot5.std,
            m.fewshot10.mean,
            m.fewshot10.std,
            m.rho,
            m.rho_unaligned
        );
    }
    s
}

/// Settings of [`reproduce`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub spec: HierarchySpec,
    /// Base configuration; mode, curvature and seed are set per run.
    pub config: TrainConfig,
    /// Objectives trained at the base curvature.
    pub modes: Vec<Objective>,
    /// Curvatures swept in joint mode.
    pub curvatures: Vec<f64>,
    pub eval: EvalOptions,
    /// Train and draw the 2-D disk plot.
    pub plot: bool,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            out: PathBuf::from("reproduce"),
            seed: 0,
            spec: HierarchySpec::default(),
            config: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            modes: vec![Objective::Joint, Objective::Intra, Objective::Cross],
            curvatures: vec![0.01, 0.1, 0.3, 0.5, 1.0],
            eval: EvalOptions::default(),
            plot: true,
        }
    }
}

impl ReproduceOptions {
    /// Effective settings, one `key=value` per line, excluding paths.
    pub fn echo(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "spec.depth={}", s.depth);
        let _ = writeln!(out, "spec.branching={}", s.branching);
        let _ = writeln!(out, "spec.samples_per_leaf={}", s.samples_per_leaf);
        let _ = writeln!(out, "spec.points_per_cloud={}", s.points_per_cloud);
        let levels: Vec<String> = s.level_noise.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "spec.level_noise={}", levels.join(","));
        let _ = writeln!(out, "spec.sample_noise={}", s.sample_noise);
        let _ = writeln!(out, "spec.point_noise={}", s.point_noise);
        let _ = writeln!(out, "spec.random_pose={}", s.random_pose);
        let modes: Vec<String> = self.modes.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(out, "modes={}", modes.join(","));
        let cs: Vec<String> = self.curvatures.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "curvatures={}", cs.join(","));
        let _ = writeln!(out, "eval.train_frac={}", self.eval.train_frac);
        let _ = writeln!(out, "eval.tasks={}", self.eval.tasks);
        let _ = writeln!(out, "eval.queries={}", self.eval.queries);
        let _ = writeln!(out, "plot={}", self.plot);
        out.push_str(&self.config.to_kv());
        out
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("global".to_string(), self.seed),
            ("data".to_string(), self.data_seed()),
            ("train".to_string(), self.train_seed()),
            ("eval".to_string(), self.eval_seed()),
        ])
    }

    pub fn data_seed(&self) -> u64 {
        hash64(self.seed, &[0x64617461])
    }

    pub fn train_seed(&self) -> u64 {
        hash64(self.seed, &[0x7472616e])
    }

    pub fn eval_seed(&self) -> u64 {
        hash64(self.seed, &[0x6576616c])
    }

    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() && self.curvatures.is_empty() {
            return Err(PipelineError::Options("nothing to train".into()));
        }
        if let Some(c) = self.curvatures.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(PipelineError::Options(format!("bad curvature {c}")));
        }
        stage("config", self.config.validate())?;
        stage("spec", self.spec.validate())
    }

    /// Runs to train: every mode at the base curvature, then joint at every
    /// other swept curvature.
    pub fn runs(&self) -> Vec<(Objective, f64)> {
        let base = self.config.curvature;
        let mut runs: Vec<(Objective, f64)> = self.modes.iter().map(|m| (*m, base)).collect();
        for &c in &self.curvatures {
            if !runs.contains(&(Objective::Joint, c)) {
                runs.push((Objective::Joint, c));
            }
        }
        runs.sort_by(|a, b| {
            let rank = |m: Objective| match m {
                Objective::Joint => 0,
                Objective::Intra => 1,
                Objective::Cross => 2,
            };
            rank(a.0).cmp(&rank(b.0)).then(a.1.total_cmp(&b.1))
        });
        runs
    }
}

/// What [`reproduce`] produced.
#[derive(Debug, Clone)]
pub struct ReproduceOutput {
    pub manifest: RunManifest,
    pub rows: Vec<SummaryRow>,
}

/// File stem of a run's checkpoint and log.
pub fn run_name(mode: Objective, c: f64) -> String {
    format!("{mode}_c{c}")
}

/// Trains and scores the sweep, writing everything under `opts.out`.
///
/// Outputs already written stay in place if a later stage fails; the
/// manifest and summary are rewritten after every run.
pub fn reproduce(opts: &ReproduceOptions, command: Vec<String>, mut progress: impl FnMut(&str)) -> Result<ReproduceOutput> {
    opts.validate()?;
    let start = Instant::now();
    let out = &opts.out;
    fs::create_dir_all(out.join("runs"))?;
    let mut manifest = RunManifest::new(command, opts.echo(), opts.seeds());
    let tag = manifest.short_hash().to_string();

    progress("generating data");
    let bench = stage("gen-data", gen_dataset(&opts.spec, opts.data_seed()))?;
    let data_path = out.join("data.bin");
    stage("gen-data", bench.save(&data_path))?;
    fs::write(out.join("data.txt"), format!("# manifest {tag}\n{}", bench.listing()))?;
    manifest.record(&data_path)?;
    manifest.record(&out.join("data.txt"))?;
    let sets = EvalSets::around(bench)?;
    let eval_opts = EvalOptions {
        seed: opts.eval_seed(),
        ..opts.eval.clone()
    };

    let mut rows = Vec::new();
    let flush = |rows: &[SummaryRow], manifest: &mut RunManifest| -> Result<()> {
        let jsonl: String = rows.iter().map(|r| r.to_json(&tag) + "\n").collect();
        fs::write(out.join("summary.jsonl"), jsonl)?;
        fs::write(out.join("summary.md"), summary_table(rows, &tag))?;
        manifest.record(&out.join("summary.jsonl"))?;
        manifest.record(&out.join("summary.md"))?;
        manifest.seconds = start.elapsed().as_secs_f64();
        manifest.save(&out.join("manifest.json"))?;
        Ok(())
    };

    let base = TrainConfig {
        seed: opts.train_seed(),
        ..opts.config.clone()
    };
    progress("scoring random-init encoder");
    let rand = stage("init", Checkpoint::init(&base))?;
    let rand_path = out.join("runs").join("random-init.ckpt");
    stage("init", rand.save(&rand_path))?;
    manifest.record(&rand_path)?;
    rows.push(SummaryRow {
        mode: "random-init".into(),
        curvature: base.curvature,
        first_total: None,
        last_total: None,
        metrics: evaluate(&rand, &sets, &eval_opts)?,
    });
    flush(&rows, &mut manifest)?;

    for (mode, c) in opts.runs() {
        let name = run_name(mode, c);
        progress(&format!("training {name}"));
        let cfg = TrainConfig {
            mode,
            curvature: c,
            ..base.clone()
        };
        let log_path = out.join("runs").join(format!("{name}.jsonl"));
        let mut log = String::new();
        let mut trainer = stage(&name, Trainer::new(&cfg))?;
        let result = trainer.run(&sets.bench, |rec, _| {
            let json = rec.to_json();
            let _ = writeln!(log, "{{\"manifest\":\"{tag}\",\"run\":\"{name}\",{}", &json[1..]);
        });
        fs::write(&log_path, &log)?;
        manifest.record(&log_path)?;
        if let Err(e) = result {
            flush(&rows, &mut manifest)?;
            return Err(PipelineError::Stage {
                stage: name,
                source: Box::new(e),
            });
        }
        let ckpt = trainer.into_checkpoint();
        let ckpt_path = out.join("runs").join(format!("{name}.ckpt"));
        stage(&name, ckpt.save(&ckpt_path))?;
        manifest.record(&ckpt_path)?;
        progress(&format!("scoring {name}"));
        rows.push(SummaryRow {
            mode: mode.to_string(),
            curvature: c,
            first_total: ckpt.history.first().map(|r| r.total),
            last_total: ckpt.history.last().map(|r| r.total),
            metrics: evaluate(&ckpt, &sets, &eval_opts)?,
        });
        flush(&rows, &mut manifest)?;
    }

    if opts.plot {
        progress("training 2-D disk model");
        let mut cfg = TrainConfig {
            mode: Objective::Joint,
            ..base.clone()
        };
        cfg.widths.ball_dim = 2;
        let mut trainer = stage("disk", Trainer::new(&cfg))?;
        stage("disk", trainer.run(&sets.bench, |_, _| {}))?;
        let ckpt = trainer.into_checkpoint();
        let ckpt_path = out.join("runs").join("disk-2d.ckpt");
        stage("disk", ckpt.save(&ckpt_path))?;
        manifest.record(&ckpt_path)?;
        let table = stage("disk", embed_dataset(&ckpt, &sets.bench.samples, None))?;
        let svg_path = out.join("disk.svg");
        let meta = disk_metadata(&cfg, &tag);
        stage("disk", eval::plot_disk(&table, &svg_path, &meta))?;
        manifest.record(&svg_path)?;
    }
    flush(&rows, &mut manifest)?;
    Ok(ReproduceOutput { manifest, rows })
}

/// Metadata block stamped into disk plots.
pub fn disk_metadata(cfg: &TrainConfig, manifest: &str) -> Vec<(String, String)> {
    let mut meta = vec![("manifest".to_string(), manifest.to_string())];
    meta.extend(crate::trainer::config_map(cfg).into_iter().map(|(k, v)| (k.to_string(), v)));
    meta
}
