//! Two-branch pretraining loop.
//!
//! Each step augments every cloud twice, rasterises one random view, runs
//! the encoders on per-sample tapes, evaluates the batch objective on a
//! separate tape whose leaves are the ball embeddings, and pushes the
//! embedding adjoints back through the per-sample tapes. Per-sample work
//! runs on the rayon pool; gradients are summed in sample order, so the
//! result does not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{augment, augment_image, hash64, rasterize, sample_seed, AugmentParams, Dataset, Sample, View};
use crate::encoders::{
    image_features_on, init_params, lift_on, point_features_on, EncodeError, EncoderParams, Group, TapeParams, Widths,
};
use crate::geometry::{Curvature, GeometryError};
use crate::grad::{GradError, Tape, Var};
use crate::losses::{self, LossBreakdown, LossError, LossSettings, NegativeBank, Objective};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has {0} samples; need at least 2")]
    TooFewSamples(usize),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite {
        term: String,
        epoch: u64,
        step: u64,
        /// State before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Learning rate and decoupled weight decay of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOpt {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub curvature: f64,
    pub tau: f64,
    pub lambda: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub point_opt: BranchOpt,
    pub image_opt: BranchOpt,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Update the image encoder and head.
    pub image_backprop: bool,
    pub bank: NegativeBank,
    pub mode: Objective,
    pub differentiate_weights: bool,
    /// Random flip/shift of the rasterised view.
    pub image_augment: bool,
    pub augment: AugmentParams,
    pub widths: Widths,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            curvature: 0.1,
            tau: 0.2,
            lambda: 0.01,
            epochs: 100,
            batch_size: 32,
            point_opt: BranchOpt {
                lr: 1e-3,
                weight_decay: 1e-4,
            },
            image_opt: BranchOpt {
                lr: 3e-5,
                weight_decay: 0.01,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            image_backprop: true,
            bank: NegativeBank::Both,
            mode: Objective::Joint,
            differentiate_weights: false,
            image_augment: false,
            augment: AugmentParams::default(),
            widths: Widths::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Curvature::new(self.curvature).map_err(|e| TrainError::Config(e.to_string()))?;
        self.loss_settings().validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        for (name, o) in [("point", self.point_opt), ("image", self.image_opt)] {
            if !(o.lr >= 0.0 && o.lr.is_finite() && o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
                return Err(TrainError::Config(format!("{name} learning rate and weight decay must be >= 0")));
            }
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(TrainError::Config("moment decay rates must lie in [0, 1) and eps > 0".into()));
        }
        self.widths.validate()?;
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            tau: self.tau,
            lambda: self.lambda,
            bank: self.bank,
            objective: self.mode,
            differentiate_weights: self.differentiate_weights,
        }
    }

    fn opt_for(&self, g: Group) -> BranchOpt {
        if g.is_image() {
            self.image_opt
        } else {
            self.point_opt
        }
    }

    /// Groups that receive updates. Image groups need both backprop enabled
    /// and an objective that reaches them.
    pub fn trainable(&self) -> [bool; 4] {
        let image = self.image_backprop && self.mode.weights().1 > 0.0;
        Group::ALL.map(|g| !g.is_image() || image)
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let w = &self.widths;
        let hidden: Vec<String> = w.point_hidden.iter().map(usize::to_string).collect();
        vec![
            ("curvature", self.curvature.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("point_lr", self.point_opt.lr.to_string()),
            ("point_wd", self.point_opt.weight_decay.to_string()),
            ("image_lr", self.image_opt.lr.to_string()),
            ("image_wd", self.image_opt.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("image_backprop", self.image_backprop.to_string()),
            ("neg_bank", self.bank.to_string()),
            ("mode", self.mode.to_string()),
            ("differentiate_weights", self.differentiate_weights.to_string()),
            ("image_augment", self.image_augment.to_string()),
            ("aug_rotate", a.rotate.to_string()),
            ("aug_scale_min", a.scale.0.to_string()),
            ("aug_scale_max", a.scale.1.to_string()),
            ("aug_translate", a.translate.to_string()),
            ("aug_jitter", a.jitter_sigma.to_string()),
            ("aug_jitter_clip", a.jitter_clip.to_string()),
            ("aug_points", a.max_points.unwrap_or(0).to_string()),
            ("point_hidden", hidden.join(",")),
            ("feature", w.feature.to_string()),
            ("image_side", w.image_side.to_string()),
            ("image_hidden", w.image_hidden.to_string()),
            ("head_hidden", w.head_hidden.to_string()),
            ("ball_dim", w.ball_dim.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Overrides fields from `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Sets one field by its `key = value` name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value `{v}` for `{key}`")))
        }
        let bad = |e: String| TrainError::Config(e);
        match key {
            "curvature" => self.curvature = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "point_lr" => self.point_opt.lr = p(key, value)?,
            "point_wd" => self.point_opt.weight_decay = p(key, value)?,
            "image_lr" => self.image_opt.lr = p(key, value)?,
            "image_wd" => self.image_opt.weight_decay = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "image_backprop" => self.image_backprop = p(key, value)?,
            "neg_bank" => self.bank = value.parse().map_err(bad)?,
            "mode" => self.mode = value.parse().map_err(bad)?,
            "differentiate_weights" => self.differentiate_weights = p(key, value)?,
            "image_augment" => self.image_augment = p(key, value)?,
            "aug_rotate" => self.augment.rotate = p(key, value)?,
            "aug_scale_min" => self.augment.scale.0 = p(key, value)?,
            "aug_scale_max" => self.augment.scale.1 = p(key, value)?,
            "aug_translate" => self.augment.translate = p(key, value)?,
            "aug_jitter" => self.augment.jitter_sigma = p(key, value)?,
            "aug_jitter_clip" => self.augment.jitter_clip = p(key, value)?,
            "aug_points" => {
                let n: usize = p(key, value)?;
                self.augment.max_points = (n > 0).then_some(n);
            }
            "point_hidden" => {
                self.widths.point_hidden = value
                    .split(',')
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "feature" => self.widths.feature = p(key, value)?,
            "image_side" => self.widths.image_side = p(key, value)?,
            "image_hidden" => self.widths.image_hidden = p(key, value)?,
            "head_hidden" => self.widths.head_hidden = p(key, value)?,
            "ball_dim" => self.widths.ball_dim = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            other => return Err(TrainError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// First and second moment estimates for every group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: [Vec<f64>; 4],
    pub v: [Vec<f64>; 4],
}

impl OptimState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros = || Group::ALL.map(|g| vec![0.0; params.group(g).len()]);
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay adaptive-moment update of `p` in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    opt: BranchOpt,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..p.len() {
        p[i] -= opt.lr * opt.weight_decay * p[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= opt.lr * mh / (vh.sqrt() + eps);
    }
}

/// Mean loss terms over the steps of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub intra: f64,
    pub cross: f64,
    pub dho: f64,
    pub total: f64,
    pub steps: u64,
}

impl EpochRecord {
    /// One JSON object on a single line.
    pub fn to_json(&self) -> String {
        fn num(v: f64) -> String {
            if v.is_finite() {
                format!("{v:?}")
            } else {
                "null".into()
            }
        }
        format!(
            "{{\"epoch\":{},\"intra\":{},\"cross\":{},\"dho\":{},\"total\":{},\"steps\":{}}}",
            self.epoch,
            num(self.intra),
            num(self.cross),
            num(self.dho),
            num(self.total),
            self.steps
        )
    }
}

/// Snapshot of a run: enough to resume it bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochRecord>,
}

const CKPT_MAGIC: &[u8; 8] = b"HIPCCKPT";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    /// Freshly initialised parameters for `config`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(hash64(config.seed, &[0x696e6974]), &config.widths)?;
        Ok(Self {
            config: config.clone(),
            optim: OptimState::new(&params),
            params,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.config.curvature).expect("validated curvature")
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION)?;
        let cfg = self.config.to_kv();
        w.write_u64::<LittleEndian>(cfg.len() as u64)?;
        w.write_all(cfg.as_bytes())?;
        self.params.write_to(w)?;
        w.write_u64::<LittleEndian>(self.optim.step)?;
        for g in self.optim.m.iter().chain(&self.optim.v) {
            for x in g {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        w.write_u64::<LittleEndian>(self.epoch)?;
        w.write_u64::<LittleEndian>(self.history.len() as u64)?;
        for r in &self.history {
            w.write_u64::<LittleEndian>(r.epoch)?;
            for x in [r.intra, r.cross, r.dho, r.total] {
                w.write_f64::<LittleEndian>(x)?;
            }
            w.write_u64::<LittleEndian>(r.steps)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(TrainError::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len > 1 << 20 {
            return Err(TrainError::Format("config block too large".into()));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|_| TrainError::Format("config is not UTF-8".into()))?;
        let config = TrainConfig::from_kv(&text)?;
        let params = EncoderParams::read_from(r)?;
        if params.widths() != &config.widths {
            return Err(TrainError::Format("parameter shapes disagree with the config".into()));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let mut optim = OptimState::new(&params);
        optim.step = step;
        for g in optim.m.iter_mut().chain(optim.v.iter_mut()) {
            r.read_f64_into::<LittleEndian>(g)?;
        }
        let epoch = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let e = r.read_u64::<LittleEndian>()?;
            let mut v = [0.0; 4];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            history.push(EpochRecord {
                epoch: e,
                intra: v[0],
                cross: v[1],
                dho: v[2],
                total: v[3],
                steps: r.read_u64::<LittleEndian>()?,
            });
        }
        Ok(Self {
            config,
            params,
            optim,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let c = Self::read_from(&mut r)?;
        if !r.fill_buf()?.is_empty() {
            return Err(TrainError::Format("trailing bytes".into()));
        }
        Ok(c)
    }

    /// Serialized bytes, used for equality checks across runs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory cannot fail");
        v
    }
}

struct SampleTape {
    tape: Tape,
    params: TapeParams,
    z: [Var; 3],
}

fn forward_sample(params: &EncoderParams, sample: &Sample, config: &TrainConfig, epoch: u64) -> SampleTape {
    let c = config.curvature;
    let mut t = Tape::new();
    let tp = TapeParams::record(&mut t, params, config.trainable());
    let mut views = Vec::with_capacity(2);
    for k in 0..2 {
        let cloud = augment(&sample.cloud, sample_seed(config.seed, sample.id, epoch, k), &config.augment);
        let f = point_features_on(&mut t, tp.layers(Group::PointEncoder), &cloud);
        views.push(lift_on(&mut t, tp.layers(Group::PointHead), f, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, sample.id, epoch, 2));
    let side = config.widths.image_side;
    let mut img = rasterize(&sample.cloud, View::random(&mut rng), side, side);
    if config.image_augment {
        img = augment_image(&img, sample_seed(config.seed, sample.id, epoch, 3), 2);
    }
    let fi = image_features_on(&mut t, tp.layers(Group::ImageEncoder), &img);
    let zi = lift_on(&mut t, tp.layers(Group::ImageHead), fi, c);
    SampleTape {
        tape: t,
        params: tp,
        z: [views[0], views[1], zi],
    }
}

/// Loss terms of one step and the summed parameter gradients.
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub grads: [Vec<f64>; 4],
}

/// Forward and backward pass over one batch without touching parameters.
pub fn batch_gradients(
    params: &EncoderParams,
    batch: &[&Sample],
    config: &TrainConfig,
    epoch: u64,
) -> Result<StepGradients> {
    if batch.len() < 2 {
        return Err(LossError::TooFewSamples(batch.len()).into());
    }
    let tapes: Vec<SampleTape> = batch
        .par_iter()
        .map(|s| forward_sample(params, s, config, epoch))
        .collect();

    let mut lt = Tape::new();
    let mut leaves: [Vec<Var>; 3] = Default::default();
    for st in &tapes {
        for (k, z) in st.z.iter().enumerate() {
            leaves[k].push(lt.leaf_vec(st.tape.value(*z).to_vec()));
        }
    }
    let settings = config.loss_settings();
    let lv = losses::tape::total_loss(&mut lt, &leaves[0], &leaves[1], &leaves[2], config.curvature, &settings)?;
    let breakdown = LossBreakdown {
        intra: lt.scalar(lv.intra),
        cross: lt.scalar(lv.cross),
        dho: lt.scalar(lv.dho),
        total: lt.scalar(lv.total),
        tau: settings.tau,
        lambda: settings.lambda,
        objective: settings.objective,
    };
    let zero = || Group::ALL.map(|g| vec![0.0; params.group(g).len()]);
    if !breakdown.is_finite() {
        return Ok(StepGradients {
            breakdown,
            grads: zero(),
        });
    }
    let lg = lt.backward(lv.total)?;
    let trainable = config.trainable();
    let per_sample: Vec<Result<Vec<Option<Vec<f64>>>>> = tapes
        .par_iter()
        .enumerate()
        .map(|(i, st)| {
            let seeds: Vec<(Var, Vec<f64>)> = (0..3).map(|k| (st.z[k], lg.get(leaves[k][i]))).collect();
            let g = st.tape.backward_seeded(&seeds)?;
            Ok(Group::ALL
                .iter()
                .map(|grp| {
                    trainable[grp.index()]
                        .then(|| g.get(st.params.leaves[grp.index()]))
                })
                .collect())
        })
        .collect();
    let mut grads = zero();
    for sample_grads in per_sample {
        for (acc, g) in grads.iter_mut().zip(sample_grads?) {
            if let Some(g) = g {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(StepGradients { breakdown, grads })
}

/// Failure inside [`train_step`]: the name of the non-finite quantity.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied(LossBreakdown),
    NonFinite(String, LossBreakdown),
}

/// One optimisation step on `batch`. Parameters are left untouched when
/// anything non-finite shows up.
pub fn train_step(
    params: &mut EncoderParams,
    optim: &mut OptimState,
    batch: &[&Sample],
    config: &TrainConfig,
    epoch: u64,
) -> Result<StepOutcome> {
    let sg = batch_gradients(params, batch, config, epoch)?;
    if let Some(term) = sg.breakdown.non_finite_term() {
        return Ok(StepOutcome::NonFinite(term.to_string(), sg.breakdown));
    }
    for g in Group::ALL {
        if sg.grads[g.index()].iter().any(|v| !v.is_finite()) {
            return Ok(StepOutcome::NonFinite(format!("gradient of {}", g.name()), sg.breakdown));
        }
    }
    let mut next = params.clone();
    let mut next_opt = optim.clone();
    next_opt.step += 1;
    let trainable = config.trainable();
    for g in Group::ALL.into_iter().filter(|g| trainable[g.index()]) {
        let i = g.index();
        adamw_update(
            next.group_mut(g),
            &sg.grads[i],
            &mut next_opt.m[i],
            &mut next_opt.v[i],
            next_opt.step,
            config.opt_for(g),
            config.beta1,
            config.beta2,
            config.eps,
        );
    }
    if !next.is_finite() {
        return Ok(StepOutcome::NonFinite("parameters".into(), sg.breakdown));
    }
    *params = next;
    *optim = next_opt;
    Ok(StepOutcome::Applied(sg.breakdown))
}

/// Batches of one epoch: a seeded shuffle cut into `batch_size` chunks,
/// dropping a trailing chunk smaller than 2.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, &[0x73687566, epoch]));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Resumable training state.
pub struct Trainer {
    state: Checkpoint,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            state: Checkpoint::init(config)?,
        })
    }

    /// Continues from a checkpoint; the stored config governs the run.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        Ok(Self { state: checkpoint })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn set_epochs(&mut self, epochs: u64) {
        self.state.config.epochs = epochs;
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Runs the next epoch and appends its record to the history.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if data.len() < 2 {
            return Err(TrainError::TooFewSamples(data.len()));
        }
        let epoch = self.state.epoch + 1;
        let cfg = self.state.config.clone();
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sums = [0.0; 4];
        for (step, idx) in batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let before = self.state.clone();
            let st = &mut self.state;
            match train_step(&mut st.params, &mut st.optim, &batch, &cfg, epoch)? {
                StepOutcome::Applied(b) => {
                    for (s, v) in sums.iter_mut().zip([b.intra, b.cross, b.dho, b.total]) {
                        *s += v;
                    }
                }
                StepOutcome::NonFinite(term, _) => {
                    return Err(TrainError::NonFinite {
                        term,
                        epoch,
                        step: step as u64 + 1,
                        last_good: Box::new(before),
                    })
                }
            }
        }
        let k = batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            intra: sums[0] / k,
            cross: sums[1] / k,
            dho: sums[2] / k,
            total: sums[3] / k,
            steps: batches.len() as u64,
        };
        self.state.epoch = epoch;
        self.state.history.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint)) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch(data)?;
            on_epoch(&rec, &self.state);
        }
        Ok(())
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    let mut t = Trainer::new(config)?;
    t.run(data, |_, _| {})?;
    Ok(t.into_checkpoint())
}

/// Key-value view of a config, for reports.
pub fn config_map(config: &TrainConfig) -> BTreeMap<&'static str, String> {
    config.kv_pairs().into_iter().collect()
}
