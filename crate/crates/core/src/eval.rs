//! Evaluation of frozen encoders.
//!
//! Features are the point encoder's Euclidean outputs (the projection
//! heads are only used for the ball embeddings in the hierarchy metric and
//! the disk plots). Classifiers are one-vs-rest linear models fit with a
//! squared hinge loss and an L2 penalty by plain gradient descent, so runs
//! are deterministic and the objective decreases at every step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{augment, hash64, sample_seed, AugmentParams, Sample};
use crate::encoders::{encode_points, project_and_lift, Branch, EncodeError, EncoderParams};
use crate::geometry::{self, BallPoint, Curvature, GeometryError};
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has no training samples")]
    DegenerateSplit(usize),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{0}")]
    InsufficientSamples(String),
    #[error("correlation undefined: {0} is constant")]
    ConstantInput(&'static str),
    #[error("disk plots need 2-D embeddings, got {0}-D")]
    Dimension(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One embedded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: u64,
    pub feature: Vec<f64>,
    pub ball: BallPoint,
    pub label: usize,
    pub path: Vec<u32>,
}

impl EmbeddingRow {
    /// Depth of the emitting node.
    pub fn level(&self) -> usize {
        self.path.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub curvature: Curvature,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.feature.clone()).collect()
    }
}

/// Encodes every sample with the checkpoint's point branch. With
/// `augment_seed` set, each cloud is augmented first using the training
/// augmentation ranges.
pub fn embed_dataset(ckpt: &Checkpoint, samples: &[Sample], augment_seed: Option<u64>) -> Result<EmbeddingTable> {
    embed_with(&ckpt.params, ckpt.curvature(), samples, augment_seed.map(|s| (s, &ckpt.config.augment)))
}

/// Same as [`embed_dataset`] for bare parameters.
pub fn embed_with(
    params: &EncoderParams,
    c: Curvature,
    samples: &[Sample],
    augmentation: Option<(u64, &AugmentParams)>,
) -> Result<EmbeddingTable> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let feature = match augmentation {
                Some((seed, aug)) => encode_points(params, &augment(&s.cloud, sample_seed(seed, s.id, 0, 0), aug))?,
                None => encode_points(params, &s.cloud)?,
            };
            let ball = project_and_lift(params, Branch::Point, &feature, c)?;
            Ok(EmbeddingRow {
                id: s.id,
                feature,
                ball,
                label: s.label,
                path: s.ancestor_path.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingTable { curvature: c, rows })
}

/// Settings of the linear classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    /// L2 penalty on weights (not biases).
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            max_iters: 2000,
            tol: 1e-10,
        }
    }
}

/// Fitted one-vs-rest classifier on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Per class: `dim` weights followed by a bias.
    weights: Vec<Vec<f64>>,
    /// Objective after each descent step (summed over classes).
    pub objective_trace: Vec<f64>,
    pub step_size: f64,
}

fn standardise_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for r in x {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    let scale = var.into_iter().map(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    (mean, scale)
}

fn design(x: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let mut z: Vec<f64> = r.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) * s).collect();
            z.push(1.0);
            z
        })
        .collect()
}

/// Largest eigenvalue of `A^T A` by power iteration from a fixed start.
fn spectral_sq(a: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut est = 0.0;
    for _ in 0..300 {
        let av: Vec<f64> = a.iter().map(|r| geometry::raw::dot(r, &v)).collect();
        let mut w = vec![0.0; d];
        for (r, s) in a.iter().zip(&av) {
            w.iter_mut().zip(r).for_each(|(wi, ri)| *wi += s * ri);
        }
        let n = geometry::raw::norm(&w);
        if n == 0.0 {
            return 0.0;
        }
        est = n;
        v = w.into_iter().map(|x| x / n).collect();
    }
    est
}

/// Squared-hinge objective of one class and its gradient.
fn class_objective(a: &[Vec<f64>], y: &[f64], w: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let d = w.len();
    let mut grad = vec![0.0; d];
    let mut loss = 0.0;
    for (r, yi) in a.iter().zip(y) {
        let margin = 1.0 - yi * geometry::raw::dot(r, w);
        if margin > 0.0 {
            loss += margin * margin / n;
            let k = -2.0 * margin * yi / n;
            grad.iter_mut().zip(r).for_each(|(g, v)| *g += k * v);
        }
    }
    let reg: f64 = w[..d - 1].iter().map(|v| v * v).sum();
    loss += 0.5 * alpha * reg;
    grad[..d - 1].iter_mut().zip(&w[..d - 1]).for_each(|(g, v)| *g += alpha * v);
    (loss, grad)
}

impl LinearProbe {
    /// Fits one squared-hinge classifier per class with step `1/L`, where
    /// `L = 2 sigma_max(A)^2 / n + alpha` bounds the gradient's Lipschitz
    /// constant.
    pub fn fit(x: &[Vec<f64>], labels: &[usize], opts: &ProbeOptions) -> Result<Self> {
        if x.is_empty() || x.len() != labels.len() {
            return Err(EvalError::Invalid("features and labels must be nonempty and aligned".into()));
        }
        let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(EvalError::TooFewClasses(classes.len()));
        }
        let (mean, scale) = standardise_stats(x);
        let a = design(x, &mean, &scale);
        let n = a.len() as f64;
        let lip = 2.0 * spectral_sq(&a) * 1.01 / n + opts.alpha;
        let step = 1.0 / lip;
        let d = a[0].len();
        let ys: Vec<Vec<f64>> = classes
            .iter()
            .map(|c| labels.iter().map(|l| if l == c { 1.0 } else { -1.0 }).collect())
            .collect();
        let mut weights = vec![vec![0.0; d]; classes.len()];
        let mut trace = Vec::new();
        let mut prev = f64::INFINITY;
        for _ in 0..opts.max_iters {
            let mut total = 0.0;
            for (w, y) in weights.iter_mut().zip(&ys) {
                let (_, g) = class_objective(&a, y, w, opts.alpha);
                w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= step * gi);
                total += class_objective(&a, y, w, opts.alpha).0;
            }
            trace.push(total);
            if prev.is_finite() && (prev - total).abs() <= opts.tol * prev.abs().max(1e-300) {
                break;
            }
            prev = total;
        }
        Ok(Self {
            classes,
            mean,
            scale,
            weights,
            objective_trace: trace,
            step_size: step,
        })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        z.push(1.0);
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (w, c) in self.weights.iter().zip(&self.classes) {
            let s = geometry::raw::dot(w, &z);
            if s > best.0 {
                best = (s, *c);
            }
        }
        best.1
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(r, l)| self.predict(r) == **l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Held-out accuracy of a linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
}

/// Per-class seeded split: the first `ceil(train_frac * n_class)` shuffled
/// members of every class go to training.
pub fn stratified_split(labels: &[usize], seed: u64, train_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, &[0x73706c6974]));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let k = ((train_frac * idx.len() as f64).ceil() as usize).min(idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    (train, test)
}

/// Linear probe on the table's Euclidean features.
pub fn linear_probe(table: &EmbeddingTable, seed: u64, train_frac: f64) -> Result<ProbeResult> {
    linear_probe_with(table, seed, train_frac, &ProbeOptions::default())
}

pub fn linear_probe_with(
    table: &EmbeddingTable,
    seed: u64,
    train_frac: f64,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EvalError::Invalid(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let labels = table.labels();
    let all: BTreeSet<usize> = labels.iter().copied().collect();
    if all.len() < 2 {
        return Err(EvalError::TooFewClasses(all.len()));
    }
    let (train, test) = stratified_split(&labels, seed, train_frac);
    let present: BTreeSet<usize> = train.iter().map(|&i| labels[i]).collect();
    if let Some(missing) = all.difference(&present).next() {
        return Err(EvalError::DegenerateSplit(*missing));
    }
    if test.is_empty() {
        return Err(EvalError::InsufficientSamples("held-out fold is empty".into()));
    }
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| table.rows[i].feature.clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let probe = LinearProbe::fit(&xtr, &ytr, opts)?;
    Ok(ProbeResult {
        accuracy: probe.accuracy(&xte, &yte),
        train_size: train.len(),
        test_size: test.len(),
        classes: all.len(),
    })
}

/// Default number of query samples per class.
pub const DEFAULT_QUERIES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub n_way: usize,
    pub m_shot: usize,
    pub tasks: usize,
    pub queries_per_class: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over tasks.
    pub std: f64,
}

/// `tasks` episodes of `n_way` classes with `m_shot` support samples and up
/// to `queries` query samples per class.
pub fn fewshot_eval(
    table: &EmbeddingTable,
    n_way: usize,
    m_shot: usize,
    tasks: usize,
    queries: usize,
    seed: u64,
) -> Result<FewShotResult> {
    if n_way < 2 {
        return Err(EvalError::Invalid(format!("n_way must be >= 2, got {n_way}")));
    }
    if m_shot == 0 || tasks == 0 || queries == 0 {
        return Err(EvalError::Invalid("shots, tasks and queries must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() > m_shot)
        .map(|(k, _)| *k)
        .collect();
    if eligible.len() < n_way {
        return Err(EvalError::InsufficientSamples(format!(
            "{} classes have more than {m_shot} samples; need {n_way}",
            eligible.len()
        )));
    }
    let q = by_class
        .values()
        .filter(|v| v.len() > m_shot)
        .map(|v| v.len() - m_shot)
        .min()
        .unwrap_or(0)
        .min(queries);
    let accuracies = (0..tasks)
        .into_par_iter()
        .map(|task| {
            let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, &[0x6661736b, task as u64]));
            let classes: Vec<usize> = eligible.choose_multiple(&mut rng, n_way).copied().collect();
            let (mut sx, mut sy, mut qx, mut qy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for c in &classes {
                let mut idx = by_class[c].clone();
                idx.shuffle(&mut rng);
                for &i in &idx[..m_shot] {
                    sx.push(table.rows[i].feature.clone());
                    sy.push(*c);
                }
                for &i in &idx[m_shot..m_shot + q] {
                    qx.push(table.rows[i].feature.clone());
                    qy.push(*c);
                }
            }
            let probe = LinearProbe::fit(&sx, &sy, &ProbeOptions::default())?;
            Ok(probe.accuracy(&qx, &qy))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&accuracies);
    Ok(FewShotResult {
        n_way,
        m_shot,
        tasks,
        queries_per_class: q,
        accuracies,
        mean,
        std,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EvalError::Invalid("need two aligned series of length >= 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 {
        return Err(EvalError::ConstantInput("first series"));
    }
    if syy == 0.0 {
        return Err(EvalError::ConstantInput("second series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Hyperbolic distance of every ball embedding to the origin, optionally
/// after translating the table's gyromidpoint to the origin.
pub fn radii(table: &EmbeddingTable, aligned: bool) -> Result<Vec<f64>> {
    if table.is_empty() {
        return Ok(Vec::new());
    }
    let balls: Vec<BallPoint> = table.rows.iter().map(|r| r.ball.clone()).collect();
    let pts = if aligned {
        let root = geometry::gyromidpoint(&balls)?.neg();
        balls
            .iter()
            .map(|b| geometry::mobius_add(b, &root))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        balls
    };
    let c = table.curvature.get();
    Ok(pts.iter().map(|p| geometry::raw::dist_to_origin(p.coords(), c)).collect())
}

/// Spearman correlation between node level and ball radius.
pub fn level_radius_correlation(table: &EmbeddingTable, aligned: bool) -> Result<f64> {
    let r = radii(table, aligned)?;
    let levels: Vec<f64> = table.rows.iter().map(|row| row.level() as f64).collect();
    if r.len() < 2 {
        return Err(EvalError::Invalid("need at least two rows".into()));
    }
    match spearman(&levels, &r) {
        Err(EvalError::ConstantInput("second series")) => Err(EvalError::ConstantInput("radius")),
        Err(EvalError::ConstantInput(_)) => Err(EvalError::ConstantInput("level")),
        other => other,
    }
}

/// Canvas geometry of the disk plot.
pub const CANVAS: f64 = 640.0;
pub const DISK_RADIUS: f64 = 280.0;
const CENTER: f64 = 300.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Canvas position of a ball point: the boundary circle of radius
/// `1/sqrt(c)` maps onto [`DISK_RADIUS`].
pub fn canvas_position(p: &BallPoint) -> (f64, f64) {
    let s = p.curvature().sqrt() * DISK_RADIUS;
    (CENTER + s * p.coords()[0], CENTER - s * p.coords()[1])
}

/// SVG of 2-D ball embeddings coloured by label. `metadata` pairs are
/// echoed into the `<metadata>` element.
pub fn disk_svg(table: &EmbeddingTable, metadata: &[(String, String)]) -> Result<String> {
    if let Some(r) = table.rows.iter().find(|r| r.ball.dim() != 2) {
        return Err(EvalError::Dimension(r.ball.dim()));
    }
    let escape = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    );
    s.push_str("<metadata>\n");
    let _ = writeln!(s, "curvature = {}", table.curvature.get());
    for (k, v) in metadata {
        let _ = writeln!(s, "{} = {}", escape(k), escape(v));
    }
    s.push_str("</metadata>\n");
    let _ = writeln!(
        s,
        "<circle id=\"boundary\" cx=\"{CENTER}\" cy=\"{CENTER}\" r=\"{DISK_RADIUS}\" fill=\"none\" stroke=\"black\"/>"
    );
    for r in &table.rows {
        let (x, y) = canvas_position(&r.ball);
        let color = PALETTE[r.label % PALETTE.len()];
        let _ = writeln!(
            s,
            "<circle class=\"marker\" data-label=\"{}\" cx=\"{x:.4}\" cy=\"{y:.4}\" r=\"2.5\" fill=\"{color}\"/>",
            r.label
        );
    }
    let labels: BTreeSet<usize> = table.rows.iter().map(|r| r.label).collect();
    s.push_str("<g id=\"legend\" font-family=\"sans-serif\" font-size=\"11\">\n");
    for (k, l) in labels.iter().enumerate() {
        let y = 20.0 + 14.0 * k as f64;
        let color = PALETTE[l % PALETTE.len()];
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"8\" height=\"8\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">class {l}</text>",
            CANVAS - 70.0,
            y - 8.0,
            CANVAS - 58.0,
            y
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn plot_disk(table: &EmbeddingTable, out: &Path, metadata: &[(String, String)]) -> Result<()> {
    std::fs::write(out, disk_svg(table, metadata)?)?;
    Ok(())
}
