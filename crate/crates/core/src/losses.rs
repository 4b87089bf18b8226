//! Training objectives on ball embeddings.
//!
//! * hyperbolic InfoNCE, where the similarity logit of a pair is its
//!   negated geodesic distance over the temperature. With the default
//!   [`NegativeBank::Both`] the denominator runs over all `2N - 1`
//!   embeddings other than the anchor, positive included;
//! * the cross-modal term, InfoNCE between view midpoints and image
//!   embeddings;
//! * the hierarchy term: midpoints are translated so that their gyromidpoint
//!   sits at the origin, and `sigmoid(-mean(w_i * r_i))` with
//!   `w_i = sigmoid(r_i)` rewards large weighted radii.
//!
//! Each loss is written once against the gradient [`Tape`]; the
//! [`BallPoint`] functions here evaluate the same graph on constants.

use thiserror::Error;

use crate::geometry::{BallPoint, Curvature, GeometryError};
use crate::grad::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("embedding lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("loss weight must be non-negative, got {0}")]
    InvalidWeight(f64),
    #[error("empty embedding list")]
    Empty,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which embeddings enter the denominator for an anchor `a_i` with
/// positive `p_i`. The anchor itself never does; the positive always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeBank {
    /// `{p_k}`: the opposite view only, `N` terms.
    Cross,
    /// `{p_k} + {a_k : k != i}`: every other embedding of both views,
    /// `2N - 1` terms.
    #[default]
    Both,
}

impl std::str::FromStr for NegativeBank {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cross" => Ok(Self::Cross),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown negative bank `{other}` (expected cross|both)")),
        }
    }
}

impl std::fmt::Display for NegativeBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cross => "cross",
            Self::Both => "both",
        })
    }
}

/// Which terms of the overall objective are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// intra + cross + lambda * dho
    #[default]
    Joint,
    /// intra only
    Intra,
    /// cross only
    Cross,
}

impl Objective {
    /// Coefficients `(intra, cross, dho)`; the dho coefficient multiplies
    /// `lambda`.
    pub fn weights(self) -> (f64, f64, f64) {
        match self {
            Self::Joint => (1.0, 1.0, 1.0),
            Self::Intra => (1.0, 0.0, 0.0),
            Self::Cross => (0.0, 1.0, 0.0),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "joint" => Ok(Self::Joint),
            "intra" => Ok(Self::Intra),
            "cross" => Ok(Self::Cross),
            other => Err(format!("unknown objective `{other}` (expected joint|intra|cross)")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Intra => "intra",
            Self::Cross => "cross",
        })
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub lambda: f64,
    pub bank: NegativeBank,
    pub objective: Objective,
    /// Let gradients flow through the level weights `w_i`.
    pub differentiate_weights: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda: 0.01,
            bank: NegativeBank::Both,
            objective: Objective::Joint,
            differentiate_weights: false,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidTemperature(self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidWeight(self.lambda));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub intra: f64,
    pub cross: f64,
    pub dho: f64,
    pub total: f64,
    pub tau: f64,
    pub lambda: f64,
    pub objective: Objective,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.intra.is_finite() && self.cross.is_finite() && self.dho.is_finite() && self.total.is_finite()
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("intra", self.intra),
            ("cross", self.cross),
            ("dho", self.dho),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Three embedding lists of one batch: two point-cloud views and the image.
#[derive(Debug, Clone)]
pub struct Batch {
    pub z_hyp1: Vec<BallPoint>,
    pub z_hyp2: Vec<BallPoint>,
    pub z_img: Vec<BallPoint>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn validate(&self) -> Result<Curvature, LossError> {
        let n = self.z_hyp1.len();
        for other in [self.z_hyp2.len(), self.z_img.len()] {
            if other != n {
                return Err(LossError::LengthMismatch(n, other));
            }
        }
        if n < 2 {
            return Err(LossError::TooFewSamples(n));
        }
        shared_curvature(&[&self.z_hyp1, &self.z_hyp2, &self.z_img])
    }
}

fn shared_curvature(lists: &[&[BallPoint]]) -> Result<Curvature, LossError> {
    let first = lists
        .iter()
        .find_map(|l| l.first())
        .ok_or(LossError::Empty)?;
    let (c, dim) = (first.curvature(), first.dim());
    for p in lists.iter().flat_map(|l| l.iter()) {
        if p.curvature() != c {
            return Err(GeometryError::CurvatureMismatch(c.get(), p.curvature().get()).into());
        }
        if p.dim() != dim {
            return Err(GeometryError::DimensionMismatch(dim, p.dim()).into());
        }
    }
    Ok(c)
}

fn check_pair(a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::LengthMismatch(a, b));
    }
    if a < 2 {
        return Err(LossError::TooFewSamples(a));
    }
    Ok(())
}

/// Tape-level builders. All take embeddings already recorded as `1 x n`
/// nodes on `t`.
pub mod tape {
    use super::*;

    /// Per-anchor terms `l(a_i, p_i) = D(a_i, p_i)/tau + log sum_k exp(-D(a_i, n_k)/tau)`
    /// stacked into a `1 x N` node; `n_k` ranges over the bank, which
    /// always contains `p_i`.
    pub fn infonce_terms(
        t: &mut Tape,
        anchors: &[Var],
        positives: &[Var],
        c: f64,
        tau: f64,
        bank: NegativeBank,
    ) -> Result<Var, LossError> {
        check_pair(anchors.len(), positives.len())?;
        let n = anchors.len();
        let inv_tau = 1.0 / tau;
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let mut logits = Vec::with_capacity(2 * n);
            let mut pos = None;
            for k in 0..n {
                let d = t.hyp_distance(anchors[i], positives[k], c);
                if k == i {
                    pos = Some(d);
                }
                logits.push(t.scale(d, -inv_tau));
            }
            if bank == NegativeBank::Both {
                for k in (0..n).filter(|&k| k != i) {
                    let d = t.hyp_distance(anchors[i], anchors[k], c);
                    logits.push(t.scale(d, -inv_tau));
                }
            }
            let row = t.stack(&logits);
            let lse = t.log_sum_exp(row);
            let pos = t.scale(pos.expect("positive is in the bank"), inv_tau);
            terms.push(t.add(pos, lse));
        }
        Ok(t.stack(&terms))
    }

    pub fn infonce_directional(
        t: &mut Tape,
        anchors: &[Var],
        positives: &[Var],
        c: f64,
        tau: f64,
        bank: NegativeBank,
    ) -> Result<Var, LossError> {
        let terms = infonce_terms(t, anchors, positives, c, tau, bank)?;
        Ok(t.mean_all(terms))
    }

    /// `(1/2N) sum_i [l(z1_i, z2_i) + l(z2_i, z1_i)]`; bitwise symmetric in
    /// its two arguments.
    pub fn infonce_symmetric(
        t: &mut Tape,
        z1: &[Var],
        z2: &[Var],
        c: f64,
        tau: f64,
        bank: NegativeBank,
    ) -> Result<Var, LossError> {
        let fwd = infonce_terms(t, z1, z2, c, tau, bank)?;
        let bwd = infonce_terms(t, z2, z1, c, tau, bank)?;
        let both = t.add(fwd, bwd);
        let s = t.sum_all(both);
        Ok(t.scale(s, 0.5 / z1.len() as f64))
    }

    pub fn midpoints(t: &mut Tape, z1: &[Var], z2: &[Var], c: f64) -> Result<Vec<Var>, LossError> {
        if z1.len() != z2.len() {
            return Err(LossError::LengthMismatch(z1.len(), z2.len()));
        }
        Ok(z1
            .iter()
            .zip(z2)
            .map(|(a, b)| t.gyromidpoint(&[*a, *b], c))
            .collect())
    }

    pub fn root_node(t: &mut Tape, z: &[Var], c: f64) -> Result<Var, LossError> {
        if z.is_empty() {
            return Err(LossError::Empty);
        }
        Ok(t.gyromidpoint(z, c))
    }

    /// `z_i (+) (-z_c)` for every `z_i`.
    pub fn root_align(t: &mut Tape, z: &[Var], root: Var, c: f64) -> Vec<Var> {
        let neg_root = t.neg(root);
        z.iter().map(|zi| t.mobius_add(*zi, neg_root, c)).collect()
    }

    /// Level-weighted mean distance to the origin.
    pub fn hdo_score(t: &mut Tape, aligned: &[Var], c: f64, differentiate_weights: bool) -> Result<Var, LossError> {
        if aligned.is_empty() {
            return Err(LossError::Empty);
        }
        let dim = t.shape(aligned[0]).1;
        let origin = t.constant_vec(vec![0.0; dim]);
        let radii: Vec<Var> = aligned.iter().map(|z| t.hyp_distance(*z, origin, c)).collect();
        let r = t.stack(&radii);
        let w = t.sigmoid(r);
        let w = if differentiate_weights { w } else { t.detach(w) };
        let wr = t.mul(w, r);
        Ok(t.mean_all(wr))
    }

    /// `sigmoid(-hdo)` of the root-aligned embeddings.
    pub fn dho_loss(t: &mut Tape, aligned: &[Var], c: f64, differentiate_weights: bool) -> Result<Var, LossError> {
        let hdo = hdo_score(t, aligned, c, differentiate_weights)?;
        let neg = t.neg(hdo);
        Ok(t.sigmoid(neg))
    }

    /// Handles to the recorded terms of the overall objective.
    #[derive(Debug, Clone, Copy)]
    pub struct LossVars {
        pub intra: Var,
        pub cross: Var,
        pub dho: Var,
        pub total: Var,
    }

    /// Records the overall objective. The hierarchy term acts on the
    /// root-aligned view midpoints.
    pub fn total_loss(
        t: &mut Tape,
        z1: &[Var],
        z2: &[Var],
        z_img: &[Var],
        c: f64,
        settings: &LossSettings,
    ) -> Result<LossVars, LossError> {
        settings.validate()?;
        check_pair(z1.len(), z2.len())?;
        check_pair(z1.len(), z_img.len())?;
        let LossSettings {
            tau,
            lambda,
            bank,
            objective,
            differentiate_weights,
        } = *settings;
        let intra = infonce_symmetric(t, z1, z2, c, tau, bank)?;
        let mids = midpoints(t, z1, z2, c)?;
        let cross = infonce_symmetric(t, &mids, z_img, c, tau, bank)?;
        let root = root_node(t, &mids, c)?;
        let aligned = root_align(t, &mids, root, c);
        let dho = dho_loss(t, &aligned, c, differentiate_weights)?;

        let (wi, wc, wd) = objective.weights();
        let total = match objective {
            Objective::Joint => {
                let weighted = t.scale(dho, lambda);
                let ic = t.add(intra, cross);
                t.add(ic, weighted)
            }
            _ => {
                let a = t.scale(intra, wi);
                let b = t.scale(cross, wc);
                let d = t.scale(dho, wd * lambda);
                let ab = t.add(a, b);
                t.add(ab, d)
            }
        };
        Ok(LossVars {
            intra,
            cross,
            dho,
            total,
        })
    }
}

fn record(t: &mut Tape, pts: &[BallPoint]) -> Vec<Var> {
    pts.iter().map(|p| t.constant_vec(p.coords().to_vec())).collect()
}

fn to_point(t: &Tape, v: Var, c: Curvature) -> BallPoint {
    crate::geometry::project_to_ball(t.value(v), c)
}

/// Mean over anchors of the one-directional hyperbolic InfoNCE term.
pub fn hyp_infonce_directional(
    anchors: &[BallPoint],
    positives: &[BallPoint],
    tau: f64,
    bank: NegativeBank,
) -> Result<f64, LossError> {
    check_pair(anchors.len(), positives.len())?;
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let c = shared_curvature(&[anchors, positives])?;
    let mut t = Tape::new();
    let (a, p) = (record(&mut t, anchors), record(&mut t, positives));
    let l = tape::infonce_directional(&mut t, &a, &p, c.get(), tau, bank)?;
    Ok(t.scalar(l))
}

/// Symmetrised hyperbolic InfoNCE over both directions.
pub fn hyp_infonce_symmetric(
    z1: &[BallPoint],
    z2: &[BallPoint],
    tau: f64,
    bank: NegativeBank,
) -> Result<f64, LossError> {
    check_pair(z1.len(), z2.len())?;
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let c = shared_curvature(&[z1, z2])?;
    let mut t = Tape::new();
    let (a, b) = (record(&mut t, z1), record(&mut t, z2));
    let l = tape::infonce_symmetric(&mut t, &a, &b, c.get(), tau, bank)?;
    Ok(t.scalar(l))
}

/// Elementwise gyromidpoint of paired embeddings.
pub fn midpoints(z1: &[BallPoint], z2: &[BallPoint]) -> Result<Vec<BallPoint>, LossError> {
    if z1.len() != z2.len() {
        return Err(LossError::LengthMismatch(z1.len(), z2.len()));
    }
    z1.iter()
        .zip(z2)
        .map(|(a, b)| Ok(crate::geometry::gyromidpoint(&[a.clone(), b.clone()])?))
        .collect()
}

/// Gyromidpoint of the whole list.
pub fn root_node(z: &[BallPoint]) -> Result<BallPoint, LossError> {
    if z.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(crate::geometry::gyromidpoint(z)?)
}

pub fn root_align(z: &[BallPoint], root: &BallPoint) -> Result<Vec<BallPoint>, LossError> {
    let neg = root.neg();
    z.iter()
        .map(|p| Ok(crate::geometry::mobius_add(p, &neg)?))
        .collect()
}

pub fn hdo_score(aligned: &[BallPoint]) -> Result<f64, LossError> {
    let c = shared_curvature(&[aligned])?;
    let mut t = Tape::new();
    let z = record(&mut t, aligned);
    let h = tape::hdo_score(&mut t, &z, c.get(), false)?;
    Ok(t.scalar(h))
}

pub fn dho_loss(aligned: &[BallPoint]) -> Result<f64, LossError> {
    let c = shared_curvature(&[aligned])?;
    let mut t = Tape::new();
    let z = record(&mut t, aligned);
    let h = tape::dho_loss(&mut t, &z, c.get(), false)?;
    Ok(t.scalar(h))
}

/// Evaluates the overall objective on a batch.
pub fn total_loss(batch: &Batch, settings: &LossSettings) -> Result<LossBreakdown, LossError> {
    let c = batch.validate()?;
    let mut t = Tape::new();
    let z1 = record(&mut t, &batch.z_hyp1);
    let z2 = record(&mut t, &batch.z_hyp2);
    let zi = record(&mut t, &batch.z_img);
    let v = tape::total_loss(&mut t, &z1, &z2, &zi, c.get(), settings)?;
    Ok(LossBreakdown {
        intra: t.scalar(v.intra),
        cross: t.scalar(v.cross),
        dho: t.scalar(v.dho),
        total: t.scalar(v.total),
        tau: settings.tau,
        lambda: settings.lambda,
        objective: settings.objective,
    })
}

/// Midpoints after translating their gyromidpoint to the origin.
pub fn aligned_midpoints(z1: &[BallPoint], z2: &[BallPoint]) -> Result<Vec<BallPoint>, LossError> {
    let mids = midpoints(z1, z2)?;
    let root = root_node(&mids)?;
    let c = root.curvature();
    let mut t = Tape::new();
    let m = record(&mut t, &mids);
    let r = t.constant_vec(root.coords().to_vec());
    let aligned = tape::root_align(&mut t, &m, r, c.get());
    Ok(aligned.into_iter().map(|v| to_point(&t, v, c)).collect())
}

/// Logistic sigmoid.
pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}
