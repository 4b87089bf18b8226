//! Self-check suites: geometry invariants over seeded random points,
//! finite-difference checks of every tape primitive, and of the losses.
//!
//! Each suite returns a [`CheckReport`] with one [`CheckRecord`] per
//! family. The geometry suite runs against a [`Kernels`] value so that a
//! deliberately broken Möbius addition can be swapped in to confirm the
//! suite notices.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{raw, BALL_EPS};
use crate::grad::{compare_gradients, finite_diff_check, GradError, GradientReport, Tape, Var, FD_STEP, PRIMITIVES};
use crate::losses::{tape as lt, LossSettings, NegativeBank, Objective};

/// Outcome of one check family.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub suite: &'static str,
    pub family: String,
    pub samples: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRecord {
    fn new(suite: &'static str, family: impl Into<String>, samples: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            suite,
            family: family.into(),
            samples,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error < tolerance,
        }
    }

    fn from_gradient(suite: &'static str, r: &GradientReport, tolerance: f64) -> Self {
        Self::new(suite, r.label.clone(), r.inputs, r.max_rel_error, tolerance)
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"suite\":\"{}\",\"family\":\"{}\",\"samples\":{},\"max_error\":{},\"tolerance\":{},\"passed\":{}}}",
            self.suite,
            self.family,
            self.samples,
            json_number(self.max_error),
            self.tolerance,
            self.passed
        )
    }
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        "null".into()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub records: Vec<CheckRecord>,
    pub seconds: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.records.iter().filter(|r| !r.passed)
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.records.extend(other.records);
        self.seconds += other.seconds;
    }

    pub fn family(&self, name: &str) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.family == name)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.records.iter().map(|r| r.family.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<9} {:<width$} {:>8} {:>12} {:>10}  result", "suite", "family", "samples", "max error", "tolerance")?;
        for r in &self.records {
            writeln!(
                f,
                "{:<9} {:<width$} {:>8} {:>12.3e} {:>10.0e}  {}",
                r.suite,
                r.family,
                r.samples,
                r.max_error,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{} of {} checks passed in {:.2}s", self.records.iter().filter(|r| r.passed).count(), self.records.len(), self.seconds)
    }
}

/// Deliberate defects for exercising the checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates the `2c<x, y>` term in the numerator of Möbius addition.
    MobiusAddSign,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Fault::None),
            "mobius-add-sign" => Ok(Fault::MobiusAddSign),
            other => Err(format!("unknown fault `{other}`")),
        }
    }
}

/// The ball operations the geometry suite exercises.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kernels {
    fault: Fault,
}

impl Kernels {
    pub fn new(fault: Fault) -> Self {
        Self { fault }
    }

    pub fn fault(&self) -> Fault {
        self.fault
    }

    pub fn mobius_add(&self, x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let mut out = match self.fault {
            Fault::None => raw::mobius_add(x, y, c),
            Fault::MobiusAddSign => {
                let (xy, x2, y2) = (raw::dot(x, y), raw::norm_sq(x), raw::norm_sq(y));
                let a = 1.0 - 2.0 * c * xy + c * y2;
                let b = 1.0 - c * x2;
                let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
                x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / d).collect()
            }
        };
        raw::project_in_place(&mut out, c);
        out
    }

    pub fn distance(&self, x: &[f64], y: &[f64], c: f64) -> f64 {
        match self.fault {
            Fault::None => raw::dist(x, y, c),
            Fault::MobiusAddSign => {
                let s = c.sqrt();
                2.0 / s * raw::atanh_clamped(s * raw::norm(&self.mobius_add(&neg(x), y, c)))
            }
        }
    }

    pub fn exp_map(&self, x: &[f64], v: &[f64], c: f64) -> Vec<f64> {
        match self.fault {
            Fault::None => raw::exp_map(x, v, c),
            Fault::MobiusAddSign => {
                let phi = raw::lift_scale(raw::conformal_factor(x, c), raw::norm(v), c.sqrt());
                let w: Vec<f64> = v.iter().map(|vi| phi * vi).collect();
                self.mobius_add(x, &w, c)
            }
        }
    }

    pub fn log_map(&self, x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        match self.fault {
            Fault::None => raw::log_map(x, y, c),
            Fault::MobiusAddSign => {
                let u = self.mobius_add(&neg(x), y, c);
                let n = raw::norm(&u);
                if n == 0.0 {
                    return u;
                }
                let s = c.sqrt();
                let k = 2.0 / (s * raw::conformal_factor(x, c)) * raw::atanh_clamped(s * n) / n;
                u.into_iter().map(|v| k * v).collect()
            }
        }
    }

    pub fn scalar_mul(&self, r: f64, x: &[f64], c: f64) -> Vec<f64> {
        let mut out = raw::mobius_scalar_mul(r, x, c);
        raw::project_in_place(&mut out, c);
        out
    }

    pub fn gyromidpoint(&self, points: &[&[f64]], c: f64) -> Vec<f64> {
        let mut out = raw::gyromidpoint(points, c);
        raw::project_in_place(&mut out, c);
        out
    }
}

fn neg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Uniform direction, radius uniform in `[0, max_scaled) / sqrt(c)`.
pub fn sample_ball(rng: &mut impl Rng, dim: usize, c: f64, max_scaled: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = raw::norm(&v);
        if n > 1e-9 {
            let r = rng.random_range(0.0..max_scaled) / c.sqrt();
            return v.iter().map(|x| x * r / n).collect();
        }
    }
}

/// Settings of the geometry invariant suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySuite {
    pub samples: usize,
    pub limit_pairs: usize,
    pub midpoint_pairs: usize,
    pub curvatures: Vec<f64>,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl Default for GeometrySuite {
    fn default() -> Self {
        Self {
            samples: 10_000,
            limit_pairs: 1_000,
            midpoint_pairs: 1_000,
            curvatures: vec![0.01, 0.1, 0.5, 1.0, 2.0],
            dims: vec![2, 3, 8, 16, 32],
            seed: 0,
        }
    }
}

/// Largest scaled radius `sqrt(c)|x|` of the sampled interior points.
pub const INTERIOR: f64 = 0.9;

/// Identity tolerance shared by the algebraic families.
pub const IDENTITY_TOL: f64 = 1e-8;

#[derive(Default)]
struct Worst(f64);

impl Worst {
    fn see(&mut self, e: f64) {
        if !(e <= self.0) {
            self.0 = e;
        }
    }
}

impl GeometrySuite {
    pub fn run(&self, k: &Kernels) -> CheckReport {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.samples;
        let mut right_identity = Worst::default();
        let mut left_inverse = Worst::default();
        let mut cancellation = Worst::default();
        let mut symmetry = Worst::default();
        let mut self_distance = Worst::default();
        let mut exp_log = Worst::default();
        let mut log_exp = Worst::default();
        let mut triangle = Worst::default();
        let mut equidistance = Worst::default();
        let mut scalar = Worst::default();
        let mut ball = Worst::default();

        for i in 0..n {
            let c = self.curvatures[i % self.curvatures.len()];
            let dim = self.dims[(i / self.curvatures.len()) % self.dims.len()];
            let x = sample_ball(&mut rng, dim, c, INTERIOR);
            let y = sample_ball(&mut rng, dim, c, INTERIOR);
            let z = sample_ball(&mut rng, dim, c, INTERIOR);
            let zero = vec![0.0; dim];
            let nx = neg(&x);

            right_identity.see(max_abs_diff(&k.mobius_add(&x, &zero, c), &x));
            left_inverse.see(raw::norm(&k.mobius_add(&nx, &x, c)));
            let xy = k.mobius_add(&x, &y, c);
            cancellation.see(max_abs_diff(&k.mobius_add(&nx, &xy, c), &y));

            let dxy = k.distance(&x, &y, c);
            symmetry.see((dxy - k.distance(&y, &x, c)).abs());
            self_distance.see(k.distance(&x, &x, c).abs());
            let slack = k.distance(&x, &z, c) - dxy - k.distance(&y, &z, c);
            triangle.see(slack.max(0.0));

            // Tangent vectors up to norm 3 at base points well inside the
            // ball, so that the image stays off the clamp radius.
            let base = sample_ball(&mut rng, dim, c, 0.5);
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = rng.random_range(0.0..3.0) / raw::norm(&v).max(1e-12);
            v.iter_mut().for_each(|a| *a *= scale);
            let e = k.exp_map(&base, &v, c);
            exp_log.see(max_abs_diff(&k.log_map(&base, &e, c), &v));
            let l = k.log_map(&x, &y, c);
            log_exp.see(max_abs_diff(&k.exp_map(&x, &l, c), &y));

            let m = k.gyromidpoint(&[&x, &y], c);
            equidistance.see((k.distance(&m, &x, c) - k.distance(&m, &y, c)).abs());

            let (r1, r2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lhs = k.scalar_mul(r1 + r2, &x, c);
            let rhs = k.mobius_add(&k.scalar_mul(r1, &x, c), &k.scalar_mul(r2, &x, c), c);
            scalar.see(max_abs_diff(&lhs, &rhs));

            // Near-boundary stress: both operands on the clamp radius.
            let edge = |p: &[f64]| {
                let s = (1.0 - BALL_EPS) / (c.sqrt() * raw::norm(p).max(1e-300));
                p.iter().map(|v| v * s).collect::<Vec<_>>()
            };
            let (bx, by) = (edge(&x), edge(&y));
            let outputs = [
                k.mobius_add(&bx, &by, c),
                k.mobius_add(&neg(&bx), &by, c),
                k.scalar_mul(3.0, &bx, c),
                k.exp_map(&bx, &v, c),
                k.gyromidpoint(&[&bx, &by], c),
                xy,
                e,
                m,
            ];
            for o in &outputs {
                ball.see(c.sqrt() * raw::norm(o) - (1.0 - BALL_EPS));
            }
            let d_edge = k.distance(&bx, &by, c);
            if !d_edge.is_finite() {
                ball.see(f64::INFINITY);
            }
        }

        let mut records = vec![
            CheckRecord::new("geometry", "right identity x+0=x", n, right_identity.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "left inverse (-x)+x=0", n, left_inverse.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "left cancellation (-x)+(x+y)=y", n, cancellation.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "distance symmetry", n, symmetry.0, 1e-12),
            CheckRecord::new("geometry", "self distance d(x,x)=0", n, self_distance.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "triangle inequality", n, triangle.0, 1e-9),
            CheckRecord::new("geometry", "log(exp(v))=v, |v|<=3", n, exp_log.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "exp(log(y))=y", n, log_exp.0, IDENTITY_TOL),
            CheckRecord::new("geometry", "midpoint equidistance", n, equidistance.0, 1e-6),
            CheckRecord::new("geometry", "scalar distributivity", n, scalar.0, IDENTITY_TOL),
        ];
        // Every output must satisfy sqrt(c)|z| <= 1 - eps.
        let mut ball_rec = CheckRecord::new("geometry", "ball invariant", n, ball.0.max(0.0), 1e-12);
        ball_rec.passed = ball.0.is_finite() && ball.0 <= 1e-12;
        records.push(ball_rec);
        records.push(self.limit_check(k, &mut rng));
        records.push(self.midpoint_contraction(k, &mut rng));
        CheckReport {
            records,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    /// At `c = 1e-12` the distance approaches `2|x - y|`.
    fn limit_check(&self, k: &Kernels, rng: &mut ChaCha8Rng) -> CheckRecord {
        let c = 1e-12;
        let mut worst = Worst::default();
        for i in 0..self.limit_pairs {
            let dim = self.dims[i % self.dims.len()];
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let euclid = 2.0 * raw::norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            worst.see((k.distance(&x, &y, c) - euclid).abs() / euclid);
        }
        CheckRecord::new("geometry", "small-curvature limit", self.limit_pairs, worst.0, 1e-6)
    }

    /// Equal-norm, non-collinear pairs: the midpoint is strictly closer to
    /// the origin. The error is the count of violations.
    fn midpoint_contraction(&self, k: &Kernels, rng: &mut ChaCha8Rng) -> CheckRecord {
        let mut violations = 0usize;
        for i in 0..self.midpoint_pairs {
            let c = self.curvatures[i % self.curvatures.len()];
            let dim = self.dims[i % self.dims.len()];
            let r = rng.random_range(0.05..INTERIOR) / c.sqrt();
            let (x, y) = loop {
                let a = sample_ball(rng, dim, c, 1.0);
                let b = sample_ball(rng, dim, c, 1.0);
                let (na, nb) = (raw::norm(&a), raw::norm(&b));
                let cos = raw::dot(&a, &b) / (na * nb);
                if na > 0.0 && nb > 0.0 && cos.abs() < 1.0 - 1e-6 {
                    break (a.iter().map(|v| v * r / na).collect::<Vec<_>>(), b.iter().map(|v| v * r / nb).collect::<Vec<_>>());
                }
            };
            let m = k.gyromidpoint(&[&x, &y], c);
            if !(raw::norm(&m) < r) {
                violations += 1;
            }
        }
        let mut rec = CheckRecord::new("geometry", "midpoint closer to origin", self.midpoint_pairs, violations as f64, 1.0);
        rec.passed = violations == 0;
        rec
    }
}

/// Relative-error bound for every finite-difference family.
pub const GRAD_TOL: f64 = 1e-4;

/// Batch size of the finite-difference suites.
pub const CHECK_BATCH: usize = 8;

/// Ball dimensions of the finite-difference suites.
pub const CHECK_DIMS: [usize; 2] = [2, 16];

/// Curvature used by the finite-difference suites.
pub const CHECK_CURVATURE: f64 = 1.0;

fn split(t: &mut Tape, x: Var, k: usize, dim: usize) -> Vec<Var> {
    (0..k).map(|i| t.slice(x, i * dim, 1, dim)).collect()
}

fn weights(t: &mut Tape, seed: u64, n: usize) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t.constant_vec(w)
}

/// `sum_j w_j * out_j` for fixed pseudo-random weights.
fn readout(t: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = t.shape(out);
    let w = weights(t, seed, r * c);
    let flat = if r == 1 { out } else { t.slice(out, 0, 1, r * c) };
    let s = t.mul(flat, w);
    t.sum_all(s)
}

fn ball_batch(rng: &mut ChaCha8Rng, k: usize, dim: usize, c: f64) -> Vec<f64> {
    (0..k).flat_map(|_| sample_ball(rng, dim, c, 0.8)).collect()
}

type Probe = Box<dyn Fn(&mut Tape, Var) -> Var>;

/// Finite-difference check of every registered primitive.
pub fn gradient_suite(seed: u64) -> Result<CheckReport, GradError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = CHECK_CURVATURE;
    let b = CHECK_BATCH;
    let mut records = Vec::new();
    for dim in CHECK_DIMS {
        let pair = ball_batch(&mut rng, 2 * b, dim, c);
        let single = ball_batch(&mut rng, b, dim, c);
        let plain: Vec<f64> = (0..2 * b * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut tangent: Vec<f64> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        tangent.extend_from_slice(&single);
        let outside: Vec<f64> = single.iter().map(|v| v * 1.6).collect();
        let n = b * dim;

        let mut cases: Vec<(&str, Probe, Vec<f64>)> = Vec::new();
        let halves = move |t: &mut Tape, p: Var| (t.slice(p, 0, 1, n), t.slice(p, n, 1, n));
        cases.push(("add", Box::new(move |t, p| { let (a, b) = halves(t, p); let o = t.add(a, b); readout(t, o, 1) }), plain.clone()));
        cases.push(("sub", Box::new(move |t, p| { let (a, b) = halves(t, p); let o = t.sub(a, b); readout(t, o, 2) }), plain.clone()));
        cases.push(("neg", Box::new(|t, p| { let o = t.neg(p); readout(t, o, 3) }), plain.clone()));
        cases.push(("scale", Box::new(|t, p| { let o = t.scale(p, -1.7); readout(t, o, 4) }), plain.clone()));
        cases.push(("mul", Box::new(move |t, p| { let (a, b) = halves(t, p); let o = t.mul(a, b); readout(t, o, 5) }), plain.clone()));
        cases.push(("mul_scalar", Box::new(move |t, p| {
            let a = t.slice(p, 0, 1, n);
            let s = t.slice(p, n, 1, 1);
            let o = t.mul_scalar(a, s);
            readout(t, o, 6)
        }), plain[..n + 1].to_vec()));
        cases.push(("sum_all", Box::new(|t, p| { let q = t.mul(p, p); t.sum_all(q) }), plain.clone()));
        cases.push(("mean_all", Box::new(|t, p| { let q = t.mul(p, p); t.mean_all(q) }), plain.clone()));
        cases.push(("stack", Box::new(move |t, p| {
            let parts = split(t, p, 2 * b, dim);
            let o = t.stack(&parts);
            let sq = t.mul(o, o);
            readout(t, sq, 7)
        }), plain.clone()));
        cases.push(("slice", Box::new(move |t, p| { let s = t.slice(p, dim, b, dim); readout(t, s, 8) }), plain.clone()));
        cases.push(("sigmoid", Box::new(|t, p| { let o = t.sigmoid(p); readout(t, o, 9) }), plain.clone()));
        cases.push(("log_sum_exp", Box::new(move |t, p| { let w = weights(t, 10, 2 * n); let q = t.mul(p, w); t.log_sum_exp(q) }), plain.clone()));
        let (rows, inner, outw) = (b, dim, 4usize);
        let affine_len = rows * inner + inner * outw + outw;
        let affine_in: Vec<f64> = (0..affine_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let affine_parts = move |t: &mut Tape, p: Var| {
            let x = t.slice(p, 0, rows, inner);
            let w = t.slice(p, rows * inner, inner, outw);
            let bias = t.slice(p, rows * inner + inner * outw, 1, outw);
            t.affine(x, w, bias)
        };
        cases.push(("affine", Box::new(move |t, p| { let h = affine_parts(t, p); let sq = t.mul(h, h); let s = t.slice(sq, 0, 1, rows * outw); readout(t, s, 11) }), affine_in.clone()));
        cases.push(("softplus", Box::new(|t, p| { let o = t.softplus(p); readout(t, o, 12) }), plain.clone()));
        cases.push(("max_pool", Box::new(move |t, p| { let h = affine_parts(t, p); let m = t.max_pool_rows(h); readout(t, m, 13) }), affine_in));
        cases.push(("conformal_factor", Box::new(move |t, p| {
            let xs = split(t, p, b, dim);
            let fs: Vec<Var> = xs.iter().map(|x| t.conformal_factor(*x, c)).collect();
            let s = t.stack(&fs);
            readout(t, s, 14)
        }), single.clone()));
        cases.push(("mobius_add", Box::new(move |t, p| {
            let xs = split(t, p, 2 * b, dim);
            let outs: Vec<Var> = (0..b).map(|i| t.mobius_add(xs[i], xs[b + i], c)).collect();
            let s = t.stack(&outs);
            let f = t.slice(s, 0, 1, b * dim);
            readout(t, f, 15)
        }), pair.clone()));
        cases.push(("mobius_scalar_mul", Box::new(move |t, p| {
            let xs = split(t, p, b, dim);
            let outs: Vec<Var> = xs.iter().enumerate().map(|(i, x)| t.mobius_scalar_mul(*x, 0.3 + 0.4 * i as f64 - 1.0, c)).collect();
            let s = t.stack(&outs);
            let f = t.slice(s, 0, 1, b * dim);
            readout(t, f, 16)
        }), single.clone()));
        cases.push(("hyp_distance", Box::new(move |t, p| {
            let xs = split(t, p, 2 * b, dim);
            let ds: Vec<Var> = (0..b).map(|i| t.hyp_distance(xs[i], xs[b + i], c)).collect();
            let s = t.stack(&ds);
            readout(t, s, 17)
        }), pair.clone()));
        cases.push(("exp_map", Box::new(move |t, p| {
            let vs = split(t, p, 2 * b, dim);
            let outs: Vec<Var> = (0..b).map(|i| t.exp_map(vs[b + i], vs[i], c)).collect();
            let s = t.stack(&outs);
            let f = t.slice(s, 0, 1, b * dim);
            readout(t, f, 18)
        }), tangent));
        cases.push(("gyromidpoint", Box::new(move |t, p| {
            let xs = split(t, p, b, dim);
            let m = t.gyromidpoint(&xs, c);
            readout(t, m, 19)
        }), single.clone()));
        cases.push(("project", Box::new(move |t, p| {
            let xs = split(t, p, b, dim);
            let outs: Vec<Var> = xs.iter().map(|x| t.project(*x, c)).collect();
            let s = t.stack(&outs);
            let f = t.slice(s, 0, 1, b * dim);
            readout(t, f, 20)
        }), outside));

        for (name, f, point) in cases {
            let label = format!("{name} (dim {dim})");
            let r = finite_diff_check(&label, f, &point, FD_STEP)?;
            records.push(CheckRecord::from_gradient("grad", &r, GRAD_TOL));
        }
    }
    Ok(CheckReport {
        records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Finite-difference checks of the contrastive loss, the hierarchy loss
/// and the combined objective on batches of [`CHECK_BATCH`].
pub fn loss_suite(seed: u64) -> Result<CheckReport, GradError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = CHECK_CURVATURE;
    let b = CHECK_BATCH;
    let mut records = Vec::new();
    let base = LossSettings::default();
    for dim in CHECK_DIMS {
        let z = ball_batch(&mut rng, 3 * b, dim, c);
        let mut cases: Vec<(String, Probe, Vec<f64>)> = Vec::new();
        for bank in [NegativeBank::Cross, NegativeBank::Both] {
            let tau = base.tau;
            cases.push((
                format!("infonce_symmetric/{bank}"),
                Box::new(move |t, p| {
                    let xs = split(t, p, 2 * b, dim);
                    lt::infonce_symmetric(t, &xs[..b], &xs[b..], c, tau, bank).expect("valid batch")
                }),
                z[..2 * b * dim].to_vec(),
            ));
        }
        cases.push((
            "dho_loss/full".into(),
            Box::new(move |t, p| {
                let aligned = aligned_views(t, p, b, dim, c);
                lt::dho_loss(t, &aligned, c, true).expect("nonempty")
            }),
            z[..2 * b * dim].to_vec(),
        ));
        let settings = LossSettings { lambda: 0.5, differentiate_weights: true, ..base };
        for objective in [Objective::Joint, Objective::Intra, Objective::Cross] {
            // A larger weight keeps the hierarchy term visible in the sum.
            let settings = LossSettings { objective, ..settings };
            cases.push((
                format!("total_loss/{objective}"),
                Box::new(move |t, p| {
                    let xs = split(t, p, 3 * b, dim);
                    lt::total_loss(t, &xs[..b], &xs[b..2 * b], &xs[2 * b..], c, &settings)
                        .expect("valid batch")
                        .total
                }),
                z.clone(),
            ));
        }
        for (name, f, point) in cases {
            let label = format!("{name} (dim {dim})");
            let r = finite_diff_check(&label, f, &point, FD_STEP)?;
            records.push(CheckRecord::from_gradient("losses", &r, GRAD_TOL));
        }

        // Detached level weights: the oracle differences the same loss with
        // the weights frozen at their values at the base point.
        let pair = z[..2 * b * dim].to_vec();
        let frozen = level_weights(&pair, b, dim, c);
        let w = frozen.clone();
        let r = compare_gradients(
            &format!("dho_loss/detached (dim {dim})"),
            |t: &mut Tape, p| {
                let aligned = aligned_views(t, p, b, dim, c);
                lt::dho_loss(t, &aligned, c, false).expect("nonempty")
            },
            |t: &mut Tape, p| {
                let aligned = aligned_views(t, p, b, dim, c);
                frozen_dho(t, &aligned, c, &w)
            },
            &pair,
            FD_STEP,
        )?;
        records.push(CheckRecord::from_gradient("losses", &r, GRAD_TOL));
        let settings = LossSettings { lambda: 0.5, ..base };
        let r = compare_gradients(
            &format!("total_loss/joint/detached (dim {dim})"),
            |t: &mut Tape, p| {
                let xs = split(t, p, 3 * b, dim);
                lt::total_loss(t, &xs[..b], &xs[b..2 * b], &xs[2 * b..], c, &settings)
                    .expect("valid batch")
                    .total
            },
            |t: &mut Tape, p| {
                let xs = split(t, p, 3 * b, dim);
                let intra = lt::infonce_symmetric(t, &xs[..b], &xs[b..2 * b], c, settings.tau, settings.bank).expect("valid batch");
                let mids = lt::midpoints(t, &xs[..b], &xs[b..2 * b], c).expect("valid batch");
                let cross = lt::infonce_symmetric(t, &mids, &xs[2 * b..], c, settings.tau, settings.bank).expect("valid batch");
                let root = lt::root_node(t, &mids, c).expect("nonempty");
                let aligned = lt::root_align(t, &mids, root, c);
                let dho = frozen_dho(t, &aligned, c, &frozen);
                let d = t.scale(dho, settings.lambda);
                let ic = t.add(intra, cross);
                t.add(ic, d)
            },
            &z,
            FD_STEP,
        )?;
        records.push(CheckRecord::from_gradient("losses", &r, GRAD_TOL));
    }
    Ok(CheckReport {
        records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Root-aligned midpoints of the two views packed in `p`.
fn aligned_views(t: &mut Tape, p: Var, b: usize, dim: usize, c: f64) -> Vec<Var> {
    let xs = split(t, p, 2 * b, dim);
    let mids = lt::midpoints(t, &xs[..b], &xs[b..], c).expect("valid batch");
    let root = lt::root_node(t, &mids, c).expect("nonempty");
    lt::root_align(t, &mids, root, c)
}

/// `sigmoid(r_i)` of the aligned midpoints at `point`.
fn level_weights(point: &[f64], b: usize, dim: usize, c: f64) -> Vec<f64> {
    let mut t = Tape::new();
    let p = t.constant_vec(point.to_vec());
    let aligned = aligned_views(&mut t, p, b, dim, c);
    aligned
        .iter()
        .map(|z| crate::losses::sigmoid(raw::dist_to_origin(t.value(*z), c)))
        .collect()
}

/// `sigmoid(-mean(w_i r_i))` with constant weights.
fn frozen_dho(t: &mut Tape, aligned: &[Var], c: f64, w: &[f64]) -> Var {
    let dim = t.shape(aligned[0]).1;
    let origin = t.constant_vec(vec![0.0; dim]);
    let radii: Vec<Var> = aligned.iter().map(|z| t.hyp_distance(*z, origin, c)).collect();
    let r = t.stack(&radii);
    let w = t.constant_vec(w.to_vec());
    let wr = t.mul(w, r);
    let hdo = t.mean_all(wr);
    let neg = t.neg(hdo);
    t.sigmoid(neg)
}

/// Primitive names the gradient suite covers.
pub fn covered_primitives(report: &CheckReport) -> Vec<&'static str> {
    PRIMITIVES
        .iter()
        .copied()
        .filter(|p| report.records.iter().any(|r| r.family.starts_with(&format!("{p} ("))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeometrySuite {
        GeometrySuite {
            samples: 500,
            limit_pairs: 100,
            midpoint_pairs: 100,
            ..GeometrySuite::default()
        }
    }

    #[test]
    fn clean_kernels_pass_every_family() {
        let report = small().run(&Kernels::default());
        assert!(report.passed(), "{report}");
        assert!(report.records.len() >= 7);
    }

    #[test]
    fn sign_fault_is_caught_and_named() {
        let report = small().run(&Kernels::new(Fault::MobiusAddSign));
        assert!(!report.passed());
        let failed: Vec<&str> = report.failures().map(|r| r.family.as_str()).collect();
        assert!(failed.contains(&"left inverse (-x)+x=0"), "{failed:?}");
        // Adding zero does not touch the faulty term.
        assert!(report.family("right identity x+0=x").unwrap().passed);
    }

    #[test]
    fn gradient_suite_covers_every_primitive() {
        let report = gradient_suite(3).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(covered_primitives(&report), PRIMITIVES.to_vec());
    }

    #[test]
    fn loss_suite_passes() {
        let report = loss_suite(5).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.records.len(), 16);
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!("mobius-add-sign".parse::<Fault>().unwrap(), Fault::MobiusAddSign);
        assert!("flip".parse::<Fault>().is_err());
    }

    #[test]
    fn records_serialise_non_finite_as_null() {
        let r = CheckRecord::new("grad", "x", 1, f64::NAN, 1.0);
        assert!(!r.passed);
        assert!(r.to_json().contains("\"max_error\":null"));
    }
}
