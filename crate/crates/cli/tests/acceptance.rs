//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hyperipc::checks::{covered_primitives, gradient_suite, loss_suite, GeometrySuite, Kernels};
use hyperipc::data::{hash64, HierarchySpec};
use hyperipc::geometry::{gyromidpoint, BallPoint, Curvature};
use hyperipc::grad::PRIMITIVES;
use hyperipc::losses::{hyp_infonce_directional, hyp_infonce_symmetric, NegativeBank, Objective};
use hyperipc::pipeline::{evaluate, EvalOptions, EvalSets, Metrics};
use hyperipc::trainer::{Checkpoint, TrainConfig, Trainer};

/// Dataset seed shared by every training criterion.
const DATA_SEED: u64 = 1;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const CURVATURES: [f64; 5] = [0.01, 0.1, 0.3, 0.5, 1.0];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Counter-based uniform draws in [0, 1).
struct Stream(u64, u64);

impl Stream {
    fn uniform(&mut self) -> f64 {
        self.1 += 1;
        (hash64(self.0, &[self.1]) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let u = self.uniform().max(1e-300);
        let v = self.uniform();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    fn direction(&mut self, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let report = GeometrySuite::default().run(&Kernels::new(Default::default()));
    let secs = start.elapsed().as_secs_f64();
    let families = [
        "right identity x+0=x",
        "left inverse (-x)+x=0",
        "left cancellation (-x)+(x+y)=y",
        "distance symmetry",
        "self distance d(x,x)=0",
        "log(exp(v))=v, |v|<=3",
        "exp(log(y))=y",
    ];
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    let mut samples = usize::MAX;
    for f in families {
        match report.family(f) {
            Some(r) => {
                worst = if r.max_error.is_finite() { worst.max(r.max_error) } else { f64::INFINITY };
                samples = samples.min(r.samples);
            }
            None => missing.push(f),
        }
    }
    Verdict::new(
        missing.is_empty() && worst < 1e-8 && samples >= 10_000 && secs < 10.0,
        format!("worst identity error {worst:.2e} over >= {samples} points per family, {secs:.2}s, missing {missing:?}"),
    )
}

fn criterion_2() -> Verdict {
    let report = GeometrySuite::default().run(&Kernels::new(Default::default()));
    let r = report.family("small-curvature limit");
    let (err, n) = r.map_or((f64::NAN, 0), |r| (r.max_error, r.samples));
    Verdict::new(err < 1e-6 && n >= 1000, format!("max relative error {err:.2e} over {n} pairs at c=1e-12"))
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let (grads, losses) = match (gradient_suite(3), loss_suite(3)) {
        (Ok(g), Ok(l)) => (g, l),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let covered = covered_primitives(&grads);
    let uncovered: Vec<&&str> = PRIMITIVES.iter().filter(|p| !covered.contains(p)).collect();
    let loss_kinds = ["infonce_symmetric", "dho_loss", "total_loss"];
    let absent: Vec<&str> = loss_kinds
        .into_iter()
        .filter(|k| !losses.records.iter().any(|r| r.family.starts_with(k)))
        .collect();
    let worst = grads
        .records
        .iter()
        .chain(&losses.records)
        .map(|r| if r.max_error.is_finite() { r.max_error } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let failed: Vec<String> = grads.failures().chain(losses.failures()).map(|r| r.family.clone()).collect();
    Verdict::new(
        failed.is_empty() && uncovered.is_empty() && absent.is_empty() && worst < 1e-4 && secs < 60.0,
        format!(
            "{} primitive and {} loss checks, worst relative error {worst:.2e}, {secs:.2}s, failed {failed:?}, uncovered {uncovered:?}",
            grads.records.len(),
            losses.records.len()
        ),
    )
}

/// Closed-form distance through `arcosh`, independent of Möbius addition.
fn oracle_distance(x: &[f64], y: &[f64], c: f64) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum();
    let ny: f64 = y.iter().map(|a| a * a).sum();
    let arg = 1.0 + 2.0 * c * diff / ((1.0 - c * nx) * (1.0 - c * ny));
    arg.acosh() / c.sqrt()
}

/// Termwise InfoNCE: mean over anchors of
/// `-log(exp(-d(a_i,p_i)/tau) / sum over bank of exp(-d/tau))`.
fn oracle_directional(a: &[Vec<f64>], p: &[Vec<f64>], c: f64, tau: f64, both: bool) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            denom += (-oracle_distance(&a[i], &p[k], c) / tau).exp();
            if both && k != i {
                denom += (-oracle_distance(&a[i], &a[k], c) / tau).exp();
            }
        }
        let num = (-oracle_distance(&a[i], &p[i], c) / tau).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

fn criterion_4() -> Verdict {
    let c = 0.7;
    let tau = 0.5;
    let curv = Curvature::new(c).unwrap();
    let mut s = Stream(2024, 0);
    let draw = |s: &mut Stream| -> Vec<f64> {
        let r = 0.8 * s.uniform() / c.sqrt();
        s.direction(4).into_iter().map(|x| x * r).collect()
    };
    let z1: Vec<Vec<f64>> = (0..8).map(|_| draw(&mut s)).collect();
    let z2: Vec<Vec<f64>> = (0..8).map(|_| draw(&mut s)).collect();
    let pts = |v: &[Vec<f64>]| -> Vec<BallPoint> { v.iter().map(|x| BallPoint::new(x.clone(), curv).unwrap()).collect() };
    let (b1, b2) = (pts(&z1), pts(&z2));
    let mut worst: f64 = 0.0;
    for (bank, both) in [(NegativeBank::Cross, false), (NegativeBank::Both, true)] {
        let got = hyp_infonce_symmetric(&b1, &b2, tau, bank).unwrap();
        let want = 0.5 * (oracle_directional(&z1, &z2, c, tau, both) + oracle_directional(&z2, &z1, c, tau, both));
        worst = worst.max((got - want).abs());
    }
    // All embeddings coincide, so every distance is equal (zero).
    let same = vec![BallPoint::new(vec![0.1, -0.2, 0.05, 0.3], curv).unwrap(); 8];
    let n_emb = 16.0_f64;
    let l = hyp_infonce_directional(&same, &same, tau, NegativeBank::Both).unwrap();
    let uniform_err = (l - (n_emb - 1.0).ln()).abs();
    Verdict::new(
        worst < 1e-10 && uniform_err < 1e-12,
        format!("termwise oracle gap {worst:.2e}; uniform batch of {n_emb} embeddings gives log(N-1) within {uniform_err:.1e}"),
    )
}

fn criterion_5() -> Verdict {
    let mut s = Stream(77, 0);
    let mut violations = 0;
    let mut tested = 0;
    while tested < 1000 {
        let dim = 2 + (s.uniform() * 15.0) as usize;
        let c: f64 = [0.1, 0.5, 1.0, 2.0][(s.uniform() * 4.0) as usize];
        let r = (0.02 + 0.96 * s.uniform()) / c.sqrt();
        let (u, v) = (s.direction(dim), s.direction(dim));
        let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        if cos.abs() > 0.999 {
            continue;
        }
        let curv = Curvature::new(c).unwrap();
        let x = BallPoint::new(u.iter().map(|a| a * r).collect(), curv).unwrap();
        let y = BallPoint::new(v.iter().map(|a| a * r).collect(), curv).unwrap();
        let common = 0.5 * (x.norm() + y.norm());
        let m = gyromidpoint(&[x, y]).unwrap();
        if !(m.norm() < common) {
            violations += 1;
        }
        tested += 1;
    }
    Verdict::new(violations == 0, format!("{violations} of {tested} midpoints not strictly inside the common norm"))
}

struct Run {
    ckpt: Checkpoint,
    metrics: Metrics,
    seconds: f64,
}

fn train(cfg: &TrainConfig, sets: &EvalSets, eval: &EvalOptions) -> Result<Run, String> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    trainer.run(&sets.bench, |_, _| {}).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let ckpt = trainer.into_checkpoint();
    let metrics = evaluate(&ckpt, sets, eval).map_err(|e| e.to_string())?;
    eprintln!(
        "  trained {} c={} seed={} in {seconds:.0}s: probe {:.3}, 5-way {:.3}, rho {:.3}",
        cfg.mode, cfg.curvature, cfg.seed, metrics.probe, metrics.fewshot5.mean, metrics.rho
    );
    Ok(Run { ckpt, metrics, seconds })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criteria 6 to 10 share one set of training runs.
fn training_criteria() -> Vec<(usize, Verdict)> {
    let sets = match EvalSets::standard(&HierarchySpec::default(), DATA_SEED) {
        Ok(s) => s,
        Err(e) => return (6..=10).map(|i| (i, Verdict::new(false, format!("data: {e}")))).collect(),
    };
    let eval = EvalOptions::default();
    let base = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let mut runs: Vec<(Objective, u64, Result<Run, String>)> = Vec::new();
    for seed in TRAIN_SEEDS {
        for mode in [Objective::Joint, Objective::Intra, Objective::Cross] {
            let cfg = TrainConfig { mode, seed, ..base.clone() };
            runs.push((mode, seed, train(&cfg, &sets, &eval)));
        }
    }
    let random: Vec<Result<Metrics, String>> = TRAIN_SEEDS
        .iter()
        .map(|&seed| {
            let ckpt = Checkpoint::init(&TrainConfig { seed, ..base.clone() }).map_err(|e| e.to_string())?;
            evaluate(&ckpt, &sets, &eval).map_err(|e| e.to_string())
        })
        .collect();
    let get = |mode: Objective| -> Result<Vec<&Run>, String> {
        runs.iter()
            .filter(|r| r.0 == mode)
            .map(|r| r.2.as_ref().map_err(|e| format!("{mode} seed {}: {e}", r.1)))
            .collect()
    };
    let rand: Result<Vec<&Metrics>, String> = random.iter().map(|r| r.as_ref().map_err(|e| e.clone())).collect();
    let mut out = Vec::new();

    // 6: loss drop of the seed-0 joint run.
    out.push((
        6,
        match &runs[0].2 {
            Ok(run) => {
                let h = &run.ckpt.history;
                let first = h.first().map_or(f64::NAN, |r| r.total);
                let last = h.last().map_or(f64::NAN, |r| r.total);
                let finite = h.iter().all(|r| [r.intra, r.cross, r.dho, r.total].iter().all(|v| v.is_finite()))
                    && run.ckpt.params.is_finite();
                let drop = 1.0 - last / first;
                Verdict::new(
                    h.len() == 30 && finite && drop >= 0.30 && run.seconds < 600.0,
                    format!("total {first:.4} -> {last:.4} (drop {drop:.3}) over {} epochs, finite {finite}, {:.0}s", h.len(), run.seconds),
                )
            }
            Err(e) => Verdict::new(false, e.clone()),
        },
    ));

    // 7: objective ordering and lift over random init.
    out.push((
        7,
        match (get(Objective::Joint), get(Objective::Intra), get(Objective::Cross), rand.clone()) {
            (Ok(j), Ok(i), Ok(c), Ok(r)) => {
                let (pj, pi, pc) = (
                    mean(j.iter().map(|x| x.metrics.probe)),
                    mean(i.iter().map(|x| x.metrics.probe)),
                    mean(c.iter().map(|x| x.metrics.probe)),
                );
                let pr = mean(r.iter().map(|m| m.probe));
                Verdict::new(
                    pj >= pi - 0.01 && pj >= pc - 0.01 && pj - pr >= 0.15,
                    format!("probe joint {pj:.4}, intra {pi:.4}, cross {pc:.4}, random-init {pr:.4} (lift {:.4})", pj - pr),
                )
            }
            (Err(e), ..) | (_, Err(e), ..) | (_, _, Err(e), _) | (.., Err(e)) => Verdict::new(false, e.clone()),
        },
    ));

    // 8: curvature sweep in joint mode, seed 0.
    let mut accs = Vec::new();
    let mut errors = Vec::new();
    for c in CURVATURES {
        if c == base.curvature {
            match &runs[0].2 {
                Ok(run) => accs.push((c, run.metrics.probe)),
                Err(e) => errors.push(format!("c={c}: {e}")),
            }
            continue;
        }
        let cfg = TrainConfig {
            curvature: c,
            ..base.clone()
        };
        match train(&cfg, &sets, &eval) {
            Ok(run) if run.ckpt.params.is_finite() => accs.push((c, run.metrics.probe)),
            Ok(_) => errors.push(format!("c={c}: non-finite parameters")),
            Err(e) => errors.push(format!("c={c}: {e}")),
        }
    }
    let lo = accs.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let hi = accs.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
    let listed: Vec<String> = accs.iter().map(|(c, a)| format!("c={c}: {a:.4}")).collect();
    out.push((
        8,
        Verdict::new(
            errors.is_empty() && hi - lo < 0.15,
            format!("probe {} (spread {:.4}); errors {errors:?}", listed.join(", "), hi - lo),
        ),
    ));

    // 9: few-shot protocol and lift.
    out.push((
        9,
        match (get(Objective::Joint), rand.clone()) {
            (Ok(j), Ok(r)) => {
                let protocol = j.iter().map(|x| &x.metrics).chain(r.iter().copied()).all(|m| {
                    let ok = |f: &hyperipc::eval::FewShotResult, n, k| {
                        f.n_way == n && f.m_shot == k && f.tasks == 10 && f.accuracies.len() == 10 && f.mean.is_finite() && f.std.is_finite()
                    };
                    ok(&m.fewshot5, 5, 10) && ok(&m.fewshot10, 10, 20)
                });
                let fj = mean(j.iter().map(|x| x.metrics.fewshot5.mean));
                let fr = mean(r.iter().map(|m| m.fewshot5.mean));
                let tj = mean(j.iter().map(|x| x.metrics.fewshot10.mean));
                let tr = mean(r.iter().map(|m| m.fewshot10.mean));
                Verdict::new(
                    protocol && fj - fr >= 0.10,
                    format!(
                        "5-way 10-shot joint {fj:.4} vs random-init {fr:.4} (lift {:.4}); 10-way 20-shot {tj:.4} vs {tr:.4}; protocol {protocol}",
                        fj - fr
                    ),
                )
            }
            (Err(e), _) | (_, Err(e)) => Verdict::new(false, e.clone()),
        },
    ));

    // 10: level/radius correlation.
    out.push((
        10,
        match (get(Objective::Joint), rand.clone()) {
            (Ok(j), Ok(r)) => {
                let rj = mean(j.iter().map(|x| x.metrics.rho));
                let rr = mean(r.iter().map(|m| m.rho));
                Verdict::new(rj >= 0.5 && rj > rr, format!("spearman rho joint {rj:.4}, random-init {rr:.4}"))
            }
            (Err(e), _) | (_, Err(e)) => Verdict::new(false, e.clone()),
        },
    ));
    out
}

fn run_reproduce(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_hyperipc"))
        .args(["--threads", "1", "reproduce", "--seed", "5", "--epochs", "2", "--per-leaf", "22", "--points", "64"])
        .args(["--curvatures", "0.1,1.0", "--out"])
        .arg(out)
        .env_remove("HYPERIPC_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("reproduce exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
    }
    Ok(start.elapsed())
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn config_hash(manifest: &Path) -> Option<String> {
    let text = std::fs::read_to_string(manifest).ok()?;
    let start = text.find("\"config_hash\":\"")? + 15;
    Some(text[start..start + 64].to_string())
}

fn criterion_11() -> Verdict {
    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let (a, b) = match dirs {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Verdict::new(false, "could not create temp dirs"),
    };
    let (ta, tb) = match (run_reproduce(a.path()), run_reproduce(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, e),
    };
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    if fa != fb {
        return Verdict::new(false, format!("different file sets: {fa:?} vs {fb:?}"));
    }
    // The manifest echoes the command line and timing, which legitimately differ.
    let compared: Vec<&std::path::PathBuf> = fa.iter().filter(|p| p.file_name().unwrap() != "manifest.json").collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| std::fs::read(a.path().join(p)).ok() != std::fs::read(b.path().join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let ha = config_hash(&a.path().join("manifest.json"));
    let hb = config_hash(&b.path().join("manifest.json"));
    let ckpts = compared.iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    Verdict::new(
        differing.is_empty() && ha.is_some() && ha == hb && ckpts > 0,
        format!(
            "{} files ({ckpts} checkpoints) compared, differing {differing:?}, manifest hash equal {}, runs {:.0}s and {:.0}s",
            compared.len(),
            ha.is_some() && ha == hb,
            ta.as_secs_f64(),
            tb.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest-style arguments such as `--nocapture`.
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| filter.is_empty() || filter.contains(&i);
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let quick: [(usize, fn() -> Verdict); 5] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (i, f) in quick {
        if wanted(i) {
            verdicts.push((i, f()));
        }
    }
    if (6..=10).any(wanted) {
        verdicts.extend(training_criteria().into_iter().filter(|(i, _)| wanted(*i)));
    }
    if wanted(11) {
        verdicts.push((11, criterion_11()));
    }
    let mut failed = 0;
    for (i, v) in &verdicts {
        println!("criterion {i}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
