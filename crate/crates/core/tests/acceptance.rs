//! Acceptance suite: one PASS/FAIL line per criterion at pinned tolerances.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ntxb::bounds::VIOLATION_SLACK;
use ntxb::cli::TrainSummary;
use ntxb::gradcheck::{end_to_end_trial, loss_level_trial};
use ntxb::random::{rng_for, EmbeddingDistribution};
use ntxb::trace::{parse_trace, METRICS};
use ntxb::{
    lse_bounds, nt_xent, nt_xent_grad, similarity_bound, EmbeddingBatch, LossConfig, VerifySummary,
};
use rand::{Rng, RngExt};
use tempfile::TempDir;

const SEED: u64 = 20_240_601;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ntxb(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ntxb"))
        .args(args)
        .output()
        .expect("spawn ntxb")
        .status
        .code()
        .unwrap_or(-1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_distribution<R: Rng>(rng: &mut R) -> EmbeddingDistribution {
    match rng.random_range(0..3) {
        0 => EmbeddingDistribution::UniformSphere,
        1 => EmbeddingDistribution::Gaussian,
        _ => EmbeddingDistribution::Clustered {
            noise: rng.random_range(0.01..0.5),
        },
    }
}

fn decomposition() -> Verdict {
    let mut rng = rng_for(SEED, 1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pairs = rng.random_range(2..=32);
        let dim = rng.random_range(2..=64);
        let tau = rng.random_range(0.05..=1.0);
        let batch = random_distribution(&mut rng).sample(&mut rng, pairs, dim);
        let l = nt_xent(&batch, &LossConfig::paper(tau).unwrap()).unwrap();
        let err = (l.total - (l.alignment + l.distribution)).abs() / l.total.abs().max(1.0);
        worst = worst.max(err);
    }
    Verdict::new(
        worst <= 1e-10,
        format!("1000 batches, worst |total - (alignment + distribution)| / max(1, |total|) = {worst:.3e} (tol 1e-10)"),
    )
}

fn lse_argument_vector<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(1..=128);
    let scale = 10f64.powf(rng.random_range(-3.0..=3.0));
    match rng.random_range(0..4) {
        0 => vec![rng.random_range(-1e3..=1e3); n],
        1 => {
            let base = rng.random_range(-1e3..=1e3);
            let mut xs = vec![base; n];
            if n > 1 {
                xs[rng.random_range(0..n)] = base - 1e-9;
            }
            xs
        }
        _ => (0..n).map(|_| rng.random_range(-scale..=scale)).collect(),
    }
}

fn lse_sandwich() -> Verdict {
    let mut rng = rng_for(SEED, 2);
    let mut failures = Vec::new();
    let mut worst_equal_slack = 0.0f64;
    for v in 0..10_000 {
        let xs = lse_argument_vector(&mut rng);
        let b = lse_bounds(&xs).unwrap();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(b.lower <= b.value && b.value <= b.upper) {
            failures.push(format!("vector {v}: order {} {} {}", b.lower, b.value, b.upper));
        }
        if xs.len() > 1 && !(b.log_excess.is_finite() && b.excess >= 0.0) {
            failures.push(format!("vector {v}: value not above lower"));
        }
        if max - min >= 1e-9 && b.slack <= 0.0 {
            failures.push(format!("vector {v}: slack {} with spread {}", b.slack, max - min));
        }
        if max == min {
            worst_equal_slack = worst_equal_slack.max((b.upper - b.value).abs());
        }
    }
    let equal_ok = worst_equal_slack <= 1e-12;
    Verdict::new(
        failures.is_empty() && equal_ok,
        format!(
            "10000 vectors, {} property failures{}, worst |upper - value| on equal inputs {worst_equal_slack:.1e} (tol 1e-12)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn run_verify(out: &Path) -> (i32, Option<VerifySummary>) {
    let config = workspace_root().join("configs/verify_default.json");
    let code = ntxb(&["verify", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let summary = fs::read_to_string(out.join("verify_summary.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    (code, summary)
}

fn bound_validity(out: &Path) -> Verdict {
    let (code, summary) = run_verify(out);
    let Some(s) = summary else {
        return Verdict::new(false, format!("verify exited {code} without a readable summary"));
    };
    let passed = code == 0
        && s.trials == 120_000
        && s.violations_paper == 0
        && s.violations_strict == 0
        && s.violations_ordering == 0;
    Verdict::new(
        passed,
        format!(
            "{} trials in {} cells (exit {code}), violations paper={} strict={} ordering={}, min gaps paper={:.3e} strict={:.3e}",
            s.trials,
            s.cells.len(),
            s.violations_paper,
            s.violations_strict,
            s.violations_ordering,
            s.min_paper_gap,
            s.min_strict_gap
        ),
    )
}

fn closed_forms() -> Verdict {
    let cfg = LossConfig::paper(1.0).unwrap();
    let same = EmbeddingBatch::new(vec![vec![0.3, -1.2, 2.0]; 4]).unwrap();
    let r = similarity_bound(&same, &cfg).unwrap();
    let log3_err = (r.loss.total - 3f64.ln()).abs();
    let gap = r.strict_gap.abs();
    let single = EmbeddingBatch::new(vec![vec![1.0, 2.0], vec![-0.5, 0.7]]).unwrap();
    let n1 = nt_xent(&single, &cfg).unwrap().total.abs();
    Verdict::new(
        log3_err <= 1e-12 && gap <= 1e-9 && n1 <= 1e-12,
        format!("|loss - ln 3| = {log3_err:.1e} (tol 1e-12), |strict_gap| = {gap:.1e} (tol 1e-9), N=1 |loss| = {n1:.1e} (tol 1e-12)"),
    )
}

fn gradients() -> Verdict {
    let mut worst_loss = 0.0f64;
    let mut worst_e2e = 0.0f64;
    let mut failed = 0;
    for t in 0..100 {
        let a = loss_level_trial(SEED, t, |_| {}).unwrap();
        let b = end_to_end_trial(SEED, t, |_| {}).unwrap();
        worst_loss = worst_loss.max(a.worst.error);
        worst_e2e = worst_e2e.max(b.worst.error);
        failed += usize::from(!a.passed) + usize::from(!b.passed);
    }
    let mut rng = rng_for(SEED, 5);
    let mut worst_dot = 0.0f64;
    for _ in 0..100 {
        let pairs = rng.random_range(1..=16);
        let dim = rng.random_range(2..=32);
        let tau = rng.random_range(0.05..=1.0);
        let batch = random_distribution(&mut rng).sample(&mut rng, pairs, dim);
        let g = nt_xent_grad(&batch, &LossConfig::paper(tau).unwrap()).unwrap();
        for (gi, zi) in g.rows().zip(batch.rows()) {
            worst_dot = worst_dot.max(dot(gi, zi).abs());
        }
    }
    Verdict::new(
        failed == 0 && worst_loss <= 1e-5 && worst_e2e <= 1e-4 && worst_dot <= 1e-8,
        format!(
            "100 loss-level trials worst {worst_loss:.2e} (tol 1e-5), 100 end-to-end trials worst {worst_e2e:.2e} (tol 1e-4), worst |<g_i, z_i>| {worst_dot:.1e} (tol 1e-8)"
        ),
    )
}

fn run_train(out: &Path) -> (i32, Option<TrainSummary>) {
    let config = workspace_root().join("configs/desk.json");
    let code = Command::new(env!("CARGO_BIN_EXE_ntxb"))
        .args(["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("NTXB_THREADS", "1")
        .output()
        .expect("spawn ntxb")
        .status
        .code()
        .unwrap_or(-1);
    let summary = fs::read_to_string(out.join("summary.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    (code, summary)
}

fn bound_under_training(out: &Path) -> Verdict {
    let (code, summary) = run_train(out);
    let Some(s) = summary else {
        return Verdict::new(false, format!("train exited {code} without a readable summary"));
    };
    let rows = fs::read_to_string(out.join("trace.csv"))
        .ok()
        .and_then(|t| parse_trace(&t).ok())
        .unwrap_or_default();
    let strict_idx = METRICS.iter().position(|m| *m == "strict_gap").unwrap();
    let min_strict = rows
        .iter()
        .map(|r| r.values[strict_idx])
        .fold(f64::INFINITY, f64::min);
    let (l0, l1) = (
        s.initial_loss.map_or(f64::NAN, |l| l.total),
        s.final_loss.map_or(f64::NAN, |l| l.total),
    );
    let (p0, p1) = (
        s.initial_avg_pos_sim.unwrap_or(f64::NAN),
        s.final_avg_pos_sim.unwrap_or(f64::NAN),
    );
    Verdict::new(
        code == 0
            && rows.len() == s.config.steps
            && s.config.pairs == 16
            && s.config.steps == 500
            && l1 < l0
            && p1 > p0
            && min_strict >= -VIOLATION_SLACK,
        format!(
            "exit {code}, {} steps, loss {l0:.4} -> {l1:.4}, avg_pos_sim {p0:.4} -> {p1:.4}, min strict_gap {min_strict:.3e} (tol -1e-9)",
            rows.len()
        ),
    )
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| match (fs::read(a.join(n)), fs::read(b.join(n))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .map(|n| n.to_string())
        .collect()
}

fn determinism(verify_first: &Path, train_first: &Path, scratch: &Path) -> Verdict {
    let verify_again = scratch.join("verify_again");
    let train_again = scratch.join("train_again");
    run_verify(&verify_again);
    run_train(&train_again);
    let mut differing = same_files(verify_first, &verify_again, &["verify_summary.json"]);
    differing.extend(same_files(train_first, &train_again, &["trace.csv", "summary.json"]));
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            "verify_summary.json, trace.csv and summary.json byte-identical across reruns".into()
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

fn timed(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let passed = v.passed && in_time;
    let limit_text = limit.map_or(String::new(), |l| format!(" (limit {} s)", l.as_secs()));
    println!(
        "{} criterion {id} {name}: {}; {:.2} s{limit_text}",
        if passed { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    passed
}

fn main() -> ExitCode {
    let scratch = TempDir::new().expect("temp dir");
    let verify_out = scratch.path().join("verify");
    let train_out = scratch.path().join("train");
    let secs = Duration::from_secs;

    let results = [
        timed(1, "decomposition identity", Some(secs(10)), decomposition),
        timed(2, "LSE sandwich", Some(secs(5)), lse_sandwich),
        timed(3, "similarity bound validity", Some(secs(60)), || bound_validity(&verify_out)),
        timed(4, "closed-form anchors", None, closed_forms),
        timed(5, "gradient correctness", Some(secs(30)), gradients),
        timed(6, "bound under training", Some(secs(60)), || bound_under_training(&train_out)),
        timed(7, "determinism", None, || determinism(&verify_out, &train_out, scratch.path())),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
