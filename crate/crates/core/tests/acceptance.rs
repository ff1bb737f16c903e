//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use latent_gfn::config::{RewardMode, TrainConfig};
use latent_gfn::decoder::blend_values;
use latent_gfn::diffusion::log_reward;
use latent_gfn::graph::{append_edges, step_budget, GraphConfig, TrajectorySet};
use latent_gfn::metrics::{vendi_score, Kernel};
use latent_gfn::params::ParamStore;
use latent_gfn::policy::{sample_actions_explore, PolicyDims, PolicyNet};
use latent_gfn::tensor::{Tensor, MASK_NEG};
use latent_gfn::trainer::{composite_grad_check, evaluate, train, Suite, TrainOutputs, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TV_MAX: f64 = 0.05;
const RESIDUAL_MAX: f64 = 1e-2;
const GRAD_MAX: f64 = 1e-4;
const GRAD_TIME: Duration = Duration::from_secs(10);
const DECOMPOSITION_MAX: f64 = 1e-12;
const VENDI_TOL: f64 = 1e-9;
/// Log-probabilities above this carry non-zero mass.
const LEGAL: f64 = MASK_NEG / 2.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn proportional_config() -> TrainConfig {
    TrainConfig::from_toml(
        r#"
[graph]
n = 4
s_override = 2
m = 4

[train]
max_steps = 5000
seed = 1
log_every = 500

[reward]
num_modes = 2
ratio_target = 10.0

[eval]
samples = 20000
"#,
    )
    .unwrap()
}

fn small_config(extra: &str) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
[graph]
n = 4
s_override = 2
m = 4

[policy]
h_g = 16
h_c = 16

[decoder]
d_dim = 8
s_c = 4

[diffusion]
t_steps = 10
hidden = 16
a_start = 0.99
a_end = 0.8

[train]
max_steps = 40
seed = 3
log_every = 10
checkpoint_every = 20
{extra}
"#
    ))
    .unwrap()
}

fn proportional(state: &TrainState) -> Outcome {
    let (report, _) = evaluate(state, &[Suite::Proportionality], 11).unwrap();
    let tv = report.get("tv_distance").unwrap();
    let target = state.target_distribution().unwrap();
    let p = target.probs();
    let ratio = p.iter().copied().fold(0.0, f64::max) / p.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        tv < TV_MAX && ratio >= 5.0 && p.len() == 15,
        format!("TV {tv:.4} (< {TV_MAX}) over {} sets, best/worst reward {ratio:.2}", p.len()),
    )
}

fn residuals(state: &TrainState) -> Outcome {
    let r = state.db_residuals().unwrap();
    outcome(
        r.mean_square < RESIDUAL_MAX,
        format!("mean-square {:.3e} (< {RESIDUAL_MAX}), max |r| {:.3e}, {} terms", r.mean_square, r.max_abs, r.transitions),
    )
}

fn ablation() -> Outcome {
    let mut wins = 0;
    let mut coverage_ok = true;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut scores = Vec::new();
        for m in [1usize, 8] {
            let config = TrainConfig::from_toml(&format!(
                r#"
[graph]
n = 4
s_override = 2
m = {m}

[train]
max_steps = 3000
seed = {seed}
log_every = 0

[reward]
num_modes = 4
ratio_target = 50.0

[pretrain]
steps = 3000
"#
            ))
            .unwrap();
            let mut state = TrainState::init(config).unwrap();
            train(&mut state, &TrainOutputs::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            scores.push(state.diversity(20, 8, &mut rng).unwrap());
        }
        wins += usize::from(scores[1].vendi > scores[0].vendi);
        coverage_ok &= scores[1].coverage >= scores[0].coverage;
        rows.push(format!(
            "seed {seed}: VS {:.3} vs {:.3}, coverage {:.2} vs {:.2}",
            scores[0].vendi, scores[1].vendi, scores[0].coverage, scores[1].coverage
        ));
    }
    outcome(wins >= 2 && coverage_ok, format!("M=1 vs M=8, {wins}/3 Vendi wins; {}", rows.join("; ")))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let state = TrainState::init(small_config("")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = composite_grad_check(&state, 1e-6, None, &mut rng).unwrap();
    let elapsed = start.elapsed();

    let mut wide = proportional_config();
    wide.reward.mode = RewardMode::DenoiserMse;
    wide.diffusion.freeze_denoiser = false;
    let state = TrainState::init(wide).unwrap();
    let sampled = composite_grad_check(&state, 1e-6, Some(64), &mut rng).unwrap();
    outcome(
        full.max_relative_error < GRAD_MAX && sampled.max_relative_error < GRAD_MAX && elapsed < GRAD_TIME,
        format!(
            "all {} coordinates: {:.2e} in {:.2?}; default widths, 64 per tensor ({} coordinates): {:.2e}",
            full.coordinates, full.max_relative_error, elapsed, sampled.coordinates, sampled.max_relative_error
        ),
    )
}

fn exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let decoded = Tensor::randn(6, 4, 1.0, &mut rng);
    let cond: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
    let blended = blend_values(&decoded, &cond, 0.0).unwrap();
    let identity = (0..6).all(|r| blended.row_slice(r) == cond.as_slice());
    let unit = log_reward(&[0.0]).unwrap()[0].exp() == 1.0;

    let mut config = small_config("");
    config.reward.mode = RewardMode::DenoiserMse;
    config.diffusion.freeze_denoiser = false;
    config.train.alpha = 0.7;
    config.train.beta = 1.3;
    let mut state = TrainState::init(config).unwrap();
    let summary = train(&mut state, &TrainOutputs::default()).unwrap();
    outcome(
        identity && unit && summary.decomposition_error < DECOMPOSITION_MAX,
        format!(
            "blend at 0 is the condition: {identity}; R(mse = 0) = 1: {unit}; decomposition error {:.1e} over {} steps",
            summary.decomposition_error, summary.steps
        ),
    )
}

fn budgets() -> Outcome {
    let a = step_budget(20, 0.83).unwrap();
    let b = step_budget(8, 0.70).unwrap();
    let chest_formula = step_budget(20, 0.82).unwrap();
    let mut config = small_config("");
    config.graph.n = 20;
    config.graph.rho = 0.82;
    config.graph.s_override = Some(33);
    let chest = config.graph_config().unwrap().num_steps;
    let direct = GraphConfig::with_steps(20, 0.82, 33, 1).unwrap().num_steps;
    outcome(
        a == 32 && b == 8 && chest_formula == 34 && chest == 33 && direct == 33,
        format!("(20, 0.83) -> {a}, (8, 0.70) -> {b}, (20, 0.82) formula {chest_formula}, override {chest}"),
    )
}

fn vendi_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 5, 12] {
        let row: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let same = Tensor::matrix(n, 7, row.repeat(n)).unwrap();
        worst = worst.max((vendi_score(&same, Kernel::NormalizedLinear).unwrap() - 1.0).abs());

        let mut eye = vec![0.0; n * (n + 3)];
        for i in 0..n {
            eye[i * (n + 3) + i] = 1.0;
        }
        let ortho = Tensor::matrix(n, n + 3, eye).unwrap();
        worst = worst.max((vendi_score(&ortho, Kernel::NormalizedLinear).unwrap() - n as f64).abs());
    }
    outcome(worst < VENDI_TOL, format!("largest deviation {worst:.1e} (< {VENDI_TOL})"))
}

fn files_equal(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let names = list(a);
    names == list(b) && names.iter().all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut state = TrainState::init(small_config("")).unwrap();
        train(&mut state, &TrainOutputs { dir: Some(out.clone()) }).unwrap();
        let (report, _) = evaluate(&state, &Suite::ALL, 2).unwrap();
        report.write(&out, "metrics").unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let identical = files_equal(&a, &b);

    let mut resumed = TrainState::load(&a.join("checkpoint_00000020.bin")).unwrap();
    let mid = resumed.step;
    train(&mut resumed, &TrainOutputs::default()).unwrap();
    let same_end = resumed.to_checkpoint().unwrap().to_bytes() == std::fs::read(a.join("checkpoint.bin")).unwrap();
    outcome(
        identical && same_end && mid == 20,
        format!("two runs byte-identical: {identical}; resume from step {mid} matches uninterrupted run: {same_end}"),
    )
}

fn masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rollouts = 0;
    let mut violations = 0;
    while rollouts < 10_000 {
        let n = rng.random_range(3..=7);
        let e = n * (n - 1) / 2;
        let s = rng.random_range(1..e);
        let m = rng.random_range(1..=50);
        let mut store = ParamStore::new();
        let dims = PolicyDims { num_edges: e, cond_dim: 3, graph_hidden: 8, cond_hidden: 4 };
        let policy = PolicyNet::register(&mut store, dims, &mut rng).unwrap();
        let cond: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let explore = rng.random_range(0.0..=1.0);
        let mut set = TrajectorySet::from_sequences(&vec![Vec::new(); m], e, s).unwrap();
        for _ in 0..s {
            let ev = policy.evaluate(&store, &cond, &set).unwrap();
            for r in 0..m {
                let fwd = ev.log_forward.row_slice(r);
                for edge in 1..=e {
                    let added = set.trajectory(r).contains(&edge);
                    violations += usize::from(added == (fwd[edge - 1] > LEGAL));
                    if let Some(back) = &ev.log_backward {
                        violations += usize::from(added != (back.row_slice(r)[edge - 1] > LEGAL));
                    }
                }
            }
            let actions = sample_actions_explore(&ev.log_forward, explore, &mut rng).unwrap();
            set = append_edges(&set, &actions).unwrap();
        }
        // The policy refuses states with no budget left, so view the
        // terminal sets under a budget of one more step.
        let open = TrajectorySet::from_sequences(set.trajectories(), e, s + 1).unwrap();
        let back = policy.evaluate(&store, &cond, &open).unwrap().log_backward.unwrap();
        for r in 0..m {
            let t = set.trajectory(r);
            let mut sorted = t.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            violations += usize::from(sorted.len() != s || t.len() != s);
            violations += (1..=e).filter(|edge| t.contains(edge) != (back.row_slice(r)[edge - 1] > LEGAL)).count();
        }
        rollouts += m;
    }
    outcome(violations == 0, format!("{rollouts} rollouts, {violations} violations"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut state = TrainState::init(proportional_config()).unwrap();
    train(&mut state, &TrainOutputs::default()).unwrap();

    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 proportional sampling", Box::new(|| proportional(&state))),
        ("2 detailed-balance residuals", Box::new(|| residuals(&state))),
        ("3 trajectory-count ablation", Box::new(ablation)),
        ("4 composite gradient check", Box::new(gradients)),
        ("5 blend, reward and loss exactness", Box::new(exactness)),
        ("6 step budgets", Box::new(budgets)),
        ("7 Vendi identities", Box::new(vendi_identities)),
        ("8 determinism and resume", Box::new(determinism)),
        ("9 mask soundness", Box::new(masks)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let t = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!("criterion {name}: {} ({:.1?}) {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed(), o.detail);
    }
    println!("acceptance: {}/{} passed in {:.1?}", checks.len() - failed, checks.len(), start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
