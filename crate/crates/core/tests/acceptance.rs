//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//!
//! Usage: `cargo test -p mlfed-core --test acceptance [-- 1 4 5]`.
//! Criteria are selected by number; all run when none are given.
//! Exits nonzero on failure only when MLFED_ACCEPTANCE_STRICT=1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mlfed_core::agent::{nearest_binary_action, Batch, Sac, SacHyperparams};
use mlfed_core::baselines::{evaluate_fixed, BaselineReport, DEFAULT_ORACLE_CAP};
use mlfed_core::ensemble::{ablate_wbf, vote, DetectionGroup, Voting};
use mlfed_core::env::{Action, RewardMode};
use mlfed_core::eval::{dataset_ap, map_thresholds, GtBox};
use mlfed_core::experiment::{
    cmd_evaluate, cmd_train, prepare, EvaluateRequest, ExperimentConfig, Method, TrainSummary,
};
use mlfed_core::report::read_log_series;
use mlfed_core::synth::{expert_trace, scalability_trace, SceneParams, SCALABILITY_DOMINANT};
use mlfed_core::{iou, BBox, Detection, ImagePrediction};

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass: Some(pass), detail: detail.into() }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self { pass: None, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(r: &mut impl Rng, extent: f64) -> BBox {
    let x0 = r.random_range(0.0..extent);
    let y0 = r.random_range(0.0..extent);
    let w = r.random_range(0.5..extent / 2.0);
    let h = r.random_range(0.5..extent / 2.0);
    BBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

fn within_time(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

/// IoU by counting unit cells on an integer grid.
fn grid_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |bx: [i64; 4], x: i64, y: i64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for x in 0..24 {
        for y in 0..24 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Overlap length as total length minus union extent.
fn sweep_iou(a: &BBox, b: &BBox) -> f64 {
    let ox = (a.width() + b.width() - (a.x_max.max(b.x_max) - a.x_min.min(b.x_min))).max(0.0);
    let oy = (a.height() + b.height() - (a.y_max.max(b.y_max) - a.y_min.min(b.y_min))).max(0.0);
    let inter = ox * oy;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn exhaustive_nearest(proto: &[f64]) -> Vec<bool> {
    let n = proto.len();
    let mut best = (f64::INFINITY, 0u64);
    for code in 1..(1u64 << n) {
        let d: f64 = (0..n).map(|i| (((code >> i) & 1) as f64 - proto[i]).powi(2)).sum();
        if d < best.0 {
            best = (d, code);
        }
    }
    (0..n).map(|i| (best.1 >> i) & 1 == 1).collect()
}

fn random_group(r: &mut impl Rng, providers: usize, max_members: usize) -> DetectionGroup {
    let base = random_box(r, 100.0);
    let k = r.random_range(1..=max_members);
    let members = (0..k)
        .map(|_| {
            let b = base.translate(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            (r.random_range(0..providers), Detection::new(0, r.random_range(0.01..1.0), b))
        })
        .collect();
    DetectionGroup { members, seed: 0 }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    for _ in 0..1000 {
        let mut int_box = || {
            let x0 = r.random_range(0..20i64);
            let y0 = r.random_range(0..20i64);
            [x0, y0, x0 + r.random_range(1..5i64), y0 + r.random_range(1..5i64)]
        };
        let (a, b) = (int_box(), int_box());
        let to_box = |c: [i64; 4]| BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap();
        worst = worst.max((iou(&to_box(a), &to_box(b)) - grid_iou(a, b)).abs());
        cases += 1;
    }
    for _ in 0..1000 {
        let a = random_box(&mut r, 50.0);
        let b = random_box(&mut r, 50.0);
        worst = worst.max((iou(&a, &b) - sweep_iou(&a, &b)).abs());
        cases += 1;
    }

    let mut nearest_bad = 0usize;
    for _ in 0..1000 {
        let n = r.random_range(1..=12usize);
        let proto: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        if nearest_binary_action(&proto).bits() != exhaustive_nearest(&proto).as_slice() {
            nearest_bad += 1;
        }
    }

    let mut wbf_worst = 0.0f64;
    for _ in 0..1000 {
        let g = random_group(&mut r, 4, 6);
        let fused = ablate_wbf(&g).detection;
        let total: f64 = g.members.iter().map(|m| m.1.score).sum();
        let mut expect = [0.0; 4];
        for (_, d) in &g.members {
            let c = d.bbox.to_array();
            for j in 0..4 {
                expect[j] += d.score * c[j] / total;
            }
        }
        let score = total / g.members.len() as f64;
        let got = fused.bbox.to_array();
        for j in 0..4 {
            wbf_worst = wbf_worst.max((got[j] - expect[j]).abs());
        }
        wbf_worst = wbf_worst.max((fused.score - score).abs());
    }

    let t = start.elapsed();
    Outcome::check(
        worst <= 1e-9 && nearest_bad == 0 && wbf_worst <= 1e-9 && within_time(t, 10),
        format!(
            "iou max err {worst:.1e} over {cases}; nearest-binary mismatches {nearest_bad}/1000; wbf max err {wbf_worst:.1e} over 1000; {:.2}s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Greedy matching followed by the full precision/recall curve, interpolated
/// at 101 recall levels.
fn reference_ap(preds: &[ImagePrediction], gt: &[Vec<GtBox>], thr: f64) -> f64 {
    let mut per_cat: BTreeMap<usize, (usize, Vec<(f64, bool)>)> = BTreeMap::new();
    for g in gt.iter().flatten() {
        per_cat.entry(g.group).or_default().0 += 1;
    }
    for (p, g) in preds.iter().zip(gt) {
        let mut dets: Vec<&Detection> = p.detections.iter().collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; g.len()];
        for d in dets {
            let mut pick: Option<(usize, f64)> = None;
            for (k, gb) in g.iter().enumerate() {
                if used[k] || gb.group != d.group {
                    continue;
                }
                let o = iou(&d.bbox, &gb.bbox);
                if o >= thr && pick.is_none_or(|(_, best)| o > best) {
                    pick = Some((k, o));
                }
            }
            if let Some((k, _)) = pick {
                used[k] = true;
            }
            if let Some(entry) = per_cat.get_mut(&d.group) {
                entry.1.push((d.score, pick.is_some()));
            }
        }
    }
    let mut total = 0.0;
    for (count, stream) in per_cat.values_mut() {
        stream.sort_by(|a, b| b.0.total_cmp(&a.0));
        let curve: Vec<(f64, f64)> = (1..=stream.len())
            .map(|k| {
                let hits = stream[..k].iter().filter(|s| s.1).count();
                (hits as f64 / *count as f64, hits as f64 / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        for j in 0..=100 {
            let level = j as f64 / 100.0;
            ap += curve.iter().filter(|(rc, _)| *rc >= level).map(|(_, p)| *p).fold(0.0, f64::max);
        }
        total += ap / 101.0;
    }
    total / per_cat.len() as f64
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    let instances = 600;
    for _ in 0..instances {
        let images = r.random_range(1..=3usize);
        let cats = r.random_range(1..=3usize);
        let mut gt: Vec<Vec<GtBox>> = vec![Vec::new(); images];
        let n_gt = r.random_range(1..=5usize);
        for _ in 0..n_gt {
            let i = r.random_range(0..images);
            gt[i].push(GtBox { group: r.random_range(0..cats), bbox: random_box(&mut r, 30.0) });
        }
        let mut preds: Vec<ImagePrediction> = vec![ImagePrediction::default(); images];
        let n_det = r.random_range(0..=10usize);
        for _ in 0..n_det {
            let i = r.random_range(0..images);
            // half the detections sit near a ground-truth box
            let bbox = match gt[i].get(r.random_range(0..gt[i].len().max(1))) {
                Some(g) if r.random_bool(0.5) => g.bbox.translate(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)),
                _ => random_box(&mut r, 30.0),
            };
            preds[i].detections.push(Detection::new(r.random_range(0..cats), r.random_range(0.0..1.0), bbox));
        }
        let thr = map_thresholds()[r.random_range(0..10)];
        let got = dataset_ap(&preds, &gt, thr).unwrap().mean;
        worst = worst.max((got - reference_ap(&preds, &gt, thr)).abs());
    }
    let t = start.elapsed();
    Outcome::check(
        worst <= 1e-9 && within_time(t, 30),
        format!("max err {worst:.1e} over {instances} instances; {:.2}s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let cases = 1500;
    let mut violations = 0usize;
    for _ in 0..cases {
        let n = r.random_range(1..=6usize);
        let groups: Vec<DetectionGroup> = (0..r.random_range(0..8)).map(|_| random_group(&mut r, n, 8)).collect();
        let una = vote(groups.clone(), Voting::Unanimous, n);
        let con = vote(groups.clone(), Voting::Consensus, n);
        let aff = vote(groups, Voting::Affirmative, n);
        violations += una.iter().filter(|g| !con.contains(g)).count();
        violations += con.iter().filter(|g| !aff.contains(g)).count();
    }
    Outcome::check(violations == 0, format!("{violations} violations over {cases} grouped inputs"))
}

// ---------------------------------------------------------------- 4

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn small_sac(seed: u64) -> Sac {
    let hyper = SacHyperparams { hidden: vec![8, 8], actor_out_scale: 1.0, alpha: 0.3, ..SacHyperparams::default() };
    Sac::new(3, 2, hyper, seed).unwrap()
}

fn random_batch(r: &mut impl Rng, m: usize) -> (Batch, Array1<f64>) {
    let batch = Batch {
        states: Array2::from_shape_fn((m, 3), |_| r.random_range(-1.0..1.0)),
        protos: Array2::from_shape_fn((m, 2), |_| r.random_range(0.05..0.95)),
        rewards: Array1::from_shape_fn(m, |_| r.random_range(-1.0..1.0)),
        next_states: Array2::from_shape_fn((m, 3), |_| r.random_range(-1.0..1.0)),
        dones: Array1::zeros(m),
    };
    let y = Array1::from_shape_fn(m, |_| r.random_range(-2.0..2.0));
    (batch, y)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let points = 24;
    let mut worst_critic = 0.0f64;
    let mut worst_actor = 0.0f64;
    let mut r = rng(404);
    for point in 0..points {
        let sac = small_sac(point);
        let (batch, y) = random_batch(&mut r, 4);

        let (_, g1, g2) = sac.critic_loss_and_grads(&batch, &y);
        for (which, grad) in [(0, &g1), (1, &g2)] {
            for i in 0..grad.n_params() {
                let loss_at = |delta: f64| {
                    let mut s = sac.clone();
                    let net = if which == 0 { &mut s.q1 } else { &mut s.q2 };
                    net.set_param(i, net.param(i) + delta);
                    s.critic_loss_and_grads(&batch, &y).0[which]
                };
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                worst_critic = worst_critic.max(rel_err(grad.param(i), fd));
            }
        }

        let eps = Array2::from_shape_fn((4, 2), |_| r.sample::<f64, _>(StandardNormal));
        let (_, ga) = sac.actor_objective_and_grad(&batch.states, &eps);
        for i in 0..ga.n_params() {
            let obj_at = |delta: f64| {
                let mut s = sac.clone();
                s.actor.set_param(i, s.actor.param(i) + delta);
                s.actor_objective_and_grad(&batch.states, &eps).0
            };
            let fd = (obj_at(h) - obj_at(-h)) / (2.0 * h);
            worst_actor = worst_actor.max(rel_err(ga.param(i), fd));
        }
    }
    let t = start.elapsed();
    Outcome::check(
        worst_critic <= 1e-4 && worst_actor <= 1e-4 && within_time(t, 30),
        format!(
            "critic max rel err {worst_critic:.1e}, actor max rel err {worst_actor:.1e} over {points} parameter points; {:.2}s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5-7

const EXPERT_SEED: u64 = 1;
const SCALE_SEED: u64 = 7;
const SCALE_EPOCHS: usize = 60;
const IMAGES: usize = 2000;
const BETA: f64 = -0.1;
/// Feature 0 names the accurate provider; the rest are uniform noise.
const EXPERT_FEATURES: usize = 3;

fn workdir() -> PathBuf {
    let dir = std::env::var_os("MLFED_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("mlfed-acceptance-{}", std::process::id())));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn expert_scene() -> SceneParams {
    SceneParams { images: IMAGES, feature_dim: EXPERT_FEATURES, ..SceneParams::default() }
}

fn expert_trace_path(dir: &Path) -> PathBuf {
    let path = dir.join("expert.jsonl");
    if !path.is_file() {
        expert_trace(&expert_scene(), EXPERT_SEED).unwrap().write(&path).unwrap();
    }
    path
}

/// Settings shared by the trained runs.
fn base_config(trace: PathBuf, out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { trace, output_dir: out, epochs: 20, steps_per_epoch: 500, test_fraction: 0.2, ..Default::default() };
    cfg.reward.beta = BETA;
    cfg.sac = SacHyperparams {
        alpha: 0.02,
        lr: 3e-3,
        hidden: vec![64, 64],
        batch_size: 256,
        update_every: 50,
        updates_per_round: 100,
        start_steps: 1000,
        ..SacHyperparams::default()
    };
    cfg.seeds.env = 1;
    cfg.seeds.init = 2;
    cfg.seeds.explore = 3;
    cfg.seeds.baseline = 4;
    cfg
}

fn evaluate(cfg: &ExperimentConfig, method: Method, prefer_cheap: bool) -> BaselineReport {
    let req = EvaluateRequest { method, checkpoint: None, prefer_cheap, oracle_cap: DEFAULT_ORACLE_CAP };
    cmd_evaluate(cfg, &req).unwrap()
}

fn train(cfg: &ExperimentConfig) -> (TrainSummary, f64) {
    let start = Instant::now();
    let s = cmd_train(cfg, false).unwrap();
    (s, start.elapsed().as_secs_f64())
}

fn criterion_5(dir: &Path) -> Outcome {
    let cfg = base_config(expert_trace_path(dir), dir.join("expert-with-gt"));
    let (_, secs) = train(&cfg);
    let agent = evaluate(&cfg, Method::Agent, false);
    let oracle = evaluate(&cfg, Method::Oracle, false);
    let cheap = evaluate(&cfg, Method::Oracle, true);
    let random_n = evaluate(&cfg, Method::RandomN, false);
    let ensemble = evaluate(&cfg, Method::EnsembleN, false);
    let a = agent.mean_reward >= 0.95 * oracle.mean_reward;
    let b = agent.ap50 > random_n.ap50;
    let c = agent.cost <= 1.2;
    Outcome::check(
        a && b && c && secs < 600.0,
        format!(
            "agent reward {:.4} vs oracle {:.4} (cheapest-tie oracle {:.4}); AP50 {:.2} vs randomN {:.2}; cost {:.3} vs ensembleN {:.3}; trained in {secs:.0}s",
            agent.mean_reward,
            oracle.mean_reward,
            cheap.mean_reward,
            100.0 * agent.ap50,
            100.0 * random_n.ap50,
            agent.cost,
            ensemble.cost
        ),
    )
}

/// After epoch 5, AP50 never falls and cost never rises by more than 20%
/// from one epoch to the next.
/// Epochs after the fifth whose AP50 fell or cost rose by more than 20%.
fn unstable_epochs(log: &Path) -> Vec<usize> {
    let s = read_log_series(std::fs::File::open(log).unwrap(), &log.display().to_string()).unwrap();
    (5..s.epochs.len())
        .filter(|&k| s.ap50[k] < 0.8 * s.ap50[k - 1] || s.cost[k] > 1.2 * s.cost[k - 1])
        .map(|k| s.epochs[k] as usize)
        .collect()
}

fn criterion_6(dir: &Path) -> Outcome {
    let start = Instant::now();
    let path = dir.join("scalability.jsonl");
    if !path.is_file() {
        let scene = SceneParams { images: IMAGES, feature_dim: 1, ..SceneParams::default() };
        scalability_trace(&scene, SCALE_SEED).unwrap().write(&path).unwrap();
    }
    let mut cfg = base_config(path, dir.join("scalability"));
    cfg.epochs = SCALE_EPOCHS;
    let p = prepare(&cfg).unwrap();
    let n = p.test.n_providers();
    let singles: Vec<f64> = (0..n)
        .map(|k| evaluate_fixed("single", &p.test, &p.test_env, &Action::single(k, n), cfg.execution).unwrap().ap50)
        .collect();
    let dominant = singles[SCALABILITY_DOMINANT];
    let ensemble = evaluate(&cfg, Method::EnsembleN, false);
    let (summary, _) = train(&cfg);
    let agent = evaluate(&cfg, Method::Agent, false);
    let unstable = unstable_epochs(&summary.log);
    let steady = unstable.is_empty();
    let t = start.elapsed();

    let a = ensemble.ap50 < dominant;
    let b = 100.0 * agent.ap50 >= 100.0 * dominant - 0.5 && agent.cost <= 1.2;
    let lo = singles.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Outcome::check(
        a && b && steady && within_time(t, 1800),
        format!(
            "providers AP50 {:.1}..{:.1}, dominant {:.2}; ensembleN {:.2}; agent {:.2} at cost {:.3}; unstable epochs {:?}; {:.0}s",
            100.0 * lo,
            100.0 * hi,
            100.0 * dominant,
            100.0 * ensemble.ap50,
            100.0 * agent.ap50,
            agent.cost,
            unstable,
            t.as_secs_f64()
        ),
    )
}

fn criterion_7(dir: &Path) -> Outcome {
    let trace = expert_trace_path(dir);
    let with_cfg = base_config(trace.clone(), dir.join("expert-with-gt"));
    if !with_cfg.output_dir.join("checkpoint.json").is_file() {
        train(&with_cfg);
    }
    let with_gt = evaluate(&with_cfg, Method::Agent, false);

    let mut cfg = base_config(trace, dir.join("expert-without-gt"));
    cfg.reward.mode = RewardMode::WithoutGt;
    train(&cfg);
    let without = evaluate(&cfg, Method::Agent, false);

    let ratio = without.ap50 / with_gt.ap50;
    let cost_gap = (without.cost - with_gt.cost).abs() / with_gt.cost;
    Outcome::check(
        ratio >= 0.9 && cost_gap <= 0.1,
        format!(
            "without-gt AP50 {:.2} vs with-gt {:.2} (ratio {ratio:.3}); cost {:.3} vs {:.3} ({:.1}% apart)",
            100.0 * without.ap50,
            100.0 * with_gt.ap50,
            without.cost,
            with_gt.cost,
            100.0 * cost_gap
        ),
    )
}

fn criterion_8() -> Outcome {
    match std::env::var_os("MLFED_RELEASED_TRACE") {
        Some(p) if Path::new(&p).is_file() => {
            Outcome::check(false, format!("trace found at {}, but no reference pipeline config is bundled", p.to_string_lossy()))
        }
        _ => Outcome::skip("released provider trace not available (set MLFED_RELEASED_TRACE)"),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let dir = workdir();
    let mut failed = 0;
    for k in 1..=8u32 {
        if !selected(k) {
            continue;
        }
        let out = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&dir),
            6 => criterion_6(&dir),
            7 => criterion_7(&dir),
            _ => criterion_8(),
        };
        let tag = match out.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {k}: {tag}: {}", out.detail);
    }
    if std::env::var_os("MLFED_ACCEPTANCE_DIR").is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    if failed > 0 && std::env::var("MLFED_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
