use std::path::Path;
use std::time::Instant;

use mlfed_core::agent::{Checkpoint, SacHyperparams};
use mlfed_core::experiment::{cmd_evaluate, cmd_train, EvaluateRequest, ExperimentConfig, Method};
use mlfed_core::synth::{expert_trace, SceneParams};
use mlfed_core::Execution;

fn tiny(dir: &Path, out: &str, epochs: usize) -> ExperimentConfig {
    let trace = dir.join("expert.jsonl");
    if !trace.is_file() {
        let scene = SceneParams { images: 120, feature_dim: 3, ..SceneParams::default() };
        expert_trace(&scene, 3).unwrap().write(&trace).unwrap();
    }
    let mut cfg = ExperimentConfig {
        trace,
        output_dir: dir.join(out),
        epochs,
        steps_per_epoch: 60,
        test_fraction: 0.25,
        ..Default::default()
    };
    cfg.reward.beta = -0.1;
    cfg.sac = SacHyperparams {
        hidden: vec![16, 16],
        batch_size: 32,
        update_every: 20,
        updates_per_round: 5,
        start_steps: 40,
        lr: 1e-3,
        ..SacHyperparams::default()
    };
    cfg.seeds.init = 1;
    cfg.seeds.explore = 2;
    cfg
}

/// Log rows with the trailing wall-clock column removed.
fn log_rows(cfg: &ExperimentConfig) -> Vec<String> {
    std::fs::read_to_string(cfg.output_dir.join("log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

fn without_wall_clock(mut ck: Checkpoint) -> Checkpoint {
    for r in &mut ck.log {
        r.wall_seconds = 0.0;
    }
    ck
}

#[test]
fn tiny_run_finishes_quickly_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "run", 2);
    let start = Instant::now();
    let s = cmd_train(&cfg, false).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(s.epochs, 2);
    assert!((0.0..=1.0).contains(&s.final_ap50));
    assert!((1.0..=3.0).contains(&s.final_cost));
    for f in ["config.toml", "checkpoint.json", "log.csv", "run_meta.json"] {
        assert!(cfg.output_dir.join(f).is_file(), "{f}");
    }
    let req = EvaluateRequest { method: Method::Agent, checkpoint: None, prefer_cheap: false, oracle_cap: 16 };
    let report = cmd_evaluate(&cfg, &req).unwrap();
    assert_eq!(report.per_image.len(), 30);
    assert_eq!(report.cost, s.final_cost);
    assert!(cfg.output_dir.join("per_image_agent.json").is_file());
}

#[test]
fn same_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(dir.path(), "a", 2);
    let mut b = tiny(dir.path(), "b", 2);
    b.execution = Execution::Sequential;
    cmd_train(&a, false).unwrap();
    cmd_train(&b, false).unwrap();
    assert_eq!(log_rows(&a), log_rows(&b));
    let ca = without_wall_clock(Checkpoint::load(&a.output_dir.join("checkpoint.json")).unwrap());
    let cb = without_wall_clock(Checkpoint::load(&b.output_dir.join("checkpoint.json")).unwrap());
    assert_eq!(ca.sac, cb.sac);
    assert_eq!(ca.buffer, cb.buffer);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = tiny(dir.path(), "straight", 3);
    cmd_train(&straight, false).unwrap();

    let mut split = tiny(dir.path(), "split", 1);
    cmd_train(&split, false).unwrap();
    split.epochs = 3;
    let s = cmd_train(&split, true).unwrap();
    assert_eq!(s.epochs, 3);

    assert_eq!(log_rows(&straight), log_rows(&split));
    let a = without_wall_clock(Checkpoint::load(&straight.output_dir.join("checkpoint.json")).unwrap());
    let b = without_wall_clock(Checkpoint::load(&split.output_dir.join("checkpoint.json")).unwrap());
    assert_eq!(a, b);
}

#[test]
fn resume_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "empty", 1);
    assert_eq!(cmd_train(&cfg, true).unwrap_err().kind(), "checkpoint_missing");
}
