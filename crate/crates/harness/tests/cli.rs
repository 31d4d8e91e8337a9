use std::path::Path;
use std::process::{Command, Output};

fn planrl(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planrl"))
        .args(args)
        .env("PLANRL_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = "label_samples = 400\n[bc]\nepochs = 40\n[supervised]\nepochs = 30\n[eval]\nepisodes = 5\n";

#[test]
fn gen_demos_is_reproducible_and_counts_trajectories() {
    let d = tempfile::tempdir().unwrap();
    ok(&planrl(&["gen-demos", "--task", "ReachLift", "--n", "10", "--seed", "4", "--out", "a.csv"], d.path()));
    ok(&planrl(&["gen-demos", "--task", "ReachLift", "--n", "10", "--seed", "4", "--out", "b.csv"], d.path()));
    let a = std::fs::read(d.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().any(|l| l == "#count 10"));
}

#[test]
fn user_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("blocker"), b"").unwrap();
    let o = planrl(&["gen-demos", "--n", "1", "--out", "blocker/demos.csv"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blocker"));

    std::fs::write(d.path().join("bad.toml"), "[agent]\nunknown_key = 1\n").unwrap();
    let cfg = d.path().join("bad.toml");
    let o = planrl(&["gen-demos", "--config", cfg.to_str().unwrap(), "--out", "x.csv"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown"));

    let o = planrl(&["eval", "--checkpoint", "missing.ckpt"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let o = planrl(&["no-such-command"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn supervised_reports_and_checkpoints_feed_training() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&planrl(&["gen-demos", "--config", c, "--out", "demos.csv"], d.path()));
    ok(&planrl(&["gen-labels", "--config", c, "--out", "labels.csv"], d.path()));
    ok(&planrl(&["train-supervised", "bc", "--config", c, "--dataset", "demos.csv", "--out", "bc.ckpt"], d.path()));
    let mode = ok(&planrl(&["train-supervised", "modenet", "--config", c, "--dataset", "labels.csv", "--out", "mode.ckpt"], d.path()));
    for key in ["accuracy", "precision", "recall", "f1"] {
        assert!(mode.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key} missing in {mode}");
    }
    let nav = ok(&planrl(&["train-supervised", "navnet", "--config", c, "--dataset", "labels.csv", "--out", "nav.ckpt"], d.path()));
    assert!(nav.contains("mean_waypoint_error = "));
    assert!(d.path().join("nav.ckpt.report.toml").exists());

    // a label file is not a demo file
    let o = planrl(&["train-supervised", "bc", "--config", c, "--dataset", "labels.csv", "--out", "x.ckpt"], d.path());
    assert_eq!(o.status.code(), Some(1));

    let args = [
        "train", "--config", c, "--steps", "600", "--demos", "demos.csv", "--bc", "bc.ckpt", "--modenet", "mode.ckpt",
        "--navnet", "nav.ckpt", "--log-decisions", "--out", "run",
    ];
    ok(&planrl(&args, d.path()));
    let metrics = std::fs::read_to_string(d.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("#schema=planrl-metrics/1\n"));
    assert_eq!(metrics.lines().count(), 2 + 1, "one 600-step interval");
    let decisions = std::fs::read_to_string(d.path().join("run/decisions.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 2 + 600);

    let e1 = ok(&planrl(&["eval", "--checkpoint", "run/agent.ckpt", "--episodes", "8", "--seed", "2"], d.path()));
    let e2 = ok(&planrl(&["eval", "--checkpoint", "run/agent.ckpt", "--episodes", "8", "--seed", "2"], d.path()));
    assert_eq!(e1, e2);
    assert!(e1.contains("success_rate="));
}

#[test]
fn sweep_aggregates_and_plot_emits_curves() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, format!("seeds = [0, 1]\n{SMALL}")).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&planrl(
        &["sweep", "--config", c, "--variants", "PLANRL,RL_MN", "--steps", "500", "--threads", "2", "--out", "sw"],
        d.path(),
    ));
    let agg = std::fs::read_to_string(d.path().join("sw/aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(lines.next(), Some("#schema=planrl-aggregate/1"));
    let header = lines.next().unwrap();
    assert!(header.contains("success_mean") && header.contains("success_std"));
    assert!(agg.lines().any(|l| l.starts_with("RL_MN,train,500,2,")));
    ok(&planrl(&["plot", "sw/aggregate.csv", "--out", "plots"], d.path()));
    for f in ["train-PLANRL.svg", "train-RL_MN.svg", "train-comparison.svg"] {
        let svg = std::fs::read_to_string(d.path().join("plots").join(f)).unwrap();
        assert!(svg.starts_with("<svg"));
    }

    // a future schema version is refused
    let bumped = agg.replacen("planrl-aggregate/1", "planrl-aggregate/2", 1);
    std::fs::write(d.path().join("future.csv"), bumped).unwrap();
    let o = planrl(&["plot", "future.csv", "--out", "p2"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn shipped_config_parses() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = planrl_harness::config::ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!(cfg.agent.steps, 30_000);
}
