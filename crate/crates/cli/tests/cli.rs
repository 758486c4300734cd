use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dwva_core::config::RunConfig;
use dwva_core::model::ModelConfig;
use dwva_core::train::MetricsReport;
use dwva_core::world::{read_dataset, WorldConfig};

fn dwva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwva"))
        .args(args)
        .env("DWVA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = dwva(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str]) -> (i32, String) {
    let o = dwva(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    assert!(o.stdout.is_empty(), "stdout should stay clean on error");
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.world = WorldConfig {
        grid_h: 16,
        grid_w: 16,
        horizon_fut: 4,
        n_agents: 2,
        ..WorldConfig::default()
    };
    cfg.model = ModelConfig {
        d_model: 8,
        d_latent: 8,
        n_heads: 2,
        enc_layers: 1,
        n_latents: 2,
        patch: 8,
        modes: 3,
        dit_depth: 1,
        hist_depth: 1,
        mlp_ratio: 2,
        act_hidden: 16,
        reward_hidden: 8,
        ..ModelConfig::default()
    };
    cfg.flow.n_steps = 3;
    for (st, n) in cfg.stages.iter_mut().zip([6, 4, 3]) {
        st.steps = Some(n);
        st.batch_size = 2;
    }
    cfg.eval.train_episodes = 6;
    cfg.eval.eval_episodes = 4;
    cfg.eval.seeds = vec![0];
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn gen_is_deterministic_and_allows_empty() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let (a, b, e) = (
        d.path().join("a.dwep"),
        d.path().join("b.dwep"),
        d.path().join("e.dwep"),
    );
    for p in [&a, &b] {
        ok(&["gen", "--config", s(&cfg), "--out", s(p), "--count", "3", "--seed", "7"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_dataset(&a).unwrap().len(), 3);
    let out = ok(&["gen", "--config", s(&cfg), "--out", s(&e), "--count", "0"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["episodes"], 0);
    assert!(read_dataset(&e).unwrap().is_empty());
}

#[test]
fn later_stage_without_checkpoint_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let data = d.path().join("t.dwep");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data), "--count", "2"]);
    let ck = d.path().join("x.dwva");
    let (code, err) = fails(&[
        "train",
        "--stage",
        "2",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--ckpt-out",
        s(&ck),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("usage error"), "{err}");
    assert!(!ck.exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"world": {"grid_h": 32, "colour": 1}}"#).unwrap();
    let (_, err) = fails(&[
        "gen",
        "--config",
        s(&bad),
        "--out",
        s(&d.path().join("x")),
        "--count",
        "1",
    ]);
    assert!(err.contains("config error"), "{err}");

    let (code, err) = fails(&["ablate", "--variant", "bogus", "--out", s(d.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown ablation variant"), "{err}");

    let (_, err) = fails(&[
        "eval",
        "--data",
        s(&d.path().join("missing.dwep")),
        "--out",
        s(d.path()),
    ]);
    assert!(err.contains("missing.dwep"), "{err}");
}

#[test]
fn expert_policy_scores_well() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("e.dwep");
    ok(&["gen", "--out", s(&data), "--count", "40", "--seed", "3"]);
    let out = d.path().join("closed");
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--policy",
        "expert",
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]))
    .unwrap();
    assert!(v["pdms"]["mean"].as_f64().unwrap() > 0.9, "{v}");

    let out = d.path().join("open");
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--mode",
        "open",
        "--policy",
        "expert",
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]))
    .unwrap();
    assert_eq!(v["l2_avg"].as_f64().unwrap(), 0.0);
    assert_eq!(v["cr_avg"].as_f64().unwrap(), 0.0);
}

#[test]
fn train_eval_render_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let cfg = tiny_config(dir);
    let data = dir.join("train.dwep");
    let held = dir.join("held.dwep");
    ok(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&data),
        "--count",
        "6",
        "--seed",
        "1",
    ]);
    ok(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&held),
        "--count",
        "4",
        "--seed",
        "2",
    ]);

    // Staged runs, with an interrupted and resumed Stage 1.
    let part = dir.join("part.dwva");
    let s1 = dir.join("s1.dwva");
    let s2 = dir.join("s2.dwva");
    let s3 = dir.join("s3.dwva");
    let base = ["--config", s(&cfg), "--data", s(&data)];
    ok(&[
        &["train", "--stage", "1", "--stop-after", "2", "--ckpt-out", s(&part)][..],
        &base,
    ]
    .concat());
    ok(&[
        &["train", "--stage", "1", "--ckpt-in", s(&part), "--ckpt-out", s(&s1)][..],
        &base,
    ]
    .concat());
    let (code, _) = fails(
        &[
            &["train", "--stage", "3", "--ckpt-in", s(&s1), "--ckpt-out", s(&s3)][..],
            &base,
        ]
        .concat(),
    );
    assert_eq!(code, 2);
    ok(&[
        &["train", "--stage", "2", "--ckpt-in", s(&s1), "--ckpt-out", s(&s2)][..],
        &base,
    ]
    .concat());
    ok(&[
        &["train", "--stage", "3", "--ckpt-in", s(&s2), "--ckpt-out", s(&s3)][..],
        &base,
    ]
    .concat());

    let all = dir.join("all.dwva");
    let out = ok(&[&["train", "--stage", "all", "--ckpt-out", s(&all)][..], &base].concat());
    assert!(out.lines().any(|l| l.ends_with("all.losses.csv")));
    assert_eq!(std::fs::read(&all).unwrap(), std::fs::read(&s3).unwrap());
    let csv = std::fs::read_to_string(dir.join("all.losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 4 + 3);

    let ev = dir.join("ev");
    ok(&[
        "eval",
        "--ckpt",
        s(&s3),
        "--config",
        s(&cfg),
        "--data",
        s(&held),
        "--out",
        s(&ev),
    ]);
    let jsonl = std::fs::read_to_string(ev.join("metrics.jsonl")).unwrap();
    let summary: dwva_core::train::Summary =
        serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    let report = MetricsReport::from_jsonl(&jsonl).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.summary, summary);

    // A checkpoint from a different model config is refused.
    let (code, err) = fails(&["eval", "--ckpt", s(&s3), "--data", s(&held), "--out", s(&ev)]);
    assert_eq!(code, 1);
    assert!(err.contains("config error") || err.contains("does not match"), "{err}");

    let world = RunConfig::load(&cfg).unwrap().world;
    let frames = world.horizon_hist + 1 + world.horizon_fut;
    for (name, extra) in [
        ("expert", vec![]),
        ("ckpt", vec!["--ckpt", s(&s3), "--config", s(&cfg)]),
    ] {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = dir.join(format!("render_{name}_{rep}"));
            let args = [
                &[
                    "render",
                    "--data",
                    s(&held),
                    "--episode",
                    "1",
                    "--traj-source",
                    name,
                    "--out",
                    s(&out),
                ][..],
                &extra,
            ]
            .concat();
            let listed = ok(&args);
            assert_eq!(listed.lines().count(), frames);
            let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            assert_eq!(files.len(), frames);
            outs.push(files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(outs[0], outs[1]);
    }
    let (code, _) = fails(&[
        "render",
        "--data",
        s(&held),
        "--episode",
        "4",
        "--out",
        s(&dir.join("r")),
    ]);
    assert_eq!(code, 2);
    let (code, _) = fails(&[
        "render",
        "--data",
        s(&held),
        "--episode",
        "0",
        "--traj-source",
        "ckpt",
        "--out",
        s(&dir.join("r")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn ablation_stages_emits_three_rows() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let out = d.path().join("abl");
    let csv = ok(&["ablate", "--variant", "stages", "--config", s(&cfg), "--out", s(&out)]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (r, label) in rows.iter().zip(["stage1", "stage2", "stage3"]) {
        assert!(r.starts_with(label), "{r}");
    }
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap(), csv);
    assert!(out.join("default/seed_0/stage3.dwva").exists());
}
