//! End-to-end exercises of the command-line surface and its file outputs.

use std::path::Path;

use trfeddis::cli::cli_main;
use trfeddis::eval::METRICS_HEADER;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("trfeddis")
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn tiny_config_json(out_dir: Option<&Path>) -> String {
    let out = match out_dir {
        Some(d) => format!(",\n  \"out_dir\": {:?}", d.to_string_lossy()),
        None => String::new(),
    };
    format!(
        r#"{{
  "strategy": "trfeddis",
  "model": {{
    "input_shape": [1, 8, 8],
    "encoder": [{{"conv": 4}}, {{"dense": 16}}],
    "head_width": 16,
    "num_classes": 3,
    "use_batchnorm": true
  }},
  "data": {{
    "synthetic": {{
      "seed": 7,
      "num_domains": 2,
      "per_domain_train": 64,
      "per_domain_test": 32,
      "image_size": 8
    }}
  }},
  "rounds": 2,
  "local_epochs": 1,
  "lr": 0.05,
  "batch_size": 16,
  "seeds": [0],
  "parallel": false{out}
}}"#
    )
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let code = cli_main(&argv(&["train", "--config", "/nonexistent/cfg.json"]));
    assert_eq!(code, 1);
}

#[test]
fn unknown_flag_and_subcommand_exit_1() {
    assert_eq!(cli_main(&argv(&["train", "--bogus"])), 1);
    assert_eq!(cli_main(&argv(&["frobnicate"])), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(cli_main(&argv(&["--help"])), 0);
}

#[test]
fn invalid_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut text = tiny_config_json(None);
    text = text.replacen("\"rounds\"", "\"bogus\": 3,\n  \"rounds\"", 1);
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(
        cli_main(&argv(&["train", "--config", cfg.to_str().unwrap()])),
        1
    );
}

#[test]
fn train_eval_ood_dump_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config_json(Some(&out))).unwrap();

    // train
    let code = cli_main(&argv(&["train", "--config", cfg_path.to_str().unwrap()]));
    assert_eq!(code, 0);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER));
    // one train + one test row per (round, client)
    assert_eq!(metrics.lines().count(), 1 + 2 * 2 * 2);
    assert!(out.join("summary.csv").exists());
    assert!(out.join("config.json").exists());
    let ckpt_dir = out.join("checkpoints").join("seed0");
    assert!(ckpt_dir.join("client0.ckpt").exists());
    assert!(ckpt_dir.join("client1.ckpt").exists());

    // eval on the checkpoint directory
    let code = cli_main(&argv(&[
        "eval",
        "--checkpoint",
        ckpt_dir.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);

    // eval on a single checkpoint file
    let code = cli_main(&argv(&[
        "eval",
        "--checkpoint",
        ckpt_dir.join("client1.ckpt").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--client",
        "1",
    ]));
    assert_eq!(code, 0);

    // ood writes the uncertainty csv
    let ood_csv = dir.path().join("ood.csv");
    let code = cli_main(&argv(&[
        "ood",
        "--checkpoint",
        ckpt_dir.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--sigma",
        "1.5",
        "--out",
        ood_csv.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let ood = std::fs::read_to_string(&ood_csv).unwrap();
    assert!(ood.starts_with("client,split,u"));
    // 2 clients x 32 test samples x clean+noisy
    assert_eq!(ood.lines().count(), 1 + 2 * 32 * 2);

    // embeddings schema: client,label + feat_dim + 2K columns
    let emb_csv = dir.path().join("emb.csv");
    let code = cli_main(&argv(&[
        "dump-embeddings",
        "--checkpoint",
        ckpt_dir.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        emb_csv.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let emb = std::fs::read_to_string(&emb_csv).unwrap();
    let mut lines = emb.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 2 + 16 + 2 * 3);
    assert_eq!(emb.lines().count(), 1 + 2 * 32);

    // rerunning embeddings is deterministic
    let emb2_csv = dir.path().join("emb2.csv");
    cli_main(&argv(&[
        "dump-embeddings",
        "--checkpoint",
        ckpt_dir.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        emb2_csv.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(&emb_csv).unwrap(),
        std::fs::read(&emb2_csv).unwrap()
    );
}

#[test]
fn seed_override_restricts_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    let text = tiny_config_json(Some(&out)).replacen("\"seeds\": [0]", "\"seeds\": [0, 1]", 1);
    std::fs::write(&cfg_path, text).unwrap();
    let code = cli_main(&argv(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "9",
    ]));
    assert_eq!(code, 0);
    assert!(out.join("checkpoints").join("seed9").exists());
    assert!(!out.join("checkpoints").join("seed0").exists());
}

#[test]
fn ablate_runs_variants_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config_json(None)).unwrap();
    let code = cli_main(&argv(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--variants",
        "backbone,full",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let summary = std::fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert!(summary.starts_with("variant,mean_acc,std_acc"));
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("backbone").join("metrics.csv").exists());
    assert!(out.join("full").join("metrics.csv").exists());

    // unknown variant is a config error
    let code = cli_main(&argv(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--variants",
        "nonsense",
    ]));
    assert_eq!(code, 1);
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config_json(None)).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let code = cli_main(&argv(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}
