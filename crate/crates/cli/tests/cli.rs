//! End-to-end runs of the `apdr` binary on tiny datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apdr::dataset::load_manifest;
use apdr::model::ModelConfig;
use apdr::training::{save_checkpoint, TrainConfig, Trainer};
use serde_json::Value;

/// Keeps datasets and training runs to a few seconds.
const SMALL: [&str; 12] = [
    "--set",
    "generator.test_identities=3",
    "--set",
    "generator.samples_per_identity=4",
    "--set",
    "train.stage1_epochs=1",
    "--set",
    "train.stage2_epochs=1",
    "--set",
    "train.p=4",
    "--set",
    "train.k=2",
];

fn apdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apdr"))
        .args(args)
        .args(SMALL)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = apdr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    apdr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Files under `dir` except the resolved configuration, which records the
/// output path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn generate(dir: &Path) {
    ok(&["generate", "--seed", "3", "--identities", "4", "--out", s(dir)]);
}

#[test]
fn generate_is_reproducible_and_guards_its_output() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    generate(&a);
    generate(&b);
    assert_eq!(tree(&a), tree(&b));

    assert_eq!(code(&["generate", "--seed", "3", "--identities", "4", "--out", s(&a)]), 2);
    ok(&["generate", "--seed", "3", "--identities", "4", "--out", s(&a), "--force"]);
    assert_eq!(tree(&a), tree(&b));

    let config: Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 3);
    assert_eq!(config["generator"]["train_identities"], 4);
    assert_eq!(config["provenance"]["generator.train_identities"], "flag");
    assert_eq!(config["provenance"]["train.momentum"], "default");
}

#[test]
fn usage_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("x");
    assert_eq!(code(&["generate", "--identities", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--out", s(&out)]), 2, "missing dataset");
    assert_eq!(code(&["gradcheck", "--op", "no_such_op", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--set", "train.epochs=3"]), 2, "unknown key");
    assert_eq!(code(&["train", "--stage", "3"]), 2);

    let data = root.path().join("data");
    generate(&data);
    let run = root.path().join("run");
    let args = ["train", "--dataset", s(&data), "--out", s(&run), "--stage", "2"];
    assert_eq!(code(&args), 2, "stage 2 without a stage-1 checkpoint");
    let args = ["train", "--dataset", s(&data), "--out", s(&run), "--preset", "perceptual", "--stage", "2"];
    assert_eq!(code(&args), 2, "stage-1-only preset");
    assert_eq!(code(&["eval", "--dataset", s(&data), "--out", s(&run)]), 2, "eval without a checkpoint");
}

#[test]
fn train_then_eval() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    generate(&data);
    ok(&["train", "--dataset", s(&data), "--out", s(&run), "--seed", "1"]);
    for f in ["ckpt_stage1_e1.bin", "ckpt_stage2_e1.bin", "log.csv", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus one row per epoch");

    let ckpt = run.join("ckpt_stage2_e1.bin");
    let eval_dir = root.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&eval_dir),
        "--rerank",
    ]);
    assert!(stdout.contains("full: rank-1"), "{stdout}");
    assert!(stdout.contains("re-ranked: rank-1"), "{stdout}");
    let report: Value = serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["reranked"], true);
    assert!(report["rerank"]["map"].is_number());
    assert!(eval_dir.join("cmc_reranked.csv").is_file());

    let global = ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--baseline", "global-only"]);
    assert!(global.starts_with("global: rank-1"), "{global}");
    let part = ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--branch", "part"]);
    assert!(part.starts_with("part: rank-1"), "{part}");
    let preset = ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--preset", "refined-part"]);
    assert!(preset.starts_with("refined-part: rank-1"), "{preset}");
}

#[test]
fn stage2_continues_from_stage1_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let (split, whole) = (root.path().join("split"), root.path().join("whole"));
    generate(&data);
    ok(&["train", "--dataset", s(&data), "--out", s(&split), "--stage", "1"]);
    assert!(!split.join("ckpt_stage2_e1.bin").exists());
    ok(&["train", "--dataset", s(&data), "--out", s(&split), "--stage", "2"]);
    ok(&["train", "--dataset", s(&data), "--out", s(&whole)]);
    assert_eq!(
        fs::read(split.join("ckpt_stage2_e1.bin")).unwrap(),
        fs::read(whole.join("ckpt_stage2_e1.bin")).unwrap()
    );
}

fn mask_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn presets_change_the_number_of_masks() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate(&data);
    for (preset, masks) in [("ablation-K1", 1), ("ablation-K12", 10)] {
        let run = root.path().join(preset);
        ok(&["train", "--dataset", s(&data), "--out", s(&run), "--preset", preset]);
        let ckpt = run.join("ckpt_stage2_e1.bin");
        let out = ok(&[
            "inspect-masks",
            "--dataset",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&run),
            "--probes",
            "2",
        ]);
        assert_eq!(mask_files(&run.join("masks")).len(), 2 * masks, "{preset}: {out}");
        assert!(!run.join("mask_iou.csv").exists(), "grouping differs from the ground truth");
    }
}

#[test]
fn untrained_masks_are_flat() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate(&data);
    let ds = load_manifest(&data).unwrap();
    let model = ModelConfig::new(ds.schema().clone(), ds.num_train_ids());
    let trainer = Trainer::new(&model, TrainConfig::default()).unwrap();
    let ckpt = root.path().join("init.bin");
    save_checkpoint(&ckpt, &trainer.checkpoint()).unwrap();

    let run = root.path().join("inspect");
    ok(&["inspect-masks", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&run), "--probes", "3"]);
    let files = mask_files(&run.join("masks"));
    assert_eq!(files.len(), 3 * 8);
    for f in &files {
        let img = image::open(f).unwrap().to_luma8();
        assert!(img.pixels().all(|p| (127..=128).contains(&p.0[0])), "{}", f.display());
    }
    let csv = fs::read_to_string(run.join("mask_iou.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn single_op_gradcheck() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--op", "weighted_average_pool", "--seed", "3", "--out", s(root.path())]);
    assert!(out.contains("1 of 1 checks passed"), "{out}");
    let csv = fs::read_to_string(root.path().join("gradcheck.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("weighted_average_pool,3,"));
    assert!(rows[0].ends_with(",true"));
}

#[test]
fn divergence_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate(&data);
    let run = root.path().join("run");
    let out = apdr(&["train", "--dataset", s(&data), "--out", s(&run), "--set", "train.base_lr=1e30"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
