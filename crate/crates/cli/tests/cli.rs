use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cellprompt::data::SynthSpec;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn cellprompt(wd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellprompt"))
        .arg("--workdir")
        .arg(wd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Byte contents of every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn eval_reproduces_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cellprompt(
        &fixture(),
        &[
            "eval",
            "--checkpoint",
            "checkpoint.safetensors",
            "--manifest",
            "data/manifest.json",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    ok(&out);
    for f in ["report.json", "report.csv"] {
        let got = std::fs::read_to_string(tmp.path().join(f)).unwrap();
        let want = std::fs::read_to_string(fixture().join(f)).unwrap();
        assert_eq!(got, want, "{f} differs from the golden copy");
    }
}

/// Rebuilds the golden fixture from `synth.toml` and `train.toml`.
/// Run with `cargo test -p cellprompt-cli -- --ignored regenerate_golden`.
#[test]
#[ignore]
fn regenerate_golden() {
    let fx = fixture();
    let _ = std::fs::remove_dir_all(fx.join("data"));
    ok(&cellprompt(&fx, &["synth", "synth.toml", "--out", "data"]));
    let run = tempfile::tempdir().unwrap();
    let run_dir = run.path().to_str().unwrap();
    ok(&cellprompt(&fx, &["--config", "train.toml", "train", "--out", run_dir]));
    std::fs::copy(run.path().join("checkpoint.safetensors"), fx.join("checkpoint.safetensors")).unwrap();
    ok(&cellprompt(
        &fx,
        &["eval", "--checkpoint", "checkpoint.safetensors", "--manifest", "data/manifest.json", "--out", "."],
    ));
}

#[test]
fn help_lists_config_keys() {
    let out = Command::new(env!("CARGO_BIN_EXE_cellprompt")).args(["train", "--help"]).output().unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["model.num_queries", "dpm.mode", "cdn.lambda1", "loss.cdn_weight", "optim.lr_backbone"] {
        assert!(text.contains(key), "help lacks {key}");
    }
}

#[test]
fn bad_configuration_exits_2() {
    let fx = fixture();
    let out = cellprompt(&fx, &["--config", "train.toml", "--set", "model.no_such_key=1", "train"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = cellprompt(&fx, &["--device", "cuda", "synth", "synth.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let out = cellprompt(
        &fx,
        &[
            "infer",
            "--checkpoint",
            "checkpoint.safetensors",
            "--image",
            "data/left/0000.png",
            "--dataset",
            "nowhere",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cellprompt(
        &fixture(),
        &[
            "eval",
            "--checkpoint",
            "checkpoint.safetensors",
            "--manifest",
            "data/absent.json",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cellprompt(
        &fixture(),
        &[
            "--config",
            "train.toml",
            "--set",
            "optim.lr_rest=1e30",
            "--set",
            "optim.lr_backbone=1e30",
            "--set",
            "optim.grad_clip=0",
            "--set",
            "iterations=5",
            "train",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn synth_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&cellprompt(&fixture(), &["synth", "synth.toml", "--out", dir.to_str().unwrap()]));
    }
    let ta = tree(&a);
    assert!(ta.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(ta, tree(&b));
    // the committed fixture data came from the same spec
    assert_eq!(ta, tree(&fixture().join("data")));
}

#[test]
fn shipped_toy_spec_is_the_builtin_toy() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth_toy.toml");
    let spec: SynthSpec = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(spec, SynthSpec::toy(1, 4));
}

#[test]
fn infer_uses_the_dataset_label_set() {
    let tmp = tempfile::tempdir().unwrap();
    let registry: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture().join("data/registry.json")).unwrap()).unwrap();
    for (name, image) in [("left", "data/left/0000.png"), ("right", "data/right/0001.png")] {
        let out_dir = tmp.path().join(name);
        let out = cellprompt(
            &fixture(),
            &[
                "infer",
                "--checkpoint",
                "checkpoint.safetensors",
                "--image",
                image,
                "--dataset",
                name,
                "--threshold",
                "0",
                "--overlay",
                "--out",
                out_dir.to_str().unwrap(),
            ],
        );
        ok(&out);
        let allowed: Vec<String> = registry["datasets"]
            .as_array()
            .unwrap()
            .iter()
            .find(|d| d["name"] == name)
            .unwrap()["category_names"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().unwrap().to_string())
            .collect();
        let preds: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("predictions.json")).unwrap()).unwrap();
        let list = preds["predictions"].as_array().unwrap();
        assert!(!list.is_empty());
        for p in list {
            let class = p["class"].as_u64().unwrap() as usize;
            assert!(class < allowed.len());
            assert_eq!(p["class_name"].as_str().unwrap(), allowed[class]);
        }
        assert!(out_dir.join("overlay.png").exists());
    }
}
