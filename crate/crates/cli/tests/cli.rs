//! End-to-end command behavior through the real binary: dependency checks,
//! byte-identical regeneration, and a miniature full pipeline chain.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Output;

fn fcd(args: &[&str], out: &Path) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fcd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FCD_OUT")
        .output()
        .expect("binary runs")
}

/// Micro configuration: fast enough for a test, structurally complete.
fn micro_overrides() -> Vec<String> {
    [
        "synth.num_scenes=8",
        "synth.scene_size=[64, 64]",
        "synth.channels=2",
        "synth.cloud_density=0.15",
        "synth.seed=3",
        "data.patch_size=32",
        "gan.iterations=6",
        "gan.batch_size=4",
        "gan.base_width=4",
        "gan.res_blocks=1",
        "gan.d_steps_per_g_step=1",
        "gan.checkpoint_every=3",
        "gan.val_grid_points=24",
        "mask.grid_points=24",
        "cam.epochs=1",
        "cam.batch_size=8",
        "cam.base_width=4",
        "refine.epochs=1",
        "refine.batch_size=8",
        "refine.base_width=4",
        "refine.depth=2",
        "finetune.epochs=1",
        "finetune.batch_size=4",
        "finetune.label_fraction=0.25",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with_sets(cmd: &str, overrides: &[String]) -> Vec<String> {
    let mut args = vec![cmd.to_string()];
    for o in overrides {
        args.push("--set".into());
        args.push(o.clone());
    }
    args
}

fn run(cmd: &str, overrides: &[String], out: &Path) -> Output {
    let args = with_sets(cmd, overrides);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    fcd(&refs, out)
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn evaluate_before_make_masks_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let overrides = micro_overrides();
    assert!(run("synth-data", &overrides, tmp.path()).status.success());
    assert!(run("split", &overrides, tmp.path()).status.success());
    let out = run("evaluate", &overrides, tmp.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("make-masks"), "stderr must name the producing command: {stderr}");
}

#[test]
fn first_command_missing_data_names_synth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run("split", &micro_overrides(), tmp.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("synth-data"), "{stderr}");
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();
    let overrides = micro_overrides();
    assert!(run("synth-data", &overrides, tmp_a.path()).status.success());
    assert!(run("synth-data", &overrides, tmp_b.path()).status.success());
    let a = tree_bytes(&tmp_a.path().join("data"));
    let b = tree_bytes(&tmp_b.path().join("data"));
    assert_eq!(a.len(), b.len());
    assert!(a == b, "regenerated dataset differs");
    // different seed changes the bytes
    let tmp_c = tempfile::tempdir().unwrap();
    let mut seeded = with_sets("synth-data", &overrides);
    seeded.push("--seed".into());
    seeded.push("99".into());
    let refs: Vec<&str> = seeded.iter().map(String::as_str).collect();
    assert!(fcd(&refs, tmp_c.path()).status.success());
    let c = tree_bytes(&tmp_c.path().join("data"));
    assert!(a != c, "seed must change the corpus");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fcd(&["synth-data", "--set", "gan.nonsense=1"], tmp.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nonsense") || stderr.contains("unknown"), "{stderr}");
}

#[test]
fn full_micro_chain_produces_report_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let overrides = micro_overrides();
    for cmd in [
        "synth-data",
        "split",
        "train-fcd",
        "make-masks",
        "train-cam",
        "cam-masks",
        "train-fcdplus",
        "finetune",
        "evaluate",
        "report",
    ] {
        let out = run(cmd, &overrides, tmp.path());
        assert!(
            out.status.success(),
            "{cmd} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        let manifest = tmp.path().join(format!("manifests/{cmd}.json"));
        assert!(manifest.exists(), "{cmd} must write a manifest");
    }

    let report_path = tmp.path().join("eval/report.json");
    assert!(report_path.exists());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    let methods: Vec<&str> = report["test"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert!(methods.contains(&"fcd"));
    assert!(methods.contains(&"fcdplus"));
    assert!(methods.contains(&"fcdplus_1pct"));
    assert!(report["val_pseudo"].as_array().unwrap().len() >= 4, "fcd + three cam variants");
    assert!(report["holes"]["fcd"].is_number());

    assert!(tmp.path().join("eval/table.csv").exists());
    let panels = std::fs::read_dir(tmp.path().join("eval/panels")).unwrap().count();
    assert!(panels > 0, "report must render panels");

    // manifests carry one common config hash
    let hashes: Vec<String> = ["synth-data", "split", "train-fcd"]
        .iter()
        .map(|cmd| {
            let m: serde_json::Value = serde_json::from_slice(
                &std::fs::read(tmp.path().join(format!("manifests/{cmd}.json"))).unwrap(),
            )
            .unwrap();
            m["config_hash"].as_str().unwrap().to_string()
        })
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));

    // loss trace CSV has the full column set
    let trace = std::fs::read_to_string(tmp.path().join("fcd/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,adv,cls_r,cls_f,cyc,id,L_D,L_G"));
    assert_eq!(trace.lines().count(), 1 + 6, "header plus one row per iteration");

    // per-epoch refinement CSV schema
    let epochs = std::fs::read_to_string(tmp.path().join("fcdplus/metrics.csv")).unwrap();
    assert!(epochs.starts_with("epoch,train_loss,aux_loss,val_f1,lr"));
}

#[test]
fn rerunning_a_stage_with_same_seed_reproduces_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let overrides = micro_overrides();
    assert!(run("synth-data", &overrides, tmp.path()).status.success());
    let first = std::fs::read(tmp.path().join("manifests/synth-data.json")).unwrap();
    assert!(run("synth-data", &overrides, tmp.path()).status.success());
    let second = std::fs::read(tmp.path().join("manifests/synth-data.json")).unwrap();
    assert_eq!(first, second);
}
