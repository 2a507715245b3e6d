use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
epochs = 2
warmup_epochs = 1
steps_per_epoch = 2
lr_text_encoder = 1e-3
lr_visual_encoder = 1e-3
lr_other = 3e-3
p = 3
k = 2
image_size = 8
patch_size = 4
embed_dim = 8
n_heads = 2
n_cct_blocks = 1
mlp_ratio = 2
max_frames = 2
text_layers = 1
"#;

fn cope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cope")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a 4-product corpus and trains a tiny model on it.
fn prepared(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&[
        "gen-data", "--out", s(&data), "--products", "4", "--per-domain", "2,2,2", "--frames", "2", "--seed", "3",
        "--image-size", "8",
    ]);
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let ckpt = dir.join("model.cpck");
    let manifest = data.join("manifest.jsonl");
    ok(&[
        "train", "--manifest", s(&manifest), "--config", s(&config), "--seed", "1", "--out", s(&ckpt), "--metrics",
        s(&dir.join("metrics.jsonl")),
    ]);
    (manifest, ckpt)
}

#[test]
fn pipeline_from_data_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = prepared(dir.path());
    assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(), 4);

    let emb = dir.path().join("emb.bin");
    ok(&["export", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&emb)]);
    let first = fs::read(&emb).unwrap();
    ok(&["export", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&emb)]);
    assert_eq!(fs::read(&emb).unwrap(), first);
    assert!(dir.path().join("emb.bin.jsonl").exists());

    let report = dir.path().join("report.json");
    let table = ok(&[
        "eval", "retrieval", "--emb", s(&emb), "--query", "P", "--gallery", "V", "--ks", "1,5,10,20,50", "--out",
        s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let r1 = json["recall"]["1"].as_f64().expect("R@1 present");
    assert!((0.0..=1.0).contains(&r1));
    assert!(table.contains(&format!("R@1               {r1:.6}")));

    let few = ok(&["eval", "fewshot", "--emb", s(&emb), "--anchor", "V", "--query", "L", "--seed", "2", "--repeats", "3"]);
    assert!(few.contains("mean"));

    let csv = dir.path().join("xy.csv");
    ok(&["project2d", "--emb", s(&emb), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("row,sample_id,product_id,domain,x,y\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 6);

    // no score lies strictly above 1
    let filtered = dir.path().join("kept.jsonl");
    ok(&["filter", "--emb", s(&emb), "--manifest", s(&manifest), "--threshold", "1.0", "--out", s(&filtered)]);
    assert_eq!(fs::read_to_string(&filtered).unwrap(), "");
}

#[test]
fn same_domain_retrieval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = prepared(dir.path());
    let emb = dir.path().join("emb.bin");
    ok(&["export", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&emb)]);
    let out = cope(&["eval", "retrieval", "--emb", s(&emb), "--query", "P", "--gallery", "P"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cross-domain"));
}

#[test]
fn exit_codes() {
    let out = cope(&["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = cope(&["export", "--ckpt", "/nonexistent/m.cpck", "--manifest", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = cope(&["gen-data", "--out", s(dir.path()), "--products", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 3\nwarmup = 1\n").unwrap();
    let out = cope(&["train", "--manifest", "m.jsonl", "--config", s(&bad), "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));

    assert!(cope(&["--help"]).status.success());
}

#[test]
fn cls_loss_ablation_changes_only_beta() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data", "--out", s(&data), "--products", "4", "--per-domain", "2,2,2", "--frames", "2", "--image-size", "8",
    ]);
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("ablation");
    let table = ok(&[
        "ablate", "--manifest", s(&data.join("manifest.jsonl")), "--config", s(&config), "--grid", "cls-loss", "--out",
        s(&out),
    ]);
    assert!(table.contains("wins"));
    let a = fs::read_to_string(out.join("beta=0.toml")).unwrap();
    let b = fs::read_to_string(out.join("beta=1.toml")).unwrap();
    let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(a.lines().count(), b.lines().count());
    assert_eq!(diff, vec![("beta = 0.0", "beta = 1.0")]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(json["baseline"]["reports"].as_array().unwrap().len(), 6);
}
