//! Subcommands driven through the built binary on a tiny fixture.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 5
manifest = "fixture/manifest.toml"

[field]
levels = 4
log2_table_size = 10
max_resolution = 32
hidden = 16

[decoder]
width = 16
bottleneck = 8

[init]
count = 24

[stage1]
iterations = 30
densify_interval = 10

[stage2]
iterations = 30
gss_interval = 10

[gss]
tau_p = 1e-12
tau_s = 1e-12

[fixture]
gaussians = 5
views = 9
lr_width = 12
lr_height = 10
"#;

fn featsplat(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_featsplat"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    let base = ["--config", "cfg.toml", "--threads", "0"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().chain(extra).copied().collect() };

    featsplat(dir, &[&["make-fixture", "--out", "fixture"][..], &base].concat());
    assert!(dir.join("fixture/hr/view_000.png").exists());

    featsplat(dir, &[&["train-coarse", "--out", "run"][..], &base].concat());
    assert!(dir.join("run/coarse.sgs").exists());
    assert_eq!(json_lines(&dir.join("run/coarse_loss.jsonl")).len(), 30);

    featsplat(dir, &[vec!["train-fine", "--out", "run", "--checkpoint", "run/coarse.sgs"], with(&[])].concat());
    let events = json_lines(&dir.join("run/split_stats.jsonl"));
    // Near-zero thresholds split every visible coarse Gaussian at the first event.
    let k = events[0]["candidates"].as_u64().unwrap();
    assert!(k > 0);
    assert_eq!(events[0]["created"].as_u64().unwrap(), 5 * k);

    let stats = featsplat(dir, &[vec!["split-stats", "--out", "run", "--checkpoint", "run/fine.sgs"], with(&[])].concat());
    let text = String::from_utf8(stats.stdout).unwrap();
    let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(last["fine"].as_u64().unwrap() > 0);
    assert_eq!(
        last["total"].as_u64().unwrap(),
        last["coarse"].as_u64().unwrap() + last["fine"].as_u64().unwrap()
    );

    featsplat(dir, &[vec!["render", "--out", "renders", "--checkpoint", "run/fine.sgs", "--scale", "3"], with(&[])].concat());
    let img = image::open(dir.join("renders/view_004.png")).unwrap();
    assert_eq!((img.width(), img.height()), (36, 30));

    featsplat(dir, &[vec!["eval", "--out", "eval", "--checkpoint", "run/fine.sgs"], with(&[])].concat());
    let rows = json_lines(&dir.join("eval/metrics.jsonl"));
    // Views 0 and 8 are held out, plus the mean row.
    assert_eq!(rows.len(), 3);
    assert!(rows[2]["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    featsplat(dir, &["make-fixture", "--config", "cfg.toml", "--out", "fixture"]);
    featsplat(dir, &["eval", "--config", "cfg.toml", "--out", "eval", "--renders", "fixture/hr"]);
    for row in json_lines(&dir.join("eval/metrics.jsonl")) {
        assert_eq!(row["psnr"], "inf");
        assert!((row["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}
