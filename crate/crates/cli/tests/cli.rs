use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
variant = "full"
seed = 1

[model.planar]
resolutions = [4, 8]
time_resolution = 3
channels = 2

[model.grid]
levels = 2
min_resolution = 4
max_resolution = 8
log2_table_size = 8
time_resolution = 3

[model.encoder]
stem_convs = 1
stage_widths = [2, 3]
blocks_per_stage = 1
out_channels = 3

[model.heads]
hidden = 8
geo_features = 4
view_levels = 2

[model.render]
far = 30.0
samples = 8
chunk_rays = 128

[train]
iterations = 3
rays_per_batch = 16

[synth.intrinsics]
height = 8
width = 32
fov_up_deg = 3.0
fov_down_deg = -25.0

[data]
count = 5

[data.intrinsics]
height = 8
width = 32
fov_up_deg = 3.0
fov_down_deg = -25.0
"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    /// Runs the binary with the config, dataset and run directory of this
    /// workspace filled in.
    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lidarfield"));
        cmd.args(args);
        if args[0] != "config-reference" {
            cmd.arg("--config").arg(self.path("run.toml"));
            if args[0] != "synth" {
                cmd.arg("--data").arg(self.path("data"));
            }
        }
        cmd.current_dir(self.dir.path());
        cmd.output().unwrap()
    }

    fn synth(&self) {
        let out = self.run(&["synth", "--out", "data"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "velodyne", "labels"] {
        let d = dir.join(sub);
        let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_and_refuses_to_overwrite() {
    let w = Work::new();
    w.synth();
    let first = tree(&w.path("data"));
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".bin")).count(), 5);

    let again = w.run(&["synth", "--out", "data"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));

    let forced = w.run(&["synth", "--out", "data", "--force"]);
    assert!(forced.status.success());
    assert_eq!(tree(&w.path("data")), first);
}

#[test]
fn bad_primitive_label_is_a_config_error_naming_the_key() {
    let w = Work::new();
    let cfg = format!(
        "{TINY}\n[[synth.primitives]]\nname = \"x\"\nlabel = 99999\nreflectivity = 0.5\nvelocity = [0.0, 0.0, 0.0]\nshape = {{ kind = \"ground\", height = 0.0 }}\n"
    );
    fs::write(w.path("run.toml"), cfg).unwrap();
    let out = w.run(&["synth", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("synth.primitives[0].label"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let w = Work::new();
    fs::write(w.path("run.toml"), format!("{TINY}\n[output]\ndirectory = \"x\"\n")).unwrap();
    let out = w.run(&["synth", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("directory"), "{}", stderr(&out));
}

#[test]
fn train_render_eval_pipeline() {
    let w = Work::new();
    w.synth();

    // Zero iterations store the initialization.
    let out = w.run(&["train", "--iterations", "0", "--out", "init"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(w.path("init/checkpoint.lfc").is_file());
    let csv = fs::read_to_string(w.path("init/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);

    // Resume continues the iteration count.
    let out = w.run(&["train", "--out", "run", "--checkpoint", "init/checkpoint.lfc"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(w.path("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));

    let out = w.run(&["train", "--iterations", "2", "--out", "more", "--checkpoint", "run/checkpoint.lfc"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(w.path("more/loss.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("3,"), "{csv}");

    // Rendering at a training frame is in distribution.
    let out = w.run(&["render", "--checkpoint", "run/checkpoint.lfc", "--frame", "1", "--out", "r1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.path("r1/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["in_distribution"], true);
    assert_eq!(meta["extrapolated_time"], false);
    assert_eq!(meta["local_features_frame"], 1);
    for f in ["range.rimg", "range.npy", "depth.png", "intensity.png", "semantic.png", "palette.json", "cloud.bin", "cloud.label", "cloud.ply"] {
        assert!(w.path("r1").join(f).is_file(), "{f}");
    }
    let ply = fs::read_to_string(w.path("r1/cloud.ply")).unwrap();
    let returns = meta["returns"].as_u64().unwrap() as usize;
    assert!(ply.contains(&format!("element vertex {returns}\n")));
    assert_eq!(fs::metadata(w.path("r1/cloud.bin")).unwrap().len() as usize, 16 * returns);

    // A time past the sequence warns and sets the flag; no mask keeps every pixel with depth.
    let pose = "1 0 0 2 0 1 0 0 0 0 1 1.8 ";
    let mut args = vec!["render", "--checkpoint", "run/checkpoint.lfc", "--time", "3.0", "--no-raydrop-mask", "--out", "r2", "--pose"];
    args.extend(pose.split_whitespace());
    let out = w.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("extrapolated"));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.path("r2/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["extrapolated_time"], true);
    assert_eq!(meta["in_distribution"], false);
    assert_eq!(meta["raydrop_mask"], false);

    // Eval writes a complete report and leaves the checkpoint untouched.
    let before = fs::read(w.path("run/checkpoint.lfc")).unwrap();
    let out = w.run(&["eval", "--checkpoint", "run/checkpoint.lfc", "--out", "ev"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(w.path("run/checkpoint.lfc")).unwrap(), before);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.path("ev/metrics.json")).unwrap()).unwrap();
    for k in lidarfield::metrics::REPORT_KEYS.iter().chain(&["miou"]) {
        assert!(report.get(*k).is_some(), "{k}");
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let again = w.run(&["eval", "--checkpoint", "run/checkpoint.lfc", "--out", "ev2", "--threads", "1"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout), text);
}

#[test]
fn ground_truth_scores_perfectly() {
    let w = Work::new();
    w.synth();
    let out = w.run(&["eval", "--ground-truth", "--out", "gt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.path("gt/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["depth_rmse"], 0.0);
    assert_eq!(report["cd"], 0.0);
    assert_eq!(report["pa"], 1.0);
    assert_eq!(report["miou"], 1.0);
    assert_eq!(report["raydrop_acc"], 1.0);
}

#[test]
fn missing_inputs_fail_cleanly() {
    let w = Work::new();
    w.synth();
    let out = w.run(&["eval", "--checkpoint", "nope.lfc"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope.lfc"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_lidarfield"))
        .args(["train", "--config"])
        .arg(w.path("run.toml"))
        .arg("--data")
        .arg(w.path("absent"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("absent/poses.txt: No such file"), "{}", stderr(&out));
    assert_eq!(stderr(&out).matches("No such file").count(), 1);

    let out = w.run(&["render", "--checkpoint", "nope.lfc", "--frame", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn non_finite_loss_exits_with_numeric_code() {
    let w = Work::new();
    w.synth();
    fs::write(w.path("run.toml"), TINY.replace("iterations = 3", "iterations = 3\nlr_fields = 1e300\nlr_mlp = 1e300")).unwrap();
    let out = w.run(&["train", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}

#[test]
fn config_reference_round_trips() {
    let w = Work::new();
    let out = w.run(&["config-reference"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = lidarfield::config::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(parsed, lidarfield::config::RunConfig::default());
}
