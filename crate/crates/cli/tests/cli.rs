use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "geometry": {
            "n_views": 16,
            "orbit": { "kind": "circular", "radius_mm": 200.0 },
            "det_nu": 16,
            "det_nv": 8,
            "det_pixel_mm": 16.0
        },
        "phantom": {
            "semi_axes_mm": [110.0, 90.0, 50.0],
            "spheres": [{ "name": "hot", "center_mm": [30.0, 0.0, 0.0], "volume_ml": 30.0, "conc": 0.22 }]
        },
        "dfs": [4],
        "count_target": 2e5,
        "train": { "hidden": [8, 8], "epochs": 2, "batch": 512 },
        "recon": { "n_iterations": 2, "n_subsets": 2 },
        "seed": 3
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn spectfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectfield")).args(args).output().unwrap()
}

fn hashes(out: &Path) -> Value {
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    m["artifacts"].clone()
}

#[test]
fn stages_one_by_one_match_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let all = dir.path().join("all");
    let staged = dir.path().join("staged");

    let o = spectfield(&["pipeline", "--config", &cfg, "--out", all.to_str().unwrap(), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("projections nrmsd"));

    for stage in ["phantom", "simulate", "train", "synthesize", "interp", "recon", "evaluate"] {
        let o = spectfield(&[stage, "--config", &cfg, "--out", staged.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(hashes(&all), hashes(&staged));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let o = spectfield(&["config", "--config", &cfg, "--seed", "11", "--df", "2,4"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["dfs"], json!([2, 4]));
}

#[test]
fn single_regime_recon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for stage in ["phantom", "simulate"] {
        assert!(spectfield(&[stage, "--config", &cfg, "--out", out]).status.success());
    }
    let o = spectfield(&["recon", "--config", &cfg, "--out", out, "--regime", "partial"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h = hashes(Path::new(out));
    assert!(h.get("df4/recon_partial.spj").is_some());
    assert!(h.get("recon_full.spj").is_none());
    // nerf needs a synthesized stack that does not exist yet
    let o = spectfield(&["recon", "--config", &cfg, "--out", out, "--regime", "field"]);
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(spectfield(&["phantom", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(3));

    let cfg = write_config(dir.path(), &tiny_config());
    assert_eq!(spectfield(&["pipeline", "--config", &cfg, "--df", "16", "--out", out]).status.code(), Some(3));
    assert_eq!(spectfield(&["pipeline", "--config", &cfg, "--df", "0", "--out", out]).status.code(), Some(3));
    assert_eq!(spectfield(&["recon", "--config", &cfg, "--regime", "bogus", "--out", out]).status.code(), Some(2));

    // corrupt a container
    assert!(spectfield(&["phantom", "--config", &cfg, "--out", out]).status.success());
    let act = Path::new(out).join("phantom/activity.spj");
    let bytes = fs::read(&act).unwrap();
    fs::write(&act, &bytes[..bytes.len() - 4]).unwrap();
    let o = spectfield(&["simulate", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate"));

    // a step size that overflows the network
    let mut v = tiny_config();
    v["train"]["lr"] = json!(1e30);
    let cfg = write_config(dir.path(), &v);
    let o = spectfield(&["pipeline", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
}
