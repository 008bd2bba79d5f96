use std::fs;
use std::path::Path;

use gencurve::harness::cli::{EXIT_CONFIG, EXIT_OK};
use gencurve::harness::run_cli;

fn run(cfg: &Path, cmd: &str, sets: &[&str]) -> i32 {
    let mut argv = vec![
        "gencurve".to_string(),
        cmd.to_string(),
        "--config".to_string(),
        cfg.display().to_string(),
    ];
    for s in sets {
        argv.push("--set".into());
        argv.push(s.to_string());
    }
    run_cli(argv)
}

fn write_cfg(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "mode = point2d\nlearning_rate = 0.1\n");
    assert_eq!(run(&cfg, "dataset", &[]), EXIT_CONFIG);
    let cfg = write_cfg(dir.path(), "mode = point2d\n");
    assert_eq!(run(&cfg, "dataset", &["bogus=1"]), EXIT_CONFIG);
    assert_eq!(run(&cfg, "no-such-command", &[]), EXIT_CONFIG);
}

#[test]
fn point_pipeline_writes_curves_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "mode = point2d\ndataset = two_moons\nn_samples = 64\ntrain_steps = 30\nbatch = 16\n\
         output_dir = out\ncheckpoint_path = out/checkpoint.gckp\n",
    );
    assert_eq!(run(&cfg, "train", &[]), EXIT_OK);
    assert!(dir.path().join("out/train_loss.csv").exists());
    assert_eq!(run(&cfg, "curve", &["reference_pixel=1"]), EXIT_OK);
    let first = fs::read_to_string(dir.path().join("out/curve_dh_raw.csv")).unwrap();
    assert!(first.starts_with("step,t,value\n"));
    assert_eq!(first.lines().count(), 51);
    for m in ["dfinv_proj", "hessian_proj", "dh_proj"] {
        assert!(dir.path().join(format!("out/curve_{m}.csv")).exists(), "{m}");
    }
    assert_eq!(run(&cfg, "curve", &["reference_pixel=1"]), EXIT_OK);
    let again = fs::read_to_string(dir.path().join("out/curve_dh_raw.csv")).unwrap();
    assert_eq!(first, again);
    assert_eq!(run(&cfg, "curve", &[]), EXIT_CONFIG);
}

#[test]
fn image_match_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "mode = image16\nn_images = 8\ntrain_steps = 3\nbatch = 4\noutput_dir = out\n\
         checkpoint_path = out/checkpoint.gckp\n",
    );
    assert_eq!(run(&cfg, "train", &[]), EXIT_OK);
    assert_eq!(run(&cfg, "match", &["N=4", "reference_pixel=0,0", "m=2", "blend_every=3"]), EXIT_OK);
    let out = dir.path().join("out");
    for f in [
        "reference.csv",
        "result.pgm",
        "result.gct",
        "loss.csv",
        "curve_before.csv",
        "curve_after.csv",
        "blend_events.csv",
        "distance.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iter,loss,t_k,pixel\n"));
    assert_eq!(loss.lines().count(), 5);
    let blends = fs::read_to_string(out.join("blend_events.csv")).unwrap();
    assert_eq!(blends, "iter\n2\n");
}
