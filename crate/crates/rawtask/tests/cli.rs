use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rawtask::checkpoint;
use rawtask::core::optim::AdamWConfig;
use rawtask::report::read_metrics;

fn rawtask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawtask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        format!(
            r#"
out = "{}"

[data]
size = 32

[psf]
pupil_samples = 32
kernel_size = 7

[network]
base_width = 4
depth = 2

[training]
epochs = 2
warmup_epochs = 1
batch_size = 2
"#,
            dir.join("run").display()
        ),
    )
    .unwrap();
    fs::write(
        dir.join("lens.json"),
        r#"{"focal_length_mm": 4, "f_number": 2, "fov_deg": 68,
            "zernike": {"grid": [1, 1], "noll_max": 6, "coeffs_waves": [[0, 0, 0, 0.5, 0, 0]]}}"#,
    )
    .unwrap();
    let mut text = fs::read_to_string(&path).unwrap();
    text.insert_str(0, "lens = \"lens.json\"\n");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn genscenes_train_eval_render() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scenes");
    let out = rawtask(&["genscenes", "--n", "4", "--seed", "1", "--size", "32", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 4);

    let cfg = tiny_config(tmp.path());
    let out = rawtask(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--val", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    let log = read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(log.len(), 2);
    for f in ["config.toml", "report.csv", "report.png"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = checkpoint::load(&run.join("checkpoints/epoch_002"), AdamWConfig::default()).unwrap();
    assert!(ck.params.contains("optics.zernike"));
    assert_eq!(ck.step, 4);

    let resolved = run.join("config.toml");
    let ck_dir = run.join("checkpoints/epoch_002");
    let eval_out = tmp.path().join("eval");
    let out = rawtask(&[
        "eval",
        "--config",
        resolved.to_str().unwrap(),
        "--checkpoint",
        ck_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--bits",
        "4",
        "--kind",
        "blur",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
    assert!(eval_out.join("report.csv").exists());

    let out = rawtask(&[
        "render",
        "--config",
        &cfg,
        "--image",
        "synthetic:2",
        "--checkpoint",
        ck_dir.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let renders: Vec<String> = fs::read_dir(tmp.path().join("r/renders"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(renders.iter().any(|n| n.ends_with("_prediction.png")), "{renders:?}");
    assert!(renders.len() >= 8, "{renders:?}");
}

#[test]
fn corrupt_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("noisy");
    let out = rawtask(&[
        "corrupt",
        "--data",
        "synthetic:3",
        "--size",
        "32",
        "--classes",
        "5",
        "--kind",
        "noise",
        "--sigma-s",
        "0.05",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(out_dir.join("labels")).unwrap().count(), 3);
}

#[test]
fn gradcheck_subset_passes() {
    let out = rawtask(&["gradcheck", "--stage", "quantize", "--stage", "loss.lovasz", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[training]\nepochz = 3\n").unwrap();
    let out = rawtask(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("training.epochz"));

    assert_eq!(code(&rawtask(&["train"])), 2);
    assert_eq!(code(&rawtask(&["gradcheck", "--stage", "nope"])), 2);

    let cfg = tiny_config(tmp.path());
    let out = rawtask(&["eval", "--config", &cfg, "--checkpoint", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let out = rawtask(&["train", "--config", &cfg, "--set", "training.lr=1e300", "--data", "synthetic:2", "--val", ""]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
