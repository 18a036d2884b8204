use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tinr_cli::commands::build_data;
use tinr_cli::{Checkpoint, Config};
use tinr_core::analysis::eval_image_regression;
use tinr_core::data::Split;

const MICRO: &str = r#"
task = "image"
inr_depth = 3
inr_width = 8
coord_bands = 2
groups = 4
dim = 16
encoder_layers = 2
heads = 2
ffn_dim = 32
patch = 4
dataset = "blobs"
resolution = 8
n_train = 8
n_val = 2
n_test = 3
lr = 1e-3
batch_size = 4
max_steps = 40
log_every = 10
checkpoint_every = 20
"#;

fn tinr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinr"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let out = dir.join(name);
    let path = dir.join(format!("{name}.toml"));
    let text = format!("{MICRO}{extra}\nout_dir = {:?}\n", out.display().to_string());
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn losses(log: &Path) -> Vec<(usize, String)> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().to_string())
        })
        .collect()
}

#[test]
fn micro_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "");
    let o = tinr(&["train", cfg.to_str().unwrap()]);
    ok(&o);
    let run = dir.path().join("run");
    for f in ["checkpoint.bin", "checkpoint_step20.bin", "train_log.csv", "eval_test.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,val_psnr");
    assert_eq!(lines.len(), 41);
    assert!(lines[10].starts_with("10,") && !lines[10].ends_with(','));
    assert!(lines[11].ends_with(','));
    assert!(String::from_utf8_lossy(&o.stdout).contains("test PSNR"));
}

#[test]
fn identical_runs_are_bit_identical_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    // the output directory is part of the config, so both runs share it
    let a = write_config(dir.path(), "a", "");
    ok(&tinr(&["train", a.to_str().unwrap()]));
    let (ra, rb) = (dir.path().join("a"), dir.path().join("first"));
    std::fs::rename(&ra, &rb).unwrap();
    ok(&tinr(&["train", a.to_str().unwrap()]));
    for f in ["train_log.csv", "checkpoint.bin", "checkpoint_step20.bin"] {
        assert_eq!(std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap(), "{f} differs");
    }

    let rc = dir.path().join("c");
    ok(&tinr(&[
        "train",
        "--resume",
        ra.join("checkpoint_step20.bin").to_str().unwrap(),
        "--out-dir",
        rc.to_str().unwrap(),
    ]));
    let full = losses(&ra.join("train_log.csv"));
    let resumed = losses(&rc.join("train_log.csv"));
    assert_eq!(resumed.first().unwrap().0, 21);
    assert_eq!(&full[20..], &resumed[..]);
    let ca = Checkpoint::load(&ra.join("checkpoint.bin")).unwrap();
    let cc = Checkpoint::load(&rc.join("checkpoint.bin")).unwrap();
    assert_eq!(ca.arrays, cc.arrays);
    assert_eq!(ca.header.step, cc.header.step);
}

#[test]
fn resume_in_place_extends_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "");
    ok(&tinr(&["train", cfg.to_str().unwrap(), "--max-steps", "20"]));
    let run = dir.path().join("run");
    ok(&tinr(&["train", "--resume", run.join("checkpoint.bin").to_str().unwrap(), "--max-steps", "30"]));
    let rows = losses(&run.join("train_log.csv"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=30).collect::<Vec<_>>());
}

#[test]
fn indivisible_groups_exit_2_naming_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, MICRO.replace("groups = 4", "groups = 2")).unwrap();
    let o = tinr(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("groups") && err.contains("layer 2"), "{err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, format!("{MICRO}\nlearning_rate = 3\n")).unwrap();
    let o = tinr(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "").to_str().unwrap().to_string();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 1e-3", "lr = 1e30");
    std::fs::write(&cfg, text).unwrap();
    let o = tinr(&["train", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn infer_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "run", "");
    ok(&tinr(&["train", cfg_path.to_str().unwrap()]));
    let ckpt = dir.path().join("run").join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let cfg = Config::load(&cfg_path).unwrap();
    let tinr_cli::commands::Data::Images(ds) = build_data(&cfg).unwrap() else {
        panic!("image config")
    };
    let input = dir.path().join("input.png");
    ds.split(Split::Test)[0].save_png(&input).unwrap();
    let input = input.to_str().unwrap();

    let out1 = dir.path().join("i1");
    let out2 = dir.path().join("i2");
    ok(&tinr(&["infer", "--checkpoint", ckpt, "--input", input, "--out", out1.to_str().unwrap()]));
    ok(&tinr(&["infer", "--checkpoint", ckpt, "--input", input, "--out", out2.to_str().unwrap()]));
    let png = "recon_input.png";
    assert_eq!(std::fs::read(out1.join(png)).unwrap(), std::fs::read(out2.join(png)).unwrap());

    let tuned = dir.path().join("i3");
    let o = tinr(&[
        "infer", "--checkpoint", ckpt, "--input", input, "--tto-steps", "50", "--out", tuned.to_str().unwrap(),
    ]);
    ok(&o);
    let psnr_of = |d: &Path| -> f64 {
        let csv = std::fs::read_to_string(d.join("infer.csv")).unwrap();
        csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!(psnr_of(&tuned) >= psnr_of(&out1));

    let o = tinr(&["infer", "--checkpoint", ckpt, "--scene", "0", "--out", out1.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let an = dir.path().join("an");
    let an_s = an.to_str().unwrap();
    ok(&tinr(&["analyze", "--checkpoint", ckpt, "--out", an_s, "psnr"]));
    let ml = Checkpoint::load(Path::new(ckpt)).unwrap().learner::<f32>(Path::new(ckpt)).unwrap();
    let expect = eval_image_regression(&ml, &ds.split(Split::Test)).unwrap().to_csv();
    assert_eq!(std::fs::read_to_string(an.join("psnr_report.csv")).unwrap(), expect);

    ok(&tinr(&["analyze", "--checkpoint", ckpt, "--out", an_s, "attn", "--tokens", "0"]));
    let layers = cfg.inr_depth;
    for l in 0..layers {
        assert!(an.join(format!("attn_layer{l}_token0.png")).exists());
    }
    assert!(!an.join("attn_layer0_token1.png").exists());

    ok(&tinr(&["analyze", "--checkpoint", ckpt, "--out", an_s, "ablate", "--groups", "1,4", "--steps", "5"]));
    let csv = std::fs::read_to_string(an.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "groups,psnr");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("4,"));

    let o = tinr(&["analyze", "--checkpoint", dir.path().join("nope.bin").to_str().unwrap(), "psnr"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn view_synthesis_micro_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
task = "view-synthesis"
out_dir = {:?}
inr_depth = 3
inr_width = 8
coord_bands = 2
groups = 4
dim = 16
heads = 2
ffn_dim = 32
patch = 4
dataset = "spheres"
resolution = 8
views = 8
samples = 8
n_train = 2
n_val = 0
n_test = 1
eval_inputs = [0, 4]
eval_novel = [2, 6]
batch_size = 1
pixels_per_step = 16
mode = "generalize"
max_steps = 3
tto_steps = 2
"#,
        dir.path().join("vs").display().to_string()
    );
    let path = dir.path().join("vs.toml");
    std::fs::write(&path, text).unwrap();
    ok(&tinr(&["train", path.to_str().unwrap()]));
    let ckpt = dir.path().join("vs").join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let out = dir.path().join("inf");
    ok(&tinr(&["infer", "--checkpoint", ckpt, "--scene", "2", "--tto-steps", "1", "--out", out.to_str().unwrap()]));
    for f in ["input_view0.png", "input_view4.png", "novel_view2.png", "novel_view6.png", "infer.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = tinr(&["infer", "--checkpoint", ckpt, "--input", "x.png", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = tinr(&["analyze", "--checkpoint", ckpt, "--out", out.to_str().unwrap(), "attn"]);
    assert_eq!(o.status.code(), Some(2));
}
