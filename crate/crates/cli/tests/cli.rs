use std::path::Path;
use std::process::{Command, Output};

use softcon::checkpoint::Checkpoint;
use softcon::trainkit::TrainState;

const TINY: &str = "\
# small enough for a test run
data.num_scenes = 40
data.size = 16
encoder.image_size = 16
encoder.patch_size = 4
encoder.d_model = 16
encoder.heads = 2
encoder.blocks = 1
encoder.mlp_hidden = 32
projector.hidden = 16
projector.dim = 8
train.batch_size = 8
train.epochs = 1
train.warmup_epochs = 0
probe.epochs = 3
";

fn softcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softcon")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes_on_defaults() {
    let o = softcon(&["gradcheck", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for name in ["info_nce", "supcon", "softcon", "combined"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(err <= 1e-6, "{line}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&softcon(&["frobnicate"])), 1);
    assert_eq!(code(&softcon(&["pretrain", "--bogus"])), 1);
    assert_eq!(code(&softcon(&[])), 1);
    assert_eq!(code(&softcon(&["--help"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("c.bin");
    let out = out.to_str().unwrap();
    for bad in [
        vec!["--temperature", "0"],
        vec!["--lambda", "-1"],
        vec!["--mask-ratio", "1"],
        vec!["--set", "train.momentum=1"],
        vec!["--set", "no.such.key=3"],
        vec!["--variant", "nope"],
    ] {
        let mut args = vec!["pretrain", "--config", &cfg, "--out", out];
        args.extend(bad.iter().copied());
        let o = softcon(&args);
        assert_eq!(code(&o), 1, "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn io_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = softcon(&["stats", "--data", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bin"));
    let o = softcon(&["pretrain", "--config", "/nonexistent/x.cfg", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn paper_default_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("c.bin");
    let o = softcon(&[
        "pretrain", "--config", &cfg, "--out", ckpt.to_str().unwrap(),
        "--lambda", "0.1", "--temperature", "0.2", "--mask-ratio", "0.2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.metadata["train.lambda"], "0.1");
    assert_eq!(c.metadata["train.temperature"], "0.2");
    assert_eq!(c.metadata["train.mask_ratio"], "0.2");
}

#[test]
fn zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("c.bin");
    let o = softcon(&["pretrain", "--config", &cfg, "--out", ckpt.to_str().unwrap(), "--epochs", "0", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = Checkpoint::load(&ckpt).unwrap();
    let mut run = softcon::config::RunConfig::parse(TINY).unwrap();
    run.train.epochs = 0;
    run.train.seed = 5;
    let init = TrainState::new(&run.train, None).unwrap();
    let f32_round = |p: &softcon::encoder::ParamSet| {
        let mut p = p.clone();
        p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64));
        p
    };
    assert_eq!(c.params(), f32_round(&init.pair.base));
    assert_eq!(c.metadata["step"], "0");
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let o = softcon(&["synth", "--config", &cfg, "--out", &p("d.bin")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&p("d.bin.manifest.csv")).exists());
    assert!(Path::new(&p("d.bin.config")).exists());

    let o = softcon(&["stats", "--data", &p("d.bin")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("scenes 40"));

    for run in ["a", "b"] {
        let o = softcon(&[
            "pretrain", "--config", &cfg, "--data", &p("d.bin"),
            "--out", &p(&format!("{run}.ckpt")), "--metrics", &p(&format!("{run}.csv")),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| std::fs::read(p(n)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.csv.config"), read("b.csv.config"));

    let o = softcon(&["probe", "--config", &cfg, "--data", &p("d.bin"), "--checkpoint", &p("a.ckpt"), "--out", &p("probe.csv")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let micro: f64 = stdout(&o).lines().next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&micro));

    let o = softcon(&[
        "pretrain", "--config", &cfg, "--data", &p("d.bin"), "--out", &p("cont.ckpt"),
        "--init-from", &p("a.ckpt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = softcon(&[
        "ablate", "--config", &cfg, "--data", &p("d.bin"), "--out", &p("abl.csv"),
        "--variants", "contrast-only", "--seeds", "0", "--inits", "scratch,continual", "--source", &p("a.ckpt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read("abl.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,lambda,mask_ratio,init,seed,micro_map,macro_map");
    assert!(lines[1].starts_with("contrast-only,0.1,0.2,scratch,0,"));
    assert!(lines[2].starts_with("contrast-only,0.1,0.2,continual,0,"));
    assert_eq!(lines.len(), 7);
}
