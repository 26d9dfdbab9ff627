// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a test
[train]
steps = 4
batch_size = 2
log_window = 2
early_stop = false
wall_clock = false
checkpoint_every = 2

[loss]
lambda = 10

[experiment]
eval_pairs = 2
retrieval = 4
pca_samples = 50
pca_components = 3
edit_codes = 2

[inversion]
steps = 10
pivotal_steps = 3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentswap"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Env { dir, config }
}

impl Env {
    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `args` with the tiny config and `--out <name>`.
    fn cmd(&self, name: &str, args: &[&str]) -> Output {
        let out = self.out(name);
        let mut all = vec!["--config", s(&self.config), "--out", s(&out)];
        all.extend_from_slice(args);
        run(&all)
    }
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let e = env();
    let bad = e.out("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let o = run(&["train", "--config", s(&bad), "--out", s(&e.out("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"));
    assert_eq!(e.cmd("x", &["train", "--set", "train.batch_size=0"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(e.cmd("x", &["train", "--set", "novalue"]).status.code(), Some(2));
}

#[test]
fn train_writes_run_and_records_overrides() {
    let e = env();
    let o = e.cmd("run", &["train", "--lambda", "100"]);
    ok(&o);
    let dir = e.out("run");
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,id_loss,lp_loss,shape_loss,total,wall_ms");
    assert_eq!(metrics.lines().count(), 5);
    for f in ["mixer.lsmix", "step_000002.lsmix", "step_000004.lsmix", "windowed.csv", "loss_id.dat", "loss_lp.dat"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("override: loss.lambda=100.0 (--lambda)"), "{manifest}");
    assert!(manifest.contains("lambda = 100.0"));
    assert!(manifest.contains("#| lambda = 10"), "source config echoed verbatim");
    assert!(manifest.contains("world checksum: "));
}

#[test]
fn rerunning_from_the_manifest_is_bitwise_identical() {
    let e = env();
    ok(&e.cmd("a", &["train", "--lambda", "100", "--seed", "3"]));
    let manifest = e.out("a").join("manifest.txt");
    ok(&run(&["train", "--config", s(&manifest), "--out", s(&e.out("b"))]));
    for f in ["metrics.csv", "windowed.csv", "mixer.lsmix", "step_000002.lsmix", "loss_lp.dat"] {
        assert_eq!(fs::read(e.out("a").join(f)).unwrap(), fs::read(e.out("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn diffusion_requires_a_zero_lambda_run() {
    let e = env();
    ok(&e.cmd("pos", &["train"]));
    let o = e.cmd("d1", &["diffusion", "--run", s(&e.out("pos"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diffusion fit requires a lambda=0 run"), "{}", stderr(&o));
    assert_eq!(e.cmd("d2", &["diffusion"]).status.code(), Some(2));

    ok(&e.cmd("zero", &["train", "--lambda", "0", "--steps", "20"]));
    let o = e.cmd("d3", &["diffusion", "--run", s(&e.out("zero"))]);
    ok(&o);
    let csv = fs::read_to_string(e.out("d3").join("diffusion.csv")).unwrap();
    assert!(csv.starts_with("fit,step_lo,step_hi,exponent"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("nu = "));
}

#[test]
fn sweep_is_independent_of_jobs() {
    let e = env();
    ok(&e.cmd("s1", &["sweep", "--lambdas", "0,1"]));
    ok(&e.cmd("s2", &["sweep", "--lambdas", "0,1", "--jobs", "2"]));
    let a = fs::read_to_string(e.out("s1").join("sweep.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(e.out("s2").join("sweep.csv")).unwrap());
    assert_eq!(a.lines().count(), 3);
    assert!(e.out("s1").join("sweep_lambda_1e0_lp.dat").exists());
}

#[test]
fn spaces_layerwise_and_pca_write_stable_names() {
    let e = env();
    ok(&e.cmd("sp", &["spaces"]));
    let spaces = fs::read_to_string(e.out("sp").join("spaces.csv")).unwrap();
    assert_eq!(spaces.lines().count(), 4);
    assert!(spaces.contains("\nZ,") && spaces.contains("\nW,") && spaces.contains("\nW+,"));

    ok(&e.cmd("lw", &["layerwise"]));
    let lw = fs::read_to_string(e.out("lw").join("layerwise.csv")).unwrap();
    assert!(lw.contains("\nmiddle,4 5 6 7,") && lw.contains("\nfine2,12 13 14 15 16 17,"), "{lw}");
    ok(&e.cmd("lw2", &["layerwise", "--mixer", s(&e.out("lw").join("mixer_run/mixer.lsmix"))]));
    // The saved mixer is f32, so the reloaded study matches to rounding.
    let lw2 = fs::read_to_string(e.out("lw2").join("layerwise.csv")).unwrap();
    for (a, b) in lw.lines().zip(lw2.lines()) {
        for (x, y) in a.split(',').zip(b.split(',')) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{x} vs {y}"),
                _ => assert_eq!(x, y),
            }
        }
    }

    ok(&e.cmd("pca", &["pca"]));
    assert!(e.out("pca").join("pca.bin").exists());
    assert_eq!(fs::read_to_string(e.out("pca").join("edits.csv")).unwrap().lines().count(), 4);
}

#[test]
fn generate_swap_and_invert() {
    let e = env();
    ok(&e.cmd("img", &["generate", "--count", "2"]));
    ok(&e.cmd("run", &["train"]));
    let (a, b) = (e.out("img").join("image_0.lsimg"), e.out("img").join("image_1.lsimg"));
    assert!(e.out("img").join("image_0.ppm").exists() && e.out("img").join("latent_1.csv").exists());
    let before = (fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let o = e.cmd(
        "swap",
        &["swap", "--mixer", s(&e.out("run").join("mixer.lsmix")), "--source", s(&a), "--target", s(&b)],
    );
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("id_similarity="));
    for f in ["swap.lsimg", "swap.ppm", "swap.csv", "manifest.txt"] {
        assert!(e.out("swap").join(f).exists(), "{f}");
    }
    assert_eq!((fs::read(&a).unwrap(), fs::read(&b).unwrap()), before, "inputs untouched");

    ok(&e.cmd("inv", &["invert", "--image", s(&a)]));
    let csv = fs::read_to_string(e.out("inv").join("invert.csv")).unwrap();
    assert!(csv.starts_with("inversion_mse,converged"));
    assert_eq!(fs::read_to_string(e.out("inv").join("inverted_w.csv")).unwrap().split(',').count(), 64);

    let bad = e.out("img").join("latent_0.csv");
    assert_eq!(e.cmd("inv2", &["invert", "--image", s(&bad)]).status.code(), Some(4));
}

#[test]
fn world_prints_its_checksum() {
    let e = env();
    let o = e.cmd("w", &["world"]);
    ok(&o);
    let sum = String::from_utf8_lossy(&o.stdout).trim().to_string();
    assert_eq!(sum.len(), 64);
    let manifest = fs::read_to_string(e.out("w").join("manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("world checksum: {sum}")));
    assert!(e.out("w").join("world.lsw").exists());
}
