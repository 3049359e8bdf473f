use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csi_jscc::checkpoint::load_autoencoder;

const TINY: &str = r#"
[run]
seed = 3
tag = "tiny"

[data]
preset = "simple"
n_delay = 8
n_tx = 8
n_subcarriers = 16
n_samples = 120
n_train = 100

[ae]
latent_k_max = 8

[ae.encoder]
preset = "two_layer"

[ae.decoder]
input_kernel = [3, 3]
n_res_blocks = 1
block = [{ channels = 4, kernel = [3, 3] }, { channels = 2, kernel = [3, 3] }]

[ae.mrl]
enabled = true
rates = [2, 4, 8]
weights = [1.0, 1.0, 1.0]

[ae.optimizer]
iterations = 20
batch_size = 8

[diff]
N = 10
base_channels = 4
mults = [1, 2]
time_dim = 8

[diff.optimizer]
iterations = 10
batch_size = 8

[eval]
snr_db = [0.0, 10.0]
k = [2, 4, 8]
n_steps = [0, 2]
n_test = 10

[bench]
batch_size = 8
n_repeats = 2
steps = [2, 10]
"#;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("runs");
        let text = TINY.replace("[run]\n", &format!("[run]\nout_dir = {:?}\n", out.display().to_string()));
        let config = dir.path().join("tiny.toml");
        fs::write(&config, text).unwrap();
        Self {
            _dir: dir,
            config,
            out,
        }
    }

    fn run_dir(&self) -> PathBuf {
        self.out.join("tiny")
    }

    fn cli(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_csi-jscc"));
        cmd.arg(args[0]).arg("--config").arg(&self.config).args(&args[1..]);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cli(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rows of a CSV file as header-keyed maps.
fn rows(path: &Path) -> Vec<Vec<(String, String)>> {
    let text = read(path);
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn field<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn generate_data_is_reproducible() {
    let run = Run::new();
    run.ok(&["generate-data"]);
    let data = run.run_dir().join("data.bin");
    let first = fs::read(&data).unwrap();
    run.ok(&["generate-data"]);
    assert_eq!(fs::read(&data).unwrap(), first);
    assert!(run.run_dir().join("generate-data.config.toml").exists());

    run.ok(&["generate-data", "--set", "data.preset=complex"]);
    let meta = read(&run.run_dir().join("data.meta.csv"));
    assert!(meta.contains("complex"), "{meta}");
}

#[test]
fn config_errors_exit_with_2() {
    let run = Run::new();
    let out = run.cli(&["generate-data", "--set", "ae.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run.cli(&["generate-data", "--set", "data.n_train=500"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_inputs_exit_with_3() {
    let run = Run::new();
    let out = run.cli(&["train-ae"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    run.ok(&["generate-data"]);
    let out = run.cli(&["train-diffusion"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.run_dir().join("diffusion.ckpt").exists());
}

#[test]
fn resume_continues_the_iteration_counter() {
    let run = Run::new();
    run.ok(&["generate-data"]);
    run.ok(&["train-ae", "--checkpoint-every", "5"]);
    let ckpt = run.run_dir().join("ae.ckpt");
    assert_eq!(load_autoencoder::<f32>(&ckpt).unwrap().iteration, 20);
    run.ok(&["train-ae", "--resume", "--set", "ae.optimizer.iterations=30"]);
    assert_eq!(load_autoencoder::<f32>(&ckpt).unwrap().iteration, 30);
    let log = rows(&run.run_dir().join("ae_log.csv"));
    let its: Vec<usize> = log.iter().map(|r| field(r, "iteration").parse().unwrap()).collect();
    assert_eq!(its, (0..30).collect::<Vec<_>>());
}

#[test]
fn eval_and_bench_outputs() {
    let run = Run::new();
    run.ok(&["generate-data"]);
    run.ok(&["train-ae"]);
    run.ok(&["eval", "--stage1-only"]);
    let metrics = run.run_dir().join("eval").join("metrics.csv");
    let table = rows(&metrics);
    // Rate list {2, 4, 8} gives three rows per SNR.
    assert_eq!(table.len(), 6);
    for snr in ["0", "10"] {
        assert_eq!(table.iter().filter(|r| field(r, "snr_db") == snr).count(), 3);
    }
    assert!(table.iter().all(|r| field(r, "n_steps") == "0" && field(r, "mode") == "ae"));
    let first = read(&metrics);
    run.ok(&["eval", "--stage1-only"]);
    assert_eq!(read(&metrics), first);

    run.ok(&["train-diffusion"]);
    run.ok(&["eval"]);
    let table = rows(&metrics);
    assert_eq!(table.len(), 12);
    assert!(table.iter().any(|r| field(r, "n_steps") == "2" && field(r, "mode") == "rd"));
    for f in ["nmse-vs-snr.csv", "nmse-vs-k.csv", "nmse-vs-bits.csv", "bler-vs-snr.csv"] {
        assert!(run.run_dir().join("eval").join(f).exists(), "{f}");
    }

    run.ok(&["bench"]);
    let bench = rows(&run.run_dir().join("bench.csv"));
    let stages: Vec<&str> = bench.iter().map(|r| field(r, "stage")).collect();
    assert_eq!(stages, ["encoder", "decoder", "diffusion-2", "diffusion-10"]);
    assert!(bench.iter().all(|r| field(r, "ratio").parse::<f64>().unwrap() >= 1.0 - 1e-9));
}
