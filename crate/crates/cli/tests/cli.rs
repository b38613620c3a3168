use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtnet::data::load_busi_dir;

const TINY_CONFIG: &str = "\
net.base_width = 2
net.depth = 1
net.input_size = 32
train.epochs = 2
train.batch_size = 8
train.lr = 1e-3
";

fn mtnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtnet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = mtnet(&["generate", "--out", p(&data), "--n", "24", "--size", "32", "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::write(dir.path().join("tiny.cfg"), TINY_CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str) -> Output {
        mtnet(&[
            "train",
            "--data",
            p(&self.path("data")),
            "--config",
            p(&self.path("tiny.cfg")),
            "--out",
            p(&self.path(out)),
        ])
    }
}

#[test]
fn generate_is_deterministic_and_reloads_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&mtnet(&["generate", "--out", p(d), "--n", "30", "--seed", "1"])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
    let report = load_busi_dir(&a, 64).unwrap();
    assert_eq!(report.samples.len(), 30);
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
}

#[test]
fn generate_validates_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtnet(&["generate", "--out", p(&dir.path().join("x")), "--n", "2"]);
    assert_eq!(code(&out), 2);
    std::fs::write(dir.path().join("occupied.txt"), "x").unwrap();
    let out = mtnet(&["generate", "--out", p(dir.path()), "--n", "6", "--size", "32"]);
    assert_eq!(code(&out), 2);
    let out = mtnet(&["generate", "--out", p(dir.path()), "--n", "6", "--size", "32", "--force"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn usage_and_input_errors_use_distinct_codes() {
    let fx = Fixture::new();
    let missing_data = mtnet(&["train", "--out", p(&fx.path("o"))]);
    assert_eq!(code(&missing_data), 2);

    let absent = mtnet(&["train", "--data", p(&fx.path("nowhere")), "--out", p(&fx.path("o"))]);
    assert_eq!(code(&absent), 3);

    std::fs::write(fx.path("bad.cfg"), "net.depth = 3\nnet.colour = blue\n").unwrap();
    let bad =
        mtnet(&["train", "--data", p(&fx.path("data")), "--config", p(&fx.path("bad.cfg")), "--out", p(&fx.path("o"))]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("net.colour"));

    std::fs::write(fx.path("explode.cfg"), format!("{TINY_CONFIG}train.lr = 1e300\n").replace("train.lr = 1e-3\n", ""))
        .unwrap();
    let diverged = mtnet(&[
        "train",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("explode.cfg")),
        "--out",
        p(&fx.path("boom")),
    ]);
    assert_eq!(code(&diverged), 4, "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn train_eval_predict_replay() {
    let fx = Fixture::new();
    let first = fx.train("run1");
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&fx.train("run2")), 0);
    let history = std::fs::read_to_string(fx.path("run1/history.csv")).unwrap();
    assert_eq!(history, std::fs::read_to_string(fx.path("run2/history.csv")).unwrap());
    assert_eq!(history.lines().count(), 3);

    // Evaluating the last checkpoint reproduces the last history row.
    let ckpt = fx.path("run1/checkpoint_last.bin");
    let eval = |out: &str| {
        mtnet(&[
            "eval",
            "--data",
            p(&fx.path("data")),
            "--checkpoint",
            p(&ckpt),
            "--out",
            p(&fx.path(out)),
            "--config",
            p(&fx.path("tiny.cfg")),
        ])
    };
    assert_eq!(code(&eval("e1")), 0);
    assert_eq!(code(&eval("e2")), 0);
    let metrics = std::fs::read_to_string(fx.path("e1/metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read_to_string(fx.path("e2/metrics.csv")).unwrap());
    let eval_fields: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').take(7).collect();
    let last_fields: Vec<&str> = history.lines().last().unwrap().split(',').skip(4).collect();
    assert_eq!(eval_fields, last_fields);

    // A mismatched network config is refused.
    std::fs::write(fx.path("other.cfg"), TINY_CONFIG.replace("base_width = 2", "base_width = 4")).unwrap();
    let mismatch = mtnet(&[
        "eval",
        "--data",
        p(&fx.path("data")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&fx.path("e3")),
        "--config",
        p(&fx.path("other.cfg")),
    ]);
    assert_eq!(code(&mismatch), 2);

    // Truncated checkpoints are reported as corrupt input.
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(fx.path("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let cut = mtnet(&[
        "eval",
        "--data",
        p(&fx.path("data")),
        "--checkpoint",
        p(&fx.path("cut.bin")),
        "--out",
        p(&fx.path("e4")),
    ]);
    assert_eq!(code(&cut), 3);

    // Prediction writes a binary mask and a probability line.
    let image = std::fs::read_dir(fx.path("data/benign"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|path| !path.to_string_lossy().contains("_mask"))
        .unwrap();
    let pred = mtnet(&["predict", "--image", p(&image), "--checkpoint", p(&ckpt), "--out", p(&fx.path("pred"))]);
    assert_eq!(code(&pred), 0);
    let line = stdout(&pred);
    let probs: Vec<f64> = line.trim().split("probs=").nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(line.starts_with("label="));
    let mask = image::open(fx.path("pred/mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    std::fs::write(fx.path("junk.png"), b"not an image").unwrap();
    let junk = mtnet(&[
        "predict",
        "--image",
        p(&fx.path("junk.png")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&fx.path("pred2")),
    ]);
    assert_eq!(code(&junk), 3);

    // Replaying the manifest reproduces the history byte for byte.
    let replay = mtnet(&["replay", "--manifest", p(&fx.path("run1/manifest.json")), "--out", p(&fx.path("replayed"))]);
    assert_eq!(code(&replay), 0, "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(history, std::fs::read_to_string(fx.path("replayed/history.csv")).unwrap());
}

#[test]
fn gridsearch_runs_one_cell_per_lambda() {
    let fx = Fixture::new();
    let out = mtnet(&[
        "gridsearch",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("tiny.cfg")),
        "--out",
        p(&fx.path("grid")),
        "--lambdas",
        "0.7,0.3",
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(fx.path("grid/grid.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.3,") && rows[1].starts_with("0.7,"));
    assert!(fx.path("grid/lambda_0.3/history.csv").exists());
    let text = stdout(&out);
    assert!(text.contains("best lambda="));
    assert_eq!(text.lines().filter(|l| l.starts_with("0.")).count(), 2);

    // The single-lambda grid equals a direct training run at that lambda.
    let single = mtnet(&[
        "gridsearch",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("tiny.cfg")),
        "--out",
        p(&fx.path("g1")),
        "--lambdas",
        "0.5",
    ]);
    assert_eq!(code(&single), 0);
    let direct = mtnet(&[
        "train",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("tiny.cfg")),
        "--out",
        p(&fx.path("t05")),
        "--lambda",
        "0.5",
    ]);
    assert_eq!(code(&direct), 0);
    assert_eq!(
        std::fs::read_to_string(fx.path("g1/lambda_0.5/history.csv")).unwrap(),
        std::fs::read_to_string(fx.path("t05/history.csv")).unwrap()
    );
}
