use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtnet::config::RunConfig;
use mtnet::data::{busi, export_busi_dir, generate_synthetic, load_busi_dir, split, Dataset, DatasetSplit, Label};
use mtnet::metrics::{threshold_logits, MetricsReport};
use mtnet::model::MultiTaskNet;
use mtnet::training::{self, default_lambda_grid, grid_search_lambda, history_csv, TrainConfig};
use mtnet::{Error, Tensor};

use crate::manifest::{
    config_from_map, config_map, dataset_fingerprint, now_unix, read_run_manifest, write_json, DatasetManifest,
    RunManifest, DATASET_MANIFEST, RUN_MANIFEST,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parameter(_) | Error::Contract(_) | Error::Dimension(_) => EXIT_USAGE,
            Error::Label { .. }
            | Error::Data(_)
            | Error::Evaluation(_)
            | Error::Split(_)
            | Error::Ingestion { .. }
            | Error::Checkpoint(_) => EXIT_DATA,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Io { .. } => EXIT_IO,
        };
        let message = match e {
            Error::Config(problems) => format!("invalid configuration: {}", problems.join("; ")),
            other => other.to_string(),
        };
        Self { code, message }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            RunConfig::parse(&text).map_err(|e| {
                let mut err = CliError::from(e);
                err.message = format!("{}: {}", p.display(), err.message);
                err
            })
        }
    }
}

fn load_dataset(root: &Path, size: usize, ratio: f64, split_seed: u64) -> CliResult<(Dataset, DatasetSplit)> {
    if !root.is_dir() {
        return Err(CliError::data(format!("dataset directory {} does not exist", root.display())));
    }
    let report = load_busi_dir(root, size)?;
    if report.samples.is_empty() {
        return Err(CliError::data(format!("no images found under {}", root.display())));
    }
    let sp = split(&report.samples, ratio, split_seed)?;
    Ok((Dataset::new(report.samples)?, sp))
}

pub fn generate(out: &Path, n: usize, size: usize, seed: u64, force: bool) -> CliResult {
    let samples = generate_synthetic(n, size, seed)?;
    if !force && out.is_dir() && out.read_dir().map_err(|e| CliError::io(out, e))?.next().is_some() {
        return Err(CliError::config(format!("{} is not empty; pass --force to write into it", out.display())));
    }
    create_dir(out)?;
    export_busi_dir(&samples, out)?;
    let counts: BTreeMap<String, usize> =
        Label::ALL.iter().map(|l| (l.name().to_string(), samples.iter().filter(|s| s.label == *l).count())).collect();
    let manifest = DatasetManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        n,
        size,
        seed,
        counts: counts.clone(),
    };
    write_json(&out.join(DATASET_MANIFEST), &manifest)?;
    println!(
        "wrote {n} samples to {} (benign={} malignant={} normal={})",
        out.display(),
        counts["benign"],
        counts["malignant"],
        counts["normal"]
    );
    Ok(())
}

fn new_manifest(command: &str, data: &Path, cfg: &RunConfig, lambdas: Option<Vec<f64>>) -> CliResult<RunManifest> {
    Ok(RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        data_dir: std::fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf()),
        dataset_fingerprint: dataset_fingerprint(data)?,
        seed: cfg.train.seed,
        config: config_map(cfg),
        lambdas,
        started_unix: now_unix(),
        finished_unix: None,
    })
}

fn apply_overrides(mut cfg: RunConfig, lambda: Option<f64>, seed: Option<u64>) -> CliResult<RunConfig> {
    if let Some(l) = lambda {
        cfg.train.lambda = l;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(data: &Path, config: Option<&Path>, out: &Path, lambda: Option<f64>, seed: Option<u64>) -> CliResult {
    let cfg = apply_overrides(load_config(config)?, lambda, seed)?;
    run_train(data, &cfg, out)
}

fn run_train(data: &Path, cfg: &RunConfig, out: &Path) -> CliResult {
    let (dataset, sp) = load_dataset(data, cfg.net.input_size, cfg.data.ratio, cfg.split_seed())?;
    create_dir(out)?;
    let mut manifest = new_manifest("train", data, cfg, None)?;
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    write_file(&out.join("config.txt"), cfg.to_text())?;

    let net = MultiTaskNet::init(cfg.net.clone(), cfg.train.seed)?;
    let train_cfg = TrainConfig { checkpoint_dir: Some(out.to_path_buf()), ..cfg.train.clone() };
    log::info!(
        "training on {} samples, testing on {} ({} parameters)",
        sp.train.len(),
        sp.test.len(),
        cfg.net.param_count()
    );
    let outcome = training::train(net, &dataset, &sp, &train_cfg)?;
    write_file(&out.join("history.csv"), history_csv(&outcome.history))?;
    if let Some(report) = outcome.final_report() {
        println!("final {report}");
    }
    if let Some((epoch, report)) = &outcome.best {
        println!("best epoch {epoch}: {report}");
    }
    manifest.finished_unix = Some(now_unix());
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

pub fn gridsearch(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    lambdas: Option<Vec<f64>>,
    seed: Option<u64>,
    jobs: usize,
) -> CliResult {
    let cfg = apply_overrides(load_config(config)?, None, seed)?;
    run_gridsearch(data, &cfg, out, lambdas.unwrap_or_else(default_lambda_grid), jobs)
}

fn lambda_dir(out: &Path, lambda: f64) -> PathBuf {
    out.join(format!("lambda_{lambda}"))
}

fn run_gridsearch(data: &Path, cfg: &RunConfig, out: &Path, lambdas: Vec<f64>, jobs: usize) -> CliResult {
    let (dataset, sp) = load_dataset(data, cfg.net.input_size, cfg.data.ratio, cfg.split_seed())?;
    create_dir(out)?;
    let mut manifest = new_manifest("gridsearch", data, cfg, Some(lambdas.clone()))?;
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    write_file(&out.join("config.txt"), cfg.to_text())?;

    let result = grid_search_lambda(&cfg.net, &dataset, &sp, &cfg.train, &lambdas, jobs)?;
    for row in &result.rows {
        let dir = lambda_dir(out, row.lambda);
        create_dir(&dir)?;
        write_file(&dir.join("history.csv"), history_csv(&row.history))?;
        let epoch = row.history.last().map_or(0, |r| r.epoch as u32);
        let meta = mtnet::model::CheckpointMeta { epoch, seed: cfg.train.seed, lambda: row.lambda };
        row.net.save_checkpoint(&dir.join(training::LAST_CHECKPOINT), meta)?;
    }
    write_file(&out.join("grid.csv"), result.to_csv())?;

    let mut table = String::from("lambda  accuracy  cls_f1  iou     dice    seg_f1  overall\n");
    for row in &result.rows {
        let r = &row.report;
        writeln!(
            table,
            "{:<6}  {:.4}    {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            row.lambda, r.accuracy, r.cls_f1_macro, r.seg_iou, r.seg_dice, r.seg_f1, r.overall
        )
        .expect("string write");
    }
    print!("{table}");
    let best = result.best_row();
    println!("best lambda={} overall={:.4}", best.lambda, best.report.overall);
    manifest.finished_unix = Some(now_unix());
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

pub fn eval(data: &Path, checkpoint: &Path, out: &Path, config: Option<&Path>) -> CliResult {
    let (net, meta) = MultiTaskNet::load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => {
            let cfg = load_config(Some(p))?;
            if &cfg.net != net.config() {
                return Err(CliError::config(format!(
                    "configuration network {:?} does not match checkpoint network {:?}",
                    cfg.net,
                    net.config()
                )));
            }
            cfg
        }
        None => {
            let mut cfg = RunConfig { net: net.config().clone(), ..RunConfig::default() };
            cfg.train.seed = meta.seed;
            cfg
        }
    };
    let (dataset, sp) = load_dataset(data, net.config().input_size, cfg.data.ratio, cfg.split_seed())?;
    let report = training::evaluate(&net, &dataset, &sp.test, cfg.train.batch_size, cfg.train.threshold)?;
    create_dir(out)?;
    let csv =
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row(meta.lambda, meta.seed, meta.epoch as usize));
    write_file(&out.join("metrics.csv"), csv)?;
    println!("{report}");
    Ok(())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn predict(image: &Path, checkpoint: &Path, out: &Path) -> CliResult {
    let (net, _) = MultiTaskNet::load_checkpoint(checkpoint)?;
    let cfg = net.config();
    let size = cfg.input_size;
    let bytes = std::fs::read(image).map_err(|e| CliError::io(image, e))?;
    let plane =
        busi::decode_image(&bytes, size).map_err(|reason| Error::Ingestion { path: image.to_path_buf(), reason })?;
    let channels: Vec<f64> = (0..cfg.in_channels).flat_map(|_| plane.iter().copied()).collect();
    let input = Tensor::new(&[1, cfg.in_channels, size, size], channels)?;
    let output = net.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mask = threshold_logits(&output.seg_logits, training::TrainConfig::default().threshold);
    create_dir(out)?;
    write_file(&out.join("mask.png"), busi::encode_png(mask.data(), size)?)?;

    let probs = softmax(output.cls_logits.data());
    let best = training::argmax_rows(&probs, probs.len())[0];
    let name = Label::from_index(best).map_or_else(|| format!("class{best}"), |l| l.name().to_string());
    let line = format!("label={name} probs={}", probs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
    write_file(&out.join("prediction.txt"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn replay(manifest_path: &Path, out: &Path) -> CliResult {
    let manifest = read_run_manifest(manifest_path)?;
    let cfg = config_from_map(&manifest.config)?;
    let fingerprint = dataset_fingerprint(&manifest.data_dir)?;
    if fingerprint != manifest.dataset_fingerprint {
        return Err(CliError::data(format!(
            "dataset {} has changed since the run (fingerprint {} != {})",
            manifest.data_dir.display(),
            fingerprint,
            manifest.dataset_fingerprint
        )));
    }
    match manifest.command.as_str() {
        "train" => run_train(&manifest.data_dir, &cfg, out),
        "gridsearch" => {
            let lambdas = manifest.lambdas.clone().unwrap_or_else(default_lambda_grid);
            run_gridsearch(&manifest.data_dir, &cfg, out, lambdas, 1)
        }
        other => Err(CliError::config(format!("cannot replay a '{other}' run"))),
    }
}
