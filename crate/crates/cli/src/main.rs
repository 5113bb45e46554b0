//! `morvit`: train, evaluate and profile routed vision transformers.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure. `MORVIT_THREADS` caps worker threads (default 1).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use morvit_core::checkpoint::Checkpoint;
use morvit_core::data::{load_cifar10_binary, DataSource, Dataset};
use morvit_core::profile::{bench_throughput, count_flops, dense_flops, detect_degenerate, export_depth_map};
use morvit_core::routing::depth_histogram;
use morvit_core::train::format_ablation;
use morvit_core::{
    evaluate, metrics_log_path, param_count, run_ablation, DType, DepthMapFormat, MorError, MorVit, Real, RunConfig,
    Tensor, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "morvit", version, about = "Vision transformer with token-wise recursive routing")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch metrics log
    Train {
        /// Run configuration file (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Training data: CIFAR-10 binary file or synth:N:SEED[:HARD_FRACTION]
        #[arg(long)]
        data: String,
        /// Checkpoint path; the log goes to <CKPT>.metrics.tsv
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Override the configured number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Report accuracy, mean exit depth and per-class accuracy
    Eval {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// CIFAR-10 binary file or synth:N:SEED[:HARD_FRACTION]
        #[arg(long)]
        data: String,
    },
    /// FLOPs breakdown, depth histogram, collapse check and throughput
    Profile {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Also tabulate FLOPs per image for beta in {0, .25, .5, .75, .9}
        #[arg(long)]
        beta_sweep: bool,
        /// Images to profile on
        #[arg(long, default_value = "synth:64:0")]
        data: String,
        /// Timed throughput repeats (at least 3)
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Export the per-patch exit depths of one image
    Depthmap {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// PNG image, CIFAR-10 binary (first record) or synth:N:SEED
        #[arg(long, value_name = "IMG")]
        input: String,
        /// Output file
        #[arg(long)]
        out: PathBuf,
        /// Output format
        #[arg(long, value_parser = ["csv", "json"], default_value = "csv")]
        format: String,
    },
    /// Train the four ablation variants and write the comparison table
    Ablate {
        /// Run configuration file (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Training data
        #[arg(long)]
        data: String,
        /// Held-out data; defaults to the next synthetic seed or a 20% split
        #[arg(long)]
        test: Option<String>,
        /// Tab-separated results table
        #[arg(long, value_name = "TABLE")]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Run { context: String, source: MorError },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run {
                source: MorError::NonFinite(_),
                ..
            } => 3,
            CliError::Run { .. } => 2,
        }
    }
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for morvit_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Run { context: what(), source })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("MORVIT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("MORVIT_THREADS: expected a positive integer, got `{v}`"))),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let flag = || format!("--config {}", path.display());
    let text = std::fs::read_to_string(path)
        .map_err(|e| MorError::io(path, e))
        .context(flag)?;
    RunConfig::parse(&text).context(flag)
}

fn data_source(flag: &str, spec: &str) -> Result<DataSource, CliError> {
    DataSource::parse(spec).map_err(|e| CliError::Usage(format!("{flag} {spec}: {e}")))
}

fn load_data(flag: &str, spec: &str, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let src = data_source(flag, spec)?;
    let data = src.load(&cfg.model).context(|| format!("{flag} {spec}"))?;
    if data.is_empty() {
        return Err(CliError::Run {
            context: format!("{flag} {spec}"),
            source: MorError::Invalid("dataset is empty".into()),
        });
    }
    data.check_geometry(&cfg.model).context(|| format!("{flag} {spec}"))?;
    Ok(data)
}

fn load_checkpoint(flag: &str, path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).context(|| format!("{flag} {}", path.display()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = threads()?;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            resume,
        } => {
            let mut cfg = read_config(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            cfg.validate().context(|| format!("--config {}", config.display()))?;
            let mut trainer = match &resume {
                None => Trainer::new(cfg.clone()).context(|| format!("--config {}", config.display()))?,
                Some(path) => {
                    let ck = load_checkpoint("--resume", path)?;
                    if ck.config.model != cfg.model {
                        return Err(CliError::Usage(format!(
                            "--resume {}: checkpoint model differs from --config {}",
                            path.display(),
                            config.display()
                        )));
                    }
                    let mut t = Trainer::from_checkpoint(&ck).context(|| format!("--resume {}", path.display()))?;
                    t.config.train.epochs = cfg.train.epochs;
                    t
                }
            }
            .with_threads(threads);
            let dataset = load_data("--data", &data, &cfg)?;
            let log = metrics_log_path(&out);
            let metrics = trainer
                .fit(&dataset, &out, &log)
                .context(|| format!("training on --data {data}"))?;
            for m in &metrics {
                println!("{}", m.log_line());
            }
            println!("checkpoint\t{}", out.display());
            println!("metrics\t{}", log.display());
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let ck = load_checkpoint("--ckpt", &ckpt)?;
            let dataset = load_data("--data", &data, &ck.config)?;
            let text = match ck.config.model.precision {
                DType::F64 => eval_report::<f64>(&ck, &dataset, threads),
                DType::F32 => eval_report::<f32>(&ck, &dataset, threads),
            }
            .context(|| format!("evaluating --ckpt {}", ckpt.display()))?;
            print!("{text}");
            Ok(())
        }
        Command::Profile {
            ckpt,
            beta_sweep,
            data,
            repeats,
        } => {
            if repeats < 3 {
                return Err(CliError::Usage(format!("--repeats {repeats}: need at least 3")));
            }
            let ck = load_checkpoint("--ckpt", &ckpt)?;
            let dataset = load_data("--data", &data, &ck.config)?;
            let text = match ck.config.model.precision {
                DType::F64 => profile_report::<f64>(&ck, &dataset, beta_sweep, repeats, threads),
                DType::F32 => profile_report::<f32>(&ck, &dataset, beta_sweep, repeats, threads),
            }
            .context(|| format!("profiling --ckpt {}", ckpt.display()))?;
            print!("{text}");
            Ok(())
        }
        Command::Depthmap {
            ckpt,
            input,
            out,
            format,
        } => {
            let ck = load_checkpoint("--ckpt", &ckpt)?;
            let format: DepthMapFormat = format.parse().map_err(|e: MorError| CliError::Usage(format!("--format: {e}")))?;
            let image = load_image(&input, &ck.config)?;
            let model: MorVit<f64> = ck.model().context(|| format!("--ckpt {}", ckpt.display()))?;
            let pred = model
                .predict(&[image], &Default::default())
                .context(|| format!("--input {input}"))?;
            let (gh, gw) = ck.config.model.grid();
            let map = export_depth_map(&pred[0].trace, gh, gw, Some(&ck.config.model), &out, format)
                .context(|| format!("--out {}", out.display()))?;
            println!("class\t{}", pred[0].class());
            println!("histogram\t{:?}", map.histogram);
            println!("written\t{}", out.display());
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            test,
            out,
        } => {
            let cfg = read_config(&config)?;
            let train = load_data("--data", &data, &cfg)?;
            let (train, held) = match &test {
                Some(spec) => (train, load_data("--test", spec, &cfg)?),
                None => match data_source("--data", &data)? {
                    DataSource::Synth { n, seed, hard_fraction } => {
                        let spec = format!("synth:{n}:{}:{hard_fraction}", seed.wrapping_add(1));
                        (train, load_data("--test", &spec, &cfg)?)
                    }
                    DataSource::Cifar(_) => split(train)?,
                },
            };
            let rows = run_ablation(&cfg, &train, &held, threads).context(|| format!("ablation on --data {data}"))?;
            let table = format_ablation(&rows);
            std::fs::write(&out, &table)
                .map_err(|e| MorError::io(&out, e))
                .context(|| format!("--out {}", out.display()))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn split(mut data: Dataset) -> Result<(Dataset, Dataset), CliError> {
    let n = data.len();
    let held = n / 5;
    if held == 0 {
        return Err(CliError::Usage(format!("--data has {n} records; too few to hold out 20% (pass --test)")));
    }
    let test = data.records.split_off(n - held);
    Ok((
        data,
        Dataset {
            records: test,
            difficulty: None,
        },
    ))
}

fn load_image(spec: &str, cfg: &RunConfig) -> Result<Tensor, CliError> {
    let flag = || format!("--input {spec}");
    let m = &cfg.model;
    let image = if spec.starts_with("synth:") {
        let src = data_source("--input", spec)?;
        src.load(m).context(flag)?.records.remove(0).image
    } else if spec.to_ascii_lowercase().ends_with(".png") {
        let img = image::open(spec)
            .map_err(|e| MorError::format(spec, e.to_string()))
            .context(flag)?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
        Tensor::new(&[h as usize, w as usize, 3], data).context(flag)?
    } else {
        let mut recs = load_cifar10_binary(spec).context(flag)?;
        if recs.is_empty() {
            return Err(CliError::Run {
                context: flag(),
                source: MorError::format(spec, "file holds no records"),
            });
        }
        recs.remove(0).image
    };
    if image.shape() != [m.image_h, m.image_w, m.channels] {
        return Err(CliError::Run {
            context: flag(),
            source: MorError::format(
                spec,
                format!(
                    "image is {:?}, model expects {}x{}x{}",
                    image.shape(),
                    m.image_h,
                    m.image_w,
                    m.channels
                ),
            ),
        });
    }
    Ok(image)
}

fn eval_report<T: Real>(ck: &Checkpoint, data: &Dataset, threads: usize) -> morvit_core::Result<String> {
    let model: MorVit<T> = ck.model()?;
    let r = evaluate(&model, data, threads)?;
    let mut s = String::new();
    let _ = writeln!(s, "accuracy\t{:.4}", r.accuracy);
    let _ = writeln!(s, "mean_exit_depth\t{:.4}", r.mean_exit_depth);
    let _ = writeln!(s, "flops_per_image\t{:.0}", r.flops_per_image);
    for (c, acc) in r.per_class_accuracy.iter().enumerate() {
        match acc {
            Some(a) => {
                let _ = writeln!(s, "class_{c}\t{a:.4}");
            }
            None => {
                let _ = writeln!(s, "class_{c}\t-");
            }
        }
    }
    Ok(s)
}

fn profile_report<T: Real>(
    ck: &Checkpoint,
    data: &Dataset,
    beta_sweep: bool,
    repeats: usize,
    threads: usize,
) -> morvit_core::Result<String> {
    let model: MorVit<T> = ck.model()?;
    let cfg = &model.config;
    let images: Vec<Tensor<T>> = data.records.iter().map(|r| r.image.cast()).collect();
    let preds = model.predict_parallel(&images, threads)?;
    let n = preds.len() as f64;
    let mut totals = [0u64; 6];
    let mut depths = Vec::new();
    for p in &preds {
        let f = count_flops(cfg, &p.trace)?;
        for (acc, v) in totals
            .iter_mut()
            .zip([f.total, f.attention, f.mlp, f.router + f.depth_predictor, f.embed, f.head])
        {
            *acc += v;
        }
        depths.extend_from_slice(p.trace.patch_depths());
    }
    let traces: Vec<_> = preds.into_iter().map(|p| p.trace).collect();
    let collapse = detect_degenerate(&traces, morvit_core::profile::DEGENERATE_THRESHOLD)?;
    let tp = bench_throughput(&model, &images, repeats, threads)?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "model\t{} R={} beta={} shared={} params={}",
        cfg.routing_mode.name(),
        cfg.max_recursion,
        cfg.beta,
        cfg.share_params,
        param_count(cfg)
    );
    let _ = writeln!(s, "images\t{}", images.len());
    for (name, v) in ["flops_per_image", "attention", "mlp", "router", "embed", "head"].iter().zip(totals) {
        let _ = writeln!(s, "{name}\t{:.0}", v as f64 / n);
    }
    let _ = writeln!(s, "dense_flops_per_image\t{}", dense_flops(cfg));
    let _ = writeln!(
        s,
        "mean_exit_depth\t{:.4}",
        depths.iter().sum::<usize>() as f64 / depths.len().max(1) as f64
    );
    let _ = writeln!(s, "depth_histogram\t{:?}", depth_histogram(&depths, cfg.max_recursion));
    let _ = writeln!(
        s,
        "degenerate\t{} (effective depth 1 for {:.3} of tokens)",
        collapse.degenerate, collapse.shallow_fraction
    );
    let _ = writeln!(
        s,
        "throughput\t{:.1} images/s (median of {}, variance {:.3e} s^2, threads {}, {})",
        tp.images_per_sec, repeats, tp.variance, tp.threads, tp.precision
    );

    if beta_sweep {
        let _ = writeln!(s, "beta\tflops_per_image\tmean_exit_depth");
        for beta in [0.0, 0.25, 0.5, 0.75, 0.9] {
            let swept = MorVit::from_parts(
                morvit_core::ModelConfig {
                    beta,
                    ..cfg.clone()
                },
                model.params.clone(),
            )?;
            let preds = swept.predict_parallel(&images, threads)?;
            let mut flops = 0u64;
            let mut depth = 0.0;
            for p in &preds {
                flops += count_flops(&swept.config, &p.trace)?.total;
                depth += p.trace.mean_depth();
            }
            let _ = writeln!(s, "{beta}\t{:.0}\t{:.4}", flops as f64 / n, depth / n);
        }
    }
    Ok(s)
}
