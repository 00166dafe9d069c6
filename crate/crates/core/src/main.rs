use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dacnn::augment::{expand_dataset, filter_min_q, read_augmented, write_augmented};
use dacnn::config::RunConfig;
use dacnn::eval::{
    evaluate_model, export_correlation_field, read_correlation_field, MetricsReport,
    METRICS_CSV_HEADER,
};
use dacnn::idx::load_dataset;
use dacnn::model_file::{load_model, save_model};
use dacnn::nn::build_lenet_like;
use dacnn::quantile::{
    adequacy_check, bins_to_csv, empirical_bin_medians, fit_interval_models, fits_to_csv,
    write_text,
};
use dacnn::train::{train_with_observer, TrainError};

#[derive(Parser)]
#[command(
    name = "dacnn",
    version,
    about = "Distortion-aware confidence training for digit classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blur-expand an IDX image/label pair into an augmented dataset file.
    Augment(Overrides),
    /// Train a network on an augmented dataset.
    Train(Overrides),
    /// Score a trained model on an augmented test set.
    Eval(Overrides),
    /// Fit per-interval quantile lines to a correlation-field CSV.
    Regress(Overrides),
}

#[derive(Args, Default)]
struct Overrides {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_name = "baseline|rbf")]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long, value_name = "grid|random")]
    scheme: Option<String>,
    #[arg(long)]
    qmin: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    field: Option<String>,
}

type Handler = fn(&RunConfig) -> Result<(), Failure>;

struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).map_err(usage)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("tau", &self.tau),
            ("scheme", &self.scheme),
            ("q_min", &self.qmin),
            ("out", &self.out),
            ("tag", &self.tag),
            ("images", &self.images),
            ("labels", &self.labels),
            ("data", &self.data),
            ("model", &self.model),
            ("field", &self.field),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(usage)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v).map_err(usage)?;
        }
        Ok(cfg)
    }
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| usage(format!("missing required setting {key:?}")))
}

fn prepare_output(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", cfg.out.display())))?;
    let echo = cfg.output_path(&format!("-{command}.config"));
    fs::write(&echo, cfg.to_text())
        .map_err(|e| usage(format!("cannot write {}: {e}", echo.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_augment(cfg: &RunConfig) -> Result<(), Failure> {
    let images = require(&cfg.images, "images")?;
    let labels = require(&cfg.labels, "labels")?;
    let mut base = load_dataset(images, labels).map_err(usage)?;
    if cfg.limit > 0 {
        base = base.truncate(cfg.limit);
    }
    prepare_output(cfg, "augment")?;
    let data = expand_dataset(&base, &cfg.expand_config()).map_err(usage)?;
    let path = cfg.output_path(".daug");
    write_augmented(&data, &path).map_err(usage)?;
    println!(
        "base images: {}\nreplicas: {}\nsamples written: {}\nscheme: {}\noutput: {}",
        base.len(),
        cfg.replicas,
        data.len(),
        cfg.scheme,
        path.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let train_cfg = cfg.train_config().map_err(usage)?;
    let rbf_cfg = cfg.rbf_config().map_err(usage)?;
    let data = read_augmented(require(&cfg.data, "data")?).map_err(usage)?;
    let loaded = data.len();
    let data = filter_min_q(data, cfg.q_min).map_err(usage)?;
    prepare_output(cfg, "train")?;
    eprintln!(
        "training {} on {} of {loaded} samples (q >= {})",
        train_cfg.mode,
        data.len(),
        cfg.q_min
    );

    let net = build_lenet_like(cfg.classes)
        .map_err(usage)?
        .init_parameters(cfg.seed);
    let trained = train_with_observer(&data, net, &train_cfg, &rbf_cfg, |s| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  accuracy {:.3}%",
            s.epoch, s.loss, s.accuracy
        );
    })
    .map_err(|e| match e {
        TrainError::Divergence { .. } => Failure {
            code: 3,
            message: e.to_string(),
        },
        other => usage(other),
    })?;

    let model_path = cfg.output_path(".dacnn");
    save_model(&trained, &model_path).map_err(usage)?;
    let mut history = String::from("epoch,loss,accuracy\n");
    for h in &trained.history {
        history.push_str(&format!("{},{:.9},{:.6}\n", h.epoch, h.loss, h.accuracy));
    }
    write_file(&cfg.output_path("-history.csv"), &history)?;
    println!("model: {}", model_path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), Failure> {
    let trained = load_model(require(&cfg.model, "model")?).map_err(usage)?;
    let data = read_augmented(require(&cfg.data, "data")?).map_err(usage)?;
    if data.is_empty() {
        return Err(usage("test dataset holds no samples"));
    }
    prepare_output(cfg, "eval")?;
    let records = evaluate_model(&trained.model, &data).map_err(usage)?;
    let report = MetricsReport::compute(&records, &cfg.metric_options()).map_err(usage)?;
    let text = report.to_key_value();
    print!("{text}");
    write_file(&cfg.output_path("-metrics.txt"), &text)?;
    write_file(
        &cfg.output_path("-metrics.csv"),
        &format!("{METRICS_CSV_HEADER}\n{}\n", report.to_csv_row(&cfg.tag)),
    )?;
    export_correlation_field(&records, cfg.output_path("-field.csv")).map_err(usage)?;
    Ok(())
}

fn cmd_regress(cfg: &RunConfig) -> Result<(), Failure> {
    let field = read_correlation_field(require(&cfg.field, "field")?).map_err(usage)?;
    let points: Vec<(f64, f64)> = field
        .iter()
        .filter(|p| cfg.population.includes(p.correct))
        .map(|p| (p.q, p.confidence))
        .collect();
    if points.is_empty() {
        return Err(usage("correlation field holds no usable points"));
    }
    prepare_output(cfg, "regress")?;
    let fits = fit_interval_models(&points, cfg.tau, &cfg.breakpoints).map_err(usage)?;
    let range = (
        cfg.breakpoints[0],
        cfg.breakpoints[cfg.breakpoints.len() - 1],
    );
    let table = empirical_bin_medians(&points, cfg.bin_width, range).map_err(usage)?;

    println!("interval        n  beta0        beta1        max_dev");
    for f in &fits {
        let label = format!(
            "[{}, {}{}",
            f.lo,
            f.hi,
            if f.hi == range.1 { "]" } else { ")" }
        );
        match &f.fit {
            Some(fit) => {
                let dev = adequacy_check(fit, &table)
                    .map(|d| format!("{d:.6}"))
                    .unwrap_or_else(|_| "NA".into());
                println!(
                    "{label:<12} {:>5}  {:<11.6}  {:<11.6}  {dev}",
                    f.n_points, fit.beta0, fit.beta1
                );
            }
            None => println!(
                "{label:<12} {:>5}  absent ({})",
                f.n_points,
                f.note.as_deref().unwrap_or("")
            ),
        }
    }
    write_text(cfg.output_path("-fits.csv"), &fits_to_csv(&fits, cfg.tau)).map_err(usage)?;
    write_text(cfg.output_path("-bins.csv"), &bins_to_csv(&table)).map_err(usage)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (overrides, run): (&Overrides, Handler) = match &cli.command {
        Command::Augment(o) => (o, cmd_augment),
        Command::Train(o) => (o, cmd_train),
        Command::Eval(o) => (o, cmd_eval),
        Command::Regress(o) => (o, cmd_regress),
    };
    match overrides.resolve().and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
