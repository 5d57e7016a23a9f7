//! `rgnet`: data generation, training, inference and evaluation for
//! hierarchical rectified Gaussian keypoint models.

mod qpfile;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rg_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
use rg_core::data::{
    generate_dataset, load_dataset, write_dataset, write_manifest, Dataset, Sample,
};
use rg_core::eval::{predict, report_from_predictions};
use rg_core::pgm::{read_pgm, unit_to_byte, write_pgm};
use rg_core::train::{finite_diff_check, sigmoid, train, Example, FdOptions};
use rg_core::{Dims, Error, RunConfig, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "rgnet",
    version,
    about = "Hierarchical rectified Gaussian keypoint models"
)]
struct Cli {
    /// Overrides the training and data seeds from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of inference passes (overrides the config's train.k).
    #[arg(long, global = true)]
    k: Option<usize>,

    /// TOML run configuration; the built-in default is used otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        occlusion: Option<f64>,
        #[arg(long)]
        ambiguity: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Also write PGM images and a text manifest into this directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epochs per stage (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write heatmaps and a keypoint report for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PGM image or a dataset file.
        #[arg(long)]
        input: PathBuf,
        /// Sample to use when the input is a dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Visibility threshold on the heatmap confidence.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// PCK and visibility precision/recall on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2])]
        alpha: Vec<f64>,
        /// Write the precision/recall curve here.
        #[arg(long)]
        pr_out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a random model.
    CheckGrad {
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Number of parameters to probe.
        #[arg(long, default_value_t = 200)]
        params: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Dense QP tools: coordinate descent, projected gradient, copositivity.
    SolveQp {
        /// Text file: `n`, then `n` rows of W, then b, then optional `group i j ...` lines.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Cd)]
        method: Method,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        /// Grid resolution for the copositivity search.
        #[arg(long, default_value_t = 20)]
        resolution: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Cd,
    Pg,
    /// Search for `z ≥ 0` with `zᵀ(-W)z < 0`.
    Copositive,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Usage(format!(
                    "config file {} does not exist",
                    p.display()
                )));
            }
            RunConfig::from_path(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    if let Some(k) = cli.k {
        if k == 0 {
            return Err(Failure::Usage("--k must be at least 1".into()));
        }
        cfg.train.k = k;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn run(cli: Cli) -> CmdResult {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData {
            out,
            n,
            occlusion,
            ambiguity,
            noise,
            manifest,
        } => {
            let mut spec = cfg.data.clone();
            spec.n_samples = n.unwrap_or(spec.n_samples);
            spec.occlusion_rate = occlusion.unwrap_or(spec.occlusion_rate);
            spec.ambiguity = ambiguity.unwrap_or(spec.ambiguity);
            spec.noise_std = noise.unwrap_or(spec.noise_std);
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let d = generate_dataset(&spec)?;
            write_dataset(&d, &out)?;
            if let Some(dir) = manifest {
                write_manifest(&d, &dir)?;
            }
            println!("wrote {} samples to {}", d.samples.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, epochs } => cmd_train(&cfg, &data, &out, epochs),
        Command::Infer {
            checkpoint,
            input,
            index,
            out,
            threshold,
        } => cmd_infer(
            &cli.config,
            &cfg,
            &checkpoint,
            &input,
            index,
            &out,
            threshold,
        ),
        Command::Eval {
            checkpoint,
            data,
            alpha,
            pr_out,
        } => cmd_eval(
            &cli.config,
            &cfg,
            &checkpoint,
            &data,
            &alpha,
            pr_out.as_deref(),
        ),
        Command::CheckGrad {
            samples,
            eps,
            params,
            tol,
        } => cmd_check_grad(&cfg, samples, eps, params, tol),
        Command::SolveQp {
            input,
            method,
            max_iters,
            step,
            resolution,
        } => {
            require(&input, "QP file")?;
            let text =
                std::fs::read_to_string(&input).map_err(|e| Failure::Runtime(e.to_string()))?;
            let qp = qpfile::parse(&text).map_err(Failure::Usage)?;
            print!(
                "{}",
                qpfile::solve(&qp, method, max_iters, step, resolution)?
            );
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    require(path, "dataset")?;
    Ok(load_dataset(path)?)
}

fn check_dataset(d: &Dataset, cfg: &RunConfig) -> CmdResult {
    let want = cfg.architecture.input;
    let m = cfg.architecture.keypoints;
    if let Some(s) = d.samples.first() {
        if s.image.dims() != want || s.keypoints.len() != m {
            return Err(Failure::Usage(format!(
                "dataset has {} images with {} keypoints, the model expects {want} and {m}",
                s.image.dims(),
                s.keypoints.len()
            )));
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, epochs: Option<usize>) -> CmdResult {
    let d = load_data(data)?;
    check_dataset(&d, cfg)?;
    let mut tc = cfg.train.clone();
    tc.epochs = epochs.unwrap_or(tc.epochs);
    let mut model = cfg.architecture.build()?;
    model.init(tc.seed);
    let state = train(&d.samples, &mut model, &tc, |e| println!("{e}"))?;
    save_checkpoint(
        &Checkpoint {
            model,
            state: Some(state),
        },
        out,
    )?;
    println!("saved {}", out.display());
    Ok(())
}

fn open_checkpoint(
    config: &Option<PathBuf>,
    cfg: &RunConfig,
    path: &Path,
) -> Result<Checkpoint, Failure> {
    require(path, "checkpoint")?;
    Ok(if config.is_some() {
        load_checkpoint_for(path, &cfg.architecture)?
    } else {
        load_checkpoint(path)?
    })
}

fn read_input(path: &Path, index: usize) -> Result<Tensor, Failure> {
    require(path, "input")?;
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    if bytes.starts_with(b"P5") {
        let (w, h, px) = read_pgm(path)?;
        return Ok(Tensor::from_vec(
            Dims::new(1, h, w),
            px.into_iter().map(|b| b as f64 / 255.0).collect(),
        )?);
    }
    let d = rg_core::data::decode_dataset(&bytes)?;
    let s: &Sample = d.samples.get(index).ok_or_else(|| {
        Failure::Usage(format!(
            "index {index} out of range for {} samples",
            d.samples.len()
        ))
    })?;
    Ok(s.image.clone())
}

fn cmd_infer(
    config: &Option<PathBuf>,
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    index: usize,
    out: &Path,
    threshold: f64,
) -> CmdResult {
    let ck = open_checkpoint(config, cfg, checkpoint)?;
    let image = read_input(input, index)?;
    let (logits, est) = predict(&ck.model, &image, cfg.train.k)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let (h, w) = (logits.height(), logits.width());
    let mut report = String::new();
    for (m, e) in est.iter().enumerate() {
        let px: Vec<u8> = logits
            .channel(m)
            .iter()
            .map(|&l| unit_to_byte(sigmoid(l)))
            .collect();
        write_pgm(&out.join(format!("heatmap_{m}.pgm")), w, h, &px)?;
        writeln!(
            report,
            "{m} {} {} {:.6} {}",
            e.x,
            e.y,
            e.confidence,
            u8::from(e.visible(threshold))
        )
        .unwrap();
    }
    std::fs::write(out.join("keypoints.txt"), &report)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{report}");
    Ok(())
}

fn cmd_eval(
    config: &Option<PathBuf>,
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    alphas: &[f64],
    pr_out: Option<&Path>,
) -> CmdResult {
    let ck = open_checkpoint(config, cfg, checkpoint)?;
    let d = load_data(data)?;
    let mut preds = Vec::with_capacity(d.samples.len());
    for s in &d.samples {
        preds.push(predict(&ck.model, &s.image, cfg.train.k)?.1);
    }
    let report = report_from_predictions(&d.samples, preds, alphas)?;
    print!("{report}");
    if let Some(path) = pr_out {
        let mut text = String::from("threshold precision recall\n");
        for p in report.pr_curve.iter().flat_map(|c| &c.points) {
            writeln!(
                text,
                "{:.6} {:.6} {:.6}",
                p.threshold, p.precision, p.recall
            )
            .unwrap();
        }
        std::fs::write(path, text).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_check_grad(cfg: &RunConfig, samples: usize, eps: f64, params: usize, tol: f64) -> CmdResult {
    if samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let mut model = cfg.architecture.build()?;
    model.init(cfg.train.seed);
    let mut spec = cfg.data.clone();
    spec.n_samples = samples;
    spec.n_keypoints = cfg.architecture.keypoints;
    spec.image_size = cfg.architecture.input.width;
    let d = generate_dataset(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    check_dataset(&d, cfg)?;
    let scales = model.heads.num_scales();
    let dims = model.output_dims(scales);
    let batch: Vec<Example> = d
        .samples
        .iter()
        .map(|s| Example::from_sample(s, dims, cfg.train.positive_radius))
        .collect::<Result<_, _>>()?;
    let opts = FdOptions {
        eps,
        max_params: Some(params),
        seed: cfg.train.seed,
        ..Default::default()
    };
    let r = finite_diff_check(&model, &batch, cfg.train.k, scales, &opts)?;
    println!(
        "k {} checked {} skipped {} max_rel_error {:.3e}",
        cfg.train.k, r.checked, r.skipped, r.max_rel_error
    );
    if let Some((block, j)) = r.worst {
        println!("worst {block}[{j}]");
    }
    if r.max_rel_error < tol {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed: {:.3e} >= {tol:.1e}",
            r.max_rel_error
        )))
    }
}
