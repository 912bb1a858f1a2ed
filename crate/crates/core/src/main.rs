use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unshade::data::{load_rgb_png, scan_flat, scan_istd, tensor_from_mask};
use unshade::metrics::{
    accumulate_pooled, average_reports, csv_row, evaluate_pair, pooled_report, report_key_values,
    Aggregation, MetricsReport, PooledSums, CSV_HEADER,
};
use unshade::model::Model;
use unshade::trainer::{
    infer_file, load_config, load_model, train, DataLayout, FileSource, RunConfig,
};
use unshade::{Error, Result};

#[derive(Parser)]
#[command(name = "unshade", version, about = "Single-image shadow removal: train, infer, eval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a shadow/mask/shadow-free triplet dataset.
    Train {
        /// Dataset root (ISTD train/test layout, or flat dirs via config).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Restore one image or every PNG in a directory.
    Infer {
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image or directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Reject inputs whose size does not fit the model stride grid
        /// instead of resizing them.
        #[arg(long)]
        strict_size: bool,
    },
    /// Evaluate restored images against ground truth over shadow masks.
    Eval {
        /// Directory of restored images.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth shadow-free images.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of binary shadow masks.
        #[arg(long)]
        mask: PathBuf,
        /// Path of the machine-readable key = value report.
        #[arg(long)]
        report: PathBuf,
        /// Pool pixels dataset-wide instead of averaging per-image metrics.
        #[arg(long)]
        pooled: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, machine-parsable.
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, out, config } => cmd_train(&data, &out, config.as_deref()),
        Command::Infer {
            ckpt,
            input,
            out,
            strict_size,
        } => cmd_infer(&ckpt, &input, &out, strict_size),
        Command::Eval {
            pred,
            gt,
            mask,
            report,
            pooled,
        } => cmd_eval(&pred, &gt, &mask, &report, pooled),
    }
}

fn cmd_train(data: &std::path::Path, out: &std::path::Path, config: Option<&std::path::Path>) -> Result<()> {
    let cfg: RunConfig = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let index = match &cfg.layout {
        DataLayout::Istd => scan_istd(data, cfg.train.seed)?,
        DataLayout::Flat { shadow, mask, free } => {
            scan_flat(data, shadow, mask, free, cfg.train.seed)?
        }
    };
    for excluded in &index.excluded {
        eprintln!("warning: skipping incomplete triplet {excluded}");
    }
    println!(
        "dataset: {} train / {} test triplets ({} excluded)",
        index.train.len(),
        index.test.len(),
        index.excluded.len()
    );
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = Model::init(cfg.model)?;
    let size = Some((cfg.train.image_size, cfg.train.image_size));
    let source = FileSource {
        paths: &index.train,
        size,
    };
    let heldout = FileSource {
        paths: &index.test,
        size,
    };
    let log = train(&mut model, &source, &heldout, &cfg.train, Some(out))?;
    // Per-step loss history as CSV next to the checkpoints.
    let mut hist = String::from("step,l1,l_cgan_g,l_cgan_d,l_attention,total\n");
    for (i, b) in log.history.iter().enumerate() {
        hist.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            b.l1, b.l_cgan_g, b.l_cgan_d, b.l_attention, b.total
        ));
    }
    let hist_path = out.join("train_log.csv");
    std::fs::write(&hist_path, hist).map_err(|e| Error::io(&hist_path, e))?;
    println!(
        "trained {} steps in {:.1}s; final checkpoint at {}",
        log.history.len(),
        log.wall_ms as f64 / 1000.0,
        out.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_infer(ckpt: &std::path::Path, input: &std::path::Path, out: &std::path::Path, strict: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no PNG files in {}", input.display())));
        }
        files
    } else {
        vec![input.to_path_buf()]
    };
    for file in inputs {
        let written = infer_file(&model, &file, out, strict)?;
        println!("{} -> {} files", file.display(), written.len());
    }
    Ok(())
}

fn cmd_eval(
    pred_dir: &std::path::Path,
    gt_dir: &std::path::Path,
    mask_dir: &std::path::Path,
    report_path: &std::path::Path,
    pooled: bool,
) -> Result<()> {
    let list = |dir: &std::path::Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .collect();
        names.sort();
        Ok(names)
    };
    let preds = list(pred_dir)?;
    let gts: std::collections::BTreeSet<String> = list(gt_dir)?.into_iter().collect();
    let masks: std::collections::BTreeSet<String> = list(mask_dir)?.into_iter().collect();
    let ids: Vec<String> = preds
        .into_iter()
        .filter(|p| gts.contains(p) && masks.contains(p))
        .collect();
    if ids.is_empty() {
        return Err(Error::Dataset(
            "no filenames common to --pred, --gt and --mask".into(),
        ));
    }
    let aggregation = if pooled { Aggregation::Pooled } else { Aggregation::PerImage };
    let mut per_image: Vec<(String, MetricsReport)> = Vec::new();
    let mut sums = PooledSums::default();
    let mut skipped = 0usize;
    for id in &ids {
        let pred = load_rgb_png(&pred_dir.join(id))?;
        let gt = load_rgb_png(&gt_dir.join(id))?;
        let mask_img = image::open(mask_dir.join(id))
            .map_err(|e| Error::Image {
                path: mask_dir.join(id),
                source: e,
            })?
            .to_luma8();
        let mask = tensor_from_mask(&mask_img);
        match aggregation {
            Aggregation::PerImage => match evaluate_pair(&pred, &gt, &mask) {
                Ok(r) => per_image.push((id.clone(), r)),
                Err(Error::EmptyRegion { region }) => {
                    eprintln!("warning: skipping {id}: empty {region} region");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            },
            Aggregation::Pooled => accumulate_pooled(&pred, &gt, &mask, &mut sums)?,
        }
    }
    let aggregate = match aggregation {
        Aggregation::PerImage => {
            if per_image.is_empty() {
                return Err(Error::Dataset("every pair was skipped".into()));
            }
            average_reports(&per_image.iter().map(|(_, r)| *r).collect::<Vec<_>>())
        }
        Aggregation::Pooled => pooled_report(&sums),
    };
    println!("{CSV_HEADER}");
    for (id, r) in &per_image {
        println!("{}", csv_row(id, r));
    }
    println!("{}", csv_row("aggregate", &aggregate));
    if skipped > 0 {
        eprintln!("warning: {skipped} pairs skipped");
    }
    std::fs::write(report_path, report_key_values(&aggregate))
        .map_err(|e| Error::io(report_path, e))?;
    println!("report written to {}", report_path.display());
    Ok(())
}
