//! Command-line surface tying everything together: dataset synthesis,
//! training, evaluation, rectification demos, sampling, and plot emission.
//!
//! Exit codes: 0 on success, 1 on contract violations (including usage and
//! malformed-file errors), 2 on I/O errors. All randomness is surfaced as
//! explicit `--seed` flags, so every command is deterministic given its
//! arguments.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use diffrect_core::autodiff::Tape;
use diffrect_core::data::{self, Dataset};
use diffrect_core::metrics::{calibration_guidance, GuidanceMode};
use diffrect_core::rng::{derive_rng, Stream};
use diffrect_core::schedule::make_cosine_schedule;
use diffrect_core::trainer::{self, AblationMode, TrainConfig, TrainState};
use diffrect_core::{contract, Error, LabelMask, Result};
use ndarray::Axis;

#[derive(Parser)]
#[command(name = "diffrect", version, about = "Semi-supervised segmentation with latent pseudo-label rectification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        /// Number of classes including background.
        #[arg(long)]
        classes: usize,
        /// Square image side in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of samples held out for validation.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write logs plus checkpoints.
    Train {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of training samples that keep their labels.
        #[arg(long, default_value_t = 0.1)]
        labeled_ratio: f64,
        #[arg(long, default_value_t = 2000)]
        iters: u64,
        /// Diffusion steps of the rectifier schedule.
        #[arg(long = "T", default_value_t = 100)]
        t_steps: usize,
        /// Guidance mode: dice|jaccard|fixed[:v]|random|both.
        #[arg(long, default_value = "dice")]
        guidance: GuidanceMode,
        /// Weight of the unlabeled latent loss.
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        /// Weight of the labeled latent loss.
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Which parts of the method to train: baseline|lcc|full.
        #[arg(long, default_value = "full")]
        ablation: AblationMode,
        /// Evaluate on the validation split every this many iterations.
        #[arg(long, default_value_t = 200)]
        eval_every: u64,
        /// Resume from a checkpoint written with the identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory receiving metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one image, rectify the prediction, and write both masks.
    Rectify {
        #[arg(long)]
        ckpt: PathBuf,
        /// 16-bit grayscale PNG input image.
        #[arg(long)]
        image: PathBuf,
        /// Optional ground-truth palette PNG; adds a Dice before/after line.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Directory receiving y_w.png and y_r.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw one rectified sample and/or dump the noise schedule.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// 16-bit grayscale PNG input image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Directory receiving sample.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the noise schedule as CSV to this path.
        #[arg(long)]
        schedule_csv: Option<PathBuf>,
        /// Schedule length when no checkpoint supplies one.
        #[arg(long = "T", default_value_t = 100)]
        t_steps: usize,
    },
    /// Render loss and Dice curves from a run directory.
    Plot {
        /// Run directory holding losses.csv and metrics.csv.
        #[arg(long)]
        run: PathBuf,
        /// Directory receiving loss.png and dice.png.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        let code = match err {
            Error::Io { .. } => 2,
            Error::Contract(_) | Error::Parse { .. } => 1,
        };
        std::process::exit(code);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, classes, size, seed, val_fraction, out } => {
            let samples = data::synth_generate(n, classes, size, seed)?;
            let ds = Dataset::assemble(samples, classes, size, seed, val_fraction)?;
            data::save_dataset(&ds, &out)?;
            println!(
                "wrote {} samples ({} train, {} val) to {}",
                ds.samples.len(),
                ds.train_ids.len(),
                ds.val_ids.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            labeled_ratio,
            iters,
            t_steps,
            guidance,
            lambda1,
            lambda2,
            seed,
            ablation,
            eval_every,
            resume,
        } => {
            let ds = data::load_dataset(&data)?;
            let mut cfg = TrainConfig {
                iterations: iters,
                t_steps,
                guidance,
                ablation,
                eval_every,
                labeled_ratio,
                seed,
                ..TrainConfig::default()
            };
            cfg.weights.lambda1 = lambda1;
            cfg.weights.lambda2 = lambda2;
            cfg.nets.seg.num_classes = ds.classes;
            let report = trainer::fit(&cfg, &ds, &out, resume.as_deref())?;
            println!(
                "ran {} iterations; best dice {:.4}, final dice {:.4}",
                report.iterations_run, report.best_dice, report.final_dice
            );
            Ok(())
        }
        Command::Eval { ckpt, data, out } => {
            let state = trainer::load_checkpoint(&ckpt)?;
            let ds = data::load_dataset(&data)?;
            let val = ds.val_samples();
            contract!(!val.is_empty(), "dataset has no validation samples");
            let reports = trainer::evaluate(&state, &val)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut csv = format!("{}\n", trainer::METRICS_CSV_HEADER);
            let mut means = [0.0f64; 4];
            for (case, r) in &reports {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    state.iteration, case, r.dice_mean, r.jaccard_mean, r.hd95, r.asd
                ));
                for (m, v) in means.iter_mut().zip([r.dice_mean, r.jaccard_mean, r.hd95, r.asd]) {
                    *m += v;
                }
            }
            let n = reports.len() as f64;
            let path = out.join("metrics.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            println!("dice jaccard hd95 asd");
            println!("{} {} {} {}", means[0] / n, means[1] / n, means[2] / n, means[3] / n);
            Ok(())
        }
        Command::Rectify { ckpt, image, mask, out, seed } => {
            let state = trainer::load_checkpoint(&ckpt)?;
            let (y_w, y_r) = predict_and_rectify(&state, &image, seed)?;
            let colors = state.color_set()?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            data::write_mask_png(&out.join("y_w.png"), &y_w, &colors)?;
            data::write_mask_png(&out.join("y_r.png"), &y_r, &colors)?;
            if let Some(mask_path) = mask {
                let gt = data::read_mask_png(&mask_path, state.cfg.nets.seg.num_classes)?;
                let mut rng = derive_rng(seed, 0, Stream::Guidance);
                let before = calibration_guidance(&y_w, &gt, GuidanceMode::Dice, &mut rng)?;
                let after = calibration_guidance(&y_r, &gt, GuidanceMode::Dice, &mut rng)?;
                println!("dice before {before} after {after}");
            }
            println!("wrote y_w.png and y_r.png to {}", out.display());
            Ok(())
        }
        Command::Sample { ckpt, image, out, seed, schedule_csv, t_steps } => {
            let state = ckpt.as_deref().map(trainer::load_checkpoint).transpose()?;
            if let Some(csv_path) = &schedule_csv {
                let t = state.as_ref().map_or(t_steps, |s| s.cfg.t_steps);
                let sched = make_cosine_schedule(t)?;
                let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
                sched.write_csv(file).map_err(|e| Error::io(csv_path, e))?;
                println!("wrote schedule ({t} steps) to {}", csv_path.display());
            }
            match (&state, &image) {
                (Some(state), Some(image)) => {
                    let (_, y_r) = predict_and_rectify(state, image, seed)?;
                    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                    let path = out.join("sample.png");
                    data::write_mask_png(&path, &y_r, &state.color_set()?)?;
                    println!("wrote {}", path.display());
                }
                (None, None) if schedule_csv.is_some() => {}
                _ => contract!(false, "sample needs --ckpt with --image, or --schedule-csv"),
            }
            Ok(())
        }
        Command::Plot { run, out } => {
            let losses = plot::read_losses_csv(&run.join("losses.csv"))?;
            let dice = plot::read_dice_csv(&run.join("metrics.csv"))?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            plot::line_chart(&losses, &out.join("loss.png"))?;
            plot::line_chart(&dice, &out.join("dice.png"))?;
            println!("wrote loss.png and dice.png to {}", out.display());
            Ok(())
        }
    }
}

/// Segments `image` with the checkpointed model (weak view = identity) and
/// rectifies the resulting pseudo label.
fn predict_and_rectify(
    state: &TrainState,
    image: &Path,
    seed: u64,
) -> Result<(LabelMask, LabelMask)> {
    let img = data::read_image_png(image)?;
    let tape = Tape::inference();
    let (logits, feats) = state.seg(&tape, &img.insert_axis(Axis(0)))?;
    let y_w = LabelMask::from_scores(tape.value3(logits).view())?;
    let sched = make_cosine_schedule(state.cfg.t_steps)?;
    let mut rng = derive_rng(seed, 0, Stream::Rectify);
    let y_r = trainer::rectify(state, &y_w, &feats, &sched, &mut rng)?;
    Ok((y_w, y_r))
}
