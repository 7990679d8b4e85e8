use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use phr_cli::EvalOptions;
use phr_core::metrics::{Axes, Normalizer};
use phr_core::model::Preset;
use phr_core::{CoreError, Result};

#[derive(Parser)]
#[command(name = "phr3d", version, about = "3D face landmarks: detection, regression and depth cascade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Xy,
    Xyz,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-wise training from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue after the stage of this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not echo log rows.
        #[arg(long)]
        quiet: bool,
    },
    /// Predict 3D landmarks for every record of a manifest.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions; writes report.json and curve.csv.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Cross-view pairs (`pred_path,gt_path` per line).
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Take metric settings, hash and seed from a run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Eye landmark indices, `i,j`.
        #[arg(long, value_parser = parse_pair)]
        eyes: Option<(usize, usize)>,
        #[arg(long, value_enum)]
        normalizer: Option<NormArg>,
        /// Drop the fitted translation from the cross-view residual.
        #[arg(long)]
        no_translation: bool,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Cumulative error curve of a report as CSV.
    Curve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "xyz")]
        axes: String,
        #[arg(long, default_value_t = phr_cli::DEFAULT_CURVE_SAMPLES)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a preset model and print its block and parameter census.
    Audit {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, default_value_t = 66)]
        points: usize,
        #[arg(long)]
        json: bool,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `i,j`")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, quiet } => {
            let mut stdout = std::io::stdout();
            let mut sink = std::io::sink();
            let echo: &mut dyn std::io::Write = if quiet { &mut sink } else { &mut stdout };
            let r = phr_cli::train(&config, resume.as_deref(), echo)?;
            let f = r.summary.final_stats.as_ref();
            println!(
                "trained: config {} seed {} final val gte xy {:.4} z {:.4}",
                &r.config_hash[..12],
                r.seed,
                f.map_or(f64::NAN, |s| s.gte_xy_regression),
                f.map_or(f64::NAN, |s| s.gte_z)
            );
        }
        Command::Predict { model, images, out } => {
            let p = phr_cli::predict(&model, &images, &out)?;
            println!("wrote {} predictions to {}", p.entries.len(), out.display());
        }
        Command::Eval {
            pred,
            gt,
            pairs,
            report,
            config,
            eyes,
            normalizer,
            no_translation,
            samples,
        } => {
            let opts = EvalOptions {
                config,
                eyes,
                normalizer: normalizer.map(|n| match n {
                    NormArg::Xy => Normalizer::Xy,
                    NormArg::Xyz => Normalizer::Xyz,
                }),
                no_translation,
                curve_samples: samples,
            };
            let r = phr_cli::eval(&pred, &gt, pairs.as_deref(), &report, &opts)?;
            let a = &r.report.per_axis;
            println!(
                "images {} gte {:.4} xy {:.4} x {:.4} y {:.4} z {:.4}{}",
                r.report.count,
                r.report.gte,
                a.xy,
                a.x,
                a.y,
                a.z,
                r.report.cvgtce.map(|c| format!(" cvgtce {c:.4}")).unwrap_or_default()
            );
        }
        Command::Curve {
            report,
            axes,
            samples,
            out,
        } => {
            let (path, c) = phr_cli::curve(&report, Axes::parse(&axes)?, samples, out.as_deref())?;
            println!("wrote {} curve samples to {}", c.len(), path.display());
        }
        Command::Synth { spec, out } => {
            let p = phr_cli::synth(&spec, &out)?;
            println!("train {}", p.train_manifest.display());
            println!("val {}", p.val_manifest.display());
            println!("pairs {}", p.val_pairs.display());
        }
        Command::Audit { preset, points, json } => {
            let preset = match preset {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            };
            let census = phr_cli::audit(preset, points)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&census).map_err(CoreError::from)?);
            } else {
                print!("{}", phr_cli::format_census(preset, points, &census));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", class.label());
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
