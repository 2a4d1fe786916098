use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ckrm::ckrm::{SampleSize, DEFAULT_SAMPLE_SIZE, PRIMARY_THRESHOLD};
use ckrm::demo;
use ckrm::report::{self, AnalysisParams, AnalysisReport, AnalyzeOptions};
use ckrm::ssim::{SimilarityParams, DEFAULT_EPSILON};
use ckrm::structure::{self, NetworkStructure, SuggestOptions, DEFAULT_MIN_WIDTH, DEFAULT_RHO};

const EXIT_INPUT: u8 = 1;
const EXIT_CONSTRAINT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ckrm",
    version,
    about = "Convolution kernel redundancy analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure kernel redundancy for every matching layer of one or more checkpoints.
    Analyze {
        #[arg(long, num_args = 1.., required = true)]
        weights: Vec<PathBuf>,
        /// Wildcard over tensor names (`*`, `?`).
        #[arg(long, default_value = "*")]
        layers: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.6, 0.7])]
        thresholds: Vec<f64>,
        /// Pairs to sample per layer, or `all`.
        #[arg(long, default_value_t = SampleSize::Count(DEFAULT_SAMPLE_SIZE))]
        sample: SampleSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store per-run wall-clock timings (the report is then not reproducible).
        #[arg(long)]
        record_timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propose reduced layer widths from an analysis report.
    Suggest {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RHO)]
        rho: f64,
        #[arg(long, default_value_t = PRIMARY_THRESHOLD)]
        t: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_WIDTH)]
        min_width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count trainable parameters of a structure file.
    Params {
        #[arg(long)]
        structure: PathBuf,
    },
    /// Render the similarity histogram of one analyzed layer as SVG.
    Hist {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = PRIMARY_THRESHOLD)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise and luminance-shift demonstration of the two similarity weightings.
    DemoNoise {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Optional CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Structure failed validation.
#[derive(Debug)]
struct ConstraintViolation(Vec<String>);

impl std::fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} constraint violation(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConstraintViolation {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(|| run(cli));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConstraintViolation>().is_some() {
                ExitCode::from(EXIT_CONSTRAINT)
            } else {
                ExitCode::from(EXIT_INPUT)
            }
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn check_structure(s: &NetworkStructure) -> anyhow::Result<()> {
    let violations = structure::validate(s);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConstraintViolation(violations.into_iter().map(|v| v.message).collect()).into())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Analyze {
            weights,
            layers,
            alpha,
            beta,
            gamma,
            epsilon,
            thresholds,
            sample,
            seed,
            record_timing,
            out,
        } => {
            SimilarityParams::new(alpha, beta, gamma, epsilon)?;
            let options = AnalyzeOptions {
                params: AnalysisParams {
                    alpha,
                    beta,
                    gamma,
                    epsilon,
                    thresholds,
                    sample_size: sample,
                    seed,
                    layer_filter: layers,
                },
                record_timing,
            };
            let report = report::analyze(&weights, &options)?;
            for (name, layer) in &report.layers {
                let lambdas: Vec<String> = layer
                    .ckrm
                    .thresholds
                    .iter()
                    .zip(&layer.ckrm.mean_lambda)
                    .map(|(t, l)| format!("λ({t})={l:.4}"))
                    .collect();
                let note = if layer.pointwise {
                    "  [1x1: degenerate]"
                } else {
                    ""
                };
                println!("{name} {:?}  {}{note}", layer.shape, lambdas.join("  "));
            }
            for name in &report.skipped {
                println!("{name}: skipped (fewer than 2 kernels)");
            }
            write_file(&out, &report.to_json())
        }
        Command::Suggest {
            report,
            structure: structure_path,
            rho,
            t,
            min_width,
            out,
        } => {
            let analysis = AnalysisReport::load(&report)?;
            let net = NetworkStructure::load(&structure_path)?;
            check_structure(&net)?;
            for layer in &net.layers {
                if let Some(entry) = analysis.layers.get(&layer.id) {
                    let dims = [layer.f2, layer.f1, layer.k1, layer.k2];
                    anyhow::ensure!(
                        entry.shape == dims,
                        "layer `{}` is {:?} in the report but {:?} in the structure",
                        layer.id,
                        entry.shape,
                        dims
                    );
                }
            }
            let plan = structure::suggest(
                &net,
                &analysis.ckrm_by_layer(),
                SuggestOptions {
                    threshold: t,
                    rho,
                    min_width,
                },
            )?;
            check_structure(&plan.structure).context("suggested structure is inconsistent")?;
            for c in &plan.layers {
                let lambda = c.lambda_used.map_or("-".to_string(), |l| format!("{l:.4}"));
                let hint = if c.possibly_under_provisioned {
                    "  (possibly under-provisioned)"
                } else {
                    ""
                };
                println!(
                    "{:<16} f2 {:>5} -> {:<5} f1 {:>5} -> {:<5} λ={lambda}{hint}",
                    c.layer_id, c.old_f2, c.new_f2, c.old_f1, c.new_f1
                );
            }
            println!(
                "parameters: {} -> {}",
                plan.params_before, plan.params_after
            );
            write_file(&out, &report::to_sorted_json(&plan))
        }
        Command::Params { structure: path } => {
            let net = NetworkStructure::load(&path)?;
            for layer in &net.layers {
                println!(
                    "{:<16} {:>5} x {:>5} x {} x {}  bias={:<5}  {:>12}",
                    layer.id,
                    layer.f2,
                    layer.f1,
                    layer.k1,
                    layer.k2,
                    layer.bias,
                    layer.param_count()
                );
            }
            println!("{:<16} {:>58}", "extras", net.extras.count);
            println!("total {}", structure::count_params(&net));
            check_structure(&net)
        }
        Command::Hist {
            report,
            layer,
            t,
            out,
        } => {
            let analysis = AnalysisReport::load(&report)?;
            let svg = report::histogram_svg(&analysis, &layer, t)?;
            write_file(&out, &svg)
        }
        Command::DemoNoise {
            seed,
            trials,
            epsilon,
            out,
        } => {
            let table = demo::demo_noise(seed, trials, epsilon)?;
            print!("{}", table.render_table());
            if let Some(path) = out {
                let file = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                table.write_csv(file)?;
            }
            Ok(())
        }
    }
}
