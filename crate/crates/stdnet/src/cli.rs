//! Command-line surface driving the full pipeline.
//!
//! Exit codes: 0 success, 1 usage, 2 input/config error, 3 numerical
//! failure, 4 invariant-suite failure. Diagnostics go to standard error;
//! data is written to files only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::convnet::{build_srnetc64_variant, FeatureBatch, Node, SrnetVariant};
use crate::cost::cost_report;
use crate::error::{Error, Result};
use crate::io;
use crate::search::{
    search_architecture, traverse_distortion, Margin, SearchConfig, ThresholdPolicy,
};
use crate::tensor::DenseTensor;
use crate::tucker::tucker_decompose_default;
use crate::verify::run_invariant_suite;

#[derive(Parser)]
#[command(
    name = "stdnet",
    about = "Tucker-decomposition architecture search and cost modeling for conv nets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Shrinking-rate step between samples.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Lower bound of the shrinking rate.
    #[arg(long, default_value_t = 0.20)]
    tau: f64,
    /// Start rate for layers in the "bottom" group.
    #[arg(long = "start-bottom", default_value_t = 0.50)]
    start_bottom: f64,
    /// Start rate for layers in the "middle" group.
    #[arg(long = "start-middle", default_value_t = 0.30)]
    start_middle: f64,
    /// Sub-batches averaged per sample.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the shrinking rate over every decomposable layer and export
    /// the distortion curves as CSV.
    Traverse {
        #[arg(long)]
        model: PathBuf,
        /// Weight container holding a "batch" tensor, or synthetic:BxHxW[:seed].
        #[arg(long)]
        batch: String,
        #[command(flatten)]
        sweep: SweepArgs,
        /// Seed for synthetic batches that do not carry one.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive per-layer thresholds from exported curves.
    SelectThresholds {
        #[arg(long)]
        curves: PathBuf,
        /// "knee" or "manual".
        #[arg(long)]
        policy: String,
        /// Per-layer values for the manual policy.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Determine channel numbers for every decomposable layer and emit the
    /// cylinder- and ladder-shaped variants plus a report.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        batch: String,
        #[arg(long)]
        thresholds: PathBuf,
        /// Ladder-cycle margin as a fraction of each layer threshold.
        #[arg(long = "margin-rel", default_value_t = 0.05)]
        margin_rel: f64,
        /// Absolute ladder-cycle margin (overrides --margin-rel).
        #[arg(long = "margin-abs")]
        margin_abs: Option<f64>,
        /// Record the last configuration under the threshold instead of
        /// the first one exceeding it.
        #[arg(long = "step-back", default_value_t = false)]
        step_back: bool,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-cylinder")]
        out_cylinder: PathBuf,
        #[arg(long = "out-ladder")]
        out_ladder: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Replace a single layer by its rank-(I, O) decomposed group.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long = "rank-in")]
        rank_in: usize,
        #[arg(long = "rank-out")]
        rank_out: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter/FLOP report, optionally as percentages of a baseline.
    Cost {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        batch: String,
    },
    /// Build SRNetC64 (or a reference decomposed variant) with seeded
    /// weights and save it.
    BuildSrnetc64 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// "original", "cylinder", or "ladder".
        #[arg(long, default_value = "original")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            eprint!("{e}");
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("STD_NET_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            Error::Config(format!(
                "STD_NET_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        if n == 0 {
            return Err(Error::Config("STD_NET_THREADS must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("failed to build thread pool: {e}")))
}

/// `synthetic:BxHxW[:seed]` or a path to a weight container holding a
/// single "batch" tensor.
fn load_batch(spec: &str, default_seed: u64) -> Result<FeatureBatch> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let dims = parts.next().unwrap_or_default();
        let seed = match parts.next() {
            Some(s) => s
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed in synthetic batch spec '{spec}'")))?,
            None => default_seed,
        };
        let nums: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad dims in synthetic batch spec '{spec}'")))?;
        let (b, h, w) = match nums[..] {
            [b, h, w] => (b, h, w),
            _ => {
                return Err(Error::Config(format!(
                    "synthetic batch spec must be BxHxW, got '{dims}'"
                )))
            }
        };
        if b < 2 {
            return Err(Error::Config(
                "synthetic batch needs at least 2 images for batch statistics".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * h * w).map(|_| rng.sample(StandardNormal)).collect();
        return FeatureBatch::new(DenseTensor::new(vec![b, 1, h, w], data)?);
    }
    let container = io::WeightContainer::load(Path::new(spec))?;
    let tensor = container.get("batch")?.clone();
    FeatureBatch::new(tensor)
}

fn sweep_config(sweep: &SweepArgs) -> SearchConfig {
    let mut start_gamma = BTreeMap::new();
    start_gamma.insert("bottom".to_string(), sweep.start_bottom);
    start_gamma.insert("middle".to_string(), sweep.start_middle);
    SearchConfig {
        epsilon: sweep.epsilon,
        tau: sweep.tau,
        start_gamma,
        start_default: sweep.start_bottom,
        repeats: sweep.repeats,
        ..SearchConfig::default()
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Traverse {
            model,
            batch,
            sweep,
            seed,
            out,
        } => {
            let model = io::load_model(&model)?;
            let batch = load_batch(&batch, seed)?;
            let cfg = sweep_config(&sweep);
            cfg.validate(&batch)?;
            let layers = model.decomposable_layers();
            let pool = thread_pool()?;
            let curves: Result<Vec<_>> = pool.install(|| {
                use rayon::prelude::*;
                layers
                    .par_iter()
                    .map(|layer| traverse_distortion(&model, layer, &batch, &cfg))
                    .collect()
            });
            io::export_curves(&curves?, &out)?;
            eprintln!(
                "wrote curves for {} layers to {}",
                layers.len(),
                out.display()
            );
            Ok(0)
        }
        Command::SelectThresholds {
            curves,
            policy,
            thresholds,
            out,
        } => {
            let curves = io::import_curves(&curves)?;
            let policy = match policy.as_str() {
                "knee" => ThresholdPolicy::Knee,
                "manual" => {
                    let path = thresholds
                        .ok_or_else(|| Error::Config("manual policy needs --thresholds".into()))?;
                    let entries = io::load_thresholds(&path)?;
                    ThresholdPolicy::Manual(
                        entries.into_iter().map(|e| (e.layer, e.value)).collect(),
                    )
                }
                other => {
                    return Err(Error::Config(format!(
                        "policy must be 'knee' or 'manual', got '{other}'"
                    )))
                }
            };
            let entries: Vec<io::ThresholdEntry> = curves
                .iter()
                .map(|c| {
                    Ok(io::ThresholdEntry {
                        layer: c.layer.clone(),
                        value: crate::search::select_threshold(c, &policy)?,
                    })
                })
                .collect::<Result<_>>()?;
            io::save_thresholds(&entries, &out)?;
            eprintln!("wrote {} thresholds to {}", entries.len(), out.display());
            Ok(0)
        }
        Command::Search {
            model,
            batch,
            thresholds,
            margin_rel,
            margin_abs,
            step_back,
            sweep,
            seed,
            out_cylinder,
            out_ladder,
            report,
        } => {
            let base = io::load_model(&model)?;
            let batch = load_batch(&batch, seed)?;
            let entries = io::load_thresholds(&thresholds)?;
            let mut cfg = sweep_config(&sweep);
            cfg.threshold_policy =
                ThresholdPolicy::Manual(entries.into_iter().map(|e| (e.layer, e.value)).collect());
            cfg.margin = match margin_abs {
                Some(a) => Margin::Absolute(a),
                None => Margin::Relative(margin_rel),
            };
            if step_back {
                cfg.stop_rule = crate::search::StopRule::LastNotExceeding;
            }
            let pool = thread_pool()?;
            let result = pool.install(|| search_architecture(&base, &batch, &cfg))?;

            io::save_model(&result.cylinder_model, &out_cylinder)?;
            io::save_model(&result.ladder_model, &out_ladder)?;

            let mut text = String::from("channel decisions\n");
            text.push_str(&io::decisions_to_text(&result.decisions));
            text.push_str("\ncylinder variant\n");
            text.push_str(&io::cost_to_text(&result.cylinder_cost));
            text.push_str("\nladder variant\n");
            text.push_str(&io::cost_to_text(&result.ladder_cost));
            io::write_atomic(&report, text.as_bytes())?;
            eprintln!(
                "wrote {} and {} with report {}",
                out_cylinder.display(),
                out_ladder.display(),
                report.display()
            );
            Ok(0)
        }
        Command::Decompose {
            model,
            layer,
            rank_in,
            rank_out,
            out,
        } => {
            let base = io::load_model(&model)?;
            let kernel = match base.node(&layer)? {
                Node::Conv(c) => c.kernel.clone(),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "'{layer}' is not a plain conv layer"
                    )))
                }
            };
            let factors = tucker_decompose_default(&kernel, rank_in, rank_out)?;
            let replaced = base.replace_layer(&layer, factors)?;
            io::save_model(&replaced, &out)?;
            eprintln!(
                "replaced {layer} at ranks ({rank_in}, {rank_out}) into {}",
                out.display()
            );
            Ok(0)
        }
        Command::Cost {
            model,
            baseline,
            out,
        } => {
            let model = io::load_model(&model)?;
            let baseline = baseline.map(|p| io::load_model(&p)).transpose()?;
            let report = cost_report(&model, baseline.as_ref())?;
            io::export_cost_csv(&report, &out)?;
            eprintln!("wrote cost report to {}", out.display());
            Ok(0)
        }
        Command::Verify { model, batch } => {
            let model = io::load_model(&model)?;
            let batch = load_batch(&batch, 0)?;
            let checks = run_invariant_suite(&model, &batch)?;
            let mut failures = 0;
            for c in &checks {
                let status = if c.passed { "ok" } else { "FAIL" };
                eprintln!("{status:>4}  {}: {}", c.name, c.detail);
                if !c.passed {
                    failures += 1;
                }
            }
            if failures > 0 {
                eprintln!("{failures} of {} checks failed", checks.len());
                Ok(4)
            } else {
                eprintln!("all {} checks passed", checks.len());
                Ok(0)
            }
        }
        Command::BuildSrnetc64 { seed, variant, out } => {
            let variant = match variant.as_str() {
                "original" => SrnetVariant::Original,
                "cylinder" => SrnetVariant::Cylinder,
                "ladder" => SrnetVariant::Ladder,
                other => {
                    return Err(Error::Config(format!(
                        "variant must be original|cylinder|ladder, got '{other}'"
                    )))
                }
            };
            let model = build_srnetc64_variant(seed, variant)?;
            io::save_model(&model, &out)?;
            eprintln!("wrote model to {}", out.display());
            Ok(0)
        }
    }
}
