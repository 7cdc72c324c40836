//! Command line definitions.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use qup_core::pipeline::dataset::{Split, SplitRatios};
use qup_core::qspace::DistanceMetric;

#[derive(Debug, Parser)]
#[command(name = "qup", version, about = "Q-space up-sampling of diffusion-weighted images")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate two-bar tensor phantoms and their diffusion-weighted images.
    Phantom(PhantomArgs),
    /// Build or export datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a learned method on a dataset manifest.
    Train(TrainArgs),
    /// Complete a low-resolution acquisition with generated directions.
    Generate(GenerateArgs),
    /// Score completed acquisitions against fully acquired ones.
    Evaluate(EvaluateArgs),
    /// List the available methods.
    Methods,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Volume size as XxYxZ.
    #[arg(long, default_value = "64x64x9", value_parser = parse_shape)]
    pub shape: [usize; 3],
    /// Signal-to-noise ratio of the Rician noise; 0 writes noiseless images.
    #[arg(long, default_value_t = 20.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of phantoms; more than one writes `subject_NN` directories.
    #[arg(long, default_value_t = 1)]
    pub subjects: usize,
    /// Weighted gradient directions on the hemisphere.
    #[arg(long, default_value_t = 90)]
    pub directions: usize,
    /// Unweighted volumes placed before the weighted ones.
    #[arg(long, default_value_t = 1)]
    pub b0: usize,
    /// Diffusion weighting of the shell in s/mm².
    #[arg(long, default_value_t = 1000.0)]
    pub bvalue: f64,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Split the acquisition into low and target directions and write a manifest.
    Build(BuildArgs),
    /// Write the low-resolution part and the target list of manifest subjects.
    ExportLow(ExportLowArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// One subject directory or a directory of subject directories.
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub k_low: usize,
    /// Reference directions per target.
    #[arg(long, default_value_t = 3)]
    pub refs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Train/val/test ratios over subjects.
    #[arg(long, default_value = "8/1/1")]
    pub split: SplitRatios,
    #[arg(long, value_enum, default_value_t = Metric::Geodesic)]
    pub metric: Metric,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["subject", "split"])))]
pub struct ExportLowArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Export one subject directly into `--out`.
    #[arg(long)]
    pub subject: Option<String>,
    /// Export every subject of a split into `--out/<id>`.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides the method named in the config file.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("model").required(true).args(["checkpoint", "method"]).multiple(true)))]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// An untrained method such as `interp`, or a check on the checkpoint's method.
    #[arg(long)]
    pub method: Option<String>,
    /// Reference directions per target for untrained methods.
    #[arg(long)]
    pub refs: Option<usize>,
    /// Directory holding the acquired low-resolution set.
    #[arg(long)]
    pub low: PathBuf,
    /// Target directions as a bvecs file with rows of x, y and z components.
    #[arg(long)]
    pub targets: PathBuf,
    /// b-values of the targets; defaults to the acquired shell.
    #[arg(long)]
    pub target_bvals: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Slices handed to the model per call.
    #[arg(long, default_value_t = 32)]
    pub chunk: usize,
    #[arg(long, value_enum, default_value_t = Metric::Geodesic)]
    pub metric: Metric,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A completed subject directory or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// The matching fully acquired subject directory or directory of them.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Method label; defaults to the one recorded at generation.
    #[arg(long)]
    pub method: Option<String>,
    /// Reference count label; defaults to the one recorded at generation.
    #[arg(long)]
    pub refs: Option<usize>,
    /// Also write colored FA maps of the middle slice into this directory.
    #[arg(long)]
    pub fa_png: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Geodesic,
    Antipodal,
}

impl From<Metric> for DistanceMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Geodesic => DistanceMetric::Geodesic,
            Metric::Antipodal => DistanceMetric::Antipodal,
        }
    }
}

pub fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected XxYxZ, got '{s}'"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|_| format!("bad size '{p}' in '{s}'"))?;
        if *o == 0 {
            return Err(format!("sizes must be positive in '{s}'"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("64x64x9"), Ok([64, 64, 9]));
        assert_eq!(parse_shape("8X4x1"), Ok([8, 4, 1]));
        assert!(parse_shape("64x64").is_err());
        assert!(parse_shape("0x4x4").is_err());
        assert!(parse_shape("ax4x4").is_err());
    }

    #[test]
    fn generate_needs_a_model() {
        let base = ["qup", "generate", "--low", "l", "--targets", "t", "--out", "o"];
        assert!(Cli::try_parse_from(base).is_err());
        let with_method: Vec<&str> = base.iter().copied().chain(["--method", "interp"]).collect();
        assert!(Cli::try_parse_from(with_method).is_ok());
    }

    #[test]
    fn export_needs_exactly_one_selector() {
        let base = ["qup", "dataset", "export-low", "--manifest", "m", "--out", "o"];
        assert!(Cli::try_parse_from(base).is_err());
        let both: Vec<&str> = base.iter().copied().chain(["--subject", "a", "--split", "test"]).collect();
        assert!(Cli::try_parse_from(both).is_err());
        let one: Vec<&str> = base.iter().copied().chain(["--split", "test"]).collect();
        assert!(Cli::try_parse_from(one).is_ok());
    }
}
