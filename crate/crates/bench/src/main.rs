use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mixprec_bench::{
    train, write_csv, BenchError, ModelKind, ModelSpec, Precision, RunConfig, ScalingConfig,
};

/// Train a small classifier on synthetic clusters and log per-step metrics
/// as CSV.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mlp")]
    model: ModelKind,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden_dim: Vec<usize>,
    /// Tokens per example for the attention model.
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long, default_value_t = 2)]
    num_classes: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    /// Initial loss scale; accepts `2^k`.
    #[arg(long, value_parser = parse_scale)]
    loss_scale_init: Option<f32>,
    #[arg(long)]
    growth_interval: Option<u32>,
    #[arg(long)]
    growth_factor: Option<f32>,
    #[arg(long)]
    backoff_factor: Option<f32>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add a parameter checksum column.
    #[arg(long)]
    debug_checksums: bool,
    /// Write 0 in the wall time column so reruns give identical files.
    #[arg(long)]
    zero_wall_time: bool,
}

fn parse_scale(s: &str) -> Result<f32, String> {
    if let Some(exp) = s.strip_prefix("2^") {
        let e: i32 = exp.parse().map_err(|e| format!("bad exponent: {e}"))?;
        return Ok(2f32.powi(e));
    }
    s.parse().map_err(|e| format!("bad number: {e}"))
}

impl Args {
    fn into_config(self) -> RunConfig {
        let model = match self.model {
            ModelKind::Mlp => ModelSpec::mlp(self.feature_dim, self.hidden_dim, self.num_classes),
            ModelKind::Attention => ModelSpec::attention(
                self.feature_dim,
                self.num_heads,
                self.seq_len,
                self.num_classes,
            ),
        };
        let d = ScalingConfig::default();
        RunConfig {
            precision: self.precision,
            steps: self.steps,
            batch_size: self.batch_size,
            model,
            seed: self.seed,
            scaling: ScalingConfig {
                initial_scale: self.loss_scale_init.unwrap_or(d.initial_scale),
                growth_interval: self.growth_interval.unwrap_or(d.growth_interval),
                growth_factor: self.growth_factor.unwrap_or(d.growth_factor),
                backoff_factor: self.backoff_factor.unwrap_or(d.backoff_factor),
            },
            lr: self.lr,
            out: self.out,
            debug_checksums: self.debug_checksums,
            zero_wall_time: self.zero_wall_time,
        }
    }
}

fn run(config: &RunConfig) -> Result<(), BenchError> {
    config.validate()?;
    // open the destination first so a bad path fails before training
    let file = config.out.as_ref().map(File::create).transpose()?;
    let output = train(config)?;
    match file {
        Some(f) => write_csv(BufWriter::new(f), &output.records, config.debug_checksums)?,
        None => write_csv(io::stdout().lock(), &output.records, config.debug_checksums)?,
    }
    eprintln!(
        "final loss {} accuracy {:.4}",
        output.final_loss().unwrap_or(f32::NAN),
        output.accuracy
    );
    Ok(())
}

fn main() -> ExitCode {
    let config = Args::parse().into_config();
    match run(&config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
