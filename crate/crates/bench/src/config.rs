use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mixprec::DType;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F16,
    BF16,
}

impl Precision {
    pub fn is_mixed(self) -> bool {
        self != Precision::F32
    }

    /// The dtype the forward and backward passes run in.
    pub fn compute_dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F16 => DType::F16,
            Precision::BF16 => DType::BF16,
        }
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f16" => Ok(Precision::F16),
            "bf16" => Ok(Precision::BF16),
            other => Err(format!(
                "unknown precision `{other}` (expected f32, f16 or bf16)"
            )),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::BF16 => "bf16",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Attention,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "attention" => Ok(ModelKind::Attention),
            other => Err(format!(
                "unknown model `{other}` (expected mlp or attention)"
            )),
        }
    }
}

/// Architecture of the model being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Width of each input vector (one token for the attention model).
    pub feature_dim: usize,
    /// Hidden widths of the MLP; ignored by the attention model.
    pub hidden: Vec<usize>,
    pub num_heads: usize,
    /// Tokens per example for the attention model.
    pub seq_len: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(feature_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            feature_dim,
            hidden,
            num_heads: 1,
            seq_len: 1,
            num_classes,
        }
    }

    pub fn attention(
        feature_dim: usize,
        num_heads: usize,
        seq_len: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            kind: ModelKind::Attention,
            feature_dim,
            hidden: Vec::new(),
            num_heads,
            seq_len,
            num_classes,
        }
    }

    /// Layer widths of the MLP from input to logits.
    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.feature_dim];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        widths
    }

    /// Shape of one example, without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::Mlp => vec![self.feature_dim],
            ModelKind::Attention => vec![self.seq_len, self.feature_dim],
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |msg: String| Err(BenchError::Config(msg));
        if self.feature_dim == 0 {
            return invalid("feature dim must be positive".into());
        }
        if self.num_classes < 2 {
            return invalid("need at least two classes".into());
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.hidden.contains(&0) {
                    return invalid("hidden widths must be positive".into());
                }
            }
            ModelKind::Attention => {
                if self.num_heads == 0 || !self.feature_dim.is_multiple_of(self.num_heads) {
                    return invalid(format!(
                        "feature dim {} is not divisible by {} heads",
                        self.feature_dim, self.num_heads
                    ));
                }
                if self.seq_len == 0 {
                    return invalid("sequence length must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Loss-scaling constants for mixed-precision runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub initial_scale: f32,
    pub growth_interval: u32,
    pub growth_factor: f32,
    pub backoff_factor: f32,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        let d = mixprec::LossScaling::default();
        Self {
            initial_scale: d.loss_scale(),
            growth_interval: d.growth_interval(),
            growth_factor: d.growth_factor(),
            backoff_factor: d.backoff_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub precision: Precision,
    pub steps: usize,
    pub batch_size: usize,
    pub model: ModelSpec,
    pub seed: u64,
    pub scaling: ScalingConfig,
    pub lr: f32,
    pub out: Option<PathBuf>,
    pub debug_checksums: bool,
    /// Write 0 instead of the measured wall time so repeated runs produce
    /// identical files.
    pub zero_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            steps: 500,
            batch_size: 32,
            model: ModelSpec::mlp(16, vec![32], 2),
            seed: 0,
            scaling: ScalingConfig::default(),
            lr: 0.01,
            out: None,
            debug_checksums: false,
            zero_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |msg: &str| Err(BenchError::Config(msg.to_string()));
        if self.steps == 0 {
            return invalid("steps must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        self.model.validate()?;
        self.loss_scaling().map(|_| ())
    }

    pub fn loss_scaling(&self) -> Result<mixprec::LossScaling, BenchError> {
        let s = &self.scaling;
        mixprec::LossScaling::new(
            s.initial_scale,
            s.growth_interval,
            s.growth_factor,
            s.backoff_factor,
            mixprec::LossScaling::default().min_scale(),
        )
        .map_err(|e| BenchError::Config(e.to_string()))
    }
}
