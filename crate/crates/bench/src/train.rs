use std::io::Write;
use std::time::Instant;

use mixprec::{filter_value_and_grad, optimizer_update, Leaf, OptimizerState, Tree};

use crate::config::RunConfig;
use crate::data::SyntheticTask;
use crate::model::{accuracy, build_model, loss};
use crate::BenchError;

/// Examples in the held-out batch used for accuracy.
pub const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Unscaled training loss of this step.
    pub loss: f32,
    /// Loss scale used for this step (before adjusting).
    pub scale: f32,
    pub grads_finite: bool,
    pub activation_bytes: usize,
    pub wall_time_s: f64,
    /// Checksum of the parameters after this step's update.
    pub param_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub records: Vec<StepRecord>,
    pub initial_checksum: u64,
    pub model: Tree,
    /// Held-out accuracy of the final model, in the training precision.
    pub accuracy: f32,
}

impl TrainOutput {
    /// First finite loss of the run.
    pub fn initial_loss(&self) -> Option<f32> {
        self.records.iter().map(|r| r.loss).find(|l| l.is_finite())
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.records.last().map(|r| r.loss)
    }
}

/// FNV-1a over the shapes, dtypes and payload bits of every tensor leaf.
pub fn param_checksum(model: &Tree) -> u64 {
    const PRIME: u64 = 0x100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
    };
    for (path, leaf) in model.leaves() {
        eat(path.as_bytes());
        if let Leaf::Tensor(t) = leaf {
            eat(t.dtype().name().as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
    }
    h
}

/// Runs the training loop described by `config` (which must be valid).
pub fn train(config: &RunConfig) -> Result<TrainOutput, BenchError> {
    config.validate()?;
    let spec = &config.model;
    let task = SyntheticTask::new(config.seed, spec.input_shape(), spec.num_classes);
    let mut model = build_model(spec, config.seed);
    let mut opt = OptimizerState::adam(&model, config.lr);
    let mut scaling = config.loss_scaling()?;
    let initial_checksum = param_checksum(&model);
    let dtype = config.precision.compute_dtype();

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let started = Instant::now();
        let batch = task.batch(step as u64, config.batch_size);
        let transform = filter_value_and_grad(loss, &scaling, config.precision.is_mixed());
        let transform = if config.precision.is_mixed() {
            transform.half_dtype(dtype)?
        } else {
            transform
        };
        let result = transform.call(&model, &batch)?;
        (model, opt) = optimizer_update(&model, &opt, &result.grads, result.grads_finite)?;
        let wall_time_s = if config.zero_wall_time {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        records.push(StepRecord {
            step,
            loss: result.value.and_then(|v| v.item()).unwrap_or(f32::NAN),
            scale: scaling.loss_scale(),
            grads_finite: result.grads_finite,
            activation_bytes: result.activation_bytes,
            wall_time_s,
            param_checksum: param_checksum(&model),
        });
        scaling = result.scaling;
    }

    let accuracy = accuracy(&model, &task.eval_batch(EVAL_BATCH), dtype)?;
    Ok(TrainOutput {
        records,
        initial_checksum,
        model,
        accuracy,
    })
}

/// Writes the per-step CSV. The checksum column is present only when
/// `with_checksums` is set.
pub fn write_csv<W: Write>(
    out: W,
    records: &[StepRecord],
    with_checksums: bool,
) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec![
        "step",
        "loss",
        "scale",
        "grads_finite",
        "activation_bytes",
        "wall_time_s",
    ];
    if with_checksums {
        header.push("param_checksum");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            r.loss.to_string(),
            f64::from(r.scale).to_string(),
            u8::from(r.grads_finite).to_string(),
            r.activation_bytes.to_string(),
            r.wall_time_s.to_string(),
        ];
        if with_checksums {
            row.push(format!("{:016x}", r.param_checksum));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, finite: bool) -> StepRecord {
        StepRecord {
            step,
            loss: 0.5,
            scale: 1024.0,
            grads_finite: finite,
            activation_bytes: 10,
            wall_time_s: 0.0,
            param_checksum: 0xab,
        }
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[record(0, false), record(1, true)], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,loss,scale,grads_finite,activation_bytes,wall_time_s,param_checksum\n\
             0,0.5,1024,0,10,0,00000000000000ab\n\
             1,0.5,1024,1,10,0,00000000000000ab\n"
        );
    }

    #[test]
    fn checksum_sees_every_bit() {
        let spec = crate::ModelSpec::mlp(3, vec![4], 2);
        let a = build_model(&spec, 0);
        let b = a.map_leaves(|leaf| match leaf {
            Leaf::Tensor(t) if t.numel() == 12 => {
                let mut v = t.to_vec();
                v[5] = f32::from_bits(v[5].to_bits() ^ 1);
                Leaf::Tensor(mixprec::Tensor::from_f32(t.shape().to_vec(), v).unwrap())
            }
            other => other.clone(),
        });
        assert_eq!(param_checksum(&a), param_checksum(&a.clone()));
        assert_ne!(param_checksum(&a), param_checksum(&b));
    }
}
