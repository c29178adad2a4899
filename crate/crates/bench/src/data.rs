//! Gaussian-cluster classification batches.

use mixprec::{Tensor, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Distance of every cluster center from the origin, in units of the
/// per-coordinate noise.
pub const CLUSTER_RADIUS: f32 = 4.0;

const CENTER_STREAM: u64 = 0;
const EVAL_STREAM: u64 = u64::MAX;

/// A fixed set of class centers; batches are drawn around them.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    seed: u64,
    example_shape: Vec<usize>,
    centers: Vec<Vec<f32>>,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SyntheticTask {
    /// `example_shape` is `[features]` or `[tokens, features]`; every token
    /// of an example is drawn around the same center.
    pub fn new(seed: u64, example_shape: Vec<usize>, num_classes: usize) -> Self {
        let features = *example_shape.last().expect("non-empty example shape");
        let mut r = rng(seed, CENTER_STREAM);
        let centers = (0..num_classes)
            .map(|_| {
                let v: Vec<f32> = (0..features).map(|_| r.sample(StandardNormal)).collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f32>()
                    .sqrt()
                    .max(f32::MIN_POSITIVE);
                v.into_iter().map(|x| x * CLUSTER_RADIUS / norm).collect()
            })
            .collect();
        Self {
            seed,
            example_shape,
            centers,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    /// Training batch for `step`, as `{x, y}` with `F32` inputs and `I32`
    /// labels.
    pub fn batch(&self, step: u64, batch_size: usize) -> Tree {
        self.draw(&mut rng(self.seed, step + 1), batch_size)
    }

    /// A held-out batch that no training step sees.
    pub fn eval_batch(&self, batch_size: usize) -> Tree {
        self.draw(&mut rng(self.seed, EVAL_STREAM), batch_size)
    }

    fn draw(&self, r: &mut ChaCha8Rng, batch_size: usize) -> Tree {
        let features = *self.example_shape.last().unwrap();
        let tokens: usize = self.example_shape.iter().product::<usize>() / features;
        let mut x = Vec::with_capacity(batch_size * tokens * features);
        let mut y = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let label = r.random_range(0..self.centers.len());
            y.push(label as i32);
            for _ in 0..tokens {
                for &c in &self.centers[label] {
                    let noise: f32 = r.sample(StandardNormal);
                    x.push(c + noise);
                }
            }
        }
        let mut shape = vec![batch_size];
        shape.extend(&self.example_shape);
        Tree::map([
            (
                "x",
                Tree::tensor(Tensor::from_f32(shape, x).expect("consistent shape")),
            ),
            (
                "y",
                Tree::tensor(Tensor::from_i32(vec![batch_size], &y).expect("consistent shape")),
            ),
        ])
    }
}
