//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use mixprec::{Result, Tensor, Tree};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const QUANTIZE_TABLE: &str = include_str!("../data/quantize_reference.txt");

/// Rows of `(input, f16 result, bf16 result)` from the reference table.
pub fn quantize_rows() -> Vec<(f32, f32, f32)> {
    QUANTIZE_TABLE
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            let bits: Vec<f32> = line
                .split_whitespace()
                .map(|h| f32::from_bits(u32::from_str_radix(h, 16).unwrap()))
                .collect();
            (bits[0], bits[1], bits[2])
        })
        .collect()
}

pub fn same_float(a: f32, b: f32) -> bool {
    (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits()
}

pub const STEP: f64 = 1e-3;

pub struct Mlp {
    pub widths: Vec<usize>,
    pub batch: usize,
    pub params: Tree,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Mlp {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let depth = rng.random_range(1..=3);
            let mut widths = vec![rng.random_range(2..=10)];
            for _ in 1..depth {
                widths.push(rng.random_range(2..=16));
            }
            widths.push(rng.random_range(2..=5));
            let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            if count > 1000 {
                continue;
            }
            let layers = widths.windows(2).map(|w| {
                let scale = 1.0 / (w[0] as f32).sqrt();
                let weights = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-scale..scale))
                    .collect();
                let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
                Tree::map([
                    (
                        "w",
                        Tree::tensor(Tensor::from_f32(vec![w[0], w[1]], weights).unwrap()),
                    ),
                    (
                        "b",
                        Tree::tensor(Tensor::from_f32(vec![w[1]], bias).unwrap()),
                    ),
                ])
            });
            let params = Tree::map([("layers", Tree::seq(layers.collect::<Vec<_>>()))]);
            let batch = rng.random_range(1..=6);
            let x = (0..batch * widths[0])
                .map(|_| rng.random_range(-1.5..1.5f32) as f64)
                .collect();
            let classes = *widths.last().unwrap();
            let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            return Self {
                widths,
                batch,
                params,
                x,
                labels,
            };
        }
    }

    pub fn args(&self) -> Tree {
        let x: Vec<f32> = self.x.iter().map(|&v| v as f32).collect();
        let y: Vec<i32> = self.labels.iter().map(|&l| l as i32).collect();
        Tree::map([
            (
                "x",
                Tree::tensor(Tensor::from_f32(vec![self.batch, self.widths[0]], x).unwrap()),
            ),
            (
                "y",
                Tree::tensor(Tensor::from_i32(vec![self.batch], &y).unwrap()),
            ),
        ])
    }

    /// Mean cross-entropy in f64 over the flattened parameters.
    pub fn loss64(&self, flat: &[f64]) -> f64 {
        let mut h = self.x.clone();
        let mut offset = 0;
        let layers = self.widths.len() - 1;
        for (i, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &flat[offset..offset + n_in * n_out];
            let bias = &flat[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = vec![0.0; self.batch * n_out];
            for r in 0..self.batch {
                for c in 0..n_out {
                    let mut acc = bias[c];
                    for k in 0..n_in {
                        acc += h[r * n_in + k] * weights[k * n_out + c];
                    }
                    next[r * n_out + c] = if i + 1 < layers { gelu64(acc) } else { acc };
                }
            }
            h = next;
        }
        let classes = *self.widths.last().unwrap();
        let mut total = 0.0;
        for (r, &label) in self.labels.iter().enumerate() {
            let row = &h[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total / self.batch as f64
    }
}

pub fn mlp_loss(p: &Tree, a: &Tree) -> Result<Tensor> {
    let Some(Tree::Seq(layers)) = p.get("layers") else {
        unreachable!()
    };
    let mut h = a.tensor_at("x")?.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = h
            .matmul(layer.tensor_at("w")?)?
            .add(layer.tensor_at("b")?)?;
        if i + 1 < layers.len() {
            h = h.gelu()?;
        }
    }
    h.cross_entropy(a.tensor_at("y")?)
}

pub fn flatten(t: &Tree) -> Vec<f64> {
    t.float_leaves()
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect()
}

/// Straight-line model of the dynamic scaling rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oracle {
    pub scale: f64,
    pub counter: u64,
}

impl Oracle {
    pub fn step(self, finite: bool, interval: u64, growth: f64, backoff: f64, min: f64) -> Oracle {
        if !finite {
            return Oracle {
                scale: f64::max(self.scale * backoff, min),
                counter: 0,
            };
        }
        if self.counter + 1 < interval {
            return Oracle {
                scale: self.scale,
                counter: self.counter + 1,
            };
        }
        let grown = self.scale * growth;
        let scale = if grown > f32::MAX as f64 {
            self.scale
        } else {
            grown
        };
        Oracle { scale, counter: 0 }
    }
}
