//! The two benchmark models: a plain MLP and a self-attention block with
//! full-precision layernorm and softmax, followed by mean pooling and a
//! linear classifier.

use mixprec::precision::full_precision_tensor;
use mixprec::{cast_tree, DType, Result, Scalar, Tensor, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelKind, ModelSpec};

const INIT_STREAM: u64 = u64::MAX - 1;

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tree {
    let std = (fan_in as f32).sqrt().recip();
    let w: Vec<f32> = (0..fan_in * fan_out)
        .map(|_| std * rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tree::map([
        (
            "w",
            Tree::tensor(Tensor::from_f32(vec![fan_in, fan_out], w).unwrap()),
        ),
        ("b", Tree::tensor(Tensor::zeros(vec![fan_out], DType::F32))),
    ])
}

/// Deterministic `F32` parameters for `spec`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    match spec.kind {
        ModelKind::Mlp => {
            let widths = spec.mlp_widths();
            let layers = widths.windows(2).map(|w| linear(&mut rng, w[0], w[1]));
            Tree::map([("layers", Tree::seq(layers))])
        }
        ModelKind::Attention => {
            let f = spec.feature_dim;
            let block = Tree::map([
                ("dense_qs", linear(&mut rng, f, f)),
                ("dense_ks", linear(&mut rng, f, f)),
                ("dense_vs", linear(&mut rng, f, f)),
                ("dense_o", linear(&mut rng, f, f)),
                (
                    "layer_norm",
                    Tree::map([
                        ("gain", Tree::tensor(Tensor::full(vec![f], 1.0, DType::F32))),
                        ("bias", Tree::tensor(Tensor::zeros(vec![f], DType::F32))),
                    ]),
                ),
                (
                    "num_heads",
                    Tree::tensor(Tensor::from_i32(vec![], &[spec.num_heads as i32]).unwrap()),
                ),
            ]);
            Tree::map([
                ("block", block),
                ("head", linear(&mut rng, f, spec.num_classes)),
                ("pooling", Tree::opaque("mean")),
            ])
        }
    }
}

fn dense(p: &Tree, x: &Tensor) -> Result<Tensor> {
    x.matmul(p.tensor_at("w")?)?.add(p.tensor_at("b")?)
}

fn mlp(model: &Tree, x: &Tensor) -> Result<Tensor> {
    let Some(Tree::Seq(layers)) = model.get("layers") else {
        return Err(mixprec::Error::Message(
            "model has no `layers` sequence".into(),
        ));
    };
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = dense(layer, &h)?;
        if i + 1 < layers.len() {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Self-attention over `[batch, tokens, features]` with a residual
/// connection.
fn attention_block(p: &Tree, x: &Tensor) -> Result<Tensor> {
    let heads = p.tensor_at("num_heads")?.item().unwrap_or(1.0) as usize;
    let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fh = f / heads;
    let dtype = x.dtype();

    let ln = p.lookup("layer_norm").expect("layer_norm parameters");
    let (gain, bias) = (ln.tensor_at("gain")?, ln.tensor_at("bias")?);
    let normed = full_precision_tensor(|x| x.layernorm(gain, bias), x, dtype)?;

    // [b, t, (h fh)] -> [b, h, t, fh]
    let split = |name: &str| -> Result<Tensor> {
        dense(p.lookup(name).expect("projection"), &normed)?
            .reshape(vec![b, t, heads, fh])?
            .permute(vec![0, 2, 1, 3])
    };
    let (q, k, v) = (split("dense_qs")?, split("dense_ks")?, split("dense_vs")?);

    let scores = q
        .matmul(&k.transpose()?)?
        .div_scalar(Scalar::weak((fh as f32).sqrt()))?;
    let weights = full_precision_tensor(|s| s.softmax(3), &scores, scores.dtype())?;
    let mixed = weights
        .matmul(&v)?
        .permute(vec![0, 2, 1, 3])?
        .reshape(vec![b, t, f])?;
    dense(p.lookup("dense_o").expect("projection"), &mixed)?.add(x)
}

/// Class logits for a batch of inputs.
pub fn forward(model: &Tree, x: &Tensor) -> Result<Tensor> {
    match model.get("block") {
        None => mlp(model, x),
        Some(block) => {
            let h = attention_block(block, x)?;
            let pooled = full_precision_tensor(|h| h.mean(Some(1)), &h, h.dtype())?;
            dense(model.lookup("head").expect("head parameters"), &pooled)
        }
    }
}

/// Mean cross-entropy of the model on `{x, y}`, accumulated in full
/// precision and returned in the logits' dtype.
pub fn loss(model: &Tree, batch: &Tree) -> Result<Tensor> {
    let logits = forward(model, batch.tensor_at("x")?)?;
    let labels = batch.tensor_at("y")?;
    full_precision_tensor(|l| l.cross_entropy(labels), &logits, logits.dtype())
}

/// Fraction of examples whose largest logit is the label, evaluated with
/// parameters and inputs cast to `dtype`.
pub fn accuracy(model: &Tree, batch: &Tree, dtype: DType) -> Result<f32> {
    let model = cast_tree(model, dtype)?;
    let batch = cast_tree(batch, dtype)?;
    let logits = forward(&model, batch.tensor_at("x")?)?;
    let labels = batch.tensor_at("y")?;
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels.data())
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label as usize
        })
        .count();
    Ok(correct as f32 / labels.numel() as f32)
}
