use mixprec::{
    cast_to_float32, filter_value_and_grad, value_and_grad, DType, LossScaling, Result, Tensor,
    Tree,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::Oracle;

#[test]
fn adjust_replays_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seq in 0..1000 {
        let interval = rng.random_range(1..=40u32);
        let min_exp = rng.random_range(0..4);
        let start_exp = rng.random_range(min_exp..=127);
        let min_scale = 2f32.powi(min_exp);
        let mut s = LossScaling::new(2f32.powi(start_exp), interval, 2.0, 0.5, min_scale).unwrap();
        let mut o = Oracle {
            scale: s.loss_scale() as f64,
            counter: 0,
        };
        let p_bad: f64 = rng.random_range(0.0..0.4);
        for i in 0..10_000 {
            let finite = !rng.random_bool(p_bad);
            s = s.adjust(finite);
            o = o.step(finite, interval as u64, 2.0, 0.5, min_scale as f64);
            assert_eq!(
                (s.loss_scale() as f64, s.steps_since_growth() as u64),
                (o.scale, o.counter),
                "sequence {seq} step {i}"
            );
            assert!(s.loss_scale().is_finite() && s.loss_scale() >= min_scale);
            assert!(s.steps_since_growth() < s.growth_interval());
        }
    }
}

#[test]
fn scale_stays_a_power_of_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = LossScaling::new(1.0, 3, 2.0, 0.5, 1.0).unwrap();
    for _ in 0..5000 {
        s = s.adjust(rng.random_bool(0.3));
        let bits = s.loss_scale().to_bits();
        assert_eq!(
            bits & 0x007f_ffff,
            0,
            "{} is not a power of two",
            s.loss_scale()
        );
    }
}

fn f32_tree() -> impl Strategy<Value = Tree> {
    let leaf = proptest::collection::vec(-1e4f32..1e4, 1..6)
        .prop_map(|v| Tree::tensor(Tensor::from_f32(vec![v.len()], v).unwrap()));
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Tree::seq),
            proptest::collection::vec(inner, 0..4).prop_map(|kids| {
                Tree::map(
                    kids.into_iter()
                        .enumerate()
                        .map(|(i, k)| (format!("k{i}"), k)),
                )
            }),
        ]
    })
}

proptest! {
    #[test]
    fn unscale_inverts_scale_in_f32(t in f32_tree(), exp in 0i32..40) {
        let s = LossScaling::with_scale(2f32.powi(exp)).unwrap();
        prop_assert!(s.unscale(&s.scale(&t)).bitwise_eq(&cast_to_float32(&t)));
    }
}

fn mlp_loss(p: &Tree, a: &Tree) -> Result<Tensor> {
    let h = a
        .tensor_at("x")?
        .matmul(p.tensor_at("w1")?)?
        .add(p.tensor_at("b1")?)?
        .gelu()?;
    let logits = h.matmul(p.tensor_at("w2")?)?.add(p.tensor_at("b2")?)?;
    let labels = a.tensor_at("y")?;
    mixprec::full_precision_tensor(|l| l.cross_entropy(labels), &logits, logits.dtype())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, r: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f32(shape, (0..n).map(|_| rng.random_range(-r..r)).collect()).unwrap()
}

#[test]
fn half_gradients_track_full_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for half in [DType::F16, DType::BF16] {
        for _ in 0..20 {
            let (d, h, c, b) = (rng.random_range(2..12), rng.random_range(4..24), 3, 16);
            let params = Tree::map([
                (
                    "w1",
                    Tree::tensor(uniform(&mut rng, vec![d, h], 1.0 / (d as f32).sqrt())),
                ),
                ("b1", Tree::tensor(uniform(&mut rng, vec![h], 0.1))),
                (
                    "w2",
                    Tree::tensor(uniform(&mut rng, vec![h, c], 1.0 / (h as f32).sqrt())),
                ),
                ("b2", Tree::tensor(uniform(&mut rng, vec![c], 0.1))),
            ]);
            let labels: Vec<i32> = (0..b).map(|_| rng.random_range(0..c as i32)).collect();
            let args = Tree::map([
                ("x", Tree::tensor(uniform(&mut rng, vec![b, d], 1.0))),
                (
                    "y",
                    Tree::tensor(Tensor::from_i32(vec![b], &labels).unwrap()),
                ),
            ]);
            let full = value_and_grad(mlp_loss, &params, &args).unwrap().grads;
            let mixed = filter_value_and_grad(mlp_loss, &LossScaling::default(), true)
                .half_dtype(half)
                .unwrap()
                .call(&params, &args)
                .unwrap();
            assert!(mixed.grads_finite);
            let tol = if half == DType::F16 { 5e-2 } else { 1e-1 };
            for ((path, g32), (_, g16)) in full
                .float_leaves()
                .into_iter()
                .zip(mixed.grads.float_leaves())
            {
                assert_eq!(g16.dtype(), DType::F32);
                let peak = g32.data().iter().fold(0f32, |m, v| m.max(v.abs()));
                if peak <= 1e-4 {
                    continue;
                }
                let diff = g32
                    .data()
                    .iter()
                    .zip(g16.data())
                    .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
                assert!(
                    diff / peak <= tol,
                    "{half} {path}: relative error {}",
                    diff / peak
                );
            }
        }
    }
}

#[test]
fn overflow_is_reported_as_non_finite_f32_grads() {
    let params = Tree::map([(
        "w",
        Tree::tensor(Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap()),
    )]);
    let f = |p: &Tree, _: &Tree| {
        p.tensor_at("w")?
            .mul_scalar(mixprec::Scalar::weak(3000.0))?
            .sum(None)
    };
    let out = filter_value_and_grad(f, &LossScaling::with_scale(2f32.powi(20)).unwrap(), true)
        .half_dtype(DType::F16)
        .unwrap()
        .call(&params, &Tree::empty_map())
        .unwrap();
    assert!(!out.grads_finite);
    assert!(out
        .grads
        .float_leaves()
        .iter()
        .all(|(_, g)| g.dtype() == DType::F32));
    assert_eq!(out.scaling.loss_scale(), 2f32.powi(19));
    assert_eq!(out.value.unwrap().item(), Some(18000.0));
}
