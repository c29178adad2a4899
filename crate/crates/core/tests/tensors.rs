use mixprec::precision::full_precision_tensor;
use mixprec::tensor::bytes_of;
use mixprec::{promote, DType, Scalar, Tensor};
use proptest::prelude::*;

fn dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F16), Just(DType::BF16), Just(DType::F32)]
}

fn row(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-1e4f32..1e4, len)
}

/// Spacing of `dtype` just above 1.
fn ulp_at_one(dtype: DType) -> f64 {
    dtype.epsilon() as f64
}

proptest! {
    #[test]
    fn full_precision_softmax_sums_to_one(rows in proptest::collection::vec(row(8..9), 1..5), out in dtype()) {
        let n = rows.len();
        let x = Tensor::new(vec![n, 8], out, rows.concat()).unwrap();
        let y = full_precision_tensor(|t| t.softmax(1), &x, out).unwrap();
        prop_assert_eq!(y.dtype(), out);
        for r in y.data().chunks(8) {
            let total: f64 = r.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 8.0 * ulp_at_one(out), "row sums to {}", total);
        }
    }

    #[test]
    fn softmax_rows_of_any_length(v in row(1..64)) {
        let n = v.len();
        let x = Tensor::new(vec![n], DType::F16, v).unwrap();
        let y = full_precision_tensor(|t| t.softmax(0), &x, DType::F16).unwrap();
        let total: f64 = y.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 8.0 * ulp_at_one(DType::F16));
    }

    #[test]
    fn binary_ops_follow_promotion(a in dtype(), b in dtype(), x in -100f32..100.0, y in 1f32..100.0) {
        let lhs = Tensor::new(vec![2], a, vec![x, -x]).unwrap();
        let rhs = Tensor::new(vec![2], b, vec![y, y]).unwrap();
        let want = promote(a, b);
        for out in [lhs.add(&rhs), lhs.sub(&rhs), lhs.mul(&rhs), lhs.div(&rhs)] {
            let out = out.unwrap();
            prop_assert_eq!(out.dtype(), want);
            prop_assert!(out.data().iter().all(|&v| mixprec::quantize(v, want).to_bits() == v.to_bits()));
        }
        prop_assert_eq!(lhs.mul_scalar(Scalar::weak(y)).unwrap().dtype(), a);
        prop_assert_eq!(lhs.mul_scalar(Scalar::strong(y, DType::F32)).unwrap().dtype(), DType::F32);
    }

    #[test]
    fn bytes_follow_dtype_width(n in 0usize..50, d in dtype()) {
        prop_assert_eq!(bytes_of(&Tensor::zeros(vec![n, 2], d)), n * 2 * d.byte_width());
    }
}

#[test]
fn islands_prevent_overflow() {
    let x = Tensor::new(vec![2], DType::F16, vec![60000.0, 60000.0]).unwrap();
    assert_eq!(x.mean(None).unwrap().item(), Some(f32::INFINITY));
    let m = full_precision_tensor(|t| t.mean(None), &x, DType::F16).unwrap();
    assert_eq!((m.dtype(), m.item()), (DType::F16, Some(60000.0)));
}
