use mixprec::numerics::{f16_bits_to_f32, f32_to_f16_bits};
use mixprec::{promote, promote_with_scalar, quantize, DType, Scalar};
use proptest::prelude::*;

mod support;
use support::{quantize_rows, same_float};

#[test]
fn reference_table_matches() {
    let rows = quantize_rows();
    assert!(rows.len() >= 10_000, "only {} rows", rows.len());
    for (x, want16, want_bf) in rows {
        assert!(
            same_float(quantize(x, DType::F16), want16),
            "f16 {x:e} ({:08x})",
            x.to_bits()
        );
        assert!(
            same_float(quantize(x, DType::BF16), want_bf),
            "bf16 {x:e} ({:08x})",
            x.to_bits()
        );
    }
}

#[test]
fn f16_bit_patterns_round_trip() {
    for h in 0..=u16::MAX {
        let x = f16_bits_to_f32(h);
        if !x.is_nan() {
            assert_eq!(f32_to_f16_bits(x), h);
        }
    }
}

fn join(a: DType, b: DType) -> DType {
    use DType::*;
    // rows and columns in the order F16, BF16, F32, I32
    const TABLE: [[DType; 4]; 4] = [
        [F16, F32, F32, F16],
        [F32, BF16, F32, BF16],
        [F32, F32, F32, F32],
        [F16, BF16, F32, I32],
    ];
    let idx = |d: DType| DType::ALL.iter().position(|&x| x == d).unwrap();
    TABLE[idx(a)][idx(b)]
}

#[test]
fn promotion_matches_join_table() {
    for a in DType::ALL {
        for b in DType::ALL {
            assert_eq!(promote(a, b), join(a, b), "{a} ∨ {b}");
            for c in DType::ALL {
                assert_eq!(promote(promote(a, b), c), promote(a, promote(b, c)));
            }
        }
        assert_eq!(promote_with_scalar(a, &Scalar::weak(2.5)), a);
        for s in DType::ALL.into_iter().filter(|d| d.is_float()) {
            assert_eq!(promote_with_scalar(a, &Scalar::strong(1.0, s)), join(a, s));
        }
    }
    assert_eq!(promote(DType::F16, DType::BF16), DType::F32);
}

fn float_dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F16), Just(DType::BF16), Just(DType::F32)]
}

fn non_nan() -> impl Strategy<Value = f32> {
    any::<u32>()
        .prop_map(f32::from_bits)
        .prop_filter("not NaN", |x| !x.is_nan())
}

proptest! {
    #[test]
    fn quantize_is_idempotent(x in non_nan(), d in float_dtype()) {
        let q = quantize(x, d);
        prop_assert_eq!(quantize(q, d).to_bits(), q.to_bits());
    }

    #[test]
    fn quantize_is_monotone(a in non_nan(), b in non_nan(), d in float_dtype()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo, d) <= quantize(hi, d));
    }

    #[test]
    fn quantize_is_odd(x in non_nan(), d in float_dtype()) {
        prop_assert_eq!(quantize(-x, d).to_bits(), (-quantize(x, d)).to_bits());
    }
}
