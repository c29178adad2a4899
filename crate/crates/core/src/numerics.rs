//! Numeric formats, bit-exact rounding into the 16-bit float formats, and the
//! dtype promotion lattice.
//!
//! Payloads are always held as `f32`. A value "belongs" to a narrower format
//! when [`quantize`] is the identity on it; every tensor operation computes in
//! binary32 and then rounds its result through the output dtype, which is how
//! half-precision overflow and underflow are reproduced on any host.
//!
//! The lattice has `I32` at the bottom, the two incomparable 16-bit formats in
//! the middle and `F32` on top:
//!
//! ```text
//!          F32
//!         /   \
//!       F16   BF16
//!         \   /
//!          I32
//! ```
//!
//! Literal constants are *weak* scalars and sit below everything: combining a
//! weak scalar with a tensor never changes the tensor's dtype.

use std::fmt;

/// Element format of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    /// IEEE 754 binary16: 5 exponent bits, 10 mantissa bits.
    F16,
    /// bfloat16: 8 exponent bits, 7 mantissa bits.
    BF16,
    /// IEEE 754 binary32, the "full precision" of this crate.
    F32,
    /// 32-bit signed integer.
    I32,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F16, DType::BF16, DType::F32, DType::I32];

    /// Storage width in bytes.
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 | DType::I32 => 4,
        }
    }

    pub const fn is_float(self) -> bool {
        !matches!(self, DType::I32)
    }

    /// Spacing between 1.0 and the next representable value.
    ///
    /// # Panics
    /// For `I32`.
    pub fn epsilon(self) -> f32 {
        match self {
            DType::F16 => 2f32.powi(-10),
            DType::BF16 => 2f32.powi(-7),
            DType::F32 => f32::EPSILON,
            DType::I32 => panic!("integer dtype has no epsilon"),
        }
    }

    /// Largest finite value of a float dtype.
    ///
    /// # Panics
    /// For `I32`.
    pub fn max_finite(self) -> f32 {
        match self {
            DType::F16 => 65504.0,
            DType::BF16 => f32::from_bits(0x7F7F_0000),
            DType::F32 => f32::MAX,
            DType::I32 => panic!("integer dtype has no float range"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F16 => "f16",
            DType::BF16 => "bf16",
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f16" | "float16" => Ok(DType::F16),
            "bf16" | "bfloat16" => Ok(DType::BF16),
            "f32" | "float32" => Ok(DType::F32),
            "i32" | "int32" => Ok(DType::I32),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

/// A scalar operand.
///
/// Weak scalars model literal constants: they adopt the dtype of whatever
/// tensor they are combined with. Strong scalars carry their own dtype and
/// take part in promotion like a tensor would.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalar {
    pub value: f32,
    pub dtype: DType,
    pub weak: bool,
}

impl Scalar {
    pub fn weak(value: f32) -> Self {
        Self {
            value,
            dtype: DType::F32,
            weak: true,
        }
    }

    /// A strong scalar; the value is rounded into `dtype`.
    pub fn strong(value: f32, dtype: DType) -> Self {
        let value = if dtype.is_float() {
            quantize(value, dtype)
        } else {
            value.trunc()
        };
        Self {
            value,
            dtype,
            weak: false,
        }
    }
}

/// Rounds `value` to the nearest value representable in `target`
/// (round-to-nearest, ties-to-even, with subnormals). Overflow goes to
/// signed infinity and NaN stays NaN.
///
/// # Panics
/// If `target` is not a float dtype; integers are never quantized.
#[inline]
pub fn quantize(value: f32, target: DType) -> f32 {
    match target {
        DType::F32 => value,
        DType::F16 => f16_bits_to_f32(f32_to_f16_bits(value)),
        DType::BF16 => f32::from_bits((f32_to_bf16_bits(value) as u32) << 16),
        DType::I32 => panic!("quantize called with integer dtype"),
    }
}

/// True if `value` is a fixed point of [`quantize`] for `dtype` (NaN included).
pub fn is_representable(value: f32, dtype: DType) -> bool {
    if value.is_nan() {
        return true;
    }
    if dtype.is_float() {
        quantize(value, dtype).to_bits() == value.to_bits()
    } else {
        value.fract() == 0.0 && value >= i32::MIN as f32 && value <= i32::MAX as f32
    }
}

/// Round-to-nearest-even on the `shift` low bits of `m`.
#[inline]
fn round_shift(m: u32, shift: u32) -> u32 {
    let kept = m >> shift;
    let rem = m & ((1 << shift) - 1);
    let half = 1 << (shift - 1);
    if rem > half || (rem == half && kept & 1 == 1) {
        kept + 1
    } else {
        kept
    }
}

pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        return if man == 0 {
            sign | 0x7c00
        } else {
            sign | 0x7e00
        };
    }
    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1f {
        return sign | 0x7c00;
    }
    if half_exp <= 0 {
        // below 2^-25 everything rounds to zero, including the exact tie
        if half_exp < -10 {
            return sign;
        }
        let m = man | 0x0080_0000;
        let shift = (126 - exp) as u32;
        // a carry out of the subnormal range yields the smallest normal encoding
        return sign | round_shift(m, shift) as u16;
    }
    let rounded = ((half_exp as u32) << 10) + round_shift(man, 13);
    // a mantissa carry can ripple into the exponent and up to infinity
    sign | rounded.min(0x7c00) as u16
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: value = man * 2^-24, exact in f32
            let v = man as f32 * 2f32.powi(-24);
            return if sign != 0 { -v } else { v };
        }
        (0x1f, 0) => sign | 0x7f80_0000,
        (0x1f, _) => sign | 0x7fc0_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}

pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    (bits.wrapping_add(0x7fff + lsb) >> 16) as u16
}

/// Join of two dtypes in the promotion lattice.
pub fn promote(a: DType, b: DType) -> DType {
    use DType::*;
    match (a, b) {
        _ if a == b => a,
        (I32, other) | (other, I32) => other,
        (F32, _) | (_, F32) => F32,
        // F16 with BF16: neither holds the other
        _ => F32,
    }
}

/// Promotion of a tensor dtype with a scalar operand.
pub fn promote_with_scalar(t: DType, s: &Scalar) -> DType {
    if s.weak {
        t
    } else {
        promote(t, s.dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_and_kinds() {
        assert_eq!(DType::F16.byte_width(), 2);
        assert_eq!(DType::BF16.byte_width(), 2);
        assert_eq!(DType::F32.byte_width(), 4);
        assert_eq!(DType::I32.byte_width(), 4);
        assert!(DType::F16.is_float() && DType::BF16.is_float() && DType::F32.is_float());
        assert!(!DType::I32.is_float());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.0, DType::F16), 1.0);
        assert_eq!(quantize(100000.0, DType::F16), f32::INFINITY);
        assert_eq!(quantize(-100000.0, DType::F16), f32::NEG_INFINITY);
        assert_eq!(quantize(2f32.powi(-25), DType::F16), 0.0);
        assert_eq!(quantize(2f32.powi(-24), DType::F16), 2f32.powi(-24));
        assert_eq!(quantize(65504.0, DType::F16), 65504.0);
        assert_eq!(quantize(65519.0, DType::F16), 65504.0);
        assert_eq!(quantize(65520.0, DType::F16), f32::INFINITY);
        // 0.2 in binary32 is 0x3E4CCCCD; the top half 0x3E4C rounds up to 0x3E4D
        assert_eq!(quantize(0.2, DType::BF16), f32::from_bits(0x3E4D_0000));
        assert!(quantize(f32::NAN, DType::F16).is_nan());
        assert!(quantize(f32::NAN, DType::BF16).is_nan());
        assert_eq!(quantize(0.1, DType::F32), 0.1);
    }

    #[test]
    fn bf16_overflow_rounds_to_infinity() {
        assert_eq!(quantize(f32::MAX, DType::BF16), f32::INFINITY);
        let max = DType::BF16.max_finite();
        assert_eq!(quantize(max, DType::BF16), max);
    }

    #[test]
    #[should_panic(expected = "integer")]
    fn quantize_rejects_integer_dtype() {
        quantize(1.0, DType::I32);
    }

    #[test]
    fn promote_examples() {
        use DType::*;
        assert_eq!(promote(F16, F16), F16);
        assert_eq!(promote(F16, BF16), F32);
        assert_eq!(promote(I32, F16), F16);
        assert_eq!(promote(BF16, F32), F32);
        assert_eq!(promote_with_scalar(F16, &Scalar::weak(2.0)), F16);
        assert_eq!(promote_with_scalar(F16, &Scalar::strong(2.0, F32)), F32);
        assert_eq!(promote_with_scalar(F32, &Scalar::weak(0.0)), F32);
    }

    #[test]
    fn f16_decode_roundtrips_every_pattern() {
        for h in 0..=u16::MAX {
            let v = f16_bits_to_f32(h);
            if v.is_nan() {
                continue;
            }
            assert_eq!(f32_to_f16_bits(v), h, "pattern {h:#06x}");
        }
    }
}
