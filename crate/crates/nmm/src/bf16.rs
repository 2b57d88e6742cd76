//! Emulated bfloat16: f32 values constrained to the 8-bit-exponent /
//! 7-bit-mantissa grid. Storage and transfers round; arithmetic stays in f32.

/// Largest finite bf16 value, as f32.
pub const MAX_FINITE: f32 = 3.3895314e38;

/// Round a finite f32 to the nearest bf16-representable value
/// (round-to-nearest-even on the high 16 bits of the f32 encoding).
///
/// Values beyond the bf16 range saturate to infinity; use
/// [`round_flagged`] to observe the overflow.
pub fn round(x: f32) -> f32 {
    round_flagged(x).0
}

/// Like [`round`], but also reports whether a finite input overflowed to
/// bf16 infinity.
pub fn round_flagged(x: f32) -> (f32, bool) {
    let bits = x.to_bits();
    let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
    let out = f32::from_bits(rounded & 0xFFFF_0000);
    (out, x.is_finite() && out.is_infinite())
}

/// True when `x` already sits on the bf16 grid (low 16 mantissa bits zero).
pub fn is_representable(x: f32) -> bool {
    x.to_bits() & 0xFFFF == 0
}
