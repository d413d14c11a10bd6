//! Exactly rounded accumulation of non-negative finite floats.
//!
//! The accumulator holds the running sum as a wide fixed-point integer in
//! units of 2^-1074 (the smallest subnormal), so every addition is exact and
//! the final conversion rounds once, to nearest-even. The result therefore
//! does not depend on the order in which terms were added.

const LIMBS: usize = 36;
const MANTISSA_BITS: u32 = 52;

#[derive(Debug, Clone)]
pub struct ExactSum {
    limbs: [u64; LIMBS],
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self { limbs: [0; LIMBS] }
    }

    /// Adds a non-negative finite value. Negative or non-finite input panics
    /// in debug builds and is ignored in release builds.
    #[inline]
    pub fn add(&mut self, value: f64) {
        debug_assert!(value >= 0.0 && value.is_finite(), "ExactSum::add({value})");
        if !(value > 0.0) || !value.is_finite() {
            return;
        }
        let bits = value.to_bits();
        let biased = ((bits >> MANTISSA_BITS) & 0x7ff) as u32;
        let fraction = bits & ((1u64 << MANTISSA_BITS) - 1);
        // value = mantissa * 2^(offset - 1074)
        let (mantissa, offset) = if biased == 0 {
            (fraction, 0u32)
        } else {
            (fraction | (1u64 << MANTISSA_BITS), biased - 1)
        };
        let limb = (offset / 64) as usize;
        let shift = offset % 64;
        let wide = (mantissa as u128) << shift;
        self.add_at(limb, wide as u64);
        self.add_at(limb + 1, (wide >> 64) as u64);
    }

    #[inline]
    fn add_at(&mut self, mut index: usize, value: u64) {
        if value == 0 {
            return;
        }
        let (sum, mut carry) = self.limbs[index].overflowing_add(value);
        self.limbs[index] = sum;
        while carry {
            index += 1;
            let (s, c) = self.limbs[index].overflowing_add(1);
            self.limbs[index] = s;
            carry = c;
        }
    }

    fn bit(&self, position: u32) -> bool {
        (self.limbs[(position / 64) as usize] >> (position % 64)) & 1 == 1
    }

    fn any_below(&self, position: u32) -> bool {
        let limb = (position / 64) as usize;
        let within = position % 64;
        if within > 0 && self.limbs[limb] & ((1u64 << within) - 1) != 0 {
            return true;
        }
        self.limbs[..limb].iter().any(|&l| l != 0)
    }

    /// The sum rounded to the nearest `f64` (ties to even). Returns infinity
    /// if the sum exceeds the finite range.
    pub fn value(&self) -> f64 {
        let Some(top_limb) = self.limbs.iter().rposition(|&l| l != 0) else {
            return 0.0;
        };
        let top = top_limb as u32 * 64 + 63 - self.limbs[top_limb].leading_zeros();
        if top <= MANTISSA_BITS {
            // Fits in the subnormal grid or the lowest normal binade: exact.
            return f64::from_bits(self.limbs[0]);
        }
        let low = top - MANTISSA_BITS;
        let mut mantissa = 0u64;
        for p in (low..=top).rev() {
            mantissa = (mantissa << 1) | self.bit(p) as u64;
        }
        let round = self.bit(low - 1);
        let sticky = low >= 2 && self.any_below(low - 1);
        let mut exponent = low as u64 + 1;
        if round && (sticky || mantissa & 1 == 1) {
            mantissa += 1;
            if mantissa == 1u64 << (MANTISSA_BITS + 1) {
                mantissa >>= 1;
                exponent += 1;
            }
        }
        if exponent >= 0x7ff {
            return f64::INFINITY;
        }
        f64::from_bits((exponent << MANTISSA_BITS) | (mantissa & ((1u64 << MANTISSA_BITS) - 1)))
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

/// Exactly rounded sum of a sequence of non-negative finite values.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = ExactSum::new();
    acc.extend(values);
    acc.value()
}
