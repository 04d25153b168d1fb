//! Correctly rounded floating-point summation.
//!
//! The result depends only on the multiset of inputs, never on their order.
//! Token-axis contractions in attention use this, which makes attention
//! bitwise equivariant under token permutations.

/// Shewchuk's exact partials with a final correctly rounded (half-even)
/// collapse. Inputs must be finite.
#[derive(Default, Clone, Debug)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum { partials: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-way case: the remaining partials decide the rounding direction.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

/// Correctly rounded sum of `values`.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catastrophic_cancellation() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100, 1e-100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(exact_sum([]), 0.0);
    }

    proptest! {
        #[test]
        fn order_independent(mut xs in proptest::collection::vec(-1e6f64..1e6, 0..40), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            let mut r = crate::tensor::Rng::new(seed);
            for i in (1..xs.len()).rev() {
                let j = r.below(i as u64 + 1) as usize;
                xs.swap(i, j);
            }
            let b = exact_sum(xs.iter().copied());
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
