//! Small numeric helpers.

/// Neumaier compensated summation.
///
/// Loss reductions over ranking pairs/chains must agree to 1e-12 regardless
/// of evaluation order; plain left-to-right f64 addition does not guarantee
/// that, compensated summation does for the magnitudes seen here.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of f64 terms.
pub fn csum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for t in terms {
        acc.add(t);
    }
    acc.value()
}

/// Compensated dot product of two equally long slices.
pub fn cdot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    csum(a.iter().zip(b).map(|(x, y)| x * y))
}
