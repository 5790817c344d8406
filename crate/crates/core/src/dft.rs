//! Direct O(n²) discrete Fourier transform.
//!
//! Frequencies are labelled `1..=n` to match the `r = (1, …, n)` ramp used by
//! the shift construction; label `n` aliases the zero frequency.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Precomputed twiddles `exp(-2πj m / n)` for `m = 0..n`.
pub struct Dft {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Dft {
    pub fn new(n: usize) -> Self {
        let twiddles = (0..n)
            .map(|m| Complex64::from_polar(1.0, -2.0 * PI * m as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `X[f] = Σ_t x[t] exp(-2πj f t / n)`, output index `f - 1` for `f = 1..=n`.
    pub fn forward(&self, signal: &[Complex64]) -> Vec<Complex64> {
        self.transform(signal, false)
    }

    /// Inverse of [`Dft::forward`], including the `1/n` factor.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let scale = 1.0 / self.n as f64;
        self.transform(spectrum, true)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    }

    fn transform(&self, input: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = self.n;
        assert_eq!(input.len(), n, "signal length must match the transform size");
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        if inverse {
            // x[t] = Σ_f X[f] exp(+2πj f t / n), f = 1..=n stored at f - 1
            for (t, slot) in out.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, &v) in input.iter().enumerate() {
                    let f = i + 1;
                    acc += v * self.twiddles[(f * t) % n].conj();
                }
                *slot = acc;
            }
        } else {
            for (i, slot) in out.iter_mut().enumerate() {
                let f = i + 1;
                let mut acc = Complex64::new(0.0, 0.0);
                for (t, &v) in input.iter().enumerate() {
                    acc += v * self.twiddles[(f * t) % n];
                }
                *slot = acc;
            }
        }
        out
    }

    /// The phase ramp `exp(-2πj · shift · f / n)` for `f = 1..=n`.
    pub fn shift_phase(&self, shift: i64) -> Vec<Complex64> {
        let n = self.n as i64;
        (1..=n)
            .map(|f| self.twiddles[(shift * f).rem_euclid(n) as usize])
            .collect()
    }
}
