//! Numerically stable log-domain kernels and the small special functions the
//! rest of the crate needs. The log-sum-exp helpers are generic over the
//! scalar type; everything downstream instantiates them at `f64`.

use num_traits::Float;

/// log(exp(a) + exp(b)) without leaving the log domain.
#[inline]
pub fn log_add_exp<T: Float>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log Σ exp(x_i) over a slice. Empty input yields -inf.
pub fn log_sum_exp<T: Float>(xs: &[T]) -> T {
    let mut hi = T::neg_infinity();
    for &x in xs {
        if x > hi {
            hi = x;
        }
    }
    if hi == T::neg_infinity() {
        return hi;
    }
    let mut acc = T::zero();
    for &x in xs {
        acc = acc + (x - hi).exp();
    }
    hi + acc.ln()
}

/// Streaming log-sum-exp accumulator, for sums too long to buffer.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp<T: Float> {
    hi: T,
    acc: T,
}

impl<T: Float> Default for LogSumExp<T> {
    fn default() -> Self {
        LogSumExp { hi: T::neg_infinity(), acc: T::zero() }
    }
}

impl<T: Float> LogSumExp<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: T) {
        if x == T::neg_infinity() {
            return;
        }
        if x > self.hi {
            if self.hi > T::neg_infinity() {
                self.acc = self.acc * (self.hi - x).exp();
            }
            self.hi = x;
            self.acc = self.acc + T::one();
        } else {
            self.acc = self.acc + (x - self.hi).exp();
        }
    }

    pub fn value(&self) -> T {
        if self.hi == T::neg_infinity() {
            T::neg_infinity()
        } else {
            self.hi + self.acc.ln()
        }
    }
}

// Lanczos approximation, g = 7, nine coefficients. Relative error is below
// 1e-13 over the positive reals, inside the 1e-10 per-term budget.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// Natural log of the Gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "ln_gamma requires a positive argument, got {x}");
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..500 {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// Lentz's continued fraction for Q(a, x), x > a + 1.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Survival function of the chi-square distribution with `dof` degrees of
/// freedom: P[X >= stat].
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    gamma_q(0.5 * dof, 0.5 * stat)
}

/// log-determinant of a symmetric positive definite matrix (row-major, n x n)
/// via an in-place Cholesky factorization. Returns None if the matrix is not
/// positive definite.
pub fn cholesky_log_det(mat: &[f64], n: usize) -> Option<f64> {
    debug_assert_eq!(mat.len(), n * n);
    let mut l = mat.to_vec();
    let mut log_det = 0.0;
    for j in 0..n {
        let mut diag = l[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if diag <= 0.0 {
            return None;
        }
        let diag = diag.sqrt();
        log_det += diag.ln();
        l[j * n + j] = diag;
        for i in (j + 1)..n {
            let mut v = l[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / diag;
        }
    }
    Some(2.0 * log_det)
}

/// ln(n!) in log domain; exact for what it is used for (trajectory counts).
pub fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}
