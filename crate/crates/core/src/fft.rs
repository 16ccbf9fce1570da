//! Discrete Fourier transform of arbitrary length: iterative radix-2 for
//! powers of two, Bluestein's chirp-z otherwise.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::math::{cos, sin};

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::new(cos(ang * k as f64), sin(ang * k as f64)))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * twiddles[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Forward transform `X_k = Σ_t x_t e^{−2πi kt/n}`.
pub fn fft(input: &[Complex64]) -> Vec<Complex64> {
    let n = input.len();
    if n <= 1 {
        return input.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = input.to_vec();
        radix2(&mut buf, false);
        return buf;
    }
    // Bluestein: x_k e^{−iπk²/n} convolved with the chirp e^{iπk²/n}.
    let m = (2 * n - 1).next_power_of_two();
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            // k² mod 2n keeps the angle small for long inputs
            let kk = ((k as u128 * k as u128) % (2 * n as u128)) as f64;
            let ang = PI * kk / n as f64;
            Complex64::new(cos(ang), -sin(ang))
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = input[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

/// Transform of a real sequence.
pub fn fft_real(input: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = input.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| {
                        let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                        v * Complex64::new(libm::cos(ang), libm::sin(ang))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_direct_dft_for_many_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 3, 5, 8, 12, 17, 64, 100, 127, 256, 999] {
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let fast = fft(&x);
            let slow = dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9 * (n as f64).max(1.0), "n = {n}");
            }
        }
    }

    #[test]
    fn impulse_has_flat_transform() {
        let mut x = vec![0.0; 10];
        x[0] = 1.0;
        for v in fft_real(&x) {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }
}
