mod common;

use common::*;
use divis::fft::{bin_frequency, fft2, ifft2_real, irfft2, rfft2};
use divis::Tensor;
use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

fn direct_dft(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    acc += Complex64::from_polar(x[y * w + xx], a);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

#[test]
fn matches_direct_dft() {
    for &(h, w) in &[(1, 1), (1, 5), (4, 4), (5, 3), (6, 8), (7, 7)] {
        let x = randn(&[h, w], (h * 31 + w) as u64);
        let fast = fft2(x.data(), h, w);
        let slow = direct_dft(x.data(), h, w);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{h}x{w}: {err}");
        let half = rfft2(&x);
        for u in 0..h {
            for v in 0..half.cols() {
                assert!((half.at(u, v) - slow[u * w + v]).norm() < 1e-10);
            }
        }
    }
}

#[test]
fn round_trip_all_sizes_up_to_32() {
    for h in 1..=32 {
        for w in 1..=32 {
            let x = randn(&[h, w], (h * 1000 + w) as u64);
            let back = irfft2(&rfft2(&x), h, w);
            let err = max_abs_diff(x.data(), back.data());
            assert!(err < 1e-10, "{h}x{w}: {err:e}");
            let full = ifft2_real(&fft2(x.data(), h, w), h, w);
            assert!(max_abs_diff(x.data(), &full) < 1e-10);
        }
    }
}

#[test]
fn constant_image_has_only_dc() {
    let x = Tensor::full(&[4, 4], 2.5);
    let s = rfft2(&x);
    assert!((s.at(0, 0) - Complex64::new(40.0, 0.0)).norm() < 1e-12);
    for (i, b) in s.bins.iter().enumerate().skip(1) {
        assert!(b.norm() < 1e-12, "bin {i} = {b}");
    }
}

#[test]
fn dc_bin_is_pixel_sum() {
    let x = randn(&[5, 7], 3);
    let s = rfft2(&x);
    assert!((s.at(0, 0).re - x.data().iter().sum::<f64>()).abs() < 1e-12);
    assert!(s.at(0, 0).im.abs() < 1e-12);
}

#[test]
fn cosine_has_two_conjugate_bins() {
    let (h, w, k) = (8, 8, 2);
    let data: Vec<f64> = (0..h * w).map(|i| (2.0 * PI * k as f64 * (i % w) as f64 / w as f64).cos()).collect();
    let spec = fft2(&data, h, w);
    let nonzero: Vec<usize> = (0..h * w).filter(|&i| spec[i].norm() > 1e-9).collect();
    assert_eq!(nonzero, vec![k, w - k]);
    assert!((spec[k] - spec[w - k].conj()).norm() < 1e-12);
}

#[test]
fn parseval_on_random_image() {
    let x = randn(&[8, 8], 4);
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    let spec = fft2(x.data(), 8, 8);
    let spectral: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
    assert!((energy - spectral).abs() < 1e-9);
}

#[test]
fn signed_bin_frequencies() {
    let f: Vec<f64> = (0..8).map(|k| bin_frequency(k, 8)).collect();
    assert_eq!(f, vec![0.0, 0.125, 0.25, 0.375, -0.5, -0.375, -0.25, -0.125]);
    let f: Vec<f64> = (0..5).map(|k| bin_frequency(k, 5)).collect();
    assert_eq!(f, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    assert_eq!(bin_frequency(0, 1), 0.0);
}

proptest! {
    #[test]
    fn round_trip_property(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let x = randn(&[h, w], seed);
        prop_assert!(max_abs_diff(x.data(), irfft2(&rfft2(&x), h, w).data()) < 1e-10);
    }

    #[test]
    fn transform_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
        let x = randn(&[6, 5], seed);
        let y = randn(&[6, 5], seed ^ 9);
        let mix = x.zip_with(&y, |p, q| a * p + q).unwrap();
        let (sx, sy, sm) = (fft2(x.data(), 6, 5), fft2(y.data(), 6, 5), fft2(mix.data(), 6, 5));
        for i in 0..30 {
            prop_assert!((sm[i] - (sx[i] * a + sy[i])).norm() < 1e-10);
        }
    }
}
