//! 2-D discrete Fourier transforms on real images.

use crate::tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Half spectrum of a real H x W image: H rows of W/2+1 bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn cols(&self) -> usize {
        self.w / 2 + 1
    }

    pub fn at(&self, y: usize, x: usize) -> Complex64 {
        self.bins[y * self.cols() + x]
    }
}

fn transform(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Full complex spectrum, unnormalized forward convention.
pub fn fft2(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(x.len(), h * w, "fft2 input has wrong length");
    let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, h, w, false);
    data
}

/// Inverse of [`fft2`], returning the real part.
pub fn ifft2_real(spec: &[Complex64], h: usize, w: usize) -> Vec<f64> {
    let mut data = spec.to_vec();
    transform(&mut data, h, w, true);
    let s = 1.0 / (h * w) as f64;
    data.iter().map(|c| c.re * s).collect()
}

pub fn rfft2(x: &Tensor) -> Spectrum {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        s => panic!("rfft2 expects a 2-d tensor, got {s:?}"),
    };
    let full = fft2(x.data(), h, w);
    let cols = w / 2 + 1;
    let mut bins = Vec::with_capacity(h * cols);
    for y in 0..h {
        bins.extend_from_slice(&full[y * w..y * w + cols]);
    }
    Spectrum { h, w, bins }
}

pub fn irfft2(spec: &Spectrum, h: usize, w: usize) -> Tensor {
    assert_eq!((spec.h, spec.w), (h, w), "spectrum geometry does not match requested size");
    let cols = spec.cols();
    let mut full = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            full[y * w + x] = if x < cols {
                spec.bins[y * cols + x]
            } else {
                spec.bins[((h - y) % h) * cols + (w - x)].conj()
            };
        }
    }
    Tensor::new(&[h, w], ifft2_real(&full, h, w)).expect("size checked above")
}

/// Signed frequency of bin `k` out of `n`, in cycles per sample.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n = n as isize;
    let s = if k <= (n - 1) / 2 { k } else { k - n };
    s as f64 / n as f64
}
