//! Dense 2D complex/real grids and the deterministic primitives built on them:
//! unitary FFT, zero-padded "same" convolution with its exact adjoint,
//! Gaussian blur, DCT filter bases and soft thresholding.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Row-major complex grid. Holds images and full-grid (unshifted) k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        Self {
            height,
            width,
            data: vec![C64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dims must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "expected {} samples for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_real(img: &RealImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|&v| C64::new(v, 0.0)).collect(),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.width + j] = v;
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    pub fn real_part(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|c| c * s)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&c| f(c)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        debug_assert_eq!(self.dims(), other.dims());
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// Complex inner product `Σ conj(self)·other`.
    pub fn dot(&self, other: &Self) -> C64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Real inner product treating each complex sample as a pair of reals.
    pub fn real_dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn check_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl Add for &ComplexImage {
    type Output = ComplexImage;
    fn add(self, rhs: &ComplexImage) -> ComplexImage {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ComplexImage {
    type Output = ComplexImage;
    fn sub(self, rhs: &ComplexImage) -> ComplexImage {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &ComplexImage {
    type Output = ComplexImage;
    fn mul(self, rhs: f64) -> ComplexImage {
        self.scale(rhs)
    }
}

/// Row-major real grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dims must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "expected {} samples for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Square real kernel with odd side, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    side: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if side.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel side must be odd, got {side}")));
        }
        if weights.len() != side * side {
            return Err(Error::invalid(format!(
                "kernel of side {side} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Self { side, weights })
    }

    pub fn zeros(side: usize) -> Result<Self> {
        Self::new(side, vec![0.0; side * side])
    }

    /// Centered unit impulse.
    pub fn impulse(side: usize) -> Result<Self> {
        let mut k = Self::zeros(side)?;
        let c = side / 2;
        k.weights[c * side + c] = 1.0;
        Ok(k)
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.side / 2
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.weights[a * self.side + b]
    }

    /// 180° rotation; `conv2_same` with the flipped kernel equals `conv2_adjoint` with the original.
    pub fn flipped(&self) -> Self {
        let mut weights = self.weights.clone();
        weights.reverse();
        Self {
            side: self.side,
            weights,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            side: self.side,
            weights: self.weights.iter().map(|w| w * s).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// A bank of `L` square kernels sharing one odd side.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kernel_side: usize,
    kernels: Vec<Kernel>,
}

impl FilterBank {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        let Some(first) = kernels.first() else {
            return Err(Error::invalid("filter bank needs at least one kernel"));
        };
        let kernel_side = first.side;
        if kernels.iter().any(|k| k.side != kernel_side) {
            return Err(Error::invalid("all kernels in a bank must share one side"));
        }
        Ok(Self {
            kernel_side,
            kernels,
        })
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.kernels.len()
    }

    #[inline]
    pub fn kernel_side(&self) -> usize {
        self.kernel_side
    }

    #[inline]
    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    #[inline]
    pub fn kernels_mut(&mut self) -> &mut [Kernel] {
        &mut self.kernels
    }

    pub fn into_kernels(self) -> Vec<Kernel> {
        self.kernels
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft2_dir(img: &ComplexImage, direction: FftDirection) -> ComplexImage {
    let (h, w) = img.dims();
    let mut out = img.clone();
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, direction), p.plan_fft(h, direction))
    });
    // rows are contiguous
    row_fft.process(&mut out.data);
    let mut column = vec![C64::new(0.0, 0.0); h];
    for j in 0..w {
        for (i, c) in column.iter_mut().enumerate() {
            *c = out.data[i * w + j];
        }
        col_fft.process(&mut column);
        for (i, c) in column.iter().enumerate() {
            out.data[i * w + j] = *c;
        }
    }
    let s = 1.0 / ((h * w) as f64).sqrt();
    for c in out.data.iter_mut() {
        *c *= s;
    }
    out
}

/// Unitary 2D DFT (scale `1/√(H·W)`), DC at cell (0, 0).
pub fn fft2(img: &ComplexImage) -> ComplexImage {
    fft2_dir(img, FftDirection::Forward)
}

/// Unitary inverse 2D DFT; exact inverse of [`fft2`].
pub fn ifft2(img: &ComplexImage) -> ComplexImage {
    fft2_dir(img, FftDirection::Inverse)
}

fn check_odd(kernel: &Kernel) -> Result<()> {
    if kernel.side.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel side must be odd, got {}",
            kernel.side
        )));
    }
    Ok(())
}

/// Zero-padded same-size correlation:
/// `out(i,j) = Σ_ab k(a,b) · x(i+a-r, j+b-r)`.
pub fn conv2_same(img: &ComplexImage, kernel: &Kernel) -> Result<ComplexImage> {
    check_odd(kernel)?;
    let (h, w) = img.dims();
    let s = kernel.side;
    let r = kernel.radius() as isize;
    let mut out = ComplexImage::zeros(h, w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..s as isize {
                let ii = i + a - r;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let row = ii as usize * w;
                let krow = a as usize * s;
                for b in 0..s as isize {
                    let jj = j + b - r;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    acc += img.data[row + jj as usize] * kernel.weights[krow + b as usize];
                }
            }
            out.data[i as usize * w + j as usize] = acc;
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2_same`]: `out(i,j) = Σ_ab k(a,b) · y(i-a+r, j-b+r)`.
pub fn conv2_adjoint(img: &ComplexImage, kernel: &Kernel) -> Result<ComplexImage> {
    check_odd(kernel)?;
    let (h, w) = img.dims();
    let s = kernel.side;
    let r = kernel.radius() as isize;
    let mut out = ComplexImage::zeros(h, w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..s as isize {
                let ii = i - a + r;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let row = ii as usize * w;
                let krow = a as usize * s;
                for b in 0..s as isize {
                    let jj = j - b + r;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    acc += img.data[row + jj as usize] * kernel.weights[krow + b as usize];
                }
            }
            out.data[i as usize * w + j as usize] = acc;
        }
    }
    Ok(out)
}

/// Gradient of `Re⟨grad_out, conv2_same(input, k)⟩` with respect to the kernel weights.
pub fn conv2_kernel_grad(input: &ComplexImage, grad_out: &ComplexImage, side: usize) -> Result<Kernel> {
    input.check_same_dims(grad_out, "conv2_kernel_grad")?;
    let mut k = Kernel::zeros(side)?;
    let (h, w) = input.dims();
    let r = (side / 2) as isize;
    for a in 0..side as isize {
        for b in 0..side as isize {
            let mut acc = 0.0;
            for i in 0..h as isize {
                let ii = i + a - r;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for j in 0..w as isize {
                    let jj = j + b - r;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let g = grad_out.data[i as usize * w + j as usize];
                    let x = input.data[ii as usize * w + jj as usize];
                    acc += g.re * x.re + g.im * x.im;
                }
            }
            k.weights[a as usize * side + b as usize] = acc;
        }
    }
    Ok(k)
}

/// Half-sample symmetric reflection of an index into `0..n` (`-1 → 0`, `n → n-1`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Same-size correlation of a real image with symmetric boundary extension.
pub fn filter_symmetric(img: &RealImage, kernel: &Kernel) -> Result<RealImage> {
    check_odd(kernel)?;
    let (h, w) = img.dims();
    let s = kernel.side;
    let r = kernel.radius() as isize;
    let mut out = RealImage::zeros(h, w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for a in 0..s as isize {
                let ii = reflect_index(i + a - r, h);
                for b in 0..s as isize {
                    let jj = reflect_index(j + b - r, w);
                    acc += kernel.weights[a as usize * s + b as usize] * img.data[ii * w + jj];
                }
            }
            out.data[i as usize * w + j as usize] = acc;
        }
    }
    Ok(out)
}

/// Normalized (sums to one) truncated Gaussian kernel.
pub fn gaussian_kernel(sigma: f64, side: usize) -> Result<Kernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if side.is_multiple_of(2) {
        return Err(Error::invalid(format!("gaussian kernel side must be odd, got {side}")));
    }
    let r = (side / 2) as f64;
    let mut weights = Vec::with_capacity(side * side);
    for a in 0..side {
        for b in 0..side {
            let y = a as f64 - r;
            let x = b as f64 - r;
            weights.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Kernel::new(side, weights)
}

pub fn gaussian_blur(img: &RealImage, sigma: f64, kernel_side: usize) -> Result<RealImage> {
    let k = gaussian_kernel(sigma, kernel_side)?;
    filter_symmetric(img, &k)
}

/// Orthonormal 2D DCT-II basis of the given side with the constant (DC) kernel removed.
///
/// Kernels are ordered row-major by (vertical, horizontal) frequency.
pub fn dct_basis(kernel_side: usize) -> Result<FilterBank> {
    if !matches!(kernel_side, 3 | 5 | 7) {
        return Err(Error::invalid(format!(
            "dct basis supports sides 3, 5, 7; got {kernel_side}"
        )));
    }
    let n = kernel_side;
    let basis_1d = |u: usize, x: usize| -> f64 {
        let alpha = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        alpha * (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos()
    };
    let mut kernels = Vec::with_capacity(n * n - 1);
    for u in 0..n {
        for v in 0..n {
            if u == 0 && v == 0 {
                continue;
            }
            let mut w = Vec::with_capacity(n * n);
            for a in 0..n {
                for b in 0..n {
                    w.push(basis_1d(u, a) * basis_1d(v, b));
                }
            }
            kernels.push(Kernel::new(n, w)?);
        }
    }
    FilterBank::new(kernels)
}

/// `sign(v)·max(|v| − tau, 0)`.
pub fn soft_threshold(v: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("threshold must be nonnegative, got {tau}")));
    }
    Ok(soft_threshold_unchecked(v, tau))
}

#[inline]
pub(crate) fn soft_threshold_unchecked(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
