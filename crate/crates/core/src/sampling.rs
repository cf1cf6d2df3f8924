//! Undersampling masks, k-space simulation and the zero-filled baseline.
//!
//! All k-space arrays use the unshifted layout: DC sits at cell (0, 0) and
//! frequency `f ∈ [-N/2, N/2)` lives at index `f mod N`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{fft2, ifft2, ComplexImage, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPattern {
    Random1d,
    Random2d,
    Radial,
    Full,
    Custom,
}

impl MaskPattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPattern::Random1d => "random1d",
            MaskPattern::Random2d => "random2d",
            MaskPattern::Radial => "radial",
            MaskPattern::Full => "full",
            MaskPattern::Custom => "custom",
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random1d" => Ok(MaskPattern::Random1d),
            "random2d" => Ok(MaskPattern::Random2d),
            "radial" => Ok(MaskPattern::Radial),
            "full" => Ok(MaskPattern::Full),
            "custom" => Ok(MaskPattern::Custom),
            other => Err(Error::invalid(format!("unknown mask pattern `{other}`"))),
        }
    }
}

/// Tunables for the variable-density generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOptions {
    /// Fraction of rows in the fully sampled central band (random1d).
    pub center_fraction: f64,
    /// Density σ as a fraction of `min(H, W)`.
    pub density_sigma_fraction: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            center_fraction: 0.04,
            density_sigma_fraction: 1.0 / 6.0,
        }
    }
}

/// Binary k-space sampling pattern in the unshifted layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
    pattern: MaskPattern,
    nominal_rate: f64,
    seed: u64,
}

impl SamplingMask {
    /// Wraps caller-supplied cells as a `custom` mask.
    pub fn custom(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        Self::from_parts(height, width, cells, MaskPattern::Custom, None, 0)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![1; height * width],
            pattern: MaskPattern::Full,
            nominal_rate: 1.0,
            seed: 0,
        }
    }

    /// Rebuilds a mask from stored parts. `nominal_rate = None` uses the achieved rate.
    pub fn from_parts(
        height: usize,
        width: usize,
        cells: Vec<u8>,
        pattern: MaskPattern,
        nominal_rate: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dims must be positive"));
        }
        if cells.len() != height * width {
            return Err(Error::invalid(format!(
                "mask needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&c| c > 1) {
            return Err(Error::invalid(format!("mask cells must be 0 or 1, found {bad}")));
        }
        let ones = cells.iter().filter(|&&c| c == 1).count();
        let nominal_rate = nominal_rate.unwrap_or(ones as f64 / (height * width) as f64);
        Ok(Self {
            height,
            width,
            cells,
            pattern,
            nominal_rate,
            seed,
        })
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
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cells[i * self.width + j]
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn nominal_rate(&self) -> f64 {
        self.nominal_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn achieved_rate(&self) -> f64 {
        self.ones() as f64 / self.cells.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c == 1)
    }

    /// Cells rearranged so DC sits at `(H/2, W/2)`, for display.
    pub fn centered(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let mut out = vec![0; h * w];
        for ci in 0..h {
            let i = (ci + h - h / 2) % h;
            for cj in 0..w {
                let j = (cj + w - w / 2) % w;
                out[ci * w + cj] = self.cells[i * w + j];
            }
        }
        out
    }
}

#[inline]
fn freq_to_index(f: isize, n: usize) -> usize {
    f.rem_euclid(n as isize) as usize
}

/// Generates a mask with default [`MaskOptions`].
pub fn make_mask(pattern: MaskPattern, height: usize, width: usize, rate: f64, seed: u64) -> Result<SamplingMask> {
    make_mask_with(pattern, height, width, rate, seed, &MaskOptions::default())
}

pub fn make_mask_with(
    pattern: MaskPattern,
    height: usize,
    width: usize,
    rate: f64,
    seed: u64,
    opts: &MaskOptions,
) -> Result<SamplingMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must lie in (0, 1], got {rate}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask dims must be positive"));
    }
    if !(opts.center_fraction >= 0.0 && opts.center_fraction <= 1.0) {
        return Err(Error::invalid("center_fraction must lie in [0, 1]"));
    }
    if !(opts.density_sigma_fraction > 0.0) {
        return Err(Error::invalid("density_sigma_fraction must be positive"));
    }
    let cells = match pattern {
        MaskPattern::Full => vec![1; height * width],
        MaskPattern::Random1d => random1d(height, width, rate, seed, opts),
        MaskPattern::Random2d => random2d(height, width, rate, seed, opts),
        MaskPattern::Radial => radial(height, width, rate, seed),
        MaskPattern::Custom => {
            return Err(Error::invalid("custom masks are supplied, not generated"))
        }
    };
    Ok(SamplingMask {
        height,
        width,
        cells,
        pattern,
        nominal_rate: if pattern == MaskPattern::Full { 1.0 } else { rate },
        seed,
    })
}

/// Weighted sampling without replacement (exponential-key method); returns the chosen indices.
fn weighted_choice(weights: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(idx, &w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let key = if w == f64::INFINITY { f64::INFINITY } else { u.ln() / w };
            (key, idx)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, i)| i).collect()
}

fn gaussian_weight(f: f64, sigma: f64) -> f64 {
    (-(f * f) / (2.0 * sigma * sigma)).exp()
}

fn random1d(h: usize, w: usize, rate: f64, seed: u64, opts: &MaskOptions) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = ((opts.center_fraction * h as f64).ceil() as usize).clamp(1, h);
    let target = ((rate * h as f64).round() as usize).clamp(band, h);
    let sigma = opts.density_sigma_fraction * h.min(w) as f64;
    let lo = -((band / 2) as isize);
    let mut weights = vec![0.0; h];
    for (row, wt) in weights.iter_mut().enumerate() {
        // centered frequency of this row
        let f = if row < h.div_ceil(2) { row as isize } else { row as isize - h as isize };
        *wt = if f >= lo && f < lo + band as isize {
            f64::INFINITY
        } else {
            gaussian_weight(f as f64, sigma).max(1e-6)
        };
    }
    let rows = weighted_choice(&weights, target, &mut rng);
    let mut cells = vec![0; h * w];
    for r in rows {
        cells[r * w..(r + 1) * w].fill(1);
    }
    cells
}

fn random2d(h: usize, w: usize, rate: f64, seed: u64, opts: &MaskOptions) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = ((rate * (h * w) as f64).round() as usize).clamp(1, h * w);
    let sigma = opts.density_sigma_fraction * h.min(w) as f64;
    let centered = |i: usize, n: usize| -> f64 {
        if i < n.div_ceil(2) {
            i as f64
        } else {
            i as f64 - n as f64
        }
    };
    let mut weights = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = centered(i, h);
        for j in 0..w {
            let fx = centered(j, w);
            let wt = if i == 0 && j == 0 {
                f64::INFINITY
            } else {
                (gaussian_weight(fy, sigma) * gaussian_weight(fx, sigma)).max(1e-12)
            };
            weights.push(wt);
        }
    }
    let mut cells = vec![0; h * w];
    for idx in weighted_choice(&weights, target, &mut rng) {
        cells[idx] = 1;
    }
    cells
}

/// Digital lines through DC at `n` equally spaced angles offset by `offset`.
/// Frequencies are kept to `|f| <= (N-1)/2` so the pattern is point-symmetric about DC.
fn rasterize_radial(h: usize, w: usize, n_lines: usize, offset: f64) -> Vec<u8> {
    let mut cells = vec![0; h * w];
    let max_fy = ((h - 1) / 2) as isize;
    let max_fx = ((w - 1) / 2) as isize;
    let reach = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
    let steps = (2.0 * reach).ceil() as isize;
    for line in 0..n_lines {
        let theta = offset + PI * line as f64 / n_lines as f64;
        let (s, c) = theta.sin_cos();
        for k in -steps..=steps {
            let t = 0.5 * k as f64;
            let fy = (t * s).round() as isize;
            let fx = (t * c).round() as isize;
            if fy.abs() <= max_fy && fx.abs() <= max_fx {
                cells[freq_to_index(fy, h) * w + freq_to_index(fx, w)] = 1;
            }
        }
    }
    cells[0] = 1;
    cells
}

fn radial(h: usize, w: usize, rate: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset_fraction: f64 = rng.random_range(0.0..1.0);
    let total = (h * w) as f64;
    let build = |n: usize| rasterize_radial(h, w, n, offset_fraction * PI / n as f64);
    let rate_of = |cells: &[u8]| cells.iter().filter(|&&c| c == 1).count() as f64 / total;

    // smallest line count reaching the rate; coverage is near-monotone in n
    let (mut lo, mut hi) = (1usize, 8 * h.max(w));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if rate_of(&build(mid)) >= rate {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = build(lo);
    let mut best_err = (rate_of(&best) - rate).abs();
    for n in lo.saturating_sub(3).max(1)..=lo + 3 {
        let cand = build(n);
        let err = (rate_of(&cand) - rate).abs();
        if err < best_err {
            best = cand;
            best_err = err;
        }
    }
    best
}

/// `y = mask ⊙ fft2(x)`, stored on the full grid.
pub fn undersample(x_gt: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    if x_gt.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "undersample: image {:?} vs mask {:?}",
            x_gt.dims(),
            mask.dims()
        )));
    }
    let mut k = fft2(x_gt);
    for (v, &m) in k.data_mut().iter_mut().zip(mask.cells()) {
        if m == 0 {
            *v = C64::new(0.0, 0.0);
        }
    }
    Ok(k)
}

pub fn zero_filled(y: &ComplexImage) -> ComplexImage {
    ifft2(y)
}

/// Scales an image so its peak magnitude is one.
pub fn normalize_peak(x: &ComplexImage) -> Result<ComplexImage> {
    let peak = x.max_magnitude();
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::invalid("cannot normalize an image with zero or non-finite peak"));
    }
    Ok(x.scale(1.0 / peak))
}

/// Undersampled k-space, its mask, and the peak-normalized ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub y: ComplexImage,
    pub mask: SamplingMask,
    pub x_gt: ComplexImage,
}

impl TrainingPair {
    /// Normalizes `x` to peak one and simulates its undersampled acquisition.
    pub fn simulate(x: &ComplexImage, mask: &SamplingMask) -> Result<Self> {
        let x_gt = normalize_peak(x)?;
        let y = undersample(&x_gt, mask)?;
        Ok(Self {
            y,
            mask: mask.clone(),
            x_gt,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x_gt.dims()
    }

    pub fn zero_filled(&self) -> ComplexImage {
        zero_filled(&self.y)
    }
}

/// (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)
type Ellipse = (f64, f64, f64, f64, f64, f64);

const SHEPP_LOGAN: [Ellipse; 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

fn render_ellipses(height: usize, width: usize, ellipses: &[Ellipse]) -> Result<ComplexImage> {
    let img = ComplexImage::from_fn(height, width, |i, j| {
        let y = 1.0 - (2 * i + 1) as f64 / height as f64;
        let x = (2 * j + 1) as f64 / width as f64 - 1.0;
        let mut v = 0.0;
        for &(amp, a, b, x0, y0, phi) in ellipses {
            let (s, c) = phi.to_radians().sin_cos();
            let dx = x - x0;
            let dy = y - y0;
            let xr = dx * c + dy * s;
            let yr = -dx * s + dy * c;
            if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                v += amp;
            }
        }
        // cancelling intensities (e.g. 1 - 0.8 - 0.2) must give an exact zero
        if v.abs() < 1e-12 {
            v = 0.0;
        }
        C64::new(v, 0.0)
    });
    normalize_peak(&img)
}

/// Modified Shepp–Logan phantom, peak magnitude one, zero phase.
pub fn make_phantom(height: usize, width: usize) -> Result<ComplexImage> {
    if height < 32 || width < 32 {
        return Err(Error::invalid(format!(
            "phantom needs dims >= 32, got {height}x{width}"
        )));
    }
    render_ellipses(height, width, &SHEPP_LOGAN)
}

/// Shepp–Logan variant with jittered inner-structure intensities, sizes and positions.
/// Seed 0 returns the standard phantom.
pub fn make_phantom_variant(height: usize, width: usize, seed: u64) -> Result<ComplexImage> {
    if seed == 0 {
        return make_phantom(height, width);
    }
    if height < 32 || width < 32 {
        return Err(Error::invalid(format!(
            "phantom needs dims >= 32, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = SHEPP_LOGAN;
    for e in ellipses.iter_mut().skip(2) {
        e.0 *= rng.random_range(0.5..1.5);
        e.1 *= rng.random_range(0.85..1.15);
        e.2 *= rng.random_range(0.85..1.15);
        e.3 += rng.random_range(-0.04..0.04);
        e.4 += rng.random_range(-0.04..0.04);
        e.5 += rng.random_range(-15.0..15.0);
    }
    render_ellipses(height, width, &ellipses)
}
