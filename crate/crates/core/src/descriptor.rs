//! Feature descriptor `T` and the refinement blend `x_t = u + T ⊗ (x − u)`.
//!
//! At each pixel a window `p` is taken from the image and the co-located
//! window `q` from its Gaussian-blurred copy. With window means `μ`, the
//! statistics are `σ_p² = Σ(p−μ_p)²`, `σ_q² = Σ(q−μ_q)²`,
//! `σ_pq = Σ(p−μ_p)(q−μ_q)` and
//!
//! ```text
//! T = 1 − |(2σ_pq + V) / (σ_p² + σ_q² + V)|
//! ```
//!
//! which lies in `[0, 1]` for every `V > 0`.

use crate::error::{Error, Result};
use crate::numerics::{gaussian_blur, reflect_index, sign0, ComplexImage, RealImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    pub patch_side: usize,
    pub blur_sigma: f64,
    pub blur_side: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            patch_side: 7,
            blur_sigma: 1.5,
            blur_side: 5,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side.is_multiple_of(2) {
            return Err(Error::invalid(format!("patch_side must be odd, got {}", self.patch_side)));
        }
        if self.blur_side.is_multiple_of(2) {
            return Err(Error::invalid(format!("blur_side must be odd, got {}", self.blur_side)));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::invalid(format!("blur_sigma must be positive, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Second-order statistics of a pair of co-located patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub mu_p: f64,
    pub mu_q: f64,
    /// `Σ(p−μ_p)²`, i.e. `σ_p²`
    pub var_p: f64,
    pub var_q: f64,
    pub sigma_pq: f64,
    pub n_pixels: usize,
}

impl PatchStats {
    pub fn from_patches(p: &[f64], q: &[f64]) -> Result<Self> {
        if p.is_empty() || p.len() != q.len() {
            return Err(Error::invalid("patches must be nonempty and of equal length"));
        }
        let n = p.len() as f64;
        let mu_p = p.iter().sum::<f64>() / n;
        let mu_q = q.iter().sum::<f64>() / n;
        let (mut spp, mut sqq, mut spq) = (0.0, 0.0, 0.0);
        for (&a, &b) in p.iter().zip(q) {
            let dp = a - mu_p;
            let dq = b - mu_q;
            spp += dp * dp;
            sqq += dq * dq;
            spq += dp * dq;
        }
        Ok(Self {
            mu_p,
            mu_q,
            var_p: spp,
            var_q: sqq,
            sigma_pq: spq,
            n_pixels: p.len(),
        })
    }

    #[inline]
    fn ratio_parts(&self, v: f64) -> (f64, f64) {
        let num = 2.0 * self.sigma_pq + v;
        let den = self.var_p + self.var_q + v;
        (num, den)
    }

    /// `T` for this window.
    pub fn descriptor(&self, v: f64) -> f64 {
        let (num, den) = self.ratio_parts(v);
        descriptor_from_sums(num, den)
    }

    /// `∂T/∂V` for this window, with `sign(0) = 0`.
    pub fn descriptor_grad_v(&self, v: f64) -> f64 {
        let (num, den) = self.ratio_parts(v);
        descriptor_grad_from_sums(num, den)
    }
}

#[inline]
fn descriptor_from_sums(num: f64, den: f64) -> f64 {
    ((den - num.abs()) / den).clamp(0.0, 1.0)
}

#[inline]
fn descriptor_grad_from_sums(num: f64, den: f64) -> f64 {
    let r = num / den;
    // dr/dV = (den - num) / den²
    -sign0(r) * (den - num) / (den * den)
}

/// Per-pixel window sums `(σ_pq, σ_p², σ_q²)` over a symmetric-extended neighbourhood.
pub(crate) fn window_moments(u: &RealImage, cfg: &DescriptorConfig) -> Result<Vec<(f64, f64, f64)>> {
    cfg.validate()?;
    let blurred = gaussian_blur(u, cfg.blur_sigma, cfg.blur_side)?;
    let (h, w) = u.dims();
    let r = (cfg.patch_side / 2) as isize;
    let n = (cfg.patch_side * cfg.patch_side) as f64;
    let mut out = Vec::with_capacity(h * w);
    let mut p = Vec::with_capacity(cfg.patch_side * cfg.patch_side);
    let mut q = Vec::with_capacity(cfg.patch_side * cfg.patch_side);
    for i in 0..h as isize {
        for j in 0..w as isize {
            p.clear();
            q.clear();
            for a in -r..=r {
                let ii = reflect_index(i + a, h);
                for b in -r..=r {
                    let jj = reflect_index(j + b, w);
                    p.push(u.get(ii, jj));
                    q.push(blurred.get(ii, jj));
                }
            }
            let mu_p = p.iter().sum::<f64>() / n;
            let mu_q = q.iter().sum::<f64>() / n;
            let (mut spp, mut sqq, mut spq) = (0.0, 0.0, 0.0);
            for (&a, &b) in p.iter().zip(&q) {
                let dp = a - mu_p;
                let dq = b - mu_q;
                spp += dp * dp;
                sqq += dq * dq;
                spq += dp * dq;
            }
            out.push((spq, spp, sqq));
        }
    }
    Ok(out)
}

fn check_v(v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::invalid(format!("descriptor constant V must be positive, got {v}")));
    }
    Ok(())
}

/// Dense descriptor map `T ∈ [0, 1]`.
pub fn descriptor_map(u: &RealImage, v: f64, cfg: &DescriptorConfig) -> Result<RealImage> {
    Ok(descriptor_with_grad(u, v, cfg)?.0)
}

/// Per-pixel `∂T/∂V`.
pub fn descriptor_grad_v(u: &RealImage, v: f64, cfg: &DescriptorConfig) -> Result<RealImage> {
    Ok(descriptor_with_grad(u, v, cfg)?.1)
}

/// `T` and `∂T/∂V` from a single pass over the window statistics.
pub fn descriptor_with_grad(u: &RealImage, v: f64, cfg: &DescriptorConfig) -> Result<(RealImage, RealImage)> {
    check_v(v)?;
    let (h, w) = u.dims();
    let moments = window_moments(u, cfg)?;
    let mut t = Vec::with_capacity(h * w);
    let mut dt = Vec::with_capacity(h * w);
    for &(spq, spp, sqq) in &moments {
        let num = 2.0 * spq + v;
        let den = spp + sqq + v;
        t.push(descriptor_from_sums(num, den));
        dt.push(descriptor_grad_from_sums(num, den));
    }
    Ok((RealImage::from_vec(h, w, t)?, RealImage::from_vec(h, w, dt)?))
}

/// `x_t = u + T ⊗ (x − u)`; `T` scales each complex residual sample.
pub fn refine(u: &ComplexImage, x: &ComplexImage, t: &RealImage) -> Result<ComplexImage> {
    u.check_same_dims(x, "refine")?;
    if t.dims() != u.dims() {
        return Err(Error::invalid(format!(
            "refine: descriptor {:?} vs image {:?}",
            t.dims(),
            u.dims()
        )));
    }
    if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("refine: descriptor value {bad} outside [0, 1]")));
    }
    Ok(blend(u, x, t))
}

/// [`refine`] without validation; non-finite values propagate.
pub(crate) fn blend(u: &ComplexImage, x: &ComplexImage, t: &RealImage) -> ComplexImage {
    let data = u
        .data()
        .iter()
        .zip(x.data())
        .zip(t.data())
        .map(|((&a, &b), &s)| a + (b - a) * s)
        .collect();
    ComplexImage::from_vec(u.height(), u.width(), data).expect("dims checked by caller")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::C64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(h: usize, w: usize, seed: u64) -> RealImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealImage::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    fn random_complex(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::from_fn(h, w, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let u = RealImage::filled(12, 10, 0.6);
        let cfg = DescriptorConfig::default();
        for v in [1e-3, 0.1, 10.0] {
            let (t, dt) = descriptor_with_grad(&u, v, &cfg).unwrap();
            assert!(t.data().iter().all(|&x| x == 0.0));
            assert!(dt.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn hand_patch() {
        let s = PatchStats::from_patches(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s.var_q, 0.0);
        assert_eq!(s.sigma_pq, 0.0);
        assert_eq!(s.descriptor(1.0), 2.0 / 3.0);
        assert!((s.descriptor_grad_v(1.0) + 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn huge_v_suppresses_descriptor() {
        let u = random_real(16, 16, 1);
        let t = descriptor_map(&u, 1e6, &DescriptorConfig::default()).unwrap();
        assert!(t.max() < 1e-3);
    }

    #[test]
    fn grad_v_matches_central_difference() {
        let u = random_real(16, 16, 2);
        let cfg = DescriptorConfig::default();
        let v = 0.1;
        let h = 1e-6;
        let dt = descriptor_grad_v(&u, v, &cfg).unwrap();
        let tp = descriptor_map(&u, v + h, &cfg).unwrap();
        let tm = descriptor_map(&u, v - h, &cfg).unwrap();
        for idx in 0..dt.data().len() {
            let fd = (tp.data()[idx] - tm.data()[idx]) / (2.0 * h);
            let an = dt.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-6, "pixel {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn rejects_nonpositive_v_and_bad_config() {
        let u = random_real(8, 8, 3);
        let cfg = DescriptorConfig::default();
        assert!(descriptor_map(&u, 0.0, &cfg).is_err());
        assert!(descriptor_grad_v(&u, -1.0, &cfg).is_err());
        let bad = DescriptorConfig {
            patch_side: 4,
            ..cfg
        };
        assert!(descriptor_map(&u, 0.1, &bad).is_err());
    }

    #[test]
    fn refine_blends() {
        let u = random_complex(6, 5, 4);
        let x = random_complex(6, 5, 5);
        assert_eq!(refine(&u, &x, &RealImage::zeros(6, 5)).unwrap(), u);
        let one = refine(&u, &x, &RealImage::filled(6, 5, 1.0)).unwrap();
        for (a, b) in one.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-15);
        }
        let half = refine(&u, &x, &RealImage::filled(6, 5, 0.5)).unwrap();
        for ((m, a), b) in half.data().iter().zip(u.data()).zip(x.data()) {
            assert!((m - (a + b) * 0.5).norm() < 1e-15);
        }
        assert!(refine(&u, &x, &RealImage::filled(6, 5, 1.5)).is_err());
        assert!(refine(&u, &x, &RealImage::zeros(5, 5)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn descriptor_in_unit_interval(seed in any::<u64>(), v in 1e-4f64..10.0, h in 8usize..20, w in 8usize..20) {
            let u = random_real(h, w, seed);
            let t = descriptor_map(&u, v, &DescriptorConfig::default()).unwrap();
            prop_assert!(t.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn descriptor_ignores_constant_offset(seed in any::<u64>(), offset in -5.0f64..5.0) {
            let u = random_real(12, 12, seed);
            let shifted = u.map(|x| x + offset);
            let cfg = DescriptorConfig::default();
            let a = descriptor_map(&u, 0.1, &cfg).unwrap();
            let b = descriptor_map(&shifted, 0.1, &cfg).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn refine_stays_on_segment(seed in any::<u64>()) {
            let u = random_complex(5, 5, seed);
            let x = random_complex(5, 5, seed.wrapping_add(1));
            let t = random_real(5, 5, seed.wrapping_add(2));
            let xt = refine(&u, &x, &t).unwrap();
            for idx in 0..25 {
                let (a, b, m) = (u.data()[idx], x.data()[idx], xt.data()[idx]);
                // |a - m| + |m - b| = |a - b| on the segment
                prop_assert!(((a - m).norm() + (m - b).norm() - (a - b).norm()).abs() < 1e-12);
            }
        }
    }
}
