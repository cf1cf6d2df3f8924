//! Double-double evaluation of the network loss, used as the finite-difference
//! oracle.
//!
//! Central differences at `h = 1e-6` on an `f64` loss carry an absolute error
//! of about `ulp(E) / 2h ≈ 1e-10`, which swamps small gradient entries.
//! Evaluating the perturbed passes in ~106-bit arithmetic removes that floor.
//! Quantities that do not depend on the parameters (DFT twiddles, patch
//! statistics of the frozen descriptor inputs) stay in `f64`: they are the
//! same for both perturbed passes and so cannot inject noise into the
//! difference.

use std::hash::{DefaultHasher, Hasher};

use twofloat::TwoFloat as D;

use crate::descriptor::{window_moments, DescriptorConfig};
use crate::error::{Error, Result};
use crate::network::{BlockParams, NetworkParams, PlfActivation, PlfSegment};
use crate::numerics::{ComplexImage, Kernel, RealImage};
use crate::sampling::SamplingMask;

fn d(v: f64) -> D {
    D::from(v)
}

/// `a / b` by long division; the crate's own dd÷dd drops the low word.
fn div(a: D, b: D) -> D {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    D::new_add(q1, q2) + q3
}

#[derive(Debug, Clone, Copy)]
struct Cd {
    re: D,
    im: D,
}

impl Cd {
    const ZERO: Cd = Cd {
        re: D::from_f64(0.0),
        im: D::from_f64(0.0),
    };

    fn add(self, o: Cd) -> Cd {
        Cd {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }

    fn sub(self, o: Cd) -> Cd {
        Cd {
            re: self.re - o.re,
            im: self.im - o.im,
        }
    }

    fn scale(self, s: D) -> Cd {
        Cd {
            re: self.re * s,
            im: self.im * s,
        }
    }

    fn scale_f(self, s: f64) -> Cd {
        Cd {
            re: self.re * s,
            im: self.im * s,
        }
    }

    fn mul_f(self, c: f64, s: f64) -> Cd {
        Cd {
            re: self.re * c - self.im * s,
            im: self.re * s + self.im * c,
        }
    }

    fn norm_sqr(self) -> D {
        self.re * self.re + self.im * self.im
    }
}

#[derive(Debug, Clone)]
struct Img {
    h: usize,
    w: usize,
    data: Vec<Cd>,
}

impl Img {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![Cd::ZERO; h * w],
        }
    }

    fn from_f64(img: &ComplexImage) -> Self {
        let (h, w) = img.dims();
        Self {
            h,
            w,
            data: img.data().iter().map(|c| Cd { re: d(c.re), im: d(c.im) }).collect(),
        }
    }

    #[cfg(test)]
    fn to_f64(&self) -> ComplexImage {
        ComplexImage::from_fn(self.h, self.w, |i, j| {
            let c = self.data[i * self.w + j];
            crate::C64::new(c.re.hi() + c.re.lo(), c.im.hi() + c.im.lo())
        })
    }
}

/// Unitary DFT along both axes; `sign = -1` forward, `+1` inverse.
fn dft2(img: &Img, sign: f64) -> Img {
    let (h, w) = (img.h, img.w);
    let twiddles = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (a.cos(), sign * a.sin())
            })
            .collect()
    };
    let tw_w = twiddles(w);
    let tw_h = twiddles(h);
    let mut rows = Img::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = Cd::ZERO;
            for k in 0..w {
                let (c, s) = tw_w[(j * k) % w];
                acc = acc.add(img.data[i * w + k].mul_f(c, s));
            }
            rows.data[i * w + j] = acc;
        }
    }
    let scale = div(d(1.0), d((h * w) as f64).sqrt());
    let mut out = Img::zeros(h, w);
    for j in 0..w {
        for i in 0..h {
            let mut acc = Cd::ZERO;
            for k in 0..h {
                let (c, s) = tw_h[(i * k) % h];
                acc = acc.add(rows.data[k * w + j].mul_f(c, s));
            }
            out.data[i * w + j] = acc.scale(scale);
        }
    }
    out
}

fn conv_same(img: &Img, k: &Kernel) -> Img {
    let (h, w) = (img.h as isize, img.w as isize);
    let s = k.side() as isize;
    let r = k.radius() as isize;
    let mut out = Img::zeros(img.h, img.w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = Cd::ZERO;
            for a in 0..s {
                let ii = i + a - r;
                if ii < 0 || ii >= h {
                    continue;
                }
                for b in 0..s {
                    let jj = j + b - r;
                    if jj < 0 || jj >= w {
                        continue;
                    }
                    let v = img.data[(ii * w + jj) as usize];
                    acc = acc.add(v.scale_f(k.get(a as usize, b as usize)));
                }
            }
            out.data[(i * w + j) as usize] = acc;
        }
    }
    out
}

fn plf(p: &PlfActivation, alpha: D) -> D {
    let pos = p.positions();
    let q = p.values();
    let n = q.len();
    match p.segment(alpha.hi()) {
        PlfSegment::Below => alpha + D::new_sub(q[0], pos[0]),
        PlfSegment::Above => alpha + D::new_sub(q[n - 1], pos[n - 1]),
        PlfSegment::Inside(r, _) => {
            let t = div(alpha - pos[r], D::new_sub(pos[r + 1], pos[r]));
            t * D::new_sub(q[r + 1], q[r]) + q[r]
        }
    }
}

fn recon(y: &Img, mask: &SamplingMask, x_t: &Img, rho: f64) -> Img {
    let z = dft2(x_t, -1.0);
    let mut k = Img::zeros(y.h, y.w);
    for (idx, m) in mask.cells().iter().enumerate() {
        let den = D::new_add(*m as f64, rho);
        let num = y.data[idx].add(z.data[idx].scale(d(rho)));
        k.data[idx] = Cd {
            re: div(num.re, den),
            im: div(num.im, den),
        };
    }
    dft2(&k, 1.0)
}

fn block(u_prev: &Img, x: &Img, bp: &BlockParams, seg: &mut DefaultHasher) -> Img {
    let mut c2 = Img::zeros(x.h, x.w);
    for l in 0..bp.channels() {
        let mut c1 = conv_same(u_prev, &bp.w1.kernels()[l]);
        for c in &mut c1.data {
            c.re += bp.b1[l];
            seg.write_u32(bp.plf.segment_code(c.re.hi()));
            seg.write_u32(bp.plf.segment_code(c.im.hi()));
            *c = Cd {
                re: plf(&bp.plf, c.re),
                im: plf(&bp.plf, c.im),
            };
        }
        let contrib = conv_same(&c1, &bp.w2.kernels()[l]);
        for (acc, v) in c2.data.iter_mut().zip(&contrib.data) {
            *acc = acc.add(*v);
        }
    }
    let mut u = Img::zeros(x.h, x.w);
    for idx in 0..u.data.len() {
        let mut c = c2.data[idx];
        c.re += bp.b2;
        u.data[idx] = u_prev.data[idx]
            .scale_f(bp.mu1)
            .add(x.data[idx].scale_f(bp.mu2))
            .sub(c);
    }
    u
}

/// Output of a reference pass.
pub(crate) struct ReferencePass {
    pub loss: D,
    pub segment_signature: u64,
}

/// Mirrors `forward_with_descriptor_inputs`; returns `x_hat` and the segment signature.
fn reference_forward(
    y: &ComplexImage,
    mask: &SamplingMask,
    theta: &NetworkParams,
    dcfg: &DescriptorConfig,
    descriptor_inputs: &[RealImage],
) -> Result<(Img, u64)> {
    theta.validate()?;
    if descriptor_inputs.len() != theta.num_stages() {
        return Err(Error::invalid("one descriptor input per stage is required"));
    }
    let (h, w) = y.dims();
    let yd = Img::from_f64(y);
    let mut seg = DefaultHasher::new();
    let mut x_t = Img::zeros(h, w);
    for (n, sp) in theta.stages.iter().enumerate() {
        let x = recon(&yd, mask, &x_t, sp.rho);
        let mut u = x.clone();
        for k in 0..theta.blocks_per_stage() {
            u = block(&u, &x, theta.block(n, k), &mut seg);
        }
        if descriptor_inputs[n].dims() != (h, w) {
            return Err(Error::invalid("descriptor input has wrong dims"));
        }
        let moments = window_moments(&descriptor_inputs[n], dcfg)?;
        let mut next = Img::zeros(h, w);
        for (idx, &(spq, spp, sqq)) in moments.iter().enumerate() {
            let num = d(spq) * 2.0 + sp.v;
            let den = D::new_add(spp, sqq) + sp.v;
            let mut t = d(1.0) - div(num, den).abs();
            if t < d(0.0) {
                t = d(0.0);
            } else if t > d(1.0) {
                t = d(1.0);
            }
            let (uv, xv) = (u.data[idx], x.data[idx]);
            next.data[idx] = uv.add(xv.sub(uv).scale(t));
        }
        x_t = next;
    }
    Ok((recon(&yd, mask, &x_t, theta.final_rho), seg.finish()))
}

/// `nmse_loss(forward(θ), x_gt)` in double-double.
pub(crate) fn reference_pass(
    y: &ComplexImage,
    mask: &SamplingMask,
    theta: &NetworkParams,
    dcfg: &DescriptorConfig,
    descriptor_inputs: &[RealImage],
    x_gt: &ComplexImage,
) -> Result<ReferencePass> {
    y.check_same_dims(x_gt, "reference_pass")?;
    let (x_hat, segment_signature) = reference_forward(y, mask, theta, dcfg, descriptor_inputs)?;
    let gt = Img::from_f64(x_gt);
    let mut rr = d(0.0);
    let mut gg = d(0.0);
    for (a, b) in x_hat.data.iter().zip(&gt.data) {
        rr += a.sub(*b).norm_sqr();
        gg += b.norm_sqr();
    }
    if gg.hi() <= 0.0 {
        return Err(Error::invalid("ground truth has zero norm"));
    }
    Ok(ReferencePass {
        loss: div(rr.sqrt(), gg.sqrt()),
        segment_signature,
    })
}

/// `(a − b) / (ta − tb)` carried in double-double, rounded to `f64`.
pub(crate) fn difference_quotient(a: D, b: D, ta: f64, tb: f64) -> f64 {
    let q = div(a - b, D::new_sub(ta, tb));
    q.hi() + q.lo()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, NetworkConfig, PlfInit};
    use crate::numerics::{fft2, C64};
    use crate::sampling::{make_mask, MaskPattern, TrainingPair};
    use crate::training::nmse_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn division_keeps_low_word() {
        let third = div(d(1.0), d(3.0));
        let back = third * 3.0 - 1.0;
        assert!(back.hi().abs() < 1e-31);
    }

    #[test]
    fn dft_matches_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ComplexImage::from_fn(6, 10, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let a = dft2(&Img::from_f64(&img), -1.0).to_f64();
        let b = fft2(&img);
        assert!((&a - &b).norm() < 1e-13);
        let back = dft2(&dft2(&Img::from_f64(&img), -1.0), 1.0).to_f64();
        assert!((&back - &img).norm() < 1e-14);
    }

    #[test]
    fn matches_f64_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ComplexImage::from_fn(16, 16, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let mask = make_mask(MaskPattern::Random2d, 16, 16, 0.35, 3).unwrap();
        let pair = TrainingPair::simulate(&img, &mask).unwrap();
        for plf_init in [PlfInit::SoftThreshold, PlfInit::Identity] {
            let theta = NetworkParams::init(&NetworkConfig {
                stages: 2,
                blocks: 2,
                filters: 4,
                plf_points: 31,
                plf_init,
                weight_sharing: plf_init == PlfInit::Identity,
                ..NetworkConfig::default()
            })
            .unwrap();
            let dcfg = DescriptorConfig::default();
            let (x_hat, cache) = forward(&pair.y, &pair.mask, &theta, &dcfg).unwrap();
            let frozen = cache.descriptor_inputs();
            let (ref_x, sig) = reference_forward(&pair.y, &pair.mask, &theta, &dcfg, &frozen).unwrap();
            assert!((&ref_x.to_f64() - &x_hat).norm() < 1e-12);
            assert_eq!(sig, cache.segment_signature);
            let r = reference_pass(&pair.y, &pair.mask, &theta, &dcfg, &frozen, &pair.x_gt).unwrap();
            let loss = nmse_loss(&x_hat, &pair.x_gt).unwrap();
            assert!((r.loss.hi() - loss).abs() < 1e-13);
        }
    }
}
