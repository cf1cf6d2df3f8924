//! Classical IFR-CS: alternating data consistency, ℓ1 subgradient descent on
//! fixed sparsifying filters, and feature refinement.

use crate::descriptor::{descriptor_map, refine, DescriptorConfig};
use crate::error::{Error, Result};
use crate::network::recon_module;
use crate::numerics::{conv2_adjoint, conv2_same, dct_basis, sign0, ComplexImage, FilterBank, C64};
use crate::sampling::SamplingMask;

#[derive(Debug, Clone, PartialEq)]
pub struct IfrcsConfig {
    pub rho: f64,
    /// Shared weight on every filter's ℓ1 term.
    pub lambda: f64,
    /// Per-filter weights; overrides `lambda` when set.
    pub lambda_per_filter: Option<Vec<f64>>,
    pub l_r: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub filters: FilterBank,
    pub v: f64,
    pub dcfg: DescriptorConfig,
}

impl Default for IfrcsConfig {
    /// Hand-tuned on the Shepp–Logan radial benchmark.
    fn default() -> Self {
        Self {
            rho: 0.3,
            lambda: 0.003,
            lambda_per_filter: None,
            l_r: 0.5,
            outer_iters: 20,
            inner_iters: 10,
            filters: dct_basis(3).expect("side 3 is supported"),
            v: 0.1,
            dcfg: DescriptorConfig::default(),
        }
    }
}

impl IfrcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.l_r > 0.0 && self.v > 0.0) {
            return Err(Error::invalid("rho, l_r and V must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if let Some(per) = &self.lambda_per_filter {
            if per.len() != self.filters.count() {
                return Err(Error::invalid(format!(
                    "{} per-filter lambdas for {} filters",
                    per.len(),
                    self.filters.count()
                )));
            }
            if per.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::invalid("per-filter lambdas must be nonnegative"));
            }
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        self.dcfg.validate()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match &self.lambda_per_filter {
            Some(per) => per.clone(),
            None => vec![self.lambda; self.filters.count()],
        }
    }
}

fn csign(c: C64) -> C64 {
    C64::new(sign0(c.re), sign0(c.im))
}

/// One subgradient step on `ρ/2‖u − x‖² + Σ_l λ_l‖D_l u‖₁`.
pub fn u_step(u: &ComplexImage, x: &ComplexImage, cfg: &IfrcsConfig, lambdas: &[f64]) -> Result<ComplexImage> {
    let a = cfg.rho * cfg.l_r;
    let mut next = u.scale(1.0 - a);
    next.add_scaled(x, a);
    for (k, &lambda) in cfg.filters.kernels().iter().zip(lambdas) {
        if lambda == 0.0 {
            continue;
        }
        let s = conv2_same(u, k)?.map(csign);
        next.add_scaled(&conv2_adjoint(&s, k)?, -cfg.l_r * lambda);
    }
    Ok(next)
}

/// Per-iteration intermediates, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct IfrcsIterate {
    pub x_t_in: ComplexImage,
    pub x: ComplexImage,
    pub u: ComplexImage,
    pub x_t: ComplexImage,
}

pub fn ifrcs_solve(y: &ComplexImage, mask: &SamplingMask, cfg: &IfrcsConfig) -> Result<ComplexImage> {
    ifrcs_solve_traced(y, mask, cfg, |_| {})
}

/// [`ifrcs_solve`] reporting each outer iteration to `observe`.
pub fn ifrcs_solve_traced(
    y: &ComplexImage,
    mask: &SamplingMask,
    cfg: &IfrcsConfig,
    mut observe: impl FnMut(&IfrcsIterate),
) -> Result<ComplexImage> {
    cfg.validate()?;
    let lambdas = cfg.lambdas();
    let (h, w) = y.dims();
    let mut x_t = ComplexImage::zeros(h, w);
    for _ in 0..cfg.outer_iters {
        let x = recon_module(y, mask, &x_t, cfg.rho)?;
        let mut u = x.clone();
        for _ in 0..cfg.inner_iters {
            u = u_step(&u, &x, cfg, &lambdas)?;
        }
        let t = descriptor_map(&u.magnitude(), cfg.v, &cfg.dcfg)?;
        let next = refine(&u, &x, &t)?;
        observe(&IfrcsIterate {
            x_t_in: x_t,
            x,
            u,
            x_t: next.clone(),
        });
        x_t = next;
    }
    recon_module(y, mask, &x_t, cfg.rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, BlockParams, NetworkParams, PlfActivation, StageParams};
    use crate::numerics::fft2;
    use crate::sampling::{make_mask, make_phantom, MaskPattern, TrainingPair};

    fn phantom_pair(n: usize, rate: f64) -> TrainingPair {
        let mask = make_mask(MaskPattern::Radial, n, n, rate, 7).unwrap();
        TrainingPair::simulate(&make_phantom(n, n).unwrap(), &mask).unwrap()
    }

    #[test]
    fn full_mask_without_regularization_recovers_truth() {
        let gt = make_phantom(32, 32).unwrap();
        let cfg = IfrcsConfig {
            rho: 1e-4,
            lambda: 0.0,
            outer_iters: 1,
            ..IfrcsConfig::default()
        };
        let out = ifrcs_solve(&fft2(&gt), &SamplingMask::full(32, 32), &cfg).unwrap();
        let err = (&out - &gt).data().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sampled_cells_keep_convex_combination() {
        let pair = phantom_pair(32, 0.3);
        let cfg = IfrcsConfig {
            lambda: 0.0,
            outer_iters: 4,
            ..IfrcsConfig::default()
        };
        let rho = cfg.rho;
        let mut count = 0;
        ifrcs_solve_traced(&pair.y, &pair.mask, &cfg, |it| {
            let xk = fft2(&it.x);
            let zk = fft2(&it.x_t_in);
            for idx in 0..xk.len() {
                let expected = if pair.mask.cells()[idx] == 1 {
                    (pair.y.data()[idx] + zk.data()[idx] * rho) / (1.0 + rho)
                } else {
                    zk.data()[idx]
                };
                assert!((xk.data()[idx] - expected).norm() < 1e-12);
            }
            count += 1;
        })
        .unwrap();
        assert_eq!(count, 4);
    }

    #[test]
    fn deterministic() {
        let pair = phantom_pair(32, 0.3);
        let cfg = IfrcsConfig {
            outer_iters: 3,
            ..IfrcsConfig::default()
        };
        let a = ifrcs_solve(&pair.y, &pair.mask, &cfg).unwrap();
        let b = ifrcs_solve(&pair.y, &pair.mask, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        let pair = phantom_pair(32, 0.3);
        for cfg in [
            IfrcsConfig { rho: 0.0, ..IfrcsConfig::default() },
            IfrcsConfig { lambda: -1.0, ..IfrcsConfig::default() },
            IfrcsConfig { outer_iters: 0, ..IfrcsConfig::default() },
            IfrcsConfig { lambda_per_filter: Some(vec![0.1; 3]), ..IfrcsConfig::default() },
        ] {
            assert!(ifrcs_solve(&pair.y, &pair.mask, &cfg).is_err());
        }
    }

    #[test]
    fn per_filter_override_of_zero_matches_no_regularization() {
        let pair = phantom_pair(32, 0.3);
        let base = IfrcsConfig {
            lambda: 0.0,
            outer_iters: 2,
            ..IfrcsConfig::default()
        };
        let over = IfrcsConfig {
            lambda: 5.0,
            lambda_per_filter: Some(vec![0.0; 8]),
            ..base.clone()
        };
        assert_eq!(
            ifrcs_solve(&pair.y, &pair.mask, &base).unwrap(),
            ifrcs_solve(&pair.y, &pair.mask, &over).unwrap()
        );
    }

    /// A PLF equal to sign() outside (−δ, δ) with δ = one knot spacing.
    fn sign_surrogate(n: usize) -> PlfActivation {
        let positions = crate::network::uniform_positions(n);
        PlfActivation::new(positions.iter().map(|&p| sign0(p)).collect()).unwrap()
    }

    #[test]
    fn network_at_matching_settings_reproduces_one_iteration() {
        let pair = phantom_pair(32, 0.3);
        let cfg = IfrcsConfig {
            lambda: 0.01,
            outer_iters: 1,
            inner_iters: 1,
            ..IfrcsConfig::default()
        };
        let a = cfg.rho * cfg.l_r;
        let scale = cfg.l_r * cfg.lambda;
        let w2 = FilterBank::new(cfg.filters.kernels().iter().map(|k| k.flipped().scaled(scale)).collect()).unwrap();
        let n_c = 21;
        let block = BlockParams {
            mu1: 1.0 - a,
            mu2: a,
            w1: cfg.filters.clone(),
            b1: vec![0.0; 8],
            w2,
            b2: 0.0,
            plf: sign_surrogate(n_c),
        };
        let theta = NetworkParams {
            stages: vec![StageParams { rho: cfg.rho, v: cfg.v }],
            blocks: vec![vec![block]],
            final_rho: cfg.rho,
            weight_sharing: false,
        };
        let (_, cache) = forward(&pair.y, &pair.mask, &theta, &cfg.dcfg).unwrap();
        let rec = &cache.stages[0];

        let mut traced = None;
        ifrcs_solve_traced(&pair.y, &pair.mask, &cfg, |it| traced = Some(it.clone())).unwrap();
        let it = traced.unwrap();

        // data-consistency step is the same operator
        let dx = (&rec.x - &it.x).data().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(dx < 1e-10);

        // linear part of the u-step
        let linear = {
            let mut l = it.x.scale(1.0 - a);
            l.add_scaled(&it.x, a);
            l
        };
        let net_u = &rec.blocks[0].u;
        // nonlinearity: compare per filter where sign and PLF agree
        let spacing = 2.0 / (n_c - 1) as f64;
        let mut compared = 0;
        for (l, k) in cfg.filters.kernels().iter().enumerate() {
            let du = conv2_same(&it.x, k).unwrap();
            let h = &rec.blocks[0].h[l];
            for (c, hv) in du.data().iter().zip(h.data()) {
                for (arg, out) in [(c.re, hv.re), (c.im, hv.im)] {
                    if arg.abs() > spacing.max(0.1) && arg.abs() < 1.0 {
                        assert_eq!(out, sign0(arg));
                        compared += 1;
                    }
                }
            }
        }
        assert!(compared > 0);

        // with the PLF outputs substituted for sign(), the u-updates coincide
        let mut expected = linear;
        for (h, k) in rec.blocks[0].h.iter().zip(cfg.filters.kernels()) {
            expected.add_scaled(&conv2_adjoint(h, k).unwrap(), -scale);
        }
        let du = (net_u - &expected).data().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(du < 1e-10, "{du}");
    }
}
