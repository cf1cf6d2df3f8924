//! NMSE loss, the analytic backward pass, finite-difference verification and
//! SGD-with-momentum training.
//!
//! Gradients of a real loss with respect to a complex image are stored as
//! `∂E/∂Re + i·∂E/∂Im`, so that `dE = Re⟨g, dx⟩`.
//!
//! The descriptor `T` is differentiated only through its constant `V`; its
//! dependence on the denoised image is treated as a constant, giving
//! `∂x_t/∂u = 1 − T` and `∂x_t/∂x = T` element-wise.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::network::{forward, NetworkParams, ParamClass, StageCache};
use crate::reference::{difference_quotient, reference_pass, ReferencePass};
use crate::numerics::{conv2_adjoint, conv2_kernel_grad, fft2, ifft2, ComplexImage, C64};
use crate::sampling::{SamplingMask, TrainingPair};

/// Floor on the residual norm in the loss-gradient denominator.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// `‖x_hat − x_gt‖₂ / ‖x_gt‖₂`.
pub fn nmse_loss(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    x_hat.check_same_dims(x_gt, "nmse_loss")?;
    let gt_norm = x_gt.norm();
    if !(gt_norm > 0.0) {
        return Err(Error::invalid("nmse_loss: ground truth has zero norm"));
    }
    Ok((x_hat - x_gt).norm() / gt_norm)
}

/// Batch-averaged NMSE.
pub fn nmse_loss_batch(pairs: &[(&ComplexImage, &ComplexImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("nmse_loss_batch: empty batch"));
    }
    let mut total = 0.0;
    for (x_hat, x_gt) in pairs {
        total += nmse_loss(x_hat, x_gt)?;
    }
    Ok(total / pairs.len() as f64)
}

/// `∂E/∂x_hat = (x_hat − x_gt) / (‖x_hat − x_gt‖·‖x_gt‖)`, zero at zero residual.
pub fn nmse_grad(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<ComplexImage> {
    x_hat.check_same_dims(x_gt, "nmse_grad")?;
    let gt_norm = x_gt.norm();
    if !(gt_norm > 0.0) {
        return Err(Error::invalid("nmse_grad: ground truth has zero norm"));
    }
    let r = x_hat - x_gt;
    let denom = r.norm().max(RESIDUAL_FLOOR) * gt_norm;
    Ok(r.scale(1.0 / denom))
}

/// Gradients laid out exactly like the [`NetworkParams`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(NetworkParams);

impl GradientSet {
    pub fn zeros_like(theta: &NetworkParams) -> Self {
        Self(theta.zeros_like())
    }

    /// The gradients viewed as a parameter-shaped container.
    pub fn as_params(&self) -> &NetworkParams {
        &self.0
    }

    pub fn as_params_mut(&mut self) -> &mut NetworkParams {
        &mut self.0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }

    pub fn classes(&self) -> Vec<ParamClass> {
        self.0.classes()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        self.0.assign_flat(values)
    }

    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        self.0.visit(|_, v| s += v * v);
        s.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.visit_mut(|_, v| *v *= factor);
    }

    /// Multiplies every entry of one class by `factor`.
    pub fn scale_class(&mut self, class: ParamClass, factor: f64) {
        self.0.visit_mut(|c, v| {
            if c == class {
                *v *= factor
            }
        });
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        let o = other.flatten();
        if o.len() != self.0.len() {
            return Err(Error::invalid("gradient sets have different layouts"));
        }
        let mut it = o.iter();
        self.0.visit_mut(|_, v| *v += it.next().expect("length checked"));
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<ParamClass> {
        self.0.first_non_finite()
    }

    /// Largest absolute entry per class.
    pub fn class_max_abs(&self) -> Vec<(ParamClass, f64)> {
        let mut out: Vec<(ParamClass, f64)> = ParamClass::ALL.iter().map(|&c| (c, 0.0)).collect();
        self.0.visit(|c, v| {
            let slot = &mut out[c as usize];
            slot.1 = slot.1.max(v.abs());
        });
        out
    }
}

/// Backward through `x = ifft2((Y + ρ·fft2(x_t)) / (m + ρ))`; returns `(∂E/∂ρ, ∂E/∂x_t)`.
fn recon_backward(
    g_x: &ComplexImage,
    y: &ComplexImage,
    mask: &SamplingMask,
    x_t_in: &ComplexImage,
    rho: f64,
) -> Result<(f64, ComplexImage)> {
    let g_k = fft2(g_x);
    let z = fft2(x_t_in);
    let mut d_rho = 0.0;
    let mut g_z = Vec::with_capacity(g_k.len());
    for ((&g, (&yk, &zk)), &m) in g_k
        .data()
        .iter()
        .zip(y.data().iter().zip(z.data()))
        .zip(mask.cells())
    {
        let m = m as f64;
        let den = m + rho;
        let dx_drho = (zk * m - yk) / (den * den);
        d_rho += g.re * dx_drho.re + g.im * dx_drho.im;
        g_z.push(g * (rho / den));
    }
    let g_xt = ifft2(&ComplexImage::from_vec(g_k.height(), g_k.width(), g_z)?);
    Ok((d_rho, g_xt))
}

fn real_sum(img: &ComplexImage) -> f64 {
    img.data().iter().map(|c| c.re).sum()
}

/// Exact gradients of `nmse_loss(forward(pair), x_gt)` for one pair, given the
/// forward cache produced with the same `theta`.
pub fn backward(cache: &StageCache, theta: &NetworkParams, pair: &TrainingPair) -> Result<GradientSet> {
    if cache.shape != theta.shape() || cache.stages.len() != theta.num_stages() {
        return Err(Error::InvalidState(format!(
            "cache shape {:?} does not match parameters {:?}",
            cache.shape,
            theta.shape()
        )));
    }
    if cache.fingerprint != theta.fingerprint() {
        return Err(Error::InvalidState(
            "cache was produced with different parameter values".into(),
        ));
    }
    if pair.y.dims() != cache.x_hat.dims() || pair.x_gt.dims() != cache.x_hat.dims() {
        return Err(Error::InvalidState("training pair does not match the cache dims".into()));
    }
    let y = &pair.y;
    let mask = &pair.mask;
    let mut grads = theta.zeros_like();

    let g_out = nmse_grad(&cache.x_hat, &pair.x_gt)?;
    let (d_final_rho, mut g_xt) = recon_backward(&g_out, y, mask, &cache.final_x_t_in, theta.final_rho)?;
    grads.final_rho += d_final_rho;

    for n in (0..theta.num_stages()).rev() {
        let rec = &cache.stages[n];
        let x = &rec.x;
        let u_last = &rec.blocks.last().expect("at least one block").u;

        // R: x_t = (1 − T)·u + T·x
        let mut d_v = 0.0;
        let mut g_u_data = Vec::with_capacity(x.len());
        let mut g_x_data = Vec::with_capacity(x.len());
        for idx in 0..x.len() {
            let g = g_xt.data()[idx];
            let t = rec.t.data()[idx];
            let resid = x.data()[idx] - u_last.data()[idx];
            d_v += (g.re * resid.re + g.im * resid.im) * rec.dt_dv.data()[idx];
            g_u_data.push(g * (1.0 - t));
            g_x_data.push(g * t);
        }
        grads.stages[n].v += d_v;
        let (h, w) = x.dims();
        let mut g_u = ComplexImage::from_vec(h, w, g_u_data)?;
        let mut g_x = ComplexImage::from_vec(h, w, g_x_data)?;

        // Z blocks, last to first
        let set = grads.block_set_index(n);
        for k in (0..theta.blocks_per_stage()).rev() {
            let bc = &rec.blocks[k];
            let bp = theta.block(n, k);
            let gb = &mut grads.blocks[set][k];

            gb.mu1 += g_u.real_dot(&bc.u_prev);
            gb.mu2 += g_u.real_dot(x);
            g_x.add_scaled(&g_u, bp.mu2);

            let g_c2 = g_u.scale(-1.0);
            gb.b2 += real_sum(&g_c2);
            let mut g_uprev = g_u.scale(bp.mu1);

            for l in 0..bp.channels() {
                let dw2 = conv2_kernel_grad(&bc.h[l], &g_c2, bp.w2.kernel_side())?;
                for (acc, d) in gb.w2.kernels_mut()[l].weights_mut().iter_mut().zip(dw2.weights()) {
                    *acc += d;
                }
                let g_h = conv2_adjoint(&g_c2, &bp.w2.kernels()[l])?;

                let c1 = &bc.c1[l];
                let dq = gb.plf.values_mut();
                let mut g_c1_data = Vec::with_capacity(c1.len());
                for (&c, &gh) in c1.data().iter().zip(g_h.data()) {
                    bp.plf.accumulate_value_grad(c.re, gh.re, dq);
                    bp.plf.accumulate_value_grad(c.im, gh.im, dq);
                    g_c1_data.push(C64::new(bp.plf.slope(c.re) * gh.re, bp.plf.slope(c.im) * gh.im));
                }
                let g_c1 = ComplexImage::from_vec(h, w, g_c1_data)?;
                gb.b1[l] += real_sum(&g_c1);

                let dw1 = conv2_kernel_grad(&bc.u_prev, &g_c1, bp.w1.kernel_side())?;
                for (acc, d) in gb.w1.kernels_mut()[l].weights_mut().iter_mut().zip(dw1.weights()) {
                    *acc += d;
                }
                g_uprev.add_scaled(&conv2_adjoint(&g_c1, &bp.w1.kernels()[l])?, 1.0);
            }

            if k == 0 {
                // the first block reads x directly
                g_x.add_scaled(&g_uprev, 1.0);
            } else {
                g_u = g_uprev;
            }
        }

        // X
        let (d_rho, g_prev) = recon_backward(&g_x, y, mask, &rec.x_t_in, theta.stages[n].rho)?;
        grads.stages[n].rho += d_rho;
        g_xt = g_prev;
    }
    Ok(GradientSet(grads))
}

/// Loss and gradients for one pair.
pub fn loss_and_grad(theta: &NetworkParams, pair: &TrainingPair, dcfg: &DescriptorConfig) -> Result<(f64, GradientSet)> {
    let (x_hat, cache) = forward(&pair.y, &pair.mask, theta, dcfg)?;
    let loss = nmse_loss(&x_hat, &pair.x_gt)?;
    let grads = backward(&cache, theta, pair)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    /// Worst `|g_a − g_fd| / max(|g_a|, |g_fd|, 1e-12)` over checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±h perturbation moved some PLF input across a knot.
    pub skipped_at_knots: usize,
    /// `(flat index, analytic, finite difference)` of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub classes: Vec<ClassReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn class(&self, class: ParamClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  checked  skipped  max_rel_error      analytic  finite_diff  status")?;
        for c in &self.classes {
            let (ga, fd) = c.worst.map(|w| (w.1, w.2)).unwrap_or((0.0, 0.0));
            writeln!(
                f,
                "{:<6} {:>7}  {:>7}  {:>13.3e}  {:>12.4e}  {:>11.4e}  {}",
                c.class.name(),
                c.checked,
                c.skipped_at_knots,
                c.max_rel_error,
                ga,
                fd,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "h = {:e}, tolerance = {:e}: {}",
            self.step,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares backpropagated gradients against central finite differences.
///
/// Perturbed passes reuse the base pass's descriptor inputs so `T` varies only
/// through `V`, matching what [`backward`] differentiates, and are evaluated
/// in double-double arithmetic so that the quotient is not dominated by `f64`
/// rounding of the loss. Entries whose perturbation moves any PLF input into
/// another segment are skipped and counted, since the one-sided slopes
/// disagree there.
pub fn gradcheck(
    theta: &NetworkParams,
    pair: &TrainingPair,
    dcfg: &DescriptorConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let (_, cache) = forward(&pair.y, &pair.mask, theta, dcfg)?;
    let analytic = backward(&cache, theta, pair)?;
    compare_with_finite_differences(theta, pair, dcfg, &analytic, step, tolerance)
}

/// Finite-difference comparison for caller-supplied analytic gradients.
pub fn compare_with_finite_differences(
    theta: &NetworkParams,
    pair: &TrainingPair,
    dcfg: &DescriptorConfig,
    analytic: &GradientSet,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, base_cache) = forward(&pair.y, &pair.mask, theta, dcfg)?;
    let frozen = base_cache.descriptor_inputs();
    let flat = theta.flatten();
    let classes = theta.classes();
    let g_analytic = analytic.flatten();
    if g_analytic.len() != flat.len() {
        return Err(Error::invalid("analytic gradient layout does not match parameters"));
    }

    let eval = |values: &[f64]| -> Result<ReferencePass> {
        let mut p = theta.clone();
        p.assign_flat(values)?;
        reference_pass(&pair.y, &pair.mask, &p, dcfg, &frozen, &pair.x_gt)
    };
    let base_signature = eval(&flat)?.segment_signature;

    // (rel error, skipped, fd)
    let per_entry: Vec<(f64, bool, f64)> = (0..flat.len())
        .into_par_iter()
        .map(|i| -> Result<(f64, bool, f64)> {
            let mut plus = flat.clone();
            plus[i] += step;
            let mut minus = flat.clone();
            minus[i] -= step;
            let e_plus = eval(&plus)?;
            let e_minus = eval(&minus)?;
            if e_plus.segment_signature != base_signature || e_minus.segment_signature != base_signature {
                return Ok((0.0, true, 0.0));
            }
            let fd = difference_quotient(e_plus.loss, e_minus.loss, plus[i], minus[i]);
            let ga = g_analytic[i];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-12);
            Ok((rel, false, fd))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for class in ParamClass::ALL {
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        let mut worst = None;
        for (i, &(rel, skip, fd)) in per_entry.iter().enumerate() {
            if classes[i] != class {
                continue;
            }
            if skip {
                skipped += 1;
            } else {
                checked += 1;
                if worst.is_none() || rel > max_rel {
                    worst = Some((i, g_analytic[i], fd));
                }
                max_rel = max_rel.max(rel);
            }
        }
        if checked + skipped == 0 {
            continue;
        }
        reports.push(ClassReport {
            class,
            max_rel_error: max_rel,
            checked,
            skipped_at_knots: skipped,
            worst,
            passed: checked > 0 && max_rel <= tolerance,
        });
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        step,
        tolerance,
        classes: reports,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global ℓ2 clip applied to the flattened gradient.
    pub grad_clip: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            steps: 300,
            batch_size: 1,
            grad_clip: 1.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Rescales `g` to norm `max_norm` when it exceeds it; returns the pre-clip norm.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, len: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}

/// Trains with default reporting; returns final parameters and per-step batch NMSE.
pub fn train(
    pairs: &[TrainingPair],
    theta_init: &NetworkParams,
    dcfg: &DescriptorConfig,
    tcfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<f64>)> {
    train_with_callback(pairs, theta_init, dcfg, tcfg, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_step(step, theta_after_step, batch_loss)` after every update.
pub fn train_with_callback(
    pairs: &[TrainingPair],
    theta_init: &NetworkParams,
    dcfg: &DescriptorConfig,
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &NetworkParams, f64) -> Result<()>,
) -> Result<(NetworkParams, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("train: no training pairs"));
    }
    tcfg.validate()?;
    theta_init.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();

    let mut theta = theta_init.clone();
    let mut flat = theta.flatten();
    let mut opt = SgdMomentum::new(tcfg.learning_rate, tcfg.momentum, flat.len());
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size {
            if cursor == order.len() {
                if tcfg.shuffle {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<(f64, GradientSet)> = batch
            .par_iter()
            .map(|&i| loss_and_grad(&theta, &pairs[i], dcfg))
            .collect::<Result<Vec<_>>>()?;

        // fixed-order reduction
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; flat.len()];
        for (l, g) in &results {
            loss += l * scale;
            for (acc, v) in grad.iter_mut().zip(g.flatten()) {
                *acc += v * scale;
            }
        }

        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            let class = results
                .iter()
                .find_map(|(_, g)| g.first_non_finite())
                .map(|c| c.name().to_string())
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite { class, step });
        }

        clip_global_norm(&mut grad, tcfg.grad_clip);
        opt.step(&mut flat, &grad);
        theta.assign_flat(&flat)?;
        theta.project();
        flat = theta.flatten();
        if let Some(class) = theta.first_non_finite() {
            return Err(Error::NonFinite {
                class: class.name().to_string(),
                step,
            });
        }
        history.push(loss);
        on_step(step, &theta, loss)?;
    }
    Ok((theta, history))
}
