//! The unrolled network graph.
//!
//! Each of the `N_s` stages runs a data-consistency reconstruction (X), `K`
//! conv → PLF → conv denoising blocks (Z) and the descriptor-weighted
//! refinement (R). A trailing reconstruction module produces the output.
//!
//! Block `k` of a stage computes, with `u⁰ = x`:
//!
//! ```text
//! c1_l = w1_l * u^{k-1} + b1_l
//! h_l  = plf(c1_l)
//! c2   = Σ_l w2_l * h_l + b2
//! u^k  = mu1·u^{k-1} + mu2·x − c2
//! ```
//!
//! Complex samples are treated as two real channels by the convolutions and
//! the PLF; biases are real scalars and therefore only shift the real part.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptor::{blend, descriptor_with_grad, DescriptorConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    conv2_same, dct_basis, fft2, ifft2, soft_threshold_unchecked, ComplexImage, FilterBank, Kernel, RealImage, C64,
};
use crate::sampling::SamplingMask;

/// Lower bound enforced on `rho` and `V` after every optimizer step.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// Piecewise-linear activation with fixed knots uniformly spaced on `[-1, 1]`
/// and trainable knot values; extrapolates with unit slope outside the knots.
#[derive(Debug, Clone, PartialEq)]
pub struct PlfActivation {
    positions: Vec<f64>,
    values: Vec<f64>,
}

/// Where an input falls relative to the knots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlfSegment {
    Below,
    /// Segment index `r` and interpolation weight `t ∈ [0, 1]` towards knot `r + 1`.
    Inside(usize, f64),
    Above,
}

pub fn uniform_positions(n_points: usize) -> Vec<f64> {
    let last = (n_points - 1) as f64;
    (0..n_points)
        .map(|i| if i + 1 == n_points { 1.0 } else { -1.0 + 2.0 * i as f64 / last })
        .collect()
}

impl PlfActivation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "a PLF needs at least 2 control points, got {}",
                values.len()
            )));
        }
        Ok(Self {
            positions: uniform_positions(values.len()),
            values,
        })
    }

    /// `q_i = p_i`, the identity map.
    pub fn identity(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::invalid("a PLF needs at least 2 control points"));
        }
        Self::new(uniform_positions(n_points))
    }

    /// `q_i = soft_threshold(p_i, tau)`.
    pub fn soft_threshold(n_points: usize, tau: f64) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::invalid("a PLF needs at least 2 control points"));
        }
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("threshold must be nonnegative, got {tau}")));
        }
        let positions = uniform_positions(n_points);
        let values = positions.iter().map(|&p| soft_threshold_unchecked(p, tau)).collect();
        Ok(Self { positions, values })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn segment(&self, alpha: f64) -> PlfSegment {
        let n = self.positions.len();
        let p1 = self.positions[0];
        let pn = self.positions[n - 1];
        if alpha < p1 {
            PlfSegment::Below
        } else if alpha > pn {
            PlfSegment::Above
        } else {
            let step = self.positions[1] - p1;
            let r = (((alpha - p1) / step).floor() as usize).min(n - 2);
            let t = (alpha - self.positions[r]) / (self.positions[r + 1] - self.positions[r]);
            PlfSegment::Inside(r, t)
        }
    }

    #[inline]
    pub fn eval(&self, alpha: f64) -> f64 {
        self.eval_branch(alpha, self.segment(alpha))
    }

    /// Evaluates the formula of a given branch, whether or not `alpha` lies in it.
    #[inline]
    pub fn eval_branch(&self, alpha: f64, branch: PlfSegment) -> f64 {
        let n = self.values.len();
        match branch {
            PlfSegment::Below => alpha + self.values[0] - self.positions[0],
            PlfSegment::Above => alpha + self.values[n - 1] - self.positions[n - 1],
            PlfSegment::Inside(r, _) => {
                let (pr, pr1) = (self.positions[r], self.positions[r + 1]);
                let (qr, qr1) = (self.values[r], self.values[r + 1]);
                qr + (alpha - pr) * (qr1 - qr) / (pr1 - pr)
            }
        }
    }

    /// `∂plf/∂α`; at a knot the segment to the right is used.
    #[inline]
    pub fn slope(&self, alpha: f64) -> f64 {
        match self.segment(alpha) {
            PlfSegment::Below | PlfSegment::Above => 1.0,
            PlfSegment::Inside(r, _) => {
                (self.values[r + 1] - self.values[r]) / (self.positions[r + 1] - self.positions[r])
            }
        }
    }

    /// Deposits `g·∂plf(α)/∂q` onto `dq` (hat-basis weights inside, a single knot outside).
    #[inline]
    pub fn accumulate_value_grad(&self, alpha: f64, g: f64, dq: &mut [f64]) {
        let n = self.values.len();
        match self.segment(alpha) {
            PlfSegment::Below => dq[0] += g,
            PlfSegment::Above => dq[n - 1] += g,
            PlfSegment::Inside(r, _) => {
                let t = (alpha - self.positions[r]) / (self.positions[r + 1] - self.positions[r]);
                dq[r] += g * (1.0 - t);
                dq[r + 1] += g * t;
            }
        }
    }

    /// Segment code used to detect knot crossings: 0 below, `r + 1` inside, `N_c` above.
    #[inline]
    pub fn segment_code(&self, alpha: f64) -> u32 {
        match self.segment(alpha) {
            PlfSegment::Below => 0,
            PlfSegment::Inside(r, _) => r as u32 + 1,
            PlfSegment::Above => self.values.len() as u32,
        }
    }
}

pub fn plf_eval(alpha: f64, plf: &PlfActivation) -> f64 {
    plf.eval(alpha)
}

/// Trainable parameters of one conv → PLF → conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub mu1: f64,
    pub mu2: f64,
    /// `L` kernels of side `w_f`.
    pub w1: FilterBank,
    pub b1: Vec<f64>,
    /// One kernel per input channel (depth `L`), side `f`.
    pub w2: FilterBank,
    pub b2: f64,
    pub plf: PlfActivation,
}

impl BlockParams {
    pub fn channels(&self) -> usize {
        self.w1.count()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.w1.count();
        if self.b1.len() != l || self.w2.count() != l {
            return Err(Error::invalid(format!(
                "block channel mismatch: w1 has {l} kernels, b1 {} entries, w2 depth {}",
                self.b1.len(),
                self.w2.count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub rho: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterInit {
    Dct,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlfInit {
    SoftThreshold,
    Identity,
}

/// Architecture and initialization choices.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    pub blocks: usize,
    pub filters: usize,
    /// `w_f`
    pub filter_size: usize,
    /// `f`
    pub c2_filter_size: usize,
    pub plf_points: usize,
    pub init: FilterInit,
    pub plf_init: PlfInit,
    pub plf_threshold: f64,
    pub weight_sharing: bool,
    pub rho_init: f64,
    pub v_init: f64,
    pub mu1_init: f64,
    pub mu2_init: f64,
    /// Scale applied to the (flipped) DCT kernels used for `w2`.
    pub w2_scale: f64,
    /// Standard deviation of random filter initialization.
    pub random_std: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 7,
            blocks: 2,
            filters: 8,
            filter_size: 3,
            c2_filter_size: 3,
            plf_points: 101,
            init: FilterInit::Dct,
            plf_init: PlfInit::SoftThreshold,
            plf_threshold: 0.05,
            weight_sharing: false,
            rho_init: 0.1,
            v_init: 0.1,
            mu1_init: 0.9,
            mu2_init: 0.1,
            w2_scale: 0.1,
            random_std: 0.01,
            seed: 0,
        }
    }
}

/// Layout of a parameter set, enough to validate checkpoints and caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkShape {
    pub stages: usize,
    pub blocks: usize,
    pub filters: usize,
    pub filter_size: usize,
    pub c2_filter_size: usize,
    pub plf_points: usize,
    pub weight_sharing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Rho,
    V,
    Mu1,
    Mu2,
    W1,
    B1,
    W2,
    B2,
    Q,
}

impl ParamClass {
    pub const ALL: [ParamClass; 9] = [
        ParamClass::Rho,
        ParamClass::V,
        ParamClass::Mu1,
        ParamClass::Mu2,
        ParamClass::W1,
        ParamClass::B1,
        ParamClass::W2,
        ParamClass::B2,
        ParamClass::Q,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamClass::Rho => "rho",
            ParamClass::V => "V",
            ParamClass::Mu1 => "mu1",
            ParamClass::Mu2 => "mu2",
            ParamClass::W1 => "w1",
            ParamClass::B1 => "b1",
            ParamClass::W2 => "w2",
            ParamClass::B2 => "b2",
            ParamClass::Q => "q",
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All trainable parameters. With weight sharing a single block set is
/// reused by every stage; `rho` and `V` stay per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub stages: Vec<StageParams>,
    /// `stages.len()` block sets, or exactly one when `weight_sharing`.
    pub blocks: Vec<Vec<BlockParams>>,
    pub final_rho: f64,
    pub weight_sharing: bool,
}

fn init_bank(
    init: FilterInit,
    count: usize,
    side: usize,
    flip_scale: Option<f64>,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FilterBank> {
    match init {
        FilterInit::Dct => {
            let basis = dct_basis(side)?;
            if count > basis.count() {
                return Err(Error::invalid(format!(
                    "DCT init provides {} kernels of side {side}, {count} requested",
                    basis.count()
                )));
            }
            let kernels = basis
                .kernels()
                .iter()
                .take(count)
                .map(|k| match flip_scale {
                    Some(s) => k.flipped().scaled(s),
                    None => k.clone(),
                })
                .collect();
            FilterBank::new(kernels)
        }
        FilterInit::Random => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let kernels = (0..count)
                .map(|_| Kernel::new(side, (0..side * side).map(|_| normal.sample(rng)).collect()))
                .collect::<Result<Vec<_>>>()?;
            FilterBank::new(kernels)
        }
    }
}

impl NetworkParams {
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        if cfg.stages == 0 || cfg.blocks == 0 || cfg.filters == 0 {
            return Err(Error::invalid("stages, blocks and filters must be positive"));
        }
        if !(cfg.rho_init > 0.0 && cfg.v_init > 0.0) {
            return Err(Error::invalid("rho_init and v_init must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sets = if cfg.weight_sharing { 1 } else { cfg.stages };
        let mut blocks = Vec::with_capacity(sets);
        for _ in 0..sets {
            let mut set = Vec::with_capacity(cfg.blocks);
            for _ in 0..cfg.blocks {
                let w1 = init_bank(cfg.init, cfg.filters, cfg.filter_size, None, cfg.random_std, &mut rng)?;
                let w2 = init_bank(
                    cfg.init,
                    cfg.filters,
                    cfg.c2_filter_size,
                    Some(cfg.w2_scale),
                    cfg.random_std,
                    &mut rng,
                )?;
                let plf = match cfg.plf_init {
                    PlfInit::SoftThreshold => PlfActivation::soft_threshold(cfg.plf_points, cfg.plf_threshold)?,
                    PlfInit::Identity => PlfActivation::identity(cfg.plf_points)?,
                };
                set.push(BlockParams {
                    mu1: cfg.mu1_init,
                    mu2: cfg.mu2_init,
                    w1,
                    b1: vec![0.0; cfg.filters],
                    w2,
                    b2: 0.0,
                    plf,
                });
            }
            blocks.push(set);
        }
        Ok(Self {
            stages: vec![
                StageParams {
                    rho: cfg.rho_init,
                    v: cfg.v_init,
                };
                cfg.stages
            ],
            blocks,
            final_rho: cfg.rho_init,
            weight_sharing: cfg.weight_sharing,
        })
    }

    #[inline]
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    #[inline]
    pub fn blocks_per_stage(&self) -> usize {
        self.blocks[0].len()
    }

    /// Index into `blocks` used by stage `n`.
    #[inline]
    pub fn block_set_index(&self, n: usize) -> usize {
        if self.weight_sharing {
            0
        } else {
            n
        }
    }

    #[inline]
    pub fn block(&self, n: usize, k: usize) -> &BlockParams {
        &self.blocks[self.block_set_index(n)][k]
    }

    pub fn shape(&self) -> NetworkShape {
        let b = &self.blocks[0][0];
        NetworkShape {
            stages: self.stages.len(),
            blocks: self.blocks[0].len(),
            filters: b.w1.count(),
            filter_size: b.w1.kernel_side(),
            c2_filter_size: b.w2.kernel_side(),
            plf_points: b.plf.len(),
            weight_sharing: self.weight_sharing,
        }
    }

    /// Checks structural consistency and positivity.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.blocks.is_empty() || self.blocks[0].is_empty() {
            return Err(Error::invalid("network needs at least one stage and one block"));
        }
        let expected_sets = if self.weight_sharing { 1 } else { self.stages.len() };
        if self.blocks.len() != expected_sets {
            return Err(Error::invalid(format!(
                "expected {expected_sets} block sets, found {}",
                self.blocks.len()
            )));
        }
        let shape = self.shape();
        for set in &self.blocks {
            if set.len() != shape.blocks {
                return Err(Error::invalid("every stage must have the same block count"));
            }
            for b in set {
                b.validate()?;
                if b.w1.count() != shape.filters
                    || b.w1.kernel_side() != shape.filter_size
                    || b.w2.kernel_side() != shape.c2_filter_size
                    || b.plf.len() != shape.plf_points
                {
                    return Err(Error::invalid("blocks disagree on filter or PLF shape"));
                }
            }
        }
        for (n, s) in self.stages.iter().enumerate() {
            if !(s.rho > 0.0) || !(s.v > 0.0) {
                return Err(Error::invalid(format!(
                    "stage {n}: rho and V must be positive (rho={}, V={})",
                    s.rho, s.v
                )));
            }
        }
        if !(self.final_rho > 0.0) {
            return Err(Error::invalid("final rho must be positive"));
        }
        Ok(())
    }

    /// Equivalent parameters with every stage owning a copy of the shared block set.
    pub fn unshared(&self) -> Self {
        let mut out = self.clone();
        if self.weight_sharing {
            out.blocks = vec![self.blocks[0].clone(); self.stages.len()];
            out.weight_sharing = false;
        }
        out
    }

    fn visit_block(b: &BlockParams, f: &mut impl FnMut(ParamClass, f64)) {
        f(ParamClass::Mu1, b.mu1);
        f(ParamClass::Mu2, b.mu2);
        for k in b.w1.kernels() {
            k.weights().iter().for_each(|&w| f(ParamClass::W1, w));
        }
        b.b1.iter().for_each(|&v| f(ParamClass::B1, v));
        for k in b.w2.kernels() {
            k.weights().iter().for_each(|&w| f(ParamClass::W2, w));
        }
        f(ParamClass::B2, b.b2);
        b.plf.values().iter().for_each(|&q| f(ParamClass::Q, q));
    }

    fn visit_block_mut(b: &mut BlockParams, f: &mut impl FnMut(ParamClass, &mut f64)) {
        f(ParamClass::Mu1, &mut b.mu1);
        f(ParamClass::Mu2, &mut b.mu2);
        for k in b.w1.kernels_mut() {
            k.weights_mut().iter_mut().for_each(|w| f(ParamClass::W1, w));
        }
        b.b1.iter_mut().for_each(|v| f(ParamClass::B1, v));
        for k in b.w2.kernels_mut() {
            k.weights_mut().iter_mut().for_each(|w| f(ParamClass::W2, w));
        }
        f(ParamClass::B2, &mut b.b2);
        b.plf.values_mut().iter_mut().for_each(|q| f(ParamClass::Q, q));
    }

    /// Visits every scalar in the canonical (checkpoint) order: per stage
    /// `rho, V`, then that stage's blocks (shared blocks appear once, in stage
    /// one); the final `rho` last.
    pub fn visit(&self, mut f: impl FnMut(ParamClass, f64)) {
        for (n, s) in self.stages.iter().enumerate() {
            f(ParamClass::Rho, s.rho);
            f(ParamClass::V, s.v);
            if !self.weight_sharing || n == 0 {
                for b in &self.blocks[self.block_set_index(n)] {
                    Self::visit_block(b, &mut f);
                }
            }
        }
        f(ParamClass::Rho, self.final_rho);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamClass, &mut f64)) {
        let sharing = self.weight_sharing;
        for n in 0..self.stages.len() {
            let s = &mut self.stages[n];
            f(ParamClass::Rho, &mut s.rho);
            f(ParamClass::V, &mut s.v);
            if !sharing || n == 0 {
                let idx = if sharing { 0 } else { n };
                for b in &mut self.blocks[idx] {
                    Self::visit_block_mut(b, &mut f);
                }
            }
        }
        f(ParamClass::Rho, &mut self.final_rho);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|_, v| out.push(v));
        out
    }

    pub fn classes(&self) -> Vec<ParamClass> {
        let mut out = Vec::new();
        self.visit(|c, _| out.push(c));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.len();
        if values.len() != n {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, network needs {n}",
                values.len()
            )));
        }
        let mut it = values.iter();
        self.visit_mut(|_, v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    /// Same layout with every scalar set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, v| *v = 0.0);
        z
    }

    /// Clamps `rho` and `V` to [`POSITIVITY_FLOOR`].
    pub fn project(&mut self) {
        for s in &mut self.stages {
            s.rho = s.rho.max(POSITIVITY_FLOOR);
            s.v = s.v.max(POSITIVITY_FLOOR);
        }
        self.final_rho = self.final_rho.max(POSITIVITY_FLOOR);
    }

    /// First parameter class holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<ParamClass> {
        let mut found = None;
        self.visit(|c, v| {
            if found.is_none() && !v.is_finite() {
                found = Some(c);
            }
        });
        found
    }

    /// Content hash binding a forward cache to the parameters that produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.shape().hash(&mut h);
        self.visit(|_, v| v.to_bits().hash(&mut h));
        h.finish()
    }
}

/// `X = (Y + rho·Z) / (m + rho)` per k-space cell with `Z = fft2(x_t_prev)`.
pub fn recon_module(y: &ComplexImage, mask: &SamplingMask, x_t_prev: &ComplexImage, rho: f64) -> Result<ComplexImage> {
    y.check_same_dims(x_t_prev, "recon_module")?;
    if y.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "recon_module: k-space {:?} vs mask {:?}",
            y.dims(),
            mask.dims()
        )));
    }
    if !rho.is_finite() || (rho <= 0.0 && !mask.is_full()) || (mask.is_full() && rho <= -1.0) {
        return Err(Error::DivisionHazard(format!(
            "rho = {rho} leaves a zero or negative data-consistency denominator"
        )));
    }
    let z = fft2(x_t_prev);
    let data = y
        .data()
        .iter()
        .zip(z.data())
        .zip(mask.cells())
        .map(|((&yk, &zk), &m)| (yk + zk * rho) / (m as f64 + rho))
        .collect();
    Ok(ifft2(&ComplexImage::from_vec(y.height(), y.width(), data)?))
}

/// Intermediates of one block, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub u_prev: ComplexImage,
    pub c1: Vec<ComplexImage>,
    pub h: Vec<ComplexImage>,
    pub c2: ComplexImage,
    pub u: ComplexImage,
}

fn add_real_bias(img: &mut ComplexImage, b: f64) {
    if b != 0.0 {
        for c in img.data_mut() {
            c.re += b;
        }
    }
}

/// One conv → PLF → conv → combine block. `u_prev` is `x` for the first block.
pub fn denoise_block(u_prev: &ComplexImage, x: &ComplexImage, bp: &BlockParams) -> Result<(ComplexImage, BlockCache)> {
    u_prev.check_same_dims(x, "denoise_block")?;
    bp.validate()?;
    let (h, w) = x.dims();
    let mut c1s = Vec::with_capacity(bp.channels());
    let mut hs = Vec::with_capacity(bp.channels());
    let mut c2 = ComplexImage::zeros(h, w);
    for l in 0..bp.channels() {
        let mut c1 = conv2_same(u_prev, &bp.w1.kernels()[l])?;
        add_real_bias(&mut c1, bp.b1[l]);
        let act = c1.map(|c| C64::new(bp.plf.eval(c.re), bp.plf.eval(c.im)));
        let contrib = conv2_same(&act, &bp.w2.kernels()[l])?;
        c2.add_scaled(&contrib, 1.0);
        c1s.push(c1);
        hs.push(act);
    }
    add_real_bias(&mut c2, bp.b2);
    let u = ComplexImage::from_vec(
        h,
        w,
        u_prev
            .data()
            .iter()
            .zip(x.data())
            .zip(c2.data())
            .map(|((&up, &xv), &cv)| up * bp.mu1 + xv * bp.mu2 - cv)
            .collect(),
    )?;
    Ok((
        u.clone(),
        BlockCache {
            u_prev: u_prev.clone(),
            c1: c1s,
            h: hs,
            c2,
            u,
        },
    ))
}

/// Intermediates of one stage.
#[derive(Debug, Clone)]
pub struct StageRecord {
    /// Refined image entering this stage's reconstruction module.
    pub x_t_in: ComplexImage,
    pub x: ComplexImage,
    pub blocks: Vec<BlockCache>,
    /// Magnitude image the descriptor was computed on.
    pub descriptor_input: RealImage,
    pub t: RealImage,
    pub dt_dv: RealImage,
    pub x_t: ComplexImage,
}

/// Everything a forward pass records for the backward pass.
#[derive(Debug, Clone)]
pub struct StageCache {
    pub stages: Vec<StageRecord>,
    /// Input to the trailing reconstruction module.
    pub final_x_t_in: ComplexImage,
    pub x_hat: ComplexImage,
    pub shape: NetworkShape,
    pub fingerprint: u64,
    /// Hash of the PLF segment index of every activation input.
    pub segment_signature: u64,
}

impl StageCache {
    /// Magnitude images the descriptors were computed on, one per stage.
    pub fn descriptor_inputs(&self) -> Vec<RealImage> {
        self.stages.iter().map(|s| s.descriptor_input.clone()).collect()
    }
}

/// Runs the full network; returns `x^(N_s+1)` and the cache.
pub fn forward(
    y: &ComplexImage,
    mask: &SamplingMask,
    theta: &NetworkParams,
    dcfg: &DescriptorConfig,
) -> Result<(ComplexImage, StageCache)> {
    forward_impl(y, mask, theta, dcfg, None)
}

/// Forward pass whose descriptors are computed on the supplied per-stage
/// images instead of `|u|`. With the inputs of an earlier pass this evaluates
/// the network with `T` held fixed apart from its `V` dependence, which is
/// exactly the function the backward pass differentiates.
pub fn forward_with_descriptor_inputs(
    y: &ComplexImage,
    mask: &SamplingMask,
    theta: &NetworkParams,
    dcfg: &DescriptorConfig,
    descriptor_inputs: &[RealImage],
) -> Result<(ComplexImage, StageCache)> {
    if descriptor_inputs.len() != theta.num_stages() {
        return Err(Error::invalid(format!(
            "{} descriptor inputs supplied for {} stages",
            descriptor_inputs.len(),
            theta.num_stages()
        )));
    }
    forward_impl(y, mask, theta, dcfg, Some(descriptor_inputs))
}

fn forward_impl(
    y: &ComplexImage,
    mask: &SamplingMask,
    theta: &NetworkParams,
    dcfg: &DescriptorConfig,
    frozen: Option<&[RealImage]>,
) -> Result<(ComplexImage, StageCache)> {
    theta.validate()?;
    dcfg.validate()?;
    let (h, w) = y.dims();
    let mut seg_hasher = DefaultHasher::new();
    let mut x_t = ComplexImage::zeros(h, w);
    let mut stages = Vec::with_capacity(theta.num_stages());
    for (n, sp) in theta.stages.iter().enumerate() {
        let x = recon_module(y, mask, &x_t, sp.rho)?;
        let mut u = x.clone();
        let mut blocks = Vec::with_capacity(theta.blocks_per_stage());
        for k in 0..theta.blocks_per_stage() {
            let bp = theta.block(n, k);
            let (next, cache) = denoise_block(&u, &x, bp)?;
            for c1 in &cache.c1 {
                for c in c1.data() {
                    seg_hasher.write_u32(bp.plf.segment_code(c.re));
                    seg_hasher.write_u32(bp.plf.segment_code(c.im));
                }
            }
            blocks.push(cache);
            u = next;
        }
        let descriptor_input = match frozen {
            Some(inputs) => {
                if inputs[n].dims() != u.dims() {
                    return Err(Error::invalid("frozen descriptor input has wrong dims"));
                }
                inputs[n].clone()
            }
            None => u.magnitude(),
        };
        let (t, dt_dv) = descriptor_with_grad(&descriptor_input, sp.v, dcfg)?;
        let refined = blend(&u, &x, &t);
        stages.push(StageRecord {
            x_t_in: x_t,
            x,
            blocks,
            descriptor_input,
            t,
            dt_dv,
            x_t: refined.clone(),
        });
        x_t = refined;
    }
    let x_hat = recon_module(y, mask, &x_t, theta.final_rho)?;
    Ok((
        x_hat.clone(),
        StageCache {
            stages,
            final_x_t_in: x_t,
            x_hat,
            shape: theta.shape(),
            fingerprint: theta.fingerprint(),
            segment_signature: seg_hasher.finish(),
        },
    ))
}
