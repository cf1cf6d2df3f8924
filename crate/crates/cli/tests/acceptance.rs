//! One pass/fail line per acceptance criterion, at the pinned tolerances.
//!
//! Lines are written straight to stdout so they show up without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ifrnet::baseline::{ifrcs_solve, IfrcsConfig};
use ifrnet::descriptor::{descriptor_grad_v, descriptor_map, DescriptorConfig, PatchStats};
use ifrnet::metrics::{hfen, psnr, ssim};
use ifrnet::network::{forward, NetworkConfig, NetworkParams, ParamClass, PlfActivation, PlfSegment, PlfInit};
use ifrnet::numerics::{conv2_adjoint, conv2_same, dct_basis, fft2, ifft2};
use ifrnet::sampling::{make_mask, make_phantom, make_phantom_variant, MaskPattern, TrainingPair};
use ifrnet::training::{gradcheck, nmse_loss, train, TrainConfig};
use ifrnet::{ComplexImage, Kernel, RealImage, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} [{status}] {name}: {detail}");
}

fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexImage::from_fn(h, w, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn max_diff(a: &ComplexImage, b: &ComplexImage) -> f64 {
    (a - b).data().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn phantom_pair() -> TrainingPair {
    let mask = make_mask(MaskPattern::Radial, 64, 64, 0.3, 7).unwrap();
    TrainingPair::simulate(&make_phantom(64, 64).unwrap(), &mask).unwrap()
}

/// Zero-filled PSNR of the 64² phantom under the 30% radial mask, seed 7.
const ZERO_FILLED_64_DB: f64 = 17.7601;

#[test]
fn c01_gradient_exactness() {
    let t0 = Instant::now();
    let cfg = NetworkConfig {
        stages: 2,
        blocks: 2,
        filters: 4,
        plf_points: 31,
        ..NetworkConfig::default()
    };
    let theta = NetworkParams::init(&cfg).unwrap();
    let mask = make_mask(MaskPattern::Random2d, 16, 16, 0.35, 1).unwrap();
    let pair = TrainingPair::simulate(&random_image(16, 16, 1), &mask).unwrap();
    let r = gradcheck(&theta, &pair, &DescriptorConfig::default(), 1e-6, 1e-5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let all_checked = r.classes.len() == 9 && r.classes.iter().all(|c| c.checked > 0);
    let worst = r.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = r.passed && all_checked && secs < 60.0;
    report(1, "gradient exactness", pass, &format!("worst class rel error {worst:.3e} (tol 1e-5), {secs:.1} s"));
    assert!(pass, "{r}");
}

#[test]
fn c02_data_consistency_identity() {
    let n = 32;
    let mask = make_mask(MaskPattern::Random2d, n, n, 0.3, 2).unwrap();
    let pair = TrainingPair::simulate(&random_image(n, n, 2), &mask).unwrap();
    let cfg = NetworkConfig {
        stages: 3,
        init: ifrnet::network::FilterInit::Random,
        random_std: 0.2,
        ..NetworkConfig::default()
    };
    let mut theta = NetworkParams::init(&cfg).unwrap();
    for (i, s) in theta.stages.iter_mut().enumerate() {
        s.rho = 0.05 + 0.3 * i as f64;
    }
    theta.final_rho = 0.7;
    let (_, cache) = forward(&pair.y, &pair.mask, &theta, &DescriptorConfig::default()).unwrap();
    let mut modules: Vec<(&ComplexImage, &ComplexImage, f64)> =
        cache.stages.iter().zip(&theta.stages).map(|(s, p)| (&s.x_t_in, &s.x, p.rho)).collect();
    modules.push((&cache.final_x_t_in, &cache.x_hat, theta.final_rho));
    let mut worst = 0.0f64;
    for (x_t, x, rho) in &modules {
        let zk = fft2(x_t);
        let xk = fft2(x);
        for idx in 0..xk.len() {
            let expected = if pair.mask.cells()[idx] == 1 {
                (pair.y.data()[idx] + zk.data()[idx] * *rho) / (1.0 + rho)
            } else {
                zk.data()[idx]
            };
            worst = worst.max((xk.data()[idx] - expected).norm());
        }
    }
    let pass = worst <= 1e-12;
    report(2, "data consistency", pass, &format!("{} modules, max k-space deviation {worst:.3e} (tol 1e-12)", modules.len()));
    assert!(pass);
}

#[test]
fn c03_numerics_suite() {
    let mut fft_err = 0.0f64;
    for (h, w, seed) in [(32, 32, 3), (20, 12, 4), (7, 9, 5)] {
        let x = random_image(h, w, seed);
        let k = fft2(&x);
        fft_err = fft_err.max(max_diff(&ifft2(&k), &x));
        fft_err = fft_err.max((k.norm() - x.norm()).abs());
    }
    let mut adj_err = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (n, side) in [(16, 3), (33, 5), (64, 7)] {
        let x = random_image(n, n, 10 + n as u64);
        let y = random_image(n, n, 20 + n as u64);
        let k = Kernel::new(side, (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lhs = conv2_same(&x, &k).unwrap().dot(&y);
        let rhs = x.dot(&conv2_adjoint(&y, &k).unwrap());
        adj_err = adj_err.max((lhs - rhs).norm());
    }
    let bank = dct_basis(3).unwrap();
    let mut orth_err = 0.0f64;
    for (i, a) in bank.kernels().iter().enumerate() {
        for (j, b) in bank.kernels().iter().enumerate() {
            let e = if i == j { 1.0 } else { 0.0 };
            orth_err = orth_err.max((a.frobenius_dot(b) - e).abs());
        }
    }
    let pass = fft_err <= 1e-12 && adj_err <= 1e-10 && orth_err <= 1e-12 && bank.count() == 8;
    report(
        3,
        "numerics",
        pass,
        &format!(
            "fft {fft_err:.2e} (1e-12), adjoint {adj_err:.2e} (1e-10), dct orthonormality {orth_err:.2e} (1e-12), {} filters",
            bank.count()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_descriptor_suite() {
    let dcfg = DescriptorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut in_range = true;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let scale = rng.random_range(0.01..10.0);
        let u = RealImage::from_fn(h, w, |_, _| scale * rng.random_range(0.0..1.0));
        let t = descriptor_map(&u, rng.random_range(1e-4..1.0), &dcfg).unwrap();
        in_range &= t.data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    let mut const_zero = true;
    for c in [0.0, 0.3, 7.0] {
        let t = descriptor_map(&RealImage::filled(20, 20, c), 0.1, &dcfg).unwrap();
        const_zero &= t.data().iter().all(|&v| v == 0.0);
    }
    let u = RealImage::from_fn(24, 24, |_, _| rng.random_range(0.0..1.0));
    let mut fd_err = 0.0f64;
    for v in [0.01, 0.1, 1.0] {
        let h = 1e-6 * v;
        let g = descriptor_grad_v(&u, v, &dcfg).unwrap();
        let tp = descriptor_map(&u, v + h, &dcfg).unwrap();
        let tm = descriptor_map(&u, v - h, &dcfg).unwrap();
        for ((a, p), m) in g.data().iter().zip(tp.data()).zip(tm.data()) {
            fd_err = fd_err.max((a - (p - m) / (2.0 * h)).abs());
        }
    }
    let hand = PatchStats::from_patches(&[0.0, 2.0], &[1.0, 1.0]).unwrap().descriptor(1.0);
    let pass = in_range && const_zero && fd_err <= 1e-6 && hand == 2.0 / 3.0;
    report(
        4,
        "descriptor",
        pass,
        &format!("range ok {in_range}, constant -> 0 {const_zero}, dT/dV fd error {fd_err:.2e} (1e-6), hand patch {hand}"),
    );
    assert!(pass);
}

#[test]
fn c05_plf_suite() {
    let mut id_err = 0.0f64;
    for n_c in [2, 11, 31, 101] {
        let plf = PlfActivation::identity(n_c).unwrap();
        for i in 0..=6000 {
            let a = -3.0 + 0.001 * i as f64;
            id_err = id_err.max((plf.eval(a) - a).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut cont_err = 0.0f64;
    for _ in 0..50 {
        let n_c = rng.random_range(2..120);
        let plf = PlfActivation::new((0..n_c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let branch = |i: isize| {
            if i < 0 {
                PlfSegment::Below
            } else if i as usize >= n_c - 1 {
                PlfSegment::Above
            } else {
                PlfSegment::Inside(i as usize, 0.0)
            }
        };
        for (i, &p) in plf.positions().iter().enumerate() {
            let left = plf.eval_branch(p, branch(i as isize - 1));
            let right = plf.eval_branch(p, branch(i as isize));
            cont_err = cont_err.max((left - right).abs()).max((plf.eval(p) - left).abs());
        }
    }
    let pass = id_err <= 1e-12 && cont_err <= 1e-12;
    report(5, "plf", pass, &format!("identity error on [-3, 3] {id_err:.2e}, knot discontinuity {cont_err:.2e} (tol 1e-12)"));
    assert!(pass);
}

#[test]
fn c06_overfit_run() {
    let t0 = Instant::now();
    let pair = phantom_pair();
    let dcfg = DescriptorConfig::default();
    let theta = NetworkParams::init(&NetworkConfig::default()).unwrap();
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        steps: 300,
        ..TrainConfig::default()
    };
    let (x0, _) = forward(&pair.y, &pair.mask, &theta, &dcfg).unwrap();
    let initial = nmse_loss(&x0, &pair.x_gt).unwrap();
    let (trained, history) = train(std::slice::from_ref(&pair), &theta, &dcfg, &tcfg).unwrap();
    let (x, _) = forward(&pair.y, &pair.mask, &trained, &dcfg).unwrap();
    let last = nmse_loss(&x, &pair.x_gt).unwrap();
    let zf = psnr(&pair.zero_filled(), &pair.x_gt).unwrap();
    let p = psnr(&x, &pair.x_gt).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = history.len() == 300 && last <= 0.5 * initial && p >= zf + 3.0 && secs < 600.0;
    report(
        6,
        "overfit",
        pass,
        &format!(
            "nmse {initial:.4} -> {last:.4} (ratio {:.3}, need <= 0.5), psnr {p:.2} dB vs zero-filled {zf:.2} dB (+{:.2}, need +3), {secs:.0} s",
            last / initial,
            p - zf
        ),
    );
    assert!(pass);
}

#[test]
fn c07_baseline_run() {
    let pair = phantom_pair();
    let cfg = IfrcsConfig::default();
    let a = ifrcs_solve(&pair.y, &pair.mask, &cfg).unwrap();
    let b = ifrcs_solve(&pair.y, &pair.mask, &cfg).unwrap();
    let zf = psnr(&pair.zero_filled(), &pair.x_gt).unwrap();
    let p = psnr(&a, &pair.x_gt).unwrap();
    let bitwise = a.data().iter().zip(b.data()).all(|(u, v)| u.re.to_bits() == v.re.to_bits() && u.im.to_bits() == v.im.to_bits());
    let pinned = (zf - ZERO_FILLED_64_DB).abs() <= 0.1;
    let pass = cfg.outer_iters == 20 && p >= zf + 2.0 && bitwise && pinned;
    report(
        7,
        "baseline",
        pass,
        &format!("psnr {p:.2} dB vs zero-filled {zf:.2} dB (+{:.2}, need +2), bit-deterministic {bitwise}", p - zf),
    );
    assert!(pass);
}

#[test]
fn c08_stage_count_trend() {
    let mask = make_mask(MaskPattern::Radial, 64, 64, 0.3, 7).unwrap();
    let pairs = |seeds: std::ops::RangeInclusive<u64>| -> Vec<TrainingPair> {
        seeds
            .map(|s| TrainingPair::simulate(&make_phantom_variant(64, 64, s).unwrap(), &mask).unwrap())
            .collect()
    };
    let train_set = pairs(1..=4);
    let val_set = pairs(11..=12);
    let dcfg = DescriptorConfig::default();
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        steps: 300,
        ..TrainConfig::default()
    };
    let mut scores = Vec::new();
    for stages in [1, 3, 5] {
        let theta = NetworkParams::init(&NetworkConfig {
            stages,
            ..NetworkConfig::default()
        })
        .unwrap();
        let (trained, _) = train(&train_set, &theta, &dcfg, &tcfg).unwrap();
        let mean = val_set
            .iter()
            .map(|v| psnr(&forward(&v.y, &v.mask, &trained, &dcfg).unwrap().0, &v.x_gt).unwrap())
            .sum::<f64>()
            / val_set.len() as f64;
        scores.push(mean);
    }
    let pass = scores[1] >= scores[0] - 0.1 && scores[2] >= scores[0] - 0.1;
    report(
        8,
        "stage-count trend",
        pass,
        &format!("validation psnr N_s=1 {:.2}, N_s=3 {:.2}, N_s=5 {:.2} dB", scores[0], scores[1], scores[2]),
    );
    assert!(pass);
}

#[test]
fn c09_weight_sharing_equivalence() {
    let cfg = NetworkConfig {
        stages: 4,
        weight_sharing: true,
        plf_init: PlfInit::SoftThreshold,
        ..NetworkConfig::default()
    };
    let mut shared = NetworkParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    shared.visit_mut(|c, v| match c {
        ParamClass::Rho | ParamClass::V => *v *= rng.random_range(0.5..2.0),
        _ => *v += rng.random_range(-0.05..0.05),
    });
    let unshared = shared.unshared();
    let mask = make_mask(MaskPattern::Radial, 48, 48, 0.3, 9).unwrap();
    let pair = TrainingPair::simulate(&make_phantom(48, 48).unwrap(), &mask).unwrap();
    let dcfg = DescriptorConfig::default();
    let (a, _) = forward(&pair.y, &pair.mask, &shared, &dcfg).unwrap();
    let (b, _) = forward(&pair.y, &pair.mask, &unshared, &dcfg).unwrap();
    let bitwise = a.data().iter().zip(b.data()).all(|(u, v)| u.re.to_bits() == v.re.to_bits() && u.im.to_bits() == v.im.to_bits());
    let pass = bitwise && !unshared.weight_sharing && shared.len() < unshared.len();
    report(
        9,
        "weight sharing",
        pass,
        &format!("shared ({} params) vs copied ({} params) bit-exact {bitwise}", shared.len(), unshared.len()),
    );
    assert!(pass);
}

fn ifrnet(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ifrnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
        .status
        .success()
}

/// Runs a full command sequence in `dir` and returns every produced file.
fn cli_session(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("run.toml"), "[training]\nsteps = 4\nlearning_rate = 0.01\n\n[network]\nstages = 2\n").unwrap();
    let steps: [&[&str]; 8] = [
        &["--out", "mask", "mask", "--pattern", "radial", "--size", "64", "--rate", "0.3", "--seed", "7", "-o", "m"],
        &["--out", "sim", "simulate", "--phantom", "--size", "64", "--mask", "mask/m", "-o", "ph"],
        &["--config", "run.toml", "--out", "train", "--seed", "3", "train", "--pair", "sim/ph"],
        &["--config", "run.toml", "--out", "recon", "reconstruct", "--checkpoint", "train/ckpt_final.ifr", "--pair", "sim/ph"],
        &["--out", "eval", "eval", "--recon", "recon/recon", "--gt", "sim/ph.gt"],
        &["--out", "grad", "gradcheck", "--seed", "5"],
        &["--out", "base", "baseline", "--pair", "sim/ph"],
        &["--out", "mask2", "mask", "--pattern", "random1d", "--size", "32", "--rate", "0.4", "--seed", "2"],
    ];
    for args in steps {
        assert!(ifrnet(dir, args), "ifrnet {args:?} failed");
    }
    let mut files: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn c10_metrics_sanity_and_cli_determinism() {
    let gt = make_phantom(64, 64).unwrap();
    let peak_one = ComplexImage::from_fn(32, 32, |i, j| C64::new(if (i, j) == (0, 0) { 1.0 } else { 0.5 }, 0.0));
    let off = peak_one.map(|c| c + C64::new(0.1, 0.0));
    let p20 = psnr(&off, &peak_one).unwrap();
    let s_self = ssim(&gt, &gt).unwrap();
    let h_self = hfen(&gt, &gt).unwrap();
    let h_zero = hfen(&ComplexImage::zeros(64, 64), &gt).unwrap();
    let metrics_ok = (p20 - 20.0).abs() <= 1e-12 && s_self == 1.0 && h_self == 0.0 && h_zero == 1.0;

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_a = cli_session(a.path());
    let run_b = cli_session(b.path());
    let echoes = run_a.iter().filter(|(name, _)| name.ends_with("config.toml")).count();
    let identical = run_a == run_b;
    let pass = metrics_ok && identical && echoes == 8;
    report(
        10,
        "metrics and cli determinism",
        pass,
        &format!(
            "psnr {p20} dB, ssim(self) {s_self}, hfen(self) {h_self}, hfen(0, gt) {h_zero}; {} cli outputs identical across runs {identical}",
            run_a.len()
        ),
    );
    assert!(pass);
}
