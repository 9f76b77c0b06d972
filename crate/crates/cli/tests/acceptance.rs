//! Acceptance run: one PASS / FAIL / REPORT line per criterion.
//!
//! `NOISYCYCLE_CRITERIA=1,5,11` restricts the run to a subset. The trend experiment
//! (criterion 12) evaluates the runs under `results/trend` when they exist; with
//! `NOISYCYCLE_TREND=1` it trains whatever is missing first (hours on one CPU core).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use candle_core::{DType, Device, Tensor, Var};
use noisycycle::config::ExperimentConfig;
use noisycycle::data::{self, Split};
use noisycycle::eval::{evaluate, EvalOptions};
use noisycycle::loss::{
    adv_loss, discriminator_loss, generator_loss, generator_loss_values, rec_loss_image, rec_loss_seg,
    seg_loss, LossWeights,
};
use noisycycle::metrics::{compute_psnr, measure_snr, sigma_for_snr, ConfusionAccumulator, MeanMode};
use noisycycle::nn::{PatchDiscriminator, Scale};
use noisycycle::noise::{gaussian_inject, quantize, quantize_scalar, build_codebook};
use noisycycle::pool::{ImagePool, PoolPolicy};
use noisycycle::tensor::{one_hot_encode, softmax, to_host, Image, LabelMap, OneHotMask, RealismMap, SegLogits};
use noisycycle::train::{read_metrics_csv, train, Group, IterationTrace, Step, TrainOptions};
use noisycycle_cli::matrix::{run_matrix, MatrixConfig, MatrixResults};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

enum Verdict {
    Pass(String),
    Fail(String),
    Report(String),
}

fn check(ok: bool, detail: String) -> Result<Verdict> {
    Ok(if ok { Verdict::Pass(detail) } else { Verdict::Fail(detail) })
}

fn cpu() -> Device {
    Device::Cpu
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------------------
// oracles

/// Levels `(2k - L) / L`, each the correctly rounded value of the exact rational.
fn oracle_levels(bits: u32) -> Vec<f64> {
    let l = (1i64 << bits) - 1;
    (0..=l).map(|k| (2 * k - l) as f64 / l as f64).collect()
}

/// Exhaustive nearest-level search, lowest level on ties.
fn oracle_quantize(x: f64, levels: &[f64]) -> f64 {
    let mut best = levels[0];
    for &c in &levels[1..] {
        if (x - c).abs() < (x - best).abs() {
            best = c;
        }
    }
    best
}

fn oracle_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(noisy).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (signal / noise).log10()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

/// Gradient of `f` at `x` by backpropagation and by central differences with step 1e-4.
fn grad_check(x0: &[f64], dims: &[usize], f: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let var = Var::from_vec(x0.to_vec(), dims, &cpu())?;
    let loss = f(var.as_tensor())?;
    let grads = loss.backward()?;
    let analytic = to_host(grads.get(var.as_tensor()).context("no gradient reached the input")?)?;
    let h = 1e-4;
    let eval = |x: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(x.to_vec(), dims, &cpu())?;
        Ok(f(&t)?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = eval(&x)?;
        x[i] = x0[i] - h;
        let down = eval(&x)?;
        x[i] = x0[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn random_one_hot(r: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> Result<OneHotMask> {
    let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..classes as u32)).collect())?;
    Ok(one_hot_encode(&labels, classes, DType::F64, &cpu())?)
}

// ---------------------------------------------------------------------------------------
// criteria

fn c1_quantizer() -> Result<Verdict> {
    let mut r = rng(1);
    let n = 1_000_000;
    let mut mismatches = 0usize;
    for bits in 1..=4u32 {
        let levels = oracle_levels(bits);
        let codebook = build_codebook(bits)?;
        let xs: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..=3.0)).collect();
        let t = SegLogits::new(Tensor::from_vec(xs.clone(), (4, 500, 500), &cpu())?)?;
        let q = to_host(quantize(&t, bits)?.tensor())?;
        for (x, qt) in xs.iter().zip(&q) {
            let want = oracle_quantize(*x, &levels);
            if *qt != want || quantize_scalar(*x, &codebook) != want {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 4 x 10^6 scalars"))
}

fn c2_ste() -> Result<Verdict> {
    let mut r = rng(2);
    let xs: Vec<f64> = (0..1000).map(|_| r.random_range(-2.0..=2.0)).collect();
    let mut worst = 0.0f64;
    for bits in 1..=4u32 {
        let x = Var::from_vec(xs.clone(), (4, 10, 25), &cpu())?;
        let q = quantize(&SegLogits::new(x.as_tensor().clone())?, bits)?;
        // f = sin, so the expected input gradient is cos(q(x))
        let grads = q.tensor().sin()?.sum_all()?.backward()?;
        let g = to_host(grads.get(x.as_tensor()).context("no gradient")?)?;
        let levels = oracle_levels(bits);
        for (x, g) in xs.iter().zip(&g) {
            worst = worst.max((g - oracle_quantize(*x, &levels).cos()).abs());
        }
    }
    check(worst == 0.0, format!("max |grad - f'(q(x))| = {worst:e} over 10^3 points, n = 1..4"))
}

fn c3_snr_round_trip() -> Result<Verdict> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (s, h, w) = (r.random_range(2..=20), r.random_range(1..=16), r.random_range(1..=16));
        let values: Vec<f64> = (0..s * h * w).map(|_| r.random_range(-5.0..5.0)).collect();
        let target: f64 = r.random_range(-20.0..=40.0);
        let logits = SegLogits::new(Tensor::from_vec(values.clone(), (s, h, w), &cpu())?)?;
        let sigma = sigma_for_snr(&logits, target)?;
        let energy: f64 = values.iter().map(|v| v * v).sum();
        let implied = 10.0 * (energy / ((h * w) as f64 * sigma * sigma)).log10();
        worst = worst.max((implied - target).abs());
    }
    check(worst < 1e-9, format!("max deviation {worst:e} dB over 100 tensors"))
}

fn c4_gaussian_gap() -> Result<Verdict> {
    let mut r = rng(4);
    let (s, h, w) = (20, 250, 200);
    let expected_gap = 10.0 * 20f64.log10();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for target in [-10.0, 7.38, 30.0] {
        let values: Vec<f64> = (0..s * h * w).map(|_| r.random_range(-3.0..3.0)).collect();
        let clean = SegLogits::new(Tensor::from_vec(values.clone(), (s, h, w), &cpu())?)?;
        let noisy = gaussian_inject(&clean, target, &mut r)?;
        let measured = oracle_snr_db(&values, &to_host(noisy.tensor())?);
        let module = measure_snr(&clean, &noisy)?;
        ensure!((module - measured).abs() < 1e-9, "measure_snr {module} disagrees with oracle {measured}");
        let gap = target - measured;
        worst = worst.max((gap - expected_gap).abs());
        lines.push(format!("{target} dB -> {measured:.3} dB"));
    }
    check(
        worst < 0.5,
        format!("gap within {worst:.4} dB of 10 log10(20) = {expected_gap:.3} at 10^6 elements ({})", lines.join(", ")),
    )
}

fn c5_gradients() -> Result<Verdict> {
    let mut r = rng(5);
    let (s, h, w) = (2, 4, 4);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, v)) => *v = v.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..5 {
        let mask = random_one_hot(&mut r, s, h, w)?;
        let z: Vec<f64> = (0..s * h * w).map(|_| r.random_range(-2.0..2.0)).collect();
        record(
            "seg",
            grad_check(&z, &[s, h, w], &|t| Ok(seg_loss(&softmax(&SegLogits::new(t.clone())?)?, &mask)?))?,
        );
        record(
            "rec_y",
            grad_check(&z, &[s, h, w], &|t| Ok(rec_loss_seg(&softmax(&SegLogits::new(t.clone())?)?, &mask)?))?,
        );
        let p: Vec<f64> = (0..h * w).map(|_| r.random_range(0.05..0.95)).collect();
        record("adv", grad_check(&p, &[h, w], &|t| Ok(adv_loss(&RealismMap::new(t.clone())?)?))?);
        let other: Vec<f64> = (0..h * w).map(|_| r.random_range(0.05..0.95)).collect();
        let other_t = RealismMap::new(Tensor::from_vec(other.clone(), (h, w), &cpu())?)?;
        record(
            "disc(real)",
            grad_check(&p, &[h, w], &|t| Ok(discriminator_loss(&RealismMap::new(t.clone())?, &other_t)?))?,
        );
        record(
            "disc(gen)",
            grad_check(&p, &[h, w], &|t| Ok(discriminator_loss(&other_t, &RealismMap::new(t.clone())?)?))?,
        );
        // keep every difference away from the kink of |.|
        let x_bar: Vec<f64> = (0..3 * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let x_rec: Vec<f64> = x_bar
            .iter()
            .map(|v| {
                let d: f64 = r.random_range(0.01..0.5);
                if r.random::<bool>() { v + d } else { v - d }
            })
            .collect();
        let target = Image::new(Tensor::from_vec(x_bar, (3, h, w), &cpu())?)?;
        record(
            "rec_x",
            grad_check(&x_rec, &[3, h, w], &|t| Ok(rec_loss_image(&Image::new(t.clone())?, &target)?))?,
        );
    }
    let grad_ok = worst.iter().all(|(_, e)| *e < 1e-4);

    // composition: linear in each component with the nested weights as coefficients
    let weights = LossWeights::default();
    let mut linear_err = 0.0f64;
    for _ in 0..20 {
        let a: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..3.0));
        let b: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..3.0));
        let k: f64 = r.random_range(-2.0..2.0);
        let v = |x: [f64; 4]| generator_loss_values(x[0], x[1], x[2], x[3], &weights).map(|g| g.total);
        let combined: [f64; 4] = std::array::from_fn(|i| a[i] + k * b[i]);
        linear_err = linear_err.max((v(combined)? - (v(a)? + k * v(b)?)).abs());
        let vars: Vec<Var> = a.iter().map(|&x| Var::new(x, &cpu())).collect::<candle_core::Result<_>>()?;
        let total = generator_loss(vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor(), vars[3].as_tensor(), &weights)?.total;
        linear_err = linear_err.max((total.to_scalar::<f64>()? - v(a)?).abs());
        let grads = total.backward()?;
        let LossWeights { alpha, beta, gamma } = weights;
        let coeff = [gamma * alpha, gamma * (1.0 - alpha), (1.0 - gamma) * beta, (1.0 - gamma) * (1.0 - beta)];
        for (var, c) in vars.iter().zip(coeff) {
            let g = grads.get(var.as_tensor()).context("no gradient")?.to_scalar::<f64>()?;
            linear_err = linear_err.max((g - c).abs());
        }
    }
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        grad_ok && linear_err < 1e-12,
        format!("max relative error: {detail}; composition linearity error {linear_err:.1e}"),
    )
}

fn c6_closed_forms() -> Result<Verdict> {
    let (h, w) = (5, 7);
    let adv = adv_loss(&RealismMap::new(Tensor::full(0.5f64, (h, w), &cpu())?)?)?.to_scalar::<f64>()?;
    let x_bar = Tensor::full(-0.25f64, (3, h, w), &cpu())?;
    let rec = rec_loss_image(&Image::new(x_bar.affine(1.0, 0.5)?)?, &Image::new(x_bar)?)?.to_scalar::<f64>()?;
    let mut mce_err = 0.0f64;
    let mut r = rng(6);
    for s in [2usize, 4, 20] {
        let uniform = softmax(&SegLogits::new(Tensor::zeros((s, h, w), DType::F64, &cpu())?)?)?;
        let mce = seg_loss(&uniform, &random_one_hot(&mut r, s, h, w)?)?.to_scalar::<f64>()?;
        mce_err = mce_err.max((mce - (s as f64).ln()).abs());
    }
    let ok = (adv - 0.25).abs() <= 1e-9 && (rec - 1.5).abs() <= 1e-9 && mce_err <= 1e-9;
    check(ok, format!("adv {adv}, rec_x {rec}, MCE error vs ln S {mce_err:.1e}"))
}

fn c7_discriminator() -> Result<Verdict> {
    let d = PatchDiscriminator::new(Scale::Full, 7, DType::F32, &cpu())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (h, w) in [(64, 64), (128, 256), (256, 512)] {
        // four 4x4 convolutions with padding 1 and strides 2, 2, 2, 1, then a 4x4 head
        let conv = |n: usize, stride: usize| (n + 2 - 4) / stride + 1;
        let side = |n| conv(conv(conv(conv(conv(n, 2), 2), 2), 1), 1);
        let want = (side(h), side(w));
        ensure!(want == (h / 8 - 2, w / 8 - 2), "oracle disagrees with (H/8-2, W/8-2)");
        let x = Image::new(Tensor::zeros((1, 3, h, w), DType::F32, &cpu())?)?;
        let got = d.forward(&x)?.patch_dims();
        ok &= got == want;
        lines.push(format!("{h}x{w} -> {}x{}", got.0, got.1));
    }
    check(ok, lines.join(", "))
}

fn tiny_config(dir: &Path, name: &str, overrides: &[(&str, &str)]) -> Result<ExperimentConfig> {
    let mut o: Vec<(String, String)> = vec![
        ("run.out_dir".into(), dir.display().to_string()),
        ("run.name".into(), name.into()),
    ];
    o.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    Ok(ExperimentConfig::from_toml(&ExperimentConfig::tiny().to_toml()?, &o)?)
}

/// Independent reading of one trace against the six-step protocol.
fn audit(t: &IterationTrace) -> Vec<String> {
    let mut out = Vec::new();
    let order: Vec<Step> = t.steps.iter().map(|s| s.step).collect();
    if order != Step::ALL {
        out.push(format!("iteration {}: order {order:?}", t.iteration));
    }
    if t.updates != [(Step::GeneratorUpdate, Group::Generators), (Step::DiscriminatorUpdate, Group::Discriminator)] {
        out.push(format!("iteration {}: updates {:?}", t.iteration, t.updates));
    }
    let Some((g0, d0)) = t.initial else {
        out.push(format!("iteration {}: not instrumented", t.iteration));
        return out;
    };
    let digests: Vec<(u64, u64)> = t
        .steps
        .iter()
        .map(|s| (s.generators.unwrap_or(0), s.discriminator.unwrap_or(0)))
        .collect();
    if digests.len() != 6 {
        return out;
    }
    for (i, &(g, d)) in digests.iter().enumerate() {
        if i < 3 && g != g0 {
            out.push(format!("iteration {}: G/F moved before their update", t.iteration));
        }
        if i < 5 && d != d0 {
            out.push(format!("iteration {}: D moved outside its update", t.iteration));
        }
        if i >= 4 && g != digests[3].0 {
            out.push(format!("iteration {}: G/F moved after their update", t.iteration));
        }
    }
    // the updates themselves must be visible, or the freezing checks prove nothing
    if digests[3].0 == g0 {
        out.push(format!("iteration {}: G/F update left no trace", t.iteration));
    }
    if digests[5].1 == d0 {
        out.push(format!("iteration {}: D update left no trace", t.iteration));
    }
    out
}

fn c8_protocol() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let config = tiny_config(
        dir.path(),
        "protocol",
        &[("train_count", "200"), ("epochs_total", "1"), ("epochs_constant_lr", "1"), ("noise", "quant:2")],
    )?;
    let mut iterations = 0;
    let mut own = Vec::new();
    let mut module = Vec::new();
    let options = TrainOptions {
        instrument: true,
        ..Default::default()
    };
    train(&config, &config.run_dir(), &options, &mut |t| {
        iterations += 1;
        own.extend(audit(t));
        module.extend(t.violations());
        Ok(())
    })?;
    check(
        iterations == 50 && own.is_empty() && module.is_empty(),
        format!(
            "{iterations} iterations, {} audit violations, {} trainer-reported violations{}",
            own.len(),
            module.len(),
            own.first().map_or(String::new(), |v| format!(" (first: {v})"))
        ),
    )
}

fn c9_pool() -> Result<Verdict> {
    let tagged = |v: f32| -> Result<Image> { Ok(Image::new(Tensor::full(v, (3, 2, 2), &cpu())?)?) };
    let tag = |img: &Tensor| -> Result<f32> { Ok(img.flatten_all()?.get(0)?.to_scalar::<f32>()?) };

    let mut pool = ImagePool::new(50, PoolPolicy::Uniform, 9)?;
    for i in 0..200 {
        pool.push_and_sample(&tagged(i as f32)?)?;
    }
    let mut held: Vec<f32> = pool.slots().iter().map(tag).collect::<Result<_>>()?;
    held.sort_by(f32::total_cmp);
    let cap_ok = pool.len() == 50 && held == (150..200).map(|v| v as f32).collect::<Vec<_>>();

    // every draw returns the content of one slot; count which slot it was
    let draws = 10_000;
    let mut counts = vec![0u64; 50];
    for i in 0..draws {
        let out = tag(pool.push_and_sample(&tagged((1000 + i) as f32)?)?.tensor())?;
        let slot = pool
            .slots()
            .iter()
            .position(|s| tag(s).map(|v| v == out).unwrap_or(false))
            .context("sampled image is not stored in the pool")?;
        counts[slot] += 1;
    }
    let expected = draws as f64 / 50.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(49.0)?.inverse_cdf(0.99);

    let source = Var::from_vec(vec![0.5f32; 12], (3, 2, 2), &cpu())?;
    let generated = Image::new(source.as_tensor().affine(2.0, 0.0)?)?;
    let mut fresh = ImagePool::new(50, PoolPolicy::Uniform, 10)?;
    let sampled = fresh.push_and_sample(&generated)?;
    let grads = sampled.tensor().sum_all()?.backward()?;
    let detached = grads.get(source.as_tensor()).is_none();

    check(
        cap_ok && chi2 < critical && detached,
        format!(
            "size {} holding the newest 50 = {cap_ok}; chi2 {chi2:.1} < {critical:.1} (49 dof, 99%); no gradient path = {detached}",
            pool.len()
        ),
    )
}

fn c10_metrics() -> Result<Verdict> {
    let mut r = rng(10);
    let s = 5;
    let mut total = ConfusionAccumulator::new(s);
    let mut tallies = vec![(0u64, 0u64); s];
    let mut mismatches = 0;
    for _ in 0..100 {
        let draw = |r: &mut ChaCha8Rng| (0..64).map(|_| r.random_range(0..s as u32)).collect::<Vec<_>>();
        let (p, t) = (draw(&mut r), draw(&mut r));
        let mut acc = ConfusionAccumulator::new(s);
        acc.accumulate(&LabelMap::new(8, 8, p.clone())?, &LabelMap::new(8, 8, t.clone())?, None)?;
        total.merge(&acc)?;
        let mut ious = Vec::new();
        for c in 0..s as u32 {
            let inter = p.iter().zip(&t).filter(|(a, b)| **a == c && **b == c).count() as u64;
            let union = p.iter().zip(&t).filter(|(a, b)| **a == c || **b == c).count() as u64;
            tallies[c as usize].0 += inter;
            tallies[c as usize].1 += union;
            let want = (union > 0).then(|| inter as f64 / union as f64);
            if acc.iou(c as usize) != want {
                mismatches += 1;
            }
            ious.push(want);
        }
        let strict = ious.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / s as f64;
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        let skip = defined.iter().sum::<f64>() / defined.len() as f64;
        if acc.miou(MeanMode::Strict)? != strict || acc.miou(MeanMode::SkipUndefined)? != skip {
            mismatches += 1;
        }
    }
    for (c, (inter, union)) in tallies.iter().enumerate() {
        if total.iou(c) != Some(*inter as f64 / *union as f64) {
            mismatches += 1;
        }
    }
    let image = |v: f64| -> Result<Image> { Ok(Image::new(Tensor::full(v, (3, 4, 4), &cpu())?)?) };
    let psnr_0 = compute_psnr(&image(-1.0)?, &image(1.0)?)?;
    let psnr_20 = compute_psnr(&image(0.3)?, &image(0.5)?)?;
    let psnr_ok = psnr_0.abs() <= 1e-9 && (psnr_20 - 20.0).abs() <= 1e-9;
    check(
        mismatches == 0 && psnr_ok,
        format!("{mismatches} IoU/mIoU mismatches over 100 8x8 pairs; PSNR(MSE 4) = {psnr_0}, PSNR(MSE 0.04) = {psnr_20}"),
    )
}

fn c11_smoke() -> Result<Verdict> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let config = tiny_config(dir.path(), "smoke", &[])?;
    let outcome = train(&config, &config.run_dir(), &TrainOptions::default(), &mut |_| Ok(()))?;
    let rows = &outcome.rows;
    ensure!(rows.len() == 200, "expected 200 iterations, ran {}", rows.len());
    let window = |from: usize| rows[from..from + 20].iter().map(|r| r.j_seg).sum::<f64>() / 20.0;
    let (first, last) = (window(0), window(rows.len() - 20));
    let drop = 1.0 - last / first;

    let spec = config.dataset_spec();
    let val = data::open(&spec, Split::Val, &cpu())?;
    let mut nets = outcome.trainer.nets;
    let opts = EvalOptions {
        classes: config.eval_classes(),
        mean_mode: config.eval.mean_mode,
        noise: config.train.noise,
        noise_at_eval: config.eval.noise_at_eval,
        seed: config.train.seed,
    };
    let report = evaluate(&mut nets, val.as_ref(), &spec.class_names(), &opts)?;
    let chance = 1.0 / spec.classes as f64;
    let elapsed = start.elapsed();
    check(
        drop >= 0.30 && report.miou > chance && elapsed < Duration::from_secs(600),
        format!(
            "j_seg average {first:.4} -> {last:.4} ({:.1}% drop); held-out mIoU {:.4} vs chance {chance}; {:.0?}",
            drop * 100.0,
            report.miou,
            elapsed
        ),
    )
}

fn c12_trend() -> Result<Verdict> {
    let root = workspace_root();
    // relative paths in the summary files, as when run from the command line
    std::env::set_current_dir(&root)?;
    let mut cfg = MatrixConfig::load(Path::new("configs/trend.toml"))?;
    let train_missing = std::env::var("NOISYCYCLE_TREND").is_ok_and(|v| v == "1");
    let complete = cfg.runs.iter().all(|r| {
        cfg.seeds.iter().all(|&s| {
            noisycycle::train::RunManifest::read(&cfg.run_dir(&r.label, s).join("manifest.toml"))
                .is_ok_and(|m| m.status == noisycycle::train::RunStatus::Complete)
        })
    });
    if !complete && !train_missing {
        return Ok(Verdict::Report(format!(
            "not run: {} lacks finished runs; set NOISYCYCLE_TREND=1 or run `noisycycle matrix --config configs/trend.toml`",
            cfg.out_dir.display()
        )));
    }
    cfg.train_missing = train_missing;
    let results: MatrixResults = run_matrix(&cfg)?;
    let pairs = results.paired_miou("quant2", "none");
    let wins = pairs.iter().filter(|(_, q, n)| q >= n).count();
    let seeds = pairs
        .iter()
        .map(|(s, q, n)| format!("seed {s}: quant2 {:.1}% vs none {:.1}%", q * 100.0, n * 100.0))
        .collect::<Vec<_>>()
        .join("; ");
    let table = results.table_markdown();
    let probe = results
        .table()
        .iter()
        .map(|t| format!("{} probe ΔPSNR {:.3} dB", t.label, t.probe_delta_db))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Verdict::Report(format!(
        "quant2 >= none in {wins} of {} seeds ({seeds}); {probe}; tables in {}\n{table}",
        pairs.len(),
        cfg.out_dir.display()
    )))
}

fn c13_determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let overrides = [("epochs_total", "3"), ("epochs_constant_lr", "3"), ("noise", "gauss:10"), ("seed", "13")];
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let config = tiny_config(dir.path(), name, &overrides)?;
        train(&config, &config.run_dir(), &TrainOptions::default(), &mut |_| Ok(()))?;
        files.push(config.run_dir().join("metrics.csv"));
    }
    let a = std::fs::read(&files[0])?;
    let b = std::fs::read(&files[1])?;
    let rows = read_metrics_csv(&files[0])?.len();
    if rows == 0 {
        bail!("metrics CSV is empty");
    }
    check(a == b, format!("{rows} iterations each, {} bytes, identical = {}", a.len(), a == b))
}

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 13] = [
    (1, "quantizer matches exhaustive search", c1_quantizer),
    (2, "straight-through gradient", c2_ste),
    (3, "SNR / sigma round trip", c3_snr_round_trip),
    (4, "Gaussian SNR gap", c4_gaussian_gap),
    (5, "loss gradients and composition", c5_gradients),
    (6, "loss closed forms", c6_closed_forms),
    (7, "discriminator geometry", c7_discriminator),
    (8, "protocol conformance", c8_protocol),
    (9, "image pool", c9_pool),
    (10, "metric oracles", c10_metrics),
    (11, "smoke training", c11_smoke),
    (12, "trend experiment (report only)", c12_trend),
    (13, "determinism", c13_determinism),
];

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("NOISYCYCLE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run)
            .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")))
            .unwrap_or_else(|e| Verdict::Fail(format!("error: {e:#}")));
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Report(d) => ("REPORT", d),
        };
        println!("criterion {id:>2} {tag:<6} {name} [{:.1?}]: {detail}", start.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
