use candle_core::{DType, Device, Tensor};
use noisycycle::data::{self, Dataset, DatasetSpec, Sample, Source, Split};
use noisycycle::eval::{evaluate, parse_report_csv, watermark_probe, CycleModel, EvalOptions};
use noisycycle::metrics::EvalClasses;
use noisycycle::nn::Scale;
use noisycycle::noise::NoiseSpec;
use noisycycle::tensor::{argmax_mask, one_hot_encode, Image, LabelMap, SegLogits};
use noisycycle::train::Networks;

const CLASSES: usize = 4;

fn dataset() -> Box<dyn Dataset> {
    let spec = DatasetSpec {
        source: Source::Synthetic { train_count: 2, val_count: 6 },
        height: 32,
        width: 32,
        classes: CLASSES,
        seed: 5,
    };
    data::open(&spec, Split::Val, &Device::Cpu).unwrap()
}

fn pixels(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
}

/// Knows every sample: segments by looking the image up and reconstructs by looking
/// the arg-max map up, so both directions are exact.
struct Oracle {
    samples: Vec<Sample>,
}

impl Oracle {
    fn new(ds: &dyn Dataset) -> Self {
        Self { samples: (0..ds.len()).map(|i| ds.get(i).unwrap()).collect() }
    }
}

fn signed_one_hot(labels: &LabelMap) -> SegLogits {
    let one_hot = one_hot_encode(labels, CLASSES, DType::F32, &Device::Cpu).unwrap();
    SegLogits::new(one_hot.tensor().affine(2.0, -1.0).unwrap()).unwrap()
}

impl CycleModel for Oracle {
    fn classes(&self) -> usize {
        CLASSES
    }

    fn segment(&mut self, x: &Image) -> noisycycle::Result<SegLogits> {
        let key = pixels(x.tensor());
        let s = self.samples.iter().find(|s| pixels(s.image.tensor()) == key).expect("known image");
        Ok(signed_one_hot(&s.labels))
    }

    fn reconstruct(&mut self, y: &SegLogits) -> noisycycle::Result<Image> {
        let labels = argmax_mask(y.tensor())?;
        let s = self.samples.iter().find(|s| s.labels == labels).expect("known label map");
        Ok(s.image.clone())
    }
}

/// Predicts the background everywhere and reconstructs a grey image.
struct Background;

impl CycleModel for Background {
    fn classes(&self) -> usize {
        CLASSES
    }

    fn segment(&mut self, x: &Image) -> noisycycle::Result<SegLogits> {
        let (_, h, w) = x.chw();
        Ok(signed_one_hot(&LabelMap::filled(h, w, CLASSES as u32 - 1)))
    }

    fn reconstruct(&mut self, y: &SegLogits) -> noisycycle::Result<Image> {
        let (_, h, w) = y.chw();
        Image::new(Tensor::zeros((3, h, w), DType::F32, &Device::Cpu)?)
    }
}

fn names() -> Vec<String> {
    (0..CLASSES).map(|c| format!("c{c}")).collect()
}

#[test]
fn oracle_model_scores_perfectly() {
    let ds = dataset();
    let mut model = Oracle::new(ds.as_ref());
    let report = evaluate(&mut model, ds.as_ref(), &names(), &EvalOptions::default()).unwrap();
    assert_eq!(report.miou, 1.0);
    assert_eq!(report.psnr_db, f64::INFINITY);
    assert_eq!(report.snr_db, f64::INFINITY);
    assert_eq!(report.images, 6);

    // the infinities survive the report file
    let parsed = parse_report_csv(&report.to_csv()).unwrap();
    assert_eq!(parsed.psnr_db, f64::INFINITY);
    assert_eq!(parsed.miou, 1.0);
}

#[test]
fn codebook_valued_latents_pass_quantisation_unchanged() {
    let ds = dataset();
    let mut model = Oracle::new(ds.as_ref());
    for bits in 1..=4 {
        let opts = EvalOptions { noise: NoiseSpec::Quantize { bits }, ..EvalOptions::default() };
        let report = evaluate(&mut model, ds.as_ref(), &names(), &opts).unwrap();
        assert_eq!(report.snr_db, f64::INFINITY, "{bits} bits");
        assert_eq!(report.psnr_db, f64::INFINITY, "{bits} bits");
    }
}

#[test]
fn constant_prediction_matches_counted_iou() {
    let ds = dataset();
    let (mut bg, mut total) = (0usize, 0usize);
    let mut present = [false; CLASSES];
    let mut energy = Vec::new();
    for i in 0..ds.len() {
        let s = ds.get(i).unwrap();
        bg += s.labels.data.iter().filter(|&&l| l == CLASSES as u32 - 1).count();
        total += s.labels.data.len();
        for &l in &s.labels.data {
            present[l as usize] = true;
        }
        let v = pixels(s.image.tensor());
        energy.push(v.iter().map(|&p| (p as f64).powi(2)).sum::<f64>() / v.len() as f64);
    }
    assert!(present.iter().all(|&p| p), "fixture should contain every class");

    let report = evaluate(&mut Background, ds.as_ref(), &names(), &EvalOptions::default()).unwrap();
    // the background IoU is its pixel share; every other class has IoU zero
    let bg_iou = bg as f64 / total as f64;
    assert!((report.iou[CLASSES - 1].unwrap() - bg_iou).abs() < 1e-12);
    assert!((report.miou - bg_iou / CLASSES as f64).abs() < 1e-12);

    // a zero reconstruction has MSE equal to the image energy; peak-to-peak range is 2
    let psnr: f64 = energy.iter().map(|e| 10.0 * (4.0 / e).log10()).sum::<f64>() / energy.len() as f64;
    assert!((report.psnr_db - psnr).abs() < 1e-4, "{} vs {psnr}", report.psnr_db);

    // excluding the background leaves only zero IoUs
    let opts = EvalOptions { classes: EvalClasses::ExcludeBackground, ..EvalOptions::default() };
    let report = evaluate(&mut Background, ds.as_ref(), &names(), &opts).unwrap();
    assert_eq!(report.miou, 0.0);
    assert_eq!(report.evaluated, vec![0, 1, 2]);
}

#[test]
fn probe_gap_vanishes_when_reconstruction_reads_only_the_arg_max() {
    let ds = dataset();
    let probe = watermark_probe(&mut Oracle::new(ds.as_ref()), ds.as_ref()).unwrap();
    assert_eq!(probe.delta_db, 0.0);
    assert_eq!(probe.per_image.len(), 6);
    let probe = watermark_probe(&mut Background, ds.as_ref()).unwrap();
    assert_eq!(probe.delta_db, 0.0);
}

/// A view of a dataset in a different sample order.
struct Permuted<'a> {
    inner: &'a dyn Dataset,
    order: Vec<usize>,
}

impl Dataset for Permuted<'_> {
    fn len(&self) -> usize {
        self.order.len()
    }
    fn get(&self, index: usize) -> noisycycle::Result<Sample> {
        self.inner.get(self.order[index])
    }
    fn classes(&self) -> usize {
        self.inner.classes()
    }
}

#[test]
fn results_do_not_depend_on_sample_order() {
    let ds = dataset();
    let shuffled = Permuted { inner: ds.as_ref(), order: vec![4, 1, 5, 0, 3, 2] };
    let mut nets = Networks::new(Scale::Tiny, CLASSES, 3, DType::F32, &Device::Cpu).unwrap();

    let a = watermark_probe(&mut nets, ds.as_ref()).unwrap();
    let b = watermark_probe(&mut nets, &shuffled).unwrap();
    assert!(a.delta_db != 0.0, "an untrained network should see a gap");
    assert!((a.delta_db - b.delta_db).abs() < 1e-9);
    assert!((a.psnr_soft_db - b.psnr_soft_db).abs() < 1e-9);

    // noise-free evaluation has no per-index randomness
    let opts = EvalOptions::default();
    let ea = evaluate(&mut nets, ds.as_ref(), &names(), &opts).unwrap();
    let eb = evaluate(&mut nets, &shuffled, &names(), &opts).unwrap();
    assert_eq!(ea.miou, eb.miou);
    assert_eq!(ea.iou, eb.iou);
    assert!((ea.psnr_db - eb.psnr_db).abs() < 1e-9);
}

#[test]
fn evaluation_is_repeatable_under_noise() {
    let ds = dataset();
    let mut nets = Networks::new(Scale::Tiny, CLASSES, 3, DType::F32, &Device::Cpu).unwrap();
    let opts = EvalOptions { noise: NoiseSpec::Gaussian { snr_db: 5.0 }, seed: 8, ..EvalOptions::default() };
    let a = evaluate(&mut nets, ds.as_ref(), &names(), &opts).unwrap();
    let b = evaluate(&mut nets, ds.as_ref(), &names(), &opts).unwrap();
    assert_eq!(a, b);
    // the level is set per pixel position while the measurement spans all S channels
    let expected = 5.0 - 10.0 * (CLASSES as f64).log10();
    assert!((a.snr_db - expected).abs() < 0.3, "{} vs {expected}", a.snr_db);

    let clean = EvalOptions { noise_at_eval: false, ..opts.clone() };
    let c = evaluate(&mut nets, ds.as_ref(), &names(), &clean).unwrap();
    assert_eq!(c.snr_db, f64::INFINITY);
    assert_eq!(c.miou, a.miou, "segmentation never sees the noise");
}

#[test]
fn class_count_mismatch_is_an_error() {
    let ds = dataset();
    let mut nets = Networks::new(Scale::Tiny, 5, 0, DType::F32, &Device::Cpu).unwrap();
    assert!(evaluate(&mut nets, ds.as_ref(), &names(), &EvalOptions::default()).is_err());
    assert!(watermark_probe(&mut nets, ds.as_ref()).is_err());
}
