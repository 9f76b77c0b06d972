//! Validation-set evaluation, the watermark-reliance probe and report files.
//!
//! Images are processed one at a time with networks in inference mode, so every per-image
//! quantity is independent of dataset order.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{compute_psnr, measure_snr, ConfusionAccumulator, EvalClasses, MeanMode};
use crate::nn::Mode;
use crate::noise::{inject, NoiseSpec};
use crate::seed::{rng_for, Stream};
use crate::tensor::{argmax_mask, one_hot_encode, Image, SegLogits};
use crate::train::Networks;

/// The two generators as seen by evaluation. Test harnesses substitute oracles here.
pub trait CycleModel {
    fn classes(&self) -> usize;

    /// `(3, H, W)` image to `(S, H, W)` logits.
    fn segment(&mut self, x: &Image) -> Result<SegLogits>;

    /// `(S, H, W)` logits to `(3, H, W)` image.
    fn reconstruct(&mut self, y: &SegLogits) -> Result<Image>;
}

impl CycleModel for Networks {
    fn classes(&self) -> usize {
        Networks::classes(self)
    }

    fn segment(&mut self, x: &Image) -> Result<SegLogits> {
        let dtype = self.g.0.dtype();
        let x = Image::new(x.tensor().to_dtype(dtype)?)?;
        self.g.forward(&x, &mut Mode::Eval)
    }

    fn reconstruct(&mut self, y: &SegLogits) -> Result<Image> {
        let dtype = self.f.0.dtype();
        let y = SegLogits::new(y.tensor().to_dtype(dtype)?)?;
        self.f.forward(&y, &mut Mode::Eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub classes: EvalClasses,
    pub mean_mode: MeanMode,
    /// Perturbation applied before reconstruction when `noise_at_eval` is set.
    pub noise: NoiseSpec,
    pub noise_at_eval: bool,
    /// Seed of the per-image evaluation noise.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            classes: EvalClasses::All,
            mean_mode: MeanMode::Strict,
            noise: NoiseSpec::None,
            noise_at_eval: true,
            seed: 0,
        }
    }
}

/// Noise counters for evaluation live in the upper half of the counter space so they
/// never coincide with training iterations.
fn eval_noise_counter(index: usize) -> u64 {
    (1 << 63) | index as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Classes entering the mean.
    pub evaluated: Vec<usize>,
    /// IoU per class (all `S`), `None` when undefined.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Mean per-image forward-cycle PSNR.
    pub psnr_db: f64,
    /// Mean per-image latent SNR between clean and perturbed logits.
    pub snr_db: f64,
    pub images: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Segmentation quality on clean logits and forward-cycle reconstruction quality.
pub fn evaluate(
    model: &mut dyn CycleModel,
    dataset: &dyn Dataset,
    class_names: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let classes = model.classes();
    if classes != dataset.classes() {
        return Err(Error::Config(format!(
            "model predicts {classes} classes but the dataset has {}",
            dataset.classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Invalid("evaluation dataset is empty".into()));
    }
    let mut conf = ConfusionAccumulator::new(classes);
    let mut psnr = Vec::with_capacity(dataset.len());
    let mut snr = Vec::with_capacity(dataset.len());
    for index in 0..dataset.len() {
        let sample = dataset.get(index)?;
        let logits = model.segment(&sample.image)?;
        let pred = argmax_mask(logits.tensor())?;
        let ignore = opts.classes.ignore_mask(&sample.labels, classes);
        conf.accumulate(&pred, &sample.labels, ignore.as_deref())?;

        let latent = if opts.noise_at_eval {
            let mut rng = rng_for(opts.seed, Stream::Noise, eval_noise_counter(index));
            inject(&logits, &opts.noise, &mut rng)?
        } else {
            logits.clone()
        };
        snr.push(measure_snr(&logits, &latent)?);
        let x_rec = model.reconstruct(&latent)?;
        let reference = Image::new(sample.image.tensor().to_dtype(x_rec.tensor().dtype())?)?;
        psnr.push(compute_psnr(&reference, &x_rec)?);
    }
    let evaluated = opts.classes.class_ids(classes);
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        miou: conf.miou_over(&evaluated, opts.mean_mode)?,
        iou: (0..classes).map(|c| conf.iou(c)).collect(),
        evaluated,
        psnr_db: mean(&psnr),
        snr_db: mean(&snr),
        images: dataset.len(),
    })
}

const REPORT_HEADER: [&str; 6] = ["kind", "class", "iou", "miou", "psnr_db", "snr_db"];

fn csv_error(e: csv::Error) -> Error {
    Error::Invalid(format!("report csv: {e}"))
}

impl EvalReport {
    /// CSV with columns `kind,class,iou,miou,psnr_db,snr_db`: one `class` row per
    /// evaluated class, then one `summary` row. Undefined IoUs are written as `undefined`,
    /// infinities as `inf`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows: Vec<[String; 6]> = Vec::with_capacity(self.evaluated.len() + 1);
        for &c in &self.evaluated {
            let name = self.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let iou = self.iou[c].map_or("undefined".to_string(), |v| v.to_string());
            rows.push(["class".into(), name, iou, String::new(), String::new(), String::new()]);
        }
        rows.push([
            "summary".into(),
            String::new(),
            String::new(),
            self.miou.to_string(),
            self.psnr_db.to_string(),
            self.snr_db.to_string(),
        ]);
        w.write_record(REPORT_HEADER).expect("in-memory write");
        for r in rows {
            w.write_record(&r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A report read back from CSV: the evaluated classes with their IoU, plus the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub classes: Vec<(String, Option<f64>)>,
    pub miou: f64,
    pub psnr_db: f64,
    pub snr_db: f64,
}

pub fn parse_report_csv(text: &str) -> Result<ParsedReport> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Invalid("not an evaluation report (header mismatch)".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Invalid(format!("bad number `{s}` in report")))
    };
    let mut classes = Vec::new();
    let mut summary = None;
    for record in reader.records() {
        let f = record.map_err(csv_error)?;
        match &f[0] {
            "class" => {
                let iou = if &f[2] == "undefined" { None } else { Some(num(&f[2])?) };
                classes.push((f[1].to_string(), iou));
            }
            "summary" => summary = Some((num(&f[3])?, num(&f[4])?, num(&f[5])?)),
            other => return Err(Error::Invalid(format!("unknown report row kind `{other}`"))),
        }
    }
    let (miou, psnr_db, snr_db) = summary.ok_or_else(|| Error::Invalid("report lacks a summary row".into()))?;
    Ok(ParsedReport {
        classes,
        miou,
        psnr_db,
        snr_db,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Per image: PSNR from the soft logits and from the hard `±1` one-hot latent.
    pub per_image: Vec<(f64, f64)>,
    pub psnr_soft_db: f64,
    pub psnr_hard_db: f64,
    /// Mean of the per-image gap `soft - hard`; large values mean the reconstruction uses
    /// information beyond the arg-max class.
    pub delta_db: f64,
}

/// Hard latent with the arg-max class at `+1` and every other class at `-1`, the two
/// extreme codebook levels.
pub fn hard_latent(logits: &SegLogits) -> Result<SegLogits> {
    let (s, _, _) = logits.chw();
    let labels = argmax_mask(logits.tensor())?;
    let one_hot = one_hot_encode(&labels, s, DType::F64, logits.tensor().device())?;
    let hard: Tensor = one_hot.tensor().affine(2.0, -1.0)?.to_dtype(logits.tensor().dtype())?;
    SegLogits::new(hard)
}

/// Reconstruction PSNR from `G`'s clean logits versus from their hard version.
pub fn watermark_probe(model: &mut dyn CycleModel, dataset: &dyn Dataset) -> Result<ProbeReport> {
    if model.classes() != dataset.classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {}",
            model.classes(),
            dataset.classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Invalid("probe dataset is empty".into()));
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    for index in 0..dataset.len() {
        let sample = dataset.get(index)?;
        let logits = model.segment(&sample.image)?;
        let soft = model.reconstruct(&logits)?;
        let hard = model.reconstruct(&hard_latent(&logits)?)?;
        let reference = Image::new(sample.image.tensor().to_dtype(soft.tensor().dtype())?)?;
        per_image.push((compute_psnr(&reference, &soft)?, compute_psnr(&reference, &hard)?));
    }
    // equal values (including two infinities) contribute a zero gap
    let gaps: Vec<f64> = per_image
        .iter()
        .map(|&(s, h)| if s == h { 0.0 } else { s - h })
        .collect();
    Ok(ProbeReport {
        psnr_soft_db: mean(&per_image.iter().map(|p| p.0).collect::<Vec<_>>()),
        psnr_hard_db: mean(&per_image.iter().map(|p| p.1).collect::<Vec<_>>()),
        delta_db: mean(&gaps),
        per_image,
    })
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_soft_db,psnr_hard_db,delta_db\n");
        for (i, (s, h)) in self.per_image.iter().enumerate() {
            let d = if s == h { 0.0 } else { s - h };
            out.push_str(&format!("{i},{s},{h},{d}\n"));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.psnr_soft_db, self.psnr_hard_db, self.delta_db
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            class_names: vec!["road".into(), "a,b".into(), "void".into()],
            evaluated: vec![0, 1],
            iou: vec![Some(0.5), None, Some(1.0)],
            miou: 0.25,
            psnr_db: f64::INFINITY,
            snr_db: 7.5,
            images: 3,
        }
    }

    #[test]
    fn report_csv_schema() {
        let csv = report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "class,road,0.5,,,");
        assert_eq!(lines[2], "class,\"a,b\",undefined,,,");
        assert_eq!(lines[3], "summary,,,0.25,inf,7.5");
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed.classes, vec![("road".into(), Some(0.5)), ("a,b".into(), None)]);
        assert_eq!(parsed.psnr_db, f64::INFINITY);
    }

    #[test]
    fn hard_latent_uses_codebook_extremes() {
        let l = SegLogits::new(
            Tensor::new(&[[[0.2f32]], [[1.5]], [[-0.3]]], &candle_core::Device::Cpu).unwrap(),
        )
        .unwrap();
        let h = crate::tensor::to_host(hard_latent(&l).unwrap().tensor()).unwrap();
        assert_eq!(h, vec![-1.0, 1.0, -1.0]);
    }
}
