//! Class-wise IoU bar chart: one group per class, one bar per approach, written as SVG
//! with a CSV twin holding the plotted numbers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use noisycycle::eval::ParsedReport;
use plotters::prelude::*;

/// One approach: a legend label and its evaluation report.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub report: ParsedReport,
}

/// Plotted data: class names and, per approach, one IoU per class (`None` when undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct ChartData {
    pub classes: Vec<String>,
    pub labels: Vec<String>,
    pub iou: Vec<Vec<Option<f64>>>,
}

impl ChartData {
    /// Fails unless every report lists the same classes in the same order.
    pub fn new(series: &[Series]) -> Result<Self> {
        let Some(first) = series.first() else {
            bail!("plot-iou needs at least one report");
        };
        let classes: Vec<String> = first.report.classes.iter().map(|(n, _)| n.clone()).collect();
        for s in &series[1..] {
            let other: Vec<&String> = s.report.classes.iter().map(|(n, _)| n).collect();
            if other.len() != classes.len() || other.iter().zip(&classes).any(|(a, b)| *a != b) {
                bail!(
                    "class sets differ: `{}` has [{}] but `{}` has [{}]",
                    first.label,
                    classes.join(", "),
                    s.label,
                    other.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(", ")
                );
            }
        }
        Ok(Self {
            classes,
            labels: series.iter().map(|s| s.label.clone()).collect(),
            iou: series
                .iter()
                .map(|s| s.report.classes.iter().map(|(_, v)| *v).collect())
                .collect(),
        })
    }

    /// `class,<label>...` with IoU values in `[0, 1]` and `undefined` markers.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (c, name) in self.classes.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(
                self.iou
                    .iter()
                    .map(|s| s[c].map_or("undefined".to_string(), |v| v.to_string())),
            );
            w.write_record(&row)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn to_svg(&self) -> Result<String> {
        let groups = self.classes.len();
        let bars = self.labels.len();
        let slots = bars + 1;
        let width = (140 + groups * slots * 16).max(480) as u32;
        let mut svg = String::new();
        {
            let root = SVGBackend::with_string(&mut svg, (width, 420)).into_drawing_area();
            root.fill(&WHITE).map_err(draw_error)?;
            let mut chart = ChartBuilder::on(&root)
                .caption("Class-wise IoU", ("sans-serif", 18))
                .margin(12)
                .x_label_area_size(70)
                .y_label_area_size(50)
                .build_cartesian_2d((0..(groups * slots) as i32).into_segmented(), 0.0..100.0)
                .map_err(draw_error)?;
            let classes = &self.classes;
            let centre = (bars / 2) as i32;
            chart
                .configure_mesh()
                .disable_x_mesh()
                .x_labels(groups * slots)
                .x_label_formatter(&|v| match v {
                    // the axis also visits the segment past the last slot
                    SegmentValue::CenterOf(i) if i % slots as i32 == centre => {
                        classes.get((i / slots as i32) as usize).cloned().unwrap_or_default()
                    }
                    _ => String::new(),
                })
                .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
                .y_desc("IoU [%]")
                .draw()
                .map_err(draw_error)?;
            for (j, (label, values)) in self.labels.iter().zip(&self.iou).enumerate() {
                let colour = Palette99::pick(j).to_rgba();
                chart
                    .draw_series(values.iter().enumerate().map(|(c, v)| {
                        let x = (c * slots + j) as i32;
                        // undefined IoUs become zero-height bars
                        let h = v.unwrap_or(0.0) * 100.0;
                        Rectangle::new(
                            [(SegmentValue::Exact(x), 0.0), (SegmentValue::Exact(x + 1), h)],
                            colour.filled(),
                        )
                    }))
                    .map_err(draw_error)?
                    .label(label.as_str())
                    .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], colour.filled()));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(draw_error)?;
            root.present().map_err(draw_error)?;
        }
        Ok(svg)
    }
}

fn draw_error<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("chart drawing failed: {e:?}")
}

/// Writes the chart to `svg_path` and its data to the same path with a `.csv` extension;
/// returns the CSV path.
pub fn plot_iou(series: &[Series], svg_path: &Path) -> Result<PathBuf> {
    let data = ChartData::new(series)?;
    if let Some(dir) = svg_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(svg_path, data.to_svg()?).with_context(|| format!("writing {}", svg_path.display()))?;
    let csv_path = svg_path.with_extension("csv");
    std::fs::write(&csv_path, data.to_csv()?).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(csv_path)
}
