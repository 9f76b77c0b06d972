//! Command-line experiments on top of `noisycycle`: training runs, evaluation reports,
//! experiment matrices, IoU charts and the watermark probe.

pub mod chart;
pub mod commands;
pub mod matrix;
pub mod reference;
