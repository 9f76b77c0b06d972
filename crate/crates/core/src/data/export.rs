//! Indexed-colour PNG export of class maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Cityscapes colours for the 19 train classes, then black for void.
pub const CITYSCAPES_PALETTE: [[u8; 3]; 20] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
    [0, 0, 0],
];

/// Palette with `classes` entries: the Cityscapes colours when they suffice, otherwise
/// evenly spaced hues with black for the last (background) class.
pub fn palette(classes: usize) -> Vec<[u8; 3]> {
    if classes == CITYSCAPES_PALETTE.len() {
        return CITYSCAPES_PALETTE.to_vec();
    }
    (0..classes)
        .map(|c| {
            if c + 1 == classes {
                return [0, 0, 0];
            }
            let h = c as f64 / (classes - 1).max(1) as f64 * 6.0;
            let f = |n: f64| {
                let k = (n + h) % 6.0;
                let v = 1.0 - k.min(4.0 - k).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            [f(5.0), f(3.0), f(1.0)]
        })
        .collect()
}

/// Writes `labels` as an 8-bit palette PNG.
pub fn write_indexed_png(path: &Path, labels: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    if palette.is_empty() || palette.len() > 256 {
        return Err(Error::Invalid(format!("palette size {} not in 1..=256", palette.len())));
    }
    let mut indices = Vec::with_capacity(labels.data.len());
    for &l in &labels.data {
        if l as usize >= palette.len() {
            return Err(Error::Invalid(format!("label {l} has no palette entry")));
        }
        indices.push(l as u8);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), labels.width as u32, labels.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::file(path, e.to_string()))?;
    writer
        .write_image_data(&indices)
        .map_err(|e| Error::file(path, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let labels = LabelMap {
            height: 2,
            width: 3,
            data: vec![0, 1, 2, 3, 2, 1],
        };
        write_indexed_png(&path, &labels, &palette(4)).unwrap();
        let decoder = png::Decoder::new(File::open(&path).unwrap());
        let mut reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().color_type, png::ColorType::Indexed);
        let mut buf = vec![0; reader.output_buffer_size()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..6], &[0, 1, 2, 3, 2, 1]);
        assert!(write_indexed_png(&path, &labels, &palette(3)).is_err());
    }
}
