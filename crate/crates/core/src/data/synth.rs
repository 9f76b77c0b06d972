//! Procedural scenes of coloured geometric shapes on a gradient background.
//!
//! Each sample is a pure function of `(seed, index)`. Class `c < S - 1` is drawn as a
//! rectangle, disc or triangle (`c mod 3`) with a class-specific base hue; the last class
//! is the background. Later shapes occlude earlier ones.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed::{rng_for, Stream};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Triangle { a: (f64, f64), b: (f64, f64), c: (f64, f64) },
}

impl Geometry {
    /// Whether the point `(x, y)` (pixel centres sit at half-integers) is inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Triangle { a, b, c } => {
                let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub class: u32,
    pub geometry: Geometry,
    pub color: [f64; 3],
    /// Stripe texture: amplitude, spatial frequency (radians per pixel), angle, phase.
    pub texture: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub background: ([f64; 3], [f64; 3], f64),
    pub shapes: Vec<Shape>,
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    // map [0, 1] colour components to [-1, 1]
    [k(5.0) * 2.0 - 1.0, k(3.0) * 2.0 - 1.0, k(1.0) * 2.0 - 1.0]
}

fn class_color(class: u32, classes: usize) -> [f64; 3] {
    let shapes = (classes - 1).max(1) as f64;
    let c = hue_to_rgb(class as f64 / shapes);
    c.map(|v| 0.8 * v)
}

impl Scene {
    /// Draws the scene for `(seed, index)`.
    pub fn generate(seed: u64, index: u64, height: usize, width: usize, classes: usize) -> Scene {
        assert!(classes >= 2, "synthetic scenes need a background and at least one shape class");
        let mut rng = rng_for(seed, Stream::Synthetic, index);
        let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_: i32| rng.random_range(-0.5..0.5));
        let c0 = color(&mut rng);
        let c1 = color(&mut rng);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);

        let (h, w) = (height as f64, width as f64);
        let count = rng.random_range(2..=6);
        let shapes = (0..count)
            .map(|_| {
                let class = rng.random_range(0..(classes - 1) as u32);
                let geometry = match class % 3 {
                    0 => {
                        let sw = rng.random_range(0.15..0.45) * w;
                        let sh = rng.random_range(0.15..0.45) * h;
                        let x0 = rng.random_range(0.0..w - sw);
                        let y0 = rng.random_range(0.0..h - sh);
                        Geometry::Rect { x0, y0, x1: x0 + sw, y1: y0 + sh }
                    }
                    1 => {
                        let r = rng.random_range(0.08..0.25) * h.min(w);
                        Geometry::Disc {
                            cx: rng.random_range(r..w - r),
                            cy: rng.random_range(r..h - r),
                            r,
                        }
                    }
                    _ => {
                        let bw = rng.random_range(0.25..0.5) * w;
                        let bh = rng.random_range(0.25..0.5) * h;
                        let x0 = rng.random_range(0.0..w - bw);
                        let y0 = rng.random_range(0.0..h - bh);
                        let apex = rng.random_range(0.0..1.0);
                        Geometry::Triangle {
                            a: (x0, y0 + bh),
                            b: (x0 + bw, y0 + bh),
                            c: (x0 + apex * bw, y0),
                        }
                    }
                };
                let base = class_color(class, classes);
                let jitter = [0; 3].map(|_: i32| rng.random_range(-0.12..0.12));
                let texture = [
                    rng.random_range(0.05..0.15),
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.0..std::f64::consts::PI),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ];
                Shape {
                    class,
                    geometry,
                    color: [0, 1, 2].map(|i| base[i] + jitter[i]),
                    texture,
                }
            })
            .collect();
        Scene {
            height,
            width,
            classes,
            background: (c0, c1, angle),
            shapes,
        }
    }

    fn background_class(&self) -> u32 {
        (self.classes - 1) as u32
    }

    /// Index into `shapes` of the topmost shape covering pixel `(row, col)`.
    pub fn top_shape(&self, row: usize, col: usize) -> Option<usize> {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        self.shapes.iter().rposition(|s| s.geometry.contains(x, y))
    }

    pub fn labels(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.height * self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                data.push(match self.top_shape(row, col) {
                    Some(i) => self.shapes[i].class,
                    None => self.background_class(),
                });
            }
        }
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Rendered `(3, H, W)` pixels in `[-1, 1]`, row-major per channel.
    pub fn pixels(&self) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let (c0, c1, angle) = self.background;
        let (ca, sa) = (angle.cos(), angle.sin());
        let span = (w as f64 * ca.abs() + h as f64 * sa.abs()).max(1.0);
        let mut out = vec![0f32; 3 * h * w];
        for row in 0..h {
            for col in 0..w {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let rgb = match self.top_shape(row, col) {
                    Some(i) => {
                        let s = &self.shapes[i];
                        let [amp, freq, theta, phase] = s.texture;
                        let stripe = amp * (freq * (x * theta.cos() + y * theta.sin()) + phase).sin();
                        s.color.map(|c| c + stripe)
                    }
                    None => {
                        let t = ((x - w as f64 / 2.0) * ca + (y - h as f64 / 2.0) * sa) / span + 0.5;
                        let t = t.clamp(0.0, 1.0);
                        [0, 1, 2].map(|i| c0[i] * (1.0 - t) + c1[i] * t)
                    }
                };
                for (ch, v) in rgb.iter().enumerate() {
                    out[ch * h * w + row * w + col] = v.clamp(-1.0, 1.0) as f32;
                }
            }
        }
        out
    }
}
