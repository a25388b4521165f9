//! Procedural captioned clips: a textured static background with one
//! colored shape translating at constant speed. The caption names the shape,
//! color and direction, so it identifies the class exactly.

use std::f64::consts::TAU;

use hdvila_core::sampling::FrameSource;
use hdvila_core::{Scalar, Tensor};
use rand::Rng;

use crate::config::DataConfig;

pub const SHAPES: [&str; 4] = ["square", "cross", "circle", "triangle"];
pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("green", [0.1, 0.8, 0.2]),
    ("yellow", [0.9, 0.85, 0.1]),
];
/// `(name, (dy, dx))`
pub const DIRECTIONS: [(&str, (isize, isize)); 4] = [
    ("left", (0, -1)),
    ("right", (0, 1)),
    ("up", (-1, 0)),
    ("down", (1, 0)),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub shape: usize,
    pub color: usize,
    pub direction: usize,
}

impl ClassSpec {
    /// Class `c` in mixed radix, shape varying fastest.
    pub fn nth(cfg: &DataConfig, c: usize) -> Self {
        ClassSpec {
            shape: c % cfg.shapes,
            color: (c / cfg.shapes) % cfg.colors,
            direction: c / (cfg.shapes * cfg.colors),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} moving {}",
            COLORS[self.color].0, SHAPES[self.shape], DIRECTIONS[self.direction].0
        )
    }

    pub fn offset(&self) -> (isize, isize) {
        DIRECTIONS[self.direction].1
    }

    /// Whether local pixel `(u, v)` of a `size`-pixel box belongs to the shape.
    pub fn covers(&self, u: usize, v: usize, size: usize) -> bool {
        let s = size as f64;
        let (y, x) = (u as f64 + 0.5, v as f64 + 0.5);
        match SHAPES[self.shape] {
            "square" => true,
            "circle" => (y - s / 2.0).powi(2) + (x - s / 2.0).powi(2) <= (s / 2.0).powi(2),
            "triangle" => (x - s / 2.0).abs() <= y / 2.0,
            _ => {
                let band = (s / 6.0).max(1.0);
                (y - s / 2.0).abs() <= band || (x - s / 2.0).abs() <= band
            }
        }
    }
}

/// Everything needed to render one clip; frames are produced on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub class: ClassSpec,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub speed: usize,
    /// Top-left corner of the shape's box in frame 0.
    pub start: (usize, usize),
    background: Background,
}

#[derive(Clone, Debug, PartialEq)]
struct Background {
    level: f64,
    tint: [f64; 3],
    freq: (f64, f64),
    phase: f64,
}

impl Background {
    fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        let wave = (TAU * (self.freq.0 * y as f64 + self.freq.1 * x as f64) + self.phase).sin();
        let grain = (((y * 7 + x * 13 + c * 5) % 11) as f64 - 5.0) * 0.006;
        self.level + self.tint[c] + 0.08 * wave + grain
    }
}

impl SyntheticVideo {
    /// Top-left corner of the shape's box in frame `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        let (dy, dx) = self.class.offset();
        let step = (t * self.speed) as isize;
        (
            (self.start.0 as isize + dy * step) as usize,
            (self.start.1 as isize + dx * step) as usize,
        )
    }

    /// Shape color at local pixel `(u, v)`: the class color modulated by a
    /// 2-pixel checker so the shape has texture of its own.
    fn shape_value(&self, c: usize, u: usize, v: usize) -> f64 {
        let checker = ((u / 2 + v / 2) % 2) as f64;
        COLORS[self.class.color].1[c] * (0.8 + 0.2 * checker)
    }

    /// `[3, H, W]` frame `t` in `[0, 1]`.
    pub fn render(&self, t: usize) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let (py, px) = self.position(t);
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let inside = y >= py && y < py + self.size && x >= px && x < px + self.size;
                    let v = if inside && self.class.covers(y - py, x - px, self.size) {
                        self.shape_value(c, y - py, x - px)
                    } else {
                        self.background.value(c, y, x)
                    };
                    out.push(v);
                }
            }
        }
        out
    }
}

impl<T: Scalar> FrameSource<T> for SyntheticVideo {
    fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn frame(&self, index: usize) -> hdvila_core::Result<Tensor<T>> {
        if index >= self.frames {
            return Err(hdvila_core::Error::FrameOutOfRange {
                index,
                count: self.frames,
            });
        }
        Tensor::from_f64(&[3, self.height, self.width], &self.render(index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub class_id: usize,
    pub caption: String,
    pub video: SyntheticVideo,
}

/// Endless stream of samples; sample `i` has class `i mod class_count`.
pub struct SyntheticStream<R> {
    cfg: DataConfig,
    rng: R,
    next: usize,
}

pub fn generate_synthetic<R: Rng>(cfg: &DataConfig, rng: R) -> SyntheticStream<R> {
    SyntheticStream {
        cfg: cfg.clone(),
        rng,
        next: 0,
    }
}

impl<R: Rng> Iterator for SyntheticStream<R> {
    type Item = SyntheticSample;

    fn next(&mut self) -> Option<SyntheticSample> {
        let cfg = &self.cfg;
        let index = self.next;
        self.next += 1;
        let class_id = index % cfg.class_count();
        let class = ClassSpec::nth(cfg, class_id);
        let rng = &mut self.rng;
        let travel = cfg.speed * (cfg.frames - 1);
        let (dy, dx) = class.offset();
        let mut axis = |len: usize, d: isize| -> usize {
            let free = len - cfg.shape_size;
            match d {
                1 => rng.gen_range(0..=free - travel),
                -1 => rng.gen_range(travel..=free),
                _ => rng.gen_range(0..=free),
            }
        };
        let start = (axis(cfg.height, dy), axis(cfg.width, dx));
        let background = Background {
            level: rng.gen_range(0.35..0.55),
            tint: [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ],
            freq: (rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12)),
            phase: rng.gen_range(0.0..TAU),
        };
        Some(SyntheticSample {
            index,
            class_id,
            caption: class.caption(),
            video: SyntheticVideo {
                class,
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                size: cfg.shape_size,
                speed: cfg.speed,
                start,
                background,
            },
        })
    }
}
