//! Frame sources beyond the synthetic generator, and PNG output.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hdvila_core::sampling::FrameSource;
use hdvila_core::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};

/// A clip stored as a directory of PNG frames, ordered by file name.
pub struct PngDirSource {
    files: Vec<PathBuf>,
    dims: (usize, usize),
}

impl PngDirSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let first = files.first().ok_or_else(|| Error::Image {
            path: dir.to_path_buf(),
            msg: "no PNG frames".into(),
        })?;
        let (w, h) = image::image_dimensions(first).map_err(|e| Error::Image {
            path: first.clone(),
            msg: e.to_string(),
        })?;
        Ok(PngDirSource {
            dims: (h as usize, w as usize),
            files,
        })
    }
}

impl<T: Scalar> FrameSource<T> for PngDirSource {
    fn frame_count(&self) -> usize {
        self.files.len()
    }

    fn frame_dims(&self) -> (usize, usize) {
        self.dims
    }

    fn frame(&self, index: usize) -> hdvila_core::Result<Tensor<T>> {
        let path = self.files.get(index).ok_or(hdvila_core::Error::FrameOutOfRange {
            index,
            count: self.files.len(),
        })?;
        let backend = |reason: String| hdvila_core::Error::Backend {
            name: "png".into(),
            reason: format!("{}: {reason}", path.display()),
        };
        let img = image::open(path).map_err(|e| backend(e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (h, w) != self.dims {
            return Err(backend(format!("{h}x{w} differs from the first frame {:?}", self.dims)));
        }
        let raw = img.as_raw();
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            data.extend((0..h * w).map(|p| T::lit(f64::from(raw[p * 3 + c]) / 255.0)));
        }
        Tensor::new(vec![3, h, w], data)
    }
}

/// A clip stored in the checkpoint tensor format as one `[T, 3, H, W]`
/// tensor named [`TensorFileSource::TENSOR`]. The whole clip is held in
/// memory.
pub struct TensorFileSource {
    frames: Tensor<f32>,
}

impl TensorFileSource {
    pub const TENSOR: &'static str = "frames";

    pub fn open(path: &Path) -> Result<Self> {
        let mut ck = Checkpoint::load(path)?;
        let frames = ck.tensors.remove(Self::TENSOR).ok_or_else(|| Error::Input {
            path: path.to_path_buf(),
            msg: format!("no `{}` tensor", Self::TENSOR),
        })?;
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input {
                path: path.to_path_buf(),
                msg: format!("`{}` must be [T, 3, H, W], got {s:?}", Self::TENSOR),
            });
        }
        Ok(TensorFileSource { frames })
    }

    /// Stacks equally sized `[3, H, W]` frames and saves them.
    pub fn save(frames: &[Tensor<f32>], path: &Path) -> Result<()> {
        let first = frames.first().ok_or_else(|| Error::Input {
            path: path.to_path_buf(),
            msg: "a clip needs at least one frame".into(),
        })?;
        let s = first.shape().to_vec();
        if s.len() != 3 || s[0] != 3 || frames.iter().any(|f| f.shape() != s.as_slice()) {
            return Err(Error::Input {
                path: path.to_path_buf(),
                msg: format!("frames must share one [3, H, W] shape, first is {s:?}"),
            });
        }
        let data: Vec<f32> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        let stacked = Tensor::new(vec![frames.len(), 3, s[1], s[2]], data)?;
        let ck = Checkpoint {
            step: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            tensors: [(Self::TENSOR.to_string(), stacked)].into(),
        };
        ck.save(path)
    }
}

impl<T: Scalar> FrameSource<T> for TensorFileSource {
    fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    fn frame_dims(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    fn frame(&self, index: usize) -> hdvila_core::Result<Tensor<T>> {
        let s = self.frames.shape();
        if index >= s[0] {
            return Err(hdvila_core::Error::FrameOutOfRange { index, count: s[0] });
        }
        let n = 3 * s[2] * s[3];
        let data = self.frames.data()[index * n..(index + 1) * n]
            .iter()
            .map(|&x| T::lit(f64::from(x)))
            .collect();
        Tensor::new(vec![3, s[2], s[3]], data)
    }
}

/// Wraps a source and records every frame index requested, in call order.
pub struct RecordingSource<S> {
    inner: S,
    log: Mutex<Vec<usize>>,
}

impl<S> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        RecordingSource {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<usize> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("log lock").clear();
    }
}

impl<T, S: FrameSource<T>> FrameSource<T> for RecordingSource<S> {
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn frame_dims(&self) -> (usize, usize) {
        self.inner.frame_dims()
    }

    fn frame(&self, index: usize) -> hdvila_core::Result<Tensor<T>> {
        self.log.lock().expect("log lock").push(index);
        self.inner.frame(index)
    }
}

/// Writes a `[3, H, W]` tensor with values in `[0, 1]` as an RGB PNG.
pub fn write_png<T: Scalar>(frame: &Tensor<T>, path: &Path) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + p].to_f64_lossy().clamp(0.0, 1.0);
            raw.push((v * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
