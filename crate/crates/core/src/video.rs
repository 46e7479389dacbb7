use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

/// A clip of `T` RGB frames with values in `[-1, 1]`, stored channel-first
/// as a `(T, 3, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct VideoClip(Tensor);

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        let dims = frames.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Input(format!(
                "video clip must be (T, 3, H, W), got {dims:?}"
            )));
        }
        Ok(Self(frames))
    }

    /// Builds a clip from host data laid out as `(T, 3, H, W)`.
    pub fn from_f32(data: Vec<f32>, frames: usize, height: usize, width: usize) -> Result<Self> {
        let t = Tensor::from_vec(data, (frames, 3, height, width), &candle_core::Device::Cpu)?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    /// Frame `t` as a `(3, H, W)` tensor.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        if t >= self.num_frames() {
            return Err(Error::Input(format!(
                "frame index {t} out of range for a {}-frame clip",
                self.num_frames()
            )));
        }
        Ok(self.0.get(t)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        to_f64_vec(&self.0)
    }

    /// Converts frame `t` to interleaved 8-bit RGB.
    pub fn frame_rgb8(&self, t: usize) -> Result<Vec<u8>> {
        let frame = to_f64_vec(&self.frame(t)?)?;
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; h * w * 3];
        for c in 0..3 {
            for p in 0..h * w {
                let v = (frame[c * h * w + p] + 1.0) * 127.5;
                out[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(out)
    }

    /// Writes every frame as `<dir>/frame_<t>.png` and returns the paths.
    pub fn write_png_frames(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.num_frames());
        for t in 0..self.num_frames() {
            let path = dir.join(format!("frame_{t:04}.png"));
            image::save_buffer(
                &path,
                &self.frame_rgb8(t)?,
                self.width() as u32,
                self.height() as u32,
                image::ExtendedColorType::Rgb8,
            )?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Decodes an 8-bit RGB image into `(3, H, W)` values in `[-1, 1]`.
pub fn rgb8_to_chw(rgb: &[u8], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * height * width];
    for p in 0..height * width {
        for c in 0..3 {
            out[c * height * width + p] = rgb[p * 3 + c] as f32 / 127.5 - 1.0;
        }
    }
    out
}
