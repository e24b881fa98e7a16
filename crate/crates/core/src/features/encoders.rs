use image::RgbImage;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Maps one video frame to a feature vector of length `dim()`.
pub trait VideoEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, frame: &RgbImage) -> std::result::Result<Vec<f64>, String>;
}

/// Maps one audio window to a feature vector of length `dim()`.
pub trait AudioEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, samples: &[f32], sample_rate: u32) -> std::result::Result<Vec<f64>, String>;
}

fn check_row(row: &[f64], dim: usize, index: usize) -> Result<()> {
    if row.len() != dim {
        return Err(Error::Encoding {
            index,
            message: format!("encoder returned {} values, expected {dim}", row.len()),
        });
    }
    if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
        return Err(Error::Encoding {
            index,
            message: format!("non-finite feature value {bad}"),
        });
    }
    Ok(())
}

fn stack(rows: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect()).expect("checked widths")
}

/// One feature row per frame.
pub fn encode_video(frames: &[RgbImage], encoder: &dyn VideoEncoder) -> Result<Array2<f64>> {
    if frames.is_empty() {
        return Err(Error::Input("no frames to encode".into()));
    }
    let dim = encoder.dim();
    let rows = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let row = encoder.encode(f).map_err(|message| Error::Encoding { index: i, message })?;
            check_row(&row, dim, i)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(rows, dim))
}

/// One feature row per audio window.
pub fn encode_audio(windows: &[&[f32]], sample_rate: u32, encoder: &dyn AudioEncoder) -> Result<Array2<f64>> {
    if windows.is_empty() {
        return Err(Error::Input("no audio windows to encode".into()));
    }
    let dim = encoder.dim();
    let rows = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let row = encoder
                .encode(w, sample_rate)
                .map_err(|message| Error::Encoding { index: i, message })?;
            check_row(&row, dim, i)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(rows, dim))
}

/// Mean luminance over a `rows x cols` grid of cells, scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct PooledPixelEncoder {
    rows: u32,
    cols: u32,
}

impl PooledPixelEncoder {
    pub fn new(rows: u32, cols: u32) -> Self {
        assert!(rows > 0 && cols > 0);
        Self { rows, cols }
    }

    /// Picks the most square grid with `dim` cells.
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        let mut rows = (dim as f64).sqrt() as usize;
        while dim % rows != 0 {
            rows -= 1;
        }
        Self::new(rows as u32, (dim / rows) as u32)
    }
}

impl VideoEncoder for PooledPixelEncoder {
    fn name(&self) -> &str {
        "pooled-pixel"
    }

    fn dim(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    fn encode(&self, frame: &RgbImage) -> std::result::Result<Vec<f64>, String> {
        let (w, h) = frame.dimensions();
        if w == 0 || h == 0 {
            return Err("empty frame".into());
        }
        let mut sums = vec![0.0; self.dim()];
        let mut counts = vec![0usize; self.dim()];
        for (x, y, p) in frame.enumerate_pixels() {
            let cell = (y * self.rows / h) * self.cols + x * self.cols / w;
            let luma = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            sums[cell as usize] += luma / 255.0;
            counts[cell as usize] += 1;
        }
        Ok(sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect())
    }
}

/// Root-mean-square energy over `dim` equal sub-frames of the window.
#[derive(Debug, Clone)]
pub struct EnergyEncoder {
    bands: usize,
}

impl EnergyEncoder {
    pub fn new(bands: usize) -> Self {
        assert!(bands > 0);
        Self { bands }
    }
}

impl AudioEncoder for EnergyEncoder {
    fn name(&self) -> &str {
        "rms-energy"
    }

    fn dim(&self) -> usize {
        self.bands
    }

    fn encode(&self, samples: &[f32], _sample_rate: u32) -> std::result::Result<Vec<f64>, String> {
        if samples.is_empty() {
            return Err("empty audio window".into());
        }
        let n = samples.len();
        Ok((0..self.bands)
            .map(|b| {
                let start = b * n / self.bands;
                let end = ((b + 1) * n / self.bands).max(start + 1).min(n);
                let chunk = &samples[start.min(end - 1)..end];
                (chunk.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / chunk.len() as f64).sqrt()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct NanEncoder;
    impl VideoEncoder for NanEncoder {
        fn name(&self) -> &str {
            "nan"
        }
        fn dim(&self) -> usize {
            2
        }
        fn encode(&self, _: &RgbImage) -> std::result::Result<Vec<f64>, String> {
            Ok(vec![0.0, f64::NAN])
        }
    }

    #[test]
    fn constant_frames_give_identical_rows() {
        let f = RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30]));
        let m = encode_video(&[f.clone(), f], &PooledPixelEncoder::with_dim(32)).unwrap();
        assert_eq!(m.dim(), (2, 32));
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn sixty_four_frames_sixty_four_rows() {
        let frames: Vec<_> = (0..64).map(|i| RgbImage::from_pixel(8, 8, image::Rgb([i as u8; 3]))).collect();
        assert_eq!(encode_video(&frames, &PooledPixelEncoder::new(2, 2)).unwrap().nrows(), 64);
    }

    #[test]
    fn nan_output_is_rejected_with_index() {
        let f = RgbImage::new(4, 4);
        let err = encode_video(&[f], &NanEncoder).unwrap_err();
        assert!(matches!(err, Error::Encoding { index: 0, .. }));
    }

    #[test]
    fn audio_rows_and_silence() {
        let tone: Vec<f32> = (0..48000).map(|i| (i as f32 * 0.05).sin()).collect();
        let windows: Vec<&[f32]> = tone.chunks(16000).collect();
        let m = encode_audio(&windows, 16000, &EnergyEncoder::new(32)).unwrap();
        assert_eq!(m.dim(), (3, 32));
        assert!(m.iter().all(|&v| v > 0.5 && v < 0.8));

        let silence = vec![0.0f32; 1000];
        let m = encode_audio(&[&silence], 16000, &EnergyEncoder::new(32)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));

        assert!(encode_audio(&[], 16000, &EnergyEncoder::new(4)).is_err());
    }
}
