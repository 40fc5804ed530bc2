//! Pixel-space video frames and PNG I/O.
//!
//! Frames are stored row-per-frame as `[F x (C*H*W)]` with channel-major
//! layout inside each row: index = `c*H*W + y*W + x`. Pixel values are reals
//! in `[0, 1]`.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub data: Array2<f64>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl VideoTensor {
    pub fn new(data: Array2<f64>, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.ncols() != c * h * w {
            return Err(Error::shape(format!(
                "frame dim {} != {c}*{h}*{w}",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video tensor".into()));
        }
        Ok(Self { data, c, h, w })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixel(&self, frame: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[(frame, c * self.h * self.w + y * self.w + x)]
    }

    /// One frame as a `[C*H*W]` row, cloned.
    pub fn frame(&self, idx: usize) -> Array2<f64> {
        let row = self.data.row(idx).to_owned();
        row.insert_axis(ndarray::Axis(0))
    }

    /// Write frame `idx` as an 8-bit RGB PNG (values clamped to [0, 1]).
    pub fn save_frame_png(&self, idx: usize, path: &Path) -> Result<()> {
        if self.c != 3 {
            return Err(Error::invalid(format!("PNG export needs 3 channels, have {}", self.c)));
        }
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = [
                    to_u8(self.pixel(idx, 0, y, x)),
                    to_u8(self.pixel(idx, 1, y, x)),
                    to_u8(self.pixel(idx, 2, y, x)),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::Media(format!("png save {}: {e}", path.display())))
    }

    /// Load a directory of frames written by [`Self::save_frame_png`]; files
    /// are read in lexicographic order.
    pub fn load_frames_dir(dir: &Path) -> Result<VideoTensor> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Media(format!("no PNG frames in {}", dir.display())));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(paths.len());
        let mut dims: Option<(usize, usize)> = None;
        for p in &paths {
            let img = image::open(p)
                .map_err(|e| Error::Media(format!("png load {}: {e}", p.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::shape(format!(
                        "frame {} is {h}x{w}, expected {}x{}",
                        p.display(),
                        d.0,
                        d.1
                    )))
                }
                _ => {}
            }
            let mut row = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let px = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        row[c * h * w + y * w + x] = px[c] as f64 / 255.0;
                    }
                }
            }
            rows.push(row);
        }
        let (h, w) = dims.unwrap();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((paths.len(), 3 * h * w), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        VideoTensor::new(data, 3, h, w)
    }

    /// Load a single PNG as a one-frame tensor.
    pub fn load_frame_png(path: &Path) -> Result<VideoTensor> {
        let img = image::open(path)
            .map_err(|e| Error::Media(format!("png load {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut row = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    row[c * h * w + y * w + x] = px[c] as f64 / 255.0;
                }
            }
        }
        let data = Array2::from_shape_vec((1, 3 * h * w), row).expect("frame reshape");
        VideoTensor::new(data, 3, h, w)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
