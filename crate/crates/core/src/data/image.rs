use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, channel-major (`c, y, x`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.plane(c);
        p.iter().sum::<f64>() / p.len() as f64
    }

    /// Population variance over every value of the image.
    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    /// Interleaved `y, x, c` copy, the encoder's input layout.
    pub fn to_hwc(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn from_hwc(height: usize, width: usize, hwc: &[f64]) -> Result<Self> {
        let mut img = ImageTensor::filled(height, width, 0.0);
        if hwc.len() != img.data.len() {
            return Err(Error::InvalidArgument(format!(
                "hwc buffer of {} values for a {height}x{width} image",
                hwc.len()
            )));
        }
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    img.set(c, y, x, hwc[(y * width + x) * CHANNELS + c]);
                }
            }
        }
        Ok(img)
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinear resample of the window `[top, top+h) × [left, left+w)` to
    /// `out_h × out_w` (pixel-center alignment).
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Self {
        let mut out = ImageTensor::filled(out_h, out_w, 0.0);
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        for oy in 0..out_h {
            let fy = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..CHANNELS {
                    let top_v = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot_v = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, oy, ox, top_v * (1.0 - ty) + bot_v * ty);
                }
            }
        }
        out
    }
}
