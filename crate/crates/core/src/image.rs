//! Dense pixel grids for the two view modalities plus their on-disk formats.
//!
//! Pixels are `f32`, row-major, channels interleaved (`H×W×C`). Nominal value
//! range is `[0, 1]`; nothing clamps values in memory.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.offset(row, col) + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let o = self.offset(row, col) + ch;
        self.data[o] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = self.offset(row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Output column `c` holds input column `(c + k) mod W`.
    pub fn roll_columns_left(&self, k: usize) -> Image {
        let k = k % self.width;
        if k == 0 {
            return self.clone();
        }
        let mut out = Image::zeros(self.height, self.width, self.channels);
        let row_len = self.width * self.channels;
        let split = k * self.channels;
        for r in 0..self.height {
            let src = &self.data[r * row_len..(r + 1) * row_len];
            let dst = &mut out.data[r * row_len..(r + 1) * row_len];
            dst[..row_len - split].copy_from_slice(&src[split..]);
            dst[row_len - split..].copy_from_slice(&src[..split]);
        }
        out
    }

    /// Columns `start .. start + width`, wrapping around the right edge.
    pub fn wrapped_columns(&self, start: usize, width: usize) -> Image {
        let mut out = Image::zeros(self.height, width, self.channels);
        for r in 0..self.height {
            for c in 0..width {
                let src = (start + c) % self.width;
                let o = out.offset(r, c);
                let i = self.offset(r, src);
                out.data[o..o + self.channels].copy_from_slice(&self.data[i..i + self.channels]);
            }
        }
        out
    }

    /// Counter-clockwise rotation by `quarter_turns · 90°`. Requires a square
    /// image for odd turn counts to keep the shape.
    pub fn rotate_ccw(&self, quarter_turns: usize) -> Image {
        let turns = quarter_turns % 4;
        if turns == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = Image::zeros(oh, ow, self.channels);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match turns {
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                let o = out.offset(y, x);
                let i = self.offset(sy, sx);
                out.data[o..o + self.channels].copy_from_slice(&self.data[i..i + self.channels]);
            }
        }
        out
    }

    /// Bilinear sample at fractional `(y, x)`; coordinates outside the grid
    /// read as zero.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1.0, (1.0 - fy) * fx),
            (y0 + 1.0, x0, fy * (1.0 - fx)),
            (y0 + 1.0, x0 + 1.0, fy * fx),
        ];
        for (cy, cx, wgt) in corners {
            if wgt == 0.0 || cy < 0.0 || cx < 0.0 {
                continue;
            }
            let (cy, cx) = (cy as usize, cx as usize);
            if cy >= self.height || cx >= self.width {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.pixel(cy, cx)) {
                *o += (wgt * *v as f64) as f32;
            }
        }
    }

    /// Planar `C×H×W` copy in double precision, the layout the encoders consume.
    pub fn to_planar_f64(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + p] = *v as f64;
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Raw fixture format: `H` and `W` as u32 little-endian, followed by the
    /// row-major `f32` little-endian samples. The channel count is implied by
    /// the payload length.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("raw image shorter than its 8-byte header"));
        }
        let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8..];
        let plane = height * width;
        if plane == 0 || !payload.len().is_multiple_of(4) || !(payload.len() / 4).is_multiple_of(plane) {
            return Err(Error::invalid(format!(
                "raw payload of {} bytes does not fit a {height}x{width} grid",
                payload.len()
            )));
        }
        let channels = payload.len() / 4 / plane;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::from_vec(height, width, channels, data)
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }

    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    /// 8-bit PNG (gray, RGB or RGBA by channel count). Values are clamped to
    /// `[0, 1]` and rounded to the nearest code.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::invalid(format!("cannot write {c}-channel image as PNG"))),
        };
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> =
            self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => 3,
        };
        let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(info.height as usize, info.width as usize, channels, data)
    }

    /// Dispatches on extension: `.png` or anything else as raw floats.
    pub fn read_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => Self::read_png(path),
            _ => Self::read_raw(path),
        }
    }
}

/// Ground-level panorama. The full width spans 360° of azimuth and azimuth
/// grows to the right; `north_column` is the column facing North.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaImage {
    pub image: Image,
    pub north_column: usize,
}

impl PanoramaImage {
    pub fn new(image: Image) -> Self {
        let north_column = image.width() / 2;
        Self { image, north_column }
    }

    pub fn with_north(image: Image, north_column: usize) -> Result<Self> {
        if north_column >= image.width() {
            return Err(Error::invalid(format!(
                "north column {north_column} outside width {}",
                image.width()
            )));
        }
        Ok(Self { image, north_column })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    pub fn center_column(&self) -> usize {
        self.image.width() / 2
    }
}

/// Square overhead image, North up.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialImage {
    image: Image,
}

impl AerialImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.height() != image.width() {
            return Err(Error::invalid(format!(
                "aerial image must be square, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(Self { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    pub fn rotate_ccw(&self, quarter_turns: usize) -> AerialImage {
        AerialImage { image: self.image.rotate_ccw(quarter_turns) }
    }
}
