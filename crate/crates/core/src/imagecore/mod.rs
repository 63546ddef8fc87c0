//! Raster types, compositing and mask resampling.
//!
//! Images are planar RGB (`[c][y][x]`) `f32` buffers in `[0, 1]`; masks are
//! single-plane soft masks in `[0, 1]`. Binary masks are just the special case
//! where every value is `0.0` or `1.0`.

mod manifest;

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry, Split, SCHEMA_VERSION};

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

fn check_unit_range(field: &'static str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::invalid(
            field,
            format!("value {} at index {i} outside [0, 1]", data[i]),
        )),
        None => Ok(()),
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar data (`3 * height * width` values).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image", "height and width must be >= 1"));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        check_unit_range("image", &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    /// `f(channel, y, x)`; values are validated.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn crop(&self, b: BBox) -> Result<Image> {
        b.validate_for(self.height, self.width)?;
        Image::from_fn(b.height(), b.width(), |c, y, x| self.get(c, y + b.y0, x + b.x0))
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("size", "resize target must be >= 1x1"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let p = self.pixel(y as usize, x as usize);
                Rgb(p)
            });
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Image::from_fn(height, width, |c, y, x| {
            out.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0)
        })
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`. Values are clamped into `[0, 1]`
    /// to absorb rounding in network outputs; NaN is rejected.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected image tensor of rank 3/4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("image", "NaN in tensor"));
        }
        Image::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_fn(h as usize, w as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_fn(h as usize, w as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(quantize))
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Concatenates images left to right; all must share a height.
    pub fn hstack(panels: &[Image]) -> Result<Image> {
        let first = panels
            .first()
            .ok_or_else(|| Error::invalid("panels", "nothing to stack"))?;
        let h = first.height;
        if panels.iter().any(|p| p.height != h) {
            return Err(Error::Shape("hstack needs equal heights".into()));
        }
        let total_w: usize = panels.iter().map(|p| p.width).sum();
        let mut out = Image {
            height: h,
            width: total_w,
            data: vec![0.0; 3 * h * total_w],
        };
        let mut x_off = 0;
        for p in panels {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..p.width {
                        out.set(c, y, x + x_off, p.get(c, y, x));
                    }
                }
            }
            x_off += p.width;
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mean_abs_diff on differently sized images".into()));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask", "height and width must be >= 1"));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_unit_range("mask", &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1.0; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// Ones inside `b`, zeros elsewhere.
    pub fn from_bbox(height: usize, width: usize, b: BBox) -> Result<Self> {
        b.validate_for(height, width)?;
        Self::from_fn(height, width, |y, x| {
            if b.contains(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v <= 0.0)
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn crop(&self, b: BBox) -> Result<Mask> {
        b.validate_for(self.height, self.width)?;
        Mask::from_fn(b.height(), b.width(), |y, x| self.get(y + b.y0, x + b.x0))
    }

    /// Tight bounding box of the nonzero pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) > 0.0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > 0).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Mask> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("size", "resize target must be >= 1x1"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Mask::new(
            height,
            width,
            out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Mask> {
        let t = t.flatten_to(1)?;
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected single-plane mask, got {dims:?}"))),
        };
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Mask::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Reads any PNG and uses its luminance.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let img = image::open(path.as_ref())?.to_luma8();
        Self::from_luma8(&img)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Mask> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
        Self::from_luma8(&img)
    }

    fn from_luma8(img: &image::GrayImage) -> Result<Mask> {
        let (w, h) = img.dimensions();
        Mask::new(
            h as usize,
            w as usize,
            img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        )
    }

    fn to_luma8(&self) -> image::GrayImage {
        ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| quantize(v)).collect(),
        )
        .expect("buffer length checked at construction")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_luma8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Checks ordering alone (no image bounds).
    pub fn validate(&self) -> Result<()> {
        if self.x1 <= self.x0 {
            return Err(Error::invalid(
                "bbox.x1",
                format!("x1 ({}) must exceed x0 ({})", self.x1, self.x0),
            ));
        }
        if self.y1 <= self.y0 {
            return Err(Error::invalid(
                "bbox.y1",
                format!("y1 ({}) must exceed y0 ({})", self.y1, self.y0),
            ));
        }
        Ok(())
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.x1 > width || self.y1 > height {
            return Err(Error::invalid(
                "bbox",
                format!("{self:?} exceeds image bounds {width}x{height}"),
            ));
        }
        Ok(())
    }
}

/// Pastes `obj` into `background` inside `target`.
///
/// The object is scaled by `min(box_w / obj_w, box_h / obj_h)` and centred in
/// the box. Returns the composite and the placed object mask at background
/// resolution. Wherever the returned mask is zero the composite is a bitwise
/// copy of the background.
pub fn composite_paste(
    background: &Image,
    obj: &Image,
    obj_mask: &Mask,
    target: BBox,
) -> Result<(Image, Mask)> {
    target.validate_for(background.height, background.width)?;
    if (obj_mask.height, obj_mask.width) != (obj.height, obj.width) {
        return Err(Error::Shape(format!(
            "object mask {}x{} does not annotate object {}x{}",
            obj_mask.height, obj_mask.width, obj.height, obj.width
        )));
    }
    if obj_mask.is_empty() {
        return Err(Error::EmptyRegion("empty foreground"));
    }

    let (bw, bh) = (target.width(), target.height());
    let scale = (bw as f64 / obj.width as f64).min(bh as f64 / obj.height as f64);
    let nw = ((obj.width as f64 * scale).round() as usize).clamp(1, bw);
    let nh = ((obj.height as f64 * scale).round() as usize).clamp(1, bh);
    let scaled = obj.resize(nh, nw)?;
    let scaled_mask = obj_mask.resize(nh, nw)?;
    let ox = target.x0 + (bw - nw) / 2;
    let oy = target.y0 + (bh - nh) / 2;

    let mut composite = background.clone();
    let mut mask = Mask::zeros(background.height, background.width)?;
    for y in 0..nh {
        for x in 0..nw {
            let m = scaled_mask.get(y, x);
            if m <= 0.0 {
                continue;
            }
            let (py, px) = (oy + y, ox + x);
            mask.data[py * mask.width + px] = m;
            for c in 0..3 {
                let v = m * scaled.get(c, y, x) + (1.0 - m) * background.get(c, py, px);
                composite.set(c, py, px, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok((composite, mask))
}

/// Area-average downsampling to `target_h x target_w`.
///
/// Each output cell is the overlap-weighted mean of the source cells it
/// covers, so integer factors reduce to plain block means and mass is
/// preserved up to the area ratio.
pub fn resample_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("size", "target dims must be >= 1"));
    }
    if target_h > mask.height || target_w > mask.width {
        return Err(Error::invalid(
            "size",
            format!(
                "upsampling {}x{} -> {target_h}x{target_w} is not supported",
                mask.height, mask.width
            ),
        ));
    }
    if (target_h, target_w) == (mask.height, mask.width) {
        return Ok(mask.clone());
    }
    let rows = area_weights(mask.height, target_h);
    let cols = area_weights(mask.width, target_w);
    let cell_area = (mask.height as f64 / target_h as f64) * (mask.width as f64 / target_w as f64);
    let mut out = Vec::with_capacity(target_h * target_w);
    for row in &rows {
        for col in &cols {
            let mut acc = 0.0f64;
            for &(sy, wy) in row {
                for &(sx, wx) in col {
                    acc += mask.get(sy, sx) as f64 * wy * wx;
                }
            }
            out.push(((acc / cell_area) as f32).clamp(0.0, 1.0));
        }
    }
    Mask::new(target_h, target_w, out)
}

/// For each output index, the source indices it overlaps and the overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let step = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * step;
            let hi = lo + step;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (w > 1e-12).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

/// Splits `img` into `n * n` equal tiles in row-major order. Dimensions that
/// are not multiples of `n` are centre-cropped to the nearest multiple.
pub fn patch_grid(img: &Image, n: usize) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::invalid("n", "patch grid size must be positive"));
    }
    let (ph, pw) = (img.height / n, img.width / n);
    if ph == 0 || pw == 0 {
        return Err(Error::invalid(
            "n",
            format!("{}x{} image is too small for a {n}x{n} grid", img.height, img.width),
        ));
    }
    let oy = (img.height - ph * n) / 2;
    let ox = (img.width - pw * n) / 2;
    let mut tiles = Vec::with_capacity(n * n);
    for gy in 0..n {
        for gx in 0..n {
            let x0 = ox + gx * pw;
            let y0 = oy + gy * ph;
            tiles.push(img.crop(BBox::new(x0, y0, x0 + pw, y0 + ph))?);
        }
    }
    Ok(tiles)
}
