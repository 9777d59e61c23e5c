//! Region preprocessing for detection proposals: blur the context around the
//! proposal, expand the crop about the box center, then letterbox-resize the
//! crop to a square.

use serde::{Deserialize, Serialize};

pub const DEFAULT_CROP_SCALE: f64 = 1.6;
pub const DEFAULT_BLUR_SIGMA: f64 = 10.0;
pub const DEFAULT_OUT_SIZE: u32 = 224;
pub const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegionError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("box {bbox:?} lies outside the {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("crop scale {0} is below 1.0")]
    BadScale(f64),
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("output size must be positive")]
    ZeroOutSize,
}

/// Pixel box, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn clamp(&self, width: u32, height: u32) -> BBox {
        let (w, h) = (width as i64, height as i64);
        BBox {
            x0: self.x0.clamp(0, w),
            y0: self.y0.clamp(0, h),
            x1: self.x1.clamp(0, w),
            y1: self.y1.clamp(0, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub crop_scale: f64,
    pub blur: bool,
    pub blur_sigma: f64,
    pub out_size: u32,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams {
            crop_scale: DEFAULT_CROP_SCALE,
            blur: true,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            out_size: DEFAULT_OUT_SIZE,
        }
    }
}

/// 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn from_rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RegionError> {
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(RegionError::BufferSize {
                expected,
                got: data.len(),
            });
        }
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * CHANNELS)
            .collect();
        RasterImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width as usize + x) * CHANNELS
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x as usize, y as usize);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x as usize, y as usize);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width as i64, self.height as i64)
    }
}

/// Scales the box about its center, rounding outward to whole pixels, then
/// clamps to the image.
pub fn expand_bbox(bbox: BBox, scale: f64, width: u32, height: u32) -> Result<BBox, RegionError> {
    if !(scale >= 1.0) {
        return Err(RegionError::BadScale(scale));
    }
    if bbox.is_empty() {
        return Err(RegionError::DegenerateBox(bbox));
    }
    let grow = |lo: i64, hi: i64| {
        let center = (lo + hi) as f64 / 2.0;
        let half = (hi - lo) as f64 * scale / 2.0;
        ((center - half).floor() as i64, (center + half).ceil() as i64)
    };
    let (x0, x1) = grow(bbox.x0, bbox.x1);
    let (y0, y1) = grow(bbox.y0, bbox.y1);
    let out = BBox::new(x0, y0, x1, y1).clamp(width, height);
    if out.is_empty() {
        return Err(RegionError::DegenerateBox(out));
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Symmetric reflection about the border (`... b a | a b c ... | c b ...`),
/// repeated as often as needed for kernels wider than the image.
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Separable Gaussian blur of the whole image, in f64, before rounding.
fn blur_planes(image: &RasterImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (image.width as usize, image.height as usize);
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as i64;
    let mut horiz = vec![0.0f64; w * h * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let sx = reflect(x as i64 + t as i64 - r, w);
                    acc += wt * image.data[(y * w + sx) * CHANNELS + c] as f64;
                }
                horiz[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; w * h * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let sy = reflect(y as i64 + t as i64 - r, h);
                    acc += wt * horiz[(sy * w + x) * CHANNELS + c];
                }
                out[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    out
}

/// Replaces every pixel outside `keep` with the blurred full image; pixels
/// inside `keep` are copied untouched. `sigma <= 0` returns the input.
pub fn blur_outside(image: &RasterImage, keep: BBox, sigma: f64) -> RasterImage {
    if !(sigma > 0.0) || image.width == 0 || image.height == 0 {
        return image.clone();
    }
    let blurred = blur_planes(image, sigma);
    let mut out = image.clone();
    for y in 0..image.height as usize {
        for x in 0..image.width as usize {
            if keep.contains(x as i64, y as i64) {
                continue;
            }
            let o = (y * image.width as usize + x) * CHANNELS;
            for c in 0..CHANNELS {
                out.data[o + c] = to_u8(blurred[o + c]);
            }
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment; same size is an exact copy.
fn resize_bilinear(src: &RasterImage, out_w: u32, out_h: u32) -> RasterImage {
    let (sw, sh) = (src.width as usize, src.height as usize);
    let (ow, oh) = (out_w as usize, out_h as usize);
    let sample_axis = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, sw, ow)).collect();
    let mut data = vec![0u8; ow * oh * CHANNELS];
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, sh, oh);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..CHANNELS {
                let at = |xx: usize, yy: usize| src.data[(yy * sw + xx) * CHANNELS + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                data[(y * ow + x) * CHANNELS + c] = to_u8(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    RasterImage {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Placement of the resized crop inside the square canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Letterbox {
    pub content_width: u32,
    pub content_height: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

pub fn letterbox_geometry(crop_w: u32, crop_h: u32, out_size: u32) -> Letterbox {
    let scale = out_size as f64 / crop_w.max(crop_h) as f64;
    let content_width = ((crop_w as f64 * scale).round() as u32).clamp(1, out_size);
    let content_height = ((crop_h as f64 * scale).round() as u32).clamp(1, out_size);
    Letterbox {
        content_width,
        content_height,
        offset_x: (out_size - content_width) / 2,
        offset_y: (out_size - content_height) / 2,
    }
}

fn crop(image: &RasterImage, bbox: BBox) -> RasterImage {
    let (w, h) = (bbox.width() as usize, bbox.height() as usize);
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in bbox.y0 as usize..bbox.y1 as usize {
        let start = image.offset(bbox.x0 as usize, y);
        data.extend_from_slice(&image.data[start..start + w * CHANNELS]);
    }
    RasterImage {
        width: w as u32,
        height: h as u32,
        data,
    }
}

/// Crops `bbox`, fits it inside an `out_size` square preserving aspect ratio
/// and pads the remainder with black.
pub fn crop_resize(image: &RasterImage, bbox: BBox, out_size: u32) -> Result<RasterImage, RegionError> {
    if out_size == 0 {
        return Err(RegionError::ZeroOutSize);
    }
    if bbox.is_empty() {
        return Err(RegionError::DegenerateBox(bbox));
    }
    if !image.bounds().contains_box(&bbox) {
        return Err(RegionError::OutOfBounds {
            bbox,
            width: image.width,
            height: image.height,
        });
    }
    let cropped = crop(image, bbox);
    let lb = letterbox_geometry(cropped.width, cropped.height, out_size);
    let content = resize_bilinear(&cropped, lb.content_width, lb.content_height);
    let mut canvas = RasterImage::filled(out_size, out_size, [0, 0, 0]);
    let row_bytes = lb.content_width as usize * CHANNELS;
    for y in 0..lb.content_height as usize {
        let src = y * row_bytes;
        let dst = canvas.offset(lb.offset_x as usize, lb.offset_y as usize + y);
        canvas.data[dst..dst + row_bytes].copy_from_slice(&content.data[src..src + row_bytes]);
    }
    Ok(canvas)
}

/// Result of [`preprocess_region`] together with the boxes it used.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedRegion {
    pub image: RasterImage,
    pub proposal: BBox,
    pub crop_box: BBox,
}

/// Blur outside the proposal, expand the proposal by `crop_scale`, crop and
/// letterbox-resize. The blur mask is the proposal, not the expanded crop.
pub fn preprocess_region(
    image: &RasterImage,
    bbox: BBox,
    params: &RegionParams,
) -> Result<ProcessedRegion, RegionError> {
    let proposal = bbox.clamp(image.width, image.height);
    if bbox.is_empty() || proposal.is_empty() {
        return Err(RegionError::DegenerateBox(bbox));
    }
    let source = if params.blur {
        blur_outside(image, proposal, params.blur_sigma)
    } else {
        image.clone()
    };
    let crop_box = expand_bbox(proposal, params.crop_scale, image.width, image.height)?;
    let image = crop_resize(&source, crop_box, params.out_size)?;
    Ok(ProcessedRegion {
        image,
        proposal,
        crop_box,
    })
}
