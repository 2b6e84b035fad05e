//! Visual-prompt compositing: boxes, masks and number tags drawn onto the
//! source image.
//!
//! Rendering is integer arithmetic over an RGB8 buffer with a bundled bitmap
//! font, so identical inputs give bit-identical pixels on every platform.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::detector::DetectionSet;
use crate::digest::{json_hash, sha256_hex, write_atomic};

/// Axis-aligned box in pixel coordinates, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Covered pixel columns/rows as half-open `(x0, y0, x1, y1)`, clipped to
    /// the image.
    pub fn pixel_span(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let lo = |v: f64, max: u32| (v.floor().max(0.0) as u32).min(max);
        let hi = |v: f64, max: u32| (v.ceil().max(0.0) as u32).min(max);
        (
            lo(self.x_min, width),
            lo(self.y_min, height),
            hi(self.x_max, width),
            hi(self.y_max, height),
        )
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [a, b, c, e] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(a, b, c, e))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error("box has zero area after clamping to the image")]
    DegenerateBox,
    #[error("style draws masks but no detection carries one")]
    MaskStyleWithoutMasks,
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("invalid style: {0}")]
    InvalidStyle(String),
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
}

/// Intersect `bbox` with the `width × height` image rectangle.
pub fn clamp_box(bbox: BBox, width: u32, height: u32) -> Result<BBox, RenderError> {
    let (w, h) = (width as f64, height as f64);
    if ![bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max].iter().all(|v| v.is_finite()) {
        return Err(RenderError::DegenerateBox);
    }
    let out = BBox::new(
        bbox.x_min.max(0.0).min(w),
        bbox.y_min.max(0.0).min(h),
        bbox.x_max.min(w).max(0.0),
        bbox.y_max.min(h).max(0.0),
    );
    if out.x_min < out.x_max && out.y_min < out.y_max {
        Ok(out)
    } else {
        Err(RenderError::DegenerateBox)
    }
}

/// Which marker layers to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VPromptStyle {
    pub number: bool,
    #[serde(rename = "box")]
    pub boxes: bool,
    pub mask: bool,
    /// Halve the mask opacity.
    #[serde(default)]
    pub faint_mask: bool,
}

impl VPromptStyle {
    pub const TYPE_A: Self = Self::preset(true, true, false, false);
    pub const TYPE_B: Self = Self::preset(false, true, true, false);
    pub const TYPE_C: Self = Self::preset(true, true, true, false);
    pub const TYPE_D: Self = Self::preset(false, false, true, false);
    pub const TYPE_E: Self = Self::preset(false, true, true, true);

    pub const PRESETS: [(&'static str, Self); 5] = [
        ("type_a", Self::TYPE_A),
        ("type_b", Self::TYPE_B),
        ("type_c", Self::TYPE_C),
        ("type_d", Self::TYPE_D),
        ("type_e", Self::TYPE_E),
    ];

    const fn preset(number: bool, boxes: bool, mask: bool, faint_mask: bool) -> Self {
        Self {
            number,
            boxes,
            mask,
            faint_mask,
        }
    }

    pub fn new(number: bool, boxes: bool, mask: bool) -> Result<Self, RenderError> {
        let s = Self::preset(number, boxes, mask, false);
        s.validate().map(|_| s)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.number || self.boxes || self.mask) {
            return Err(RenderError::InvalidStyle("no marker layer enabled".into()));
        }
        if self.faint_mask && !self.mask {
            return Err(RenderError::InvalidStyle("faint_mask without mask".into()));
        }
        Ok(())
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        Self::PRESETS.iter().find(|(_, s)| s == self).map(|(n, _)| *n)
    }
}

impl fmt::Display for VPromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "number={},box={},mask={},faint={}",
                self.number, self.boxes, self.mask, self.faint_mask
            ),
        }
    }
}

impl std::str::FromStr for VPromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("type_").unwrap_or(&key);
        VPromptStyle::PRESETS
            .iter()
            .find(|(n, _)| n.strip_prefix("type_") == Some(key))
            .map(|(_, st)| *st)
            .ok_or_else(|| format!("unknown visual prompt style `{s}` (expected type_a..type_e)"))
    }
}

pub const DEFAULT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub palette: Vec<[u8; 3]>,
    /// Fixed stroke width; `None` derives it from the image size.
    #[serde(default)]
    pub stroke_px: Option<u32>,
    pub mask_alpha: f64,
    /// Number-tag height in pixels; `None` means 2% of the image height.
    #[serde(default)]
    pub label_scale: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            palette: DEFAULT_PALETTE.to_vec(),
            stroke_px: None,
            mask_alpha: 0.4,
            label_scale: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.palette.len() < 8 {
            return Err(RenderError::InvalidConfig("palette needs at least 8 colors".into()));
        }
        if !(self.mask_alpha > 0.0 && self.mask_alpha <= 1.0) {
            return Err(RenderError::InvalidConfig("mask_alpha must be in (0, 1]".into()));
        }
        if matches!(self.stroke_px, Some(s) if s < 2) {
            return Err(RenderError::InvalidConfig("stroke must be at least 2 px".into()));
        }
        Ok(())
    }

    /// `max(2, round(0.004 × max(width, height)))` unless fixed.
    pub fn stroke_for(&self, width: u32, height: u32) -> u32 {
        self.stroke_px
            .unwrap_or_else(|| ((0.004 * width.max(height) as f64).round() as u32).max(2))
    }

    pub fn label_height_for(&self, height: u32) -> f64 {
        self.label_scale.unwrap_or(0.02 * height as f64)
    }

    pub fn content_hash(&self) -> String {
        json_hash(self)
    }
}

/// `palette[i mod |palette|]` for `i in 0..n`.
pub fn assign_colors(n: usize, palette: &[[u8; 3]]) -> Vec<[u8; 3]> {
    if palette.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| palette[i % palette.len()]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub detections_hash: String,
    pub render_config_hash: String,
}

/// The marker-composited image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub style: VPromptStyle,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image_id: String,
    pub style: VPromptStyle,
    pub provenance: Provenance,
    pub width: u32,
    pub height: u32,
    pub pixel_sha256: String,
}

impl AnnotatedImage {
    /// SHA-256 over dimensions and raw RGB bytes.
    pub fn content_hash(&self) -> String {
        pixel_hash(&self.pixels)
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut buf, ImageFormat::Png)
            .expect("PNG encoding of an in-memory buffer");
        buf.into_inner()
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            image_id: self.image_id.clone(),
            style: self.style,
            provenance: self.provenance.clone(),
            width: self.pixels.width(),
            height: self.pixels.height(),
            pixel_sha256: self.content_hash(),
        }
    }

    /// Write `{dir}/{image_id}.png` and the `{image_id}.json` sidecar.
    pub fn write_to_dir(&self, dir: &Path) -> std::io::Result<()> {
        write_atomic(&dir.join(format!("{}.png", self.image_id)), &self.to_png())?;
        let side = serde_json::to_vec_pretty(&self.sidecar()).expect("serializable");
        write_atomic(&dir.join(format!("{}.json", self.image_id)), &side)
    }
}

pub fn pixel_hash(img: &RgbImage) -> String {
    let mut bytes = Vec::with_capacity(8 + img.as_raw().len());
    bytes.extend_from_slice(&img.width().to_le_bytes());
    bytes.extend_from_slice(&img.height().to_le_bytes());
    bytes.extend_from_slice(img.as_raw());
    sha256_hex(bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, RenderError> {
    image::load_from_memory(bytes)
        .map(|d| d.to_rgb8())
        .map_err(|e| RenderError::UndecodableImage(e.to_string()))
}

/// Where a number tag goes and what it says.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NumberTag {
    pub number: u32,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5×7 digits, one byte per row, bit 4 is the leftmost column.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

fn glyph_scale(cfg: &RenderConfig, height: u32) -> u32 {
    ((cfg.label_height_for(height) / GLYPH_H as f64).round() as u32).max(1)
}

/// Number tags, 1-based in detection order, anchored at each box's top-left
/// corner and shifted back inside the image when they would overflow.
pub fn plan_number_tags(dets: &DetectionSet, cfg: &RenderConfig, width: u32, height: u32) -> Vec<NumberTag> {
    let scale = glyph_scale(cfg, height);
    dets.detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let number = i as u32 + 1;
            let digits = number.to_string().len() as u32;
            let tw = (digits * (GLYPH_W + 1) + 1) * scale;
            let th = (GLYPH_H + 2) * scale;
            let (x0, y0, _, _) = d.bbox.pixel_span(width, height);
            NumberTag {
                number,
                x: x0.min(width.saturating_sub(tw)),
                y: y0.min(height.saturating_sub(th)),
                width: tw,
                height: th,
            }
        })
        .collect()
}

fn blend(dst: &mut Rgb<u8>, color: [u8; 3], alpha256: u32) {
    for (c, &src) in dst.0.iter_mut().zip(color.iter()) {
        *c = ((*c as u32 * (256 - alpha256) + src as u32 * alpha256 + 128) >> 8) as u8;
    }
}

/// Composite the style's marker layers onto a copy of `source`.
///
/// Masks go down first, then boxes, then number tags; within a layer later
/// detections draw over earlier ones. Everything a detection draws stays inside
/// its mask or its box dilated by the stroke width.
pub fn render_vprompt(
    source: &RgbImage,
    image_id: &str,
    detections: &DetectionSet,
    style: VPromptStyle,
    cfg: &RenderConfig,
) -> Result<AnnotatedImage, RenderError> {
    style.validate()?;
    cfg.validate()?;
    let provenance = Provenance {
        detections_hash: detections.content_hash(),
        render_config_hash: cfg.content_hash(),
    };
    let mut out = source.clone();
    let (w, h) = out.dimensions();
    if detections.is_empty() {
        return Ok(AnnotatedImage {
            image_id: image_id.to_string(),
            pixels: out,
            style,
            provenance,
        });
    }
    if style.mask && !detections.has_masks() {
        return Err(RenderError::MaskStyleWithoutMasks);
    }
    let colors = assign_colors(detections.detections.len(), &cfg.palette);
    let stroke = cfg.stroke_for(w, h);

    if style.mask {
        let mut alpha = cfg.mask_alpha;
        if style.faint_mask {
            alpha /= 2.0;
        }
        let a256 = (alpha * 256.0).round().clamp(1.0, 256.0) as u32;
        for (d, &color) in detections.detections.iter().zip(&colors) {
            let Some(rle) = &d.mask else { continue };
            if rle.width() != w || rle.height() != h {
                continue;
            }
            let Ok(bits) = rle.decode() else { continue };
            for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
                let (x, y) = ((i as u32) % w, (i as u32) / w);
                blend(out.get_pixel_mut(x, y), color, a256);
            }
        }
    }

    if style.boxes {
        for (d, &color) in detections.detections.iter().zip(&colors) {
            let (x0, y0, x1, y1) = d.bbox.pixel_span(w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let edge = x < x0 + stroke || x + stroke >= x1 || y < y0 + stroke || y + stroke >= y1;
                    if edge {
                        out.put_pixel(x, y, Rgb(color));
                    }
                }
            }
        }
    }

    if style.number {
        let scale = glyph_scale(cfg, h);
        let tags = plan_number_tags(detections, cfg, w, h);
        for ((d, &color), tag) in detections.detections.iter().zip(&colors).zip(tags) {
            let (bx0, by0, bx1, by1) = d.bbox.pixel_span(w, h);
            let clip = (
                bx0.saturating_sub(stroke),
                by0.saturating_sub(stroke),
                (bx1 + stroke).min(w),
                (by1 + stroke).min(h),
            );
            draw_tag(&mut out, tag, color, scale, clip);
        }
    }

    Ok(AnnotatedImage {
        image_id: image_id.to_string(),
        pixels: out,
        style,
        provenance,
    })
}

fn draw_tag(img: &mut RgbImage, tag: NumberTag, bg: [u8; 3], scale: u32, clip: (u32, u32, u32, u32)) {
    let luma = (299 * bg[0] as u32 + 587 * bg[1] as u32 + 114 * bg[2] as u32) / 1000;
    let fg = if luma > 128 { [0, 0, 0] } else { [255, 255, 255] };
    let (cx0, cy0, cx1, cy1) = clip;
    let digits: Vec<usize> = tag
        .number
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    for dy in 0..tag.height {
        for dx in 0..tag.width {
            let (x, y) = (tag.x + dx, tag.y + dy);
            if x < cx0 || x >= cx1 || y < cy0 || y >= cy1 {
                continue;
            }
            let (gx, gy) = (dx / scale, dy / scale);
            let mut on = false;
            if (1..=GLYPH_H).contains(&gy) && gx >= 1 {
                let cell = (gx - 1) / (GLYPH_W + 1);
                let col = (gx - 1) % (GLYPH_W + 1);
                if let Some(&digit) = digits.get(cell as usize) {
                    if col < GLYPH_W {
                        let row = DIGITS[digit][(gy - 1) as usize];
                        on = row & (1 << (GLYPH_W - 1 - col)) != 0;
                    }
                }
            }
            img.put_pixel(x, y, Rgb(if on { fg } else { bg }));
        }
    }
}
