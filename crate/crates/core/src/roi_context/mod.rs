//! Square ROI and context crops, resampling, and stream-consistent augmentation.

mod augment;
mod image;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::augment::{augment, AugmentConfig};
pub use self::image::Image;
use crate::scalar::{lit, Scalar};

/// Default side of every crop fed to the encoders.
pub const CROP_SIDE: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("bounding box has non-positive extent ({w} x {h})")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("unsupported context scale {0} (expected 3 or 5)")]
    UnsupportedScale(u32),
    #[error("invalid context scale token {0:?}")]
    BadScaleToken(String),
    #[error("crop window (center {cx:.1},{cy:.1}, side {side:.1}) lies entirely outside the {width}x{height} image")]
    OutsideImage { cx: f64, cy: f64, side: f64, width: usize, height: usize },
    #[error("window side must be positive, got {0}")]
    BadSide(f64),
}

/// Axis-aligned box `(x, y, w, h)` in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Square crop window given by its center and side length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn left(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &CropWindow) -> bool {
        other.left() >= self.left()
            && other.top() >= self.top()
            && other.left() + other.side <= self.left() + self.side
            && other.top() + other.side <= self.top() + self.side
    }
}

/// Context scale relative to the square ROI window.
///
/// Serialized as `"3"`, `"5"` or `"full"`; the integers 3 and 5 are accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextScale {
    X3,
    X5,
    Full,
}

impl Serialize for ContextScale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for ContextScale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = ContextScale;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a context scale: 3, 5 or \"full\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<ContextScale, E> {
                self.visit_str(&v.to_string())
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<ContextScale, E> {
                self.visit_str(&v.to_string())
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<ContextScale, E> {
                v.parse().map_err(|_| E::custom(format!("invalid context scale {v:?} (expected 3, 5 or \"full\")")))
            }
        }
        d.deserialize_any(Visitor)
    }
}

impl ContextScale {
    pub const ALL: [ContextScale; 3] = [ContextScale::X3, ContextScale::X5, ContextScale::Full];

    /// Short tag used in file names.
    pub fn tag(self) -> &'static str {
        match self {
            ContextScale::X3 => "c3",
            ContextScale::X5 => "c5",
            ContextScale::Full => "full",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            ContextScale::X3 => "3",
            ContextScale::X5 => "5",
            ContextScale::Full => "full",
        }
    }
}

impl fmt::Display for ContextScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ContextScale {
    type Err = CropError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "3" | "x3" | "3x" => Ok(ContextScale::X3),
            "5" | "x5" | "5x" => Ok(ContextScale::X5),
            "full" | "Full" | "FULL" => Ok(ContextScale::Full),
            other => Err(CropError::BadScaleToken(other.to_string())),
        }
    }
}

/// Square window centered on the box with side `max(w, h)`.
pub fn square_roi_window(bbox: &BBox) -> Result<CropWindow, CropError> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(CropError::NonPositiveExtent { w: bbox.w, h: bbox.h });
    }
    Ok(CropWindow { cx: bbox.x + bbox.w / 2.0, cy: bbox.y + bbox.h / 2.0, side: bbox.w.max(bbox.h) })
}

/// Same center, side scaled by `factor` (3 or 5).
pub fn context_window(roi: &CropWindow, factor: u32) -> Result<CropWindow, CropError> {
    match factor {
        3 | 5 => Ok(CropWindow { side: roi.side * f64::from(factor), ..*roi }),
        other => Err(CropError::UnsupportedScale(other)),
    }
}

/// Largest square of side `max(width, height)` centered on the object.
pub fn full_window(roi: &CropWindow, width: usize, height: usize) -> CropWindow {
    CropWindow { cx: roi.cx, cy: roi.cy, side: width.max(height) as f64 }
}

/// Window of `scale` around an ROI window inside a `width × height` image.
pub fn window_for(scale: ContextScale, roi: &CropWindow, width: usize, height: usize) -> CropWindow {
    match scale {
        ContextScale::X3 => CropWindow { side: roi.side * 3.0, ..*roi },
        ContextScale::X5 => CropWindow { side: roi.side * 5.0, ..*roi },
        ContextScale::Full => full_window(roi, width, height),
    }
}

/// Samples `window` into an `out_side × out_side` image.
///
/// Bilinear interpolation on half-pixel-centered coordinates; samples outside
/// the source replicate the nearest edge pixel.
pub fn extract<T: Scalar>(img: &Image<T>, window: &CropWindow, out_side: usize) -> Result<Image<T>, CropError> {
    if !(window.side > 0.0) {
        return Err(CropError::BadSide(window.side));
    }
    let (w, h) = (img.width(), img.height());
    let (left, top) = (window.left(), window.top());
    if left >= w as f64 || top >= h as f64 || left + window.side <= 0.0 || top + window.side <= 0.0 {
        return Err(CropError::OutsideImage { cx: window.cx, cy: window.cy, side: window.side, width: w, height: h });
    }
    let step = window.side / out_side as f64;
    let axis = |start: f64, o: usize, len: usize| -> (usize, usize, f64) {
        let s = start + (o as f64 + 0.5) * step - 0.5;
        let s = s.clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_side).map(|o| axis(left, o, w)).collect();
    let ys: Vec<_> = (0..out_side).map(|o| axis(top, o, h)).collect();
    let src = img.data();
    let mut data = Vec::with_capacity(out_side * out_side * 3);
    for &(y0, y1, fy) in &ys {
        let fy = lit::<T>(fy);
        for &(x0, x1, fx) in &xs {
            let fx = lit::<T>(fx);
            for c in 0..3 {
                let p00 = src[(y0 * w + x0) * 3 + c];
                let p01 = src[(y0 * w + x1) * 3 + c];
                let p10 = src[(y1 * w + x0) * 3 + c];
                let p11 = src[(y1 * w + x1) * 3 + c];
                let top_row = p00 + (p01 - p00) * fx;
                let bottom_row = p10 + (p11 - p10) * fx;
                let v = top_row + (bottom_row - top_row) * fy;
                data.push(v.max(T::zero()).min(T::one()));
            }
        }
    }
    Ok(Image::new(out_side, out_side, data))
}

/// ROI crop plus its context crops, in the configured scale order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet<T> {
    pub roi: Image<T>,
    pub contexts: Vec<(ContextScale, Image<T>)>,
}

impl<T: Scalar> ContextSet<T> {
    /// All streams, ROI first.
    pub fn streams(&self) -> impl Iterator<Item = &Image<T>> {
        std::iter::once(&self.roi).chain(self.contexts.iter().map(|(_, im)| im))
    }

    pub fn scales(&self) -> Vec<ContextScale> {
        self.contexts.iter().map(|(s, _)| *s).collect()
    }

    /// Writes `{id}_{roi|c3|c5|full}.png` into `dir`.
    pub fn dump_pngs(&self, dir: &std::path::Path, annotation_id: i64) -> Result<(), ::image::ImageError> {
        self.roi.save_png(&dir.join(format!("{annotation_id}_roi.png")))?;
        for (scale, im) in &self.contexts {
            im.save_png(&dir.join(format!("{annotation_id}_{}.png", scale.tag())))?;
        }
        Ok(())
    }
}

/// Crops the ROI and every requested context scale (sorted to 3, 5, full).
pub fn build_context_set<T: Scalar>(
    img: &Image<T>,
    bbox: &BBox,
    scales: &[ContextScale],
    out_side: usize,
) -> Result<ContextSet<T>, CropError> {
    let roi_window = square_roi_window(bbox)?;
    let roi = extract(img, &roi_window, out_side)?;
    let mut ordered = scales.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let contexts = ordered
        .into_iter()
        .map(|s| {
            let win = window_for(s, &roi_window, img.width(), img.height());
            extract(img, &win, out_side).map(|im| (s, im))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ContextSet { roi, contexts })
}
