use std::path::Path;

use crate::scalar::{lit, Scalar};

/// Row-major `height × width × 3` color tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer must be width*height*3");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let scale = lit::<T>(1.0 / 255.0);
        Self::new(width, height, bytes.iter().map(|&b| T::from_f64_lossy(f64::from(b)) * scale).collect())
    }

    /// Quantizes to 8-bit RGB with round-half-up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    /// Decodes any PNG color type to 3-channel RGB; grayscale is replicated.
    pub fn load_png(path: &Path) -> Result<Self, image::ImageError> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self::from_rgb8(w as usize, h as usize, rgb.as_raw()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ColorType::Rgb8)
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y, c| self.get(self.width - 1 - x, y, c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y, c| self.get(x, self.height - 1 - y, c))
    }

    /// Rotates counter-clockwise by `quarter_turns × 90°`.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(h, w, |x, y, c| self.get(w - 1 - y, x, c)),
            2 => Self::from_fn(w, h, |x, y, c| self.get(w - 1 - x, h - 1 - y, c)),
            _ => Self::from_fn(h, w, |x, y, c| self.get(y, h - 1 - x, c)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image<f64> {
        Image::from_fn(5, 3, |x, y, c| (x * 100 + y * 10 + c) as f64 / 1000.0)
    }

    #[test]
    fn flips_are_involutions() {
        let im = ramp();
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_vertical().flip_vertical(), im);
        assert_ne!(im.flip_horizontal(), im);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let im = ramp();
        let r1 = im.rotate90(1);
        assert_eq!((r1.width(), r1.height()), (3, 5));
        assert_eq!(r1.rotate90(1).rotate90(1).rotate90(1), im);
        assert_eq!(im.rotate90(2), im.flip_horizontal().flip_vertical());
        assert_eq!(im.rotate90(1).rotate90(3), im);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let bytes: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 11) as u8).collect();
        let im = Image::<f32>::from_rgb8(4, 2, &bytes);
        im.save_png(&path).unwrap();
        let back = Image::<f32>::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }
}
