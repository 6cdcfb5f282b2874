//! Pixel-grid types: RGB images, single-channel shading maps, unit-normal
//! maps and boolean masks. All grids are row-major with (x, y) addressing,
//! x to the right and y downward; the normal-map y axis points up in image
//! space so that a normal (0, 1, 0) tilts toward the top of the picture.

use crate::error::{Error, Result};

/// H×W×3 grid of linear intensities. Values are nominally in [0, 1];
/// out-of-range values exist only through explicit unclamped construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Albedo shares the image layout and the [0, 1] range.
pub type AlbedoMap = Image;

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    /// Builds from interleaved RGB data, requiring finite values in [0, 1].
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self::from_raw_unclamped(width, height, data)?;
        if img.data.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("image values outside [0,1]"));
        }
        Ok(img)
    }

    /// Builds from interleaved RGB data, requiring only finite values.
    pub fn from_raw_unclamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite image value"));
        }
        Ok(Self { width, height, data })
    }

    pub fn splat(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        3 * (y * self.width + x)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// H×W single-channel field. Shading may exceed 1 (the solver clamps it to
/// [0, 4]); negative fitted values are kept here and clamped by the renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ShadingMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn splat(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut s = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                s.data[y * width + x] = f(x, y);
            }
        }
        s
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "shading data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite shading value"));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// H×W grid of unit normals on the camera-facing hemisphere (z ≥ 0).
/// A zero vector marks an invalid pixel (e.g. decoded from a degenerate
/// encoding); operations that require normals skip or reject those.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl NormalMap {
    /// All pixels frontal (0, 0, 1).
    pub fn frontal(width: usize, height: usize) -> Self {
        let mut data = vec![0.0; width * height * 3];
        for p in 0..width * height {
            data[3 * p + 2] = 1.0;
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut n = Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        };
        for y in 0..height {
            for x in 0..width {
                n.set(x, y, f(x, y));
            }
        }
        n
    }

    /// Builds from interleaved xyz data. Every non-zero pixel must be unit
    /// length within 1e-4 with z ≥ 0.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "normal data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        let n = Self { width, height, data };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        for p in 0..self.width * self.height {
            let v = &self.data[3 * p..3 * p + 3];
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid("non-finite normal component"));
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm == 0.0 {
                continue; // invalid pixel marker
            }
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(format!("normal has norm {norm}, expected 1")));
            }
            if v[2] < -1e-6 {
                return Err(Error::invalid("normal points away from the camera (z < 0)"));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        3 * (y * self.width + x)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, n: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&n);
    }

    /// A pixel is valid when its vector is (near) unit; the zero vector marks
    /// an invalid pixel.
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let n = self.get(x, y);
        (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() > 0.5
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// H×W boolean mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Iterates (x, y) over masked pixels in row-major order.
    pub fn iter_true(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn require_nonempty(&self, what: &str) -> Result<usize> {
        let n = self.count();
        if n == 0 {
            return Err(Error::EmptyMask(what.to_string()));
        }
        Ok(n)
    }
}
