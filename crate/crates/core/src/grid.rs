//! Dense row-major containers for per-pixel and per-plane fields.

/// H x W scalar field, row-major, pixel (x, y) at index `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Field2 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Field2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Field2 {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = self.idx(x, y);
        self.data[i] = value;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, value: f64) {
        let i = self.idx(x, y);
        self.data[i] += value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// K x H x W scalar field, plane-major: entry (k, x, y) at
/// `(k * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    planes: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(planes: usize, width: usize, height: usize) -> Self {
        Self::filled(planes, width, height, 0.0)
    }

    pub fn filled(planes: usize, width: usize, height: usize, value: f64) -> Self {
        Field3 {
            planes,
            width,
            height,
            data: vec![value; planes * width * height],
        }
    }

    pub fn from_vec(planes: usize, width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), planes * width * height);
        Field3 {
            planes,
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn planes(&self) -> usize {
        self.planes
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, k: usize, x: usize, y: usize) -> usize {
        debug_assert!(k < self.planes && x < self.width && y < self.height);
        (k * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, k: usize, x: usize, y: usize) -> f64 {
        self.data[self.idx(k, x, y)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, x: usize, y: usize, value: f64) {
        let i = self.idx(k, x, y);
        self.data[i] = value;
    }

    #[inline]
    pub fn add(&mut self, k: usize, x: usize, y: usize, value: f64) {
        let i = self.idx(k, x, y);
        self.data[i] += value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field3) -> bool {
        self.planes == other.planes && self.width == other.width && self.height == other.height
    }
}

/// H x W RGB image with intensities in [0, 1], interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn zeros(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        ImageRgb {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < 3);
        (y * self.width + x) * 3 + c
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// One grayscale plane of the image (channel mean).
    pub fn luma(&self) -> Field2 {
        let mut out = Field2::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                out.set(x, y, (p[0] + p[1] + p[2]) / 3.0);
            }
        }
        out
    }

    /// Single color channel as a scalar field.
    pub fn channel(&self, c: usize) -> Field2 {
        let mut out = Field2::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.at(x, y, c));
            }
        }
        out
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Per-pixel depth with a validity flag. Invalid entries are excluded from
/// every loss and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub z: Field2,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn all_valid(z: Field2) -> Self {
        let valid = vec![true; z.len()];
        DepthMap { z, valid }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            z: Field2::zeros(width, height),
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.z.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.z.height()
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.z.idx(x, y)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
