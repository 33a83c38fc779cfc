//! Dense H×W×C field of `f64` values in row-major, channel-last layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_scalar(&self) -> bool {
        self.height == 1 && self.width == 1 && self.channels == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::shape("Grid::new", format!("{} values", shape.len()), data.len()));
        }
        Ok(Grid { shape, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        let shape = Shape::new(height, width, channels);
        Grid {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros_like(other: &Grid) -> Self {
        let s = other.shape;
        Self::zeros(s.height, s.width, s.channels)
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    /// Builds a grid from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Grid {
            shape: Shape::new(height, width, channels),
            data,
        }
    }

    /// Convolution kernel storage: `ksize×ksize` spatial taps with `cin·cout`
    /// channels laid out as `[ky][kx][ci][co]`.
    pub fn kernel(ksize: usize, cin: usize, cout: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(ksize, ksize, cin * cout, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.shape.height && x < self.shape.width && c < self.shape.channels);
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Value of a 1×1×1 grid.
    pub fn item(&self) -> Result<f64> {
        if !self.shape.is_scalar() {
            return Err(Error::shape("Grid::item", "1x1x1", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn same_shape(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn same_spatial(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.shape.height != other.shape.height || self.shape.width != other.shape.width {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.shape.height, self.shape.width),
                format!("{}x{}", other.shape.height, other.shape.width),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.same_shape(other, "zip_map")?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Grid) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of one channel as an H×W×1 grid.
    pub fn channel(&self, c: usize) -> Result<Grid> {
        if c >= self.shape.channels {
            return Err(Error::Dims {
                op: "channel",
                reason: format!("channel {c} of {}", self.shape.channels),
            });
        }
        let n = self.shape.channels;
        Ok(Grid {
            shape: Shape::new(self.shape.height, self.shape.width, 1),
            data: self.data.iter().skip(c).step_by(n).copied().collect(),
        })
    }

    /// Channel-wise concatenation, `a` channels first.
    pub fn concat_channels(a: &Grid, b: &Grid) -> Result<Grid> {
        a.same_spatial(b, "concat_channels")?;
        let (ca, cb) = (a.shape.channels, b.shape.channels);
        let pixels = a.shape.pixels();
        let mut data = Vec::with_capacity(pixels * (ca + cb));
        for p in 0..pixels {
            data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        Ok(Grid {
            shape: Shape::new(a.shape.height, a.shape.width, ca + cb),
            data,
        })
    }

    /// Mirror along the vertical axis (left-right flip).
    pub fn flip_horizontal(&self) -> Grid {
        let Shape {
            height: h,
            width: w,
            channels: c,
        } = self.shape;
        Grid::from_fn(h, w, c, |y, x, ch| self.get(y, w - 1 - x, ch))
    }

    /// Rotate by `quarter_turns` × 90° counter-clockwise.
    pub fn rot90(&self, quarter_turns: u8) -> Grid {
        let Shape {
            height: h,
            width: w,
            channels: c,
        } = self.shape;
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Grid::from_fn(w, h, c, |y, x, ch| self.get(x, w - 1 - y, ch)),
            2 => Grid::from_fn(h, w, c, |y, x, ch| self.get(h - 1 - y, w - 1 - x, ch)),
            _ => Grid::from_fn(w, h, c, |y, x, ch| self.get(h - 1 - x, y, ch)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Grid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Grid::new(2, 2, 1, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn layout_is_channel_last() {
        let g = Grid::from_fn(2, 3, 2, |y, x, c| (100 * y + 10 * x + c) as f64);
        assert_eq!(g.as_slice()[0..4], [0.0, 1.0, 10.0, 11.0]);
        assert_eq!(g.get(1, 2, 1), 121.0);
        assert_eq!(g.channel(1).unwrap().as_slice(), &[1.0, 11.0, 21.0, 101.0, 111.0, 121.0]);
    }

    #[test]
    fn concat_preserves_channel_order() {
        let rgb = Grid::from_fn(4, 4, 3, |y, x, c| (y * 16 + x * 4 + c) as f64 / 100.0);
        let d = Grid::from_fn(4, 4, 1, |y, x, _| (y + x) as f64);
        let f = Grid::concat_channels(&rgb, &d).unwrap();
        assert_eq!(f.shape(), Shape::new(4, 4, 4));
        for k in 0..3 {
            assert_eq!(f.channel(k).unwrap(), rgb.channel(k).unwrap());
        }
        assert_eq!(f.channel(3).unwrap(), d);

        let empty = Grid::zeros(4, 4, 0);
        assert_eq!(Grid::concat_channels(&rgb, &empty).unwrap(), rgb);
        assert!(Grid::concat_channels(&rgb, &Grid::zeros(3, 4, 1)).is_err());
    }

    #[test]
    fn rotations_compose() {
        let g = Grid::from_fn(3, 5, 2, |y, x, c| (y * 10 + x + 100 * c) as f64);
        assert_eq!(g.rot90(1).shape(), Shape::new(5, 3, 2));
        assert_eq!(g.rot90(1).rot90(3), g);
        assert_eq!(g.rot90(2).rot90(2), g);
        assert_eq!(g.rot90(1).rot90(1), g.rot90(2));
        assert_eq!(g.flip_horizontal().flip_horizontal(), g);
        // counter-clockwise: top-right corner moves to top-left
        assert_eq!(g.rot90(1).get(0, 0, 0), g.get(0, 4, 0));
    }
}
