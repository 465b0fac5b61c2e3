use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2D grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::default())
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} elements", rows * cols),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} of {}x{}", dims.0, dims.1),
                actual: format!("{}x{}", self.rows, self.cols),
            });
        }
        Ok(())
    }
}

impl<T: Copy> Grid<T> {
    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> Grid<T> {
        Grid::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Rotate counter-clockwise by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: u32) -> Grid<T> {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Grid::from_fn(self.cols, self.rows, |r, c| self.at(c, self.cols - 1 - r)),
            2 => Grid::from_fn(self.rows, self.cols, |r, c| {
                self.at(self.rows - 1 - r, self.cols - 1 - c)
            }),
            _ => Grid::from_fn(self.cols, self.rows, |r, c| self.at(self.rows - 1 - c, r)),
        }
    }
}
