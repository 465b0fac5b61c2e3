use crate::error::{Error, Result};

/// Dense `f32` tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?} ({expected} elements)"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped `[1, C, H, W]` tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch {
            expected: "at least one tensor".into(),
            actual: "none".into(),
        })?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", first.shape),
                    actual: format!("{:?}", p.shape),
                });
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let plane = self.plane_len();
        let start = n * self.sample_len() + c * plane;
        &self.data[start..start + plane]
    }

    /// Copies out sample `n` as a `[1, C, H, W]` tensor.
    pub fn sample_tensor(&self, n: usize) -> Tensor {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(n).to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}
