use super::{NnError, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(NnError::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Stacks equally sized samples along a new leading batch axis.
    pub fn stack(sample_shape: &[usize], samples: Vec<Vec<f64>>) -> Result<Tensor> {
        let per: usize = sample_shape.iter().product();
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(NnError::ShapeMismatch(format!(
                    "sample has {} values, expected {per}",
                    s.len()
                )));
            }
            data.extend(s);
        }
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// The `i`-th slice along the leading dimension.
    pub fn row(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }
}
