use super::{NnError, Real, Result};
use crate::volume::Volume;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(NnError::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Feature map `[D, W, H, channels]` of zeros for spatial dims `[H, W, D]`.
    pub fn spatial_zeros(dims: [usize; 3], channels: usize) -> Self {
        Self::zeros(&[dims[2], dims[1], dims[0], channels])
    }

    /// Single-channel feature map holding a volume's intensities.
    pub fn from_volume(v: &Volume) -> Self {
        let [h, w, d] = v.dims();
        Self {
            shape: vec![d, w, h, 1],
            data: v.data().iter().map(|&x| T::of(x as f64)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial dims `[H, W, D]` of a rank-4 feature map.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[d, w, h, _] => Ok([h, w, d]),
            s => Err(NnError::Shape(format!("expected [D, W, H, C], got {s:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn volume_layout_matches_sites() {
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], |x, y, z| (x + 3 * y + 6 * z) as f32).unwrap();
        let t = Tensor::<f64>::from_volume(&v);
        assert_eq!(t.shape(), &[2, 2, 3, 1]);
        assert_eq!(t.spatial().unwrap(), [3, 2, 2]);
        assert!(t.data().iter().enumerate().all(|(i, &x)| x == i as f64));
    }
}
