use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Dense voxel-unit displacement `u` with `T(x) = x + u(x)`.
///
/// Channel 0 displaces along W (x), channel 1 along H (y), channel 2 along
/// D (z).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(Tensor);

impl DisplacementField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _) = t.shape().volume()?;
        if c != 3 {
            return Err(Error::shape(format!("a displacement field has 3 channels, got {c}")));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("displacement field is not finite".into()));
        }
        Ok(DisplacementField(t))
    }

    pub fn zeros(spatial: [usize; 3]) -> Result<Self> {
        let [d, h, w] = spatial;
        Ok(DisplacementField(Tensor::zeros(Shape::new([3, d, h, w])?)))
    }

    /// Field equal to `v = (x, y, z)` everywhere.
    pub fn uniform(spatial: [usize; 3], v: [f64; 3]) -> Result<Self> {
        let mut f = Self::zeros(spatial)?;
        let plane = spatial.iter().product::<usize>();
        for (c, &value) in v.iter().enumerate() {
            f.0.data_mut()[c * plane..(c + 1) * plane].fill(value);
        }
        Ok(f)
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.0.shape().volume().expect("validated at construction").1
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let plane = self.0.numel() / 3;
        &self.0.data()[c * plane..(c + 1) * plane]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f64 {
        self.0.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
