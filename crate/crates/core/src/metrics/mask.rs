use crate::error::{Error, Result};
use crate::ops::{lin, warp_tensor, DisplacementField, Interp};
use crate::tensor::Tensor;

/// Binary label volume on a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "mask buffer of length {} does not fit {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Contract(format!(
                "mask value {} at index {i} is not binary",
                data[i]
            )));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        BinaryMask::new(dims, vec![0; dims.iter().product()])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(u8::from(f(z, y, x)));
                }
            }
        }
        BinaryMask::new(dims, data)
    }

    /// `value > threshold` on a single-channel volume.
    pub fn threshold(volume: &Tensor, threshold: f64) -> Result<Self> {
        let (c, dims) = volume.shape().volume()?;
        if c != 1 {
            return Err(Error::shape(format!("threshold expects one channel, got {c}")));
        }
        BinaryMask::new(dims, volume.data().iter().map(|&v| u8::from(v > threshold)).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[lin(z, y, x, self.dims)] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `[1, D, H, W]` volume of zeros and ones.
    pub fn to_volume(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::from_vec([1, d, h, w], self.data.iter().map(|&v| f64::from(v)).collect()).expect("dims validated")
    }

    /// Nearest-neighbour warp of the mask.
    pub fn warp(&self, disp: &DisplacementField) -> Result<BinaryMask> {
        let warped = warp_tensor(&self.to_volume(), disp, Interp::Nearest)?;
        BinaryMask::threshold(&warped, 0.5)
    }

    pub(crate) fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "mask shapes {:?} and {:?} differ",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}
