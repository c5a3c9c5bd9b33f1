//! In-memory multi-modal intensity volumes and label volumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `M` co-registered intensity volumes stored as `[M, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    data: Tensor<f32>,
}

impl MultiModalVolume {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::shape(
                "multimodal_volume",
                format!("expected [M,D,H,W], got {:?}", data.shape()),
            ));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn modalities(&self) -> usize {
        self.data.shape()[0]
    }

    /// `(D, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    /// Slice `z` of modality `m` as a row-major `H*W` slice.
    pub fn slice(&self, m: usize, z: usize) -> &[f32] {
        let (d, h, w) = self.dims();
        let plane = h * w;
        &self.data.data()[(m * d + z) * plane..][..plane]
    }

    /// Z-scores every modality independently over the whole volume.
    pub fn normalize(&mut self) {
        let m = self.modalities();
        let per = self.data.len() / m;
        for ch in self.data.data_mut().chunks_mut(per) {
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for v in ch.iter_mut() {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
}

/// Class ids over `D x H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Result<Self> {
        let (d, h, w) = dims;
        if d == 0 || h == 0 || w == 0 || data.len() != d * h * w {
            return Err(Error::shape(
                "label_volume",
                format!("dims {dims:?} with {} voxels", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.dims.1 * self.dims.2;
        &self.data[z * plane..][..plane]
    }

    /// Fails on the first voxel outside `0..classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange {
                label: label as usize,
                classes,
            }),
            None => Ok(()),
        }
    }
}
