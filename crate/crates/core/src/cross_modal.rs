//! Modality stacking, cross-modality convolution (CMC) and multiplicative
//! multi-resolution fusion (MRF).
//!
//! Per-modality feature maps `[C,h,w]` are re-indexed into a stack
//! `[C,M,h,w]` so that the same channel of every modality sits side by side.
//! CMC then applies one length-`M` filter per channel stack (an `M x 1 x 1`
//! 3D kernel), producing `[C,h,w]`. A leading batch axis is allowed on all of
//! these: `[N,C,h,w]` maps stack into `[N,C,M,h,w]`.

use crate::error::{Error, Result};
use crate::ops::{elementwise_mul, elementwise_mul_backward};
use crate::tensor::{Real, Tensor};

/// Modalities stacked channel by channel: `[C,M,h,w]` or `[N,C,M,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalStack<T> {
    tensor: Tensor<T>,
}

impl<T: Real> CrossModalStack<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if !(4..=5).contains(&tensor.ndim()) {
            return Err(Error::shape(
                "cross_modal_stack",
                format!(
                    "expected [C,M,h,w] or [N,C,M,h,w], got {:?}",
                    tensor.shape()
                ),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn is_batched(&self) -> bool {
        self.tensor.ndim() == 5
    }

    /// `(N, C, M, h*w)` with `N = 1` for an unbatched stack.
    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.tensor.shape();
        match *s {
            [c, m, h, w] => (1, c, m, h * w),
            [n, c, m, h, w] => (n, c, m, h * w),
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn modality_count(&self) -> usize {
        self.dims().2
    }

    fn feature_shape(&self) -> Vec<usize> {
        let s = self.tensor.shape();
        let mut out = s.to_vec();
        out.remove(s.len() - 3);
        out
    }
}

/// `output[c,m,:,:] = input_m[c,:,:]` (with an optional leading batch axis).
pub fn stack_modalities<T: Real>(per_modality: &[&Tensor<T>]) -> Result<CrossModalStack<T>> {
    let first = per_modality
        .first()
        .ok_or_else(|| Error::InvalidArgument("no modalities to stack".into()))?;
    for t in per_modality {
        first.same_shape(t, "stack_modalities")?;
    }
    let (n, c, hw, shape) = match *first.shape() {
        [c, h, w] => (1, c, h * w, vec![c, per_modality.len(), h, w]),
        [n, c, h, w] => (n, c, h * w, vec![n, c, per_modality.len(), h, w]),
        _ => {
            return Err(Error::shape(
                "stack_modalities",
                format!("expected [C,h,w] or [N,C,h,w], got {:?}", first.shape()),
            ))
        }
    };
    let m = per_modality.len();
    let mut data = Vec::with_capacity(n * c * m * hw);
    for i in 0..n {
        for ch in 0..c {
            for t in per_modality {
                data.extend_from_slice(&t.data()[(i * c + ch) * hw..][..hw]);
            }
        }
    }
    Ok(CrossModalStack {
        tensor: Tensor::new(&shape, data)?,
    })
}

/// Inverse of [`stack_modalities`].
pub fn unstack_modalities<T: Real>(stack: &CrossModalStack<T>) -> Result<Vec<Tensor<T>>> {
    let (n, c, m, hw) = stack.dims();
    let shape = stack.feature_shape();
    let x = stack.tensor.data();
    let mut out: Vec<Vec<T>> = (0..m).map(|_| Vec::with_capacity(n * c * hw)).collect();
    for i in 0..n {
        for ch in 0..c {
            for (mi, dst) in out.iter_mut().enumerate() {
                dst.extend_from_slice(&x[((i * c + ch) * m + mi) * hw..][..hw]);
            }
        }
    }
    out.into_iter().map(|d| Tensor::new(&shape, d)).collect()
}

/// One length-`M` filter and a bias per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcParams<T> {
    /// `[C, M]`
    pub weight: Tensor<T>,
    /// `[C]`
    pub bias: Tensor<T>,
}

impl<T: Real> CmcParams<T> {
    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn modalities(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weights that copy modality `m` through unchanged.
    pub fn selector(channels: usize, modalities: usize, m: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[channels, modalities], |i| {
                if i % modalities == m {
                    T::ONE
                } else {
                    T::ZERO
                }
            }),
            bias: Tensor::zeros(&[channels]),
        }
    }
}

fn check_params<T: Real>(stack: &CrossModalStack<T>, params: &CmcParams<T>) -> Result<()> {
    let (_, c, m, _) = stack.dims();
    if params.weight.shape() != [c, m] || params.bias.shape() != [c] {
        return Err(Error::shape(
            "cmc",
            format!(
                "stack has C={c}, M={m}; weight {:?}, bias {:?}",
                params.weight.shape(),
                params.bias.shape()
            ),
        ));
    }
    Ok(())
}

/// `out[c,y,x] = sum_m weight[c,m] * stack[c,m,y,x] + bias[c]`.
///
/// The per-voxel products are summed in ascending order of value, which
/// makes the result independent of modality order bit for bit.
pub fn cmc_forward<T: Real>(
    stack: &CrossModalStack<T>,
    params: &CmcParams<T>,
) -> Result<Tensor<T>> {
    check_params(stack, params)?;
    let (n, c, m, hw) = stack.dims();
    let x = stack.tensor.data();
    let w = params.weight.data();
    let mut out = vec![T::ZERO; n * c * hw];
    let mut terms = vec![T::ZERO; m];
    for i in 0..n {
        for ch in 0..c {
            let b = params.bias[ch];
            let wrow = &w[ch * m..(ch + 1) * m];
            let base = (i * c + ch) * m * hw;
            let dst = &mut out[(i * c + ch) * hw..][..hw];
            for (p, o) in dst.iter_mut().enumerate() {
                for (mi, t) in terms.iter_mut().enumerate() {
                    *t = wrow[mi] * x[base + mi * hw + p];
                }
                terms
                    .sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc += t;
                }
                *o = acc + b;
            }
        }
    }
    let out = Tensor::new(&stack.feature_shape(), out)?;
    out.check_finite("cmc_forward")?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CmcGrads<T> {
    pub stack: CrossModalStack<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn cmc_backward<T: Real>(
    stack: &CrossModalStack<T>,
    params: &CmcParams<T>,
    grad_out: &Tensor<T>,
) -> Result<CmcGrads<T>> {
    check_params(stack, params)?;
    let (n, c, m, hw) = stack.dims();
    if grad_out.shape() != stack.feature_shape().as_slice() {
        return Err(Error::shape(
            "cmc_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let x = stack.tensor.data();
    let g = grad_out.data();
    let w = params.weight.data();
    let mut d_stack = vec![T::ZERO; x.len()];
    let mut d_w = vec![T::ZERO; c * m];
    let mut d_b = vec![T::ZERO; c];
    for i in 0..n {
        for ch in 0..c {
            let grow = &g[(i * c + ch) * hw..][..hw];
            d_b[ch] += grow.iter().copied().sum::<T>();
            for mi in 0..m {
                let off = ((i * c + ch) * m + mi) * hw;
                let wv = w[ch * m + mi];
                let mut acc = T::ZERO;
                for p in 0..hw {
                    d_stack[off + p] = grow[p] * wv;
                    acc += grow[p] * x[off + p];
                }
                d_w[ch * m + mi] += acc;
            }
        }
    }
    Ok(CmcGrads {
        stack: CrossModalStack {
            tensor: Tensor::new(stack.tensor.shape(), d_stack)?,
        },
        weight: Tensor::new(&[c, m], d_w)?,
        bias: Tensor::new(&[c], d_b)?,
    })
}

/// Multi-resolution fusion: elementwise product of an encoder-side CMC map
/// with the decoder map at the same scale.
pub fn mrf_fuse<T: Real>(cmc_map: &Tensor<T>, decoder_map: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise_mul(cmc_map, decoder_map)
}

/// Returns `(grad_cmc_map, grad_decoder_map)`.
pub fn mrf_fuse_backward<T: Real>(
    cmc_map: &Tensor<T>,
    decoder_map: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    elementwise_mul_backward(cmc_map, decoder_map, grad_out)
}
