use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output of [`maxpool2x2`]: the pooled map plus, per output element, the
/// flat input index that won its window.
#[derive(Clone, Debug)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

/// Max over disjoint 2x2 windows. Ties go to the first maximum in row-major
/// scan order of the window.
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<PoolOutput<T>> {
    let (n, c, h, w) = input.dims4("maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(&[n, c, ho, wo], out)?,
        argmax,
    })
}

/// Routes each upstream gradient to its window's argmax.
pub fn maxpool2x2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("{} gradients for {} windows", grad_out.len(), argmax.len()),
        ));
    }
    let mut d = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(d)
}
