use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Loss value and per-pixel class probabilities.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub probs: Tensor<T>,
}

/// Per-pixel softmax over `K` followed by class-weighted cross-entropy:
/// `loss = mean over pixels of weight[label] * -ln(prob[label])`.
///
/// `logits` is `[N,K,H,W]`, `labels` holds `N*H*W` class ids in `[N,H,W]`
/// order, `class_weights` is `[K]` and nonnegative.
pub fn softmax_ce_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    class_weights: &Tensor<T>,
) -> Result<CrossEntropy<T>> {
    let (n, k, h, w) = logits.dims4("softmax_ce_loss")?;
    check_args(n, k, h * w, labels, class_weights)?;
    let probs = softmax_channels(logits)?;
    let hw = h * w;
    let mut total = 0.0f64;
    for i in 0..n {
        for p in 0..hw {
            let y = labels[i * hw + p] as usize;
            let prob = probs[(i * k + y) * hw + p];
            total -= class_weights[y].to_f64() * prob.to_f64().max(f64::MIN_POSITIVE).ln();
        }
    }
    let loss = T::of(total / (n * hw) as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_ce_loss".into(),
        });
    }
    Ok(CrossEntropy { loss, probs })
}

fn check_args<T: Real>(
    n: usize,
    k: usize,
    hw: usize,
    labels: &[u8],
    class_weights: &Tensor<T>,
) -> Result<()> {
    if labels.len() != n * hw {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("{} labels for {} pixels", labels.len(), n * hw),
        ));
    }
    if class_weights.shape() != [k] {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("class weights {:?} for {k} classes", class_weights.shape()),
        ));
    }
    if class_weights
        .data()
        .iter()
        .any(|&w| !w.is_finite() || w < T::ZERO)
    {
        return Err(Error::InvalidArgument(
            "class weights must be nonnegative".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: k,
        });
    }
    Ok(())
}

/// Numerically stable softmax across the channel axis of `[N,K,H,W]`.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = logits.dims4("softmax")?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![T::ZERO; x.len()];
    for i in 0..n {
        let base = i * k * hw;
        for p in 0..hw {
            let mut m = x[base + p];
            for c in 1..k {
                m = m.max(x[base + c * hw + p]);
            }
            let mut z = T::ZERO;
            for c in 0..k {
                let e = (x[base + c * hw + p] - m).exp();
                out[base + c * hw + p] = e;
                z += e;
            }
            let inv = T::ONE / z;
            for c in 0..k {
                out[base + c * hw + p] *= inv;
            }
        }
    }
    let out = Tensor::new(logits.shape(), out)?;
    out.check_finite("softmax")?;
    Ok(out)
}

/// Gradient of the loss with respect to the logits, scaled by `upstream`.
pub fn softmax_ce_backward<T: Real>(
    probs: &Tensor<T>,
    labels: &[u8],
    class_weights: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>> {
    let (n, k, h, w) = probs.dims4("softmax_ce_backward")?;
    let hw = h * w;
    check_args(n, k, hw, labels, class_weights)?;
    let scale = upstream / T::of((n * hw) as f64);
    let mut d = probs.clone();
    for i in 0..n {
        for p in 0..hw {
            let y = labels[i * hw + p] as usize;
            let wy = class_weights[y] * scale;
            for c in 0..k {
                let idx = (i * k + c) * hw + p;
                let onehot = if c == y { T::ONE } else { T::ZERO };
                d[idx] = wy * (probs[idx] - onehot);
            }
        }
    }
    Ok(d)
}
