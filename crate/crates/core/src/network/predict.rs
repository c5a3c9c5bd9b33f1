use super::{check_extent, forward, ModelParams};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Real, Tensor};
use crate::volume::{LabelVolume, MultiModalVolume};

/// Per-pixel argmax over the class axis of `[N,K,H,W]`; the lowest class id
/// wins ties.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = scores.dims4("argmax_classes")?;
    if k > 256 {
        return Err(Error::InvalidArgument(format!(
            "{k} classes do not fit u8 labels"
        )));
    }
    let hw = h * w;
    let s = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        let base = i * k * hw;
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = s[base + p];
            for c in 1..k {
                let v = s[base + c * hw + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Labels a whole volume slice by slice in eval mode, in non-overlapping
/// depth windows of `seq_len`. A short final window is padded by repeating
/// the last slice; the padding predictions are discarded.
pub fn predict_volume(
    params: &ModelParams<f32>,
    volume: &MultiModalVolume,
    seq_len: usize,
) -> Result<LabelVolume> {
    let (d, h, w) = volume.dims();
    let m = volume.modalities();
    if d == 0 {
        return Err(Error::InvalidArgument("volume has no slices".into()));
    }
    if seq_len == 0 {
        return Err(Error::InvalidArgument(
            "sequence length must be at least 1".into(),
        ));
    }
    check_extent("volume height", h)?;
    check_extent("volume width", w)?;
    let plane = h * w;
    let mut labels = Vec::with_capacity(d * plane);
    for start in (0..d).step_by(seq_len) {
        let mut data = Vec::with_capacity(seq_len * m * plane);
        for t in 0..seq_len {
            let z = (start + t).min(d - 1);
            for mi in 0..m {
                data.extend_from_slice(volume.slice(mi, z));
            }
        }
        let images = Tensor::new(&[1, seq_len, m, h, w], data)?;
        let logits = forward(params, &images, Mode::Eval)?.logits;
        let keep = seq_len.min(d - start);
        labels.extend_from_slice(&argmax_classes(&logits)?[..keep * plane]);
    }
    LabelVolume::new((d, h, w), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams<f32> {
        init_params(&ModelConfig {
            encoder_channels: vec![2, 2, 2, 2],
            input_height: 16,
            input_width: 16,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let s = Tensor::<f32>::new(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&s).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_logit_model_predicts_class_zero() {
        let mut p = tiny();
        p.classifier_kernel.data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = MultiModalVolume::new(Tensor::randn(&[4, 5, 16, 16], 1.0, &mut rng)).unwrap();
        let l = predict_volume(&p, &v, 3).unwrap();
        assert_eq!(l.dims(), (5, 16, 16));
        assert!(l.data().iter().all(|&c| c == 0));
    }

    /// Each slice's prediction equals running its own window directly.
    #[test]
    fn windows_tile_the_depth_axis() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = MultiModalVolume::new(Tensor::randn(&[4, 5, 16, 16], 1.0, &mut rng)).unwrap();
        let l = predict_volume(&p, &v, 3).unwrap();
        let window = |zs: [usize; 3]| {
            let mut data = Vec::new();
            for z in zs {
                for m in 0..4 {
                    data.extend_from_slice(v.slice(m, z));
                }
            }
            let x = Tensor::new(&[1, 3, 4, 16, 16], data).unwrap();
            argmax_classes(&forward(&p, &x, Mode::Eval).unwrap().logits).unwrap()
        };
        let first = window([0, 1, 2]);
        let last = window([3, 4, 4]);
        assert_eq!(&l.data()[..3 * 256], &first[..]);
        assert_eq!(&l.data()[3 * 256..], &last[..2 * 256]);
    }

    #[test]
    fn rejects_extent_not_divisible_by_sixteen() {
        let v = MultiModalVolume::new(Tensor::zeros(&[4, 2, 20, 16])).unwrap();
        assert!(predict_volume(&tiny(), &v, 3).is_err());
    }
}
