//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Folds the batch statistics of a train-mode pass into the running ones.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::of(self.momentum);
        let one_minus = T::of(1.0 - self.momentum);
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + one_minus * cache.batch_mean[c];
            self.running_var[c] = m * self.running_var[c] + one_minus * cache.batch_var[c];
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Normalizes without touching `params`; pair with
/// [`BatchNormParams::update_running`] in training.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if c != params.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, params {}", params.channels()),
        ));
    }
    if params.epsilon.is_nan() || params.epsilon <= 0.0 {
        return Err(Error::InvalidArgument(
            "batchnorm epsilon must be > 0".into(),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    if mode == Mode::Train && count < 2 {
        return Err(Error::InvalidArgument(
            "train-mode batchnorm needs at least two values per channel".into(),
        ));
    }
    let x = input.data();
    let mut batch_mean = vec![T::ZERO; c];
    let mut batch_var = vec![T::ZERO; c];
    let mut inv_std = vec![T::ZERO; c];
    for ch in 0..c {
        let var = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for i in 0..n {
                    sum += x[(i * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| v.to_f64())
                        .sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for i in 0..n {
                    sq += x[(i * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                batch_mean[ch] = T::of(mean);
                batch_var[ch] = T::of(var);
                T::of(var)
            }
            Mode::Eval => params.running_var[ch],
        };
        inv_std[ch] = T::ONE / (var + T::of(params.epsilon)).sqrt();
    }
    let mut normalized = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let mean = match mode {
                Mode::Train => batch_mean[ch],
                Mode::Eval => params.running_mean[ch],
            };
            let (g, b, s) = (params.scale[ch], params.shift[ch], inv_std[ch]);
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                let xh = (x[j] - mean) * s;
                normalized[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    let out = Tensor::new(input.shape(), out)?;
    out.check_finite("batchnorm")?;
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Normalizes and, in train mode, updates the running statistics.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (out, cache) = batchnorm_forward(input, params, mode)?;
    params.update_running(&cache);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    cache
        .normalized
        .same_shape(grad_out, "batchnorm_backward")?;
    let (n, c, h, w) = grad_out.dims4("batchnorm_backward")?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut d_scale = vec![T::ZERO; c];
    let mut d_shift = vec![T::ZERO; c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                sdy += dy[j].to_f64();
                sdyx += (dy[j] * xh[j]).to_f64();
            }
        }
        d_shift[ch] = T::of(sdy);
        d_scale[ch] = T::of(sdyx);
    }
    let mut dx = vec![T::ZERO; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let k = params.scale[ch] * cache.inv_std[ch];
            let off = (i * c + ch) * hw;
            match cache.mode {
                Mode::Train => {
                    let mean_dy = T::of(d_shift[ch].to_f64() / m);
                    let mean_dyx = T::of(d_scale[ch].to_f64() / m);
                    for j in off..off + hw {
                        dx[j] = k * (dy[j] - mean_dy - xh[j] * mean_dyx);
                    }
                }
                Mode::Eval => {
                    for j in off..off + hw {
                        dx[j] = k * dy[j];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        scale: Tensor::new(&[c], d_scale)?,
        shift: Tensor::new(&[c], d_shift)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let mut p = BatchNormParams::new(3);
        let y = batchnorm(&x, &mut p, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| {
                    y.data()[(i * 3 + ch) * 25..][..25]
                        .iter()
                        .map(|&v| v as f64)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        // running stats moved toward the batch statistics
        assert!(p.running_mean[0] > 0.5);
    }

    #[test]
    fn eval_mode_with_unit_running_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let mut p = BatchNormParams::new(2);
        let y = batchnorm(&x, &mut p, Mode::Eval).unwrap();
        let s = 1.0 / (1.0 + DEFAULT_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(p.running_mean, Tensor::zeros(&[2]));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[3, 2, 4, 4], 2.0, &mut rng);
        let mut p = BatchNormParams::<f32>::new(2);
        p.scale = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        p.shift = Tensor::new(&[2], vec![0.25, 2.0]).unwrap();
        let y = batchnorm(&x, &mut p.clone(), Mode::Train).unwrap();
        for ch in 0..2 {
            let idx: Vec<usize> = (0..3)
                .flat_map(|i| (0..16).map(move |j| (i * 2 + ch) * 16 + j))
                .collect();
            let mean = idx.iter().map(|&j| x[j] as f64).sum::<f64>() / idx.len() as f64;
            let var = idx
                .iter()
                .map(|&j| (x[j] as f64 - mean).powi(2))
                .sum::<f64>()
                / idx.len() as f64;
            for &j in &idx {
                let want = p.scale[ch] as f64 * (x[j] as f64 - mean)
                    / (var + DEFAULT_EPSILON).sqrt()
                    + p.shift[ch] as f64;
                assert!((y[j] as f64 - want).abs() < 1e-5, "{} vs {want}", y[j]);
            }
        }
    }

    #[test]
    fn constant_channel_does_not_divide_by_zero() {
        let x = Tensor::<f32>::full(&[2, 1, 2, 2], 3.0);
        let mut p = BatchNormParams::new(1);
        let y = batchnorm(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_train_mode_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(batchnorm(&x, &mut BatchNormParams::new(1), Mode::Train).is_err());
        assert!(batchnorm(&x, &mut BatchNormParams::new(1), Mode::Eval).is_ok());
    }
}
