use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelParams};
use crate::convlstm::Gate;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

fn he<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// A `shape[0] x prod(shape[1..])` matrix with orthonormal rows (or
/// orthonormal columns when it has more rows than columns), from modified
/// Gram-Schmidt over a Gaussian draw.
pub fn orthogonal<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let tall = rows > cols;
    let (n, len) = if tall { (cols, rows) } else { (rows, cols) };
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..n {
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = v.split_at_mut(i);
                let d: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                    *a -= d * b;
                }
            }
        }
        let norm = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in v[i].iter_mut() {
            *a /= norm;
        }
    }
    let data = if tall {
        (0..rows * cols)
            .map(|k| T::of(v[k % cols][k / cols]))
            .collect()
    } else {
        v.into_iter().flatten().map(T::of).collect()
    };
    Tensor::new(shape, data).expect("shape matches element count")
}

/// Deterministic initialization from `config.seed`: orthogonal convLSTM
/// kernels, He-normal everywhere else, forget-gate bias 1 and other biases 0.
pub fn init_params<T: Real>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ModelParams::<T>::skeleton(config);
    for stages in &mut p.encoders {
        for st in stages.iter_mut() {
            let s = st.kernel.shape().to_vec();
            st.kernel = he(&s, s[1] * 9, &mut rng);
        }
    }
    let m = config.modality_count();
    for c in &mut p.cmc {
        let s = c.weight.shape().to_vec();
        c.weight = he(&s, m, &mut rng);
    }
    for w in p
        .lstm
        .input_kernels
        .iter_mut()
        .chain(p.lstm.hidden_kernels.iter_mut())
    {
        let s = w.shape().to_vec();
        *w = orthogonal(&s, &mut rng);
    }
    *p.lstm.bias_mut(Gate::Forget) = Tensor::ones(&[p.lstm.hidden()]);
    for st in &mut p.decoder {
        let s = st.up_kernel.shape().to_vec();
        st.up_kernel = he(&s, s[0], &mut rng);
        let s = st.kernel.shape().to_vec();
        st.kernel = he(&s, s[1] * 9, &mut rng);
    }
    let s = p.classifier_kernel.shape().to_vec();
    p.classifier_kernel = he(&s, s[1], &mut rng);
    Ok(p)
}
