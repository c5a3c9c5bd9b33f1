//! Convolutional LSTM cell and its unroll over a slice sequence.
//!
//! ```text
//! i_t = sigmoid(x_t * W_xi + h_{t-1} * W_hi + b_i)
//! f_t = sigmoid(x_t * W_xf + h_{t-1} * W_hf + b_f)
//! c_t = c_{t-1} o f_t + i_t o tanh(x_t * W_xc + h_{t-1} * W_hc + b_c)
//! o_t = sigmoid(x_t * W_xo + h_{t-1} * W_ho + b_o)
//! h_t = o_t o tanh(c_t)
//! ```
//!
//! `*` is a same-padded convolution, `o` the Hadamard product. No peepholes.
//! Tensors carry a batch axis: `x_t` is `[B,Cx,h,w]`, state is `[B,Ch,h,w]`.

use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward, sigmoid_scalar, Padding};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

    fn suffix(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Cell => "c",
            Gate::Output => "o",
        }
    }
}

/// Input-to-state and state-to-state kernels plus biases for each gate,
/// indexed in [`Gate::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<T> {
    /// `W_x*`: `[Ch, Cx, k, k]`
    pub input_kernels: [Tensor<T>; 4],
    /// `W_h*`: `[Ch, Ch, k, k]`
    pub hidden_kernels: [Tensor<T>; 4],
    /// `b_*`: `[Ch]`
    pub biases: [Tensor<T>; 4],
}

impl<T: Real> ConvLstmParams<T> {
    pub fn zeros(input_channels: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            input_kernels: std::array::from_fn(|_| {
                Tensor::zeros(&[hidden, input_channels, kernel, kernel])
            }),
            hidden_kernels: std::array::from_fn(|_| {
                Tensor::zeros(&[hidden, hidden, kernel, kernel])
            }),
            biases: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.biases[0].len()
    }

    pub fn input_channels(&self) -> usize {
        self.input_kernels[0].shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.input_kernels[0].shape()[2]
    }

    pub fn bias(&self, gate: Gate) -> &Tensor<T> {
        &self.biases[gate as usize]
    }

    pub fn bias_mut(&mut self, gate: Gate) -> &mut Tensor<T> {
        &mut self.biases[gate as usize]
    }

    /// `(name, tensor)` for every learnable tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(12);
        for g in Gate::ALL {
            out.push((
                format!("w_x{}", g.suffix()),
                &self.input_kernels[g as usize],
            ));
            out.push((
                format!("w_h{}", g.suffix()),
                &self.hidden_kernels[g as usize],
            ));
            out.push((format!("b_{}", g.suffix()), &self.biases[g as usize]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(12);
        let Self {
            input_kernels,
            hidden_kernels,
            biases,
        } = self;
        for ((x, h), b) in input_kernels
            .iter_mut()
            .zip(hidden_kernels.iter_mut())
            .zip(biases.iter_mut())
        {
            out.push(x);
            out.push(h);
            out.push(b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let (ch, cx, k) = (self.hidden(), self.input_channels(), self.kernel_size());
        if k % 2 == 0 {
            return Err(Error::shape(
                "convlstm",
                format!("kernel size {k} must be odd"),
            ));
        }
        for g in 0..4 {
            if self.input_kernels[g].shape() != [ch, cx, k, k]
                || self.hidden_kernels[g].shape() != [ch, ch, k, k]
                || self.biases[g].shape() != [ch]
            {
                return Err(Error::shape(
                    "convlstm",
                    "all eight kernels must share spatial size and hidden channel count",
                ));
            }
        }
        Ok(())
    }

    /// Gate kernels fused along the output-channel axis: `([4Ch,Cx,k,k], [4Ch,Ch,k,k], [4Ch])`.
    fn fused(&self) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let wx = Tensor::concat0(&self.input_kernels.iter().collect::<Vec<_>>())?;
        let wh = Tensor::concat0(&self.hidden_kernels.iter().collect::<Vec<_>>())?;
        let b = Tensor::concat0(&self.biases.iter().collect::<Vec<_>>())?;
        Ok((wx, wh, b))
    }
}

/// Hidden and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(batch: usize, hidden: usize, height: usize, width: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden, height, width]),
            c: Tensor::zeros(&[batch, hidden, height, width]),
        }
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    /// sigmoid/tanh outputs laid out like the fused pre-activation `[B,4Ch,h,w]`
    gates: Tensor<T>,
    tanh_c: Tensor<T>,
}

struct Fused<T> {
    wx: Tensor<T>,
    wh: Tensor<T>,
    b: Tensor<T>,
    zero_bias: Tensor<T>,
}

impl<T: Real> Fused<T> {
    fn new(params: &ConvLstmParams<T>) -> Result<Self> {
        params.validate()?;
        let (wx, wh, b) = params.fused()?;
        let zero_bias = Tensor::zeros(&[b.len()]);
        Ok(Self {
            wx,
            wh,
            b,
            zero_bias,
        })
    }
}

fn step_inner<T: Real>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    fused: &Fused<T>,
    ch: usize,
) -> Result<(ConvLstmState<T>, StepCache<T>)> {
    let (b, _, hs, ws) = x.dims4("convlstm_step")?;
    state.h.same_shape(&state.c, "convlstm_step")?;
    if state.h.shape() != [b, ch, hs, ws] {
        return Err(Error::shape(
            "convlstm_step",
            format!("input {:?} vs state {:?}", x.shape(), state.h.shape()),
        ));
    }
    let mut pre = conv2d(x, &fused.wx, &fused.b, Padding::Same)?;
    pre.add_assign(&conv2d(
        &state.h,
        &fused.wh,
        &fused.zero_bias,
        Padding::Same,
    )?)?;
    let plane = hs * ws;
    let block = ch * plane;
    let mut gates = pre;
    let mut c = vec![T::ZERO; b * block];
    let mut tanh_c = vec![T::ZERO; b * block];
    let mut h = vec![T::ZERO; b * block];
    for n in 0..b {
        let g = &mut gates.data_mut()[n * 4 * block..(n + 1) * 4 * block];
        let (ig, rest) = g.split_at_mut(block);
        let (fg, rest) = rest.split_at_mut(block);
        let (cg, og) = rest.split_at_mut(block);
        let cp = &state.c.data()[n * block..(n + 1) * block];
        for j in 0..block {
            let i_t = sigmoid_scalar(ig[j]);
            let f_t = sigmoid_scalar(fg[j]);
            let g_t = cg[j].tanh();
            let o_t = sigmoid_scalar(og[j]);
            ig[j] = i_t;
            fg[j] = f_t;
            cg[j] = g_t;
            og[j] = o_t;
            let c_t = cp[j] * f_t + i_t * g_t;
            let tc = c_t.tanh();
            c[n * block + j] = c_t;
            tanh_c[n * block + j] = tc;
            h[n * block + j] = o_t * tc;
        }
    }
    let shape = [b, ch, hs, ws];
    let next = ConvLstmState {
        h: Tensor::new(&shape, h)?,
        c: Tensor::new(&shape, c)?,
    };
    next.h.check_finite("convlstm_step")?;
    next.c.check_finite("convlstm_step")?;
    let cache = StepCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates,
        tanh_c: Tensor::new(&shape, tanh_c)?,
    };
    Ok((next, cache))
}

/// One recurrence step. Returns `h_t` and the next state.
pub fn convlstm_step<T: Real>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(Tensor<T>, ConvLstmState<T>)> {
    let fused = Fused::new(params)?;
    let (next, _) = step_inner(x, state, &fused, params.hidden())?;
    Ok((next.h.clone(), next))
}

/// Caches of a full unroll.
#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    steps: Vec<StepCache<T>>,
}

/// Unrolls over `xs` from a zero state with shared parameters, returning
/// every `h_t` along with the caches needed by
/// [`convlstm_sequence_backward`].
pub fn convlstm_sequence_forward<T: Real>(
    xs: &[Tensor<T>],
    params: &ConvLstmParams<T>,
) -> Result<(Vec<Tensor<T>>, SequenceCache<T>)> {
    let first = xs.first().ok_or(Error::EmptySequence)?;
    let (b, _, hs, ws) = first.dims4("convlstm_sequence")?;
    convlstm_unroll(xs, ConvLstmState::zeros(b, params.hidden(), hs, ws), params)
}

/// [`convlstm_sequence_forward`] from an arbitrary initial state.
pub fn convlstm_unroll<T: Real>(
    xs: &[Tensor<T>],
    initial: ConvLstmState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(Vec<Tensor<T>>, SequenceCache<T>)> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let fused = Fused::new(params)?;
    let mut state = initial;
    let mut hs_out = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = step_inner(x, &state, &fused, params.hidden())?;
        hs_out.push(next.h.clone());
        steps.push(cache);
        state = next;
    }
    Ok((hs_out, SequenceCache { steps }))
}

pub fn convlstm_sequence<T: Real>(
    xs: &[Tensor<T>],
    params: &ConvLstmParams<T>,
) -> Result<Vec<Tensor<T>>> {
    convlstm_sequence_forward(xs, params).map(|(hs, _)| hs)
}

/// Gradients of an unroll: one per input step, the initial state, and
/// parameter gradients accumulated over time.
#[derive(Clone, Debug)]
pub struct ConvLstmGrads<T> {
    pub inputs: Vec<Tensor<T>>,
    pub initial_state: ConvLstmState<T>,
    pub params: ConvLstmParams<T>,
}

/// Back-propagation through time given `d loss / d h_t` for every step.
pub fn convlstm_sequence_backward<T: Real>(
    params: &ConvLstmParams<T>,
    cache: &SequenceCache<T>,
    grad_hs: &[Tensor<T>],
) -> Result<ConvLstmGrads<T>> {
    if grad_hs.len() != cache.steps.len() {
        return Err(Error::shape(
            "convlstm_sequence_backward",
            format!(
                "{} gradients for {} steps",
                grad_hs.len(),
                cache.steps.len()
            ),
        ));
    }
    let fused = Fused::new(params)?;
    let ch = params.hidden();
    let mut d_wx = Tensor::zeros_like(&fused.wx);
    let mut d_wh = Tensor::zeros_like(&fused.wh);
    let mut d_b = Tensor::zeros_like(&fused.b);
    let mut d_inputs = vec![None; cache.steps.len()];
    let mut dh_next: Option<Tensor<T>> = None;
    let mut dc_next: Option<Tensor<T>> = None;
    for t in (0..cache.steps.len()).rev() {
        let s = &cache.steps[t];
        let (b, _, hs, ws) = s.x.dims4("convlstm_sequence_backward")?;
        let block = ch * hs * ws;
        let mut dh = grad_hs[t].clone();
        s.h_prev.same_shape(&dh, "convlstm_sequence_backward")?;
        if let Some(d) = &dh_next {
            dh.add_assign(d)?;
        }
        let mut d_pre = Tensor::zeros(s.gates.shape());
        let mut dc_prev = Tensor::zeros_like(&s.c_prev);
        for n in 0..b {
            let g = &s.gates.data()[n * 4 * block..(n + 1) * 4 * block];
            let (ig, fg, cg, og) = (
                &g[..block],
                &g[block..2 * block],
                &g[2 * block..3 * block],
                &g[3 * block..],
            );
            let dp = &mut d_pre.data_mut()[n * 4 * block..(n + 1) * 4 * block];
            for j in 0..block {
                let k = n * block + j;
                let tc = s.tanh_c[k];
                let dh_k = dh[k];
                let mut dc = dh_k * og[j] * (T::ONE - tc * tc);
                if let Some(d) = &dc_next {
                    dc += d[k];
                }
                let (i_t, f_t, g_t, o_t) = (ig[j], fg[j], cg[j], og[j]);
                dp[j] = dc * g_t * i_t * (T::ONE - i_t);
                dp[block + j] = dc * s.c_prev[k] * f_t * (T::ONE - f_t);
                dp[2 * block + j] = dc * i_t * (T::ONE - g_t * g_t);
                dp[3 * block + j] = dh_k * tc * o_t * (T::ONE - o_t);
                dc_prev[k] = dc * f_t;
            }
        }
        let gx = conv2d_backward(&s.x, &fused.wx, Padding::Same, &d_pre)?;
        let gh = conv2d_backward(&s.h_prev, &fused.wh, Padding::Same, &d_pre)?;
        d_wx.add_assign(&gx.kernel)?;
        d_wh.add_assign(&gh.kernel)?;
        d_b.add_assign(&gx.bias)?;
        d_inputs[t] = Some(gx.input);
        dh_next = Some(gh.input);
        dc_next = Some(dc_prev);
    }
    let split = |fusedt: &Tensor<T>, like: &[Tensor<T>; 4]| -> Result<[Tensor<T>; 4]> {
        let per = like[0].len();
        let parts: Vec<Tensor<T>> = (0..4)
            .map(|g| {
                Tensor::new(
                    like[g].shape(),
                    fusedt.data()[g * per..(g + 1) * per].to_vec(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(parts.try_into().expect("four gates"))
    };
    Ok(ConvLstmGrads {
        inputs: d_inputs
            .into_iter()
            .map(|d| d.expect("every step visited"))
            .collect(),
        initial_state: ConvLstmState {
            h: dh_next.expect("at least one step"),
            c: dc_next.expect("at least one step"),
        },
        params: ConvLstmParams {
            input_kernels: split(&d_wx, &params.input_kernels)?,
            hidden_kernels: split(&d_wh, &params.hidden_kernels)?,
            biases: split(&d_b, &params.biases)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, cx: usize, ch: usize, k: usize, std: f64) -> ConvLstmParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvLstmParams {
            input_kernels: std::array::from_fn(|_| Tensor::randn(&[ch, cx, k, k], std, &mut rng)),
            hidden_kernels: std::array::from_fn(|_| Tensor::randn(&[ch, ch, k, k], std, &mut rng)),
            biases: std::array::from_fn(|_| Tensor::randn(&[ch], std, &mut rng)),
        }
    }

    #[test]
    fn zero_everything_gives_exact_zero() {
        let p = random_params(1, 3, 4, 3, 1.0);
        let p = ConvLstmParams {
            biases: std::array::from_fn(|_| Tensor::zeros(&[4])),
            ..p
        };
        let x = Tensor::<f64>::zeros(&[2, 3, 5, 5]);
        let (h, next) = convlstm_step(&x, &ConvLstmState::zeros(2, 4, 5, 5), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_holds_memory() {
        let mut p = ConvLstmParams::<f64>::zeros(2, 3, 3);
        *p.bias_mut(Gate::Forget) = Tensor::full(&[3], 40.0);
        *p.bias_mut(Gate::Input) = Tensor::full(&[3], -40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c0 = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let state = ConvLstmState {
            h: Tensor::zeros(&[1, 3, 4, 4]),
            c: c0.clone(),
        };
        let (_, next) = convlstm_step(&Tensor::zeros(&[1, 2, 4, 4]), &state, &p).unwrap();
        for (a, b) in next.c.data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    /// 1x1 kernels on a 1x1 map reduce to the scalar LSTM recurrence.
    #[test]
    fn matches_scalar_recurrence() {
        let w = [0.5, -0.3, 0.8, 1.1]; // input weights i,f,c,o
        let u = [0.2, 0.7, -0.4, 0.3]; // hidden weights
        let bias = [0.1, 1.0, -0.2, 0.05];
        let p = ConvLstmParams {
            input_kernels: std::array::from_fn(|g| Tensor::full(&[1, 1, 1, 1], w[g])),
            hidden_kernels: std::array::from_fn(|g| Tensor::full(&[1, 1, 1, 1], u[g])),
            biases: std::array::from_fn(|g| Tensor::full(&[1], bias[g])),
        };
        let xs = [0.9, -1.2, 0.3, 2.0, -0.5];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut want = Vec::new();
        for &x in &xs {
            let i = sig(w[0] * x + u[0] * h + bias[0]);
            let f = sig(w[1] * x + u[1] * h + bias[1]);
            let g = (w[2] * x + u[2] * h + bias[2]).tanh();
            let o = sig(w[3] * x + u[3] * h + bias[3]);
            c = c * f + i * g;
            h = o * c.tanh();
            want.push(h);
        }
        let inputs: Vec<Tensor<f64>> = xs.iter().map(|&x| Tensor::full(&[1, 1, 1, 1], x)).collect();
        let got = convlstm_sequence(&inputs, &p).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g[0] - w).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let p = random_params(3, 2, 3, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let seq = convlstm_sequence(std::slice::from_ref(&x), &p).unwrap();
        let (h, _) = convlstm_step(&x, &ConvLstmState::zeros(1, 3, 4, 4), &p).unwrap();
        assert_eq!(seq[0], h);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let p = ConvLstmParams::<f32>::zeros(1, 1, 3);
        assert!(matches!(
            convlstm_sequence(&[], &p),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn state_bounds_hold() {
        let p = random_params(5, 2, 3, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = ConvLstmState::zeros(1, 3, 4, 4);
        let fused = Fused::new(&p).unwrap();
        for _ in 0..6 {
            let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let (next, cache) = step_inner(&x, &state, &fused, 3).unwrap();
            assert!(cache.gates.data().iter().all(|&v| v > -1.0 && v < 1.0));
            for (a, b) in next.c.data().iter().zip(state.c.data()) {
                assert!(a.abs() <= b.abs() + 1.0);
            }
            state = next;
        }
    }

    #[test]
    fn parameter_count_is_independent_of_length() {
        let p = ConvLstmParams::<f32>::zeros(8, 8, 3);
        let count = p.parameter_count();
        assert_eq!(count, 4 * (8 * 8 * 9 + 8 * 8 * 9 + 8));
        for t in [1, 3, 5] {
            let xs = vec![Tensor::zeros(&[1, 8, 4, 4]); t];
            convlstm_sequence(&xs, &p).unwrap();
            assert_eq!(p.parameter_count(), count);
        }
    }
}
