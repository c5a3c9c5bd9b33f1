//! The standard set of checks: every layer primitive, the convLSTM step and
//! unroll, and an end-to-end probe through a small network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Differentiable, GradCheckOptions, GradCheckReport};
use crate::convlstm::{convlstm_sequence_backward, convlstm_unroll, ConvLstmParams, ConvLstmState};
use crate::cross_modal::{
    cmc_backward, cmc_forward, mrf_fuse, mrf_fuse_backward, CmcParams, CrossModalStack,
};
use crate::error::Result;
use crate::network::{forward, init_params, ModelConfig, ModelParams};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, elementwise_mul, elementwise_mul_backward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax_ce_backward,
    softmax_ce_loss, tanh, tanh_backward, BatchNormParams, Mode, Padding,
};
use crate::tensor::Tensor;

type Fwd = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;
type Bwd = Box<dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>>;

struct FnOp {
    name: String,
    inputs: Vec<String>,
    fwd: Fwd,
    bwd: Bwd,
}

impl Differentiable for FnOp {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn input_names(&self) -> Vec<String> {
        self.inputs.clone()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        (self.fwd)(inputs)
    }
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        (self.bwd)(inputs, grad_out)
    }
}

/// One operation with its inputs and finite-difference settings.
pub struct SuiteCase {
    op: Box<dyn Differentiable>,
    inputs: Vec<Tensor<f64>>,
    step_scale: f64,
    probe: Option<usize>,
}

impl SuiteCase {
    fn new(name: &str, inputs: Vec<(&str, Tensor<f64>)>, fwd: Fwd, bwd: Bwd) -> Self {
        let (names, inputs) = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).unzip();
        Self {
            op: Box::new(FnOp {
                name: name.to_string(),
                inputs: names,
                fwd,
                bwd,
            }),
            inputs,
            step_scale: 1e-4,
            probe: None,
        }
    }

    pub fn name(&self) -> String {
        self.op.name()
    }

    pub fn run(&self, tolerance: f64, seed: u64) -> GradCheckReport {
        grad_check(
            self.op.as_ref(),
            &self.inputs,
            GradCheckOptions {
                tolerance,
                step_scale: self.step_scale,
                probe: self.probe,
                seed,
            },
        )
    }
}

/// Values at least `margin` away from zero, so ReLU kinks sit outside the
/// finite-difference stencil.
fn off_zero(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn split(t: &Tensor<f64>, parts: usize) -> Result<Vec<Tensor<f64>>> {
    let per = t.shape()[0] / parts;
    (0..parts)
        .map(|i| {
            let rows: Vec<Tensor<f64>> =
                (i * per..(i + 1) * per).map(|r| t.batch_item(r)).collect();
            Tensor::concat0(&rows.iter().collect::<Vec<_>>())
        })
        .collect()
}

fn lstm_from(inputs: &[Tensor<f64>]) -> ConvLstmParams<f64> {
    ConvLstmParams {
        input_kernels: std::array::from_fn(|g| inputs[3 * g].clone()),
        hidden_kernels: std::array::from_fn(|g| inputs[3 * g + 1].clone()),
        biases: std::array::from_fn(|g| inputs[3 * g + 2].clone()),
    }
}

fn lstm_grads(p: ConvLstmParams<f64>) -> Vec<Tensor<f64>> {
    let ConvLstmParams {
        input_kernels,
        hidden_kernels,
        biases,
    } = p;
    input_kernels
        .into_iter()
        .zip(hidden_kernels)
        .zip(biases)
        .flat_map(|((x, h), b)| [x, h, b])
        .collect()
}

fn lstm_inputs(p: &ConvLstmParams<f64>) -> Vec<(&'static str, Tensor<f64>)> {
    const NAMES: [&str; 12] = [
        "w_xi", "w_hi", "b_i", "w_xf", "w_hf", "b_f", "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "b_o",
    ];
    NAMES.into_iter().zip(lstm_grads(p.clone())).collect()
}

fn random_lstm(rng: &mut ChaCha8Rng, cx: usize, ch: usize) -> ConvLstmParams<f64> {
    ConvLstmParams {
        input_kernels: std::array::from_fn(|_| Tensor::randn(&[ch, cx, 3, 3], 0.4, rng)),
        hidden_kernels: std::array::from_fn(|_| Tensor::randn(&[ch, ch, 3, 3], 0.4, rng)),
        biases: std::array::from_fn(|_| Tensor::randn(&[ch], 0.5, rng)),
    }
}

fn bn_params(inputs: &[Tensor<f64>]) -> BatchNormParams<f64> {
    let mut p = BatchNormParams::new(inputs[1].len());
    p.scale = inputs[1].clone();
    p.shift = inputs[2].clone();
    p
}

fn batchnorm_case(name: &str, mode: Mode, rng: &mut ChaCha8Rng) -> SuiteCase {
    let mut stats = BatchNormParams::<f64>::new(3);
    stats.running_mean = Tensor::randn(&[3], 0.5, rng);
    stats.running_var = Tensor::uniform(&[3], 0.5, 2.0, rng);
    let (rm, rv) = (stats.running_mean.clone(), stats.running_var.clone());
    let with_stats = move |inputs: &[Tensor<f64>]| {
        let mut p = bn_params(inputs);
        p.running_mean = rm.clone();
        p.running_var = rv.clone();
        p
    };
    let f2 = with_stats.clone();
    SuiteCase::new(
        name,
        vec![
            ("x", Tensor::randn(&[2, 3, 3, 4], 1.5, rng)),
            ("scale", Tensor::uniform(&[3], 0.5, 1.5, rng)),
            ("shift", Tensor::randn(&[3], 1.0, rng)),
        ],
        Box::new(move |x| batchnorm_forward(&x[0], &with_stats(x), mode).map(|(y, _)| y)),
        Box::new(move |x, g| {
            let p = f2(x);
            let (_, cache) = batchnorm_forward(&x[0], &p, mode)?;
            let gr = batchnorm_backward(&cache, &p, g)?;
            Ok(vec![gr.input, gr.scale, gr.shift])
        }),
    )
}

#[allow(clippy::type_complexity)]
fn unary(
    name: &str,
    x: Tensor<f64>,
    f: fn(&Tensor<f64>) -> Tensor<f64>,
    df: fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> SuiteCase {
    SuiteCase::new(
        name,
        vec![("x", x)],
        Box::new(move |x| Ok(f(&x[0]))),
        Box::new(move |x, g| Ok(vec![df(&x[0], &f(&x[0]), g)?])),
    )
}

/// Probes every learnable tensor of a small network through the weighted
/// cross-entropy loss in train mode.
fn end_to_end_case(rng: &mut ChaCha8Rng, seed: u64) -> SuiteCase {
    let cfg = ModelConfig {
        encoder_channels: vec![2, 3, 3, 4],
        input_height: 16,
        input_width: 16,
        seed,
        ..ModelConfig::default()
    };
    let mut base = init_params::<f64>(&cfg).expect("valid config");
    for c in &mut base.cmc {
        c.bias = Tensor::randn(c.bias.shape(), 0.1, rng);
    }
    let (b, t) = (1, 2);
    let images = Tensor::randn(&[b, t, cfg.modality_count(), 16, 16], 1.0, rng);
    let labels: Vec<u8> = (0..b * t * 256)
        .map(|i| ((i * 7 + i / 16) % 5) as u8)
        .collect();
    let weights = Tensor::new(&[5], vec![0.2, 1.0, 2.0, 1.5, 0.7]).expect("five weights");
    let names: Vec<String> = base.learnable().into_iter().map(|(n, _)| n).collect();
    let values: Vec<Tensor<f64>> = base
        .learnable()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();

    let rebuild = {
        let base = base.clone();
        move |xs: &[Tensor<f64>]| -> ModelParams<f64> {
            let mut p = base.clone();
            for ((_, dst), src) in p.learnable_mut().into_iter().zip(xs) {
                *dst = src.clone();
            }
            p
        }
    };
    let (rb, im, lb, w) = (
        rebuild.clone(),
        images.clone(),
        labels.clone(),
        weights.clone(),
    );
    let fwd: Fwd = Box::new(move |xs| {
        let f = forward(&rb(xs), &im, Mode::Train)?;
        Ok(Tensor::scalar(softmax_ce_loss(&f.logits, &lb, &w)?.loss))
    });
    let bwd: Bwd = Box::new(move |xs, g| {
        let p = rebuild(xs);
        let f = forward(&p, &images, Mode::Train)?;
        let ce = softmax_ce_loss(&f.logits, &labels, &weights)?;
        let dlogits = softmax_ce_backward(&ce.probs, &labels, &weights, g[0])?;
        let grads = f.backward(&p, &dlogits)?;
        Ok(grads
            .learnable()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect())
    });
    let mut case = SuiteCase::new(
        "end_to_end",
        names.iter().map(String::as_str).zip(values).collect(),
        fwd,
        bwd,
    );
    // a smaller stencil keeps ReLU and pooling switches out of the probes
    case.step_scale = 1e-6;
    case.probe = Some(3);
    case
}

/// Builds the suite for one seed; the same seed yields identical inputs.
pub fn layer_suite(seed: u64) -> Vec<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases = Vec::new();

    cases.push(SuiteCase::new(
        "conv2d",
        vec![
            ("x", Tensor::randn(&[2, 3, 5, 6], 1.0, rng)),
            ("kernel", Tensor::randn(&[4, 3, 3, 3], 0.5, rng)),
            ("bias", Tensor::randn(&[4], 0.5, rng)),
        ],
        Box::new(|x| conv2d(&x[0], &x[1], &x[2], Padding::Same)),
        Box::new(|x, g| {
            let r = conv2d_backward(&x[0], &x[1], Padding::Same, g)?;
            Ok(vec![r.input, r.kernel, r.bias])
        }),
    ));

    cases.push(SuiteCase::new(
        "conv_transpose2d",
        vec![
            ("x", Tensor::randn(&[2, 3, 3, 4], 1.0, rng)),
            ("kernel", Tensor::randn(&[3, 2, 2, 2], 0.5, rng)),
            ("bias", Tensor::randn(&[2], 0.5, rng)),
        ],
        Box::new(|x| conv_transpose2d(&x[0], &x[1], &x[2], 2)),
        Box::new(|x, g| {
            let r = conv_transpose2d_backward(&x[0], &x[1], 2, g)?;
            Ok(vec![r.input, r.kernel, r.bias])
        }),
    ));

    cases.push(SuiteCase::new(
        "maxpool2x2",
        vec![("x", Tensor::randn(&[2, 2, 4, 6], 1.0, rng))],
        Box::new(|x| maxpool2x2(&x[0]).map(|p| p.output)),
        Box::new(|x, g| {
            let p = maxpool2x2(&x[0])?;
            Ok(vec![maxpool2x2_backward(x[0].shape(), &p.argmax, g)?])
        }),
    ));

    cases.push(batchnorm_case("batchnorm_train", Mode::Train, rng));
    cases.push(batchnorm_case("batchnorm_eval", Mode::Eval, rng));

    cases.push(unary(
        "relu",
        off_zero(Tensor::randn(&[2, 3, 4, 4], 1.0, rng), 1e-2),
        relu,
        |x, _, g| relu_backward(x, g),
    ));
    cases.push(unary(
        "sigmoid",
        Tensor::randn(&[2, 3, 4, 4], 2.0, rng),
        sigmoid,
        |_, y, g| sigmoid_backward(y, g),
    ));
    cases.push(unary(
        "tanh",
        Tensor::randn(&[2, 3, 4, 4], 1.5, rng),
        tanh,
        |_, y, g| tanh_backward(y, g),
    ));

    cases.push(SuiteCase::new(
        "elementwise_mul",
        vec![
            ("a", Tensor::randn(&[2, 3, 4, 4], 1.0, rng)),
            ("b", Tensor::randn(&[2, 3, 4, 4], 1.0, rng)),
        ],
        Box::new(|x| elementwise_mul(&x[0], &x[1])),
        Box::new(|x, g| {
            let (a, b) = elementwise_mul_backward(&x[0], &x[1], g)?;
            Ok(vec![a, b])
        }),
    ));

    {
        let labels: Vec<u8> = (0..2 * 3 * 4).map(|i| ((i * 3 + 1) % 5) as u8).collect();
        let weights = Tensor::uniform(&[5], 0.2, 2.0, rng);
        let (l2, w2) = (labels.clone(), weights.clone());
        cases.push(SuiteCase::new(
            "softmax_ce",
            vec![("logits", Tensor::randn(&[2, 5, 3, 4], 2.0, rng))],
            Box::new(move |x| {
                Ok(Tensor::scalar(
                    softmax_ce_loss(&x[0], &labels, &weights)?.loss,
                ))
            }),
            Box::new(move |x, g| {
                let ce = softmax_ce_loss(&x[0], &l2, &w2)?;
                Ok(vec![softmax_ce_backward(&ce.probs, &l2, &w2, g[0])?])
            }),
        ));
    }

    cases.push(SuiteCase::new(
        "cmc_forward",
        vec![
            ("stack", Tensor::randn(&[2, 3, 4, 3, 3], 1.0, rng)),
            ("weight", Tensor::randn(&[3, 4], 0.7, rng)),
            ("bias", Tensor::randn(&[3], 0.5, rng)),
        ],
        Box::new(|x| {
            let stack = CrossModalStack::from_tensor(x[0].clone())?;
            cmc_forward(
                &stack,
                &CmcParams {
                    weight: x[1].clone(),
                    bias: x[2].clone(),
                },
            )
        }),
        Box::new(|x, g| {
            let stack = CrossModalStack::from_tensor(x[0].clone())?;
            let r = cmc_backward(
                &stack,
                &CmcParams {
                    weight: x[1].clone(),
                    bias: x[2].clone(),
                },
                g,
            )?;
            Ok(vec![r.stack.into_tensor(), r.weight, r.bias])
        }),
    ));

    cases.push(SuiteCase::new(
        "mrf_fuse",
        vec![
            ("cmc_map", Tensor::randn(&[2, 3, 4, 4], 1.0, rng)),
            ("decoder_map", Tensor::randn(&[2, 3, 4, 4], 1.0, rng)),
        ],
        Box::new(|x| mrf_fuse(&x[0], &x[1])),
        Box::new(|x, g| {
            let (a, b) = mrf_fuse_backward(&x[0], &x[1], g)?;
            Ok(vec![a, b])
        }),
    ));

    {
        let (cx, ch) = (2, 3);
        let lstm = random_lstm(rng, cx, ch);
        let mut inputs = vec![
            ("x", Tensor::randn(&[2, cx, 4, 4], 1.0, rng)),
            ("h_prev", Tensor::randn(&[2, ch, 4, 4], 0.5, rng)),
            ("c_prev", Tensor::randn(&[2, ch, 4, 4], 1.0, rng)),
        ];
        inputs.extend(lstm_inputs(&lstm));
        cases.push(SuiteCase::new(
            "convlstm_step",
            inputs,
            Box::new(|x| {
                let state = ConvLstmState {
                    h: x[1].clone(),
                    c: x[2].clone(),
                };
                let (hs, _) = convlstm_unroll(&x[..1], state, &lstm_from(&x[3..]))?;
                Ok(hs.into_iter().next().expect("one step"))
            }),
            Box::new(|x, g| {
                let p = lstm_from(&x[3..]);
                let state = ConvLstmState {
                    h: x[1].clone(),
                    c: x[2].clone(),
                };
                let (_, cache) = convlstm_unroll(&x[..1], state, &p)?;
                let r = convlstm_sequence_backward(&p, &cache, std::slice::from_ref(g))?;
                let mut out = r.inputs;
                out.push(r.initial_state.h);
                out.push(r.initial_state.c);
                out.extend(lstm_grads(r.params));
                Ok(out)
            }),
        ));
    }

    {
        let (cx, ch, steps) = (2, 2, 3);
        let lstm = random_lstm(rng, cx, ch);
        let mut inputs = vec![
            ("x1", Tensor::randn(&[1, cx, 4, 4], 1.0, rng)),
            ("x2", Tensor::randn(&[1, cx, 4, 4], 1.0, rng)),
            ("x3", Tensor::randn(&[1, cx, 4, 4], 1.0, rng)),
        ];
        inputs.extend(lstm_inputs(&lstm));
        let run = move |x: &[Tensor<f64>]| {
            let p = lstm_from(&x[steps..]);
            convlstm_unroll(&x[..steps], ConvLstmState::zeros(1, ch, 4, 4), &p).map(|r| (p, r))
        };
        let run2 = run;
        cases.push(SuiteCase::new(
            "convlstm_unroll3",
            inputs,
            Box::new(move |x| {
                let (_, (hs, _)) = run(x)?;
                Tensor::concat0(&hs.iter().collect::<Vec<_>>())
            }),
            Box::new(move |x, g| {
                let (p, (_, cache)) = run2(x)?;
                let r = convlstm_sequence_backward(&p, &cache, &split(g, steps)?)?;
                let mut out = r.inputs;
                out.extend(lstm_grads(r.params));
                Ok(out)
            }),
        ));
    }

    cases.push(end_to_end_case(rng, seed));
    cases
}

/// Seeds used by [`run_suite`] for a base seed.
pub const SUITE_SEEDS: u64 = 3;

/// Runs every case for `seed`, `seed + 1` and `seed + 2`.
pub fn run_suite(seed: u64, tolerance: f64) -> Vec<(u64, GradCheckReport)> {
    (0..SUITE_SEEDS)
        .map(|i| seed.wrapping_add(i))
        .flat_map(|s| {
            layer_suite(s)
                .into_iter()
                .map(move |c| (s, c.run(tolerance, s)))
        })
        .collect()
}
