//! Forward pass with cached activations and the matching backward pass.
//!
//! A batch of `B` sequences of `T` slices is processed as `N = B*T` images in
//! sequence-major order (`n = b*T + t`); only the convLSTM regroups them by
//! time step.

use super::{check_extent, ModelParams, STAGES};
use crate::convlstm::{convlstm_sequence_backward, convlstm_sequence_forward, SequenceCache};
use crate::cross_modal::{
    cmc_backward, cmc_forward, mrf_fuse, mrf_fuse_backward, stack_modalities, unstack_modalities,
    CrossModalStack,
};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward,
    softmax_channels, BatchNormCache, Mode, Padding,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct EncCache<T> {
    input: Tensor<T>,
    /// batch-norm output, before ReLU
    pre: Tensor<T>,
    bn: BatchNormCache<T>,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug)]
struct DecCache<T> {
    input: Tensor<T>,
    up: Tensor<T>,
    /// MRF product, absent at full resolution
    fused: Option<Tensor<T>>,
    bn: BatchNormCache<T>,
    pre: Tensor<T>,
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub mode: Mode,
    batch: usize,
    steps: usize,
    enc: Vec<Vec<EncCache<T>>>,
    stacks: Vec<CrossModalStack<T>>,
    cmc_maps: Vec<Tensor<T>>,
    lstm: SequenceCache<T>,
    dec: Vec<DecCache<T>>,
    classifier_input: Tensor<T>,
    /// `[B*T, K, H, W]`
    pub logits: Tensor<T>,
}

/// Tags non-finite failures with the layer that produced them.
fn at<R>(r: Result<R>, layer: impl FnOnce() -> String) -> Result<R> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{}/{op}", layer()),
        },
        other => other,
    })
}

fn zero_bias<T: Real>(c: usize) -> Tensor<T> {
    Tensor::zeros(&[c])
}

/// Channel `m` of `[N,M,H,W]` as `[N,1,H,W]`.
fn channel<T: Real>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (n, mm, h, w) = x.dims4("channel")?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * mm + m) * hw..][..hw]);
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// Rows `b*steps + t` of an `[N,...]` tensor, for every `b`.
fn gather_step<T: Real>(x: &Tensor<T>, batch: usize, steps: usize, t: usize) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = (0..batch).map(|b| x.batch_item(b * steps + t)).collect();
    Tensor::concat0(&parts.iter().collect::<Vec<_>>())
}

/// Inverse of [`gather_step`] over all steps.
fn scatter_steps<T: Real>(per_step: &[Tensor<T>], batch: usize) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(batch * per_step.len());
    for b in 0..batch {
        for s in per_step {
            rows.push(s.batch_item(b));
        }
    }
    Tensor::concat0(&rows.iter().collect::<Vec<_>>())
}

#[allow(clippy::type_complexity)]
fn encode<T: Real>(
    params: &ModelParams<T>,
    m: usize,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Vec<EncCache<T>>, Vec<Tensor<T>>)> {
    let mut caches = Vec::with_capacity(STAGES);
    let mut pooled = Vec::with_capacity(STAGES);
    let mut input = x;
    for (s, st) in params.encoders[m].iter().enumerate() {
        let name = || format!("enc{m}.{s}");
        let conv = at(
            conv2d(
                &input,
                &st.kernel,
                &zero_bias(st.bn.channels()),
                Padding::Same,
            ),
            name,
        )?;
        let (pre, bn) = batchnorm_forward(&conv, &st.bn, mode)?;
        at(pre.check_finite("batchnorm"), name)?;
        let p = maxpool2x2(&relu(&pre))?;
        caches.push(EncCache {
            input,
            pre,
            bn,
            argmax: p.argmax,
        });
        pooled.push(p.output.clone());
        input = p.output;
    }
    Ok((caches, pooled))
}

/// Runs encoder `m` alone on `[N,1,H,W]` and returns its pooled feature map
/// at every scale.
pub fn encode_modality<T: Real>(
    params: &ModelParams<T>,
    m: usize,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    if m >= params.encoders.len() {
        return Err(Error::InvalidArgument(format!(
            "no encoder for modality {m}"
        )));
    }
    encode(params, m, x.clone(), mode).map(|(_, p)| p)
}

/// Forward pass over `images [B, T, M, H, W]`.
///
/// Train mode normalizes with batch statistics but leaves the running
/// statistics alone; fold them in with [`Forward::update_running_stats`].
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    let cfg = &params.config;
    let &[b, t, m, h, w] = images.shape() else {
        return Err(Error::shape(
            "forward",
            format!("expected [B,T,M,H,W], got {:?}", images.shape()),
        ));
    };
    if m != cfg.modality_count() {
        return Err(Error::shape(
            "forward",
            format!(
                "model has {} modalities, input has {m}",
                cfg.modality_count()
            ),
        ));
    }
    check_extent("height", h)?;
    check_extent("width", w)?;
    let n = b * t;
    let x = images.clone().reshape(&[n, m, h, w])?;

    let mut enc = Vec::with_capacity(m);
    let mut pooled = Vec::with_capacity(m);
    for mi in 0..m {
        let (c, p) = encode(params, mi, channel(&x, mi)?, mode)?;
        enc.push(c);
        pooled.push(p);
    }

    let mut stacks = Vec::with_capacity(STAGES);
    let mut cmc_maps = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let per: Vec<&Tensor<T>> = pooled.iter().map(|p| &p[s]).collect();
        let stack = stack_modalities(&per)?;
        cmc_maps.push(at(cmc_forward(&stack, &params.cmc[s]), || {
            format!("cmc{s}")
        })?);
        stacks.push(stack);
    }
    drop(pooled);

    let deepest = &cmc_maps[STAGES - 1];
    let xs = (0..t)
        .map(|ti| gather_step(deepest, b, t, ti))
        .collect::<Result<Vec<_>>>()?;
    let (hs, lstm) = at(convlstm_sequence_forward(&xs, &params.lstm), || {
        "lstm".into()
    })?;
    let mut u = scatter_steps(&hs, b)?;

    let mut dec = Vec::with_capacity(STAGES);
    for d in (0..STAGES).rev() {
        let st = &params.decoder[d];
        let name = || format!("dec{d}");
        let up = at(conv_transpose2d(&u, &st.up_kernel, &st.up_bias, 2), name)?;
        let fused = if d > 0 {
            Some(at(mrf_fuse(&cmc_maps[d - 1], &up), name)?)
        } else {
            None
        };
        let conv = at(
            conv2d(
                fused.as_ref().unwrap_or(&up),
                &st.kernel,
                &zero_bias(st.bn.channels()),
                Padding::Same,
            ),
            name,
        )?;
        let (pre, bn) = batchnorm_forward(&conv, &st.bn, mode)?;
        at(pre.check_finite("batchnorm"), name)?;
        let out = relu(&pre);
        dec.push(DecCache {
            input: u,
            up,
            fused,
            bn,
            pre,
        });
        u = out;
    }
    dec.reverse();

    let logits = at(
        conv2d(
            &u,
            &params.classifier_kernel,
            &params.classifier_bias,
            Padding::Same,
        ),
        || "classifier".into(),
    )?;
    Ok(Forward {
        mode,
        batch: b,
        steps: t,
        enc,
        stacks,
        cmc_maps,
        lstm,
        dec,
        classifier_input: u,
        logits,
    })
}

/// Per-slice class probabilities `[K,H,W]` for one sequence of `[M,H,W]`
/// slices.
pub fn forward_sequence<T: Real>(
    params: &ModelParams<T>,
    slices: &[Tensor<T>],
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    let first = slices.first().ok_or(Error::EmptySequence)?;
    let &[m, h, w] = first.shape() else {
        return Err(Error::shape(
            "forward_sequence",
            format!("expected [M,H,W], got {:?}", first.shape()),
        ));
    };
    let stacked = Tensor::concat0(&slices.iter().collect::<Vec<_>>())?;
    let images = stacked.reshape(&[1, slices.len(), m, h, w])?;
    let probs = forward(params, &images, mode)?.probs()?;
    let k = params.config.class_count;
    (0..slices.len())
        .map(|t| probs.batch_item(t).reshape(&[k, h, w]))
        .collect()
}

impl<T: Real> Forward<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Softmax over the class axis of [`Forward::logits`].
    pub fn probs(&self) -> Result<Tensor<T>> {
        softmax_channels(&self.logits)
    }

    /// CMC output at every scale, `[B*T, C_s, H/2^(s+1), W/2^(s+1)]`.
    pub fn cmc_maps(&self) -> &[Tensor<T>] {
        &self.cmc_maps
    }

    /// Folds this pass's batch statistics into the running statistics.
    pub fn update_running_stats(&self, params: &mut ModelParams<T>) {
        for (stages, caches) in params.encoders.iter_mut().zip(&self.enc) {
            for (st, c) in stages.iter_mut().zip(caches) {
                st.bn.update_running(&c.bn);
            }
        }
        for (st, c) in params.decoder.iter_mut().zip(&self.dec) {
            st.bn.update_running(&c.bn);
        }
    }

    /// Gradients of every learnable tensor given `d loss / d logits`.
    pub fn backward(
        &self,
        params: &ModelParams<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<ModelParams<T>> {
        let mut g = params.zeros_like();
        let cls = conv2d_backward(
            &self.classifier_input,
            &params.classifier_kernel,
            Padding::Same,
            grad_logits,
        )?;
        g.classifier_kernel = cls.kernel;
        g.classifier_bias = cls.bias;

        let mut du = cls.input;
        let mut dz: Vec<Option<Tensor<T>>> = vec![None; STAGES];
        for d in 0..STAGES {
            let c = &self.dec[d];
            let st = &params.decoder[d];
            let dpre = relu_backward(&c.pre, &du)?;
            let bn = batchnorm_backward(&c.bn, &st.bn, &dpre)?;
            let conv = conv2d_backward(
                c.fused.as_ref().unwrap_or(&c.up),
                &st.kernel,
                Padding::Same,
                &bn.input,
            )?;
            let dup = if d > 0 {
                let (dcmc, dup) = mrf_fuse_backward(&self.cmc_maps[d - 1], &c.up, &conv.input)?;
                dz[d - 1] = Some(dcmc);
                dup
            } else {
                conv.input
            };
            let upg = conv_transpose2d_backward(&c.input, &st.up_kernel, 2, &dup)?;
            let gs = &mut g.decoder[d];
            gs.bn.scale = bn.scale;
            gs.bn.shift = bn.shift;
            gs.kernel = conv.kernel;
            gs.up_kernel = upg.kernel;
            gs.up_bias = upg.bias;
            du = upg.input;
        }

        let dhs = (0..self.steps)
            .map(|t| gather_step(&du, self.batch, self.steps, t))
            .collect::<Result<Vec<_>>>()?;
        let lstm = convlstm_sequence_backward(&params.lstm, &self.lstm, &dhs)?;
        g.lstm = lstm.params;
        dz[STAGES - 1] = Some(scatter_steps(&lstm.inputs, self.batch)?);

        let m = params.encoders.len();
        let mut dpooled: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(STAGES); m];
        for (s, dzs) in dz.into_iter().enumerate() {
            let dzs = dzs.expect("every scale feeds the decoder or the convLSTM");
            let cg = cmc_backward(&self.stacks[s], &params.cmc[s], &dzs)?;
            g.cmc[s].weight = cg.weight;
            if params.config.cmc_bias {
                g.cmc[s].bias = cg.bias;
            }
            for (mi, t) in unstack_modalities(&cg.stack)?.into_iter().enumerate() {
                dpooled[mi].push(t);
            }
        }

        for (mi, mut per_scale) in dpooled.into_iter().enumerate() {
            let mut carry: Option<Tensor<T>> = None;
            for s in (0..STAGES).rev() {
                let c = &self.enc[mi][s];
                let st = &params.encoders[mi][s];
                let mut dp = std::mem::replace(&mut per_scale[s], Tensor::scalar(T::ZERO));
                if let Some(cy) = carry.take() {
                    dp.add_assign(&cy)?;
                }
                let dact = maxpool2x2_backward(c.pre.shape(), &c.argmax, &dp)?;
                let dpre = relu_backward(&c.pre, &dact)?;
                let bn = batchnorm_backward(&c.bn, &st.bn, &dpre)?;
                let conv = conv2d_backward(&c.input, &st.kernel, Padding::Same, &bn.input)?;
                let gs = &mut g.encoders[mi][s];
                gs.kernel = conv.kernel;
                gs.bn.scale = bn.scale;
                gs.bn.shift = bn.shift;
                if s > 0 {
                    carry = Some(conv.input);
                }
            }
        }
        Ok(g)
    }
}
