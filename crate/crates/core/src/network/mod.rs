//! The segmentation network: one encoder per modality, cross-modality
//! convolution at every scale, a convLSTM at the bottleneck and a decoder
//! that fuses each scale's CMC map multiplicatively.

mod forward;
mod init;
mod predict;

use std::fmt::Write as _;

use crate::config::{join_list, parse_entries, parse_list, parse_value, Entry};
use crate::convlstm::ConvLstmParams;
use crate::cross_modal::CmcParams;
use crate::error::{Error, FormatError, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Real, Tensor};

pub use forward::{encode_modality, forward, forward_sequence, Forward};
pub use init::{init_params, orthogonal};
pub use predict::{argmax_classes, predict_volume};

/// Number of pooling stages; inputs must be divisible by `2^STAGES`.
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Modality names in input channel order.
    pub modalities: Vec<String>,
    pub class_count: usize,
    /// Encoder width per stage; decoder widths mirror these.
    pub encoder_channels: Vec<usize>,
    pub input_height: usize,
    pub input_width: usize,
    pub sequence_length: usize,
    pub convlstm_kernel: usize,
    /// When false the CMC bias stays at zero and receives no gradient.
    pub cmc_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: ["flair", "t2", "t1", "t1c"].map(String::from).to_vec(),
            class_count: 5,
            encoder_channels: vec![8, 16, 32, 64],
            input_height: 64,
            input_width: 64,
            sequence_length: 3,
            convlstm_kernel: 3,
            cmc_bias: true,
            seed: 0,
        }
    }
}

pub const MODEL_KEYS: [&str; 9] = [
    "modalities",
    "class_count",
    "encoder_channels",
    "input_height",
    "input_width",
    "sequence_length",
    "convlstm_kernel",
    "cmc_bias",
    "seed",
];

impl ModelConfig {
    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.is_empty() || m.contains([',', '#', '=']) || self.modalities[..i].contains(m) {
                return bad(format!("invalid or repeated modality name `{m}`"));
            }
        }
        if !(2..=256).contains(&self.class_count) {
            return bad(format!(
                "class_count must be in 2..=256, got {}",
                self.class_count
            ));
        }
        if self.encoder_channels.len() != STAGES || self.encoder_channels.contains(&0) {
            return bad(format!(
                "encoder_channels needs {STAGES} positive widths, got {:?}",
                self.encoder_channels
            ));
        }
        check_extent("input_height", self.input_height)?;
        check_extent("input_width", self.input_width)?;
        if self.sequence_length == 0 {
            return bad("sequence_length must be at least 1".into());
        }
        if self.convlstm_kernel.is_multiple_of(2) {
            return bad(format!(
                "convlstm_kernel must be odd, got {}",
                self.convlstm_kernel
            ));
        }
        Ok(())
    }

    /// Applies one assignment. Returns `false` for keys this type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, FormatError> {
        match key {
            "modalities" => self.modalities = parse_list(key, value)?,
            "class_count" => self.class_count = parse_value(key, value)?,
            "encoder_channels" => self.encoder_channels = parse_list(key, value)?,
            "input_height" => self.input_height = parse_value(key, value)?,
            "input_width" => self.input_width = parse_value(key, value)?,
            "sequence_length" => self.sequence_length = parse_value(key, value)?,
            "convlstm_kernel" => self.convlstm_kernel = parse_value(key, value)?,
            "cmc_bias" => self.cmc_bias = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key = value` text, keys in [`MODEL_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "modalities = {}", self.modalities.join(","));
        let _ = writeln!(s, "class_count = {}", self.class_count);
        let _ = writeln!(
            s,
            "encoder_channels = {}",
            join_list(&self.encoder_channels)
        );
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "sequence_length = {}", self.sequence_length);
        let _ = writeln!(s, "convlstm_kernel = {}", self.convlstm_kernel);
        let _ = writeln!(s, "cmc_bias = {}", self.cmc_bias);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parses text produced by [`ModelConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> std::result::Result<Self, FormatError> {
        let mut cfg = Self::default();
        for Entry { line, key, value } in parse_entries(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(FormatError::Config(format!(
                    "line {line}: unknown key `{key}`"
                )));
            }
        }
        cfg.validate()
            .map_err(|e| FormatError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn check_extent(name: &str, v: usize) -> Result<()> {
    let unit = 1 << STAGES;
    if v == 0 || !v.is_multiple_of(unit) {
        return Err(Error::InvalidArgument(format!(
            "{name} = {v} must be a positive multiple of {unit}; pad or crop the input"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics; persisted but never differentiated.
    Buffer,
}

/// conv3x3 (no bias) -> batch norm -> ReLU -> 2x2 max pool.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage<T> {
    /// `[C_s, C_{s-1}, 3, 3]`
    pub kernel: Tensor<T>,
    pub bn: BatchNormParams<T>,
}

/// Transposed conv x2 -> (MRF) -> conv3x3 (no bias) -> batch norm -> ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage<T> {
    /// `[C_in, C_out, 2, 2]`
    pub up_kernel: Tensor<T>,
    pub up_bias: Tensor<T>,
    /// `[C_out, C_out, 3, 3]`
    pub kernel: Tensor<T>,
    pub bn: BatchNormParams<T>,
}

/// Every tensor of the model. Gradients use the same type, with buffers
/// left at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `encoders[m][s]`
    pub encoders: Vec<Vec<EncoderStage<T>>>,
    /// One per scale.
    pub cmc: Vec<CmcParams<T>>,
    pub lstm: ConvLstmParams<T>,
    /// `decoder[d]` produces the map at scale `d` (`d = 0` is full resolution).
    pub decoder: Vec<DecoderStage<T>>,
    /// `[K, C_0, 1, 1]`
    pub classifier_kernel: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

const BN_FIELDS: [(&str, TensorRole); 4] = [
    ("scale", TensorRole::Learnable),
    ("shift", TensorRole::Learnable),
    ("running_mean", TensorRole::Buffer),
    ("running_var", TensorRole::Buffer),
];

macro_rules! entries {
    ($p:expr, $iter:ident $(, $m:tt)?) => {{
        let p = $p;
        let mut out = Vec::new();
        for (mi, stages) in p.encoders.$iter().enumerate() {
            for (s, st) in stages.$iter().enumerate() {
                out.push((format!("enc{mi}.{s}.kernel"), TensorRole::Learnable, & $($m)? st.kernel));
                let BatchNormParams { scale, shift, running_mean, running_var, .. } = & $($m)? st.bn;
                for ((field, role), t) in BN_FIELDS.iter().zip([scale, shift, running_mean, running_var]) {
                    out.push((format!("enc{mi}.{s}.bn.{field}"), *role, t));
                }
            }
        }
        for (s, c) in p.cmc.$iter().enumerate() {
            out.push((format!("cmc{s}.weight"), TensorRole::Learnable, & $($m)? c.weight));
            out.push((format!("cmc{s}.bias"), TensorRole::Learnable, & $($m)? c.bias));
        }
        let ConvLstmParams { input_kernels, hidden_kernels, biases } = & $($m)? p.lstm;
        for (g, ((wx, wh), b)) in input_kernels.$iter().zip(hidden_kernels.$iter()).zip(biases.$iter()).enumerate() {
            let gate = ["i", "f", "c", "o"][g];
            out.push((format!("lstm.w_x{gate}"), TensorRole::Learnable, wx));
            out.push((format!("lstm.w_h{gate}"), TensorRole::Learnable, wh));
            out.push((format!("lstm.b_{gate}"), TensorRole::Learnable, b));
        }
        for (d, st) in p.decoder.$iter().enumerate() {
            let DecoderStage { up_kernel, up_bias, kernel, bn } = st;
            out.push((format!("dec{d}.up.kernel"), TensorRole::Learnable, up_kernel));
            out.push((format!("dec{d}.up.bias"), TensorRole::Learnable, up_bias));
            out.push((format!("dec{d}.kernel"), TensorRole::Learnable, kernel));
            let BatchNormParams { scale, shift, running_mean, running_var, .. } = bn;
            for ((field, role), t) in BN_FIELDS.iter().zip([scale, shift, running_mean, running_var]) {
                out.push((format!("dec{d}.bn.{field}"), *role, t));
            }
        }
        out.push(("cls.kernel".to_string(), TensorRole::Learnable, & $($m)? p.classifier_kernel));
        out.push(("cls.bias".to_string(), TensorRole::Learnable, & $($m)? p.classifier_bias));
        out
    }};
}

impl<T: Real> ModelParams<T> {
    /// Every tensor with its stable name, in checkpoint order.
    pub fn entries(&self) -> Vec<(String, TensorRole, &Tensor<T>)> {
        entries!(self, iter)
    }

    pub fn entries_mut(&mut self) -> Vec<(String, TensorRole, &mut Tensor<T>)> {
        entries!(self, iter_mut, mut)
    }

    pub fn learnable(&self) -> Vec<(String, &Tensor<T>)> {
        self.entries()
            .into_iter()
            .filter(|(_, r, _)| *r == TensorRole::Learnable)
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.entries_mut()
            .into_iter()
            .filter(|(_, r, _)| *r == TensorRole::Learnable)
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.entries_mut() {
            t.data_mut().fill(T::ZERO);
        }
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::skeleton(&self.config);
        for ((_, _, dst), (_, _, src)) in out.entries_mut().into_iter().zip(self.entries()) {
            *dst = src.cast();
        }
        out
    }

    /// Correctly shaped tensors with neutral contents: zero kernels, unit
    /// batch-norm scale and running variance.
    pub fn skeleton(config: &ModelConfig) -> Self {
        let ch = &config.encoder_channels;
        let m = config.modality_count();
        let top = ch[STAGES - 1];
        let k = config.convlstm_kernel;
        let encoders = (0..m)
            .map(|_| {
                (0..STAGES)
                    .map(|s| {
                        let cin = if s == 0 { 1 } else { ch[s - 1] };
                        EncoderStage {
                            kernel: Tensor::zeros(&[ch[s], cin, 3, 3]),
                            bn: BatchNormParams::new(ch[s]),
                        }
                    })
                    .collect()
            })
            .collect();
        let cmc = ch
            .iter()
            .map(|&c| CmcParams {
                weight: Tensor::zeros(&[c, m]),
                bias: Tensor::zeros(&[c]),
            })
            .collect();
        let decoder = (0..STAGES)
            .map(|d| {
                let (cin, cout) = decoder_widths(ch, d);
                DecoderStage {
                    up_kernel: Tensor::zeros(&[cin, cout, 2, 2]),
                    up_bias: Tensor::zeros(&[cout]),
                    kernel: Tensor::zeros(&[cout, cout, 3, 3]),
                    bn: BatchNormParams::new(cout),
                }
            })
            .collect();
        Self {
            config: config.clone(),
            encoders,
            cmc,
            lstm: ConvLstmParams::zeros(top, top, k),
            decoder,
            classifier_kernel: Tensor::zeros(&[config.class_count, ch[0], 1, 1]),
            classifier_bias: Tensor::zeros(&[config.class_count]),
        }
    }
}

/// `(input, output)` channels of decoder stage `d`. Stage `d >= 1` ends at
/// the width of the CMC map it is fused with, scale `d - 1`.
pub(crate) fn decoder_widths(ch: &[usize], d: usize) -> (usize, usize) {
    let cout = if d == 0 { ch[0] } else { ch[d - 1] };
    (ch[d], cout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let c = ModelConfig {
            encoder_channels: vec![2, 3, 4, 5],
            cmc_bias: false,
            seed: 99,
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_rejects_unknown_key_and_bad_extent() {
        assert!(ModelConfig::from_text("bogus = 1\n").is_err());
        assert!(ModelConfig::from_text("input_height = 40\n").is_err());
        assert!(ModelConfig::from_text("encoder_channels = 8,16,32\n").is_err());
        assert!(ModelConfig::from_text("modalities = a,a\n").is_err());
    }

    #[test]
    fn names_are_unique_and_roles_cover_bn_buffers() {
        let p = ModelParams::<f32>::skeleton(&ModelConfig::default());
        let e = p.entries();
        let mut names: Vec<_> = e.iter().map(|(n, _, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), e.len());
        let buffers = e
            .iter()
            .filter(|(_, r, _)| *r == TensorRole::Buffer)
            .count();
        assert_eq!(buffers, 2 * (4 * STAGES + STAGES));
    }

    #[test]
    fn decoder_widths_mirror_encoder() {
        let ch = [8, 16, 32, 64];
        assert_eq!(decoder_widths(&ch, 3), (64, 32));
        assert_eq!(decoder_widths(&ch, 2), (32, 16));
        assert_eq!(decoder_widths(&ch, 1), (16, 8));
        assert_eq!(decoder_widths(&ch, 0), (8, 8));
    }
}
