use serde::{Deserialize, Serialize};

use super::params::{batchnorm, bn_specs, conv, conv_specs, Bound, Init, Norm, ParamSpec, ParamStore};
use super::PositiveProbability;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    pub layers: usize,
    pub growth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub blocks: [DenseBlockConfig; 4],
    /// Spatial reduction of each transition layer.
    pub downsample: usize,
    /// Hidden width of the classifier head; 0 maps pooled features straight to the logit.
    pub head_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            stem_channels: 8,
            blocks: [DenseBlockConfig { layers: 2, growth: 8 }; 4],
            downsample: 2,
            head_width: 0,
        }
    }
}

/// Values produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[N]`
    pub logit: Var,
    /// `[N]`, `sigmoid(logit)`
    pub prob: Var,
    /// Dense-block outputs, full resolution first.
    pub features: [Var; 4],
    /// Output of the last transition, at `1 / total_downsample` resolution.
    pub bottleneck: Var,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.input_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be >= 1");
        }
        if self.downsample == 0 {
            return bad("downsample must be >= 1");
        }
        if self.blocks.iter().any(|b| b.layers == 0 || b.growth == 0) {
            return bad("every dense block needs >= 1 layer and growth >= 1");
        }
        Ok(())
    }

    pub fn total_downsample(&self) -> usize {
        self.downsample.pow(4)
    }

    /// Channels of each dense-block output and of the bottleneck.
    pub fn channel_plan(&self) -> ([usize; 4], usize) {
        let mut c = self.stem_channels;
        let mut feats = [0; 4];
        for (i, b) in self.blocks.iter().enumerate() {
            c += b.layers * b.growth;
            feats[i] = c;
            c = c.div_ceil(2);
        }
        (feats, c)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = conv_specs("encoder.stem", self.input_channels, self.stem_channels, 3, true);
        let mut c = self.stem_channels;
        for (bi, b) in self.blocks.iter().enumerate() {
            for li in 0..b.layers {
                let p = format!("encoder.block{bi}.layer{li}");
                v.extend(bn_specs(&format!("{p}.bn"), c));
                v.extend(conv_specs(&format!("{p}.conv"), c, b.growth, 3, true));
                c += b.growth;
            }
            let p = format!("encoder.transition{bi}");
            v.extend(bn_specs(&format!("{p}.bn"), c));
            v.extend(conv_specs(&format!("{p}.conv"), c, c.div_ceil(2), 1, true));
            c = c.div_ceil(2);
        }
        v.extend(bn_specs("encoder.head.bn", c));
        let mut width = c;
        if self.head_width > 0 {
            v.push(ParamSpec::new("encoder.head.hidden.weight", &[c, self.head_width], Init::He { fan_in: c }));
            v.push(ParamSpec::new("encoder.head.hidden.bias", &[self.head_width], Init::Zeros));
            width = self.head_width;
        }
        v.push(ParamSpec::new("encoder.head.out.weight", &[width, 1], Init::He { fan_in: width }));
        v.push(ParamSpec::new("encoder.head.out.bias", &[1], Init::Zeros));
        v
    }
}

/// Classifier pass producing `P(y = 1 | x)` and the multi-scale features.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    norm: &mut Norm<'_, T>,
    x: Var,
) -> Result<EncoderOutput> {
    let shape = tape.shape(x).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape("encoder_forward", format!("expected [N, C, H, W], got {shape:?}")));
    };
    if c != cfg.input_channels {
        return Err(Error::shape(
            "encoder_forward",
            format!("input has {c} channels, encoder expects {}", cfg.input_channels),
        ));
    }
    let total = cfg.total_downsample();
    if h % total != 0 || w % total != 0 {
        return Err(Error::shape(
            "encoder_forward",
            format!("{h}x{w} is not divisible by the total downsampling {total}"),
        ));
    }

    let mut cur = conv(tape, params, "encoder.stem", x, 3, true)?;
    let mut features = [cur; 4];
    for (bi, b) in cfg.blocks.iter().enumerate() {
        for li in 0..b.layers {
            let p = format!("encoder.block{bi}.layer{li}");
            let z = batchnorm(tape, params, norm, &format!("{p}.bn"), cur)?;
            let z = tape.relu(z)?;
            let z = conv(tape, params, &format!("{p}.conv"), z, 3, true)?;
            cur = tape.concat_channels(cur, z)?;
        }
        features[bi] = cur;
        let p = format!("encoder.transition{bi}");
        let z = batchnorm(tape, params, norm, &format!("{p}.bn"), cur)?;
        let z = tape.relu(z)?;
        let z = conv(tape, params, &format!("{p}.conv"), z, 1, true)?;
        cur = tape.avg_pool(z, cfg.downsample)?;
    }
    let bottleneck = cur;

    let z = batchnorm(tape, params, norm, "encoder.head.bn", bottleneck)?;
    let z = tape.relu(z)?;
    let mut z = tape.reduce_mean(z, &[2, 3])?;
    if cfg.head_width > 0 {
        z = tape.dense(
            z,
            params.get("encoder.head.hidden.weight")?,
            params.get("encoder.head.hidden.bias")?,
        )?;
        z = tape.relu(z)?;
    }
    let logit = tape.dense(z, params.get("encoder.head.out.weight")?, params.get("encoder.head.out.bias")?)?;
    let logit = tape.reshape(logit, &[n])?;
    let prob = tape.sigmoid(logit)?;
    Ok(EncoderOutput {
        logit,
        prob,
        features,
        bottleneck,
    })
}

/// Eval-mode encoder whose weights enter every tape as constants.
pub struct FrozenEncoder<'a, T> {
    pub config: &'a EncoderConfig,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> FrozenEncoder<'a, T> {
    pub fn new(config: &'a EncoderConfig, params: &'a ParamStore<T>) -> Self {
        Self { config, params }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<EncoderOutput> {
        let bound = self.params.bind(tape, false);
        encoder_forward(tape, self.config, &bound, &mut Norm::Eval(self.params), x)
    }
}

impl<T: Real> PositiveProbability<T> for FrozenEncoder<'_, T> {
    fn positive_probability(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward(tape, x)?.prob)
    }
}
