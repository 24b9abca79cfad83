use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, EncoderOutput};
use super::params::{batchnorm, bn_specs, conv, conv_specs, Bound, Norm, ParamSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderBlockConfig {
    pub resize: usize,
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub blocks: [DecoderBlockConfig; 4],
    /// Encoder feature index concatenated into each block after its resize.
    pub skips: [usize; 4],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        let b = |channels| DecoderBlockConfig {
            resize: 2,
            kernel: 3,
            channels,
        };
        Self {
            blocks: [b(16), b(16), b(8), b(8)],
            skips: [3, 2, 1, 0],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder: {m}")));
        for (i, b) in self.blocks.iter().enumerate() {
            if b.resize == 0 || b.channels == 0 {
                return bad(format!("block {i} needs resize >= 1 and channels >= 1"));
            }
            if b.kernel % 2 == 0 {
                return bad(format!("block {i} kernel {} must be odd", b.kernel));
            }
        }
        if let Some(s) = self.skips.iter().find(|&&s| s > 3) {
            return bad(format!("skip source {s} does not exist"));
        }
        let restore: usize = self.blocks.iter().map(|b| b.resize).product();
        if restore != encoder.total_downsample() {
            return bad(format!(
                "resize factors compose to {restore}, encoder downsamples by {}",
                encoder.total_downsample()
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self, encoder: &EncoderConfig) -> Vec<ParamSpec> {
        let (feats, bottleneck) = encoder.channel_plan();
        let mut c = bottleneck;
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let cin = c + feats[self.skips[i]];
            let p = format!("decoder.block{i}");
            v.extend(conv_specs(&format!("{p}.conv"), cin, b.channels, b.kernel, true));
            v.extend(bn_specs(&format!("{p}.bn"), b.channels));
            c = b.channels;
        }
        v.extend(conv_specs("decoder.out", c, 1, 1, true));
        v
    }
}

/// Saliency mask `[N, 1, H, W]` in `(0, 1)` from encoder features alone.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    params: &Bound,
    norm: &mut Norm<'_, T>,
    features: &EncoderOutput,
) -> Result<Var> {
    let mut cur = features.bottleneck;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let up = tape.upsample_nearest(cur, b.resize)?;
        let skip = features.features[cfg.skips[i]];
        let (su, ss) = (tape.shape(up), tape.shape(skip));
        if su[2..] != ss[2..] {
            return Err(Error::shape(
                "decoder_forward",
                format!("block {i} resized to {:?} but skip {} is {:?}", &su[2..], cfg.skips[i], &ss[2..]),
            ));
        }
        let merged = tape.concat_channels(up, skip)?;
        let p = format!("decoder.block{i}");
        let z = conv(tape, params, &format!("{p}.conv"), merged, b.kernel, true)?;
        let z = batchnorm(tape, params, norm, &format!("{p}.bn"), z)?;
        cur = tape.relu(z)?;
    }
    let logits = conv(tape, params, "decoder.out", cur, 1, true)?;
    tape.sigmoid(logits)
}
