//! Channel attention, spatial attention and the residual attention block.
//!
//! ```text
//! Attn_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))     F_c = Attn_c * F
//! Attn_s = sigmoid(conv3x3([chan_mean(F_c), chan_max(F_c)]))  F_s = Attn_s * F_c
//! F'     = F + F_s
//! ```
//!
//! The MLP is `fc2(relu(fc1(.)))` with one set of weights shared by the
//! average- and max-pooled branches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Weights of the shared bottleneck MLP `c -> c/r -> c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttnParams<T> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl<T: Scalar> ChannelAttnParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            fc1_weight: Tensor::zeros([hidden, channels]),
            fc1_bias: Tensor::zeros([hidden]),
            fc2_weight: Tensor::zeros([channels, hidden]),
            fc2_bias: Tensor::zeros([channels]),
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, std: f64, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            fc1_weight: Tensor::randn([hidden, channels], std, rng),
            fc1_bias: Tensor::randn([hidden], std, rng),
            fc2_weight: Tensor::randn([channels, hidden], std, rng),
            fc2_bias: Tensor::randn([channels], std, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1_weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ChannelAttnVars {
        ChannelAttnVars {
            fc1_weight: g.param(self.fc1_weight.clone()),
            fc1_bias: g.param(self.fc1_bias.clone()),
            fc2_weight: g.param(self.fc2_weight.clone()),
            fc2_bias: g.param(self.fc2_bias.clone()),
        }
    }
}

/// Hidden width `c / r` of the channel MLP.
pub fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
        return Err(Error::InvalidArgument(format!(
            "reduction {reduction} must be >= 1 and divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

/// 3x3 convolution over the concatenated `[mean, max]` channel pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttnParams<T> {
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
}

impl<T: Scalar> SpatialAttnParams<T> {
    pub const WEIGHT_SHAPE: [usize; 4] = [1, 2, 3, 3];

    pub fn zeros() -> Self {
        Self { conv_weight: Tensor::zeros(Self::WEIGHT_SHAPE), conv_bias: Tensor::zeros([1]) }
    }

    pub fn random<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Self {
        Self {
            conv_weight: Tensor::randn(Self::WEIGHT_SHAPE, std, rng),
            conv_bias: Tensor::randn([1], std, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SpatialAttnVars {
        SpatialAttnVars { conv_weight: g.param(self.conv_weight.clone()), conv_bias: g.param(self.conv_bias.clone()) }
    }
}

/// [`ChannelAttnParams`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttnVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// [`SpatialAttnParams`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttnVars {
    pub conv_weight: Var,
    pub conv_bias: Var,
}

/// Graph handles for every intermediate of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlockVars {
    pub attn_c: Option<Var>,
    pub f_c: Var,
    pub attn_s: Option<Var>,
    pub f_s: Var,
    pub f_prime: Var,
}

/// Concrete values of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlockOutput<T> {
    pub f_c: Tensor<T>,
    pub f_s: Tensor<T>,
    pub f_prime: Tensor<T>,
    pub attn_c: Tensor<T>,
    pub attn_s: Tensor<T>,
}

/// Records `Attn_c` (shape `[N, C, 1, 1]`) for feature map `f`.
pub fn channel_attention_on<T: Scalar>(g: &mut Graph<T>, f: Var, p: &ChannelAttnVars) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidArgument(format!("channel attention expects [N, C, H, W], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let expected_c = g.shape(p.fc1_weight)[1];
    if c != expected_c {
        return Err(Error::ShapeMismatch {
            op: "channel_attention",
            lhs: shape.clone(),
            rhs: g.shape(p.fc1_weight).to_vec(),
        });
    }
    let avg = g.global_avgpool_spatial(f)?;
    let avg = g.reshape(avg, [n, c])?;
    let max = g.global_maxpool_spatial(f)?;
    let max = g.reshape(max, [n, c])?;
    let a = shared_mlp(g, avg, p)?;
    let m = shared_mlp(g, max, p)?;
    let logits = g.add(a, m)?;
    let attn = g.sigmoid(logits)?;
    g.reshape(attn, [n, c, 1, 1])
}

fn shared_mlp<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ChannelAttnVars) -> Result<Var> {
    let h = g.linear(x, p.fc1_weight, p.fc1_bias)?;
    let h = g.relu(h)?;
    g.linear(h, p.fc2_weight, p.fc2_bias)
}

/// Records `Attn_s` (shape `[N, 1, H, W]`) for feature map `f_c`.
pub fn spatial_attention_on<T: Scalar>(g: &mut Graph<T>, f_c: Var, p: &SpatialAttnVars) -> Result<Var> {
    let (avg, max) = g.channel_pool(f_c)?;
    let stacked = g.concat_channels(&[avg, max])?;
    let logits = g.conv2d(stacked, p.conv_weight, p.conv_bias, (1, 1), (1, 1))?;
    g.sigmoid(logits)
}

/// Records the residual attention block. Disabled stages pass their input
/// through; with both disabled the block is bypassed and `f_prime == f`.
pub fn attention_block_on<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    channel: Option<&ChannelAttnVars>,
    spatial: Option<&SpatialAttnVars>,
) -> Result<AttnBlockVars> {
    if channel.is_none() && spatial.is_none() {
        return Ok(AttnBlockVars { attn_c: None, f_c: f, attn_s: None, f_s: f, f_prime: f });
    }
    let (attn_c, f_c) = match channel {
        Some(p) => {
            let a = channel_attention_on(g, f, p)?;
            (Some(a), g.mul_broadcast(f, a)?)
        }
        None => (None, f),
    };
    let (attn_s, f_s) = match spatial {
        Some(p) => {
            let a = spatial_attention_on(g, f_c, p)?;
            (Some(a), g.mul_broadcast(f_c, a)?)
        }
        None => (None, f_c),
    };
    let f_prime = g.add(f, f_s)?;
    Ok(AttnBlockVars { attn_c, f_c, attn_s, f_s, f_prime })
}

/// `Attn_c` for a concrete feature map.
pub fn channel_attention<T: Scalar>(f: &Tensor<T>, p: &ChannelAttnParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let pv = p.bind(&mut g);
    let a = channel_attention_on(&mut g, fv, &pv)?;
    Ok(g.value(a).clone())
}

/// `Attn_s` for a concrete feature map.
pub fn spatial_attention<T: Scalar>(f_c: &Tensor<T>, p: &SpatialAttnParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let fv = g.constant(f_c.clone());
    let pv = p.bind(&mut g);
    let a = spatial_attention_on(&mut g, fv, &pv)?;
    Ok(g.value(a).clone())
}

/// Channel then spatial attention followed by the residual add.
pub fn attention_block<T: Scalar>(
    f: &Tensor<T>,
    cp: &ChannelAttnParams<T>,
    sp: &SpatialAttnParams<T>,
) -> Result<AttnBlockOutput<T>> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let cv = cp.bind(&mut g);
    let sv = sp.bind(&mut g);
    let out = attention_block_on(&mut g, fv, Some(&cv), Some(&sv))?;
    Ok(AttnBlockOutput {
        f_c: g.value(out.f_c).clone(),
        f_s: g.value(out.f_s).clone(),
        f_prime: g.value(out.f_prime).clone(),
        attn_c: g.value(out.attn_c.expect("channel attention enabled")).clone(),
        attn_s: g.value(out.attn_s.expect("spatial attention enabled")).clone(),
    })
}
