//! Central finite-difference checks of the reverse-mode gradients, and a
//! suite that runs them over every differentiable op and composite block.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block_on, ChannelAttnVars, SpatialAttnVars};
use crate::ctc::{ctc_loss_on, LabelSeq};
use crate::derive_seed;
use crate::encoder::{
    logits_on, tcn_layer_on, Activation, BackboneConfig, ForwardMode, ModelConfig, ModelVars, TcnLayerConfig,
    TcnLayerVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_EPS: f64 = 1e-4;
const MAX_REDRAWS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// [`Graph::kink_margin`] at the unperturbed point.
    pub kink_margin: f64,
    /// Perturbed evaluations that crossed a ReLU or max kink. The finite
    /// difference is meaningless for those entries.
    pub kink_crossings: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`, with a floor that keeps entries whose
/// true gradient is negligible from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares the gradient of the scalar `f(inputs)` against central differences
/// with step `eps`, over every entry of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let kink_margin = g.kink_margin();
    let pattern = g.kink_pattern();
    let grads = g.backward(loss)?;

    let mut kink_crossings = 0;
    let mut eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::InvalidArgument("checked function must return a scalar".into()));
        }
        if g.kink_pattern() != pattern {
            kink_crossings += 1;
        }
        Ok(g.value(out).data()[0])
    };

    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            pairs.push((analytic.map_or(0.0, |a| a.data()[j]), numeric));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    let max_rel_error = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(relative_error(a, n, floor)));
    Ok(GradCheck { max_rel_error, kink_margin, kink_crossings })
}

/// Names accepted by [`check_op`], in suite order.
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv1d_causal",
    "avgpool_spatial",
    "maxpool_spatial",
    "channel_mean",
    "channel_max",
    "height_mean",
    "linear",
    "project_logits",
    "sigmoid",
    "relu",
    "add",
    "mul_broadcast",
    "softmax",
    "dropout",
    "concat",
    "reshape",
    "scale",
    "channel_attention",
    "spatial_attention",
    "attention_block",
    "tcn_layer",
    "ctc_loss",
    "model",
];

/// Outcome for one op over all its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub redraws: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor<f64>>,
    body: Body,
}

fn randn(shape: impl Into<Vec<usize>>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Contracts a tensor-valued body against fixed random weights so the
/// checked function is scalar.
fn project(body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static, seed: u64) -> Body {
    Box::new(move |g, v| {
        let out = body(g, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng);
        g.weighted_sum(out, &w)
    })
}

fn unary(x: Tensor<f64>, seed: u64, body: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static) -> Instance {
    Instance { inputs: vec![x], body: project(move |g, v| body(g, v[0]), seed) }
}

fn channel_vars(v: &[Var]) -> ChannelAttnVars {
    ChannelAttnVars { fc1_weight: v[0], fc1_bias: v[1], fc2_weight: v[2], fc2_bias: v[3] }
}

fn channel_params(c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![randn([hidden, c], rng), randn([hidden], rng), randn([c, hidden], rng), randn([c], rng)]
}

fn instance(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=4);
    let w = rng.random_range(2..=5);
    let seed: u64 = rng.random();
    Ok(match name {
        "conv2d" => {
            let o = rng.random_range(1..=3);
            let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
            let pad = (rng.random_range(0..kh), rng.random_range(0..kw));
            let (h, w) = (h + 2, w + 2);
            Instance {
                inputs: vec![randn([n, c, h, w], rng), randn([o, c, kh, kw], rng), randn([o], rng)],
                body: project(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad), seed),
            }
        }
        "conv1d_causal" => {
            let o = rng.random_range(1..=3);
            let k = rng.random_range(1..=3);
            let d = rng.random_range(1..=3);
            let t = rng.random_range(3..=9);
            Instance {
                inputs: vec![randn([n, c, t], rng), randn([o, c, k], rng), randn([o], rng)],
                body: project(move |g, v| g.conv1d_causal(v[0], v[1], v[2], d), seed),
            }
        }
        "avgpool_spatial" => unary(randn([n, c, h, w], rng), seed, |g, x| g.global_avgpool_spatial(x)),
        "maxpool_spatial" => unary(randn([n, c, h, w], rng), seed, |g, x| g.global_maxpool_spatial(x)),
        "channel_mean" => unary(randn([n, c, h, w], rng), seed, |g, x| g.channel_mean(x)),
        "channel_max" => unary(randn([n, c + 1, h, w], rng), seed, |g, x| g.channel_max(x)),
        "height_mean" => unary(randn([n, c, h, w], rng), seed, |g, x| g.height_mean(x)),
        "linear" => {
            let (i, o) = (rng.random_range(1..=5), rng.random_range(1..=5));
            Instance {
                inputs: vec![randn([n, i], rng), randn([o, i], rng), randn([o], rng)],
                body: project(|g, v| g.linear(v[0], v[1], v[2]), seed),
            }
        }
        "project_logits" => {
            let (t, l) = (rng.random_range(1..=6), rng.random_range(2..=5));
            Instance {
                inputs: vec![randn([n, c, t], rng), randn([l, c], rng), randn([l], rng)],
                body: project(|g, v| crate::ctc::project_logits_on(g, v[0], v[1], v[2]), seed),
            }
        }
        "sigmoid" => unary(Tensor::randn([n, c, h], 3.0, rng), seed, |g, x| g.sigmoid(x)),
        "relu" => unary(randn([n, c, h], rng), seed, |g, x| g.relu(x)),
        "add" => Instance {
            inputs: vec![randn([n, c, h], rng), randn([n, c, h], rng)],
            body: project(|g, v| g.add(v[0], v[1]), seed),
        },
        "mul_broadcast" => {
            let gate = match rng.random_range(0..3) {
                0 => vec![n, c, 1, 1],
                1 => vec![n, 1, h, w],
                _ => vec![n, c, h, w],
            };
            Instance {
                inputs: vec![randn([n, c, h, w], rng), randn(gate, rng)],
                body: project(|g, v| g.mul_broadcast(v[0], v[1]), seed),
            }
        }
        "softmax" => unary(Tensor::randn([n, h, w], 2.0, rng), seed, |g, x| g.softmax_lastaxis(x)),
        "dropout" => {
            let mask_seed: u64 = rng.random();
            unary(randn([n, c, h * w], rng), seed, move |g, x| g.dropout(x, 0.3, true, mask_seed))
        }
        "concat" => Instance {
            inputs: vec![randn([n, c, h, w], rng), randn([n, 2, h, w], rng)],
            body: project(|g, v| g.concat_channels(&[v[0], v[1]]), seed),
        },
        "reshape" => unary(randn([n, c, h, w], rng), seed, move |g, x| g.reshape(x, [n, c * h * w])),
        "scale" => {
            let factor = rng.random_range(-2.0..2.0);
            unary(randn([n, c, h], rng), seed, move |g, x| g.scale(x, factor))
        }
        "channel_attention" => {
            let c = rng.random_range(2..=4);
            let hidden = rng.random_range(1..=2);
            let mut inputs = vec![randn([n, c, h, w], rng)];
            inputs.extend(channel_params(c, hidden, rng));
            Instance {
                inputs,
                body: project(|g, v| crate::attention::channel_attention_on(g, v[0], &channel_vars(&v[1..5])), seed),
            }
        }
        "spatial_attention" => Instance {
            inputs: vec![randn([n, c + 1, h, w], rng), randn([1, 2, 3, 3], rng), randn([1], rng)],
            body: project(
                |g, v| {
                    crate::attention::spatial_attention_on(g, v[0], &SpatialAttnVars { conv_weight: v[1], conv_bias: v[2] })
                },
                seed,
            ),
        },
        "attention_block" => {
            let c = rng.random_range(2..=4);
            let hidden = rng.random_range(1..=2);
            let mut inputs = vec![randn([n, c, h, w], rng)];
            inputs.extend(channel_params(c, hidden, rng));
            inputs.push(randn([1, 2, 3, 3], rng));
            inputs.push(randn([1], rng));
            Instance {
                inputs,
                body: project(
                    |g, v| {
                        let ca = channel_vars(&v[1..5]);
                        let sa = SpatialAttnVars { conv_weight: v[5], conv_bias: v[6] };
                        Ok(attention_block_on(g, v[0], Some(&ca), Some(&sa))?.f_prime)
                    },
                    seed,
                ),
            }
        }
        "tcn_layer" => {
            let out_c = if rng.random_bool(0.5) { c } else { c + 1 };
            let cfg = TcnLayerConfig {
                kernel: rng.random_range(2..=3),
                channels: out_c,
                dilation: rng.random_range(1..=4),
                dropout: 0.3,
            };
            let t = rng.random_range(4..=10);
            let k = cfg.kernel;
            let mut inputs = vec![
                randn([n, c, t], rng),
                randn([out_c, c, k], rng),
                randn([out_c], rng),
                randn([out_c, out_c, k], rng),
                randn([out_c], rng),
            ];
            if out_c != c {
                inputs.push(randn([out_c, c, 1], rng));
                inputs.push(randn([out_c], rng));
            }
            let mode = ForwardMode::train(rng.random());
            Instance {
                inputs,
                body: project(
                    move |g, v| {
                        let vars = TcnLayerVars {
                            conv1: (v[1], v[2]),
                            conv2: (v[3], v[4]),
                            skip: (v.len() > 5).then(|| (v[5], v[6])),
                        };
                        tcn_layer_on(g, v[0], &vars, &cfg, Activation::Relu, mode)
                    },
                    seed,
                ),
            }
        }
        "ctc_loss" => {
            let classes = rng.random_range(2..=5);
            let t = rng.random_range(1..=8);
            let labels: Vec<LabelSeq> = (0..n)
                .map(|_| {
                    let mut indices = Vec::new();
                    loop {
                        let next: Vec<usize> = indices.iter().copied().chain([rng.random_range(1..classes)]).collect();
                        if crate::ctc::required_frames(&next) > t || indices.len() == 3 || rng.random_bool(0.3) {
                            break;
                        }
                        indices = next;
                    }
                    LabelSeq { indices, text: String::new() }
                })
                .collect();
            Instance {
                inputs: vec![Tensor::randn([n, t, classes], 2.0, rng)],
                body: Box::new(move |g, v| ctc_loss_on(g, v[0], &labels)),
            }
        }
        "model" => model_instance(rng)?,
        other => return Err(Error::InvalidArgument(format!("unknown op {other:?}"))),
    })
}

/// A miniature full model: backbone with attention, two TCN layers, head and
/// CTC loss, all parameters checked.
fn model_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_height: 4,
            input_width: 6,
            stage_widths: vec![2, 4],
            stage_strides: vec![(2, 2), (2, 1)],
            use_ca: true,
            use_sa: true,
            reduction: 2,
        },
        tcn: TcnLayerConfig::stack(2, 3, &[1, 2], 0.3),
        num_classes: 3,
        init: crate::encoder::Init::Fixed,
        init_std: 0.5,
    };
    let model = crate::encoder::Model::<f64>::init(config.clone(), rng.random())?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut inputs = vec![randn([1, 1, 4, 6], rng)];
    // random biases too: zero biases put ReLU inputs exactly on the kink
    // wherever padding zeroes the receptive field
    inputs.extend(model.params.values().map(|p| Tensor::randn(p.shape().to_vec(), 0.5, rng)));
    let label = LabelSeq { indices: vec![rng.random_range(1..3)], text: String::new() };
    let mode = ForwardMode::train(rng.random());
    Ok(Instance {
        inputs,
        body: Box::new(move |g, v| {
            let vars = ModelVars { vars: names.iter().cloned().zip(v[1..].iter().copied()).collect::<BTreeMap<_, _>>() };
            let logits = logits_on(g, &vars, &config, v[0], mode)?;
            ctc_loss_on(g, logits, std::slice::from_ref(&label))
        }),
    })
}

/// Checks `name` on `instances` random draws. Draws where some perturbation
/// crosses a ReLU or max kink are replaced.
pub fn check_op(name: &str, instances: usize, seed: u64) -> Result<OpReport> {
    if !OP_NAMES.contains(&name) {
        return Err(Error::InvalidArgument(format!("unknown op {name:?}; known: {}", OP_NAMES.join(", "))));
    }
    let mut report = OpReport { name: name.to_string(), instances: 0, redraws: 0, max_rel_error: 0.0 };
    let mut draw = 0u64;
    while report.instances < instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, draw));
        draw += 1;
        let inst = instance(name, &mut rng)?;
        let check = finite_diff_check(&inst.body, &inst.inputs, DEFAULT_EPS)?;
        if check.kink_crossings > 0 {
            report.redraws += 1;
            if report.redraws > MAX_REDRAWS {
                return Err(Error::InvalidArgument(format!("{name}: too many draws near a kink")));
            }
            continue;
        }
        report.instances += 1;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
    }
    Ok(report)
}

/// Runs [`check_op`] for every name in [`OP_NAMES`].
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    OP_NAMES.iter().map(|name| check_op(name, instances, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn([3, 4], &mut rng);
        let check = finite_diff_check(
            |g, v| {
                let sq = g.mul_broadcast(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn([5], |i| i as f64);
        let check = finite_diff_check(
            |g, _| {
                let c = g.constant(Tensor::ones([2]));
                g.sum(c)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(check.max_rel_error, 0.0);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // claims d/dx sum(x) = 2
        let x = Tensor::from_fn([4], |i| i as f64 - 1.5);
        let check = finite_diff_check(
            |g, v| {
                let s = g.sum(v[0])?;
                let value = g.value(s).data()[0];
                g.scalar_with_grad(v[0], value, vec![2.0; 4])
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(check.max_rel_error > 0.4);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("nope", 1, 0).is_err());
    }

    #[test]
    fn every_op_passes_a_few_instances() {
        for name in OP_NAMES {
            let r = check_op(name, 3, 11).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
