use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tce_core::attention::{attention_block, channel_attention, spatial_attention, ChannelAttnParams, SpatialAttnParams};
use tce_core::ctc::{collapse, ctc_brute_force, ctc_forward_backward, greedy_decode, required_frames, Alphabet, BLANK};
use tce_core::data::{normalize_pixel, render_sample, Dataset, GlyphBank, SampleSpec, Split};
use tce_core::ops;
use tce_core::trainer::edit_distance;
use tce_core::{Graph, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Applies `perm` to the spatial positions of every `[N, C, H, W]` plane.
fn permute_positions(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let hw = perm.len();
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(hw).zip(x.data().chunks_exact(hw)) {
        for (i, &p) in perm.iter().enumerate() {
            dst[i] = src[p];
        }
    }
    out
}

fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks_exact(classes)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_buffer_must_match_shape(dims in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let len: usize = dims.iter().product();
        prop_assert!(Tensor::<f32>::new(dims.clone(), vec![0.0; len]).is_ok());
        prop_assert!(Tensor::<f32>::new(dims.clone(), vec![0.0; len + extra]).is_err());
        prop_assert!(Tensor::<f32>::new(dims, vec![0.0; len - 1]).is_err());
    }

    #[test]
    fn conv2d_output_extent_follows_formula(
        n in 1usize..3, c in 1usize..3, o in 1usize..3,
        h in 3usize..9, w in 3usize..9, kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3, ph in 0usize..2, pw in 0usize..2, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[n, c, h, w], &mut rng);
        let k = randn(&[o, c, kh, kw], &mut rng);
        let b = randn(&[o], &mut rng);
        let y = ops::conv2d(&x, &k, &b, (sh, sw), (ph, pw)).unwrap();
        prop_assert_eq!(y.shape(), &[n, o, (h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1]);
    }

    #[test]
    fn causal_conv_ignores_the_future(
        c in 1usize..4, o in 1usize..4, t in 2usize..20, k in 1usize..4, d in 1usize..5,
        tau_frac in 0.0f64..1.0, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, c, t], &mut rng);
        let w = randn(&[o, c, k], &mut rng);
        let b = randn(&[o], &mut rng);
        let tau = ((t as f64 * tau_frac) as usize).min(t - 1);
        let mut bumped = x.clone();
        for ch in 0..c {
            bumped.data_mut()[ch * t + tau] += 3.0;
        }
        let y0 = ops::conv1d_causal(&x, &w, &b, d).unwrap();
        let y1 = ops::conv1d_causal(&bumped, &w, &b, d).unwrap();
        prop_assert_eq!(y0.shape(), &[2, o, t]);
        for ch in 0..o {
            for s in 0..tau {
                prop_assert_eq!(y0.at(&[0, ch, s]), y1.at(&[0, ch, s]));
            }
        }
        // the second sample was not touched at all
        prop_assert_eq!(&y0.data()[o * t..], &y1.data()[o * t..]);
    }

    #[test]
    fn global_pools_ignore_position_order(c in 1usize..4, h in 1usize..5, w in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, c, h, w], &mut rng);
        let px = permute_positions(&x, &shuffled(h * w, &mut rng));
        prop_assert!(ops::global_avgpool_spatial(&x).unwrap().max_abs_diff(&ops::global_avgpool_spatial(&px).unwrap()) < 1e-12);
        prop_assert_eq!(ops::global_maxpool_spatial(&x).unwrap().0, ops::global_maxpool_spatial(&px).unwrap().0);
    }

    #[test]
    fn channel_attention_is_position_equivariant(cr in 1usize..4, r in 1usize..3, h in 1usize..5, w in 1usize..5, seed: u64) {
        let c = cr * r;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&[2, c, h, w], &mut rng);
        let p = ChannelAttnParams::random(c, r, 0.7, &mut rng).unwrap();
        let sp = SpatialAttnParams::zeros();
        let perm = shuffled(h * w, &mut rng);
        let pf = permute_positions(&f, &perm);
        prop_assert!(channel_attention(&f, &p).unwrap().max_abs_diff(&channel_attention(&pf, &p).unwrap()) < 1e-12);
        let a = attention_block(&f, &p, &sp).unwrap();
        let b = attention_block(&pf, &p, &sp).unwrap();
        prop_assert!(permute_positions(&a.f_c, &perm).max_abs_diff(&b.f_c) < 1e-12);
    }

    #[test]
    fn spatial_attention_ignores_channel_order(c in 1usize..6, h in 1usize..5, w in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&[2, c, h, w], &mut rng);
        let p = SpatialAttnParams::random(0.7, &mut rng);
        let perm = shuffled(c, &mut rng);
        let hw = h * w;
        let mut pf = f.clone();
        for n in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let (d, s) = ((n * c + dst) * hw, (n * c + src) * hw);
                pf.data_mut()[d..d + hw].copy_from_slice(&f.data()[s..s + hw]);
            }
        }
        prop_assert!(spatial_attention(&f, &p).unwrap().max_abs_diff(&spatial_attention(&pf, &p).unwrap()) < 1e-12);
    }

    #[test]
    fn attention_maps_stay_inside_the_unit_interval(cr in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let c = 2 * cr;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&[2, c, h, w], &mut rng);
        let cp = ChannelAttnParams::random(c, 2, 1.0, &mut rng).unwrap();
        let sp = SpatialAttnParams::random(1.0, &mut rng);
        let out = attention_block(&f, &cp, &sp).unwrap();
        for &v in out.attn_c.data().iter().chain(out.attn_s.data()) {
            prop_assert!(v > 0.0 && v < 1.0, "{}", v);
        }
        prop_assert_eq!(out.f_prime.shape(), f.shape());
    }

    #[test]
    fn zero_attention_is_exactly_five_quarters(c in 1usize..5, h in 1usize..4, w in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&[1, c, h, w], &mut rng);
        let out = attention_block(&f, &ChannelAttnParams::zeros(c, 1).unwrap(), &SpatialAttnParams::zeros()).unwrap();
        let expected = f.map(|v| v + 0.25 * v);
        prop_assert_eq!(out.f_prime.data(), expected.data());
    }

    #[test]
    fn eval_dropout_is_identity(len in 1usize..50, rate in 0.0f64..0.9, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[len], &mut rng);
        prop_assert_eq!(&ops::dropout(&x, rate, false, seed).unwrap(), &x);
        let y = ops::dropout(&x, rate, true, seed).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!(*b == 0.0 || (b - a / (1.0 - rate)).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_gradients_add(len in 1usize..10, uses in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.param(randn(&[len], &mut rng));
        let mut acc = x;
        for _ in 1..uses {
            acc = g.add(acc, x).unwrap();
        }
        let loss = g.sum(acc).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == uses as f64));
    }

    #[test]
    fn edit_distance_is_a_metric(a in "[0-9]{0,6}", b in "[0-9]{0,6}", c in "[0-9]{0,6}") {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert_eq!(d == 0, a == b);
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert!(edit_distance(&a, &c) <= d + edit_distance(&b, &c));
    }

    #[test]
    fn rendered_pixels_normalize_inside_open_interval(text in "[0-9]{1,5}", seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = SampleSpec::random(&mut rng);
        spec.jitter = text.chars().map(|_| spec.jitter[0]).collect();
        spec.text = text.clone();
        let bank = GlyphBank::new(seed);
        let sample = render_sample(&spec, &bank, seed).unwrap();
        prop_assert_eq!(&sample, &render_sample(&spec, &bank, seed).unwrap());
        prop_assert_eq!(sample.label().unwrap().text, text);
        let image = sample.image::<f64>();
        prop_assert!(image.data().iter().all(|&v| v > -1.0 && v < 1.0));
        prop_assert!((0..=255u8).all(|b| normalize_pixel(b).abs() < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ctc_matches_exhaustive_alignment_sum(
        frames in 1usize..9, classes in 2usize..5, label_len in 0usize..4, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label: Vec<usize> = (0..label_len).map(|_| rng.random_range(1..classes)).collect();
        prop_assume!(required_frames(&label) <= frames);
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let probs = Tensor::new([frames, classes], softmax_rows(&logits, classes)).unwrap();
        let p = ctc_brute_force(&probs, &label).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let (nll, _) = ctc_forward_backward(&logits, classes, &label).unwrap();
        prop_assert!((nll + p.ln()).abs() < 1e-9, "nll {} vs -ln p {}", nll, -p.ln());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_probabilities_sum_to_one(frames in 1usize..7, seed: u64) {
        // blank plus two symbols; every label up to `frames` symbols long
        let classes = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = Tensor::new([frames, classes], softmax_rows(&logits, classes)).unwrap();
        let mut total = 0.0;
        for len in 0..=frames {
            for code in 0..1usize << len {
                let label: Vec<usize> = (0..len).map(|i| 1 + (code >> i & 1)).collect();
                total += ctc_brute_force(&probs, &label).unwrap();
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-12, "{}", total);
    }

    #[test]
    fn huge_logits_keep_the_loss_finite(frames in 3usize..10, seed: u64) {
        let classes = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-1e4..1e4)).collect();
        let (nll, grad) = ctc_forward_backward(&logits, classes, &[1, 2]).unwrap();
        prop_assert!(nll.is_finite() && nll >= 0.0);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn confident_correct_decoding_drives_loss_to_zero(text in "[0-9]{1,5}") {
        let alphabet = Alphabet::digits();
        let label = alphabet.encode(&text).unwrap();
        // one frame per symbol with a blank between, padded with blanks
        let frames = 12;
        let mut path = Vec::new();
        for &k in &label.indices {
            path.push(k);
            path.push(BLANK);
        }
        path.resize(frames, BLANK);
        prop_assert_eq!(collapse(&path), label.indices.clone());
        let classes = alphabet.num_classes();
        let mut prev = f64::INFINITY;
        for margin in [5.0, 10.0, 20.0, 40.0] {
            let logits = Tensor::from_fn([1, frames, classes], |i| if path[i / classes] == i % classes { margin } else { 0.0 });
            prop_assert_eq!(greedy_decode(&logits, &alphabet), vec![text.clone()]);
            let (nll, _) = ctc_forward_backward(logits.data(), classes, &label.indices).unwrap();
            prop_assert!(nll < prev);
            prev = nll;
        }
        prop_assert!(prev < 1e-12);
    }

    #[test]
    fn dataset_bytes_round_trip(count in 1usize..6, master: u64) {
        let ds = Dataset::generate(count, master, Split::Val).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
