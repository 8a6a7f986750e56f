//! Connectionist temporal classification: loss, exhaustive oracle and
//! best-path decoding. The blank is class 0; symbol `i` of the alphabet is
//! class `i + 1`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

pub const BLANK: usize = 0;

/// Ordered symbol set; the blank is implicit at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("alphabet needs at least one symbol".into()));
        }
        Ok(Self { symbols })
    }

    pub fn digits() -> Self {
        Self { symbols: ('0'..='9').collect() }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    pub fn symbol_of(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        let indices = text
            .chars()
            .map(|c| self.class_of(c).ok_or_else(|| Error::InvalidArgument(format!("symbol {c:?} not in alphabet"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSeq { indices, text: text.to_string() })
    }
}

/// Target sequence of non-blank class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSeq {
    pub indices: Vec<usize>,
    pub text: String,
}

impl LabelSeq {
    /// Minimum number of frames able to emit this label: its length plus one
    /// separating blank per adjacent repeat.
    pub fn required_frames(&self) -> usize {
        required_frames(&self.indices)
    }
}

pub fn required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Per-timestep linear projection `[N, C, T] -> [N, T, classes]`.
pub fn project_logits<T: Scalar>(seq: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    ops::project_time(seq, weight, bias)
}

pub fn project_logits_on<T: Scalar>(g: &mut Graph<T>, seq: Var, weight: Var, bias: Var) -> Result<Var> {
    g.project_time(seq, weight, bias)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - z));
    }
    out
}

/// Negative log-likelihood of `label` under per-frame logits `[T, classes]`
/// and its gradient with respect to those logits, via the log-space
/// forward-backward recursion.
pub fn ctc_forward_backward(logits: &[f64], classes: usize, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    let frames = logits.len() / classes;
    if label.iter().any(|&l| l == BLANK || l >= classes) {
        return Err(Error::InvalidArgument(format!("label {label:?} has classes outside 1..{classes}")));
    }
    let required = required_frames(label);
    if required > frames {
        return Err(Error::LabelTooLong { sample: 0, required, available: frames });
    }
    let lp = log_softmax_rows(logits, classes);
    let ext: Vec<usize> = std::iter::once(BLANK).chain(label.iter().flat_map(|&l| [l, BLANK])).collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_sum_exp(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[t * classes + ext[s]] };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp[(frames - 1) * classes + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(frames - 1) * classes + ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_sum_exp(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_sum_exp(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[t * classes + ext[s]] };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s_len - 2]);
    }

    let mut grad: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
    for t in 0..frames {
        let mut occupancy = vec![ninf; classes];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_sum_exp(occupancy[ext[s]], v);
        }
        for k in 0..classes {
            if occupancy[k] != ninf {
                grad[t * classes + k] -= (occupancy[k] - lp[t * classes + k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, labels: &[LabelSeq]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("CTC logits must be [N, T, classes], got {s:?}")));
    }
    if labels.len() != s[0] {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {}", labels.len(), s[0])));
    }
    for (sample, label) in labels.iter().enumerate() {
        let required = label.required_frames();
        if required > s[1] {
            return Err(Error::LabelTooLong { sample, required, available: s[1] });
        }
    }
    Ok((s[0], s[1], s[2]))
}

/// Batch-mean CTC loss and its gradient with respect to `logits` `[N, T, L]`.
pub fn ctc_loss<T: Scalar>(logits: &Tensor<T>, labels: &[LabelSeq]) -> Result<(f64, Tensor<T>)> {
    let (n, frames, classes) = check_logits(logits, labels)?;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (b, label) in labels.iter().enumerate() {
        let sample: Vec<f64> =
            logits.data()[b * frames * classes..(b + 1) * frames * classes].iter().map(|v| v.as_f64()).collect();
        let (nll, g) = ctc_forward_backward(&sample, classes, &label.indices).map_err(|e| match e {
            Error::LabelTooLong { required, available, .. } => Error::LabelTooLong { sample: b, required, available },
            other => other,
        })?;
        total += nll;
        grad.extend(g.into_iter().map(|v| T::from_f64(v * scale)));
    }
    Ok((total * scale, Tensor::new(logits.shape(), grad)?))
}

/// Records the batch-mean CTC loss of `logits` as a scalar node.
pub fn ctc_loss_on<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[LabelSeq]) -> Result<Var> {
    let (loss, grad) = ctc_loss(g.value(logits), labels)?;
    g.scalar_with_grad(logits, T::from_f64(loss), grad.into_data())
}

/// Largest frame count [`ctc_brute_force`] accepts.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// `p(label)` by summing every one of the `L^T` frame paths that collapse to
/// `label`. `frame_probs` is `[T, L]` with rows summing to one.
pub fn ctc_brute_force(frame_probs: &Tensor<f64>, label: &[usize]) -> Result<f64> {
    if frame_probs.rank() != 2 {
        return Err(Error::InvalidArgument("frame probabilities must be [T, L]".into()));
    }
    let (frames, classes) = (frame_probs.shape()[0], frame_probs.shape()[1]);
    if frames > BRUTE_FORCE_MAX_FRAMES {
        return Err(Error::TooManyFrames { frames, max: BRUTE_FORCE_MAX_FRAMES });
    }
    if label.len() > frames {
        return Ok(0.0);
    }
    let p = frame_probs.data();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == label {
            total += path.iter().enumerate().map(|(t, &k)| p[t * classes + k]).product::<f64>();
        }
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(total);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Per-frame argmax (ties to the lowest class) for each sample of `[N, T, L]`.
pub fn best_path<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<usize>> {
    let s = logits.shape();
    let (frames, classes) = (s[1], s[2]);
    logits
        .data()
        .chunks_exact(frames * classes)
        .map(|sample| {
            sample
                .chunks_exact(classes)
                .map(|row| {
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(logits: &Tensor<T>, alphabet: &Alphabet) -> Vec<String> {
    best_path(logits)
        .iter()
        .map(|path| collapse(path).into_iter().filter_map(|k| alphabet.symbol_of(k)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_logits(path: &[usize], classes: usize, scale: f64) -> Tensor<f64> {
        Tensor::from_fn([1, path.len(), classes], |i| if path[i / classes] == i % classes { scale } else { 0.0 })
    }

    #[test]
    fn alphabet_round_trip() {
        let a = Alphabet::digits();
        assert_eq!(a.num_classes(), 11);
        let l = a.encode("3074").unwrap();
        assert_eq!(l.indices, vec![4, 1, 8, 5]);
        assert!(a.encode("3a").is_err());
        assert!(Alphabet::new("abca".chars()).is_err());
        assert_eq!(a.encode("1223").unwrap().required_frames(), 5);
    }

    #[test]
    fn uniform_two_frames_single_symbol() {
        // paths aa, a-, -a
        let probs = Tensor::full([2, 2], 0.5);
        assert_eq!(ctc_brute_force(&probs, &[1]).unwrap(), 0.75);
        let (loss, _) = ctc_loss(&Tensor::<f64>::zeros([1, 2, 2]), &[LabelSeq { indices: vec![1], text: "a".into() }]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn brute_force_edge_cases() {
        let probs = Tensor::new([1, 2], vec![0.7, 0.3]).unwrap();
        assert!((ctc_brute_force(&probs, &[1]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(ctc_brute_force(&probs, &[1, 1]).unwrap(), 0.0);
        assert!(matches!(ctc_brute_force(&Tensor::full([11, 2], 0.5), &[1]), Err(Error::TooManyFrames { .. })));
    }

    #[test]
    fn certain_path_has_zero_loss() {
        let logits = one_hot_logits(&[1, 0, 2, 2], 3, 60.0);
        let (loss, _) = ctc_loss(&logits, &[LabelSeq { indices: vec![1, 2], text: "ab".into() }]).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn label_too_long_names_the_sample() {
        let logits = Tensor::<f32>::zeros([2, 3, 3]);
        let ok = LabelSeq { indices: vec![1], text: "a".into() };
        let bad = LabelSeq { indices: vec![1, 1, 2], text: "aab".into() };
        let err = ctc_loss(&logits, &[ok, bad]).unwrap_err();
        assert!(matches!(err, Error::LabelTooLong { sample: 1, required: 4, available: 3 }));
    }

    #[test]
    fn matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let classes = rng.random_range(2..=4);
            let frames = rng.random_range(1..=6);
            let len = rng.random_range(0..=3.min(frames));
            let label: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
            if required_frames(&label) > frames {
                continue;
            }
            let logits = Tensor::<f64>::randn([1, frames, classes], 2.0, &mut rng);
            let probs = ops::softmax_lastaxis(&logits).reshape([frames, classes]).unwrap();
            let p = ctc_brute_force(&probs, &label).unwrap();
            let (nll, _) = ctc_forward_backward(logits.data(), classes, &label).unwrap();
            assert!((nll + p.ln()).abs() < 1e-9, "{nll} vs {}", -p.ln());
        }
    }

    #[test]
    fn huge_logits_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::<f64>::randn([2, 8, 5], 1e4, &mut rng);
        let labels = vec![
            LabelSeq { indices: vec![1, 2, 2], text: String::new() },
            LabelSeq { indices: vec![4], text: String::new() },
        ];
        let (loss, grad) = ctc_loss(&logits, &labels).unwrap();
        assert!(loss.is_finite());
        assert!(grad.is_finite());
    }

    #[test]
    fn greedy_decode_rules() {
        let a = Alphabet::new("ab".chars()).unwrap();
        let decode = |path: &[usize]| greedy_decode(&one_hot_logits(path, 3, 1.0), &a).remove(0);
        assert_eq!(decode(&[1, 1, 0, 2, 2]), "ab");
        assert_eq!(decode(&[0, 0, 0]), "");
        assert_eq!(decode(&[1, 0, 1]), "aa");
        // ties go to the lowest class index (blank)
        assert_eq!(greedy_decode(&Tensor::<f64>::zeros([1, 4, 3]), &a), vec![String::new()]);
    }

    #[test]
    fn zero_projection_is_uniform() {
        let seq = Tensor::<f64>::from_fn([2, 256, 25], |i| (i % 7) as f64);
        let logits = project_logits(&seq, &Tensor::zeros([11, 256]), &Tensor::zeros([11])).unwrap();
        assert_eq!(logits.shape(), &[2, 25, 11]);
        let probs = ops::softmax_lastaxis(&logits);
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
    }
}
