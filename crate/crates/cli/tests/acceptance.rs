//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a gated criterion fails. Criterion 7 is reported but
//! never gates.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tce_core::attention::{attention_block, ChannelAttnParams, SpatialAttnParams};
use tce_core::checkpoint::{load_checkpoint, save_checkpoint};
use tce_core::ctc::{ctc_brute_force, ctc_forward_backward, required_frames};
use tce_core::data::Dataset;
use tce_core::encoder::{tcn_stack_on, ForwardMode, Model, ModelConfig};
use tce_core::{Graph, Tensor};

/// Iterations for the end-to-end training run; the budget is 5000.
const TOY_ITERATIONS: usize = 1000;
const TOY_ITERATION_BUDGET: usize = 5000;
const TOY_ACCURACY: f64 = 0.95;
/// Matched iteration count of the four ablation runs.
const ABLATION_ITERATIONS: usize = 300;

type Check = anyhow::Result<(bool, String)>;

fn tce(args: &[&str]) -> anyhow::Result<Output> {
    Ok(Command::new(env!("CARGO_BIN_EXE_tce")).args(args).output()?)
}

fn tce_ok(args: &[&str]) -> anyhow::Result<String> {
    let out = tce(args)?;
    if !out.status.success() {
        anyhow::bail!("tce {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

struct Corpus {
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

fn generate_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    let c = Corpus { train: dir.join("train.tced"), val: dir.join("val.tced"), test: dir.join("test.tced") };
    for (path, count, split) in [(&c.train, "5000", "train"), (&c.val, "500", "val"), (&c.test, "500", "test")] {
        tce_ok(&["generate", "--count", count, "--seed", "1", "--split", split, "--out", s(path)])?;
    }
    Ok(c)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let out = tce(&["gradcheck", "--ops", "all", "--instances", "20"])?;
    let elapsed = start.elapsed();
    let text = String::from_utf8(out.stdout)?;
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let worst = rows.iter().filter_map(|r| r.get(3)?.parse::<f64>().ok()).fold(0.0, f64::max);
    let all_ok = rows.len() == tce_core::gradcheck::OP_NAMES.len()
        && rows.iter().all(|r| r.len() == 5 && r[1] == "20" && r[4] == "ok");
    let pass = out.status.success() && all_ok && worst < 1e-5 && elapsed < Duration::from_secs(120);
    Ok((pass, format!("{} checks x 20 instances, worst relative error {worst:.2e}, {elapsed:.1?}", rows.len())))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let config = ModelConfig::default();
    let mut model = Model::<f32>::init(config.clone(), 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // random branch weights everywhere, so no layer starts as a pure skip
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("tcn.") {
            *t = Tensor::randn(t.shape().to_vec(), 0.05, &mut rng);
        }
    }
    let (channels, steps) = (config.backbone.output_channels(), config.backbone.sequence_length());
    let run = |seq: &Tensor<f32>| -> anyhow::Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(seq.clone());
        let layers = tcn_stack_on(&mut g, &vars, &config, x, ForwardMode::EVAL)?;
        Ok(g.value(*layers.last().expect("four layers")).clone())
    };
    let mut violations = 0;
    let mut inert = 0;
    for _ in 0..100 {
        let seq = Tensor::<f32>::randn([1, channels, steps], 1.0, &mut rng);
        let t1 = rng.random_range(1..steps);
        let mut bumped = seq.clone();
        for c in 0..channels {
            if rng.random_bool(0.5) {
                bumped.data_mut()[c * steps + t1] += rng.random_range(-2.0f32..2.0);
            }
        }
        let (a, b) = (run(&seq)?, run(&bumped)?);
        for c in 0..channels {
            for t in 0..t1 {
                if a.data()[c * steps + t].to_bits() != b.data()[c * steps + t].to_bits() {
                    violations += 1;
                }
            }
        }
        if a == b {
            inert += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = violations == 0 && inert == 0 && elapsed < Duration::from_secs(30);
    Ok((pass, format!("100 trials, {violations} earlier outputs changed, {inert} perturbations without effect, {elapsed:.1?}")))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let text = tce_ok(&["probe", "--layers", "4"])?;
    let spans: Vec<usize> =
        text.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap_or("").parse()).collect::<Result<_, _>>()?;
    let elapsed = start.elapsed();
    let increments: Vec<usize> = spans.windows(2).skip(1).map(|w| w[1] - w[0]).collect();
    let pass = spans == [1, 5, 13, 29, 61] && increments == [8, 16, 32] && elapsed < Duration::from_secs(10);
    Ok((pass, format!("receptive fields {:?}, increments {increments:?}, {elapsed:.1?}", &spans[1..])))
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

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 200 {
        let frames = rng.random_range(1..=8);
        let classes = rng.random_range(2..=4);
        let label: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..classes)).collect();
        if required_frames(&label) > frames {
            continue;
        }
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let probs = Tensor::new([frames, classes], softmax_rows(&logits, classes))?;
        let p = ctc_brute_force(&probs, &label)?;
        let (nll, _) = ctc_forward_backward(&logits, classes, &label)?;
        worst = worst.max((nll + p.ln()).abs());
        done += 1;
    }
    // alphabet {a}, T = 2, uniform 0.5 over {blank, a}
    let hand = ctc_brute_force(&Tensor::full([2, 2], 0.5), &[1])?;
    let (hand_nll, _) = ctc_forward_backward(&[0.0; 4], 2, &[1])?;
    let elapsed = start.elapsed();
    let pass = worst < 1e-9 && hand == 0.75 && (hand_nll + 0.75f64.ln()).abs() < 1e-15 && elapsed < Duration::from_secs(60);
    Ok((pass, format!("200 instances, worst |loss + ln p| {worst:.1e}; hand case p = {hand}; {elapsed:.1?}")))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut pass = true;
    for (c, h, w) in [(1, 1, 1), (4, 5, 7), (8, 16, 50)] {
        let f = Tensor::<f64>::randn([2, c, h, w], 3.0, &mut rng);
        let out = attention_block(&f, &ChannelAttnParams::zeros(c, 1)?, &SpatialAttnParams::zeros())?;
        let expected = f.map(|v| 1.25 * v);
        pass &= out.f_prime.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        pass &= out.attn_c.data().iter().chain(out.attn_s.data()).all(|&v| v == 0.5);
    }
    Ok((pass, "three shapes, output compared bitwise with 1.25 * input".into()))
}

fn accuracy_of(eval_line: &str) -> anyhow::Result<f64> {
    let field = eval_line.split_whitespace().find_map(|kv| kv.strip_prefix("accuracy=")).ok_or_else(|| {
        anyhow::anyhow!("no accuracy in {eval_line:?}")
    })?;
    Ok(field.parse()?)
}

fn criterion_6(dir: &Path, corpus: &Corpus) -> Check {
    let start = Instant::now();
    let run = dir.join("toy");
    let iterations = format!("iterations={TOY_ITERATIONS}");
    tce_ok(&[
        "train", "--data", s(&corpus.train), "--val", s(&corpus.val), "--out-dir", s(&run),
        "--set", &iterations, "--set", "val_interval=250", "--set", "batch_size=32", "--set", "seed=1",
    ])?;
    let config = fs::read_to_string(run.join("config.txt"))?;
    let full_model = config.contains("use_ca=true\n") && config.contains("use_sa=true\n");
    let line = tce_ok(&["eval", "--checkpoint", s(&run.join("final.tce")), "--data", s(&corpus.test)])?;
    let accuracy = accuracy_of(&line)?;
    let elapsed = start.elapsed();
    let pass = full_model && TOY_ITERATIONS <= TOY_ITERATION_BUDGET && accuracy >= TOY_ACCURACY;
    Ok((pass, format!("test accuracy {accuracy:.3} after {TOY_ITERATIONS} iterations ({}), {elapsed:.0?}", line.trim())))
}

fn criterion_7(dir: &Path, corpus: &Corpus) -> Check {
    let out = dir.join("ablation");
    let iterations = format!("iterations={ABLATION_ITERATIONS}");
    let interval = format!("val_interval={ABLATION_ITERATIONS}");
    tce_ok(&[
        "ablate", "--data", s(&corpus.train), "--val", s(&corpus.val), "--test", s(&corpus.test),
        "--out-dir", s(&out), "--set", &iterations, "--set", &interval,
    ])?;
    let table = fs::read_to_string(out.join("ablation.tsv"))?;
    let acc = |variant: &str| -> anyhow::Result<f64> {
        let row = table.lines().find(|l| l.starts_with(&format!("{variant}\t"))).ok_or_else(|| anyhow::anyhow!("no {variant} row"))?;
        Ok(row.split('\t').nth(4).unwrap_or("").parse()?)
    };
    let runs: Vec<String> = ["baseline", "ca", "sa", "ca+sa"]
        .iter()
        .map(|v| Ok(format!("{v} {:.3}", acc(v)?)))
        .collect::<anyhow::Result<_>>()?;
    Ok((acc("ca+sa")? >= acc("baseline")?, format!("{} at {ABLATION_ITERATIONS} iterations", runs.join(", "))))
}

fn corrupt_and_eval(bytes: &[u8], offset: usize, value: &[u8], dir: &Path, data: &Path) -> anyhow::Result<Option<i32>> {
    let mut bad = bytes.to_vec();
    bad[offset..offset + value.len()].copy_from_slice(value);
    let path = dir.join("corrupt.tce");
    fs::write(&path, bad)?;
    Ok(tce(&["eval", "--checkpoint", s(&path), "--data", s(data)])?.status.code())
}

fn criterion_8(dir: &Path, corpus: &Corpus, checkpoint: &Path) -> Check {
    let data_bytes = fs::read(&corpus.val)?;
    let copy = dir.join("val_copy.tced");
    Dataset::read(&corpus.val)?.write(&copy)?;
    let dataset_same = fs::read(&copy)? == data_bytes;

    let ckpt_bytes = fs::read(checkpoint)?;
    let copy = dir.join("copy.tce");
    save_checkpoint(&load_checkpoint(checkpoint)?, &copy)?;
    let checkpoint_same = fs::read(&copy)? == ckpt_bytes;

    let bad_magic = corrupt_and_eval(&ckpt_bytes, 0, b"XXXX", dir, &corpus.val)?;
    let bad_version = corrupt_and_eval(&ckpt_bytes, 4, &7u16.to_le_bytes(), dir, &corpus.val)?;
    let mut bad_data = data_bytes.clone();
    bad_data[0] = b'Z';
    let bad_data_path = dir.join("corrupt.tced");
    fs::write(&bad_data_path, bad_data)?;
    let bad_dataset = tce(&["eval", "--checkpoint", s(checkpoint), "--data", s(&bad_data_path)])?.status.code();

    let pass = dataset_same && checkpoint_same && [bad_magic, bad_version, bad_dataset].iter().all(|c| *c == Some(2));
    Ok((
        pass,
        format!(
            "dataset identical {dataset_same}, checkpoint identical {checkpoint_same}, exit codes magic {bad_magic:?} version {bad_version:?} dataset {bad_dataset:?}"
        ),
    ))
}

fn criterion_9(dir: &Path, corpus: &Corpus) -> anyhow::Result<((bool, String), PathBuf)> {
    let small_val = dir.join("val50.tced");
    tce_ok(&["generate", "--count", "50", "--seed", "9", "--split", "val", "--out", s(&small_val)])?;
    let mut outputs = Vec::new();
    for name in ["det_a", "det_b"] {
        let run = dir.join(name);
        tce_ok(&[
            "train", "--data", s(&corpus.train), "--val", s(&small_val), "--out-dir", s(&run),
            "--set", "iterations=20", "--set", "val_interval=10",
        ])?;
        outputs.push(run);
    }
    let same = |file: &str| -> anyhow::Result<bool> {
        Ok(fs::read(outputs[0].join(file))? == fs::read(outputs[1].join(file))?)
    };
    let files = ["log.tsv", "final.tce", "best.tce", "config.txt"];
    let identical: Vec<bool> = files.iter().map(|f| same(f)).collect::<anyhow::Result<_>>()?;
    let detail = files.iter().zip(&identical).map(|(f, ok)| format!("{f} {}", if *ok { "identical" } else { "differs" })).collect::<Vec<_>>();
    Ok(((identical.iter().all(|&b| b), detail.join(", ")), outputs[0].join("final.tce")))
}

fn report(n: usize, gated: bool, result: Check, failures: &mut usize) {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    let verdict = if pass { "PASS" } else { "FAIL" };
    let note = if gated { "" } else { " (reported, not gated)" };
    println!("criterion {n}: {verdict}{note} - {detail}");
    if gated && !pass {
        *failures += 1;
    }
}

fn main() {
    // `cargo test -- --list` and filters from the harness are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    report(1, true, criterion_1(), &mut failures);
    report(2, true, criterion_2(), &mut failures);
    report(3, true, criterion_3(), &mut failures);
    report(4, true, criterion_4(), &mut failures);
    report(5, true, criterion_5(), &mut failures);

    let corpus = generate_corpus(dir.path());
    let corpus = match corpus {
        Ok(c) => c,
        Err(e) => {
            for n in 6..=9 {
                report(n, n != 7, Err(anyhow::anyhow!("corpus generation failed: {e:#}")), &mut failures);
            }
            std::process::exit(1);
        }
    };
    report(6, true, criterion_6(dir.path(), &corpus), &mut failures);
    report(7, false, criterion_7(dir.path(), &corpus), &mut failures);
    let det = criterion_9(dir.path(), &corpus);
    let (c9, ckpt) = match det {
        Ok((r, p)) => (Ok(r), Some(p)),
        Err(e) => (Err(e), None),
    };
    let c8 = match &ckpt {
        Some(p) => criterion_8(dir.path(), &corpus, p),
        None => Err(anyhow::anyhow!("no checkpoint from the determinism runs")),
    };
    report(8, true, c8, &mut failures);
    report(9, true, c9, &mut failures);

    if failures > 0 {
        println!("{failures} gated criteria failed");
        std::process::exit(1);
    }
}
