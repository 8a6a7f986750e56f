//! Procedural digit-string images and the `TCED` dataset file.
//!
//! Glyphs are random blobs, box-blurred and binarized, one fixed template per
//! digit. No fonts or downloads are involved; every corpus is a pure function
//! of its seeds.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TCED" | version u16 = 1 | count u32 | height u16 | width u16
//! per sample: label length u8 | label bytes (ASCII) | height*width u8 pixels
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::{Alphabet, LabelSeq};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 100;
pub const GLYPH_HEIGHT: usize = 16;
pub const GLYPH_WIDTH: usize = 12;
/// Horizontal gap between neighbouring glyph boxes.
pub const GLYPH_GAP: usize = 4;
pub const MAX_JITTER_X: i32 = 2;
pub const MAX_JITTER_Y: i32 = 3;
pub const MAX_TEXT_LEN: usize = 5;

const DATASET_MAGIC: [u8; 4] = *b"TCED";
const DATASET_VERSION: u16 = 1;

/// Maps a stored byte to the open interval (-1, 1).
pub fn normalize_pixel(byte: u8) -> f64 {
    (byte as f64 + 0.5) / 128.0 - 1.0
}

/// One binary template per digit.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBank {
    glyphs: Vec<Vec<f32>>,
}

impl GlyphBank {
    pub fn new(seed: u64) -> Self {
        let mut glyphs: Vec<Vec<f32>> = Vec::with_capacity(10);
        let mut salt = 0;
        while glyphs.len() < 10 {
            let candidate = blob(derive_seed(seed, glyphs.len() as u64 + 1000 * salt));
            if glyphs.contains(&candidate) {
                salt += 1;
                continue;
            }
            glyphs.push(candidate);
        }
        Self { glyphs }
    }

    /// `GLYPH_HEIGHT x GLYPH_WIDTH` row-major template for digit `d`.
    pub fn glyph(&self, digit: usize) -> &[f32] {
        &self.glyphs[digit]
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

/// Deterministic glyph bank for `seed`.
pub fn make_glyph_bank(seed: u64) -> GlyphBank {
    GlyphBank::new(seed)
}

fn blob(seed: u64) -> Vec<f32> {
    let (h, w) = (GLYPH_HEIGHT, GLYPH_WIDTH);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
    for _ in 0..2 {
        field = box_blur(&field, h, w);
    }
    // keep the brightest 45%
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; h * w];
    for &i in &order[..h * w * 45 / 100] {
        out[i] = 1.0;
    }
    out
}

fn box_blur(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    acc += src[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

/// Everything that varies between rendered samples except pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub text: String,
    /// Per-glyph `(dx, dy)` offsets in pixels.
    pub jitter: Vec<(i32, i32)>,
    /// Foreground intensity in `[0.6, 1.0]`.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise, in `[0, 0.1]`.
    pub noise_sigma: f64,
    /// Dark text on a light background.
    pub inverted: bool,
}

impl SampleSpec {
    /// Centered glyphs, full contrast, no noise.
    pub fn clean(text: &str) -> Self {
        Self {
            text: text.to_string(),
            jitter: vec![(0, 0); text.chars().count()],
            contrast: 1.0,
            noise_sigma: 0.0,
            inverted: false,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let len = rng.random_range(1..=MAX_TEXT_LEN);
        let text: String = (0..len).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
        let jitter = (0..len)
            .map(|_| (rng.random_range(-MAX_JITTER_X..=MAX_JITTER_X), rng.random_range(-MAX_JITTER_Y..=MAX_JITTER_Y)))
            .collect();
        Self {
            text,
            jitter,
            contrast: rng.random_range(0.6..=1.0),
            noise_sigma: rng.random_range(0.0..=0.1),
            inverted: rng.random_bool(0.2),
        }
    }

    /// Left edge of the first glyph box before jitter.
    fn origin_x(&self) -> Result<usize> {
        let n = self.text.chars().count();
        if n == 0 {
            return Err(Error::TextDoesNotFit { text: self.text.clone(), reason: "empty text".into() });
        }
        if n > MAX_TEXT_LEN {
            return Err(Error::TextDoesNotFit {
                text: self.text.clone(),
                reason: format!("{n} digits, at most {MAX_TEXT_LEN} allowed"),
            });
        }
        let span = n * GLYPH_WIDTH + (n - 1) * GLYPH_GAP;
        let margin = 2 * MAX_JITTER_X as usize;
        if span + margin > IMAGE_WIDTH {
            return Err(Error::TextDoesNotFit {
                text: self.text.clone(),
                reason: format!("{n} glyphs need {} columns, canvas has {IMAGE_WIDTH}", span + margin),
            });
        }
        Ok((IMAGE_WIDTH - span) / 2)
    }
}

/// Rendered image (stored bytes) plus its text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub text: String,
    /// `IMAGE_HEIGHT x IMAGE_WIDTH` row-major bytes.
    pub pixels: Vec<u8>,
}

impl Sample {
    /// Pixels normalized to (-1, 1).
    pub fn image<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, IMAGE_HEIGHT, IMAGE_WIDTH], |i| T::from_f64(normalize_pixel(self.pixels[i])))
    }

    pub fn label(&self) -> Result<LabelSeq> {
        Alphabet::digits().encode(&self.text)
    }
}

/// Composites the glyphs of `spec`, adds noise drawn from `seed`, and
/// quantizes to bytes.
pub fn render_sample(spec: &SampleSpec, bank: &GlyphBank, seed: u64) -> Result<Sample> {
    let x0 = spec.origin_x()?;
    let digits: Vec<usize> = spec
        .text
        .chars()
        .map(|c| {
            c.to_digit(10).map(|d| d as usize).ok_or_else(|| Error::InvalidArgument(format!("{c:?} is not a digit")))
        })
        .collect::<Result<_>>()?;
    if spec.jitter.len() != digits.len() {
        return Err(Error::InvalidArgument("need one jitter offset per glyph".into()));
    }
    let y0 = (IMAGE_HEIGHT - GLYPH_HEIGHT) as i32 / 2;
    let mut canvas = vec![0.0f64; IMAGE_HEIGHT * IMAGE_WIDTH];
    for (j, (&d, &(dx, dy))) in digits.iter().zip(&spec.jitter).enumerate() {
        if dx.abs() > MAX_JITTER_X || dy.abs() > MAX_JITTER_Y {
            return Err(Error::InvalidArgument(format!("jitter ({dx}, {dy}) out of range")));
        }
        let left = (x0 + j * (GLYPH_WIDTH + GLYPH_GAP)) as i32 + dx;
        let top = y0 + dy;
        let glyph = bank.glyph(d);
        for r in 0..GLYPH_HEIGHT {
            for c in 0..GLYPH_WIDTH {
                let idx = (top as usize + r) * IMAGE_WIDTH + left as usize + c;
                canvas[idx] = canvas[idx].max(spec.contrast * glyph[r * GLYPH_WIDTH + c] as f64);
            }
        }
    }
    if spec.inverted {
        canvas.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        canvas.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let pixels = canvas.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(Sample { text: spec.text.clone(), pixels })
}

/// Corpus partition; each draws from its own seed range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }

    /// Seed of sample `index`; ranges of different splits never overlap for
    /// fewer than 2^40 samples.
    pub fn sample_seed(self, master: u64, index: u64) -> u64 {
        master.wrapping_add(self.offset()).wrapping_add(index)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `count` samples of `split`; the glyph bank is keyed by `master` alone
    /// so every split shares the same glyphs.
    pub fn generate(count: usize, master: u64, split: Split) -> Result<Self> {
        let bank = GlyphBank::new(master);
        let samples = (0..count as u64)
            .map(|i| {
                let seed = split.sample_seed(master, i);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = SampleSpec::random(&mut rng);
                render_sample(&spec, &bank, rng.random())
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images `[n, 1, H, W]` and labels for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize], alphabet: &Alphabet) -> Result<(Tensor<T>, Vec<LabelSeq>)> {
        let per = IMAGE_HEIGHT * IMAGE_WIDTH;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.pixels.iter().map(|&b| T::from_f64(normalize_pixel(b))));
            labels.push(alphabet.encode(&s.text)?);
        }
        Ok((Tensor::new([indices.len(), 1, IMAGE_HEIGHT, IMAGE_WIDTH], data)?, labels))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per = IMAGE_HEIGHT * IMAGE_WIDTH;
        let mut out = Vec::with_capacity(14 + self.samples.len() * (per + 6));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let count = u32::try_from(self.samples.len())
            .map_err(|_| Error::InvalidArgument("too many samples for the file format".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(IMAGE_HEIGHT as u16).to_le_bytes());
        out.extend_from_slice(&(IMAGE_WIDTH as u16).to_le_bytes());
        for s in &self.samples {
            let len = u8::try_from(s.text.len())
                .map_err(|_| Error::InvalidArgument(format!("label {:?} longer than 255 bytes", s.text)))?;
            if !s.text.is_ascii() || s.pixels.len() != per {
                return Err(Error::InvalidArgument(format!("sample {:?} is not storable", s.text)));
            }
            out.push(len);
            out.extend_from_slice(s.text.as_bytes());
            out.extend_from_slice(&s.pixels);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic { expected: DATASET_MAGIC, found: magic });
        }
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: DATASET_VERSION });
        }
        let count = r.u32("sample count")? as usize;
        let (h, w) = (r.u16("height")? as usize, r.u16("width")? as usize);
        if (h, w) != (IMAGE_HEIGHT, IMAGE_WIDTH) {
            return Err(Error::Malformed(format!("image size {h}x{w}, expected {IMAGE_HEIGHT}x{IMAGE_WIDTH}")));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = r.take(1, "label length")?[0] as usize;
            let text = std::str::from_utf8(r.take(len, "label")?)
                .map_err(|_| Error::Malformed(format!("sample {i}: label is not ASCII")))?
                .to_string();
            let pixels = r.take(h * w, "pixels")?.to_vec();
            samples.push(Sample { text, pixels });
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("empty output path".into()));
        }
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Generates `count` samples of `split` and writes them to `path`.
pub fn generate_dataset(count: usize, master: u64, split: Split, path: &Path) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("empty output path".into()));
    }
    let ds = Dataset::generate(count, master, split)?;
    ds.write(path)?;
    Ok(ds)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
