//! Browser demo bindings: render a synthetic sample, trace a TCN impulse,
//! and show the spatial attention of a model on a rendered sample.
//!
//! Each binding wraps a plain function that returns `Result<_, String>` so
//! the logic is testable off the browser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use tce_core::checkpoint::Checkpoint;
use tce_core::data::{render_sample, GlyphBank, SampleSpec, IMAGE_HEIGHT, IMAGE_WIDTH};
use tce_core::encoder::{stage_attention, tcn_layer, Init, Model, ModelConfig, TcnLayerConfig, TcnLayerParams};
use tce_core::Tensor;

pub const WIDTH: usize = IMAGE_WIDTH;
pub const HEIGHT: usize = IMAGE_HEIGHT;

/// Renders `text` as `HEIGHT x WIDTH` grayscale bytes. `clean` drops jitter,
/// noise, contrast changes and inversion.
pub fn render(text: &str, seed: u32, clean: bool) -> Result<Vec<u8>, String> {
    let bank = GlyphBank::new(u64::from(seed));
    let spec = if clean {
        SampleSpec::clean(text)
    } else {
        let mut spec = SampleSpec::random(&mut ChaCha8Rng::seed_from_u64(u64::from(seed)));
        spec.jitter.resize(text.chars().count(), (0, 0));
        spec.text = text.to_string();
        spec
    };
    Ok(render_sample(&spec, &bank, u64::from(seed)).map_err(|e| e.to_string())?.pixels)
}

/// Which of `length` time steps an impulse at step 0 reaches after each of
/// `layers` TCN layers (dilations 1, 2, 4, ...). Row 0 is the input; the
/// result is `(layers + 1) x length` zeros and ones.
pub fn impulse_response(layers: usize, kernel: usize, length: usize) -> Result<Vec<u8>, String> {
    if kernel == 0 || length == 0 || layers > 12 {
        return Err("need kernel >= 1, length >= 1 and at most 12 layers".into());
    }
    let mut x = Tensor::<f64>::zeros([1, 1, length]);
    x.data_mut()[0] = 1.0;
    let mut rows: Vec<u8> = x.data().iter().map(|&v| u8::from(v != 0.0)).collect();
    for i in 0..layers {
        let cfg = TcnLayerConfig { kernel, channels: 1, dilation: 1 << i, dropout: 0.0 };
        // positive weights keep every ReLU in its linear region
        x = tcn_layer(&x, &cfg, &TcnLayerParams::ones(1, &cfg), false, 0).map_err(|e| e.to_string())?;
        rows.extend(x.data().iter().map(|&v| u8::from(v != 0.0)));
    }
    Ok(rows)
}

/// Spatial attention of one backbone stage.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

#[wasm_bindgen]
impl AttentionMap {
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major values in (0, 1).
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f32> {
        self.values.clone()
    }
}

/// The model behind [`attention`]: the given checkpoint, or a freshly
/// initialised full-size model when `checkpoint` is empty.
pub fn demo_model(checkpoint: &[u8], seed: u32) -> Result<Model<f32>, String> {
    if checkpoint.is_empty() {
        let config = ModelConfig { init: Init::HeZeroResidual, ..ModelConfig::default() };
        Model::init(config, u64::from(seed)).map_err(|e| e.to_string())
    } else {
        Ok(Checkpoint::from_bytes(checkpoint).map_err(|e| e.to_string())?.model)
    }
}

/// Spatial attention of backbone stage `stage` (0-based) on a rendering of
/// `text`.
pub fn attention(text: &str, seed: u32, stage: usize, checkpoint: &[u8]) -> Result<AttentionMap, String> {
    let model = demo_model(checkpoint, seed)?;
    let cfg = &model.config.backbone;
    if (cfg.input_height, cfg.input_width) != (HEIGHT, WIDTH) {
        return Err(format!("model expects {}x{} images", cfg.input_height, cfg.input_width));
    }
    let pixels = render(text, seed, false)?;
    let image = tce_core::data::Sample { text: text.to_string(), pixels }.image::<f32>();
    let maps = stage_attention(&image, &model).map_err(|e| e.to_string())?;
    let map = maps.get(stage).ok_or_else(|| format!("stage {stage} out of range (model has {})", maps.len()))?;
    let spatial = map.spatial.as_ref().ok_or("this model has spatial attention switched off")?;
    let s = spatial.shape();
    Ok(AttentionMap { height: s[2], width: s[3], values: spatial.data().to_vec() })
}

#[wasm_bindgen]
pub fn render_digits(text: &str, seed: u32, clean: bool) -> Result<Vec<u8>, JsError> {
    render(text, seed, clean).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tcn_impulse_response(layers: usize, kernel: usize, length: usize) -> Result<Vec<u8>, JsError> {
    impulse_response(layers, kernel, length).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn spatial_attention_map(text: &str, seed: u32, stage: usize, checkpoint: &[u8]) -> Result<AttentionMap, JsError> {
    attention(text, seed, stage, checkpoint).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn image_width() -> usize {
    WIDTH
}

#[wasm_bindgen]
pub fn image_height() -> usize {
    HEIGHT
}
