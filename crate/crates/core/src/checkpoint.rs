//! The `TCE1` checkpoint file.
//!
//! ```text
//! "TCE1" | version u16 = 1 | manifest length u32 | manifest | blobs
//! ```
//!
//! The manifest is UTF-8 text. Lines `%key=value` carry the model
//! configuration and training progress; every other line reads
//! `name dims... offset length` and locates one little-endian `f32` tensor,
//! with offset and length in bytes from the start of the blob section.
//! Optimizer accumulators live under `opt/sq_grad/<param>` and
//! `opt/sq_update/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Reader;
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::AdaDeltaState;

pub const MAGIC: [u8; 4] = *b"TCE1";
pub const VERSION: u16 = 1;

const SQ_GRAD: &str = "opt/sq_grad/";
const SQ_UPDATE: &str = "opt/sq_update/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdaDeltaState<f32>>,
    /// Training iterations behind these weights.
    pub iteration: usize,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self { model, optimizer: None, iteration: 0 }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.model.config.to_pairs()?;
        meta.push(("iteration".into(), self.iteration.to_string()));
        if let Some(opt) = &self.optimizer {
            meta.push(("opt_rho".into(), opt.rho.to_string()));
            meta.push(("opt_eps".into(), opt.eps.to_string()));
        }
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.model.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.sq_grad.iter().map(|(k, v)| (format!("{SQ_GRAD}{k}"), v)));
            tensors.extend(opt.sq_update.iter().map(|(k, v)| (format!("{SQ_UPDATE}{k}"), v)));
        }

        let mut manifest = String::new();
        for (k, v) in &meta {
            manifest.push_str(&format!("%{k}={v}\n"));
        }
        let mut blobs = Vec::new();
        for (name, t) in &tensors {
            if name.contains(char::is_whitespace) || name.starts_with('%') {
                return Err(Error::InvalidArgument(format!("tensor name {name:?} cannot be stored")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} {} {} {}\n", dims.join(" "), blobs.len(), 4 * t.len()));
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| Error::InvalidArgument("manifest exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(10 + manifest.len() + blobs.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
        }
        let len = r.u32("manifest length")? as usize;
        let manifest = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|_| Error::Malformed("manifest is not UTF-8".into()))?;
        let blobs = &bytes[r.pos..];

        let mut meta: Vec<(String, String)> = Vec::new();
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for line in manifest.lines() {
            if let Some(kv) = line.strip_prefix('%') {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Malformed(format!("metadata line {line:?}")))?;
                meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let (name, tensor) = parse_tensor_line(line, blobs)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Malformed(format!("tensor {name} listed twice")));
            }
        }

        let mut iteration = 0;
        let (mut rho, mut eps) = (None, None);
        let mut model_pairs = Vec::new();
        for (k, v) in meta {
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Malformed(format!("{k}={v}")));
            match k.as_str() {
                "iteration" => iteration = v.parse().map_err(|_| Error::Malformed(format!("iteration={v}")))?,
                "opt_rho" => rho = Some(num(&v)?),
                "opt_eps" => eps = Some(num(&v)?),
                _ => model_pairs.push((k, v)),
            }
        }
        let config = ModelConfig::from_pairs(&model_pairs).map_err(|e| Error::Malformed(format!("config: {e}")))?;

        let mut sq_grad = BTreeMap::new();
        let mut sq_update = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix(SQ_GRAD) {
                sq_grad.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(SQ_UPDATE) {
                sq_update.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let model = Model::from_params(config, params)?;
        let optimizer = match (rho, eps) {
            (Some(rho), Some(eps)) => {
                for acc in [&sq_grad, &sq_update] {
                    check_mirrors(&model.params, acc)?;
                }
                Some(AdaDeltaState { rho, eps, sq_grad, sq_update })
            }
            (None, None) if sq_grad.is_empty() && sq_update.is_empty() => None,
            _ => return Err(Error::Malformed("incomplete optimizer state".into())),
        };
        Ok(Self { model, optimizer, iteration })
    }
}

fn parse_tensor_line(line: &str, blobs: &[u8]) -> Result<(String, Tensor<f32>)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(Error::Malformed(format!("manifest line {line:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("manifest line {line:?}")));
    let name = fields[0].to_string();
    let dims = fields[1..fields.len() - 2].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
    let offset = parse(fields[fields.len() - 2])?;
    let length = parse(fields[fields.len() - 1])?;
    let count: usize = dims.iter().product();
    if length != 4 * count {
        return Err(Error::Malformed(format!("{name}: {length} bytes for shape {dims:?}")));
    }
    let end = offset.checked_add(length).filter(|&e| e <= blobs.len()).ok_or_else(|| {
        Error::Truncated(format!("{name}: bytes {offset}..{} past blob section of {}", offset + length, blobs.len()))
    })?;
    let data = blobs[offset..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((name, Tensor::new(dims, data)?))
}

fn check_mirrors(params: &BTreeMap<String, Tensor<f32>>, acc: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, p) in params {
        let a = acc.get(name).ok_or_else(|| Error::MissingParameter(format!("optimizer state for {name}")))?;
        if a.shape() != p.shape() {
            return Err(Error::ParameterShape {
                name: format!("opt/{name}"),
                expected: p.shape().to_vec(),
                found: a.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = acc.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::Malformed(format!("optimizer state for unknown parameter {extra}")));
    }
    Ok(())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BackboneConfig, TcnLayerConfig};

    fn small() -> Checkpoint {
        let config = ModelConfig {
            backbone: BackboneConfig { stage_widths: vec![4, 4, 8, 8], reduction: 2, ..Default::default() },
            tcn: TcnLayerConfig::stack(3, 8, &[1, 2, 4, 8], 0.3),
            ..Default::default()
        };
        let model = Model::init(config, 4).unwrap();
        let mut opt = AdaDeltaState::new(&model.params);
        opt.sq_grad.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.25));
        Checkpoint { model, optimizer: Some(opt), iteration: 17 }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tce");
        let ckpt = small();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let again = dir.path().join("m2.tce");
        save_checkpoint(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        let plain = Checkpoint::new(ckpt.model.clone());
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);
    }

    #[test]
    fn corruption_maps_to_distinct_errors() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"TCE2");
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..8]), Err(Error::Truncated(_))));

        // rewrite one manifest shape so it disagrees with the config
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
        let edited = manifest.replacen("head.bias 11 ", "head.bias 1 11 ", 1);
        assert_ne!(edited, manifest);
        let mut bad = bytes[..6].to_vec();
        bad.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        bad.extend_from_slice(edited.as_bytes());
        bad.extend_from_slice(&bytes[10 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::ParameterShape { .. })));
    }
}
