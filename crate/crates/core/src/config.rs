//! Plain-text `key=value` configuration: one pair per line, `#` starts a
//! comment. Used for run configs and checkpoint metadata.

use crate::encoder::{ModelConfig, TcnLayerConfig};
use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::InvalidArgument(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_key_values<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs.iter().map(|(k, v)| format!("{}={}\n", k.as_ref(), v.as_ref())).collect()
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Keys understood by [`ModelConfig::set`].
pub const MODEL_KEYS: &[&str] = &[
    "input_height",
    "input_width",
    "stage_widths",
    "stage_strides",
    "use_ca",
    "use_sa",
    "reduction",
    "tcn_dilations",
    "tcn_kernel",
    "tcn_channels",
    "dropout",
    "num_classes",
    "init",
    "init_std",
];

impl ModelConfig {
    /// Every model setting as `key=value` pairs. The TCN stack must be
    /// uniform apart from dilation.
    pub fn to_pairs(&self) -> Result<Vec<(String, String)>> {
        let b = &self.backbone;
        let first = self.tcn.first().cloned().unwrap_or(TcnLayerConfig { kernel: 3, channels: 256, dilation: 1, dropout: 0.3 });
        if self.tcn.iter().any(|l| l.kernel != first.kernel || l.channels != first.channels || l.dropout != first.dropout)
        {
            return Err(Error::InvalidArgument("only uniform TCN stacks can be written as key=value".into()));
        }
        let values = [
            b.input_height.to_string(),
            b.input_width.to_string(),
            join(&b.stage_widths),
            b.stage_strides.iter().map(|(h, w)| format!("{h}x{w}")).collect::<Vec<_>>().join(","),
            b.use_ca.to_string(),
            b.use_sa.to_string(),
            b.reduction.to_string(),
            join(self.tcn.iter().map(|l| l.dilation)),
            first.kernel.to_string(),
            first.channels.to_string(),
            first.dropout.to_string(),
            self.num_classes.to_string(),
            self.init.to_string(),
            self.init_std.to_string(),
        ];
        Ok(MODEL_KEYS.iter().map(|k| k.to_string()).zip(values).collect())
    }

    /// Applies one setting. Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = &mut self.backbone;
        match key {
            "input_height" => b.input_height = parse_value(key, value)?,
            "input_width" => b.input_width = parse_value(key, value)?,
            "stage_widths" => b.stage_widths = parse_list(key, value)?,
            "stage_strides" => {
                b.stage_strides = value
                    .split(',')
                    .map(|s| {
                        let (h, w) = s
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| Error::InvalidArgument(format!("{key}: expected HxW, got {s:?}")))?;
                        Ok((parse_value(key, h)?, parse_value(key, w)?))
                    })
                    .collect::<Result<_>>()?
            }
            "use_ca" => b.use_ca = parse_bool(key, value)?,
            "use_sa" => b.use_sa = parse_bool(key, value)?,
            "reduction" => b.reduction = parse_value(key, value)?,
            "tcn_dilations" => {
                let template =
                    self.tcn.first().cloned().unwrap_or(TcnLayerConfig { kernel: 3, channels: 256, dilation: 1, dropout: 0.3 });
                self.tcn = TcnLayerConfig::stack(template.kernel, template.channels, &parse_list(key, value)?, template.dropout);
            }
            "tcn_kernel" => {
                let k = parse_value(key, value)?;
                self.tcn.iter_mut().for_each(|l| l.kernel = k);
            }
            "tcn_channels" => {
                let c = parse_value(key, value)?;
                self.tcn.iter_mut().for_each(|l| l.channels = c);
            }
            "dropout" => {
                let d = parse_value(key, value)?;
                self.tcn.iter_mut().for_each(|l| l.dropout = d);
            }
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "init" => self.init = value.parse()?,
            "init_std" => self.init_std = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from pairs over the defaults. Unknown keys are errors.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = Self::default();
        // the dilation list rebuilds the stack, so it goes first
        let mut ordered: Vec<&(K, V)> = pairs.iter().collect();
        ordered.sort_by_key(|(k, _)| k.as_ref() != "tcn_dilations");
        for (k, v) in ordered {
            if !cfg.set(k.as_ref(), v.as_ref())? {
                return Err(Error::InvalidArgument(format!("unknown model key {:?}", k.as_ref())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
