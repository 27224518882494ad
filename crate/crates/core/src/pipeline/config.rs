//! Model hyperparameters and the `key = value` config file format.

use std::fmt;
use std::str::FromStr;

use crate::dbtc::{DbtcConfig, DistanceMode, PositionMode};
use crate::error::{Error, Result};
use crate::mfad::STAGES;

/// How the two stage-1 modality maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Mif,
    Add,
    /// Channel concatenation projected back to `C₁`.
    Cat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderMode {
    /// Distance to learnable class tokens.
    #[default]
    Euclid,
    /// Per-pixel two-layer perceptron.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    #[default]
    Dbtc,
    /// 2×2 mean pooling of the stage grid.
    Pool,
}

macro_rules! keyword_enum {
    ($ty:ty, $field:literal, $($word:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    other => Err(Error::config($field, format!("unknown value {other:?}"))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let word = match self {
                    $(v if *v == $variant => $word,)+
                    _ => unreachable!(),
                };
                f.write_str(word)
            }
        }
    };
}

keyword_enum!(FusionMode, "fusion", "mif" => FusionMode::Mif, "add" => FusionMode::Add, "cat" => FusionMode::Cat);
keyword_enum!(DecoderMode, "decoder", "euclid" => DecoderMode::Euclid, "mlp" => DecoderMode::Mlp);
keyword_enum!(DownsampleMode, "downsample", "dbtc" => DownsampleMode::Dbtc, "pool" => DownsampleMode::Pool);
keyword_enum!(PositionMode, "position", "none" => PositionMode::None, "pe" => PositionMode::Sinusoidal, "pce" => PositionMode::Learnable);
keyword_enum!(DistanceMode, "distance", "printed" => DistanceMode::Printed, "symmetric" => DistanceMode::Symmetric);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; STAGES],
    /// Transformer blocks per stage; stage 1 runs its blocks once per modality.
    pub depths: [usize; STAGES],
    pub heads: usize,
    pub window: usize,
    /// `τ` for the downsampling into stages 2, 3 and 4.
    pub tau: [f64; STAGES - 1],
    pub k: usize,
    pub ratio: f64,
    pub distance: DistanceMode,
    pub fusion: FusionMode,
    pub position: PositionMode,
    pub decoder: DecoderMode,
    pub downsample: DownsampleMode,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: 2,
            window: 8,
            tau: [0.3, 0.7, 1.0],
            k: 5,
            ratio: 0.25,
            distance: DistanceMode::Printed,
            fusion: FusionMode::Mif,
            position: PositionMode::Learnable,
            decoder: DecoderMode::Euclid,
            downsample: DownsampleMode::Dbtc,
            classes: 3,
            height: 64,
            width: 64,
        }
    }
}

/// Keys understood by [`ModelConfig::set`].
pub const MODEL_KEYS: &[&str] = &[
    "channels",
    "depths",
    "heads",
    "window",
    "tau",
    "k",
    "ratio",
    "distance",
    "fusion",
    "position",
    "decoder",
    "downsample",
    "classes",
    "height",
    "width",
];

fn parse_num<N: FromStr>(field: &str, s: &str) -> Result<N> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse {s:?}")))
}

fn parse_list<N: FromStr + Copy, const L: usize>(field: &str, s: &str) -> Result<[N; L]> {
    let items: Vec<N> = s.split(',').map(|p| parse_num(field, p)).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|v: Vec<N>| Error::config(field, format!("expected {L} comma-separated values, got {}", v.len())))
}

fn join<N: fmt::Display>(xs: &[N]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Grid of stage `n` (0-based): `H/4×W/4`, then halved with ceil per stage.
    pub fn stage_grid(&self, n: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.height / 4, self.width / 4);
        for _ in 0..n {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Clustering settings for the step into stage `n + 1` (0-based `n` in `0..3`).
    pub fn dbtc(&self, n: usize) -> DbtcConfig {
        DbtcConfig {
            tau: self.tau[n],
            k: self.k,
            ratio: self.ratio,
            mode: self.distance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("channels", "widths must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be positive"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return Err(Error::config("heads", format!("{} heads do not divide width {c}", self.heads)));
        }
        if let Some(t) = self.tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::config("tau", format!("{t} outside [0, 1]")));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config("ratio", format!("{} outside (0, 1]", self.ratio)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2"));
        }
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 4 != 0 {
                return Err(Error::config(field, format!("{v} is not a positive multiple of 4")));
            }
        }
        let (h1, w1) = self.stage_grid(0);
        if self.fusion == FusionMode::Mif && (self.window == 0 || self.window > h1 || self.window > w1) {
            return Err(Error::config("window", format!("{} does not fit the {h1}×{w1} stage-1 grid", self.window)));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_list(key, value)?,
            "depths" => self.depths = parse_list(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "tau" => self.tau = parse_list(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "ratio" => self.ratio = parse_num(key, value)?,
            "distance" => self.distance = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "position" => self.position = value.parse()?,
            "decoder" => self.decoder = value.parse()?,
            "downsample" => self.downsample = value.parse()?,
            "classes" => self.classes = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a file holding only model keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for entry in parse_entries(text)? {
            if !cfg.set(&entry.key, &entry.value)? {
                return Err(Error::config(entry.key, format!("unknown key on line {}", entry.line)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field in the config file format.
    pub fn to_text(&self) -> String {
        [
            ("channels", join(&self.channels)),
            ("depths", join(&self.depths)),
            ("heads", self.heads.to_string()),
            ("window", self.window.to_string()),
            ("tau", join(&self.tau)),
            ("k", self.k.to_string()),
            ("ratio", self.ratio.to_string()),
            ("distance", self.distance.to_string()),
            ("fusion", self.fusion.to_string()),
            ("position", self.position.to_string()),
            ("decoder", self.decoder.to_string()),
            ("downsample", self.downsample.to_string()),
            ("classes", self.classes.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}

/// One `key = value` line of a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits config text into entries; `#` starts a comment, blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config("config", format!("line {}: expected `key = value`", i + 1)));
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(Error::config("config", format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::config(key, format!("line {}: key repeated", i + 1)));
        }
        out.push(ConfigEntry {
            key: key.to_string(),
            value: value.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = ModelConfig {
            fusion: FusionMode::Cat,
            position: PositionMode::Sinusoidal,
            tau: [0.0, 0.5, 1.0],
            ratio: 0.3,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_comments_and_defaults() {
        let cfg = ModelConfig::parse("# toy\nheight = 32 # small\n\nwidth=32\nfusion = add\n").unwrap();
        assert_eq!((cfg.height, cfg.width, cfg.fusion), (32, 32, FusionMode::Add));
        assert_eq!(cfg.channels, [16, 32, 64, 128]);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match ModelConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("colour = red"), "colour");
        assert_eq!(field("tau = 0.3,0.7"), "tau");
        assert_eq!(field("tau = 0.3,0.7,1.5"), "tau");
        assert_eq!(field("ratio = 0"), "ratio");
        assert_eq!(field("height = 30"), "height");
        assert_eq!(field("heads = 3"), "heads");
        assert_eq!(field("fusion = concat"), "fusion");
        assert_eq!(field("window = 32"), "window");
        assert_eq!(field("k = 1\nk = 2"), "k");
        assert_eq!(field("just words"), "config");
    }

    #[test]
    fn stage_grids_halve_with_ceil() {
        let cfg = ModelConfig {
            height: 40,
            width: 32,
            ..ModelConfig::default()
        };
        let grids: Vec<_> = (0..4).map(|n| cfg.stage_grid(n)).collect();
        assert_eq!(grids, vec![(10, 8), (5, 4), (3, 2), (2, 1)]);
    }
}
