use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// One first-level temporal layer: valid 1D convolution, batch norm, ReLU,
/// then an optional max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalLayer {
    pub filter: usize,
    pub stride: usize,
    pub pad: usize,
    /// Pool window; 1 means no pooling.
    pub pool: usize,
}

/// Architecture geometry.
///
/// The frame encoder is a stack of 3x3 stride-1 "same" convolutions whose
/// channel counts follow `s_channels` (the first entry is the input channel
/// count); a 2x2 max-pool follows every layer that increases the channel
/// count. The first-level temporal encoder is `g1_layers`; its accumulated
/// receptive field and stride must equal `window` and `stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Frames are resized to this square size before cropping to the input size.
    pub resize: usize,
    pub s_channels: Vec<usize>,
    pub g1_layers: Vec<TemporalLayer>,
    pub g2_filter: usize,
    pub f_s: usize,
    pub f_g: usize,
    pub f_g2: usize,
    pub vocab_size: usize,
    pub window: usize,
    pub stride: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

const G1_DEFAULT: [TemporalLayer; 2] = [
    TemporalLayer { filter: 5, stride: 1, pad: 0, pool: 2 },
    TemporalLayer { filter: 5, stride: 1, pad: 0, pool: 2 },
];

impl ModelConfig {
    /// 224x224 network with the full 3-32-...-512 frame encoder.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            preset: "paper".into(),
            input_channels: 3,
            input_height: 224,
            input_width: 224,
            resize: 256,
            s_channels: vec![3, 32, 64, 64, 128, 128, 256, 256, 512, 512],
            g1_layers: G1_DEFAULT.to_vec(),
            g2_filter: 3,
            f_s: 512,
            f_g: 512,
            f_g2: 1024,
            vocab_size,
            window: 16,
            stride: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// 32x32 desk-scale network, same temporal geometry.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            preset: "tiny".into(),
            input_height: 32,
            input_width: 32,
            resize: 36,
            s_channels: vec![3, 16, 32, 64],
            f_s: 64,
            f_g: 64,
            f_g2: 128,
            ..Self::paper(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(vocab_size)),
            "tiny" => Ok(Self::tiny(vocab_size)),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected \"paper\" or \"tiny\")"))),
        }
    }

    /// Number of output classes including blank.
    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Blank is the last class.
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Accumulated `(receptive field, stride)` of the first-level encoder.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut rf, mut jump) = (1, 1);
        for l in &self.g1_layers {
            rf += (l.filter - 1) * jump;
            jump *= l.stride;
            if l.pool > 1 {
                rf += (l.pool - 1) * jump;
                jump *= l.pool;
            }
        }
        (rf, jump)
    }

    /// Gloss steps produced from `t` frames, `None` when `t < window`.
    pub fn steps_for(&self, t: usize) -> Option<usize> {
        (t >= self.window).then(|| (t - self.window) / self.stride + 1)
    }

    /// Spatial extent after the frame encoder's pools.
    pub fn feature_map(&self) -> (usize, usize) {
        let pools = self.s_channels.windows(2).filter(|w| w[1] > w[0]).count();
        (self.input_height >> pools, self.input_width >> pools)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.s_channels.len() < 2 || self.s_channels[0] != self.input_channels {
            return fail(format!(
                "s_channels {:?} must start with input_channels {}",
                self.s_channels, self.input_channels
            ));
        }
        if *self.s_channels.last().unwrap() != self.f_s {
            return fail(format!("f_s {} must equal the last frame-encoder width", self.f_s));
        }
        let (fh, fw) = self.feature_map();
        if fh == 0 || fw == 0 {
            return fail("frame encoder pools away the whole frame".into());
        }
        if self.g1_layers.is_empty() {
            return fail("g1_layers is empty".into());
        }
        if self.g1_layers.iter().any(|l| l.filter == 0 || l.stride == 0 || l.pool == 0) {
            return fail("g1 filter, stride and pool must be >= 1".into());
        }
        if self.g1_layers.iter().any(|l| l.pad != 0) {
            return fail("first-level temporal layers must be unpadded".into());
        }
        if self.g2_filter.is_multiple_of(2) {
            return fail(format!("g2_filter {} must be odd", self.g2_filter));
        }
        let (rf, st) = self.receptive_field();
        if (rf, st) != (self.window, self.stride) {
            return fail(format!(
                "g1 layers give window {rf} stride {st}, configured {} / {}",
                self.window, self.stride
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        Ok(())
    }

    /// `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let g1 = self
            .g1_layers
            .iter()
            .map(|l| format!("{}/{}/{}/{}", l.filter, l.stride, l.pad, l.pool))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "resize = {}", self.resize);
        let _ = writeln!(s, "s_channels = {}", join(&self.s_channels));
        let _ = writeln!(s, "g1_layers = {g1}");
        let _ = writeln!(s, "g2_filter = {}", self.g2_filter);
        let _ = writeln!(s, "f_s = {}", self.f_s);
        let _ = writeln!(s, "f_g = {}", self.f_g);
        let _ = writeln!(s, "f_g2 = {}", self.f_g2);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "bn_momentum = {}", self.bn_momentum);
        let _ = writeln!(s, "bn_eps = {}", self.bn_eps);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::tiny(1);
        let mut seen_preset = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| e.to_string())
            }
            let list = |v: &str| -> std::result::Result<Vec<usize>, String> {
                v.split(',').map(|x| num::<usize>(x.trim())).collect()
            };
            match key {
                "preset" => {
                    // Reserved names start from their defaults; later keys override.
                    if !seen_preset && (value == "paper" || value == "tiny") {
                        let vocab = cfg.vocab_size;
                        cfg = ModelConfig::preset(value, vocab)?;
                    }
                    cfg.preset = value.to_string();
                    seen_preset = true;
                }
                "input_channels" => cfg.input_channels = num(value).map_err(bad)?,
                "input_height" => cfg.input_height = num(value).map_err(bad)?,
                "input_width" => cfg.input_width = num(value).map_err(bad)?,
                "resize" => cfg.resize = num(value).map_err(bad)?,
                "s_channels" => cfg.s_channels = list(value).map_err(bad)?,
                "g1_layers" => {
                    cfg.g1_layers = value
                        .split(',')
                        .map(|l| {
                            let p = l.trim().split('/').map(|x| num::<usize>(x.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
                            match p[..] {
                                [filter, stride, pad, pool] => Ok(TemporalLayer { filter, stride, pad, pool }),
                                _ => Err(format!("expected filter/stride/pad/pool, got {l:?}")),
                            }
                        })
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?
                }
                "g2_filter" => cfg.g2_filter = num(value).map_err(bad)?,
                "f_s" => cfg.f_s = num(value).map_err(bad)?,
                "f_g" => cfg.f_g = num(value).map_err(bad)?,
                "f_g2" => cfg.f_g2 = num(value).map_err(bad)?,
                "vocab_size" => cfg.vocab_size = num(value).map_err(bad)?,
                "window" => cfg.window = num(value).map_err(bad)?,
                "stride" => cfg.stride = num(value).map_err(bad)?,
                "bn_momentum" => cfg.bn_momentum = num(value).map_err(bad)?,
                "bn_eps" => cfg.bn_eps = num(value).map_err(bad)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
