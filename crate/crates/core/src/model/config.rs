use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One vertical convolution of the range image encoder. Kernel width and
/// horizontal stride are always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RieLayer {
    pub kernel_h: usize,
    pub stride_h: usize,
    pub out_channels: usize,
}

impl RieLayer {
    pub const fn new(kernel_h: usize, stride_h: usize, out_channels: usize) -> Self {
        Self {
            kernel_h,
            stride_h,
            out_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    /// Encoder output channels, also the transformer width `c`.
    pub d_model: usize,
    pub n_head: usize,
    pub d_ffn: usize,
    pub num_tm_blocks: usize,
    pub d_inter: usize,
    pub d_output: usize,
    /// NetVLAD cluster count.
    pub k_clusters: usize,
    pub rie_layers: Vec<RieLayer>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size network on 64 x 900 images.
    pub fn full() -> Self {
        Self::with_dims(64, 900, 256, 4, 1024, 1024, 256, 64)
    }

    /// Full-size network on 32 x 360 images.
    pub fn desk() -> Self {
        Self::with_dims(32, 360, 256, 4, 1024, 1024, 256, 64)
    }

    /// Narrow network on 32 x 360 images, trainable on one CPU core in minutes.
    pub fn small() -> Self {
        Self::with_dims(32, 360, 32, 4, 64, 128, 256, 8)
    }

    /// Smallest sensible network, for gradient checks.
    pub fn tiny() -> Self {
        Self::with_dims(8, 36, 16, 2, 32, 32, 16, 4)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_dims(
        h: usize,
        w: usize,
        d_model: usize,
        n_head: usize,
        d_ffn: usize,
        d_inter: usize,
        d_output: usize,
        k_clusters: usize,
    ) -> Self {
        Self {
            h,
            w,
            d_model,
            n_head,
            d_ffn,
            num_tm_blocks: 1,
            d_inter,
            d_output,
            k_clusters,
            rie_layers: default_rie_layers(h, d_model),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (expected full, desk, small or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("w", self.w),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_ffn", self.d_ffn),
            ("d_inter", self.d_inter),
            ("d_output", self.d_output),
            ("k_clusters", self.k_clusters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.rie_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let mut height = self.h;
        for (i, l) in self.rie_layers.iter().enumerate() {
            if l.kernel_h == 0 || l.stride_h == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("encoder layer {i} has a zero dimension")));
            }
            if l.kernel_h > height {
                return Err(Error::Config(format!(
                    "encoder layer {i}: kernel height {} exceeds input height {height}",
                    l.kernel_h
                )));
            }
            height = (height - l.kernel_h) / l.stride_h + 1;
        }
        if height != 1 {
            return Err(Error::Config(format!(
                "encoder layers reduce height {} to {height}, not 1",
                self.h
            )));
        }
        let last = self.rie_layers.last().expect("non-empty").out_channels;
        if last != self.d_model {
            return Err(Error::Config(format!(
                "last encoder layer has {last} channels, d_model is {}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// `key=value` lines, readable by [`ModelConfig::from_sidecar`].
    pub fn to_sidecar(&self) -> String {
        let layers = self
            .rie_layers
            .iter()
            .map(|l| format!("{}:{}:{}", l.kernel_h, l.stride_h, l.out_channels))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        for (k, v) in [
            ("h", self.h),
            ("w", self.w),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_ffn", self.d_ffn),
            ("num_tm_blocks", self.num_tm_blocks),
            ("d_inter", self.d_inter),
            ("d_output", self.d_output),
            ("k_clusters", self.k_clusters),
        ] {
            writeln!(s, "{k}={v}").expect("write to string");
        }
        writeln!(s, "rie_layers={layers}").expect("write to string");
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut cfg = Self {
            h: 0,
            w: 0,
            d_model: 0,
            n_head: 0,
            d_ffn: 0,
            num_tm_blocks: 1,
            d_inter: 0,
            d_output: 0,
            k_clusters: 0,
            rie_layers: Vec::new(),
        };
        let mut seen_layers = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("model config", format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "rie_layers" {
                cfg.rie_layers = parse_rie_layers(value)?;
                seen_layers = true;
                continue;
            }
            let slot = match key {
                "h" => &mut cfg.h,
                "w" => &mut cfg.w,
                "d_model" => &mut cfg.d_model,
                "n_head" => &mut cfg.n_head,
                "d_ffn" => &mut cfg.d_ffn,
                "num_tm_blocks" => &mut cfg.num_tm_blocks,
                "d_inter" => &mut cfg.d_inter,
                "d_output" => &mut cfg.d_output,
                "k_clusters" => &mut cfg.k_clusters,
                other => {
                    return Err(Error::format("model config", format!("unknown key '{other}'")));
                }
            };
            *slot = parse_usize(key, value)?;
        }
        if !seen_layers {
            cfg.rie_layers = default_rie_layers(cfg.h, cfg.d_model);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    usize::from_str(value)
        .map_err(|_| Error::format("model config", format!("{key}: '{value}' is not a non-negative integer")))
}

/// Parses `kernel:stride:channels` triples separated by commas.
pub fn parse_rie_layers(text: &str) -> Result<Vec<RieLayer>> {
    text.split(',')
        .map(|item| {
            let parts: Vec<_> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(Error::format(
                    "model config",
                    format!("rie layer '{item}' is not kernel:stride:channels"),
                ));
            }
            Ok(RieLayer::new(
                parse_usize("rie kernel", parts[0])?,
                parse_usize("rie stride", parts[1])?,
                parse_usize("rie channels", parts[2])?,
            ))
        })
        .collect()
}

/// Encoder layers that bring height `h` to 1 with `c` output channels.
///
/// Heights 64, 32, 16 and 8 use fixed tables; other heights use stride-2
/// kernels of height 3 until at most 3 rows remain, then one collapsing layer.
pub fn default_rie_layers(h: usize, c: usize) -> Vec<RieLayer> {
    let (kernels, strides): (&[usize], &[usize]) = match h {
        64 => (&[5, 3, 3, 3, 2], &[2, 2, 2, 2, 1]),
        32 => (&[5, 3, 3, 2], &[2, 2, 2, 1]),
        16 => (&[3, 3, 3], &[2, 2, 1]),
        8 => (&[3, 3], &[2, 1]),
        _ => {
            let mut layers = Vec::new();
            let mut height = h;
            while height > 3 {
                layers.push((3, 2));
                height = (height - 3) / 2 + 1;
            }
            if height > 1 || layers.is_empty() {
                layers.push((height.max(1), 1));
            }
            return with_channels(&layers, c);
        }
    };
    let pairs: Vec<_> = kernels.iter().copied().zip(strides.iter().copied()).collect();
    with_channels(&pairs, c)
}

/// Channels 16, 32, 64, ... capped at `c`, with the last layer at `c`.
fn with_channels(pairs: &[(usize, usize)], c: usize) -> Vec<RieLayer> {
    let n = pairs.len();
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(k, s))| {
            let ch = if i + 1 == n { c } else { (16usize << i).min(c) };
            RieLayer::new(k, s, ch)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::full(),
            ModelConfig::desk(),
            ModelConfig::small(),
            ModelConfig::tiny(),
        ] {
            cfg.validate().unwrap();
        }
        assert_eq!(
            ModelConfig::full().rie_layers,
            vec![
                RieLayer::new(5, 2, 16),
                RieLayer::new(3, 2, 32),
                RieLayer::new(3, 2, 64),
                RieLayer::new(3, 2, 128),
                RieLayer::new(2, 1, 256),
            ]
        );
    }

    #[test]
    fn generic_layer_rule_reaches_height_one() {
        for h in 1..100 {
            let cfg = ModelConfig {
                rie_layers: default_rie_layers(h, 8),
                ..ModelConfig::with_dims(h, 10, 8, 2, 8, 8, 8, 2)
            };
            cfg.validate().unwrap_or_else(|e| panic!("h={h}: {e}"));
        }
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = ModelConfig::tiny();
        c.n_head = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.rie_layers = vec![RieLayer::new(3, 2, 16)];
        assert!(c.validate().unwrap_err().to_string().contains("not 1"));
        let mut c = ModelConfig::tiny();
        c.rie_layers.last_mut().unwrap().out_channels = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let mut cfg = ModelConfig::small();
        cfg.num_tm_blocks = 2;
        let back = ModelConfig::from_sidecar(&cfg.to_sidecar()).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::from_sidecar("h=8\nbogus=1\n").is_err());
    }
}
