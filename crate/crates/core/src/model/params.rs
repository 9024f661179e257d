use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_tensors, write_tensors};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    /// Rows drawn uniformly on the unit sphere.
    UnitRows,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize, gain: f64) {
    out.push(spec(format!("{prefix}.weight"), &[d_in, d_out], Init::FanIn { fan_in: d_in, gain }));
    out.push(spec(format!("{prefix}.bias"), &[d_out], Init::Zeros));
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gain"), &[d], Init::Ones));
    out.push(spec(format!("{prefix}.bias"), &[d], Init::Zeros));
}

/// Every parameter of the network in a fixed order.
///
/// Linear weights are stored `[d_in, d_out]` so a row-feature matrix
/// multiplies them directly. The order here is the order in which
/// `Bound::new` consumes them.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, l) in cfg.rie_layers.iter().enumerate() {
        let fan_in = c_in * l.kernel_h;
        out.push(spec(
            format!("rie.{i}.weight"),
            &[l.out_channels, c_in, l.kernel_h, 1],
            Init::FanIn { fan_in, gain: 2.0 },
        ));
        out.push(spec(format!("rie.{i}.bias"), &[l.out_channels], Init::Zeros));
        c_in = l.out_channels;
    }
    let c = cfg.d_model;
    for b in 0..cfg.num_tm_blocks {
        let p = format!("tm.{b}");
        for name in ["query", "key", "value", "out"] {
            linear(&mut out, &format!("{p}.attn.{name}"), c, c, 1.0);
        }
        layer_norm(&mut out, &format!("{p}.ln_a"), 2 * c);
        linear(&mut out, &format!("{p}.ffn.0"), 2 * c, cfg.d_ffn, 2.0);
        linear(&mut out, &format!("{p}.ffn.1"), cfg.d_ffn, 2 * c, 1.0);
        layer_norm(&mut out, &format!("{p}.ln_b"), 2 * c);
        linear(&mut out, &format!("{p}.proj"), 2 * c, c, 1.0);
    }
    linear(&mut out, "gdg.assign", c, cfg.k_clusters, 1.0);
    out.push(spec("gdg.centers".into(), &[cfg.k_clusters, c], Init::UnitRows));
    linear(&mut out, "gdg.mlp.0", cfg.k_clusters * c, cfg.d_inter, 2.0);
    linear(&mut out, "gdg.mlp.1", cfg.d_inter, cfg.d_output, 1.0);
    out
}

/// Network weights, shared cheaply between threads and tapes.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ModelParams<T> {
    /// Kaiming fan-in initialization with zero biases, unit LN gains and
    /// random unit-norm cluster centers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for p in param_layout(cfg) {
            let t = match p.init {
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::full(&p.shape, T::one()),
                Init::FanIn { fan_in, gain } => {
                    let std = (gain / fan_in as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| T::lit(std * std_normal.sample(&mut rng)))
                }
                Init::UnitRows => {
                    let (rows, cols) = (p.shape[0], p.shape[1]);
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let row: Vec<f64> = (0..cols).map(|_| std_normal.sample(&mut rng)).collect();
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        data.extend(row.iter().map(|v| T::lit(v / norm)));
                    }
                    Tensor::new(&p.shape, data)?
                }
            };
            names.push(p.name);
            tensors.push(Arc::new(t));
        }
        Ok(Self { names, tensors })
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(cfg);
        if layout.len() != named.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", layout.len(), named.len()),
            ));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor '{name}' {:?} does not match expected '{}' {:?}",
                        t.shape(),
                        spec.name,
                        spec.shape
                    ),
                ));
            }
            if !t.all_finite() {
                return Err(Error::format("checkpoint", format!("tensor '{name}' has non-finite values")));
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_ref())
    }

    /// Mutable access; clones the buffer if it is still shared with a tape.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(self.tensor_mut(i))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast::<U>())).collect(),
        }
    }
}

/// Path of the configuration sidecar written next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the weights (`LPRW`) and a `key=value` sidecar with the config.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let named: Vec<(&str, &Tensor<f32>)> = params
        .names
        .iter()
        .map(String::as_str)
        .zip(params.tensors.iter().map(Arc::as_ref))
        .collect();
    write_tensors(BufWriter::new(File::create(path)?), &named)?;
    std::fs::write(sidecar_path(path), cfg.to_sidecar())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let sidecar = std::fs::read_to_string(sidecar_path(path))?;
    let cfg = ModelConfig::from_sidecar(&sidecar)?;
    let named = read_tensors(BufReader::new(File::open(path)?))?;
    let params = ModelParams::from_named(&cfg, named)?;
    Ok((cfg, params))
}
