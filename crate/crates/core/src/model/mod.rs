//! The OverlapTransformer network: a range image encoder that compresses
//! only the vertical axis, a transformer over image columns and a NetVLAD
//! head that turns the column set into a yaw-invariant global descriptor.

mod config;
mod forward;
mod params;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::range_image::{RangeImage, SENTINEL};
use crate::tensor::{Real, Tensor};

pub use config::{default_rie_layers, parse_rie_layers, ModelConfig, RieLayer};
pub use forward::Bound;
pub use params::{load_checkpoint, param_layout, save_checkpoint, sidecar_path, ModelParams, ParamSpec};

/// Unit-norm place descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Network input: valid ranges scaled by `1 / max_range`, invalid pixels 0.
pub fn encode_image<T: Real>(img: &RangeImage) -> Tensor<T> {
    let inv = 1.0 / img.max_range;
    Tensor::from_fn(&[1, img.h(), img.w()], |i| {
        let r = img.data()[i];
        if r == SENTINEL {
            T::zero()
        } else {
            T::lit(f64::from(r) * inv)
        }
    })
}

#[derive(Clone, Debug)]
pub struct OverlapTransformer<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> OverlapTransformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.names().iter().zip(params.tensors()))
                .all(|(s, (n, t))| &s.name == n && s.shape == t.shape());
        if !matches {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> OverlapTransformer<U> {
        OverlapTransformer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_image(&self, img: &RangeImage) -> Result<()> {
        if img.h() != self.config.h || img.w() != self.config.w {
            return Err(Error::Shape {
                op: "model input",
                lhs: vec![img.h(), img.w()],
                rhs: vec![self.config.h, self.config.w],
            });
        }
        Ok(())
    }

    /// `[1, h, w] -> [w, c]`.
    pub fn rie_forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        forward::eval(&self.config, &self.params, input, |b, x| b.rie(x))
    }

    /// `[w, c] -> [w, c]`.
    pub fn tm_forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        forward::eval(&self.config, &self.params, features, |b, x| b.tm(x))
    }

    /// `[w, c] -> [d_output]`.
    pub fn gdg_forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        forward::eval(&self.config, &self.params, features, |b, x| b.gdg(x))
    }

    /// `[1, h, w] -> [d_output]`.
    pub fn forward_tensor(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        forward::eval(&self.config, &self.params, input, |b, x| b.forward(x))
    }
}

impl OverlapTransformer<f32> {
    pub fn descriptor(&self, img: &RangeImage) -> Result<GlobalDescriptor> {
        self.check_image(img)?;
        let out = self.forward_tensor(&encode_image(img))?;
        Ok(GlobalDescriptor {
            values: out.into_data(),
        })
    }

    /// Descriptors of many images, computed in parallel on the current
    /// rayon pool. Output order follows input order.
    pub fn descriptors(&self, imgs: &[RangeImage]) -> Result<Vec<GlobalDescriptor>> {
        imgs.par_iter().map(|img| self.descriptor(img)).collect()
    }
}
