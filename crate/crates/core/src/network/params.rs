use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::diffmath::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::real::{c, Real};

/// One named parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }
}

/// Every learnable buffer of the model, keyed by layer name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter leaves of one forward pass, keyed like [`ModelParams`].
pub type BoundParams = BTreeMap<String, ValueId>;

/// Shape of every linear layer, as (name, fan_in, fan_out).
pub fn layer_layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for l in 0..config.levels {
        let w = config.feature_widths[l];
        let enc_in = if l == 0 {
            config.input_feature_dim
        } else {
            config.feature_widths[l - 1]
        };
        out.push((format!("enc{l}"), 3 + enc_in, w));

        let dcv = config.d_cv[l];
        out.push((format!("cost{l}.h0"), 2 * w + 3, dcv));
        out.push((format!("cost{l}.h1"), dcv, dcv));

        let doc = config.d_oc;
        out.push((format!("occ{l}.conv0"), 1 + 2 * w + 3, doc));
        out.push((format!("occ{l}.conv1"), doc, doc));
        out.push((format!("occ{l}.mlp0"), doc, doc));
        out.push((format!("occ{l}.mlp1"), doc, 1));

        out.push((format!("flow{l}.conv"), 3 + w + dcv + 3 + 1, dcv));
        out.push((format!("flow{l}.mlp0"), dcv, dcv));
        out.push((format!("flow{l}.mlp1"), dcv, 3));
    }
    out
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases. The last occlusion layer starts at
    /// zero so every initial occlusion estimate is exactly 0.5.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, fan_in, fan_out) in layer_layout(config) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let zero = name.starts_with("occ") && name.ends_with(".mlp1");
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let v = rng.gen_range(-bound..bound);
                    c(if zero { 0.0 } else { v })
                })
                .collect();
            tensors.insert(
                format!("{name}.w"),
                Tensor {
                    shape: vec![fan_in, fan_out],
                    data,
                },
            );
            tensors.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    /// Checks that names and shapes match the layout of `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let want = ModelParams::<T>::zeros_like_layout(config);
        if want.tensors.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter buffers, found {}",
                want.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &want.tensors {
            match self.tensors.get(name) {
                Some(have) if have.shape == t.shape => {}
                Some(have) => {
                    return Err(Error::ConfigMismatch(format!(
                        "`{name}` has shape {:?}, config expects {:?}",
                        have.shape, t.shape
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("missing buffer `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn zeros_like_layout(config: &ModelConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, fan_in, fan_out) in layer_layout(config) {
            tensors.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
            tensors.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
        ModelParams { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        Tensor {
                            shape: t.shape.clone(),
                            data: t.data.iter().map(|v| c(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Creates one trainable leaf per buffer.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        self.tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), g.param(t.data.clone(), &t.shape)?)))
            .collect()
    }

    /// Reads the gradients of bound leaves back into a parameter-shaped map.
    /// Leaves that received no gradient report zeros.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &BoundParams) -> ModelParams<T> {
        let mut out = self.zeros_like();
        for (name, t) in out.tensors.iter_mut() {
            if let Some(grad) = bound.get(name).and_then(|&id| g.grad(id)) {
                t.data.copy_from_slice(grad);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let cfg = ModelConfig::desk();
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let other = ModelParams::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        for (name, t) in a.iter() {
            if name.ends_with(".b") {
                assert!(t.data.iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt() as f32;
                assert!(t.data.iter().all(|v| v.abs() <= bound));
            }
        }
        a.check_layout(&cfg).unwrap();
        assert!(a.check_layout(&ModelConfig::tiny()).is_err());
    }
}
