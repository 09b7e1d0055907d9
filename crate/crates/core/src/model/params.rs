use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{config_err, Result};
use crate::numerics::{BnStats, Scalar, Tensor};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageGroup {
    /// Stem, global branch, attribute branch, detectors, attribute heads and
    /// the global identity classifier.
    Stage1,
    /// Part stream, fusion, gates, local projection and local classifier.
    Stage2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: StageGroup,
    /// Whether weight decay applies; false for biases and BN affine terms.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBn<T> {
    pub name: String,
    pub stats: BnStats<T>,
}

/// Every trainable tensor and BN running statistic of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub bn: Vec<NamedBn<T>>,
    pub(crate) layout: Layout,
}

/// Name to position maps for parameters and BN layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Layout {
    pub(crate) params: HashMap<String, usize>,
    pub(crate) bn: HashMap<String, usize>,
}

enum Init {
    Kaiming { fan_in: usize },
    Zero,
    One,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    group: StageGroup,
    params: Vec<Param<f64>>,
    bn: Vec<NamedBn<f64>>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: &[usize], init: Init, decay: bool) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        self.params.push(Param {
            name,
            tensor: Tensor::from_parts(shape.to_vec(), data),
            group: self.group,
            decay,
        });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{name}.w"), &[cout, cin, k, k], Init::Kaiming { fan_in: cin * k * k }, true);
    }

    fn bn(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.gamma"), &[dim], Init::One, false);
        self.push(format!("{name}.beta"), &[dim], Init::Zero, false);
        self.bn.push(NamedBn {
            name: name.to_string(),
            stats: BnStats::new(dim),
        });
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.push(format!("{name}.w"), &[din, dout], Init::Kaiming { fan_in: din }, true);
        self.push(format!("{name}.b"), &[dout], Init::Zero, false);
    }

    /// conv3x3-BN-relu twice.
    fn block(&mut self, name: &str, cin: usize, mid: usize, cout: usize) {
        self.conv(&format!("{name}.conv1"), cin, mid, 3);
        self.bn(&format!("{name}.bn1"), mid);
        self.conv(&format!("{name}.conv2"), mid, cout, 3);
        self.bn(&format!("{name}.bn2"), cout);
    }
}

impl ModelParams<f32> {
    /// Fresh parameters: Kaiming-uniform convolutions and dense layers, zero
    /// biases, BN gamma 1 and beta 0, zero detectors (every mask starts at 0.5).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(ModelParams::<f64>::init_f64(config, seed)?.cast())
    }
}

impl ModelParams<f64> {
    pub fn init_f64(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            group: StageGroup::Stage1,
            params: Vec::new(),
            bn: Vec::new(),
        };
        let w = config.widths;
        let c4 = w[3];
        b.block("stem.block1", config.in_channels, w[0], w[0]);
        b.block("stem.block2", w[0], w[1], w[1]);
        b.block("stem.block3", w[1], w[2], w[2]);
        b.block("global.block4", w[2], c4, config.feat_dim);
        b.linear("global.classifier", config.feat_dim, config.num_train_ids);
        b.block("attr.block4", w[2], c4, c4);
        for k in 0..config.num_masks {
            let name = format!("detector{k}");
            b.push(format!("{name}.w"), &[1, c4, 1, 1], Init::Zero, true);
            b.push(format!("{name}.b"), &[1], Init::Zero, false);
        }
        for g in &config.schema.groups {
            let name = format!("attr.{}", g.name);
            b.linear(&format!("{name}.fc"), c4, config.attr_dim);
            b.bn(&format!("{name}.bn"), config.attr_dim);
            b.linear(&format!("{name}.classifier"), config.attr_dim, g.num_classes);
        }

        b.group = StageGroup::Stage2;
        b.block("part.block4", w[2], c4, c4);
        b.linear("fusion", config.schema.num_attributes() * config.attr_dim, config.fusion_dim);
        for k in 0..config.num_masks {
            let name = format!("gate{k}");
            b.push(format!("{name}.wl"), &[c4, config.gate_hidden], Init::Kaiming { fan_in: c4 }, true);
            b.push(
                format!("{name}.wh"),
                &[config.fusion_dim, config.gate_hidden],
                Init::Kaiming {
                    fan_in: config.fusion_dim,
                },
                true,
            );
            b.push(format!("{name}.b"), &[config.gate_hidden], Init::Zero, false);
            b.linear(&format!("{name}.out"), config.gate_hidden, c4);
        }
        b.linear("local.fc", config.num_masks * c4, config.feat_dim);
        b.linear("local.classifier", config.feat_dim, config.num_train_ids);

        let (params, bn) = (b.params, b.bn);
        Ok(ModelParams::assemble(config.clone(), params, bn))
    }
}

impl<T: Scalar> ModelParams<T> {
    fn assemble(config: ModelConfig, params: Vec<Param<T>>, bn: Vec<NamedBn<T>>) -> Self {
        let layout = Layout {
            params: params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect(),
            bn: bn.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect(),
        };
        Self {
            config,
            params,
            bn,
            layout,
        }
    }

    /// Rebuilds a parameter set from stored tensors, checking that names and
    /// shapes agree with what `config` implies.
    pub fn from_parts(config: ModelConfig, params: Vec<Param<T>>, bn: Vec<NamedBn<T>>) -> Result<Self> {
        let reference = ModelParams::<f64>::init_f64(&config, 0)?;
        if reference.params.len() != params.len() || reference.bn.len() != bn.len() {
            return Err(config_err!(
                "expected {} parameters and {} BN layers, got {} and {}",
                reference.params.len(),
                reference.bn.len(),
                params.len(),
                bn.len()
            ));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.tensor.shape() != p.tensor.shape() {
                return Err(config_err!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    r.name,
                    r.tensor.shape(),
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        for (r, b) in reference.bn.iter().zip(&bn) {
            if r.name != b.name || r.stats.len() != b.stats.len() || b.stats.var.len() != b.stats.len() {
                return Err(config_err!("BN statistics mismatch at {}", r.name));
            }
        }
        let params = params
            .into_iter()
            .zip(&reference.params)
            .map(|(p, r)| Param {
                group: r.group,
                decay: r.decay,
                ..p
            })
            .collect();
        Ok(Self::assemble(config, params, bn))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        ModelParams::assemble(
            self.config.clone(),
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    group: p.group,
                    decay: p.decay,
                })
                .collect(),
            self.bn
                .iter()
                .map(|b| NamedBn {
                    name: b.name.clone(),
                    stats: BnStats {
                        mean: cast_vec(&b.stats.mean),
                        var: cast_vec(&b.stats.var),
                    },
                })
                .collect(),
        )
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.params.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    pub fn bn_index(&self, name: &str) -> Option<usize> {
        self.layout.bn.get(name).copied()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AttributeSchema;

    #[test]
    fn init_is_deterministic_and_tagged() {
        let cfg = ModelConfig::new(AttributeSchema::default_synthetic(), 50);
        let a = ModelParams::init(&cfg, 3).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 3).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 4).unwrap());
        assert_eq!(a.get("stem.block1.conv1.w").unwrap().group, StageGroup::Stage1);
        assert_eq!(a.get("gate3.wl").unwrap().group, StageGroup::Stage2);
        assert!(!a.get("stem.block1.bn1.gamma").unwrap().decay);
        assert!(!a.get("fusion.b").unwrap().decay);
        assert!(a.get("fusion.w").unwrap().decay);
        assert_eq!(a.get("local.fc.w").unwrap().tensor.shape(), &[8 * 32, 256]);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let cfg = ModelConfig::new(AttributeSchema::default_synthetic(), 50);
        let a = ModelParams::init(&cfg, 1).unwrap();
        let ok = ModelParams::from_parts(cfg.clone(), a.params.clone(), a.bn.clone()).unwrap();
        assert_eq!(ok, a);
        let mut bad = a.params.clone();
        bad[0].tensor = Tensor::zeros(&[1]);
        assert!(ModelParams::from_parts(cfg, bad, a.bn.clone()).is_err());
    }
}
