use std::collections::HashMap;

use super::params::Layout;
use super::{ModelConfig, ModelParams, NamedBn, Param, StageGroup};
use crate::error::{config_err, Error, Result};
use crate::numerics::{BnMode, Graph, Scalar, Tensor, Var};

enum BnAccess<'a, T> {
    Train(&'a mut [NamedBn<T>]),
    Eval(&'a [NamedBn<T>]),
}

/// Spatial maps produced by the backbone.
#[derive(Debug, Clone, Copy)]
pub struct BackboneMaps {
    pub gf: Var,
    pub af: Var,
    pub pf: Var,
}

/// Graph handles for the stage-1 quantities.
#[derive(Debug, Clone)]
pub struct Stage1Outputs {
    pub g: Var,
    pub id_logits: Var,
    /// Empty when the attribute branch was skipped.
    pub masks: Vec<Var>,
    pub attr_feats: Vec<Var>,
    pub attr_logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FullOutputs {
    pub stage1: Stage1Outputs,
    pub f_attri: Var,
    /// `l_i`, one per mask.
    pub parts: Vec<Var>,
    /// `p_i`, one per mask.
    pub refined: Vec<Var>,
    pub f_p: Var,
    pub f: Var,
    pub local_logits: Var,
}

/// One forward pass of the network on its own [`Graph`].
///
/// Parameters enter the graph as named leaves the first time an op needs
/// them, so [`ForwardPass::param_grads`] knows which ones the pass touched.
pub struct ForwardPass<'a, T: Scalar> {
    pub graph: Graph<T>,
    config: &'a ModelConfig,
    params: &'a [Param<T>],
    layout: &'a Layout,
    bn: BnAccess<'a, T>,
    vars: HashMap<usize, Var>,
    track_grads: bool,
}

impl<'a, T: Scalar> ForwardPass<'a, T> {
    /// Training pass: gradients tracked, BN normalizes with batch statistics
    /// and updates the running ones.
    pub fn train(model: &'a mut ModelParams<T>) -> Self {
        let ModelParams {
            config,
            params,
            bn,
            layout,
        } = model;
        Self::build(config, params, layout, BnAccess::Train(bn), true)
    }

    /// Inference pass: no gradients, BN uses running statistics.
    pub fn eval(model: &'a ModelParams<T>) -> Self {
        Self::build(&model.config, &model.params, &model.layout, BnAccess::Eval(&model.bn), false)
    }

    fn build(
        config: &'a ModelConfig,
        params: &'a [Param<T>],
        layout: &'a Layout,
        bn: BnAccess<'a, T>,
        track_grads: bool,
    ) -> Self {
        Self {
            graph: Graph::new(),
            config,
            params,
            layout,
            bn,
            vars: HashMap::new(),
            track_grads,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn p(&mut self, name: &str) -> Var {
        let i = *self
            .layout
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter '{name}'"));
        if let Some(&v) = self.vars.get(&i) {
            return v;
        }
        let v = self
            .graph
            .named_leaf(self.params[i].tensor.clone(), self.track_grads, name);
        self.vars.insert(i, v);
        v
    }

    fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let i = self.layout.bn[name];
        let mode = match &mut self.bn {
            BnAccess::Train(stats) => BnMode::Train(&mut stats[i].stats),
            BnAccess::Eval(stats) => BnMode::Eval(&stats[i].stats),
        };
        self.graph.batch_norm(x, gamma, beta, mode)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.graph.linear(x, w, b)
    }

    fn conv_bn_relu(&mut self, x: Var, name: &str, bn: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let y = self.graph.conv2d(x, w, stride, 1)?;
        let y = self.batch_norm(y, bn)?;
        Ok(self.graph.relu(y))
    }

    fn block(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv_bn_relu(x, &format!("{name}.conv1"), &format!("{name}.bn1"), stride)?;
        self.conv_bn_relu(y, &format!("{name}.conv2"), &format!("{name}.bn2"), 1)
    }

    /// Adds a batch of images (N×C×H×W) to the graph.
    pub fn input(&mut self, images: &Tensor<T>) -> Result<Var> {
        let c = self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_height || s[3] != c.image_width {
            return Err(config_err!(
                "model expects N×{}×{}×{} images, got {:?}",
                c.in_channels,
                c.image_height,
                c.image_width,
                s
            ));
        }
        Ok(self.graph.constant(images.clone()))
    }

    /// Blocks 1-3, shared by every branch.
    pub fn stem(&mut self, x: Var) -> Result<Var> {
        let s = self.config.stem_strides;
        let y = self.block(x, "stem.block1", s[0])?;
        let y = self.block(y, "stem.block2", s[1])?;
        self.block(y, "stem.block3", s[2])
    }

    pub fn global_branch(&mut self, stem: Var) -> Result<Var> {
        self.block(stem, "global.block4", self.config.global_stride)
    }

    pub fn attribute_branch(&mut self, stem: Var) -> Result<Var> {
        self.block(stem, "attr.block4", 1)
    }

    pub fn part_stream(&mut self, stem: Var) -> Result<Var> {
        self.block(stem, "part.block4", 1)
    }

    /// Runs the stem once and all three block-4 variants on it.
    pub fn forward_backbone(&mut self, x: Var) -> Result<BackboneMaps> {
        let stem = self.stem(x)?;
        Ok(BackboneMaps {
            gf: self.global_branch(stem)?,
            af: self.attribute_branch(stem)?,
            pf: self.part_stream(stem)?,
        })
    }

    /// One 1×1 convolution plus sigmoid per mask group.
    pub fn detect_masks(&mut self, af: Var) -> Result<Vec<Var>> {
        (0..self.config.num_masks)
            .map(|k| {
                let w = self.p(&format!("detector{k}.w"));
                let b = self.p(&format!("detector{k}.b"));
                let logit = self.graph.conv2d(af, w, 1, 0)?;
                let logit = self.graph.channel_bias(logit, b)?;
                Ok(self.graph.sigmoid(logit))
            })
            .collect()
    }

    /// Pools the attribute map once per mask, then runs a separate FC+BN
    /// feature head and classifier for every attribute.
    pub fn attribute_heads(&mut self, af: Var, masks: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let pooled = masks
            .iter()
            .map(|&m| self.graph.weighted_average_pool(af, m))
            .collect::<Result<Vec<_>>>()?;
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for g in &self.config.schema.groups {
            let name = format!("attr.{}", g.name);
            let h = self.linear(pooled[g.mask_group], &format!("{name}.fc"))?;
            let a = self.batch_norm(h, &format!("{name}.bn"))?;
            logits.push(self.linear(a, &format!("{name}.classifier"))?);
            feats.push(a);
        }
        Ok((feats, logits))
    }

    pub fn fuse_attributes(&mut self, attr_feats: &[Var]) -> Result<Var> {
        let cat = self.graph.concat(attr_feats)?;
        self.linear(cat, "fusion")
    }

    pub fn extract_parts(&mut self, pf: Var, masks: &[Var]) -> Result<Vec<Var>> {
        masks
            .iter()
            .map(|&m| self.graph.weighted_average_pool(pf, m))
            .collect()
    }

    /// `p = l ⊙ σ(W_out·tanh(W_l·l + W_h·f_attri + b) + b_out)`.
    pub fn refine_part(&mut self, k: usize, l: Var, f_attri: Var) -> Result<Var> {
        let name = format!("gate{k}");
        let wl = self.p(&format!("{name}.wl"));
        let b = self.p(&format!("{name}.b"));
        let wh = self.p(&format!("{name}.wh"));
        let from_part = self.graph.linear(l, wl, b)?;
        let from_attr = self.graph.matmul(f_attri, wh)?;
        let pre = self.graph.add(from_part, from_attr)?;
        let hidden = self.graph.tanh(pre);
        let gate = self.linear(hidden, &format!("{name}.out"))?;
        let gate = self.graph.sigmoid(gate);
        self.graph.mul(l, gate)
    }

    /// `f_p = FC([p_1..p_K])`, `f = [f_p, g]`.
    pub fn final_descriptor(&mut self, refined: &[Var], g: Var) -> Result<(Var, Var)> {
        let cat = self.graph.concat(refined)?;
        let f_p = self.linear(cat, "local.fc")?;
        let f = self.graph.concat(&[f_p, g])?;
        Ok((f_p, f))
    }

    fn stage1_from(&mut self, stem: Var, with_attributes: bool) -> Result<(Stage1Outputs, Option<Var>)> {
        let gf = self.global_branch(stem)?;
        let g = self.graph.global_average_pool(gf)?;
        let id_logits = self.linear(g, "global.classifier")?;
        let mut out = Stage1Outputs {
            g,
            id_logits,
            masks: Vec::new(),
            attr_feats: Vec::new(),
            attr_logits: Vec::new(),
        };
        if !with_attributes {
            return Ok((out, None));
        }
        let af = self.attribute_branch(stem)?;
        out.masks = self.detect_masks(af)?;
        let (feats, logits) = self.attribute_heads(af, &out.masks)?;
        out.attr_feats = feats;
        out.attr_logits = logits;
        Ok((out, Some(af)))
    }

    /// Global feature, identity logits and, when `with_attributes` is set,
    /// masks and attribute heads.
    pub fn stage1(&mut self, images: &Tensor<T>, with_attributes: bool) -> Result<Stage1Outputs> {
        let x = self.input(images)?;
        let stem = self.stem(x)?;
        Ok(self.stage1_from(stem, with_attributes)?.0)
    }

    /// The whole network.
    pub fn full(&mut self, images: &Tensor<T>) -> Result<FullOutputs> {
        let x = self.input(images)?;
        let stem = self.stem(x)?;
        let (stage1, _) = self.stage1_from(stem, true)?;
        let pf = self.part_stream(stem)?;
        let f_attri = self.fuse_attributes(&stage1.attr_feats)?;
        let parts = self.extract_parts(pf, &stage1.masks)?;
        let refined = parts
            .iter()
            .enumerate()
            .map(|(k, &l)| self.refine_part(k, l, f_attri))
            .collect::<Result<Vec<_>>>()?;
        let (f_p, f) = self.final_descriptor(&refined, stage1.g)?;
        let local_logits = self.linear(f_p, "local.classifier")?;
        Ok(FullOutputs {
            stage1,
            f_attri,
            parts,
            refined,
            f_p,
            f,
            local_logits,
        })
    }

    /// Gradients after `graph.backward`, aligned with the parameter list.
    ///
    /// Parameters the pass never used get zeros if their group is active and
    /// `None` otherwise.
    pub fn param_grads(&self, active: impl Fn(StageGroup) -> bool) -> Result<Vec<Option<Vec<T>>>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| match self.vars.get(&i) {
                Some(&v) => self
                    .graph
                    .grad(v)
                    .map(|g| Some(g.to_vec()))
                    .ok_or_else(|| Error::Internal(format!("no gradient recorded for '{}'", p.name))),
                None if active(p.group) => Ok(Some(vec![T::zero(); p.tensor.numel()])),
                None => Ok(None),
            })
            .collect()
    }

    /// Graph handle of a parameter, if the pass used it.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.layout.params.get(name).and_then(|i| self.vars.get(i)).copied()
    }
}
