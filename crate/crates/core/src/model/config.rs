use serde::{Deserialize, Serialize};

use crate::dataset::AttributeSchema;
use crate::error::{config_err, Result};

/// Architecture of the two-stream network.
///
/// The backbone is four conv blocks (two 3x3 conv-BN-relu layers each).
/// Blocks 1-3 form the shared stem; block 4 is instantiated three times:
/// the global branch (with a final stride) and the attribute branch and part
/// stream (without), so attribute and part maps have twice the resolution of
/// the global map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    /// Output channels of blocks 1-4.
    pub widths: [usize; 4],
    /// Stride of the first conv in each stem block.
    pub stem_strides: [usize; 3],
    /// Extra down-sampling applied only by the global branch.
    pub global_stride: usize,
    /// Dimension of the global feature `g` and of the local feature `f_p`.
    pub feat_dim: usize,
    /// Dimension of each attribute feature `a_i`.
    pub attr_dim: usize,
    /// Dimension of the fused attribute vector.
    pub fusion_dim: usize,
    pub gate_hidden: usize,
    /// Number of attribute-part detectors (masks).
    pub num_masks: usize,
    pub schema: AttributeSchema,
    pub num_train_ids: usize,
}

impl ModelConfig {
    pub fn new(schema: AttributeSchema, num_train_ids: usize) -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            in_channels: 3,
            widths: [8, 16, 32, 32],
            stem_strides: [2, 2, 2],
            global_stride: 2,
            feat_dim: 256,
            attr_dim: 64,
            fusion_dim: 256,
            gate_hidden: 64,
            num_masks: schema.num_mask_groups,
            schema,
            num_train_ids,
        }
    }

    /// An 8x8, width-8 network used for end-to-end gradient checks.
    pub fn tiny(schema: AttributeSchema, num_train_ids: usize) -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            in_channels: 3,
            widths: [4, 4, 6, 6],
            stem_strides: [1, 2, 1],
            global_stride: 2,
            feat_dim: 6,
            attr_dim: 5,
            fusion_dim: 6,
            gate_hidden: 4,
            num_masks: schema.num_mask_groups,
            schema,
            num_train_ids,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.num_masks != self.schema.num_mask_groups {
            return Err(config_err!(
                "model has {} masks but the schema defines {} mask groups",
                self.num_masks,
                self.schema.num_mask_groups
            ));
        }
        let dims = [
            ("feat_dim", self.feat_dim),
            ("attr_dim", self.attr_dim),
            ("fusion_dim", self.fusion_dim),
            ("gate_hidden", self.gate_hidden),
            ("in_channels", self.in_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(config_err!("block widths must be positive, got {:?}", self.widths));
        }
        if self.stem_strides.contains(&0) || self.global_stride == 0 {
            return Err(config_err!("strides must be at least 1"));
        }
        if self.num_train_ids < 2 {
            return Err(config_err!(
                "need at least 2 training identities, got {}",
                self.num_train_ids
            ));
        }
        Ok(())
    }

    /// Spatial size after the stem, i.e. of the attribute and part maps.
    pub fn part_map_size(&self) -> (usize, usize) {
        let mut hw = (self.image_height, self.image_width);
        for &s in &self.stem_strides {
            hw = (conv_out(hw.0, s), conv_out(hw.1, s));
        }
        hw
    }

    pub fn global_map_size(&self) -> (usize, usize) {
        let (h, w) = self.part_map_size();
        (conv_out(h, self.global_stride), conv_out(w, self.global_stride))
    }

    /// Channels of each part feature `l_i`.
    pub fn part_channels(&self) -> usize {
        self.widths[3]
    }

    /// Dimension of the final descriptor `f = [f_p, g]`.
    pub fn descriptor_dim(&self) -> usize {
        2 * self.feat_dim
    }
}

/// Output extent of a 3x3, pad-1 convolution.
pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolution_arithmetic() {
        let c = ModelConfig::new(AttributeSchema::default_synthetic(), 50);
        c.validate().unwrap();
        assert_eq!(c.global_map_size(), (4, 2));
        assert_eq!(c.part_map_size(), (8, 4));
        assert_eq!(c.descriptor_dim(), 512);
        assert_eq!(c.num_masks, 8);
    }

    #[test]
    fn mask_count_must_match_schema() {
        let mut c = ModelConfig::new(AttributeSchema::default_synthetic(), 50);
        c.num_masks = 7;
        assert!(c.validate().is_err());
    }
}
