//! Small datasets and models shared by unit tests.

use crate::dataset::{generate_attrgrid, AttrGridConfig, AttributeSchema, Dataset};
use crate::model::ModelConfig;

/// 16×8 images, 6 train and 4 test identities, 4 samples each.
pub(crate) fn small_dataset(seed: u64) -> Dataset {
    small_dataset_with(AttributeSchema::default_synthetic(), seed)
}

pub(crate) fn small_dataset_with(schema: AttributeSchema, seed: u64) -> Dataset {
    let cfg = AttrGridConfig {
        train_identities: 6,
        test_identities: 4,
        samples_per_identity: 4,
        image_height: 16,
        image_width: 8,
        schema,
        ..AttrGridConfig::default()
    };
    generate_attrgrid(&cfg, seed).unwrap()
}

/// A narrow network sized for [`small_dataset`].
pub(crate) fn small_model(dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 8,
        widths: [4, 4, 8, 8],
        feat_dim: 8,
        attr_dim: 4,
        fusion_dim: 8,
        gate_hidden: 4,
        ..ModelConfig::new(dataset.schema().clone(), dataset.num_train_ids())
    }
}
