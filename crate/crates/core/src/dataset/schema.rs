use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// One annotated attribute: its class count and the attention mask it shares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    pub num_classes: usize,
    pub mask_group: usize,
}

/// Attribute groups plus their assignment onto `num_mask_groups` shared masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub groups: Vec<AttributeGroup>,
    pub num_mask_groups: usize,
    /// Display names of the mask groups, one per group when present.
    #[serde(default)]
    pub mask_names: Vec<String>,
}

pub const DEFAULT_MASK_NAMES: [&str; 8] = [
    "head",
    "upper",
    "lower",
    "feet",
    "backpack",
    "bag",
    "handbag",
    "gender-zone",
];

impl AttributeSchema {
    pub fn new(groups: Vec<AttributeGroup>, num_mask_groups: usize, mask_names: Vec<String>) -> Result<Self> {
        let schema = Self {
            groups,
            num_mask_groups,
            mask_names,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Ten attributes merged onto eight masks (head, upper, lower, feet,
    /// backpack, bag, handbag, gender-zone).
    pub fn default_synthetic() -> Self {
        let g = |name: &str, num_classes, mask_group| AttributeGroup {
            name: name.to_string(),
            num_classes,
            mask_group,
        };
        Self {
            groups: vec![
                g("hair", 2, 0),
                g("hat", 2, 0),
                g("upper_color", 6, 1),
                g("lower_color", 6, 2),
                g("lower_type", 2, 2),
                g("shoes", 3, 3),
                g("backpack", 2, 4),
                g("bag", 2, 5),
                g("handbag", 2, 6),
                g("gender", 2, 7),
            ],
            num_mask_groups: 8,
            mask_names: DEFAULT_MASK_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Every attribute on one shared mask.
    pub fn single_mask(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| AttributeGroup {
                    mask_group: 0,
                    ..g.clone()
                })
                .collect(),
            num_mask_groups: 1,
            mask_names: vec!["whole-body".to_string()],
        }
    }

    /// One mask per attribute, no sharing.
    pub fn mask_per_attribute(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(i, g)| AttributeGroup {
                    mask_group: i,
                    ..g.clone()
                })
                .collect(),
            num_mask_groups: self.groups.len(),
            mask_names: self.groups.iter().map(|g| g.name.clone()).collect(),
        }
    }

    /// Same attributes with the same class counts, whatever the mask sharing.
    pub fn same_attributes(&self, other: &AttributeSchema) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.name == b.name && a.num_classes == b.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(config_err!("attribute schema has no groups"));
        }
        if self.num_mask_groups == 0 {
            return Err(config_err!("attribute schema needs at least one mask group"));
        }
        let mut names = HashSet::new();
        let mut used = vec![false; self.num_mask_groups];
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(config_err!("duplicate attribute name '{}'", g.name));
            }
            if g.num_classes < 2 {
                return Err(config_err!(
                    "attribute '{}' needs at least 2 classes, has {}",
                    g.name,
                    g.num_classes
                ));
            }
            if g.mask_group >= self.num_mask_groups {
                return Err(config_err!(
                    "attribute '{}' maps to mask group {} but only {} exist",
                    g.name,
                    g.mask_group,
                    self.num_mask_groups
                ));
            }
            used[g.mask_group] = true;
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(config_err!("mask group {k} is not referenced by any attribute"));
        }
        if !self.mask_names.is_empty() && self.mask_names.len() != self.num_mask_groups {
            return Err(config_err!(
                "{} mask names given for {} mask groups",
                self.mask_names.len(),
                self.num_mask_groups
            ));
        }
        Ok(())
    }

    pub fn num_attributes(&self) -> usize {
        self.groups.len()
    }

    /// Indices of the attributes sharing mask `k`.
    pub fn attributes_on_mask(&self, k: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.mask_group == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mask_name(&self, k: usize) -> String {
        self.mask_names
            .get(k)
            .cloned()
            .unwrap_or_else(|| format!("mask{k}"))
    }

    /// Checks one label vector against the class counts.
    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.groups.len() {
            return Err(config_err!(
                "expected {} attribute labels, got {}",
                self.groups.len(),
                labels.len()
            ));
        }
        for (g, &l) in self.groups.iter().zip(labels) {
            if l >= g.num_classes {
                return Err(config_err!(
                    "label {l} out of range for attribute group '{}' ({} classes)",
                    g.name,
                    g.num_classes
                ));
            }
        }
        Ok(())
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self::default_synthetic()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid_with_eight_masks() {
        let s = AttributeSchema::default_synthetic();
        s.validate().unwrap();
        assert_eq!(s.num_mask_groups, 8);
        assert_eq!(s.num_attributes(), 10);
        assert_eq!(s.attributes_on_mask(0), vec![0, 1]);
    }

    #[test]
    fn ablation_variants_are_valid() {
        let s = AttributeSchema::default_synthetic();
        let one = s.single_mask();
        one.validate().unwrap();
        assert_eq!(one.attributes_on_mask(0).len(), 10);
        let per = s.mask_per_attribute();
        per.validate().unwrap();
        assert_eq!(per.num_mask_groups, 10);
    }

    #[test]
    fn rejects_bad_schemas() {
        let mut s = AttributeSchema::default_synthetic();
        s.groups[1].name = "hair".into();
        assert!(s.validate().is_err());

        let mut s = AttributeSchema::default_synthetic();
        s.groups[0].mask_group = 8;
        assert!(s.validate().is_err());

        let mut s = AttributeSchema::default_synthetic();
        s.num_mask_groups = 9;
        s.mask_names.push("spare".into());
        assert!(s.validate().unwrap_err().to_string().contains("mask group 8"));

        let s = AttributeSchema::new(vec![], 1, vec![]);
        assert!(s.is_err());
    }

    #[test]
    fn label_range_errors_name_the_group() {
        let s = AttributeSchema::default_synthetic();
        let mut labels = vec![0; 10];
        labels[2] = 6;
        let err = s.check_labels(&labels).unwrap_err().to_string();
        assert!(err.contains("upper_color"), "{err}");
    }
}
