//! Named ablation settings. Each fixes the mask grouping, the stage-1 loss,
//! whether stage 2 runs and which descriptor is scored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::AttributeSchema;
use crate::error::{config_err, Error, Result};
use crate::evaluation::Branch;
use crate::objective::LossConfig;

/// How attributes are assigned to masks relative to the dataset's schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaVariant {
    /// The dataset's own grouping.
    Grouped,
    /// One mask shared by every attribute.
    SingleMask,
    /// One mask per attribute.
    PerAttribute,
}

impl SchemaVariant {
    pub fn apply(self, schema: &AttributeSchema) -> AttributeSchema {
        match self {
            SchemaVariant::Grouped => schema.clone(),
            SchemaVariant::SingleMask => schema.single_mask(),
            SchemaVariant::PerAttribute => schema.mask_per_attribute(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Identity loss on `g` only.
    Baseline,
    /// Identity and triplet loss on `g`.
    BaselineTriplet,
    /// Identity, triplet and attribute losses; scores `g`.
    Perceptual,
    /// Full model scored on the concatenated part features.
    Part,
    /// Full model scored on the concatenated refined part features.
    RefinedPart,
    /// Full model scored on the final descriptor.
    Apdr,
    #[serde(rename = "ablation-K1")]
    AblationK1,
    #[serde(rename = "ablation-K12")]
    AblationK12,
}

/// What a preset changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub schema: SchemaVariant,
    pub loss: LossConfig,
    pub run_stage2: bool,
    pub branch: Branch,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Baseline,
        Preset::BaselineTriplet,
        Preset::Perceptual,
        Preset::Part,
        Preset::RefinedPart,
        Preset::Apdr,
        Preset::AblationK1,
        Preset::AblationK12,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::BaselineTriplet => "baseline-triplet",
            Preset::Perceptual => "perceptual",
            Preset::Part => "part",
            Preset::RefinedPart => "refined-part",
            Preset::Apdr => "apdr",
            Preset::AblationK1 => "ablation-K1",
            Preset::AblationK12 => "ablation-K12",
        }
    }

    /// Settings on top of `base`, whose margin is kept.
    pub fn spec(self, base: &LossConfig) -> PresetSpec {
        let full = LossConfig {
            lambda: base.lambda,
            triplet: true,
            ..*base
        };
        let (schema, loss, run_stage2, branch) = match self {
            Preset::Baseline => (
                SchemaVariant::Grouped,
                LossConfig {
                    lambda: 0.0,
                    triplet: false,
                    ..*base
                },
                false,
                Branch::Global,
            ),
            Preset::BaselineTriplet => (
                SchemaVariant::Grouped,
                LossConfig { lambda: 0.0, ..full },
                false,
                Branch::Global,
            ),
            Preset::Perceptual => (SchemaVariant::Grouped, full, false, Branch::Global),
            Preset::Part => (SchemaVariant::Grouped, full, true, Branch::Part),
            Preset::RefinedPart => (SchemaVariant::Grouped, full, true, Branch::RefinedPart),
            Preset::Apdr => (SchemaVariant::Grouped, full, true, Branch::Full),
            Preset::AblationK1 => (SchemaVariant::SingleMask, full, true, Branch::Full),
            Preset::AblationK12 => (SchemaVariant::PerAttribute, full, true, Branch::Full),
        };
        PresetSpec {
            schema,
            loss,
            run_stage2,
            branch,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                config_err!("unknown preset '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        assert!("full".parse::<Preset>().is_err());
    }

    #[test]
    fn mask_counts_follow_variant() {
        let schema = AttributeSchema::default_synthetic();
        let k = |p: Preset| p.spec(&LossConfig::default()).schema.apply(&schema).num_mask_groups;
        assert_eq!(k(Preset::Apdr), 8);
        assert_eq!(k(Preset::AblationK1), 1);
        assert_eq!(k(Preset::AblationK12), 10);
    }

    #[test]
    fn baselines_drop_terms() {
        let base = LossConfig::default();
        let b = Preset::Baseline.spec(&base);
        assert_eq!((b.loss.lambda, b.loss.triplet, b.run_stage2), (0.0, false, false));
        let t = Preset::BaselineTriplet.spec(&base);
        assert_eq!((t.loss.lambda, t.loss.triplet), (0.0, true));
        let p = Preset::Perceptual.spec(&base);
        assert_eq!((p.loss.lambda, p.loss.triplet, p.branch), (0.1, true, Branch::Global));
        assert!(Preset::Apdr.spec(&base).run_stage2);
    }
}
