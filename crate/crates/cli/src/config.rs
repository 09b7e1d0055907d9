//! The resolved run configuration.
//!
//! Values start from built-in defaults, are overlaid by an optional JSON file
//! (`--config`) and then by command-line flags. Every leaf remembers which of
//! the three set it; the result is written to `config.json` in the output
//! directory and can be fed back through `--config` to repeat a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use apdr::dataset::{AttrGridConfig, AttributeSchema, Dataset};
use apdr::evaluation::{Branch, RerankParams, DEFAULT_MASK_THRESHOLD};
use apdr::model::ModelConfig;
use apdr::training::{Preset, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

/// Architecture settings that do not come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub widths: [usize; 4],
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub fusion_dim: usize,
    pub gate_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(AttributeSchema::default_synthetic(), 2);
        Self {
            widths: c.widths,
            feat_dim: c.feat_dim,
            attr_dim: c.attr_dim,
            fusion_dim: c.fusion_dim,
            gate_hidden: c.gate_hidden,
        }
    }
}

impl ModelSettings {
    /// Model for `dataset`, with masks grouped by `schema`.
    pub fn build(&self, dataset: &Dataset, schema: AttributeSchema) -> ModelConfig {
        let m = &dataset.manifest;
        let mut c = ModelConfig::new(schema, dataset.num_train_ids());
        c.image_height = m.image_height;
        c.image_width = m.image_width;
        c.in_channels = m.channels;
        c.widths = self.widths;
        c.feat_dim = self.feat_dim;
        c.attr_dim = self.attr_dim;
        c.fusion_dim = self.fusion_dim;
        c.gate_hidden = self.gate_hidden;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub branch: Branch,
    pub normalize: bool,
    pub rerank: bool,
    pub rerank_params: RerankParams,
    pub mask_threshold: f32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            branch: Branch::Full,
            normalize: true,
            rerank: false,
            rerank_params: RerankParams::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Seeds dataset generation, initialisation and batch sampling.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub preset: Option<Preset>,
    /// Run only this training stage.
    pub stage: Option<u8>,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    /// Query samples whose masks `inspect-masks` dumps.
    pub probes: usize,
    /// Restrict `gradcheck` to one op.
    pub op: Option<String>,
    /// Seeds `gradcheck` runs when no seed is given.
    pub gradcheck_seeds: usize,
    pub generator: AttrGridConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Where each leaf value came from.
    pub provenance: BTreeMap<String, Source>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            checkpoint: None,
            preset: None,
            stage: None,
            checkpoint_every: 1,
            probes: 4,
            op: None,
            gradcheck_seeds: 10,
            generator: AttrGridConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            provenance: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `flags` (dotted key, value) in order.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &[(String, Value)]) -> Result<Self, String> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?;
        strip_derived(&mut value);
        let mut assigned: Vec<(String, Source)> = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let mut from_file: Value =
                serde_json::from_str(&text).map_err(|e| format!("{} is not valid JSON: {e}", path.display()))?;
            if !from_file.is_object() {
                return Err(format!("{} must hold a JSON object", path.display()));
            }
            strip_derived(&mut from_file);
            merge(&mut value, from_file, "", &mut assigned)?;
        }
        for (key, v) in flags {
            set_path(&mut value, key, v.clone())?;
            assigned.push((key.clone(), Source::Flag));
        }
        value["command"] = Value::String(command.to_string());
        value["train"]["seed"] = value["seed"].clone();

        let mut provenance = BTreeMap::new();
        for leaf in leaves(&value, "") {
            let source = match leaf.as_str() {
                "command" => Source::Flag,
                "train.seed" => source_of("seed", &assigned),
                _ => source_of(&leaf, &assigned),
            };
            provenance.insert(leaf, source);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| format!("invalid configuration: {e}"))?;
        cfg.provenance = provenance;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.generator.validate().map_err(|e| e.to_string())?;
        if self.generator.train_identities < 2 {
            return Err(format!(
                "need at least 2 train identities, got {}",
                self.generator.train_identities
            ));
        }
        if let Some(s) = self.stage {
            if !(1..=2).contains(&s) {
                return Err(format!("stage must be 1 or 2, got {s}"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    /// Whether `key` was set by a file or flag.
    pub fn is_set(&self, key: &str) -> bool {
        self.provenance.get(key).is_some_and(|s| *s != Source::Default)
    }

    /// Writes `config.json` under the output directory.
    pub fn write(&self) -> std::io::Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// Drops fields that are recomputed on every run.
fn strip_derived(v: &mut Value) {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("provenance");
        obj.remove("command");
    }
}

/// The most recent assignment covering `leaf`.
fn source_of(leaf: &str, assigned: &[(String, Source)]) -> Source {
    assigned
        .iter()
        .rev()
        .find(|(path, _)| leaf == path || leaf.starts_with(&format!("{path}.")))
        .map_or(Source::Default, |(_, s)| *s)
}

fn merge(dst: &mut Value, src: Value, prefix: &str, assigned: &mut Vec<(String, Source)>) -> Result<(), String> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = join(prefix, &k);
                let slot = d.get_mut(&k).ok_or_else(|| format!("unknown configuration key '{path}'"))?;
                merge(slot, v, &path, assigned)?;
            }
            Ok(())
        }
        (dst, src) => {
            *dst = src;
            assigned.push((prefix.to_string(), Source::File));
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), String> {
    let mut node = root;
    for part in key.split('.') {
        let obj: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| format!("'{key}' does not name a configuration field"))?;
        node = obj
            .get_mut(part)
            .ok_or_else(|| format!("unknown configuration key '{key}'"))?;
    }
    *node = v;
    Ok(())
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

/// Dotted paths of all non-object values; arrays count as one leaf.
fn leaves(v: &Value, prefix: &str) -> Vec<String> {
    match v {
        Value::Object(m) => m.iter().flat_map(|(k, v)| leaves(v, &join(prefix, k))).collect(),
        _ => vec![prefix.to_string()],
    }
}

/// Parses `KEY=VALUE`; the value is read as JSON and falls back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let cfg = RunConfig::resolve("train", None, &[]).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["train"]["loss"]["margin"], json!(0.2));
        assert_eq!(v["train"]["loss"]["lambda"], json!(0.1));
        assert_eq!(v["train"]["momentum"], json!(0.9));
        assert_eq!(v["train"]["weight_decay"], json!(0.0005));
        assert_eq!(v["model"]["feat_dim"], json!(256));
        assert_eq!(v["generator"]["train_identities"], json!(50));
        assert!(cfg.provenance.values().all(|s| *s != Source::File));
        assert_eq!(cfg.provenance["train.momentum"], Source::Default);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 5, "train": {"stage1_epochs": 3, "stage2_epochs": 4}}"#).unwrap();
        let flags = vec![("train.stage2_epochs".to_string(), json!(9))];
        let cfg = RunConfig::resolve("train", Some(&path), &flags).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (5, 5));
        assert_eq!((cfg.train.stage1_epochs, cfg.train.stage2_epochs), (3, 9));
        assert_eq!(cfg.provenance["seed"], Source::File);
        assert_eq!(cfg.provenance["train.seed"], Source::File);
        assert_eq!(cfg.provenance["train.stage1_epochs"], Source::File);
        assert_eq!(cfg.provenance["train.stage2_epochs"], Source::Flag);
        assert_eq!(cfg.provenance["train.base_lr"], Source::Default);
    }

    #[test]
    fn written_config_reloads_to_the_same_values() {
        let dir = tempfile::tempdir().unwrap();
        let flags = vec![
            ("out".to_string(), json!(dir.path())),
            ("preset".to_string(), json!("ablation-K1")),
            ("eval.rerank".to_string(), json!(true)),
        ];
        let first = RunConfig::resolve("eval", None, &flags).unwrap();
        let path = first.write().unwrap();
        let second = RunConfig::resolve("eval", Some(&path), &[]).unwrap();
        let strip = |c: &RunConfig| RunConfig {
            provenance: BTreeMap::new(),
            ..c.clone()
        };
        assert_eq!(strip(&first), strip(&second));
        assert_eq!(second.preset, Some(Preset::AblationK1));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let flags = vec![("train.epochs".to_string(), json!(3))];
        assert!(RunConfig::resolve("train", None, &flags).unwrap_err().contains("train.epochs"));
        let flags = vec![("seed.x".to_string(), json!(3))];
        assert!(RunConfig::resolve("train", None, &flags).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (k, v) in [
            ("train.base_lr", json!(0.0)),
            ("generator.train_identities", json!(1)),
            ("stage", json!(3)),
            ("train.p", json!("many")),
        ] {
            assert!(RunConfig::resolve("train", None, &[(k.to_string(), v)]).is_err(), "{k}");
        }
    }

    #[test]
    fn assignments_parse_json_or_strings() {
        assert_eq!(parse_assignment("train.p=4").unwrap(), ("train.p".into(), json!(4)));
        assert_eq!(parse_assignment("eval.branch=part").unwrap().1, json!("part"));
        assert_eq!(parse_assignment("model.widths=[4,4,8,8]").unwrap().1, json!([4, 4, 8, 8]));
        assert!(parse_assignment("nope").is_err());
    }
}
