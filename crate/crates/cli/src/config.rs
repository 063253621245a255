//! Pipeline configuration: one JSON document, flat dotted overrides and
//! per-stage seeds derived from a single master seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dbc_core::corrector::CorrectorConfig;
use dbc_core::data::{Fractions, SplitMode, WindowSpec};
use dbc_core::deconfounder::FactorModelConfig;
use dbc_core::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Stage names used to derive seeds.
pub const SEED_STAGES: [&str; 4] = ["generate", "split", "factor", "corrector"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    /// Path to a dataset manifest on disk.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    ByLocation,
    ByTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitKind,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = Fractions::default();
        Self { mode: SplitKind::ByLocation, train: f.train, val: f.val, test: f.test }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> Fractions {
        Fractions { train: self.train, val: self.val, test: self.test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub n_quantiles: usize,
    /// Added before ratio mappings of nonnegative outcomes.
    pub trace_offset: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { n_quantiles: 100, trace_offset: dbc_core::baselines::PRECIP_TRACE_OFFSET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub window: WindowSpec,
    pub factor: FactorModelConfig,
    pub corrector: CorrectorConfig,
    pub split: SplitConfig,
    pub baselines: BaselineConfig,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            window: WindowSpec::default(),
            factor: FactorModelConfig::default(),
            corrector: CorrectorConfig::default(),
            split: SplitConfig::default(),
            baselines: BaselineConfig::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

/// First eight bytes of `sha256(master || stage)`, little endian.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl PipelineConfig {
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        SEED_STAGES.iter().map(|s| (s.to_string(), derive_seed(self.seed, s))).collect()
    }

    /// Copy with every module seed replaced by its derived stage seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let DatasetSource::Synthetic(s) = &mut c.dataset {
            s.seed = derive_seed(self.seed, "generate");
        }
        c.factor.seed = derive_seed(self.seed, "factor");
        c.corrector.seed = derive_seed(self.seed, "corrector");
        c
    }

    pub fn split_mode(&self) -> SplitMode {
        match self.split.mode {
            SplitKind::ByLocation => SplitMode::ByLocation { seed: derive_seed(self.seed, "split") },
            SplitKind::ByTime => SplitMode::ByTime,
        }
    }

    /// Hash of the canonical JSON of the resolved configuration, ignoring
    /// where the run is written.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Checks referenced paths, then reports every other violation at once.
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Manifest(p) = &self.dataset {
            if !p.is_file() {
                return Err(CliError::ConfigPath(p.clone()));
            }
        }
        let mut problems = Vec::new();
        let mut collect = |section: &str, r: dbc_core::Result<()>| {
            if let Err(e) = r {
                let msg = match e {
                    dbc_core::Error::InvalidConfig(m) | dbc_core::Error::BadFractions(m) => m,
                    other => other.to_string(),
                };
                problems.push(format!("{section}: {msg}"));
            }
        };
        if let DatasetSource::Synthetic(s) = &self.dataset {
            collect("dataset.synthetic", s.validate());
        }
        collect("window", self.window.validate());
        collect("factor", self.factor.validate());
        collect("corrector", self.corrector.validate());
        collect("split", self.split.fractions().validate());
        if self.factor.x_lags > self.window.h {
            problems.push(format!("factor: x_lags {} exceeds window.h {}", self.factor.x_lags, self.window.h));
        }
        if self.baselines.n_quantiles < 2 {
            problems.push("baselines: n_quantiles must be at least 2".into());
        }
        if !(self.baselines.trace_offset >= 0.0) {
            problems.push("baselines: trace_offset must be nonnegative".into());
        }
        if self.corrector.use_z && !self.factor.use_latent {
            problems.push("corrector.use_z needs factor.use_latent".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::ConfigInvalid(problems.join("; ")))
        }
    }
}

/// Splits `--section.key value` and `--section.key=value` pairs out of the
/// argument list; everything else is returned untouched.
pub fn extract_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(name) = a.strip_prefix("--").filter(|n| n.contains('.')) else {
            rest.push(a.clone());
            continue;
        };
        if let Some((k, v)) = name.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| CliError::Usage(format!("override --{name} needs a value")))?;
            overrides.push((name.to_string(), v.clone()));
        }
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies dotted overrides to a config document. Unknown keys are all
/// reported together. Setting `dataset.manifest` or `dataset.synthetic`
/// switches the dataset source.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    let mut unknown = Vec::new();
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() >= 2 && parts[0] == "dataset" && doc["dataset"].get(parts[1]).is_none() {
            if matches!(parts[1], "manifest" | "synthetic") {
                let fresh = if parts[1] == "synthetic" {
                    serde_json::to_value(SynthConfig::default()).expect("serializes")
                } else {
                    Value::Null
                };
                doc["dataset"] = serde_json::json!({ parts[1]: fresh });
            }
        }
        let (parent, leaf) = key.rsplit_once('.').unwrap_or(("", key.as_str()));
        let pointer: String = parent.split('.').filter(|p| !p.is_empty()).map(|p| format!("/{p}")).collect();
        let ok = match doc.pointer_mut(&pointer).and_then(Value::as_object_mut) {
            Some(obj) if obj.contains_key(leaf) => {
                obj.insert(leaf.to_string(), parse_value(raw));
                true
            }
            _ => false,
        };
        if !ok {
            unknown.push(key.clone());
        }
    }
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CliError::ConfigInvalid(format!("unknown config keys: {}", unknown.join(", "))))
    }
}

/// Reads the config file (or the defaults), applies overrides and the
/// global `--seed` / `--out` flags, and validates the result.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<PipelineConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| CliError::ConfigPath(p.to_path_buf()))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::ConfigParse { path: p.display().to_string(), message: e.to_string() })?
        }
        None => Value::Object(Default::default()),
    };
    // Fill absent sections so overrides can address every default key.
    let defaults = serde_json::to_value(PipelineConfig::default()).expect("serializes");
    merge_defaults(&mut doc, &defaults);
    apply_overrides(&mut doc, overrides)?;
    let mut cfg: PipelineConfig = serde_json::from_value(doc).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge_defaults(doc: &mut Value, defaults: &Value) {
    let (Some(obj), Some(def)) = (doc.as_object_mut(), defaults.as_object()) else {
        return;
    };
    for (k, dv) in def {
        // An explicit dataset source replaces the default one wholesale.
        if k == "dataset" && obj.contains_key(k) {
            if let Some(Value::Object(src)) = obj.get_mut(k) {
                if let Some(syn) = src.get_mut("synthetic") {
                    merge_defaults(syn, &dv["synthetic"]);
                }
            }
            continue;
        }
        match obj.get_mut(k) {
            Some(v) => merge_defaults(v, dv),
            None => {
                obj.insert(k.clone(), dv.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn seeds_depend_on_master_and_stage() {
        assert_eq!(derive_seed(1, "factor"), derive_seed(1, "factor"));
        assert_ne!(derive_seed(1, "factor"), derive_seed(2, "factor"));
        assert_ne!(derive_seed(1, "factor"), derive_seed(1, "corrector"));
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) =
            extract_overrides(&strings(&["train-factor", "--factor.lr", "0.01", "--quiet", "--window.h=24"])).unwrap();
        assert_eq!(rest, strings(&["train-factor", "--quiet"]));
        assert_eq!(ov, vec![("factor.lr".into(), "0.01".into()), ("window.h".into(), "24".into())]);
        assert!(matches!(extract_overrides(&strings(&["--factor.lr"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let ov = vec![
            ("factor.lr".to_string(), "0.01".to_string()),
            ("dataset.synthetic.n_locations".to_string(), "7".to_string()),
            ("corrector.model_kind".to_string(), "mlp".to_string()),
        ];
        let cfg = load_config(None, &ov, Some(3), None).unwrap();
        assert_eq!(cfg.factor.lr, 0.01);
        assert_eq!(cfg.seed, 3);
        let DatasetSource::Synthetic(s) = &cfg.dataset else { panic!() };
        assert_eq!(s.n_locations, 7);
        assert_eq!(cfg.corrector.model_kind, dbc_core::corrector::CorrectorKind::Mlp);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let ov = vec![("factor.lrr".to_string(), "1".to_string()), ("nope.x".to_string(), "1".to_string())];
        let err = load_config(None, &ov, None, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("factor.lrr") && msg.contains("nope.x"), "{msg}");
    }

    #[test]
    fn validation_lists_every_violation() {
        let ov = vec![
            ("factor.d_z".to_string(), "0".to_string()),
            ("corrector.n_heads".to_string(), "5".to_string()),
            ("split.train".to_string(), "0.5".to_string()),
        ];
        let msg = load_config(None, &ov, None, None).unwrap_err().to_string();
        for part in ["factor", "corrector", "split"] {
            assert!(msg.contains(part), "{msg}");
        }
    }

    #[test]
    fn missing_manifest_is_a_path_error() {
        let ov = vec![("dataset.manifest".to_string(), "/no/such/manifest.json".to_string())];
        let err = load_config(None, &ov, None, None).unwrap_err();
        assert_eq!(err.code(), "CONFIG_PATH");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn resolved_config_carries_stage_seeds() {
        let cfg = PipelineConfig { seed: 9, ..Default::default() }.resolved();
        assert_eq!(cfg.factor.seed, derive_seed(9, "factor"));
        assert_eq!(cfg.corrector.seed, derive_seed(9, "corrector"));
        let a = PipelineConfig { seed: 9, ..Default::default() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), PipelineConfig { seed: 10, ..Default::default() }.hash());
    }
}
