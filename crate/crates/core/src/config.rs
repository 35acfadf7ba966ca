//! TOML experiment configuration.
//!
//! Unknown keys are rejected in every section. Relative paths resolve against
//! the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::PolicyVector;
use crate::codec::{CodecConfig, Level};
use crate::error::{Error, Result};
use crate::metrics::RqsiMetric;
use crate::simulator::{Framework, DEFAULT_LADDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub corpus: PathBuf,
    pub seed: u64,
    pub alpha: f64,
    /// Policy literal generating training inputs; defaults to the two-point edge policy.
    pub policy: Option<String>,
    /// Cap on pooled training patches after shuffling.
    pub max_patches: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus/train"),
            seed: 7,
            alpha: 1e-4,
            policy: None,
            max_patches: None,
        }
    }
}

/// `"all"` or an explicit list of policy literals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyList {
    Keyword(String),
    List(Vec<String>),
}

impl Default for PolicyList {
    fn default() -> Self {
        PolicyList::Keyword("all".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub corpus: PathBuf,
    pub source: Level,
    pub targets: Vec<Level>,
    pub n_q: Vec<usize>,
    pub policies: PolicyList,
    pub frameworks: Vec<Framework>,
    pub metrics: Vec<RqsiMetric>,
    /// Extra probe levels recorded in sweeps (levels `d + 1` and `d` are always probed).
    pub probe_levels: Vec<Level>,
    /// Destination-step multipliers tracing each RD curve.
    pub ladder: Vec<f64>,
    pub timing_runs: usize,
    /// Sources compared pairwise (`k` vs `k + 1`) in the adaptation study.
    pub adapt_sources: Vec<Level>,
    pub adapt_target: Level,
    /// Levels spanned by the entropy study, `[source, dest]`.
    pub entropy_levels: [Level; 2],
    pub entropy_neighbor: usize,
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus/eval"),
            source: 6,
            targets: vec![1, 2, 3],
            n_q: vec![2],
            policies: PolicyList::default(),
            frameworks: vec![Framework::Hcf, Framework::Drf, Framework::Ssf],
            metrics: vec![RqsiMetric::Psnr, RqsiMetric::MsSsim],
            probe_levels: Vec::new(),
            ladder: DEFAULT_LADDER.to_vec(),
            timing_runs: 5,
            adapt_sources: vec![3, 4, 5, 6],
            adapt_target: 1,
            entropy_levels: [6, 3],
            entropy_neighbor: 3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub codec: CodecConfig,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, validates and resolves relative paths; both corpus directories must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.training.corpus, &mut cfg.evaluation.corpus, &mut cfg.output.directory] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        for (key, p) in [("training.corpus", &self.training.corpus), ("evaluation.corpus", &self.evaluation.corpus)] {
            if !p.is_dir() {
                return Err(Error::Config(format!("{key}: directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let (lo, hi) = (self.codec.min_level, self.codec.max_level);
        let in_range = |k: Level| (lo..=hi).contains(&k);
        let t = &self.training;
        if !(t.alpha.is_finite() && t.alpha >= 0.0) {
            return Err(Error::Config(format!("training.alpha must be finite and nonnegative, got {}", t.alpha)));
        }
        if let Some(lit) = &t.policy {
            let p = PolicyVector::parse(lit, hi).map_err(|e| Error::Config(format!("training.policy: {e}")))?;
            if p.dest() != lo {
                return Err(Error::Config(format!("training.policy {lit:?} must span levels {hi}..{lo}")));
            }
        }
        let e = &self.evaluation;
        if !in_range(e.source) {
            return Err(Error::Config(format!("evaluation.source {} outside {lo}..={hi}", e.source)));
        }
        if e.targets.is_empty() || e.targets.iter().any(|&d| !in_range(d) || d >= e.source) {
            return Err(Error::Config(format!("evaluation.targets must lie in {lo}..{}", e.source)));
        }
        if e.n_q.is_empty() || e.n_q.contains(&0) {
            return Err(Error::Config("evaluation.n_q must list positive counts".into()));
        }
        match &e.policies {
            PolicyList::Keyword(k) if k == "all" => {}
            PolicyList::Keyword(k) => return Err(Error::Config(format!("evaluation.policies: expected \"all\" or a list, got {k:?}"))),
            PolicyList::List(list) => {
                for lit in list {
                    PolicyVector::parse(lit, e.source).map_err(|err| Error::Config(format!("evaluation.policies: {err}")))?;
                }
            }
        }
        if e.ladder.len() < 4 || e.ladder.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::Config("evaluation.ladder needs at least four positive multipliers".into()));
        }
        if e.adapt_sources.iter().any(|&k| !in_range(k) || k <= e.adapt_target) || !in_range(e.adapt_target) {
            return Err(Error::Config("evaluation.adapt_sources must lie above adapt_target within the level range".into()));
        }
        let [es, ed] = e.entropy_levels;
        if !(in_range(es) && in_range(ed) && es > ed) {
            return Err(Error::Config("evaluation.entropy_levels must be [source, dest] with source > dest".into()));
        }
        if e.entropy_neighbor == 0 {
            return Err(Error::Config("evaluation.entropy_neighbor must be positive".into()));
        }
        if e.probe_levels.iter().any(|&k| !in_range(k)) {
            return Err(Error::Config("evaluation.probe_levels outside the level range".into()));
        }
        Ok(())
    }

    /// Explicit policy literals, or `None` for all policies.
    pub fn policy_literals(&self) -> Option<&[String]> {
        match &self.evaluation.policies {
            PolicyList::List(l) => Some(l),
            PolicyList::Keyword(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[codec]
max_level = 6

[training]
corpus = "train"
seed = 3
policy = "100001"

[evaluation]
corpus = "eval"
targets = [1, 2]
policies = ["10001", "00011"]
frameworks = ["hcf", "drf"]

[output]
directory = "results"
formats = ["csv"]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.training.seed, 3);
        assert_eq!(cfg.evaluation.frameworks, vec![Framework::Hcf, Framework::Drf]);
        assert_eq!(cfg.policy_literals().unwrap().len(), 2);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[codec]\nblock = 8\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("block")), "{err}");
        assert!(ExperimentConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn errors_carry_line_context() {
        let err = ExperimentConfig::from_toml("[codec]\npatch_size = 8\nlatent_dim = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[training]\npolicy = \"10010\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\npolicies = \"some\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\ntargets = [6]\n").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\nladder = [1.0]\n").is_err());
        assert!(ExperimentConfig::from_toml("[training]\nalpha = -1.0\n").is_err());
    }

    #[test]
    fn missing_corpus_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, SAMPLE).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("training.corpus"), "{err}");
        fs::create_dir(dir.path().join("train")).unwrap();
        fs::create_dir(dir.path().join("eval")).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.output.directory, dir.path().join("results"));
    }
}
