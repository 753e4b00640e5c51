use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qdlab::envs::EnvKind;
use qdlab::qd::EvolutionConfig;
use qdlab::qdt::QdtConfig;
use qdlab::{CvtParams, EnvSpec};

/// Everything a pipeline stage may need; each section has working defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed; `--seed` overrides it and it replaces `evolution.seed`.
    pub seed: u64,
    pub env: EnvSection,
    pub cvt: CvtParams,
    pub evolution: EvolutionConfig,
    pub dataset: DatasetSection,
    pub qdt: QdtConfig,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvSection::default(),
            cvt: CvtParams::default(),
            evolution: EvolutionConfig::default(),
            dataset: DatasetSection::default(),
            qdt: QdtConfig::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: EnvKind,
    pub episode_len: usize,
    /// Defaults to the environment's own start-state noise.
    pub init_noise_sigma: Option<f64>,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            name: EnvKind::PointOmni,
            episode_len: qdlab::envs::DEFAULT_EPISODE_LEN,
            init_noise_sigma: None,
        }
    }
}

impl EnvSection {
    pub fn spec(&self) -> EnvSpec {
        let mut env = EnvSpec::new(self.name).with_episode_len(self.episode_len);
        if let Some(s) = self.init_noise_sigma {
            env = env.with_init_noise(s);
        }
        env
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMethod {
    /// Best policy per zone of a coarse tessellation.
    Zones,
    /// Every elite of the repertoire, no selection.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub method: DatasetMethod,
    pub n_zones: usize,
    pub n_probe_episodes: usize,
    pub n_trajectories: usize,
    /// Scheme used by `dataset-prune`, e.g. `density:0.5`.
    pub prune: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            method: DatasetMethod::Zones,
            n_zones: 32,
            n_probe_episodes: 5,
            n_trajectories: 4000,
            prune: "density:0.5".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_goals: usize,
    pub n_episodes: usize,
    /// Seed of the goal tessellation, fixed across runs so goals match.
    pub goal_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_goals: qdlab::qdt::DEFAULT_N_GOALS,
            n_episodes: qdlab::qdt::DEFAULT_GOAL_EPISODES,
            goal_seed: 0,
        }
    }
}

/// Artifact locations for `experiment`, relative to the run directory.
/// `{variant}` and `{seed}` are substituted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub repertoire_variants: Vec<String>,
    pub qdt_variants: Vec<String>,
    /// Dataset variant used by the generalization and fitness experiments.
    pub focus_variant: String,
    pub repertoire_path: String,
    pub dataset_path: String,
    pub checkpoint_path: String,
    pub prune_arms: Vec<String>,
    pub reassess_evals: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            repertoire_variants: vec!["me".into(), "me-ls".into(), "me-sampling".into()],
            qdt_variants: vec!["me".into(), "me-ls".into(), "naive".into()],
            focus_variant: "me-ls".into(),
            repertoire_path: "repertoire_{variant}_s{seed}.json".into(),
            dataset_path: "dataset_{variant}_s{seed}.qdt1".into(),
            checkpoint_path: "checkpoints/qdt_{variant}_s{seed}.qdtw".into(),
            prune_arms: qdlab::experiments::GeneralizationConfig::default().arms,
            reassess_evals: 10,
        }
    }
}

impl ExperimentSection {
    pub fn resolve(template: &str, run_dir: &Path, variant: &str, seed: u64) -> PathBuf {
        run_dir.join(template.replace("{variant}", variant).replace("{seed}", &seed.to_string()))
    }
}

/// A configuration problem, located by dotted key path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Problem {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

fn unknown_keys(doc: &toml::Value, schema: &serde_json::Value, prefix: &str, out: &mut Vec<Problem>) {
    let (toml::Value::Table(table), serde_json::Value::Object(known)) = (doc, schema) else {
        return;
    };
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => out.push(Problem {
                key: path,
                message: "unknown key".into(),
            }),
            Some(sub) => unknown_keys(value, sub, &path, out),
        }
    }
}

fn split_serde_problem(section: &str, text: &str) -> Problem {
    // "n_layers: must be at least 1" -> key `qdt.n_layers`
    match text.split_once(": ") {
        Some((field, msg)) if !field.contains(' ') => Problem {
            key: format!("{section}.{field}"),
            message: msg.to_string(),
        },
        _ => Problem {
            key: section.to_string(),
            message: text.to_string(),
        },
    }
}

impl RunConfig {
    /// Strict parse: every unknown key and every invalid value is reported.
    pub fn from_toml(text: &str) -> Result<Self, Vec<Problem>> {
        let doc: toml::Value = text.parse().map_err(|e: toml::de::Error| {
            vec![Problem {
                key: "<document>".into(),
                message: e.to_string().trim().to_string(),
            }]
        })?;
        let schema = serde_json::to_value(RunConfig::default()).expect("plain data");
        let mut problems = Vec::new();
        unknown_keys(&doc, &schema, "", &mut problems);
        if !problems.is_empty() {
            return Err(problems);
        }
        let config: RunConfig = doc.try_into().map_err(|e: toml::de::Error| {
            vec![Problem {
                key: "<document>".into(),
                message: e.message().trim().to_string(),
            }]
        })?;
        let problems = config.problems();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(problems)
        }
    }

    pub fn load(path: &Path) -> Result<Self, Vec<Problem>> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![Problem {
                key: "<file>".into(),
                message: format!("cannot read {}: {e}", path.display()),
            }]
        })?;
        Self::from_toml(&text)
    }

    pub fn problems(&self) -> Vec<Problem> {
        let mut out = Vec::new();
        if let Err(e) = self.env.spec().validate() {
            out.push(Problem {
                key: "env".into(),
                message: e.to_string(),
            });
        }
        if self.cvt.n_cells == 0 || self.cvt.n_samples < self.cvt.n_cells {
            out.push(Problem {
                key: "cvt.n_samples".into(),
                message: "need at least one sample per cell and one cell".into(),
            });
        }
        out.extend(self.evolution.problems().iter().map(|p| split_serde_problem("evolution", p)));
        out.extend(self.qdt.problems().iter().map(|p| split_serde_problem("qdt", p)));
        if self.qdt.max_t < self.env.episode_len {
            out.push(Problem {
                key: "qdt.max_t".into(),
                message: format!("{} is shorter than env.episode_len = {}", self.qdt.max_t, self.env.episode_len),
            });
        }
        if self.dataset.n_zones == 0 {
            out.push(Problem {
                key: "dataset.n_zones".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.dataset.n_probe_episodes == 0 {
            out.push(Problem {
                key: "dataset.n_probe_episodes".into(),
                message: "must be at least 1".into(),
            });
        }
        if let Err(e) = self.dataset.prune.parse::<qdlab::dataset::PruneScheme>().and_then(|s| s.validate()) {
            out.push(Problem {
                key: "dataset.prune".into(),
                message: e.to_string(),
            });
        }
        if self.eval.n_goals == 0 || self.eval.n_episodes == 0 {
            out.push(Problem {
                key: "eval".into(),
                message: "n_goals and n_episodes must be at least 1".into(),
            });
        }
        if self.experiment.seeds.is_empty() {
            out.push(Problem {
                key: "experiment.seeds".into(),
                message: "seed list must not be empty".into(),
            });
        }
        for v in &self.experiment.repertoire_variants {
            if v.parse::<qdlab::Variant>().is_err() {
                out.push(Problem {
                    key: "experiment.repertoire_variants".into(),
                    message: format!("unknown variant `{v}`"),
                });
            }
        }
        for (i, arm) in self.experiment.prune_arms.iter().enumerate() {
            if let Err(e) = arm.parse::<qdlab::dataset::PruneScheme>().and_then(|s| s.validate()) {
                out.push(Problem {
                    key: format!("experiment.prune_arms[{i}]"),
                    message: e.to_string(),
                });
            }
        }
        out
    }

    /// Applies the run seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.evolution.seed = self.seed;
        self
    }
}
