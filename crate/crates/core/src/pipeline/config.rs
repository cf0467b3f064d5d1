use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::WeightScheme;
use crate::annotator::FixedLabels;
use crate::corpus::{DatasetCategory, DatasetDescriptor, IngestFormat};
use crate::gateway::{GatewayConfig, PromptDefaults};
use crate::merger::{MergeSettings, DEFAULT_BATCH_SIZE, DEFAULT_THETA_MAX, DEFAULT_THETA_MEAN};
use crate::miner::EmbedInput;
use crate::taxonomy::Dimension;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub display_name: String,
    pub category: DatasetCategory,
    pub path: PathBuf,
    pub format: IngestFormat,
    /// Run the relevance filter over this dataset.
    #[serde(default)]
    pub filter: bool,
    #[serde(default)]
    pub fixed: FixedLabels,
}

impl DatasetSpec {
    pub fn descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor::new(&self.dataset_id, &self.display_name, self.category)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSpec {
    /// Datasets to mine; all when absent.
    pub datasets: Option<Vec<String>>,
    pub embed_input: EmbedInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSettingSpec {
    pub name: String,
    /// Defaults to the mining embed input.
    pub embed_input: Option<EmbedInput>,
    pub embedding_model: Option<String>,
    pub judge_model: Option<String>,
    pub batch_size: usize,
    pub theta_mean: f64,
    pub theta_max: f64,
}

impl Default for MergeSettingSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            embed_input: None,
            embedding_model: None,
            judge_model: None,
            batch_size: DEFAULT_BATCH_SIZE,
            theta_mean: DEFAULT_THETA_MEAN,
            theta_max: DEFAULT_THETA_MAX,
        }
    }
}

impl MergeSettingSpec {
    pub fn settings(&self, defaults: &PromptDefaults) -> MergeSettings {
        MergeSettings {
            batch_size: self.batch_size,
            theta_mean: self.theta_mean,
            theta_max: self.theta_max,
            defaults: defaults.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSpec {
    pub settings: Vec<MergeSettingSpec>,
    /// Topic labels pinned against merging.
    pub lock: Vec<String>,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            settings: vec![MergeSettingSpec::default()],
            lock: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomySpec {
    pub topics: Option<PathBuf>,
    pub intents: Option<PathBuf>,
    pub forms: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSpec {
    pub a: Dimension,
    pub b: Dimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    pub dimensions: Vec<Dimension>,
    pub schemes: Vec<WeightScheme>,
    pub include_others: Vec<bool>,
    pub groups: Vec<GroupSpec>,
    /// Entity pairs for divergence reports; all group pairs (or all dataset
    /// pairs without groups) when empty.
    pub divergence: Vec<PairSpec>,
    pub top_n: usize,
    pub cross: Vec<CrossSpec>,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            dimensions: Dimension::ALL.to_vec(),
            schemes: WeightScheme::ALL.to_vec(),
            include_others: vec![false],
            groups: Vec::new(),
            divergence: Vec::new(),
            top_n: 10,
            cross: vec![
                CrossSpec {
                    a: Dimension::Topic,
                    b: Dimension::Intent,
                },
                CrossSpec {
                    a: Dimension::Topic,
                    b: Dimension::Form,
                },
                CrossSpec {
                    a: Dimension::Intent,
                    b: Dimension::Form,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementSpec {
    pub annotator_a: PathBuf,
    pub annotator_b: PathBuf,
    /// Codes JSON array or taxonomy file; the dimension's taxonomy when absent.
    #[serde(default)]
    pub universe: Option<PathBuf>,
    pub dimension: Dimension,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_rounds() -> usize {
    crate::agreement::DEFAULT_ROUNDS
}
fn default_level() -> f64 {
    crate::agreement::DEFAULT_LEVEL
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSpec {
    /// Bundle directory; `<workdir>/bundle` when absent.
    pub out_dir: Option<PathBuf>,
}

fn default_subject() -> String {
    PromptDefaults::default().subject
}
fn default_n() -> usize {
    PromptDefaults::default().n
}
fn default_m() -> usize {
    PromptDefaults::default().m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_subject")]
    pub subject: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub mining: MiningSpec,
    #[serde(default)]
    pub merge: MergeSpec,
    #[serde(default)]
    pub taxonomy: TaxonomySpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub agreement: Option<AgreementSpec>,
    #[serde(default)]
    pub export: ExportSpec,
}

impl PipelineConfig {
    pub fn defaults(&self) -> PromptDefaults {
        PromptDefaults {
            subject: self.subject.clone(),
            n: self.n,
            m: self.m,
        }
    }

    /// Anchors every relative path at `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            abs(&mut d.path);
        }
        for p in [&mut self.taxonomy.topics, &mut self.taxonomy.intents, &mut self.taxonomy.forms]
            .into_iter()
            .flatten()
        {
            abs(p);
        }
        if let Some(a) = &mut self.agreement {
            abs(&mut a.annotator_a);
            abs(&mut a.annotator_b);
            if let Some(u) = &mut a.universe {
                abs(u);
            }
        }
        if let Some(w) = &mut self.workdir {
            abs(w);
        }
        if let Some(o) = &mut self.export.out_dir {
            abs(o);
        }
        self.gateway.resolve_paths(base);
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), String> {
        if self.datasets.is_empty() {
            return Err("no datasets configured".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if d.dataset_id.trim().is_empty() {
                return Err("empty dataset_id".into());
            }
            if !ids.insert(d.dataset_id.as_str()) {
                return Err(format!("duplicate dataset_id {:?}", d.dataset_id));
            }
        }
        for g in &self.analysis.groups {
            if g.members.is_empty() {
                return Err(format!("group {:?} has no members", g.group_id));
            }
            if ids.contains(g.group_id.as_str()) {
                return Err(format!("group id {:?} collides with a dataset id", g.group_id));
            }
            for m in &g.members {
                if !ids.contains(m.as_str()) {
                    return Err(format!("group {:?} names unknown dataset {m:?}", g.group_id));
                }
            }
        }
        if let Some(list) = &self.mining.datasets {
            for m in list {
                if !ids.contains(m.as_str()) {
                    return Err(format!("mining names unknown dataset {m:?}"));
                }
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.merge.settings {
            if !names.insert(s.name.as_str()) || s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(format!("merge setting name {:?} is empty, duplicated or not a plain name", s.name));
            }
            if s.batch_size == 0 {
                return Err(format!("merge setting {:?}: batch_size must be >= 1", s.name));
            }
        }
        if let Some(a) = &self.agreement {
            if !(0.0..1.0).contains(&a.level) || a.level <= 0.0 || a.rounds == 0 {
                return Err("agreement needs 0 < level < 1 and rounds >= 1".into());
            }
        }
        if self.analysis.top_n == 0 {
            return Err("analysis.top_n must be >= 1".into());
        }
        Ok(())
    }
}
