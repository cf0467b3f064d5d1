use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    cross_distribution, dataset_distribution, divergence_top_n, group_distribution, rollup_categories, rollup_cross,
    similarity_matrix, AnalysisError, CrossDistribution, Distribution, DivergenceEntry, Level, WeightScheme,
};
use crate::corpus::{DatasetCategory, SampleRecord};
use crate::taxonomy::{Codebook, Dimension};

use super::config::AnalysisSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Dataset,
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub id: String,
    pub display_name: String,
    pub kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<DatasetCategory>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    pub retained_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub entity: String,
    #[serde(flatten)]
    pub distribution: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub dimension: Dimension,
    pub level: Level,
    pub scheme: WeightScheme,
    pub include_others: bool,
    pub entities: Vec<String>,
    /// `None` where either side has no labelled mass.
    pub matrix: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub a: String,
    pub b: String,
    pub dimension: Dimension,
    pub level: Level,
    pub scheme: WeightScheme,
    pub include_others: bool,
    pub top: Vec<DivergenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRecord {
    pub entity: String,
    pub level: Level,
    #[serde(flatten)]
    pub cross: CrossDistribution,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutputs {
    pub entities: Vec<EntityInfo>,
    pub distributions: Vec<DistributionRecord>,
    pub similarity: Vec<SimilarityRecord>,
    pub divergence: Vec<DivergenceRecord>,
    pub cross: Vec<CrossRecord>,
}

/// The three codebooks an analysis runs against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomies {
    pub topics: Codebook,
    pub intents: Codebook,
    pub forms: Codebook,
}

impl Taxonomies {
    pub fn builtin() -> Self {
        Self {
            topics: Codebook::builtin(Dimension::Topic),
            intents: Codebook::builtin(Dimension::Intent),
            forms: Codebook::builtin(Dimension::Form),
        }
    }

    pub fn book(&self, d: Dimension) -> &Codebook {
        match d {
            Dimension::Topic => &self.topics,
            Dimension::Intent => &self.intents,
            Dimension::Form => &self.forms,
        }
    }
}

/// Similarity matrix over the entities that carry mass; cells touching an
/// empty distribution are left undefined.
fn partial_similarity(dists: &[(String, Distribution)]) -> Result<Vec<Vec<Option<f64>>>, AnalysisError> {
    let live: Vec<usize> = (0..dists.len()).filter(|&i| !dists[i].1.empty).collect();
    let refs: Vec<(String, &Distribution)> = live.iter().map(|&i| (dists[i].0.clone(), &dists[i].1)).collect();
    let m = similarity_matrix(&refs)?;
    let mut out = vec![vec![None; dists.len()]; dists.len()];
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            out[i][j] = Some(m.matrix[a][b]);
        }
    }
    Ok(out)
}

/// Annotated samples of one dataset.
pub struct DatasetInput<'a> {
    pub info: EntityInfo,
    pub samples: &'a [SampleRecord],
}

/// Every configured distribution, similarity matrix, divergence list and cross
/// table, in a deterministic order.
pub fn compute_analysis(
    datasets: &[DatasetInput<'_>],
    groups: &[EntityInfo],
    spec: &AnalysisSpec,
    books: &Taxonomies,
) -> Result<AnalysisOutputs, AnalysisError> {
    let mut out = AnalysisOutputs {
        entities: datasets.iter().map(|d| d.info.clone()).chain(groups.iter().cloned()).collect(),
        ..Default::default()
    };
    let counts: BTreeMap<&str, u64> = datasets.iter().map(|d| (d.info.id.as_str(), d.info.retained_count)).collect();
    let pairs: Vec<(String, String)> = if !spec.divergence.is_empty() {
        spec.divergence.iter().map(|p| (p.a.clone(), p.b.clone())).collect()
    } else {
        let ids: Vec<&EntityInfo> = if groups.is_empty() {
            datasets.iter().map(|d| &d.info).collect()
        } else {
            groups.iter().collect()
        };
        let mut v = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                v.push((ids[i].id.clone(), ids[j].id.clone()));
            }
        }
        v
    };

    for &include_others in &spec.include_others {
        for &scheme in &spec.schemes {
            for &dimension in &spec.dimensions {
                let book = books.book(dimension);
                let mut fine: Vec<(String, Distribution)> = Vec::new();
                for d in datasets {
                    fine.push((d.info.id.clone(), dataset_distribution(d.samples, book, scheme, include_others)?));
                }
                for g in groups {
                    let members: Vec<(&Distribution, u64)> = g
                        .members
                        .iter()
                        .map(|m| {
                            let dist = &fine.iter().find(|(id, _)| id == m).expect("validated member").1;
                            (dist, counts[m.as_str()])
                        })
                        .collect();
                    let dist = group_distribution(&members)?;
                    fine.push((g.id.clone(), dist));
                }
                let cat: Vec<(String, Distribution)> = fine
                    .iter()
                    .map(|(id, d)| Ok((id.clone(), rollup_categories(d, book)?)))
                    .collect::<Result<_, AnalysisError>>()?;

                for (level, dists) in [(Level::Fine, &fine), (Level::Category, &cat)] {
                    for (id, d) in dists.iter() {
                        out.distributions.push(DistributionRecord {
                            entity: id.clone(),
                            distribution: d.clone(),
                        });
                    }
                    out.similarity.push(SimilarityRecord {
                        dimension,
                        level,
                        scheme,
                        include_others,
                        entities: dists.iter().map(|(id, _)| id.clone()).collect(),
                        matrix: partial_similarity(dists)?,
                    });
                    for (a, b) in &pairs {
                        let find = |id: &str| {
                            dists
                                .iter()
                                .find(|(e, _)| e == id)
                                .map(|(_, d)| d)
                                .ok_or_else(|| AnalysisError::Mismatch(format!("unknown entity {id:?}")))
                        };
                        out.divergence.push(DivergenceRecord {
                            a: a.clone(),
                            b: b.clone(),
                            dimension,
                            level,
                            scheme,
                            include_others,
                            top: divergence_top_n(find(a)?, find(b)?, spec.top_n)?,
                        });
                    }
                }
            }
            for c in &spec.cross {
                let (ba, bb) = (books.book(c.a), books.book(c.b));
                for d in datasets {
                    let fine = cross_distribution(d.samples, ba, bb, scheme, include_others)?;
                    let cat = rollup_cross(&fine, ba, bb)?;
                    out.cross.push(CrossRecord {
                        entity: d.info.id.clone(),
                        level: Level::Fine,
                        cross: fine,
                    });
                    out.cross.push(CrossRecord {
                        entity: d.info.id.clone(),
                        level: Level::Category,
                        cross: cat,
                    });
                }
            }
        }
    }
    Ok(out)
}
