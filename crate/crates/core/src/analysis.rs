//! Weighted label distributions and the comparisons built on them.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SampleRecord;
use crate::embedding::{dot, l2_norm};
use crate::taxonomy::{Codebook, Dimension};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("rank weights need 1 <= K <= 3, got {0}")]
    InvalidK(usize),
    #[error("unknown {dimension} code {code:?}")]
    UnknownCode { dimension: Dimension, code: String },
    #[error("distributions are not comparable: {0}")]
    Mismatch(String),
    #[error("empty distribution: {0}")]
    Empty(String),
    #[error("group has no members")]
    NoMembers,
    #[error("code {0:?} has no category")]
    Unmapped(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    LabelCount,
    PerSample,
    Ranked,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [WeightScheme::LabelCount, WeightScheme::PerSample, WeightScheme::Ranked];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::LabelCount => "label_count",
            WeightScheme::PerSample => "per_sample",
            WeightScheme::Ranked => "ranked",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Fine,
    Category,
}

pub const MAX_LABELS: usize = 3;

/// Exact weights K:(K-1):...:1, normalized.
pub fn rank_weights_exact(k: usize) -> Result<Vec<Ratio<u64>>, AnalysisError> {
    if !(1..=MAX_LABELS).contains(&k) {
        return Err(AnalysisError::InvalidK(k));
    }
    let total = (k * (k + 1) / 2) as u64;
    Ok((0..k).map(|i| Ratio::new((k - i) as u64, total)).collect())
}

pub fn rank_weights(k: usize) -> Result<Vec<f64>, AnalysisError> {
    Ok(rank_weights_exact(k)?
        .into_iter()
        .map(|r| *r.numer() as f64 / *r.denom() as f64)
        .collect())
}

/// Per-label weights for one ranked label list. Label counts are 1 per label
/// and get normalized over the whole dataset later.
pub fn sample_weight_vector(
    labels: &[String],
    scheme: WeightScheme,
    book: &Codebook,
) -> Result<Vec<(String, f64)>, AnalysisError> {
    for code in labels {
        if !book.contains(code) {
            return Err(AnalysisError::UnknownCode {
                dimension: book.dimension,
                code: code.clone(),
            });
        }
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let weights = match scheme {
        WeightScheme::Ranked => rank_weights(labels.len())?,
        WeightScheme::PerSample => vec![1.0 / labels.len() as f64; labels.len()],
        WeightScheme::LabelCount => vec![1.0; labels.len()],
    };
    Ok(labels.iter().cloned().zip(weights).collect())
}

/// Labels of one sample for `dimension`, with catch-all codes removed unless kept.
fn retained_labels(sample: &SampleRecord, book: &Codebook, include_others: bool) -> Option<Vec<String>> {
    let labels = sample.annotations.as_ref()?.labels(book.dimension)?;
    let kept: Vec<String> = labels
        .iter()
        .filter(|c| include_others || !book.is_others(c))
        .cloned()
        .collect();
    (!kept.is_empty()).then_some(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub dimension: Dimension,
    pub level: Level,
    pub scheme: WeightScheme,
    pub include_others: bool,
    pub codes: Vec<String>,
    pub values: Vec<f64>,
    /// No labelled mass: every value is zero.
    pub empty: bool,
    /// Samples that contributed mass.
    pub samples: usize,
}

impl Distribution {
    fn zeros(book: &Codebook, scheme: WeightScheme, include_others: bool) -> Self {
        let codes = book.vector_codes(include_others);
        Self {
            dimension: book.dimension,
            level: Level::Fine,
            scheme,
            include_others,
            values: vec![0.0; codes.len()],
            codes,
            empty: true,
            samples: 0,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn value(&self, code: &str) -> Option<f64> {
        self.codes.iter().position(|c| c == code).map(|i| self.values[i])
    }

    fn index(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    fn normalize(&mut self) {
        let total = self.total();
        if total > 0.0 {
            for v in self.values.iter_mut() {
                *v /= total;
            }
            self.empty = false;
        } else {
            self.empty = true;
        }
    }

    fn check_comparable(&self, other: &Distribution) -> Result<(), AnalysisError> {
        if self.dimension != other.dimension || self.level != other.level || self.codes != other.codes {
            return Err(AnalysisError::Mismatch(format!(
                "{}/{:?} ({} codes) vs {}/{:?} ({} codes)",
                self.dimension,
                self.level,
                self.codes.len(),
                other.dimension,
                other.level,
                other.codes.len()
            )));
        }
        Ok(())
    }
}

/// Distribution over `book`'s codes for a set of annotated samples.
///
/// Catch-all codes are removed from each sample's list before weighting when
/// `include_others` is false; samples left with no labels contribute nothing.
pub fn dataset_distribution(
    samples: &[SampleRecord],
    book: &Codebook,
    scheme: WeightScheme,
    include_others: bool,
) -> Result<Distribution, AnalysisError> {
    let mut d = Distribution::zeros(book, scheme, include_others);
    for sample in samples {
        let Some(labels) = retained_labels(sample, book, include_others) else {
            continue;
        };
        for (code, w) in sample_weight_vector(&labels, scheme, book)? {
            let i = d.index(&code).expect("retained code occupies a slot");
            d.values[i] += w;
        }
        d.samples += 1;
    }
    d.normalize();
    Ok(d)
}

/// Size-weighted combination of member distributions. Members without mass are
/// skipped and the remaining weights renormalized.
pub fn group_distribution(members: &[(&Distribution, u64)]) -> Result<Distribution, AnalysisError> {
    let (first, _) = members.first().ok_or(AnalysisError::NoMembers)?;
    for (d, _) in members {
        first.check_comparable(d)?;
        if d.scheme != first.scheme || d.include_others != first.include_others {
            return Err(AnalysisError::Mismatch("members differ in scheme or others setting".into()));
        }
    }
    let live: Vec<&(&Distribution, u64)> = members.iter().filter(|(d, c)| !d.empty && *c > 0).collect();
    let total: u64 = live.iter().map(|(_, c)| c).sum();
    let mut out = Distribution {
        values: vec![0.0; first.codes.len()],
        empty: true,
        samples: 0,
        ..(*first).clone()
    };
    if total == 0 {
        return Ok(out);
    }
    for (d, count) in live {
        let w = *count as f64 / total as f64;
        for (o, v) in out.values.iter_mut().zip(&d.values) {
            *o += w * v;
        }
        out.samples += d.samples;
    }
    out.empty = false;
    Ok(out)
}

pub fn cosine_similarity(a: &Distribution, b: &Distribution) -> Result<f64, AnalysisError> {
    a.check_comparable(b)?;
    if a.empty || b.empty {
        return Err(AnalysisError::Empty("cosine needs two nonempty distributions".into()));
    }
    if a.values == b.values {
        return Ok(1.0);
    }
    let denom = l2_norm(&a.values) * l2_norm(&b.values);
    Ok((dot(&a.values, &b.values) / denom).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub entities: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

pub fn similarity_matrix(entities: &[(String, &Distribution)]) -> Result<SimilarityMatrix, AnalysisError> {
    let n = entities.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine_similarity(entities[i].1, entities[j].1)?;
            matrix[i][j] = s;
            matrix[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        entities: entities.iter().map(|(id, _)| id.clone()).collect(),
        matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEntry {
    pub code: String,
    pub prob_a: f64,
    pub prob_b: f64,
    pub diff: f64,
}

/// The `n` codes with the largest |a - b|, ties in code order.
pub fn divergence_top_n(a: &Distribution, b: &Distribution, n: usize) -> Result<Vec<DivergenceEntry>, AnalysisError> {
    a.check_comparable(b)?;
    let mut idx: Vec<usize> = (0..a.codes.len()).collect();
    let diff = |i: usize| a.values[i] - b.values[i];
    idx.sort_by(|&i, &j| diff(j).abs().total_cmp(&diff(i).abs()).then(i.cmp(&j)));
    Ok(idx
        .into_iter()
        .take(n)
        .map(|i| DivergenceEntry {
            code: a.codes[i].clone(),
            prob_a: a.values[i],
            prob_b: b.values[i],
            diff: diff(i),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDistribution {
    pub dimension_a: Dimension,
    pub dimension_b: Dimension,
    pub scheme: WeightScheme,
    pub include_others: bool,
    pub codes_a: Vec<String>,
    pub codes_b: Vec<String>,
    /// Row per code of `a`, column per code of `b`.
    pub values: Vec<Vec<f64>>,
    pub empty: bool,
    pub samples: usize,
}

impl CrossDistribution {
    pub fn marginal_a(&self) -> Vec<f64> {
        self.values.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.codes_b.len())
            .map(|j| self.values.iter().map(|row| row[j]).sum())
            .collect()
    }
}

fn normalized_weights(labels: &[String], scheme: WeightScheme, book: &Codebook) -> Result<Vec<(String, f64)>, AnalysisError> {
    let mut w = sample_weight_vector(labels, scheme, book)?;
    let total: f64 = w.iter().map(|(_, x)| x).sum();
    for (_, x) in w.iter_mut() {
        *x /= total;
    }
    Ok(w)
}

/// Joint distribution over two dimensions: each sample contributes the outer
/// product of its normalized weight vectors, and the sum is normalized. Only
/// samples labelled in both dimensions contribute.
pub fn cross_distribution(
    samples: &[SampleRecord],
    book_a: &Codebook,
    book_b: &Codebook,
    scheme: WeightScheme,
    include_others: bool,
) -> Result<CrossDistribution, AnalysisError> {
    let codes_a = book_a.vector_codes(include_others);
    let codes_b = book_b.vector_codes(include_others);
    let mut values = vec![vec![0.0; codes_b.len()]; codes_a.len()];
    let mut count = 0usize;
    for sample in samples {
        let (Some(la), Some(lb)) = (
            retained_labels(sample, book_a, include_others),
            retained_labels(sample, book_b, include_others),
        ) else {
            continue;
        };
        let wa = normalized_weights(&la, scheme, book_a)?;
        let wb = normalized_weights(&lb, scheme, book_b)?;
        for (ca, xa) in &wa {
            let i = codes_a.iter().position(|c| c == ca).expect("slot");
            for (cb, xb) in &wb {
                let j = codes_b.iter().position(|c| c == cb).expect("slot");
                values[i][j] += xa * xb;
            }
        }
        count += 1;
    }
    if count > 0 {
        let n = count as f64;
        for row in values.iter_mut() {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    Ok(CrossDistribution {
        dimension_a: book_a.dimension,
        dimension_b: book_b.dimension,
        scheme,
        include_others,
        codes_a,
        codes_b,
        values,
        empty: count == 0,
        samples: count,
    })
}

/// Sums fine-code mass into the codebook's categories.
pub fn rollup_categories(d: &Distribution, book: &Codebook) -> Result<Distribution, AnalysisError> {
    if d.level == Level::Category {
        return Ok(d.clone());
    }
    let cats = book.vector_categories(d.include_others);
    let mut values = vec![0.0; cats.len()];
    for (code, v) in d.codes.iter().zip(&d.values) {
        let cat = book.category_of(code).ok_or_else(|| AnalysisError::Unmapped(code.clone()))?;
        let i = cats.iter().position(|c| c == cat).ok_or_else(|| AnalysisError::Unmapped(code.clone()))?;
        values[i] += v;
    }
    Ok(Distribution {
        level: Level::Category,
        codes: cats,
        values,
        ..d.clone()
    })
}

/// Marginal of a cross distribution rolled up on both axes.
pub fn rollup_cross(c: &CrossDistribution, book_a: &Codebook, book_b: &Codebook) -> Result<CrossDistribution, AnalysisError> {
    let cats_a = book_a.vector_categories(c.include_others);
    let cats_b = book_b.vector_categories(c.include_others);
    let slot = |book: &Codebook, cats: &[String], code: &str| {
        book.category_of(code)
            .and_then(|cat| cats.iter().position(|c| c == cat))
            .ok_or_else(|| AnalysisError::Unmapped(code.to_string()))
    };
    let mut values = vec![vec![0.0; cats_b.len()]; cats_a.len()];
    for (i, ca) in c.codes_a.iter().enumerate() {
        let ri = slot(book_a, &cats_a, ca)?;
        for (j, cb) in c.codes_b.iter().enumerate() {
            values[ri][slot(book_b, &cats_b, cb)?] += c.values[i][j];
        }
    }
    Ok(CrossDistribution {
        codes_a: cats_a,
        codes_b: cats_b,
        values,
        ..c.clone()
    })
}
