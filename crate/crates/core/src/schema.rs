//! Sentiment category sets and the category-to-integer mapping used to weight
//! contrastive pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub label: String,
    pub m: i64,
}

/// How the mapped distance between two categories becomes a pair weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `1 − |M(a) − M(b)| / range`: identical categories weigh 1.
    #[default]
    Similarity,
    /// `|M(a) − M(b)| / range`, the bare normalized distance.
    Literal,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "literal" | "literal-distance" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown weight mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub name: String,
    pub categories: Vec<Category>,
    #[serde(default)]
    pub weight_mode: WeightMode,
}

fn cats(pairs: &[(&str, i64)]) -> Vec<Category> {
    pairs
        .iter()
        .map(|(label, m)| Category {
            label: (*label).to_string(),
            m: *m,
        })
        .collect()
}

impl CategorySchema {
    pub fn new(name: impl Into<String>, categories: Vec<Category>) -> Result<Self> {
        let schema = Self {
            name: name.into(),
            categories,
            weight_mode: WeightMode::Similarity,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// MVSA-Single / MVSA-Multiple: Positive 0, Neutral 1, Negative 2.
    pub fn mvsa() -> Self {
        Self {
            name: "mvsa".into(),
            categories: cats(&[("Positive", 0), ("Neutral", 1), ("Negative", 2)]),
            weight_mode: WeightMode::Similarity,
        }
    }

    /// TumEmo: Love 0, Happy 1, Calm 2, Bored 3, Sad 4, Angry 5, Fear 6.
    pub fn tumemo() -> Self {
        Self {
            name: "tumemo".into(),
            categories: cats(&[
                ("Love", 0),
                ("Happy", 1),
                ("Calm", 2),
                ("Bored", 3),
                ("Sad", 4),
                ("Angry", 5),
                ("Fear", 6),
            ]),
            weight_mode: WeightMode::Similarity,
        }
    }

    /// HFM (sarcasm): Positive 0, Negative 1.
    pub fn hfm() -> Self {
        Self {
            name: "hfm".into(),
            categories: cats(&[("Positive", 0), ("Negative", 1)]),
            weight_mode: WeightMode::Similarity,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mvsa" | "mvsa-single" | "mvsa-multiple" => Some(Self::mvsa()),
            "tumemo" => Some(Self::tumemo()),
            "hfm" => Some(Self::hfm()),
            _ => None,
        }
    }

    /// Reads `{"name": .., "categories": [{"label": .., "m": ..}, ..]}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    /// A built-in name or a path to a JSON schema file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(s) => Ok(s),
            None => Self::from_json_file(name_or_path),
        }
    }

    pub fn with_weight_mode(mut self, mode: WeightMode) -> Self {
        self.weight_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Schema(format!(
                "{} needs at least two categories",
                self.name
            )));
        }
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                if a.m == b.m {
                    return Err(Error::Schema(format!(
                        "{} and {} share mapped value {}",
                        a.label, b.label, a.m
                    )));
                }
                if a.label == b.label {
                    return Err(Error::Schema(format!("duplicate label {}", a.label)));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.label.eq_ignore_ascii_case(label))
            .ok_or_else(|| Error::UnknownCategory(label.to_string()))
    }

    fn range(&self) -> f64 {
        let max = self.categories.iter().map(|c| c.m).max().unwrap_or(0);
        let min = self.categories.iter().map(|c| c.m).min().unwrap_or(0);
        (max - min).abs() as f64
    }

    fn mapped(&self, idx: usize) -> Result<i64> {
        self.categories
            .get(idx)
            .map(|c| c.m)
            .ok_or_else(|| Error::UnknownCategory(format!("index {idx} in {}", self.name)))
    }

    /// Pair weight in `[0, 1]` for two category indices.
    pub fn pair_weight(&self, a: usize, b: usize) -> Result<f64> {
        let distance = (self.mapped(a)? - self.mapped(b)?).abs() as f64 / self.range();
        Ok(match self.weight_mode {
            WeightMode::Similarity => 1.0 - distance,
            WeightMode::Literal => distance,
        })
    }

    pub fn pair_weight_by_label(&self, a: &str, b: &str) -> Result<f64> {
        self.pair_weight(self.index_of(a)?, self.index_of(b)?)
    }

    /// `B×B` matrix of pair weights for a batch of labels.
    pub fn weight_matrix(&self, labels: &[usize]) -> Result<Tensor> {
        let n = labels.len();
        let mut w = Tensor::zeros(n, n);
        for (i, &a) in labels.iter().enumerate() {
            for (j, &b) in labels.iter().enumerate() {
                w.set(i, j, self.pair_weight(a, b)?);
            }
        }
        Ok(w)
    }
}
