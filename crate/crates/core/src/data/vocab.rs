use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::RelationInstance;
use crate::error::{Error, Result};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const NO_RELATION: &str = "no_relation";

/// The 41 TACRED relation types; together with `no_relation` they form the
/// 42 output classes of the dataset.
pub const TACRED_RELATIONS: [&str; 41] = [
    "org:alternate_names",
    "org:city_of_headquarters",
    "org:country_of_headquarters",
    "org:dissolved",
    "org:founded",
    "org:founded_by",
    "org:member_of",
    "org:members",
    "org:number_of_employees/members",
    "org:parents",
    "org:political/religious_affiliation",
    "org:shareholders",
    "org:stateorprovince_of_headquarters",
    "org:subsidiaries",
    "org:top_members/employees",
    "org:website",
    "per:age",
    "per:alternate_names",
    "per:cause_of_death",
    "per:charges",
    "per:children",
    "per:cities_of_residence",
    "per:city_of_birth",
    "per:city_of_death",
    "per:countries_of_residence",
    "per:country_of_birth",
    "per:country_of_death",
    "per:date_of_birth",
    "per:date_of_death",
    "per:employee_of",
    "per:origin",
    "per:other_family",
    "per:parents",
    "per:religion",
    "per:schools_attended",
    "per:siblings",
    "per:spouse",
    "per:stateorprovince_of_birth",
    "per:stateorprovince_of_death",
    "per:stateorprovinces_of_residence",
    "per:title",
];

/// Token ↔ id map with id 0 reserved for padding and id 1 for unknown tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    itos: Vec<String>,
    stoi: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(itos: Vec<String>) -> Self {
        let stoi = itos.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { itos, stoi }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.itos
    }
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn reserved_only() -> Self {
        Self::from(vec![PAD.to_string(), UNK.to_string()])
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.is_empty()
    }

    /// Id of `token`, or [`Vocab::UNK_ID`] for unseen tokens.
    pub fn id(&self, token: &str) -> usize {
        self.stoi.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.stoi.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.itos.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.itos
    }
}

/// Index tokens occurring at least `min_count` times, ordered by descending
/// frequency and then lexicographically.
pub fn build_vocab<'a, I>(tokens: I, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD && t != UNK)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut itos = vec![PAD.to_string(), UNK.to_string()];
    itos.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocab::from(itos)
}

/// Ordered relation labels; `no_relation` is always index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSet {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { labels, index }
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

impl LabelSet {
    pub const NA_ID: usize = 0;

    /// `no_relation` followed by the remaining labels in sorted order.
    pub fn new<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> Self {
        let mut rest: Vec<String> = labels
            .into_iter()
            .filter(|l| *l != NO_RELATION)
            .map(str::to_string)
            .collect();
        rest.sort();
        rest.dedup();
        let mut all = vec![NO_RELATION.to_string()];
        all.extend(rest);
        Self::from(all)
    }

    pub fn from_instances(instances: &[RelationInstance]) -> Self {
        Self::new(instances.iter().map(|i| i.relation.as_str()))
    }

    /// The 42-class TACRED label inventory.
    pub fn tacred() -> Self {
        Self::new(TACRED_RELATIONS)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown relation label {label:?}")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// All lookup tables a model needs to encode raw instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocab,
    pub pos: Vocab,
    pub ner: Vocab,
    pub labels: LabelSet,
}

impl Vocabularies {
    /// Build every table from the training split only.
    pub fn from_training(train: &[RelationInstance], min_count: usize) -> Self {
        let words = build_vocab(train.iter().flat_map(|i| i.tokens.iter().map(String::as_str)), min_count);
        let pos = build_vocab(train.iter().flat_map(|i| i.pos_tags.iter().map(String::as_str)), 1);
        let ner = build_vocab(train.iter().flat_map(|i| i.ner_tags.iter().map(String::as_str)), 1);
        Self {
            words,
            pos,
            ner,
            labels: LabelSet::from_instances(train),
        }
    }

    /// Feature tables from `train` only; relation labels from every split,
    /// so a label absent from a small training set can still be scored.
    pub fn from_splits(train: &[RelationInstance], held_out: &[&[RelationInstance]], min_count: usize) -> Self {
        let labels = train
            .iter()
            .chain(held_out.iter().flat_map(|s| s.iter()))
            .map(|i| i.relation.as_str());
        Self {
            labels: LabelSet::new(labels),
            ..Self::from_training(train, min_count)
        }
    }
}
