//! Dataset ingestion: TACRED-format JSON, vocabularies, GloVe vectors,
//! padded batches, and a synthetic side-sensitive relation task.

mod batch;
mod glove;
mod synthetic;
mod tacred;
mod vocab;

use serde::{Deserialize, Serialize};

pub use batch::{encode_batch, encode_inputs, Batch};
pub use glove::{load_glove, EmbeddingTable};
pub use synthetic::{generate_synthetic, Side, SyntheticConfig, SyntheticSplits};
pub use tacred::{load_tacred_json, parse_tacred_json, save_tacred_json, to_tacred_json};
pub use vocab::{build_vocab, LabelSet, Vocab, Vocabularies, NO_RELATION, PAD, TACRED_RELATIONS, UNK};

/// Inclusive token span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(i: usize) -> Self {
        Self { start: i, end: i }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One sentence with a marked subject and object and its gold relation.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub pos_tags: Vec<String>,
    pub ner_tags: Vec<String>,
    pub subj_span: Span,
    pub obj_span: Span,
    pub relation: String,
}

impl RelationInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Check the structural invariants: aligned tag sequences and spans that
    /// lie inside the sentence.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("empty token list".into());
        }
        if self.pos_tags.len() != n || self.ner_tags.len() != n {
            return Err(format!(
                "{} tokens but {} POS and {} NER tags",
                n,
                self.pos_tags.len(),
                self.ner_tags.len()
            ));
        }
        for (what, s) in [("subject", self.subj_span), ("object", self.obj_span)] {
            if s.start > s.end || s.end >= n {
                return Err(format!(
                    "{what} span ({}, {}) outside sentence of {n} tokens",
                    s.start, s.end
                ));
            }
        }
        Ok(())
    }
}
