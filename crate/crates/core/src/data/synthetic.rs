//! A relation task whose label depends on which side of the subject a cue
//! word appears. Bag-of-words models cannot separate the two sides.

use serde::{Deserialize, Serialize};

use super::{RelationInstance, Span, NO_RELATION};
use crate::error::{Error, Result};
use crate::tensor::RngState;

pub const SUBJ_TOKEN: &str = "SUBJ";
pub const OBJ_TOKEN: &str = "OBJ";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Distinct cue words; each yields two relations (cue left / right of the subject).
    pub num_cues: usize,
    pub filler_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_cues: 4,
            filler_vocab: 40,
            min_len: 8,
            max_len: 16,
            train: 10_000,
            dev: 1_000,
            test: 1_000,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.num_cues == 0 {
            return bad("num_cues must be positive");
        }
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be positive");
        }
        if self.min_len < 3 {
            return bad("min_len must be at least 3 (subject, object, cue)");
        }
        if self.max_len < self.min_len {
            return bad("max_len must be >= min_len");
        }
        if self.train == 0 {
            return bad("train split must be nonempty");
        }
        Ok(())
    }

    pub fn cue_word(c: usize) -> String {
        format!("cue{c}")
    }

    pub fn relation(cue: usize, side: Side) -> String {
        let s = match side {
            Side::Left => "left",
            Side::Right => "right",
        };
        format!("rel:cue{cue}_{s}")
    }

    /// Number of output classes including `no_relation`.
    pub fn num_classes(&self) -> usize {
        2 * self.num_cues + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Vec<RelationInstance>,
    pub dev: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
}

/// Draw one sentence with an explicit class choice (`None` = no cue).
pub(crate) fn sample_instance(
    cfg: &SyntheticConfig,
    id: String,
    cue: Option<(usize, Side)>,
    rng: &mut RngState,
) -> RelationInstance {
    let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
    let (subj, obj, cue_pos) = loop {
        let subj = rng.below(len);
        let obj = rng.below(len);
        if obj == subj {
            continue;
        }
        let Some((_, side)) = cue else { break (subj, obj, None) };
        let slots: Vec<usize> = (0..len)
            .filter(|&p| p != subj && p != obj)
            .filter(|&p| match side {
                Side::Left => p < subj,
                Side::Right => p > subj,
            })
            .collect();
        if slots.is_empty() {
            continue;
        }
        break (subj, obj, Some(slots[rng.below(slots.len())]));
    };
    let mut tokens = Vec::with_capacity(len);
    let mut pos_tags = Vec::with_capacity(len);
    let mut ner_tags = Vec::with_capacity(len);
    for p in 0..len {
        let (tok, pos, ner) = if p == subj {
            (SUBJ_TOKEN.to_string(), "NNP", "PERSON")
        } else if p == obj {
            (OBJ_TOKEN.to_string(), "NNP", "ORGANIZATION")
        } else if Some(p) == cue_pos {
            (SyntheticConfig::cue_word(cue.unwrap().0), "VB", "O")
        } else {
            (format!("w{}", rng.below(cfg.filler_vocab)), "NN", "O")
        };
        tokens.push(tok);
        pos_tags.push(pos.to_string());
        ner_tags.push(ner.to_string());
    }
    let relation = match cue {
        Some((c, side)) => SyntheticConfig::relation(c, side),
        None => NO_RELATION.to_string(),
    };
    RelationInstance {
        id,
        tokens,
        pos_tags,
        ner_tags,
        subj_span: Span::single(subj),
        obj_span: Span::single(obj),
        relation,
    }
}

fn sample_split(cfg: &SyntheticConfig, name: &str, count: usize, rng: &mut RngState) -> Vec<RelationInstance> {
    let classes = cfg.num_classes();
    (0..count)
        .map(|i| {
            let k = rng.below(classes);
            let cue = (k < 2 * cfg.num_cues).then(|| {
                (k / 2, if k.is_multiple_of(2) { Side::Left } else { Side::Right })
            });
            sample_instance(cfg, format!("synth-{name}-{i:06}"), cue, rng)
        })
        .collect()
}

/// Generate train/dev/test splits with uniformly distributed labels over the
/// `2 * num_cues` relations and `no_relation`.
pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut RngState) -> Result<SyntheticSplits> {
    cfg.validate()?;
    Ok(SyntheticSplits {
        train: sample_split(cfg, "train", cfg.train, rng),
        dev: sample_split(cfg, "dev", cfg.dev, rng),
        test: sample_split(cfg, "test", cfg.test, rng),
    })
}
