use super::{RelationInstance, Span, Vocabularies};
use crate::error::{Error, Result};

/// Padded id matrices for a mini-batch, all `size × max_len` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub words: Vec<usize>,
    pub pos: Vec<usize>,
    pub ner: Vec<usize>,
    pub subj_spans: Vec<Span>,
    pub obj_spans: Vec<Span>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_len..(b + 1) * self.max_len]
    }

    pub fn word_row(&self, b: usize) -> &[usize] {
        &self.words[b * self.max_len..(b + 1) * self.max_len]
    }
}

/// Choose a window of at most `limit` tokens that keeps both spans whenever
/// they fit, returning `(start, len)`.
fn window(inst: &RelationInstance, limit: usize) -> (usize, usize) {
    let n = inst.len();
    if n <= limit {
        return (0, n);
    }
    let lo = inst.subj_span.start.min(inst.obj_span.start);
    let hi = inst.subj_span.end.max(inst.obj_span.end);
    let start = if hi - lo < limit {
        lo.min(n - limit).max(hi + 1 - limit.min(hi + 1))
    } else {
        lo
    };
    (start, limit)
}

fn clip(span: Span, start: usize, len: usize) -> Span {
    let last = start + len - 1;
    let s = span.start.clamp(start, last) - start;
    let e = span.end.clamp(start, last) - start;
    Span::new(s, e)
}

/// Encode instances into a padded batch. Sentences longer than `limit`
/// tokens are cut to a window that keeps both arguments where possible.
pub fn encode_batch(instances: &[&RelationInstance], vocabs: &Vocabularies, limit: usize) -> Result<Batch> {
    encode(instances, vocabs, limit, true)
}

/// Like [`encode_batch`] but gold labels are ignored and set to 0, for
/// prediction on unlabelled input.
pub fn encode_inputs(instances: &[&RelationInstance], vocabs: &Vocabularies, limit: usize) -> Result<Batch> {
    encode(instances, vocabs, limit, false)
}

fn encode(instances: &[&RelationInstance], vocabs: &Vocabularies, limit: usize, labelled: bool) -> Result<Batch> {
    if instances.is_empty() {
        return Err(Error::Data("cannot encode an empty batch".into()));
    }
    let windows: Vec<(usize, usize)> = instances.iter().map(|i| window(i, limit)).collect();
    let max_len = windows.iter().map(|w| w.1).max().unwrap_or(0);
    let size = instances.len();
    let mut b = Batch {
        size,
        max_len,
        words: vec![0; size * max_len],
        pos: vec![0; size * max_len],
        ner: vec![0; size * max_len],
        subj_spans: Vec::with_capacity(size),
        obj_spans: Vec::with_capacity(size),
        labels: Vec::with_capacity(size),
        mask: vec![false; size * max_len],
        lengths: Vec::with_capacity(size),
    };
    for (row, (inst, &(start, len))) in instances.iter().zip(&windows).enumerate() {
        inst.validate()
            .map_err(|e| Error::Data(format!("instance {}: {e}", inst.id)))?;
        for t in 0..len {
            let o = row * max_len + t;
            b.words[o] = vocabs.words.id(&inst.tokens[start + t]);
            b.pos[o] = vocabs.pos.id(&inst.pos_tags[start + t]);
            b.ner[o] = vocabs.ner.id(&inst.ner_tags[start + t]);
            b.mask[o] = true;
        }
        b.subj_spans.push(clip(inst.subj_span, start, len));
        b.obj_spans.push(clip(inst.obj_span, start, len));
        let label = if labelled {
            vocabs
                .labels
                .id(&inst.relation)
                .map_err(|e| Error::Data(format!("instance {}: {e}", inst.id)))?
        } else {
            0
        };
        b.labels.push(label);
        b.lengths.push(len);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSet, Vocab, UNK};

    fn inst(id: &str, tokens: &[&str], subj: usize, obj: usize, rel: &str) -> RelationInstance {
        RelationInstance {
            id: id.into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            pos_tags: vec!["NN".into(); tokens.len()],
            ner_tags: vec!["O".into(); tokens.len()],
            subj_span: Span::single(subj),
            obj_span: Span::single(obj),
            relation: rel.into(),
        }
    }

    fn vocabs(train: &[RelationInstance]) -> Vocabularies {
        Vocabularies::from_training(train, 1)
    }

    #[test]
    fn single_instance_mask_all_true() {
        let a = inst("a", &["x", "y", "z"], 0, 2, "r1");
        let v = vocabs(std::slice::from_ref(&a));
        let b = encode_batch(&[&a], &v, 100).unwrap();
        assert_eq!(b.mask, [true, true, true]);
        assert_eq!(b.lengths, [3]);
    }

    #[test]
    fn ragged_batch_pads() {
        let a = inst("a", &["x", "y", "z"], 0, 2, "r1");
        let c = inst("c", &["x", "y", "z", "w", "v"], 1, 4, "no_relation");
        let v = vocabs(&[a.clone(), c.clone()]);
        let b = encode_batch(&[&a, &c], &v, 100).unwrap();
        assert_eq!((b.size, b.max_len), (2, 5));
        assert_eq!(b.row_mask(0), [true, true, true, false, false]);
        assert_eq!(b.row_mask(1), [true; 5]);
        assert_eq!(&b.words[3..5], &[0, 0]);
        assert_eq!(b.labels, [1, 0]);
    }

    #[test]
    fn decode_roundtrip_gives_tokens_or_unk() {
        let a = inst("a", &["x", "y", "z"], 0, 2, "r1");
        let unseen = inst("u", &["x", "q", "z"], 0, 2, "r1");
        let v = vocabs(std::slice::from_ref(&a));
        let b = encode_batch(&[&unseen], &v, 100).unwrap();
        let decoded: Vec<&str> = b.word_row(0).iter().map(|&i| v.words.token(i)).collect();
        assert_eq!(decoded, ["x", UNK, "z"]);
        assert_eq!(b.word_row(0)[1], Vocab::UNK_ID);
    }

    #[test]
    fn per_instance_fields_independent_of_batch() {
        let a = inst("a", &["x", "y", "z"], 0, 2, "r1");
        let c = inst("c", &["x", "y", "z", "w", "v"], 1, 4, "no_relation");
        let v = vocabs(&[a.clone(), c.clone()]);
        let alone = encode_batch(&[&a], &v, 100).unwrap();
        let mixed = encode_batch(&[&c, &a], &v, 100).unwrap();
        assert_eq!(&mixed.word_row(1)[..3], alone.word_row(0));
        assert_eq!(mixed.subj_spans[1], alone.subj_spans[0]);
        assert_eq!(mixed.labels[1], alone.labels[0]);
    }

    #[test]
    fn unknown_label_is_data_error() {
        let a = inst("a", &["x"], 0, 0, "r1");
        let mut v = vocabs(std::slice::from_ref(&a));
        v.labels = LabelSet::new(["other"]);
        assert!(matches!(encode_batch(&[&a], &v, 100), Err(Error::Data(_))));
    }

    #[test]
    fn long_sentences_keep_both_arguments() {
        let toks: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        let a = inst("a", &refs, 20, 25, "r1");
        let v = vocabs(std::slice::from_ref(&a));
        let b = encode_batch(&[&a], &v, 10).unwrap();
        assert_eq!(b.max_len, 10);
        let (s, o) = (b.subj_spans[0], b.obj_spans[0]);
        assert_eq!(v.words.token(b.words[s.start]), "t20");
        assert_eq!(v.words.token(b.words[o.start]), "t25");
    }
}
