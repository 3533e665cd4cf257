use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RelationInstance, Span};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TacredRecord {
    id: String,
    relation: String,
    token: Vec<String>,
    subj_start: usize,
    subj_end: usize,
    obj_start: usize,
    obj_end: usize,
    stanford_pos: Vec<String>,
    stanford_ner: Vec<String>,
}

impl From<&RelationInstance> for TacredRecord {
    fn from(r: &RelationInstance) -> Self {
        Self {
            id: r.id.clone(),
            relation: r.relation.clone(),
            token: r.tokens.clone(),
            subj_start: r.subj_span.start,
            subj_end: r.subj_span.end,
            obj_start: r.obj_span.start,
            obj_end: r.obj_span.end,
            stanford_pos: r.pos_tags.clone(),
            stanford_ner: r.ner_tags.clone(),
        }
    }
}

/// Load a TACRED-style JSON array. Extra keys (e.g. `stanford_deprel`) are
/// ignored; record order is preserved.
pub fn load_tacred_json(path: impl AsRef<Path>) -> Result<Vec<RelationInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tacred_json(&text).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn parse_tacred_json(text: &str) -> std::result::Result<Vec<RelationInstance>, String> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| format!("not a JSON array of records: {e}"))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let label = v
                .get("id")
                .and_then(|id| id.as_str())
                .map(|s| format!("record {s}"))
                .unwrap_or_else(|| format!("record #{i}"));
            let rec: TacredRecord =
                serde_json::from_value(v).map_err(|e| format!("{label}: {e}"))?;
            let inst = RelationInstance {
                id: rec.id,
                tokens: rec.token,
                pos_tags: rec.stanford_pos,
                ner_tags: rec.stanford_ner,
                subj_span: Span::new(rec.subj_start, rec.subj_end),
                obj_span: Span::new(rec.obj_start, rec.obj_end),
                relation: rec.relation,
            };
            inst.validate().map_err(|e| format!("{label}: {e}"))?;
            Ok(inst)
        })
        .collect()
}

pub fn to_tacred_json(instances: &[RelationInstance]) -> String {
    let records: Vec<TacredRecord> = instances.iter().map(TacredRecord::from).collect();
    serde_json::to_string(&records).expect("records serialize")
}

pub fn save_tacred_json(path: impl AsRef<Path>, instances: &[RelationInstance]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_tacred_json(instances)).map_err(|e| Error::io(path, e))
}
