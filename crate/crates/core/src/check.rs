//! Finite-difference gradient checks of the full model at reduced width.

use std::fmt;

use crate::data::{encode_batch, Batch, RelationInstance, Span, Vocabularies};
use crate::encoder::{Activation, NormKind, PositionMode, ResidualKind};
use crate::error::Result;
use crate::model::{ForwardMode, Init, Model, ModelConfig};
use crate::posattn::{BinConfig, PosAttnConfig};
use crate::tensor::{finite_diff_check, GradCheckReport, OpKind, RngState};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Architecture switches exercised by the gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub residual: ResidualKind,
    pub norm: NormKind,
    pub activation: Activation,
    pub position_mode: PositionMode,
    pub use_posattn: bool,
}

impl Default for Variant {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            residual: m.encoder.residual,
            norm: m.encoder.norm,
            activation: m.encoder.activation,
            position_mode: m.encoder.position_mode,
            use_posattn: m.use_posattn,
        }
    }
}

impl Variant {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            residual: cfg.encoder.residual,
            norm: cfg.encoder.norm,
            activation: cfg.encoder.activation,
            position_mode: cfg.encoder.position_mode,
            use_posattn: cfg.use_posattn,
        }
    }

    /// Every combination of residual, norm, activation and position mode.
    pub fn sweep() -> Vec<Variant> {
        let mut out = Vec::new();
        for residual in [ResidualKind::SingleSpan, ResidualKind::OriginalTwo] {
            for norm in [NormKind::Batch, NormKind::Layer] {
                for activation in [Activation::Rrelu, Activation::Relu] {
                    for position_mode in [PositionMode::Relative, PositionMode::AbsoluteSinusoidal, PositionMode::None] {
                        out.push(Variant { residual, norm, activation, position_mode, use_posattn: true });
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "residual={:?} norm={:?} activation={:?} position={:?} posattn={}",
            self.residual, self.norm, self.activation, self.position_mode, self.use_posattn
        )
    }
}

fn instance(id: &str, tokens: &[&str], subj: usize, obj: usize, relation: &str) -> RelationInstance {
    let tag = |i: usize| {
        if i == subj {
            ("NNP", "PERSON")
        } else if i == obj {
            ("NNP", "ORGANIZATION")
        } else {
            ("NN", "O")
        }
    };
    RelationInstance {
        id: id.into(),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        pos_tags: (0..tokens.len()).map(|i| tag(i).0.to_string()).collect(),
        ner_tags: (0..tokens.len()).map(|i| tag(i).1.to_string()).collect(),
        subj_span: Span::single(subj),
        obj_span: Span::single(obj),
        relation: relation.into(),
    }
}

/// A two-instance batch (lengths 6 and 4, so one row is padded) and a model
/// of width 24 with two heads. Every tensor that starts at a constant is
/// randomized so that no gradient is trivially zero.
pub fn reduced_setup(variant: Variant, seed: u64) -> Result<(Model, Batch)> {
    let data = [
        instance("g1", &["w1", "SUBJ", "w2", "cue0", "OBJ", "w3"], 1, 4, "rel:a"),
        instance("g2", &["OBJ", "cue1", "SUBJ", "w2"], 2, 0, "rel:b"),
    ];
    let vocabs = Vocabularies::from_training(&data, 1);
    let mut cfg = ModelConfig {
        word_dim: 16,
        ner_dim: 4,
        pos_dim: 4,
        use_posattn: variant.use_posattn,
        posattn: PosAttnConfig {
            pos_dim: 4,
            attn_dim: 8,
            bins: BinConfig::for_length(6),
        },
        ..Default::default()
    };
    cfg.encoder.num_heads = 2;
    cfg.encoder.ff_hidden = 12;
    cfg.encoder.max_len = 6;
    cfg.encoder.residual = variant.residual;
    cfg.encoder.norm = variant.norm;
    cfg.encoder.activation = variant.activation;
    cfg.encoder.position_mode = variant.position_mode;
    let mut rng = RngState::new(seed);
    let mut model = Model::new(cfg, vocabs, &mut rng)?;
    let specs = model.config.param_specs(&model.vocabs);
    for spec in specs {
        let t = model.params.get_mut(&spec.name)?;
        match spec.init {
            Init::Zeros => t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5)),
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5)),
            _ => {}
        }
    }
    let refs: Vec<&RelationInstance> = data.iter().collect();
    let batch = encode_batch(&refs, &model.vocabs, 6)?;
    Ok((model, batch))
}

/// Gradient check of the cross-entropy loss of the reduced model, with
/// dropout off, the RReLU midpoint slope, and batch statistics. `fault`
/// scales the gradients of one operation kind as a negative control.
pub fn gradcheck_variant(variant: Variant, seed: u64, fault: Option<(OpKind, f64)>) -> Result<GradCheckReport> {
    let (mut model, batch) = reduced_setup(variant, seed)?;
    let cfg = model.config.clone();
    finite_diff_check(&mut model.params, GRADCHECK_EPS, |tape| {
        if let Some((kind, factor)) = fault {
            tape.inject_fault(kind, factor);
        }
        let out = cfg.forward(tape, &batch, ForwardMode::Deterministic, &mut RngState::new(0))?;
        tape.cross_entropy(out.logits, &batch.labels)
    })
}
