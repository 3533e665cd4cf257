//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Below this norm both the analytic and numeric gradient are treated as
/// zero; central differences at `eps = 1e-5` carry round-off of this order.
const ZERO_NORM: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error between two gradient vectors: `|a - n| / max(|a|, |n|)`
/// in the Euclidean norm, or zero when both are numerically zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nn) = (norm(analytic), norm(numeric));
    let scale = na.max(nn);
    if scale < ZERO_NORM {
        return 0.0;
    }
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / scale
}

/// Compare the backward pass of `loss_fn` against central differences for
/// every trainable entry of `params`. `loss_fn` must be deterministic.
pub fn finite_diff_check<F>(params: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} during gradient check")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
    };
    for pi in 0..params.len() {
        let (name, t) = params.by_index(pi);
        if !t.requires_grad {
            continue;
        }
        let name = name.to_string();
        let n = t.numel();
        let a: Vec<f64> = analytic
            .param(pi)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.by_index(pi).1.data()[i];
            params.by_index_mut(pi).1.data_mut()[i] = orig + eps;
            let plus = eval(params)?;
            params.by_index_mut(pi).1.data_mut()[i] = orig - eps;
            let minus = eval(params)?;
            params.by_index_mut(pi).1.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let rel = relative_error(&a, &numeric);
        let max_abs = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(name.clone());
        }
        report.params.push(ParamCheck {
            name,
            entries: n,
            rel_error: rel,
            max_abs_error: max_abs,
        });
    }
    Ok(report)
}
