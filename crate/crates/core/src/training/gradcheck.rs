use serde::{Deserialize, Serialize};

use super::{loss_and_gradient, ModelParams, ParamSet};
use crate::datamodel::{Bag, Vocabulary};
use crate::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry within the tensor.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst_parameter: String,
    pub tolerance: f64,
    pub passed: bool,
    pub parameters_checked: usize,
    pub groups: Vec<GroupError>,
}

/// Compares `analytic` against central differences of `loss` on every parameter of `params`.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F, tolerance: f64) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let analytic = analytic.tensors();
    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut groups = Vec::with_capacity(shapes.len());
    for (g, (name, len)) in shapes.iter().enumerate() {
        let mut worst = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..*len {
            let original = probe.tensors()[g].1[i];
            set(&mut probe, g, i, original + FD_STEP);
            let up = loss(&probe);
            set(&mut probe, g, i, original - FD_STEP);
            let down = loss(&probe);
            set(&mut probe, g, i, original);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic[g].1[i], numeric);
            // NaN compares false, so force it to register as the worst entry.
            if err > worst.max_rel_error || err.is_nan() && !worst.max_rel_error.is_nan() {
                worst.max_rel_error = err;
                worst.worst_index = i;
            }
        }
        groups.push(worst);
    }
    let worst = groups
        .iter()
        .fold(None::<&GroupError>, |best, g| match best {
            Some(b) if !(g.max_rel_error > b.max_rel_error || g.max_rel_error.is_nan()) => Some(b),
            _ => Some(g),
        });
    let (max_rel_error, worst_parameter) = worst
        .map(|g| (g.max_rel_error, format!("{}[{}]", g.name, g.worst_index)))
        .unwrap_or((0.0, String::new()));
    GradCheckReport {
        max_rel_error,
        worst_parameter,
        tolerance,
        passed: max_rel_error < tolerance,
        parameters_checked: shapes.iter().map(|(_, l)| l).sum(),
        groups,
    }
}

fn set<P: ParamSet>(p: &mut P, group: usize, index: usize, value: f64) {
    p.tensors_mut()[group].1[index] = value;
}

/// Full-model check of the weighted cross entropy on one bag.
pub fn gradient_check(
    model: &ModelParams,
    bag: &Bag,
    vocab: &Vocabulary,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let targets = vocab.multi_hot(&bag.labels)?;
    let weights = vocab.class_weights();
    let (_, grad) = loss_and_gradient(model, bag.frames.view(), &targets, weights)?;
    Ok(check_gradients(
        model,
        &grad,
        |m| {
            loss_and_gradient(m, bag.frames.view(), &targets, weights)
                .map_or(f64::NAN, |(l, _)| l)
        },
        tolerance,
    ))
}
