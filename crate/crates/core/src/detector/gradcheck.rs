//! Central finite-difference checks of the tape's parameter gradients.

use serde::Serialize;

use super::model::DetectorParams;
use super::tape::NodeId;
use super::train::{loss_gradient, loss_value, Batch, LossMix, LossNodes, TrainConfig, TrainMode};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    Base,
    Alpha,
    Pres,
    Loc,
    Oc,
    Moc,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Alpha,
        LossTerm::Pres,
        LossTerm::Loc,
        LossTerm::Oc,
        LossTerm::Base,
        LossTerm::Moc,
    ];

    pub fn node(&self, n: &LossNodes) -> Option<NodeId> {
        match self {
            LossTerm::Base => Some(n.base),
            LossTerm::Alpha => n.alpha,
            LossTerm::Pres => n.pres,
            LossTerm::Loc => n.loc,
            LossTerm::Oc => n.oc,
            LossTerm::Moc => Some(n.total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation flipped a detection or match gate.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub value: f64,
}

/// Relative error with a floor: components smaller than `floor` compare by
/// absolute difference scaled by `1 / floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Floor below which a central difference of step `h` on a function of
/// magnitude `f` cannot resolve a relative error of 1e-4: cancellation
/// leaves about `eps * |f| / h` of noise in the quotient.
pub fn fd_floor(f: f64, h: f64) -> f64 {
    (1e4 * f64::EPSILON * f.abs() / h).max(1e-6)
}

/// Compares the analytic gradient of `term` with central differences of
/// step `h` on the parameter coordinates in `coords`.
#[allow(clippy::too_many_arguments)]
pub fn check_term(
    params: &DetectorParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: TrainMode,
    mix: LossMix,
    term: LossTerm,
    coords: &[usize],
    h: f64,
) -> Result<Option<GradCheckReport>> {
    let Some((value, grad, gates)) = loss_gradient(params, batch, config, mode, mix, |n| term.node(n))? else {
        return Ok(None);
    };
    let flat = params.flat();
    let mut report = GradCheckReport {
        value,
        ..GradCheckReport::default()
    };
    for &k in coords {
        let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut x = flat.clone();
            x[k] += delta;
            let p = DetectorParams::from_flat(params.config, &x)?;
            Ok(loss_value(&p, batch, config, mode, mix, |n| term.node(n))?.expect("term present"))
        };
        let (fp, gp) = eval(h)?;
        let (fm, gm) = eval(-h)?;
        if gp != gates || gm != gates {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let floor = fd_floor(fp.abs().max(fm.abs()), h);
        report.max_rel_err = report.max_rel_err.max(rel_err(fd, grad[k], floor));
        report.checked += 1;
    }
    Ok(Some(report))
}
