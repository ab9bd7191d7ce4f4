//! Motion-supervision and object-continuity losses.
//!
//! Every loss comes in a value form and a `*_grad` form returning the
//! analytic gradient alongside the value. The detector's tape records the
//! gradients as local Jacobians, so these functions are the single source
//! of truth for both.
//!
//! Hard gates (`pres > 0.5`, matching argselects) are constants under
//! differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};
use crate::geometry::{DetectedObject, GridState, ZWhere};
use crate::motion::MotionPrior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionLossWeights {
    pub lambda_alpha: f64,
    pub lambda_pres: f64,
    pub lambda_loc: f64,
}

impl Default for MotionLossWeights {
    fn default() -> Self {
        Self {
            lambda_alpha: 100.0,
            lambda_pres: 1000.0,
            lambda_loc: 10000.0,
        }
    }
}

impl MotionLossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda_alpha) && ok(self.lambda_pres) && ok(self.lambda_loc) {
            Ok(())
        } else {
            Err(MocError::Config("motion loss weights must be finite and >= 0".into()))
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MocError::Dimension(format!("{what}: {a} vs {b}")))
    }
}

fn squared_error_grad(x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = x
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            value += d * d;
            2.0 * d
        })
        .collect();
    (value, grad)
}

/// Sum of squared per-pixel differences between the model's mixing map and
/// the motion mask.
pub fn loss_alpha(alpha: &[f64], alpha_hat: &[f64]) -> Result<f64> {
    Ok(loss_alpha_grad(alpha, alpha_hat)?.0)
}

pub fn loss_alpha_grad(alpha: &[f64], alpha_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(alpha.len(), alpha_hat.len(), "alpha vs alpha_hat")?;
    Ok(squared_error_grad(alpha, alpha_hat))
}

pub fn loss_pres(pres: &[f64], pres_hat: &[f64]) -> Result<f64> {
    Ok(loss_pres_grad(pres, pres_hat)?.0)
}

pub fn loss_pres_grad(pres: &[f64], pres_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pres.len(), pres_hat.len(), "pres vs pres_hat")?;
    Ok(squared_error_grad(pres, pres_hat))
}

fn sq_dist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Location target for one cell: its own motion box, or, for a cell the
/// model claims but motion left empty, the motion box nearest to the
/// predicted center.
fn loc_target(
    loc: &ZWhere,
    own: Option<&ZWhere>,
    pres_on: bool,
    motion_boxes: &[ZWhere],
) -> Option<ZWhere> {
    if let Some(t) = own {
        return Some(*t);
    }
    if !pres_on {
        return None;
    }
    motion_boxes
        .iter()
        .map(|m| {
            let d = (m.center_x - loc.center_x).powi(2) + (m.center_y - loc.center_y).powi(2);
            (d, m)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, m)| *m)
}

/// Location loss counted once under the model's gate and once under the
/// motion gate.
pub fn loss_loc(
    loc: &[ZWhere],
    loc_hat: &[Option<ZWhere>],
    pres: &[f64],
    pres_hat: &[f64],
    motion_boxes: &[ZWhere],
) -> Result<f64> {
    Ok(loss_loc_grad(loc, loc_hat, pres, pres_hat, motion_boxes)?.0)
}

/// Value and gradient with respect to each cell's `[w, h, cx, cy]`.
pub fn loss_loc_grad(
    loc: &[ZWhere],
    loc_hat: &[Option<ZWhere>],
    pres: &[f64],
    pres_hat: &[f64],
    motion_boxes: &[ZWhere],
) -> Result<(f64, Vec<[f64; 4]>)> {
    let n = loc.len();
    same_len(n, loc_hat.len(), "loc vs loc_hat")?;
    same_len(n, pres.len(), "loc vs pres")?;
    same_len(n, pres_hat.len(), "loc vs pres_hat")?;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 4]; n];
    for i in 0..n {
        let model_on = pres[i] > 0.5;
        let motion_on = pres_hat[i] > 0.5;
        let gates = model_on as u8 + (motion_on && loc_hat[i].is_some()) as u8;
        if gates == 0 {
            continue;
        }
        let Some(target) = loc_target(&loc[i], loc_hat[i].as_ref(), model_on, motion_boxes) else {
            continue;
        };
        let (a, b) = (loc[i].as_array(), target.as_array());
        let w = gates as f64;
        value += w * sq_dist4(&a, &b);
        for k in 0..4 {
            grad[i][k] = w * 2.0 * (a[k] - b[k]);
        }
    }
    Ok((value, grad))
}

/// Unweighted motion-loss components for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionTerms {
    pub alpha: f64,
    pub pres: f64,
    pub loc: f64,
}

impl MotionTerms {
    pub fn weighted(&self, w: &MotionLossWeights) -> f64 {
        w.lambda_alpha * self.alpha + w.lambda_pres * self.pres + w.lambda_loc * self.loc
    }
}

/// Motion-prior boxes as latent box parameters.
pub fn motion_zwheres(prior: &MotionPrior) -> Vec<ZWhere> {
    prior.boxes.iter().map(crate::geometry::box_to_zwhere).collect()
}

pub fn motion_terms(grid: &GridState, alpha: &[f64], prior: &MotionPrior) -> Result<MotionTerms> {
    Ok(MotionTerms {
        alpha: loss_alpha(alpha, &prior.alpha_hat.as_f64())?,
        pres: loss_pres(&grid.pres, &prior.pres_hat)?,
        loc: loss_loc(
            &grid.loc,
            &prior.loc_hat,
            &grid.pres,
            &prior.pres_hat,
            &motion_zwheres(prior),
        )?,
    })
}

/// `lambda_alpha * L_alpha + lambda_pres * L_pres + lambda_loc * L_loc`
pub fn motion_loss(
    grid: &GridState,
    alpha: &[f64],
    prior: &MotionPrior,
    weights: &MotionLossWeights,
) -> Result<f64> {
    Ok(motion_terms(grid, alpha, prior)?.weighted(weights))
}

/// Elementwise `lambda * v_hat + (1 - lambda) * v`.
pub fn guidance_mix(v: &[f64], v_hat: &[f64], lambda_guid: f64) -> Result<Vec<f64>> {
    same_len(v.len(), v_hat.len(), "guidance operands")?;
    Ok(v.iter()
        .zip(v_hat)
        .map(|(a, b)| lambda_guid * b + (1.0 - lambda_guid) * a)
        .collect())
}

/// Linear decay from 1 at step 0 to 0 at `horizon`, then 0.
pub fn guidance_weight(step: usize, horizon: usize) -> f64 {
    if horizon == 0 || step >= horizon {
        0.0
    } else {
        1.0 - step as f64 / horizon as f64
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = a.iter().zip(b).fold((0.0, 0.0, 0.0), |(d, x, y), (u, v)| {
        (d + u * v, x + u * u, y + v * v)
    });
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (dot, na2, nb2) = a.iter().zip(b).fold((0.0, 0.0, 0.0), |(d, x, y), (u, v)| {
        (d + u * v, x + u * u, y + v * v)
    });
    if na2 == 0.0 || nb2 == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let s = dot / (na * nb);
    let ga = a.iter().zip(b).map(|(u, v)| v / (na * nb) - s * u / na2).collect();
    let gb = a.iter().zip(b).map(|(u, v)| u / (na * nb) - s * v / nb2).collect();
    (s, ga, gb)
}

/// Weights applied to matched and unmatched pairs in the continuity loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub matched: f64,
    pub unmatched: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            matched: -5.0,
            unmatched: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    /// Index into the frame-`t` object list.
    pub t_index: usize,
    /// Index into the frame-`t+1` object list.
    pub t1_index: usize,
    pub matched: bool,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
}

impl MatchResult {
    pub fn matched(&self) -> impl Iterator<Item = &MatchPair> {
        self.pairs.iter().filter(|p| p.matched)
    }
}

fn center_dist2(a: &DetectedObject, b: &DetectedObject) -> f64 {
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

/// Picks the candidate maximizing `score`, ties to the lowest cell index.
fn arg_best<F: Fn(&DetectedObject) -> f64>(
    candidates: &[usize],
    objects: &[DetectedObject],
    score: F,
) -> Option<usize> {
    let mut best: Option<(f64, usize, usize)> = None;
    for &j in candidates {
        let s = score(&objects[j]);
        let cell = objects[j].cell;
        best = match best {
            Some((bs, bc, _)) if s < bs || (s == bs && cell >= bc) => best,
            _ => Some((s, cell, j)),
        };
    }
    best.map(|(_, _, j)| j)
}

/// Pairs of one frame-`t` object with each of its candidates, marking the
/// candidate that is both the encoding-nearest and the location-nearest.
fn match_against(
    t_index: usize,
    o: &DetectedObject,
    candidates: &[usize],
    omega_t1: &[DetectedObject],
    out: &mut Vec<MatchPair>,
) {
    let sims: Vec<f64> = candidates
        .iter()
        .map(|&j| cosine_similarity(&o.enc, &omega_t1[j].enc))
        .collect();
    let by_enc = arg_best(candidates, omega_t1, |c| cosine_similarity(&o.enc, &c.enc));
    let by_loc = arg_best(candidates, omega_t1, |c| -center_dist2(o, c));
    let hit = match (by_enc, by_loc) {
        (Some(a), Some(b)) if a == b => Some(a),
        _ => None,
    };
    for (k, &j) in candidates.iter().enumerate() {
        out.push(MatchPair {
            t_index,
            t1_index: j,
            matched: hit == Some(j),
            similarity: sims[k],
        });
    }
}

fn check_enc_dims(omega_t: &[DetectedObject], omega_t1: &[DetectedObject]) -> Result<()> {
    let mut dims = omega_t.iter().chain(omega_t1).map(|o| o.enc.len());
    if let Some(d) = dims.next() {
        if dims.any(|e| e != d) {
            return Err(MocError::Dimension("encodings differ in dimension".into()));
        }
    }
    Ok(())
}

/// Every (t, t+1) pair with its similarity and match flag.
pub fn match_objects(omega_t: &[DetectedObject], omega_t1: &[DetectedObject]) -> Result<MatchResult> {
    check_enc_dims(omega_t, omega_t1)?;
    let all: Vec<usize> = (0..omega_t1.len()).collect();
    let mut pairs = Vec::with_capacity(omega_t.len() * omega_t1.len());
    for (i, o) in omega_t.iter().enumerate() {
        match_against(i, o, &all, omega_t1, &mut pairs);
    }
    Ok(MatchResult { pairs })
}

/// Continuity loss with its gradient with respect to the encodings of both
/// frames (one row per object).
#[derive(Debug, Clone, PartialEq)]
pub struct OcLoss {
    pub value: f64,
    pub grad_t: Vec<Vec<f64>>,
    pub grad_t1: Vec<Vec<f64>>,
    /// Number of (object, candidate) similarity evaluations performed.
    pub evaluations: usize,
}

fn oc_from_pairs(
    pairs: &[MatchPair],
    omega_t: &[DetectedObject],
    omega_t1: &[DetectedObject],
    weights: &MatchWeights,
) -> OcLoss {
    let mut grad_t: Vec<Vec<f64>> = omega_t.iter().map(|o| vec![0.0; o.enc.len()]).collect();
    let mut grad_t1: Vec<Vec<f64>> = omega_t1.iter().map(|o| vec![0.0; o.enc.len()]).collect();
    let mut value = 0.0;
    for p in pairs {
        let w = if p.matched { weights.matched } else { weights.unmatched };
        let (s, ga, gb) = cosine_similarity_grad(&omega_t[p.t_index].enc, &omega_t1[p.t1_index].enc);
        value += w * s;
        for (g, d) in grad_t[p.t_index].iter_mut().zip(&ga) {
            *g += w * d;
        }
        for (g, d) in grad_t1[p.t1_index].iter_mut().zip(&gb) {
            *g += w * d;
        }
    }
    OcLoss {
        value,
        grad_t,
        grad_t1,
        evaluations: pairs.len(),
    }
}

/// Continuity loss over all pairs of detections in consecutive frames.
pub fn oc_loss_naive(omega_t: &[DetectedObject], omega_t1: &[DetectedObject]) -> Result<f64> {
    Ok(oc_loss_naive_grad(omega_t, omega_t1, &MatchWeights::default())?.value)
}

pub fn oc_loss_naive_grad(
    omega_t: &[DetectedObject],
    omega_t1: &[DetectedObject],
    weights: &MatchWeights,
) -> Result<OcLoss> {
    let result = match_objects(omega_t, omega_t1)?;
    Ok(oc_from_pairs(&result.pairs, omega_t, omega_t1, weights))
}

/// Indices of `omega_t1` objects whose cells lie in the 3x3 block around
/// `cell`. `by_cell` maps a cell to its object index.
fn neighborhood(cell: usize, grid_h: usize, grid_w: usize, by_cell: &[Option<usize>]) -> Vec<usize> {
    let (r, c) = ((cell / grid_w) as i64, (cell % grid_w) as i64);
    let mut out = Vec::with_capacity(9);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= grid_h as i64 || nc >= grid_w as i64 {
                continue;
            }
            if let Some(j) = by_cell[(nr * grid_w as i64 + nc) as usize] {
                out.push(j);
            }
        }
    }
    out
}

/// Continuity loss restricted to each object's 3x3 cell neighborhood in the
/// next frame, for both the argselects and the sum.
pub fn oc_loss_fast(grid_t: &GridState, grid_t1: &GridState) -> Result<f64> {
    Ok(oc_loss_fast_grad(grid_t, grid_t1, &MatchWeights::default())?.0.value)
}

/// Returns the loss (with gradients indexed like the two detection lists)
/// and the detection lists themselves.
pub fn oc_loss_fast_grad(
    grid_t: &GridState,
    grid_t1: &GridState,
    weights: &MatchWeights,
) -> Result<(OcLoss, Vec<DetectedObject>, Vec<DetectedObject>)> {
    if grid_t.grid_h != grid_t1.grid_h || grid_t.grid_w != grid_t1.grid_w {
        return Err(MocError::Dimension("continuity grids differ in size".into()));
    }
    let omega_t = grid_t.detections();
    let omega_t1 = grid_t1.detections();
    let loss = oc_fast_on_objects(&omega_t, &omega_t1, grid_t.grid_h, grid_t.grid_w, weights)?;
    Ok((loss, omega_t, omega_t1))
}

/// Neighborhood-restricted continuity loss on explicit detection lists.
pub fn oc_fast_on_objects(
    omega_t: &[DetectedObject],
    omega_t1: &[DetectedObject],
    grid_h: usize,
    grid_w: usize,
    weights: &MatchWeights,
) -> Result<OcLoss> {
    let pairs = match_objects_fast(omega_t, omega_t1, grid_h, grid_w)?.pairs;
    Ok(oc_from_pairs(&pairs, omega_t, omega_t1, weights))
}

/// Like [`match_objects`] but each frame-`t` object only considers the
/// objects in its 3x3 cell neighborhood.
pub fn match_objects_fast(
    omega_t: &[DetectedObject],
    omega_t1: &[DetectedObject],
    grid_h: usize,
    grid_w: usize,
) -> Result<MatchResult> {
    check_enc_dims(omega_t, omega_t1)?;
    let mut by_cell = vec![None; grid_h * grid_w];
    for (j, o) in omega_t1.iter().enumerate() {
        if o.cell >= by_cell.len() {
            return Err(MocError::Dimension(format!("cell {} outside grid", o.cell)));
        }
        by_cell[o.cell] = Some(j);
    }
    let mut pairs = Vec::new();
    for (i, o) in omega_t.iter().enumerate() {
        if o.cell >= by_cell.len() {
            return Err(MocError::Dimension(format!("cell {} outside grid", o.cell)));
        }
        let cands = neighborhood(o.cell, grid_h, grid_w, &by_cell);
        match_against(i, o, &cands, omega_t1, &mut pairs);
    }
    Ok(MatchResult { pairs })
}

/// `L_B + (1 - lambda_align) * L_M + lambda_align * lambda_oc * L_OC`
pub fn moc_loss(base: f64, motion: f64, oc: f64, lambda_align: f64, lambda_oc: f64) -> f64 {
    base + (1.0 - lambda_align) * motion + lambda_align * lambda_oc * oc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{zwhere_to_box, BoundingBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obj(cell: usize, x: f64, y: f64, enc: Vec<f64>) -> DetectedObject {
        DetectedObject {
            cell,
            bbox: BoundingBox::new(x - 0.02, y - 0.02, x + 0.02, y + 0.02),
            enc,
            pres: 0.9,
        }
    }

    #[test]
    fn alpha_and_pres_examples() {
        assert_eq!(loss_alpha(&[0.2, 1.0], &[0.2, 1.0]).unwrap(), 0.0);
        assert_eq!(loss_alpha(&[0.0; 5], &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 3.0);
        assert_eq!(loss_pres(&[0.5], &[1.0]).unwrap(), 0.25);
        assert!(loss_pres(&[0.5], &[1.0, 0.0]).is_err());
        assert!(loss_alpha(&[0.5; 3], &[1.0]).is_err());
    }

    #[test]
    fn alpha_and_pres_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.gen_range(1..50);
            let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut oracle = 0.0;
            for i in 0..n {
                oracle += (a[i] - h[i]) * (a[i] - h[i]);
            }
            assert!((loss_alpha(&a, &h).unwrap() - oracle).abs() < 1e-9);
            assert!((loss_pres(&a, &h).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn loc_examples() {
        let z = ZWhere::new(0.1, 0.1, 0.0, 0.0);
        assert_eq!(loss_loc(&[z], &[Some(z)], &[1.0], &[1.0], &[z]).unwrap(), 0.0);
        // squared distance 0.04, counted under both gates
        let zp = ZWhere::new(0.1, 0.1, 0.2, 0.0);
        let v = loss_loc(&[zp], &[Some(z)], &[1.0], &[1.0], &[z]).unwrap();
        assert!((v - 0.08).abs() < 1e-12);
        // only the model gate
        let v = loss_loc(&[zp], &[Some(z)], &[0.9], &[0.0], &[z]).unwrap();
        assert!((v - 0.04).abs() < 1e-12);
    }

    #[test]
    fn loc_falls_back_to_nearest_motion_box() {
        let near = ZWhere::new(0.1, 0.1, 0.3, 0.3);
        let far = ZWhere::new(0.1, 0.1, -0.8, -0.8);
        let pred = ZWhere::new(0.1, 0.1, 0.2, 0.3);
        let v = loss_loc(&[pred], &[None], &[0.9], &[0.0], &[far, near]).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
        // nothing to compare against
        assert_eq!(loss_loc(&[pred], &[None], &[0.9], &[0.0], &[]).unwrap(), 0.0);
        // model gate closed
        assert_eq!(loss_loc(&[pred], &[None], &[0.1], &[0.0], &[near]).unwrap(), 0.0);
    }

    #[test]
    fn loc_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let rz = |rng: &mut ChaCha8Rng| {
                ZWhere::new(rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            };
            let loc: Vec<ZWhere> = (0..n).map(|_| rz(&mut rng)).collect();
            let pres: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let pres_hat: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let loc_hat: Vec<Option<ZWhere>> = pres_hat
                .iter()
                .map(|&p| if p > 0.5 { Some(rz(&mut rng)) } else { None })
                .collect();
            let boxes: Vec<ZWhere> = loc_hat.iter().flatten().copied().collect();
            let mut oracle = 0.0;
            for i in 0..n {
                let target = match loc_hat[i] {
                    Some(t) => Some(t),
                    None if pres[i] > 0.5 => {
                        let mut best: Option<(f64, ZWhere)> = None;
                        for b in &boxes {
                            let d = (b.center_x - loc[i].center_x).powi(2) + (b.center_y - loc[i].center_y).powi(2);
                            if best.map_or(true, |(bd, _)| d < bd) {
                                best = Some((d, *b));
                            }
                        }
                        best.map(|(_, b)| b)
                    }
                    None => None,
                };
                if let Some(t) = target {
                    let d: f64 = loc[i].as_array().iter().zip(t.as_array()).map(|(a, b)| (a - b).powi(2)).sum();
                    if pres[i] > 0.5 {
                        oracle += d;
                    }
                    if pres_hat[i] > 0.5 {
                        oracle += d;
                    }
                }
            }
            let v = loss_loc(&loc, &loc_hat, &pres, &pres_hat, &boxes).unwrap();
            assert!((v - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn motion_loss_is_linear_combination() {
        let terms = MotionTerms { alpha: 0.01, pres: 0.001, loc: 0.0001 };
        assert!((terms.weighted(&MotionLossWeights::default()) - 3.0).abs() < 1e-12);
        let zero = MotionLossWeights { lambda_alpha: 0.0, lambda_pres: 0.0, lambda_loc: 0.0 };
        assert_eq!(terms.weighted(&zero), 0.0);
        assert_eq!(MotionTerms::default().weighted(&MotionLossWeights::default()), 0.0);
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guidance_mix(&[0.3, 0.7], &[1.0, 0.0], 0.0).unwrap(), vec![0.3, 0.7]);
        assert_eq!(guidance_mix(&[0.3, 0.7], &[1.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(guidance_mix(&[0.0], &[1.0], 0.25).unwrap(), vec![0.25]);
        assert_eq!(guidance_weight(0, 3000), 1.0);
        assert_eq!(guidance_weight(1500, 3000), 0.5);
        assert_eq!(guidance_weight(3000, 3000), 0.0);
        assert_eq!(guidance_weight(9000, 3000), 0.0);
    }

    #[test]
    fn single_object_matches_itself() {
        let a = obj(0, 0.5, 0.5, vec![1.0, 2.0, 3.0]);
        let b = obj(1, 0.52, 0.5, vec![1.0, 2.0, 3.0]);
        let m = match_objects(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert!(m.pairs[0].matched);
        assert!((m.pairs[0].similarity - 1.0).abs() < 1e-12);
        assert!((oc_loss_naive(&[a], &[b]).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn disagreeing_argselects_do_not_match() {
        let a = obj(0, 0.1, 0.1, vec![1.0, 0.0]);
        let near = obj(1, 0.12, 0.1, vec![0.0, 1.0]);
        let similar = obj(9, 0.9, 0.9, vec![1.0, 0.1]);
        let m = match_objects(&[a], &[near, similar]).unwrap();
        assert!(m.pairs.iter().all(|p| !p.matched));
    }

    #[test]
    fn oc_edge_cases() {
        let a = obj(0, 0.1, 0.1, vec![1.0, 0.0]);
        assert_eq!(oc_loss_naive(&[a.clone()], &[]).unwrap(), 0.0);
        // two unmatched pairs with similarity 0.5 each
        let t = obj(0, 0.1, 0.1, vec![1.0, 0.0]);
        let u = obj(3, 0.9, 0.9, vec![0.5, 0.75f64.sqrt()]);
        let v = obj(2, 0.2, 0.1, vec![0.5, -(0.75f64.sqrt())]);
        // loc-nearest is v (cell 2); enc ties between u and v resolve to cell 2 too,
        // so disturb v to break the match
        let v = DetectedObject { enc: vec![0.5, -(0.75f64.sqrt()) - 1e-3], ..v };
        let m = match_objects(&[t.clone()], &[u.clone(), v.clone()]).unwrap();
        assert!(m.pairs.iter().all(|p| !p.matched));
        let s: f64 = m.pairs.iter().map(|p| p.similarity).sum();
        assert!((oc_loss_naive(&[t], &[u, v]).unwrap() - s).abs() < 1e-12);
        // zero vectors have similarity 0
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let z = obj(0, 0.1, 0.1, vec![0.0, 0.0]);
        let w = obj(0, 0.1, 0.1, vec![1.0, 0.0]);
        assert!(oc_loss_naive(&[z], &[w]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mismatched_enc_dims_error() {
        let a = obj(0, 0.1, 0.1, vec![1.0, 0.0]);
        let b = obj(0, 0.1, 0.1, vec![1.0, 0.0, 2.0]);
        assert!(match_objects(&[a], &[b]).is_err());
    }

    /// Exhaustive reference: scores every candidate explicitly.
    fn brute_force_matches(t: &[DetectedObject], t1: &[DetectedObject]) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        for (i, o) in t.iter().enumerate() {
            let mut enc_best: Option<usize> = None;
            let mut loc_best: Option<usize> = None;
            for j in 0..t1.len() {
                let s = cosine_similarity(&o.enc, &t1[j].enc);
                let better = match enc_best {
                    None => true,
                    Some(k) => {
                        let sk = cosine_similarity(&o.enc, &t1[k].enc);
                        s > sk || (s == sk && t1[j].cell < t1[k].cell)
                    }
                };
                if better {
                    enc_best = Some(j);
                }
                let d = center_dist2(o, &t1[j]);
                let better = match loc_best {
                    None => true,
                    Some(k) => {
                        let dk = center_dist2(o, &t1[k]);
                        d < dk || (d == dk && t1[j].cell < t1[k].cell)
                    }
                };
                if better {
                    loc_best = Some(j);
                }
            }
            for j in 0..t1.len() {
                out.push((i, j, enc_best == Some(j) && loc_best == Some(j)));
            }
        }
        out
    }

    #[test]
    fn matching_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<DetectedObject> {
                let mut cells: Vec<usize> = (0..16).collect();
                (0..n)
                    .map(|_| {
                        let cell = cells.remove(rng.gen_range(0..cells.len()));
                        let enc = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        obj(cell, rng.gen(), rng.gen(), enc)
                    })
                    .collect()
            };
            let n0 = rng.gen_range(0..=6);
            let n1 = rng.gen_range(0..=6);
            let t = mk(&mut rng, n0);
            let t1 = mk(&mut rng, n1);
            let got: Vec<_> = match_objects(&t, &t1)
                .unwrap()
                .pairs
                .iter()
                .map(|p| (p.t_index, p.t1_index, p.matched))
                .collect();
            assert_eq!(got, brute_force_matches(&t, &t1));
        }
    }

    fn grid_with(objects: &[(usize, [f64; 4], Vec<f64>)], gh: usize, gw: usize, d: usize) -> GridState {
        let n = gh * gw;
        let mut pres = vec![0.1; n];
        let mut loc = vec![ZWhere::new(0.1, 0.1, 0.0, 0.0); n];
        let mut enc = vec![0.0; n * d];
        for (cell, z, e) in objects {
            pres[*cell] = 0.9;
            loc[*cell] = ZWhere::from_array(*z);
            enc[cell * d..(cell + 1) * d].copy_from_slice(e);
        }
        GridState::new(gh, gw, d, pres, loc, enc).unwrap()
    }

    #[test]
    fn fast_equals_naive_for_clustered_objects() {
        // all objects within one another's 3x3 neighborhoods
        let g0 = grid_with(
            &[(5, [0.1, 0.1, -0.4, -0.4], vec![1.0, 0.2]), (6, [0.1, 0.1, 0.1, -0.4], vec![0.1, 1.0])],
            4, 4, 2,
        );
        let g1 = grid_with(
            &[(5, [0.1, 0.1, -0.35, -0.4], vec![0.9, 0.3]), (6, [0.1, 0.1, 0.12, -0.4], vec![0.2, 1.0])],
            4, 4, 2,
        );
        let fast = oc_loss_fast(&g0, &g1).unwrap();
        let naive = oc_loss_naive(&g0.detections(), &g1.detections()).unwrap();
        assert!((fast - naive).abs() < 1e-12);
        assert!(fast < 0.0);
    }

    #[test]
    fn fast_misses_far_correspondent() {
        // object jumps three cells: the fast path cannot see it
        let g0 = grid_with(&[(0, [0.1, 0.1, -0.9, -0.9], vec![1.0, 0.0])], 4, 4, 2);
        let g1 = grid_with(&[(3, [0.1, 0.1, 0.9, -0.9], vec![1.0, 0.0])], 4, 4, 2);
        assert_eq!(oc_loss_fast(&g0, &g1).unwrap(), 0.0);
        assert!((oc_loss_naive(&g0.detections(), &g1.detections()).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn fast_path_evaluations_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut objs: Vec<(usize, [f64; 4], Vec<f64>)> = Vec::new();
            for c in 0..64 {
                if rng.gen_bool(0.5) {
                    objs.push((c, [0.1, 0.1, 0.0, 0.0], vec![rng.gen(), rng.gen()]));
                }
            }
            let g0 = grid_with(&objs, 8, 8, 2);
            let g1 = grid_with(&objs, 8, 8, 2);
            let (loss, t, _) = oc_loss_fast_grad(&g0, &g1, &MatchWeights::default()).unwrap();
            assert!(loss.evaluations <= 9 * t.len());
        }
    }

    #[test]
    fn moc_combination_examples() {
        assert_eq!(moc_loss(1.0, 2.0, 0.3, 0.0, 10.0), 3.0);
        assert!((moc_loss(1.0, 2.0, 0.3, 1.0, 10.0) - 4.0).abs() < 1e-12);
        assert!((moc_loss(1.0, 2.0, 0.3, 0.5, 10.0) - 3.5).abs() < 1e-12);
    }

    fn fd_check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for k in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(
                (fd - grad[k]).abs() / denom <= 1e-4,
                "component {k}: fd {fd} vs analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let n = 7;
            let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let (_, g) = loss_alpha_grad(&a, &h).unwrap();
            fd_check(&|x| loss_alpha(x, &h).unwrap(), &a, &g);
            let (_, g) = loss_pres_grad(&a, &h).unwrap();
            fd_check(&|x| loss_pres(x, &h).unwrap(), &a, &g);

            // loc, gates away from 0.5
            let pres: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 0.9 } else { 0.1 }).collect();
            let loc: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let loc_hat: Vec<Option<ZWhere>> = h
                .iter()
                .map(|&p| {
                    (p > 0.5).then(|| ZWhere::new(rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                })
                .collect();
            let boxes: Vec<ZWhere> = loc_hat.iter().flatten().copied().collect();
            let to_z = |x: &[f64]| -> Vec<ZWhere> {
                x.chunks(4).map(|c| ZWhere::new(c[0], c[1], c[2], c[3])).collect()
            };
            let (_, g) = loss_loc_grad(&to_z(&loc), &loc_hat, &pres, &h, &boxes).unwrap();
            let flat: Vec<f64> = g.iter().flatten().copied().collect();
            fd_check(&|x| loss_loc(&to_z(x), &loc_hat, &pres, &h, &boxes).unwrap(), &loc, &flat);

            // continuity, gradients through encodings of both frames
            let d = 4;
            let t: Vec<DetectedObject> = (0..3)
                .map(|c| obj(c, rng.gen(), rng.gen(), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let t1: Vec<DetectedObject> = (0..4)
                .map(|c| obj(c, rng.gen(), rng.gen(), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let loss = oc_loss_naive_grad(&t, &t1, &MatchWeights::default()).unwrap();
            // hold the match pattern fixed while perturbing
            let pairs = match_objects(&t, &t1).unwrap().pairs;
            let eval = |x: &[f64]| {
                let (xa, xb) = x.split_at(t.len() * d);
                let ta: Vec<DetectedObject> = t.iter().enumerate().map(|(i, o)| DetectedObject { enc: xa[i * d..(i + 1) * d].to_vec(), ..o.clone() }).collect();
                let tb: Vec<DetectedObject> = t1.iter().enumerate().map(|(i, o)| DetectedObject { enc: xb[i * d..(i + 1) * d].to_vec(), ..o.clone() }).collect();
                oc_from_pairs(&pairs, &ta, &tb, &MatchWeights::default()).value
            };
            let x: Vec<f64> = t.iter().chain(&t1).flat_map(|o| o.enc.clone()).collect();
            let g: Vec<f64> = loss.grad_t.iter().chain(&loss.grad_t1).flatten().copied().collect();
            fd_check(&eval, &x, &g);
        }
    }

    #[test]
    fn detections_from_grid_use_zwhere_boxes() {
        let g = grid_with(&[(2, [0.2, 0.2, 0.5, -0.5], vec![1.0])], 2, 2, 1);
        let dets = g.detections();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, zwhere_to_box(&ZWhere::new(0.2, 0.2, 0.5, -0.5)));
    }
}
