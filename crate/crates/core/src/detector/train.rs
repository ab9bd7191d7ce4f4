use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    add_params, base_loss_on_tape, forward_on_tape, grid_states, DetectorParams, Guidance, ModelConfig, WindowMap,
};
use super::tape::{NodeId, Tape, Tensor};
use crate::error::{MocError, Result};
use crate::geometry::{Frame, GridState};
use crate::loss::{
    guidance_weight, loss_alpha_grad, loss_loc_grad, loss_pres_grad, match_objects_fast, motion_zwheres, oc_fast_on_objects,
    MatchWeights,
    MotionLossWeights,
};
use crate::motion::{compute_mode_background, extract_motion_prior, ModeBackground, ModeScope, MotionParams, MotionPrior};
use crate::schedule::{epoch_schedule, FrameAlignment, ScheduleParams, ScheduleRecord};
use crate::synthgen::LabeledSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Baseline,
    MotionOnly,
    FullMoc,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Baseline, TrainMode::MotionOnly, TrainMode::FullMoc];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::MotionOnly => "motion-only",
            TrainMode::FullMoc => "full-moc",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = MocError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MocError::Config(format!("unknown mode `{s}` (baseline, motion-only, full-moc)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Sequences per step; every frame of each sequence is used.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Rescales the gradient when its norm exceeds this value; 0 disables.
    pub grad_clip: f64,
    pub motion_weights: MotionLossWeights,
    pub schedule: ScheduleParams,
    pub match_weights: MatchWeights,
    pub lambda_oc: f64,
    pub eta: f64,
    pub min_area: usize,
    pub background_scope: ModeScope,
    /// Steps over which guidance decays from 1 to 0.
    pub guidance_horizon: usize,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 0.1,
            batch_size: 16,
            steps: 5000,
            seed: 0,
            optimizer: Optimizer::Sgd,
            grad_clip: 1.0,
            motion_weights: MotionLossWeights::default(),
            schedule: ScheduleParams::default(),
            match_weights: MatchWeights::default(),
            lambda_oc: 10.0,
            eta: crate::motion::DEFAULT_ETA,
            min_area: crate::motion::DEFAULT_MIN_AREA,
            background_scope: ModeScope::Global,
            guidance_horizon: 3000,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.motion_weights.validate()?;
        self.schedule.validate()?;
        let bad = |m: &str| Err(MocError::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda_oc.is_finite() && self.lambda_oc >= 0.0) {
            return bad("lambda_oc must be finite and >= 0");
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad("eta must be finite and >= 0");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be finite and >= 0");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be positive");
        }
        Ok(())
    }

    pub fn motion_params(&self) -> MotionParams {
        MotionParams {
            eta: self.eta,
            min_area: self.min_area,
        }
    }
}

/// Loss values recorded in the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub base: f64,
    pub alpha: f64,
    pub pres: f64,
    pub loc: f64,
    pub motion: f64,
    pub oc: f64,
    pub lambda_align: f64,
    pub lambda_guid: f64,
    pub detections_per_frame: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DetectorParams,
    pub trace: Vec<StepMetrics>,
    pub schedule: Vec<ScheduleRecord>,
}

/// Blending weights that vary during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMix {
    pub lambda_align: f64,
    pub lambda_guid: f64,
}

/// Frames of one step along with what they were compared against.
pub struct Batch<'a> {
    /// Sequences laid out back to back.
    pub frames: Vec<&'a Frame>,
    pub seq_len: usize,
    pub background: &'a Frame,
    /// One per frame; absent in baseline mode.
    pub priors: Option<Vec<&'a MotionPrior>>,
}

/// Scalar nodes of every loss term. Terms absent in the mode are `None`.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub base: NodeId,
    pub alpha: Option<NodeId>,
    pub pres: Option<NodeId>,
    pub loc: Option<NodeId>,
    pub motion: Option<NodeId>,
    pub oc: Option<NodeId>,
    pub params: Vec<NodeId>,
    pub grids: Vec<GridState>,
    /// Detection and match flags the losses were computed under.
    pub gates: Vec<bool>,
}

/// Builds the mode's loss graph for one batch. Motion terms are averaged
/// over frames and the continuity term over consecutive frame pairs.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    map: &Arc<WindowMap>,
    params: &DetectorParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: TrainMode,
    mix: LossMix,
) -> Result<LossNodes> {
    let model = &params.config;
    let nf = batch.frames.len();
    let ids = add_params(tape, params);
    let guidance = match (&batch.priors, mode) {
        (Some(priors), TrainMode::MotionOnly | TrainMode::FullMoc) if mix.lambda_guid > 0.0 => Some(Guidance {
            lambda: mix.lambda_guid,
            pres_hat: priors.iter().flat_map(|p| p.pres_hat.iter().copied()).collect(),
            alpha_hat: priors.iter().flat_map(|p| p.alpha_hat.as_f64()).collect(),
            loc_hat: priors.iter().flat_map(|p| p.loc_hat.iter().copied()).collect(),
        }),
        _ => None,
    };
    let fwd = forward_on_tape(tape, map, &ids, &batch.frames, batch.background, guidance.as_ref())?;
    let base = base_loss_on_tape(tape, fwd.recon, &batch.frames)?;
    let grids = grid_states(tape, model, &fwd.encoder, nf)?;
    let mut gates: Vec<bool> = grids.iter().flat_map(|g| g.pres.iter().map(|&p| p > 0.5)).collect();
    gates.extend_from_slice(&fwd.gates);

    let mut out = LossNodes {
        total: base,
        base,
        alpha: None,
        pres: None,
        loc: None,
        motion: None,
        oc: None,
        params: ids,
        grids: Vec::new(),
        gates: Vec::new(),
    };
    if mode == TrainMode::Baseline {
        out.grids = grids;
        out.gates = gates;
        return Ok(out);
    }
    let priors = batch
        .priors
        .as_ref()
        .ok_or_else(|| MocError::Config("motion priors required outside baseline mode".into()))?;
    let inv = 1.0 / nf.max(1) as f64;
    let cells = model.cells();
    let pixels = model.frame_height * model.frame_width;

    let (mut va, mut vp, mut vl) = (0.0, 0.0, 0.0);
    let mut ga = vec![0.0; nf * pixels];
    let mut gp = vec![0.0; nf * cells];
    let mut gl = vec![0.0; nf * cells * 4];
    let alpha_vals = tape.value(fwd.alpha).data.clone();
    for (f, (grid, prior)) in grids.iter().zip(priors).enumerate() {
        let (v, g) = loss_alpha_grad(&alpha_vals[f * pixels..(f + 1) * pixels], &prior.alpha_hat.as_f64())?;
        va += v * inv;
        ga[f * pixels..(f + 1) * pixels].iter_mut().zip(g).for_each(|(a, b)| *a = b * inv);
        let (v, g) = loss_pres_grad(&grid.pres, &prior.pres_hat)?;
        vp += v * inv;
        gp[f * cells..(f + 1) * cells].iter_mut().zip(g).for_each(|(a, b)| *a = b * inv);
        let (v, g) = loss_loc_grad(&grid.loc, &prior.loc_hat, &grid.pres, &prior.pres_hat, &motion_zwheres(prior))?;
        vl += v * inv;
        for (c, gc) in g.iter().enumerate() {
            for k in 0..4 {
                gl[(f * cells + c) * 4 + k] = gc[k] * inv;
            }
        }
    }
    let alpha = tape.local(va, vec![(fwd.alpha, ga)])?;
    let pres = tape.local(vp, vec![(fwd.encoder.pres, gp)])?;
    let loc = tape.local(vl, vec![(fwd.encoder.loc, gl)])?;
    let w = &config.motion_weights;
    let motion = tape.lin_comb(&[(alpha, w.lambda_alpha), (pres, w.lambda_pres), (loc, w.lambda_loc)])?;

    let lambda_oc = if mode == TrainMode::FullMoc { config.lambda_oc } else { 0.0 };
    let mut terms = vec![(base, 1.0), (motion, 1.0 - mix.lambda_align)];
    let mut oc = None;
    if mode == TrainMode::FullMoc {
        let d = model.enc_dim;
        let mut genc = vec![0.0; nf * cells * d];
        let mut value = 0.0;
        let seq_len = batch.seq_len.max(1);
        let pairs = (nf / seq_len) * seq_len.saturating_sub(1);
        let pinv = 1.0 / pairs.max(1) as f64;
        for s in 0..nf / seq_len {
            for t in 0..seq_len - 1 {
                let (f0, f1) = (s * seq_len + t, s * seq_len + t + 1);
                let (o0, o1) = (grids[f0].detections(), grids[f1].detections());
                let l = oc_fast_on_objects(&o0, &o1, model.grid_h, model.grid_w, &config.match_weights)?;
                value += l.value * pinv;
                for (f, objs, g) in [(f0, &o0, &l.grad_t), (f1, &o1, &l.grad_t1)] {
                    for (o, go) in objs.iter().zip(g) {
                        let row = (f * cells + o.cell) * d;
                        genc[row..row + d].iter_mut().zip(go).for_each(|(a, b)| *a += b * pinv);
                    }
                }
                let matches = match_objects_fast(&o0, &o1, model.grid_h, model.grid_w)?;
                gates.extend(matches.pairs.iter().map(|p| p.matched));
            }
        }
        let node = tape.local(value, vec![(fwd.encoder.enc, genc)])?;
        terms.push((node, mix.lambda_align * lambda_oc));
        oc = Some(node);
    }
    let total = tape.lin_comb(&terms)?;
    out.total = total;
    out.alpha = Some(alpha);
    out.pres = Some(pres);
    out.loc = Some(loc);
    out.motion = Some(motion);
    out.oc = oc;
    out.grids = grids;
    out.gates = gates;
    Ok(out)
}

/// Mode background for the training split.
pub fn training_backgrounds(sequences: &[LabeledSequence], scope: ModeScope) -> Result<Vec<ModeBackground>> {
    match scope {
        ModeScope::Global => {
            let frames: Vec<&Frame> = sequences.iter().flat_map(|s| s.sequence.frames()).collect();
            Ok(vec![compute_mode_background(&frames, scope)?])
        }
        ModeScope::Local => sequences
            .iter()
            .map(|s| compute_mode_background(&s.sequence.frames().iter().collect::<Vec<_>>(), scope))
            .collect(),
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(
    params: &mut DetectorParams,
    grads: &[Vec<f64>],
    config: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    let c = config.grad_clip;
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if c > 0.0 && norm > c { c / norm } else { 1.0 };
    let lr = config.learning_rate;
    match adam {
        None => {
            for (t, g) in params.tensors.iter_mut().zip(grads) {
                for (p, g) in t.data.iter_mut().zip(g) {
                    *p -= lr * scale * g;
                }
            }
        }
        Some(s) => {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            s.t += 1;
            let (c1, c2) = (1.0 - b1.powi(s.t), 1.0 - b2.powi(s.t));
            let mut k = 0;
            for (t, g) in params.tensors.iter_mut().zip(grads) {
                for (p, g) in t.data.iter_mut().zip(g) {
                    let g = g * scale;
                    s.m[k] = b1 * s.m[k] + (1.0 - b1) * g;
                    s.v[k] = b2 * s.v[k] + (1.0 - b2) * g * g;
                    *p -= lr * (s.m[k] / c1) / ((s.v[k] / c2).sqrt() + eps);
                    k += 1;
                }
            }
        }
    }
}

/// Called with the step count and current parameters every
/// `checkpoint_every` steps and once at the end.
pub type CheckpointHook<'a> = dyn FnMut(usize, &DetectorParams) -> Result<()> + 'a;

pub fn train(config: &TrainConfig, train_set: &[LabeledSequence], mode: TrainMode) -> Result<TrainOutput> {
    train_with_hook(config, train_set, mode, 0, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    config: &TrainConfig,
    train_set: &[LabeledSequence],
    mode: TrainMode,
    checkpoint_every: usize,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(MocError::Empty("training split".into()));
    }
    let model = config.model;
    let seq_len = train_set[0].sequence.len();
    if train_set.iter().any(|s| s.sequence.len() != seq_len) {
        return Err(MocError::Dimension("training sequences differ in length".into()));
    }
    let map = WindowMap::new(model)?;
    let backgrounds = training_backgrounds(train_set, config.background_scope)?;
    let bg_of = |s: usize| &backgrounds[if backgrounds.len() == 1 { 0 } else { s }].image;

    // Baseline never looks at motion.
    let priors: Option<Vec<Vec<MotionPrior>>> = if mode == TrainMode::Baseline {
        None
    } else {
        let mp = config.motion_params();
        Some(
            train_set
                .iter()
                .enumerate()
                .map(|(s, seq)| {
                    seq.sequence
                        .frames()
                        .iter()
                        .map(|f| extract_motion_prior(f, &backgrounds[if backgrounds.len() == 1 { 0 } else { s }], &mp, model.grid_h, model.grid_w))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        )
    };

    let mut params = DetectorParams::init(model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c_4000_0001);
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| AdamState {
        m: vec![0.0; params.num_params()],
        v: vec![0.0; params.num_params()],
        t: 0,
    });

    let n = train_set.len();
    let steps_per_epoch = (n / config.batch_size).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut lambda_align = 0.0;
    let mut schedule = Vec::new();
    let mut trace = Vec::new();

    for step in 0..config.steps {
        let in_epoch = step % steps_per_epoch;
        if in_epoch == 0 {
            order.shuffle(&mut rng);
        }
        let picks: Vec<usize> = (0..config.batch_size).map(|k| order[(in_epoch * config.batch_size + k) % n]).collect();

        // The alignment weight is set once per epoch from the current
        // model on the epoch's first batch.
        if in_epoch == 0 {
            if let Some(p) = &priors {
                let mut frames = Vec::new();
                for &s in &picks {
                    let seq: Vec<&Frame> = train_set[s].sequence.frames().iter().collect();
                    let grids = super::model::encode_frames(&params, &seq, bg_of(s))?;
                    for (grid, prior) in grids.iter().zip(&p[s]) {
                        frames.push(FrameAlignment {
                            pred: grid.detections().iter().map(|d| d.bbox).collect(),
                            motion: prior.cell_boxes(),
                        });
                    }
                }
                let rec = epoch_schedule(step / steps_per_epoch, &frames, &config.schedule);
                lambda_align = rec.lambda_align;
                schedule.push(rec);
            }
        }

        // Sequences sharing a background are batched together; with a
        // global background that is the whole batch.
        let groups: Vec<Vec<usize>> = if backgrounds.len() == 1 {
            vec![picks.clone()]
        } else {
            picks.iter().map(|&s| vec![s]).collect()
        };
        let lambda_guid = if mode == TrainMode::Baseline { 0.0 } else { guidance_weight(step, config.guidance_horizon) };
        let mix = LossMix { lambda_align, lambda_guid };

        let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut m = StepMetrics {
            step,
            lambda_align,
            lambda_guid,
            ..StepMetrics::default()
        };
        let gw = 1.0 / groups.len() as f64;
        let mut detections = 0usize;
        for group in &groups {
            let frames: Vec<&Frame> = group.iter().flat_map(|&s| train_set[s].sequence.frames()).collect();
            let batch_priors = priors
                .as_ref()
                .map(|p| group.iter().flat_map(|&s| p[s].iter()).collect::<Vec<_>>());
            let batch = Batch {
                frames,
                seq_len,
                background: bg_of(group[0]),
                priors: batch_priors,
            };
            let mut tape = Tape::new();
            let nodes = build_loss(&mut tape, &map, &params, &batch, config, mode, mix)?;
            let val = |id: Option<NodeId>| id.map_or(0.0, |i| tape.value(i).data[0]);
            let terms = [
                ("L_B", val(Some(nodes.base))),
                ("L_alpha", val(nodes.alpha)),
                ("L_pres", val(nodes.pres)),
                ("L_loc", val(nodes.loc)),
                ("L_OC", val(nodes.oc)),
                ("L_MOC", val(Some(nodes.total))),
            ];
            if let Some((term, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
                return Err(MocError::NonFinite {
                    step,
                    term: term.to_string(),
                });
            }
            m.base += terms[0].1 * gw;
            m.alpha += terms[1].1 * gw;
            m.pres += terms[2].1 * gw;
            m.loc += terms[3].1 * gw;
            m.oc += terms[4].1 * gw;
            m.total += terms[5].1 * gw;
            m.motion += val(nodes.motion) * gw;

            let adj = tape.backward(nodes.total)?;
            for (k, id) in nodes.params.iter().enumerate() {
                if let Some(g) = &adj[id.0] {
                    grads[k].iter_mut().zip(g).for_each(|(a, b)| *a += b * gw);
                }
            }
            detections += nodes.grids.iter().map(|g| g.detections().len()).sum::<usize>();
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(MocError::NonFinite {
                step,
                term: "gradient".into(),
            });
        }
        m.detections_per_frame = detections as f64 / (config.batch_size * seq_len) as f64;
        if step % config.trace_every == 0 || step + 1 == config.steps {
            trace.push(m);
        }
        apply_update(&mut params, &grads, config, &mut adam);
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 && step + 1 != config.steps {
            hook(step + 1, &params)?;
        }
    }
    hook(config.steps, &params)?;
    Ok(TrainOutput { params, trace, schedule })
}

/// Adds the same tensors to a fresh tape and returns the flattened
/// gradient of `pick(nodes)` with respect to every parameter.
pub fn loss_gradient(
    params: &DetectorParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: TrainMode,
    mix: LossMix,
    pick: impl Fn(&LossNodes) -> Option<NodeId>,
) -> Result<Option<(f64, Vec<f64>, Vec<bool>)>> {
    let map = WindowMap::new(params.config)?;
    let mut tape = Tape::new();
    let nodes = build_loss(&mut tape, &map, params, batch, config, mode, mix)?;
    let Some(target) = pick(&nodes) else { return Ok(None) };
    let adj = tape.backward(target)?;
    let flat = nodes
        .params
        .iter()
        .zip(&params.tensors)
        .flat_map(|(id, t): (&NodeId, &Tensor)| adj[id.0].clone().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(Some((tape.value(target).data[0], flat, nodes.gates)))
}

/// Value of `pick(nodes)` without recording.
pub fn loss_value(
    params: &DetectorParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: TrainMode,
    mix: LossMix,
    pick: impl Fn(&LossNodes) -> Option<NodeId>,
) -> Result<Option<(f64, Vec<bool>)>> {
    let map = WindowMap::new(params.config)?;
    let mut tape = Tape::inference();
    let nodes = build_loss(&mut tape, &map, params, batch, config, mode, mix)?;
    Ok(pick(&nodes).map(|id| (tape.value(id).data[0], nodes.gates)))
}
