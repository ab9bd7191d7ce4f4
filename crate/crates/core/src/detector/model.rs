//! Grid detector: a shared per-cell encoder over a window centered on each
//! cell, heads for presence, box and encoding, and a decoder that paints
//! each cell's window back from its encoding.
//!
//! Each window is `patch x patch` pixels around the cell center, so with
//! the default patch twice the cell size a cell sees (and paints) half a
//! cell beyond its border. A sprite straddling cells can then be drawn by
//! the cell holding its center alone.
//!
//! The encoder reads the frame minus the fixed background. A cell paints
//! only the pixels inside its own box; box membership is a constant of the
//! pass, so the box itself learns from the location loss alone.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, CustomOp, NodeId, Tape, Tensor};
use crate::error::{MocError, Result};
use crate::geometry::{zwhere_to_box, BoundingBox, DetectedObject, Frame, GridState, ZWhere};
use crate::loss::guidance_mix;

/// Blend denominator guard.
const FG_EPS: f64 = 1e-6;
const INIT_RANGE: f64 = 0.05;
/// Head layout: presence logit, two offsets, two extents, then the encoding.
const HEAD_FIXED: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Window side in pixels.
    pub patch: usize,
    /// Average-pooling factor applied to the window before encoding; the
    /// decoder paints at the pooled resolution.
    pub pool: usize,
    pub hidden: usize,
    pub enc_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_height: 128,
            frame_width: 128,
            grid_h: 16,
            grid_w: 16,
            patch: 16,
            pool: 1,
            hidden: 64,
            enc_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MocError::Config(m));
        if [self.grid_h, self.grid_w, self.patch, self.pool, self.hidden, self.enc_dim].contains(&0) {
            return bad("model sizes must be positive".into());
        }
        if self.frame_height % self.grid_h != 0 || self.frame_width % self.grid_w != 0 {
            return bad(format!(
                "frame {}x{} not divisible by grid {}x{}",
                self.frame_height, self.frame_width, self.grid_h, self.grid_w
            ));
        }
        let (ch, cw) = (self.cell_h(), self.cell_w());
        if (self.patch + ch) % 2 != 0 || (self.patch + cw) % 2 != 0 {
            return bad(format!("patch {} cannot be centered on {ch}x{cw} cells", self.patch));
        }
        if self.patch % self.pool != 0 {
            return bad(format!("patch {} not divisible by pool {}", self.patch, self.pool));
        }
        Ok(())
    }

    pub fn cell_h(&self) -> usize {
        self.frame_height / self.grid_h
    }

    pub fn cell_w(&self) -> usize {
        self.frame_width / self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Side of the pooled window.
    pub fn q(&self) -> usize {
        self.patch / self.pool
    }

    pub fn input_dim(&self) -> usize {
        self.q() * self.q() * 3
    }

    pub fn decoder_dim(&self) -> usize {
        self.q() * self.q() * 4
    }

    pub fn head_dim(&self) -> usize {
        HEAD_FIXED + self.enc_dim
    }

    fn window_origin(&self, cell: usize) -> (isize, isize) {
        let (r, c) = (cell / self.grid_w, cell % self.grid_w);
        let y = (r * self.cell_h()) as isize + (self.cell_h() as isize - self.patch as isize) / 2;
        let x = (c * self.cell_w()) as isize + (self.cell_w() as isize - self.patch as isize) / 2;
        (y, x)
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        vec![
            ("enc_w", self.input_dim(), self.hidden),
            ("enc_b", 1, self.hidden),
            ("head_w", self.hidden, self.head_dim()),
            ("head_b", 1, self.head_dim()),
            ("dec_w", self.enc_dim, self.decoder_dim()),
            ("dec_b", 1, self.decoder_dim()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: ModelConfig,
    /// One tensor per entry of [`ModelConfig::param_shapes`].
    pub tensors: Vec<Tensor>,
}

impl DetectorParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.param_shapes().iter().map(|&(_, r, c)| Tensor::zeros(r, c)).collect();
        Ok(Self { config, tensors })
    }

    /// Uniform in `[-0.05, 0.05]` from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.tensors {
            for v in &mut t.data {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if flat.len() != p.num_params() {
            return Err(MocError::Shape(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in &mut p.tensors {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-pixel list of the windows covering it.
#[derive(Debug)]
pub struct WindowMap {
    pub config: ModelConfig,
    start: Vec<usize>,
    /// `(cell, pooled window index)`
    entries: Vec<(usize, usize)>,
}

impl WindowMap {
    pub fn new(config: ModelConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let (h, w) = (config.frame_height, config.frame_width);
        let mut lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); h * w];
        let (p, pool, q) = (config.patch as isize, config.pool, config.q());
        for cell in 0..config.cells() {
            let (y0, x0) = config.window_origin(cell);
            for wy in 0..p {
                let y = y0 + wy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for wx in 0..p {
                    let x = x0 + wx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let k = (wy as usize / pool) * q + wx as usize / pool;
                    lists[y as usize * w + x as usize].push((cell, k));
                }
            }
        }
        let mut start = Vec::with_capacity(h * w + 1);
        let mut entries = Vec::new();
        for l in lists {
            start.push(entries.len());
            entries.extend(l);
        }
        start.push(entries.len());
        Ok(Arc::new(Self { config, start, entries }))
    }

    fn pixels(&self) -> usize {
        self.start.len() - 1
    }

    fn cover(&self, pixel: usize) -> &[(usize, usize)] {
        &self.entries[self.start[pixel]..self.start[pixel + 1]]
    }

    /// For every frame, pixel and covering window, whether the pixel center
    /// lies inside that cell's box. `loc` has one `[w, h, cx, cy]` row per
    /// (frame, cell).
    pub fn box_gates(&self, loc: &[f64], frames: usize) -> Vec<bool> {
        let (h, w) = (self.config.frame_height, self.config.frame_width);
        let cells = self.config.cells();
        let boxes: Vec<BoundingBox> = loc
            .chunks(4)
            .map(|z| zwhere_to_box(&ZWhere::from_array([z[0], z[1], z[2], z[3]])))
            .collect();
        let mut out = Vec::with_capacity(frames * self.entries.len());
        for f in 0..frames {
            for p in 0..self.pixels() {
                let x = ((p % w) as f64 + 0.5) / w as f64;
                let y = ((p / w) as f64 + 0.5) / h as f64;
                for &(cell, _) in self.cover(p) {
                    let b = &boxes[f * cells + cell];
                    out.push(x >= b.x_min && x <= b.x_max && y >= b.y_min && y <= b.y_max);
                }
            }
        }
        out
    }

    fn gate(&self, gates: &[bool], f: usize, p: usize, e: usize) -> bool {
        gates[f * self.entries.len() + self.start[p] + e]
    }
}

/// Pooled windows of every cell of every frame, one row per (frame, cell).
pub fn encoder_input(config: &ModelConfig, frames: &[&Frame], background: &Frame) -> Result<Tensor> {
    config.validate()?;
    let (h, w) = (config.frame_height, config.frame_width);
    let (q, pool) = (config.q(), config.pool);
    let dim = config.input_dim();
    let cells = config.cells();
    if background.height() != h || background.width() != w {
        return Err(MocError::Dimension("background does not match model frame size".into()));
    }
    let mut data = vec![0.0; frames.len() * cells * dim];
    let norm = 1.0 / (pool * pool) as f64;
    for (f, frame) in frames.iter().enumerate() {
        if frame.height() != h || frame.width() != w {
            return Err(MocError::Dimension(format!(
                "frame {}x{} but model expects {h}x{w}",
                frame.height(),
                frame.width()
            )));
        }
        let px = frame.data();
        let bgx = background.data();
        for cell in 0..cells {
            let (y0, x0) = config.window_origin(cell);
            let row = &mut data[(f * cells + cell) * dim..(f * cells + cell + 1) * dim];
            for qy in 0..q {
                for qx in 0..q {
                    let mut acc = [0.0f64; 3];
                    for dy in 0..pool {
                        let y = y0 + (qy * pool + dy) as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..pool {
                            let x = x0 + (qx * pool + dx) as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let i = (y as usize * w + x as usize) * 3;
                            for c in 0..3 {
                                acc[c] += px[i + c] as f64 - bgx[i + c] as f64;
                            }
                        }
                    }
                    for c in 0..3 {
                        row[(qy * q + qx) * 3 + c] = acc[c] * norm;
                    }
                }
            }
        }
    }
    Tensor::new(frames.len() * cells, dim, data)
}

/// Raw offsets/extents to `[w, h, cx, cy]`, centers clamped to the frame.
/// Extents are bounded by the window, so an untrained box is about one
/// cell wide.
struct LocOp {
    grid_h: usize,
    grid_w: usize,
    /// Window extent as a fraction of the frame, per axis.
    max_w: f64,
    max_h: f64,
}

impl LocOp {
    fn cell_center(&self, row: usize) -> (f64, f64) {
        let cell = row % (self.grid_h * self.grid_w);
        let (r, c) = (cell / self.grid_w, cell % self.grid_w);
        (
            (c as f64 + 0.5) * 2.0 / self.grid_w as f64 - 1.0,
            (r as f64 + 0.5) * 2.0 / self.grid_h as f64 - 1.0,
        )
    }

    fn forward(&self, raw: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(raw.rows, 4);
        for i in 0..raw.rows {
            let z = &raw.data[i * 4..i * 4 + 4];
            let (ccx, ccy) = self.cell_center(i);
            out.data[i * 4] = self.max_w * sigmoid(z[2]);
            out.data[i * 4 + 1] = self.max_h * sigmoid(z[3]);
            out.data[i * 4 + 2] = (ccx + z[0].tanh() * 2.0 / self.grid_w as f64).clamp(-1.0, 1.0);
            out.data[i * 4 + 3] = (ccy + z[1].tanh() * 2.0 / self.grid_h as f64).clamp(-1.0, 1.0);
        }
        out
    }
}

impl CustomOp for LocOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let raw = inputs[0];
        let mut d = vec![0.0; raw.len()];
        for i in 0..raw.rows {
            let z = &raw.data[i * 4..i * 4 + 4];
            let o = &output.data[i * 4..i * 4 + 4];
            let (ccx, ccy) = self.cell_center(i);
            let (sw, sh) = (o[0] / self.max_w, o[1] / self.max_h);
            d[i * 4 + 2] = g[i * 4] * self.max_w * sw * (1.0 - sw);
            d[i * 4 + 3] = g[i * 4 + 1] * self.max_h * sh * (1.0 - sh);
            let ux = ccx + z[0].tanh() * 2.0 / self.grid_w as f64;
            if (-1.0..=1.0).contains(&ux) {
                d[i * 4] = g[i * 4 + 2] * (1.0 - z[0].tanh().powi(2)) * 2.0 / self.grid_w as f64;
            }
            let uy = ccy + z[1].tanh() * 2.0 / self.grid_h as f64;
            if (-1.0..=1.0).contains(&uy) {
                d[i * 4 + 1] = g[i * 4 + 3] * (1.0 - z[1].tanh().powi(2)) * 2.0 / self.grid_h as f64;
            }
        }
        vec![d]
    }
}

/// Foreground coverage `alpha = 1 - prod_i (1 - pres_i * mask_i)` over the
/// windows covering each pixel; a window only covers pixels inside its
/// cell's box.
struct AlphaOp {
    map: Arc<WindowMap>,
    frames: usize,
    gates: Vec<bool>,
}

impl AlphaOp {
    fn forward(&self, pres: &Tensor, dec: &Tensor) -> Tensor {
        let cells = self.map.config.cells();
        let dd = self.map.config.decoder_dim();
        let n = self.map.pixels();
        let mut out = Tensor::zeros(self.frames, n);
        for f in 0..self.frames {
            for p in 0..n {
                let mut prod = 1.0;
                for (e, &(cell, k)) in self.map.cover(p).iter().enumerate() {
                    if !self.map.gate(&self.gates, f, p, e) {
                        continue;
                    }
                    let row = f * cells + cell;
                    prod *= 1.0 - pres.data[row] * dec.data[row * dd + k * 4 + 3];
                }
                out.data[f * n + p] = 1.0 - prod;
            }
        }
        out
    }
}

impl CustomOp for AlphaOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let (pres, dec) = (inputs[0], inputs[1]);
        let cells = self.map.config.cells();
        let dd = self.map.config.decoder_dim();
        let n = self.map.pixels();
        let mut dp = vec![0.0; pres.len()];
        let mut dm = vec![0.0; dec.len()];
        for f in 0..self.frames {
            for p in 0..n {
                let gp = g[f * n + p];
                if gp == 0.0 {
                    continue;
                }
                let cover = self.map.cover(p);
                for (e, &(cell, k)) in cover.iter().enumerate() {
                    if !self.map.gate(&self.gates, f, p, e) {
                        continue;
                    }
                    let mut excl = 1.0;
                    for (e2, &(c2, k2)) in cover.iter().enumerate() {
                        if e2 != e && self.map.gate(&self.gates, f, p, e2) {
                            let r2 = f * cells + c2;
                            excl *= 1.0 - pres.data[r2] * dec.data[r2 * dd + k2 * 4 + 3];
                        }
                    }
                    let row = f * cells + cell;
                    let mi = row * dd + k * 4 + 3;
                    dp[row] += gp * dec.data[mi] * excl;
                    dm[mi] += gp * pres.data[row] * excl;
                }
            }
        }
        vec![dp, dm]
    }
}

/// `recon = alpha * fg + (1 - alpha) * bg`, where `fg` blends the covering
/// windows' colors weighted by `pres * mask`.
struct ReconOp {
    map: Arc<WindowMap>,
    frames: usize,
    background: Vec<f64>,
    gates: Vec<bool>,
}

impl ReconOp {
    /// Blend weight sum and weighted color sum at one pixel.
    fn blend(&self, f: usize, p: usize, pres: &Tensor, dec: &Tensor) -> (f64, [f64; 3]) {
        let cells = self.map.config.cells();
        let dd = self.map.config.decoder_dim();
        let mut wsum = 0.0;
        let mut csum = [0.0; 3];
        for (e, &(cell, k)) in self.map.cover(p).iter().enumerate() {
            if !self.map.gate(&self.gates, f, p, e) {
                continue;
            }
            let row = f * cells + cell;
            let base = row * dd + k * 4;
            let w = pres.data[row] * dec.data[base + 3];
            wsum += w;
            for c in 0..3 {
                csum[c] += w * dec.data[base + c];
            }
        }
        (wsum, csum)
    }

    fn forward(&self, alpha: &Tensor, pres: &Tensor, dec: &Tensor) -> Tensor {
        let n = self.map.pixels();
        let mut out = Tensor::zeros(self.frames, n * 3);
        for f in 0..self.frames {
            for p in 0..n {
                let (wsum, csum) = self.blend(f, p, pres, dec);
                let a = alpha.data[f * n + p];
                for c in 0..3 {
                    let fg = csum[c] / (wsum + FG_EPS);
                    out.data[(f * n + p) * 3 + c] = a * fg + (1.0 - a) * self.background[p * 3 + c];
                }
            }
        }
        out
    }
}

impl CustomOp for ReconOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let (alpha, pres, dec) = (inputs[0], inputs[1], inputs[2]);
        let cells = self.map.config.cells();
        let dd = self.map.config.decoder_dim();
        let n = self.map.pixels();
        let mut da = vec![0.0; alpha.len()];
        let mut dp = vec![0.0; pres.len()];
        let mut dd_ = vec![0.0; dec.len()];
        for f in 0..self.frames {
            for p in 0..n {
                let gi = &g[(f * n + p) * 3..(f * n + p) * 3 + 3];
                let (wsum, csum) = self.blend(f, p, pres, dec);
                let denom = wsum + FG_EPS;
                let a = alpha.data[f * n + p];
                let fg = [csum[0] / denom, csum[1] / denom, csum[2] / denom];
                let mut ga = 0.0;
                for c in 0..3 {
                    ga += gi[c] * (fg[c] - self.background[p * 3 + c]);
                }
                da[f * n + p] = ga;
                let gf = [gi[0] * a, gi[1] * a, gi[2] * a];
                for (e, &(cell, k)) in self.map.cover(p).iter().enumerate() {
                    if !self.map.gate(&self.gates, f, p, e) {
                        continue;
                    }
                    let row = f * cells + cell;
                    let base = row * dd + k * 4;
                    let m = dec.data[base + 3];
                    let w = pres.data[row] * m;
                    let mut gw = 0.0;
                    for c in 0..3 {
                        gw += gf[c] * (dec.data[base + c] - fg[c]) / denom;
                        dd_[base + c] += gf[c] * w / denom;
                    }
                    dp[row] += gw * m;
                    dd_[base + 3] += gw * pres.data[row];
                }
            }
        }
        vec![da, dp, dd_]
    }
}

/// Leaf ids of the parameter tensors, in [`ModelConfig::param_shapes`] order.
pub type ParamIds = Vec<NodeId>;

/// Encoder outputs for a stack of frames, one row per (frame, cell).
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub pres: NodeId,
    pub loc: NodeId,
    pub enc: NodeId,
}

pub fn add_params(tape: &mut Tape, params: &DetectorParams) -> ParamIds {
    params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

pub fn encode_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    ids: &ParamIds,
    frames: &[&Frame],
    background: &Frame,
) -> Result<EncoderNodes> {
    let x = tape.leaf(encoder_input(config, frames, background)?);
    let h = tape.matmul(x, ids[0])?;
    let h = tape.add_bias(h, ids[1])?;
    let h = tape.tanh(h);
    let z = tape.matmul(h, ids[2])?;
    let z = tape.add_bias(z, ids[3])?;
    let pres_raw = tape.slice_cols(z, 0, 1)?;
    let pres = tape.sigmoid(pres_raw);
    let loc_raw = tape.slice_cols(z, 1, 4)?;
    let op = LocOp {
        grid_h: config.grid_h,
        grid_w: config.grid_w,
        max_w: (config.patch as f64 / config.frame_width as f64).min(1.0),
        max_h: (config.patch as f64 / config.frame_height as f64).min(1.0),
    };
    let loc_val = op.forward(tape.value(loc_raw));
    let loc = tape.custom(vec![loc_raw], loc_val, Box::new(op));
    let enc = tape.slice_cols(z, HEAD_FIXED, config.enc_dim)?;
    Ok(EncoderNodes { pres, loc, enc })
}

/// Motion-derived substitutes blended into what the decoder sees.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub lambda: f64,
    /// One entry per (frame, cell).
    pub pres_hat: Vec<f64>,
    /// One entry per (frame, pixel).
    pub alpha_hat: Vec<f64>,
    /// One entry per (frame, cell); cells without a target keep the model's.
    pub loc_hat: Vec<Option<ZWhere>>,
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub encoder: EncoderNodes,
    pub decoded: NodeId,
    /// Model coverage before guidance, `frames x pixels`.
    pub alpha: NodeId,
    /// `frames x (pixels * 3)`
    pub recon: NodeId,
    /// Box membership behind `alpha`, then behind `recon`.
    pub gates: Vec<bool>,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    map: &Arc<WindowMap>,
    ids: &ParamIds,
    frames: &[&Frame],
    background: &Frame,
    guidance: Option<&Guidance>,
) -> Result<ForwardNodes> {
    let config = map.config;
    if background.height() != config.frame_height || background.width() != config.frame_width {
        return Err(MocError::Dimension("background does not match model frame size".into()));
    }
    let encoder = encode_on_tape(tape, &config, ids, frames, background)?;
    let d = tape.matmul(encoder.enc, ids[4])?;
    let d = tape.add_bias(d, ids[5])?;
    let decoded = tape.sigmoid(d);

    let loc_val = tape.value(encoder.loc).data.clone();
    let alpha_op = AlphaOp {
        map: map.clone(),
        frames: frames.len(),
        gates: map.box_gates(&loc_val, frames.len()),
    };
    let mut gates = alpha_op.gates.clone();
    let alpha_val = alpha_op.forward(tape.value(encoder.pres), tape.value(decoded));
    let alpha = tape.custom(vec![encoder.pres, decoded], alpha_val, Box::new(alpha_op));

    let (alpha_mix, pres_mix, loc_mix) = match guidance {
        Some(g) if g.lambda != 0.0 => {
            let lam = g.lambda;
            if g.loc_hat.len() * 4 != loc_val.len() {
                return Err(MocError::Dimension(format!(
                    "{} location targets for {} cells",
                    g.loc_hat.len(),
                    loc_val.len() / 4
                )));
            }
            let mut loc_mix = loc_val.clone();
            for (row, t) in g.loc_hat.iter().enumerate() {
                if let Some(t) = t {
                    let mixed = guidance_mix(&loc_val[row * 4..row * 4 + 4], &t.as_array(), lam)?;
                    loc_mix[row * 4..row * 4 + 4].copy_from_slice(&mixed);
                }
            }
            let sa: Vec<f64> = g.alpha_hat.iter().map(|v| lam * v).collect();
            let sp: Vec<f64> = g.pres_hat.iter().map(|v| lam * v).collect();
            (
                tape.scale_shift(alpha, 1.0 - lam, &sa)?,
                tape.scale_shift(encoder.pres, 1.0 - lam, &sp)?,
                loc_mix,
            )
        }
        _ => (alpha, encoder.pres, loc_val),
    };

    let recon_op = ReconOp {
        map: map.clone(),
        frames: frames.len(),
        background: background.data().iter().map(|&v| v as f64).collect(),
        gates: map.box_gates(&loc_mix, frames.len()),
    };
    gates.extend_from_slice(&recon_op.gates);
    let recon_val = recon_op.forward(tape.value(alpha_mix), tape.value(pres_mix), tape.value(decoded));
    let recon = tape.custom(vec![alpha_mix, pres_mix, decoded], recon_val, Box::new(recon_op));
    Ok(ForwardNodes {
        encoder,
        decoded,
        alpha,
        recon,
        gates,
    })
}

/// Mean squared reconstruction error as a tape node.
pub fn base_loss_on_tape(tape: &mut Tape, recon: NodeId, frames: &[&Frame]) -> Result<NodeId> {
    let target: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().map(|&v| -(v as f64))).collect();
    let n = target.len().max(1) as f64;
    let diff = tape.scale_shift(recon, 1.0, &target)?;
    let ss = tape.sum_squares(diff);
    tape.lin_comb(&[(ss, 1.0 / n)])
}

/// Mean squared error over pixels and channels.
pub fn base_loss(recon: &Frame, frame: &Frame) -> Result<f64> {
    if !recon.same_dims(frame) {
        return Err(MocError::Dimension("reconstruction and frame differ in size".into()));
    }
    let n = frame.data().len().max(1) as f64;
    Ok(recon
        .data()
        .iter()
        .zip(frame.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Splits row-stacked encoder outputs into one grid per frame.
pub fn grid_states(tape: &Tape, config: &ModelConfig, nodes: &EncoderNodes, frames: usize) -> Result<Vec<GridState>> {
    let cells = config.cells();
    let (pres, loc, enc) = (tape.value(nodes.pres), tape.value(nodes.loc), tape.value(nodes.enc));
    let d = config.enc_dim;
    (0..frames)
        .map(|f| {
            let rows = f * cells..(f + 1) * cells;
            GridState::new(
                config.grid_h,
                config.grid_w,
                d,
                pres.data[rows.clone()].to_vec(),
                rows.clone()
                    .map(|r| ZWhere::from_array([loc.data[r * 4], loc.data[r * 4 + 1], loc.data[r * 4 + 2], loc.data[r * 4 + 3]]))
                    .collect(),
                enc.data[rows.start * d..rows.end * d].to_vec(),
            )
        })
        .collect()
}

/// Full forward pass on one frame without recording.
pub fn forward(params: &DetectorParams, frame: &Frame, background: &Frame) -> Result<(GridState, Vec<f64>, Frame)> {
    let map = WindowMap::new(params.config)?;
    let mut tape = Tape::inference();
    let ids = add_params(&mut tape, params);
    let nodes = forward_on_tape(&mut tape, &map, &ids, &[frame], background, None)?;
    let grid = grid_states(&tape, &params.config, &nodes.encoder, 1)?.remove(0);
    let alpha = tape.value(nodes.alpha).data.clone();
    let recon = tape.value(nodes.recon).data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let recon = Frame::new(frame.height(), frame.width(), recon)?;
    Ok((grid, alpha, recon))
}

/// Encoder-only pass over a stack of frames.
pub fn encode_frames(params: &DetectorParams, frames: &[&Frame], background: &Frame) -> Result<Vec<GridState>> {
    let mut tape = Tape::inference();
    let ids = add_params(&mut tape, params);
    let nodes = encode_on_tape(&mut tape, &params.config, &ids, frames, background)?;
    grid_states(&tape, &params.config, &nodes, frames.len())
}

/// Cells with `pres > 0.5`, boxes decoded from their latents.
pub fn detect(params: &DetectorParams, frame: &Frame, background: &Frame) -> Result<Vec<DetectedObject>> {
    Ok(encode_frames(params, &[frame], background)?.remove(0).detections())
}
