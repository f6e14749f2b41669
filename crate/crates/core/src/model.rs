//! One-layer bidirectional LSTM with a linear softmax head, trained one
//! sequence at a time with elementwise clipping and RMSProp.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::DatasetRecord;
use crate::error::{Error, Result};
use crate::lattice::{self, GammaTarget, Ordering, Path, PosteriorGrid, SimilarityTrack, SparseAnnotations};
use crate::similarity::{self, SimilarityMode, TrackParams};
use crate::synth::{sample_anchors, AnchorLevel};
use crate::tensor::{argmax, axpy, dot, Matrix};

const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `4H x (d + H)`, gate blocks in order input, forget, cell, output.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LstmWeights {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights {
            weight: Matrix::zeros(4 * hidden, input + hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub actions: usize,
    pub forward: LstmWeights,
    pub backward: LstmWeights,
    /// `A x 2H` over the concatenated `[forward; backward]` hidden state.
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = [
    "forward.weight",
    "forward.bias",
    "backward.weight",
    "backward.bias",
    "output.weight",
    "output.bias",
];

impl ModelParams {
    pub fn zeros(input_dim: usize, hidden: usize, actions: usize) -> Self {
        ModelParams {
            input_dim,
            hidden,
            actions,
            forward: LstmWeights::zeros(input_dim, hidden),
            backward: LstmWeights::zeros(input_dim, hidden),
            out_weight: Matrix::zeros(actions, 2 * hidden),
            out_bias: vec![0.0; actions],
        }
    }

    /// Uniform weights in `[-0.08, 0.08]`, forget-gate bias 1.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, actions: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden, actions);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-INIT_RANGE..INIT_RANGE);
            }
        }
        for dir in [&mut p.forward, &mut p.backward] {
            dir.bias.iter_mut().for_each(|b| *b = 0.0);
            dir.bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        }
        p.out_bias.iter_mut().for_each(|b| *b = 0.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden, self.actions)
    }

    pub fn tensor_dims(&self) -> [Vec<usize>; 6] {
        let (d, h, a) = (self.input_dim, self.hidden, self.actions);
        [
            vec![4 * h, d + h],
            vec![4 * h],
            vec![4 * h, d + h],
            vec![4 * h],
            vec![a, 2 * h],
            vec![a],
        ]
    }

    /// Flat views in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.forward.weight.as_slice(),
            &self.forward.bias,
            self.backward.weight.as_slice(),
            &self.backward.bias,
            self.out_weight.as_slice(),
            &self.out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.forward.weight.as_mut_slice(),
            &mut self.forward.bias,
            self.backward.weight.as_mut_slice(),
            &mut self.backward.bias,
            self.out_weight.as_mut_slice(),
            &mut self.out_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one direction, stored in processing order.
#[derive(Debug, Clone)]
struct DirectionCache {
    /// `[x_t; h_{t-1}]` per step.
    inputs: Vec<f64>,
    /// Activated gates `i, f, g, o` per step.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hidden: Vec<f64>,
}

fn run_direction(w: &LstmWeights, x: &Matrix, reverse: bool, hidden: usize) -> DirectionCache {
    let frames = x.rows();
    let d = x.cols();
    let width = d + hidden;
    let mut cache = DirectionCache {
        inputs: vec![0.0; frames * width],
        gates: vec![0.0; frames * 4 * hidden],
        cells: vec![0.0; frames * hidden],
        tanh_cells: vec![0.0; frames * hidden],
        hidden: vec![0.0; frames * hidden],
    };
    let mut pre = vec![0.0; 4 * hidden];
    for step in 0..frames {
        let frame = if reverse { frames - 1 - step } else { step };
        {
            let u = &mut cache.inputs[step * width..(step + 1) * width];
            u[..d].copy_from_slice(x.row(frame));
            if step > 0 {
                u[d..].copy_from_slice(&cache.hidden[(step - 1) * hidden..step * hidden]);
            }
        }
        let u = &cache.inputs[step * width..(step + 1) * width];
        for (r, p) in pre.iter_mut().enumerate() {
            *p = dot(w.weight.row(r), u) + w.bias[r];
        }
        let gates = &mut cache.gates[step * 4 * hidden..(step + 1) * 4 * hidden];
        for j in 0..hidden {
            gates[j] = sigmoid(pre[j]);
            gates[hidden + j] = sigmoid(pre[hidden + j]);
            gates[2 * hidden + j] = pre[2 * hidden + j].tanh();
            gates[3 * hidden + j] = sigmoid(pre[3 * hidden + j]);
        }
        for j in 0..hidden {
            let c_prev = if step > 0 { cache.cells[(step - 1) * hidden + j] } else { 0.0 };
            let c = gates[hidden + j] * c_prev + gates[j] * gates[2 * hidden + j];
            let tc = c.tanh();
            cache.cells[step * hidden + j] = c;
            cache.tanh_cells[step * hidden + j] = tc;
            cache.hidden[step * hidden + j] = gates[3 * hidden + j] * tc;
        }
    }
    cache
}

/// Everything `net_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    frames: usize,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

impl ForwardCache {
    /// Concatenated hidden state for frame `t`.
    fn concat_hidden(&self, t: usize, hidden: usize, out: &mut [f64]) {
        out[..hidden].copy_from_slice(&self.fwd.hidden[t * hidden..(t + 1) * hidden]);
        let step = self.frames - 1 - t;
        out[hidden..].copy_from_slice(&self.bwd.hidden[step * hidden..(step + 1) * hidden]);
    }
}

pub struct NetOutput {
    pub logits: Matrix,
    pub z: PosteriorGrid,
    pub cache: ForwardCache,
}

pub fn net_forward(params: &ModelParams, features: &Matrix) -> Result<NetOutput> {
    if features.cols() != params.input_dim {
        return Err(Error::Shape(format!(
            "features have {} dims, model expects {}",
            features.cols(),
            params.input_dim
        )));
    }
    if features.rows() == 0 {
        return Err(Error::Shape("empty feature sequence".into()));
    }
    let h = params.hidden;
    let frames = features.rows();
    let cache = ForwardCache {
        frames,
        fwd: run_direction(&params.forward, features, false, h),
        bwd: run_direction(&params.backward, features, true, h),
    };
    let mut logits = Matrix::zeros(frames, params.actions);
    let mut hcat = vec![0.0; 2 * h];
    for t in 0..frames {
        cache.concat_hidden(t, h, &mut hcat);
        let row = logits.row_mut(t);
        for (k, y) in row.iter_mut().enumerate() {
            *y = dot(params.out_weight.row(k), &hcat) + params.out_bias[k];
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: t,
                what: "network logits".into(),
            });
        }
    }
    let z = PosteriorGrid::from_logits(&logits);
    Ok(NetOutput { logits, z, cache })
}

fn backprop_direction(
    w: &LstmWeights,
    cache: &DirectionCache,
    upstream: &[f64],
    input_dim: usize,
    hidden: usize,
    grad: &mut LstmWeights,
) {
    let width = input_dim + hidden;
    let steps = cache.hidden.len() / hidden;
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut da = vec![0.0; 4 * hidden];
    let mut du = vec![0.0; width];
    for step in (0..steps).rev() {
        let gates = &cache.gates[step * 4 * hidden..(step + 1) * 4 * hidden];
        for j in 0..hidden {
            let (i, f, g, o) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
            let tc = cache.tanh_cells[step * hidden + j];
            let c_prev = if step > 0 { cache.cells[(step - 1) * hidden + j] } else { 0.0 };
            let dh = upstream[step * hidden + j] + dh_next[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * g * i * (1.0 - i);
            da[hidden + j] = dc * c_prev * f * (1.0 - f);
            da[2 * hidden + j] = dc * i * (1.0 - g * g);
            da[3 * hidden + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        let u = &cache.inputs[step * width..(step + 1) * width];
        du.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dar) in da.iter().enumerate() {
            if dar == 0.0 {
                continue;
            }
            axpy(dar, u, grad.weight.row_mut(r));
            axpy(dar, w.weight.row(r), &mut du);
            grad.bias[r] += dar;
        }
        dh_next.copy_from_slice(&du[input_dim..]);
    }
}

/// Full backpropagation through time for `dloss/dlogits`.
pub fn net_backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix) -> Result<ModelParams> {
    if dlogits.rows() != cache.frames || dlogits.cols() != params.actions {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            cache.frames,
            params.actions
        )));
    }
    let h = params.hidden;
    let frames = cache.frames;
    let mut grad = params.zeros_like();
    let mut up_fwd = vec![0.0; frames * h];
    let mut up_bwd = vec![0.0; frames * h];
    let mut hcat = vec![0.0; 2 * h];
    let mut dh = vec![0.0; 2 * h];
    for t in 0..frames {
        cache.concat_hidden(t, h, &mut hcat);
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (k, &dy) in dlogits.row(t).iter().enumerate() {
            if dy == 0.0 {
                continue;
            }
            grad.out_bias[k] += dy;
            axpy(dy, &hcat, grad.out_weight.row_mut(k));
            axpy(dy, params.out_weight.row(k), &mut dh);
        }
        up_fwd[t * h..(t + 1) * h].copy_from_slice(&dh[..h]);
        let step = frames - 1 - t;
        up_bwd[step * h..(step + 1) * h].copy_from_slice(&dh[h..]);
    }
    backprop_direction(&params.forward, &cache.fwd, &up_fwd, params.input_dim, h, &mut grad.forward);
    backprop_direction(&params.backward, &cache.bwd, &up_bwd, params.input_dim, h, &mut grad.backward);
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Ordering only.
    Weak,
    /// Ordering plus sparse frame anchors.
    Semi,
    /// Cross-entropy against the evenly split ordering.
    Uniform,
    /// Cross-entropy against ground-truth frame labels.
    Full,
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Supervision::Weak),
            "semi" => Ok(Supervision::Semi),
            "uniform" => Ok(Supervision::Uniform),
            "full" => Ok(Supervision::Full),
            other => Err(Error::InvalidInput(format!("unknown supervision mode `{other}`"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Weak => "weak",
            Supervision::Semi => "semi",
            Supervision::Uniform => "uniform",
            Supervision::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Supervision,
    pub similarity: SimilarityMode,
    pub theta: f64,
    pub cluster_len: usize,
    pub kmeans_iters: usize,
    /// Derive anchors from ground-truth labels instead of using the record's
    /// stored annotations (semi mode only).
    pub annot: Option<AnchorLevel>,
    pub gamma_target: GammaTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 64,
            lr: 1e-2,
            weight_decay: 1e-5,
            clip: 5.0,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            epochs: 30,
            seed: 0,
            mode: Supervision::Weak,
            similarity: SimilarityMode::Both,
            theta: lattice::DEFAULT_THETA,
            cluster_len: similarity::DEFAULT_CLUSTER_LEN,
            kmeans_iters: similarity::DEFAULT_KMEANS_ITERS,
            annot: None,
            gamma_target: GammaTarget::Normalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return Err(Error::InvalidInput(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return Err(Error::InvalidInput("rmsprop decay must lie in [0, 1) and epsilon be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidInput("hidden size must be positive".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidInput(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if self.annot.is_some() && self.mode != Supervision::Semi {
            return Err(Error::InvalidInput("annotation level only applies to semi mode".into()));
        }
        Ok(())
    }

    pub fn track_params(&self) -> TrackParams {
        TrackParams {
            mode: self.similarity,
            theta: self.theta,
            cluster_len: self.cluster_len,
            iters: self.kmeans_iters,
        }
    }
}

/// Frame target that spreads the ordering evenly over the frames; with
/// anchors, the spread happens independently between consecutive anchors.
pub fn uniform_target(ell: &Ordering, frames: usize, ann: Option<&SparseAnnotations>) -> Result<Path> {
    let states = ell.len();
    if states > frames {
        return Err(Error::Infeasible(format!(
            "ordering of length {states} cannot fit in {frames} frames"
        )));
    }
    let anchors = ann.map_or(&[][..], SparseAnnotations::anchors);
    let placed = place_anchors(ell, frames, anchors)?;

    // knots: (frame, ordering position), pinned at both ends
    let mut knots: Vec<(usize, usize)> = Vec::with_capacity(placed.len() + 2);
    knots.push((0, 0));
    for (&(t, _), &s) in anchors.iter().zip(&placed) {
        knots.push((t, s));
    }
    knots.push((frames - 1, states - 1));

    let mut labels = vec![0usize; frames];
    for pair in knots.windows(2) {
        let ((t0, s0), (t1, s1)) = (pair[0], pair[1]);
        let len = t1 - t0 + 1;
        let count = s1 - s0 + 1;
        for j in 0..count {
            let lo = t0 + j * len / count;
            let hi = t0 + (j + 1) * len / count;
            for label in &mut labels[lo..hi] {
                *label = ell.labels()[s0 + j];
            }
        }
    }
    Ok(Path(labels))
}

/// Ordering position for each anchor: non-decreasing, never advancing faster
/// than one position per frame, and leaving room to finish the ordering.
fn place_anchors(ell: &Ordering, frames: usize, anchors: &[(usize, usize)]) -> Result<Vec<usize>> {
    let states = ell.len();
    let labels = ell.labels();
    let mut feasible: Vec<Vec<bool>> = Vec::with_capacity(anchors.len());
    for (m, &(t, a)) in anchors.iter().enumerate() {
        if t >= frames {
            return Err(Error::InvalidInput(format!("anchor frame {t} outside {frames} frames")));
        }
        let row: Vec<bool> = (0..states)
            .map(|s| {
                labels[s] == a
                    && if m == 0 {
                        s <= t
                    } else {
                        let (pt, _) = anchors[m - 1];
                        (0..=s).any(|ps| feasible[m - 1][ps] && s - ps <= t - pt)
                    }
            })
            .collect();
        feasible.push(row);
    }
    let mut placed = vec![0usize; anchors.len()];
    for m in (0..anchors.len()).rev() {
        let t = anchors[m].0;
        let pick = (0..states).find(|&s| {
            feasible[m][s]
                && if m + 1 == anchors.len() {
                    states - 1 - s <= frames - 1 - t
                } else {
                    let (nt, _) = anchors[m + 1];
                    s <= placed[m + 1] && placed[m + 1] - s <= nt - t
                }
        });
        placed[m] = pick.ok_or_else(|| {
            Error::InfeasibleSupervision("anchors are inconsistent with the ordering".into())
        })?;
    }
    Ok(placed)
}

/// Per-frame argmax of the softmax output, ties to the lowest action.
pub fn predict_frames(params: &ModelParams, features: &Matrix) -> Result<Path> {
    let out = net_forward(params, features)?;
    Ok(argmax_path(&out.z))
}

pub fn argmax_path(z: &PosteriorGrid) -> Path {
    Path((0..z.frames()).map(|t| argmax(z.row(t))).collect())
}

/// What one record is trained against.
#[derive(Debug, Clone)]
pub enum Target {
    Lattice {
        ordering: Ordering,
        track: SimilarityTrack,
        anchors: Option<SparseAnnotations>,
    },
    Frames(Path),
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub features: Matrix,
    pub target: Target,
    pub labels: Option<Path>,
    /// Hard links were dropped because they made the supervision unreachable.
    pub relaxed: bool,
}

/// Hard links may not join two frames anchored to different actions: the
/// last link before the second anchor is reset to a finite similarity.
pub fn reconcile_track(track: SimilarityTrack, ann: &SparseAnnotations, features: &Matrix) -> Result<SimilarityTrack> {
    let mut sims = track.sims().to_vec();
    let cos = similarity::cosine_track(features);
    for pair in ann.anchors().windows(2) {
        let ((t0, a0), (t1, a1)) = (pair[0], pair[1]);
        if a0 != a1 && sims[t0..t1].iter().all(|s| s.is_infinite()) {
            sims[t1 - 1] = lattice::Similarity::Finite(cos[t1 - 1]);
        }
    }
    SimilarityTrack::new(sims, track.theta())
}

/// Replaces every hard link with the finite boundary value of `mode`.
pub fn relax_hard_links(track: &SimilarityTrack, mode: SimilarityMode, features: &Matrix) -> Result<SimilarityTrack> {
    let boundary = match mode {
        SimilarityMode::Both => similarity::cosine_track(features),
        _ => vec![0.0; track.len()],
    };
    let sims = track
        .sims()
        .iter()
        .zip(boundary)
        .map(|(&s, b)| if s.is_infinite() { lattice::Similarity::Finite(b) } else { s })
        .collect();
    SimilarityTrack::new(sims, track.theta())
}

pub fn prepare_item(record: &DatasetRecord, config: &TrainConfig, index: usize) -> Result<TrainItem> {
    let missing = |what: &str| {
        Error::InfeasibleSupervision(format!(
            "record {}: {} mode needs {what}",
            record.id, config.mode
        ))
    };
    let frames = record.features.rows();
    let mut relaxed = false;
    let target = match config.mode {
        Supervision::Full => Target::Frames(record.frame_labels.clone().ok_or_else(|| missing("frame labels"))?),
        Supervision::Uniform => {
            let ordering = record.ordering.as_ref().ok_or_else(|| missing("an ordering"))?;
            Target::Frames(uniform_target(ordering, frames, None).map_err(|e| e.in_record(&record.id))?)
        }
        Supervision::Weak | Supervision::Semi => {
            let ordering = record.ordering.clone().ok_or_else(|| missing("an ordering"))?;
            let mut track = similarity::build_track(&record.features, &config.track_params())
                .map_err(|e| e.in_record(&record.id))?;
            let anchors = if config.mode == Supervision::Semi {
                let ann = match config.annot {
                    Some(level) => {
                        let labels = record.frame_labels.as_ref().ok_or_else(|| missing("frame labels"))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        sample_anchors(labels, level, &mut rng)
                    }
                    None => record.annotations.clone().ok_or_else(|| missing("annotations"))?,
                };
                track = reconcile_track(track, &ann, &record.features)?;
                Some(ann)
            } else {
                None
            };
            if !lattice::feasible(&ordering, &track, anchors.as_ref()) {
                track = relax_hard_links(&track, config.similarity, &record.features)?;
                relaxed = true;
            }
            Target::Lattice {
                ordering,
                track,
                anchors,
            }
        }
    };
    Ok(TrainItem {
        id: record.id.clone(),
        features: record.features.clone(),
        target,
        labels: record.frame_labels.clone(),
        relaxed,
    })
}

/// Loss and `dloss/dlogits` for one record's network output.
pub fn loss_and_grad(z: &PosteriorGrid, target: &Target, gamma: GammaTarget) -> Result<(f64, Matrix)> {
    match target {
        Target::Lattice {
            ordering,
            track,
            anchors,
        } => lattice::ectc_loss_grad_with(z, ordering, track, anchors.as_ref(), gamma),
        Target::Frames(path) => cross_entropy(z, path),
    }
}

pub fn cross_entropy(z: &PosteriorGrid, path: &Path) -> Result<(f64, Matrix)> {
    if path.len() != z.frames() {
        return Err(Error::Shape(format!(
            "target has {} frames, output {}",
            path.len(),
            z.frames()
        )));
    }
    let mut grad = z.matrix().clone();
    let mut loss = 0.0;
    for (t, &k) in path.labels().iter().enumerate() {
        loss -= z.row(t)[k].ln();
        let v = grad.get(t, k) - 1.0;
        grad.set(t, k, v);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    decay: f64,
    eps: f64,
    mean_sq: ModelParams,
}

impl RmsProp {
    pub fn new(params: &ModelParams, decay: f64, eps: f64) -> Self {
        RmsProp {
            decay,
            eps,
            mean_sq: params.zeros_like(),
        }
    }

    /// Clips each raw coordinate to `[-clip, clip]`, adds weight decay and
    /// takes one RMSProp step.
    pub fn apply(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, weight_decay: f64, clip: f64) {
        let (decay, eps) = (self.decay, self.eps);
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.mean_sq.tensors_mut())
        {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let step = gi.clamp(-clip, clip) + weight_decay * *pi;
                *vi = decay * *vi + (1.0 - decay) * step * step;
                *pi -= lr * step / (vi.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Frames the pre-update network labelled correctly, when labels exist.
    pub correct: Option<usize>,
}

pub fn train_step(params: &mut ModelParams, opt: &mut RmsProp, item: &TrainItem, config: &TrainConfig) -> Result<StepOutcome> {
    let out = net_forward(params, &item.features).map_err(|e| e.in_record(&item.id))?;
    let (loss, dlogits) = loss_and_grad(&out.z, &item.target, config.gamma_target).map_err(|e| e.in_record(&item.id))?;
    if !loss.is_finite() {
        return Err(Error::Underflow(format!("record {}: loss is {loss}", item.id)));
    }
    let grad = net_backward(params, &out.cache, &dlogits)?;
    opt.apply(params, &grad, config.lr, config.weight_decay, config.clip);
    if !params.all_finite() {
        return Err(Error::NonFinite {
            frame: 0,
            what: format!("record {}: parameters after update", item.id),
        });
    }
    let correct = item.labels.as_ref().map(|labels| {
        argmax_path(&out.z)
            .labels()
            .iter()
            .zip(labels.labels())
            .filter(|(a, b)| a == b)
            .count()
    });
    Ok(StepOutcome { loss, correct })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_frame_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub fn prepare_corpus(records: &[DatasetRecord], config: &TrainConfig) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| prepare_item(r, config, i))
        .collect()
}

/// Epochs of `train_step` over a seeded shuffle. `on_epoch` sees each log
/// line as it is produced.
pub fn train<F: FnMut(&EpochLog)>(
    items: &[TrainItem],
    input_dim: usize,
    actions: usize,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(input_dim, config.hidden, actions, &mut rng);
    let mut opt = RmsProp::new(&params, config.rms_decay, config.rms_eps);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut labelled = 0usize;
        for &i in &order {
            let step = train_step(&mut params, &mut opt, &items[i], config)?;
            total_loss += step.loss;
            if let Some(c) = step.correct {
                correct += c;
                labelled += items[i].features.rows();
            }
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total_loss / items.len() as f64,
            train_frame_acc: (labelled > 0).then(|| correct as f64 / labelled as f64),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ord(v: &[usize]) -> Ordering {
        Ordering::new(v.to_vec()).unwrap()
    }

    fn tiny(d: usize, h: usize, a: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(d, h, a, &mut rng);
        // larger weights so every gate is exercised away from zero
        p.scale(6.0);
        p
    }

    fn features(frames: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(frames, d, data).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let p = ModelParams::zeros(3, 4, 5);
        let out = net_forward(&p, &features(6, 3, 1)).unwrap();
        for t in 0..6 {
            for &v in out.z.row(t) {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = ModelParams::zeros(3, 4, 5);
        assert!(matches!(net_forward(&p, &features(6, 2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_direction_mirrors_forward_on_reversed_input() {
        let mut p = tiny(2, 3, 2, 7);
        p.backward = p.forward.clone();
        let x = features(5, 2, 3);
        let a = net_forward(&p, &x).unwrap();
        let b = net_forward(&p, &x.reversed_rows()).unwrap();
        let h = p.hidden;
        let (mut ha, mut hb) = (vec![0.0; 2 * h], vec![0.0; 2 * h]);
        for t in 0..5 {
            a.cache.concat_hidden(t, h, &mut ha);
            b.cache.concat_hidden(4 - t, h, &mut hb);
            for j in 0..h {
                assert!((ha[h + j] - hb[j]).abs() < 1e-14);
                assert!((ha[j] - hb[h + j]).abs() < 1e-14);
            }
        }
    }

    /// Straight-line LSTM recurrence written out per gate, independent of the
    /// fused implementation.
    fn reference_logits(p: &ModelParams, x: &Matrix) -> Matrix {
        let (d, h) = (p.input_dim, p.hidden);
        let run = |w: &LstmWeights, order: Vec<usize>| -> Vec<Vec<f64>> {
            let mut hs = vec![vec![0.0; h]; x.rows()];
            let mut hp = vec![0.0; h];
            let mut cp = vec![0.0; h];
            for t in order {
                let mut hn = vec![0.0; h];
                let mut cn = vec![0.0; h];
                for j in 0..h {
                    let gate = |block: usize| {
                        let r = block * h + j;
                        let mut s = w.bias[r];
                        for i in 0..d {
                            s += w.weight.get(r, i) * x.get(t, i);
                        }
                        for i in 0..h {
                            s += w.weight.get(r, d + i) * hp[i];
                        }
                        s
                    };
                    let ig = sigmoid(gate(0));
                    let fg = sigmoid(gate(1));
                    let gg = gate(2).tanh();
                    let og = sigmoid(gate(3));
                    cn[j] = fg * cp[j] + ig * gg;
                    hn[j] = og * cn[j].tanh();
                }
                hs[t] = hn.clone();
                hp = hn;
                cp = cn;
            }
            hs
        };
        let hf = run(&p.forward, (0..x.rows()).collect());
        let hb = run(&p.backward, (0..x.rows()).rev().collect());
        let mut y = Matrix::zeros(x.rows(), p.actions);
        for t in 0..x.rows() {
            for k in 0..p.actions {
                let mut s = p.out_bias[k];
                for j in 0..h {
                    s += p.out_weight.get(k, j) * hf[t][j] + p.out_weight.get(k, h + j) * hb[t][j];
                }
                y.set(t, k, s);
            }
        }
        y
    }

    #[test]
    fn logits_match_reference_recurrence() {
        let p = tiny(2, 3, 3, 11);
        let x = features(4, 2, 5);
        let out = net_forward(&p, &x).unwrap();
        let reference = reference_logits(&p, &x);
        for (a, b) in out.logits.as_slice().iter().zip(reference.as_slice()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn fd_check(target: &Target, seed: u64) {
        let p = tiny(2, 3, 2, seed);
        let x = features(5, 2, seed + 1);
        let out = net_forward(&p, &x).unwrap();
        let (_, dy) = loss_and_grad(&out.z, target, GammaTarget::Raw).unwrap();
        let grad = net_backward(&p, &out.cache, &dy).unwrap();
        let loss_at = |q: &ModelParams| {
            let o = net_forward(q, &x).unwrap();
            loss_and_grad(&o.z, target, GammaTarget::Raw).unwrap().0
        };
        let h = 1e-5;
        let mut probe = p.clone();
        for ti in 0..6 {
            for i in 0..p.tensors()[ti].len() {
                let orig = p.tensors()[ti][i];
                probe.tensors_mut()[ti][i] = orig + h;
                let up = loss_at(&probe);
                probe.tensors_mut()[ti][i] = orig - h;
                let down = loss_at(&probe);
                probe.tensors_mut()[ti][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.tensors()[ti][i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{i}]: analytic {analytic} numeric {numeric}", TENSOR_NAMES[ti]);
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences_cross_entropy() {
        fd_check(&Target::Frames(Path(vec![0, 0, 1, 1, 0])), 21);
    }

    #[test]
    fn bptt_matches_finite_differences_ctc_limit() {
        fd_check(
            &Target::Lattice {
                ordering: ord(&[1, 0]),
                track: SimilarityTrack::flat(5, 0.5).unwrap(),
                anchors: None,
            },
            33,
        );
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = tiny(2, 3, 2, 4);
        let x = features(5, 2, 9);
        let out = net_forward(&p, &x).unwrap();
        let zero = net_backward(&p, &out.cache, &Matrix::zeros(5, 2)).unwrap();
        assert!(zero.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));

        let dy = features(5, 2, 10);
        let once = net_backward(&p, &out.cache, &dy).unwrap();
        let mut dy2 = dy.clone();
        dy2.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        let twice = net_backward(&p, &out.cache, &dy2).unwrap();
        for (a, b) in once.tensors().iter().zip(twice.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clip_bounds_the_applied_coordinate() {
        let mut params = ModelParams::zeros(1, 1, 1);
        let mut grad = params.zeros_like();
        grad.out_bias[0] = 12.0;
        // with decay 0 the running mean is the square of the clipped step
        let mut opt = RmsProp::new(&params, 0.0, 1e-8);
        opt.apply(&mut params, &grad, 0.1, 0.0, 5.0);
        assert_eq!(opt.mean_sq.out_bias[0], 25.0);
        assert!((params.out_bias[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn uniform_target_examples() {
        assert_eq!(uniform_target(&ord(&[0, 1]), 4, None).unwrap(), Path(vec![0, 0, 1, 1]));
        assert_eq!(uniform_target(&ord(&[0, 1, 2]), 5, None).unwrap(), Path(vec![0, 1, 1, 2, 2]));
        assert_eq!(uniform_target(&ord(&[0]), 3, None).unwrap(), Path(vec![0, 0, 0]));
        assert!(uniform_target(&ord(&[0, 1, 2]), 2, None).is_err());
    }

    #[test]
    fn uniform_target_between_anchors() {
        let ell = ord(&[0, 1, 2]);
        let ann = SparseAnnotations::new(vec![(1, 0), (8, 2)]).unwrap();
        let path = uniform_target(&ell, 10, Some(&ann)).unwrap();
        // frames 1..=8 split between a, b, c; anchors kept
        assert_eq!(path.labels()[1], 0);
        assert_eq!(path.labels()[8], 2);
        assert_eq!(lattice::collapse(&path).unwrap(), ell);
        assert_eq!(path, Path(vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2]));
    }

    #[test]
    fn uniform_target_handles_repeated_actions() {
        let ell = ord(&[0, 1, 0]);
        let ann = SparseAnnotations::new(vec![(5, 0)]).unwrap();
        let path = uniform_target(&ell, 6, Some(&ann)).unwrap();
        assert_eq!(lattice::collapse(&path).unwrap(), ell);
        assert_eq!(path.labels()[5], 0);
    }

    #[test]
    fn full_equals_semi_with_every_frame_anchored() {
        let p = tiny(2, 3, 3, 2);
        let x = features(6, 2, 8);
        let gt = Path(vec![2, 2, 0, 0, 0, 1]);
        let z = net_forward(&p, &x).unwrap().z;
        let (ce, ce_grad) = cross_entropy(&z, &gt).unwrap();
        let semi = Target::Lattice {
            ordering: lattice::collapse(&gt).unwrap(),
            track: SimilarityTrack::flat(6, 0.5).unwrap(),
            anchors: Some(SparseAnnotations::dense(&gt)),
        };
        let (ectc, ectc_grad) = loss_and_grad(&z, &semi, GammaTarget::Raw).unwrap();
        assert!((ce - ectc).abs() < 1e-8);
        for (a, b) in ce_grad.as_slice().iter().zip(ectc_grad.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        let p = ModelParams::zeros(2, 2, 3);
        assert_eq!(predict_frames(&p, &features(4, 2, 0)).unwrap(), Path(vec![0; 4]));
    }

    #[test]
    fn reconcile_cuts_links_between_conflicting_anchors() {
        use crate::lattice::Similarity;
        let track = SimilarityTrack::new(vec![Similarity::Infinite; 4], 0.5).unwrap();
        let ann = SparseAnnotations::new(vec![(0, 0), (3, 1)]).unwrap();
        let f = features(5, 2, 1);
        let fixed = reconcile_track(track, &ann, &f).unwrap();
        assert!(!fixed.sims()[2].is_infinite());
        assert!(fixed.sims()[0].is_infinite() && fixed.sims()[3].is_infinite());
    }

    #[test]
    fn relaxing_restores_reachability() {
        use crate::lattice::Similarity;
        let track = SimilarityTrack::new(vec![Similarity::Infinite; 4], 0.5).unwrap();
        let ell = Ordering::new(vec![0, 1, 0]).unwrap();
        let f = features(5, 2, 1);
        assert!(!lattice::feasible(&ell, &track, None));
        let relaxed = relax_hard_links(&track, SimilarityMode::Kmeans, &f).unwrap();
        assert!(relaxed.sims().iter().all(|s| *s == Similarity::Finite(0.0)));
        assert!(lattice::feasible(&ell, &relaxed, None));
        let cos = relax_hard_links(&track, SimilarityMode::Both, &f).unwrap();
        for (s, c) in cos.sims().iter().zip(similarity::cosine_track(&f)) {
            assert_eq!(*s, Similarity::Finite(c));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { clip: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig {
            annot: Some(AnchorLevel::PerSegment),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
