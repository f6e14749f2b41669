//! Similarity-reweighted forward-backward over the ordering lattice.
//!
//! A path assigns one action per frame. Its probability is a Markov product:
//! the first frame emits `z[0][pi_0]` and every later frame `t` draws its label
//! from the renormalized row
//!
//! ```text
//! q_t(k | p) = psi(k, p) z[t][k] / sum_k' psi(k', p) z[t][k']
//! psi(k, p)  = max(theta, s_{t-1,t})  if k == p,  theta otherwise
//! ```
//!
//! so similar neighbouring frames reward staying in the same action. With every
//! similarity at or below `theta` this is plain (blank-free) CTC. Everything
//! below runs in log-space.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    actions: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new<S: Into<String>>(actions: impl IntoIterator<Item = S>) -> Result<Self> {
        let actions: Vec<String> = actions.into_iter().map(Into::into).collect();
        if actions.is_empty() {
            return Err(Error::InvalidInput("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(actions.len());
        for (i, name) in actions.iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "action name `{name}` must be non-empty without whitespace"
                )));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate action `{name}`")));
            }
        }
        Ok(LabelVocab { actions, index })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.actions[idx]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAction(name.to_string()))
    }
}

/// One action index per frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path(pub Vec<usize>);

impl Path {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

/// The weak label: occurring actions in order, no adjacent repeats.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ordering(Vec<usize>);

impl Ordering {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("ordering is empty".into()));
        }
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "ordering repeats action {} on adjacent entries",
                w[0]
            )));
        }
        Ok(Ordering(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn as_path(&self) -> Path {
        Path(self.0.clone())
    }
}

/// Merges consecutive repeats of a path into its ordering.
pub fn collapse(path: &Path) -> Result<Ordering> {
    if path.is_empty() {
        return Err(Error::InvalidInput("cannot collapse an empty path".into()));
    }
    let mut out = path.0.clone();
    out.dedup();
    Ok(Ordering(out))
}

/// Per-frame softmax outputs, `T x A`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    probs: Matrix,
}

impl PosteriorGrid {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::Shape("posterior grid must be non-empty".into()));
        }
        for (t, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::InvalidInput(format!(
                    "frame {t}: probabilities must lie in (0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "frame {t}: row sums to {total}"
                )));
            }
        }
        Ok(PosteriorGrid { probs })
    }

    pub fn from_logits(logits: &Matrix) -> Self {
        PosteriorGrid {
            probs: crate::tensor::softmax_rows(logits),
        }
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn actions(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.probs
    }

    fn log_matrix(&self) -> Matrix {
        let mut out = self.probs.clone();
        for v in out.as_mut_slice() {
            *v = v.ln();
        }
        out
    }
}

/// Similarity between two consecutive frames. `Infinite` forbids a label
/// change between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Finite(f64),
    Infinite,
}

impl Similarity {
    pub fn is_infinite(self) -> bool {
        matches!(self, Similarity::Infinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTrack {
    sims: Vec<Similarity>,
    theta: f64,
}

pub const DEFAULT_THETA: f64 = 0.5;

impl SimilarityTrack {
    pub fn new(sims: Vec<Similarity>, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "theta must lie in (0, 1], got {theta}"
            )));
        }
        for (t, s) in sims.iter().enumerate() {
            if let Similarity::Finite(v) = *s {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "similarity {v} between frames {t} and {} outside [0, 1]",
                        t + 1
                    )));
                }
            }
        }
        Ok(SimilarityTrack { sims, theta })
    }

    /// All similarities at zero: the plain CTC limit.
    pub fn flat(frames: usize, theta: f64) -> Result<Self> {
        Self::new(
            vec![Similarity::Finite(0.0); frames.saturating_sub(1)],
            theta,
        )
    }

    pub fn sims(&self) -> &[Similarity] {
        &self.sims
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.sims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sims.is_empty()
    }

    /// True when no entry exceeds theta, so every reweighting is a no-op.
    pub fn is_flat(&self) -> bool {
        self.sims
            .iter()
            .all(|s| matches!(*s, Similarity::Finite(v) if v <= self.theta))
    }
}

/// Sparse `(frame, action)` anchors, strictly increasing in frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAnnotations {
    anchors: Vec<(usize, usize)>,
}

impl SparseAnnotations {
    pub fn new(anchors: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(w) = anchors.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidInput(format!(
                "anchor frames must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(SparseAnnotations { anchors })
    }

    /// Anchors every frame to the given path.
    pub fn dense(path: &Path) -> Self {
        SparseAnnotations {
            anchors: path.0.iter().copied().enumerate().collect(),
        }
    }

    pub fn anchors(&self) -> &[(usize, usize)] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn action_at(&self, frame: usize) -> Option<usize> {
        self.anchors
            .binary_search_by_key(&frame, |&(t, _)| t)
            .ok()
            .map(|i| self.anchors[i].1)
    }
}

/// Forward and backward grids in log-space, `S x T` row-major.
#[derive(Debug, Clone)]
pub struct Lattice {
    states: usize,
    frames: usize,
    alpha: Vec<f64>,
    beta: Option<Vec<f64>>,
    log_likelihood: f64,
}

impl Lattice {
    pub fn states(&self) -> usize {
        self.states
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn alpha(&self, s: usize, t: usize) -> f64 {
        self.alpha[s * self.frames + t]
    }

    pub fn beta(&self, s: usize, t: usize) -> Option<f64> {
        self.beta.as_ref().map(|b| b[s * self.frames + t])
    }

    pub fn has_beta(&self) -> bool {
        self.beta.is_some()
    }

    /// `log sum_s alpha(s,t) beta(s,t) / z[t][l_s]`. Equals the log-likelihood
    /// for every `t` in the flat-similarity case.
    pub fn log_identity_at(&self, t: usize, z: &PosteriorGrid, ell: &Ordering) -> Result<f64> {
        let beta = self.require_beta()?;
        let mut acc = f64::NEG_INFINITY;
        for (s, &k) in ell.labels().iter().enumerate() {
            let idx = s * self.frames + t;
            acc = log_sum_exp(acc, self.alpha[idx] + beta[idx] - z.row(t)[k].ln());
        }
        Ok(acc)
    }

    fn require_beta(&self) -> Result<&[f64]> {
        self.beta
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("lattice has no backward pass".into()))
    }
}

/// Renormalized probability row for a frame whose predecessor carries `prev`.
pub fn step_weights(z_row: &[f64], prev: usize, sim: Similarity, theta: f64) -> Result<Vec<f64>> {
    if prev >= z_row.len() {
        return Err(Error::InvalidInput(format!(
            "previous action {prev} out of range for {} actions",
            z_row.len()
        )));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidInput(format!("theta must be positive, got {theta}")));
    }
    match sim {
        Similarity::Infinite => {
            let mut q = vec![0.0; z_row.len()];
            q[prev] = 1.0;
            Ok(q)
        }
        Similarity::Finite(s) if s <= theta => Ok(z_row.to_vec()),
        Similarity::Finite(s) => {
            let norm = theta + (s - theta) * z_row[prev];
            Ok(z_row
                .iter()
                .enumerate()
                .map(|(k, &zk)| if k == prev { s * zk / norm } else { theta * zk / norm })
                .collect())
        }
    }
}

/// `log q(k | prev)` for one frame, given its row of `z` and `log z`.
#[inline]
fn log_transition(z_row: &[f64], log_z_row: &[f64], k: usize, prev: usize, sim: Similarity, theta: f64) -> f64 {
    match sim {
        Similarity::Infinite => {
            if k == prev {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        Similarity::Finite(s) if s <= theta => log_z_row[k],
        Similarity::Finite(s) => {
            let log_norm = (theta + (s - theta) * z_row[prev]).ln();
            let log_psi = if k == prev { s.ln() } else { theta.ln() };
            log_psi + log_z_row[k] - log_norm
        }
    }
}

struct Problem<'a> {
    z: &'a PosteriorGrid,
    log_z: Matrix,
    ell: &'a [usize],
    sim: &'a SimilarityTrack,
    anchor_at: Vec<Option<usize>>,
}

impl<'a> Problem<'a> {
    fn new(
        z: &'a PosteriorGrid,
        ell: &'a Ordering,
        sim: &'a SimilarityTrack,
        ann: Option<&SparseAnnotations>,
    ) -> Result<Self> {
        let frames = z.frames();
        let states = ell.len();
        if let Some(&k) = ell.labels().iter().find(|&&k| k >= z.actions()) {
            return Err(Error::InvalidInput(format!(
                "ordering action {k} out of range for {} actions",
                z.actions()
            )));
        }
        if sim.len() + 1 != frames {
            return Err(Error::Shape(format!(
                "similarity track has {} entries for {frames} frames",
                sim.len()
            )));
        }
        if states > frames {
            return Err(Error::Infeasible(format!(
                "ordering of length {states} cannot fit in {frames} frames"
            )));
        }
        let mut anchor_at = vec![None; frames];
        if let Some(ann) = ann {
            for &(t, a) in ann.anchors() {
                if t >= frames {
                    return Err(Error::InvalidInput(format!(
                        "anchor frame {t} outside a {frames}-frame sequence"
                    )));
                }
                if !ell.labels().contains(&a) {
                    return Err(Error::InfeasibleSupervision(format!(
                        "anchor action {a} at frame {t} does not occur in the ordering"
                    )));
                }
                anchor_at[t] = Some(a);
            }
        }
        Ok(Problem {
            z,
            log_z: z.log_matrix(),
            ell: ell.labels(),
            sim,
            anchor_at,
        })
    }

    fn frames(&self) -> usize {
        self.z.frames()
    }

    fn states(&self) -> usize {
        self.ell.len()
    }

    /// Cells that can lie on a complete path: `s` labels emitted by frame `t`
    /// and enough frames left to emit the rest.
    fn band(&self, t: usize) -> (usize, usize) {
        let (states, frames) = (self.states(), self.frames());
        let lo = (states + t).saturating_sub(frames);
        let hi = (states - 1).min(t);
        (lo, hi)
    }

    fn allowed(&self, s: usize, t: usize) -> bool {
        self.anchor_at[t].is_none_or(|a| a == self.ell[s])
    }

    fn forward(&self) -> Vec<f64> {
        let (states, frames) = (self.states(), self.frames());
        let theta = self.sim.theta();
        let mut alpha = vec![f64::NEG_INFINITY; states * frames];
        if self.allowed(0, 0) {
            alpha[0] = self.log_z.get(0, self.ell[0]);
        }
        for t in 1..frames {
            let sim = self.sim.sims()[t - 1];
            let z_row = self.z.row(t);
            let lz_row = self.log_z.row(t);
            let (lo, hi) = self.band(t);
            for s in lo..=hi {
                if !self.allowed(s, t) {
                    continue;
                }
                let k = self.ell[s];
                let stay = alpha[s * frames + t - 1] + log_transition(z_row, lz_row, k, k, sim, theta);
                let advance = if s > 0 {
                    alpha[(s - 1) * frames + t - 1]
                        + log_transition(z_row, lz_row, k, self.ell[s - 1], sim, theta)
                } else {
                    f64::NEG_INFINITY
                };
                alpha[s * frames + t] = log_sum_exp(stay, advance);
            }
        }
        alpha
    }

    /// Mirror recursion: the suffix from frame `t` is built from the suffix at
    /// `t + 1`, with frame `t` renormalized against its successor's label.
    fn backward(&self) -> Vec<f64> {
        let (states, frames) = (self.states(), self.frames());
        let theta = self.sim.theta();
        let mut beta = vec![f64::NEG_INFINITY; states * frames];
        let last = frames - 1;
        if self.allowed(states - 1, last) {
            beta[(states - 1) * frames + last] = self.log_z.get(last, self.ell[states - 1]);
        }
        for t in (0..last).rev() {
            let sim = self.sim.sims()[t];
            let z_row = self.z.row(t);
            let lz_row = self.log_z.row(t);
            let (lo, hi) = self.band(t);
            for s in lo..=hi {
                if !self.allowed(s, t) {
                    continue;
                }
                let k = self.ell[s];
                let stay = beta[s * frames + t + 1] + log_transition(z_row, lz_row, k, k, sim, theta);
                let advance = if s + 1 < states {
                    beta[(s + 1) * frames + t + 1]
                        + log_transition(z_row, lz_row, k, self.ell[s + 1], sim, theta)
                } else {
                    f64::NEG_INFINITY
                };
                beta[s * frames + t] = log_sum_exp(stay, advance);
            }
        }
        beta
    }

    /// Explains a zero likelihood: hard constraints versus anchors versus
    /// plain underflow.
    fn diagnose_zero(&self) -> Error {
        if !self.reachable(false) {
            Error::Infeasible(
                "ordering cannot be emitted under the hard similarity constraints".into(),
            )
        } else if !self.reachable(true) {
            Error::InfeasibleSupervision("anchors are inconsistent with the ordering".into())
        } else {
            Error::Underflow("likelihood underflowed on a feasible lattice".into())
        }
    }

    fn reachable(&self, with_anchors: bool) -> bool {
        let (states, frames) = (self.states(), self.frames());
        let ok = |s: usize, t: usize| !with_anchors || self.allowed(s, t);
        let mut cur = vec![false; states];
        cur[0] = ok(0, 0);
        for t in 1..frames {
            let locked = self.sim.sims()[t - 1].is_infinite();
            let mut next = vec![false; states];
            for s in 0..states {
                let from = cur[s] || (!locked && s > 0 && cur[s - 1]);
                next[s] = from && ok(s, t);
            }
            cur = next;
        }
        cur[states - 1]
    }
}

/// Whether any path emits `ell` under the hard links of `sim` while honouring
/// the anchors. Probabilities play no part.
pub fn feasible(ell: &Ordering, sim: &SimilarityTrack, ann: Option<&SparseAnnotations>) -> bool {
    let frames = sim.len() + 1;
    let labels = ell.labels();
    let states = labels.len();
    if states > frames {
        return false;
    }
    let ok = |s: usize, t: usize| ann.and_then(|a| a.action_at(t)).is_none_or(|k| labels[s] == k);
    let mut cur = vec![false; states];
    cur[0] = ok(0, 0);
    for t in 1..frames {
        let locked = sim.sims()[t - 1].is_infinite();
        let mut next = vec![false; states];
        for s in 0..states {
            next[s] = (cur[s] || (!locked && s > 0 && cur[s - 1])) && ok(s, t);
        }
        cur = next;
    }
    cur[states - 1]
}

/// Forward pass. `log_likelihood` is `alpha(S-1, T-1)`.
pub fn forward(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<Lattice> {
    let problem = Problem::new(z, ell, sim, ann)?;
    let alpha = problem.forward();
    let log_likelihood = alpha[(problem.states() - 1) * problem.frames() + problem.frames() - 1];
    if log_likelihood == f64::NEG_INFINITY {
        return Err(problem.diagnose_zero());
    }
    Ok(Lattice {
        states: problem.states(),
        frames: problem.frames(),
        alpha,
        beta: None,
        log_likelihood,
    })
}

/// Backward grid alone, `S x T` row-major in log-space.
pub fn backward(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<Vec<f64>> {
    let problem = Problem::new(z, ell, sim, ann)?;
    let beta = problem.backward();
    if beta[0] == f64::NEG_INFINITY {
        return Err(problem.diagnose_zero());
    }
    Ok(beta)
}

pub fn forward_backward(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<Lattice> {
    let problem = Problem::new(z, ell, sim, ann)?;
    let alpha = problem.forward();
    let (states, frames) = (problem.states(), problem.frames());
    let log_likelihood = alpha[(states - 1) * frames + frames - 1];
    if log_likelihood == f64::NEG_INFINITY {
        return Err(problem.diagnose_zero());
    }
    let beta = problem.backward();
    Ok(Lattice {
        states,
        frames,
        alpha,
        beta: Some(beta),
        log_likelihood,
    })
}

/// Soft target `gamma[t][k] = sum_{s: l_s = k} alpha beta / z / P`.
pub fn posterior_target(lat: &Lattice, z: &PosteriorGrid, ell: &Ordering) -> Result<Matrix> {
    let beta = lat.require_beta()?;
    if lat.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::Infeasible("no path is consistent with the ordering".into()));
    }
    if lat.states != ell.len() || lat.frames != z.frames() {
        return Err(Error::Shape("lattice does not match the ordering and grid".into()));
    }
    let frames = lat.frames;
    let mut gamma = Matrix::zeros(frames, z.actions());
    for (s, &k) in ell.labels().iter().enumerate() {
        for t in 0..frames {
            let idx = s * frames + t;
            let log_mass = lat.alpha[idx] + beta[idx] - z.row(t)[k].ln() - lat.log_likelihood;
            if log_mass > f64::NEG_INFINITY {
                let v = gamma.get(t, k) + log_mass.exp();
                gamma.set(t, k, v);
            }
        }
    }
    Ok(gamma)
}

pub type GradientGrid = Matrix;

/// How the posterior target enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaTarget {
    /// `z - gamma` as computed.
    Raw,
    /// `z - gamma / sum_k gamma`: rows of gamma can exceed one across hard
    /// links, where the backward pass carries no factor of `z_t`. Identical
    /// to `Raw` when every similarity is at most theta.
    #[default]
    Normalized,
}

impl std::str::FromStr for GammaTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GammaTarget::Raw),
            "normalized" => Ok(GammaTarget::Normalized),
            other => Err(Error::InvalidInput(format!("unknown gamma target '{other}' (raw|normalized)"))),
        }
    }
}

impl std::fmt::Display for GammaTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GammaTarget::Raw => "raw",
            GammaTarget::Normalized => "normalized",
        })
    }
}

/// Negative log-likelihood and its gradient with respect to the pre-softmax
/// scores, `z - gamma`.
pub fn ectc_loss_grad(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<(f64, GradientGrid)> {
    ectc_loss_grad_with(z, ell, sim, ann, GammaTarget::Raw)
}

pub fn ectc_loss_grad_with(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
    target: GammaTarget,
) -> Result<(f64, GradientGrid)> {
    let lat = forward_backward(z, ell, sim, ann)?;
    let mut gamma = posterior_target(&lat, z, ell)?;
    if target == GammaTarget::Normalized {
        for t in 0..gamma.rows() {
            let mass: f64 = gamma.row(t).iter().sum();
            gamma.row_mut(t).iter_mut().for_each(|g| *g /= mass);
        }
    }
    let mut grad = z.matrix().clone();
    for (g, gm) in grad.as_mut_slice().iter_mut().zip(gamma.as_slice()) {
        *g -= gm;
    }
    for t in 0..grad.rows() {
        if grad.row(t).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: t,
                what: "ECTC gradient".into(),
            });
        }
    }
    Ok((-lat.log_likelihood, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> PosteriorGrid {
        PosteriorGrid::new(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap()
    }

    fn repeat_row(row: &[f64], frames: usize) -> PosteriorGrid {
        PosteriorGrid::new(Matrix::from_rows(&vec![row.to_vec(); frames]).unwrap()).unwrap()
    }

    fn ord(v: &[usize]) -> Ordering {
        Ordering::new(v.to_vec()).unwrap()
    }

    #[test]
    fn collapse_examples() {
        // b=1, c=2
        assert_eq!(collapse(&Path(vec![1, 1, 2, 2, 2])).unwrap().labels(), &[1, 2]);
        assert_eq!(collapse(&Path(vec![0])).unwrap().labels(), &[0]);
        assert_eq!(collapse(&Path(vec![0, 1, 1, 0])).unwrap().labels(), &[0, 1, 0]);
        assert!(collapse(&Path(vec![])).is_err());
    }

    #[test]
    fn collapse_is_idempotent() {
        let o = collapse(&Path(vec![2, 2, 0, 1, 1, 1, 0])).unwrap();
        assert_eq!(collapse(&o.as_path()).unwrap(), o);
    }

    #[test]
    fn ordering_rejects_adjacent_repeats() {
        assert!(Ordering::new(vec![0, 0]).is_err());
        assert!(Ordering::new(vec![]).is_err());
    }

    #[test]
    fn step_weights_examples() {
        let q = step_weights(&[0.5, 0.5], 0, Similarity::Finite(0.3), 0.5).unwrap();
        assert_eq!(q, vec![0.5, 0.5]);

        let q = step_weights(&[0.5, 0.5], 0, Similarity::Finite(0.8), 0.5).unwrap();
        assert!((q[0] - 0.4 / 0.65).abs() < 1e-12);
        assert!((q[1] - 0.25 / 0.65).abs() < 1e-12);
        assert!((q[0] - 0.6154).abs() < 1e-4 && (q[1] - 0.3846).abs() < 1e-4);

        let q = step_weights(&[0.3, 0.7], 1, Similarity::Infinite, 0.5).unwrap();
        assert_eq!(q, vec![0.0, 1.0]);

        assert!(step_weights(&[0.3, 0.7], 2, Similarity::Finite(0.1), 0.5).is_err());
    }

    #[test]
    fn similarity_track_validates() {
        assert!(SimilarityTrack::new(vec![Similarity::Finite(1.2)], 0.5).is_err());
        assert!(SimilarityTrack::new(vec![], 0.0).is_err());
        assert!(SimilarityTrack::new(vec![Similarity::Infinite], 1.0).is_ok());
    }

    #[test]
    fn forward_two_frames() {
        let z = grid(&[&[0.6, 0.4], &[0.3, 0.7]]);
        let lat = forward(&z, &ord(&[0, 1]), &SimilarityTrack::flat(2, 0.5).unwrap(), None).unwrap();
        assert!((lat.log_likelihood().exp() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn forward_three_uniform_frames() {
        let z = grid(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let lat = forward(&z, &ord(&[0, 1]), &SimilarityTrack::flat(3, 0.5).unwrap(), None).unwrap();
        assert!((lat.log_likelihood().exp() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn band_cells_are_unreachable() {
        let z = repeat_row(&[0.5, 0.5], 4);
        let lat = forward_backward(&z, &ord(&[0, 1, 0]), &SimilarityTrack::flat(4, 0.5).unwrap(), None).unwrap();
        // s > t
        assert_eq!(lat.alpha(2, 1), f64::NEG_INFINITY);
        // cannot finish: s=0 at t=2 leaves one frame for two labels
        assert_eq!(lat.alpha(0, 2), f64::NEG_INFINITY);
        assert_eq!(lat.beta(2, 0), Some(f64::NEG_INFINITY));
    }

    #[test]
    fn backward_terminal_condition() {
        let z = grid(&[&[0.8, 0.2]]);
        let beta = backward(&z, &ord(&[0]), &SimilarityTrack::flat(1, 0.5).unwrap(), None).unwrap();
        assert!((beta[0] - 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_frame_loss_and_grad() {
        let z = grid(&[&[0.8, 0.2]]);
        let (loss, grad) =
            ectc_loss_grad(&z, &ord(&[0]), &SimilarityTrack::flat(1, 0.5).unwrap(), None).unwrap();
        assert!((loss - 0.2231435513).abs() < 1e-9);
        assert!((grad.get(0, 0) + 0.2).abs() < 1e-12);
        assert!((grad.get(0, 1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn posterior_of_uniform_three_frames() {
        let z = repeat_row(&[0.5, 0.5], 3);
        let ell = ord(&[0, 1]);
        let lat = forward_backward(&z, &ell, &SimilarityTrack::flat(3, 0.5).unwrap(), None).unwrap();
        let g = posterior_target(&lat, &z, &ell).unwrap();
        let expected = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        for t in 0..3 {
            for k in 0..2 {
                assert!((g.get(t, k) - expected[t][k]).abs() < 1e-12, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn posterior_single_frame_is_one_hot() {
        let z = grid(&[&[0.3, 0.3, 0.4]]);
        let ell = ord(&[1]);
        let lat = forward_backward(&z, &ell, &SimilarityTrack::flat(1, 0.5).unwrap(), None).unwrap();
        let g = posterior_target(&lat, &z, &ell).unwrap();
        assert_eq!(g.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn anchored_frames_get_one_hot_targets() {
        let z = repeat_row(&[0.5, 0.5], 6);
        let ell = ord(&[0, 1]);
        // frames 2 and 4 counting from one
        let ann = SparseAnnotations::new(vec![(1, 0), (3, 1)]).unwrap();
        let lat = forward_backward(&z, &ell, &SimilarityTrack::flat(6, 0.5).unwrap(), Some(&ann)).unwrap();
        assert!((lat.log_likelihood().exp() - 2.0 / 64.0).abs() < 1e-15);
        let g = posterior_target(&lat, &z, &ell).unwrap();
        assert!((g.get(1, 0) - 1.0).abs() < 1e-12 && g.get(1, 1) == 0.0);
        assert!((g.get(3, 1) - 1.0).abs() < 1e-12 && g.get(3, 0) == 0.0);
    }

    #[test]
    fn anchor_outside_ordering_is_rejected_eagerly() {
        let z = repeat_row(&[0.3, 0.3, 0.4], 3);
        let ann = SparseAnnotations::new(vec![(1, 2)]).unwrap();
        let err = forward(&z, &ord(&[0, 1]), &SimilarityTrack::flat(3, 0.5).unwrap(), Some(&ann)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSupervision(_)));
    }

    #[test]
    fn contradictory_anchors_are_infeasible_supervision() {
        let z = repeat_row(&[0.5, 0.5], 4);
        // b before a contradicts [a, b]
        let ann = SparseAnnotations::new(vec![(0, 1), (3, 0)]).unwrap();
        let err = forward(&z, &ord(&[0, 1]), &SimilarityTrack::flat(4, 0.5).unwrap(), Some(&ann)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSupervision(_)), "{err:?}");
    }

    #[test]
    fn ordering_longer_than_sequence_is_infeasible() {
        let z = repeat_row(&[0.5, 0.5], 2);
        let err = forward(&z, &ord(&[0, 1, 0]), &SimilarityTrack::flat(2, 0.5).unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn hard_links_forbid_changes() {
        let z = repeat_row(&[0.5, 0.5], 3);
        let sim = SimilarityTrack::new(vec![Similarity::Infinite, Similarity::Infinite], 0.5).unwrap();
        let err = forward(&z, &ord(&[0, 1]), &sim, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));

        // one hard link: only [a, a, b] survives
        let sim = SimilarityTrack::new(vec![Similarity::Infinite, Similarity::Finite(0.0)], 0.5).unwrap();
        let lat = forward(&z, &ord(&[0, 1]), &sim, None).unwrap();
        assert!((lat.log_likelihood().exp() - 0.25).abs() < 1e-15);
        assert_eq!(lat.alpha(1, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn long_sequences_stay_finite() {
        let frames = 1000;
        let mut probs = Matrix::zeros(frames, 3);
        for t in 0..frames {
            probs.row_mut(t).copy_from_slice(&[1e-6, 0.5 - 0.5e-6, 0.5 - 0.5e-6]);
        }
        let z = PosteriorGrid::new(probs).unwrap();
        let ell = ord(&[0, 1, 2, 0, 1]);
        let (loss, grad) = ectc_loss_grad(&z, &ell, &SimilarityTrack::flat(frames, 0.5).unwrap(), None).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(grad.all_finite());
    }

    #[test]
    fn normalized_target_matches_raw_in_ctc_limit_and_sums_to_one_otherwise() {
        let z = grid(&[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3], &[0.3, 0.3, 0.4], &[0.1, 0.2, 0.7]]);
        let ell = ord(&[0, 1, 2]);
        let flat = SimilarityTrack::flat(4, 0.5).unwrap();
        let (l0, g0) = ectc_loss_grad_with(&z, &ell, &flat, None, GammaTarget::Raw).unwrap();
        let (l1, g1) = ectc_loss_grad_with(&z, &ell, &flat, None, GammaTarget::Normalized).unwrap();
        assert_eq!(l0, l1);
        for (a, b) in g0.as_slice().iter().zip(g1.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let hard = SimilarityTrack::new(
            vec![Similarity::Infinite, Similarity::Finite(0.9), Similarity::Finite(0.1)],
            0.5,
        )
        .unwrap();
        let (_, g) = ectc_loss_grad_with(&z, &ell, &hard, None, GammaTarget::Normalized).unwrap();
        for row in g.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn feasibility_follows_hard_links_and_anchors() {
        let ell = ord(&[0, 1]);
        let hard = SimilarityTrack::new(vec![Similarity::Infinite, Similarity::Infinite], 0.5).unwrap();
        assert!(!feasible(&ell, &hard, None));
        let loose = SimilarityTrack::new(vec![Similarity::Infinite, Similarity::Finite(0.9)], 0.5).unwrap();
        assert!(feasible(&ell, &loose, None));
        let ann = SparseAnnotations::new(vec![(1, 1)]).unwrap();
        assert!(!feasible(&ell, &loose, Some(&ann)));
        assert!(!feasible(&ord(&[0, 1, 0]), &SimilarityTrack::flat(2, 0.5).unwrap(), None));
    }
}
