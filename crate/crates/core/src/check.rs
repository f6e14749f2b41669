//! Self-check: the lattice against brute-force enumeration on random small
//! instances.
//!
//! Hard probes gate the result; informational probes measure how far the
//! forward-backward identity and the `z - gamma` gradient drift from the
//! exact quantities once similarities exceed theta.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lattice::{
    ectc_loss_grad, forward, forward_backward, posterior_target, Ordering, Path, PosteriorGrid, Similarity,
    SimilarityTrack, SparseAnnotations,
};
use crate::oracle::{self, enumerate_paths, DEFAULT_PATH_CAP};
use crate::tensor::Matrix;

pub const NORMALIZATION_TOL: f64 = 1e-9;
pub const ORACLE_REL_TOL: f64 = 1e-8;
pub const CTC_LOSS_TOL: f64 = 1e-10;
pub const CTC_GRAD_TOL: f64 = 1e-5;
pub const IDENTITY_REL_TOL: f64 = 1e-8;
pub const PRUNING_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;

/// Largest instance the all-paths normalization probe enumerates.
const NORMALIZATION_MAX: (usize, usize) = (3, 8);
/// Longest sequence the finite-difference probes run on.
const FD_MAX_FRAMES: usize = 8;
const MAX_STATES: usize = 4;
const HARD_LINK_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckSize {
    pub actions: usize,
    pub frames: usize,
}

impl FromStr for CheckSize {
    type Err = Error;

    /// `AxT`, e.g. `3x6`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("size '{s}' is not of the form AxT"));
        let (a, t) = s.split_once('x').ok_or_else(bad)?;
        let actions: usize = a.trim().parse().map_err(|_| bad())?;
        let frames: usize = t.trim().parse().map_err(|_| bad())?;
        if actions == 0 || frames == 0 {
            return Err(bad());
        }
        Ok(CheckSize { actions, frames })
    }
}

impl fmt::Display for CheckSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.actions, self.frames)
    }
}

pub fn default_sizes() -> Vec<CheckSize> {
    [(2, 4), (3, 6), (3, 8), (4, 10)]
        .into_iter()
        .map(|(actions, frames)| CheckSize { actions, frames })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub sizes: Vec<CheckSize>,
    pub trials: usize,
    pub seed: u64,
    /// Test hook: negate the analytic gradient before comparing it.
    pub flip_gradient_sign: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            sizes: default_sizes(),
            trials: 20,
            seed: 0,
            flip_gradient_sign: false,
        }
    }
}

/// A random lattice problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub z: PosteriorGrid,
    pub logits: Matrix,
    pub ell: Ordering,
    pub sim: SimilarityTrack,
    pub anchors: Option<SparseAnnotations>,
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub actions: usize,
    pub frames: usize,
    pub max_states: usize,
    /// Chance that a link is a hard (INFINITE) one.
    pub infinite_rate: f64,
    /// Every similarity at or below theta.
    pub ctc_limit: bool,
    pub with_anchors: bool,
}

/// Logits are standard normal scaled by 2; sims uniform on `[0, 1]`, theta
/// uniform on `[0.2, 0.8]`. Anchors are read off a random consistent path so
/// the ordering stays satisfiable apart from hard links.
pub fn random_instance<R: Rng>(rng: &mut R, shape: InstanceShape) -> Result<Instance> {
    let InstanceShape { actions, frames, .. } = shape;
    if actions == 0 || frames == 0 {
        return Err(Error::InvalidInput("instance needs actions and frames".into()));
    }
    let logits = Matrix::from_vec(
        frames,
        actions,
        (0..frames * actions)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    let z = PosteriorGrid::from_logits(&logits);
    let max_states = if actions == 1 { 1 } else { shape.max_states.min(frames).max(1) };
    let states = rng.random_range(1..=max_states);
    let mut labels = Vec::with_capacity(states);
    for s in 0..states {
        let k = if s == 0 {
            rng.random_range(0..actions)
        } else {
            let k = rng.random_range(0..actions - 1);
            if k >= labels[s - 1] {
                k + 1
            } else {
                k
            }
        };
        labels.push(k);
    }
    let ell = Ordering::new(labels)?;
    let theta = rng.random_range(0.2..0.8);
    let sims = (1..frames)
        .map(|_| {
            if shape.ctc_limit {
                Similarity::Finite(rng.random_range(0.0..=theta))
            } else if rng.random_bool(shape.infinite_rate) {
                Similarity::Infinite
            } else {
                Similarity::Finite(rng.random_range(0.0..=1.0))
            }
        })
        .collect();
    let sim = SimilarityTrack::new(sims, theta)?;
    let anchors = if shape.with_anchors {
        let path = random_consistent_path(rng, &ell, frames);
        let count = rng.random_range(1..=frames.min(2));
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, frames, count).into_vec();
        picked.sort_unstable();
        Some(SparseAnnotations::new(
            picked.into_iter().map(|t| (t, path.labels()[t])).collect(),
        )?)
    } else {
        None
    };
    Ok(Instance {
        z,
        logits,
        ell,
        sim,
        anchors,
    })
}

fn random_consistent_path<R: Rng>(rng: &mut R, ell: &Ordering, frames: usize) -> Path {
    let states = ell.len();
    let mut starts: Vec<usize> = rand::seq::index::sample(rng, frames - 1, states - 1)
        .into_iter()
        .map(|b| b + 1)
        .collect();
    starts.sort_unstable();
    let mut labels = Vec::with_capacity(frames);
    let mut seg = 0;
    for t in 0..frames {
        while seg < starts.len() && starts[seg] == t {
            seg += 1;
        }
        labels.push(ell.labels()[seg]);
    }
    Path(labels)
}

/// Log-likelihood from the lattice, with an unreachable ordering mapped to
/// `-inf` so it can be compared with the oracle.
pub fn lattice_log_likelihood(inst: &Instance) -> Result<f64> {
    match forward(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref()) {
        Ok(lat) => Ok(lat.log_likelihood()),
        Err(Error::Infeasible(_) | Error::InfeasibleSupervision(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// `|a/b - 1|` in log-space, zero when both are zero.
fn rel_gap(log_a: f64, log_b: f64) -> f64 {
    if log_a == f64::NEG_INFINITY && log_b == f64::NEG_INFINITY {
        0.0
    } else {
        ((log_a - log_b).exp() - 1.0).abs()
    }
}

/// Negative log-likelihood as a function of the pre-softmax scores.
fn loss_of_logits(inst: &Instance, y: &Matrix) -> Result<f64> {
    let z = PosteriorGrid::from_logits(y);
    Ok(-forward(&z, &inst.ell, &inst.sim, inst.anchors.as_ref())?.log_likelihood())
}

/// Largest `|fd - analytic|` over all coordinates.
pub fn gradient_gap(inst: &Instance, flip: bool) -> Result<f64> {
    let (_, mut grad) = ectc_loss_grad(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref())?;
    if flip {
        grad.as_mut_slice().iter_mut().for_each(|g| *g = -*g);
    }
    let fd = oracle::fd_gradient(|y| loss_of_logits(inst, y), &inst.logits, FD_STEP)?;
    Ok(fd
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Largest relative deviation over frames of `sum_s alpha beta / z` from the
/// likelihood `reference` (log).
pub fn identity_gap(inst: &Instance, reference: f64) -> Result<f64> {
    let lat = forward_backward(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref())?;
    (0..inst.z.frames()).try_fold(0.0, |acc: f64, t| {
        Ok(acc.max(rel_gap(lat.log_identity_at(t, &inst.z, &inst.ell)?, reference)))
    })
}

/// Largest `|sum_k gamma_t^k - 1|` over frames.
pub fn gamma_row_gap(inst: &Instance) -> Result<f64> {
    let lat = forward_backward(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref())?;
    let gamma = posterior_target(&lat, &inst.z, &inst.ell)?;
    Ok(gamma
        .iter_rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Hard,
    Info,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: &'static str,
    pub kind: ProbeKind,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: Option<f64>,
}

impl ProbeResult {
    fn new(name: &'static str, kind: ProbeKind, tolerance: Option<f64>) -> Self {
        ProbeResult {
            name,
            kind,
            cases: 0,
            failures: 0,
            max_error: 0.0,
            tolerance,
        }
    }

    /// Records one measurement; NaN counts as a failure.
    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if let Some(tol) = self.tolerance {
            if !(err <= tol) {
                self.failures += 1;
            }
        }
    }

    fn fail(&mut self) {
        self.cases += 1;
        self.failures += 1;
    }

    pub fn passed(&self) -> bool {
        self.kind == ProbeKind::Info || self.failures == 0
    }

    /// One `key=value` line.
    pub fn line(&self) -> String {
        let kind = match self.kind {
            ProbeKind::Hard => "hard",
            ProbeKind::Info => "info",
        };
        let mut s = format!(
            "probe={} kind={kind} cases={} max_error={:.3e}",
            self.name, self.cases, self.max_error
        );
        if let Some(tol) = self.tolerance {
            s.push_str(&format!(" tol={tol:.0e} failures={}", self.failures));
        }
        s.push_str(if self.kind == ProbeKind::Info {
            " status=reported"
        } else if self.failures == 0 {
            " status=pass"
        } else {
            " status=fail"
        });
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub probes: Vec<ProbeResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(ProbeResult::passed)
    }

    pub fn probe(&self, name: &str) -> Option<&ProbeResult> {
        self.probes.iter().find(|p| p.name == name)
    }
}

/// `l = [a, b]`, `T = 6`, anchors at frames 2 and 4 (1-based): two paths
/// survive out of five. Returns the largest error of the three facts.
pub fn pruning_example() -> Result<f64> {
    let ell = Ordering::new(vec![0, 1])?;
    let anchors = SparseAnnotations::new(vec![(1, 0), (3, 1)])?;
    let free = enumerate_paths(&ell, 6, None, DEFAULT_PATH_CAP)?.len();
    let pinned = enumerate_paths(&ell, 6, Some(&anchors), DEFAULT_PATH_CAP)?;
    if free != 5 || pinned.len() != 2 {
        return Ok(f64::INFINITY);
    }
    let z = PosteriorGrid::new(Matrix::from_rows(&[
        vec![0.7, 0.3],
        vec![0.6, 0.4],
        vec![0.5, 0.5],
        vec![0.2, 0.8],
        vec![0.4, 0.6],
        vec![0.1, 0.9],
    ])?)?;
    let sim = SimilarityTrack::new(
        [0.9, 0.3, 0.7, 0.2, 0.95].into_iter().map(Similarity::Finite).collect(),
        0.5,
    )?;
    let lattice = forward(&z, &ell, &sim, Some(&anchors))?.log_likelihood().exp();
    let two_paths: f64 = pinned
        .iter()
        .map(|p| oracle::path_prob(p, &z, &sim))
        .sum::<Result<f64>>()?;
    Ok((lattice - two_paths).abs())
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut normalization = ProbeResult::new("normalization", ProbeKind::Hard, Some(NORMALIZATION_TOL));
    let mut oracle_eq = ProbeResult::new("oracle_likelihood", ProbeKind::Hard, Some(ORACLE_REL_TOL));
    let mut ctc_loss = ProbeResult::new("ctc_reduction_loss", ProbeKind::Hard, Some(CTC_LOSS_TOL));
    let mut ctc_grad = ProbeResult::new("ctc_reduction_gradient", ProbeKind::Hard, Some(CTC_GRAD_TOL));
    let mut identity_ctc = ProbeResult::new("fb_identity_ctc", ProbeKind::Hard, Some(IDENTITY_REL_TOL));
    let mut pruning = ProbeResult::new("semi_pruning", ProbeKind::Hard, Some(PRUNING_TOL));
    let mut identity_general = ProbeResult::new("fb_identity_general", ProbeKind::Info, None);
    let mut gamma_rows = ProbeResult::new("gamma_row_sum_general", ProbeKind::Info, None);
    let mut grad_general = ProbeResult::new("gradient_vs_fd_general", ProbeKind::Info, None);
    let mut identity_finite = ProbeResult::new("fb_identity_finite", ProbeKind::Info, None);
    let mut grad_finite = ProbeResult::new("gradient_vs_fd_finite", ProbeKind::Info, None);

    if opts.trials > 0 {
        pruning.record(pruning_example()?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.trials {
        for size in &opts.sizes {
            let shape = |ctc_limit, with_anchors| InstanceShape {
                actions: size.actions,
                frames: size.frames,
                max_states: MAX_STATES,
                infinite_rate: HARD_LINK_RATE,
                ctc_limit,
                with_anchors,
            };

            if size.actions <= NORMALIZATION_MAX.0 && size.frames <= NORMALIZATION_MAX.1 {
                let inst = random_instance(&mut rng, shape(false, false))?;
                normalization.record((oracle::total_probability(&inst.z, &inst.sim)? - 1.0).abs());
            }

            let with_anchors = rng.random_bool(0.5);
            let inst = random_instance(&mut rng, shape(false, with_anchors))?;
            let brute = oracle::brute_likelihood(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref())?;
            match lattice_log_likelihood(&inst) {
                Ok(ll) => oracle_eq.record(rel_gap(ll, brute)),
                Err(_) => oracle_eq.fail(),
            }
            if brute > f64::NEG_INFINITY {
                identity_general.record(identity_gap(&inst, brute)?);
                gamma_rows.record(gamma_row_gap(&inst)?);
                if size.frames <= FD_MAX_FRAMES {
                    grad_general.record(gradient_gap(&inst, false)?);
                }
            }

            // finite similarities only, still above theta in places
            let inst = random_instance(
                &mut rng,
                InstanceShape {
                    infinite_rate: 0.0,
                    ..shape(false, false)
                },
            )?;
            let brute = oracle::brute_likelihood(&inst.z, &inst.ell, &inst.sim, None)?;
            identity_finite.record(identity_gap(&inst, brute)?);
            if size.frames <= FD_MAX_FRAMES {
                grad_finite.record(gradient_gap(&inst, false)?);
            }

            let with_anchors = rng.random_bool(0.5);
            let inst = random_instance(&mut rng, shape(true, with_anchors))?;
            let ctc = oracle::brute_ctc_likelihood(&inst.z, &inst.ell, inst.anchors.as_ref())?;
            match ectc_loss_grad(&inst.z, &inst.ell, &inst.sim, inst.anchors.as_ref()) {
                Ok((loss, _)) => {
                    ctc_loss.record((loss + ctc).abs());
                    identity_ctc.record(identity_gap(&inst, -loss)?);
                    if size.frames <= FD_MAX_FRAMES {
                        ctc_grad.record(gradient_gap(&inst, opts.flip_gradient_sign)?);
                    }
                }
                Err(_) => {
                    ctc_loss.fail();
                    identity_ctc.fail();
                }
            }
        }
    }
    Ok(CheckReport {
        probes: vec![
            normalization,
            oracle_eq,
            ctc_loss,
            ctc_grad,
            identity_ctc,
            pruning,
            identity_general,
            gamma_rows,
            grad_general,
            identity_finite,
            grad_finite,
        ],
    })
}
