//! Brute-force references: exhaustive path enumeration, normalized path
//! probabilities computed straight from the definition, and central finite
//! differences. Only usable at desk scale; the tests and `check` treat these
//! as ground truth for the lattice.

use crate::error::{Error, Result};
use crate::lattice::{Ordering, Path, PosteriorGrid, Similarity, SimilarityTrack, SparseAnnotations};
use crate::tensor::{log_sum_exp_slice, Matrix};

pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
    pub total_log_prob: f64,
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Every path of `frames` labels that collapses to `ell` and honours the
/// anchors, produced by placing the `S - 1` change points.
pub fn enumerate_paths(
    ell: &Ordering,
    frames: usize,
    ann: Option<&SparseAnnotations>,
    cap: u128,
) -> Result<Vec<Path>> {
    let states = ell.len();
    if states > frames {
        return Err(Error::Infeasible(format!(
            "ordering of length {states} cannot fit in {frames} frames"
        )));
    }
    let count = binomial(frames as u64 - 1, states as u64 - 1);
    if count > cap {
        return Err(Error::SizeLimit { count, cap });
    }
    let mut out = Vec::new();
    // boundaries[i] is the first frame of segment i + 1
    let mut boundaries: Vec<usize> = (1..states).collect();
    loop {
        let mut labels = Vec::with_capacity(frames);
        let mut seg = 0;
        for t in 0..frames {
            while seg < boundaries.len() && boundaries[seg] == t {
                seg += 1;
            }
            labels.push(ell.labels()[seg]);
        }
        let consistent = ann.is_none_or(|a| {
            a.anchors()
                .iter()
                .all(|&(t, k)| t < frames && labels[t] == k)
        });
        if consistent {
            out.push(Path(labels));
        }
        if !next_combination(&mut boundaries, frames - 1) {
            break;
        }
    }
    Ok(out)
}

/// Advances a strictly increasing selection from `1..=max` to the next one in
/// lexicographic order.
fn next_combination(sel: &mut [usize], max: usize) -> bool {
    let n = sel.len();
    for i in (0..n).rev() {
        if sel[i] < max - (n - 1 - i) {
            sel[i] += 1;
            for j in i + 1..n {
                sel[j] = sel[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Probability of one path under the similarity-reweighted Markov model,
/// evaluated in probability space from the definition.
pub fn path_prob(path: &Path, z: &PosteriorGrid, sim: &SimilarityTrack) -> Result<f64> {
    let frames = z.frames();
    if path.len() != frames || sim.len() + 1 != frames {
        return Err(Error::Shape(format!(
            "path of {} frames, grid of {frames}, similarity of {}",
            path.len(),
            sim.len()
        )));
    }
    let labels = path.labels();
    let theta = sim.theta();
    let mut prob = z.row(0)[labels[0]];
    for t in 1..frames {
        let prev = labels[t - 1];
        let cur = labels[t];
        let row = z.row(t);
        let factor = match sim.sims()[t - 1] {
            Similarity::Infinite => {
                if cur == prev {
                    1.0
                } else {
                    0.0
                }
            }
            Similarity::Finite(s) => {
                let stay_weight = theta.max(s);
                let psi = |k: usize| if k == prev { stay_weight } else { theta };
                let norm: f64 = row.iter().enumerate().map(|(k, &zk)| psi(k) * zk).sum();
                psi(cur) * row[cur] / norm
            }
        };
        prob *= factor;
    }
    Ok(prob)
}

pub fn path_log_prob(path: &Path, z: &PosteriorGrid, sim: &SimilarityTrack) -> Result<f64> {
    Ok(path_prob(path, z, sim)?.ln())
}

pub fn enumerate_with_probs(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
    cap: u128,
) -> Result<PathSet> {
    let paths = enumerate_paths(ell, z.frames(), ann, cap)?;
    let logs = paths
        .iter()
        .map(|p| path_log_prob(p, z, sim))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathSet {
        total_log_prob: log_sum_exp_slice(&logs),
        paths,
    })
}

/// Log of the summed probability of all consistent paths.
pub fn brute_likelihood(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<f64> {
    Ok(enumerate_with_probs(z, ell, sim, ann, DEFAULT_PATH_CAP)?.total_log_prob)
}

/// Plain blank-free CTC likelihood: the sum over consistent paths of the
/// product of per-frame probabilities, no similarity anywhere.
pub fn brute_ctc_likelihood(
    z: &PosteriorGrid,
    ell: &Ordering,
    ann: Option<&SparseAnnotations>,
) -> Result<f64> {
    let paths = enumerate_paths(ell, z.frames(), ann, DEFAULT_PATH_CAP)?;
    let total: f64 = paths
        .iter()
        .map(|p| {
            p.labels()
                .iter()
                .enumerate()
                .map(|(t, &k)| z.row(t)[k])
                .product::<f64>()
        })
        .sum();
    Ok(total.ln())
}

/// Exact posterior `P(pi_t = k | consistent)` by enumeration.
pub fn brute_posterior(
    z: &PosteriorGrid,
    ell: &Ordering,
    sim: &SimilarityTrack,
    ann: Option<&SparseAnnotations>,
) -> Result<Matrix> {
    let paths = enumerate_paths(ell, z.frames(), ann, DEFAULT_PATH_CAP)?;
    let mut post = Matrix::zeros(z.frames(), z.actions());
    let mut total = 0.0;
    for p in &paths {
        let w = path_prob(p, z, sim)?;
        total += w;
        for (t, &k) in p.labels().iter().enumerate() {
            let v = post.get(t, k) + w;
            post.set(t, k, v);
        }
    }
    for v in post.as_mut_slice() {
        *v /= total;
    }
    Ok(post)
}

/// Sum of path probabilities over all `A^T` label sequences. Must be one.
pub fn total_probability(z: &PosteriorGrid, sim: &SimilarityTrack) -> Result<f64> {
    let (frames, actions) = (z.frames(), z.actions());
    let count = (actions as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if count > DEFAULT_PATH_CAP {
        return Err(Error::SizeLimit {
            count,
            cap: DEFAULT_PATH_CAP,
        });
    }
    let mut labels = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        total += path_prob(&Path(labels.clone()), z, sim)?;
        // odometer increment
        let mut i = frames;
        loop {
            if i == 0 {
                return Ok(total);
            }
            i -= 1;
            labels[i] += 1;
            if labels[i] < actions {
                break;
            }
            labels[i] = 0;
        }
    }
}

/// Central differences of a black-box loss, one coordinate at a time.
pub fn fd_gradient<F>(mut loss: F, y: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let mut grad = Matrix::zeros(y.rows(), y.cols());
    let mut probe = y.clone();
    for i in 0..y.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = loss(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = loss(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                frame: i / y.cols().max(1),
                what: "loss at a finite-difference probe".into(),
            });
        }
        grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
