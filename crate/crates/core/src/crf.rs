//! Linear-chain CRF over `T` emission tags with explicit START/STOP states.
//!
//! Emissions `P` are `m × T`. Transitions `A` are `(T+2) × (T+2)` with
//! START at index `T` and STOP at `T+1`; `A[i][j]` scores moving from tag
//! `i` to tag `j`. A sequence `y` scores
//! `A[START][y1] + Σ A[y_i][y_{i+1}] + A[y_m][STOP] + Σ P[i][y_i]`.

use crate::bio::TagSet;
use crate::error::{Error, Result};
use crate::nn::tensor::{log_sum_exp, Tensor};

/// Score used for transitions that must never be taken.
pub const FORBIDDEN: f64 = -10000.0;

fn check_shapes(emissions: &Tensor, transitions: &Tensor) -> Result<usize> {
    let t = emissions.cols();
    if emissions.rows() == 0 {
        return Err(Error::Shape("CRF needs at least one position".into()));
    }
    if transitions.shape() != [t + 2, t + 2] {
        return Err(Error::Shape(format!(
            "transition matrix {:?} does not match {t} tags",
            transitions.shape()
        )));
    }
    Ok(t)
}

/// Entries of the transition matrix held fixed at [`FORBIDDEN`]: moves into
/// START and out of STOP, plus BIO-invalid moves when `hard_bio` is set.
pub fn pinned_transitions(tagset: &TagSet, hard_bio: bool) -> Vec<(usize, usize)> {
    let t = tagset.len();
    let (start, stop) = (tagset.start(), tagset.stop());
    let mut pins = Vec::new();
    for i in 0..t + 2 {
        for j in 0..t + 2 {
            let pinned = j == start
                || i == stop
                || (hard_bio && i != stop && j < t && !tagset.allowed(i, j));
            if pinned {
                pins.push((i, j));
            }
        }
    }
    pins
}

/// Zero transitions except the pinned entries.
pub fn init_transitions(tagset: &TagSet, hard_bio: bool) -> Tensor {
    let n = tagset.len() + 2;
    let mut a = Tensor::zeros(n, n);
    for (i, j) in pinned_transitions(tagset, hard_bio) {
        a.set(i, j, FORBIDDEN);
    }
    a
}

pub fn sequence_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let t = check_shapes(emissions, transitions)?;
    if tags.len() != emissions.rows() {
        return Err(Error::Shape(format!(
            "{} tags for {} positions",
            tags.len(),
            emissions.rows()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= t) {
        return Err(Error::Shape(format!("tag {bad} out of range for {t} tags")));
    }
    let (start, stop) = (t, t + 1);
    let mut score = transitions.get(start, tags[0]);
    for (i, &y) in tags.iter().enumerate() {
        score += emissions.get(i, y);
        let next = tags.get(i + 1).copied().unwrap_or(stop);
        score += transitions.get(y, next);
    }
    Ok(score)
}

fn forward_table(emissions: &Tensor, transitions: &Tensor, t: usize) -> Vec<Vec<f64>> {
    let m = emissions.rows();
    let mut alpha = vec![vec![0.0; t]; m];
    for j in 0..t {
        alpha[0][j] = transitions.get(t, j) + emissions.get(0, j);
    }
    let mut buf = vec![0.0; t];
    for i in 1..m {
        for j in 0..t {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = alpha[i - 1][k] + transitions.get(k, j);
            }
            alpha[i][j] = log_sum_exp(&buf) + emissions.get(i, j);
        }
    }
    alpha
}

/// `log Σ_y exp(score(y))` by the forward recursion.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let t = check_shapes(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions, t);
    let last = alpha.last().expect("m >= 1");
    let terms: Vec<f64> = (0..t).map(|j| last[j] + transitions.get(j, t + 1)).collect();
    Ok(log_sum_exp(&terms))
}

/// Negative log-likelihood of `gold`; non-negative up to rounding.
pub fn crf_nll(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> Result<f64> {
    let score = sequence_score(emissions, transitions, gold)?;
    Ok(log_partition(emissions, transitions)? - score)
}

/// Posterior quantities from the forward-backward recursions.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_partition: f64,
    /// `m × T` probability that position `i` carries tag `j`.
    pub unary: Tensor,
    /// `(T+2) × (T+2)` expected number of times each transition is used.
    pub transitions: Tensor,
}

pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> Result<Marginals> {
    let t = check_shapes(emissions, transitions)?;
    let m = emissions.rows();
    let (start, stop) = (t, t + 1);
    let alpha = forward_table(emissions, transitions, t);

    let mut beta = vec![vec![0.0; t]; m];
    for j in 0..t {
        beta[m - 1][j] = transitions.get(j, stop);
    }
    let mut buf = vec![0.0; t];
    for i in (0..m - 1).rev() {
        for j in 0..t {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = transitions.get(j, k) + emissions.get(i + 1, k) + beta[i + 1][k];
            }
            beta[i][j] = log_sum_exp(&buf);
        }
    }
    let terms: Vec<f64> = (0..t).map(|j| alpha[m - 1][j] + beta[m - 1][j]).collect();
    let log_z = log_sum_exp(&terms);

    let mut unary = Tensor::zeros(m, t);
    for i in 0..m {
        for j in 0..t {
            unary.set(i, j, (alpha[i][j] + beta[i][j] - log_z).exp());
        }
    }
    let mut pair = Tensor::zeros(t + 2, t + 2);
    for j in 0..t {
        pair.set(start, j, unary.get(0, j));
        pair.set(j, stop, unary.get(m - 1, j));
    }
    for i in 0..m - 1 {
        for a in 0..t {
            for b in 0..t {
                let lp = alpha[i][a] + transitions.get(a, b) + emissions.get(i + 1, b) + beta[i + 1][b] - log_z;
                let cur = pair.get(a, b);
                pair.set(a, b, cur + lp.exp());
            }
        }
    }
    Ok(Marginals {
        log_partition: log_z,
        unary,
        transitions: pair,
    })
}

/// Highest-scoring tag sequence. Among equal scores the sequence with the
/// lowest tag index at the latest differing position wins.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64)> {
    let t = check_shapes(emissions, transitions)?;
    let m = emissions.rows();
    let mut delta = vec![0.0; t];
    for (j, d) in delta.iter_mut().enumerate() {
        *d = transitions.get(t, j) + emissions.get(0, j);
    }
    let mut back = vec![vec![0usize; t]; m];
    let mut next = vec![0.0; t];
    for i in 1..m {
        for j in 0..t {
            let mut best = 0;
            let mut best_score = delta[0] + transitions.get(0, j);
            for k in 1..t {
                let s = delta[k] + transitions.get(k, j);
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            back[i][j] = best;
            next[j] = best_score + emissions.get(i, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut best_score = delta[0] + transitions.get(0, t + 1);
    for j in 1..t {
        let s = delta[j] + transitions.get(j, t + 1);
        if s > best_score {
            last = j;
            best_score = s;
        }
    }
    let mut path = vec![0; m];
    path[m - 1] = last;
    for i in (1..m).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok((path, best_score))
}

/// Per-position argmax of the emissions, lowest index on ties.
pub fn argmax_decode(emissions: &Tensor) -> Vec<usize> {
    (0..emissions.rows())
        .map(|i| {
            let row = emissions.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force enumeration over all `T^m` tag sequences.

    use crate::nn::tensor::Tensor;

    pub fn all_sequences(m: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..m {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..t).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn score(p: &Tensor, a: &Tensor, y: &[usize]) -> f64 {
        let t = p.cols();
        let mut prev = t;
        let mut s = 0.0;
        for (i, &tag) in y.iter().enumerate() {
            s += a.get(prev, tag);
            s += p.get(i, tag);
            prev = tag;
        }
        s + a.get(prev, t + 1)
    }

    pub fn log_partition(p: &Tensor, a: &Tensor) -> f64 {
        let scores: Vec<f64> = all_sequences(p.rows(), p.cols()).iter().map(|y| score(p, a, y)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    /// Best sequence, ties broken toward the reverse-lexicographically
    /// smallest sequence (lowest tag at the latest differing position).
    pub fn best(p: &Tensor, a: &Tensor) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for y in all_sequences(p.rows(), p.cols()) {
            let s = score(p, a, &y);
            let better = match &best {
                None => true,
                Some((by, bs)) => s > *bs || (s == *bs && y.iter().rev().lt(by.iter().rev())),
            };
            if better {
                best = Some((y, s));
            }
        }
        best.unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_a(t: usize) -> Tensor {
        let mut a = Tensor::zeros(t + 2, t + 2);
        for i in 0..t + 2 {
            a.set(i, t, FORBIDDEN);
            a.set(t + 1, i, FORBIDDEN);
        }
        a
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, t: usize) -> (Tensor, Tensor) {
        let p = Tensor::new(m, t, (0..m * t).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut a = zero_a(t);
        for i in 0..t + 1 {
            for j in 0..t {
                a.set(i, j, rng.gen_range(-2.0..2.0));
            }
        }
        for i in 0..t {
            a.set(i, t + 1, rng.gen_range(-2.0..2.0));
        }
        (p, a)
    }

    #[test]
    fn single_emission_score() {
        let p = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let mut a = zero_a(2);
        assert_eq!(sequence_score(&p, &a, &[1]).unwrap(), 2.0);
        a.set(2, 0, 0.5);
        assert_eq!(sequence_score(&p, &a, &[0]).unwrap(), 1.5);
        assert!(sequence_score(&p, &a, &[0, 1]).is_err());
        assert!(sequence_score(&p, &a, &[2]).is_err());
    }

    #[test]
    fn score_matches_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, a) = random_instance(&mut rng, 4, 3);
        let y = [2, 0, 0, 1];
        let manual = a.get(3, 2) + p.get(0, 2) + a.get(2, 0) + p.get(1, 0) + a.get(0, 0) + p.get(2, 0)
            + a.get(0, 1) + p.get(3, 1) + a.get(1, 4);
        assert!((sequence_score(&p, &a, &y).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn two_sequence_partition() {
        let p = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let z = log_partition(&p, &zero_a(2)).unwrap();
        assert!((z - 2.313262).abs() < 1e-6, "{z}");
        assert!((z - oracle::log_partition(&p, &zero_a(2))).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (p, a) = random_instance(&mut rng, 3, 3);
            let z = log_partition(&p, &a).unwrap();
            assert!((z - oracle::log_partition(&p, &a)).abs() < 1e-10);
        }
    }

    #[test]
    fn emission_shift_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, a) = random_instance(&mut rng, 4, 3);
        let shifted = p.map(|x| x + 0.75);
        let diff = log_partition(&shifted, &a).unwrap() - log_partition(&p, &a).unwrap();
        assert!((diff - 4.0 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn nll_cases() {
        let p = Tensor::from_rows(&[[0.3], [-1.0], [2.0]]).unwrap();
        assert!(crf_nll(&p, &zero_a(1), &[0, 0, 0]).unwrap().abs() < 1e-12);

        let peaked = Tensor::from_rows(&[[100.0, -100.0, -100.0], [-100.0, -100.0, 100.0]]).unwrap();
        let (best, _) = viterbi(&peaked, &zero_a(3)).unwrap();
        assert_eq!(best, [0, 2]);
        assert!(crf_nll(&peaked, &zero_a(3), &best).unwrap() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (p, a) = random_instance(&mut rng, 3, 3);
            let y = [rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..3)];
            let brute = oracle::log_partition(&p, &a) - oracle::score(&p, &a, &y);
            let nll = crf_nll(&p, &a, &y).unwrap();
            assert!((nll - brute).abs() < 1e-10);
            assert!(nll >= -1e-12);
        }
    }

    #[test]
    fn viterbi_simple_and_forbidden() {
        let p = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(viterbi(&p, &zero_a(2)).unwrap(), (vec![1], 2.0));

        let p = Tensor::from_rows(&[[3.0, 0.0], [0.0, 3.0]]).unwrap();
        let mut a = zero_a(2);
        a.set(0, 1, FORBIDDEN);
        let (path, score) = viterbi(&p, &a).unwrap();
        assert_ne!(path, [0, 1]);
        assert_eq!((path.clone(), score), oracle::best(&p, &a));
    }

    #[test]
    fn viterbi_tie_break() {
        // All-zero scores: every sequence ties, the all-lowest sequence wins.
        let p = Tensor::zeros(3, 3);
        assert_eq!(viterbi(&p, &zero_a(3)).unwrap().0, [0, 0, 0]);
        // Integer-valued instances produce exact ties.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = rng.gen_range(1..5);
            let t = rng.gen_range(1..4);
            let p = Tensor::new(m, t, (0..m * t).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
            let mut a = zero_a(t);
            for i in 0..t + 1 {
                for j in 0..t {
                    a.set(i, j, rng.gen_range(0..2) as f64);
                }
            }
            assert_eq!(viterbi(&p, &a).unwrap(), oracle::best(&p, &a));
        }
    }

    #[test]
    fn marginals_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in 1..=4 {
            let (p, a) = random_instance(&mut rng, m, 3);
            let mg = marginals(&p, &a).unwrap();
            let z = oracle::log_partition(&p, &a);
            let mut unary = Tensor::zeros(m, 3);
            for y in oracle::all_sequences(m, 3) {
                let w = (oracle::score(&p, &a, &y) - z).exp();
                for (i, &tag) in y.iter().enumerate() {
                    unary.set(i, tag, unary.get(i, tag) + w);
                }
            }
            assert!(mg.unary.max_abs_diff(&unary) < 1e-10);
            assert!((mg.log_partition - z).abs() < 1e-10);
            // Each position contributes exactly one incoming transition.
            assert!((mg.transitions.sum() - (m as f64 + 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn pins_cover_boundaries_and_bio() {
        let ts = TagSet::default();
        let soft = pinned_transitions(&ts, false);
        assert_eq!(soft.len(), 2 * 13 - 1);
        let hard = pinned_transitions(&ts, true);
        assert!(hard.contains(&(ts.start(), 2)));
        assert!(hard.contains(&(3, 2)));
        assert!(!hard.contains(&(1, 2)));
        let a = init_transitions(&ts, true);
        assert_eq!(a.get(0, 2), FORBIDDEN);
        assert_eq!(a.get(1, 2), 0.0);
    }

    #[test]
    fn argmax_rows() {
        let p = Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0], [5.0, 5.0]]).unwrap();
        assert_eq!(argmax_decode(&p), [1, 0, 0]);
    }
}
