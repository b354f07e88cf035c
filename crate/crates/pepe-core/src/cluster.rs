//! Semantic cluster labels for source sentences.
//!
//! Sentences are embedded with the frozen task-adaptive pretrained encoder
//! (CLS state of a source-only input), then a diagonal-covariance Gaussian
//! mixture fitted by EM assigns each sentence to the component that best
//! explains it. Labels are computed once and frozen before main training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{PepeError, Result};
use crate::model::{ApeModel, EncoderInput};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// n × d sentence embeddings, row i aligned to triplet i.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub data: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl EmbeddingSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub d: usize,
    /// k mixing weights, positive, summing to one.
    pub weights: Vec<f64>,
    /// k × d component means.
    pub means: Vec<f64>,
    /// k × d diagonal variances, floored at [`VARIANCE_FLOOR`].
    pub variances: Vec<f64>,
}

/// Fit result with the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Encoder CLS embeddings of every source sentence (source alone, no mt).
///
/// The snapshot must come out of task-adaptive pretraining; a random-init
/// encoder is refused unless `allow_untrained` is set (the no-pretraining
/// ablation does exactly that, knowingly).
pub fn embed_sources(
    model: &ApeModel,
    corpus: &Corpus,
    allow_untrained: bool,
) -> Result<EmbeddingSet> {
    if !model.meta.pretrained && !allow_untrained {
        return Err(PepeError::UntrainedSnapshot);
    }
    let sp = corpus.vocab.specials();
    let d = model.dims.d_model;
    let n = corpus.len();
    let mut data = vec![0.0; n * d];
    for (i, t) in corpus.triplets.iter().enumerate() {
        let enc = model.encode(&EncoderInput::from_src_only(&t.src, sp))?;
        data[i * d..(i + 1) * d].copy_from_slice(enc.cls(d));
    }
    Ok(EmbeddingSet { data, n, d })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by one assignment pass; returns (means, vars).
fn kmeans_init(set: &EmbeddingSet, k: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (set.n, set.d);
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.gen_range(0..n));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(set.row(i), set.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut dart = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with a chosen center; spread arbitrarily.
            rng.gen_range(0..n)
        };
        centers.push(next);
        for i in 0..n {
            dist2[i] = dist2[i].min(sq_dist(set.row(i), set.row(next)));
        }
    }

    let mut means = vec![0.0; k * d];
    for (c, &idx) in centers.iter().enumerate() {
        means[c * d..(c + 1) * d].copy_from_slice(set.row(idx));
    }

    // One k-means pass for means, then per-cluster variances.
    let assign: Vec<usize> = (0..n)
        .map(|i| {
            (0..k)
                .map(|c| (sq_dist(set.row(i), &means[c * d..(c + 1) * d]), c))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap()
                .1
        })
        .collect();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * d];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(set.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for v in sums[c * d..(c + 1) * d].iter_mut() {
                *v /= counts[c] as f64;
            }
            means[c * d..(c + 1) * d].copy_from_slice(&sums[c * d..(c + 1) * d]);
        }
    }
    let mut vars = vec![0.0; k * d];
    for (i, &c) in assign.iter().enumerate() {
        for (v, (x, m)) in vars[c * d..(c + 1) * d]
            .iter_mut()
            .zip(set.row(i).iter().zip(&means[c * d..(c + 1) * d]))
        {
            *v += (x - m) * (x - m);
        }
    }
    for c in 0..k {
        for v in vars[c * d..(c + 1) * d].iter_mut() {
            *v = if counts[c] > 0 {
                (*v / counts[c] as f64).max(VARIANCE_FLOOR)
            } else {
                1.0
            };
        }
    }
    (means, vars)
}

/// Per-component joint log-density `log π_c + log N(h; μ_c, σ²_c)`.
fn joint_log_density(gmm: &GmmModel, h: &[f64]) -> Vec<f64> {
    let d = gmm.d;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    (0..gmm.k)
        .map(|c| {
            let mu = &gmm.means[c * d..(c + 1) * d];
            let var = &gmm.variances[c * d..(c + 1) * d];
            let mut acc = gmm.weights[c].ln();
            for i in 0..d {
                let diff = h[i] - mu[i];
                acc -= 0.5 * (ln_2pi + var[i].ln() + diff * diff / var[i]);
            }
            acc
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Posterior component probabilities for one embedding, in log space for
/// stability; entries are positive and sum to one.
pub fn responsibilities(gmm: &GmmModel, h: &[f64]) -> Vec<f64> {
    let log_joint = joint_log_density(gmm, h);
    let lse = log_sum_exp(&log_joint);
    log_joint.iter().map(|l| (l - lse).exp()).collect()
}

/// Component with the highest responsibility; ties go to the lowest index.
pub fn assign(gmm: &GmmModel, h: &[f64]) -> usize {
    let r = responsibilities(gmm, h);
    let mut best = 0;
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v > r[best] {
            best = i;
        }
    }
    best
}

/// Σ over rows of log Σ_c π_c N(h; μ_c, σ²_c).
pub fn log_likelihood(gmm: &GmmModel, set: &EmbeddingSet) -> f64 {
    (0..set.n)
        .map(|i| log_sum_exp(&joint_log_density(gmm, set.row(i))))
        .sum()
}

/// EM for a diagonal-covariance mixture. Stops when the per-point
/// log-likelihood improvement drops below `tol` or after `max_iter` rounds.
pub fn fit_gmm(
    set: &EmbeddingSet,
    k: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<GmmFit> {
    if k == 0 {
        return Err(PepeError::Config("k must be >= 1".into()));
    }
    if set.n < k {
        return Err(PepeError::TooFewPoints { n: set.n, k });
    }
    let (n, d) = (set.n, set.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (means, variances) = kmeans_init(set, k, &mut rng);
    let mut gmm = GmmModel {
        k,
        d,
        weights: vec![1.0 / k as f64; k],
        means,
        variances,
    };

    let mut trace = Vec::with_capacity(max_iter);
    let mut converged = false;
    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        // E-step, accumulating the total log-likelihood.
        let mut ll = 0.0;
        for i in 0..n {
            let log_joint = joint_log_density(&gmm, set.row(i));
            let lse = log_sum_exp(&log_joint);
            ll += lse;
            for (c, l) in log_joint.iter().enumerate() {
                resp[i * k + c] = (l - lse).exp();
            }
        }
        trace.push(ll);
        if (ll - prev_ll) / (n as f64) < tol {
            converged = true;
            break;
        }
        prev_ll = ll;

        // M-step with floored variances.
        let mut nk = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                nk[c] += resp[i * k + c];
            }
        }
        for c in 0..k {
            nk[c] = nk[c].max(1e-32);
        }
        let mut means = vec![0.0; k * d];
        for i in 0..n {
            let row = set.row(i);
            for c in 0..k {
                let r = resp[i * k + c];
                if r != 0.0 {
                    crate::tensor::axpy(&mut means[c * d..(c + 1) * d], r, row);
                }
            }
        }
        for c in 0..k {
            for m in means[c * d..(c + 1) * d].iter_mut() {
                *m /= nk[c];
            }
        }
        let mut vars = vec![0.0; k * d];
        for i in 0..n {
            let row = set.row(i);
            for c in 0..k {
                let r = resp[i * k + c];
                if r != 0.0 {
                    let mu = &means[c * d..(c + 1) * d];
                    for (v, (x, m)) in vars[c * d..(c + 1) * d]
                        .iter_mut()
                        .zip(row.iter().zip(mu))
                    {
                        *v += r * (x - m) * (x - m);
                    }
                }
            }
        }
        for c in 0..k {
            for v in vars[c * d..(c + 1) * d].iter_mut() {
                *v = (*v / nk[c]).max(VARIANCE_FLOOR);
            }
        }
        gmm.weights = nk.iter().map(|&w| w / n as f64).collect();
        // Renormalize against the 1e-32 guards so the weights sum to one.
        let wsum: f64 = gmm.weights.iter().sum();
        for w in gmm.weights.iter_mut() {
            *w /= wsum;
        }
        gmm.means = means;
        gmm.variances = vars;
    }

    Ok(GmmFit {
        model: gmm,
        log_likelihoods: trace,
        converged,
    })
}

/// Frozen labels for every row of the embedding set.
pub fn assign_all(gmm: &GmmModel, set: &EmbeddingSet) -> Vec<usize> {
    (0..set.n).map(|i| assign(gmm, set.row(i))).collect()
}

/// Project rows onto their top two principal components (power iteration
/// with deflation; deterministic start vector and sign convention).
pub fn pca_2d(set: &EmbeddingSet) -> Vec<(f64, f64)> {
    let (n, d) = (set.n, set.d);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        crate::tensor::axpy(&mut mean, 1.0 / n as f64, set.row(i));
    }
    let mut centered = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = set.data[i * d + j] - mean[j];
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; d * d];
    crate::tensor::matmul_tn_acc(&mut cov, &centered, &centered, d, n, d);
    for v in cov.iter_mut() {
        *v /= denom;
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut work = cov;
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        for _ in 0..300 {
            let mut next = vec![0.0; d];
            for r in 0..d {
                next[r] = crate::tensor::dot(&work[r * d..(r + 1) * d], &v);
            }
            orthogonalize(&mut next, &components);
            if normalize(&mut next) == 0.0 {
                break;
            }
            v = next;
        }
        // Deterministic sign: largest-magnitude entry positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        let lambda = {
            let mut cv = vec![0.0; d];
            for r in 0..d {
                cv[r] = crate::tensor::dot(&work[r * d..(r + 1) * d], &v);
            }
            crate::tensor::dot(&v, &cv)
        };
        for r in 0..d {
            for c in 0..d {
                work[r * d + c] -= lambda * v[r] * v[c];
            }
        }
        components.push(v);
    }

    (0..n)
        .map(|i| {
            let row = &centered[i * d..(i + 1) * d];
            (
                crate::tensor::dot(row, &components[0]),
                crate::tensor::dot(row, &components[1]),
            )
        })
        .collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj = crate::tensor::dot(v, b);
        crate::tensor::axpy(v, -proj, b);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(rows: &[&[f64]]) -> EmbeddingSet {
        let d = rows[0].len();
        EmbeddingSet {
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            n: rows.len(),
            d,
        }
    }

    fn two_clouds(seed: u64, per_cloud: usize, sep: f64, spread: f64) -> (EmbeddingSet, Vec<usize>) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let center = if c == 0 { 0.0 } else { sep };
            for _ in 0..per_cloud {
                data.push(center + crate::tensor::gauss(&mut rng) * spread);
                data.push(center + crate::tensor::gauss(&mut rng) * spread);
                labels.push(c);
            }
        }
        (
            EmbeddingSet {
                data,
                n: 2 * per_cloud,
                d: 2,
            },
            labels,
        )
    }

    #[test]
    fn k1_closed_form() {
        let set = set_from(&[&[1.0, 2.0], &[3.0, 6.0], &[5.0, 4.0]]);
        let fit = fit_gmm(&set, 1, 0, 1e-6, 100).unwrap();
        let g = fit.model;
        assert_eq!(g.weights, vec![1.0]);
        assert!((g.means[0] - 3.0).abs() < 1e-9);
        assert!((g.means[1] - 4.0).abs() < 1e-9);
        // Biased (1/n) sample variances: [8/3, 8/3].
        assert!((g.variances[0] - 8.0 / 3.0).abs() < 1e-9);
        assert!((g.variances[1] - 8.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn well_separated_clouds_are_recovered_exactly() {
        let (set, labels) = two_clouds(5, 40, 10.0, 1.0);
        let fit = fit_gmm(&set, 2, 7, 1e-6, 200).unwrap();
        let assigned = assign_all(&fit.model, &set);
        // Purity up to permutation must be 100%.
        let flips: usize = assigned
            .iter()
            .zip(&labels)
            .filter(|(a, b)| *a != *b)
            .count();
        assert!(flips == 0 || flips == set.n);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let (set, _) = two_clouds(9, 30, 4.0, 1.0);
        let a = fit_gmm(&set, 3, 42, 1e-6, 100).unwrap();
        let b = fit_gmm(&set, 3, 42, 1e-6, 100).unwrap();
        assert_eq!(a.model.weights, b.model.weights);
        assert_eq!(a.model.means, b.model.means);
        assert_eq!(a.model.variances, b.model.variances);
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let (set, _) = two_clouds(11, 50, 3.0, 1.5);
        let fit = fit_gmm(&set, 4, 3, 1e-9, 150).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "ll dropped: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn identical_points_engage_variance_floor_without_failure() {
        let point: &[f64] = &[2.0, 2.0];
        let set = set_from(&[point; 6]);
        let fit = fit_gmm(&set, 2, 1, 1e-6, 50).unwrap();
        for v in &fit.model.variances {
            assert!(*v >= VARIANCE_FLOOR);
        }
        assert!(log_likelihood(&fit.model, &set).is_finite());
    }

    #[test]
    fn responsibilities_k1_and_sum() {
        let set = set_from(&[&[0.0], &[1.0], &[4.0]]);
        let fit = fit_gmm(&set, 1, 0, 1e-6, 10).unwrap();
        assert_eq!(responsibilities(&fit.model, &[2.0]), vec![1.0]);

        let gmm = GmmModel {
            k: 3,
            d: 2,
            weights: vec![0.2, 0.5, 0.3],
            means: vec![0.0, 0.0, 3.0, 1.0, -2.0, 5.0],
            variances: vec![1.0, 2.0, 0.5, 1.0, 1.5, 0.7],
        };
        let r = responsibilities(&gmm, &[0.4, -1.0]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn point_at_isolated_mean_takes_all_responsibility() {
        let gmm = GmmModel {
            k: 2,
            d: 2,
            weights: vec![0.5, 0.5],
            means: vec![0.0, 0.0, 50.0, 50.0],
            variances: vec![1.0, 1.0, 1.0, 1.0],
        };
        let r = responsibilities(&gmm, &[0.0, 0.0]);
        assert!(r[0] > 1.0 - 1e-12);
        assert_eq!(assign(&gmm, &[0.0, 0.0]), 0);
    }

    #[test]
    fn symmetric_midpoint_splits_evenly_and_tie_breaks_low() {
        let gmm = GmmModel {
            k: 2,
            d: 1,
            weights: vec![0.5, 0.5],
            means: vec![-1.0, 1.0],
            variances: vec![0.5, 0.5],
        };
        let r = responsibilities(&gmm, &[0.0]);
        assert!((r[0] - 0.5).abs() < 1e-9);
        assert!((r[1] - 0.5).abs() < 1e-9);
        assert_eq!(assign(&gmm, &[0.0]), 0);
    }

    #[test]
    fn assign_ignores_positive_density_scaling() {
        let gmm = GmmModel {
            k: 2,
            d: 1,
            weights: vec![0.3, 0.7],
            means: vec![0.0, 2.0],
            variances: vec![1.0, 1.0],
        };
        let mut scaled = gmm.clone();
        // Scaling every weight by the same positive constant (then letting
        // the softmax-style normalization absorb it) must not move argmax.
        for w in scaled.weights.iter_mut() {
            *w *= 13.7;
        }
        for x in [-1.0, 0.3, 1.1, 2.5] {
            assert_eq!(assign(&gmm, &[x]), assign(&scaled, &[x]));
        }
    }

    #[test]
    fn log_likelihood_closed_form_and_additivity() {
        let gmm = GmmModel {
            k: 1,
            d: 1,
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![1.0],
        };
        let one = set_from(&[&[0.0]]);
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln(); // ≈ -0.918939
        assert!((log_likelihood(&gmm, &one) - expected).abs() < 1e-9);
        assert!((expected + 0.9189385332046727).abs() < 1e-9);

        // Adding a duplicate point adds exactly that point's log-density.
        let set2 = set_from(&[&[0.0], &[1.3]]);
        let set3 = set_from(&[&[0.0], &[1.3], &[1.3]]);
        let single = set_from(&[&[1.3]]);
        let diff = log_likelihood(&gmm, &set3) - log_likelihood(&gmm, &set2);
        assert!((diff - log_likelihood(&gmm, &single)).abs() < 1e-9);
    }

    #[test]
    fn log_likelihood_matches_direct_density_sum() {
        // Independent oracle: evaluate mixture densities naively (no
        // log-space tricks) on a 5-point fixture.
        let gmm = GmmModel {
            k: 2,
            d: 2,
            weights: vec![0.4, 0.6],
            means: vec![0.0, 1.0, 2.0, -1.0],
            variances: vec![1.0, 0.5, 2.0, 1.5],
        };
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![-0.5, 2.0],
            vec![2.0, -1.0],
            vec![0.3, -0.7],
        ];
        let mut oracle = 0.0;
        for p in &pts {
            let mut density = 0.0;
            for c in 0..2 {
                let mut comp = gmm.weights[c];
                for j in 0..2 {
                    let var = gmm.variances[c * 2 + j];
                    let diff = p[j] - gmm.means[c * 2 + j];
                    comp *= (-diff * diff / (2.0 * var)).exp()
                        / (2.0 * std::f64::consts::PI * var).sqrt();
                }
                density += comp;
            }
            oracle += density.ln();
        }
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let set = set_from(&rows);
        assert!((log_likelihood(&gmm, &set) - oracle).abs() < 1e-9);
    }

    #[test]
    fn component_permutation_permutes_assignments() {
        let (set, _) = two_clouds(13, 25, 6.0, 1.0);
        let fit = fit_gmm(&set, 3, 5, 1e-6, 100).unwrap();
        let gmm = fit.model;
        let perm = [2usize, 0, 1];
        let mut shuffled = gmm.clone();
        for (new_c, &old_c) in perm.iter().enumerate() {
            shuffled.weights[new_c] = gmm.weights[old_c];
            shuffled.means[new_c * 2..(new_c + 1) * 2]
                .copy_from_slice(&gmm.means[old_c * 2..(old_c + 1) * 2]);
            shuffled.variances[new_c * 2..(new_c + 1) * 2]
                .copy_from_slice(&gmm.variances[old_c * 2..(old_c + 1) * 2]);
        }
        let inverse: Vec<usize> = (0..3)
            .map(|c| perm.iter().position(|&p| p == c).unwrap())
            .collect();
        for i in 0..set.n {
            let a = assign(&gmm, set.row(i));
            let b = assign(&shuffled, set.row(i));
            assert_eq!(inverse[a], b);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let set = set_from(&[&[0.0, 1.0]]);
        assert!(matches!(
            fit_gmm(&set, 2, 0, 1e-6, 10),
            Err(PepeError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn pca_projects_line_onto_first_component() {
        // Points on a line y = 2x: the first component carries all variance.
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let set = set_from(&refs);
        let proj = pca_2d(&set);
        for (_, pc2) in &proj {
            assert!(pc2.abs() < 1e-6);
        }
        let spread: f64 = proj.iter().map(|(a, _)| a * a).sum();
        assert!(spread > 1.0);
    }
}
