//! Finite stagewise-independent noise distributions, reproducible scenario
//! sampling and k-means quantization of the global stage noise.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prosumer::NodeNoise;

/// Finite distribution over equal-dimension real vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteDistribution {
    atoms: Vec<Vec<f64>>,
    probabilities: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, probabilities: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("empty atom list".into()));
        }
        if atoms.len() != probabilities.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probabilities.len()
            )));
        }
        let dim = atoms[0].len();
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::InvalidDistribution(format!(
                    "ragged atom dimensions: atom {i} has dim {} (expected {dim})",
                    a.len()
                )));
            }
        }
        let mut sum = 0.0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative probability {p} at atom {i}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { atoms, probabilities })
    }

    /// Degenerate single-atom distribution.
    pub fn dirac(atom: Vec<f64>) -> Self {
        Self {
            atoms: vec![atom],
            probabilities: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Index of a sampled atom.
    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.atoms.len() - 1
    }
}

/// Noise law of the whole network: per stage, per node, a finite
/// distribution over `(hot_water, electricity)` demands. The stage-`t`
/// entry is the law of the noise revealed between stages `t` and `t+1`.
/// Stagewise independence is structural: no cross-stage object exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// `stages[t][i]` has 2-dimensional atoms `[d_hw, d_el]`.
    pub stages: Vec<Vec<FiniteDistribution>>,
}

impl NoiseModel {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.stages.first().map_or(0, |s| s.len())
    }

    pub fn validate(&self) -> Result<()> {
        for (t, stage) in self.stages.iter().enumerate() {
            if stage.len() != self.num_nodes() {
                return Err(Error::InvalidDistribution(format!(
                    "stage {t} has {} node distributions, expected {}",
                    stage.len(),
                    self.num_nodes()
                )));
            }
            for (i, d) in stage.iter().enumerate() {
                if d.dim() != 2 {
                    return Err(Error::InvalidDistribution(format!(
                        "node {i} stage {t}: atoms must be [d_hw, d_el] pairs"
                    )));
                }
                for a in d.atoms() {
                    if a[0] < 0.0 {
                        return Err(Error::InvalidDistribution(format!(
                            "node {i} stage {t}: negative hot-water demand {}",
                            a[0]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn node_noise(&self, t: usize, node: usize, atom: usize) -> NodeNoise {
        let a = &self.stages[t][node].atoms()[atom];
        NodeNoise {
            hot_water: a[0],
            electricity: a[1],
        }
    }
}

/// One realisation of the full noise process, with the generating seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    /// `draws[t][i]` is the node-`i` noise revealed between `t` and `t+1`.
    pub draws: Vec<Vec<NodeNoise>>,
}

/// Draws one scenario; identical seeds give bit-identical scenarios.
pub fn sample_scenario(model: &NoiseModel, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..model.horizon())
        .map(|t| {
            (0..model.num_nodes())
                .map(|i| {
                    let d = &model.stages[t][i];
                    let k = d.sample_index(&mut rng);
                    model.node_noise(t, i, k)
                })
                .collect()
        })
        .collect();
    Scenario { seed, draws }
}

/// Draws `n` scenarios from consecutive seed streams derived from `seed`.
pub fn sample_scenarios(model: &NoiseModel, n: usize, seed: u64) -> Vec<Scenario> {
    (0..n as u64)
        .map(|k| sample_scenario(model, seed.wrapping_add(k.wrapping_mul(0x9E3779B97F4A7C15))))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd k-means with k-means++ seeding; returns centroids weighted by
/// cluster frequencies. Empty clusters are repaired by splitting the
/// largest cluster at its farthest member.
pub fn kmeans_quantize(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<FiniteDistribution> {
    if samples.is_empty() || k == 0 {
        return Err(Error::InvalidParameter("k-means needs k >= 1 and samples".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in samples {
        if !distinct.iter().any(|d| sq_dist(d, s) == 0.0) {
            distinct.push(s);
        }
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::KMeansTooManyClusters {
            k,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(samples[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all mass on existing centroids; pick any sample not yet chosen
            samples
                .iter()
                .find(|s| centroids.iter().all(|c| sq_dist(c, s) > 0.0))
                .expect("distinct count checked above")
                .clone()
        } else {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            samples[pick].clone()
        };
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(s, &next));
        }
        centroids.push(next);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut labels = vec![0usize; n];
        let mut sse = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let (best, bd) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(s, c)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            labels[i] = best;
            sse += bd;
        }
        (labels, sse)
    };

    let (mut labels, _) = assign(&centroids);
    for _ in 0..100 {
        // recompute centroids
        let dim = samples[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, s) in samples.iter().enumerate() {
            counts[labels[i]] += 1;
            for (d, v) in sums[labels[i]].iter_mut().zip(s) {
                *d += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // split the largest cluster at its farthest member
                let big = (0..k).max_by_key(|&c| counts[c]).unwrap();
                let far = (0..n)
                    .filter(|&i| labels[i] == big)
                    .max_by(|&a, &b| {
                        sq_dist(&samples[a], &centroids[big])
                            .partial_cmp(&sq_dist(&samples[b], &centroids[big]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[j] = samples[far].clone();
                labels[far] = j;
                counts[big] -= 1;
                counts[j] = 1;
                for (d, v) in sums[big].iter_mut().zip(&samples[far]) {
                    *d -= v;
                }
                sums[j] = samples[far].clone();
            }
        }
        for j in 0..k {
            for d in 0..dim {
                centroids[j][d] = sums[j][d] / counts[j] as f64;
            }
        }
        let (new_labels, _) = assign(&centroids);
        let converged = new_labels == labels;
        labels = new_labels;
        if converged {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    let probabilities = counts.iter().map(|&c| c as f64 / n as f64).collect();
    FiniteDistribution::new(centroids, probabilities)
}

/// Quantizes the stage-`t` global noise `(W_t^1, ..., W_t^{N_V})` to `k`
/// atoms: draws `n_samples` realisations from the product law, then runs
/// k-means on the raw samples. Atom layout: `[d_hw^1, d_el^1, d_hw^2, ...]`.
pub fn resample_product(
    model: &NoiseModel,
    t: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<FiniteDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage = &model.stages[t];
    let samples: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| {
            let mut v = Vec::with_capacity(2 * stage.len());
            for d in stage {
                let a = &d.atoms()[d.sample_index(&mut rng)];
                v.push(a[0]);
                v.push(a[1]);
            }
            v
        })
        .collect();
    // clamp k to the number of distinct samples (deterministic models
    // collapse to fewer atoms than requested)
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in &samples {
        if !distinct.iter().any(|d| sq_dist(d, s) == 0.0) {
            distinct.push(s);
        }
        if distinct.len() >= k {
            break;
        }
    }
    let clustered = kmeans_quantize(&samples, k.min(distinct.len()), seed ^ 0xABCD)?;
    exact_refine(stage, clustered)
}

/// Joint support size of a product of finite laws, or `None` on overflow.
fn product_support_size(stage: &[FiniteDistribution]) -> Option<usize> {
    stage
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(d.atoms().len()))
}

const EXACT_REFINE_LIMIT: usize = 20_000;

/// When the joint product support is small enough to enumerate, replaces the
/// empirical cluster frequencies and centroids with the exact cell
/// probabilities and exact cell barycenters of the nearest-centroid
/// partition. The result is then a conditional expectation of the original
/// law, so quantized problems under-estimate exactly (Jensen); the empirical
/// result is kept for large supports.
fn exact_refine(
    stage: &[FiniteDistribution],
    clustered: FiniteDistribution,
) -> Result<FiniteDistribution> {
    let size = match product_support_size(stage) {
        Some(s) if s <= EXACT_REFINE_LIMIT => s,
        _ => return Ok(clustered),
    };
    let dim = 2 * stage.len();
    let k = clustered.atoms().len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut masses = vec![0.0; k];
    let mut counters = vec![0usize; stage.len()];
    for _ in 0..size {
        let mut atom = Vec::with_capacity(dim);
        let mut prob = 1.0;
        for (i, d) in stage.iter().enumerate() {
            let a = &d.atoms()[counters[i]];
            atom.push(a[0]);
            atom.push(a[1]);
            prob *= d.probabilities()[counters[i]];
        }
        let nearest = (0..k)
            .min_by(|&a, &b| {
                sq_dist(&clustered.atoms()[a], &atom)
                    .partial_cmp(&sq_dist(&clustered.atoms()[b], &atom))
                    .unwrap()
            })
            .unwrap();
        masses[nearest] += prob;
        for (s, v) in sums[nearest].iter_mut().zip(&atom) {
            *s += prob * v;
        }
        // odometer over the product support
        for c in 0..counters.len() {
            counters[c] += 1;
            if counters[c] < stage[c].atoms().len() {
                break;
            }
            counters[c] = 0;
        }
    }
    let mut atoms = Vec::with_capacity(k);
    let mut probabilities = Vec::with_capacity(k);
    for c in 0..k {
        if masses[c] > 0.0 {
            atoms.push(sums[c].iter().map(|s| s / masses[c]).collect());
            probabilities.push(masses[c]);
        }
    }
    // guard against accumulated rounding in the mass sum
    let total: f64 = probabilities.iter().sum();
    for p in &mut probabilities {
        *p /= total;
    }
    FiniteDistribution::new(atoms, probabilities)
}
