//! Latent-act analysis: k-means++ / Lloyd clustering, a deterministic 2-D
//! PCA projection, and purity / normalized mutual information against
//! oracle act labels.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::{policy_mean, EncodedDialogue};
use crate::model::HdnoModel;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after seeding and after each Lloyd step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means with k-means++ seeding, iterated until the assignment stops
/// changing or `max_iter` Lloyd steps have run.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if k > data.len() {
        return invalid(format!("k = {k} exceeds the {} points", data.len()));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return invalid("points have different dimensions");
    }
    let mut rng = rng::stream(seed, "kmeans");
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = data.iter().map(|x| nearest(x, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total == 0.0 {
            rng.random_range(0..data.len())
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = data.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(data[next].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = data
            .iter()
            .map(|x| {
                let (i, d) = nearest(x, centroids);
                total += d;
                i
            })
            .collect();
        (a, total)
    };
    let (mut assignments, w) = assign(&centroids);
    let mut inertia = vec![w];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, w) = assign(&centroids);
        inertia.push(w);
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    Ok(KMeans { assignments, centroids, inertia })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Principal axes (rows) in the original space.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// Projection of centered data onto its top two principal components. Each
/// component's sign makes its largest-magnitude loading positive. Data with
/// zero variance projects to the origin.
pub fn pca_2d(data: &[Vec<f64>]) -> Result<Projection> {
    if data.len() < 2 {
        return invalid("PCA needs at least two points");
    }
    let dim = data[0].len();
    if dim == 0 || data.iter().any(|x| x.len() != dim) {
        return invalid("points must share a positive dimension");
    }
    let n = data.len();
    let mean: Vec<f64> = (0..dim).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, dim, |i, j| data[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&col) if eig.eigenvalues[col] > 1e-12 => {
                let v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
                let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    v.iter().map(|x| -x).collect()
                } else {
                    v
                }
            }
            _ => vec![0.0; dim],
        }
    };
    let components = [axis(0), axis(1)];
    if components[0].iter().all(|&x| x == 0.0) {
        log::warn!("PCA input has zero variance; all coordinates are zero");
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Projection { coords, components, mean })
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), f64>, BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ma.entry(x).or_insert(0.0) += 1.0;
        *mb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ma, mb)
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts.values().map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("NMI needs two non-empty labelings of equal length");
    }
    let n = a.len() as f64;
    let (joint, ma, mb) = contingency(a, b);
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| (c / n) * ((c * n) / (ma[&x] * mb[&y])).ln())
        .sum();
    let (ha, hb) = (entropy(&ma, n), entropy(&mb, n));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Fraction of points whose cluster's majority label equals their label.
pub fn purity(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    if clusters.len() != labels.len() || clusters.is_empty() {
        return invalid("purity needs two non-empty labelings of equal length");
    }
    let (joint, _, _) = contingency(clusters, labels);
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(c, _), &n) in &joint {
        let e = best.entry(c).or_insert(0.0);
        *e = e.max(n);
    }
    Ok(best.values().sum::<f64>() / clusters.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub turn_id: usize,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
    pub act_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub k: usize,
    pub points: Vec<LatentPoint>,
    pub latents: Vec<Vec<f64>>,
    /// Up to three sampled (user, oracle system) utterances per cluster.
    pub samples: Vec<Vec<(String, String)>>,
    pub purity: f64,
    pub nmi: f64,
}

/// Collects μ(c) for every turn, clusters with k-means, projects with PCA
/// and scores the clusters against the oracle act labels.
pub fn latent_report(model: &HdnoModel, dialogues: &[EncodedDialogue], k: usize, seed: u64) -> Result<LatentReport> {
    let mut latents = Vec::new();
    let mut acts = Vec::new();
    let mut texts = Vec::new();
    for d in dialogues {
        for (i, c) in d.contexts.iter().enumerate() {
            latents.push(policy_mean(model, c)?);
            acts.push(d.acts[i].clone());
            texts.push((d.users[i].join(" "), d.references[i].join(" ")));
        }
    }
    if latents.len() < k {
        return invalid(format!("{} turns is fewer than k = {k}", latents.len()));
    }
    let km = kmeans(&latents, k, seed, 100)?;
    let proj = pca_2d(&latents)?;
    let mut label_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &acts {
        let next = label_ids.len();
        label_ids.entry(a.as_str()).or_insert(next);
    }
    let labels: Vec<usize> = acts.iter().map(|a| label_ids[a.as_str()]).collect();
    let mut rng = rng::stream(seed, "latent-samples");
    let samples = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..latents.len()).filter(|&i| km.assignments[i] == c).collect();
            members.choose_multiple(&mut rng, 3).map(|&i| texts[i].clone()).collect()
        })
        .collect();
    let points = (0..latents.len())
        .map(|i| LatentPoint {
            turn_id: i,
            cluster: km.assignments[i],
            x: proj.coords[i][0],
            y: proj.coords[i][1],
            act_label: acts[i].clone(),
        })
        .collect();
    Ok(LatentReport {
        k,
        purity: purity(&km.assignments, &labels)?,
        nmi: nmi(&km.assignments, &labels)?,
        points,
        latents,
        samples,
    })
}

/// NMI of `labels` against `clusters` after each of `trials` random
/// permutations of the labels.
pub fn permutation_nmi(clusters: &[usize], labels: &[usize], trials: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut rng = rng::stream(seed, "permutation");
    let mut shuffled = labels.to_vec();
    (0..trials)
        .map(|_| {
            shuffled.shuffle(&mut rng);
            nmi(clusters, &shuffled)
        })
        .collect()
}
