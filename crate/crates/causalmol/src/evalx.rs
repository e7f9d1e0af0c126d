//! Evaluation metrics: ROC-AUC, explanation selection and quality,
//! fidelity under embedding masking, JSD-based consistency, property
//! similarity agreement, and a plug-in conditional mutual information
//! diagnostic over clustered embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParameterStore, Tape};
use crate::intervene::ConfounderPool;
use crate::meta::Episode;
use crate::model::{
    episode_forward, AtomMasks, ForwardMode, LossSubset, ModelConfig, ModelError, MolTable,
};
use crate::util::derive_rng;
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("roc_auc needs both classes present")]
    SingleClass,
    #[error("distributions invalid: {0}")]
    BadDistribution(String),
    #[error("explanation ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("empty molecule")]
    EmptyMolecule,
    #[error("conditional mi needs at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mann-Whitney ROC-AUC: probability a random positive outranks a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).expect("finite scores"));
    // midranks for ties
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 =
        ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub molecule_id: usize,
    pub selected_atoms: Vec<usize>,
    pub scores: Vec<f64>,
    pub ratio: f64,
}

/// Top `ceil(ratio * n)` atoms by score, ties broken toward lower indices.
pub fn select_explanation(
    molecule_id: usize,
    scores: &[f64],
    ratio: f64,
) -> Result<Explanation, EvalError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EvalError::BadRatio(ratio));
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyMolecule);
    }
    let keep = ((ratio * scores.len() as f64).ceil() as usize).max(1).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| {
        scores[*b].partial_cmp(&scores[*a]).expect("finite scores").then(a.cmp(b))
    });
    let mut selected: Vec<usize> = order[..keep].to_vec();
    selected.sort_unstable();
    Ok(Explanation { molecule_id, selected_atoms: selected, scores: scores.to_vec(), ratio })
}

/// Prediction probability of the true class for one molecule under hard
/// evaluation, optionally with some atoms' embeddings zeroed.
#[allow(clippy::too_many_arguments)]
fn true_class_prob(
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    episode: &Episode,
    molecule_id: usize,
    label: bool,
    masked_atoms: Option<&[usize]>,
) -> Result<f64, EvalError> {
    let masks: Option<AtomMasks> = masked_atoms.map(|atoms| {
        let n = table.mols[molecule_id].graph.num_atoms();
        let mut keep = vec![1.0; n];
        for &a in atoms {
            keep[a] = 0.0;
        }
        HashMap::from([(molecule_id, keep)])
    });
    let mut tape = Tape::new();
    let out = episode_forward(
        &mut tape,
        store,
        table,
        cfg,
        episode,
        &[],
        &LossSubset::Explicit(vec![(molecule_id, label)]),
        &ConfounderPool::empty(episode.task_id),
        ForwardMode::HardEval,
        masks.as_ref(),
    )?;
    let p_active = out.predictions[0];
    Ok(if label { p_active } else { 1.0 - p_active })
}

/// Fidelity of an explanation: drop when the explanation atoms are erased
/// (plus) and when only the explanation atoms are kept (minus). Masking acts
/// on node embeddings, not the graph.
pub fn fidelity(
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    episode: &Episode,
    label: bool,
    explanation: &Explanation,
) -> Result<(f64, f64), EvalError> {
    let m = explanation.molecule_id;
    let n = table.mols[m].graph.num_atoms();
    let full = true_class_prob(store, table, cfg, episode, m, label, None)?;
    let without: Vec<usize> = explanation.selected_atoms.clone();
    let complement: Vec<usize> =
        (0..n).filter(|a| !explanation.selected_atoms.contains(a)).collect();
    let f_without = true_class_prob(store, table, cfg, episode, m, label, Some(&without))?;
    let f_only = true_class_prob(store, table, cfg, episode, m, label, Some(&complement))?;
    Ok((full - f_without, full - f_only))
}

/// Jensen-Shannon divergence, base-2 logs, range [0, 1].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::BadDistribution(format!("lengths {} vs {}", p.len(), q.len())));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        if dist.iter().any(|v| *v < 0.0) {
            return Err(EvalError::BadDistribution(format!("{name} has negative mass")));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::BadDistribution(format!("{name} sums to {sum}")));
        }
    }
    let kl_half = |a: &[f64]| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .map(|(ai, (pi, qi))| {
                if *ai == 0.0 {
                    0.0
                } else {
                    ai * (ai / (0.5 * (pi + qi))).log2()
                }
            })
            .sum()
    };
    Ok(0.5 * kl_half(p) + 0.5 * kl_half(q))
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Mean pairwise JSD of softmax-normalized embeddings within each property.
/// Properties with fewer than two embeddings are skipped (reported as None).
pub fn consistency_jsd(
    groups: &BTreeMap<usize, Vec<Vec<f64>>>,
) -> BTreeMap<usize, Option<f64>> {
    groups
        .iter()
        .map(|(prop, embeddings)| {
            if embeddings.len() < 2 {
                return (*prop, None);
            }
            let dists: Vec<Vec<f64>> = embeddings.iter().map(|e| softmax(e)).collect();
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..dists.len() {
                for j in i + 1..dists.len() {
                    total += jsd(&dists[i], &dists[j]).expect("softmax outputs are distributions");
                    count += 1;
                }
            }
            (*prop, Some(total / count as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    pub properties: Vec<usize>,
    pub jaccard: Vec<Vec<f64>>,
    pub inverse_jsd: Vec<Vec<f64>>,
    pub pearson: f64,
    pub spearman: f64,
}

/// Jaccard similarity over per-property fragment-key sets of active
/// molecules versus inverse JSD of mean-softmax causal embeddings, with
/// Pearson/Spearman agreement over the off-diagonal entries.
pub fn property_similarity(
    fragment_sets: &BTreeMap<usize, BTreeSet<String>>,
    causal_embeddings: &BTreeMap<usize, Vec<Vec<f64>>>,
) -> SimilarityReport {
    let properties: Vec<usize> = fragment_sets.keys().copied().collect();
    let n = properties.len();
    let mut jaccard = vec![vec![0.0; n]; n];
    for (i, a) in properties.iter().enumerate() {
        for (j, b) in properties.iter().enumerate() {
            let (sa, sb) = (&fragment_sets[a], &fragment_sets[b]);
            let union = sa.union(sb).count();
            jaccard[i][j] = if union == 0 {
                // empty fragment sets cannot be compared; the row stays zero
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                sa.intersection(sb).count() as f64 / union as f64
            };
        }
    }
    let mean_dist: Vec<Vec<f64>> = properties
        .iter()
        .map(|p| {
            let embs = &causal_embeddings[p];
            let dists: Vec<Vec<f64>> = embs.iter().map(|e| softmax(e)).collect();
            let dim = dists[0].len();
            let mut mean = vec![0.0; dim];
            for d in &dists {
                for (m, v) in mean.iter_mut().zip(d) {
                    *m += v / dists.len() as f64;
                }
            }
            mean
        })
        .collect();
    let mut inverse_jsd = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            inverse_jsd[i][j] = 1.0 - jsd(&mean_dist[i], &mean_dist[j]).expect("distributions");
        }
    }
    let off = |m: &Vec<Vec<f64>>| -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    v.push(m[i][j]);
                }
            }
        }
        v
    };
    let (a, b) = (off(&jaccard), off(&inverse_jsd));
    SimilarityReport {
        properties,
        jaccard,
        inverse_jsd,
        pearson: pearson(&a, &b),
        spearman: spearman(&a, &b),
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|x, y| v[*x].partial_cmp(&v[*y]).expect("finite"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = mid;
            }
            i = j + 1;
        }
        ranks
    };
    pearson(&rank(a), &rank(b))
}

/// Atom-level precision/recall/F1 of an explanation against planted truth.
pub fn explanation_quality(selected: &[usize], truth: &[usize]) -> (f64, f64, f64) {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let tru: BTreeSet<usize> = truth.iter().copied().collect();
    let hit = sel.intersection(&tru).count() as f64;
    let precision = if sel.is_empty() { 0.0 } else { hit / sel.len() as f64 };
    let recall = if tru.is_empty() { 0.0 } else { hit / tru.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Lloyd k-means with deterministic seeding; 20 iterations. Returns
/// (assignments, clusters actually used).
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, usize) {
    let n = points.len();
    let k = k.min(n).max(1);
    let mut rng = derive_rng(&[seed, 0x6B6D]);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut centers: Vec<Vec<f64>> = indices[..k].iter().map(|i| points[*i].clone()).collect();
    let dim = points[0].len();
    let mut assign = vec![0usize; n];
    for _ in 0..20 {
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d: f64 = p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(&points[i]) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
        }
    }
    // compact empty clusters so downstream counts stay dense
    let mut used: Vec<usize> = assign.clone();
    used.sort_unstable();
    used.dedup();
    let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    for a in &mut assign {
        *a = remap[a];
    }
    (assign, used.len())
}

#[derive(Debug, Clone, Serialize)]
pub struct CmiReport {
    /// Plug-in estimate of I(S;Y|C) in nats.
    pub conditional_mi: f64,
    /// Chain-rule route: I(S; Y,C) - I(S; C) on the same counts.
    pub chain_rule_value: f64,
    pub clusters_c: usize,
    pub clusters_s: usize,
    pub samples: usize,
}

/// Discretize causal and confound embeddings separately with k-means, then
/// estimate I(S;Y|C) by plug-in frequencies. Reports the chain-rule identity
/// value computed from the same empirical counts.
pub fn conditional_mi(
    c_embeddings: &[Vec<f64>],
    s_embeddings: &[Vec<f64>],
    labels: &[bool],
    k_clusters: usize,
    seed: u64,
) -> Result<CmiReport, EvalError> {
    let n = labels.len();
    if n < 10 * k_clusters {
        return Err(EvalError::TooFewSamples { need: 10 * k_clusters, got: n });
    }
    let (c_assign, kc) = kmeans(c_embeddings, k_clusters, derive_rng(&[seed, 1]).next_u64());
    let (s_assign, ks) = kmeans(s_embeddings, k_clusters, derive_rng(&[seed, 2]).next_u64());

    // joint counts over (c, s, y)
    let mut joint = vec![vec![[0.0f64; 2]; ks]; kc];
    for i in 0..n {
        joint[c_assign[i]][s_assign[i]][labels[i] as usize] += 1.0;
    }
    let total = n as f64;

    // direct: sum_c p(c) sum_{s,y} p(s,y|c) log [ p(s,y|c) / (p(s|c) p(y|c)) ]
    let mut direct = 0.0;
    for c in 0..kc {
        let n_c: f64 = joint[c].iter().map(|sy| sy[0] + sy[1]).sum();
        if n_c == 0.0 {
            continue;
        }
        let p_c = n_c / total;
        let mut mi_given_c = 0.0;
        for s in 0..ks {
            let n_sc: f64 = joint[c][s][0] + joint[c][s][1];
            for y in 0..2 {
                let n_syc = joint[c][s][y];
                if n_syc == 0.0 {
                    continue;
                }
                let n_yc: f64 = (0..ks).map(|s2| joint[c][s2][y]).sum();
                let p_sy_c = n_syc / n_c;
                let p_s_c = n_sc / n_c;
                let p_y_c = n_yc / n_c;
                mi_given_c += p_sy_c * (p_sy_c / (p_s_c * p_y_c)).ln();
            }
        }
        direct += p_c * mi_given_c;
    }

    // chain rule: I(S; Y,C) - I(S; C) over the same counts
    let mut i_s_yc = 0.0;
    let mut i_s_c = 0.0;
    let n_s: Vec<f64> = (0..ks)
        .map(|s| (0..kc).map(|c| joint[c][s][0] + joint[c][s][1]).sum())
        .collect();
    for s in 0..ks {
        let p_s = n_s[s] / total;
        if p_s == 0.0 {
            continue;
        }
        for c in 0..kc {
            let n_c: f64 = joint[c].iter().map(|sy| sy[0] + sy[1]).sum();
            let n_sc = joint[c][s][0] + joint[c][s][1];
            if n_sc > 0.0 {
                let p_sc = n_sc / total;
                i_s_c += p_sc * (p_sc / (p_s * (n_c / total))).ln();
            }
            for y in 0..2 {
                let n_yc: f64 = (0..ks).map(|s2| joint[c][s2][y]).sum();
                let n_syc = joint[c][s][y];
                if n_syc > 0.0 {
                    let p_syc = n_syc / total;
                    i_s_yc += p_syc * (p_syc / (p_s * (n_yc / total))).ln();
                }
            }
        }
    }

    Ok(CmiReport {
        conditional_mi: direct,
        chain_rule_value: i_s_yc - i_s_c,
        clusters_c: kc,
        clusters_s: ks,
        samples: n,
    })
}

use rand::RngCore;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_and_reversed() {
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auc_hand_case_three_quarters() {
        let auc = roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_ties_count_half() {
        let auc = roc_auc(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(roc_auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.13, 0.7, 0.42, 0.9, 0.05, 0.66];
        let labels = [false, true, false, true, false, true];
        let base = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (5.0 * s).tanh()).collect();
        assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| 100.0 * s + 3.0).collect();
        assert!((roc_auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn selection_counts_and_ties() {
        let e = select_explanation(0, &[0.1, 0.9, 0.5, 0.3], 0.5).unwrap();
        assert_eq!(e.selected_atoms, vec![1, 2]);
        let e = select_explanation(0, &[0.5; 4], 0.5).unwrap();
        assert_eq!(e.selected_atoms, vec![0, 1]); // ties favor low indices
        let e = select_explanation(0, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.5).unwrap();
        assert_eq!(e.selected_atoms.len(), 3); // ceil(2.5)
        assert!(select_explanation(0, &[], 0.5).is_err());
        assert!(select_explanation(0, &[0.5], 1.5).is_err());
    }

    #[test]
    fn jsd_basics() {
        let p = [0.25, 0.75];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let disjoint = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - 1.0).abs() < 1e-12);
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.311278).abs() < 1e-5);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn jsd_symmetric_and_bounded() {
        let p = [0.2, 0.3, 0.5];
        let q = [0.6, 0.1, 0.3];
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn consistency_identical_embeddings_zero() {
        let mut groups = BTreeMap::new();
        groups.insert(0, vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        groups.insert(1, vec![vec![9.0, -9.0]]); // singleton skipped
        let out = consistency_jsd(&groups);
        assert_eq!(out[&0], Some(0.0));
        assert_eq!(out[&1], None);
    }

    #[test]
    fn consistency_orthogonal_near_max() {
        let mut groups = BTreeMap::new();
        groups.insert(0, vec![vec![30.0, 0.0], vec![0.0, 30.0]]);
        let out = consistency_jsd(&groups);
        assert!(out[&0].unwrap() > 0.99);
    }

    #[test]
    fn jaccard_hand_matrix() {
        let mut sets = BTreeMap::new();
        sets.insert(0, BTreeSet::from(["x".to_string(), "y".to_string()]));
        sets.insert(1, BTreeSet::from(["y".to_string(), "z".to_string()]));
        sets.insert(2, BTreeSet::from(["w".to_string()]));
        let mut embs = BTreeMap::new();
        for p in 0..3 {
            embs.insert(p, vec![vec![p as f64, 1.0], vec![p as f64, 1.1]]);
        }
        let report = property_similarity(&sets, &embs);
        let third = 1.0 / 3.0;
        assert_eq!(report.jaccard[0][0], 1.0);
        assert!((report.jaccard[0][1] - third).abs() < 1e-12);
        assert_eq!(report.jaccard[0][2], 0.0);
        assert_eq!(report.jaccard[2][2], 1.0);
    }

    #[test]
    fn correlation_of_identical_matrices_is_one() {
        let a = [0.3, 0.1, 0.9, 0.4];
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn explanation_quality_cases() {
        assert_eq!(explanation_quality(&[1, 2], &[1, 2]), (1.0, 1.0, 1.0));
        assert_eq!(explanation_quality(&[1, 2], &[3, 4]), (0.0, 0.0, 0.0));
        let (p, r, f1) = explanation_quality(&[1, 2, 3], &[2, 3, 4]);
        let two_thirds = 2.0 / 3.0;
        assert!((p - two_thirds).abs() < 1e-12);
        assert!((r - two_thirds).abs() < 1e-12);
        assert!((f1 - two_thirds).abs() < 1e-12);
    }

    #[test]
    fn cmi_independent_construction_is_small() {
        // Y depends on C cluster only; S is independent noise
        let mut rng = derive_rng(&[101]);
        let n = 400;
        let mut c = Vec::new();
        let mut s = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let group = i % 2;
            c.push(vec![group as f64 * 10.0 + crate::util::randn(&mut rng) * 0.1]);
            s.push(vec![crate::util::randn(&mut rng)]);
            y.push(group == 1);
        }
        let report = conditional_mi(&c, &s, &y, 8, 5).unwrap();
        assert!(report.conditional_mi < 0.05, "{}", report.conditional_mi);
        assert!((report.conditional_mi - report.chain_rule_value).abs() < 1e-9);
    }

    #[test]
    fn cmi_deterministic_label_recovers_entropy() {
        // C constant, Y a deterministic function of the S cluster:
        // I(S;Y|C) = H(Y) = ln 2 for balanced labels
        let mut rng = derive_rng(&[102]);
        let n = 400;
        let mut c = Vec::new();
        let mut s = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let group = i % 2;
            c.push(vec![crate::util::randn(&mut rng) * 0.01]);
            s.push(vec![group as f64 * 20.0 + crate::util::randn(&mut rng) * 0.1]);
            y.push(group == 1);
        }
        let report = conditional_mi(&c, &s, &y, 8, 5).unwrap();
        assert!((report.conditional_mi - std::f64::consts::LN_2).abs() < 0.05);
        assert!((report.conditional_mi - report.chain_rule_value).abs() < 1e-9);
    }

    #[test]
    fn cmi_nonnegative_and_needs_samples() {
        let five = vec![vec![0.0]; 5];
        assert!(matches!(
            conditional_mi(&five, &five, &[true; 5], 8, 1),
            Err(EvalError::TooFewSamples { .. })
        ));
        let mut rng = derive_rng(&[103]);
        let n = 200;
        let c: Vec<Vec<f64>> = (0..n).map(|_| vec![crate::util::randn(&mut rng)]).collect();
        let s: Vec<Vec<f64>> = (0..n).map(|_| vec![crate::util::randn(&mut rng)]).collect();
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let report = conditional_mi(&c, &s, &y, 2, 9).unwrap();
        assert!(report.conditional_mi >= 0.0);
    }
}
