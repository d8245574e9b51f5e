//! Posterior summaries of allocation draws: adjusted Rand index, posterior
//! similarity matrix and PEAR-optimal consensus clustering.
//!
//! Partitions are slices of labels; any label values are accepted and
//! [`canonical_labels`] maps them to `0..G` in order of first occurrence.

use std::collections::{HashMap, HashSet};

use kodama::{linkage, Method};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relabels a partition to `0..G` in order of first occurrence.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: HashMap<usize, usize> = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub fn n_clusters(labels: &[usize]) -> usize {
    labels.iter().collect::<HashSet<_>>().len()
}

/// Contingency table with rows indexed by the canonical labels of `a` and
/// columns by those of `b`.
pub fn contingency(a: &[usize], b: &[usize]) -> Result<Vec<Vec<usize>>> {
    check_lengths(a, b)?;
    let (ca, cb) = (canonical_labels(a), canonical_labels(b));
    let ga = ca.iter().max().map_or(0, |m| m + 1);
    let gb = cb.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0; gb]; ga];
    for (&p, &q) in ca.iter().zip(&cb) {
        table[p][q] += 1;
    }
    Ok(table)
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "partitions have different lengths ({} and {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    0.5 * n * (n - 1.0)
}

/// Adjusted Rand index between two partitions of the same items.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    if a.len() < 2 {
        return Err(Error::domain("the adjusted Rand index needs at least two items"));
    }
    let table = contingency(a, b)?;
    let index: f64 = table.iter().flatten().map(|&n| pairs(n)).sum();
    let row: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let col: f64 = (0..table[0].len())
        .map(|q| pairs(table.iter().map(|r| r[q]).sum()))
        .sum();
    Ok(adjusted(index, row, col, pairs(a.len())))
}

fn adjusted(index: f64, row: f64, col: f64, total: f64) -> f64 {
    let expected = row * col / total;
    let max = 0.5 * (row + col);
    if max == expected {
        // only reachable when both partitions are all-in-one or all-singletons alike
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Posterior similarity matrix: entry `(i, j)` is the fraction of draws that
/// put items `i` and `j` in the same cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Psm {
    n: usize,
    values: Vec<f64>,
}

impl Psm {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

pub fn psm_from_draws(draws: &[Vec<usize>]) -> Result<Psm> {
    let n = check_draws(draws)?;
    let mut counts = vec![0u32; n * n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for draw in draws {
        let labels = canonical_labels(draw);
        let g = labels.iter().max().map_or(0, |m| m + 1);
        members.iter_mut().for_each(Vec::clear);
        members.resize_with(g.max(members.len()), Vec::new);
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        for group in &members[..g] {
            for &i in group {
                for &j in group {
                    counts[i * n + j] += 1;
                }
            }
        }
    }
    let d = draws.len() as f64;
    Ok(Psm {
        n,
        values: counts.into_iter().map(|c| c as f64 / d).collect(),
    })
}

fn check_draws(draws: &[Vec<usize>]) -> Result<usize> {
    let first = draws
        .first()
        .ok_or_else(|| Error::domain("at least one allocation draw is required"))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::domain("allocation draws are empty"));
    }
    if let Some(d) = draws.iter().find(|d| d.len() != n) {
        return Err(Error::domain(format!(
            "allocation draws have inconsistent lengths ({n} and {})",
            d.len()
        )));
    }
    Ok(n)
}

/// Candidate partitions from average-linkage clustering of `1 - PSM`, one per
/// number of clusters from `n` down to 1.
pub fn hierarchical_candidates(psm: &Psm) -> Vec<Vec<usize>> {
    let n = psm.len();
    if n == 1 {
        return vec![vec![0]];
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push(1.0 - psm.get(i, j));
        }
    }
    let dendrogram = linkage(&mut condensed, n, Method::Average);
    // union-find over observations; cluster ids >= n refer to earlier steps
    let mut parent: Vec<usize> = (0..n).collect();
    let mut representative: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut out = Vec::with_capacity(n);
    out.push((0..n).collect());
    for step in dendrogram.steps() {
        let a = find(&mut parent, representative[step.cluster1]);
        let b = find(&mut parent, representative[step.cluster2]);
        let (lo, hi) = (a.min(b), a.max(b));
        parent[hi] = lo;
        representative.push(lo);
        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        out.push(canonical_labels(&roots));
    }
    out
}

/// Precomputed per-partition quantities for repeated ARI evaluation.
struct Prepared {
    labels: Vec<usize>,
    n_clusters: usize,
    pair_sum: f64,
}

impl Prepared {
    fn new(labels: &[usize]) -> Self {
        let labels = canonical_labels(labels);
        let g = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; g];
        for &l in &labels {
            sizes[l] += 1;
        }
        Self {
            pair_sum: sizes.iter().map(|&s| pairs(s)).sum(),
            labels,
            n_clusters: g,
        }
    }
}

fn prepared_ari(a: &Prepared, b: &Prepared, table: &mut Vec<u32>) -> f64 {
    table.clear();
    table.resize(a.n_clusters * b.n_clusters, 0);
    for (&p, &q) in a.labels.iter().zip(&b.labels) {
        table[p * b.n_clusters + q] += 1;
    }
    let index: f64 = table.iter().map(|&c| pairs(c as usize)).sum();
    adjusted(index, a.pair_sum, b.pair_sum, pairs(a.labels.len()))
}

/// Mean ARI between `candidate` and every draw.
pub fn pear(candidate: &[usize], draws: &[Vec<usize>]) -> Result<f64> {
    let n = check_draws(draws)?;
    check_lengths(candidate, &draws[0])?;
    if n < 2 {
        return Err(Error::domain("PEAR needs at least two items"));
    }
    let c = Prepared::new(candidate);
    let mut table = Vec::new();
    let total: f64 = draws
        .iter()
        .map(|d| prepared_ari(&c, &Prepared::new(d), &mut table))
        .sum();
    Ok(total / draws.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PearResult {
    /// Canonical labels of the optimal partition.
    pub labels: Vec<usize>,
    pub pear: f64,
    pub n_candidates: usize,
}

/// Picks the candidate with the largest posterior expected ARI.
///
/// Candidates are every distinct draw plus every cut of the average-linkage
/// tree on `1 - PSM`. Ties go to fewer clusters, then to the
/// lexicographically smallest canonical labelling.
pub fn maximize_pear(draws: &[Vec<usize>]) -> Result<PearResult> {
    let n = check_draws(draws)?;
    if n == 1 {
        return Ok(PearResult {
            labels: vec![0],
            pear: 1.0,
            n_candidates: 1,
        });
    }
    let prepared: Vec<Prepared> = draws.iter().map(|d| Prepared::new(d)).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut candidates: Vec<Prepared> = Vec::new();
    for p in &prepared {
        if seen.insert(p.labels.clone()) {
            candidates.push(Prepared::new(&p.labels));
        }
    }
    let psm = psm_from_draws(draws)?;
    for labels in hierarchical_candidates(&psm) {
        if seen.insert(labels.clone()) {
            candidates.push(Prepared::new(&labels));
        }
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map_init(Vec::new, |table, c| {
            prepared.iter().map(|d| prepared_ari(c, d, table)).sum::<f64>() / draws.len() as f64
        })
        .collect();
    let best = (0..candidates.len())
        .reduce(|best, i| if better(&candidates[i], scores[i], &candidates[best], scores[best]) { i } else { best })
        .expect("at least one candidate");
    Ok(PearResult {
        labels: candidates[best].labels.clone(),
        pear: scores[best],
        n_candidates: candidates.len(),
    })
}

const TIE_TOLERANCE: f64 = 1e-12;

fn better(a: &Prepared, score_a: f64, b: &Prepared, score_b: f64) -> bool {
    if (score_a - score_b).abs() > TIE_TOLERANCE {
        return score_a > score_b;
    }
    (a.n_clusters, &a.labels) < (b.n_clusters, &b.labels)
}

/// Evenly spaced subsample of at most `cap` draws (all draws if fewer).
pub fn thin_draws(draws: &[Vec<usize>], cap: usize) -> Vec<Vec<usize>> {
    if draws.len() <= cap || cap == 0 {
        return draws.to_vec();
    }
    (0..cap)
        .map(|i| draws[i * draws.len() / cap].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Rand-index oracle by brute-force pair enumeration.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                total += 1.0;
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    only_a += 1.0;
                }
                if sb {
                    only_b += 1.0;
                }
            }
        }
        let expected = only_a * only_b / total;
        let max = 0.5 * (only_a + only_b);
        if max == expected {
            return 1.0;
        }
        (both - expected) / (max - expected)
    }

    #[test]
    fn ari_examples() {
        assert_abs_diff_eq!(ari(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), -0.5, epsilon = 1e-12);
        assert_eq!(ari(&[0, 0, 1, 2], &[5, 5, 9, 7]).unwrap(), 1.0);
        assert!(ari(&[0, 1], &[0]).is_err());
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn canonical_labels_follow_first_occurrence() {
        assert_eq!(canonical_labels(&[7, 3, 7, 1, 3]), vec![0, 1, 0, 2, 1]);
        assert_eq!(n_clusters(&[7, 3, 7, 1, 3]), 3);
    }

    #[test]
    fn contingency_counts() {
        let t = contingency(&[0, 0, 1, 1, 1], &[2, 3, 3, 3, 2]).unwrap();
        assert_eq!(t, vec![vec![1, 1], vec![1, 2]]);
    }

    #[test]
    fn psm_examples() {
        let one = psm_from_draws(&[vec![0, 0, 1]]).unwrap();
        assert_eq!(one.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(one.row(2), &[0.0, 0.0, 1.0]);
        let two = psm_from_draws(&[vec![0, 0, 1], vec![0, 1, 1]]).unwrap();
        assert_eq!(two.get(0, 1), 0.5);
        assert_eq!(two.get(1, 2), 0.5);
        assert!(psm_from_draws(&[]).is_err());
        assert!(psm_from_draws(&[vec![0, 1], vec![0]]).is_err());
    }

    #[test]
    fn pear_of_identical_draws_is_that_partition() {
        let draw = vec![3, 3, 1, 1, 2];
        let result = maximize_pear(&vec![draw.clone(); 5]).unwrap();
        assert_eq!(result.labels, canonical_labels(&draw));
        assert_eq!(result.pear, 1.0);
    }

    #[test]
    fn pear_breaks_ties_towards_fewer_clusters() {
        // two draws each disagreeing with the other; both score equally,
        // so the one with fewer clusters wins
        let draws = vec![vec![0, 0, 0, 0], vec![0, 1, 2, 3]];
        let result = maximize_pear(&draws).unwrap();
        assert_eq!(result.labels, vec![0, 0, 0, 0]);
    }

    #[test]
    fn hierarchical_cuts_cover_every_cluster_count() {
        let draws = vec![vec![0, 0, 1, 1, 2], vec![0, 0, 1, 2, 2], vec![0, 1, 1, 2, 2]];
        let psm = psm_from_draws(&draws).unwrap();
        let cuts = hierarchical_candidates(&psm);
        let counts: Vec<usize> = cuts.iter().map(|c| n_clusters(c)).collect();
        assert_eq!(counts, vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn thinning_is_even() {
        let draws: Vec<Vec<usize>> = (0..10).map(|i| vec![i]).collect();
        let t = thin_draws(&draws, 5);
        assert_eq!(t, vec![vec![0], vec![2], vec![4], vec![6], vec![8]]);
        assert_eq!(thin_draws(&draws, 20).len(), 10);
    }

    fn arb_partition(n: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..4, n)
    }

    proptest! {
        #[test]
        fn ari_agrees_with_pair_counting(a in arb_partition(12), b in arb_partition(12)) {
            let fast = ari(&a, &b).unwrap();
            prop_assert!((fast - ari_by_pairs(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn ari_is_symmetric(a in arb_partition(15), b in arb_partition(15)) {
            prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ari_is_label_invariant(
            a in arb_partition(15), b in arb_partition(15), shift in 1usize..50,
        ) {
            let relabelled: Vec<usize> = a.iter().map(|l| (3 - l) * 7 + shift).collect();
            prop_assert!((ari(&a, &b).unwrap() - ari(&relabelled, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ari_bounded_and_one_only_for_identical(a in arb_partition(10), b in arb_partition(10)) {
            let v = ari(&a, &b).unwrap();
            prop_assert!(v <= 1.0 + 1e-12);
            let same = canonical_labels(&a) == canonical_labels(&b);
            prop_assert_eq!((v - 1.0).abs() < 1e-12, same);
        }

        #[test]
        fn psm_symmetric_with_unit_diagonal(draws in proptest::collection::vec(arb_partition(8), 1..6)) {
            let psm = psm_from_draws(&draws).unwrap();
            for i in 0..8 {
                prop_assert_eq!(psm.get(i, i), 1.0);
                for j in 0..8 {
                    prop_assert_eq!(psm.get(i, j), psm.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&psm.get(i, j)));
                }
            }
        }

        #[test]
        fn pear_optimum_dominates_every_draw(draws in proptest::collection::vec(arb_partition(9), 1..8)) {
            let best = maximize_pear(&draws).unwrap();
            for d in &draws {
                prop_assert!(best.pear >= pear(d, &draws).unwrap() - 1e-12);
            }
            assert_abs_diff_eq!(best.pear, pear(&best.labels, &draws).unwrap(), epsilon = 1e-12);
        }
    }
}
