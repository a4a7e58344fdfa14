//! Similarity distributions over the memory bank, anchor neighbourhoods and
//! the consistency entropy used to rank them.

use crate::memory_bank::FeatureBank;
use crate::numerics::stable_softmax;
use crate::{Error, Result};

/// Softmax distribution of one query over all memory rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow {
    pub anchor: usize,
    pub probs: Vec<f64>,
}

/// An anchor plus its `k` most similar samples. `members[0]` is the anchor,
/// the rest follow in decreasing similarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbourhood {
    pub anchor: usize,
    pub members: Vec<usize>,
}

impl Neighbourhood {
    pub fn singleton(anchor: usize) -> Self {
        Neighbourhood {
            anchor,
            members: vec![anchor],
        }
    }

    pub fn k(&self) -> usize {
        self.members.len() - 1
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("tau must be > 0, got {tau}")))
    }
}

/// `p_j = softmax_j(⟨query, row_j⟩ / τ)` over every bank row, the anchor's
/// own row included.
pub fn prob_row(anchor: usize, query: &[f64], bank: &FeatureBank, tau: f64) -> Result<ProbRow> {
    check_tau(tau)?;
    let logits: Vec<f64> = bank
        .all_similarities(query)?
        .into_iter()
        .map(|s| s / tau)
        .collect();
    Ok(ProbRow {
        anchor,
        probs: stable_softmax(&logits)?,
    })
}

/// Indices of the `k` largest scores, skipping `exclude`. Ties go to the
/// lower index. Output is ordered best first.
pub fn top_k(scores: &[f64], exclude: Option<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| Some(j) != exclude).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_score);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_score);
    idx
}

/// Neighbourhood of every bank row against the rest of the bank.
pub fn build_neighbourhoods(bank: &FeatureBank, k: usize) -> Result<Vec<Neighbourhood>> {
    let n = bank.n();
    if k == 0 || k > n - 1 {
        return Err(Error::config(format!("k must be in 1..={}, got {k}", n - 1)));
    }
    (0..n)
        .map(|i| {
            let sims = bank.all_similarities(bank.row(i))?;
            let mut members = Vec::with_capacity(k + 1);
            members.push(i);
            members.extend(top_k(&sims, Some(i), k));
            Ok(Neighbourhood { anchor: i, members })
        })
        .collect()
}

/// Shannon entropy (natural log) with `0·ln 0 = 0`.
pub fn entropy(p: &ProbRow) -> f64 {
    -p.probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Entropy of each memory row's distribution against the bank itself.
pub fn bank_entropies(bank: &FeatureBank, tau: f64) -> Result<Vec<f64>> {
    (0..bank.n())
        .map(|i| prob_row(i, bank.row(i), bank, tau).map(|p| entropy(&p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mat64, SeededRng};
    use proptest::prelude::*;

    fn bank(rows: &[Vec<f64>]) -> FeatureBank {
        FeatureBank::from_features(Mat64::from_rows(rows).unwrap(), 0.5).unwrap()
    }

    fn three_row_bank() -> FeatureBank {
        bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]])
    }

    /// Brute force: full sort of (−score, index) pairs.
    fn sort_oracle(scores: &[f64], exclude: usize, k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != exclude)
            .map(|(j, &s)| (s, j))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        pairs.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn prob_row_examples() {
        let b = bank(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        for tau in [0.07, 1.0, 3.0] {
            assert_eq!(prob_row(0, &[1.0, 0.0], &b, tau).unwrap().probs, vec![0.5, 0.5]);
        }
        let p = prob_row(0, &[1.0, 0.0], &three_row_bank(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (2.0 * e + 1.0)).abs() < 1e-15);
        assert!((p.probs[1] - 1.0 / (2.0 * e + 1.0)).abs() < 1e-15);
        assert!((p.probs[0] - 0.42232).abs() < 5e-6 && (p.probs[1] - 0.15536).abs() < 5e-6);
        assert!(matches!(prob_row(0, &[1.0, 0.0], &b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn small_tau_concentrates_on_argmax() {
        let b = bank(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]]);
        let p = prob_row(0, &[0.6, 0.8], &b, 1e-3).unwrap();
        assert!((p.probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neighbourhood_examples() {
        let nbs = build_neighbourhoods(&three_row_bank(), 1).unwrap();
        assert_eq!(nbs[0].members, vec![0, 2]);
        assert_eq!(nbs[1].members, vec![1, 0]);
        assert_eq!(nbs[2].members, vec![2, 0]);

        let nbs = build_neighbourhoods(&three_row_bank(), 2).unwrap();
        for nb in &nbs {
            let mut m = nb.members.clone();
            m.sort_unstable();
            assert_eq!(m, vec![0, 1, 2]);
        }

        let same = bank(&vec![vec![0.6, 0.8]; 4]);
        let nbs = build_neighbourhoods(&same, 1).unwrap();
        assert_eq!(nbs[0].members, vec![0, 1]);
        assert_eq!(nbs[1].members, vec![1, 0]);
        assert_eq!(nbs[3].members, vec![3, 0]);

        assert!(build_neighbourhoods(&three_row_bank(), 0).is_err());
        assert!(build_neighbourhoods(&three_row_bank(), 3).is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform = ProbRow { anchor: 0, probs: vec![1.0 / 3.0; 3] };
        assert!((entropy(&uniform) - 3f64.ln()).abs() < 1e-9);
        assert!((entropy(&uniform) - 1.09861).abs() < 1e-5);
        let one_hot = ProbRow { anchor: 0, probs: vec![0.0, 1.0, 0.0] };
        assert_eq!(entropy(&one_hot), 0.0);
        let p = prob_row(0, &[1.0, 0.0], &three_row_bank(), 1.0).unwrap();
        let oracle: f64 = -p.probs.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((entropy(&p) - oracle).abs() < 1e-15);
        assert!((entropy(&p) - 1.017357).abs() < 5e-7);
    }

    #[test]
    fn entropy_max_only_for_uniform() {
        let n = 5;
        let uniform = ProbRow { anchor: 0, probs: vec![0.2; n] };
        assert!((entropy(&uniform) - (n as f64).ln()).abs() < 1e-9);
        let skew = ProbRow { anchor: 0, probs: vec![0.21, 0.19, 0.2, 0.2, 0.2] };
        assert!(entropy(&skew) < (n as f64).ln() - 1e-9);
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(
            scores in prop::collection::vec(prop::sample::select(vec![-1.0, -0.5, 0.0, 0.25, 0.5, 1.0]), 2..60),
            k_raw in 1usize..60,
            ex in 0usize..60,
        ) {
            let n = scores.len();
            let k = 1 + k_raw % (n - 1);
            let ex = ex % n;
            prop_assert_eq!(top_k(&scores, Some(ex), k), sort_oracle(&scores, ex, k));
        }

        #[test]
        fn prob_rows_sum_to_one(seed in any::<u64>(), n in 2usize..300, d in 2usize..16) {
            let mut rng = SeededRng::new(seed);
            let b = FeatureBank::init(n, d, 0.5, &mut rng).unwrap();
            let q = rng.unit_vector(d);
            for tau in [0.05, 0.07, 1.0] {
                let p = prob_row(0, &q, &b, tau).unwrap();
                let s: f64 = p.probs.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(p.probs.iter().all(|&x| x >= 0.0));
                let h = entropy(&p);
                prop_assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-9);
            }
        }

        #[test]
        fn neighbourhoods_invariant_to_temperature(seed in any::<u64>(), n in 3usize..40, k_raw in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let b = FeatureBank::init(n, 4, 0.5, &mut rng).unwrap();
            let k = 1 + k_raw % (n - 1);
            let nbs = build_neighbourhoods(&b, k).unwrap();
            for (i, nb) in nbs.iter().enumerate() {
                prop_assert_eq!(nb.anchor, i);
                prop_assert_eq!(nb.members[0], i);
                prop_assert_eq!(nb.members.len(), k + 1);
                let sims = b.all_similarities(b.row(i)).unwrap();
                for tau in [0.05, 0.07, 1.0] {
                    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
                    prop_assert_eq!(&top_k(&scaled, Some(i), k), &nb.members[1..].to_vec());
                }
            }
        }
    }
}
