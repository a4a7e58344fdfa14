//! Per-sample feature memory refreshed by an exponential moving average.

use crate::numerics::{dot, l2_normalize_in_place, Mat64, SeededRng};
use crate::{Error, Result};

/// Default EMA weight on the fresh feature.
pub const DEFAULT_ETA: f64 = 0.5;

/// One unit-norm feature row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    features: Mat64,
    eta: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("eta must be in (0, 1], got {eta}")))
    }
}

impl FeatureBank {
    /// Random unit directions, one per sample.
    pub fn init(n: usize, d: usize, eta: f64, rng: &mut SeededRng) -> Result<Self> {
        if n < 2 || d < 2 {
            return Err(Error::config(format!(
                "memory bank needs n >= 2 and d >= 2, got n={n} d={d}"
            )));
        }
        check_eta(eta)?;
        let mut features = Mat64::zeros(n, d);
        for i in 0..n {
            features.row_mut(i).copy_from_slice(&rng.unit_vector(d));
        }
        Ok(FeatureBank { features, eta })
    }

    /// Wraps existing rows; each row is normalized.
    pub fn from_features(mut features: Mat64, eta: f64) -> Result<Self> {
        if features.rows() < 2 || features.cols() < 2 {
            return Err(Error::config(format!(
                "memory bank needs n >= 2 and d >= 2, got n={} d={}",
                features.rows(),
                features.cols()
            )));
        }
        check_eta(eta)?;
        for i in 0..features.rows() {
            l2_normalize_in_place(features.row_mut(i))?;
        }
        Ok(FeatureBank { features, eta })
    }

    /// Wraps rows that are already unit-norm (within 1e-9) without touching
    /// their bits.
    pub fn from_unit_rows(features: Mat64, eta: f64) -> Result<Self> {
        if features.rows() < 2 || features.cols() < 2 {
            return Err(Error::config(format!(
                "memory bank needs n >= 2 and d >= 2, got n={} d={}",
                features.rows(),
                features.cols()
            )));
        }
        check_eta(eta)?;
        for (i, row) in features.iter_rows().enumerate() {
            let n = crate::numerics::norm(row);
            if (n - 1.0).abs() > 1e-9 || n.is_nan() {
                return Err(Error::Degenerate(format!("bank row {i} has norm {n}")));
            }
        }
        Ok(FeatureBank { features, eta })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        self.eta = eta;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn features(&self) -> &Mat64 {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// `row_i ← normalize((1 − η)·row_i + η·fresh_i)` for every listed index.
    ///
    /// Rows of `fresh` are expected to be unit-norm features straight from
    /// the encoder. Indices must be unique.
    pub fn update_batch(&mut self, indices: &[usize], fresh: &Mat64) -> Result<()> {
        if fresh.rows() != indices.len() {
            return Err(Error::Dimension {
                expected: indices.len(),
                actual: fresh.rows(),
            });
        }
        if fresh.cols() != self.d() {
            return Err(Error::Dimension {
                expected: self.d(),
                actual: fresh.cols(),
            });
        }
        let n = self.n();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Bounds { index: i, len: n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("duplicate index {i} in update_batch")));
            }
        }
        // compute everything before writing so a degenerate blend leaves the bank intact
        let keep = 1.0 - self.eta;
        let mut blended = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let mut row: Vec<f64> = self
                .features
                .row(i)
                .iter()
                .zip(fresh.row(k))
                .map(|(&old, &new)| keep * old + self.eta * new)
                .collect();
            l2_normalize_in_place(&mut row).map_err(|_| {
                Error::Degenerate(format!("EMA blend for sample {i} cancelled to zero"))
            })?;
            blended.push(row);
        }
        for (&i, row) in indices.iter().zip(blended) {
            self.features.row_mut(i).copy_from_slice(&row);
        }
        Ok(())
    }

    /// Cosine scores of `query` against every row.
    pub fn all_similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.d() {
            return Err(Error::Dimension {
                expected: self.d(),
                actual: query.len(),
            });
        }
        self.features.iter_rows().map(|row| dot(query, row)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;
    use proptest::prelude::*;

    fn bank_from(rows: &[Vec<f64>], eta: f64) -> FeatureBank {
        FeatureBank::from_features(Mat64::from_rows(rows).unwrap(), eta).unwrap()
    }

    #[test]
    fn init_rows_are_unit_and_seeded() {
        let a = FeatureBank::init(4, 8, 0.5, &mut SeededRng::new(3)).unwrap();
        for i in 0..4 {
            assert!((norm(a.row(i)) - 1.0).abs() < 1e-12);
        }
        let b = FeatureBank::init(4, 8, 0.5, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(FeatureBank::init(1, 8, 0.5, &mut SeededRng::new(3)).is_err());
        assert!(FeatureBank::init(4, 1, 0.5, &mut SeededRng::new(3)).is_err());
        assert!(FeatureBank::init(4, 8, 0.0, &mut SeededRng::new(3)).is_err());
    }

    #[test]
    fn ema_hand_example() {
        let mut bank = bank_from(&[vec![0.6, 0.8], vec![0.0, 1.0]], 0.5);
        let fresh = Mat64::from_rows(&[vec![1.0, 0.0]]).unwrap();
        bank.update_batch(&[0], &fresh).unwrap();
        // pre-norm (0.8, 0.4), norm sqrt(0.8)
        let s = 0.8f64.sqrt();
        assert!((bank.row(0)[0] - 0.8 / s).abs() < 1e-12);
        assert!((bank.row(0)[1] - 0.4 / s).abs() < 1e-12);
        assert!((bank.row(0)[0] - 0.894427).abs() < 1e-6);
        assert!((bank.row(0)[1] - 0.447214).abs() < 1e-6);
        assert_eq!(bank.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn eta_one_copies_fresh() {
        let mut bank = bank_from(&[vec![0.6, 0.8], vec![0.0, 1.0]], 1.0);
        let fresh = Mat64::from_rows(&[vec![0.8, -0.6]]).unwrap();
        bank.update_batch(&[1], &fresh).unwrap();
        assert_eq!(bank.row(1), fresh.row(0));
    }

    #[test]
    fn fresh_equal_to_old_is_fixed_point() {
        let mut bank = FeatureBank::init(5, 4, 0.5, &mut SeededRng::new(1)).unwrap();
        let before = bank.clone();
        let fresh = before.features().select_rows(&[2, 4]).unwrap();
        bank.update_batch(&[2, 4], &fresh).unwrap();
        for (a, b) in bank.features().values().iter().zip(before.features().values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_errors() {
        let mut bank = FeatureBank::init(3, 2, 0.5, &mut SeededRng::new(1)).unwrap();
        let fresh = Mat64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(bank.update_batch(&[1, 1], &fresh), Err(Error::Contract(_))));
        assert!(matches!(bank.update_batch(&[0, 3], &fresh), Err(Error::Bounds { .. })));
        assert!(matches!(bank.update_batch(&[0], &fresh), Err(Error::Dimension { .. })));
    }

    #[test]
    fn similarity_examples() {
        let bank = bank_from(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]], 0.5);
        let s = bank.all_similarities(&[0.6, 0.8]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let bank = bank_from(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 0.5);
        assert_eq!(bank.all_similarities(&[0.0, 0.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert!(bank.all_similarities(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn similarities_match_row_loop() {
        let mut rng = SeededRng::new(17);
        let bank = FeatureBank::init(50, 7, 0.5, &mut rng).unwrap();
        let q = rng.unit_vector(7);
        let s = bank.all_similarities(&q).unwrap();
        for (j, &sj) in s.iter().enumerate() {
            let mut acc = 0.0;
            for t in 0..7 {
                acc += q[t] * bank.features().get(j, t);
            }
            assert!((sj - acc).abs() < 1e-15);
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&sj));
        }
    }

    proptest! {
        #[test]
        fn disjoint_updates_commute(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let base = FeatureBank::init(10, 4, 0.5, &mut rng).unwrap();
            let fa = Mat64::from_rows(&[rng.unit_vector(4), rng.unit_vector(4)]).unwrap();
            let fb = Mat64::from_rows(&[rng.unit_vector(4), rng.unit_vector(4), rng.unit_vector(4)]).unwrap();
            let (ia, ib) = ([1usize, 7], [0usize, 3, 9]);
            let mut x = base.clone();
            x.update_batch(&ia, &fa).unwrap();
            x.update_batch(&ib, &fb).unwrap();
            let mut y = base;
            y.update_batch(&ib, &fb).unwrap();
            y.update_batch(&ia, &fa).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
