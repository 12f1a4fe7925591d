use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from_seed;

/// Lloyd iteration cap.
const KMEANS_MAX_ITERS: usize = 100;

/// Gaussian radial basis functions over fixed centres plus a constant bias column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// One centre per row (`M × Q`).
    #[serde(with = "crate::serde_matrix")]
    pub centers: DMatrix<f64>,
    pub width: f64,
    pub include_bias: bool,
}

impl FeatureMap {
    pub fn new(centers: DMatrix<f64>, width: f64) -> Result<Self> {
        let map = Self { centers, width, include_bias: true };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::InvalidArgument(format!("RBF width must be positive, got {}", self.width)));
        }
        if self.centers.nrows() == 0 {
            return Err(Error::InvalidArgument("feature map needs at least one centre".into()));
        }
        if self.centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("feature map centres must be finite".into()));
        }
        Ok(())
    }

    pub fn basis_count(&self) -> usize {
        self.centers.nrows()
    }

    /// Output dimension `D` (`M + 1` with the bias column).
    pub fn output_dim(&self) -> usize {
        self.basis_count() + usize::from(self.include_bias)
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    /// Squared distances between every input row and every centre (`N × M`).
    pub(crate) fn squared_distances(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.basis_count();
        DMatrix::from_fn(inputs.nrows(), m, |n, j| {
            (0..inputs.ncols()).map(|q| (inputs[(n, q)] - self.centers[(j, q)]).powi(2)).sum()
        })
    }

    /// Features at `width` plus their derivative with respect to `ln width`.
    pub(crate) fn features_with_derivative(
        &self,
        inputs: &DMatrix<f64>,
        width: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.basis_count();
        let d = self.output_dim();
        let dist2 = self.squared_distances(inputs);
        let inv = 1.0 / (width * width);
        let mut phi = DMatrix::zeros(inputs.nrows(), d);
        let mut dphi = DMatrix::zeros(inputs.nrows(), d);
        for n in 0..inputs.nrows() {
            for j in 0..m {
                let r2 = dist2[(n, j)] * inv;
                let v = (-0.5 * r2).exp();
                phi[(n, j)] = v;
                // d/d ln(width) of exp(-r²/(2 width²)) = φ · r²/width²
                dphi[(n, j)] = v * r2;
            }
            if self.include_bias {
                phi[(n, m)] = 1.0;
            }
        }
        (phi, dphi)
    }
}

/// Evaluates the RBF feature matrix `Φ` (`N × D`) for the rows of `inputs`.
pub fn rbf_features(inputs: &DMatrix<f64>, map: &FeatureMap) -> Result<DMatrix<f64>> {
    map.validate()?;
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("input matrix is empty".into()));
    }
    if inputs.ncols() != map.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs have {} columns but centres have {}",
            inputs.ncols(),
            map.input_dim()
        )));
    }
    if let Some(pos) = inputs.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite input coordinate at row {}",
            pos % inputs.nrows()
        )));
    }
    Ok(map.features_with_derivative(inputs, map.width).0)
}

/// Lloyd's k-means with k-means++ seeding; returns `count` centres (`count × Q`).
///
/// Clusters that lose all their points are moved onto the point farthest from
/// its assigned centre.
pub fn kmeans(inputs: &DMatrix<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = inputs.nrows();
    let q = inputs.ncols();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= M <= N, got M = {count}, N = {n}")));
    }
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("k-means inputs must be finite".into()));
    }
    let dist2 = |a: usize, centers: &DMatrix<f64>, c: usize| -> f64 {
        (0..q).map(|j| (inputs[(a, j)] - centers[(c, j)]).powi(2)).sum()
    };

    let mut rng = rng_from_seed(seed);
    let mut centers = DMatrix::zeros(count, q);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.set_row(0, &inputs.row(first));
    chosen[first] = true;
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers, 0)).collect();
    for c in 1..count {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while nearest[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            // every remaining point coincides with a centre
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.set_row(c, &inputs.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(i, &centers, c));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..count {
                let d = dist2(i, &centers, c);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(count, q);
        let mut counts = vec![0usize; count];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for j in 0..q {
                sums[(c, j)] += inputs[(i, j)];
            }
        }
        for c in 0..count {
            if counts[c] > 0 {
                for j in 0..q {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        for c in 0..count {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(a, &centers, assignment[a]).total_cmp(&dist2(b, &centers, assignment[b]))
                    })
                    .expect("n >= 1");
                centers.set_row(c, &inputs.row(far));
                assignment[far] = c;
            }
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn feature_is_one_at_centre_and_exp_minus_half_at_width() {
        let map = FeatureMap::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), 0.5).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.5, -1.0]);
        let phi = rbf_features(&x, &map).unwrap();
        assert_eq!(phi[(0, 0)], 1.0);
        assert!((phi[(1, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(phi[(0, 1)], 1.0);
        assert_eq!(phi[(1, 1)], 1.0);
    }

    #[test]
    fn features_match_elementwise_loop() {
        let mut rng = rng_from_seed(11);
        let x = DMatrix::from_fn(5, 2, |_, _| StandardNormal.sample(&mut rng));
        let c = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
        let map = FeatureMap::new(c.clone(), 0.8).unwrap();
        let phi = rbf_features(&x, &map).unwrap();
        assert_eq!(phi.shape(), (5, 4));
        for n in 0..5 {
            for m in 0..3 {
                let d2 = (x[(n, 0)] - c[(m, 0)]).powi(2) + (x[(n, 1)] - c[(m, 1)]).powi(2);
                let expect = (-d2 / (2.0 * 0.8 * 0.8)).exp();
                assert!((phi[(n, m)] - expect).abs() < 1e-15);
            }
            assert_eq!(phi[(n, 3)], 1.0);
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let map = FeatureMap::new(DMatrix::from_element(1, 1, 0.0), 1.0).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(rbf_features(&x, &map).is_err());
        assert!(FeatureMap::new(DMatrix::from_element(1, 1, 0.0), 0.0).is_err());
    }

    #[test]
    fn features_are_row_local() {
        let map = FeatureMap::new(DMatrix::from_row_slice(2, 1, &[-1.0, 2.0]), 1.3).unwrap();
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 1.7, -2.0]);
        let xp = DMatrix::from_row_slice(3, 1, &[-2.0, 0.1, 1.7]);
        let a = rbf_features(&x, &map).unwrap();
        let b = rbf_features(&xp, &map).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            assert_eq!(a.row(i), b.row(j));
        }
    }

    #[test]
    fn kmeans_with_m_equal_n_returns_the_points() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 5.0, 5.0, -3.0, 2.0]);
        let c = kmeans(&x, 4, 3).unwrap();
        let mut rows: Vec<Vec<f64>> = c.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut pts: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, pts);
    }

    #[test]
    fn kmeans_single_centre_is_the_mean() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, -1.0]);
        let c = kmeans(&x, 1, 9).unwrap();
        assert!((c[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((c[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = rng_from_seed(5);
        let mut data = Vec::new();
        for i in 0..100 {
            let (cx, cy) = if i < 50 { (-5.0, 0.0) } else { (5.0, 3.0) };
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            data.extend_from_slice(&[cx + 0.3 * dx, cy + 0.3 * dy]);
        }
        let x = DMatrix::from_row_slice(100, 2, &data);
        let mean = |lo: usize, hi: usize, j: usize| (lo..hi).map(|i| x[(i, j)]).sum::<f64>() / (hi - lo) as f64;
        let blob_means = [[mean(0, 50, 0), mean(0, 50, 1)], [mean(50, 100, 0), mean(50, 100, 1)]];
        let c = kmeans(&x, 2, 1).unwrap();
        for b in blob_means {
            let closest = (0..2)
                .map(|k| ((c[(k, 0)] - b[0]).powi(2) + (c[(k, 1)] - b[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.1, "blob mean {b:?} not matched: {c}");
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic_and_validates_count() {
        let mut rng = rng_from_seed(2);
        let x = DMatrix::from_fn(30, 3, |_, _| StandardNormal.sample(&mut rng));
        assert_eq!(kmeans(&x, 5, 17).unwrap(), kmeans(&x, 5, 17).unwrap());
        assert!(kmeans(&x, 0, 1).is_err());
        assert!(kmeans(&x, 31, 1).is_err());
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 2.0]);
        let c = kmeans(&x, 3, 0).unwrap();
        assert!(c.iter().all(|v| v.is_finite()));
    }
}
