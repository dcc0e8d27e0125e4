//! Dynamic time warping over latent sequences and the linear map that
//! carries mIF latents into the H&E latent space.
//!
//! The accumulated cost follows
//! `D[i,j] = d(A[i], B[j]) + min(D[i-1,j], D[i,j-1], D[i-1,j-1])` with
//! Euclidean `d`, `D[0][0] = 0` and the rest of row/column 0 at `+∞`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentVector;

/// Ridge term added to the normal equations of the map fit.
pub const RIDGE_LAMBDA: f64 = 1e-6;

/// Accumulated cost table of size `(n+1) × (m+1)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Number of rows, `n + 1`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// One-based `(i, j)` index pairs from `(1, 1)` to `(n, m)`.
pub type WarpPath = Vec<(usize, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub cost_matrix: CostMatrix,
    pub path: WarpPath,
    pub total_cost: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims<V: AsRef<[f64]>>(seqs: [&[V]; 2]) -> Result<usize> {
    let dim = seqs[0].first().ok_or(Error::EmptySequence)?.as_ref().len();
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(v) = seq.iter().find(|v| v.as_ref().len() != dim) {
            return Err(Error::VectorDimension(dim, v.as_ref().len()));
        }
    }
    Ok(dim)
}

/// Aligns two vector sequences. On backtrace, ties prefer the diagonal
/// predecessor, then `(i, j-1)`, then `(i-1, j)`.
pub fn dtw_align<V: AsRef<[f64]>>(a: &[V], b: &[V]) -> Result<AlignmentResult> {
    check_dims([a, b])?;
    let (n, m) = (a.len(), b.len());
    let cols = m + 1;
    let mut values = vec![f64::INFINITY; (n + 1) * cols];
    values[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = values[(i - 1) * cols + j]
                .min(values[i * cols + j - 1])
                .min(values[(i - 1) * cols + j - 1]);
            values[i * cols + j] = euclidean(a[i - 1].as_ref(), b[j - 1].as_ref()) + best;
        }
    }
    let cost_matrix = CostMatrix {
        rows: n + 1,
        cols,
        values,
    };

    let mut path = vec![(n, m)];
    let (mut i, mut j) = (n, m);
    while (i, j) != (1, 1) {
        let diag = cost_matrix.get(i - 1, j - 1);
        let left = cost_matrix.get(i, j - 1);
        let down = cost_matrix.get(i - 1, j);
        (i, j) = if diag <= left && diag <= down {
            (i - 1, j - 1)
        } else if left <= down {
            (i, j - 1)
        } else {
            (i - 1, j)
        };
        path.push((i, j));
    }
    path.reverse();

    Ok(AlignmentResult {
        total_cost: cost_matrix.get(n, m),
        cost_matrix,
        path,
    })
}

/// The `(A[i], B[j])` pairs visited by the warp path, in path order.
pub fn matched_pairs<'a, V: AsRef<[f64]>>(
    result: &AlignmentResult,
    a: &'a [V],
    b: &'a [V],
) -> Vec<(&'a [f64], &'a [f64])> {
    result
        .path
        .iter()
        .map(|&(i, j)| (a[i - 1].as_ref(), b[j - 1].as_ref()))
        .collect()
}

/// Affine map `v ↦ W·v + b` with a square `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationMap {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub weights: Vec<f64>,
    pub offset: Vec<f64>,
}

impl IntegrationMap {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for k in 0..dim {
            weights[k * dim + k] = 1.0;
        }
        Self {
            dim,
            weights,
            offset: vec![0.0; dim],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::VectorDimension(self.dim, v.len()));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.offset)
            .map(|(row, b)| b + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>())
            .collect())
    }
}

/// Least-squares fit of `W·mif + b ≈ he` over `(mif, he)` pairs.
///
/// Data are centered first so the offset is unpenalized; `W` solves the
/// ridge-regularized normal equations `(XᵀX + λI) Wᵀ = XᵀY` by Cholesky.
pub fn fit_integration_map<V: AsRef<[f64]>>(pairs: &[(V, V)]) -> Result<IntegrationMap> {
    let (first, _) = pairs.first().ok_or(Error::EmptySequence)?;
    let dim = first.as_ref().len();
    for (x, y) in pairs {
        for v in [x.as_ref(), y.as_ref()] {
            if v.len() != dim {
                return Err(Error::VectorDimension(dim, v.len()));
            }
        }
    }
    let count = pairs.len() as f64;
    let mut x_mean = vec![0.0; dim];
    let mut y_mean = vec![0.0; dim];
    for (x, y) in pairs {
        for k in 0..dim {
            x_mean[k] += x.as_ref()[k] / count;
            y_mean[k] += y.as_ref()[k] / count;
        }
    }
    let xc = DMatrix::from_fn(pairs.len(), dim, |r, c| pairs[r].0.as_ref()[c] - x_mean[c]);
    let yc = DMatrix::from_fn(pairs.len(), dim, |r, c| pairs[r].1.as_ref()[c] - y_mean[c]);
    if xc.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateSystem("all source vectors are identical".into()));
    }

    let gram = xc.tr_mul(&xc) + DMatrix::identity(dim, dim) * RIDGE_LAMBDA;
    let rhs = xc.tr_mul(&yc);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::DegenerateSystem("normal equations are not positive definite".into()))?;
    let w_t = chol.solve(&rhs);
    let w = w_t.transpose();
    let offset = DVector::from_vec(y_mean) - &w * DVector::from_vec(x_mean);

    let map = IntegrationMap {
        dim,
        weights: w.transpose().as_slice().to_vec(),
        offset: offset.as_slice().to_vec(),
    };
    if map.weights.iter().chain(&map.offset).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSystem("solution is not finite".into()));
    }
    Ok(map)
}

/// Maps every latent's values through `map`, keeping provenance.
pub fn apply_integration(map: &IntegrationMap, latents: &[LatentVector]) -> Result<Vec<LatentVector>> {
    latents
        .iter()
        .map(|lv| {
            Ok(LatentVector {
                source: lv.source.clone(),
                values: map.apply(&lv.values)?,
                modality: lv.modality,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LatentSource, Modality};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Minimum path cost over every monotone path, by exhaustive recursion.
    fn brute_force_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
            let here = euclidean(&a[i], &b[j]);
            if i == 0 && j == 0 {
                return here;
            }
            let mut best = f64::INFINITY;
            if i > 0 {
                best = best.min(walk(a, b, i - 1, j));
            }
            if j > 0 {
                best = best.min(walk(a, b, i, j - 1));
            }
            if i > 0 && j > 0 {
                best = best.min(walk(a, b, i - 1, j - 1));
            }
            here + best
        }
        walk(a, b, a.len() - 1, b.len() - 1)
    }

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn small_hand_example() {
        let a = scalars(&[0.0, 1.0, 2.0]);
        let b = scalars(&[0.0, 2.0]);
        let r = dtw_align(&a, &b).unwrap();
        assert_eq!(r.total_cost, 1.0);
        assert_eq!(brute_force_cost(&a, &b), 1.0);
        // D[2][1] and D[2][2] tie at 1 when leaving (3,2); the diagonal wins.
        assert_eq!(r.path, vec![(1, 1), (2, 1), (3, 2)]);
        let pairs = matched_pairs(&r, &a, &b);
        let flat: Vec<(f64, f64)> = pairs.iter().map(|(x, y)| (x[0], y[0])).collect();
        assert_eq!(flat, vec![(0.0, 0.0), (1.0, 0.0), (2.0, 2.0)]);
        assert_eq!(r.cost_matrix.get(0, 0), 0.0);
        assert!(r.cost_matrix.get(0, 1).is_infinite());
        assert_eq!(r.cost_matrix.get(2, 2), 1.0);
    }

    #[test]
    fn identical_and_single() {
        let a = scalars(&[3.0, 1.0, 4.0, 1.0, 5.0]);
        let r = dtw_align(&a, &a).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.path, (1..=5).map(|k| (k, k)).collect::<Vec<_>>());
        assert!(matched_pairs(&r, &a, &a).iter().all(|(x, y)| x == y));

        let one = scalars(&[2.0]);
        let r = dtw_align(&one, &scalars(&[5.0])).unwrap();
        assert_eq!(r.path, vec![(1, 1)]);
        assert_eq!(r.total_cost, 3.0);
    }

    #[test]
    fn rejects_bad_input() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(dtw_align(&empty, &scalars(&[1.0])), Err(Error::EmptySequence)));
        assert!(matches!(dtw_align(&scalars(&[1.0]), &empty), Err(Error::EmptySequence)));
        assert!(matches!(
            dtw_align(&[vec![1.0, 2.0]], &[vec![1.0]]),
            Err(Error::VectorDimension(2, 1))
        ));
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn cost_matches_brute_force_and_paths_are_valid(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, dim in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_seq(&mut rng, n, dim);
            let b = random_seq(&mut rng, m, dim);
            let r = dtw_align(&a, &b).unwrap();
            let oracle = brute_force_cost(&a, &b);
            prop_assert!((r.total_cost - oracle).abs() <= 1e-12 * oracle.max(1.0));

            prop_assert_eq!(r.path[0], (1, 1));
            prop_assert_eq!(*r.path.last().unwrap(), (n, m));
            for w in r.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!([(1, 0), (0, 1), (1, 1)].contains(&step));
            }
            let along: f64 = matched_pairs(&r, &a, &b).iter().map(|(x, y)| euclidean(x, y)).sum();
            prop_assert!((along - r.total_cost).abs() <= 1e-12 * along.max(1.0));

            let back = dtw_align(&b, &a).unwrap();
            prop_assert!((back.total_cost - r.total_cost).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    fn pairs_from(mif: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<(Vec<f64>, Vec<f64>)> {
        mif.iter().map(|x| (x.clone(), f(x))).collect()
    }

    #[test]
    fn recovers_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mif = random_seq(&mut rng, 80, 6);
        let map = fit_integration_map(&pairs_from(&mif, |x| x.to_vec())).unwrap();
        let ident = IntegrationMap::identity(6);
        for (w, e) in map.weights.iter().zip(&ident.weights) {
            assert!((w - e).abs() < 1e-6);
        }
        assert!(map.offset.iter().all(|b| b.abs() < 1e-6));

        let c = [0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
        let map = fit_integration_map(&pairs_from(&mif, |x| x.iter().zip(&c).map(|(a, b)| a + b).collect())).unwrap();
        for (w, e) in map.weights.iter().zip(&ident.weights) {
            assert!((w - e).abs() < 1e-6);
        }
        for (b, e) in map.offset.iter().zip(&c) {
            assert!((b - e).abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_noisy_affine_map() {
        let dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = IntegrationMap {
            dim,
            weights: (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            offset: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mif = random_seq(&mut rng, 10 * dim, dim);
        let pairs: Vec<_> = mif
            .iter()
            .map(|x| {
                let y: Vec<f64> = truth
                    .apply(x)
                    .unwrap()
                    .into_iter()
                    .map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (x.clone(), y)
            })
            .collect();
        let fit = fit_integration_map(&pairs).unwrap();
        for (a, b) in fit.weights.iter().chain(&fit.offset).zip(truth.weights.iter().chain(&truth.offset)) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn noiseless_fit_residual() {
        let dim = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = IntegrationMap {
            dim,
            weights: (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            offset: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mif = random_seq(&mut rng, 60, dim);
        let pairs = pairs_from(&mif, |x| truth.apply(x).unwrap());
        let fit = fit_integration_map(&pairs).unwrap();
        let mse: f64 = pairs
            .iter()
            .map(|(x, y)| euclidean(&fit.apply(x).unwrap(), y).powi(2))
            .sum::<f64>()
            / pairs.len() as f64;
        assert!(mse < 1e-10, "mse {mse}");
    }

    #[test]
    fn degenerate_inputs() {
        let pairs = vec![(vec![1.0, 2.0], vec![0.0, 0.0]); 5];
        assert!(matches!(fit_integration_map(&pairs), Err(Error::DegenerateSystem(_))));
        let empty: Vec<(Vec<f64>, Vec<f64>)> = vec![];
        assert!(fit_integration_map(&empty).is_err());
        // fewer pairs than dimensions: the ridge term keeps the system solvable
        let few = vec![(vec![1.0, 0.0, 0.0], vec![1.0; 3]), (vec![0.0, 1.0, 0.0], vec![2.0; 3])];
        assert!(fit_integration_map(&few).is_ok());
    }

    fn latent(values: Vec<f64>) -> LatentVector {
        LatentVector {
            source: LatentSource {
                slide_id: "m".into(),
                channel_index: 2,
                grid_row: 1,
                grid_col: 3,
            },
            values,
            modality: Modality::Mif,
        }
    }

    #[test]
    fn applying_maps() {
        let lat = vec![latent(vec![1.0, -2.0, 0.5])];
        assert_eq!(apply_integration(&IntegrationMap::identity(3), &lat).unwrap(), lat);
        let mut shift = IntegrationMap::identity(3);
        shift.offset = vec![1.0; 3];
        let out = apply_integration(&shift, &lat).unwrap();
        assert_eq!(out[0].values, vec![2.0, -1.0, 1.5]);
        assert_eq!(out[0].source, lat[0].source);
        assert!(matches!(
            apply_integration(&shift, &[latent(vec![1.0])]),
            Err(Error::VectorDimension(3, 1))
        ));
    }

    #[test]
    fn inverse_map_round_trip() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let map = IntegrationMap {
            dim,
            weights: (0..dim * dim)
                .map(|k| if k % (dim + 1) == 0 { 2.0 } else { rng.random_range(-0.3..0.3) })
                .collect(),
            offset: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let w = DMatrix::from_row_slice(dim, dim, &map.weights);
        let w_inv = w.try_inverse().unwrap();
        let b_inv = -(&w_inv * DVector::from_row_slice(&map.offset));
        let inverse = IntegrationMap {
            dim,
            weights: w_inv.transpose().as_slice().to_vec(),
            offset: b_inv.as_slice().to_vec(),
        };
        let lat: Vec<_> = random_seq(&mut rng, 20, dim).into_iter().map(latent).collect();
        let back = apply_integration(&inverse, &apply_integration(&map, &lat).unwrap()).unwrap();
        for (x, y) in lat.iter().zip(&back) {
            assert!(x.values.iter().zip(&y.values).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}
