//! Kraskov–Stögbauer–Grassberger (type 1) mutual information estimator.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use statrs::function::gamma::digamma;

use super::kdtree::KdTree;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;
const MIN_SAMPLES: usize = 1000;

fn row_major(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows().into_iter().flat_map(|r| r.to_vec()).collect()
}

/// KSG type-1 estimate of `I(Z; Z')` in nats. Rows are samples.
///
/// `I = ψ(k) + ψ(N) − ⟨ψ(n_z + 1) + ψ(n_z' + 1)⟩`, where `n_z` counts the
/// marginal neighbors strictly inside the max-norm distance to the `k`-th
/// joint neighbor.
pub fn mi_knn_estimate(
    samples_z: ArrayView2<'_, f64>,
    samples_zprime: ArrayView2<'_, f64>,
    k: usize,
) -> Result<f64> {
    let n = samples_z.nrows();
    if samples_zprime.nrows() != n {
        return Err(Error::dims(n, samples_zprime.nrows()));
    }
    if n < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!(
            "k = {k} out of range for {n} samples"
        )));
    }
    let (dz, dzp) = (samples_z.ncols(), samples_zprime.ncols());
    let z = row_major(samples_z);
    let zp = row_major(samples_zprime);
    let joint: Vec<f64> = (0..n)
        .flat_map(|i| {
            z[i * dz..(i + 1) * dz]
                .iter()
                .chain(&zp[i * dzp..(i + 1) * dzp])
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let dj = dz + dzp;

    let joint_tree = KdTree::build(&joint, dj);
    let z_tree = KdTree::build(&z, dz);
    let zp_tree = KdTree::build(&zp, dzp);

    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let eps = joint_tree.kth_neighbor_distance(&joint[i * dj..(i + 1) * dj], k, i);
            // counts include the query point itself when eps > 0
            let nz = z_tree
                .count_within(&z[i * dz..(i + 1) * dz], eps)
                .saturating_sub(1);
            let nzp = zp_tree
                .count_within(&zp[i * dzp..(i + 1) * dzp], eps)
                .saturating_sub(1);
            digamma(nz as f64 + 1.0) + digamma(nzp as f64 + 1.0)
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok(digamma(k as f64) + digamma(n as f64) - mean)
}

fn apply_monotone<F: Fn(f64) -> f64>(x: ArrayView2<'_, f64>, map: F) -> Result<Array2<f64>> {
    let mapped = x.mapv(&map);
    for c in 0..x.ncols() {
        let mut pairs: Vec<(f64, f64)> = x
            .column(c)
            .iter()
            .zip(mapped.column(c).iter())
            .map(|(&a, &b)| (a, b))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut direction = 0.0f64;
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                continue;
            }
            let step = w[1].1 - w[0].1;
            if !step.is_finite() || step == 0.0 || direction * step < 0.0 {
                return Err(Error::NonMonotoneMap);
            }
            direction = step.signum();
        }
    }
    Ok(mapped)
}

/// KSG estimates before and after applying strictly monotone elementwise maps
/// to each block. MI is invariant under such maps, so the two values should
/// agree up to estimator noise.
pub fn mi_invariance_check<F, G>(
    samples_z: ArrayView2<'_, f64>,
    samples_zprime: ArrayView2<'_, f64>,
    map_z: F,
    map_zprime: G,
    k: usize,
) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let before = mi_knn_estimate(samples_z, samples_zprime, k)?;
    let z = apply_monotone(samples_z, map_z)?;
    let zp = apply_monotone(samples_zprime, map_zprime)?;
    let after = mi_knn_estimate(z.view(), zp.view(), k)?;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn too_few_samples() {
        let z = Array2::<f64>::zeros((999, 1));
        assert!(matches!(
            mi_knn_estimate(z.view(), z.view(), 5),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn non_monotone_map_rejected() {
        let z = Array2::from_shape_fn((1000, 1), |(i, _)| i as f64 / 100.0 - 5.0);
        let r = mi_invariance_check(z.view(), z.view(), |x| x * x, |x| x, 5);
        assert_eq!(r, Err(Error::NonMonotoneMap));
        // decreasing maps are fine
        let r = mi_invariance_check(z.view(), z.view(), |x| -x, |x| x, 5);
        assert!(r.is_ok());
    }
}
