#![allow(dead_code)]

use mmi_ssl_core::matrix::SymMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn random_symmetric(n: usize, rng: &mut impl Rng) -> SymMatrix {
    let g = gaussian(n, n, rng);
    SymMatrix::new((&g + &g.t()) * 0.5).unwrap()
}

pub fn random_spd(n: usize, rng: &mut impl Rng) -> SymMatrix {
    let g = gaussian(n, n, rng);
    SymMatrix::new(g.dot(&g.t()) / n as f64 + Array2::<f64>::eye(n) * 0.5).unwrap()
}

/// Orthogonal matrix by modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = gaussian(n, n, rng);
    for j in 0..n {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let qk = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// Determinant by LU with partial pivoting.
pub fn det_lu(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs()))
            .unwrap();
        if m[[p, c]] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                m.swap([p, k], [c, k]);
            }
            det = -det;
        }
        det *= m[[c, c]];
        for r in c + 1..n {
            let f = m[[r, c]] / m[[c, c]];
            for k in c..n {
                m[[r, k]] -= f * m[[c, k]];
            }
        }
    }
    det
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
