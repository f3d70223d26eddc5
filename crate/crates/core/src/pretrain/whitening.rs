//! Whitening transforms estimated from patch statistics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Eigenvalues below this are clamped before taking `lambda^-1/2`.
pub const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhiteningMode {
    /// Principal components scaled to unit variance.
    Pca,
    /// PCA whitening followed by a FastICA rotation (deflation, log-cosh contrast).
    Ica,
}

/// `y = W (x - mean)` with `cov(y) = I` on the fitting set.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    pub mean: Vec<f64>,
    /// `d_out x d_in`.
    pub w: Matrix,
    /// All covariance eigenvalues, descending.
    pub spectrum: Vec<f64>,
}

impl WhiteningModel {
    pub fn retained_dims(&self) -> usize {
        self.w.rows()
    }

    /// Whitened rows of `patches`.
    pub fn apply(&self, patches: &Matrix) -> Result<Matrix> {
        if patches.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "whitening fitted on {} columns, got {}",
                self.mean.len(),
                patches.cols()
            )));
        }
        let mut centered = patches.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_transposed(&self.w)
    }

    /// `W mean`, the constant that a bias-free convolution misses.
    pub fn projected_mean(&self) -> Vec<f64> {
        self.w.mul_vec(&self.mean).expect("mean matches filter width")
    }
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    let n = x.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Covariance with `1/N` normalization.
pub fn covariance(x: &Matrix) -> Matrix {
    let d = x.cols();
    let mean = column_means(x);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in 0..x.rows() {
        for ((c, v), m) in centered.iter_mut().zip(x.row(r)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let n = x.rows() as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / n;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    cov
}

/// Fits a whitening transform to the rows of `patches`, keeping the `d_out`
/// leading principal directions.
pub fn fit_whitening(patches: &Matrix, d_out: usize, mode: WhiteningMode) -> Result<WhiteningModel> {
    let (n, d_in) = (patches.rows(), patches.cols());
    if d_out == 0 || d_out > d_in {
        return Err(Error::Shape(format!("cannot keep {d_out} of {d_in} dimensions")));
    }
    if n < d_in + 1 {
        return Err(Error::Fit(format!("whitening {d_in}-dim patches needs at least {} rows, got {n}", d_in + 1)));
    }
    if !patches.all_finite() {
        return Err(Error::NonFinite("whitening input".into()));
    }
    let mean = column_means(patches);
    let cov = covariance(patches);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d_in, d_in, cov.data()));
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let mut w = Matrix::zeros(d_out, d_in);
    for (row, &i) in order.iter().take(d_out).enumerate() {
        let v = eig.eigenvectors.column(i);
        // fix the sign: largest-magnitude entry positive
        let pivot = (0..d_in).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / eig.eigenvalues[i].max(EIG_FLOOR).sqrt();
        for (j, dst) in w.row_mut(row).iter_mut().enumerate() {
            *dst = scale * v[j];
        }
    }
    let mut model = WhiteningModel { mean, w, spectrum };
    if mode == WhiteningMode::Ica {
        let z = model.apply(patches)?;
        let rotation = fast_ica(&z, 200, 1e-6);
        model.w = rotation.matmul(&model.w)?;
    }
    Ok(model)
}

/// Orthogonal rotation of whitened data `z` (rows are samples) whose rows
/// are the FastICA unmixing directions, found one at a time with the
/// log-cosh contrast and Gram-Schmidt deflation.
fn fast_ica(z: &Matrix, max_iter: usize, tol: f64) -> Matrix {
    let (n, d) = (z.rows(), z.cols());
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(d);
    let orthonormalize = |w: &mut Vec<f64>, found: &[Vec<f64>]| -> bool {
        for f in found {
            let dot: f64 = w.iter().zip(f).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(f).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return false;
        }
        w.iter_mut().for_each(|a| *a /= norm);
        true
    };
    for comp in 0..d {
        // start from the first basis vector not spanned by earlier components
        let mut w = Vec::new();
        for start in (0..d).map(|k| (comp + k) % d) {
            let mut cand = vec![0.0; d];
            cand[start] = 1.0;
            if orthonormalize(&mut cand, &found) {
                w = cand;
                break;
            }
        }
        for _ in 0..max_iter {
            let mut next = vec![0.0; d];
            let mut mean_dg = 0.0;
            for r in 0..n {
                let x = z.row(r);
                let proj: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                let g = proj.tanh();
                mean_dg += 1.0 - g * g;
                next.iter_mut().zip(x).for_each(|(a, b)| *a += g * b);
            }
            let inv_n = 1.0 / n as f64;
            mean_dg *= inv_n;
            next.iter_mut().zip(&w).for_each(|(a, b)| *a = *a * inv_n - mean_dg * b);
            if !orthonormalize(&mut next, &found) {
                break;
            }
            let agreement: f64 = next.iter().zip(&w).map(|(a, b)| a * b).sum();
            w = next;
            if (1.0 - agreement.abs()) < tol {
                break;
            }
        }
        found.push(w);
    }
    Matrix::from_rows(&found).expect("square rotation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    fn frobenius_from_identity(m: &Matrix) -> f64 {
        let mut s = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let t = if i == j { 1.0 } else { 0.0 };
                s += (m.get(i, j) - t).powi(2);
            }
        }
        s.sqrt()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        Matrix::new(rows, cols, (0..rows * cols).map(|_| nrm.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn one_dimensional_variance_four() {
        let x = Matrix::new(4, 1, vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        let m = fit_whitening(&x, 1, WhiteningMode::Pca).unwrap();
        assert!((m.w.get(0, 0).abs() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn random_patches_whiten_to_identity() {
        let mut x = gaussian(100, 6, 3);
        // correlate the columns
        for r in 0..100 {
            let row = x.row_mut(r);
            row[1] += 2.0 * row[0];
            row[4] = 0.5 * row[4] + row[2] + 3.0;
        }
        for mode in [WhiteningMode::Pca, WhiteningMode::Ica] {
            let m = fit_whitening(&x, 4, mode).unwrap();
            let y = m.apply(&x).unwrap();
            assert!(frobenius_from_identity(&covariance(&y)) <= 1e-8, "{mode:?}");
            assert_eq!(m.retained_dims(), 4);
        }
        let full = fit_whitening(&x, 6, WhiteningMode::Pca).unwrap();
        assert!(frobenius_from_identity(&covariance(&full.apply(&x).unwrap())) <= 1e-8);
        assert!(full.spectrum.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn whitened_input_stays_whitened() {
        let x = fit_whitening(&gaussian(500, 5, 1), 5, WhiteningMode::Pca)
            .unwrap()
            .apply(&gaussian(500, 5, 1))
            .unwrap();
        let m = fit_whitening(&x, 5, WhiteningMode::Pca).unwrap();
        let wwt = m.w.matmul_transposed(&m.w).unwrap();
        assert!(frobenius_from_identity(&wwt) < 1e-8);
    }

    #[test]
    fn ica_unmixes_uniform_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let n = 4000;
        let mut x = Matrix::zeros(n, 2);
        for r in 0..n {
            let (a, b): (f64, f64) = (u.sample(&mut rng), u.sample(&mut rng));
            x.row_mut(r).copy_from_slice(&[a + 0.6 * b, 0.4 * a - b]);
        }
        let m = fit_whitening(&x, 2, WhiteningMode::Ica).unwrap();
        // each recovered direction should be close to a scaled source axis of
        // the inverse mixing matrix: check the rows of W A are nearly signed
        // permutation rows
        let a = Matrix::from_rows(&[vec![1.0, 0.6], vec![0.4, -1.0]]).unwrap();
        let wa = m.w.matmul(&a).unwrap();
        for r in 0..2 {
            let row = wa.row(r);
            let big = row[0].abs().max(row[1].abs());
            let small = row[0].abs().min(row[1].abs());
            assert!(small / big < 0.05, "{row:?}");
        }
    }

    #[test]
    fn errors() {
        assert!(fit_whitening(&gaussian(3, 4, 0), 2, WhiteningMode::Pca).is_err());
        assert!(fit_whitening(&gaussian(30, 4, 0), 5, WhiteningMode::Pca).is_err());
        let mut bad = gaussian(30, 2, 0);
        bad.set(0, 0, f64::NAN);
        assert!(matches!(fit_whitening(&bad, 1, WhiteningMode::Pca), Err(Error::NonFinite(_))));
    }
}
