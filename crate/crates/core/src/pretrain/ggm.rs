//! Mixtures of axis-aligned generalized Gaussians and their EM fit.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::similarity::pow_abs;
use crate::tensor::Matrix;

/// Smallest scale the M-step may produce.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Search interval of a learned shape.
pub const SHAPE_RANGE: (f64, f64) = (0.3, 4.0);
/// A component whose total responsibility falls below this is re-seeded.
pub const DEGENERATE_MASS: f64 = 1e-8;
const MAX_RESEEDS: usize = 3;
const SHAPE_SEARCH_ROWS: usize = 5000;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` by the Lanczos approximation (g = 7, 9 terms),
/// with the reflection formula below 1/2. Relative error is below 1e-13 on
/// the shapes used here.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `P(y) = sum_l lambda_l prod_t beta / (2 alpha_lt Gamma(1/beta)) exp(-(|y_t - mu_lt| / alpha_lt)^beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GgMixture {
    priors: Vec<f64>,
    means: Matrix,
    scales: Matrix,
    shape: f64,
}

impl GgMixture {
    pub fn new(priors: Vec<f64>, means: Matrix, scales: Matrix, shape: f64) -> Result<Self> {
        let n = priors.len();
        if n == 0 || means.rows() != n || scales.rows() != n || scales.cols() != means.cols() {
            return Err(Error::Shape(format!(
                "{n} priors, means {}x{}, scales {}x{}",
                means.rows(),
                means.cols(),
                scales.rows(),
                scales.cols()
            )));
        }
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("priors must be a probability vector".into()));
        }
        if scales.data().iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidParameter("scales must be positive".into()));
        }
        if !means.all_finite() {
            return Err(Error::NonFinite("mixture means".into()));
        }
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidParameter(format!("shape must be positive, got {shape}")));
        }
        Ok(Self {
            priors,
            means,
            scales,
            shape,
        })
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn scales(&self) -> &Matrix {
        &self.scales
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn n_components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// `c_l = ln lambda_l + sum_t (ln beta - ln 2 - ln alpha_lt - ln Gamma(1/beta))`.
    pub fn log_constants(&self) -> Vec<f64> {
        let b = self.shape;
        let per_coord = b.ln() - std::f64::consts::LN_2 - ln_gamma(1.0 / b);
        (0..self.n_components())
            .map(|l| {
                self.priors[l].ln() + self.scales.row(l).iter().map(|a| per_coord - a.ln()).sum::<f64>()
            })
            .collect()
    }

    fn inverse_scale_powers(&self) -> Matrix {
        let data = self.scales.data().iter().map(|a| a.powf(-self.shape)).collect();
        Matrix::new(self.scales.rows(), self.scales.cols(), data).expect("same shape")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Joint log-densities `ln P(y, l)` into `out`; returns `ln P(y)`.
fn joint_into(y: &[f64], mix: &GgMixture, consts: &[f64], inv: &Matrix, out: &mut [f64]) -> f64 {
    let b = mix.shape;
    for (l, o) in out.iter_mut().enumerate() {
        let mu = mix.means.row(l);
        let w = inv.row(l);
        let e: f64 = (0..y.len()).map(|t| w[t] * pow_abs(y[t] - mu[t], b)).sum();
        *o = consts[l] - e;
    }
    log_sum_exp(out)
}

/// Total log-density of `y` and the per-component joints `ln P(y, comp l)`.
pub fn ggm_log_density(y: &[f64], mix: &GgMixture) -> Result<(f64, Vec<f64>)> {
    if y.len() != mix.dim() {
        return Err(Error::Shape(format!("mixture over {} dims, point has {}", mix.dim(), y.len())));
    }
    let mut joint = vec![0.0; mix.n_components()];
    let total = joint_into(y, mix, &mix.log_constants(), &mix.inverse_scale_powers(), &mut joint);
    Ok((total, joint))
}

/// Posterior component probabilities of every row, and the total log-likelihood.
pub fn responsibilities(data: &Matrix, mix: &GgMixture) -> Result<(Matrix, f64)> {
    if data.cols() != mix.dim() {
        return Err(Error::Shape(format!("mixture over {} dims, data has {}", mix.dim(), data.cols())));
    }
    let consts = mix.log_constants();
    let inv = mix.inverse_scale_powers();
    let n = mix.n_components();
    let mut r = Matrix::zeros(data.rows(), n);
    let mut ll = 0.0;
    for i in 0..data.rows() {
        let row = r.row_mut(i);
        let total = joint_into(data.row(i), mix, &consts, &inv, row);
        ll += total;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - total).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok((r, ll))
}

fn log_likelihood(data: &Matrix, rows: &[usize], mix: &GgMixture) -> f64 {
    let consts = mix.log_constants();
    let inv = mix.inverse_scale_powers();
    let mut buf = vec![0.0; mix.n_components()];
    rows.iter().map(|&i| joint_into(data.row(i), mix, &consts, &inv, &mut buf)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeMode {
    Fixed(f64),
    /// Searched over [`SHAPE_RANGE`] once per iteration.
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop when the improvement falls below `tolerance * |LL|`; `None` runs
    /// every iteration.
    pub tolerance: Option<f64>,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tolerance: Some(1e-7),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GgMixture,
    /// Log-likelihood after initialization and after every iteration.
    pub ll_trace: Vec<f64>,
    pub reseeds: usize,
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`.
fn golden_section(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

fn weighted_median(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for &(v, w) in pairs.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return v;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

/// `argmin_mu sum_i w_i |y_i - mu|^beta`, never worse than `current`.
fn fit_location(ys: &[f64], ws: &[f64], beta: f64, current: f64) -> f64 {
    let objective = |mu: f64| -> f64 { ys.iter().zip(ws).map(|(y, w)| w * pow_abs(y - mu, beta)).sum() };
    let candidate = if beta == 2.0 {
        let total: f64 = ws.iter().sum();
        ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / total
    } else if beta == 1.0 {
        let mut pairs: Vec<(f64, f64)> = ys.iter().copied().zip(ws.iter().copied()).collect();
        weighted_median(&mut pairs)
    } else {
        let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        if hi - lo <= 0.0 {
            lo
        } else {
            golden_section(lo, hi, 1e-9 * (hi - lo).max(1e-12), objective)
        }
    };
    if objective(candidate) <= objective(current) {
        candidate
    } else {
        current
    }
}

fn scale_for(ys: &[f64], ws: &[f64], mu: f64, beta: f64) -> f64 {
    let total: f64 = ws.iter().sum();
    let s: f64 = ys.iter().zip(ws).map(|(y, w)| w * pow_abs(y - mu, beta)).sum();
    (beta * s / total).powf(1.0 / beta).max(ALPHA_FLOOR)
}

/// Component rows with non-negligible responsibility, for the M-step sums.
fn active_rows(r: &Matrix, l: usize) -> Vec<usize> {
    (0..r.rows()).filter(|&i| r.get(i, l) > 1e-14).collect()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn seed_means(data: &Matrix, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let rows = data.rows();
    let mut centers: Vec<usize> = vec![rng.random_range(0..rows)];
    let dist = |i: usize, c: usize| -> f64 {
        data.row(i).iter().zip(data.row(c)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut nearest: Vec<f64> = (0..rows).map(|i| dist(i, centers[0])).collect();
    while centers.len() < n {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = rows - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..rows)
        };
        centers.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(i, next));
        }
    }
    let flat: Vec<f64> = centers.iter().flat_map(|&c| data.row(c).to_vec()).collect();
    Matrix::new(n, data.cols(), flat).expect("n x d")
}

/// Fits an `n`-component mixture to the rows of `data` by EM.
pub fn ggm_fit_em(data: &Matrix, n: usize, shape_mode: ShapeMode, options: &EmOptions) -> Result<EmFit> {
    let (rows, d) = (data.rows(), data.cols());
    if n == 0 || d == 0 {
        return Err(Error::Shape(format!("cannot fit {n} components over {d} dims")));
    }
    if rows < n {
        return Err(Error::Fit(format!("{n} components need at least {n} rows, got {rows}")));
    }
    if !data.all_finite() {
        return Err(Error::NonFinite("mixture data".into()));
    }
    let mut shape = match shape_mode {
        ShapeMode::Fixed(b) if b > 0.0 && b.is_finite() => b,
        ShapeMode::Fixed(b) => return Err(Error::InvalidParameter(format!("shape must be positive, got {b}"))),
        ShapeMode::Learned => 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    // global per-coordinate spread, used for initial and re-seeded scales
    let all: Vec<usize> = (0..rows).collect();
    let ones = vec![1.0; rows];
    let column = |t: usize| -> Vec<f64> { (0..rows).map(|i| data.get(i, t)).collect() };
    let global_scale = |shape: f64| -> Vec<f64> {
        (0..d)
            .map(|t| {
                let ys = column(t);
                let mean = ys.iter().sum::<f64>() / rows as f64;
                scale_for(&ys, &ones, mean, shape)
            })
            .collect()
    };
    let base_scale = global_scale(shape);

    let means = seed_means(data, n, &mut rng);
    let scales = Matrix::new(n, d, (0..n).flat_map(|_| base_scale.clone()).collect())?;
    let mut mix = GgMixture::new(vec![1.0 / n as f64; n], means, scales, shape)?;
    let (mut resp, mut ll) = responsibilities(data, &mix)?;
    let mut trace = vec![ll];
    let mut reseed_counts = vec![0usize; n];

    let shape_rows: Vec<usize> = if rows > SHAPE_SEARCH_ROWS {
        let mut s = sample(&mut rng, rows, SHAPE_SEARCH_ROWS).into_vec();
        s.sort_unstable();
        s
    } else {
        all.clone()
    };

    for _ in 0..options.max_iters {
        // degenerate components: re-seed from a random row
        let mut reseeded = false;
        for l in 0..n {
            let mass: f64 = (0..rows).map(|i| resp.get(i, l)).sum();
            if mass < DEGENERATE_MASS {
                reseed_counts[l] += 1;
                if reseed_counts[l] > MAX_RESEEDS {
                    return Err(Error::Fit(format!(
                        "component {l} stayed degenerate after {MAX_RESEEDS} re-seeds"
                    )));
                }
                let pick = rng.random_range(0..rows);
                let row = data.row(pick).to_vec();
                mix.means.row_mut(l).copy_from_slice(&row);
                mix.scales.row_mut(l).copy_from_slice(&global_scale(shape));
                mix.priors[l] = 1.0 / n as f64;
                reseeded = true;
            }
        }
        if reseeded {
            let total: f64 = mix.priors.iter().sum();
            mix.priors.iter_mut().for_each(|p| *p /= total);
            (resp, _) = responsibilities(data, &mix)?;
        }

        // M-step
        let mut priors = vec![0.0; n];
        for (l, prior) in priors.iter_mut().enumerate() {
            let active = active_rows(&resp, l);
            let ws: Vec<f64> = active.iter().map(|&i| resp.get(i, l)).collect();
            *prior = ws.iter().sum::<f64>();
            if active.is_empty() {
                continue;
            }
            for t in 0..d {
                let ys: Vec<f64> = active.iter().map(|&i| data.get(i, t)).collect();
                let mu = fit_location(&ys, &ws, shape, mix.means.get(l, t));
                mix.means.set(l, t, mu);
                mix.scales.set(l, t, scale_for(&ys, &ws, mu, shape));
            }
        }
        let total: f64 = priors.iter().sum();
        for (dst, p) in mix.priors.iter_mut().zip(&priors) {
            *dst = p / total;
        }

        if shape_mode == ShapeMode::Learned {
            let resp_ref = &resp;
            let refit = |b: f64, base: &GgMixture| -> GgMixture {
                let mut m = base.clone();
                m.shape = b;
                for l in 0..n {
                    let active = active_rows(resp_ref, l);
                    if active.is_empty() {
                        continue;
                    }
                    let ws: Vec<f64> = active.iter().map(|&i| resp_ref.get(i, l)).collect();
                    for t in 0..d {
                        let ys: Vec<f64> = active.iter().map(|&i| data.get(i, t)).collect();
                        m.scales.set(l, t, scale_for(&ys, &ws, m.means.get(l, t), b));
                    }
                }
                m
            };
            let best = golden_section(SHAPE_RANGE.0, SHAPE_RANGE.1, 1e-4, |b| {
                -log_likelihood(data, &shape_rows, &refit(b, &mix))
            });
            let candidate = refit(best, &mix);
            if log_likelihood(data, &all, &candidate) > log_likelihood(data, &all, &mix) {
                mix = candidate;
                shape = best;
            }
        }

        let (r, next) = responsibilities(data, &mix)?;
        resp = r;
        let improvement = next - ll;
        ll = next;
        trace.push(ll);
        if let Some(tol) = options.tolerance {
            if !reseeded && improvement.abs() < tol * ll.abs() {
                break;
            }
        }
    }
    Ok(EmFit {
        mixture: mix,
        ll_trace: trace,
        reseeds: reseed_counts.iter().sum(),
    })
}

/// Layer parameters read off a mixture: `z = mu`, `u = alpha^-beta`,
/// `p = beta`, `b_l = c_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitBundle {
    pub templates: Matrix,
    pub weights: Matrix,
    pub order_p: f64,
    pub biases: Vec<f64>,
}

pub fn mixture_to_init(mix: &GgMixture) -> InitBundle {
    InitBundle {
        templates: mix.means.clone(),
        weights: mix.inverse_scale_powers(),
        order_p: mix.shape,
        biases: mix.log_constants(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{similarity, SimilarityLayer};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn ln_gamma_reference_values() {
        let pi = std::f64::consts::PI;
        let cases = [
            (0.5, 0.5 * pi.ln()),
            (1.0, 0.0),
            (2.0, 0.0),
            (5.0, 24f64.ln()),
            (10.0, 362880f64.ln()),
            (1.0 / 3.0, 2.678_938_534_707_747_6f64.ln()),
            (0.25, 3.625_609_908_221_908_3f64.ln()),
            (1.5, (0.5 * pi.sqrt()).ln()),
            (1.0 / 0.3, 2.778_158_480_437_665f64.ln()),
        ];
        for (x, want) in cases {
            let got = ln_gamma(x);
            let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
            assert!(err <= 1e-10, "lnGamma({x}) = {got}, want {want}");
        }
    }

    fn unit_mixture(mu: Vec<f64>, alpha: Vec<f64>, shape: f64) -> GgMixture {
        let d = mu.len();
        GgMixture::new(vec![1.0], Matrix::new(1, d, mu).unwrap(), Matrix::new(1, d, alpha).unwrap(), shape).unwrap()
    }

    #[test]
    fn gaussian_and_laplace_special_cases() {
        let sigma = [0.7, 1.9];
        let mu = vec![0.3, -1.0];
        let mix = unit_mixture(mu.clone(), sigma.iter().map(|s| std::f64::consts::SQRT_2 * s).collect(), 2.0);
        let y = [1.2, 0.4];
        let want: f64 = (0..2)
            .map(|t| {
                let z = (y[t] - mu[t]) / sigma[t];
                -0.5 * z * z - sigma[t].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        assert!((ggm_log_density(&y, &mix).unwrap().0 - want).abs() <= 1e-10);

        let b = [0.5, 2.0];
        let mix = unit_mixture(mu.clone(), b.to_vec(), 1.0);
        let want: f64 = (0..2).map(|t| -(y[t] - mu[t]).abs() / b[t] - (2.0 * b[t]).ln()).sum();
        assert!((ggm_log_density(&y, &mix).unwrap().0 - want).abs() <= 1e-10);

        let (_, joint) = ggm_log_density(&mu, &mix).unwrap();
        assert!((joint[0] - mix.log_constants()[0]).abs() < 1e-15);
        assert!(ggm_log_density(&[1.0], &mix).is_err());
    }

    fn random_mixture(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GgMixture {
        let mut priors: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= s);
        let means = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let scales = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap();
        GgMixture::new(priors, means, scales, rng.random_range(0.3..4.0)).unwrap()
    }

    #[test]
    fn heat_map_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (n, d) = (rng.random_range(1..5), rng.random_range(1..6));
            let mix = random_mixture(&mut rng, n, d);
            let init = mixture_to_init(&mix);
            let layer = SimilarityLayer::lp_vectors(init.templates.clone(), Some(init.weights.clone()), init.order_p).unwrap();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, joint) = ggm_log_density(&y, &mix).unwrap();
            for l in 0..n {
                let h = similarity(&y, &layer, l).unwrap() + init.biases[l];
                assert!((h - joint[l]).abs() <= 1e-10, "{h} vs {}", joint[l]);
            }
        }
    }

    #[test]
    fn init_examples() {
        let mix = unit_mixture(vec![0.0; 3], vec![1.0; 3], 1.7);
        assert!(mixture_to_init(&mix).weights.data().iter().all(|u| *u == 1.0));
        let mix = unit_mixture(vec![0.0; 2], vec![std::f64::consts::SQRT_2; 2], 2.0);
        assert!(mixture_to_init(&mix).weights.data().iter().all(|u| (u - 0.5).abs() < 1e-15));
    }

    fn normal_data(rows: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        Matrix::new(rows, d, (0..rows * d).map(|i| 1.5 * nrm.sample(&mut rng) + (i % d) as f64).collect()).unwrap()
    }

    #[test]
    fn single_gaussian_is_closed_form() {
        let x = normal_data(500, 3, 1);
        let fit = ggm_fit_em(&x, 1, ShapeMode::Fixed(2.0), &EmOptions::default()).unwrap();
        for t in 0..3 {
            let col: Vec<f64> = (0..500).map(|i| x.get(i, t)).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0).sqrt();
            assert!((fit.mixture.means().get(0, t) - mean).abs() < 1e-10);
            assert!((fit.mixture.scales().get(0, t) - std::f64::consts::SQRT_2 * std).abs() < 1e-10);
        }
    }

    fn two_bumps(seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // alpha = 0.5 at shape 2 is sigma = 0.5 / sqrt 2
        let nrm = Normal::new(0.0, 0.5 / std::f64::consts::SQRT_2).unwrap();
        let data = (0..2000)
            .map(|_| {
                let c = if rng.random_bool(0.5) { 3.0 } else { -3.0 };
                c + nrm.sample(&mut rng)
            })
            .collect();
        Matrix::new(2000, 1, data).unwrap()
    }

    #[test]
    fn recovers_two_component_mixture() {
        let fit = ggm_fit_em(&two_bumps(4), 2, ShapeMode::Fixed(2.0), &EmOptions::default()).unwrap();
        let m = &fit.mixture;
        let (lo, hi) = if m.means().get(0, 0) < m.means().get(1, 0) { (0, 1) } else { (1, 0) };
        assert!((m.means().get(lo, 0) + 3.0).abs() < 0.15);
        assert!((m.means().get(hi, 0) - 3.0).abs() < 0.15);
        assert!((m.priors()[lo] - 0.5).abs() < 0.05 && (m.priors()[hi] - 0.5).abs() < 0.05);
        let learned = ggm_fit_em(&two_bumps(4), 2, ShapeMode::Learned, &EmOptions::default()).unwrap();
        assert!((1.5..2.6).contains(&learned.mixture.shape()), "{}", learned.mixture.shape());
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for (seed, shape) in [(1, 2.0), (2, 1.0), (3, 1.5), (4, 0.8)] {
            let x = normal_data(300, 2, seed);
            let opts = EmOptions {
                max_iters: 60,
                tolerance: None,
                seed,
            };
            let fit = ggm_fit_em(&x, 3, ShapeMode::Fixed(shape), &opts).unwrap();
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "shape {shape}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn degenerate_points_hit_the_scale_floor() {
        let pts = [[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]];
        let x = Matrix::new(60, 2, (0..60).flat_map(|i| pts[i % 3].to_vec()).collect()).unwrap();
        let fit = ggm_fit_em(&x, 3, ShapeMode::Fixed(2.0), &EmOptions::default()).unwrap();
        for p in pts {
            assert!((0..3).any(|l| fit.mixture.means().row(l) == p));
        }
        assert!(fit.mixture.scales().data().iter().all(|a| *a == ALPHA_FLOOR));
        assert!(fit.ll_trace.last().unwrap() > fit.ll_trace.first().unwrap());
    }

    #[test]
    fn fit_errors() {
        assert!(ggm_fit_em(&normal_data(2, 2, 0), 3, ShapeMode::Fixed(2.0), &EmOptions::default()).is_err());
        assert!(ggm_fit_em(&normal_data(20, 2, 0), 2, ShapeMode::Fixed(-1.0), &EmOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn responsibility_rows_are_distributions(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mix = random_mixture(&mut rng, 4, 3);
            let x = Matrix::new(20, 3, (0..60).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
            let (r, _) = responsibilities(&x, &mix).unwrap();
            for i in 0..20 {
                let row = r.row(i);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn fitted_init_is_feasible(seed in 0u64..200) {
            let x = normal_data(80, 2, seed);
            let opts = EmOptions { max_iters: 5, tolerance: Some(1e-7), seed };
            let fit = ggm_fit_em(&x, 2, ShapeMode::Learned, &opts).unwrap();
            let init = mixture_to_init(&fit.mixture);
            prop_assert!(init.weights.data().iter().all(|u| *u > 0.0));
            prop_assert!((SHAPE_RANGE.0..=SHAPE_RANGE.1).contains(&init.order_p));
        }
    }
}
