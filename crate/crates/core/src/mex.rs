//! The MEX (log-mean-exp) operator.
//!
//! `MEX_b{c_i} = (1/b) log((1/n) sum_i exp(b c_i))` moves from min (`b -> -inf`)
//! through mean (`b = 0`) to max (`b -> +inf`). Every evaluation here is shifted
//! by the extreme value in the direction of `b` and accumulated with
//! `expm1`/`ln_1p`, so large `|b c|` cannot overflow and small `b` keeps full
//! precision right down to the switch to the average branch.

use crate::error::{Error, Result};
use crate::tensor::{PatchGeometry, Tensor3};

/// Below this `|beta|` MEX is evaluated as its `beta -> 0` limit, the mean.
pub const BETA_SWITCH: f64 = 1e-8;

/// A MEX unit: temperature plus optional per-input offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct MexUnit {
    pub beta: f64,
    pub offsets: Option<Vec<f64>>,
}

impl MexUnit {
    pub fn new(beta: f64, offsets: Option<Vec<f64>>) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("MEX beta must be finite, got {beta}")));
        }
        if let Some(b) = &offsets {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("MEX offsets must be finite".into()));
            }
        }
        Ok(Self { beta, offsets })
    }
}

/// Value and derivatives of one MEX evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MexEval {
    pub value: f64,
    /// `dMEX/dc_i`: softmax weights at temperature `beta`.
    pub weights: Vec<f64>,
    /// `dMEX/dbeta`.
    pub dbeta: f64,
}

fn validate(values: &[f64], beta: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Empty("MEX over zero values".into()));
    }
    if !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("MEX beta must be finite, got {beta}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("MEX input {i} is {}", values[i])));
    }
    Ok(())
}

#[inline]
fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Unchecked MEX value. `values` must be non-empty and finite.
#[inline]
pub(crate) fn mex_value(values: &[f64], beta: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let (lo, hi) = min_max(values);
    if lo == hi {
        return lo;
    }
    if beta.abs() < BETA_SWITCH {
        return (values.iter().sum::<f64>() / n as f64).clamp(lo, hi);
    }
    let anchor = if beta > 0.0 { hi } else { lo };
    let s: f64 = values.iter().map(|&c| (beta * (c - anchor)).exp_m1()).sum::<f64>() / n as f64;
    (anchor + s.ln_1p() / beta).clamp(lo, hi)
}

/// Unchecked MEX value with weights written into `weights`; returns
/// `(value, dMEX/dbeta)`.
pub(crate) fn mex_eval_into(values: &[f64], beta: f64, weights: &mut [f64]) -> (f64, f64) {
    let n = values.len();
    debug_assert_eq!(weights.len(), n);
    let inv_n = 1.0 / n as f64;
    let (lo, hi) = min_max(values);
    if n == 1 || lo == hi || beta.abs() < BETA_SWITCH {
        weights.iter_mut().for_each(|w| *w = inv_n);
        if n == 1 || lo == hi {
            return (if n == 1 { values[0] } else { lo }, 0.0);
        }
        let mean = values.iter().sum::<f64>() * inv_n;
        let var = values.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() * inv_n;
        // Second-order expansion around beta = 0: MEX ~ mean + beta var / 2.
        return (mean.clamp(lo, hi), 0.5 * var);
    }
    let anchor = if beta > 0.0 { hi } else { lo };
    let mut sum_m1 = 0.0;
    for (w, &c) in weights.iter_mut().zip(values) {
        let e = (beta * (c - anchor)).exp_m1();
        sum_m1 += e;
        *w = e + 1.0;
    }
    let total: f64 = weights.iter().sum();
    let shift = (sum_m1 * inv_n).ln_1p() / beta;
    let mut weighted = 0.0;
    for (w, &c) in weights.iter_mut().zip(values) {
        *w /= total;
        weighted += *w * (c - anchor);
    }
    let value = (anchor + shift).clamp(lo, hi);
    (value, (weighted - shift) / beta)
}

/// MEX over `values` at temperature `beta`.
pub fn mex(values: &[f64], beta: f64) -> Result<f64> {
    validate(values, beta)?;
    Ok(mex_value(values, beta))
}

/// `MEX_beta{x_i + b_i}`; absent offsets act as zeros.
pub fn mex_with_offsets(x: &[f64], unit: &MexUnit) -> Result<f64> {
    match &unit.offsets {
        None => mex(x, unit.beta),
        Some(b) => {
            if b.len() != x.len() {
                return Err(Error::Shape(format!(
                    "MEX offsets have length {}, input has {}",
                    b.len(),
                    x.len()
                )));
            }
            let shifted: Vec<f64> = x.iter().zip(b).map(|(a, o)| a + o).collect();
            mex(&shifted, unit.beta)
        }
    }
}

/// Gradient of MEX with respect to its inputs.
pub fn mex_grad(values: &[f64], beta: f64) -> Result<Vec<f64>> {
    Ok(mex_eval(values, beta)?.weights)
}

/// Value, input gradient and temperature gradient in one pass.
pub fn mex_eval(values: &[f64], beta: f64) -> Result<MexEval> {
    validate(values, beta)?;
    let mut weights = vec![0.0; values.len()];
    let (value, dbeta) = mex_eval_into(values, beta, &mut weights);
    Ok(MexEval {
        value,
        weights,
        dbeta,
    })
}

/// Spatial MEX pooling, applied per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSpec {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub beta: f64,
    /// Pool the whole map into `1 x 1`; window and stride are ignored.
    pub global: bool,
}

impl PoolSpec {
    pub fn local(window: usize, stride: usize, beta: f64) -> Self {
        Self {
            window_h: window,
            window_w: window,
            stride_h: stride,
            stride_w: stride,
            beta,
            global: false,
        }
    }

    pub fn global(beta: f64) -> Self {
        Self {
            window_h: 1,
            window_w: 1,
            stride_h: 1,
            stride_w: 1,
            beta,
            global: true,
        }
    }

    fn geometry(&self, in_h: usize, in_w: usize) -> PatchGeometry {
        if self.global {
            PatchGeometry::new(in_h, in_w, 1, 1, 0)
        } else {
            PatchGeometry::new(self.window_h, self.window_w, self.stride_h, self.stride_w, 0)
        }
    }

    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.geometry(in_h, in_w).output_dims(in_h, in_w)
    }

    /// Number of values each output cell summarizes.
    pub fn window_len(&self, in_h: usize, in_w: usize) -> usize {
        let g = self.geometry(in_h, in_w);
        g.field_h * g.field_w
    }
}

fn gather_window(input: &Tensor3, g: &PatchGeometry, oi: usize, oj: usize, ch: usize, buf: &mut Vec<f64>) {
    buf.clear();
    for a in 0..g.field_h {
        for b in 0..g.field_w {
            buf.push(input.get(oi * g.stride_h + a, oj * g.stride_w + b, ch));
        }
    }
}

/// MEX pooling of every channel of `input`.
pub fn mex_pool(input: &Tensor3, spec: &PoolSpec) -> Result<Tensor3> {
    if !spec.beta.is_finite() {
        return Err(Error::InvalidParameter("pool beta must be finite".into()));
    }
    let (h, w, c) = input.dims();
    let g = spec.geometry(h, w);
    let (oh, ow) = g.output_dims(h, w)?;
    let mut out = vec![0.0; oh * ow * c];
    let mut buf = Vec::with_capacity(g.field_h * g.field_w);
    for oi in 0..oh {
        for oj in 0..ow {
            for ch in 0..c {
                gather_window(input, &g, oi, oj, ch, &mut buf);
                out[(oi * ow + oj) * c + ch] = mex_value(&buf, spec.beta);
            }
        }
    }
    Ok(Tensor3::from_raw(oh, ow, c, out))
}

/// Backward of [`mex_pool`]: returns the input gradient and `dL/dbeta`.
pub fn mex_pool_backward(input: &Tensor3, spec: &PoolSpec, upstream: &Tensor3) -> Result<(Tensor3, f64)> {
    let (h, w, c) = input.dims();
    let g = spec.geometry(h, w);
    let (oh, ow) = g.output_dims(h, w)?;
    if upstream.dims() != (oh, ow, c) {
        return Err(Error::Shape(format!(
            "pool upstream {:?}, expected {:?}",
            upstream.dims(),
            (oh, ow, c)
        )));
    }
    let mut grad = Tensor3::zeros(h, w, c);
    let mut dbeta_total = 0.0;
    let mut buf = Vec::with_capacity(g.field_h * g.field_w);
    let mut weights = vec![0.0; g.field_h * g.field_w];
    for oi in 0..oh {
        for oj in 0..ow {
            for ch in 0..c {
                let up = upstream.get(oi, oj, ch);
                if up == 0.0 {
                    continue;
                }
                gather_window(input, &g, oi, oj, ch, &mut buf);
                let (_, dbeta) = mex_eval_into(&buf, spec.beta, &mut weights);
                dbeta_total += up * dbeta;
                let mut k = 0;
                for a in 0..g.field_h {
                    for b in 0..g.field_w {
                        let idx = grad.index(oi * g.stride_h + a, oj * g.stride_w + b, ch);
                        grad.data_mut()[idx] += up * weights[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((grad, dbeta_total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Central finite differences of the public `mex`.
    fn fd_grad(values: &[f64], beta: f64, h: f64) -> Vec<f64> {
        (0..values.len())
            .map(|i| {
                let mut plus = values.to_vec();
                let mut minus = values.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (mex(&plus, beta).unwrap() - mex(&minus, beta).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn single_element_identity() {
        for beta in [-50.0, -1.0, 0.0, 1e-12, 2.5, 300.0] {
            assert_eq!(mex(&[1.25], beta).unwrap(), 1.25);
        }
    }

    #[test]
    fn constant_input() {
        assert_eq!(mex(&[5.0, 5.0, 5.0], 3.7).unwrap(), 5.0);
    }

    #[test]
    fn log_two_example() {
        // (1/1) ln((e^0 + e^{ln 3}) / 2) = ln 2
        let v = mex(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((v - 0.693_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn average_limit() {
        assert_eq!(mex(&[1.0, 2.0, 3.0], 1e-12).unwrap(), 2.0);
    }

    #[test]
    fn offsets() {
        let zero = MexUnit::new(1.0, Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(
            mex_with_offsets(&[1.0, 2.0], &zero).unwrap(),
            mex(&[1.0, 2.0], 1.0).unwrap()
        );
        let ln3 = MexUnit::new(1.0, Some(vec![0.0, 3f64.ln()])).unwrap();
        assert!((mex_with_offsets(&[0.0, 0.0], &ln3).unwrap() - 2f64.ln()).abs() < 1e-15);
        let b = vec![0.3, -1.7, 2.2];
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        for beta in [-3.0, 0.0, 0.5, 40.0] {
            let unit = MexUnit::new(beta, Some(b.clone())).unwrap();
            assert_eq!(mex_with_offsets(&neg, &unit).unwrap(), 0.0);
        }
        let short = MexUnit::new(1.0, Some(vec![0.0])).unwrap();
        assert!(matches!(mex_with_offsets(&[1.0, 2.0], &short), Err(Error::Shape(_))));
    }

    #[test]
    fn errors() {
        assert!(matches!(mex(&[], 1.0), Err(Error::Empty(_))));
        assert!(matches!(mex(&[1.0, f64::NAN], 1.0), Err(Error::NonFinite(_))));
        assert!(matches!(mex(&[1.0, f64::INFINITY], 1.0), Err(Error::NonFinite(_))));
        assert!(MexUnit::new(f64::NAN, None).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = mex_grad(&[2.0, 2.0, 2.0, 2.0], 7.0).unwrap();
        assert!(g.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let g = mex_grad(&[-4.0, 1.0, 9.0], 1e-12).unwrap();
        assert!(g.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let values = [0.0, 3f64.ln()];
        let g = mex_grad(&values, 1.0).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] - 0.75).abs() < 1e-15);
        let fd = fd_grad(&values, 1.0, 1e-6);
        for (a, f) in g.iter().zip(&fd) {
            assert!((a - f).abs() / a.abs() < 1e-6);
        }
    }

    #[test]
    fn beta_gradient_matches_finite_differences() {
        let values = [0.3, -1.2, 2.5, 0.9];
        for beta in [-2.0, -0.3, 1e-3, 0.7, 4.0] {
            let a = mex_eval(&values, beta).unwrap().dbeta;
            let h = 1e-6;
            let f = (mex(&values, beta + h).unwrap() - mex(&values, beta - h).unwrap()) / (2.0 * h);
            assert!((a - f).abs() / a.abs().max(1e-8) < 1e-5, "beta={beta}: {a} vs {f}");
        }
        // At beta = 0 the derivative is half the population variance.
        let mean = values.iter().sum::<f64>() / 4.0;
        let var = values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((mex_eval(&values, 0.0).unwrap().dbeta - var / 2.0).abs() < 1e-15);
        let f = (mex(&values, 1e-4).unwrap() - mex(&values, -1e-4).unwrap()) / 2e-4;
        assert!((f - var / 2.0).abs() < 1e-6);
    }

    #[test]
    fn overflow_safety() {
        let v = mex(&[1e6, -1e6, 3.0], 50.0).unwrap();
        assert!(v.is_finite());
        let v = mex(&[1e6, -1e6, 3.0], -50.0).unwrap();
        assert!(v.is_finite());
        let g = mex_eval(&[1e6, -1e6, 3.0], 50.0).unwrap();
        assert!(g.weights.iter().all(|w| w.is_finite()) && g.dbeta.is_finite());
    }

    #[test]
    fn pool_examples() {
        let t = Tensor3::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let avg = mex_pool(&t, &PoolSpec::global(1e-12)).unwrap();
        assert_eq!(avg.dims(), (1, 1, 1));
        assert_eq!(avg.data()[0], 2.5);
        let mx = mex_pool(&t, &PoolSpec::global(100.0)).unwrap();
        assert!(4.0 - mx.data()[0] <= 4f64.ln() / 100.0 + 1e-12);
        assert!((mx.data()[0] - 4.0).abs() < 0.05);
        let z = mex_pool(&Tensor3::zeros(4, 4, 1), &PoolSpec::local(2, 2, 3.3)).unwrap();
        assert_eq!(z.dims(), (2, 2, 1));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_geometry_error() {
        let t = Tensor3::zeros(2, 2, 1);
        assert!(matches!(mex_pool(&t, &PoolSpec::local(3, 1, 1.0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let data: Vec<f64> = (0..5 * 4 * 2).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.4).collect();
        let t = Tensor3::new(5, 4, 2, data).unwrap();
        let spec = PoolSpec::local(3, 2, 1.7);
        let out = mex_pool(&t, &spec).unwrap();
        let up_data: Vec<f64> = (0..out.len()).map(|i| 0.5 + i as f64 * 0.25).collect();
        let up = Tensor3::new(out.height(), out.width(), out.channels(), up_data).unwrap();
        let loss = |x: &Tensor3, beta: f64| {
            let s = PoolSpec { beta, ..spec };
            let o = mex_pool(x, &s).unwrap();
            o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gx, gb) = mex_pool_backward(&t, &spec, &up).unwrap();
        let h = 1e-6;
        for i in 0..t.len() {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            let f = (loss(&p, spec.beta) - loss(&m, spec.beta)) / (2.0 * h);
            assert!((gx.data()[i] - f).abs() < 1e-7);
        }
        let f = (loss(&t, spec.beta + h) - loss(&t, spec.beta - h)) / (2.0 * h);
        assert!((gb - f).abs() / gb.abs() < 1e-5);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 1..12)
    }

    proptest! {
        #[test]
        fn bounded_by_min_and_max(v in vec_strategy(), beta in -100.0f64..100.0) {
            let m = mex(&v, beta).unwrap();
            let (lo, hi) = min_max(&v);
            prop_assert!(lo <= m && m <= hi);
        }

        #[test]
        fn monotone_in_beta(v in vec_strategy(), b1 in -100.0f64..100.0, b2 in -100.0f64..100.0) {
            let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
            prop_assert!(mex(&v, lo).unwrap() <= mex(&v, hi).unwrap() + 1e-12);
        }

        #[test]
        fn collapsing(rows in 1usize..6, cols in 1usize..6, seed in prop::collection::vec(-10.0f64..10.0, 36),
                      beta in prop_oneof![-30.0f64..-1e-3, 1e-3f64..30.0]) {
            let grid: Vec<Vec<f64>> = (0..rows).map(|i| seed[i * 6..i * 6 + cols].to_vec()).collect();
            let inner: Vec<f64> = grid.iter().map(|r| mex(r, beta).unwrap()).collect();
            let flat: Vec<f64> = grid.concat();
            prop_assert!((mex(&inner, beta).unwrap() - mex(&flat, beta).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn close_to_max_and_mean(v in vec_strategy(), beta in 0.1f64..100.0) {
            let n = v.len() as f64;
            let (lo, hi) = min_max(&v);
            prop_assert!(hi - mex(&v, beta).unwrap() <= n.ln() / beta + 1e-12);
            let mean = v.iter().sum::<f64>() / n;
            prop_assert!((mex(&v, 1e-6).unwrap() - mean).abs() <= 1e-4 * (hi - lo) + 1e-15);
        }

        #[test]
        fn translation(v in vec_strategy(), beta in -50.0f64..50.0, t in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|c| c + t).collect();
            prop_assert!((mex(&shifted, beta).unwrap() - mex(&v, beta).unwrap() - t).abs() <= 1e-9);
        }

        #[test]
        fn gradient_is_probability_vector(v in vec_strategy(), beta in -50.0f64..50.0) {
            let g = mex_grad(&v, beta).unwrap();
            prop_assert!(g.iter().all(|&w| w >= 0.0));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(v in prop::collection::vec(-3.0f64..3.0, 2..8), beta in -5.0f64..5.0) {
            let g = mex_grad(&v, beta).unwrap();
            let fd = fd_grad(&v, beta, 1e-6);
            for (a, f) in g.iter().zip(&fd) {
                prop_assert!((a - f).abs() / a.abs().max(f.abs()).max(1e-8) <= 1e-5 || (a - f).abs() < 1e-9);
            }
        }
    }
}
