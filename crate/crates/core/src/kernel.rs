//! Kernel-machine view of SimNet MLPs.
//!
//! A SimNet MLP with classification temperature `beta` is the machine
//! `h_r(x) = (1/beta) ln((1/n) sum_l alpha_rl K(x, z_l))` with
//! `alpha_rl = exp(beta b_rl)` and `K = exp(beta * similarity)`. Everything
//! here is computed through that form, in log space, without touching the
//! MEX code path, so the two can be checked against each other.

use crate::error::{Error, Result};
use crate::network::{MlpConvBlock, SimStage};
use crate::similarity::{SimilarityKind, SimilarityLayer};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `exp(beta sum_i u_i x_i z_i)`.
    Exponential,
    /// `exp(-beta sum_i u_i |x_i - z_i|^p)`.
    GeneralizedGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub beta: f64,
    pub order_p: f64,
    /// Per-template weights, `n x d`; `None` means all ones.
    pub weights: Option<Matrix>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, beta: f64, order_p: f64, weights: Option<Matrix>) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel beta must be positive, got {beta}")));
        }
        if kind == KernelKind::GeneralizedGaussian && !(order_p > 0.0 && order_p.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel order must be positive, got {order_p}")));
        }
        if let Some(u) = &weights {
            if u.data().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidParameter("kernel weights must be positive".into()));
            }
        }
        Ok(Self {
            kind,
            beta,
            order_p,
            weights,
        })
    }

    /// The kernel induced by a similarity layer at temperature `beta`.
    pub fn from_similarity(sim: &SimilarityLayer, beta: f64) -> Result<Self> {
        let kind = match sim.kind() {
            SimilarityKind::Linear => KernelKind::Exponential,
            SimilarityKind::Lp => KernelKind::GeneralizedGaussian,
        };
        Self::new(kind, beta, sim.order_p(), sim.weights().cloned())
    }

    fn template_weights(&self, l: usize) -> Option<&[f64]> {
        self.weights.as_ref().map(|u| u.row(l))
    }
}

/// `ln K(x, z)` for per-coordinate weights `u` (`None`: ones).
pub fn log_kernel(x: &[f64], z: &[f64], u: Option<&[f64]>, spec: &KernelSpec) -> Result<f64> {
    if x.len() != z.len() || u.is_some_and(|u| u.len() != x.len()) {
        return Err(Error::Shape(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            z.len()
        )));
    }
    let weight = |i: usize| u.map_or(1.0, |u| u[i]);
    let exponent: f64 = match spec.kind {
        KernelKind::Exponential => (0..x.len()).map(|i| weight(i) * x[i] * z[i]).sum(),
        KernelKind::GeneralizedGaussian => -(0..x.len())
            .map(|i| weight(i) * (x[i] - z[i]).abs().powf(spec.order_p))
            .sum::<f64>(),
    };
    Ok(spec.beta * exponent)
}

/// `K(x, z)`.
pub fn kernel_eval(x: &[f64], z: &[f64], u: Option<&[f64]>, spec: &KernelSpec) -> Result<f64> {
    Ok(log_kernel(x, z, u, spec)?.exp())
}

/// Templates and mixing coefficients `alpha_rl`, stored as `ln alpha_rl`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMachine {
    templates: Matrix,
    log_alpha: Matrix,
}

impl KernelMachine {
    /// `alpha` is `k x n` and must be positive.
    pub fn new(templates: Matrix, alpha: &Matrix) -> Result<Self> {
        if let Some(bad) = alpha.data().iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidParameter(format!("kernel coefficients must be positive, found {bad}")));
        }
        let log_alpha = Matrix::new(alpha.rows(), alpha.cols(), alpha.data().iter().map(|a| a.ln()).collect())?;
        Self::from_log_alpha(templates, log_alpha)
    }

    /// `alpha_rl = exp(beta b_rl)`, kept in log form so large offsets stay finite.
    pub fn from_offsets(templates: Matrix, offsets: &Matrix, beta: f64) -> Result<Self> {
        let log_alpha = Matrix::new(offsets.rows(), offsets.cols(), offsets.data().iter().map(|b| beta * b).collect())?;
        Self::from_log_alpha(templates, log_alpha)
    }

    fn from_log_alpha(templates: Matrix, log_alpha: Matrix) -> Result<Self> {
        if templates.rows() == 0 {
            return Err(Error::Shape("kernel machine needs at least one template".into()));
        }
        if log_alpha.cols() != templates.rows() {
            return Err(Error::Shape(format!(
                "{} coefficients per class for {} templates",
                log_alpha.cols(),
                templates.rows()
            )));
        }
        Ok(Self { templates, log_alpha })
    }

    pub fn n_templates(&self) -> usize {
        self.templates.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.log_alpha.rows()
    }

    pub fn templates(&self) -> &Matrix {
        &self.templates
    }

    pub fn alpha(&self) -> Matrix {
        let data = self.log_alpha.data().iter().map(|a| a.exp()).collect();
        Matrix::new(self.log_alpha.rows(), self.log_alpha.cols(), data).expect("same shape")
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `h_r(x) = (1/beta) ln((1/n) sum_l alpha_rl K(x, z_l))` for every class.
pub fn machine_output(x: &[f64], machine: &KernelMachine, spec: &KernelSpec) -> Result<Vec<f64>> {
    let n = machine.n_templates();
    let log_k: Vec<f64> = (0..n)
        .map(|l| log_kernel(x, machine.templates.row(l), spec.template_weights(l), spec))
        .collect::<Result<_>>()?;
    let mut terms = vec![0.0; n];
    Ok((0..machine.n_classes())
        .map(|r| {
            for (t, (a, k)) in terms.iter_mut().zip(machine.log_alpha.row(r).iter().zip(&log_k)) {
                *t = a + k;
            }
            (log_sum_exp(&terms) - (n as f64).ln()) / spec.beta
        })
        .collect())
}

/// Receptive-field vectors of `input`, after whitening when the stage has it.
fn stage_features(input: &Tensor3, stage: &SimStage) -> Result<Vec<Vec<f64>>> {
    let g = *stage.geom();
    let (h, w, c) = input.dims();
    if c != stage.in_channels() {
        return Err(Error::Shape(format!(
            "stage expects {} channels, input has {c}",
            stage.in_channels()
        )));
    }
    let (oh, ow) = g.output_dims(h, w)?;
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut patch = Vec::with_capacity(g.patch_len(c));
            for a in 0..g.field_h {
                for b in 0..g.field_w {
                    let r = (i * g.stride_h + a) as isize - g.pad as isize;
                    let s = (j * g.stride_w + b) as isize - g.pad as isize;
                    let inside = r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w;
                    for ch in 0..c {
                        patch.push(if inside { input.get(r as usize, s as usize, ch) } else { 0.0 });
                    }
                }
            }
            let feature = match stage.whiten() {
                Some(wm) => (0..wm.rows())
                    .map(|q| wm.row(q).iter().zip(&patch).map(|(a, b)| a * b).sum())
                    .collect(),
                None => patch,
            };
            out.push(feature);
        }
    }
    Ok(out)
}

/// Class scores of an MLPConv block through the patch-based kernel form,
/// valid only when both temperatures coincide: one kernel machine over all
/// `(location, template)` pairs with effective count `n * locations`.
pub fn mlpconv_kernel_equiv(input: &Tensor3, block: &MlpConvBlock) -> Result<Vec<f64>> {
    if block.class_beta != block.pool_beta {
        return Err(Error::InvalidParameter(format!(
            "patch-based kernel form needs equal temperatures, got {} and {}",
            block.class_beta, block.pool_beta
        )));
    }
    let sim = block.stage.sim();
    let spec = KernelSpec::from_similarity(sim, block.class_beta)?;
    let features = stage_features(input, &block.stage)?;
    let n = sim.n_templates();
    let log_k: Vec<f64> = features
        .iter()
        .flat_map(|x| (0..n).map(move |l| (x, l)))
        .map(|(x, l)| log_kernel(x, sim.templates().row(l), spec.template_weights(l), &spec))
        .collect::<Result<_>>()?;
    let count = (n * features.len()) as f64;
    let mut terms = vec![0.0; log_k.len()];
    Ok((0..block.offsets.rows())
        .map(|r| {
            let b = block.offsets.row(r);
            for (idx, t) in terms.iter_mut().enumerate() {
                *t = spec.beta * b[idx % n] + log_k[idx];
            }
            (log_sum_exp(&terms) - count.ln()) / spec.beta
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{mlp_forward, mlpconv_forward, SimNetMlp};
    use crate::similarity::ConvLpSim;
    use crate::tensor::PatchGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn gg(beta: f64, p: f64) -> KernelSpec {
        KernelSpec::new(KernelKind::GeneralizedGaussian, beta, p, None).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let x = [0.3, -1.2, 2.0];
        assert_eq!(kernel_eval(&x, &x, None, &gg(0.7, 1.3)).unwrap(), 1.0);
        let exp = KernelSpec::new(KernelKind::Exponential, 2.0, 1.0, None).unwrap();
        assert_eq!(kernel_eval(&[1.0, 0.0], &[0.0, 5.0], None, &exp).unwrap(), 1.0);
        let k = kernel_eval(&[1.0, 1.0], &[0.0, 0.0], None, &gg(0.5, 2.0)).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!(kernel_eval(&[1.0], &[1.0, 2.0], None, &exp).is_err());
        assert!(KernelSpec::new(KernelKind::Exponential, 0.0, 1.0, None).is_err());
    }

    #[test]
    fn rbf_and_laplacian_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let beta = rng.random_range(0.05..2.0);
            let sq: f64 = x.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            let l1: f64 = x.iter().zip(&z).map(|(a, b)| (a - b).abs()).sum();
            let rbf = (-beta * sq).exp();
            let lap = (-beta * l1).exp();
            assert!((kernel_eval(&x, &z, None, &gg(beta, 2.0)).unwrap() - rbf).abs() <= 1e-12);
            assert!((kernel_eval(&x, &z, None, &gg(beta, 1.0)).unwrap() - lap).abs() <= 1e-12);
            assert!(kernel_eval(&x, &z, None, &gg(beta, 1.7)).unwrap() > 0.0);
        }
    }

    #[test]
    fn single_template_collapse() {
        let z = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let m = KernelMachine::new(z, &Matrix::filled(2, 1, 1.0)).unwrap();
        let spec = gg(1.3, 1.5);
        let x = [0.1, 0.2];
        let h = machine_output(&x, &m, &spec).unwrap();
        let want = -(0.4f64.powf(1.5) + 0.7f64.powf(1.5));
        assert!((h[0] - want).abs() < 1e-14 && (h[1] - want).abs() < 1e-14);
        assert!(KernelMachine::new(Matrix::zeros(1, 2), &Matrix::filled(1, 1, -1.0)).is_err());
    }

    fn random_mlp(rng: &mut ChaCha8Rng, kind: SimilarityKind) -> (SimNetMlp, Vec<f64>) {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=6);
        let k = rng.random_range(2..=4);
        let u = rng.random_bool(0.5).then(|| uniform(rng, n, d, 0.2, 2.0));
        let z = uniform(rng, n, d, -1.5, 1.5);
        let sim = match kind {
            SimilarityKind::Lp => SimilarityLayer::lp_vectors(z, u, rng.random_range(0.5..3.0)).unwrap(),
            SimilarityKind::Linear => SimilarityLayer::linear_vectors(z, u).unwrap(),
        };
        let net = SimNetMlp::new(sim, rng.random_range(0.1..4.0), uniform(rng, k, n, -2.0, 2.0)).unwrap();
        let x = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        (net, x)
    }

    #[test]
    fn machine_matches_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..200 {
            let kind = if i % 2 == 0 { SimilarityKind::Lp } else { SimilarityKind::Linear };
            let (net, x) = random_mlp(&mut rng, kind);
            let spec = KernelSpec::from_similarity(&net.sim, net.class_beta).unwrap();
            let machine = KernelMachine::from_offsets(net.sim.templates().clone(), &net.offsets, net.class_beta).unwrap();
            let a = machine_output(&x, &machine, &spec).unwrap();
            let b = mlp_forward(&x, &net).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn equal_coefficients_translate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (net, x) = random_mlp(&mut rng, SimilarityKind::Lp);
        let n = net.sim.n_templates();
        let beta = net.class_beta;
        let spec = KernelSpec::from_similarity(&net.sim, beta).unwrap();
        let c = 3.5;
        let m = KernelMachine::new(net.sim.templates().clone(), &Matrix::filled(1, n, c)).unwrap();
        let h = machine_output(&x, &m, &spec).unwrap()[0];
        let sims: Vec<f64> = (0..n).map(|l| crate::similarity::similarity(&x, &net.sim, l).unwrap()).collect();
        let want = crate::mex::mex(&sims, beta).unwrap() + c.ln() / beta;
        assert!((h - want).abs() <= 1e-12);
    }

    #[test]
    fn conv_form_matches_mlpconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let x = Tensor3::new(4, 4, 1, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let beta = rng.random_range(0.2..3.0);
            let stage = if trial % 2 == 0 {
                let sim = SimilarityLayer::new(
                    SimilarityKind::Lp,
                    uniform(&mut rng, 2, 4, -1.0, 1.0),
                    Some(uniform(&mut rng, 2, 4, 0.5, 1.5)),
                    1.4,
                    PatchGeometry::square(2),
                    1,
                )
                .unwrap();
                SimStage::Plain(sim)
            } else {
                let sim = SimilarityLayer::lp_vectors(uniform(&mut rng, 2, 3, -1.0, 1.0), None, 2.0).unwrap();
                let w = uniform(&mut rng, 3, 4, -1.0, 1.0);
                SimStage::Whitened(ConvLpSim::new(w, PatchGeometry::square(2), 1, sim).unwrap())
            };
            let block = MlpConvBlock::new(stage, beta, uniform(&mut rng, 2, 2, -1.0, 1.0), beta).unwrap();
            let a = mlpconv_kernel_equiv(&x, &block).unwrap();
            let b = mlpconv_forward(&x, &block).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn conv_form_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sim = SimilarityLayer::lp_vectors(uniform(&mut rng, 3, 2, -1.0, 1.0), None, 1.5).unwrap();
        let offsets = uniform(&mut rng, 2, 3, -1.0, 1.0);
        let block = MlpConvBlock::new(SimStage::Plain(sim.clone()), 0.9, offsets.clone(), 0.9).unwrap();
        // 1x1 grid: the plain machine
        let v = [0.3, -0.8];
        let spec = KernelSpec::from_similarity(&sim, 0.9).unwrap();
        let machine = KernelMachine::from_offsets(sim.templates().clone(), &offsets, 0.9).unwrap();
        let a = mlpconv_kernel_equiv(&Tensor3::from_vector(&v).unwrap(), &block).unwrap();
        let b = machine_output(&v, &machine, &spec).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
        // identical pixels everywhere: same as one patch
        let tiled = Tensor3::new(3, 2, 2, v.iter().copied().cycle().take(12).collect()).unwrap();
        let c = mlpconv_kernel_equiv(&tiled, &block).unwrap();
        for (p, q) in c.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
        let unequal = MlpConvBlock::new(SimStage::Plain(sim), 0.9, offsets, 1.0).unwrap();
        assert!(mlpconv_kernel_equiv(&tiled, &unequal).is_err());
    }
}
