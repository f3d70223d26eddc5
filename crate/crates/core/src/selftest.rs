//! Fixed-seed micro instances and the built-in property checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{from_bytes, to_bytes, Checkpoint};
use crate::flops::CostModel;
use crate::kernel::{machine_output, KernelMachine, KernelSpec};
use crate::mex::{mex, PoolSpec};
use crate::network::{mlp_forward, Classifier, Layer, NetworkSpec, PoolStage, SimNetMlp, SimStage};
use crate::pretrain::{covariance, fit_whitening, WhiteningMode};
use crate::training::{grad_check, GradCheckOptions};
use crate::similarity::{ConvLpSim, SimilarityKind, SimilarityLayer};
use crate::tensor::{Matrix, PatchGeometry, Tensor3};

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).expect("sized buffer")
}

/// Two-layer network over `6 x 6 x 2` inputs: a whitened weighted lp layer
/// with 3 templates followed by `2 x 2` MEX pooling at `beta = 60`, then a
/// weighted lp layer with 4 templates, and 3 classes.
pub fn micro_network(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom1 = PatchGeometry::square(3);
    let d_in = geom1.patch_len(2);
    let w = uniform(&mut rng, 4, d_in, -0.4, 0.4);
    let z1 = uniform(&mut rng, 3, 4, -0.5, 0.5);
    let u1 = uniform(&mut rng, 3, 4, 0.5, 1.5);
    let sim1 = SimilarityLayer::new(SimilarityKind::Lp, z1, Some(u1), 1.7, PatchGeometry::unit(), 4).expect("layer 1");
    let stage1 = SimStage::Whitened(ConvLpSim::new(w, geom1, 2, sim1).expect("block 1"));
    let pool = PoolStage {
        spec: PoolSpec::local(2, 2, 60.0),
        beta_trainable: true,
    };

    let z2 = uniform(&mut rng, 4, 3, -1.0, 0.0);
    let u2 = uniform(&mut rng, 4, 3, 0.5, 1.5);
    let sim2 = SimilarityLayer::new(SimilarityKind::Lp, z2, Some(u2), 1.3, PatchGeometry::unit(), 3).expect("layer 2");

    let offsets = uniform(&mut rng, 3, 4, -0.5, 0.5);
    let classifier = Classifier {
        beta: 0.8,
        offsets,
        beta_trainable: true,
    };
    NetworkSpec::new(
        (6, 6, 2),
        vec![Layer::new(stage1, Some(pool)), Layer::new(SimStage::Plain(sim2), None)],
        classifier,
        0.5,
    )
    .expect("micro network")
}

/// A `6 x 6 x 2` input for [`micro_network`].
pub fn micro_input(seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor3::new(6, 6, 2, data).expect("sized buffer")
}

/// Outcome of one built-in check.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: std::result::Result<String, String>) -> SelfCheck {
    match result {
        Ok(detail) => SelfCheck { name, passed: true, detail },
        Err(detail) => SelfCheck { name, passed: false, detail },
    }
}

fn mex_laws(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let m = rng.random_range(1..=12);
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let beta = rng.random_range(-20.0..20.0);
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let v = mex(&x, beta).map_err(|e| e.to_string())?;
        if v < lo || v > hi {
            return Err(format!("MEX {v} outside [{lo}, {hi}] at beta {beta}"));
        }
        let c = rng.random_range(-3.0..3.0);
        let shifted: Vec<f64> = x.iter().map(|a| a + c).collect();
        worst = worst.max((mex(&shifted, beta).map_err(|e| e.to_string())? - v - c).abs());
        let mean = x.iter().sum::<f64>() / m as f64;
        worst = worst.max((mex(&x, 0.0).map_err(|e| e.to_string())? - mean).abs());
        let top = mex(&x, 1e4).map_err(|e| e.to_string())?;
        if hi - top > (m as f64).ln() / 1e4 + 1e-12 {
            return Err(format!("MEX at beta 1e4 is {top}, max is {hi}"));
        }
    }
    if worst > 1e-9 {
        return Err(format!("shift/mean identity off by {worst:e}"));
    }
    Ok(format!("500 cases, worst identity error {worst:.2e}"))
}

fn kernel_agreement(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let (d, n, k) = (rng.random_range(1..=6), rng.random_range(1..=5), rng.random_range(2..=4));
        let z = uniform(rng, n, d, -1.5, 1.5);
        let u = (i % 2 == 0).then(|| uniform(rng, n, d, 0.2, 2.0));
        let sim = SimilarityLayer::lp_vectors(z, u, rng.random_range(0.5..3.0)).map_err(|e| e.to_string())?;
        let beta = rng.random_range(0.1..4.0);
        let net = SimNetMlp::new(sim, beta, uniform(rng, k, n, -2.0, 2.0)).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let spec = KernelSpec::from_similarity(&net.sim, beta).map_err(|e| e.to_string())?;
        let machine =
            KernelMachine::from_offsets(net.sim.templates().clone(), &net.offsets, beta).map_err(|e| e.to_string())?;
        let a = machine_output(&x, &machine, &spec).map_err(|e| e.to_string())?;
        let b = mlp_forward(&x, &net).map_err(|e| e.to_string())?;
        worst = a.iter().zip(&b).fold(worst, |w, (p, q)| w.max((p - q).abs()));
    }
    if worst > 1e-9 {
        return Err(format!("kernel machine and network differ by {worst:e}"));
    }
    Ok(format!("200 networks, worst difference {worst:.2e}"))
}

fn gradients() -> std::result::Result<String, String> {
    let report = grad_check(&micro_network(0), &micro_input(0), 1, &GradCheckOptions::default())
        .map_err(|e| e.to_string())?;
    let worst = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    if report.passed() {
        Ok(format!("{} parameter blocks, worst rel-err {worst:.2e}", report.groups.len()))
    } else {
        Err(report.render())
    }
}

fn serialization(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    for _ in 0..20 {
        let ck = Checkpoint::new(micro_network(rng.random()));
        let bytes = to_bytes(&ck).map_err(|e| e.to_string())?;
        let back = from_bytes(&bytes).map_err(|e| e.to_string())?;
        if to_bytes(&back).map_err(|e| e.to_string())? != bytes {
            return Err("round trip changed the bytes".into());
        }
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        if from_bytes(&bad).is_ok() {
            return Err("corrupted magic accepted".into());
        }
    }
    Ok("20 round trips".into())
}

fn whitening(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let (n, d) = (400, 5);
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for r in 0..n {
        data[r * d + 1] += 2.0 * data[r * d];
    }
    let x = Matrix::new(n, d, data).map_err(|e| e.to_string())?;
    let model = fit_whitening(&x, d, WhiteningMode::Pca).map_err(|e| e.to_string())?;
    let cov = covariance(&model.apply(&x).map_err(|e| e.to_string())?);
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            off += (cov.get(i, j) - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    let off = off.sqrt();
    if off > 1e-8 {
        return Err(format!("whitened covariance is {off:e} from identity"));
    }
    Ok(format!("covariance within {off:.2e} of identity"))
}

fn cost_units() -> std::result::Result<String, String> {
    let m = CostModel::default();
    let got = (m.linear(75, false), m.mex(2, false));
    if got != (149, 33) {
        return Err(format!("unit costs {got:?}, expected (149, 33)"));
    }
    Ok("linear d=75 -> 149, MEX m=2 -> 33".into())
}

/// Runs the built-in property checks with a fixed seed.
pub fn run_selftest(seed: u64) -> Vec<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check("mex laws", mex_laws(&mut rng)),
        check("kernel agreement", kernel_agreement(&mut rng)),
        check("gradients", gradients()),
        check("serialization", serialization(&mut rng)),
        check("whitening", whitening(&mut rng)),
        check("cost units", cost_units()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest(0) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
