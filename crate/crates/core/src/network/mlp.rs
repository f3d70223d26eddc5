//! Single-layer SimNet MLP and its convolutional form.

use super::{Classifier, Layer, NetworkSpec, SimStage};
use crate::error::{Error, Result};
use crate::mex::mex_value;
use crate::similarity::SimilarityLayer;
use crate::tensor::{Matrix, Tensor3};

/// `h_r(x) = MEX_beta{ u_l . phi(x, z_l) + b_rl }` over the `n` hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct SimNetMlp {
    pub sim: SimilarityLayer,
    pub class_beta: f64,
    /// `k x n`.
    pub offsets: Matrix,
}

impl SimNetMlp {
    pub fn new(sim: SimilarityLayer, class_beta: f64, offsets: Matrix) -> Result<Self> {
        check_classifier(class_beta, &offsets, sim.n_templates())?;
        Ok(Self {
            sim,
            class_beta,
            offsets,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.offsets.rows()
    }

    /// The same computation as a deep network over `1 x 1 x d` inputs.
    pub fn to_network(&self) -> Result<NetworkSpec> {
        if !self.sim.geom().is_unit() || self.sim.in_channels() != self.sim.dim() {
            return Err(Error::Geometry("MLP similarity must act on plain d-vectors".into()));
        }
        let classifier = Classifier {
            beta: self.class_beta,
            offsets: self.offsets.clone(),
            beta_trainable: true,
        };
        let dims = (1, 1, self.sim.dim());
        NetworkSpec::new(dims, vec![Layer::new(SimStage::Plain(self.sim.clone()), None)], classifier, 1.0)
    }
}

fn check_classifier(beta: f64, offsets: &Matrix, n: usize) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "classification beta must be positive, got {beta}"
        )));
    }
    if offsets.cols() != n || offsets.rows() == 0 {
        return Err(Error::Shape(format!(
            "offsets are {}x{}, need k x {n}",
            offsets.rows(),
            offsets.cols()
        )));
    }
    if !offsets.all_finite() {
        return Err(Error::NonFinite("classifier offsets".into()));
    }
    Ok(())
}

fn class_scores(sims: &[f64], offsets: &Matrix, beta: f64) -> Vec<f64> {
    let mut buf = vec![0.0; sims.len()];
    (0..offsets.rows())
        .map(|r| {
            for ((b, s), o) in buf.iter_mut().zip(sims).zip(offsets.row(r)) {
                *b = s + o;
            }
            mex_value(&buf, beta)
        })
        .collect()
}

/// Class scores of a SimNet MLP.
pub fn mlp_forward(x: &[f64], net: &SimNetMlp) -> Result<Vec<f64>> {
    let d = net.sim.dim();
    if x.len() != d {
        return Err(Error::Shape(format!("MLP expects {d} inputs, got {}", x.len())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("MLP input {i}")));
    }
    let sims: Vec<f64> = (0..net.sim.n_templates()).map(|l| net.sim.eval_unchecked(x, l)).collect();
    Ok(class_scores(&sims, &net.offsets, net.class_beta))
}

/// Index of the largest score; ties go to the lowest index.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of a SimNet MLP; ties break to the lowest index.
pub fn mlp_predict(x: &[f64], net: &SimNetMlp) -> Result<usize> {
    Ok(argmax(&mlp_forward(x, net)?))
}

/// A SimNet MLP convolved over an image, summarized by global MEX pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConvBlock {
    pub stage: SimStage,
    /// Classification temperature `beta_1`.
    pub class_beta: f64,
    /// `k x n` offsets shared by every location.
    pub offsets: Matrix,
    /// Global pooling temperature `beta_2`.
    pub pool_beta: f64,
}

impl MlpConvBlock {
    pub fn new(stage: SimStage, class_beta: f64, offsets: Matrix, pool_beta: f64) -> Result<Self> {
        check_classifier(class_beta, &offsets, stage.out_channels())?;
        if !pool_beta.is_finite() {
            return Err(Error::InvalidParameter("global pooling beta must be finite".into()));
        }
        Ok(Self {
            stage,
            class_beta,
            offsets,
            pool_beta,
        })
    }

    /// The same computation as a one-layer deep network over `input_dims`.
    pub fn to_network(&self, input_dims: (usize, usize, usize)) -> Result<NetworkSpec> {
        let classifier = Classifier {
            beta: self.class_beta,
            offsets: self.offsets.clone(),
            beta_trainable: true,
        };
        NetworkSpec::new(input_dims, vec![Layer::new(self.stage.clone(), None)], classifier, self.pool_beta)
    }
}

/// `MEX_{beta_2}` over locations of `MEX_{beta_1}` over templates, per class.
pub fn mlpconv_forward(input: &Tensor3, block: &MlpConvBlock) -> Result<Vec<f64>> {
    if input.channels() != block.stage.in_channels() {
        return Err(Error::Shape(format!(
            "block expects {} channels, input has {}",
            block.stage.in_channels(),
            input.channels()
        )));
    }
    let maps = block.stage.apply(input)?;
    let n = maps.channels();
    let locations = maps.height() * maps.width();
    let k = block.offsets.rows();
    let mut local = vec![vec![0.0; locations]; k];
    for t in 0..locations {
        let sims = &maps.data()[t * n..(t + 1) * n];
        for (r, s) in class_scores(sims, &block.offsets, block.class_beta).into_iter().enumerate() {
            local[r][t] = s;
        }
    }
    Ok(local.iter().map(|col| mex_value(col, block.pool_beta)).collect())
}
