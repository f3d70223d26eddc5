//! Forward evaluation with a retained trace, and reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NetworkSpec, ParamGroup, ParamId, SimStage};
use crate::error::{Error, Result};
use crate::mex::{mex_eval_into, mex_pool, mex_pool_backward, mex_value};
use crate::similarity::{similarity_rows, similarity_rows_backward};
use crate::tensor::{extract_patches, fold_patches, Matrix, Tensor3};
use crate::training::noise::noise_factors;

/// Evaluation mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Multiplicative `N(1, std^2)` noise on the input of every similarity
    /// stage, drawn from a stream seeded by `seed`.
    Train { noise_std: f64, seed: u64 },
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input_dims: (usize, usize, usize),
    noise: Option<Vec<f64>>,
    patches: Matrix,
    whitened: Option<Matrix>,
    sim_out: Tensor3,
}

#[derive(Debug, Clone)]
struct Trace {
    layers: Vec<LayerTrace>,
    /// Classifier input flattened to `locations x n`.
    features: Matrix,
    /// Per-location class scores, `locations x k`.
    local_scores: Matrix,
    scores: Vec<f64>,
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub whiten: Option<Matrix>,
    pub templates: Matrix,
    pub weights: Option<Matrix>,
    /// Present for lp layers.
    pub order_p: Option<f64>,
    /// Present when the layer pools.
    pub pool_beta: Option<f64>,
}

/// Gradients of every parameter of a [`NetworkSpec`] and of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
    pub class_beta: f64,
    pub offsets: Matrix,
    pub global_beta: f64,
    pub input: Tensor3,
}

impl NetworkGrads {
    /// Gradient blocks in the order of [`NetworkSpec::params`].
    pub fn blocks(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = Vec::new();
        for (i, g) in self.layers.iter().enumerate() {
            let id = |group| ParamId { group, layer: Some(i) };
            if let Some(w) = &g.whiten {
                out.push((id(ParamGroup::Whiten), w.data()));
            }
            out.push((id(ParamGroup::Templates), g.templates.data()));
            if let Some(u) = &g.weights {
                out.push((id(ParamGroup::Weights), u.data()));
            }
            if let Some(p) = &g.order_p {
                out.push((id(ParamGroup::Order), std::slice::from_ref(p)));
            }
            if let Some(b) = &g.pool_beta {
                out.push((id(ParamGroup::PoolBeta), std::slice::from_ref(b)));
            }
        }
        let id = |group| ParamId { group, layer: None };
        out.push((id(ParamGroup::ClassBeta), std::slice::from_ref(&self.class_beta)));
        out.push((id(ParamGroup::Offsets), self.offsets.data()));
        out.push((id(ParamGroup::GlobalBeta), std::slice::from_ref(&self.global_beta)));
        out
    }

    /// Mutable gradient blocks, same order as [`NetworkGrads::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        let mut out: Vec<(ParamId, &mut [f64])> = Vec::new();
        for (i, g) in self.layers.iter_mut().enumerate() {
            let id = |group| ParamId { group, layer: Some(i) };
            if let Some(w) = &mut g.whiten {
                out.push((id(ParamGroup::Whiten), w.data_mut()));
            }
            out.push((id(ParamGroup::Templates), g.templates.data_mut()));
            if let Some(u) = &mut g.weights {
                out.push((id(ParamGroup::Weights), u.data_mut()));
            }
            if let Some(p) = &mut g.order_p {
                out.push((id(ParamGroup::Order), std::slice::from_mut(p)));
            }
            if let Some(b) = &mut g.pool_beta {
                out.push((id(ParamGroup::PoolBeta), std::slice::from_mut(b)));
            }
        }
        let id = |group| ParamId { group, layer: None };
        out.push((id(ParamGroup::ClassBeta), std::slice::from_mut(&mut self.class_beta)));
        out.push((id(ParamGroup::Offsets), self.offsets.data_mut()));
        out.push((id(ParamGroup::GlobalBeta), std::slice::from_mut(&mut self.global_beta)));
        out
    }

    /// `self += scale * other`, block by block.
    pub fn accumulate(&mut self, other: &NetworkGrads, scale: f64) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// All-zero gradients shaped like `spec`.
    pub fn zeros_like(spec: &NetworkSpec) -> NetworkGrads {
        let layers = spec
            .layers
            .iter()
            .map(|layer| {
                let sim = layer.stage.sim();
                LayerGrads {
                    whiten: layer.stage.whiten().map(|w| Matrix::zeros(w.rows(), w.cols())),
                    templates: Matrix::zeros(sim.n_templates(), sim.dim()),
                    weights: sim.weights().map(|u| Matrix::zeros(u.rows(), u.cols())),
                    order_p: (sim.kind() == crate::similarity::SimilarityKind::Lp).then_some(0.0),
                    pool_beta: layer.pool.map(|_| 0.0),
                }
            })
            .collect();
        let (h, w, c) = spec.input_dims();
        NetworkGrads {
            layers,
            class_beta: 0.0,
            offsets: Matrix::zeros(spec.classifier.offsets.rows(), spec.classifier.offsets.cols()),
            global_beta: 0.0,
            input: Tensor3::zeros(h, w, c),
        }
    }
}

/// Holds the trace of the most recent forward pass so that gradients can be
/// taken against it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    trace: Option<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates class scores and retains the intermediate activations.
    pub fn forward(&mut self, spec: &NetworkSpec, input: &Tensor3, mode: Mode) -> Result<Vec<f64>> {
        self.trace = None;
        let trace = run_forward(spec, input, mode)?;
        let scores = trace.scores.clone();
        self.trace = Some(trace);
        Ok(scores)
    }

    /// Gradients of `upstream . scores` for the retained forward pass.
    pub fn backward(&self, spec: &NetworkSpec, upstream: &[f64]) -> Result<NetworkGrads> {
        let trace = self.trace.as_ref().ok_or(Error::NoForwardState)?;
        run_backward(spec, trace, upstream)
    }

    pub fn clear(&mut self) {
        self.trace = None;
    }
}

/// Class scores of `input` in evaluation mode.
pub fn network_forward(input: &Tensor3, spec: &NetworkSpec) -> Result<Vec<f64>> {
    Ok(run_forward(spec, input, Mode::Eval)?.scores)
}

/// Forward then backward in evaluation mode.
pub fn network_backward(input: &Tensor3, spec: &NetworkSpec, upstream: &[f64]) -> Result<NetworkGrads> {
    let trace = run_forward(spec, input, Mode::Eval)?;
    run_backward(spec, &trace, upstream)
}

fn run_forward(spec: &NetworkSpec, input: &Tensor3, mode: Mode) -> Result<Trace> {
    if input.dims() != spec.input_dims() {
        return Err(Error::Shape(format!(
            "network expects input {:?}, got {:?}",
            spec.input_dims(),
            input.dims()
        )));
    }
    let mut rng = match mode {
        Mode::Train { noise_std, seed } if noise_std > 0.0 => Some((noise_std, ChaCha8Rng::seed_from_u64(seed))),
        _ => None,
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut current = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let fail = |e: Error| e.at_layer(i + 1);
        let noise = rng.as_mut().map(|(std, rng)| noise_factors(current.len(), *std, rng));
        if let Some(f) = &noise {
            for (v, m) in current.data_mut().iter_mut().zip(f) {
                *v *= m;
            }
        }
        let input_dims = current.dims();
        let geom = *layer.stage.geom();
        let (oh, ow) = geom.output_dims(input_dims.0, input_dims.1).map_err(fail)?;
        let patches = extract_patches(&current, &geom).map_err(fail)?;
        let (sims, whitened) = match &layer.stage {
            SimStage::Plain(s) => (similarity_rows(&patches, s), None),
            SimStage::Whitened(c) => {
                let y = patches.matmul_transposed(c.whiten()).map_err(fail)?;
                (similarity_rows(&y, c.sim()), Some(y))
            }
        };
        let sim_out = Tensor3::from_raw(oh, ow, layer.stage.out_channels(), sims.into_data());
        if !sim_out.all_finite() {
            return Err(fail(Error::NonFinite("similarity maps".into())));
        }
        let next = match &layer.pool {
            Some(p) => mex_pool(&sim_out, &p.spec).map_err(fail)?,
            None => sim_out.clone(),
        };
        layers.push(LayerTrace {
            input_dims,
            noise,
            patches,
            whitened,
            sim_out,
        });
        current = next;
    }

    let (h, w, n) = current.dims();
    let m = h * w;
    let features = Matrix::new(m, n, current.into_data())?;
    let classifier = &spec.classifier;
    let k = classifier.offsets.rows();
    let mut local_scores = Matrix::zeros(m, k);
    let mut buf = vec![0.0; n];
    for t in 0..m {
        let x = features.row(t);
        for r in 0..k {
            for ((b, &xv), &o) in buf.iter_mut().zip(x).zip(classifier.offsets.row(r)) {
                *b = xv + o;
            }
            local_scores.set(t, r, mex_value(&buf, classifier.beta));
        }
    }
    let mut column = vec![0.0; m];
    let scores: Vec<f64> = (0..k)
        .map(|r| {
            for (t, c) in column.iter_mut().enumerate() {
                *c = local_scores.get(t, r);
            }
            mex_value(&column, spec.global_beta)
        })
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("class scores".into()));
    }
    Ok(Trace {
        layers,
        features,
        local_scores,
        scores,
    })
}

fn run_backward(spec: &NetworkSpec, trace: &Trace, upstream: &[f64]) -> Result<NetworkGrads> {
    let k = spec.n_classes();
    if upstream.len() != k {
        return Err(Error::Shape(format!(
            "upstream has {} entries for {k} classes",
            upstream.len()
        )));
    }
    let mut grads = NetworkGrads::zeros_like(spec);
    let m = trace.features.rows();
    let n = trace.features.cols();

    // global pooling
    let mut d_local = Matrix::zeros(m, k);
    let mut column = vec![0.0; m];
    let mut weights_m = vec![0.0; m];
    for r in 0..k {
        if upstream[r] == 0.0 {
            continue;
        }
        for (t, c) in column.iter_mut().enumerate() {
            *c = trace.local_scores.get(t, r);
        }
        let (_, dbeta) = mex_eval_into(&column, spec.global_beta, &mut weights_m);
        grads.global_beta += upstream[r] * dbeta;
        for t in 0..m {
            d_local.set(t, r, upstream[r] * weights_m[t]);
        }
    }

    // classification MEX
    let classifier = &spec.classifier;
    let mut d_features = Matrix::zeros(m, n);
    let mut buf = vec![0.0; n];
    let mut weights_n = vec![0.0; n];
    for t in 0..m {
        let x = trace.features.row(t);
        for r in 0..k {
            let up = d_local.get(t, r);
            if up == 0.0 {
                continue;
            }
            for ((b, &xv), &o) in buf.iter_mut().zip(x).zip(classifier.offsets.row(r)) {
                *b = xv + o;
            }
            let (_, dbeta) = mex_eval_into(&buf, classifier.beta, &mut weights_n);
            grads.class_beta += up * dbeta;
            let drow = d_features.row_mut(t);
            for (d, w) in drow.iter_mut().zip(&weights_n) {
                *d += up * w;
            }
            let orow = grads.offsets.row_mut(r);
            for (d, w) in orow.iter_mut().zip(&weights_n) {
                *d += up * w;
            }
        }
    }

    let final_dims = spec.final_dims()?;
    let mut d_current = Tensor3::from_raw(final_dims.0, final_dims.1, final_dims.2, d_features.into_data());
    for (i, (layer, lt)) in spec.layers.iter().zip(&trace.layers).enumerate().rev() {
        let fail = |e: Error| e.at_layer(i + 1);
        let lg = &mut grads.layers[i];
        let d_sim = match &layer.pool {
            Some(p) => {
                let (d, dbeta) = mex_pool_backward(&lt.sim_out, &p.spec, &d_current).map_err(fail)?;
                lg.pool_beta = Some(dbeta);
                d
            }
            None => d_current,
        };
        let (oh, ow, nl) = lt.sim_out.dims();
        let d_sim = Matrix::new(oh * ow, nl, d_sim.into_data())?;
        let d_patches = match &layer.stage {
            SimStage::Plain(s) => {
                let (dx, pg) = similarity_rows_backward(&lt.patches, s, &d_sim);
                lg.templates = pg.templates;
                lg.weights = pg.weights;
                if lg.order_p.is_some() {
                    lg.order_p = Some(pg.order_p);
                }
                dx
            }
            SimStage::Whitened(c) => {
                let y = lt.whitened.as_ref().expect("whitened stage keeps its projections");
                let (dy, pg) = similarity_rows_backward(y, c.sim(), &d_sim);
                lg.templates = pg.templates;
                lg.weights = pg.weights;
                if lg.order_p.is_some() {
                    lg.order_p = Some(pg.order_p);
                }
                lg.whiten = Some(dy.transpose().matmul(&lt.patches)?);
                dy.matmul(c.whiten())?
            }
        };
        let mut d_input = fold_patches(&d_patches, lt.input_dims, layer.stage.geom()).map_err(fail)?;
        if let Some(f) = &lt.noise {
            for (d, m) in d_input.data_mut().iter_mut().zip(f) {
                *d *= m;
            }
        }
        d_current = d_input;
    }
    grads.input = d_current;
    Ok(grads)
}
