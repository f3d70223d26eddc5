//! Layer-by-layer unsupervised initialization: whitening from patch
//! statistics, a generalized Gaussian mixture fitted to the whitened patches,
//! and the mixture read off as templates, weights and order.

mod ggm;
mod whitening;

pub use ggm::{
    ggm_fit_em, ggm_log_density, ln_gamma, mixture_to_init, responsibilities, EmFit, EmOptions, GgMixture,
    InitBundle, ShapeMode, ALPHA_FLOOR, SHAPE_RANGE,
};
pub use whitening::{covariance, fit_whitening, WhiteningMode, WhiteningModel, EIG_FLOOR};

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mex::mex_pool;
use crate::network::{NetworkSpec, SimStage};
use crate::similarity::SimilarityKind;
use crate::tensor::{extract_patches, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    /// Most patches sampled per layer.
    pub patch_cap: usize,
    /// Most training images propagated through the layers.
    pub subsample: usize,
    pub whitening: WhiteningMode,
    pub shape: ShapeMode,
    pub em: EmOptions,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            patch_cap: 100_000,
            subsample: 1000,
            whitening: WhiteningMode::Pca,
            shape: ShapeMode::Learned,
            em: EmOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub patches: usize,
    /// Covariance eigenvalues of the raw patches; empty for layers without whitening.
    pub spectrum: Vec<f64>,
    pub retained_dims: usize,
    pub ll_trace: Vec<f64>,
    pub shape: f64,
    pub reseeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub layers: Vec<LayerReport>,
}

impl PretrainReport {
    /// Plain-text summary, one block per layer.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {}", i + 1);
            let _ = writeln!(out, "  patches: {}", l.patches);
            if !l.spectrum.is_empty() {
                let spec: Vec<String> = l.spectrum.iter().map(|v| format!("{v:.4e}")).collect();
                let _ = writeln!(out, "  whitening: kept {} of {} dims", l.retained_dims, l.spectrum.len());
                let _ = writeln!(out, "  spectrum: {}", spec.join(" "));
            }
            let _ = writeln!(out, "  shape p: {:.6}", l.shape);
            let _ = writeln!(out, "  em iterations: {}", l.ll_trace.len().saturating_sub(1));
            let _ = writeln!(out, "  re-seeds: {}", l.reseeds);
            let trace: Vec<String> = l.ll_trace.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "  log-likelihood: {}", trace.join(" "));
        }
        out
    }
}

/// Uniformly samples up to `cap` receptive fields from `maps`.
fn sample_patches(maps: &[Tensor3], stage: &SimStage, cap: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let geom = stage.geom();
    let (h, w, c) = maps[0].dims();
    let (oh, ow) = geom.output_dims(h, w)?;
    let per_image = oh * ow;
    let total = per_image * maps.len();
    let mut picks: Vec<usize> = if total <= cap {
        (0..total).collect()
    } else {
        sample(rng, total, cap).into_vec()
    };
    picks.sort_unstable();
    let d = geom.patch_len(c);
    let mut data = Vec::with_capacity(picks.len() * d);
    let mut start = 0;
    while start < picks.len() {
        let image = picks[start] / per_image;
        let mut end = start;
        while end < picks.len() && picks[end] / per_image == image {
            end += 1;
        }
        let patches = extract_patches(&maps[image], geom)?;
        for &p in &picks[start..end] {
            data.extend_from_slice(patches.row(p % per_image));
        }
        start = end;
    }
    Matrix::new(picks.len(), d, data)
}

fn apply_layer(spec: &NetworkSpec, layer: usize, maps: &[Tensor3]) -> Result<Vec<Tensor3>> {
    let l = &spec.layers()[layer];
    maps.iter()
        .map(|m| {
            let s = l.stage.apply(m)?;
            match &l.pool {
                Some(p) => mex_pool(&s, &p.spec),
                None => Ok(s),
            }
        })
        .collect()
}

/// Initializes every layer of `spec` from unlabeled `images`, in order.
///
/// Whitened layers get `W` from the patch covariance; the patch mean, which
/// a bias-free convolution cannot subtract, is moved into the templates
/// (`z = mu + W mean`) so that similarities equal those of the centered,
/// whitened patches. Layers without whitening fit the mixture on raw
/// patches. The final layer's mixture constants `c_l` are added to every
/// class's classification offsets; interior constants are dropped.
pub fn pretrain_network(
    images: &[Tensor3],
    mut spec: NetworkSpec,
    options: &PretrainOptions,
) -> Result<(NetworkSpec, PretrainReport)> {
    if images.is_empty() {
        return Err(Error::Empty("pre-training needs images".into()));
    }
    if let Some(bad) = images.iter().position(|im| im.dims() != spec.input_dims()) {
        return Err(Error::Shape(format!(
            "image {bad} is {:?}, network expects {:?}",
            images[bad].dims(),
            spec.input_dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut maps: Vec<Tensor3> = if images.len() <= options.subsample {
        images.to_vec()
    } else {
        let mut idx = sample(&mut rng, images.len(), options.subsample).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| images[i].clone()).collect()
    };

    let n_layers = spec.layers().len();
    let mut report = PretrainReport::default();
    for i in 0..n_layers {
        let fail = |e: Error| e.at_layer(i + 1);
        let stage = spec.layers()[i].stage.clone();
        let patches = sample_patches(&maps, &stage, options.patch_cap, &mut rng).map_err(fail)?;
        let (features, whitening) = match &stage {
            SimStage::Whitened(c) => {
                let model = fit_whitening(&patches, c.whiten().rows(), options.whitening).map_err(fail)?;
                (model.apply(&patches).map_err(fail)?, Some(model))
            }
            SimStage::Plain(_) => (patches, None),
        };
        let sim = stage.sim();
        let em = EmOptions {
            seed: options.em.seed ^ (options.seed.rotate_left(17)) ^ i as u64,
            ..options.em.clone()
        };
        let shape = match (sim.kind(), options.shape) {
            // the mixture shape only becomes a similarity order for lp layers
            (SimilarityKind::Linear, _) => ShapeMode::Fixed(2.0),
            (SimilarityKind::Lp, s) => s,
        };
        let fit = ggm_fit_em(&features, sim.n_templates(), shape, &em).map_err(fail)?;
        let init = mixture_to_init(&fit.mixture);

        let mut templates = init.templates.clone();
        if let Some(model) = &whitening {
            let shift = model.projected_mean();
            for l in 0..templates.rows() {
                for (z, s) in templates.row_mut(l).iter_mut().zip(&shift) {
                    *z += s;
                }
            }
            spec.set_whitening(i, model.w.clone()).map_err(fail)?;
        }
        let (weights, order_p) = match sim.kind() {
            SimilarityKind::Lp => (sim.is_weighted().then(|| init.weights.clone()), init.order_p),
            SimilarityKind::Linear => (sim.weights().cloned(), sim.order_p()),
        };
        spec.set_similarity(i, templates, weights, order_p).map_err(fail)?;

        if i + 1 == n_layers {
            let classifier = spec.classifier_mut();
            for r in 0..classifier.offsets.rows() {
                classifier.offsets.row_mut(r).iter_mut().zip(&init.biases).for_each(|(b, c)| *b += c);
            }
        }

        report.layers.push(LayerReport {
            patches: features.rows(),
            spectrum: whitening.as_ref().map(|m| m.spectrum.clone()).unwrap_or_default(),
            retained_dims: whitening.as_ref().map_or(0, |m| m.retained_dims()),
            ll_trace: fit.ll_trace,
            shape: fit.mixture.shape(),
            reseeds: fit.reseeds,
        });
        if i + 1 < n_layers {
            maps = apply_layer(&spec, i, &maps).map_err(fail)?;
        }
    }
    Ok((spec, report))
}
