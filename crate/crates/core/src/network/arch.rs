//! Shape-level description of a deep network and random initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Classifier, Layer, NetworkSpec, PoolStage, SimStage};
use crate::error::{Error, Result};
use crate::mex::PoolSpec;
use crate::similarity::{ConvLpSim, SimilarityKind, SimilarityLayer};
use crate::tensor::{Matrix, PatchGeometry};

/// Local MEX pooling after a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolArch {
    pub window: usize,
    pub stride: usize,
    pub beta: f64,
    pub beta_trainable: bool,
}

/// One layer: receptive field, optional whitening width, similarity bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerArch {
    pub kind: SimilarityKind,
    pub weighted: bool,
    /// Number of templates, i.e. output channels.
    pub channels: usize,
    pub field: usize,
    pub stride: usize,
    pub pad: usize,
    /// Rows of the whitening convolution; `None` measures similarity on raw patches.
    pub whiten_dims: Option<usize>,
    pub order_p: f64,
    pub order_trainable: bool,
    pub whiten_trainable: bool,
    pub pool: Option<PoolArch>,
}

impl LayerArch {
    /// Whitened, weighted lp layer with a trainable order starting at 2.
    pub fn lp(channels: usize, field: usize, whiten_dims: usize) -> Self {
        Self {
            kind: SimilarityKind::Lp,
            weighted: true,
            channels,
            field,
            stride: 1,
            pad: 0,
            whiten_dims: Some(whiten_dims),
            order_p: 2.0,
            order_trainable: true,
            whiten_trainable: true,
            pool: None,
        }
    }

    pub fn with_pool(mut self, window: usize, stride: usize, beta: f64) -> Self {
        self.pool = Some(PoolArch {
            window,
            stride,
            beta,
            beta_trainable: false,
        });
        self
    }
}

/// Everything needed to build a [`NetworkSpec`] except parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dims: (usize, usize, usize),
    pub layers: Vec<LayerArch>,
    pub classes: usize,
    pub class_beta: f64,
    pub class_beta_trainable: bool,
    pub global_beta: f64,
    pub global_beta_trainable: bool,
}

impl Architecture {
    /// Two whitened lp layers over 32x32 RGB with 3x3 max-like pooling after
    /// the first, sized like the small CIFAR-10 networks.
    pub fn cifar_reference() -> Self {
        Self {
            input_dims: (32, 32, 3),
            layers: vec![LayerArch::lp(32, 5, 16).with_pool(3, 2, 60.0), LayerArch::lp(64, 5, 48)],
            classes: 10,
            class_beta: 1.0,
            class_beta_trainable: true,
            global_beta: 1.0,
            global_beta_trainable: true,
        }
    }

    /// Builds a network with random parameters: whitening filters
    /// `N(0, 1/d_in)`, templates `N(0, 1)`, weights 1, offsets `N(0, 0.01)`.
    pub fn build(&self, seed: u64) -> Result<NetworkSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols).map(|_| scale * std_normal.sample(rng)).collect();
            Matrix::new(rows, cols, data).expect("sized buffer")
        };

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut c = self.input_dims.2;
        for (i, la) in self.layers.iter().enumerate() {
            if la.channels == 0 {
                return Err(Error::Shape("layer needs at least one channel".into()).at_layer(i + 1));
            }
            let geom = PatchGeometry::new(la.field, la.field, la.stride, la.stride, la.pad);
            let d_in = geom.patch_len(c);
            let stage = match la.whiten_dims {
                Some(d) => {
                    if d == 0 {
                        return Err(Error::Shape("whitening needs at least one row".into()).at_layer(i + 1));
                    }
                    let w = draw(d, d_in, (1.0 / d_in as f64).sqrt(), &mut rng);
                    let z = draw(la.channels, d, 1.0, &mut rng);
                    let u = la.weighted.then(|| Matrix::filled(la.channels, d, 1.0));
                    let sim = SimilarityLayer::new(la.kind, z, u, la.order_p, PatchGeometry::unit(), d)
                        .map_err(|e| e.at_layer(i + 1))?;
                    let mut conv = ConvLpSim::new(w, geom, c, sim).map_err(|e| e.at_layer(i + 1))?;
                    conv.whiten_trainable = la.whiten_trainable;
                    SimStage::Whitened(conv)
                }
                None => {
                    let z = draw(la.channels, d_in, 1.0, &mut rng);
                    let u = la.weighted.then(|| Matrix::filled(la.channels, d_in, 1.0));
                    SimStage::Plain(
                        SimilarityLayer::new(la.kind, z, u, la.order_p, geom, c).map_err(|e| e.at_layer(i + 1))?,
                    )
                }
            };
            let pool = la.pool.map(|p| PoolStage {
                spec: PoolSpec::local(p.window, p.stride, p.beta),
                beta_trainable: p.beta_trainable,
            });
            let mut layer = Layer::new(stage, pool);
            layer.order_trainable = la.order_trainable && la.kind == SimilarityKind::Lp;
            layers.push(layer);
            c = la.channels;
        }
        let offsets = draw(self.classes, c, 0.1, &mut rng);
        let classifier = Classifier {
            beta: self.class_beta,
            offsets,
            beta_trainable: self.class_beta_trainable,
        };
        let mut spec = NetworkSpec::new(self.input_dims, layers, classifier, self.global_beta)?;
        spec.global_beta_trainable = self.global_beta_trainable;
        Ok(spec)
    }
}
