//! SimNet architectures: the single-hidden-layer MLP, the MLPConv block and
//! the deep L-layer network.
//!
//! A deep network is a stack of similarity stages (optionally preceded by a
//! whitening convolution and followed by MEX pooling), a classification MEX
//! with per-class offset vectors applied at every location of the final
//! similarity maps, and a global MEX pooling that turns the per-location
//! class scores into one score per class.

mod arch;
mod mlp;
mod pass;

pub use arch::{Architecture, LayerArch, PoolArch};
pub(crate) use mlp::argmax;
pub use mlp::{mlp_forward, mlp_predict, mlpconv_forward, MlpConvBlock, SimNetMlp};
pub use pass::{network_backward, network_forward, LayerGrads, Mode, NetworkGrads, Tape};

use crate::error::{Error, Result};
use crate::mex::PoolSpec;
use crate::similarity::{conv_lp_sim, similarity_map, ConvLpSim, SimilarityKind, SimilarityLayer, P_MIN, U_MIN};
use crate::tensor::{Matrix, PatchGeometry, Tensor3};

/// Lower bound kept on the classification temperature during training.
pub const CLASS_BETA_MIN: f64 = 1e-4;

/// The similarity part of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum SimStage {
    /// Similarity measured directly on input patches.
    Plain(SimilarityLayer),
    /// Whitening convolution followed by `1 x 1` similarity.
    Whitened(ConvLpSim),
}

impl SimStage {
    pub fn sim(&self) -> &SimilarityLayer {
        match self {
            SimStage::Plain(s) => s,
            SimStage::Whitened(c) => c.sim(),
        }
    }

    /// Receptive field over the stage input.
    pub fn geom(&self) -> &PatchGeometry {
        match self {
            SimStage::Plain(s) => s.geom(),
            SimStage::Whitened(c) => c.geom(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            SimStage::Plain(s) => s.in_channels(),
            SimStage::Whitened(c) => c.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.sim().n_templates()
    }

    pub fn whiten(&self) -> Option<&Matrix> {
        match self {
            SimStage::Plain(_) => None,
            SimStage::Whitened(c) => Some(c.whiten()),
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.geom().output_dims(h, w)
    }

    pub fn apply(&self, input: &Tensor3) -> Result<Tensor3> {
        match self {
            SimStage::Plain(s) => similarity_map(input, s),
            SimStage::Whitened(c) => conv_lp_sim(input, c),
        }
    }

    pub(crate) fn sim_mut(&mut self) -> &mut SimilarityLayer {
        match self {
            SimStage::Plain(s) => s,
            SimStage::Whitened(c) => c.parts_mut().1,
        }
    }
}

/// MEX pooling between layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolStage {
    pub spec: PoolSpec,
    pub beta_trainable: bool,
}

/// One conv -> similarity layer, optionally followed by pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub stage: SimStage,
    pub order_trainable: bool,
    pub pool: Option<PoolStage>,
}

impl Layer {
    pub fn new(stage: SimStage, pool: Option<PoolStage>) -> Self {
        Self {
            stage,
            order_trainable: true,
            pool,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (mut oh, mut ow) = self.stage.output_dims(h, w)?;
        if let Some(p) = &self.pool {
            (oh, ow) = p.spec.output_dims(oh, ow)?;
        }
        Ok((oh, ow, self.stage.out_channels()))
    }
}

/// Classification MEX: one offset vector per class, shared by every location.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub beta: f64,
    /// `k x n`: row `r` holds the offsets `b_r` of class `r`.
    pub offsets: Matrix,
    pub beta_trainable: bool,
}

/// Parameter families, used to group gradients, decay and checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Whiten,
    Templates,
    Weights,
    Order,
    PoolBeta,
    ClassBeta,
    Offsets,
    GlobalBeta,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Whiten => "W",
            ParamGroup::Templates => "z",
            ParamGroup::Weights => "u",
            ParamGroup::Order => "p",
            ParamGroup::PoolBeta => "beta_pool",
            ParamGroup::ClassBeta => "beta_class",
            ParamGroup::Offsets => "b",
            ParamGroup::GlobalBeta => "beta_global",
        }
    }

    /// Array-valued weights, as opposed to scalar orders and temperatures.
    pub fn is_array(&self) -> bool {
        matches!(
            self,
            ParamGroup::Whiten | ParamGroup::Templates | ParamGroup::Weights | ParamGroup::Offsets
        )
    }

    pub fn decays(&self) -> bool {
        matches!(self, ParamGroup::Whiten | ParamGroup::Templates | ParamGroup::Weights)
    }
}

/// A parameter block: its family and the layer it belongs to, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: ParamGroup,
    pub layer: Option<usize>,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}[{}]", self.group.label(), l + 1),
            None => write!(f, "{}", self.group.label()),
        }
    }
}

/// A complete L-layer SimNet.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_dims: (usize, usize, usize),
    pub(crate) layers: Vec<Layer>,
    pub(crate) classifier: Classifier,
    pub(crate) global_beta: f64,
    pub global_beta_trainable: bool,
}

impl NetworkSpec {
    pub fn new(
        input_dims: (usize, usize, usize),
        layers: Vec<Layer>,
        classifier: Classifier,
        global_beta: f64,
    ) -> Result<Self> {
        let spec = Self {
            input_dims,
            layers,
            classifier,
            global_beta,
            global_beta_trainable: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks channel chaining, geometry, and the classifier.
    pub fn validate(&self) -> Result<()> {
        let (mut h, mut w, mut c) = self.input_dims;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("input dims {:?}", self.input_dims)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.stage.in_channels() != c {
                return Err(Error::Shape(format!(
                    "stage expects {} channels, previous stage produces {c}",
                    layer.stage.in_channels()
                ))
                .at_layer(i + 1));
            }
            if let Some(p) = &layer.pool {
                if !p.spec.beta.is_finite() {
                    return Err(Error::InvalidParameter("pool beta must be finite".into()).at_layer(i + 1));
                }
            }
            (h, w, c) = layer.output_dims(h, w).map_err(|e| e.at_layer(i + 1))?;
        }
        let k = self.classifier.offsets.rows();
        if k < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {k}")));
        }
        if self.classifier.offsets.cols() != c {
            return Err(Error::Shape(format!(
                "classifier offsets have {} columns, final stage has {c} channels",
                self.classifier.offsets.cols()
            )));
        }
        if !(self.classifier.beta > 0.0 && self.classifier.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "classification beta must be positive, got {}",
                self.classifier.beta
            )));
        }
        if !self.classifier.offsets.all_finite() {
            return Err(Error::NonFinite("classifier offsets".into()));
        }
        if !self.global_beta.is_finite() {
            return Err(Error::InvalidParameter("global pooling beta must be finite".into()));
        }
        let _ = (h, w);
        Ok(())
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.classifier
    }

    pub fn global_beta(&self) -> f64 {
        self.global_beta
    }

    pub fn set_global_beta(&mut self, beta: f64) {
        self.global_beta = beta;
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.offsets.rows()
    }

    /// Shape of the map entering the classifier.
    pub fn final_dims(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_dims;
        for layer in &self.layers {
            (h, w, c) = layer.output_dims(h, w)?;
        }
        Ok((h, w, c))
    }

    /// Per-layer input shapes followed by the final map shape.
    pub fn stage_dims(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut dims = vec![self.input_dims];
        let (mut h, mut w) = (self.input_dims.0, self.input_dims.1);
        for layer in &self.layers {
            let d = layer.output_dims(h, w)?;
            (h, w) = (d.0, d.1);
            dims.push(d);
        }
        Ok(dims)
    }

    /// Every parameter block in declaration order, with its trainable flag.
    pub fn params(&self) -> Vec<(ParamId, bool, &[f64])> {
        let mut out: Vec<(ParamId, bool, &[f64])> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let id = |group| ParamId { group, layer: Some(i) };
            if let SimStage::Whitened(c) = &layer.stage {
                out.push((id(ParamGroup::Whiten), c.whiten_trainable, c.whiten().data()));
            }
            let sim = layer.stage.sim();
            out.push((id(ParamGroup::Templates), true, sim.templates().data()));
            if let Some(u) = sim.weights() {
                out.push((id(ParamGroup::Weights), true, u.data()));
            }
            if sim.kind() == SimilarityKind::Lp {
                out.push((
                    id(ParamGroup::Order),
                    layer.order_trainable,
                    std::slice::from_ref(sim.order_ref()),
                ));
            }
            if let Some(p) = &layer.pool {
                out.push((id(ParamGroup::PoolBeta), p.beta_trainable, std::slice::from_ref(&p.spec.beta)));
            }
        }
        let id = |group| ParamId { group, layer: None };
        out.push((
            id(ParamGroup::ClassBeta),
            self.classifier.beta_trainable,
            std::slice::from_ref(&self.classifier.beta),
        ));
        out.push((id(ParamGroup::Offsets), true, self.classifier.offsets.data()));
        out.push((
            id(ParamGroup::GlobalBeta),
            self.global_beta_trainable,
            std::slice::from_ref(&self.global_beta),
        ));
        out
    }

    /// Mutable counterpart of [`NetworkSpec::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamId, bool, &mut [f64])> {
        let mut out: Vec<(ParamId, bool, &mut [f64])> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let id = |group| ParamId { group, layer: Some(i) };
            let Layer {
                stage,
                order_trainable,
                pool,
            } = layer;
            let sim = match stage {
                SimStage::Whitened(c) => {
                    let trainable = c.whiten_trainable;
                    let (w, sim) = c.parts_mut();
                    out.push((id(ParamGroup::Whiten), trainable, w.data_mut()));
                    sim
                }
                SimStage::Plain(s) => s,
            };
            let lp = sim.kind() == SimilarityKind::Lp;
            let (z, u, p) = sim.params_mut();
            out.push((id(ParamGroup::Templates), true, z.data_mut()));
            if let Some(u) = u {
                out.push((id(ParamGroup::Weights), true, u.data_mut()));
            }
            if lp {
                out.push((id(ParamGroup::Order), *order_trainable, std::slice::from_mut(p)));
            }
            if let Some(p) = pool {
                out.push((id(ParamGroup::PoolBeta), p.beta_trainable, std::slice::from_mut(&mut p.spec.beta)));
            }
        }
        let id = |group| ParamId { group, layer: None };
        let Classifier {
            beta,
            offsets,
            beta_trainable,
        } = &mut self.classifier;
        out.push((id(ParamGroup::ClassBeta), *beta_trainable, std::slice::from_mut(beta)));
        out.push((id(ParamGroup::Offsets), true, offsets.data_mut()));
        out.push((
            id(ParamGroup::GlobalBeta),
            self.global_beta_trainable,
            std::slice::from_mut(&mut self.global_beta),
        ));
        out
    }

    /// Number of array-valued parameters (filters, templates, weights, offsets).
    pub fn array_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(id, _, _)| id.group.is_array())
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Number of scalar parameters (orders and MEX temperatures).
    pub fn scalar_param_count(&self) -> usize {
        self.params().iter().filter(|(id, _, _)| !id.group.is_array()).count()
    }

    /// Restores the feasible set after an unconstrained update: weights
    /// `u >= U_MIN`, orders `p >= P_MIN`, classification beta `>= CLASS_BETA_MIN`.
    pub fn project_constraints(&mut self) {
        for layer in &mut self.layers {
            let sim = layer.stage.sim_mut();
            let (_, u, p) = sim.params_mut();
            if let Some(u) = u {
                for v in u.data_mut() {
                    *v = v.max(U_MIN);
                }
            }
            *p = p.max(P_MIN);
        }
        self.classifier.beta = self.classifier.beta.max(CLASS_BETA_MIN);
    }

    /// Installs a whitening matrix into layer `layer` (which must be whitened).
    pub fn set_whitening(&mut self, layer: usize, w: Matrix) -> Result<()> {
        let stage = &mut self.layers.get_mut(layer).ok_or_else(|| Error::Shape(format!("no layer {layer}")))?.stage;
        match stage {
            SimStage::Whitened(c) => {
                let (dst, _) = c.parts_mut();
                if (dst.rows(), dst.cols()) != (w.rows(), w.cols()) {
                    return Err(Error::Shape(format!(
                        "whitening {}x{} does not fit {}x{}",
                        w.rows(),
                        w.cols(),
                        dst.rows(),
                        dst.cols()
                    )));
                }
                *dst = w;
                Ok(())
            }
            SimStage::Plain(_) => Err(Error::Shape(format!("layer {} has no whitening stage", layer + 1))),
        }
    }

    /// Replaces templates, weights and order of a layer's similarity stage.
    pub fn set_similarity(&mut self, layer: usize, templates: Matrix, weights: Option<Matrix>, order_p: f64) -> Result<()> {
        let stage = &mut self.layers.get_mut(layer).ok_or_else(|| Error::Shape(format!("no layer {layer}")))?.stage;
        let old = stage.sim();
        let fresh = SimilarityLayer::new(old.kind(), templates, weights, order_p, *old.geom(), old.in_channels())?;
        if fresh.n_templates() != old.n_templates() || fresh.is_weighted() != old.is_weighted() {
            return Err(Error::Shape("replacement similarity changes the layer shape".into()));
        }
        *stage.sim_mut() = fresh;
        Ok(())
    }
}
