//! Weighted similarity between patches and templates.
//!
//! Two point-wise mappings are supported:
//!
//! * linear: `u^T (x * z)`, an inner product when `u = 1`;
//! * lp: `-sum_i u_i |x_i - z_i|^p`, a negated p-distance when `u = 1`.
//!
//! [`ConvLpSim`] puts a linear filter bank (a whitening transform) in front of
//! a `1 x 1` similarity layer.

use crate::error::{Error, Result};
use crate::tensor::{dot, extract_patches, Matrix, PatchGeometry, Tensor3};

/// Smallest admissible lp order.
pub const P_MIN: f64 = 0.1;
/// Floor applied to similarity weights after every optimizer step.
pub const U_MIN: f64 = 1e-8;
/// `ln|x - z|` terms of the order gradient are dropped at or below this distance.
pub const DELTA_LOG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Linear,
    Lp,
}

/// A bank of `n` templates matched against every receptive field of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLayer {
    kind: SimilarityKind,
    templates: Matrix,
    weights: Option<Matrix>,
    order_p: f64,
    geom: PatchGeometry,
    in_channels: usize,
}

impl SimilarityLayer {
    /// `weights = None` builds an unweighted layer (`u = 1`).
    pub fn new(
        kind: SimilarityKind,
        templates: Matrix,
        weights: Option<Matrix>,
        order_p: f64,
        geom: PatchGeometry,
        in_channels: usize,
    ) -> Result<Self> {
        let d = geom.patch_len(in_channels);
        if templates.rows() == 0 {
            return Err(Error::Shape("similarity layer needs at least one template".into()));
        }
        if templates.cols() != d {
            return Err(Error::Shape(format!(
                "templates have {} columns, geometry {}x{} over {in_channels} channels needs {d}",
                templates.cols(),
                geom.field_h,
                geom.field_w
            )));
        }
        if !templates.all_finite() {
            return Err(Error::NonFinite("similarity templates".into()));
        }
        if let Some(u) = &weights {
            if u.rows() != templates.rows() || u.cols() != d {
                return Err(Error::Shape(format!(
                    "weights {}x{} do not match templates {}x{d}",
                    u.rows(),
                    u.cols(),
                    templates.rows()
                )));
            }
            if let Some(bad) = u.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "similarity weights must be positive, found {bad}"
                )));
            }
        }
        if kind == SimilarityKind::Lp && !(order_p >= P_MIN && order_p.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lp order must be finite and >= {P_MIN}, got {order_p}"
            )));
        }
        if geom.field_h == 0 || geom.field_w == 0 || geom.stride_h == 0 || geom.stride_w == 0 {
            return Err(Error::Geometry(format!("field and stride must be >= 1, got {geom:?}")));
        }
        Ok(Self {
            kind,
            templates,
            weights,
            order_p,
            geom,
            in_channels,
        })
    }

    /// Unweighted lp layer with unit geometry over `d`-vectors.
    pub fn lp_vectors(templates: Matrix, weights: Option<Matrix>, order_p: f64) -> Result<Self> {
        let d = templates.cols();
        Self::new(SimilarityKind::Lp, templates, weights, order_p, PatchGeometry::unit(), d)
    }

    pub fn linear_vectors(templates: Matrix, weights: Option<Matrix>) -> Result<Self> {
        let d = templates.cols();
        Self::new(SimilarityKind::Linear, templates, weights, 1.0, PatchGeometry::unit(), d)
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn templates(&self) -> &Matrix {
        &self.templates
    }

    pub fn weights(&self) -> Option<&Matrix> {
        self.weights.as_ref()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    pub fn order_p(&self) -> f64 {
        self.order_p
    }

    pub fn geom(&self) -> &PatchGeometry {
        &self.geom
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Number of templates (output channels).
    pub fn n_templates(&self) -> usize {
        self.templates.rows()
    }

    /// Length of one flattened input patch.
    pub fn dim(&self) -> usize {
        self.templates.cols()
    }

    pub(crate) fn order_ref(&self) -> &f64 {
        &self.order_p
    }

    /// Mutable views of `(templates, weights, order_p)`.
    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, Option<&mut Matrix>, &mut f64) {
        (&mut self.templates, self.weights.as_mut(), &mut self.order_p)
    }

    /// Similarity of one flattened patch to template `l`, without checks.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], l: usize) -> f64 {
        let z = self.templates.row(l);
        let u = self.weights.as_ref().map(|w| w.row(l));
        match self.kind {
            SimilarityKind::Linear => match u {
                Some(u) => x.iter().zip(z).zip(u).map(|((a, b), w)| w * a * b).sum(),
                None => dot(x, z),
            },
            SimilarityKind::Lp => {
                let p = self.order_p;
                match u {
                    Some(u) => -x
                        .iter()
                        .zip(z)
                        .zip(u)
                        .map(|((a, b), w)| w * pow_abs(a - b, p))
                        .sum::<f64>(),
                    None => -x.iter().zip(z).map(|(a, b)| pow_abs(a - b, p)).sum::<f64>(),
                }
            }
        }
    }

    fn check_input(&self, x: &[f64], l: usize) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "input of length {} against templates of length {}",
                x.len(),
                self.dim()
            )));
        }
        if l >= self.n_templates() {
            return Err(Error::Shape(format!(
                "template index {l} out of range for {} templates",
                self.n_templates()
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn pow_abs(diff: f64, p: f64) -> f64 {
    let a = diff.abs();
    if p == 2.0 {
        a * a
    } else if p == 1.0 {
        a
    } else {
        a.powf(p)
    }
}

/// `u_l^T phi(x, z_l)`.
pub fn similarity(x: &[f64], layer: &SimilarityLayer, l: usize) -> Result<f64> {
    layer.check_input(x, l)?;
    Ok(layer.eval_unchecked(x, l))
}

/// Gradients of `upstream * u_l^T phi(x, z_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrads {
    pub input: Vec<f64>,
    pub template: Vec<f64>,
    /// `d/du_i`, reported even for unweighted layers (taken at `u = 1`).
    pub weights: Vec<f64>,
    /// `d/dp`; zero for linear layers.
    pub order_p: f64,
}

pub fn similarity_grads(x: &[f64], layer: &SimilarityLayer, l: usize, upstream: f64) -> Result<SimilarityGrads> {
    layer.check_input(x, l)?;
    let d = layer.dim();
    let z = layer.templates.row(l);
    let mut g = SimilarityGrads {
        input: vec![0.0; d],
        template: vec![0.0; d],
        weights: vec![0.0; d],
        order_p: 0.0,
    };
    for i in 0..d {
        let u = layer.weights.as_ref().map_or(1.0, |w| w.get(l, i));
        let (gx, gz, gu, gp) = coordinate_grads(layer.kind, layer.order_p, x[i], z[i], u);
        g.input[i] = upstream * gx;
        g.template[i] = upstream * gz;
        g.weights[i] = upstream * gu;
        g.order_p += upstream * gp;
    }
    Ok(g)
}

/// Per-coordinate partials `(d/dx, d/dz, d/du, d/dp)` of `u * phi(x, z)`.
#[inline]
fn coordinate_grads(kind: SimilarityKind, p: f64, x: f64, z: f64, u: f64) -> (f64, f64, f64, f64) {
    match kind {
        SimilarityKind::Linear => (u * z, u * x, x * z, 0.0),
        SimilarityKind::Lp => {
            let diff = x - z;
            let a = diff.abs();
            if a == 0.0 {
                return (0.0, 0.0, 0.0, 0.0);
            }
            let ap = pow_abs(diff, p);
            // p |d|^(p-1) sign(d) = p |d|^p / d
            let slope = u * p * ap / diff;
            let gp = if a > DELTA_LOG { -u * ap * a.ln() } else { 0.0 };
            (-slope, slope, -ap, gp)
        }
    }
}

/// Similarity of every row of `patches` to every template: an `m x n` matrix.
pub(crate) fn similarity_rows(patches: &Matrix, layer: &SimilarityLayer) -> Matrix {
    let n = layer.n_templates();
    let m = patches.rows();
    let mut out = Matrix::zeros(m, n);
    for t in 0..m {
        let x = patches.row(t);
        let row = out.row_mut(t);
        for (l, o) in row.iter_mut().enumerate() {
            *o = layer.eval_unchecked(x, l);
        }
    }
    out
}

/// Accumulated parameter gradients of a similarity layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityParamGrads {
    pub templates: Matrix,
    /// Present when the layer is weighted.
    pub weights: Option<Matrix>,
    pub order_p: f64,
}

/// Backward of [`similarity_rows`]; `upstream` is `m x n`. Returns the patch
/// gradient (`m x d`) and the parameter gradients.
pub(crate) fn similarity_rows_backward(
    patches: &Matrix,
    layer: &SimilarityLayer,
    upstream: &Matrix,
) -> (Matrix, SimilarityParamGrads) {
    let n = layer.n_templates();
    let d = layer.dim();
    let m = patches.rows();
    let mut dx = Matrix::zeros(m, d);
    let mut dz = Matrix::zeros(n, d);
    let mut du = layer.weights.as_ref().map(|_| Matrix::zeros(n, d));
    let mut dp = 0.0;
    let p = layer.order_p;
    for t in 0..m {
        let x = patches.row(t);
        for l in 0..n {
            let up = upstream.get(t, l);
            if up == 0.0 {
                continue;
            }
            let z = layer.templates.row(l);
            let u_row = layer.weights.as_ref().map(|w| w.row(l));
            for i in 0..d {
                let u = u_row.map_or(1.0, |r| r[i]);
                let (gx, gz, gu, gp) = coordinate_grads(layer.kind, p, x[i], z[i], u);
                dx.data_mut()[t * d + i] += up * gx;
                dz.data_mut()[l * d + i] += up * gz;
                if let Some(du) = du.as_mut() {
                    du.data_mut()[l * d + i] += up * gu;
                }
                dp += up * gp;
            }
        }
    }
    (
        dx,
        SimilarityParamGrads {
            templates: dz,
            weights: du,
            order_p: if layer.kind == SimilarityKind::Lp { dp } else { 0.0 },
        },
    )
}

/// Similarity maps: `output[i, j, l] = similarity(x_ij, layer, l)`.
pub fn similarity_map(input: &Tensor3, layer: &SimilarityLayer) -> Result<Tensor3> {
    if input.channels() != layer.in_channels {
        return Err(Error::Shape(format!(
            "layer expects {} channels, input has {}",
            layer.in_channels,
            input.channels()
        )));
    }
    let (oh, ow) = layer.geom.output_dims(input.height(), input.width())?;
    let patches = extract_patches(input, &layer.geom)?;
    let sims = similarity_rows(&patches, layer);
    Ok(Tensor3::from_raw(oh, ow, layer.n_templates(), sims.into_data()))
}

/// Whitening convolution followed by a `1 x 1` similarity layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLpSim {
    whiten: Matrix,
    geom: PatchGeometry,
    in_channels: usize,
    sim: SimilarityLayer,
    pub whiten_trainable: bool,
}

impl ConvLpSim {
    /// `whiten` is `d_out x (field_h * field_w * in_channels)`; `sim` must have
    /// unit geometry over `d_out` channels.
    pub fn new(whiten: Matrix, geom: PatchGeometry, in_channels: usize, sim: SimilarityLayer) -> Result<Self> {
        let d_in = geom.patch_len(in_channels);
        if whiten.cols() != d_in {
            return Err(Error::Shape(format!(
                "whitening filters have {} columns, patches have {d_in}",
                whiten.cols()
            )));
        }
        if whiten.rows() == 0 {
            return Err(Error::Shape("whitening needs at least one filter".into()));
        }
        if !whiten.all_finite() {
            return Err(Error::NonFinite("whitening filters".into()));
        }
        if !sim.geom.is_unit() {
            return Err(Error::Geometry("similarity after whitening must be 1x1, stride 1, pad 0".into()));
        }
        if sim.in_channels != whiten.rows() {
            return Err(Error::Shape(format!(
                "similarity expects {} channels, whitening produces {}",
                sim.in_channels,
                whiten.rows()
            )));
        }
        Ok(Self {
            whiten,
            geom,
            in_channels,
            sim,
            whiten_trainable: true,
        })
    }

    pub fn whiten(&self) -> &Matrix {
        &self.whiten
    }

    pub fn geom(&self) -> &PatchGeometry {
        &self.geom
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn sim(&self) -> &SimilarityLayer {
        &self.sim
    }

    /// Mutable views of the filter bank and the similarity layer.
    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut SimilarityLayer) {
        (&mut self.whiten, &mut self.sim)
    }
}

/// Whitened similarity maps of `input`.
pub fn conv_lp_sim(input: &Tensor3, block: &ConvLpSim) -> Result<Tensor3> {
    if input.channels() != block.in_channels {
        return Err(Error::Shape(format!(
            "block expects {} channels, input has {}",
            block.in_channels,
            input.channels()
        )));
    }
    let (oh, ow) = block.geom.output_dims(input.height(), input.width())?;
    let patches = extract_patches(input, &block.geom)?;
    let whitened = patches.matmul_transposed(&block.whiten)?;
    let sims = similarity_rows(&whitened, &block.sim);
    Ok(Tensor3::from_raw(oh, ow, block.sim.n_templates(), sims.into_data()))
}
