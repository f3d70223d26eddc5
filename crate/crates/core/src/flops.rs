//! Static per-image operation and parameter counts.
//!
//! Unit costs: add, multiply, abs and compare cost 1; exp, log and pow cost
//! `transcendental` (10 by default). Per output value:
//!
//! * linear similarity over `d` inputs: `d` mults + `d - 1` adds, plus `d`
//!   mults when weighted;
//! * lp similarity: `d` subs + `d` abs + `d` pows + `d` mults + `d - 1` adds;
//! * MEX over `m` values: `m` adds for offsets (when present) + `m` exps +
//!   `m - 1` adds + 1 log + 2 scalar ops (shift and scale);
//! * a whitening row is an unweighted linear similarity over the patch.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, SimStage};
use crate::similarity::{SimilarityKind, SimilarityLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub transcendental: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { transcendental: 10 }
    }
}

impl CostModel {
    pub fn new(transcendental: u64) -> Result<Self> {
        if transcendental == 0 {
            return Err(Error::InvalidParameter("transcendental cost must be at least 1".into()));
        }
        Ok(Self { transcendental })
    }

    /// One linear similarity value over `d` inputs.
    pub fn linear(&self, d: u64, weighted: bool) -> u64 {
        d + d.saturating_sub(1) + if weighted { d } else { 0 }
    }

    /// One lp similarity value over `d` inputs.
    pub fn lp(&self, d: u64) -> u64 {
        d + d + d * self.transcendental + d + d.saturating_sub(1)
    }

    /// One MEX over `m` values.
    pub fn mex(&self, m: u64, offsets: bool) -> u64 {
        (if offsets { m } else { 0 }) + m * self.transcendental + m.saturating_sub(1) + self.transcendental + 2
    }

    fn similarity(&self, sim: &SimilarityLayer) -> u64 {
        let d = sim.dim() as u64;
        match sim.kind() {
            SimilarityKind::Linear => self.linear(d, sim.is_weighted()),
            SimilarityKind::Lp => self.lp(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub name: String,
    pub output_dims: (usize, usize, usize),
    pub flops: u64,
    /// Entries of array-valued parameters.
    pub params: usize,
    /// Orders and temperatures.
    pub scalar_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub total_flops: u64,
    pub total_params: usize,
    pub total_scalar_params: usize,
}

impl CostReport {
    /// Aligned text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>14} {:>15} {:>10} {:>7}", "stage", "output", "flops", "params", "scalars");
        for s in &self.stages {
            let dims = format!("{}x{}x{}", s.output_dims.0, s.output_dims.1, s.output_dims.2);
            let _ = writeln!(
                out,
                "{:<20} {:>14} {:>15} {:>10} {:>7}",
                s.name, dims, s.flops, s.params, s.scalar_params
            );
        }
        let _ = writeln!(
            out,
            "{:<20} {:>14} {:>15} {:>10} {:>7}",
            "total", "", self.total_flops, self.total_params, self.total_scalar_params
        );
        out
    }

    /// Tab-separated rows with a header, totals last.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("stage\theight\twidth\tchannels\tflops\tparams\tscalar_params\n");
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.name, s.output_dims.0, s.output_dims.1, s.output_dims.2, s.flops, s.params, s.scalar_params
            );
        }
        let _ = writeln!(
            out,
            "total\t\t\t\t{}\t{}\t{}",
            self.total_flops, self.total_params, self.total_scalar_params
        );
        out
    }
}

/// Operation and parameter counts for classifying one image of `input_dims`.
pub fn count_costs(spec: &NetworkSpec, input_dims: (usize, usize, usize), model: &CostModel) -> Result<CostReport> {
    if input_dims != spec.input_dims() {
        return Err(Error::Shape(format!(
            "network is defined for {:?}, asked about {input_dims:?}",
            spec.input_dims()
        )));
    }
    spec.validate()?;
    let mut stages = Vec::new();
    let (mut h, mut w) = (input_dims.0, input_dims.1);
    for (i, layer) in spec.layers().iter().enumerate() {
        let name = |part: &str| format!("layer{}.{part}", i + 1);
        let (oh, ow) = layer.stage.output_dims(h, w)?;
        let locations = (oh * ow) as u64;
        let sim = layer.stage.sim();
        if let SimStage::Whitened(c) = &layer.stage {
            let rows = c.whiten().rows();
            stages.push(StageCost {
                name: name("whiten"),
                output_dims: (oh, ow, rows),
                flops: locations * rows as u64 * model.linear(c.whiten().cols() as u64, false),
                params: c.whiten().rows() * c.whiten().cols(),
                scalar_params: 0,
            });
        }
        let n = sim.n_templates();
        stages.push(StageCost {
            name: name("similarity"),
            output_dims: (oh, ow, n),
            flops: locations * n as u64 * model.similarity(sim),
            params: sim.templates().data().len() + sim.weights().map_or(0, |u| u.data().len()),
            scalar_params: usize::from(sim.kind() == SimilarityKind::Lp),
        });
        (h, w) = (oh, ow);
        if let Some(p) = &layer.pool {
            let (ph, pw) = p.spec.output_dims(h, w)?;
            let m = p.spec.window_len(h, w) as u64;
            stages.push(StageCost {
                name: name("pool"),
                output_dims: (ph, pw, n),
                flops: (ph * pw * n) as u64 * model.mex(m, false),
                params: 0,
                scalar_params: 1,
            });
            (h, w) = (ph, pw);
        }
    }
    let classifier = spec.classifier();
    let (k, n) = (classifier.offsets.rows(), classifier.offsets.cols());
    let locations = h * w;
    stages.push(StageCost {
        name: "classifier".into(),
        output_dims: (h, w, k),
        flops: (locations * k) as u64 * model.mex(n as u64, true),
        params: k * n,
        scalar_params: 1,
    });
    stages.push(StageCost {
        name: "global_pool".into(),
        output_dims: (1, 1, k),
        flops: k as u64 * model.mex(locations as u64, false),
        params: 0,
        scalar_params: 1,
    });
    Ok(CostReport {
        total_flops: stages.iter().map(|s| s.flops).sum(),
        total_params: stages.iter().map(|s| s.params).sum(),
        total_scalar_params: stages.iter().map(|s| s.scalar_params).sum(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, Classifier, Layer};
    use crate::tensor::{Matrix, PatchGeometry};

    #[test]
    fn unit_counts() {
        let m = CostModel::default();
        assert_eq!(m.linear(75, false), 149);
        assert_eq!(m.linear(75, true), 224);
        assert_eq!(m.mex(2, false), 33);
        assert_eq!(m.mex(2, true), 35);
        assert_eq!(m.lp(3), 3 + 3 + 30 + 3 + 2);
        assert!(CostModel::new(0).is_err());
    }

    fn minimal() -> NetworkSpec {
        let classifier = Classifier {
            beta: 1.0,
            offsets: Matrix::new(2, 1, vec![0.5, -0.5]).unwrap(),
            beta_trainable: true,
        };
        NetworkSpec::new((1, 1, 1), vec![], classifier, 1.0).unwrap()
    }

    #[test]
    fn empty_network() {
        let r = count_costs(&minimal(), (1, 1, 1), &CostModel::default()).unwrap();
        assert_eq!(r.total_params, 2);
        // classifier: 1 location x 2 classes x MEX over one offset value; global: 2 x MEX over one location
        assert_eq!(r.total_flops, 2 * (1 + 10 + 10 + 2) + 2 * (10 + 10 + 2));
        assert_eq!(r.total_scalar_params, 2);
    }

    #[test]
    fn hand_sized_linear_layer() {
        // 5x5x3 field on a 5x5x3 image: one location, d = 75
        let sim = SimilarityLayer::new(
            SimilarityKind::Linear,
            Matrix::zeros(4, 75),
            None,
            1.0,
            PatchGeometry::square(5),
            3,
        )
        .unwrap();
        let classifier = Classifier {
            beta: 1.0,
            offsets: Matrix::zeros(3, 4),
            beta_trainable: true,
        };
        let spec = NetworkSpec::new((5, 5, 3), vec![Layer::new(SimStage::Plain(sim), None)], classifier, 1.0).unwrap();
        let r = count_costs(&spec, (5, 5, 3), &CostModel::default()).unwrap();
        assert_eq!(r.stages[0].flops, 4 * 149);
        assert_eq!(r.stages[1].flops, 3 * (4 + 40 + 3 + 12));
        assert_eq!(r.stages[2].flops, 3 * 22);
        assert_eq!(r.total_params, 300 + 12);
        assert!(count_costs(&spec, (6, 5, 3), &CostModel::default()).is_err());
    }

    #[test]
    fn layer_costs_scale_with_locations() {
        let arch = |side: usize| {
            let mut a = Architecture::cifar_reference();
            a.input_dims = (side, side, 3);
            a.layers.truncate(1);
            a.layers[0].pool = None;
            a.build(0).unwrap()
        };
        let m = CostModel::default();
        let small = count_costs(&arch(9), (9, 9, 3), &m).unwrap();
        let big = count_costs(&arch(13), (13, 13, 3), &m).unwrap();
        // 5x5 maps vs 9x9 maps
        for s in 0..2 {
            assert_eq!(small.stages[s].flops * 81, big.stages[s].flops * 25);
        }
    }

    #[test]
    fn reference_network_totals() {
        let spec = Architecture::cifar_reference().build(0).unwrap();
        let r = count_costs(&spec, (32, 32, 3), &CostModel::default()).unwrap();
        assert_eq!(r.total_params, spec.array_param_count());
        assert_eq!(r.total_params, 16 * 75 + 2 * 32 * 16 + 48 * 800 + 2 * 64 * 48 + 10 * 64);
        assert_eq!(r.total_flops, r.stages.iter().map(|s| s.flops).sum::<u64>());
        let table = r.render_table();
        assert!(table.lines().count() == r.stages.len() + 2);
        assert_eq!(r.render_tsv().lines().count(), r.stages.len() + 2);
    }
}
