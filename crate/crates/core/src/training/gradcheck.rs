//! Finite-difference check of the analytic network gradients.

use super::softmax_loss;
use crate::error::Result;
use crate::network::{network_backward, network_forward, ParamGroup, ParamId, NetworkSpec};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Scales the analytic gradient of this group by 1.1 before comparing,
    /// to confirm that the harness notices a wrong derivative.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

/// Worst agreement within one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub id: ParamId,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Entry index where `max_rel_err` occurred.
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }

    pub fn failing(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| g.max_rel_err > self.tolerance).collect()
    }

    pub fn group(&self, id: ParamId) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Largest error over all blocks of one family.
    pub fn max_for(&self, group: ParamGroup) -> Option<f64> {
        self.groups
            .iter()
            .filter(|g| g.id.group == group)
            .map(|g| g.max_rel_err)
            .reduce(f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let verdict = if g.max_rel_err <= self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<14} {:>6} entries  max rel-err {:.3e}  {}\n",
                g.id.to_string(),
                g.entries,
                g.max_rel_err,
                verdict
            ));
        }
        out
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Compares the analytic gradient of the softmax loss against central finite
/// differences for every entry of every parameter block, frozen or not.
pub fn grad_check(spec: &NetworkSpec, input: &Tensor3, label: usize, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let scores = network_forward(input, spec)?;
    let (_, upstream) = softmax_loss(&scores, label)?;
    let grads = network_backward(input, spec, &upstream)?;
    let loss_at = |s: &NetworkSpec| -> Result<f64> { Ok(softmax_loss(&network_forward(input, s)?, label)?.0) };

    let mut probe = spec.clone();
    let mut groups = Vec::new();
    for (b, (id, analytic)) in grads.blocks().into_iter().enumerate() {
        let mut check = GroupCheck {
            id,
            entries: analytic.len(),
            max_rel_err: 0.0,
            worst: 0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let a = if options.corrupt == Some(id.group) { a * 1.1 } else { a };
            let original = probe.params()[b].2[i];
            set_entry(&mut probe, b, i, original + options.step);
            let plus = loss_at(&probe)?;
            set_entry(&mut probe, b, i, original - options.step);
            let minus = loss_at(&probe)?;
            set_entry(&mut probe, b, i, original);
            let fd = (plus - minus) / (2.0 * options.step);
            let e = rel_err(a, fd);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst = i;
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: options.tolerance,
    })
}

fn set_entry(spec: &mut NetworkSpec, block: usize, index: usize, value: f64) {
    spec.params_mut()[block].2[index] = value;
}
