use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{check_pixels, pgd_attack_from, AttackConfig, AttackTarget, Norm};
use crate::error::{Error, Result};

/// One attacked example. Examples the model already gets wrong count as
/// successes with `e = 0` and are left out of the mean-norm aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub example_id: usize,
    pub clean_correct: bool,
    pub attack_success: bool,
    pub final_loss: f64,
    pub l2_norm: f64,
    pub lp_norm: f64,
    pub restarts_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub rows: Vec<ReportRow>,
}

impl AttackReport {
    pub fn clean_accuracy(&self) -> f64 {
        frac(self.rows.iter().filter(|r| r.clean_correct).count(), self.rows.len())
    }

    /// `1 − successes / total`, where already-misclassified examples are
    /// successes.
    pub fn adversarial_accuracy(&self) -> f64 {
        frac(self.rows.iter().filter(|r| !r.attack_success).count(), self.rows.len())
    }

    /// Mean ‖e‖₂ over successful attacks on correctly classified examples.
    pub fn mean_l2(&self) -> Option<f64> {
        let norms: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.clean_correct && r.attack_success)
            .map(|r| r.l2_norm)
            .collect();
        (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Runs PGD on every `(id, x, y)` and checks each row's perturbation against
/// the budget and the pixel range.
pub fn run_attack<T: AttackTarget + ?Sized>(
    target: &T,
    examples: impl IntoIterator<Item = (usize, Vec<f64>, usize)>,
    config: &AttackConfig,
) -> Result<AttackReport> {
    let examples: Vec<_> = examples.into_iter().collect();
    Ok(run_attack_warm(target, &examples, config, None)?.0)
}

/// [`run_attack`] that can warm-start example `i` from `inits[i]` and also
/// returns the perturbations.
pub fn run_attack_warm<T: AttackTarget + ?Sized>(
    target: &T,
    examples: &[(usize, Vec<f64>, usize)],
    config: &AttackConfig,
    inits: Option<&[Vec<f64>]>,
) -> Result<(AttackReport, Vec<Vec<f64>>)> {
    let mut rows = Vec::new();
    let mut perturbations = Vec::new();
    for (k, (id, x, y)) in examples.iter().enumerate() {
        let (id, y) = (*id, *y);
        let out = pgd_attack_from(target, x, y, config, inits.map(|v| v[k].as_slice()))?;
        let lp = config.norm.of(&out.perturbation);
        if lp > config.eps * (1.0 + 1e-9) || !check_pixels(x, &out.perturbation) {
            return Err(Error::invalid(format!(
                "example {id}: perturbation outside the budget or pixel range (norm {lp})"
            )));
        }
        rows.push(ReportRow {
            example_id: id,
            clean_correct: out.clean_correct,
            attack_success: out.success,
            final_loss: out.final_loss,
            l2_norm: Norm::L2.of(&out.perturbation),
            lp_norm: lp,
            restarts_used: out.restarts_used,
        });
        perturbations.push(out.perturbation);
    }
    let report = AttackReport {
        config: config.clone(),
        rows,
    };
    Ok((report, perturbations))
}
