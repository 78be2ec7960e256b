//! Regime analysis of convergence curves: pre-asymptotic slopes, resonance,
//! ordering in `k` and agreement of the two variants.

use std::fmt::Write as _;

use super::{ConvergenceRecord, Run};
use crate::mshho::Variant;

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Errors of one (k, variant) curve, ordered by level.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub run: Run,
    pub levels: Vec<usize>,
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
}

impl Curve {
    /// Observed orders `log(e_i / e_{i+1}) / log(H_i / H_{i+1})`.
    pub fn slopes(&self) -> Vec<f64> {
        (0..self.errors.len().saturating_sub(1))
            .map(|i| (self.errors[i] / self.errors[i + 1]).ln() / (self.h[i] / self.h[i + 1]).ln())
            .collect()
    }

    pub fn error_at(&self, level: usize) -> Option<f64> {
        self.levels.iter().position(|&l| l == level).map(|i| self.errors[i])
    }
}

pub fn curves(records: &[ConvergenceRecord]) -> Vec<Curve> {
    let mut out: Vec<Curve> = Vec::new();
    for r in records {
        let run = Run { k: r.k, variant: r.variant };
        let idx = match out.iter().position(|c| c.run == run) {
            Some(i) => i,
            None => {
                out.push(Curve {
                    run,
                    levels: Vec::new(),
                    h: Vec::new(),
                    errors: Vec::new(),
                });
                out.len() - 1
            }
        };
        let c = &mut out[idx];
        c.levels.push(r.level);
        c.h.push(r.h);
        c.errors.push(r.energy_error);
    }
    for c in &mut out {
        let mut order: Vec<usize> = (0..c.levels.len()).collect();
        order.sort_by_key(|&i| c.levels[i]);
        c.levels = order.iter().map(|&i| c.levels[i]).collect();
        c.h = order.iter().map(|&i| c.h[i]).collect();
        c.errors = order.iter().map(|&i| c.errors[i]).collect();
    }
    out
}

fn label(run: Run) -> String {
    format!("k={} {}", run.k, run.variant)
}

/// Observed orders on the two coarsest level pairs within `tol` of `k + 1`.
pub fn pre_asymptotic(records: &[ConvergenceRecord], tol: f64) -> Check {
    let mut pass = true;
    let mut detail = String::new();
    for c in curves(records) {
        let slopes = c.slopes();
        let first: Vec<f64> = slopes.iter().take(2).copied().collect();
        let target = c.run.k as f64 + 1.0;
        let ok = first.len() == 2 && first.iter().all(|s| (s - target).abs() <= tol);
        pass &= ok;
        let _ = write!(
            detail,
            "[{} slopes {} vs {target}] ",
            label(c.run),
            first.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(",")
        );
    }
    Check {
        name: "pre-asymptotic slopes".into(),
        pass,
        detail: detail.trim_end().into(),
    }
}

/// Every curve has, at some level with `H / eps` in `[0.5, 6]`, a strict
/// local maximum or a plateau (observed order of magnitude at most 0.3
/// towards the next level).
pub fn resonance(records: &[ConvergenceRecord], eps: f64) -> Check {
    let mut pass = true;
    let mut detail = String::new();
    for c in curves(records) {
        let slopes = c.slopes();
        let near = |i: usize| (0.5..=6.0).contains(&(c.h[i] / eps));
        let mut found = None;
        for i in 0..c.errors.len() {
            if !near(i) {
                continue;
            }
            let interior_max = i > 0
                && i + 1 < c.errors.len()
                && c.errors[i] > c.errors[i - 1]
                && c.errors[i] > c.errors[i + 1];
            if interior_max {
                found = Some(format!("maximum at level {}", c.levels[i]));
                break;
            }
            if i < slopes.len() && slopes[i].abs() <= 0.3 {
                found = Some(format!(
                    "plateau at levels {}-{} (order {:.2})",
                    c.levels[i],
                    c.levels[i + 1],
                    slopes[i]
                ));
                break;
            }
        }
        pass &= found.is_some();
        let _ = write!(
            detail,
            "[{}: {}] ",
            label(c.run),
            found.unwrap_or_else(|| "none".into())
        );
    }
    Check {
        name: "resonance near H = eps".into(),
        pass,
        detail: detail.trim_end().into(),
    }
}

/// At every level, the error does not increase with `k`. Curves are
/// compared within a variant; mixed order `k = 1` is compared with equal
/// order `k = 0`.
pub fn k_ordering(records: &[ConvergenceRecord]) -> Check {
    let cs = curves(records);
    let find = |k: usize, v: Variant| cs.iter().find(|c| c.run == Run { k, variant: v });
    let mut pass = true;
    let mut compared = 0;
    let mut detail = String::new();
    for c in &cs {
        if c.run.k == 0 {
            continue;
        }
        let lower = find(c.run.k - 1, c.run.variant).or_else(|| find(c.run.k - 1, Variant::Equal));
        let Some(lower) = lower else { continue };
        for (i, &level) in c.levels.iter().enumerate() {
            let Some(el) = lower.error_at(level) else { continue };
            compared += 1;
            if c.errors[i] > el {
                pass = false;
                let _ = write!(
                    detail,
                    "[level {level}: {} {:.3e} > {} {:.3e}] ",
                    label(c.run),
                    c.errors[i],
                    label(lower.run),
                    el
                );
            }
        }
    }
    if pass {
        detail = format!("{compared} comparisons");
    }
    Check {
        name: "error decreases with k".into(),
        pass: pass && compared > 0,
        detail: detail.trim_end().into(),
    }
}

/// Mixed and equal order at equal `k` within `tol` relative to the smaller.
pub fn variant_agreement(records: &[ConvergenceRecord], tol: f64) -> Check {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut detail = String::new();
    for m in records.iter().filter(|r| r.variant == Variant::Mixed) {
        let Some(e) = records
            .iter()
            .find(|r| r.variant == Variant::Equal && r.k == m.k && r.level == m.level)
        else {
            continue;
        };
        compared += 1;
        let rel = (m.energy_error - e.energy_error).abs() / m.energy_error.min(e.energy_error);
        if rel > worst {
            worst = rel;
            detail = format!("worst {:.1}% at level {} k={}", 100.0 * rel, m.level, m.k);
        }
    }
    Check {
        name: "mixed vs equal order agreement".into(),
        pass: compared > 0 && worst <= tol,
        detail: format!("{compared} comparisons, {detail}"),
    }
}

/// The four regime checks (a)-(d).
pub fn regime_checks(records: &[ConvergenceRecord], eps: f64) -> Vec<Check> {
    vec![
        pre_asymptotic(records, 0.3),
        resonance(records, eps),
        k_ordering(records),
        variant_agreement(records, 0.2),
    ]
}
