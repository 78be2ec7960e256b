//! Study configuration (TOML).
//!
//! Every key is optional; see [`StudyConfig::default`] for the defaults.
//! Numbers that are naturally written symbolically (`eps`, `h0`) accept
//! either a number or an expression string such as `"pi/30"`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expr::parse_constant;
use crate::homogenization::ExpansionSettings;
use crate::local_solver::SolverMethod;
use crate::mshho::{RhsMode, Variant};

/// A number, or a constant expression.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
}

impl Scalar {
    pub fn value(&self) -> Result<f64> {
        match self {
            Scalar::Number(v) => Ok(*v),
            Scalar::Expr(s) => parse_constant(s),
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Number(v)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub problem: ProblemSection,
    pub study: StudySection,
    pub reference: ReferenceSection,
    pub solver: SolverSection,
    pub run: RunSection,
    pub correctors: CorrectorSection,
    pub expansion: ExpansionSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Preset name (`periodic_paper`, `locally_periodic_paper`, `constant`,
    /// `laminate`) or a scalar expression in `x`, `y`, `eps`.
    pub coefficient: String,
    pub eps: Scalar,
    /// Source term, an expression in `x`, `y`, `eps`.
    pub f: String,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            coefficient: "periodic_paper".into(),
            eps: Scalar::Expr("pi/30".into()),
            f: "sin(x)*sin(y)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub variants: Vec<String>,
    pub k: Vec<usize>,
    pub levels: Vec<usize>,
    pub h0: Scalar,
    pub k_osc: usize,
    /// Hierarchy level of every fine sub-mesh. When absent each cell is
    /// refined until `h <= min(eps/4, H_T/4)`.
    pub fine_level: Option<usize>,
    /// `cell` (polynomial test functions) or `oscillatory`.
    pub rhs: String,
    /// Largest number of fine triangles per coarse cell.
    pub element_cap: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            variants: vec!["mixed".into(), "equal".into()],
            k: vec![0, 1, 2],
            levels: vec![0, 1, 2, 3, 4],
            h0: Scalar::Expr("sqrt(2)".into()),
            k_osc: 1,
            fine_level: None,
            rhs: "cell".into(),
            element_cap: 4_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    /// Defaults to the finest study level plus 3.
    pub level: Option<usize>,
    pub k: usize,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection { level: None, k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// `cholesky` or `cg`.
    pub method: String,
    pub cg_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            method: "cholesky".into(),
            cg_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Worker threads for the offline step; 0 uses every available core.
    pub workers: usize,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Write every reconstructed solution as a mesh file with values.
    pub export_solutions: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            workers: 0,
            cache: "cache".into(),
            out: "out".into(),
            seed: 42,
            export_solutions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorSection {
    /// Unit-cell grid is `n x n` squares, each split in two triangles.
    pub n: usize,
    pub q: usize,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        CorrectorSection { n: 64, q: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    pub eps: Vec<Scalar>,
    pub cells_per_period: usize,
    pub fine_q: usize,
    pub corrector_n: usize,
    pub corrector_q: usize,
    pub u0_n: usize,
    pub u0_q: usize,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        let d = ExpansionSettings::default();
        ExpansionSection {
            eps: d.eps.iter().map(|&e| Scalar::Number(e)).collect(),
            cells_per_period: d.cells_per_period,
            fine_q: d.fine_q,
            corrector_n: d.corrector_n,
            corrector_q: d.corrector_q,
            u0_n: d.u0_n,
            u0_q: d.u0_q,
        }
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            problem: ProblemSection::default(),
            study: StudySection::default(),
            reference: ReferenceSection::default(),
            solver: SolverSection::default(),
            run: RunSection::default(),
            correctors: CorrectorSection::default(),
            expansion: ExpansionSection::default(),
        }
    }
}

/// One (k, variant) curve of a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Run {
    pub k: usize,
    pub variant: Variant,
}

const MAX_DEGREE: usize = 4;
const MAX_LEVEL: usize = 10;

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: StudyConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn eps(&self) -> Result<f64> {
        let eps = self.problem.eps.value()?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(eps)
    }

    pub fn h0(&self) -> Result<f64> {
        let h0 = self.study.h0.value()?;
        if !(h0 > 0.0 && h0 <= std::f64::consts::SQRT_2 * (1.0 + 1e-14)) {
            return Err(Error::Config(format!("h0 must lie in (0, sqrt(2)], got {h0}")));
        }
        Ok(h0)
    }

    pub fn max_level(&self) -> usize {
        self.study.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn reference_level(&self) -> usize {
        self.reference.level.unwrap_or(self.max_level() + 3)
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for v in &self.study.variants {
            let v = Variant::from_str(v)?;
            if out.contains(&v) {
                return Err(Error::Config(format!("variant `{v}` listed twice")));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Curves of the study in CSV order, and notes on skipped pairs.
    pub fn runs(&self) -> Result<(Vec<Run>, Vec<String>)> {
        let variants = self.variants()?;
        let mut runs = Vec::new();
        let mut notes = Vec::new();
        for &k in &self.study.k {
            for &variant in &variants {
                if variant.cell_degree(k).is_err() {
                    notes.push(format!("skipping {variant} order with k={k} (needs k >= 1)"));
                    continue;
                }
                runs.push(Run { k, variant });
            }
        }
        Ok((runs, notes))
    }

    pub fn rhs(&self) -> Result<RhsMode> {
        RhsMode::from_str(&self.study.rhs)
    }

    pub fn solver_method(&self) -> Result<SolverMethod> {
        match self.solver.method.as_str() {
            "cholesky" => Ok(SolverMethod::Cholesky),
            "cg" if self.solver.cg_tol > 0.0 => Ok(SolverMethod::Cg {
                tol: self.solver.cg_tol,
            }),
            "cg" => Err(Error::Config("solver.cg_tol must be positive".into())),
            other => Err(Error::Config(format!(
                "unknown solver method `{other}` (expected cholesky or cg)"
            ))),
        }
    }

    pub fn expansion_settings(&self) -> Result<ExpansionSettings> {
        let e = &self.expansion;
        let eps = e.eps.iter().map(Scalar::value).collect::<Result<Vec<_>>>()?;
        if eps.len() < 2 || eps.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "expansion.eps needs at least two positive values".into(),
            ));
        }
        Ok(ExpansionSettings {
            eps,
            cells_per_period: e.cells_per_period,
            fine_q: e.fine_q,
            corrector_n: e.corrector_n,
            corrector_q: e.corrector_q,
            u0_n: e.u0_n,
            u0_q: e.u0_q,
        })
    }

    /// Checks everything that can be checked without numerical work.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        self.eps()?;
        self.h0()?;
        crate::expr::Expr::parse(&self.problem.f)?;
        let s = &self.study;
        if s.levels.is_empty() {
            return cfg("study.levels is empty".into());
        }
        if s.levels.windows(2).any(|w| w[0] >= w[1]) {
            return cfg("study.levels must be strictly increasing".into());
        }
        if s.k.is_empty() {
            return cfg("study.k is empty".into());
        }
        if let Some(&k) = s.k.iter().find(|&&k| k > MAX_DEGREE) {
            return cfg(format!("study.k = {k} exceeds the supported maximum {MAX_DEGREE}"));
        }
        let mut ks = s.k.clone();
        ks.sort_unstable();
        ks.dedup();
        if ks.len() != s.k.len() {
            return cfg("study.k has duplicates".into());
        }
        if !(1..=3).contains(&s.k_osc) {
            return cfg(format!("study.k_osc must be 1, 2 or 3, got {}", s.k_osc));
        }
        if s.element_cap == 0 {
            return cfg("study.element_cap must be positive".into());
        }
        let (runs, _) = self.runs()?;
        if runs.is_empty() {
            return cfg("no valid (k, variant) pair: mixed order needs k >= 1".into());
        }
        self.rhs()?;
        self.solver_method()?;
        let max_level = self.max_level();
        let reference = self.reference_level();
        if reference <= max_level {
            return cfg(format!(
                "reference.level = {reference} must be finer than every study level (max {max_level})"
            ));
        }
        if reference > MAX_LEVEL {
            return cfg(format!("reference.level = {reference} exceeds {MAX_LEVEL}"));
        }
        if self.reference.k > MAX_DEGREE {
            return cfg(format!("reference.k = {} is too large", self.reference.k));
        }
        if let Some(fine) = s.fine_level {
            if fine < max_level || fine > reference {
                return cfg(format!(
                    "study.fine_level = {fine} must lie between the finest study level ({max_level}) and the reference level ({reference})"
                ));
            }
        }
        if self.correctors.n < 2 || self.correctors.q > MAX_DEGREE {
            return cfg("correctors.n must be >= 2 and correctors.q small".into());
        }
        self.expansion_settings()?;
        Ok(())
    }
}
