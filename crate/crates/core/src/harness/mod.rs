//! Configuration, offline/online orchestration, convergence studies and
//! reporting.
//!
//! Cache layout (one flat directory):
//!
//! ```text
//! L{l}-k{k}-q{k_osc}-c{cell}-{hash}.bin        basis set of one cell
//! P-L{l}-k{k}-{variant}-c{cell}-{hash}.bin     operator pack of one cell
//! <entry>.time                                 compute seconds of the entry
//! ```
//!
//! Entries are write-once. The timing sidecars are kept out of the entry
//! payloads so that the payloads are bitwise reproducible.

mod config;
pub mod regime;

pub use config::{
    CorrectorSection, ExpansionSection, ProblemSection, ReferenceSection, Run, RunSection, Scalar,
    SolverSection, StudyConfig, StudySection,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix2, Point2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficient::{DiffusionSpec, TensorField};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::hho_mono::{solve_dirichlet, volume_degree, MonoSolution};
use crate::homogenization::{expansion_energy_diagnostic, homogenize, ExpansionReport};
use crate::local_solver::SolverMethod;
use crate::mesh::io::format_mesh_with_values;
use crate::mesh::{build_hierarchy, Domain, FineSubmesh, MeshHierarchy};
use crate::mshho::{
    assemble_and_solve, energy_error_reference, loads, local_form, reconstruct_solution, MsSolution,
    PackCache, PackKey, ReconstructedField, RhsMode, Variant,
};
use crate::oscillatory_basis::{
    compute_basis_set, default_target_h, BasisCache, CacheKey, OscillatoryBasisSet,
};
use crate::quadrature::triangle_rule;
use crate::util::write_atomic;

pub const CSV_HEADER: &str = "level,H,k,variant,dofs,energy_error,offline_s,online_s";

/// One row of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub level: usize,
    #[serde(rename = "H")]
    pub h: f64,
    pub k: usize,
    pub variant: Variant,
    pub dofs: usize,
    pub energy_error: f64,
    pub offline_s: f64,
    pub online_s: f64,
}

/// Resolved configuration: coefficient, source, mesh hierarchy.
pub struct Study {
    pub config: StudyConfig,
    pub spec: DiffusionSpec,
    pub f: Expr,
    pub eps: f64,
    pub h0: f64,
    pub hierarchy: MeshHierarchy,
    pub runs: Vec<Run>,
    pub notes: Vec<String>,
    pub rhs: RhsMode,
    pub method: SolverMethod,
    pub reference_level: usize,
}

/// Coefficient from a preset name or an expression.
pub fn coefficient_from(name: &str, eps: f64) -> Result<DiffusionSpec> {
    match DiffusionSpec::preset(name, eps) {
        Ok(spec) => Ok(spec),
        Err(Error::Config(_)) => DiffusionSpec::expression(Expr::parse(name)?, eps),
        Err(e) => Err(e),
    }
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        config.validate()?;
        let eps = config.eps()?;
        let h0 = config.h0()?;
        let spec = coefficient_from(&config.problem.coefficient, eps)?;
        let f = Expr::parse(&config.problem.f)?;
        let (runs, notes) = config.runs()?;
        let reference_level = config.reference_level();
        let hierarchy = build_hierarchy(Domain::UnitSquare, reference_level + 1, h0)?;
        Ok(Study {
            rhs: config.rhs()?,
            method: config.solver_method()?,
            config,
            spec,
            f,
            eps,
            h0,
            hierarchy,
            runs,
            notes,
            reference_level,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(StudyConfig::load(path)?)
    }

    pub fn levels(&self) -> &[usize] {
        &self.config.study.levels
    }

    /// Distinct face degrees in study order.
    pub fn degrees(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = Vec::new();
        for r in &self.runs {
            if !ks.contains(&r.k) {
                ks.push(r.k);
            }
        }
        ks
    }

    pub fn variants_for(&self, k: usize) -> Vec<Variant> {
        self.runs.iter().filter(|r| r.k == k).map(|r| r.variant).collect()
    }

    pub fn cache_dir(&self) -> &Path {
        &self.config.run.cache
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.run.out
    }

    pub fn k_osc(&self) -> usize {
        self.config.study.k_osc
    }

    /// Fine sub-meshes of every cell of `level`.
    pub fn submeshes(&self, level: usize) -> Result<Vec<FineSubmesh>> {
        let coarse = self.hierarchy.level(level);
        (0..coarse.num_cells())
            .map(|c| {
                let sub = match self.config.study.fine_level {
                    Some(fine) => FineSubmesh::build_with_refinements(coarse, c, fine - level)?,
                    None => FineSubmesh::build(
                        coarse,
                        c,
                        default_target_h(coarse, c, self.eps),
                        self.config.study.element_cap,
                    )?,
                };
                if sub.num_triangles() > self.config.study.element_cap {
                    return Err(Error::TooManyElements {
                        count: sub.num_triangles(),
                        cap: self.config.study.element_cap,
                    });
                }
                if level + sub.refinements > self.reference_level {
                    return Err(Error::Config(format!(
                        "fine sub-meshes of level {level} reach level {}, finer than the reference level {}; raise reference.level or set study.fine_level",
                        level + sub.refinements,
                        self.reference_level
                    )));
                }
                Ok(sub)
            })
            .collect()
    }

    pub fn basis_key(&self, level: usize, cell: usize, k: usize, sub: &FineSubmesh) -> CacheKey {
        CacheKey {
            level,
            cell,
            k,
            k_osc: self.k_osc(),
            coefficient: self.spec.fingerprint(),
            mesh: format!(
                "unit_square|h0={:016x}|refinements={}",
                self.h0.to_bits(),
                sub.refinements
            ),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.run.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.config.run.workers)))
    }

    fn load_degree(&self, k: usize) -> usize {
        match self.rhs {
            RhsMode::Cell => 2 * k + 4,
            RhsMode::Oscillatory => 2 * self.k_osc() + 4,
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".time");
    PathBuf::from(s)
}

fn write_seconds(path: &Path, seconds: f64) -> Result<()> {
    let side = sidecar(path);
    if side.is_file() {
        return Ok(());
    }
    write_atomic(&side, format!("{seconds}\n").as_bytes())
}

/// Recorded compute seconds of a cache entry (NaN when unknown).
pub fn read_seconds(path: &Path) -> f64 {
    std::fs::read_to_string(sidecar(path))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(f64::NAN)
}

/// Offline work for one (level, k).
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEntry {
    pub level: usize,
    pub k: usize,
    pub cells: usize,
    /// Constrained Neumann solves performed (one per basis function).
    pub basis_solves: usize,
    pub basis_hits: usize,
    pub packs_built: usize,
    pub pack_hits: usize,
    /// Summed per-cell compute seconds of the two substeps.
    pub basis_s: f64,
    pub packs_s: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSummary {
    pub entries: Vec<OfflineEntry>,
    pub wall_s: f64,
}

impl OfflineSummary {
    pub fn new_solves(&self) -> usize {
        self.entries.iter().map(|e| e.basis_solves).sum()
    }

    pub fn new_packs(&self) -> usize {
        self.entries.iter().map(|e| e.packs_built).sum()
    }

    pub fn report(&self) -> String {
        let mut out = String::from("level  k  cells  solves  basis_hits  packs  pack_hits  basis_s  packs_s  wall_s\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:>5} {:>2} {:>6} {:>7} {:>11} {:>6} {:>10} {:>8.2} {:>8.2} {:>7.2}",
                e.level, e.k, e.cells, e.basis_solves, e.basis_hits, e.packs_built, e.pack_hits, e.basis_s, e.packs_s, e.wall_s
            );
        }
        let _ = writeln!(
            out,
            "total: {} new basis solves, {} new packs, {:.2} s",
            self.new_solves(),
            self.new_packs(),
            self.wall_s
        );
        out
    }
}

#[derive(Default)]
struct CellWork {
    solves: usize,
    basis_hit: bool,
    packs: usize,
    pack_hits: usize,
    basis_s: f64,
    packs_s: f64,
}

fn wrap_cell(level: usize, k: usize, cell: usize, e: Error) -> Error {
    if e.is_config_error() || matches!(e, Error::LocalSolve { .. }) {
        return e;
    }
    Error::LocalSolve {
        cell,
        reason: format!("level {level}, k={k}: {e}"),
    }
}

fn offline_cell(
    study: &Study,
    level: usize,
    k: usize,
    cell: usize,
    sub: &FineSubmesh,
    variants: &[Variant],
) -> Result<CellWork> {
    let coarse = study.hierarchy.level(level);
    let basis_cache = BasisCache::new(study.cache_dir());
    let pack_cache = PackCache::new(study.cache_dir());
    let key = study.basis_key(level, cell, k, sub);
    let pack_keys: Vec<PackKey> = variants
        .iter()
        .map(|&variant| PackKey { basis: key.clone(), variant })
        .collect();
    let mut work = CellWork::default();
    let missing: Vec<&PackKey> = pack_keys.iter().filter(|p| !pack_cache.contains(p)).collect();
    work.pack_hits = pack_keys.len() - missing.len();
    if basis_cache.contains(&key) && missing.is_empty() {
        work.basis_hit = true;
        return Ok(work);
    }
    let set = match basis_cache.load(&key)? {
        Some(set) => {
            work.basis_hit = true;
            set
        }
        None => {
            let t = Instant::now();
            let set = compute_basis_set(coarse, cell, &study.spec, k, study.k_osc(), sub)?;
            work.basis_s = t.elapsed().as_secs_f64();
            work.solves = set.len();
            let path = basis_cache.store(&key, &set)?;
            write_seconds(&path, work.basis_s)?;
            set
        }
    };
    for pk in missing {
        let t = Instant::now();
        let pack = local_form(coarse, &set, pk.variant, study.spec.alpha)?;
        let s = t.elapsed().as_secs_f64();
        let path = pack_cache.store(pk, &pack)?;
        write_seconds(&path, s)?;
        work.packs += 1;
        work.packs_s += s;
    }
    Ok(work)
}

/// Computes and caches basis sets and operator packs of every cell of every
/// study level. Entries already in the cache are not recomputed.
pub fn run_offline(study: &Study) -> Result<OfflineSummary> {
    std::fs::create_dir_all(study.cache_dir()).map_err(|e| Error::Io {
        path: study.cache_dir().to_path_buf(),
        source: e,
    })?;
    let pool = study.pool()?;
    let start = Instant::now();
    let mut entries = Vec::new();
    for &level in study.levels() {
        let submeshes = study.submeshes(level)?;
        for k in study.degrees() {
            let variants = study.variants_for(k);
            let t = Instant::now();
            let works: Vec<CellWork> = pool.install(|| {
                submeshes
                    .par_iter()
                    .enumerate()
                    .map(|(cell, sub)| {
                        offline_cell(study, level, k, cell, sub, &variants)
                            .map_err(|e| wrap_cell(level, k, cell, e))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            entries.push(OfflineEntry {
                level,
                k,
                cells: submeshes.len(),
                basis_solves: works.iter().map(|w| w.solves).sum(),
                basis_hits: works.iter().filter(|w| w.basis_hit).count(),
                packs_built: works.iter().map(|w| w.packs).sum(),
                pack_hits: works.iter().map(|w| w.pack_hits).sum(),
                basis_s: works.iter().map(|w| w.basis_s).sum(),
                packs_s: works.iter().map(|w| w.packs_s).sum(),
                wall_s: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(OfflineSummary {
        entries,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Monoscale reference solution.
pub struct Reference {
    pub level: usize,
    pub q: usize,
    pub solution: MonoSolution,
    pub energy_norm: f64,
    pub seconds: f64,
}

pub fn solve_reference(study: &Study, f: &Expr) -> Result<Reference> {
    let level = study.reference_level;
    let q = study.config.reference.k;
    let mesh = &study.hierarchy.trimeshes[level];
    let eps = study.eps;
    let source = |p: Point2<f64>| f.eval(p.x, p.y, eps);
    let t = Instant::now();
    let solution = solve_dirichlet(mesh, &study.spec, &source, q, None, study.method)?;
    let seconds = t.elapsed().as_secs_f64();
    let degree = volume_degree(q);
    let e2: f64 = (0..mesh.num_triangles())
        .into_par_iter()
        .map(|t| {
            let mut s = 0.0;
            for (p, w) in triangle_rule(&mesh.triangle(t), degree).iter() {
                let g = solution.gradient(t, p);
                s += w * g.dot(&(study.spec.tensor(p) * g));
            }
            s
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(Reference {
        level,
        q,
        solution,
        energy_norm: e2.sqrt(),
        seconds,
    })
}

/// Online result of one curve point.
pub struct OnlineRun {
    pub record: ConvergenceRecord,
    pub solution: MsSolution,
    pub field: ReconstructedField,
    pub submeshes: Vec<FineSubmesh>,
}

struct CachedLevel {
    submeshes: Vec<FineSubmesh>,
    sets: Vec<OscillatoryBasisSet>,
    packs: Vec<crate::mshho::LocalOperatorPack>,
    offline_s: f64,
}

/// Every missing cache file of the study, as key texts.
pub fn missing_entries(study: &Study) -> Result<Vec<String>> {
    let basis_cache = BasisCache::new(study.cache_dir());
    let pack_cache = PackCache::new(study.cache_dir());
    let mut missing = Vec::new();
    for &level in study.levels() {
        let submeshes = study.submeshes(level)?;
        for k in study.degrees() {
            for (cell, sub) in submeshes.iter().enumerate() {
                let key = study.basis_key(level, cell, k, sub);
                if !basis_cache.contains(&key) {
                    missing.push(key.file_name());
                }
                for variant in study.variants_for(k) {
                    let pk = PackKey { basis: key.clone(), variant };
                    if !pack_cache.contains(&pk) {
                        missing.push(pk.file_name());
                    }
                }
            }
        }
    }
    Ok(missing)
}

fn load_level(study: &Study, level: usize, run: Run) -> Result<CachedLevel> {
    let basis_cache = BasisCache::new(study.cache_dir());
    let pack_cache = PackCache::new(study.cache_dir());
    let submeshes = study.submeshes(level)?;
    let keys: Vec<CacheKey> = submeshes
        .iter()
        .enumerate()
        .map(|(c, s)| study.basis_key(level, c, run.k, s))
        .collect();
    let pack_keys: Vec<PackKey> = keys
        .iter()
        .map(|k| PackKey { basis: k.clone(), variant: run.variant })
        .collect();
    let mut missing: Vec<String> = Vec::new();
    for (k, pk) in keys.iter().zip(&pack_keys) {
        if !basis_cache.contains(k) {
            missing.push(k.file_name());
        }
        if !pack_cache.contains(pk) {
            missing.push(pk.file_name());
        }
    }
    if !missing.is_empty() {
        return Err(Error::CacheMiss { keys: missing });
    }
    let mut sets = Vec::with_capacity(keys.len());
    let mut packs = Vec::with_capacity(keys.len());
    let mut offline_s = 0.0;
    for (k, pk) in keys.iter().zip(&pack_keys) {
        let set = basis_cache
            .load(k)?
            .ok_or_else(|| Error::CacheMiss { keys: vec![k.file_name()] })?;
        let pack = pack_cache
            .load(pk)?
            .ok_or_else(|| Error::CacheMiss { keys: vec![pk.file_name()] })?;
        offline_s += read_seconds(&basis_cache.path(k)) + read_seconds(&pack_cache.path(pk));
        sets.push(set);
        packs.push(pack);
    }
    Ok(CachedLevel {
        submeshes,
        sets,
        packs,
        offline_s,
    })
}

/// Online step for one (level, k, variant): loads, condensed solve, cell
/// recovery. Fails with [`Error::CacheMiss`] when the offline step has not
/// produced every entry. The error is computed when a reference is given.
pub fn online_solve(
    study: &Study,
    level: usize,
    run: Run,
    f: &Expr,
    reference: Option<&Reference>,
) -> Result<OnlineRun> {
    let cached = load_level(study, level, run)?;
    let coarse = study.hierarchy.level(level);
    let eps = study.eps;
    let source = |p: Point2<f64>| f.eval(p.x, p.y, eps);
    let t = Instant::now();
    let local = loads(
        coarse,
        &cached.sets,
        &cached.submeshes,
        &cached.packs,
        &source,
        study.rhs,
        study.load_degree(run.k),
    );
    let solution = assemble_and_solve(coarse, &cached.packs, &local, study.method)?;
    let online_s = t.elapsed().as_secs_f64();
    let field = reconstruct_solution(&cached.sets, &cached.submeshes, &solution);
    let energy_error = match reference {
        Some(r) => energy_error_reference(
            &field,
            &cached.submeshes,
            level,
            r.level,
            &study.hierarchy.trimeshes[r.level],
            &r.solution,
            &study.spec,
            volume_degree(r.q),
        )?,
        None => f64::NAN,
    };
    Ok(OnlineRun {
        record: ConvergenceRecord {
            level,
            h: study.hierarchy.nominal_h(level),
            k: run.k,
            variant: run.variant,
            dofs: solution.num_dofs,
            energy_error,
            offline_s: cached.offline_s,
            online_s,
        },
        solution,
        field,
        submeshes: cached.submeshes,
    })
}

/// Online step of every curve point, in CSV order.
pub fn run_online(study: &Study, f: &Expr, reference: Option<&Reference>) -> Result<Vec<OnlineRun>> {
    let missing = missing_entries(study)?;
    if !missing.is_empty() {
        return Err(Error::CacheMiss { keys: missing });
    }
    let mut out = Vec::new();
    for &level in study.levels() {
        for &run in &study.runs {
            out.push(online_solve(study, level, run, f, reference)?);
        }
    }
    Ok(out)
}

pub fn format_csv(records: &[ConvergenceRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    }
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 csv")
}

pub fn parse_csv(text: &str) -> Result<Vec<ConvergenceRecord>> {
    let bad = |e: csv::Error| Error::Config(format!("bad convergence CSV: {e}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(bad)?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(bad)).collect()
}

fn curve_name(k: usize, k_osc: usize, variant: Variant) -> String {
    let v = match variant {
        Variant::Mixed => "mo",
        Variant::Equal => "eo",
    };
    format!("K{k}k{k_osc}{v}")
}

/// Whitespace-separated table with one row per level and one column per
/// curve; the `eps` marker is the first comment line.
pub fn format_plot_data(records: &[ConvergenceRecord], eps: f64, k_osc: usize) -> String {
    let mut runs: Vec<Run> = Vec::new();
    let mut levels: Vec<(usize, f64)> = Vec::new();
    for r in records {
        let run = Run { k: r.k, variant: r.variant };
        if !runs.contains(&run) {
            runs.push(run);
        }
        if !levels.iter().any(|(l, _)| *l == r.level) {
            levels.push((r.level, r.h));
        }
    }
    let mut out = format!("# eps = {eps}\nH");
    for run in &runs {
        out.push(' ');
        out.push_str(&curve_name(run.k, k_osc, run.variant));
    }
    out.push('\n');
    for (level, h) in levels {
        let _ = write!(out, "{h}");
        for run in &runs {
            let e = records
                .iter()
                .find(|r| r.level == level && r.k == run.k && r.variant == run.variant)
                .map_or(f64::NAN, |r| r.energy_error);
            let _ = write!(out, " {e:e}");
        }
        out.push('\n');
    }
    out
}

/// Reads the `eps` marker back from plot data.
pub fn plot_data_eps(text: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix("# eps = "))
        .and_then(|v| v.trim().parse().ok())
}

pub fn format_gnuplot(eps: f64, data_file: &str, columns: usize) -> String {
    format!(
        "set logscale xy\n\
         set xrange [*:*] reverse\n\
         set xlabel \"H\"\n\
         set ylabel \"energy error\"\n\
         set key outside right autotitle columnhead\n\
         eps = {eps}\n\
         set arrow from eps, graph 0 to eps, graph 1 nohead lc rgb \"red\"\n\
         plot for [i=2:{}] '{data_file}' using 1:i with linespoints\n",
        columns + 1
    )
}

/// Files written by a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFiles {
    pub csv: PathBuf,
    pub data: PathBuf,
    pub script: PathBuf,
}

pub fn write_study_outputs(
    out: &Path,
    stem: &str,
    records: &[ConvergenceRecord],
    eps: f64,
    k_osc: usize,
) -> Result<StudyFiles> {
    let csv = out.join(format!("{stem}.csv"));
    let data = out.join(format!("{stem}.dat"));
    let script = out.join(format!("{stem}.gp"));
    write_atomic(&csv, format_csv(records).as_bytes())?;
    write_atomic(&data, format_plot_data(records, eps, k_osc).as_bytes())?;
    let columns = records
        .iter()
        .map(|r| (r.k, r.variant))
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let data_name = data.file_name().unwrap().to_string_lossy().into_owned();
    write_atomic(&script, format_gnuplot(eps, &data_name, columns).as_bytes())?;
    Ok(StudyFiles { csv, data, script })
}

/// Writes the reconstructed solution on the union of fine sub-meshes, one
/// value per (duplicated) fine vertex.
pub fn export_solution(path: &Path, run: &OnlineRun) -> Result<()> {
    let mut vertices = Vec::new();
    let mut cells = Vec::new();
    let mut values = Vec::new();
    for (cell, sub) in run.submeshes.iter().enumerate() {
        for t in 0..sub.mesh.num_triangles() {
            let tri = sub.mesh.triangle(t);
            let base = vertices.len();
            for p in tri {
                vertices.push(p);
                values.push(run.field.value(cell, t, p));
            }
            cells.push(vec![base, base + 1, base + 2]);
        }
    }
    write_atomic(
        path,
        format_mesh_with_values(&vertices, &cells, &[], Some(&values)).as_bytes(),
    )
}

/// Result of a full convergence study.
pub struct StudyReport {
    pub records: Vec<ConvergenceRecord>,
    pub offline: OfflineSummary,
    pub reference_s: f64,
    pub reference_energy: f64,
    pub eps: f64,
    pub files: StudyFiles,
    pub checks: Vec<regime::Check>,
}

/// Offline step, reference, online step with errors, CSV and plot data.
pub fn run_convergence_study(study: &Study) -> Result<StudyReport> {
    let offline = run_offline(study)?;
    let reference = solve_reference(study, &study.f)?;
    let runs = run_online(study, &study.f, Some(&reference))?;
    if study.config.run.export_solutions {
        for r in &runs {
            let name = format!(
                "solution-L{}-k{}-{}.mesh",
                r.record.level, r.record.k, r.record.variant
            );
            export_solution(&study.out_dir().join(name), r)?;
        }
    }
    let records: Vec<ConvergenceRecord> = runs.into_iter().map(|r| r.record).collect();
    let files = write_study_outputs(study.out_dir(), "convergence", &records, study.eps, study.k_osc())?;
    let checks = regime::regime_checks(&records, study.eps);
    Ok(StudyReport {
        records,
        offline,
        reference_s: reference.seconds,
        reference_energy: reference.energy_norm,
        eps: study.eps,
        files,
        checks,
    })
}

/// Homogenized tensor of the configured coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorReport {
    pub a0: Matrix2<f64>,
    pub n: usize,
    pub q: usize,
    pub residual: f64,
    pub seconds: f64,
}

pub fn run_correctors(config: &StudyConfig) -> Result<CorrectorReport> {
    config.validate()?;
    let spec = coefficient_from(&config.problem.coefficient, config.eps()?)?;
    let t = Instant::now();
    let (set, a0) = homogenize(&spec, config.correctors.n, config.correctors.q)?;
    Ok(CorrectorReport {
        a0: a0.a0,
        n: set.n,
        q: set.q,
        residual: set.residual,
        seconds: t.elapsed().as_secs_f64(),
    })
}

pub fn format_correctors(r: &CorrectorReport) -> String {
    format!(
        "n = {}\nq = {}\nA0 = [{:.10e} {:.10e}; {:.10e} {:.10e}]\nresidual = {:e}\nseconds = {:.3}\n",
        r.n, r.q, r.a0[(0, 0)], r.a0[(0, 1)], r.a0[(1, 0)], r.a0[(1, 1)], r.residual, r.seconds
    )
}

pub fn run_expansion(config: &StudyConfig) -> Result<ExpansionReport> {
    config.validate()?;
    let spec = coefficient_from(&config.problem.coefficient, config.eps()?)?;
    let f = Expr::parse(&config.problem.f)?;
    let settings = config.expansion_settings()?;
    // the source is evaluated at each diagnostic's own eps
    let source = |p: Point2<f64>| f.eval(p.x, p.y, spec.eps);
    expansion_energy_diagnostic(&spec, &source, &settings)
}

pub fn format_expansion(r: &ExpansionReport) -> String {
    let mut out = String::from("eps,energy\n");
    for (e, v) in r.eps.iter().zip(&r.energy) {
        let _ = writeln!(out, "{e},{v:e}");
    }
    let _ = writeln!(out, "# slope = {}", r.slope);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, extra: &str) -> StudyConfig {
        let text = format!(
            r#"
            [problem]
            coefficient = "periodic_paper"
            eps = 0.25
            [study]
            k = [0, 1]
            levels = [0, 1]
            fine_level = 3
            [reference]
            level = 3
            k = 1
            [run]
            cache = "{}"
            out = "{}"
            {extra}
            "#,
            dir.join("cache").display(),
            dir.join("out").display()
        );
        StudyConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn offline_is_idempotent_and_counts_solves() {
        let dir = tempfile::tempdir().unwrap();
        let study = Study::new(tiny(dir.path(), "workers = 1")).unwrap();
        let first = run_offline(&study).unwrap();
        // level 0: 2 cells, level 1: 8 cells; k = 0: 3 face functions,
        // k = 1: 1 cell + 3 * 2 face functions
        assert_eq!(first.new_solves(), (2 + 8) * 3 + (2 + 8) * 7);
        assert_eq!(first.new_packs(), (2 + 8) * (1 + 2));
        let second = run_offline(&study).unwrap();
        assert_eq!(second.new_solves(), 0);
        assert_eq!(second.new_packs(), 0);
        assert!(missing_entries(&study).unwrap().is_empty());
    }

    #[test]
    fn online_without_offline_names_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let study = Study::new(tiny(dir.path(), "")).unwrap();
        let run = study.runs[0];
        match online_solve(&study, 0, run, &study.f, None) {
            Err(Error::CacheMiss { keys }) => {
                assert_eq!(keys.len(), 4);
                assert!(keys.iter().any(|k| k.starts_with("L0-k0-q1-c0-")));
                assert!(keys.iter().any(|k| k.starts_with("P-L0-k0-equal-c1-")));
            }
            other => panic!("expected a cache miss, got {:?}", other.err()),
        }
    }

    #[test]
    fn study_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let study = Study::new(tiny(dir.path(), "")).unwrap();
        let report = run_convergence_study(&study).unwrap();
        assert_eq!(report.records.len(), 2 * 3);
        let csv = std::fs::read_to_string(&report.files.csv).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(parse_csv(&csv).unwrap().len(), report.records.len());
        let data = std::fs::read_to_string(&report.files.data).unwrap();
        assert_eq!(plot_data_eps(&data), Some(0.25));
        for r in &report.records {
            assert!(r.energy_error > 0.0 && r.energy_error < report.reference_energy);
            let coarse = study.hierarchy.level(r.level);
            assert_eq!(r.dofs, coarse.num_interior_faces() * (r.k + 1));
        }
    }
}
