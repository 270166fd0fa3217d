//! Run configuration, single-phase sweeps and the operator-splitting
//! two-phase driver.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::downscale::{downscale_all, FluxField};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_constraints, assemble_load, assemble_stiffness, cell_coefficients, unit_mobility,
    BoundaryConditions,
};
use crate::field::{default_geometry, gen_channel_field, load_field, write_values, PermeabilityField, SourceField};
use crate::mesh::{CoarseGrid, FineGrid};
use crate::metrics::{saturation_error, ErrorReport, Norms};
use crate::msbasis::{build_coarse_space, CoarseSpace};
use crate::saddle::{
    coarse_subspace, constraint_residual, project, solve_fine_fv, solve_galerkin, solve_kkt, Subspace,
};
use crate::transport::{
    advance_saturation, cell_mobility, cfl_dt, volume_integrals, FluidProps, SaturationBc,
    SaturationState, Velocity,
};

/// Conservation residuals above this flag a run as failed.
pub const CONSERVATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FineFv,
    GmsfemFv,
    Galerkin,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine-fv" => Ok(Mode::FineFv),
            "gmsfem-fv" => Ok(Mode::GmsfemFv),
            "galerkin-unconstrained" | "galerkin" => Ok(Mode::Galerkin),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FineFv => "fine-fv",
            Mode::GmsfemFv => "gmsfem-fv",
            Mode::Galerkin => "galerkin-unconstrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    File(PathBuf),
    Synthetic { background: f64, contrast: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub nx: usize,
    pub ny: usize,
    pub ncx: usize,
    pub ncy: usize,
    pub field: FieldSource,
    pub l_interior: usize,
    pub levels: Vec<usize>,
    pub p_left: f64,
    pub p_right: f64,
    pub mu_w: f64,
    pub mu_o: f64,
    pub dt: f64,
    pub steps_per_pressure: usize,
    pub t_final: f64,
    /// Snapshot times; empty means `{0.3, 0.6, 0.9}·T`.
    pub output_times: Vec<f64>,
    pub mode: Mode,
    pub out_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nx: 100,
            ny: 100,
            ncx: 10,
            ncy: 10,
            field: FieldSource::Synthetic { background: 1.0, contrast: 1e4, seed: 7 },
            l_interior: 4,
            levels: vec![1, 2, 4, 6, 8, 10],
            p_left: 1.0,
            p_right: 0.0,
            mu_w: 1.0,
            mu_o: 5.0,
            dt: 1e-4,
            steps_per_pressure: 100,
            t_final: 0.9,
            output_times: Vec::new(),
            mode: Mode::GmsfemFv,
            out_dir: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl SimConfig {
    pub const KEYS: [&'static str; 20] = [
        "nx", "ny", "ncx", "ncy", "field", "background", "contrast", "seed", "L", "levels",
        "p_left", "p_right", "mu_w", "mu_o", "dt", "steps_per_pressure", "t_final",
        "output_times", "mode", "out_dir",
    ];

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let synth = |cfg: &mut Self| -> (f64, f64, u64) {
            match cfg.field {
                FieldSource::Synthetic { background, contrast, seed } => (background, contrast, seed),
                FieldSource::File(_) => (1.0, 1e4, 7),
            }
        };
        match key {
            "nx" => self.nx = parse_num(key, v)?,
            "ny" => self.ny = parse_num(key, v)?,
            "ncx" => self.ncx = parse_num(key, v)?,
            "ncy" => self.ncy = parse_num(key, v)?,
            "field" => {
                self.field = if v == "synthetic" {
                    let (background, contrast, seed) = synth(self);
                    FieldSource::Synthetic { background, contrast, seed }
                } else {
                    FieldSource::File(PathBuf::from(v))
                }
            }
            "background" | "contrast" | "seed" => {
                let (mut background, mut contrast, mut seed) = synth(self);
                match key {
                    "background" => background = parse_num(key, v)?,
                    "contrast" => contrast = parse_num(key, v)?,
                    _ => seed = parse_num(key, v)?,
                }
                self.field = FieldSource::Synthetic { background, contrast, seed };
            }
            "L" => self.l_interior = parse_num(key, v)?,
            "levels" => self.levels = parse_list(key, v)?,
            "p_left" => self.p_left = parse_num(key, v)?,
            "p_right" => self.p_right = parse_num(key, v)?,
            "mu_w" => self.mu_w = parse_num(key, v)?,
            "mu_o" => self.mu_o = parse_num(key, v)?,
            "dt" => self.dt = parse_num(key, v)?,
            "steps_per_pressure" => self.steps_per_pressure = parse_num(key, v)?,
            "t_final" => self.t_final = parse_num(key, v)?,
            "output_times" => self.output_times = parse_list(key, v)?,
            "mode" => self.mode = v.parse()?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.t_final > 0.0) {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps_per_pressure == 0 {
            return bad("steps_per_pressure must be at least 1".into());
        }
        if self.l_interior == 0 || self.levels.contains(&0) {
            return bad("enrichment levels start at 1".into());
        }
        if self.output_times.iter().any(|&t| !(t > 0.0 && t <= self.t_final)) {
            return bad("output times must lie in (0, t_final]".into());
        }
        FluidProps::new(self.mu_w, self.mu_o)?;
        Ok(())
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        if self.output_times.is_empty() {
            [0.3, 0.6, 0.9].iter().map(|f| f * self.t_final).collect()
        } else {
            self.output_times.clone()
        }
    }

    pub fn total_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil() as usize
    }

    pub fn num_pressure_solves(&self) -> usize {
        self.total_steps().div_ceil(self.steps_per_pressure)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("nx", self.nx.to_string());
        kv("ny", self.ny.to_string());
        kv("ncx", self.ncx.to_string());
        kv("ncy", self.ncy.to_string());
        match &self.field {
            FieldSource::File(p) => kv("field", p.display().to_string()),
            FieldSource::Synthetic { background, contrast, seed } => {
                kv("field", "synthetic".into());
                kv("background", background.to_string());
                kv("contrast", contrast.to_string());
                kv("seed", seed.to_string());
            }
        }
        kv("L", self.l_interior.to_string());
        kv("levels", join(&self.levels));
        kv("p_left", self.p_left.to_string());
        kv("p_right", self.p_right.to_string());
        kv("mu_w", self.mu_w.to_string());
        kv("mu_o", self.mu_o.to_string());
        kv("dt", self.dt.to_string());
        kv("steps_per_pressure", self.steps_per_pressure.to_string());
        kv("t_final", self.t_final.to_string());
        if !self.output_times.is_empty() {
            kv("output_times", join(&self.output_times));
        }
        kv("mode", self.mode.to_string());
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        s
    }
}

/// Grids, permeability and boundary data of one configuration.
#[derive(Debug, Clone)]
pub struct Problem {
    pub fg: FineGrid,
    pub cg: CoarseGrid,
    pub k: PermeabilityField,
    pub bc: BoundaryConditions,
    pub src: SourceField,
}

impl Problem {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let fg = FineGrid::new(cfg.nx, cfg.ny)?;
        let cg = CoarseGrid::new(&fg, cfg.ncx, cfg.ncy)?;
        let k = match &cfg.field {
            FieldSource::File(p) => load_field(p, &fg)?,
            FieldSource::Synthetic { background, contrast, seed } => {
                gen_channel_field(&fg, *background, *contrast, &default_geometry(), *seed)?
            }
        };
        let bc = BoundaryConditions::pressure_drop(&fg, cfg.p_left, cfg.p_right);
        let src = SourceField::zero(&fg);
        Ok(Self { fg, cg, k, bc, src })
    }
}

/// Result of one pressure solve.
#[derive(Debug, Clone)]
pub struct PressureOutcome {
    pub pressure: Vec<f64>,
    /// Max coarse-volume balance residual of the fine pressure.
    pub constraint_residual: f64,
    pub kkt_size: usize,
    pub dim_v0: usize,
}

/// Coarse trial space reused across solves with changing mobility.
pub struct CoarseSolver {
    pub space: CoarseSpace,
    sub: Subspace,
}

impl CoarseSolver {
    pub fn new(p: &Problem, space: CoarseSpace) -> Result<Self> {
        let sub = coarse_subspace(&space, &p.cg, &p.bc)?;
        Ok(Self { space, sub })
    }

    pub fn solve(&self, p: &Problem, mobility: &[f64], constrained: bool) -> Result<PressureOutcome> {
        let a = assemble_stiffness(&p.fg, &p.k, mobility)?;
        let load = assemble_load(&p.fg, &p.src, &p.bc)?;
        let cons = assemble_constraints(&p.fg, &p.k, mobility, &p.cg.control_volumes(), &p.src, &p.bc)?;
        let sys = project(&a, &load, &cons, &self.sub, p.cg.num_nodes())?;
        let sol = if constrained {
            solve_kkt(&sys, &self.sub)?
        } else {
            solve_galerkin(&sys, &self.sub)?
        };
        Ok(PressureOutcome {
            constraint_residual: constraint_residual(&cons, &sol.pressure),
            pressure: sol.pressure,
            kkt_size: sys.reported_size,
            dim_v0: self.space.dim(),
        })
    }
}

/// Fine FV solve with the coarse-volume residual measured for reference.
pub fn solve_fine(p: &Problem, mobility: &[f64]) -> Result<PressureOutcome> {
    let coef = cell_coefficients(&p.k, mobility)?;
    let sol = solve_fine_fv(&p.fg, &coef, &p.src.q, &p.bc)?;
    let cons = assemble_constraints(&p.fg, &p.k, mobility, &p.cg.control_volumes(), &p.src, &p.bc)?;
    Ok(PressureOutcome {
        constraint_residual: constraint_residual(&cons, &sol.pressure),
        pressure: sol.pressure,
        kkt_size: 0,
        dim_v0: p.fg.num_nodes(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct Timings(pub Vec<(&'static str, f64)>);

impl Timings {
    fn add(&mut self, phase: &'static str, since: Instant) {
        let dt = since.elapsed().as_secs_f64();
        match self.0.iter_mut().find(|(p, _)| *p == phase) {
            Some((_, t)) => *t += dt,
            None => self.0.push((phase, dt)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub l: usize,
    pub report: ErrorReport,
    pub constraint_residual: f64,
    /// Max fine-volume residual of the downscaled fluxes (constrained mode only).
    pub fine_conservation: Option<f64>,
    pub pressure: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: String,
    pub mode: Mode,
    pub levels: Vec<LevelRecord>,
    pub timings: Timings,
    pub notes: Vec<String>,
    pub failed: bool,
}

impl RunRecord {
    pub fn csv(&self) -> String {
        let mut s = format!("L,{},constraint_residual,fine_conservation\n", ErrorReport::CSV_HEADER);
        for r in &self.levels {
            let fine = r.fine_conservation.map_or("NA".to_string(), |v| format!("{v:e}"));
            let _ = writeln!(s, "{},{},{:e},{fine}", r.l, r.report.csv_row(), r.constraint_residual);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# config\n");
        s.push_str(&self.config);
        let _ = writeln!(s, "# results\nstatus = {}", if self.failed { "FAILED" } else { "ok" });
        for n in &self.notes {
            let _ = writeln!(s, "note = {n}");
        }
        for r in &self.levels {
            let _ = writeln!(s, "[L = {}]", r.l);
            s.push_str(&r.report.to_text());
            let _ = writeln!(s, "constraint_residual = {:e}", r.constraint_residual);
            if let Some(v) = r.fine_conservation {
                let _ = writeln!(s, "fine_conservation = {v:e}");
            }
        }
        for (p, t) in &self.timings.0 {
            let _ = writeln!(s, "time_{p}_s = {t:.3}");
        }
        s
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        put("errors.csv", &self.csv())?;
        put("record.txt", &self.to_text())?;
        for r in &self.levels {
            write_values(&dir.join(format!("pressure_L{}.txt", r.l)), &r.pressure)?;
        }
        Ok(())
    }
}

/// Fine reference plus one coarse solve per enrichment level.
pub fn run_single_phase(cfg: &SimConfig) -> Result<RunRecord> {
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let p = Problem::new(cfg)?;
    timings.add("assembly", t0);
    let mob = unit_mobility(&p.fg);
    let t0 = Instant::now();
    let reference = solve_fine(&p, &mob)?;
    timings.add("solve", t0);
    let norms = Norms::new(&p.fg, &p.k)?;
    let mut notes = Vec::new();
    let mut levels = Vec::new();
    let mut failed = false;

    if cfg.mode == Mode::FineFv {
        notes.push("mode fine-fv ignores the enrichment levels".to_string());
        let coef = cell_coefficients(&p.k, &mob)?;
        let flux = FluxField::from_fine_pressure(&p.fg, &coef, &reference.pressure, &p.src.q, &p.bc)?;
        let fine = flux.conservation_residual(&p.fg, &p.src.q);
        failed |= fine > CONSERVATION_TOL || reference.constraint_residual > CONSERVATION_TOL;
        levels.push(LevelRecord {
            l: 0,
            report: ErrorReport {
                n_c: p.fg.num_nodes(),
                dim_v0: p.fg.num_nodes(),
                m_c: p.fg.num_nodes(),
                ..ErrorReport::default()
            },
            constraint_residual: reference.constraint_residual,
            fine_conservation: Some(fine),
            pressure: reference.pressure,
        });
    } else {
        let lmax = *cfg.levels.iter().max().ok_or_else(|| Error::Config("no levels".into()))?;
        let t0 = Instant::now();
        let full = build_coarse_space(&p.cg, &p.k, lmax)?;
        timings.add("basis", t0);
        let coef = cell_coefficients(&p.k, &mob)?;
        for &l in &cfg.levels {
            let t0 = Instant::now();
            let solver = CoarseSolver::new(&p, full.restrict(l)?)?;
            let out = solver.solve(&p, &mob, cfg.mode == Mode::GmsfemFv)?;
            timings.add("solve", t0);
            let (l2, h1) = norms.relative_errors(&reference.pressure, &out.pressure)?;
            let fine_conservation = if cfg.mode == Mode::GmsfemFv {
                let t0 = Instant::now();
                let flux = downscale_all(&p.cg, &coef, &p.src.q, &p.bc, &out.pressure)?;
                timings.add("downscale", t0);
                let r = flux.conservation_residual(&p.fg, &p.src.q);
                failed |= r > CONSERVATION_TOL || out.constraint_residual > CONSERVATION_TOL;
                Some(r)
            } else {
                None
            };
            levels.push(LevelRecord {
                l,
                report: ErrorReport {
                    n_c: out.kkt_size,
                    dim_v0: out.dim_v0,
                    m_c: p.cg.num_nodes(),
                    l2k_pct: l2,
                    h1k_pct: h1,
                    saturation_pct: Vec::new(),
                },
                constraint_residual: out.constraint_residual,
                fine_conservation,
                pressure: out.pressure,
            });
        }
    }
    let record = RunRecord {
        config: cfg.to_text(),
        mode: cfg.mode,
        levels,
        timings,
        notes,
        failed,
    };
    if let Some(dir) = &cfg.out_dir {
        record.persist(dir)?;
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct TwoPhaseRecord {
    pub config: String,
    pub mode: Mode,
    pub dim_v0: usize,
    pub n_c: usize,
    /// `(t, saturation per fine volume)` at the requested output times.
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub steps: usize,
    pub pressure_solves: usize,
    pub final_time: f64,
    pub min_dt_max: f64,
    pub max_constraint_residual: f64,
    pub max_fine_conservation: f64,
    pub timings: Timings,
    pub notes: Vec<String>,
    pub failed: bool,
}

impl TwoPhaseRecord {
    /// Saturation error against `reference` at every shared snapshot time.
    pub fn saturation_errors(&self, reference: &TwoPhaseRecord) -> Result<Vec<(f64, f64)>> {
        if self.snapshots.len() != reference.snapshots.len() {
            return Err(Error::Config("snapshot sets differ".into()));
        }
        self.snapshots
            .iter()
            .zip(&reference.snapshots)
            .map(|((t, s), (tr, sr))| {
                if (t - tr).abs() > 1e-12 {
                    return Err(Error::Config(format!("snapshot times {t} and {tr} differ")));
                }
                Ok((*t, saturation_error(sr, s)?))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# config\n");
        s.push_str(&self.config);
        let _ = writeln!(s, "# results\nstatus = {}", if self.failed { "FAILED" } else { "ok" });
        for n in &self.notes {
            let _ = writeln!(s, "note = {n}");
        }
        let _ = writeln!(s, "N_c = {}\ndimV0 = {}", self.n_c, self.dim_v0);
        let _ = writeln!(s, "steps = {}\npressure_solves = {}", self.steps, self.pressure_solves);
        let _ = writeln!(s, "final_time = {}", self.final_time);
        let _ = writeln!(s, "min_dt_max = {:e}", self.min_dt_max);
        let _ = writeln!(s, "max_constraint_residual = {:e}", self.max_constraint_residual);
        let _ = writeln!(s, "max_fine_conservation = {:e}", self.max_fine_conservation);
        for (p, t) in &self.timings.0 {
            let _ = writeln!(s, "time_{p}_s = {t:.3}");
        }
        s
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("record.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))?;
        for (t, s) in &self.snapshots {
            write_values(&dir.join(format!("saturation_t{t:.4}.txt")), s)?;
        }
        Ok(())
    }
}

/// Pressure solve, flux reconstruction, then `steps_per_pressure` transport
/// steps, repeated until `t_final`. The coarse space is built once from `k`.
pub fn run_two_phase(cfg: &SimConfig) -> Result<TwoPhaseRecord> {
    if cfg.mode == Mode::Galerkin {
        return Err(Error::Config(
            "galerkin-unconstrained fluxes are not conservative; two-phase runs need fine-fv or gmsfem-fv".into(),
        ));
    }
    let mut timings = Timings::default();
    let p = Problem::new(cfg)?;
    let props = FluidProps::new(cfg.mu_w, cfg.mu_o)?;
    let mut notes = Vec::new();
    let solver = if cfg.mode == Mode::GmsfemFv {
        let t0 = Instant::now();
        let s = CoarseSolver::new(&p, build_coarse_space(&p.cg, &p.k, cfg.l_interior)?)?;
        timings.add("basis", t0);
        Some(s)
    } else {
        notes.push("mode fine-fv ignores the enrichment level".to_string());
        None
    };
    let (dim_v0, n_c) = match &solver {
        Some(s) => (s.space.dim(), s.space.dim() + p.cg.num_nodes()),
        None => (p.fg.num_nodes(), p.fg.num_nodes()),
    };

    let sbc = SaturationBc::left_inflow(&p.fg, 1.0)?;
    let qw = volume_integrals(&p.fg, &p.src.qw);
    let mut state = SaturationState::initial(&p.fg, 0.0, &sbc)?;
    let total = cfg.total_steps();
    let mut snap_steps: Vec<(usize, f64)> = cfg
        .snapshot_times()
        .into_iter()
        .map(|t| (((t / cfg.dt - 1e-9).ceil() as usize).min(total), t))
        .collect();
    snap_steps.sort_by_key(|&(s, _)| s);
    let mut snapshots = Vec::new();
    let (mut max_cons, mut max_fine, mut min_dt_max) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut solves = 0;

    while state.step < total {
        let t0 = Instant::now();
        let mob = cell_mobility(&p.fg, &state.s, &props)?;
        let coef = cell_coefficients(&p.k, &mob)?;
        timings.add("assembly", t0);
        let t0 = Instant::now();
        let out = match &solver {
            Some(s) => s.solve(&p, &mob, true)?,
            None => solve_fine(&p, &mob)?,
        };
        timings.add("solve", t0);
        solves += 1;
        max_cons = max_cons.max(out.constraint_residual);
        let t0 = Instant::now();
        let flux = match &solver {
            Some(_) => downscale_all(&p.cg, &coef, &p.src.q, &p.bc, &out.pressure)?,
            None => FluxField::from_fine_pressure(&p.fg, &coef, &out.pressure, &p.src.q, &p.bc)?,
        };
        max_fine = max_fine.max(flux.conservation_residual(&p.fg, &p.src.q));
        timings.add("downscale", t0);
        let t0 = Instant::now();
        let vel = Velocity::new(&p.fg, &flux)?;
        min_dt_max = min_dt_max.min(cfl_dt(&vel, &sbc, &props)?);
        let end = (state.step + cfg.steps_per_pressure).min(total);
        while state.step < end {
            state = advance_saturation(&state, &vel, &qw, cfg.dt, &sbc, &props)?;
            state.t = state.step as f64 * cfg.dt;
            while let Some(&(s, t)) = snap_steps.first() {
                if s != state.step {
                    break;
                }
                snapshots.push((t, state.s.clone()));
                snap_steps.remove(0);
            }
        }
        timings.add("transport", t0);
    }

    let record = TwoPhaseRecord {
        config: cfg.to_text(),
        mode: cfg.mode,
        dim_v0,
        n_c,
        snapshots,
        steps: state.step,
        pressure_solves: solves,
        final_time: state.t,
        min_dt_max,
        max_constraint_residual: max_cons,
        max_fine_conservation: max_fine,
        failed: max_fine > CONSERVATION_TOL
            || (cfg.mode == Mode::GmsfemFv && max_cons > CONSERVATION_TOL),
        timings,
        notes,
    };
    if let Some(dir) = &cfg.out_dir {
        record.persist(dir)?;
    }
    Ok(record)
}
