//! Two-phase relations and explicit donor-cell saturation transport on the
//! fine dual volumes.

use rayon::prelude::*;

use crate::downscale::FluxField;
use crate::error::{Error, Result};
use crate::fem::rect_integral;
use crate::mesh::FineGrid;

/// Tolerated excursion of an updated saturation outside `[0, 1]`.
pub const OVERSHOOT_TOL: f64 = 1e-12;

/// Viscosities with quadratic relative permeabilities `k_rw = S²`, `k_ro = (1−S)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidProps {
    pub mu_w: f64,
    pub mu_o: f64,
}

impl FluidProps {
    pub fn new(mu_w: f64, mu_o: f64) -> Result<Self> {
        if !(mu_w > 0.0 && mu_o > 0.0 && mu_w.is_finite() && mu_o.is_finite()) {
            return Err(Error::Config(format!("viscosities must be positive: {mu_w}, {mu_o}")));
        }
        Ok(Self { mu_w, mu_o })
    }

    fn water(&self, s: f64) -> f64 {
        s * s / self.mu_w
    }

    fn oil(&self, s: f64) -> f64 {
        (1.0 - s) * (1.0 - s) / self.mu_o
    }

    /// `f′(S) = 2S(1−S) / (μ_w μ_o Λ(S)²)`.
    pub fn fractional_flow_derivative(&self, s: f64) -> f64 {
        let l = self.water(s) + self.oil(s);
        2.0 * s * (1.0 - s) / (self.mu_w * self.mu_o * l * l)
    }

    /// `max_S f′(S)` by a grid scan refined with golden-section search.
    pub fn max_fractional_derivative(&self) -> f64 {
        const N: usize = 2000;
        let d = |s: f64| self.fractional_flow_derivative(s);
        let best = (0..=N).max_by(|&a, &b| d(a as f64 / N as f64).total_cmp(&d(b as f64 / N as f64))).unwrap();
        let (mut a, mut b) = (
            best.saturating_sub(1) as f64 / N as f64,
            (best + 1).min(N) as f64 / N as f64,
        );
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let c = b - g * (b - a);
            let e = a + g * (b - a);
            if d(c) > d(e) {
                b = e;
            } else {
                a = c;
            }
        }
        d(0.5 * (a + b)).max(d(best as f64 / N as f64))
    }
}

fn check_range(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::SaturationRange { value: s })
    }
}

/// `Λ(S) = k_rw/μ_w + k_ro/μ_o`.
pub fn total_mobility(s: f64, props: &FluidProps) -> Result<f64> {
    check_range(s)?;
    Ok(props.water(s) + props.oil(s))
}

/// `f(S) = (k_rw/μ_w) / Λ(S)`.
pub fn fractional_flow(s: f64, props: &FluidProps) -> Result<f64> {
    check_range(s)?;
    Ok(props.water(s) / (props.water(s) + props.oil(s)))
}

#[inline]
fn frac(s: f64, props: &FluidProps) -> f64 {
    props.water(s) / (props.water(s) + props.oil(s))
}

/// Mobility per fine cell from the mean of its four corner saturations.
pub fn cell_mobility(fg: &FineGrid, s: &[f64], props: &FluidProps) -> Result<Vec<f64>> {
    if s.len() != fg.num_nodes() {
        return Err(Error::SizeMismatch { expected: fg.num_nodes(), got: s.len() });
    }
    (0..fg.num_cells())
        .map(|c| {
            let mean = fg.cell_nodes(c).iter().map(|&n| s[n]).sum::<f64>() / 4.0;
            total_mobility(mean.clamp(0.0, 1.0), props)
        })
        .collect()
}

/// Measure of every fine dual volume.
pub fn volume_measures(fg: &FineGrid) -> Vec<f64> {
    let quarter = 0.25 * fg.cell_area();
    (0..fg.num_nodes())
        .map(|n| fg.control_volume(n).rect.area() as f64 * quarter)
        .collect()
}

/// `∫_{V_n} f` for every fine dual volume, `f` given per cell.
pub fn volume_integrals(fg: &FineGrid, f: &[f64]) -> Vec<f64> {
    (0..fg.num_nodes())
        .map(|n| rect_integral(fg, f, &fg.control_volume(n).rect))
        .collect()
}

/// Saturation held fixed on inflow volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationBc {
    held: Vec<Option<f64>>,
}

impl SaturationBc {
    pub fn none(fg: &FineGrid) -> Self {
        Self { held: vec![None; fg.num_nodes()] }
    }

    /// `S = value` on the volumes of the left edge.
    pub fn left_inflow(fg: &FineGrid, value: f64) -> Result<Self> {
        check_range(value)?;
        let mut bc = Self::none(fg);
        for j in 0..=fg.ny() {
            bc.held[fg.node(0, j)] = Some(value);
        }
        Ok(bc)
    }

    pub fn held(&self, n: usize) -> Option<f64> {
        self.held[n]
    }
}

/// Dual-edge fluxes and boundary outflows ready for upwinding.
#[derive(Debug, Clone)]
pub struct Velocity {
    edges: Vec<(usize, usize, f64)>,
    boundary: Vec<f64>,
    meas: Vec<f64>,
}

impl Velocity {
    pub fn new(fg: &FineGrid, flux: &FluxField) -> Result<Self> {
        if flux.dims() != (fg.nx(), fg.ny()) {
            return Err(Error::Grid("flux field does not match the grid".into()));
        }
        let edges = (0..fg.num_edges())
            .map(|e| {
                let (a, b) = fg.edge_nodes(e);
                (a, b, flux.edge_flux(fg, e))
            })
            .collect();
        let boundary = (0..fg.num_nodes()).map(|n| flux.boundary_outflow(n)).collect();
        Ok(Self { edges, boundary, meas: volume_measures(fg) })
    }

    pub fn num_volumes(&self) -> usize {
        self.meas.len()
    }

    /// Total outflow of every volume.
    pub fn outflows(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.boundary.iter().map(|&b| b.max(0.0)).collect();
        for &(a, b, f) in &self.edges {
            if f > 0.0 {
                out[a] += f;
            } else {
                out[b] -= f;
            }
        }
        out
    }
}

/// `min meas(V)/(outflow(V)·max f′)` over the updated volumes; `+∞` without outflow.
pub fn cfl_dt(vel: &Velocity, bc: &SaturationBc, props: &FluidProps) -> Result<f64> {
    let fmax = props.max_fractional_derivative();
    let mut dt = f64::INFINITY;
    for (n, out) in vel.outflows().into_iter().enumerate() {
        if bc.held[n].is_some() || out <= 0.0 {
            continue;
        }
        if vel.meas[n] <= 0.0 {
            return Err(Error::Geometry(format!("dual volume {n} has zero measure")));
        }
        dt = dt.min(vel.meas[n] / (out * fmax));
    }
    Ok(dt)
}

/// Water saturation per fine dual volume at time `t`, after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationState {
    pub s: Vec<f64>,
    pub t: f64,
    pub step: usize,
}

impl SaturationState {
    /// `s0` everywhere except the held volumes.
    pub fn initial(fg: &FineGrid, s0: f64, bc: &SaturationBc) -> Result<Self> {
        check_range(s0)?;
        let s = (0..fg.num_nodes()).map(|n| bc.held[n].unwrap_or(s0)).collect();
        Ok(Self { s, t: 0.0, step: 0 })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.s
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// One explicit upwind step. `qw` holds `∫_V q_w` per volume. Inflow across
/// the domain boundary into a free volume carries that volume's saturation.
pub fn advance_saturation(
    state: &SaturationState,
    vel: &Velocity,
    qw: &[f64],
    dt: f64,
    bc: &SaturationBc,
    props: &FluidProps,
) -> Result<SaturationState> {
    let nn = vel.num_volumes();
    for len in [state.s.len(), qw.len(), bc.held.len()] {
        if len != nn {
            return Err(Error::SizeMismatch { expected: nn, got: len });
        }
    }
    let dt_max = cfl_dt(vel, bc, props)?;
    if !(dt > 0.0 && dt <= dt_max) {
        return Err(Error::Cfl { step: state.step, dt, dt_max });
    }
    let f: Vec<f64> = state.s.par_iter().map(|&s| frac(s, props)).collect();
    let mut change: Vec<f64> = (0..nn).map(|n| qw[n] - vel.boundary[n] * f[n]).collect();
    for &(a, b, flux) in &vel.edges {
        let water = flux * if flux > 0.0 { f[a] } else { f[b] };
        change[a] -= water;
        change[b] += water;
    }
    let mut s = Vec::with_capacity(nn);
    for n in 0..nn {
        if let Some(v) = bc.held[n] {
            s.push(v);
            continue;
        }
        let v = state.s[n] + dt / vel.meas[n] * change[n];
        let overshoot = (-v).max(v - 1.0);
        if overshoot > OVERSHOOT_TOL {
            return Err(Error::Overshoot { volume: n, overshoot });
        }
        s.push(v.clamp(0.0, 1.0));
    }
    Ok(SaturationState { s, t: state.t + dt, step: state.step + 1 })
}
