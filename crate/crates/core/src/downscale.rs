//! Fine conservative fluxes from a coarse solution: boundary fluxes of every
//! coarse control volume feed an independent local fine FV problem.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{boundary_edge, rect_integral, row_dot, segment_form, subface_coeffs, BoundaryConditions, SubFace};
use crate::fvregion::solve_region;
use crate::mesh::{ControlVolume, CoarseGrid, FineGrid};

/// Largest mismatch tolerated when one sub-face receives two prescribed values.
const REWRITE_TOL: f64 = 1e-12;

/// Normal fluxes on the fine dual grid.
///
/// Each fine cell holds four sub-face fluxes (along `+x` or `+y`, see
/// [`SubFace`]). A dual edge, i.e. the part of the dual grid crossing fine
/// edge `e`, is the union of one or two sub-faces; its flux runs from the
/// edge's first node to its second. Boundary volumes also carry an outflow
/// across the domain boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    nx: usize,
    ny: usize,
    subface: Vec<f64>,
    boundary: Vec<f64>,
}

impl FluxField {
    fn unassigned(fg: &FineGrid) -> Self {
        Self {
            nx: fg.nx(),
            ny: fg.ny(),
            subface: vec![f64::NAN; 4 * fg.num_cells()],
            boundary: vec![0.0; fg.num_nodes()],
        }
    }

    fn assign(&mut self, cell: usize, face: SubFace, v: f64) -> Result<()> {
        let slot = &mut self.subface[4 * cell + face as usize];
        if !slot.is_nan() && (*slot - v).abs() > REWRITE_TOL * (1.0 + v.abs()) {
            return Err(Error::Geometry(format!(
                "sub-face {face:?} of cell {cell} assigned {slot} and {v}"
            )));
        }
        if !v.is_finite() {
            return Err(Error::Geometry(format!("non-finite flux on cell {cell}")));
        }
        *slot = v;
        Ok(())
    }

    /// Check completeness and set the boundary outflows: Neumann data on
    /// free nodes, the balance residual on Dirichlet nodes.
    fn finalize(mut self, fg: &FineGrid, q: &[f64], bc: &BoundaryConditions) -> Result<Self> {
        if let Some(i) = self.subface.iter().position(|v| v.is_nan()) {
            return Err(Error::Geometry(format!(
                "sub-face {} of cell {} never assigned",
                i % 4,
                i / 4
            )));
        }
        self.boundary = vec![0.0; fg.num_nodes()];
        for n in 0..fg.num_nodes() {
            if !fg.is_boundary_node(n) {
                continue;
            }
            let cv = fg.control_volume(n);
            self.boundary[n] = if bc.is_dirichlet(n) {
                rect_integral(fg, q, &cv.rect) - self.interior_outflow(fg, n)
            } else {
                cv.segments
                    .iter()
                    .filter(|s| s.on_boundary)
                    .map(|s| bc.neumann(boundary_edge(fg, s)) * s.length(fg))
                    .sum()
            };
        }
        Ok(self)
    }

    #[inline]
    pub fn subface(&self, cell: usize, face: SubFace) -> f64 {
        self.subface[4 * cell + face as usize]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Flux across the dual edge of fine edge `e`, from its first to its second node.
    pub fn edge_flux(&self, fg: &FineGrid, e: usize) -> f64 {
        let (a, b) = fg.edge_nodes(e);
        let (ia, ja) = fg.node_ij(a);
        let (nx, ny) = (fg.nx(), fg.ny());
        let mut s = 0.0;
        if fg.node_ij(b).1 == ja {
            // horizontal edge: vertical midline halves of the cells below and above
            if ja > 0 {
                s += self.subface(fg.cell(ia, ja - 1), SubFace::Top);
            }
            if ja < ny {
                s += self.subface(fg.cell(ia, ja), SubFace::Bottom);
            }
        } else {
            if ia > 0 {
                s += self.subface(fg.cell(ia - 1, ja), SubFace::Right);
            }
            if ia < nx {
                s += self.subface(fg.cell(ia, ja), SubFace::Left);
            }
        }
        s
    }

    pub fn edge_fluxes(&self, fg: &FineGrid) -> Vec<f64> {
        (0..fg.num_edges()).map(|e| self.edge_flux(fg, e)).collect()
    }

    /// Outflow of node `n`'s dual volume across the domain boundary.
    pub fn boundary_outflow(&self, n: usize) -> f64 {
        self.boundary[n]
    }

    fn interior_outflow(&self, fg: &FineGrid, n: usize) -> f64 {
        let (i, j) = fg.node_ij(n);
        let mut s = 0.0;
        // corner position of n in each adjacent cell, and the sign of the
        // two sub-faces bounding its quarter
        for (di, dj) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
            if i < di || j < dj || i - di >= fg.nx() || j - dj >= fg.ny() {
                continue;
            }
            let cell = fg.cell(i - di, j - dj);
            let corner = di + 2 * dj;
            for face in SubFace::ALL {
                let (a, b) = face.nodes();
                if a == corner {
                    s += self.subface(cell, face);
                } else if b == corner {
                    s -= self.subface(cell, face);
                }
            }
        }
        s
    }

    /// Net outflow of node `n`'s dual volume, boundary included.
    pub fn net_outflow(&self, fg: &FineGrid, n: usize) -> f64 {
        self.interior_outflow(fg, n) + self.boundary[n]
    }

    /// `max_n |net outflow − ∫_{V_n} q|` over all fine volumes.
    pub fn conservation_residual(&self, fg: &FineGrid, q: &[f64]) -> f64 {
        (0..fg.num_nodes())
            .map(|n| {
                let cv = fg.control_volume(n);
                (self.net_outflow(fg, n) - rect_integral(fg, q, &cv.rect)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Fluxes of a fine pressure field evaluated sub-face by sub-face.
    pub fn from_fine_pressure(
        fg: &FineGrid,
        coef: &[f64],
        p: &[f64],
        q: &[f64],
        bc: &BoundaryConditions,
    ) -> Result<Self> {
        let mut f = Self::unassigned(fg);
        for cell in 0..fg.num_cells() {
            let nodes = fg.cell_nodes(cell);
            for face in SubFace::ALL {
                let cf = subface_coeffs(fg.hx(), fg.hy(), coef[cell], face);
                let v = (0..4).map(|a| cf[a] * p[nodes[a]]).sum();
                f.assign(cell, face, v)?;
            }
        }
        f.finalize(fg, q, bc)
    }

    /// Text dump: one line `edge tail head flux` per fine edge, then one line
    /// `boundary node outflow` per boundary node.
    pub fn to_text(&self, fg: &FineGrid) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# nx={} ny={}", fg.nx(), fg.ny());
        let _ = writeln!(
            s,
            "# edges: horizontal j*nx+i then vertical nh+j*(nx+1)+i; flux positive tail->head"
        );
        for e in 0..fg.num_edges() {
            let (a, b) = fg.edge_nodes(e);
            let _ = writeln!(s, "edge {e} {a} {b} {}", self.edge_flux(fg, e));
        }
        for n in 0..fg.num_nodes() {
            if fg.is_boundary_node(n) {
                let _ = writeln!(s, "boundary {n} {}", self.boundary[n]);
            }
        }
        s
    }

    pub fn write(&self, fg: &FineGrid, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text(fg)).map_err(|e| Error::io(path, e))
    }
}

/// Outward flux of `−Λk∇p` across each segment of a coarse volume; zero on
/// domain-boundary segments, which are covered by the boundary data.
pub fn coarse_boundary_flux(fg: &FineGrid, coef: &[f64], p: &[f64], cv: &ControlVolume) -> Vec<f64> {
    cv.segments
        .iter()
        .map(|s| match segment_form(fg, coef, s) {
            Some(form) => s.outward as f64 * row_dot(&form, p),
            None => 0.0,
        })
        .collect()
}

/// Local fine FV solve on one coarse volume driven by its boundary fluxes.
pub fn local_neumann_solve(
    fg: &FineGrid,
    coef: &[f64],
    q: &[f64],
    bc: &BoundaryConditions,
    cv: &ControlVolume,
    boundary_flux: &[f64],
) -> Result<crate::fvregion::RegionSolution> {
    solve_region(fg, coef, q, bc, cv, boundary_flux)
}

/// Downscale a coarse pressure to a fine conservative flux field.
pub fn downscale_all(
    cg: &CoarseGrid,
    coef: &[f64],
    q: &[f64],
    bc: &BoundaryConditions,
    p: &[f64],
) -> Result<FluxField> {
    let fg = cg.fine();
    let locals: Vec<Vec<(usize, SubFace, f64)>> = (0..cg.num_nodes())
        .into_par_iter()
        .map(|n| {
            let cv = cg.control_volume(n);
            let data = coarse_boundary_flux(fg, coef, p, &cv);
            local_neumann_solve(fg, coef, q, bc, &cv, &data).map(|s| s.subfaces)
        })
        .collect::<Result<_>>()?;
    let mut f = FluxField::unassigned(fg);
    for faces in locals {
        for (cell, face, v) in faces {
            f.assign(cell, face, v)?;
        }
    }
    f.finalize(fg, q, bc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Axis;
    use crate::fem::{assemble_constraints, assemble_load, assemble_stiffness, cell_coefficients, unit_mobility};
    use crate::field::{default_geometry, gen_channel_field, PermeabilityField, SourceField};
    use crate::msbasis::build_coarse_space;
    use crate::saddle::{coarse_subspace, project, solve_fine_fv, solve_kkt};

    #[test]
    fn linear_pressure_boundary_fluxes() {
        let fg = FineGrid::new(9, 9).unwrap();
        let cg = CoarseGrid::new(&fg, 3, 3).unwrap();
        let coef = vec![1.0; fg.num_cells()];
        let p: Vec<f64> = (0..fg.num_nodes()).map(|n| 1.0 - fg.node_coords(n).0).collect();
        let cv = cg.control_volume(cg.node(1, 1));
        let data = coarse_boundary_flux(&fg, &coef, &p, &cv);
        for (s, v) in cv.segments.iter().zip(&data) {
            let expect = match s.axis {
                Axis::X => s.outward as f64 * s.length(&fg),
                Axis::Y => 0.0,
            };
            assert!((v - expect).abs() < 1e-14);
        }
        // per fine edge: h on horizontal dual edges
        let f = FluxField::from_fine_pressure(&fg, &coef, &p, &vec![0.0; fg.num_cells()],
            &BoundaryConditions::pressure_drop(&fg, 1.0, 0.0)).unwrap();
        let e = fg.hedge(3, 4);
        assert!((f.edge_flux(&fg, e) - fg.h()).abs() < 1e-14);
        assert!(f.edge_flux(&fg, fg.vedge(3, 4)).abs() < 1e-14);
    }

    struct Run {
        fg: FineGrid,
        cg: CoarseGrid,
        coef: Vec<f64>,
        q: Vec<f64>,
        bc: BoundaryConditions,
        p: Vec<f64>,
    }

    fn coarse_run(nx: usize, ncx: usize, k: PermeabilityField, l: usize) -> Run {
        let fg = FineGrid::new(nx, nx).unwrap();
        let cg = CoarseGrid::new(&fg, ncx, ncx).unwrap();
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0);
        let mob = unit_mobility(&fg);
        let src = SourceField::zero(&fg);
        let a = assemble_stiffness(&fg, &k, &mob).unwrap();
        let load = assemble_load(&fg, &src, &bc).unwrap();
        let cons = assemble_constraints(&fg, &k, &mob, &cg.control_volumes(), &src, &bc).unwrap();
        let space = build_coarse_space(&cg, &k, l).unwrap();
        let sub = coarse_subspace(&space, &cg, &bc).unwrap();
        let sys = project(&a, &load, &cons, &sub, cg.num_nodes()).unwrap();
        let p = solve_kkt(&sys, &sub).unwrap().pressure;
        let coef = cell_coefficients(&k, &mob).unwrap();
        Run { q: src.q, fg, cg, coef, bc, p }
    }

    #[test]
    fn coarse_volume_fluxes_balance() {
        for (nx, ncx) in [(15, 3), (16, 4)] {
            let fg = FineGrid::new(nx, nx).unwrap();
            let k = gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 2).unwrap();
            let r = coarse_run(nx, ncx, k, 3);
            for cv in r.cg.control_volumes() {
                if r.bc.is_dirichlet(cv.center) {
                    continue;
                }
                let total: f64 = coarse_boundary_flux(&r.fg, &r.coef, &r.p, &cv).iter().sum();
                assert!(total.abs() < 1e-9, "volume {}: {total}", cv.owner);
            }
        }
    }

    #[test]
    fn downscaled_fluxes_are_conservative() {
        for (nx, ncx) in [(15, 3), (16, 4), (20, 10)] {
            let fg = FineGrid::new(nx, nx).unwrap();
            let k = gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 5).unwrap();
            let r = coarse_run(nx, ncx, k, 2);
            let f = downscale_all(&r.cg, &r.coef, &r.q, &r.bc, &r.p).unwrap();
            let left: f64 = (0..=nx).map(|j| f.boundary_outflow(r.fg.node(0, j))).sum();
            let right: f64 = (0..=nx).map(|j| f.boundary_outflow(r.fg.node(nx, j))).sum();
            assert!(left < 0.0);
            // channels span the domain at this resolution, so throughflow is large
            let tol = 1e-9 * right.max(1.0);
            let res = f.conservation_residual(&r.fg, &r.q);
            assert!(res < tol, "{nx}/{ncx}: {res}");
            assert!((left + right).abs() < tol);
        }
    }

    #[test]
    fn homogeneous_downscaling_matches_fine_fv() {
        for (nx, ncx) in [(15, 3), (16, 4)] {
            let fg = FineGrid::new(nx, nx).unwrap();
            let k = PermeabilityField::constant(&fg, 1.0).unwrap();
            let r = coarse_run(nx, ncx, k, 1);
            let f = downscale_all(&r.cg, &r.coef, &r.q, &r.bc, &r.p).unwrap();
            let fv = solve_fine_fv(&r.fg, &r.coef, &r.q, &r.bc).unwrap();
            let g = FluxField::from_fine_pressure(&r.fg, &r.coef, &fv.pressure, &r.q, &r.bc).unwrap();
            for e in 0..r.fg.num_edges() {
                assert!((f.edge_flux(&r.fg, e) - g.edge_flux(&r.fg, e)).abs() < 1e-10);
            }
            for n in 0..r.fg.num_nodes() {
                assert!((f.boundary_outflow(n) - g.boundary_outflow(n)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn interior_local_volumes_balance_without_source() {
        let fg = FineGrid::new(15, 15).unwrap();
        let k = gen_channel_field(&fg, 1.0, 1e3, &default_geometry(), 8).unwrap();
        let r = coarse_run(15, 3, k, 2);
        let cv = r.cg.control_volume(r.cg.node(1, 1));
        let data = coarse_boundary_flux(&r.fg, &r.coef, &r.p, &cv);
        let sol = local_neumann_solve(&r.fg, &r.coef, &r.q, &r.bc, &cv, &data).unwrap();
        assert!(sol.compatibility.unwrap().abs() < 1e-9);
        // prescribed sub-faces carry the data exactly
        let mut f = FluxField::unassigned(&r.fg);
        for &(cell, face, v) in &sol.subfaces {
            f.assign(cell, face, v).unwrap();
        }
        for (s, &phi) in cv.segments.iter().zip(&data) {
            if s.on_midline() {
                let (cell, face) = crate::fem::segment_cells(&r.fg, s)[0];
                assert_eq!(f.subface(cell, face), s.outward as f64 * phi);
            }
        }
    }

    #[test]
    fn flux_dump_lists_every_edge() {
        let fg = FineGrid::new(3, 2).unwrap();
        let coef = vec![1.0; fg.num_cells()];
        let p: Vec<f64> = (0..fg.num_nodes()).map(|n| 1.0 - fg.node_coords(n).0).collect();
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0);
        let f = FluxField::from_fine_pressure(&fg, &coef, &p, &vec![0.0; 6], &bc).unwrap();
        let text = f.to_text(&fg);
        assert_eq!(text.lines().filter(|l| l.starts_with("edge ")).count(), fg.num_edges());
        assert!(text.lines().next().unwrap().starts_with('#'));
    }
}
