//! Vertex-centered fine finite-volume solve on a rectangular region made of
//! whole and partial fine dual volumes.
//!
//! Outward fluxes across the part of the region boundary inside the domain
//! are data. Where that boundary runs along fine-cell midlines the straddled
//! cells have two corners outside; their values are eliminated through the
//! two prescribed sub-face fluxes so that the remaining inside sub-face flux
//! depends on inside nodes only. Feeding the region the fluxes of a global
//! fine solution therefore reproduces that solution exactly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fem::{boundary_edge, subface_coeffs, BoundaryConditions, SubFace};
use crate::mesh::{Axis, ControlVolume, FineGrid, Segment};
use crate::sparse::{solve_banded, TripletBuilder};

/// Largest accepted `|∫_R q − outflow|` for a region without Dirichlet nodes.
pub const COMPAT_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RegionSolution {
    /// Global fine node behind each local unknown, row-major.
    pub nodes: Vec<usize>,
    pub pressure: Vec<f64>,
    /// `(cell, face, flux along +axis)` for every sub-face with at least one
    /// side inside the region, prescribed ones included.
    pub subfaces: Vec<(usize, SubFace, f64)>,
    /// Compatibility residual of a pure-Neumann region.
    pub compatibility: Option<f64>,
}

struct FaceEval {
    cell: usize,
    face: SubFace,
    terms: Vec<(usize, f64)>,
    constant: f64,
}

type SegKey = (Axis, usize, usize);

fn subface_segment(fg: &FineGrid, cell: usize, face: SubFace) -> SegKey {
    let (ci, cj) = fg.cell_ij(cell);
    match face {
        SubFace::Bottom => (Axis::X, 2 * ci + 1, 2 * cj),
        SubFace::Top => (Axis::X, 2 * ci + 1, 2 * cj + 1),
        SubFace::Left => (Axis::Y, 2 * cj + 1, 2 * ci),
        SubFace::Right => (Axis::Y, 2 * cj + 1, 2 * ci + 1),
    }
}

/// Half-unit square just inside a boundary segment.
pub fn inside_unit(seg: &Segment) -> (usize, usize) {
    let across = if seg.outward > 0 { seg.line - 1 } else { seg.line };
    match seg.axis {
        Axis::X => (across, seg.start),
        Axis::Y => (seg.start, across),
    }
}

/// Fine node whose dual volume contains the half-unit square `(ux, uy)`.
#[inline]
pub fn unit_owner(fg: &FineGrid, ux: usize, uy: usize) -> usize {
    fg.node(ux.div_ceil(2), uy.div_ceil(2))
}

/// Solve the fine FV problem on `region`. `boundary_flux[s]` is the outward
/// flux across `region.segments[s]`; entries for domain-boundary segments are
/// ignored in favor of `bc`. `coef` is `Λk` per cell, `q` the source density.
pub fn solve_region(
    fg: &FineGrid,
    coef: &[f64],
    q: &[f64],
    bc: &BoundaryConditions,
    region: &ControlVolume,
    boundary_flux: &[f64],
) -> Result<RegionSolution> {
    if boundary_flux.len() != region.segments.len() {
        return Err(Error::SizeMismatch {
            expected: region.segments.len(),
            got: boundary_flux.len(),
        });
    }
    let r = region.rect;
    let (i0, i1) = (r.x0.div_ceil(2), r.x1 / 2);
    let (j0, j1) = (r.y0.div_ceil(2), r.y1 / 2);
    if i1 < i0 || j1 < j0 {
        return Err(Error::Geometry(format!("region {r:?} holds no fine node")));
    }
    let ni = i1 - i0 + 1;
    let nloc = ni * (j1 - j0 + 1);
    let local = |n: usize| {
        let (i, j) = fg.node_ij(n);
        (j - j0) * ni + (i - i0)
    };
    let nodes: Vec<usize> = (j0..=j1)
        .flat_map(|j| (i0..=i1).map(move |i| fg.node(i, j)))
        .collect();

    let quarter = 0.25 * fg.cell_area();
    let mut rhs = vec![0.0; nloc];
    for uy in r.y0..r.y1 {
        for ux in r.x0..r.x1 {
            rhs[local(unit_owner(fg, ux, uy))] += q[fg.cell(ux / 2, uy / 2)] * quarter;
        }
    }

    let mut prescribed: HashMap<SegKey, f64> = HashMap::new();
    let mut has_prescribed = false;
    for (seg, &phi) in region.segments.iter().zip(boundary_flux) {
        let (ux, uy) = inside_unit(seg);
        let owner = local(unit_owner(fg, ux, uy));
        if seg.on_boundary {
            rhs[owner] -= bc.neumann(boundary_edge(fg, seg)) * seg.length(fg);
        } else {
            has_prescribed = true;
            rhs[owner] -= phi;
            prescribed.insert((seg.axis, seg.line, seg.start), seg.outward as f64 * phi);
        }
    }

    let mut faces: Vec<FaceEval> = Vec::new();
    let mut fixed: Vec<(usize, SubFace, f64)> = Vec::new();
    let cx0 = r.x0 / 2;
    let cx1 = (r.x1.div_ceil(2)).min(fg.nx());
    let cy0 = r.y0 / 2;
    let cy1 = (r.y1.div_ceil(2)).min(fg.ny());
    for cj in cy0..cy1 {
        for ci in cx0..cx1 {
            let cell = fg.cell(ci, cj);
            let corners = fg.cell_nodes(cell);
            let inside: [bool; 4] =
                std::array::from_fn(|a| r.contains_unit(2 * ci + a % 2, 2 * cj + a / 2));
            let count = inside.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            if count == 3 {
                return Err(Error::Geometry(format!("cell {cell} cut into three quarters")));
            }
            let cf = |face| subface_coeffs(fg.hx(), fg.hy(), coef[cell], face);
            let mut cut: Vec<(SubFace, f64)> = Vec::new();
            for face in SubFace::ALL {
                let (a, b) = face.nodes();
                if inside[a] != inside[b] {
                    let key = subface_segment(fg, cell, face);
                    let d = *prescribed.get(&key).ok_or_else(|| {
                        Error::Geometry(format!("no flux data for sub-face {face:?} of cell {cell}"))
                    })?;
                    fixed.push((cell, face, d));
                    cut.push((face, d));
                }
            }
            for face in SubFace::ALL {
                let (a, b) = face.nodes();
                if !(inside[a] && inside[b]) {
                    continue;
                }
                let f = cf(face);
                let eval = if count == 4 {
                    FaceEval {
                        cell,
                        face,
                        terms: (0..4).map(|c| (local(corners[c]), f[c])).collect(),
                        constant: 0.0,
                    }
                } else {
                    let ins: Vec<usize> = (0..4).filter(|&c| inside[c]).collect();
                    let out: Vec<usize> = (0..4).filter(|&c| !inside[c]).collect();
                    let p: Vec<[f64; 4]> = cut.iter().map(|(fc, _)| cf(*fc)).collect();
                    let d: Vec<f64> = cut.iter().map(|(_, d)| *d).collect();
                    let po = [[p[0][out[0]], p[0][out[1]]], [p[1][out[0]], p[1][out[1]]]];
                    let det = po[0][0] * po[1][1] - po[0][1] * po[1][0];
                    if det == 0.0 {
                        return Err(Error::Singular {
                            row: cell,
                            context: "ghost elimination".into(),
                        });
                    }
                    let g = [
                        [po[1][1] / det, -po[0][1] / det],
                        [-po[1][0] / det, po[0][0] / det],
                    ];
                    // v_O = G d − G P_I v_I
                    let mut terms = Vec::with_capacity(2);
                    for &c in &ins {
                        let mut e = f[c];
                        for m in 0..2 {
                            let gp = g[m][0] * p[0][c] + g[m][1] * p[1][c];
                            e -= f[out[m]] * gp;
                        }
                        terms.push((local(corners[c]), e));
                    }
                    let constant = (0..2)
                        .map(|m| f[out[m]] * (g[m][0] * d[0] + g[m][1] * d[1]))
                        .sum();
                    FaceEval {
                        cell,
                        face,
                        terms,
                        constant,
                    }
                };
                faces.push(eval);
            }
        }
    }

    let dirichlet: Vec<Option<f64>> = nodes.iter().map(|&n| bc.dirichlet(n)).collect();
    let pure_neumann = dirichlet.iter().all(Option::is_none);
    let mut faces_by_row: Vec<(usize, usize, f64)> = Vec::with_capacity(16 * faces.len());
    for fe in &faces {
        let (a, b) = fe.face.nodes();
        let corners = fg.cell_nodes(fe.cell);
        let (la, lb) = (local(corners[a]), local(corners[b]));
        for &(c, v) in &fe.terms {
            faces_by_row.push((la, c, v));
            faces_by_row.push((lb, c, -v));
        }
        rhs[la] -= fe.constant;
        rhs[lb] += fe.constant;
    }

    let mut compatibility = None;
    let mut pinned = dirichlet.clone();
    if pure_neumann {
        let res: f64 = rhs.iter().sum();
        if !(res.abs() <= COMPAT_TOL) {
            return Err(Error::Incompatible {
                volume: region.owner,
                residual: res,
            });
        }
        compatibility = Some(res);
        pinned[0] = Some(0.0);
    } else if !has_prescribed && faces.is_empty() {
        return Err(Error::Geometry("region has no interior faces".into()));
    }

    let mut tb = TripletBuilder::with_capacity(nloc, nloc, faces_by_row.len() + nloc);
    for (row, col, v) in faces_by_row {
        if pinned[row].is_none() {
            tb.add(row, col, v);
        }
    }
    for (row, p) in pinned.iter().enumerate() {
        if let Some(v) = p {
            tb.add(row, row, 1.0);
            rhs[row] = *v;
        }
    }
    let a = tb.build();
    let mut pressure = solve_banded(&a, &rhs).map_err(|e| match e {
        Error::Singular { row, context } => Error::Singular {
            row: nodes[row],
            context: format!("fine FV region of volume {}: {context}", region.owner),
        },
        other => other,
    })?;
    if pure_neumann {
        let mean = pressure.iter().sum::<f64>() / nloc as f64;
        pressure.iter_mut().for_each(|p| *p -= mean);
    }

    let mut subfaces = fixed;
    subfaces.extend(faces.iter().map(|fe| {
        let v: f64 = fe.terms.iter().map(|&(c, w)| w * pressure[c]).sum::<f64>() + fe.constant;
        (fe.cell, fe.face, v)
    }));
    Ok(RegionSolution {
        nodes,
        pressure,
        subfaces,
        compatibility,
    })
}
