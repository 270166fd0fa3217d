//! Fine-scale assembly on bilinear quadrilaterals: stiffness and weighted
//! mass matrices, the load vector, boundary data, and flux functionals over
//! control volumes.
//!
//! Inside a fine cell the dual grid runs along the two midlines. Each midline
//! is split at the cell center into two *sub-faces*, giving four sub-faces per
//! cell, each separating the quarters of two neighboring corner nodes. The
//! normal derivative of a bilinear function is linear along a midline, so a
//! single midpoint evaluation per sub-face integrates the flux exactly.

use crate::error::{Error, Result};
use crate::field::{PermeabilityField, SourceField};
use crate::mesh::{Axis, ControlVolume, FineGrid, HalfRect, Segment};
use crate::sparse::{CsrMatrix, TripletBuilder};

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Gradient of the bilinear interpolant of `v = [v00, v10, v01, v11]` at the
/// reference point `(xi, eta) ∈ [0,1]²` of a `hx × hy` cell.
#[inline]
pub fn bilinear_grad(hx: f64, hy: f64, xi: f64, eta: f64, v: &[f64; 4]) -> (f64, f64) {
    let gx = ((v[1] - v[0]) * (1.0 - eta) + (v[3] - v[2]) * eta) / hx;
    let gy = ((v[2] - v[0]) * (1.0 - xi) + (v[3] - v[1]) * xi) / hy;
    (gx, gy)
}

#[inline]
fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        (1.0 - xi) * (1.0 - eta),
        xi * (1.0 - eta),
        (1.0 - xi) * eta,
        xi * eta,
    ]
}

#[inline]
fn shape_grads(hx: f64, hy: f64, xi: f64, eta: f64) -> [(f64, f64); 4] {
    [
        (-(1.0 - eta) / hx, -(1.0 - xi) / hy),
        ((1.0 - eta) / hx, -xi / hy),
        (-eta / hx, (1.0 - xi) / hy),
        (eta / hx, xi / hy),
    ]
}

/// Element stiffness `∫ c ∇φ_a·∇φ_b` by 2×2 Gauss quadrature.
pub fn element_stiffness(hx: f64, hy: f64, c: f64) -> [[f64; 4]; 4] {
    let w = 0.25 * hx * hy * c;
    let mut ke = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let g = shape_grads(hx, hy, xi, eta);
            for a in 0..4 {
                for b in 0..4 {
                    ke[a][b] += w * (g[a].0 * g[b].0 + g[a].1 * g[b].1);
                }
            }
        }
    }
    ke
}

/// Element mass `∫ c φ_a φ_b` by 2×2 Gauss quadrature.
pub fn element_mass(hx: f64, hy: f64, c: f64) -> [[f64; 4]; 4] {
    let w = 0.25 * hx * hy * c;
    let mut me = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let n = shape(xi, eta);
            for a in 0..4 {
                for b in 0..4 {
                    me[a][b] += w * (n[a] * n[b]);
                }
            }
        }
    }
    me
}

/// Mean of `|∇v|²` over the 2×2 Gauss points of a cell.
pub fn mean_grad_sq(hx: f64, hy: f64, v: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let (gx, gy) = bilinear_grad(hx, hy, xi, eta, v);
            s += gx * gx + gy * gy;
        }
    }
    0.25 * s
}

/// Per-cell `Λ·k`.
pub fn cell_coefficients(k: &PermeabilityField, mobility: &[f64]) -> Result<Vec<f64>> {
    let kv = k.values();
    if mobility.len() != kv.len() {
        return Err(Error::SizeMismatch {
            expected: kv.len(),
            got: mobility.len(),
        });
    }
    if let Some(cell) = mobility.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::FieldValue {
            cell,
            msg: format!("mobility must be positive, got {}", mobility[cell]),
        });
    }
    Ok(kv.iter().zip(mobility).map(|(k, l)| k * l).collect())
}

pub fn unit_mobility(fg: &FineGrid) -> Vec<f64> {
    vec![1.0; fg.num_cells()]
}

fn assemble_cellwise(
    fg: &FineGrid,
    coef: &[f64],
    element: fn(f64, f64, f64) -> [[f64; 4]; 4],
) -> CsrMatrix {
    let n = fg.num_nodes();
    let mut b = TripletBuilder::with_capacity(n, n, 16 * fg.num_cells());
    for (c, &cc) in coef.iter().enumerate() {
        let nodes = fg.cell_nodes(c);
        let ke = element(fg.hx(), fg.hy(), cc);
        for a in 0..4 {
            for bb in 0..4 {
                b.add(nodes[a], nodes[bb], ke[a][bb]);
            }
        }
    }
    b.build()
}

/// Global stiffness for `a(u,v) = ∫ Λk ∇u·∇v`, without boundary modification.
pub fn assemble_stiffness(
    fg: &FineGrid,
    k: &PermeabilityField,
    mobility: &[f64],
) -> Result<CsrMatrix> {
    if k.dims() != (fg.nx(), fg.ny()) {
        return Err(Error::SizeMismatch {
            expected: fg.num_cells(),
            got: k.values().len(),
        });
    }
    let coef = cell_coefficients(k, mobility)?;
    Ok(assemble_cellwise(fg, &coef, element_stiffness))
}

/// Global mass matrix weighted by a positive per-cell weight.
pub fn assemble_weighted_mass(fg: &FineGrid, weight: &[f64]) -> Result<CsrMatrix> {
    if weight.len() != fg.num_cells() {
        return Err(Error::SizeMismatch {
            expected: fg.num_cells(),
            got: weight.len(),
        });
    }
    if let Some(cell) = weight.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::FieldValue {
            cell,
            msg: format!("mass weight must be positive, got {}", weight[cell]),
        });
    }
    Ok(assemble_cellwise(fg, weight, element_mass))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Dirichlet values on boundary nodes and outward Neumann flux densities
/// `g_N` on boundary edges. An edge is Dirichlet when both endpoints carry
/// Dirichlet values; every other boundary edge is Neumann (default no-flow).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    dirichlet: Vec<Option<f64>>,
    neumann: Vec<f64>,
}

impl BoundaryConditions {
    /// No-flow on the whole boundary.
    pub fn no_flow(fg: &FineGrid) -> Self {
        Self {
            dirichlet: vec![None; fg.num_nodes()],
            neumann: vec![0.0; fg.num_edges()],
        }
    }

    /// `p = p_left` on `x = 0`, `p = p_right` on `x = 1`, no-flow top and bottom.
    pub fn pressure_drop(fg: &FineGrid, p_left: f64, p_right: f64) -> Self {
        Self::no_flow(fg)
            .with_dirichlet_side(fg, Side::Left, p_left)
            .with_dirichlet_side(fg, Side::Right, p_right)
    }

    fn side_nodes(fg: &FineGrid, side: Side) -> Vec<usize> {
        let (nx, ny) = (fg.nx(), fg.ny());
        match side {
            Side::Left => (0..=ny).map(|j| fg.node(0, j)).collect(),
            Side::Right => (0..=ny).map(|j| fg.node(nx, j)).collect(),
            Side::Bottom => (0..=nx).map(|i| fg.node(i, 0)).collect(),
            Side::Top => (0..=nx).map(|i| fg.node(i, ny)).collect(),
        }
    }

    fn side_edges(fg: &FineGrid, side: Side) -> Vec<usize> {
        let (nx, ny) = (fg.nx(), fg.ny());
        match side {
            Side::Left => (0..ny).map(|j| fg.vedge(0, j)).collect(),
            Side::Right => (0..ny).map(|j| fg.vedge(nx, j)).collect(),
            Side::Bottom => (0..nx).map(|i| fg.hedge(i, 0)).collect(),
            Side::Top => (0..nx).map(|i| fg.hedge(i, ny)).collect(),
        }
    }

    pub fn with_dirichlet_side(mut self, fg: &FineGrid, side: Side, value: f64) -> Self {
        for n in Self::side_nodes(fg, side) {
            self.dirichlet[n] = Some(value);
        }
        self
    }

    pub fn with_neumann_side(mut self, fg: &FineGrid, side: Side, g: f64) -> Self {
        for e in Self::side_edges(fg, side) {
            self.neumann[e] = g;
        }
        self
    }

    pub fn set_dirichlet(&mut self, node: usize, value: Option<f64>) {
        self.dirichlet[node] = value;
    }

    pub fn set_neumann(&mut self, edge: usize, g: f64) {
        self.neumann[edge] = g;
    }

    #[inline]
    pub fn dirichlet(&self, node: usize) -> Option<f64> {
        self.dirichlet[node]
    }

    #[inline]
    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet[node].is_some()
    }

    pub fn has_dirichlet(&self) -> bool {
        self.dirichlet.iter().any(Option::is_some)
    }

    /// Outward flux density on a boundary edge.
    #[inline]
    pub fn neumann(&self, edge: usize) -> f64 {
        self.neumann[edge]
    }

    pub fn validate(&self, fg: &FineGrid) -> Result<()> {
        if self.dirichlet.len() != fg.num_nodes() || self.neumann.len() != fg.num_edges() {
            return Err(Error::Boundary("boundary data sized for another grid".into()));
        }
        for n in 0..fg.num_nodes() {
            if let Some(v) = self.dirichlet[n] {
                if !fg.is_boundary_node(n) {
                    return Err(Error::Boundary(format!("Dirichlet value on interior node {n}")));
                }
                if !v.is_finite() {
                    return Err(Error::Boundary(format!("non-finite Dirichlet value at {n}")));
                }
            }
        }
        for e in 0..fg.num_edges() {
            let g = self.neumann[e];
            if !g.is_finite() {
                return Err(Error::Boundary(format!("non-finite Neumann value on edge {e}")));
            }
            if g != 0.0 {
                if !fg.is_boundary_edge(e) {
                    return Err(Error::Boundary(format!("Neumann value on interior edge {e}")));
                }
                let (a, b) = fg.edge_nodes(e);
                if self.is_dirichlet(a) && self.is_dirichlet(b) {
                    return Err(Error::Boundary(format!(
                        "edge {e} is both Dirichlet and Neumann"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fine-node vector holding Dirichlet values and zeros elsewhere.
    pub fn dirichlet_lift(&self) -> Vec<f64> {
        self.dirichlet.iter().map(|d| d.unwrap_or(0.0)).collect()
    }
}

/// Load vector `F(φ_j) − ⟨g_N, φ_j⟩`.
pub fn assemble_load(
    fg: &FineGrid,
    src: &SourceField,
    bc: &BoundaryConditions,
) -> Result<Vec<f64>> {
    src.validate(fg)?;
    bc.validate(fg)?;
    let mut b = vec![0.0; fg.num_nodes()];
    let quarter = 0.25 * fg.cell_area();
    for (c, &q) in src.q.iter().enumerate() {
        if q != 0.0 {
            for n in fg.cell_nodes(c) {
                b[n] += q * quarter;
            }
        }
    }
    for e in 0..fg.num_edges() {
        let g = bc.neumann(e);
        if g != 0.0 {
            let (n0, n1) = fg.edge_nodes(e);
            let half = 0.5 * g * fg.edge_length(e);
            b[n0] -= half;
            b[n1] -= half;
        }
    }
    Ok(b)
}

/// Sub-face of a fine cell. Positive flux runs from the first to the second
/// node of [`SubFace::nodes`] (the `+x` or `+y` direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubFace {
    /// Lower half of the vertical midline, `00 → 10`.
    Bottom = 0,
    /// Upper half of the vertical midline, `01 → 11`.
    Top = 1,
    /// Left half of the horizontal midline, `00 → 01`.
    Left = 2,
    /// Right half of the horizontal midline, `10 → 11`.
    Right = 3,
}

impl SubFace {
    pub const ALL: [SubFace; 4] = [SubFace::Bottom, SubFace::Top, SubFace::Left, SubFace::Right];

    /// Local corner indices `(from, to)`.
    pub fn nodes(self) -> (usize, usize) {
        match self {
            SubFace::Bottom => (0, 1),
            SubFace::Top => (2, 3),
            SubFace::Left => (0, 2),
            SubFace::Right => (1, 3),
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            SubFace::Bottom | SubFace::Top => Axis::X,
            SubFace::Left | SubFace::Right => Axis::Y,
        }
    }

    /// Sub-face lying along `axis` in the half of the cell selected by `upper`.
    fn on_line(axis: Axis, upper: bool) -> SubFace {
        match (axis, upper) {
            (Axis::X, false) => SubFace::Bottom,
            (Axis::X, true) => SubFace::Top,
            (Axis::Y, false) => SubFace::Left,
            (Axis::Y, true) => SubFace::Right,
        }
    }
}

/// Coefficients of the sub-face flux `−c ∫ ∇v·n` on the cell's corner values.
pub fn subface_coeffs(hx: f64, hy: f64, c: f64, face: SubFace) -> [f64; 4] {
    let (a, b) = (0.75, 0.25);
    match face {
        SubFace::Bottom => {
            let s = -c * 0.5 * hy / hx;
            [-a * s, a * s, -b * s, b * s]
        }
        SubFace::Top => {
            let s = -c * 0.5 * hy / hx;
            [-b * s, b * s, -a * s, a * s]
        }
        SubFace::Left => {
            let s = -c * 0.5 * hx / hy;
            [-a * s, -b * s, a * s, b * s]
        }
        SubFace::Right => {
            let s = -c * 0.5 * hx / hy;
            [-b * s, -a * s, b * s, a * s]
        }
    }
}

/// Linear functional as `(fine node, coefficient)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

fn push_cell_form(out: &mut SparseRow, fg: &FineGrid, coef: &[f64], cell: usize, face: SubFace, w: f64) {
    let nodes = fg.cell_nodes(cell);
    let cf = subface_coeffs(fg.hx(), fg.hy(), coef[cell], face);
    for a in 0..4 {
        out.push((nodes[a], w * cf[a]));
    }
}

/// Cells adjacent to a segment, with the sub-face whose line and half match.
/// One entry for midline segments, two for interior cell-edge segments.
pub fn segment_cells(fg: &FineGrid, seg: &Segment) -> Vec<(usize, SubFace)> {
    let (ex, ey) = fg.half_extent();
    let upper = seg.start % 2 == 1;
    let face = SubFace::on_line(seg.axis, upper);
    let along = seg.start / 2;
    let mut out = Vec::with_capacity(2);
    match seg.axis {
        Axis::X => {
            if seg.line % 2 == 1 {
                out.push((fg.cell((seg.line - 1) / 2, along), face));
            } else if seg.line > 0 && seg.line < ex {
                out.push((fg.cell(seg.line / 2 - 1, along), face));
                out.push((fg.cell(seg.line / 2, along), face));
            }
        }
        Axis::Y => {
            if seg.line % 2 == 1 {
                out.push((fg.cell(along, (seg.line - 1) / 2), face));
            } else if seg.line > 0 && seg.line < ey {
                out.push((fg.cell(along, seg.line / 2 - 1), face));
                out.push((fg.cell(along, seg.line / 2), face));
            }
        }
    }
    out
}

/// Flux functional across one segment in the `+axis` direction. Midline
/// segments use the containing cell; segments on interior cell edges average
/// the traces of the two adjacent cells. Domain-boundary segments yield `None`.
pub fn segment_form(fg: &FineGrid, coef: &[f64], seg: &Segment) -> Option<SparseRow> {
    let cells = segment_cells(fg, seg);
    if cells.is_empty() {
        return None;
    }
    let w = 1.0 / cells.len() as f64;
    let mut out = Vec::with_capacity(4 * cells.len());
    for (cell, face) in cells {
        push_cell_form(&mut out, fg, coef, cell, face, w);
    }
    Some(out)
}

fn merge_row(mut row: SparseRow) -> SparseRow {
    row.sort_unstable_by_key(|e| e.0);
    let mut out: SparseRow = Vec::with_capacity(row.len());
    for (n, v) in row {
        match out.last_mut() {
            Some(last) if last.0 == n => last.1 += v,
            _ => out.push((n, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

/// Row `ρ` with `ρ·v = ∫_{∂V} −Λk ∇v·n` over the part of `∂V` inside the domain.
pub fn flux_row_coef(fg: &FineGrid, coef: &[f64], volume: &ControlVolume) -> SparseRow {
    let mut row = Vec::with_capacity(8 * volume.segments.len());
    for seg in &volume.segments {
        if let Some(form) = segment_form(fg, coef, seg) {
            let s = seg.outward as f64;
            row.extend(form.into_iter().map(|(n, v)| (n, s * v)));
        }
    }
    merge_row(row)
}

pub fn flux_row(
    fg: &FineGrid,
    k: &PermeabilityField,
    mobility: &[f64],
    volume: &ControlVolume,
) -> Result<SparseRow> {
    let coef = cell_coefficients(k, mobility)?;
    Ok(flux_row_coef(fg, &coef, volume))
}

pub fn row_dot(row: &[(usize, f64)], v: &[f64]) -> f64 {
    row.iter().map(|&(n, c)| c * v[n]).sum()
}

/// `∫_R f` for a cell-wise field over a half-unit rectangle.
pub fn rect_integral(fg: &FineGrid, f: &[f64], rect: &HalfRect) -> f64 {
    let quarter = 0.25 * fg.cell_area();
    let mut s = 0.0;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            s += f[fg.cell(x / 2, y / 2)];
        }
    }
    s * quarter
}

/// Boundary edge carrying a domain-boundary segment.
pub fn boundary_edge(fg: &FineGrid, seg: &Segment) -> usize {
    debug_assert!(seg.on_boundary);
    match seg.axis {
        Axis::X => fg.vedge(seg.line / 2, seg.start / 2),
        Axis::Y => fg.hedge(seg.start / 2, seg.line / 2),
    }
}

/// `∫_{∂V∩Γ_N} g_N` (outward).
pub fn neumann_outflow(fg: &FineGrid, bc: &BoundaryConditions, volume: &ControlVolume) -> f64 {
    volume
        .segments
        .iter()
        .filter(|s| s.on_boundary)
        .map(|s| bc.neumann(boundary_edge(fg, s)) * s.length(fg))
        .sum()
}

/// Conservation constraints `Ā v = b̄` on a set of control volumes.
#[derive(Debug, Clone)]
pub struct Constraints {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Index (into the supplied volume list) of the volume behind each row.
    pub rows: Vec<usize>,
}

/// One row per volume whose center is not a Dirichlet node, with
/// `b̄_i = ∫_{V_i} q − ∫_{∂V_i∩Γ_N} g_N`.
pub fn assemble_constraints(
    fg: &FineGrid,
    k: &PermeabilityField,
    mobility: &[f64],
    volumes: &[ControlVolume],
    src: &SourceField,
    bc: &BoundaryConditions,
) -> Result<Constraints> {
    src.validate(fg)?;
    bc.validate(fg)?;
    let coef = cell_coefficients(k, mobility)?;
    let retained: Vec<usize> = (0..volumes.len())
        .filter(|&i| !bc.is_dirichlet(volumes[i].center))
        .collect();
    let mut b = TripletBuilder::new(retained.len(), fg.num_nodes());
    let mut rhs = Vec::with_capacity(retained.len());
    for (r, &i) in retained.iter().enumerate() {
        let v = &volumes[i];
        for (n, c) in flux_row_coef(fg, &coef, v) {
            b.add(r, n, c);
        }
        rhs.push(rect_integral(fg, &src.q, &v.rect) - neumann_outflow(fg, bc, v));
    }
    Ok(Constraints {
        matrix: b.build(),
        rhs,
        rows: retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::gen_channel_field;
    use crate::mesh::CoarseGrid;
    use proptest::prelude::*;

    // Closed-form bilinear element matrices: 1D stiffness/mass tensor products.
    fn closed_form_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
        let k1 = [[1.0, -1.0], [-1.0, 1.0]];
        let m1 = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
        let mut out = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                let (ax, ay, bx, by) = (a % 2, a / 2, b % 2, b / 2);
                out[a][b] = hy / hx * k1[ax][bx] * m1[ay][by] + hx / hy * m1[ax][bx] * k1[ay][by];
            }
        }
        out
    }

    #[test]
    fn unit_element_stiffness() {
        let ke = element_stiffness(1.0, 1.0, 1.0);
        for a in 0..4 {
            assert!((ke[a][a] - 2.0 / 3.0).abs() < 1e-14);
        }
        assert!((ke[0][3] + 1.0 / 3.0).abs() < 1e-14);
        assert!((ke[1][2] + 1.0 / 3.0).abs() < 1e-14);
        assert!((ke[0][1] + 1.0 / 6.0).abs() < 1e-14);
        let cf = closed_form_stiffness(0.3, 0.7);
        let ke = element_stiffness(0.3, 0.7, 1.0);
        for a in 0..4 {
            for b in 0..4 {
                assert!((ke[a][b] - cf[a][b]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn unit_element_mass() {
        let me = element_mass(1.0, 1.0, 1.0);
        assert!((me[0][0] - 1.0 / 9.0).abs() < 1e-15);
        assert!((me[0][1] - 1.0 / 18.0).abs() < 1e-15);
        assert!((me[0][2] - 1.0 / 18.0).abs() < 1e-15);
        assert!((me[0][3] - 1.0 / 36.0).abs() < 1e-15);
        let me = element_mass(0.5, 0.25, 1.0);
        assert!((me[0][0] - 0.125 / 9.0).abs() < 1e-15);
    }

    fn channel_field(fg: &FineGrid) -> PermeabilityField {
        gen_channel_field(fg, 1.0, 1e3, &crate::field::default_geometry(), 5).unwrap()
    }

    #[test]
    fn stiffness_symmetry_kernel_and_linearity() {
        let fg = FineGrid::new(12, 12).unwrap();
        let k = channel_field(&fg);
        let a = assemble_stiffness(&fg, &k, &unit_mobility(&fg)).unwrap();
        assert!(a.is_symmetric());
        let ones = vec![1.0; fg.num_nodes()];
        let scale = k.max();
        assert!(a.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12 * scale));
        let a3 = assemble_stiffness(&fg, &k.scaled(3.0).unwrap(), &unit_mobility(&fg)).unwrap();
        for i in 0..fg.num_nodes() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                assert!((a3.get(i, j) - 3.0 * v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn weighted_mass_identities() {
        let fg = FineGrid::new(6, 4).unwrap();
        let w: Vec<f64> = (0..fg.num_cells()).map(|c| 1.0 + c as f64 * 0.1).collect();
        let m = assemble_weighted_mass(&fg, &w).unwrap();
        assert!(m.is_symmetric());
        let ones = vec![1.0; fg.num_nodes()];
        let total: f64 = w.iter().sum::<f64>() * fg.cell_area();
        assert!((m.quad_form(&ones) - total).abs() < 1e-12);
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let m2 = assemble_weighted_mass(&fg, &w2).unwrap();
        assert!((m2.quad_form(&ones) - 2.0 * total).abs() < 1e-12);
        let mut bad = w.clone();
        bad[3] = 0.0;
        assert!(assemble_weighted_mass(&fg, &bad).is_err());
    }

    #[test]
    fn load_vector_cases() {
        let fg = FineGrid::new(5, 5).unwrap();
        let bc = BoundaryConditions::no_flow(&fg);
        let zero = assemble_load(&fg, &SourceField::zero(&fg), &bc).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let ones = assemble_load(&fg, &SourceField::uniform(&fg, 1.0, 0.0), &bc).unwrap();
        let h = fg.h();
        assert!((ones[fg.node(2, 3)] - h * h).abs() < 1e-15);

        let bc = BoundaryConditions::no_flow(&fg).with_neumann_side(&fg, Side::Left, 1.0);
        let b = assemble_load(&fg, &SourceField::zero(&fg), &bc).unwrap();
        assert!((b[fg.node(0, 2)] + h).abs() < 1e-15);
        assert!((b[fg.node(0, 0)] + h / 2.0).abs() < 1e-15);
        assert_eq!(b[fg.node(1, 2)], 0.0);
    }

    #[test]
    fn boundary_partition_validated() {
        let fg = FineGrid::new(4, 4).unwrap();
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0).with_neumann_side(&fg, Side::Left, 2.0);
        assert!(bc.validate(&fg).is_err());
        let mut bc = BoundaryConditions::no_flow(&fg);
        bc.set_dirichlet(fg.node(2, 2), Some(1.0));
        assert!(bc.validate(&fg).is_err());
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0).with_neumann_side(&fg, Side::Top, 2.0);
        assert!(bc.validate(&fg).is_ok());
    }

    /// Brute-force flux across a control volume: walk every boundary segment,
    /// evaluate each adjacent cell's bilinear gradient at the segment midpoint
    /// in physical coordinates, and average traces on cell edges.
    fn brute_force_flux(fg: &FineGrid, coef: &[f64], v: &[f64], cv: &ControlVolume) -> f64 {
        let mut total = 0.0;
        for seg in &cv.segments {
            if seg.on_boundary {
                continue;
            }
            let (mx, my) = seg.midpoint(fg);
            let eps = 1e-9;
            let probes: Vec<(f64, f64)> = match (seg.axis, seg.on_midline()) {
                (_, true) => vec![(mx, my)],
                (Axis::X, false) => vec![(mx - eps, my), (mx + eps, my)],
                (Axis::Y, false) => vec![(mx, my - eps), (mx, my + eps)],
            };
            let mut flux = 0.0;
            for &(px, py) in &probes {
                let ci = ((px / fg.hx()).floor() as usize).min(fg.nx() - 1);
                let cj = ((py / fg.hy()).floor() as usize).min(fg.ny() - 1);
                let c = fg.cell(ci, cj);
                let nodes = fg.cell_nodes(c);
                let vals = [v[nodes[0]], v[nodes[1]], v[nodes[2]], v[nodes[3]]];
                let xi = (mx - ci as f64 * fg.hx()) / fg.hx();
                let eta = (my - cj as f64 * fg.hy()) / fg.hy();
                let (gx, gy) = bilinear_grad(fg.hx(), fg.hy(), xi, eta, &vals);
                let g = match seg.axis {
                    Axis::X => gx,
                    Axis::Y => gy,
                };
                flux += -coef[c] * g * seg.length(fg);
            }
            total += seg.outward as f64 * flux / probes.len() as f64;
        }
        total
    }

    proptest! {
        #[test]
        fn flux_row_matches_brute_force(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let fg = FineGrid::new(8, 8).unwrap();
            let coef: Vec<f64> = (0..fg.num_cells()).map(|_| 10f64.powf(rng.random_range(-2.0..3.0))).collect();
            let v: Vec<f64> = (0..fg.num_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cg4 = CoarseGrid::new(&fg, 4, 4).unwrap();
            let cg2 = CoarseGrid::new(&fg, 2, 2).unwrap();
            let fg16 = FineGrid::new(12, 12).unwrap();
            let _ = fg16;
            for cv in fg.control_volumes().iter().chain(&cg4.control_volumes()).chain(&cg2.control_volumes()) {
                let row = flux_row_coef(&fg, &coef, cv);
                let a = row_dot(&row, &v);
                let b = brute_force_flux(&fg, &coef, &v, cv);
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn flux_row_of_linear_and_constant_functions() {
        let fg = FineGrid::new(6, 6).unwrap();
        let k = PermeabilityField::constant(&fg, 1.0).unwrap();
        let mob = unit_mobility(&fg);
        let x: Vec<f64> = (0..fg.num_nodes()).map(|n| fg.node_coords(n).0).collect();
        let c = vec![2.5; fg.num_nodes()];
        for cv in fg.control_volumes() {
            if fg.is_boundary_node(cv.center) {
                continue;
            }
            let row = flux_row(&fg, &k, &mob, &cv).unwrap();
            assert!(row_dot(&row, &x).abs() < 1e-14);
            assert!(row_dot(&row, &c).abs() < 1e-14);
        }
    }

    #[test]
    fn center_hat_flux_on_two_by_two_grid() {
        // Exact dual-edge integral of the bilinear hat: each of the eight
        // half-faces carries (1/h)(h/2 − h/8)·1 = 3/8, so the total is 3.
        let fg = FineGrid::new(2, 2).unwrap();
        let k = PermeabilityField::constant(&fg, 1.0).unwrap();
        let center = fg.node(1, 1);
        let mut hat = vec![0.0; fg.num_nodes()];
        hat[center] = 1.0;
        let row = flux_row(&fg, &k, &unit_mobility(&fg), &fg.control_volume(center)).unwrap();
        assert!((row_dot(&row, &hat) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn telescoping_over_all_fine_volumes() {
        let fg = FineGrid::new(7, 5).unwrap();
        // too small for the default geometry
        let vals = (0..fg.num_cells()).map(|c| if (c * 7) % 3 == 0 { 1e3 } else { 1.0 }).collect();
        let k = PermeabilityField::new(&fg, vals).unwrap();
        let coef = cell_coefficients(&k, &unit_mobility(&fg)).unwrap();
        let v: Vec<f64> = (0..fg.num_nodes()).map(|n| ((n * 37) % 11) as f64 * 0.1).collect();
        let total: f64 = fg
            .control_volumes()
            .iter()
            .map(|cv| row_dot(&flux_row_coef(&fg, &coef, cv), &v))
            .sum();
        assert!(total.abs() < 1e-10 * k.max());
    }

    #[test]
    fn constraint_rhs() {
        let fg = FineGrid::new(6, 6).unwrap();
        let k = PermeabilityField::constant(&fg, 1.0).unwrap();
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0);
        let vols = fg.control_volumes();
        let mob = unit_mobility(&fg);
        let c = assemble_constraints(&fg, &k, &mob, &vols, &SourceField::zero(&fg), &bc).unwrap();
        assert!(c.rhs.iter().all(|&v| v == 0.0));
        assert_eq!(c.rows.len(), fg.num_nodes() - 14);
        let c = assemble_constraints(&fg, &k, &mob, &vols, &SourceField::uniform(&fg, 1.0, 0.0), &bc).unwrap();
        for (r, &i) in c.rows.iter().enumerate() {
            assert!((c.rhs[r] - vols[i].measure).abs() < 1e-15);
        }
    }
}
