//! Structured fine and coarse grids on the unit square, coarse-node
//! neighborhoods, and node-centered dual control volumes.
//!
//! Geometry of control volumes is kept in *half units*: the fine grid spacing
//! is split in two, so fine nodes sit at even half-unit coordinates and fine
//! cell midlines at odd ones. Every control volume at either level is then an
//! integer rectangle in half units, and its boundary decomposes into unit
//! segments of length `h/2`, each lying either on a fine-cell midline (odd
//! coordinate) or on a fine-cell edge (even coordinate).

use crate::error::{Error, Result};

/// Uniform fine grid of `nx × ny` bilinear cells covering `[0,1]²`.
///
/// Nodes and cells are numbered row-major from the bottom-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
}

impl FineGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Grid(format!(
                "fine grid needs at least 2 cells per axis, got {nx}×{ny}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            hx: 1.0 / nx as f64,
            hy: 1.0 / ny as f64,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Fine mesh size along x (`1/nx`).
    pub fn h(&self) -> f64 {
        self.hx
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.nx && j <= self.ny);
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % (self.nx + 1), n / (self.nx + 1))
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.nx, c / self.nx)
    }

    pub fn node_coords(&self, n: usize) -> (f64, f64) {
        let (i, j) = self.node_ij(n);
        (i as f64 * self.hx, j as f64 * self.hy)
    }

    /// Corner nodes of a cell in local order `[00, 10, 01, 11]`.
    #[inline]
    pub fn cell_nodes(&self, c: usize) -> [usize; 4] {
        let (i, j) = self.cell_ij(c);
        let n00 = self.node(i, j);
        let n01 = self.node(i, j + 1);
        [n00, n00 + 1, n01, n01 + 1]
    }

    pub fn is_boundary_node(&self, n: usize) -> bool {
        let (i, j) = self.node_ij(n);
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    /// Number of horizontal edges `(i,j)–(i+1,j)`; vertical edges follow them.
    pub fn num_hedges(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    pub fn num_edges(&self) -> usize {
        self.num_hedges() + (self.nx + 1) * self.ny
    }

    /// Edge from node `(i,j)` to `(i+1,j)`.
    pub fn hedge(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Edge from node `(i,j)` to `(i,j+1)`.
    pub fn vedge(&self, i: usize, j: usize) -> usize {
        self.num_hedges() + j * (self.nx + 1) + i
    }

    /// Edge endpoints `(tail, head)`; positive edge flux runs tail → head.
    pub fn edge_nodes(&self, e: usize) -> (usize, usize) {
        if e < self.num_hedges() {
            let (i, j) = (e % self.nx, e / self.nx);
            (self.node(i, j), self.node(i + 1, j))
        } else {
            let e = e - self.num_hedges();
            let (i, j) = (e % (self.nx + 1), e / (self.nx + 1));
            (self.node(i, j), self.node(i, j + 1))
        }
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        if e < self.num_hedges() {
            let j = e / self.nx;
            j == 0 || j == self.ny
        } else {
            let i = (e - self.num_hedges()) % (self.nx + 1);
            i == 0 || i == self.nx
        }
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        if e < self.num_hedges() {
            self.hx
        } else {
            self.hy
        }
    }

    /// Half-unit extent of the whole domain.
    pub fn half_extent(&self) -> (usize, usize) {
        (2 * self.nx, 2 * self.ny)
    }

    /// Dual control volume of fine node `n`.
    pub fn control_volume(&self, n: usize) -> ControlVolume {
        let (i, j) = self.node_ij(n);
        let rect = HalfRect::centered(2 * i, 2 * j, 1, 1, self.half_extent());
        ControlVolume::new(self, n, n, Level::Fine, rect)
    }

    /// One volume per fine node, indexed by node.
    pub fn control_volumes(&self) -> Vec<ControlVolume> {
        (0..self.num_nodes()).map(|n| self.control_volume(n)).collect()
    }

    /// The whole domain as a single region.
    pub fn domain(&self) -> ControlVolume {
        let (ex, ey) = self.half_extent();
        let rect = HalfRect {
            x0: 0,
            x1: ex,
            y0: 0,
            y1: ey,
        };
        ControlVolume::new(self, 0, 0, Level::Fine, rect)
    }
}

/// Coarse grid whose cells are aligned unions of `rx × ry` fine cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid {
    fine: FineGrid,
    nx: usize,
    ny: usize,
    rx: usize,
    ry: usize,
}

impl CoarseGrid {
    pub fn new(fine: &FineGrid, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Grid("coarse grid needs at least one cell".into()));
        }
        if fine.nx % nx != 0 || fine.ny % ny != 0 {
            return Err(Error::Grid(format!(
                "fine grid {}×{} is not divisible by coarse grid {nx}×{ny}",
                fine.nx, fine.ny
            )));
        }
        Ok(Self {
            fine: fine.clone(),
            nx,
            ny,
            rx: fine.nx / nx,
            ry: fine.ny / ny,
        })
    }

    pub fn fine(&self) -> &FineGrid {
        &self.fine
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Refinement ratio along x.
    pub fn ratio(&self) -> usize {
        self.rx
    }

    pub fn ratios(&self) -> (usize, usize) {
        (self.rx, self.ry)
    }

    /// Coarse mesh size `H` (the larger of the two axes).
    pub fn h(&self) -> f64 {
        (1.0 / self.nx as f64).max(1.0 / self.ny as f64)
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % (self.nx + 1), n / (self.nx + 1))
    }

    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.nx, c / self.nx)
    }

    /// Corner coarse nodes of a coarse cell, local order `[00, 10, 01, 11]`.
    pub fn cell_nodes(&self, c: usize) -> [usize; 4] {
        let (i, j) = self.cell_ij(c);
        let n00 = self.node(i, j);
        let n01 = self.node(i, j + 1);
        [n00, n00 + 1, n01, n01 + 1]
    }

    /// Fine node coinciding with coarse node `n`.
    pub fn fine_node(&self, n: usize) -> usize {
        let (i, j) = self.node_ij(n);
        self.fine.node(i * self.rx, j * self.ry)
    }

    pub fn is_boundary_node(&self, n: usize) -> bool {
        let (i, j) = self.node_ij(n);
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    /// Coarse cell containing fine cell `c`.
    pub fn coarse_cell_of(&self, c: usize) -> usize {
        let (i, j) = self.fine.cell_ij(c);
        (j / self.ry) * self.nx + i / self.rx
    }

    /// Fine node index range (inclusive) spanned by coarse cell `c`.
    pub fn cell_fine_range(&self, c: usize) -> (usize, usize, usize, usize) {
        let (i, j) = self.cell_ij(c);
        (
            i * self.rx,
            (i + 1) * self.rx,
            j * self.ry,
            (j + 1) * self.ry,
        )
    }

    pub fn neighborhood(&self, n: usize) -> Result<Neighborhood> {
        if n >= self.num_nodes() {
            return Err(Error::OutOfRange {
                index: n,
                len: self.num_nodes(),
            });
        }
        let (ci, cj) = self.node_ij(n);
        let mut cells = Vec::with_capacity(4);
        for j in cj.saturating_sub(1)..(cj + 1).min(self.ny) {
            for i in ci.saturating_sub(1)..(ci + 1).min(self.nx) {
                cells.push(j * self.nx + i);
            }
        }
        let i0 = ci.saturating_sub(1) * self.rx;
        let i1 = (ci + 1).min(self.nx) * self.rx;
        let j0 = cj.saturating_sub(1) * self.ry;
        let j1 = (cj + 1).min(self.ny) * self.ry;
        let mut fine_nodes = Vec::with_capacity((i1 - i0 + 1) * (j1 - j0 + 1));
        for j in j0..=j1 {
            for i in i0..=i1 {
                fine_nodes.push(self.fine.node(i, j));
            }
        }
        let mut fine_cells = Vec::with_capacity((i1 - i0) * (j1 - j0));
        for j in j0..j1 {
            for i in i0..i1 {
                fine_cells.push(self.fine.cell(i, j));
            }
        }
        Ok(Neighborhood {
            node: n,
            cells,
            fine_nodes,
            fine_cells,
            range: (i0, i1, j0, j1),
        })
    }

    /// Dual control volume of coarse node `n`: a square of side `H` centered
    /// on the node and clipped to the domain.
    pub fn control_volume(&self, n: usize) -> ControlVolume {
        let (i, j) = self.node_ij(n);
        let rect = HalfRect::centered(
            2 * i * self.rx,
            2 * j * self.ry,
            self.rx,
            self.ry,
            self.fine.half_extent(),
        );
        ControlVolume::new(&self.fine, n, self.fine_node(n), Level::Coarse, rect)
    }

    pub fn control_volumes(&self) -> Vec<ControlVolume> {
        (0..self.num_nodes()).map(|n| self.control_volume(n)).collect()
    }
}

/// Coarse neighborhood `ω_i`: the union of coarse cells touching node `i`.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub node: usize,
    /// Coarse cells in `ω_i`.
    pub cells: Vec<usize>,
    /// Fine nodes of `ω_i` (closure), row-major; position is the local index.
    pub fine_nodes: Vec<usize>,
    /// Fine cells of `ω_i`.
    pub fine_cells: Vec<usize>,
    /// Inclusive fine-node index box `(i0, i1, j0, j1)`.
    pub range: (usize, usize, usize, usize),
}

impl Neighborhood {
    pub fn num_nodes(&self) -> usize {
        self.fine_nodes.len()
    }

    /// Local index of a fine node given its grid coordinates.
    pub fn local(&self, i: usize, j: usize) -> Option<usize> {
        let (i0, i1, j0, j1) = self.range;
        if i < i0 || i > i1 || j < j0 || j > j1 {
            return None;
        }
        Some((j - j0) * (i1 - i0 + 1) + (i - i0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fine,
    Coarse,
}

/// Direction of a segment's normal; a segment with normal `X` lies on a
/// vertical line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// Integer rectangle `[x0,x1] × [y0,y1]` in half units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalfRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl HalfRect {
    fn centered(cx: usize, cy: usize, rx: usize, ry: usize, extent: (usize, usize)) -> Self {
        Self {
            x0: cx.saturating_sub(rx),
            x1: (cx + rx).min(extent.0),
            y0: cy.saturating_sub(ry),
            y1: (cy + ry).min(extent.1),
        }
    }

    /// Whether the unit half-cell square with lower-left corner `(x, y)` is inside.
    #[inline]
    pub fn contains_unit(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn overlap_area(&self, other: &HalfRect) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// One unit (length `h/2`) piece of a control-volume boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub axis: Axis,
    /// Half-unit coordinate of the line (x for `Axis::X`, y for `Axis::Y`).
    pub line: usize,
    /// Half-unit coordinate of the segment start along the line.
    pub start: usize,
    /// `+1` when the outward normal points along `+axis`, `-1` otherwise.
    pub outward: i8,
    /// Lies on the domain boundary.
    pub on_boundary: bool,
}

impl Segment {
    /// Whether the segment lies on a fine-cell midline (as opposed to a fine-cell edge).
    pub fn on_midline(&self) -> bool {
        self.line % 2 == 1
    }

    pub fn length(&self, fg: &FineGrid) -> f64 {
        match self.axis {
            Axis::X => 0.5 * fg.hy,
            Axis::Y => 0.5 * fg.hx,
        }
    }

    pub fn midpoint(&self, fg: &FineGrid) -> (f64, f64) {
        let along = self.start as f64 + 0.5;
        match self.axis {
            Axis::X => (self.line as f64 * 0.5 * fg.hx, along * 0.5 * fg.hy),
            Axis::Y => (along * 0.5 * fg.hx, self.line as f64 * 0.5 * fg.hy),
        }
    }
}

/// Node-centered dual control volume.
#[derive(Debug, Clone)]
pub struct ControlVolume {
    /// Owning node index at this volume's level.
    pub owner: usize,
    /// Fine node at the volume's center.
    pub center: usize,
    pub level: Level,
    pub rect: HalfRect,
    pub measure: f64,
    /// Counter-clockwise boundary, starting at the lower-left corner.
    pub segments: Vec<Segment>,
}

impl ControlVolume {
    pub fn new(fg: &FineGrid, owner: usize, center: usize, level: Level, rect: HalfRect) -> Self {
        let (ex, ey) = fg.half_extent();
        let mut segments = Vec::with_capacity(2 * (rect.x1 - rect.x0 + rect.y1 - rect.y0));
        for x in rect.x0..rect.x1 {
            segments.push(Segment {
                axis: Axis::Y,
                line: rect.y0,
                start: x,
                outward: -1,
                on_boundary: rect.y0 == 0,
            });
        }
        for y in rect.y0..rect.y1 {
            segments.push(Segment {
                axis: Axis::X,
                line: rect.x1,
                start: y,
                outward: 1,
                on_boundary: rect.x1 == ex,
            });
        }
        for x in (rect.x0..rect.x1).rev() {
            segments.push(Segment {
                axis: Axis::Y,
                line: rect.y1,
                start: x,
                outward: 1,
                on_boundary: rect.y1 == ey,
            });
        }
        for y in (rect.y0..rect.y1).rev() {
            segments.push(Segment {
                axis: Axis::X,
                line: rect.x0,
                start: y,
                outward: -1,
                on_boundary: rect.x0 == 0,
            });
        }
        let measure = rect.area() as f64 * 0.25 * fg.hx * fg.hy;
        Self {
            owner,
            center,
            level,
            rect,
            measure,
            segments,
        }
    }

    /// Fine nodes whose dual volume meets this one, with the fraction of the
    /// fine volume lying inside. Fractions are 1 for fine volumes fully
    /// contained; coarse volumes whose sides fall on fine-cell edges (even
    /// refinement ratio) cut boundary fine volumes in halves or quarters.
    pub fn fine_cover(&self, fg: &FineGrid) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let i0 = self.rect.x0.div_ceil(2);
        let i1 = self.rect.x1 / 2;
        let j0 = self.rect.y0.div_ceil(2);
        let j1 = self.rect.y1 / 2;
        for j in j0..=j1 {
            for i in i0..=i1 {
                let n = fg.node(i, j);
                let fv = fg.control_volume(n);
                let inside = self.rect.overlap_area(&fv.rect);
                if inside > 0 {
                    out.push((n, inside as f64 / fv.rect.area() as f64));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fine_grid_counts() {
        assert_eq!(FineGrid::new(100, 100).unwrap().num_nodes(), 10201);
        assert_eq!(FineGrid::new(2, 2).unwrap().num_nodes(), 9);
        assert_eq!(FineGrid::new(4, 2).unwrap().num_nodes(), 15);
        assert!(FineGrid::new(1, 4).is_err());
        assert!(FineGrid::new(0, 0).is_err());
    }

    #[test]
    fn index_maps_are_bijective() {
        let fg = FineGrid::new(5, 3).unwrap();
        for n in 0..fg.num_nodes() {
            let (i, j) = fg.node_ij(n);
            assert_eq!(fg.node(i, j), n);
        }
        for c in 0..fg.num_cells() {
            let (i, j) = fg.cell_ij(c);
            assert_eq!(fg.cell(i, j), c);
        }
        assert!((fg.h() * fg.nx() as f64 - 1.0).abs() < 1e-15);
        for e in 0..fg.num_edges() {
            let (a, b) = fg.edge_nodes(e);
            let (ai, aj) = fg.node_ij(a);
            let (bi, bj) = fg.node_ij(b);
            assert_eq!((bi - ai) + (bj - aj), 1);
        }
    }

    #[test]
    fn coarse_grid_counts() {
        let fg = FineGrid::new(100, 100).unwrap();
        let cg = CoarseGrid::new(&fg, 10, 10).unwrap();
        assert_eq!(cg.num_nodes(), 121);
        assert_eq!(cg.ratio(), 10);

        let fg = FineGrid::new(2, 2).unwrap();
        let cg = CoarseGrid::new(&fg, 2, 2).unwrap();
        assert_eq!((cg.num_nodes(), cg.ratio()), (9, 1));

        let fg = FineGrid::new(8, 8).unwrap();
        let cg = CoarseGrid::new(&fg, 4, 4).unwrap();
        assert_eq!((cg.num_nodes(), cg.ratio()), (25, 2));

        assert!(CoarseGrid::new(&FineGrid::new(10, 10).unwrap(), 3, 5).is_err());
    }

    #[test]
    fn neighborhood_classes() {
        let fg = FineGrid::new(100, 100).unwrap();
        let cg = CoarseGrid::new(&fg, 10, 10).unwrap();
        let r = cg.ratio();
        let interior = cg.neighborhood(cg.node(4, 6)).unwrap();
        assert_eq!(interior.cells.len(), 4);
        assert_eq!(interior.num_nodes(), (2 * r + 1) * (2 * r + 1));
        assert_eq!(cg.neighborhood(0).unwrap().cells.len(), 1);
        assert_eq!(cg.neighborhood(cg.node(3, 0)).unwrap().cells.len(), 2);
        assert!(cg.neighborhood(121).is_err());
    }

    #[test]
    fn neighborhoods_cover_domain_and_overlap_on_shared_cells() {
        let fg = FineGrid::new(12, 12).unwrap();
        let cg = CoarseGrid::new(&fg, 3, 3).unwrap();
        let mut covered = vec![false; fg.num_nodes()];
        for n in 0..cg.num_nodes() {
            for &f in &cg.neighborhood(n).unwrap().fine_nodes {
                covered[f] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));

        let a = cg.neighborhood(cg.node(1, 1)).unwrap();
        let b = cg.neighborhood(cg.node(2, 1)).unwrap();
        let shared_cells: Vec<_> = a.cells.iter().filter(|c| b.cells.contains(c)).collect();
        assert_eq!(shared_cells.len(), 2);
        let mut expected: Vec<usize> = Vec::new();
        for &&c in &shared_cells {
            let (i0, i1, j0, j1) = cg.cell_fine_range(c);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    expected.push(fg.node(i, j));
                }
            }
        }
        expected.sort_unstable();
        expected.dedup();
        let mut shared: Vec<usize> = a
            .fine_nodes
            .iter()
            .copied()
            .filter(|n| b.fine_nodes.contains(n))
            .collect();
        shared.sort_unstable();
        assert_eq!(shared, expected);
    }

    #[test]
    fn control_volume_counts_and_measures() {
        let fg = FineGrid::new(100, 100).unwrap();
        let cg = CoarseGrid::new(&fg, 10, 10).unwrap();
        let fine = fg.control_volumes();
        let coarse = cg.control_volumes();
        assert_eq!(fine.len(), 10201);
        assert_eq!(coarse.len(), 121);
        let h = fg.h();
        assert!((fine[fg.node(5, 5)].measure - h * h).abs() < 1e-15);
        assert!((fine[0].measure - h * h / 4.0).abs() < 1e-15);
        let total: f64 = fine.iter().map(|v| v.measure).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let total: f64 = coarse.iter().map(|v| v.measure).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(fine.iter().chain(&coarse).all(|v| v.measure > 0.0));
    }

    #[test]
    fn coarse_volumes_are_unions_of_fine_pieces() {
        for (nf, nc) in [(15, 3), (20, 4), (12, 3)] {
            let fg = FineGrid::new(nf, nf).unwrap();
            let cg = CoarseGrid::new(&fg, nc, nc).unwrap();
            let fine = fg.control_volumes();
            for cv in cg.control_volumes() {
                let cover = cv.fine_cover(&fg);
                let m: f64 = cover.iter().map(|&(n, f)| f * fine[n].measure).sum();
                assert!((m - cv.measure).abs() < 1e-12);
                if cg.ratio() % 2 == 1 {
                    assert!(cover.iter().all(|&(_, f)| f == 1.0));
                }
            }
        }
    }

    #[test]
    fn segments_lie_on_midlines_or_edges_and_close() {
        let fg = FineGrid::new(8, 8).unwrap();
        let cg = CoarseGrid::new(&fg, 4, 4).unwrap();
        for cv in fg.control_volumes().iter().chain(cg.control_volumes().iter()) {
            let perimeter: f64 = cv.segments.iter().map(|s| s.length(&fg)).sum();
            let r = cv.rect;
            let expected = (r.x1 - r.x0) as f64 * fg.hx() + (r.y1 - r.y0) as f64 * fg.hy();
            assert!((perimeter - expected).abs() < 1e-14);
            if cv.level == Level::Fine {
                assert!(cv.segments.iter().all(|s| s.on_midline() || s.on_boundary));
            }
        }
    }
}
