//! Constrained Ritz solve on a coarse space: energy projection, flux
//! constraints through Lagrange multipliers, and the fine FV reference.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{BoundaryConditions, Constraints};
use crate::fvregion::solve_region;
use crate::mesh::{CoarseGrid, FineGrid};
use crate::msbasis::CoarseSpace;
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Largest KKT dimension solved with the dense factorization.
pub const DENSE_KKT_LIMIT: usize = 4000;

/// Relative pivot threshold of the constraint rank check.
pub const RANK_TOL: f64 = 1e-12;

/// Affine trial space `lift + span(R)`.
#[derive(Debug, Clone)]
pub struct Subspace {
    /// Fine nodes × free columns.
    pub r: CsrMatrix,
    /// Fine-node vector carrying the Dirichlet data.
    pub lift: Vec<f64>,
    /// Dimension of the space before pinning (reporting convention).
    pub full_dim: usize,
}

impl Subspace {
    pub fn num_free(&self) -> usize {
        self.r.ncols()
    }

    /// `lift + R c`.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        let mut v = self.lift.clone();
        for (i, vi) in v.iter_mut().enumerate() {
            *vi += self.r.row_dot(i, c);
        }
        v
    }
}

/// Coarse trial space with the first function of every Dirichlet coarse node
/// pinned; the lift is `Σ p_D(y_i) χ_i` over those nodes.
pub fn coarse_subspace(
    space: &CoarseSpace,
    cg: &CoarseGrid,
    bc: &BoundaryConditions,
) -> Result<Subspace> {
    let fg = cg.fine();
    if space.num_fine() != fg.num_nodes() || space.num_coarse_nodes() != cg.num_nodes() {
        return Err(Error::SizeMismatch {
            expected: fg.num_nodes(),
            got: space.num_fine(),
        });
    }
    let mut lift = vec![0.0; fg.num_nodes()];
    let mut pinned = vec![false; space.dim()];
    for node in 0..cg.num_nodes() {
        if let Some(pd) = bc.dirichlet(cg.fine_node(node)) {
            let col = space.first_column(node);
            pinned[col] = true;
            for &(n, v) in space.column(col) {
                lift[n] += pd * v;
            }
        }
    }
    let free: Vec<usize> = (0..space.dim()).filter(|&j| !pinned[j]).collect();
    let nnz = free.iter().map(|&j| space.column(j).len()).sum();
    let mut b = TripletBuilder::with_capacity(fg.num_nodes(), free.len(), nnz);
    for (c, &j) in free.iter().enumerate() {
        for &(n, v) in space.column(j) {
            b.add(n, c, v);
        }
    }
    Ok(Subspace {
        r: b.build(),
        lift,
        full_dim: space.dim(),
    })
}

/// The full fine space: identity on non-Dirichlet nodes, Dirichlet values lifted.
pub fn fine_subspace(fg: &FineGrid, bc: &BoundaryConditions) -> Subspace {
    let free: Vec<usize> = (0..fg.num_nodes()).filter(|&n| !bc.is_dirichlet(n)).collect();
    let mut b = TripletBuilder::with_capacity(fg.num_nodes(), free.len(), free.len());
    for (c, &n) in free.iter().enumerate() {
        b.add(n, c, 1.0);
    }
    Subspace {
        r: b.build(),
        lift: bc.dirichlet_lift(),
        full_dim: fg.num_nodes(),
    }
}

#[derive(Debug, Clone)]
pub struct KktSystem {
    pub a0: DMatrix<f64>,
    /// Constraint rows on the free coefficients.
    pub c: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub bbar0: DVector<f64>,
    /// Volume behind each constraint row (index into the constrained volume list).
    pub rows: Vec<usize>,
    /// Paper-style size: full space dimension plus all control volumes.
    pub reported_size: usize,
}

impl KktSystem {
    pub fn size(&self) -> usize {
        self.a0.nrows() + self.c.nrows()
    }
}

/// `Rᵀ B` as a dense matrix.
fn tr_product(r: &CsrMatrix, b: &CsrMatrix) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(r.ncols(), b.ncols());
    for i in 0..r.nrows() {
        let (rc, rv) = r.row(i);
        let (bc, bv) = b.row(i);
        for (&p, &x) in rc.iter().zip(rv) {
            for (&q, &y) in bc.iter().zip(bv) {
                out[(p, q)] += x * y;
            }
        }
    }
    out
}

fn to_dense(m: &CsrMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            d[(i, j)] = v;
        }
    }
    d
}

/// Project the fine energy and constraints onto a trial space.
/// `a` is the fine stiffness, `load` the fine load vector, and
/// `total_volumes` the number of control volumes before Dirichlet rows
/// were dropped.
pub fn project(
    a: &CsrMatrix,
    load: &[f64],
    constraints: &Constraints,
    sub: &Subspace,
    total_volumes: usize,
) -> Result<KktSystem> {
    let n = a.nrows();
    if load.len() != n || sub.r.nrows() != n || constraints.matrix.ncols() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            got: load.len().min(sub.r.nrows()).min(constraints.matrix.ncols()),
        });
    }
    let ar = a.matmul(&sub.r);
    let mut a0 = tr_product(&sub.r, &ar);
    let a0t = a0.transpose();
    a0 += a0t;
    a0 *= 0.5;
    let c = to_dense(&constraints.matrix.matmul(&sub.r));
    let alift = a.mul_vec(&sub.lift);
    let resid: Vec<f64> = load.iter().zip(&alift).map(|(f, g)| f - g).collect();
    let b0 = DVector::from_vec(sub.r.tr_mul_vec(&resid));
    let clift = constraints.matrix.mul_vec(&sub.lift);
    let bbar0 = DVector::from_iterator(
        clift.len(),
        constraints.rhs.iter().zip(&clift).map(|(b, l)| b - l),
    );
    Ok(KktSystem {
        a0,
        c,
        b0,
        bbar0,
        rows: constraints.rows.clone(),
        reported_size: sub.full_dim + total_volumes,
    })
}

/// Rows of `c` that are linearly dependent on earlier-pivoted rows, found by
/// Gaussian elimination with complete pivoting.
pub fn dependent_rows(c: &DMatrix<f64>) -> Vec<usize> {
    let (m, n) = c.shape();
    let mut w = c.clone();
    let scale = w.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return (0..m).collect();
    }
    let tol = RANK_TOL * scale;
    let mut rows: Vec<usize> = (0..m).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut rank = 0;
    while rank < m.min(n) {
        let mut best = 0.0;
        let (mut pr, mut pc) = (rank, rank);
        for i in rank..m {
            for j in rank..n {
                let v = w[(rows[i], cols[j])].abs();
                if v > best {
                    best = v;
                    pr = i;
                    pc = j;
                }
            }
        }
        if best <= tol {
            break;
        }
        rows.swap(rank, pr);
        cols.swap(rank, pc);
        let (r0, c0) = (rows[rank], cols[rank]);
        let piv = w[(r0, c0)];
        for i in rank + 1..m {
            let ri = rows[i];
            let f = w[(ri, c0)] / piv;
            if f != 0.0 {
                for j in rank..n {
                    let cj = cols[j];
                    let v = w[(r0, cj)];
                    w[(ri, cj)] -= f * v;
                }
            }
        }
        rank += 1;
    }
    let mut dep: Vec<usize> = rows[rank..].to_vec();
    dep.sort_unstable();
    dep
}

#[derive(Debug, Clone)]
pub struct PressureSolution {
    /// Fine-node pressure.
    pub pressure: Vec<f64>,
    /// Free coefficients (empty for the fine FV solve).
    pub coeffs: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// `‖A₀u + Cᵀλ − b₀‖₂ / max(‖b₀‖₂, 1)`.
    pub stationarity: f64,
    /// `max |C u − b̄₀|`.
    pub constraint_residual: f64,
}

fn check_dense_size(size: usize) -> Result<()> {
    if size > DENSE_KKT_LIMIT {
        return Err(Error::Config(format!(
            "KKT system of size {size} exceeds the dense limit {DENSE_KKT_LIMIT}"
        )));
    }
    Ok(())
}

/// Solve the saddle-point system `[[A₀, Cᵀ], [C, 0]] [u; λ] = [b₀; b̄₀]`.
pub fn solve_kkt(sys: &KktSystem, sub: &Subspace) -> Result<PressureSolution> {
    let d = sys.a0.nrows();
    let m = sys.c.nrows();
    check_dense_size(d + m)?;
    if m > 0 {
        let dep = dependent_rows(&sys.c);
        if !dep.is_empty() {
            return Err(Error::RankDeficient {
                rows: dep.iter().map(|&r| sys.rows[r]).collect(),
            });
        }
    }
    let mut k = DMatrix::<f64>::zeros(d + m, d + m);
    k.view_mut((0, 0), (d, d)).copy_from(&sys.a0);
    k.view_mut((d, 0), (m, d)).copy_from(&sys.c);
    k.view_mut((0, d), (d, m)).copy_from(&sys.c.transpose());
    let mut rhs = DVector::<f64>::zeros(d + m);
    rhs.rows_mut(0, d).copy_from(&sys.b0);
    rhs.rows_mut(d, m).copy_from(&sys.bbar0);
    let x = solve_refined(&k, &rhs, "KKT")?;
    let u = x.rows(0, d).into_owned();
    let lambda = x.rows(d, m).into_owned();
    let stationarity =
        (&sys.a0 * &u + sys.c.transpose() * &lambda - &sys.b0).norm() / sys.b0.norm().max(1.0);
    let constraint_residual = (&sys.c * &u - &sys.bbar0).amax();
    let coeffs: Vec<f64> = u.iter().copied().collect();
    Ok(PressureSolution {
        pressure: sub.expand(&coeffs),
        coeffs,
        multipliers: lambda.iter().copied().collect(),
        stationarity,
        constraint_residual,
    })
}

fn solve_refined(k: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = k.clone().lu();
    let singular = || {
        let u = lu.u();
        let row = (0..u.nrows()).find(|&i| u[(i, i)] == 0.0).unwrap_or(0);
        Error::Singular {
            row,
            context: format!("{what} factorization"),
        }
    };
    let mut x = lu.solve(rhs).ok_or_else(singular)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    for _ in 0..2 {
        let r = rhs - k * &x;
        let dx = lu.solve(&r).ok_or_else(singular)?;
        x += dx;
    }
    Ok(x)
}

/// Plain Galerkin solve `A₀ u = b₀` on the same trial space.
pub fn solve_galerkin(sys: &KktSystem, sub: &Subspace) -> Result<PressureSolution> {
    let d = sys.a0.nrows();
    check_dense_size(d)?;
    let u = match sys.a0.clone().cholesky() {
        Some(ch) => ch.solve(&sys.b0),
        None => {
            return Err(Error::Singular {
                row: 0,
                context: "Galerkin matrix is not positive definite".into(),
            })
        }
    };
    let stationarity = (&sys.a0 * &u - &sys.b0).norm() / sys.b0.norm().max(1.0);
    let constraint_residual = if sys.c.nrows() > 0 {
        (&sys.c * &u - &sys.bbar0).amax()
    } else {
        0.0
    };
    let coeffs: Vec<f64> = u.iter().copied().collect();
    Ok(PressureSolution {
        pressure: sub.expand(&coeffs),
        coeffs,
        multipliers: Vec::new(),
        stationarity,
        constraint_residual,
    })
}

/// Classical vertex-centered fine FV solve: one balance per non-Dirichlet
/// fine volume, Dirichlet values substituted.
pub fn solve_fine_fv(
    fg: &FineGrid,
    coef: &[f64],
    q: &[f64],
    bc: &BoundaryConditions,
) -> Result<PressureSolution> {
    bc.validate(fg)?;
    if !bc.has_dirichlet() {
        return Err(Error::Boundary(
            "the fine FV reference needs Dirichlet data to fix the constant".into(),
        ));
    }
    let dom = fg.domain();
    let zeros = vec![0.0; dom.segments.len()];
    let sol = solve_region(fg, coef, q, bc, &dom, &zeros)?;
    Ok(PressureSolution {
        pressure: sol.pressure,
        coeffs: Vec::new(),
        multipliers: Vec::new(),
        stationarity: 0.0,
        constraint_residual: 0.0,
    })
}

/// Energy `J(v) = ½ a(v, v) − F(v)` with `F` including Neumann data.
pub fn energy(a: &CsrMatrix, load: &[f64], v: &[f64]) -> f64 {
    0.5 * a.quad_form(v) - load.iter().zip(v).map(|(f, x)| f * x).sum::<f64>()
}

/// Max over constraint rows of `|Ā v − b̄|` at the fine level.
pub fn constraint_residual(constraints: &Constraints, v: &[f64]) -> f64 {
    let av = constraints.matrix.mul_vec(v);
    av.iter()
        .zip(&constraints.rhs)
        .fold(0.0f64, |m, (x, b)| m.max((x - b).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_constraints, assemble_load, assemble_stiffness, cell_coefficients, unit_mobility};
    use crate::field::{default_geometry, gen_channel_field, PermeabilityField, SourceField};
    use crate::msbasis::build_coarse_space;

    struct Setup {
        fg: FineGrid,
        cg: CoarseGrid,
        k: PermeabilityField,
        bc: BoundaryConditions,
        a: CsrMatrix,
        load: Vec<f64>,
        coarse_cons: Constraints,
    }

    fn setup(nx: usize, ncx: usize, k: Option<PermeabilityField>) -> Setup {
        let fg = FineGrid::new(nx, nx).unwrap();
        let cg = CoarseGrid::new(&fg, ncx, ncx).unwrap();
        let k = k.unwrap_or_else(|| gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 11).unwrap());
        let bc = BoundaryConditions::pressure_drop(&fg, 1.0, 0.0);
        let mob = unit_mobility(&fg);
        let a = assemble_stiffness(&fg, &k, &mob).unwrap();
        let src = SourceField::zero(&fg);
        let load = assemble_load(&fg, &src, &bc).unwrap();
        let coarse_cons =
            assemble_constraints(&fg, &k, &mob, &cg.control_volumes(), &src, &bc).unwrap();
        Setup { fg, cg, k, bc, a, load, coarse_cons }
    }

    #[test]
    fn singleton_space_reproduces_fine_fv() {
        let s = setup(12, 12, None);
        let space = build_coarse_space(&s.cg, &s.k, 1).unwrap();
        let sub = coarse_subspace(&space, &s.cg, &s.bc).unwrap();
        let sys = project(&s.a, &s.load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
        assert_eq!(sys.c.nrows(), sys.c.ncols());
        let kkt = solve_kkt(&sys, &sub).unwrap();
        let coef = cell_coefficients(&s.k, &unit_mobility(&s.fg)).unwrap();
        let fv = solve_fine_fv(&s.fg, &coef, &vec![0.0; s.fg.num_cells()], &s.bc).unwrap();
        for (x, y) in kkt.pressure.iter().zip(&fv.pressure) {
            assert!((x - y).abs() < 1e-10);
        }
        let fine = fine_subspace(&s.fg, &s.bc);
        let sysf = project(&s.a, &s.load, &s.coarse_cons, &fine, s.fg.num_nodes()).unwrap();
        let kf = solve_kkt(&sysf, &fine).unwrap();
        for (x, y) in kf.pressure.iter().zip(&fv.pressure) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let s = setup(12, 3, None);
        let bc = BoundaryConditions::pressure_drop(&s.fg, 0.0, 0.0);
        let space = build_coarse_space(&s.cg, &s.k, 3).unwrap();
        let sub = coarse_subspace(&space, &s.cg, &bc).unwrap();
        let load = vec![0.0; s.fg.num_nodes()];
        let sys = project(&s.a, &load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
        let sol = solve_kkt(&sys, &sub).unwrap();
        assert!(sol.pressure.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn homogeneous_problem_is_exact_in_every_mode() {
        let fg = FineGrid::new(12, 12).unwrap();
        let k = PermeabilityField::constant(&fg, 1.0).unwrap();
        let s = setup(12, 3, Some(k));
        let space = build_coarse_space(&s.cg, &s.k, 3).unwrap();
        let sub = coarse_subspace(&space, &s.cg, &s.bc).unwrap();
        assert_eq!(sub.full_dim, 16 + 4 * 2);
        let sys = project(&s.a, &s.load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
        assert_eq!(sys.reported_size, 24 + 16);
        for sol in [solve_kkt(&sys, &sub).unwrap(), solve_galerkin(&sys, &sub).unwrap()] {
            for n in 0..s.fg.num_nodes() {
                assert!((sol.pressure[n] - (1.0 - s.fg.node_coords(n).0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constraints_are_active_and_satisfied() {
        let s = setup(20, 4, None);
        let space = build_coarse_space(&s.cg, &s.k, 4).unwrap();
        let sub = coarse_subspace(&space, &s.cg, &s.bc).unwrap();
        let sys = project(&s.a, &s.load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
        let fv = solve_kkt(&sys, &sub).unwrap();
        let gal = solve_galerkin(&sys, &sub).unwrap();
        assert!(constraint_residual(&s.coarse_cons, &fv.pressure) < 1e-9);
        assert!(fv.constraint_residual < 1e-9);
        assert!(fv.stationarity < 1e-9);
        assert!(constraint_residual(&s.coarse_cons, &gal.pressure) > 1e-3);
        assert!(energy(&s.a, &s.load, &gal.pressure) <= energy(&s.a, &s.load, &fv.pressure));
    }

    #[test]
    fn ritz_optimality_along_constraint_null_space() {
        let s = setup(16, 4, None);
        let space = build_coarse_space(&s.cg, &s.k, 3).unwrap();
        let sub = coarse_subspace(&space, &s.cg, &s.bc).unwrap();
        let sys = project(&s.a, &s.load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
        let sol = solve_kkt(&sys, &sub).unwrap();
        let j0 = energy(&s.a, &s.load, &sol.pressure);
        // random directions projected onto null(C)
        let c = &sys.c;
        let cct = (c * c.transpose()).cholesky().unwrap();
        let n = c.ncols();
        for t in 0..8u64 {
            let z = DVector::from_fn(n, |i, _| (((i as u64 + 1) * (t + 3) * 2654435761) % 1000) as f64 / 500.0 - 1.0);
            let d = &z - c.transpose() * cct.solve(&(c * &z));
            assert!((c * &d).amax() < 1e-8 * d.amax());
            for eps in [1e-3, -1e-3, 1e-2, -1e-2] {
                let cs: Vec<f64> = sol.coeffs.iter().zip(d.iter()).map(|(u, x)| u + eps * x).collect();
                let j = energy(&s.a, &s.load, &sub.expand(&cs));
                assert!(j >= j0 - 1e-12 * j0.abs(), "J decreased along direction {t}");
            }
        }
    }

    #[test]
    fn energy_is_monotone_under_enrichment() {
        let s = setup(20, 4, None);
        let space = build_coarse_space(&s.cg, &s.k, 6).unwrap();
        let mut last = f64::INFINITY;
        for l in [1, 2, 4, 6] {
            let sp = space.restrict(l).unwrap();
            let sub = coarse_subspace(&sp, &s.cg, &s.bc).unwrap();
            let sys = project(&s.a, &s.load, &s.coarse_cons, &sub, s.cg.num_nodes()).unwrap();
            let j = energy(&s.a, &s.load, &solve_kkt(&sys, &sub).unwrap().pressure);
            assert!(j <= last + 1e-12 * j.abs(), "L={l}: {j} > {last}");
            last = j;
        }
    }

    #[test]
    fn dependent_constraints_are_reported() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 2.0, 4.0, 0.0]);
        assert_eq!(dependent_rows(&c).len(), 1);
        let id = DMatrix::<f64>::identity(4, 4);
        assert!(dependent_rows(&id).is_empty());
    }
}
