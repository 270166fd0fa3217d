//! Multiscale coarse space: a k-harmonic partition of unity on the coarse
//! grid, enriched per coarse node by eigenvectors of a local Neumann spectral
//! problem.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{element_mass, element_stiffness, mean_grad_sq};
use crate::field::PermeabilityField;
use crate::mesh::{CoarseGrid, FineGrid, Neighborhood};
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Partition of unity `χ_i`, one function per coarse node, stored on the
/// fine nodes of its neighborhood `ω_i`.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    pub neighborhoods: Vec<Neighborhood>,
    /// `values[i][l]` is `χ_i` at `neighborhoods[i].fine_nodes[l]`.
    pub values: Vec<Vec<f64>>,
}

impl PartitionOfUnity {
    /// `χ_i` at fine node `(fi, fj)`, zero outside `ω_i`.
    pub fn value(&self, i: usize, fi: usize, fj: usize) -> f64 {
        self.neighborhoods[i]
            .local(fi, fj)
            .map_or(0.0, |l| self.values[i][l])
    }

    /// `χ_i` as a sparse fine-node vector without zero entries.
    pub fn function(&self, i: usize) -> Vec<(usize, f64)> {
        self.neighborhoods[i]
            .fine_nodes
            .iter()
            .zip(&self.values[i])
            .filter(|(_, v)| **v != 0.0)
            .map(|(&n, &v)| (n, v))
            .collect()
    }

    /// `Σ_i χ_i` at every fine node.
    pub fn sum(&self, fg: &FineGrid) -> Vec<f64> {
        let mut s = vec![0.0; fg.num_nodes()];
        for (ng, vals) in self.neighborhoods.iter().zip(&self.values) {
            for (&n, &v) in ng.fine_nodes.iter().zip(vals) {
                s[n] += v;
            }
        }
        s
    }
}

fn check_field(fg: &FineGrid, k: &PermeabilityField) -> Result<()> {
    if k.dims() != (fg.nx(), fg.ny()) {
        return Err(Error::SizeMismatch {
            expected: fg.num_cells(),
            got: k.values().len(),
        });
    }
    Ok(())
}

/// Harmonic extensions of the four corner hats of one coarse cell,
/// `out[a][l]` on the cell's fine nodes in row-major order.
fn cell_pou(cg: &CoarseGrid, k: &[f64], c: usize) -> Result<[Vec<f64>; 4]> {
    let fg = cg.fine();
    let (i0, i1, j0, j1) = cg.cell_fine_range(c);
    let (rx, ry) = cg.ratios();
    let ni = rx + 1;
    let nloc = ni * (ry + 1);
    let hat = |a: usize, li: usize, lj: usize| {
        let xi = li as f64 / rx as f64;
        let eta = lj as f64 / ry as f64;
        let fx = if a % 2 == 0 { 1.0 - xi } else { xi };
        let fy = if a / 2 == 0 { 1.0 - eta } else { eta };
        fx * fy
    };
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|a| {
        (0..nloc).map(|l| hat(a, l % ni, l / ni)).collect()
    });
    if rx < 2 || ry < 2 {
        return Ok(out);
    }
    // interior unknowns
    let ii = rx - 1;
    let nint = ii * (ry - 1);
    let interior = |li: usize, lj: usize| -> Option<usize> {
        (li > 0 && li < rx && lj > 0 && lj < ry).then(|| (lj - 1) * ii + (li - 1))
    };
    let mut a = DMatrix::<f64>::zeros(nint, nint);
    let mut b = DMatrix::<f64>::zeros(nint, 4);
    for cj in j0..j1 {
        for ci in i0..i1 {
            let ke = element_stiffness(fg.hx(), fg.hy(), k[fg.cell(ci, cj)]);
            let loc: [(usize, usize); 4] = std::array::from_fn(|p| (ci - i0 + p % 2, cj - j0 + p / 2));
            for p in 0..4 {
                let Some(rp) = interior(loc[p].0, loc[p].1) else { continue };
                for q in 0..4 {
                    match interior(loc[q].0, loc[q].1) {
                        Some(rq) => a[(rp, rq)] += ke[p][q],
                        None => {
                            for corner in 0..4 {
                                b[(rp, corner)] -= ke[p][q] * hat(corner, loc[q].0, loc[q].1);
                            }
                        }
                    }
                }
            }
        }
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular {
        row: c,
        context: "partition-of-unity cell solve".into(),
    })?;
    let x = chol.solve(&b);
    for lj in 1..ry {
        for li in 1..rx {
            let r = interior(li, lj).unwrap();
            for (corner, vals) in out.iter_mut().enumerate() {
                vals[lj * ni + li] = x[(r, corner)];
            }
        }
    }
    Ok(out)
}

/// Multiscale partition of unity: per coarse cell, the k-harmonic extension
/// of each corner's bilinear hat trace.
pub fn solve_pou(cg: &CoarseGrid, k: &PermeabilityField) -> Result<PartitionOfUnity> {
    let fg = cg.fine();
    check_field(fg, k)?;
    let kv = k.values();
    let cells: Vec<[Vec<f64>; 4]> = (0..cg.num_cells())
        .into_par_iter()
        .map(|c| cell_pou(cg, kv, c))
        .collect::<Result<_>>()?;
    let neighborhoods: Vec<Neighborhood> = (0..cg.num_nodes())
        .map(|n| cg.neighborhood(n))
        .collect::<Result<_>>()?;
    let mut values: Vec<Vec<f64>> = neighborhoods
        .iter()
        .map(|ng| vec![0.0; ng.num_nodes()])
        .collect();
    let ni = cg.ratio() + 1;
    for (c, funcs) in cells.iter().enumerate() {
        let (i0, _, j0, _) = cg.cell_fine_range(c);
        for (corner, &node) in cg.cell_nodes(c).iter().enumerate() {
            let ng = &neighborhoods[node];
            for (l, &v) in funcs[corner].iter().enumerate() {
                let loc = ng.local(i0 + l % ni, j0 + l / ni).expect("cell inside neighborhood");
                values[node][loc] = v;
            }
        }
    }
    Ok(PartitionOfUnity {
        neighborhoods,
        values,
    })
}

/// Spectral weight `k̃ = k H² Σ_j |∇χ_j|²` per fine cell, with `|∇χ_j|²`
/// averaged over the cell's Gauss points.
pub fn ktilde(cg: &CoarseGrid, k: &PermeabilityField, pou: &PartitionOfUnity) -> Result<Vec<f64>> {
    let fg = cg.fine();
    check_field(fg, k)?;
    let h2 = cg.h() * cg.h();
    let kv = k.values();
    Ok((0..fg.num_cells())
        .map(|c| {
            let (ci, cj) = fg.cell_ij(c);
            let s: f64 = cg
                .cell_nodes(cg.coarse_cell_of(c))
                .iter()
                .map(|&node| {
                    let v: [f64; 4] = std::array::from_fn(|p| pou.value(node, ci + p % 2, cj + p / 2));
                    mean_grad_sq(fg.hx(), fg.hy(), &v)
                })
                .sum();
            kv[c] * h2 * s
        })
        .collect())
}

/// Dense stiffness and weighted mass of a neighborhood with natural
/// (Neumann) boundary, in the neighborhood's local node order.
pub fn local_matrices(
    fg: &FineGrid,
    ngbh: &Neighborhood,
    k: &[f64],
    weight: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = ngbh.num_nodes();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut m = DMatrix::<f64>::zeros(n, n);
    for &c in &ngbh.fine_cells {
        let (ci, cj) = fg.cell_ij(c);
        let loc: [usize; 4] = std::array::from_fn(|p| ngbh.local(ci + p % 2, cj + p / 2).unwrap());
        let ke = element_stiffness(fg.hx(), fg.hy(), k[c]);
        let me = element_mass(fg.hx(), fg.hy(), weight[c]);
        for p in 0..4 {
            for q in 0..4 {
                a[(loc[p], loc[q])] += ke[p][q];
                m[(loc[p], loc[q])] += me[p][q];
            }
        }
    }
    (a, m)
}

/// Smallest eigenpairs of `A ψ = σ M ψ` on a neighborhood.
#[derive(Debug, Clone)]
pub struct LocalEigen {
    pub values: Vec<f64>,
    /// M-orthonormal, local node order; the largest-magnitude entry is positive.
    pub vectors: Vec<Vec<f64>>,
}

pub fn local_eig(
    ngbh: &Neighborhood,
    fg: &FineGrid,
    k: &PermeabilityField,
    ktilde: &[f64],
    count: usize,
) -> Result<LocalEigen> {
    check_field(fg, k)?;
    if ktilde.len() != fg.num_cells() {
        return Err(Error::SizeMismatch {
            expected: fg.num_cells(),
            got: ktilde.len(),
        });
    }
    let n = ngbh.num_nodes();
    if count == 0 || count > n {
        return Err(Error::Eigen(format!(
            "requested {count} eigenpairs on a neighborhood with {n} nodes"
        )));
    }
    let (a, m) = local_matrices(fg, ngbh, k.values(), ktilde);
    let l = Cholesky::new(m)
        .ok_or_else(|| Error::Eigen(format!("weighted mass of node {} is not positive definite", ngbh.node)))?
        .l();
    let x = l
        .solve_lower_triangular(&a)
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let mut c = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let ct = c.transpose();
    c += ct;
    c *= 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let lt = l.transpose();
    let mut values = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for &idx in order.iter().take(count) {
        values.push(eig.eigenvalues[idx]);
        let y = eig.eigenvectors.column(idx).into_owned();
        let psi = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::Eigen("back substitution failed".into()))?;
        let mut v: Vec<f64> = psi.iter().copied().collect();
        fix_sign(&mut v);
        vectors.push(v);
    }
    Ok(LocalEigen { values, vectors })
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// GMsFEM coarse space. Columns are sparse fine-node vectors: `χ_i` for the
/// first function of every node, then `χ_i ψ_ℓ` (scaled to unit max-norm)
/// for the enrichment of interior nodes.
#[derive(Debug, Clone)]
pub struct CoarseSpace {
    num_fine: usize,
    num_coarse: usize,
    columns: Vec<Vec<(usize, f64)>>,
    /// `(coarse node, ℓ)` per column, `ℓ` counted from 0.
    dofs: Vec<(usize, usize)>,
    /// Computed local eigenvalues per coarse node (empty for boundary nodes).
    pub eigenvalues: Vec<Vec<f64>>,
    pub pou: PartitionOfUnity,
    l_interior: usize,
}

impl CoarseSpace {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn num_fine(&self) -> usize {
        self.num_fine
    }

    pub fn num_coarse_nodes(&self) -> usize {
        self.num_coarse
    }

    pub fn l_interior(&self) -> usize {
        self.l_interior
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn dof(&self, j: usize) -> (usize, usize) {
        self.dofs[j]
    }

    /// Column of the first function `χ_i` of coarse node `i`.
    pub fn first_column(&self, node: usize) -> usize {
        self.dofs
            .iter()
            .position(|&(n, l)| n == node && l == 0)
            .expect("every node has a first function")
    }

    /// The same space with at most `l_interior` functions per interior node.
    pub fn restrict(&self, l_interior: usize) -> Result<CoarseSpace> {
        if l_interior == 0 || l_interior > self.l_interior {
            return Err(Error::Config(format!(
                "cannot restrict a space built with L = {} to L = {l_interior}",
                self.l_interior
            )));
        }
        let keep: Vec<usize> = (0..self.dim()).filter(|&j| self.dofs[j].1 < l_interior).collect();
        Ok(CoarseSpace {
            num_fine: self.num_fine,
            num_coarse: self.num_coarse,
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            dofs: keep.iter().map(|&j| self.dofs[j]).collect(),
            eigenvalues: self
                .eigenvalues
                .iter()
                .map(|e| e.iter().copied().take(l_interior).collect())
                .collect(),
            pou: self.pou.clone(),
            l_interior,
        })
    }

    /// Basis matrix `R` (fine nodes × dim).
    pub fn basis_matrix(&self) -> CsrMatrix {
        let nnz = self.columns.iter().map(Vec::len).sum();
        let mut b = TripletBuilder::with_capacity(self.num_fine, self.dim(), nnz);
        for (j, col) in self.columns.iter().enumerate() {
            for &(n, v) in col {
                b.add(n, j, v);
            }
        }
        b.build()
    }

    /// `R c` as a fine-node vector.
    pub fn prolong(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.num_fine];
        for (col, &c) in self.columns.iter().zip(coeffs) {
            if c != 0.0 {
                for &(n, x) in col {
                    v[n] += c * x;
                }
            }
        }
        v
    }

    /// Numerical rank of the Gram matrix `RᵀR` (desk-scale check).
    pub fn gram_rank(&self, rel_tol: f64) -> usize {
        let r = self.basis_matrix();
        let d = self.dim();
        let mut dense = DMatrix::<f64>::zeros(self.num_fine, d);
        for i in 0..self.num_fine {
            let (cols, vals) = r.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                dense[(i, j)] = v;
            }
        }
        let g = dense.transpose() * &dense;
        let ev = SymmetricEigen::new(g).eigenvalues;
        let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ev.iter().filter(|v| **v > rel_tol * max).count()
    }
}

/// Build the coarse space with `l_interior` functions per interior coarse
/// node and one (`χ_i`) per boundary node.
pub fn build_coarse_space(
    cg: &CoarseGrid,
    k: &PermeabilityField,
    l_interior: usize,
) -> Result<CoarseSpace> {
    if l_interior == 0 {
        return Err(Error::Config("L_interior must be at least 1".into()));
    }
    let fg = cg.fine();
    let pou = solve_pou(cg, k)?;
    let kt = if l_interior > 1 {
        ktilde(cg, k, &pou)?
    } else {
        Vec::new()
    };
    let eigs: Vec<Option<LocalEigen>> = (0..cg.num_nodes())
        .into_par_iter()
        .map(|node| {
            if l_interior == 1 || cg.is_boundary_node(node) {
                Ok(None)
            } else {
                local_eig(&pou.neighborhoods[node], fg, k, &kt, l_interior).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let mut columns = Vec::new();
    let mut dofs = Vec::new();
    let mut eigenvalues = Vec::with_capacity(cg.num_nodes());
    for (node, eig) in eigs.into_iter().enumerate() {
        columns.push(pou.function(node));
        dofs.push((node, 0));
        let Some(eig) = eig else {
            eigenvalues.push(Vec::new());
            continue;
        };
        let chi = &pou.values[node];
        let nodes = &pou.neighborhoods[node].fine_nodes;
        for (ell, psi) in eig.vectors.iter().enumerate().skip(1) {
            let mut col: Vec<(usize, f64)> = nodes
                .iter()
                .zip(chi.iter().zip(psi))
                .map(|(&n, (&c, &p))| (n, c * p))
                .filter(|e| e.1 != 0.0)
                .collect();
            let scale = col.iter().fold(0.0f64, |m, e| m.max(e.1.abs()));
            if scale == 0.0 {
                return Err(Error::Eigen(format!("basis function ({node}, {ell}) vanishes")));
            }
            col.iter_mut().for_each(|e| e.1 /= scale);
            columns.push(col);
            dofs.push((node, ell));
        }
        eigenvalues.push(eig.values);
    }
    Ok(CoarseSpace {
        num_fine: fg.num_nodes(),
        num_coarse: cg.num_nodes(),
        columns,
        dofs,
        eigenvalues,
        pou,
        l_interior,
    })
}
