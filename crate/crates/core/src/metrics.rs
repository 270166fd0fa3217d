//! Error norms of coarse solutions against fine references.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, assemble_weighted_mass, unit_mobility};
use crate::field::PermeabilityField;
use crate::mesh::FineGrid;
use crate::sparse::CsrMatrix;

/// `k`-weighted stiffness and mass matrices for repeated norm evaluations.
#[derive(Debug, Clone)]
pub struct Norms {
    stiffness: CsrMatrix,
    mass: CsrMatrix,
}

impl Norms {
    pub fn new(fg: &FineGrid, k: &PermeabilityField) -> Result<Self> {
        Ok(Self {
            stiffness: assemble_stiffness(fg, k, &unit_mobility(fg))?,
            mass: assemble_weighted_mass(fg, k.values())?,
        })
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.mass.nrows() {
            return Err(Error::SizeMismatch { expected: self.mass.nrows(), got: v.len() });
        }
        Ok(())
    }

    /// `(∫ k|∇v|²)^{1/2}`.
    pub fn energy(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.stiffness.quad_form(v).max(0.0).sqrt())
    }

    /// `(∫ k v²)^{1/2}`.
    pub fn weighted_l2(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.mass.quad_form(v).max(0.0).sqrt())
    }

    /// Relative errors of `p_c` against `p_ref`, in percent.
    pub fn relative_errors(&self, p_ref: &[f64], p_c: &[f64]) -> Result<(f64, f64)> {
        self.check(p_c)?;
        let d: Vec<f64> = p_ref.iter().zip(p_c).map(|(a, b)| a - b).collect();
        let (l2, h1) = (self.weighted_l2(p_ref)?, self.energy(p_ref)?);
        if l2 == 0.0 || h1 == 0.0 {
            return Err(Error::Config("reference solution has zero norm".into()));
        }
        Ok((100.0 * self.weighted_l2(&d)? / l2, 100.0 * self.energy(&d)? / h1))
    }
}

pub fn energy_norm(fg: &FineGrid, v: &[f64], k: &PermeabilityField) -> Result<f64> {
    Norms::new(fg, k)?.energy(v)
}

pub fn weighted_l2_norm(fg: &FineGrid, v: &[f64], k: &PermeabilityField) -> Result<f64> {
    Norms::new(fg, k)?.weighted_l2(v)
}

/// Relative errors with system-size metadata left at zero.
pub fn relative_errors(
    fg: &FineGrid,
    p_ref: &[f64],
    p_c: &[f64],
    k: &PermeabilityField,
) -> Result<ErrorReport> {
    let (l2k_pct, h1k_pct) = Norms::new(fg, k)?.relative_errors(p_ref, p_c)?;
    Ok(ErrorReport { l2k_pct, h1k_pct, ..ErrorReport::default() })
}

/// Unweighted relative L² error over dual volumes, in percent.
pub fn saturation_error(s_ref: &[f64], s: &[f64]) -> Result<f64> {
    if s.len() != s_ref.len() {
        return Err(Error::SizeMismatch { expected: s_ref.len(), got: s.len() });
    }
    let den = s_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Config("reference saturation is zero".into()));
    }
    let num = s_ref.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(100.0 * num / den)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorReport {
    /// Coarse space dimension plus the number of coarse volumes.
    pub n_c: usize,
    pub dim_v0: usize,
    pub m_c: usize,
    pub l2k_pct: f64,
    pub h1k_pct: f64,
    /// `(t, error %)` per saturation snapshot.
    pub saturation_pct: Vec<(f64, f64)>,
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str = "N_c,dimV0,Mc,L2k_pct,H1k_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.n_c, self.dim_v0, self.m_c, self.l2k_pct, self.h1k_pct
        )
    }

    pub fn max_saturation_pct(&self) -> Option<f64> {
        self.saturation_pct.iter().map(|&(_, e)| e).reduce(f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "N_c = {}", self.n_c);
        let _ = writeln!(s, "dimV0 = {}", self.dim_v0);
        let _ = writeln!(s, "Mc = {}", self.m_c);
        let _ = writeln!(s, "L2k_pct = {:.6}", self.l2k_pct);
        let _ = writeln!(s, "H1k_pct = {:.6}", self.h1k_pct);
        for (t, e) in &self.saturation_pct {
            let _ = writeln!(s, "saturation_pct[t={t}] = {e:.6}");
        }
        s
    }
}
