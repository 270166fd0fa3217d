//! Cell-wise permeability and source fields, the plain-text field file
//! format, and a synthetic high-contrast channel/inclusion generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::FineGrid;

/// Strictly positive, finite, cell-wise constant coefficient `k(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl PermeabilityField {
    pub fn new(fg: &FineGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != fg.num_cells() {
            return Err(Error::SizeMismatch {
                expected: fg.num_cells(),
                got: values.len(),
            });
        }
        for (cell, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::FieldValue {
                    cell,
                    msg: format!("non-finite permeability {value}"),
                });
            }
            if value <= 0.0 {
                return Err(Error::NonPositivePermeability { cell, value });
            }
        }
        Ok(Self {
            nx: fg.nx(),
            ny: fg.ny(),
            values,
        })
    }

    pub fn constant(fg: &FineGrid, value: f64) -> Result<Self> {
        Self::new(fg, vec![value; fg.num_cells()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::FieldValue {
                cell: 0,
                msg: format!("invalid scale factor {factor}"),
            });
        }
        Ok(Self {
            nx: self.nx,
            ny: self.ny,
            values: self.values.iter().map(|v| v * factor).collect(),
        })
    }

    /// `key=value` summary lines.
    pub fn summary(&self) -> String {
        format!(
            "nx={}\nny={}\nkmin={}\nkmax={}\ncontrast={}\n",
            self.nx,
            self.ny,
            self.min(),
            self.max(),
            self.contrast()
        )
    }
}

/// Total (`q`) and water (`q_w`) source densities per fine cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    pub q: Vec<f64>,
    pub qw: Vec<f64>,
}

impl SourceField {
    pub fn zero(fg: &FineGrid) -> Self {
        Self {
            q: vec![0.0; fg.num_cells()],
            qw: vec![0.0; fg.num_cells()],
        }
    }

    pub fn uniform(fg: &FineGrid, q: f64, qw: f64) -> Self {
        Self {
            q: vec![q; fg.num_cells()],
            qw: vec![qw; fg.num_cells()],
        }
    }

    pub fn validate(&self, fg: &FineGrid) -> Result<()> {
        for v in [&self.q, &self.qw] {
            if v.len() != fg.num_cells() {
                return Err(Error::SizeMismatch {
                    expected: fg.num_cells(),
                    got: v.len(),
                });
            }
            if let Some(cell) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::FieldValue {
                    cell,
                    msg: "non-finite source".into(),
                });
            }
        }
        Ok(())
    }
}

/// Parse whitespace- or newline-separated values. Lines starting with `#`
/// are comments.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        for token in line.split_whitespace() {
            let v: f64 = token.parse().map_err(|_| Error::Parse {
                token: token.to_string(),
                position: out.len(),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

/// One value per line using the shortest representation that parses back
/// to the same `f64`.
pub fn format_values(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 12);
    for v in values {
        writeln!(s, "{v}").unwrap();
    }
    s
}

pub fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    std::fs::write(path, format_values(values)).map_err(|e| Error::io(path, e))
}

pub fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_values(&text)
}

/// Load a permeability file (row-major from the bottom-left cell).
pub fn load_field(path: &Path, fg: &FineGrid) -> Result<PermeabilityField> {
    PermeabilityField::new(fg, read_values(path)?)
}

pub fn save_field(path: &Path, field: &PermeabilityField) -> Result<()> {
    write_values(path, field.values())
}

/// Geometric feature carrying the high permeability value. Positions are
/// fractions of the unit square; widths and sides are in fine cells.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    /// Horizontal channel centered at height `y`, spanning `[x0, x1]`.
    Channel {
        y: f64,
        width: usize,
        x0: f64,
        x1: f64,
    },
    /// Square inclusion with lower-left corner at `(x, y)`.
    Inclusion { x: f64, y: f64, side: usize },
    /// `count` square inclusions placed uniformly at random from the seed,
    /// at least `margin` away from the domain boundary.
    RandomInclusions { count: usize, side: usize, margin: f64 },
}

/// Default stand-in geometry: three horizontal channels two cells wide and
/// eight random square inclusions of side four, all clear of the outer
/// eighth of the domain.
pub fn default_geometry() -> Vec<Feature> {
    vec![
        Feature::Channel {
            y: 0.23,
            width: 2,
            x0: 0.15,
            x1: 0.85,
        },
        Feature::Channel {
            y: 0.51,
            width: 2,
            x0: 0.2,
            x1: 0.8,
        },
        Feature::Channel {
            y: 0.77,
            width: 2,
            x0: 0.13,
            x1: 0.87,
        },
        Feature::RandomInclusions {
            count: 8,
            side: 4,
            margin: 0.12,
        },
    ]
}

/// Two-valued field: `background` off-feature and `background·contrast` on
/// channels and inclusions. Deterministic for a fixed seed.
pub fn gen_channel_field(
    fg: &FineGrid,
    background: f64,
    contrast: f64,
    geometry: &[Feature],
    seed: u64,
) -> Result<PermeabilityField> {
    if !(background > 0.0 && background.is_finite()) {
        return Err(Error::Geometry(format!("invalid background {background}")));
    }
    if !(contrast >= 1.0 && contrast.is_finite()) {
        return Err(Error::Geometry(format!("contrast must be >= 1, got {contrast}")));
    }
    let (nx, ny) = (fg.nx(), fg.ny());
    let mut mask = vec![false; fg.num_cells()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = |i0: usize, i1: usize, j0: usize, j1: usize, mask: &mut [bool]| {
        for j in j0..j1 {
            for i in i0..i1 {
                mask[fg.cell(i, j)] = true;
            }
        }
    };
    for feature in geometry {
        match *feature {
            Feature::Channel { y, width, x0, x1 } => {
                if width == 0 || width > ny {
                    return Err(Error::Geometry(format!("channel width {width} out of range")));
                }
                if !(0.0..=1.0).contains(&y) || !(0.0 <= x0 && x0 < x1 && x1 <= 1.0) {
                    return Err(Error::Geometry(format!(
                        "channel y={y} x=[{x0},{x1}] outside the unit square"
                    )));
                }
                let jc = (y * ny as f64).round() as isize;
                let j0 = (jc - (width as isize) / 2).clamp(0, (ny - width) as isize) as usize;
                let i0 = (x0 * nx as f64).round() as usize;
                let i1 = ((x1 * nx as f64).round() as usize).min(nx);
                if i1 <= i0 {
                    return Err(Error::Geometry("channel shorter than one cell".into()));
                }
                fill(i0, i1, j0, j0 + width, &mut mask);
            }
            Feature::Inclusion { x, y, side } => {
                if side == 0 || side > nx || side > ny {
                    return Err(Error::Geometry(format!("inclusion side {side} out of range")));
                }
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::Geometry(format!("inclusion at ({x},{y}) outside")));
                }
                let i0 = ((x * nx as f64).round() as usize).min(nx - side);
                let j0 = ((y * ny as f64).round() as usize).min(ny - side);
                fill(i0, i0 + side, j0, j0 + side, &mut mask);
            }
            Feature::RandomInclusions {
                count,
                side,
                margin,
            } => {
                let span = |n: usize| {
                    let lo = (margin * n as f64).ceil() as usize;
                    let hi = ((1.0 - margin) * n as f64).floor() as usize;
                    (side > 0 && (0.0..0.5).contains(&margin) && lo + side <= hi)
                        .then_some((lo, hi - side))
                };
                let (Some((ilo, ihi)), Some((jlo, jhi))) = (span(nx), span(ny)) else {
                    return Err(Error::Geometry(format!(
                        "inclusions of side {side} do not fit inside margin {margin}"
                    )));
                };
                for _ in 0..count {
                    let i0 = rng.random_range(ilo..=ihi);
                    let j0 = rng.random_range(jlo..=jhi);
                    fill(i0, i0 + side, j0, j0 + side, &mut mask);
                }
            }
        }
    }
    let high = background * contrast;
    let values = mask
        .iter()
        .map(|&m| if m { high } else { background })
        .collect();
    PermeabilityField::new(fg, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> FineGrid {
        FineGrid::new(100, 100).unwrap()
    }

    #[test]
    fn load_constant_field() {
        let fg = grid();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        std::fs::write(&path, "1\n".repeat(10000)).unwrap();
        let k = load_field(&path, &fg).unwrap();
        assert_eq!(k.contrast(), 1.0);
    }

    #[test]
    fn load_rejects_zero_and_short_files() {
        let fg = grid();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        let mut text = "1 ".repeat(9999);
        text.push('0');
        std::fs::write(&path, &text).unwrap();
        let err = load_field(&path, &fg).unwrap_err();
        assert!(err.to_string().contains("non-positive permeability"), "{err}");

        std::fs::write(&path, "1\n".repeat(9999)).unwrap();
        let err = load_field(&path, &fg).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");

        std::fs::write(&path, "1 2 x").unwrap();
        assert!(matches!(load_field(&path, &fg), Err(Error::Parse { .. })));
    }

    #[test]
    fn single_channel_is_two_valued() {
        let fg = grid();
        let geom = [Feature::Channel {
            y: 0.5,
            width: 2,
            x0: 0.0,
            x1: 1.0,
        }];
        let k = gen_channel_field(&fg, 1.0, 1e4, &geom, 0).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0 || v == 1e4));
        assert_eq!(k.values().iter().filter(|&&v| v == 1e4).count(), 200);
        assert_eq!(k.min(), 1.0);
        assert_eq!(k.max(), 1e4);
    }

    #[test]
    fn unit_contrast_is_constant_and_seed_is_deterministic() {
        let fg = grid();
        let k = gen_channel_field(&fg, 2.0, 1.0, &default_geometry(), 3).unwrap();
        assert_eq!(k.contrast(), 1.0);
        let a = gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 7).unwrap();
        let b = gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 7).unwrap();
        assert_eq!(a, b);
        let c = gen_channel_field(&fg, 1.0, 1e4, &default_geometry(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let fg = grid();
        let bad = [
            Feature::Channel {
                y: 0.5,
                width: 0,
                x0: 0.0,
                x1: 1.0,
            },
            Feature::Channel {
                y: 0.5,
                width: 2,
                x0: 0.6,
                x1: 0.4,
            },
            Feature::Inclusion {
                x: 0.5,
                y: 0.5,
                side: 0,
            },
        ];
        for f in bad {
            assert!(gen_channel_field(&fg, 1.0, 10.0, &[f], 0).is_err());
        }
        assert!(gen_channel_field(&fg, 1.0, 0.5, &[], 0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let fg = FineGrid::new(20, 20).unwrap();
        let k = gen_channel_field(&fg, 0.37, 12345.678, &default_geometry(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        save_field(&path, &k).unwrap();
        let back = load_field(&path, &fg).unwrap();
        assert!(k
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn summary_lists_keys() {
        let fg = FineGrid::new(4, 4).unwrap();
        let k = PermeabilityField::constant(&fg, 3.0).unwrap();
        let s = k.summary();
        for key in ["nx=4", "ny=4", "kmin=3", "kmax=3", "contrast=1"] {
            assert!(s.contains(key), "{s}");
        }
    }
}
