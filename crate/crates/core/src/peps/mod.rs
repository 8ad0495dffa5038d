//! Projected entangled-pair states on an open-boundary `H×W` grid.
//!
//! Every site holds a rank-5 tensor with axes `(up, left, down, right,
//! physical)`. Virtual legs facing the grid boundary have length 1. Fixing the
//! physical leg of every site to a configuration `x` and contracting all
//! virtual bonds yields the real amplitude `Ψ(x)`; the model distribution is
//! `|Ψ(x)|² / Z`.

mod boundary;
mod construct;
mod contract;
mod environment;
pub mod io;

pub use construct::{bars_stripes_peps, ising_peps, random_peps, IsingParams};
pub use contract::{amplitude, double_layer_log_norm, log_norm_exact, Amplitude, MAX_ENUMERATION};
pub use environment::{environments, Environments};

pub(crate) use boundary::{absorb_single_down, double_layer_boundaries, Mps};

use crate::error::{PepsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const UP: usize = 0;
pub const LEFT: usize = 1;
pub const DOWN: usize = 2;
pub const RIGHT: usize = 3;
pub const PHYS: usize = 4;

/// An assignment of physical basis indices to every grid site, stored in
/// raster (row-major) order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridConfig {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl GridConfig {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PepsError::shape("grid dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(PepsError::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(GridConfig {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        GridConfig {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// The `index`-th configuration in lexicographic raster order over a
    /// `d`-letter alphabet (site 0 is the most significant digit).
    pub fn from_index(height: usize, width: usize, d: usize, mut index: u64) -> Self {
        let n = height * width;
        let mut values = vec![0u8; n];
        for v in values.iter_mut().rev() {
            *v = (index % d as u64) as u8;
            index /= d as u64;
        }
        GridConfig {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.values[row * self.width + col] as usize
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.values[row * self.width + col] = value;
    }

    pub fn max_value(&self) -> usize {
        self.values.iter().copied().max().unwrap_or(0) as usize
    }
}

impl std::fmt::Display for GridConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in 0..self.height {
            for c in 0..self.width {
                write!(f, "{}", self.get(r, c))?;
            }
            if r + 1 < self.height {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Boundary-MPS contraction controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionSettings<T> {
    /// Bond cap of the boundary MPS; 0 disables truncation entirely.
    pub chi: usize,
    /// Singular values below `rel_tol` times the largest are dropped when
    /// truncating.
    pub rel_tol: T,
    /// Rescale boundary tensors after every row and track the log of the
    /// factors. Without it large grids overflow.
    pub log_scale: bool,
}

impl<T: Scalar> ContractionSettings<T> {
    pub fn exact() -> Self {
        ContractionSettings {
            chi: 0,
            rel_tol: T::zero(),
            log_scale: true,
        }
    }

    pub fn with_chi(chi: usize) -> Self {
        ContractionSettings {
            chi,
            rel_tol: T::zero(),
            log_scale: true,
        }
    }

    /// `χ = 2·D²` for a model of bond dimension `D`.
    pub fn default_for(bond_dim: usize) -> Self {
        Self::with_chi(2 * bond_dim * bond_dim)
    }

    pub fn is_exact(&self) -> bool {
        self.chi == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Peps<T> {
    height: usize,
    width: usize,
    phys_dim: usize,
    sites: Vec<Tensor<T>>,
}

impl<T: Scalar> Peps<T> {
    /// Builds a PEPS from raster-ordered site tensors, checking bond
    /// consistency, unit boundary legs and the physical dimension.
    pub fn new(height: usize, width: usize, phys_dim: usize, sites: Vec<Tensor<T>>) -> Result<Self> {
        if height == 0 || width == 0 || phys_dim == 0 {
            return Err(PepsError::shape("grid and physical dimensions must be positive"));
        }
        if phys_dim > 256 {
            return Err(PepsError::Capacity(format!(
                "physical dimension {phys_dim} exceeds 256"
            )));
        }
        if sites.len() != height * width {
            return Err(PepsError::shape(format!(
                "{height}x{width} grid needs {} site tensors, got {}",
                height * width,
                sites.len()
            )));
        }
        let p = Peps {
            height,
            width,
            phys_dim,
            sites,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.height {
            for c in 0..self.width {
                let s = self.site(r, c).shape();
                if s.len() != 5 {
                    return Err(PepsError::shape(format!("site ({r}, {c}) has rank {}", s.len())));
                }
                if s[PHYS] != self.phys_dim {
                    return Err(PepsError::shape(format!(
                        "site ({r}, {c}) physical axis {} != {}",
                        s[PHYS], self.phys_dim
                    )));
                }
                let boundary = [
                    (r == 0, UP, "up"),
                    (c == 0, LEFT, "left"),
                    (r + 1 == self.height, DOWN, "down"),
                    (c + 1 == self.width, RIGHT, "right"),
                ];
                for (on_edge, axis, name) in boundary {
                    if on_edge && s[axis] != 1 {
                        return Err(PepsError::shape(format!(
                            "boundary {name} leg of site ({r}, {c}) has length {}",
                            s[axis]
                        )));
                    }
                }
                if r + 1 < self.height && s[DOWN] != self.site(r + 1, c).shape()[UP] {
                    return Err(PepsError::shape(format!(
                        "vertical bond below ({r}, {c}) mismatched"
                    )));
                }
                if c + 1 < self.width && s[RIGHT] != self.site(r, c + 1).shape()[LEFT] {
                    return Err(PepsError::shape(format!(
                        "horizontal bond right of ({r}, {c}) mismatched"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn phys_dim(&self) -> usize {
        self.phys_dim
    }

    pub fn num_sites(&self) -> usize {
        self.height * self.width
    }

    pub fn site(&self, row: usize, col: usize) -> &Tensor<T> {
        &self.sites[row * self.width + col]
    }

    pub fn sites(&self) -> &[Tensor<T>] {
        &self.sites
    }

    /// Replaces one site tensor; its shape must match the current one.
    pub fn set_site(&mut self, row: usize, col: usize, tensor: Tensor<T>) -> Result<()> {
        let idx = row * self.width + col;
        if tensor.shape() != self.sites[idx].shape() {
            return Err(PepsError::shape(format!(
                "site ({row}, {col}) expects shape {:?}, got {:?}",
                self.sites[idx].shape(),
                tensor.shape()
            )));
        }
        self.sites[idx] = tensor;
        Ok(())
    }

    /// Mutable access to the raw site data for in-place parameter updates;
    /// shapes cannot change through this view.
    pub fn site_data_mut(&mut self, index: usize) -> &mut [T] {
        self.sites[index].data_mut()
    }

    pub fn scale_site(&mut self, row: usize, col: usize, factor: T) {
        self.sites[row * self.width + col].scale_mut(factor);
    }

    /// Multiplies every site tensor by `factor`, scaling `Ψ` by
    /// `factor^(H·W)`.
    pub fn scale_all(&mut self, factor: T) {
        for s in &mut self.sites {
            s.scale_mut(factor);
        }
    }

    /// `(vertical, horizontal)` bond tables: `vertical[r][c]` is the up leg of
    /// site `(r, c)` for `r < H` and the down leg of the last row for `r = H`;
    /// `horizontal[r][c]` is the left leg of `(r, c)` for `c < W` and the right
    /// leg of the last column for `c = W`.
    pub fn bond_tables(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let (h, w) = (self.height, self.width);
        let vertical = (0..=h)
            .map(|r| {
                (0..w)
                    .map(|c| {
                        if r < h {
                            self.site(r, c).shape()[UP]
                        } else {
                            self.site(h - 1, c).shape()[DOWN]
                        }
                    })
                    .collect()
            })
            .collect();
        let horizontal = (0..h)
            .map(|r| {
                (0..=w)
                    .map(|c| {
                        if c < w {
                            self.site(r, c).shape()[LEFT]
                        } else {
                            self.site(r, w - 1).shape()[RIGHT]
                        }
                    })
                    .collect()
            })
            .collect();
        (vertical, horizontal)
    }

    pub fn max_bond_dim(&self) -> usize {
        self.sites
            .iter()
            .flat_map(|s| s.shape()[..4].iter().copied())
            .max()
            .unwrap_or(1)
    }

    pub fn num_parameters(&self) -> usize {
        self.sites.iter().map(|s| s.len()).sum()
    }

    pub(crate) fn check_config(&self, x: &GridConfig) -> Result<()> {
        if x.height() != self.height || x.width() != self.width {
            return Err(PepsError::shape(format!(
                "configuration {}x{} does not match model {}x{}",
                x.height(),
                x.width(),
                self.height,
                self.width
            )));
        }
        if x.max_value() >= self.phys_dim {
            return Err(PepsError::Index(format!(
                "configuration value {} outside physical dimension {}",
                x.max_value(),
                self.phys_dim
            )));
        }
        Ok(())
    }

    /// Rank-4 `(up, left, down, right)` slice of a site at physical index `s`.
    pub(crate) fn fixed_site(&self, row: usize, col: usize, s: usize) -> Tensor<T> {
        let t = self.site(row, col);
        let d = self.phys_dim;
        let data: Vec<T> = t.data().iter().skip(s).step_by(d).copied().collect();
        Tensor::from_raw(t.shape()[..4].to_vec(), data)
    }

    pub(crate) fn fixed_row(&self, row: usize, x: &GridConfig) -> Vec<Tensor<T>> {
        (0..self.width)
            .map(|c| self.fixed_site(row, c, x.get(row, c)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_config_indexing() {
        let x = GridConfig::from_index(2, 2, 2, 0b1010);
        assert_eq!(x.values(), &[1, 0, 1, 0]);
        assert_eq!(x.get(1, 0), 1);
        assert!(GridConfig::new(2, 2, vec![0; 3]).is_err());
        assert_eq!(format!("{x}"), "10\n10");
    }

    #[test]
    fn new_rejects_inconsistent_bonds() {
        let good = Tensor::<f64>::ones(&[1, 1, 1, 2, 2]);
        let right = Tensor::<f64>::ones(&[1, 3, 1, 1, 2]);
        assert!(matches!(
            Peps::new(1, 2, 2, vec![good.clone(), right]),
            Err(PepsError::Shape(_))
        ));
        let open = Tensor::<f64>::ones(&[2, 1, 1, 1, 2]);
        assert!(Peps::new(1, 1, 2, vec![open]).is_err());
        let wrong_phys = Tensor::<f64>::ones(&[1, 1, 1, 1, 3]);
        assert!(Peps::new(1, 1, 2, vec![wrong_phys]).is_err());
    }

    #[test]
    fn bond_tables_of_random_model() {
        let p = random_peps::<f64>(2, 3, 2, 3, 1);
        let (v, h) = p.bond_tables();
        assert_eq!(v, vec![vec![1, 1, 1], vec![3, 3, 3], vec![1, 1, 1]]);
        assert_eq!(h, vec![vec![1, 3, 3, 1], vec![1, 3, 3, 1]]);
        assert_eq!(p.max_bond_dim(), 3);
    }

    #[test]
    fn fixed_site_slices_physical_axis() {
        let t = Tensor::<f64>::new(vec![1, 1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        let p = Peps::new(1, 1, 2, vec![t]).unwrap();
        assert_eq!(p.fixed_site(0, 0, 1).data(), &[0.7]);
    }
}
