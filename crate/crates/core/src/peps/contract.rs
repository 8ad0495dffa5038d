use rayon::prelude::*;

use super::boundary::{absorb_single_down, double_layer_boundaries, Mps};
use super::{ContractionSettings, GridConfig, Peps};
use crate::error::{PepsError, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Largest configuration space `log_norm_exact` will enumerate.
pub const MAX_ENUMERATION: u64 = 1 << 20;

/// A real amplitude stored as sign and log-magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplitude<T> {
    /// `1`, `-1`, or `0` for a vanishing amplitude.
    pub sign: i8,
    /// `log|Ψ|`, `-inf` when `sign == 0`.
    pub log_mag: T,
}

impl<T: Scalar> Amplitude<T> {
    pub fn zero() -> Self {
        Amplitude {
            sign: 0,
            log_mag: T::neg_infinity(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    /// `log|Ψ|² = 2·log|Ψ|`.
    pub fn log_psi2(&self) -> T {
        if self.sign == 0 {
            T::neg_infinity()
        } else {
            T::lit(2.0) * self.log_mag
        }
    }

    /// Plain value; may overflow for large grids.
    pub fn value(&self) -> T {
        match self.sign {
            0 => T::zero(),
            s => T::from_i8(s).expect("sign") * self.log_mag.exp(),
        }
    }
}

pub(crate) fn top_boundary_step<T: Scalar>(
    top: &Mps<T>,
    p: &Peps<T>,
    row: usize,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<Mps<T>> {
    let mut next = absorb_single_down(top, &p.fixed_row(row, x));
    next.finish(s)?;
    Ok(next)
}

/// `Ψ(x)`: fixes every physical leg to `x` and contracts row by row from the
/// top, truncating the boundary MPS to `s.chi` after each row.
pub fn amplitude<T: Scalar>(
    p: &Peps<T>,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<Amplitude<T>> {
    p.check_config(x)?;
    let mut top = Mps::trivial(p.width());
    for r in 0..p.height() {
        top = top_boundary_step(&top, p, r, x, s)?;
        if top.zero {
            return Ok(Amplitude::zero());
        }
    }
    let (sign, log_mag) = top.contract_closed();
    Ok(Amplitude { sign, log_mag })
}

/// `log Σ_x |Ψ(x)|²` by exhaustive enumeration with exact contraction.
pub fn log_norm_exact<T: Scalar>(p: &Peps<T>) -> Result<T> {
    let n = p.num_sites() as u32;
    let total = (p.phys_dim() as u64)
        .checked_pow(n)
        .filter(|&t| t <= MAX_ENUMERATION)
        .ok_or_else(|| {
            PepsError::Capacity(format!(
                "{}^{} configurations exceed the enumeration limit of {}",
                p.phys_dim(),
                n,
                MAX_ENUMERATION
            ))
        })?;
    let s = ContractionSettings::exact();
    let logs: Vec<T> = (0..total)
        .into_par_iter()
        .map(|i| {
            let x = GridConfig::from_index(p.height(), p.width(), p.phys_dim(), i);
            amplitude(p, &x, &s).map(|a| a.log_psi2())
        })
        .collect::<Result<_>>()?;
    Ok(log_sum_exp(&logs))
}

/// `log Z` from the bra-ket double-layer network, contracted bottom-up with
/// boundary MPS truncation at `s.chi`.
pub fn double_layer_log_norm<T: Scalar>(p: &Peps<T>, s: &ContractionSettings<T>) -> Result<T> {
    let bounds = double_layer_boundaries(p, s)?;
    let (sign, log) = bounds[0].contract_closed();
    match sign {
        1 => Ok(log),
        0 => Ok(T::neg_infinity()),
        _ => Err(PepsError::Numeric(
            "truncated double-layer contraction produced a negative norm".into(),
        )),
    }
}
