//! Single-layer environments `E_j = ∂Ψ(x)/∂A_j` for every site at once.
//!
//! Bottom boundaries are built first (one per row), then a top-down sweep
//! provides the upper boundary of each row. Inside a row, left and right
//! partial contractions of the three-row strip give every site's environment,
//! so the whole grid costs O(H·W) contractions.

use super::boundary::{absorb_single_up, Mps};
use super::contract::{top_boundary_step, Amplitude};
use super::{ContractionSettings, GridConfig, Peps};
use crate::error::{PepsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environments of one configuration. Site tensors are stored rank-4
/// `(up, left, down, right)` for the physical index selected by `x`, in a
/// rescaled form: the true environment is `exp(log_scale[j])` times it.
#[derive(Clone, Debug)]
pub struct Environments<T> {
    config: GridConfig,
    phys_dim: usize,
    sites: Vec<Tensor<T>>,
    log_scales: Vec<T>,
    /// `Ψ(x)` as obtained from the contraction strip of each row.
    row_amplitudes: Vec<Amplitude<T>>,
    width: usize,
}

impl<T: Scalar> Environments<T> {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// `Ψ(x)` as seen by the strip of `row`; all rows agree when the
    /// contraction is exact.
    pub fn row_amplitude(&self, row: usize) -> Amplitude<T> {
        self.row_amplitudes[row]
    }

    pub fn amplitude(&self) -> Amplitude<T> {
        *self.row_amplitudes.last().expect("at least one row")
    }

    /// Rank-5 `∂Ψ/∂A_j` with zeros outside the physical slot of `x_j`.
    pub fn full(&self, site: usize) -> Tensor<T> {
        let scale = self.log_scales[site].exp();
        self.embed(site, &self.sites[site], scale)
    }

    /// `∂ log|Ψ| / ∂A_j = E_j / Ψ(x)` as a rank-4 tensor in the physical slot
    /// of `x_j`, using the amplitude of the site's row.
    pub fn log_derivative(&self, site: usize) -> Result<Tensor<T>> {
        let row = site / self.width;
        let amp = self.row_amplitudes[row];
        if amp.is_zero() {
            return Err(PepsError::Numeric(format!(
                "zero amplitude: log-derivative undefined at site {site}"
            )));
        }
        let factor = T::from_i8(amp.sign).expect("sign") * (self.log_scales[site] - amp.log_mag).exp();
        Ok(self.sites[site].scale(factor))
    }

    pub fn physical_index(&self, site: usize) -> usize {
        self.config.values()[site] as usize
    }

    fn embed(&self, site: usize, t: &Tensor<T>, factor: T) -> Tensor<T> {
        let d = self.phys_dim;
        let s = self.physical_index(site);
        let mut shape = t.shape().to_vec();
        shape.push(d);
        let mut data = vec![T::zero(); t.len() * d];
        for (i, &v) in t.data().iter().enumerate() {
            data[i * d + s] = v * factor;
        }
        Tensor::from_raw(shape, data)
    }
}

/// Computes `∂Ψ(x)/∂A_j` for every site.
pub fn environments<T: Scalar>(
    p: &Peps<T>,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<Environments<T>> {
    p.check_config(x)?;
    let (h, w) = (p.height(), p.width());
    let rows: Vec<Vec<Tensor<T>>> = (0..h).map(|r| p.fixed_row(r, x)).collect();

    // bottoms[r]: rows r+1..h contracted, open legs = down legs of row r
    let mut bottoms: Vec<Mps<T>> = vec![Mps::trivial(w)];
    for r in (1..h).rev() {
        let mut next = absorb_single_up(bottoms.last().expect("nonempty"), &rows[r]);
        next.finish(s)?;
        bottoms.push(next);
    }
    bottoms.reverse();

    let mut sites = vec![Tensor::zeros(&[1]); h * w];
    let mut log_scales = vec![T::zero(); h * w];
    let mut row_amplitudes = Vec::with_capacity(h);
    let mut top = Mps::trivial(w);
    for r in 0..h {
        let bottom = &bottoms[r];
        let base = top.log_scale + bottom.log_scale;
        let dead = top.zero || bottom.zero;

        // right environments [a, r, b]
        let mut rights: Vec<(Tensor<T>, T, bool)> = vec![(Tensor::ones(&[1, 1, 1]), T::zero(), false)];
        for c in (1..w).rev() {
            let (rt, rlog, rzero) = rights.last().expect("nonempty");
            // B[b,d,β] x R[α,r,β] -> [b,d,α,r]
            let x1 = bottom.tensors[c].contract_unchecked(rt, &[(2, 2)]);
            // x F[u,l,d,r] -> [b,α,u,l]
            let x2 = x1.contract_unchecked(&rows[r][c], &[(1, 2), (3, 3)]);
            // x T[a,u,α] -> [b,l,a]
            let x3 = x2.contract_unchecked(&top.tensors[c], &[(1, 2), (2, 1)]);
            let mut next = x3.permute_unchecked(&[2, 1, 0]);
            let mut log = *rlog;
            let mut zero = *rzero;
            normalize_into(&mut next, &mut log, &mut zero);
            rights.push((next, log, zero));
        }
        rights.reverse(); // rights[c] = columns c+1..w

        let mut left = Tensor::ones(&[1, 1, 1]);
        let mut left_log = T::zero();
        let mut left_zero = false;
        for c in 0..w {
            let (rt, rlog, rzero) = &rights[c];
            // L[a,l,b] x T[a,u,α] -> [l,b,u,α]
            let y = left.contract_unchecked(&top.tensors[c], &[(0, 0)]);
            // x B[b,d,β] -> [l,u,α,d,β]
            let e = y.contract_unchecked(&bottom.tensors[c], &[(1, 0)]);
            // x R[α,r,β] -> [l,u,d,r]
            let e = e.contract_unchecked(rt, &[(2, 0), (4, 2)]);
            let mut e = e.permute_unchecked(&[1, 0, 2, 3]);
            let mut elog = base + left_log + *rlog;
            let mut ezero = dead || left_zero || *rzero;
            normalize_into(&mut e, &mut elog, &mut ezero);
            if ezero {
                e = Tensor::zeros(e.shape());
                elog = T::zero();
            }
            sites[r * w + c] = e;
            log_scales[r * w + c] = elog;

            // advance left: [l,b,u,α] x F[u,l,d,r] -> [b,α,d,r]
            let z = y.contract_unchecked(&rows[r][c], &[(0, 1), (2, 0)]);
            // x B[b,d,β] -> [α,r,β]
            let mut next = z.contract_unchecked(&bottom.tensors[c], &[(0, 0), (2, 1)]);
            normalize_into(&mut next, &mut left_log, &mut left_zero);
            left = next;
        }
        let amp = if dead || left_zero {
            Amplitude::zero()
        } else {
            let v = left.data()[0];
            if v == T::zero() {
                Amplitude::zero()
            } else {
                Amplitude {
                    sign: if v > T::zero() { 1 } else { -1 },
                    log_mag: base + left_log + v.abs().ln(),
                }
            }
        };
        row_amplitudes.push(amp);

        if r + 1 < h {
            top = top_boundary_step(&top, p, r, x, s)?;
        }
    }
    Ok(Environments {
        config: x.clone(),
        phys_dim: p.phys_dim(),
        sites,
        log_scales,
        row_amplitudes,
        width: w,
    })
}

fn normalize_into<T: Scalar>(t: &mut Tensor<T>, log: &mut T, zero: &mut bool) {
    match t.normalize_max() {
        Some(l) => *log += l,
        None => *zero = true,
    }
}
