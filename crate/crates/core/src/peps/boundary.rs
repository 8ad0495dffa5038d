//! Boundary matrix product states: the compressed result of contracting a
//! block of PEPS rows, with one open vertical leg per column.

use super::{ContractionSettings, Peps};
use crate::error::{PepsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{linalg, Tensor};

/// Boundary MPS with tensors of shape `[left, phys, right]`. The represented
/// object is `exp(log_scale)` times the contraction of `tensors`.
#[derive(Clone, Debug)]
pub(crate) struct Mps<T> {
    pub tensors: Vec<Tensor<T>>,
    pub log_scale: T,
    /// Set once any tensor became identically zero.
    pub zero: bool,
}

impl<T: Scalar> Mps<T> {
    /// Boundary beyond the grid edge: all legs of length one.
    pub fn trivial(width: usize) -> Self {
        Mps {
            tensors: (0..width).map(|_| Tensor::ones(&[1, 1, 1])).collect(),
            log_scale: T::zero(),
            zero: false,
        }
    }

    pub fn max_bond(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape()[2])
            .max()
            .unwrap_or(1)
    }

    fn normalize(&mut self) {
        for t in &mut self.tensors {
            match t.normalize_max() {
                Some(l) => self.log_scale += l,
                None => self.zero = true,
            }
        }
    }

    /// Compresses to bond dimension `chi` when some bond exceeds it, then
    /// rescales tensors if requested.
    pub fn finish(&mut self, s: &ContractionSettings<T>) -> Result<()> {
        if !s.is_exact() && self.max_bond() > s.chi {
            self.compress(s.chi, s.rel_tol)?;
        }
        if s.log_scale {
            self.normalize();
        } else if self.tensors.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
            return Err(PepsError::Numeric(
                "boundary contraction overflowed without log scaling".into(),
            ));
        }
        Ok(())
    }

    /// Right-canonicalizes with LQ factorizations, then sweeps left to right
    /// truncating each bond by SVD.
    fn compress(&mut self, chi: usize, rel_tol: T) -> Result<()> {
        let w = self.tensors.len();
        for c in (1..w).rev() {
            let sh = self.tensors[c].shape().to_vec();
            let (m, n) = (sh[0], sh[1] * sh[2]);
            let (l, q) = linalg::lq_thin(self.tensors[c].data(), m, n);
            let k = m.min(n);
            self.tensors[c] = Tensor::from_raw(vec![k, sh[1], sh[2]], q);
            let prev = &self.tensors[c - 1];
            let ps = prev.shape().to_vec();
            let mut out = vec![T::zero(); ps[0] * ps[1] * k];
            T::matmul(ps[0] * ps[1], m, k, prev.data(), &l, &mut out);
            self.tensors[c - 1] = Tensor::from_raw(vec![ps[0], ps[1], k], out);
            // keep magnitudes bounded during the sweep
            if let Some(lg) = self.tensors[c - 1].normalize_max() {
                self.log_scale += lg;
            }
        }
        for c in 0..w.saturating_sub(1) {
            let sh = self.tensors[c].shape().to_vec();
            let (m, n) = (sh[0] * sh[1], sh[2]);
            let t = linalg::truncated_svd(self.tensors[c].data(), m, n, chi, rel_tol)?;
            let k = t.kept;
            self.tensors[c] = Tensor::from_raw(vec![sh[0], sh[1], k], t.u);
            let mut sv = t.vt;
            for (i, &s) in t.s.iter().enumerate() {
                sv[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
            }
            let next = &self.tensors[c + 1];
            let ns = next.shape().to_vec();
            let mut out = vec![T::zero(); k * ns[1] * ns[2]];
            T::matmul(k, n, ns[1] * ns[2], &sv, next.data(), &mut out);
            self.tensors[c + 1] = Tensor::from_raw(vec![k, ns[1], ns[2]], out);
            if let Some(lg) = self.tensors[c + 1].normalize_max() {
                self.log_scale += lg;
            }
        }
        Ok(())
    }

    /// Contracts an MPS whose physical legs all have length one to a scalar,
    /// returned as `(sign, log|value|)`; zero gives `(0, -inf)`.
    pub fn contract_closed(&self) -> (i8, T) {
        if self.zero {
            return (0, T::neg_infinity());
        }
        let mut v = vec![T::one()];
        let mut log = self.log_scale;
        for t in &self.tensors {
            let sh = t.shape();
            debug_assert_eq!(sh[1], 1);
            let mut out = vec![T::zero(); sh[2]];
            T::matmul(1, sh[0], sh[2], &v, t.data(), &mut out);
            let m = out.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
            if m == T::zero() {
                return (0, T::neg_infinity());
            }
            out.iter_mut().for_each(|x| *x /= m);
            log += m.ln();
            v = out;
        }
        let val = v[0];
        if val == T::zero() {
            (0, T::neg_infinity())
        } else {
            (if val > T::zero() { 1 } else { -1 }, log + val.abs().ln())
        }
    }
}

/// Absorbs a row of rank-4 `(up, left, down, right)` tensors into a boundary
/// whose open legs connect to the row's up legs. The new open legs are the
/// row's down legs.
pub(crate) fn absorb_single_down<T: Scalar>(mps: &Mps<T>, row: &[Tensor<T>]) -> Mps<T> {
    let tensors = mps
        .tensors
        .iter()
        .zip(row)
        .map(|(m, f)| {
            // [a,u,b] x [u,l,d,r] -> [a,b,l,d,r] -> [a,l,d,b,r]
            let x = m.contract_unchecked(f, &[(1, 0)]).permute_unchecked(&[0, 2, 3, 1, 4]);
            let s = x.shape().to_vec();
            x.reshape(&[s[0] * s[1], s[2], s[3] * s[4]]).expect("reshape")
        })
        .collect();
    Mps {
        tensors,
        log_scale: mps.log_scale,
        zero: mps.zero,
    }
}

/// Absorbs a row of rank-4 tensors into a boundary whose open legs connect to
/// the row's down legs. The new open legs are the row's up legs.
pub(crate) fn absorb_single_up<T: Scalar>(mps: &Mps<T>, row: &[Tensor<T>]) -> Mps<T> {
    let tensors = mps
        .tensors
        .iter()
        .zip(row)
        .map(|(m, f)| {
            // [a,d,b] x [u,l,d,r] -> [a,b,u,l,r] -> [a,l,u,b,r]
            let x = m.contract_unchecked(f, &[(1, 2)]).permute_unchecked(&[0, 3, 2, 1, 4]);
            let s = x.shape().to_vec();
            x.reshape(&[s[0] * s[1], s[2], s[3] * s[4]]).expect("reshape")
        })
        .collect();
    Mps {
        tensors,
        log_scale: mps.log_scale,
        zero: mps.zero,
    }
}

/// Absorbs row `row` of the bra-ket double layer (physical legs traced) into a
/// boundary whose open legs are the combined `(ket down, bra down)` pairs of
/// that row. The new open legs are combined `(ket up, bra up)` pairs.
pub(crate) fn absorb_double_up<T: Scalar>(mps: &Mps<T>, p: &Peps<T>, row: usize) -> Mps<T> {
    let tensors = mps
        .tensors
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let a = p.site(row, c);
            let dn = a.shape()[2];
            let ms = m.shape();
            let m4 = Tensor::from_raw(vec![ms[0], dn, dn, ms[2]], m.data().to_vec());
            // [a,d,d',b] x A[u,l,d,r,s] -> [a,d',b,u,l,r,s]
            let x = m4.contract_unchecked(a, &[(1, 2)]);
            // x A'[u',l',d',r',s] over d' and s -> [a,b,u,l,r,u',l',r']
            let x = x.contract_unchecked(a, &[(1, 2), (6, 4)]);
            // -> [a,l,l',u,u',b,r,r']
            let x = x.permute_unchecked(&[0, 3, 6, 2, 5, 1, 4, 7]);
            let s = x.shape().to_vec();
            x.reshape(&[s[0] * s[1] * s[2], s[3] * s[4], s[5] * s[6] * s[7]])
                .expect("reshape")
        })
        .collect();
    Mps {
        tensors,
        log_scale: mps.log_scale,
        zero: mps.zero,
    }
}

/// Double-layer boundaries from below: entry `i` holds the contraction of rows
/// `i..H` with open legs on the up side of row `i`; entry `H` is trivial.
pub(crate) fn double_layer_boundaries<T: Scalar>(
    p: &Peps<T>,
    s: &ContractionSettings<T>,
) -> Result<Vec<Mps<T>>> {
    let h = p.height();
    let mut out = vec![Mps::trivial(p.width())];
    for r in (0..h).rev() {
        let mut next = absorb_double_up(out.last().expect("nonempty"), p, r);
        next.finish(s)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}
