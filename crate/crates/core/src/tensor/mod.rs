//! Dense real tensors in row-major layout.
//!
//! Contraction is permute-then-multiply: operands are brought into matrix
//! form with the summed axes as the shared dimension (skipping the copy when
//! the layout already fits, possibly transposed) and a single matrix product
//! produces the result. The caller picks the order in which a network is
//! contracted.

pub(crate) mod linalg;

use smallvec::SmallVec;

use crate::error::{PepsError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Truncation settings for [`Tensor::svd_truncate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvdTruncation<T> {
    /// Largest number of singular values kept.
    pub max_rank: usize,
    /// Singular values below `rel_tol` times the largest are discarded.
    pub rel_tol: T,
}

impl<T: Scalar> SvdTruncation<T> {
    pub fn new(max_rank: usize, rel_tol: T) -> Self {
        SvdTruncation { max_rank, rel_tol }
    }
}

/// Result of a truncated SVD: `u · diag(s) · v` approximates the input.
#[derive(Clone, Debug)]
pub struct TruncatedSvd<T> {
    /// Shape `[row axes..., k]`.
    pub u: Tensor<T>,
    /// Descending, nonnegative.
    pub s: Vec<T>,
    /// Shape `[k, column axes...]`.
    pub v: Tensor<T>,
    /// Fraction of the squared singular values retained, in `[0, 1]`.
    pub kept_weight: T,
    /// Sum of discarded squared singular values.
    pub discarded_weight: T,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&n| n == 0) {
        return Err(PepsError::shape(format!(
            "axis {pos} of shape {shape:?} has length zero"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| PepsError::Capacity(format!("shape {shape:?} overflows usize")))
}

type Axes = SmallVec<[usize; 8]>;

/// Whether a tensor can be used as a dense matrix without copying. For the
/// left operand (`k_first == false`) the natural layout is free axes then
/// summed axes; for the right operand the reverse. Returns the transposition
/// flag for `Scalar::gemm`, or `None` when a permutation is needed.
fn matrix_layout(shape: &[usize], free: &[usize], summed: &[usize], k_first: bool) -> Option<bool> {
    let significant = |axes: &[usize]| -> Axes {
        axes.iter().copied().filter(|&a| shape[a] != 1).collect()
    };
    let (f, k) = (significant(free), significant(summed));
    let is_identity = |first: &[usize], second: &[usize]| {
        first.iter().chain(second).zip(first.iter().chain(second).skip(1)).all(|(a, b)| a < b)
    };
    if k_first {
        if is_identity(&k, &f) {
            Some(false)
        } else if is_identity(&f, &k) {
            Some(true)
        } else {
            None
        }
    } else if is_identity(&f, &k) {
        Some(false)
    } else if is_identity(&k, &f) {
        Some(true)
    } else {
        None
    }
}

/// Row-major data of the permuted tensor. Unit axes are dropped and runs of
/// axes that stay adjacent are merged before the copy loop.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], order: &[usize]) -> Vec<T> {
    let mut src: Axes = smallvec::smallvec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        src[i] = src[i + 1] * shape[i + 1];
    }
    let mut dims: SmallVec<[(usize, usize); 8]> = SmallVec::new();
    for &o in order {
        let n = shape[o];
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(last) if last.1 == src[o] * n => *last = (last.0 * n, src[o]),
            _ => dims.push((n, src[o])),
        }
    }
    if dims.len() <= 1 && dims.first().is_none_or(|d| d.1 == 1) {
        return data.to_vec();
    }
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    // two innermost axes form a block copied per odometer step
    let dims: &[(usize, usize)] = &dims;
    let r = dims.len();
    let (n0, s0) = dims[r - 1];
    let (n1, s1) = if r >= 2 { dims[r - 2] } else { (1, 0) };
    let outer = &dims[..r.saturating_sub(2)];
    let mut idx_store: Axes = smallvec::smallvec![0; outer.len()];
    let idx: &mut [usize] = &mut idx_store;
    let mut base = 0usize;
    loop {
        for i in 0..n1 {
            let b = base + i * s1;
            if s0 == 1 {
                out.extend_from_slice(&data[b..b + n0]);
            } else {
                out.extend((0..n0).map(|j| data[b + j * s0]));
            }
        }
        let mut ax = outer.len();
        loop {
            if ax == 0 {
                debug_assert_eq!(out.len(), total);
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += outer[ax].1;
            if idx[ax] < outer[ax].0 {
                break;
            }
            base -= outer[ax].1 * outer[ax].0;
            idx[ax] = 0;
        }
    }
}


impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(PepsError::shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(PepsError::Numeric("tensor data contains non-finite entries".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction without validation, for internal producers that
    /// guarantee the invariants.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = T::one());
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for x in t.data.iter_mut() {
            *x = f(&idx);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(PepsError::Index(format!(
                "index of rank {} for tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (ax, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            if i >= n {
                return Err(PepsError::Index(format!(
                    "index {i} out of range for axis {ax} of length {n}"
                )));
            }
            off = off * n + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(PepsError::Numeric("non-finite tensor entry".into()));
        }
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(PepsError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes: axis `k` of the result is axis `order[k]` of `self`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let r = self.shape.len();
        let mut seen = vec![false; r];
        if order.len() != r {
            return Err(PepsError::Index(format!(
                "permutation {order:?} has wrong length for rank {r}"
            )));
        }
        for &o in order {
            if o >= r || seen[o] {
                return Err(PepsError::Index(format!(
                    "{order:?} is not a permutation of 0..{r}"
                )));
            }
            seen[o] = true;
        }
        Ok(self.permute_unchecked(order))
    }

    pub(crate) fn permute_unchecked(&self, order: &[usize]) -> Self {
        let shape: Vec<usize> = order.iter().map(|&o| self.shape[o]).collect();
        Tensor {
            shape,
            data: permute_data(&self.data, &self.shape, order),
        }
    }

    /// Sums over paired axes `(axis of self, axis of other)`. The result
    /// carries the free axes of `self` followed by those of `other`, each in
    /// their original order.
    pub fn contract(&self, other: &Tensor<T>, pairs: &[(usize, usize)]) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        let mut used_a = vec![false; ra];
        let mut used_b = vec![false; rb];
        for &(i, j) in pairs {
            if i >= ra || j >= rb {
                return Err(PepsError::Index(format!(
                    "contraction pair ({i}, {j}) out of range for ranks ({ra}, {rb})"
                )));
            }
            if used_a[i] || used_b[j] {
                return Err(PepsError::Index(format!("axis repeated in pairs {pairs:?}")));
            }
            if self.shape[i] != other.shape[j] {
                return Err(PepsError::shape(format!(
                    "contracted axes ({i}, {j}) have lengths {} and {}",
                    self.shape[i], other.shape[j]
                )));
            }
            used_a[i] = true;
            used_b[j] = true;
        }
        let out = self.contract_unchecked(other, pairs);
        if out.data.iter().any(|x| !x.is_finite()) {
            return Err(PepsError::Numeric("contraction overflowed".into()));
        }
        Ok(out)
    }

    pub(crate) fn contract_unchecked(&self, other: &Tensor<T>, pairs: &[(usize, usize)]) -> Self {
        let free_a: Axes = (0..self.rank())
            .filter(|i| !pairs.iter().any(|p| p.0 == *i))
            .collect();
        let free_b: Axes = (0..other.rank())
            .filter(|j| !pairs.iter().any(|p| p.1 == *j))
            .collect();
        let m: usize = free_a.iter().map(|&i| self.shape[i]).product();
        let k: usize = pairs.iter().map(|p| self.shape[p.0]).product();
        let n: usize = free_b.iter().map(|&j| other.shape[j]).product();

        // order the summed index to avoid copying operands where possible
        let plan = |by_b: bool| {
            let mut ord: SmallVec<[(usize, usize); 8]> = pairs.iter().copied().collect();
            if by_b {
                ord.sort_unstable_by_key(|p| p.1);
            } else {
                ord.sort_unstable();
            }
            let ka: Axes = ord.iter().map(|p| p.0).collect();
            let kb: Axes = ord.iter().map(|p| p.1).collect();
            let la = matrix_layout(&self.shape, &free_a, &ka, false);
            let lb = matrix_layout(&other.shape, &free_b, &kb, true);
            let cost = la.map_or(self.len(), |_| 0) + lb.map_or(other.len(), |_| 0);
            (cost, ka, kb, la, lb)
        };
        let first = plan(false);
        let (_, ka, kb, la, lb) = if first.0 == 0 {
            first
        } else {
            let second = plan(true);
            if second.0 < first.0 {
                second
            } else {
                first
            }
        };

        let permuted_a;
        let (a, ta) = match la {
            Some(t) => (&self.data[..], t),
            None => {
                let order: Axes = free_a.iter().chain(&ka).copied().collect();
                permuted_a = permute_data(&self.data, &self.shape, &order);
                (&permuted_a[..], false)
            }
        };
        let permuted_b;
        let (b, tb) = match lb {
            Some(t) => (&other.data[..], t),
            None => {
                let order: Axes = kb.iter().chain(&free_b).copied().collect();
                permuted_b = permute_data(&other.data, &other.shape, &order);
                (&permuted_b[..], false)
            }
        };
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, a, ta, b, tb, &mut data);
        let mut shape: Vec<usize> = free_a.iter().map(|&i| self.shape[i]).collect();
        shape.extend(free_b.iter().map(|&j| other.shape[j]));
        Tensor { shape, data }
    }

    pub fn scale(&self, a: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * a).collect(),
        }
    }

    pub fn scale_mut(&mut self, a: T) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, a: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(PepsError::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    /// Full contraction of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(PepsError::shape(format!(
                "dot of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&x, &y)| x * y).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Divides by the largest magnitude and returns its log, or `None` for an
    /// all-zero tensor (left unchanged).
    pub(crate) fn normalize_max(&mut self) -> Option<T> {
        let m = self.max_abs();
        if m == T::zero() {
            return None;
        }
        let inv = T::one() / m;
        self.scale_mut(inv);
        Some(m.ln())
    }

    /// Truncated SVD across the bipartition `row_axes | remaining axes`.
    /// Column axes keep their original relative order.
    pub fn svd_truncate(
        &self,
        row_axes: &[usize],
        settings: SvdTruncation<T>,
    ) -> Result<TruncatedSvd<T>> {
        let r = self.rank();
        let mut in_rows = vec![false; r];
        for &a in row_axes {
            if a >= r || in_rows[a] {
                return Err(PepsError::Index(format!(
                    "invalid row axes {row_axes:?} for rank {r}"
                )));
            }
            in_rows[a] = true;
        }
        let col_axes: Vec<usize> = (0..r).filter(|&a| !in_rows[a]).collect();
        if row_axes.is_empty() || col_axes.is_empty() {
            return Err(PepsError::Index(
                "svd split must leave both groups nonempty".into(),
            ));
        }
        if settings.max_rank == 0 {
            return Err(PepsError::Index("max_rank must be positive".into()));
        }
        let mut order = row_axes.to_vec();
        order.extend(&col_axes);
        let p = self.permute_unchecked(&order);
        let row_shape: Vec<usize> = row_axes.iter().map(|&a| self.shape[a]).collect();
        let col_shape: Vec<usize> = col_axes.iter().map(|&a| self.shape[a]).collect();
        let m: usize = row_shape.iter().product();
        let n: usize = col_shape.iter().product();
        let t = linalg::truncated_svd(&p.data, m, n, settings.max_rank, settings.rel_tol)?;
        let mut ushape = row_shape;
        ushape.push(t.kept);
        let mut vshape = vec![t.kept];
        vshape.extend(col_shape);
        Ok(TruncatedSvd {
            u: Tensor::from_raw(ushape, t.u),
            s: t.s,
            v: Tensor::from_raw(vshape, t.vt),
            kept_weight: t.kept_weight,
            discarded_weight: t.discarded_weight,
        })
    }
}
