//! Dense row-major matrix factorizations: Householder QR/LQ and a one-sided
//! Jacobi SVD. Matrices are passed as `(data, rows, cols)`.

use crate::error::{PepsError, Result};
use crate::scalar::Scalar;

pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Thin QR: `a = q · r` with `q` (m×k) orthonormal columns and `r` (k×n)
/// upper trapezoidal, `k = min(m, n)`.
pub(crate) fn qr_thin<T: Scalar>(a: &[T], m: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let k = m.min(n);
    // Work on the transpose so each column is contiguous.
    let mut cols = transpose(a, m, n); // n×m: row j = column j of a
    let mut vs: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut betas: Vec<T> = Vec::with_capacity(k);
    for j in 0..k {
        let (norm2, x0) = {
            let col = &cols[j * m + j..j * m + m];
            (col.iter().map(|&x| x * x).sum::<T>(), col[0])
        };
        let norm = norm2.sqrt();
        let mut v: Vec<T> = cols[j * m + j..j * m + m].to_vec();
        let beta;
        if norm == T::zero() {
            beta = T::zero();
        } else {
            let alpha = if x0 >= T::zero() { -norm } else { norm };
            v[0] = x0 - alpha;
            let vnorm2 = v.iter().map(|&x| x * x).sum::<T>();
            beta = if vnorm2 == T::zero() {
                T::zero()
            } else {
                T::lit(2.0) / vnorm2
            };
        }
        if beta != T::zero() {
            for c in j..n {
                let col = &mut cols[c * m + j..c * m + m];
                let dot: T = col.iter().zip(&v).map(|(&x, &y)| x * y).sum();
                let f = beta * dot;
                for (x, &y) in col.iter_mut().zip(&v) {
                    *x -= f * y;
                }
            }
        }
        vs.push(v);
        betas.push(beta);
    }
    let mut r = vec![T::zero(); k * n];
    for i in 0..k {
        for c in i..n {
            r[i * n + c] = cols[c * m + i];
        }
    }
    // Accumulate q by applying the reflectors to the first k unit vectors.
    let mut qt = vec![T::zero(); k * m]; // row i = column i of q
    for i in 0..k {
        qt[i * m + i] = T::one();
    }
    for j in (0..k).rev() {
        let v = &vs[j];
        let beta = betas[j];
        if beta == T::zero() {
            continue;
        }
        for i in 0..k {
            let col = &mut qt[i * m + j..i * m + m];
            let dot: T = col.iter().zip(v).map(|(&x, &y)| x * y).sum();
            let f = beta * dot;
            for (x, &y) in col.iter_mut().zip(v) {
                *x -= f * y;
            }
        }
    }
    (transpose(&qt, k, m), r)
}

/// Thin LQ: `a = l · q` with `l` (m×k) lower trapezoidal and `q` (k×n)
/// orthonormal rows.
pub(crate) fn lq_thin<T: Scalar>(a: &[T], m: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let at = transpose(a, m, n);
    let (q, r) = qr_thin(&at, n, m); // q: n×k, r: k×m
    let k = m.min(n);
    (transpose(&r, k, m), transpose(&q, n, k))
}

/// Thin singular value decomposition `a = u · diag(s) · vt`.
pub(crate) struct Svd<T> {
    pub u: Vec<T>,
    pub s: Vec<T>,
    pub vt: Vec<T>,
    pub rank: usize,
}

const MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD of a square matrix, returning `(w, v)` with
/// `a · v = w` and the columns of `w` mutually orthogonal.
fn jacobi_square<T: Scalar>(a: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)> {
    // Column-contiguous storage.
    let mut w = transpose(a, n, n);
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let eps = T::epsilon();
    let tol = eps * T::from_usize_lossy(n.max(1));
    // columns below this squared norm are noise relative to the whole matrix
    let negligible = {
        let fro2: T = a.iter().map(|&x| x * x).sum();
        fro2 * eps * eps
    };
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..n {
                    let x = w[p * n + i];
                    let y = w[q * n + i];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == T::zero()
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = w[p * n + i];
                    let y = w[q * n + i];
                    w[p * n + i] = c * x - s * y;
                    w[q * n + i] = s * x + c * y;
                }
                for i in 0..n {
                    let x = v[p * n + i];
                    let y = v[q * n + i];
                    v[p * n + i] = c * x - s * y;
                    v[q * n + i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            return Ok((w, v));
        }
    }
    let norms: Vec<f64> = (0..n)
        .map(|p| {
            w[p * n..(p + 1) * n]
                .iter()
                .map(|&x| x * x)
                .sum::<T>()
                .sqrt()
                .to_f64_lossy()
        })
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    Err(PepsError::Numeric(format!(
        "SVD did not converge after {MAX_SWEEPS} sweeps on a {n}x{n} factor \
         (largest column norm {max:.3e}, smallest {min:.3e})"
    )))
}

/// Extends the first `filled` orthonormal columns of an `n×k` column-major
/// set to a full orthonormal set by Gram-Schmidt against unit vectors.
fn complete_columns<T: Scalar>(cols: &mut [T], n: usize, k: usize, filled: &[bool]) {
    let mut candidate = 0usize;
    for j in 0..k {
        if filled[j] {
            continue;
        }
        loop {
            let mut e = vec![T::zero(); n];
            e[candidate % n] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for i in 0..k {
                    if i == j || (!filled[i] && i > j) {
                        continue;
                    }
                    let col = &cols[i * n..(i + 1) * n];
                    let dot: T = col.iter().zip(&e).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in e.iter_mut().zip(col) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = e.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::lit(1e-3) {
                for (dst, &x) in cols[j * n..(j + 1) * n].iter_mut().zip(&e) {
                    *dst = x / norm;
                }
                break;
            }
            if candidate > 2 * n + k {
                break;
            }
        }
    }
}

/// Full thin SVD with singular values sorted in descending order. `rank` is
/// the number of values above a numerical-zero floor relative to the largest.
pub(crate) fn svd_thin<T: Scalar>(a: &[T], m: usize, n: usize) -> Result<Svd<T>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(PepsError::Numeric(format!(
            "SVD input {m}x{n} contains non-finite entries"
        )));
    }
    if m < n {
        let t = svd_thin(&transpose(a, m, n), n, m)?;
        let k = m;
        // a^T = u s vt  =>  a = vt^T s u^T
        return Ok(Svd {
            u: transpose(&t.vt, k, m),
            s: t.s,
            vt: transpose(&t.u, n, k),
            rank: t.rank,
        });
    }
    let k = n;
    let (q, r) = qr_thin(a, m, n); // q m×n, r n×n
    let (w, v) = jacobi_square(&r, n)?;
    let mut sigma: Vec<T> = (0..k)
        .map(|p| w[p * k..(p + 1) * k].iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap_or(std::cmp::Ordering::Equal));
    let smax = sigma[order[0]];
    let floor = smax * T::epsilon() * T::from_usize_lossy(16 * m.max(n));
    let mut ur = vec![T::zero(); k * k]; // column-major: column j contiguous
    let mut vcols = vec![T::zero(); k * k];
    let mut filled = vec![false; k];
    let mut rank = 0;
    let sorted: Vec<T> = order.iter().map(|&p| sigma[p]).collect();
    for (j, &p) in order.iter().enumerate() {
        let s = sigma[p];
        vcols[j * k..(j + 1) * k].copy_from_slice(&v[p * k..(p + 1) * k]);
        if s > floor && s > T::zero() {
            for i in 0..k {
                ur[j * k + i] = w[p * k + i] / s;
            }
            filled[j] = true;
            rank += 1;
        }
    }
    complete_columns(&mut ur, k, k, &filled);
    sigma = sorted;
    for (j, f) in filled.iter().enumerate() {
        if !f {
            sigma[j] = sigma[j].max(T::zero());
        }
    }
    // u = q · u_r
    let ur_rm = transpose(&ur, k, k);
    let mut u = vec![T::zero(); m * k];
    T::matmul(m, k, k, &q, &ur_rm, &mut u);
    Ok(Svd {
        u,
        s: sigma,
        vt: vcols, // row j of vt = column j of v, already contiguous
        rank,
    })
}

/// Singular value truncation of a matrix. Keeps at most `max_rank` values
/// (0 means unbounded) and drops values below `rel_tol` times the largest,
/// always keeping at least one.
pub(crate) struct Truncated<T> {
    pub u: Vec<T>,
    pub s: Vec<T>,
    pub vt: Vec<T>,
    pub kept: usize,
    pub kept_weight: T,
    pub discarded_weight: T,
}

pub(crate) fn truncated_svd<T: Scalar>(
    a: &[T],
    m: usize,
    n: usize,
    max_rank: usize,
    rel_tol: T,
) -> Result<Truncated<T>> {
    let full = svd_thin(a, m, n)?;
    let k = m.min(n);
    let smax = full.s[0];
    let mut kept = full
        .s
        .iter()
        .take(full.rank)
        .take_while(|&&s| s > rel_tol * smax)
        .count()
        .max(1);
    if max_rank > 0 {
        kept = kept.min(max_rank);
    }
    let total: T = full.s.iter().map(|&s| s * s).sum();
    let kept_sq: T = full.s[..kept].iter().map(|&s| s * s).sum();
    let (kept_weight, discarded_weight) = if total > T::zero() {
        ((kept_sq / total).min(T::one()), (total - kept_sq).max(T::zero()))
    } else {
        (T::one(), T::zero())
    };
    let mut u = Vec::with_capacity(m * kept);
    for i in 0..m {
        u.extend_from_slice(&full.u[i * k..i * k + kept]);
    }
    let vt = full.vt[..kept * n].to_vec();
    Ok(Truncated {
        u,
        s: full.s[..kept].to_vec(),
        vt,
        kept,
        kept_weight,
        discarded_weight,
    })
}
