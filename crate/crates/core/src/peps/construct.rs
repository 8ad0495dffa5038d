use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Peps, DOWN, LEFT, RIGHT, UP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Classical Ising model on an open `height×width` grid at inverse
/// temperature `beta` (ferromagnetic coupling 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsingParams<T> {
    pub beta: T,
    pub height: usize,
    pub width: usize,
}

/// Leg lengths of site `(r, c)`: `bulk` on interior bonds, 1 on the boundary.
fn leg_dims(h: usize, w: usize, r: usize, c: usize, bulk: usize) -> [usize; 4] {
    [
        if r == 0 { 1 } else { bulk },
        if c == 0 { 1 } else { bulk },
        if r + 1 == h { 1 } else { bulk },
        if c + 1 == w { 1 } else { bulk },
    ]
}

/// Builds a site tensor from a bulk weight function over `D^4 · d` indices.
/// Boundary legs are projected to length one by summing over the bulk index.
fn project_site<T: Scalar>(
    dims: [usize; 4],
    bulk: usize,
    d: usize,
    weight: impl Fn([usize; 4], usize) -> T,
) -> Tensor<T> {
    let shape = [dims[0], dims[1], dims[2], dims[3], d];
    let mut t = Tensor::zeros(&shape);
    let n = bulk.pow(4);
    for code in 0..n {
        let legs = [
            code / (bulk * bulk * bulk),
            (code / (bulk * bulk)) % bulk,
            (code / bulk) % bulk,
            code % bulk,
        ];
        // skip bulk values that do not exist on a length-1 boundary leg
        let mut idx = [0usize; 5];
        for k in 0..4 {
            idx[k] = if dims[k] == 1 { 0 } else { legs[k] };
        }
        for s in 0..d {
            let v = weight(legs, s);
            if v != T::zero() {
                idx[4] = s;
                let cur = t.get(&idx).expect("index");
                t.set(&idx, cur + v).expect("finite");
            }
        }
    }
    t
}

/// PEPS whose squared amplitude is the Ising Boltzmann weight
/// `exp(β Σ_<ij> s_i s_j)` with spins `s = 2x − 1`.
///
/// Every site is a copy tensor (all legs equal to the physical index). For
/// `β ≥ 0` the symmetric square root `B` of `[[e^{β/2}, e^{−β/2}],
/// [e^{−β/2}, e^{β/2}]]` is absorbed on each interior leg so every bond
/// carries `B·B`. For `β < 0` that root is not real, so the whole matrix sits
/// on the right and down legs instead.
pub fn ising_peps<T: Scalar>(params: IsingParams<T>) -> Peps<T> {
    let IsingParams {
        beta,
        height,
        width,
    } = params;
    let half = beta / T::lit(2.0);
    let (same, diff) = (half.exp(), (-half).exp());
    let edge = [[same, diff], [diff, same]];
    let root = if beta >= T::zero() {
        let l1 = (same + diff).sqrt();
        let l2 = (same - diff).max(T::zero()).sqrt();
        let a = (l1 + l2) / T::lit(2.0);
        let b = (l1 - l2) / T::lit(2.0);
        Some([[a, b], [b, a]])
    } else {
        None
    };
    let mut sites = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let dims = leg_dims(height, width, r, c, 2);
            let site = project_site(dims, 2, 2, |legs, s| {
                let mut v = T::one();
                for axis in [UP, LEFT, DOWN, RIGHT] {
                    if dims[axis] == 1 {
                        // boundary: copy tensor summed over its leg
                        if legs[axis] != s {
                            return T::zero();
                        }
                        continue;
                    }
                    let f = match root {
                        Some(b) => b[s][legs[axis]],
                        None if axis == RIGHT || axis == DOWN => edge[s][legs[axis]],
                        None => {
                            if legs[axis] == s {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    v *= f;
                }
                v
            });
            sites.push(site);
        }
    }
    Peps::new(height, width, 2, sites).expect("consistent construction")
}

/// Bond dimension 2 PEPS supported exactly on the bars-and-stripes patterns
/// of an `side×side` grid.
///
/// Nonzero bulk elements (all equal to 1): every virtual leg 0 with pixel 0;
/// vertical legs 1 and horizontal legs 0 with pixel 1 (the site belongs to a
/// filled column); horizontal legs 1 and vertical legs 0 with pixel 1 (a
/// filled row). A filled column and a filled row cannot cross, so only
/// unions of whole columns or of whole rows survive. The all-ones grid is
/// reachable both ways and gets amplitude 2; every other pattern gets 1.
pub fn bars_stripes_peps<T: Scalar>(side: usize) -> Peps<T> {
    assert!(side >= 1, "side length must be positive");
    let mut sites = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let dims = leg_dims(side, side, r, c, 2);
            let site = project_site(dims, 2, 2, |[u, l, d, rt], s| {
                let one = match s {
                    0 => u == 0 && l == 0 && d == 0 && rt == 0,
                    _ => {
                        (u == 1 && d == 1 && l == 0 && rt == 0)
                            || (u == 0 && d == 0 && l == 1 && rt == 1)
                    }
                };
                if one {
                    T::one()
                } else {
                    T::zero()
                }
            });
            sites.push(site);
        }
    }
    Peps::new(side, side, 2, sites).expect("consistent construction")
}

/// PEPS with every entry drawn independently from `U[0, 1)`, sites filled in
/// raster order from a ChaCha8 stream seeded with `seed`.
pub fn random_peps<T: Scalar>(
    height: usize,
    width: usize,
    phys_dim: usize,
    bond_dim: usize,
    seed: u64,
) -> Peps<T> {
    assert!(bond_dim >= 1, "bond dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let dims = leg_dims(height, width, r, c, bond_dim);
            let shape = [dims[0], dims[1], dims[2], dims[3], phys_dim];
            sites.push(Tensor::from_fn(&shape, |_| T::lit(rng.gen::<f64>())));
        }
    }
    Peps::new(height, width, phys_dim, sites).expect("consistent construction")
}
