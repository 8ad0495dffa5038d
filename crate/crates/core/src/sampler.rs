//! Direct sampling from `|Ψ(x)|²/Z` and importance-weighted norm estimation.
//!
//! Sites are visited in raster order. The conditional of site `(r, c)` is the
//! double-layer contraction in which rows above `r` and sites left of `c` are
//! fixed to the values already drawn (in both layers) and every other physical
//! pair is traced. The lower part comes from double-layer boundaries cached
//! once per model; the upper part is the single-layer boundary of the sampled
//! rows taken twice.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{PepsError, Result};
use crate::peps::{absorb_single_down, amplitude, double_layer_boundaries, ContractionSettings, GridConfig, Mps, Peps, DOWN};
use crate::rng::stream_rng;
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Conditionals whose total falls below this are treated as degenerate.
pub const DEGENERATE_FLOOR: f64 = 1e-300;

/// One configuration drawn from the proposal together with its importance
/// weight `|Ψ(x)|² / q(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample<T> {
    pub config: GridConfig,
    /// Sum of the conditional log-probabilities used to draw `config`.
    pub log_q: T,
    /// `2·log|Ψ(config)|` under the sampler's contraction settings.
    pub log_psi2: T,
    pub log_weight: T,
}

impl<T: Scalar> WeightedSample<T> {
    /// `exp(log_weight)`; overflows for unnormalized models with large norm.
    pub fn weight(&self) -> T {
        self.log_weight.exp()
    }
}

/// Monte-Carlo estimate of `log Z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormEstimate<T> {
    pub log_z: T,
    /// Standard error of the mean weight relative to the mean, i.e. the
    /// first-order error of `log_z`.
    pub std_err: T,
}

/// Sampler bound to one model: holds the cached lower boundaries.
pub struct Sampler<'a, T> {
    peps: &'a Peps<T>,
    settings: ContractionSettings<T>,
    /// `lower[r][c]`: rows `r+1..H` as `[b, d, d', β]` against the down legs of row `r`.
    lower: Vec<Vec<Tensor<T>>>,
}

enum Choice<'a, R> {
    Draw(&'a mut R),
    Forced(&'a GridConfig),
}

impl<'a, T: Scalar> Sampler<'a, T> {
    pub fn new(peps: &'a Peps<T>, settings: &ContractionSettings<T>) -> Result<Self> {
        let bounds = double_layer_boundaries(peps, settings)?;
        let lower = (0..peps.height())
            .map(|r| {
                bounds[r + 1]
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(c, t)| {
                        let dn = peps.site(r, c).shape()[DOWN];
                        let sh = t.shape();
                        Tensor::from_raw(vec![sh[0], dn, dn, sh[2]], t.data().to_vec())
                    })
                    .collect()
            })
            .collect();
        Ok(Sampler {
            peps,
            settings: *settings,
            lower,
        })
    }

    pub fn peps(&self) -> &Peps<T> {
        self.peps
    }

    /// Draws one configuration.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<WeightedSample<T>> {
        self.walk(Choice::Draw(rng))
    }

    /// `log q(x)` of the proposal for a given configuration, together with
    /// the amplitude evaluation. `log_q` is `-inf` when some conditional of
    /// `x` vanishes.
    pub fn log_proposal(&self, x: &GridConfig) -> Result<WeightedSample<T>> {
        self.walk::<rand_chacha::ChaCha8Rng>(Choice::Forced(x))
    }

    /// `n` samples, sample `i` drawn from stream `i` of `seed`; the result is
    /// ordered by index and independent of thread scheduling.
    pub fn sample_many(&self, n: usize, seed: u64) -> Result<Vec<WeightedSample<T>>> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.sample(&mut stream_rng(seed, i)))
            .collect()
    }

    fn walk<R: Rng>(&self, mut choice: Choice<'_, R>) -> Result<WeightedSample<T>> {
        let p = self.peps;
        let (h, w, d) = (p.height(), p.width(), p.phys_dim());
        if let Choice::Forced(x) = &choice {
            if x.height() != h || x.width() != w {
                return Err(PepsError::shape(format!(
                    "configuration is {}x{}, model is {h}x{w}",
                    x.height(),
                    x.width()
                )));
            }
        }
        let mut config = GridConfig::zeros(h, w);
        let mut log_q = T::zero();
        let mut top = Mps::trivial(w);
        let mut probs = vec![T::zero(); d];
        for r in 0..h {
            let rights = self.right_environments(&top, r);
            let mut left = Tensor::ones(&[1, 1, 1, 1, 1]);
            for c in 0..w {
                let t = &top.tensors[c];
                // L[a,l,a',l',b] x T[a,u,α] -> [l,a',l',b,u,α]
                let y = left.contract_unchecked(t, &[(0, 0)]);
                let mut candidates = Vec::with_capacity(d);
                for (s, prob) in probs.iter_mut().enumerate() {
                    let f = p.fixed_site(r, c, s);
                    // x F[u,l,d,r] -> [a',l',b,α,d,r]
                    // x T'[a',u',α'] -> [l',b,α,d,r,u',α']
                    // x F'[u',l',d',r'] -> [b,α,d,r,α',d',r']
                    // x Bot[b,d,d',β] -> [α,r,α',r',β]
                    let z = y
                        .contract_unchecked(&f, &[(0, 1), (4, 0)])
                        .contract_unchecked(t, &[(0, 0)])
                        .contract_unchecked(&f, &[(0, 1), (5, 0)])
                        .contract_unchecked(&self.lower[r][c], &[(0, 0), (2, 1), (5, 2)]);
                    let v = z.dot(&rights[c + 1]).expect("matching environments");
                    *prob = if v > T::zero() && v.is_finite() { v } else { T::zero() };
                    candidates.push(z);
                }
                let total: T = probs.iter().copied().sum();
                if total.to_f64_lossy() < DEGENERATE_FLOOR {
                    return Err(PepsError::Degenerate { row: r, col: c });
                }
                let s = match &mut choice {
                    Choice::Draw(rng) => pick(&probs, total, rng.gen::<f64>()),
                    Choice::Forced(x) => x.get(r, c),
                };
                if s >= d {
                    return Err(PepsError::Index(format!(
                        "value {s} at ({r}, {c}) exceeds physical dimension {d}"
                    )));
                }
                if probs[s] == T::zero() {
                    if let Choice::Forced(x) = &choice {
                        let log_psi2 = amplitude(p, x, &self.settings)?.log_psi2();
                        return Ok(WeightedSample {
                            config: (*x).clone(),
                            log_q: T::neg_infinity(),
                            log_psi2,
                            log_weight: T::infinity(),
                        });
                    }
                }
                log_q += (probs[s] / total).ln();
                config.set(r, c, s as u8);
                left = candidates.swap_remove(s);
                left.normalize_max();
            }
            let mut next = absorb_single_down(&top, &p.fixed_row(r, &config));
            next.finish(&self.settings)?;
            top = next;
        }
        let log_psi2 = match top.contract_closed() {
            (0, _) => T::neg_infinity(),
            (_, lg) => T::lit(2.0) * lg,
        };
        Ok(WeightedSample {
            config,
            log_q,
            log_psi2,
            log_weight: log_psi2 - log_q,
        })
    }

    /// `rights[c]`: columns `c..W` of row `r` with physical pairs traced, as
    /// `[α, l, α', l', β]` (top bond and left leg of site `c` for ket and
    /// bra, then the lower bond).
    fn right_environments(&self, top: &Mps<T>, r: usize) -> Vec<Tensor<T>> {
        let p = self.peps;
        let w = p.width();
        let mut rights = vec![Tensor::ones(&[1, 1, 1, 1, 1])];
        for c in (0..w).rev() {
            let a = p.site(r, c);
            let t = &top.tensors[c];
            let prev = rights.last().expect("nonempty");
            // R[α,r,α',r',β] x T[a,u,α] -> [r,α',r',β,a,u]
            // x A[u,l,d,r,s] -> [α',r',β,a,l,d,s]
            // x T'[a',u',α'] -> [r',β,a,l,d,s,a',u']
            // x A'[u',l',d',r',s] -> [β,a,l,d,a',l',d']
            // x Bot[b,d,d',β] -> [a,l,a',l',b]
            let mut next = prev
                .contract_unchecked(t, &[(0, 2)])
                .contract_unchecked(a, &[(0, 3), (5, 0)])
                .contract_unchecked(t, &[(0, 2)])
                .contract_unchecked(a, &[(0, 3), (5, 4), (7, 0)])
                .contract_unchecked(&self.lower[r][c], &[(0, 3), (3, 1), (6, 2)]);
            next.normalize_max();
            rights.push(next);
        }
        rights.reverse();
        rights
    }
}

fn pick<T: Scalar>(probs: &[T], total: T, u: f64) -> usize {
    let target = u * total.to_f64_lossy();
    let mut acc = 0.0;
    let mut last = 0;
    for (s, &q) in probs.iter().enumerate() {
        if q > T::zero() {
            acc += q.to_f64_lossy();
            last = s;
            if target < acc {
                return s;
            }
        }
    }
    last
}

/// Draws a single sample. Builds the boundary cache each call; use
/// [`Sampler`] to draw many.
pub fn direct_sample<T: Scalar, R: Rng>(
    p: &Peps<T>,
    s: &ContractionSettings<T>,
    rng: &mut R,
) -> Result<WeightedSample<T>> {
    Sampler::new(p, s)?.sample(rng)
}

/// `log` of the mean importance weight and its propagated standard error.
pub fn norm_from_samples<T: Scalar>(samples: &[WeightedSample<T>]) -> NormEstimate<T> {
    let n = samples.len();
    let logs: Vec<T> = samples.iter().map(|w| w.log_weight).collect();
    let lse = log_sum_exp(&logs);
    let log_z = lse - T::from_usize_lossy(n).ln();
    if n < 2 || !log_z.is_finite() {
        return NormEstimate {
            log_z,
            std_err: T::infinity(),
        };
    }
    // weights relative to their mean
    let rel: Vec<T> = logs.iter().map(|&l| (l - log_z).exp()).collect();
    let var = rel.iter().map(|&x| (x - T::one()) * (x - T::one())).sum::<T>()
        / T::from_usize_lossy(n - 1);
    NormEstimate {
        log_z,
        std_err: (var / T::from_usize_lossy(n)).sqrt(),
    }
}

/// Importance-sampling estimate of `log Z` from `n_samples` direct samples.
///
/// The weights use amplitudes contracted under `s`, so the estimate is
/// unbiased for `Σ_x |Ψ_χ(x)|²`; this is the exact norm whenever `χ` does not
/// bind the single-layer contraction, whatever it does to the proposal.
pub fn estimate_log_norm<T: Scalar>(
    p: &Peps<T>,
    n_samples: usize,
    s: &ContractionSettings<T>,
    seed: u64,
) -> Result<NormEstimate<T>> {
    if n_samples < 2 {
        return Err(PepsError::Input(format!(
            "norm estimation needs at least 2 samples, got {n_samples}"
        )));
    }
    let samples = Sampler::new(p, s)?.sample_many(n_samples, seed)?;
    Ok(norm_from_samples(&samples))
}
