//! Mixtures of independently trained modes, `P(x) = Σ_i (N_i/N) P_i(x)`,
//! with mode-argmax classification and log-ratio diagnostics.
//!
//! A mixture is stored as a text manifest of `key = value` lines naming the
//! mode count and, per mode, its weight, example count, cached `log_z` with
//! standard error, and the model file path relative to the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::error::{PepsError, Result};
use crate::peps::io::{load_peps, save_peps};
use crate::peps::{amplitude, ContractionSettings, GridConfig, Peps};
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{estimate_log_norm, Sampler};
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Mode<T> {
    pub peps: Peps<T>,
    pub weight: T,
    pub count: usize,
    pub log_z: T,
    pub log_z_stderr: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel<T> {
    modes: Vec<Mode<T>>,
}

impl<T: Scalar> MixtureModel<T> {
    pub fn new(modes: Vec<Mode<T>>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| PepsError::Input("a mixture needs at least one mode".into()))?;
        let dims = (first.peps.height(), first.peps.width(), first.peps.phys_dim());
        let mut total = T::zero();
        for (i, m) in modes.iter().enumerate() {
            let d = (m.peps.height(), m.peps.width(), m.peps.phys_dim());
            if d != dims {
                return Err(PepsError::shape(format!(
                    "mode {i} has grid {:?}, mode 0 has {:?}",
                    d, dims
                )));
            }
            if !(m.weight > T::zero()) {
                return Err(PepsError::Input(format!("mode {i} has weight {}", m.weight)));
            }
            total += m.weight;
        }
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(PepsError::Input(format!("mode weights sum to {total}")));
        }
        Ok(MixtureModel { modes })
    }

    /// A single model with known `log_z` as a one-mode mixture.
    pub fn single(peps: Peps<T>, log_z: T, log_z_stderr: T) -> Self {
        MixtureModel {
            modes: vec![Mode {
                peps,
                weight: T::one(),
                count: 0,
                log_z,
                log_z_stderr,
            }],
        }
    }

    pub fn modes(&self) -> &[Mode<T>] {
        &self.modes
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn height(&self) -> usize {
        self.modes[0].peps.height()
    }

    pub fn width(&self) -> usize {
        self.modes[0].peps.width()
    }

    pub fn phys_dim(&self) -> usize {
        self.modes[0].peps.phys_dim()
    }
}

/// `N_i / Σ N`.
pub fn weights_from_counts<T: Scalar>(counts: &[usize]) -> Result<Vec<T>> {
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(PepsError::EmptyMode(i));
    }
    if counts.is_empty() {
        return Err(PepsError::Input("no modes".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|&c| T::from_usize_lossy(c) / T::from_usize_lossy(total))
        .collect())
}

/// `log w_i + 2·log|Ψ_i(x)| − log_z_i` for every mode.
pub fn mode_log_probs<T: Scalar>(
    mm: &MixtureModel<T>,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<Vec<T>> {
    mm.modes
        .iter()
        .map(|m| {
            let a = amplitude(&m.peps, x, s)?;
            Ok(m.weight.ln() + a.log_psi2() - m.log_z)
        })
        .collect()
}

/// `log P(x)`; `−∞` when no mode supports `x`.
pub fn mixture_log_prob<T: Scalar>(
    mm: &MixtureModel<T>,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<T> {
    Ok(log_sum_exp(&mode_log_probs(mm, x, s)?))
}

/// Index of the mode with the largest weighted probability; the lowest index
/// wins ties.
pub fn classify<T: Scalar>(
    mm: &MixtureModel<T>,
    x: &GridConfig,
    s: &ContractionSettings<T>,
) -> Result<usize> {
    let lp = mode_log_probs(mm, x, s)?;
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    if lp[best] == T::neg_infinity() {
        return Err(PepsError::NoSupport);
    }
    Ok(best)
}

/// `log P(x_k) − log Q(x_k)` for samples `x_k ~ P`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRatioSamples<T> {
    pub values: Vec<T>,
    pub configs: Vec<GridConfig>,
}

/// Mean and standard error of the finite entries, with the number of
/// infinite ones (samples outside the support of `Q`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRatioSummary<T> {
    pub mean: T,
    pub std_err: T,
    pub finite: usize,
    pub infinite: usize,
}

impl<T: Scalar> LogRatioSamples<T> {
    pub fn summary(&self) -> LogRatioSummary<T> {
        let finite: Vec<T> = self.values.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len();
        let mean = if n == 0 {
            T::nan()
        } else {
            finite.iter().copied().sum::<T>() / T::from_usize_lossy(n)
        };
        let std_err = if n < 2 {
            T::infinity()
        } else {
            let var = finite.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
                / T::from_usize_lossy(n - 1);
            (var / T::from_usize_lossy(n)).sqrt()
        };
        LogRatioSummary {
            mean,
            std_err,
            finite: n,
            infinite: self.values.len() - n,
        }
    }
}

/// Draws `n` samples from `p` (a mode by weight, then a direct sample of that
/// mode) and returns `log P(x) − log Q(x)` for each. The mean estimates
/// `D_KL(P‖Q)`.
pub fn log_ratio_samples<T: Scalar>(
    p: &MixtureModel<T>,
    q: &MixtureModel<T>,
    n: usize,
    s: &ContractionSettings<T>,
    seed: u64,
) -> Result<LogRatioSamples<T>> {
    if (p.height(), p.width(), p.phys_dim()) != (q.height(), q.width(), q.phys_dim()) {
        return Err(PepsError::shape(format!(
            "P is {}x{} with d = {}, Q is {}x{} with d = {}",
            p.height(),
            p.width(),
            p.phys_dim(),
            q.height(),
            q.width(),
            q.phys_dim()
        )));
    }
    let configs = sample_mixture(p, n, s, seed)?;
    let values = configs
        .par_iter()
        .map(|x| {
            let lp = mixture_log_prob(p, x, s)?;
            let lq = mixture_log_prob(q, x, s)?;
            Ok(if lp == lq { T::zero() } else { lp - lq })
        })
        .collect::<Result<_>>()?;
    Ok(LogRatioSamples { values, configs })
}

/// `n` independent samples: sample `i` picks a mode by weight and then draws
/// from that mode, both from stream `i` of `seed`.
pub fn sample_mixture<T: Scalar>(
    mm: &MixtureModel<T>,
    n: usize,
    s: &ContractionSettings<T>,
    seed: u64,
) -> Result<Vec<GridConfig>> {
    let samplers: Vec<Sampler<'_, T>> = mm
        .modes
        .iter()
        .map(|m| Sampler::new(&m.peps, s))
        .collect::<Result<_>>()?;
    let cumulative: Vec<f64> = mm
        .modes
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m.weight.to_f64_lossy();
            Some(*acc)
        })
        .collect();
    let last = cumulative.len() - 1;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let u = rng.gen::<f64>() * cumulative[last];
            let mode = cumulative.iter().position(|&c| u < c).unwrap_or(last);
            Ok(samplers[mode].sample(&mut rng)?.config)
        })
        .collect()
}

/// Mixture of trained modes weighted by their example counts, with `log_z`
/// of each mode estimated from `norm_samples` samples.
pub fn build_mixture<T: Scalar>(
    datasets: &[Dataset],
    trained: Vec<Peps<T>>,
    norm_samples: usize,
    s: &ContractionSettings<T>,
    seed: u64,
) -> Result<MixtureModel<T>> {
    if datasets.len() != trained.len() {
        return Err(PepsError::Input(format!(
            "{} datasets for {} trained modes",
            datasets.len(),
            trained.len()
        )));
    }
    let counts: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let weights = weights_from_counts::<T>(&counts)?;
    let modes = trained
        .into_iter()
        .zip(weights.into_iter().zip(counts))
        .enumerate()
        .map(|(i, (peps, (weight, count)))| {
            let est = estimate_log_norm(&peps, norm_samples, s, derive_seed(seed, i as u64))?;
            Ok(Mode {
                peps,
                weight,
                count,
                log_z: est.log_z,
                log_z_stderr: est.std_err,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureModel::new(modes)
}

/// Writes the manifest at `path` and every mode as `<stem>-mode<i>.peps`
/// beside it.
pub fn save_mixture<T: Scalar>(mm: &MixtureModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mixture")
        .to_owned();
    let mut text = String::new();
    let _ = writeln!(text, "modes = {}", mm.modes.len());
    for (i, m) in mm.modes.iter().enumerate() {
        let file = format!("{stem}-mode{i}.peps");
        save_peps(&m.peps, dir.join(&file))?;
        let _ = writeln!(text, "mode.{i}.weight = {}", m.weight);
        let _ = writeln!(text, "mode.{i}.count = {}", m.count);
        let _ = writeln!(text, "mode.{i}.log_z = {}", m.log_z);
        let _ = writeln!(text, "mode.{i}.log_z_stderr = {}", m.log_z_stderr);
        let _ = writeln!(text, "mode.{i}.model = {file}");
    }
    std::fs::write(path, text).map_err(|e| PepsError::io(path, e))
}

pub fn load_mixture<T: Scalar>(path: impl AsRef<Path>) -> Result<MixtureModel<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PepsError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut entries = std::collections::HashMap::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            PepsError::Input(format!("{} line {}: expected `key = value`", path.display(), row + 1))
        })?;
        entries.insert(k.trim().to_owned(), (row + 1, v.trim().to_owned()));
    }
    let get = |key: &str| -> Result<&(usize, String)> {
        entries
            .get(key)
            .ok_or_else(|| PepsError::Input(format!("{}: missing `{key}`", path.display())))
    };
    fn parse<V: std::str::FromStr>(path: &Path, (row, v): &(usize, String)) -> Result<V> {
        v.parse().map_err(|_| {
            PepsError::Input(format!("{} line {row}: cannot parse `{v}`", path.display()))
        })
    }
    let n: usize = parse(path, get("modes")?)?;
    let mut modes = Vec::with_capacity(n);
    for i in 0..n {
        let num = |field: &str| -> Result<T> {
            parse::<f64>(path, get(&format!("mode.{i}.{field}"))?).map(T::lit)
        };
        let file: PathBuf = dir.join(&get(&format!("mode.{i}.model"))?.1);
        modes.push(Mode {
            peps: load_peps(&file)?,
            weight: num("weight")?,
            count: parse(path, get(&format!("mode.{i}.count"))?)?,
            log_z: num("log_z")?,
            log_z_stderr: num("log_z_stderr")?,
        });
    }
    MixtureModel::new(modes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peps::{bars_stripes_peps, log_norm_exact, random_peps};
    use crate::tensor::Tensor;

    fn exact_mode(peps: Peps<f64>, weight: f64) -> Mode<f64> {
        let log_z = log_norm_exact(&peps).unwrap();
        Mode {
            peps,
            weight,
            count: 1,
            log_z,
            log_z_stderr: 0.0,
        }
    }

    /// 2×2 product state supported on `x00 = 1, x01 = 0, x10 = 0`.
    fn corner_mode() -> Peps<f64> {
        let t = |v: [f64; 2]| Tensor::new(vec![1, 1, 1, 1, 2], v.to_vec()).unwrap();
        Peps::new(2, 2, 2, vec![t([0.0, 1.0]), t([1.0, 0.0]), t([1.0, 0.0]), t([0.5, 2.0])]).unwrap()
    }

    fn all_2x2() -> Vec<GridConfig> {
        (0..16).map(|i| GridConfig::from_index(2, 2, 2, i)).collect()
    }

    fn exact() -> ContractionSettings<f64> {
        ContractionSettings::exact()
    }

    #[test]
    fn single_mode_is_the_normalized_model() {
        let p = random_peps::<f64>(2, 2, 2, 2, 3);
        let mm = MixtureModel::new(vec![exact_mode(p.clone(), 1.0)]).unwrap();
        let log_z = log_norm_exact(&p).unwrap();
        for x in all_2x2() {
            let direct = amplitude(&p, &x, &exact()).unwrap().log_psi2() - log_z;
            assert!((mixture_log_prob(&mm, &x, &exact()).unwrap() - direct).abs() < 1e-12);
            assert_eq!(classify(&mm, &x, &exact()).unwrap(), 0);
        }
    }

    #[test]
    fn identical_halves_match_either_mode() {
        let p = random_peps::<f64>(2, 2, 2, 2, 4);
        let single = MixtureModel::new(vec![exact_mode(p.clone(), 1.0)]).unwrap();
        let double = MixtureModel::new(vec![exact_mode(p.clone(), 0.5), exact_mode(p, 0.5)]).unwrap();
        for x in all_2x2() {
            let a = mixture_log_prob(&single, &x, &exact()).unwrap();
            let b = mixture_log_prob(&double, &x, &exact()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_modes_match_enumeration() {
        let a = bars_stripes_peps::<f64>(2);
        let b = corner_mode();
        let mm = MixtureModel::new(vec![exact_mode(a.clone(), 0.3), exact_mode(b.clone(), 0.7)]).unwrap();
        let prob = |p: &Peps<f64>, x: &GridConfig| {
            let v = amplitude(p, x, &exact()).unwrap().value();
            v * v
        };
        let (za, zb): (f64, f64) = all_2x2().iter().fold((0.0, 0.0), |(s, t), x| (s + prob(&a, x), t + prob(&b, x)));
        let mut total = 0.0;
        for x in all_2x2() {
            let (pa, pb) = (prob(&a, &x) / za, prob(&b, &x) / zb);
            assert!(pa * pb == 0.0, "supports overlap at {x}");
            let hand = 0.3 * pa + 0.7 * pb;
            let lp = mixture_log_prob(&mm, &x, &exact()).unwrap();
            assert!((lp.exp() - hand).abs() < 1e-12);
            total += lp.exp();
            match classify(&mm, &x, &exact()) {
                Ok(k) => assert_eq!(k, if pa > 0.0 { 0 } else { 1 }),
                Err(e) => {
                    assert!(matches!(e, PepsError::NoSupport));
                    assert_eq!(hand, 0.0);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn weight_breaks_ties() {
        let p = random_peps::<f64>(2, 2, 2, 2, 8);
        let mm = MixtureModel::new(vec![exact_mode(p.clone(), 0.6), exact_mode(p.clone(), 0.4)]).unwrap();
        let rev = MixtureModel::new(vec![exact_mode(p.clone(), 0.4), exact_mode(p, 0.6)]).unwrap();
        for x in all_2x2() {
            assert_eq!(classify(&mm, &x, &exact()).unwrap(), 0);
            assert_eq!(classify(&rev, &x, &exact()).unwrap(), 1);
        }
    }

    #[test]
    fn classification_ignores_global_rescaling() {
        let modes = [random_peps::<f64>(2, 2, 2, 2, 1), random_peps::<f64>(2, 2, 2, 2, 2)];
        let mm = MixtureModel::new(vec![exact_mode(modes[0].clone(), 0.45), exact_mode(modes[1].clone(), 0.55)]).unwrap();
        let scaled: Vec<Mode<f64>> = modes
            .iter()
            .zip([0.45, 0.55])
            .zip([13.0, 0.02])
            .map(|((p, w), f)| {
                let mut q = p.clone();
                q.scale_all(f);
                exact_mode(q, w)
            })
            .collect();
        let mm2 = MixtureModel::new(scaled).unwrap();
        for x in all_2x2() {
            assert_eq!(classify(&mm, &x, &exact()).unwrap(), classify(&mm2, &x, &exact()).unwrap());
        }
    }

    #[test]
    fn self_ratio_is_exactly_zero() {
        let mm = MixtureModel::new(vec![
            exact_mode(random_peps(3, 3, 2, 2, 5), 0.5),
            exact_mode(random_peps(3, 3, 2, 2, 6), 0.5),
        ])
        .unwrap();
        let r = log_ratio_samples(&mm, &mm, 200, &exact(), 1).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(r.summary().mean, 0.0);
    }

    #[test]
    fn ratio_mean_estimates_kl() {
        let p = MixtureModel::new(vec![exact_mode(random_peps(2, 2, 2, 2, 10), 1.0)]).unwrap();
        let q = MixtureModel::new(vec![exact_mode(random_peps(2, 2, 2, 2, 11), 1.0)]).unwrap();
        let kl: f64 = all_2x2()
            .iter()
            .map(|x| {
                let lp = mixture_log_prob(&p, x, &exact()).unwrap();
                let lq = mixture_log_prob(&q, x, &exact()).unwrap();
                lp.exp() * (lp - lq)
            })
            .sum();
        assert!(kl > 0.0);
        let small = log_ratio_samples(&p, &q, 500, &exact(), 2).unwrap().summary();
        let large = log_ratio_samples(&p, &q, 20_000, &exact(), 2).unwrap().summary();
        assert!(large.std_err < small.std_err);
        assert!((large.mean - kl).abs() < 4.0 * large.std_err, "{large:?} vs {kl}");
    }

    #[test]
    fn missing_support_gives_infinite_ratios() {
        let p = MixtureModel::new(vec![
            exact_mode(corner_mode(), 0.5),
            exact_mode(bars_stripes_peps(2), 0.5),
        ])
        .unwrap();
        let q = MixtureModel::new(vec![exact_mode(bars_stripes_peps(2), 1.0)]).unwrap();
        let r = log_ratio_samples(&p, &q, 400, &exact(), 9).unwrap();
        let s = r.summary();
        assert!(s.infinite > 100 && s.finite > 100, "{s:?}");
        // on the shared support log P − log Q = log ½
        assert!((s.mean - 0.5f64.ln()).abs() < 1e-12);
        assert!(r.values.iter().all(|&v| v == f64::INFINITY || (v - 0.5f64.ln()).abs() < 1e-12));
    }

    fn dataset_of(n: usize) -> Dataset {
        Dataset::new(vec![GridConfig::zeros(2, 2); n], None, 2, 2, 2).unwrap()
    }

    #[test]
    fn weights_follow_counts() {
        assert_eq!(weights_from_counts::<f64>(&[3000, 1000]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(weights_from_counts::<f64>(&[7]).unwrap(), vec![1.0]);
        let w = weights_from_counts::<f64>(&[29, 1]).unwrap();
        assert_eq!(w, vec![29.0 / 30.0, 1.0 / 30.0]);
        assert!(matches!(weights_from_counts::<f64>(&[4, 0]), Err(PepsError::EmptyMode(1))));

        let mm = build_mixture(
            &[dataset_of(3), dataset_of(1)],
            vec![bars_stripes_peps::<f64>(2), corner_mode()],
            100,
            &exact(),
            0,
        )
        .unwrap();
        assert_eq!(mm.modes()[0].weight, 0.75);
        assert!((mm.modes()[0].log_z - log_norm_exact(&mm.modes()[0].peps).unwrap()).abs() < 1e-10);
        assert!(matches!(
            build_mixture(&[dataset_of(0)], vec![corner_mode()], 10, &exact(), 0),
            Err(PepsError::EmptyMode(0))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("peps-mix-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mm = MixtureModel::new(vec![
            exact_mode(random_peps(2, 3, 2, 2, 1), 0.1),
            exact_mode(random_peps(2, 3, 2, 3, 2), 0.9),
        ])
        .unwrap();
        let path = dir.join("mix.txt");
        save_mixture(&mm, &path).unwrap();
        assert!(dir.join("mix-mode1.peps").exists());
        let back: MixtureModel<f64> = load_mixture(&path).unwrap();
        assert_eq!(back, mm);
        std::fs::write(&path, "modes = 1\nmode.0.weight = 1\n").unwrap();
        assert!(matches!(load_mixture::<f64>(&path), Err(PepsError::Input(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_weights_rejected() {
        let p = random_peps::<f64>(2, 2, 2, 2, 0);
        assert!(MixtureModel::new(vec![exact_mode(p.clone(), 0.5)]).is_err());
        assert!(MixtureModel::<f64>::new(vec![]).is_err());
        let other = random_peps::<f64>(2, 3, 2, 2, 0);
        assert!(matches!(
            MixtureModel::new(vec![exact_mode(p, 0.5), exact_mode(other, 0.5)]),
            Err(PepsError::Shape(_))
        ));
    }
}
