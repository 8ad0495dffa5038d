//! Maximum-likelihood training of one mode: NLL, the positive/negative phase
//! gradient, Adam, and the training loop with best-validation checkpointing.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{PepsError, Result};
use crate::peps::{amplitude, environments, ContractionSettings, GridConfig, Peps};
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{estimate_log_norm, NormEstimate, Sampler, WeightedSample};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Tensor;

const INIT_TAG: u64 = 0x696e_6974;
const EVAL_TAG: u64 = 0x6576_616c;
/// Configurations per work item in parallel gradient accumulation; partial
/// sums are added in a fixed order so results do not depend on threading.
const CHUNK: usize = 8;

/// When to move the negative phase from the initial to the late batch size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchCriterion<T> {
    /// Number of evaluations compared.
    pub window: usize,
    /// Relative train NLL improvement over the window below which the
    /// objective counts as converged.
    pub threshold: T,
    /// Iteration at which the switch happens regardless.
    pub max_iter: usize,
}

impl<T: Scalar> Default for SwitchCriterion<T> {
    fn default() -> Self {
        SwitchCriterion {
            window: 50,
            threshold: T::lit(1e-3),
            max_iter: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Data examples per gradient step, drawn with replacement.
    pub batch_pos: usize,
    pub batch_neg_initial: usize,
    pub batch_neg_late: usize,
    pub switch: SwitchCriterion<T>,
    pub max_iters: usize,
    /// Iterations between report rows; the last iteration is always reported.
    pub eval_interval: usize,
    /// Samples for the norm estimate of each report row.
    pub norm_samples: usize,
    /// Samples for the initial normalization.
    pub init_samples: usize,
    /// Evaluate NLLs on at most this many leading examples; 0 means all.
    pub eval_limit: usize,
    pub settings: ContractionSettings<T>,
    pub seed: u64,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(settings: ContractionSettings<T>, seed: u64) -> Self {
        TrainConfig {
            learning_rate: T::lit(0.001),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            batch_pos: 200,
            batch_neg_initial: 200,
            batch_neg_late: 1000,
            switch: SwitchCriterion::default(),
            max_iters: 2000,
            eval_interval: 10,
            norm_samples: 1000,
            init_samples: 1000,
            eval_limit: 0,
            settings,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PepsError::Input(msg));
        if !(self.learning_rate > T::zero()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= T::zero() && b < T::one()) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > T::zero()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        for (name, n) in [
            ("batch_pos", self.batch_pos),
            ("batch_neg_initial", self.batch_neg_initial),
            ("batch_neg_late", self.batch_neg_late),
            ("eval_interval", self.eval_interval),
            ("switch window", self.switch.window),
        ] {
            if n == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, n) in [("norm_samples", self.norm_samples), ("init_samples", self.init_samples)] {
            if n < 2 {
                return bad(format!("{name} must be at least 2, got {n}"));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig::new(ContractionSettings::default_for(2), 0)
    }
}

/// First and second moments of Adam, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(p: &Peps<T>) -> Self {
        let zeros: Vec<Tensor<T>> = p.sites().iter().map(|s| Tensor::zeros(s.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every site tensor.
pub fn adam_step<T: Scalar>(
    p: &mut Peps<T>,
    grad: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig<T>,
) -> Result<()> {
    if grad.len() != p.num_sites() || state.m.len() != p.num_sites() {
        return Err(PepsError::shape(format!(
            "gradient has {} sites, model {}",
            grad.len(),
            p.num_sites()
        )));
    }
    for (j, g) in grad.iter().enumerate() {
        if g.shape() != p.sites()[j].shape() || state.m[j].shape() != g.shape() {
            return Err(PepsError::shape(format!(
                "gradient of site {j} has shape {:?}, model {:?}",
                g.shape(),
                p.sites()[j].shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (j, g) in grad.iter().enumerate() {
        let m = state.m[j].data_mut();
        let v = state.v[j].data_mut();
        let theta = p.site_data_mut(j);
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            theta[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `2·log|Ψ(x)|` for every configuration, in order.
pub fn log_psi2_values<T: Scalar>(
    p: &Peps<T>,
    data: &[GridConfig],
    s: &ContractionSettings<T>,
) -> Result<Vec<T>> {
    data.par_iter()
        .map(|x| amplitude(p, x, s).map(|a| a.log_psi2()))
        .collect()
}

/// Mean negative log-likelihood in nats, `−mean_x [2·log|Ψ(x)| − log_z]`.
pub fn nll<T: Scalar>(
    p: &Peps<T>,
    data: &[GridConfig],
    log_z: T,
    s: &ContractionSettings<T>,
) -> Result<T> {
    if data.is_empty() {
        return Err(PepsError::Input("NLL of an empty dataset".into()));
    }
    let logs = log_psi2_values(p, data, s)?;
    if let Some(index) = logs.iter().position(|l| *l == T::neg_infinity()) {
        return Err(PepsError::InfiniteNll { index });
    }
    Ok(log_z - logs.iter().copied().sum::<T>() / T::from_usize_lossy(logs.len()))
}

/// `Σ_i coef_i · ∂log|Ψ(x_i)|/∂A` as full rank-5 tensors.
fn weighted_log_derivatives<T: Scalar>(
    p: &Peps<T>,
    items: &[(&GridConfig, T, usize)],
    s: &ContractionSettings<T>,
    zero_amplitude: impl Fn(usize) -> PepsError + Sync,
) -> Result<Vec<Tensor<T>>> {
    let d = p.phys_dim();
    let zeros = || -> Vec<Tensor<T>> { p.sites().iter().map(|t| Tensor::zeros(t.shape())).collect() };
    let partials: Vec<Vec<Tensor<T>>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zeros();
            for &(x, coef, index) in chunk {
                let env = environments(p, x, s)?;
                for (j, g) in acc.iter_mut().enumerate() {
                    let ld = env.log_derivative(j).map_err(|_| zero_amplitude(index))?;
                    let slot = x.values()[j] as usize;
                    let g = g.data_mut();
                    for (i, &v) in ld.data().iter().enumerate() {
                        g[i * d + slot] += coef * v;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = zeros();
    for part in partials {
        for (t, q) in total.iter_mut().zip(&part) {
            t.data_mut().iter_mut().zip(q.data()).for_each(|(a, &b)| *a += b);
        }
    }
    Ok(total)
}

/// Gradient of the mean NLL with respect to every site tensor:
/// `−2·mean_data E_j/Ψ + 2·Σ_i w_i E_j(x_i)/Ψ(x_i)` with self-normalized
/// importance weights `w_i` of the model samples.
pub fn gradient<T: Scalar>(
    p: &Peps<T>,
    data_batch: &[&GridConfig],
    model_samples: &[WeightedSample<T>],
    s: &ContractionSettings<T>,
) -> Result<Vec<Tensor<T>>> {
    if data_batch.is_empty() || model_samples.is_empty() {
        return Err(PepsError::Input(
            "gradient needs nonempty data and model batches".into(),
        ));
    }
    let pos_coef = -T::lit(2.0) / T::from_usize_lossy(data_batch.len());
    let pos: Vec<(&GridConfig, T, usize)> = data_batch
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, pos_coef, i))
        .collect();
    let mut g = weighted_log_derivatives(p, &pos, s, |index| PepsError::InfiniteGradient { index })?;

    let logs: Vec<T> = model_samples.iter().map(|w| w.log_weight).collect();
    let lse = log_sum_exp(&logs);
    if !lse.is_finite() {
        return Err(PepsError::Numeric(
            "model samples carry no finite importance weight".into(),
        ));
    }
    let neg: Vec<(&GridConfig, T, usize)> = model_samples
        .iter()
        .enumerate()
        .filter_map(|(i, w)| {
            let wi = (w.log_weight - lse).exp();
            (wi > T::zero()).then(|| (&w.config, T::lit(2.0) * wi, i))
        })
        .collect();
    let neg_g = weighted_log_derivatives(p, &neg, s, |index| {
        PepsError::Numeric(format!("model sample {index} has zero amplitude"))
    })?;
    for (a, b) in g.iter_mut().zip(&neg_g) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
    }
    Ok(g)
}

/// Rescales every site so that the estimated norm becomes one.
pub fn normalize_init<T: Scalar>(
    p: &Peps<T>,
    n_samples: usize,
    s: &ContractionSettings<T>,
    seed: u64,
) -> Result<(Peps<T>, NormEstimate<T>)> {
    let est = estimate_log_norm(p, n_samples, s, seed)?;
    if !est.log_z.is_finite() {
        return Err(PepsError::Numeric(format!(
            "cannot normalize a model with estimated log norm {}",
            est.log_z
        )));
    }
    let mut out = p.clone();
    let sites = T::from_usize_lossy(p.num_sites());
    out.scale_all((-est.log_z / (T::lit(2.0) * sites)).exp());
    Ok((out, est))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow<T> {
    pub iter: usize,
    pub train_nll: T,
    pub val_nll: T,
    pub log_z: T,
    pub log_z_stderr: T,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport<T> {
    pub rows: Vec<ReportRow<T>>,
}

pub const REPORT_HEADER: &str = "iter,train_nll,val_nll,log_z,log_z_stderr,seconds";

impl<T: Scalar> TrainReport<T> {
    /// CSV text with header. With `wall_time == false` the `seconds` column
    /// is written as 0 so reruns are byte-identical.
    pub fn to_csv(&self, wall_time: bool) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let secs = if wall_time { r.seconds } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.train_nll, r.val_nll, r.log_z, r.log_z_stderr, secs
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == REPORT_HEADER => {}
            _ => {
                return Err(PepsError::Input(format!(
                    "report line 1: expected header `{REPORT_HEADER}`"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || PepsError::Input(format!("report line {}: malformed row `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map(T::lit).map_err(|_| bad());
            rows.push(ReportRow {
                iter: f[0].parse().map_err(|_| bad())?,
                train_nll: num(f[1])?,
                val_nll: num(f[2])?,
                log_z: num(f[3])?,
                log_z_stderr: num(f[4])?,
                seconds: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainReport { rows })
    }
}

/// Result of a training run. `aborted` carries the error that stopped the
/// loop early; `model` is then the best checkpoint reached before it.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest recorded validation NLL, or the normalized
    /// initial model when nothing was recorded.
    pub model: Peps<T>,
    pub report: TrainReport<T>,
    pub init_norm: NormEstimate<T>,
    pub aborted: Option<PepsError>,
}

/// Trains one mode. See [`train_mode_with`].
pub fn train_mode<T: Scalar>(
    init: &Peps<T>,
    train: &[GridConfig],
    val: &[GridConfig],
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    train_mode_with(init, train, val, cfg, |_, _| ControlFlow::Continue(()))
}

fn check_data<T: Scalar>(p: &Peps<T>, data: &[GridConfig], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(PepsError::Input(format!("{what} set is empty")));
    }
    for (i, x) in data.iter().enumerate() {
        if x.height() != p.height() || x.width() != p.width() {
            return Err(PepsError::shape(format!(
                "{what} example {i} is {}x{}, model is {}x{}",
                x.height(),
                x.width(),
                p.height(),
                p.width()
            )));
        }
        if x.max_value() >= p.phys_dim() {
            return Err(PepsError::shape(format!(
                "{what} example {i} has value {} beyond physical dimension {}",
                x.max_value(),
                p.phys_dim()
            )));
        }
    }
    Ok(())
}

/// Trains one mode from `init`: normalizes it, then runs Adam on the
/// two-phase gradient. Every `eval_interval` iterations a report row is
/// recorded and handed to `observer`, which may stop training early.
pub fn train_mode_with<T: Scalar>(
    init: &Peps<T>,
    train: &[GridConfig],
    val: &[GridConfig],
    cfg: &TrainConfig<T>,
    mut observer: impl FnMut(&ReportRow<T>, &Peps<T>) -> ControlFlow<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_data(init, train, "training")?;
    check_data(init, val, "validation")?;
    let s = &cfg.settings;
    let (mut model, init_norm) =
        normalize_init(init, cfg.init_samples, s, derive_seed(cfg.seed, INIT_TAG))?;
    let mut outcome = TrainOutcome {
        model: model.clone(),
        report: TrainReport::default(),
        init_norm,
        aborted: None,
    };
    let limit = |d: &'_ [GridConfig]| -> usize {
        if cfg.eval_limit == 0 {
            d.len()
        } else {
            cfg.eval_limit.min(d.len())
        }
    };
    let (train_eval, val_eval) = (&train[..limit(train)], &val[..limit(val)]);

    let mut adam = AdamState::new(&model);
    let mut neg_batch = cfg.batch_neg_initial;
    let mut switched = false;
    let mut history: Vec<T> = Vec::new();
    let mut best_val = T::infinity();
    let start = Instant::now();

    for it in 1..=cfg.max_iters {
        let iseed = derive_seed(cfg.seed, it as u64);
        if !switched && it > cfg.switch.max_iter {
            neg_batch = cfg.batch_neg_late;
            switched = true;
        }
        let mut step = || -> Result<()> {
            let mut rng = stream_rng(iseed, u64::MAX);
            let batch: Vec<&GridConfig> = (0..cfg.batch_pos)
                .map(|_| &train[rng.gen_range(0..train.len())])
                .collect();
            let samples = Sampler::new(&model, s)?.sample_many(neg_batch, iseed)?;
            let g = gradient(&model, &batch, &samples, s)?;
            adam_step(&mut model, &g, &mut adam, cfg)
        };
        if let Err(e) = step() {
            outcome.aborted = Some(e);
            return Ok(outcome);
        }
        if it % cfg.eval_interval != 0 && it != cfg.max_iters {
            continue;
        }
        let eval = || -> Result<ReportRow<T>> {
            let est = estimate_log_norm(&model, cfg.norm_samples, s, derive_seed(iseed, EVAL_TAG))?;
            let train_nll = nll(&model, train_eval, est.log_z, s)?;
            let val_nll = nll(&model, val_eval, est.log_z, s)?;
            if !train_nll.is_finite() || !val_nll.is_finite() {
                return Err(PepsError::Numeric(format!(
                    "non-finite NLL at iteration {it} (train {train_nll}, validation {val_nll})"
                )));
            }
            Ok(ReportRow {
                iter: it,
                train_nll,
                val_nll,
                log_z: est.log_z,
                log_z_stderr: est.std_err,
                seconds: start.elapsed().as_secs_f64(),
            })
        };
        let row = match eval() {
            Ok(r) => r,
            Err(e) => {
                outcome.aborted = Some(e);
                return Ok(outcome);
            }
        };
        outcome.report.rows.push(row);
        if row.val_nll < best_val {
            best_val = row.val_nll;
            outcome.model = model.clone();
        }
        history.push(row.train_nll);
        if !switched && history.len() > cfg.switch.window {
            let old = history[history.len() - 1 - cfg.switch.window];
            if (old - row.train_nll) / old.abs() < cfg.switch.threshold {
                neg_batch = cfg.batch_neg_late;
                switched = true;
            }
        }
        if observer(&row, &model).is_break() {
            break;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peps::{bars_stripes_peps, log_norm_exact, random_peps};

    fn all_configs(h: usize, w: usize) -> Vec<GridConfig> {
        (0..1u64 << (h * w)).map(|i| GridConfig::from_index(h, w, 2, i)).collect()
    }

    /// Model samples carrying the exact Born probabilities as weights.
    fn exact_negative_phase(p: &Peps<f64>) -> Vec<WeightedSample<f64>> {
        let s = ContractionSettings::exact();
        let log_z = log_norm_exact(p).unwrap();
        all_configs(p.height(), p.width())
            .into_iter()
            .map(|x| {
                let l = amplitude(p, &x, &s).unwrap().log_psi2();
                WeightedSample {
                    config: x,
                    log_q: 0.0,
                    log_psi2: l,
                    log_weight: l - log_z,
                }
            })
            .filter(|w| w.log_weight.is_finite())
            .collect()
    }

    #[test]
    fn bars_and_stripes_reference_values() {
        let p = bars_stripes_peps::<f64>(4);
        let data = crate::datasets::gen_bars_stripes(4).configs;
        let log_z = log_norm_exact(&p).unwrap();
        assert!((log_z - 33f64.ln()).abs() < 1e-12);
        let v = nll(&p, &data, log_z, &ContractionSettings::exact()).unwrap();
        assert!((v - 3.4503).abs() < 1e-4, "{v}");
        let uniform = 30f64.ln();
        assert!((uniform - 3.4012).abs() < 1e-4);
    }

    #[test]
    fn self_normalized_single_point() {
        let p = random_peps::<f64>(2, 3, 2, 2, 1);
        let x = GridConfig::from_index(2, 3, 2, 13);
        let s = ContractionSettings::exact();
        let l = amplitude(&p, &x, &s).unwrap().log_psi2();
        assert!(nll(&p, &[x], l, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_data_is_reported() {
        let p = bars_stripes_peps::<f64>(2);
        let data = vec![
            GridConfig::new(2, 2, vec![1, 1, 0, 0]).unwrap(),
            GridConfig::new(2, 2, vec![1, 0, 0, 0]).unwrap(),
        ];
        let s = ContractionSettings::exact();
        assert!(matches!(nll(&p, &data, 0.0, &s), Err(PepsError::InfiniteNll { index: 1 })));
        let refs: Vec<&GridConfig> = data.iter().collect();
        let neg = exact_negative_phase(&p);
        assert!(matches!(
            gradient(&p, &refs, &neg, &s),
            Err(PepsError::InfiniteGradient { index: 1 })
        ));
    }

    #[test]
    fn nll_invariant_under_global_scale() {
        let p = random_peps::<f64>(3, 3, 2, 2, 2);
        let data: Vec<GridConfig> = (0..20).map(|i| GridConfig::from_index(3, 3, 2, i * 25)).collect();
        let s = ContractionSettings::exact();
        let a = nll(&p, &data, log_norm_exact(&p).unwrap(), &s).unwrap();
        let mut q = p.clone();
        q.scale_all(1.7);
        q.scale_site(1, 1, 0.2);
        let b = nll(&q, &data, log_norm_exact(&q).unwrap(), &s).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradient_vanishes_when_data_match_the_model() {
        // product state with P(1) = 3/4 per site; the 16-example multiset
        // below has exactly the Born frequencies on a 1x2 grid
        let site = || Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0, 3f64.sqrt()]).unwrap();
        let p = Peps::new(1, 2, 2, vec![site(), site()]).unwrap();
        let mut data = Vec::new();
        for (idx, reps) in [(0u64, 1), (1, 3), (2, 3), (3, 9)] {
            data.extend(std::iter::repeat_n(GridConfig::from_index(1, 2, 2, idx), reps));
        }
        let refs: Vec<&GridConfig> = data.iter().collect();
        let s = ContractionSettings::exact();
        let g = gradient(&p, &refs, &exact_negative_phase(&p), &s).unwrap();
        for t in &g {
            assert!(t.max_abs() < 1e-12, "{:?}", t.data());
        }
        // the positive phase alone is far from zero
        let pos_only = gradient(&p, &refs[..1], &exact_negative_phase(&p), &s).unwrap();
        assert!(pos_only[0].max_abs() > 0.1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_peps::<f64>(2, 3, 2, 2, 12);
        let s = ContractionSettings::exact();
        let data: Vec<GridConfig> = [3u64, 17, 40, 63, 17].iter().map(|&i| GridConfig::from_index(2, 3, 2, i)).collect();
        let refs: Vec<&GridConfig> = data.iter().collect();
        let g = gradient(&p, &refs, &exact_negative_phase(&p), &s).unwrap();
        let exact_nll = |q: &Peps<f64>| nll(q, &data, log_norm_exact(q).unwrap(), &s).unwrap();
        let h = 1e-6;
        for j in 0..p.num_sites() {
            for k in 0..p.sites()[j].len() {
                let mut plus = p.clone();
                plus.site_data_mut(j)[k] += h;
                let mut minus = p.clone();
                minus.site_data_mut(j)[k] -= h;
                let fd = (exact_nll(&plus) - exact_nll(&minus)) / (2.0 * h);
                let an = g[j].data()[k];
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "site {j} entry {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = random_peps::<f64>(1, 2, 2, 2, 0);
        let before = p.clone();
        let g: Vec<Tensor<f64>> = p
            .sites()
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| if i.iter().sum::<usize>() % 2 == 0 { 3.0 } else { -0.5 }))
            .collect();
        let cfg = TrainConfig::<f64>::default();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(st.t, 1);
        for j in 0..2 {
            for ((a, b), gi) in p.sites()[j].data().iter().zip(before.sites()[j].data()).zip(g[j].data()) {
                assert!(((a - b) + 0.001 * gi.signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let t = Tensor::new(vec![1, 1, 1, 1, 1], vec![0.5]).unwrap();
        let mut p = Peps::new(1, 1, 1, vec![t]).unwrap();
        let mut cfg = TrainConfig::<f64>::default();
        cfg.learning_rate = 0.1;
        let g = vec![Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m1 = 0.2, v1 = 0.004; m2 = 0.38, v2 = 0.007996
        assert!((st.m[0].data()[0] - 0.38).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.007996).abs() < 1e-15);
        // each bias-corrected step is lr · 2 / (2 + 1e-8)
        let step = 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.sites()[0].data()[0] - (0.5 - 2.0 * step)).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = random_peps::<f64>(2, 2, 2, 2, 3);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.m[0].data_mut()[0] = 1.0;
        st.v[0].data_mut()[0] = 1.0;
        let g: Vec<Tensor<f64>> = p.sites().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let cfg = TrainConfig::<f64>::default();
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert!((st.m[0].data()[0] - 0.9f64.powi(5)).abs() < 1e-15);
        for j in 1..4 {
            assert_eq!(p.sites()[j], before.sites()[j]);
        }
        let bad = vec![Tensor::zeros(&[1])];
        assert!(matches!(adam_step(&mut p, &bad, &mut st, &cfg), Err(PepsError::Shape(_))));
    }

    #[test]
    fn normalization_brings_norm_to_one() {
        let p = random_peps::<f64>(3, 3, 2, 2, 9);
        let s = ContractionSettings::with_chi(4);
        let (q, est) = normalize_init(&p, 200, &s, 1).unwrap();
        assert!((est.log_z - log_norm_exact(&p).unwrap()).abs() < 1e-8);
        assert!(log_norm_exact(&q).unwrap().abs() < 1e-8);
        // probabilities unchanged
        let x = GridConfig::from_index(3, 3, 2, 77);
        let e = ContractionSettings::exact();
        let lp = amplitude(&p, &x, &e).unwrap().log_psi2() - log_norm_exact(&p).unwrap();
        let lq = amplitude(&q, &x, &e).unwrap().log_psi2();
        assert!((lp - lq).abs() < 1e-8);
    }

    #[test]
    fn zero_iterations_return_normalized_init() {
        let p = random_peps::<f64>(2, 2, 2, 2, 1);
        let data = crate::datasets::gen_bars_stripes(2).configs;
        let mut cfg = TrainConfig::new(ContractionSettings::exact(), 5);
        cfg.max_iters = 0;
        let out = train_mode(&p, &data, &data, &cfg).unwrap();
        assert!(out.report.rows.is_empty());
        assert!(out.aborted.is_none());
        assert!(log_norm_exact(&out.model).unwrap().abs() < 1e-10);
        assert_eq!(out.report.to_csv(false), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn short_run_is_deterministic_and_checkpoints_best() {
        let p = random_peps::<f64>(2, 2, 2, 2, 4);
        let data = crate::datasets::gen_bars_stripes(2).configs;
        let mut cfg = TrainConfig::new(ContractionSettings::exact(), 11);
        cfg.max_iters = 30;
        cfg.eval_interval = 5;
        cfg.batch_pos = 20;
        cfg.batch_neg_initial = 20;
        cfg.learning_rate = 0.05;
        cfg.norm_samples = 50;
        cfg.init_samples = 50;
        let a = train_mode(&p, &data, &data, &cfg).unwrap();
        let b = train_mode(&p, &data, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.to_csv(false), b.report.to_csv(false));
        assert_eq!(a.report.rows.len(), 6);
        let iters: Vec<usize> = a.report.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![5, 10, 15, 20, 25, 30]);
        let best = a.report.rows.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
        let log_z = log_norm_exact(&a.model).unwrap();
        let at_best = nll(&a.model, &data, log_z, &ContractionSettings::exact()).unwrap();
        assert!((at_best - best).abs() < 1e-8, "{at_best} vs {best}");
        assert!(a.report.rows.last().unwrap().train_nll < a.report.rows[0].train_nll + 0.5);
        let parsed = TrainReport::<f64>::from_csv(&a.report.to_csv(true)).unwrap();
        assert_eq!(parsed.rows.len(), 6);
        assert_eq!(parsed.rows[2].train_nll, a.report.rows[2].train_nll);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::<f64>::default();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::<f64>::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
