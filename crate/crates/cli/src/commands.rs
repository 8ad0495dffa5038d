use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use peps_core::datasets::{
    binarize, downsample, group_by_mode, load_dataset, load_mnist_idx, mode_ids, save_dataset,
    Dataset, GreyImages, ModeSource, Split,
};
use peps_core::mixture::{
    build_mixture, classify, load_mixture, log_ratio_samples, mixture_log_prob, mode_log_probs,
    sample_mixture, save_mixture, MixtureModel, Mode,
};
use peps_core::peps::io::{is_peps_file, load_peps, save_peps};
use peps_core::peps::{
    bars_stripes_peps, ising_peps, log_norm_exact, random_peps, ContractionSettings, IsingParams,
};
use peps_core::rng::derive_seed;
use peps_core::sampler::estimate_log_norm;
use peps_core::training::train_mode_with;
use peps_core::{Peps64, PepsError, Result};

use crate::config::{settings, ModeRule, RunConfig, Source, SplitRule};
use crate::output::{histogram, tiled_pgm, write_file, KeyValues};

const TEST_TAG: u64 = 0x7465_7374;

pub const MODES_MANIFEST: &str = "modes.txt";
pub const MIXTURE_MANIFEST: &str = "mixture.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PepsError + '_ {
    move |e| PepsError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mode_file(m: usize, part: &str) -> String {
    format!("mode{m}-{part}.pds")
}

pub fn model_file(m: usize) -> String {
    format!("mode{m}.peps")
}

pub fn report_file(m: usize) -> String {
    format!("mode{m}-report.csv")
}

fn greyscale(images: &Path, labels: Option<&Path>, shrink: bool) -> Result<GreyImages> {
    let raw = load_mnist_idx(images, labels)?;
    if shrink {
        downsample(&raw, 8)
    } else {
        Ok(raw)
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let (full, test) = match d.source {
        Source::BarsStripes => (peps_core::datasets::gen_bars_stripes(d.side), None),
        Source::Mnist => {
            let images = d.images.as_deref().expect("validated");
            let full = binarize(&greyscale(images, d.labels.as_deref(), d.downsample)?, d.binarize_seed);
            let test = match &d.test_images {
                Some(t) => {
                    let g = greyscale(t, d.test_labels.as_deref(), d.downsample)?;
                    let mut ds = binarize(&g, derive_seed(d.binarize_seed, TEST_TAG));
                    ds.split = Split::Test;
                    Some(ds)
                }
                None => None,
            };
            (full, test)
        }
    };
    let ids = match d.modes {
        ModeRule::Single => vec![0; full.len()],
        ModeRule::Labels => mode_ids(&full, ModeSource::Labels)?,
        ModeRule::Clusters => {
            let path = d.cluster_file.as_deref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            mode_ids(&full, ModeSource::ClusterText(&text))
                .map_err(|e| PepsError::Input(format!("{}: {e}", path.display())))?
        }
    };
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = String::new();
    let groups = group_by_mode(&ids)?;
    let _ = writeln!(manifest, "modes = {}", groups.len());
    let _ = writeln!(manifest, "height = {}", full.height);
    let _ = writeln!(manifest, "width = {}", full.width);
    let _ = writeln!(manifest, "phys_dim = {}", full.phys_dim);
    for (m, mut idx) in groups.into_iter().enumerate() {
        if d.mode_limit > 0 {
            idx.truncate(d.mode_limit);
        }
        let (train, val): (Vec<usize>, Vec<usize>) = match d.split {
            SplitRule::Global => idx.iter().partition(|&&i| i < d.train_count),
            SplitRule::PerMode => {
                let cut = idx.len().saturating_sub(d.validation_per_mode);
                (idx[..cut].to_vec(), idx[cut..].to_vec())
            }
            SplitRule::None => (idx.clone(), idx),
        };
        if train.is_empty() {
            return Err(PepsError::EmptyMode(m));
        }
        if val.is_empty() {
            return Err(PepsError::Input(format!("mode {m} has no validation examples")));
        }
        let (tn, vn) = (train.len(), val.len());
        save_dataset(&full.select(train, Split::Train), out.join(mode_file(m, "train")))?;
        save_dataset(&full.select(val, Split::Validation), out.join(mode_file(m, "val")))?;
        let _ = writeln!(manifest, "mode.{m}.train = {}", mode_file(m, "train"));
        let _ = writeln!(manifest, "mode.{m}.validation = {}", mode_file(m, "val"));
        let _ = writeln!(manifest, "mode.{m}.count = {tn}");
        println!("mode {m}: {tn} training, {vn} validation examples");
    }
    if let Some(t) = test {
        save_dataset(&t, out.join("test.pds"))?;
        let _ = writeln!(manifest, "test = test.pds");
        println!("test: {} examples", t.len());
    }
    write_file(&out.join(MODES_MANIFEST), manifest)
}

struct Prepared {
    dir: PathBuf,
    kv: KeyValues,
}

impl Prepared {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        let kv = KeyValues::read(&dir.join(MODES_MANIFEST))?;
        Ok(Prepared { dir, kv })
    }

    fn modes(&self) -> Result<usize> {
        self.kv.get("modes")
    }

    fn dataset(&self, m: usize, part: &str) -> Result<Dataset> {
        let name: String = self.kv.get(&format!("mode.{m}.{part}"))?;
        load_dataset(self.dir.join(name))
    }
}

pub fn train(cfg: &RunConfig, mode: usize, wall_time: bool) -> Result<()> {
    cfg.validate()?;
    let prep = Prepared::open(cfg)?;
    let modes = prep.modes()?;
    if mode >= modes {
        return Err(PepsError::Input(format!("mode {mode} out of range, {modes} modes prepared")));
    }
    let train = prep.dataset(mode, "train")?;
    let val = prep.dataset(mode, "validation")?;
    let init = random_peps::<f64>(
        train.height,
        train.width,
        train.phys_dim,
        cfg.model.bond_dim,
        derive_seed(cfg.model.init_seed, mode as u64),
    );
    let tc = cfg.train_config();
    let outcome = train_mode_with(&init, &train.configs, &val.configs, &tc, |row, _| {
        println!(
            "iter {} train_nll {:.4} val_nll {:.4} log_z {:.4} +- {:.4}",
            row.iter, row.train_nll, row.val_nll, row.log_z, row.log_z_stderr
        );
        std::ops::ControlFlow::Continue(())
    })?;
    let model_path = prep.dir.join(model_file(mode));
    save_peps(&outcome.model, &model_path)?;
    write_file(&prep.dir.join(report_file(mode)), outcome.report.to_csv(wall_time))?;
    println!("wrote {}", model_path.display());
    match outcome.aborted {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn mix(cfg: &RunConfig, selected: &[usize]) -> Result<()> {
    let prep = Prepared::open(cfg)?;
    let all: Vec<usize> = (0..prep.modes()?).collect();
    let chosen = if selected.is_empty() { &all[..] } else { selected };
    let mut data = Vec::new();
    let mut models = Vec::new();
    for &m in chosen {
        if m >= all.len() {
            return Err(PepsError::Input(format!("mode {m} out of range")));
        }
        data.push(prep.dataset(m, "train")?);
        models.push(load_peps::<f64>(prep.dir.join(model_file(m)))?);
    }
    let s = settings(cfg.training.chi, cfg.training.rel_tol, cfg.model.bond_dim);
    let mm = build_mixture(&data, models, cfg.training.norm_samples, &s, cfg.sampling.seed)?;
    let path = prep.dir.join(MIXTURE_MANIFEST);
    save_mixture(&mm, &path)?;
    for (i, m) in mm.modes().iter().enumerate() {
        println!(
            "mode {}: weight {} log_z {} +- {}",
            chosen[i], m.weight, m.log_z, m.log_z_stderr
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Normalization used when a bare model file stands in for a distribution.
pub struct NormChoice {
    pub exact: bool,
    pub samples: usize,
    pub seed: u64,
}

fn default_settings(mm: &MixtureModel<f64>, chi: Option<usize>) -> ContractionSettings<f64> {
    let bond = mm.modes().iter().map(|m| m.peps.max_bond_dim()).max().unwrap_or(1);
    settings(chi, 0.0, bond)
}

/// Loads a model file or mixture manifest as a mixture. Bare models are
/// normalized per `norm`; `norm.exact` also recomputes cached mixture norms.
pub fn load_distribution(
    path: &Path,
    norm: Option<&NormChoice>,
    chi: Option<usize>,
) -> Result<MixtureModel<f64>> {
    let is_model = is_peps_file(path) || path.extension().is_some_and(|e| e == "peps");
    let mm = if is_model {
        MixtureModel::single(load_peps::<f64>(path)?, 0.0, 0.0)
    } else {
        load_mixture::<f64>(path)?
    };
    let Some(norm) = norm else { return Ok(mm) };
    let s = default_settings(&mm, chi);
    if !is_model && !norm.exact {
        return Ok(mm);
    }
    let modes = mm
        .modes()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (log_z, log_z_stderr) = if norm.exact {
                (log_norm_exact(&m.peps)?, 0.0)
            } else {
                let e = estimate_log_norm(&m.peps, norm.samples, &s, derive_seed(norm.seed, i as u64))?;
                (e.log_z, e.std_err)
            };
            Ok(Mode {
                log_z,
                log_z_stderr,
                ..m.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureModel::new(modes)
}

fn check_dims(mm: &MixtureModel<f64>, h: usize, w: usize, d: usize) -> Result<()> {
    if (mm.height(), mm.width(), mm.phys_dim()) != (h, w, d) {
        return Err(PepsError::Shape(format!(
            "model is {}x{} with d = {}, data are {h}x{w} with d = {d}",
            mm.height(),
            mm.width(),
            mm.phys_dim()
        )));
    }
    Ok(())
}

pub fn sample(model: &Path, n: usize, seed: u64, chi: Option<usize>, out: &Path) -> Result<()> {
    let mm = load_distribution(model, None, chi)?;
    let s = default_settings(&mm, chi);
    let configs = sample_mixture(&mm, n, &s, seed)?;
    let (h, w, d) = (mm.height(), mm.width(), mm.phys_dim());
    let pgm = tiled_pgm(&configs, h, w);
    let ds = Dataset::new(configs, None, h, w, d)?;
    let with_ext = |ext: &str| PathBuf::from(format!("{}.{ext}", out.display()));
    save_dataset(&ds, with_ext("pds"))?;
    write_file(&with_ext("pgm"), pgm)?;
    println!("wrote {n} samples to {}", with_ext("pds").display());
    Ok(())
}

/// `−Σ p̂ log p̂` of the empirical distribution of the configurations.
fn empirical_entropy(ds: &Dataset) -> f64 {
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for x in &ds.configs {
        *counts.entry(x.values()).or_default() += 1;
    }
    let n = ds.len() as f64;
    let mut ps: Vec<f64> = counts.values().map(|&c| c as f64 / n).collect();
    ps.sort_by(f64::total_cmp);
    -ps.iter().map(|p| p * p.ln()).sum::<f64>()
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub norm: NormChoice,
    pub chi: Option<usize>,
    pub log_probs: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn eval(a: &EvalArgs<'_>) -> Result<()> {
    let ds = load_dataset(a.data)?;
    let mm = load_distribution(a.model, Some(&a.norm), a.chi)?;
    check_dims(&mm, ds.height, ds.width, ds.phys_dim)?;
    if ds.is_empty() {
        return Err(PepsError::Input(format!("{} holds no examples", a.data.display())));
    }
    let s = default_settings(&mm, a.chi);
    let per_mode: Vec<Vec<f64>> = ds
        .configs
        .iter()
        .map(|x| mode_log_probs(&mm, x, &s))
        .collect::<Result<_>>()?;
    let log_probs: Vec<f64> = ds
        .configs
        .iter()
        .map(|x| mixture_log_prob(&mm, x, &s))
        .collect::<Result<_>>()?;
    let n = ds.len() as f64;
    let nll = -log_probs.iter().sum::<f64>() / n;
    // first-order propagation of the log_z errors through the mode
    // responsibilities averaged over the data
    let mut resp = vec![0.0; mm.num_modes()];
    for (lp, total) in per_mode.iter().zip(&log_probs) {
        if total.is_finite() {
            for (r, l) in resp.iter_mut().zip(lp) {
                *r += (l - total).exp() / n;
            }
        }
    }
    let nll_stderr = resp
        .iter()
        .zip(mm.modes())
        .map(|(r, m)| (r * m.log_z_stderr).powi(2))
        .sum::<f64>()
        .sqrt();
    let entropy = empirical_entropy(&ds);
    let predicted: Option<Vec<Option<usize>>> = (mm.num_modes() > 1 && ds.labels.is_some()).then(|| {
        ds.configs
            .iter()
            .map(|x| classify(&mm, x, &s).ok())
            .collect()
    });
    let accuracy = predicted.as_ref().map(|p| {
        let labels = ds.labels.as_ref().expect("checked");
        p.iter().zip(labels).filter(|(p, l)| **p == Some(**l)).count() as f64 / n
    });

    println!("examples = {}", ds.len());
    println!("nll = {nll}");
    println!("nll_stderr = {nll_stderr}");
    println!("entropy_reference = {entropy}");
    if let Some(acc) = accuracy {
        println!("accuracy = {acc}");
    }
    if let Some(path) = a.log_probs {
        let mut csv = String::from("index,log_prob");
        if ds.labels.is_some() {
            csv.push_str(",label");
        }
        if predicted.is_some() {
            csv.push_str(",predicted");
        }
        csv.push('\n');
        for (i, lp) in log_probs.iter().enumerate() {
            let _ = write!(csv, "{i},{lp}");
            if let Some(l) = &ds.labels {
                let _ = write!(csv, ",{}", l[i]);
            }
            if let Some(p) = &predicted {
                match p[i] {
                    Some(k) => {
                        let _ = write!(csv, ",{k}");
                    }
                    None => csv.push_str(",-1"),
                }
            }
            csv.push('\n');
        }
        write_file(path, csv)?;
    }
    if let Some(path) = a.out {
        let mut csv = String::from("examples,nll,nll_stderr,entropy_reference,accuracy\n");
        let _ = writeln!(
            csv,
            "{},{nll},{nll_stderr},{entropy},{}",
            ds.len(),
            accuracy.unwrap_or(f64::NAN)
        );
        write_file(path, csv)?;
    }
    match log_probs.iter().position(|l| *l == f64::NEG_INFINITY) {
        Some(index) => Err(PepsError::InfiniteNll { index }),
        None => Ok(()),
    }
}

pub struct LogRatioArgs<'a> {
    pub p: &'a Path,
    pub q: &'a Path,
    pub n: usize,
    pub seed: u64,
    pub chi: Option<usize>,
    pub norm: NormChoice,
    pub bin_width: f64,
    pub out: &'a Path,
}

pub fn logratio(a: &LogRatioArgs<'_>) -> Result<()> {
    if !(a.bin_width > 0.0) {
        return Err(PepsError::Input(format!("bin width must be positive, got {}", a.bin_width)));
    }
    let p = load_distribution(a.p, Some(&a.norm), a.chi)?;
    let q_norm = NormChoice {
        seed: derive_seed(a.norm.seed, 1),
        ..a.norm
    };
    let q = load_distribution(a.q, Some(&q_norm), a.chi)?;
    let s = default_settings(&p, a.chi);
    let r = log_ratio_samples(&p, &q, a.n, &s, a.seed)?;
    let summary = r.summary();
    let with_suffix = |suffix: &str| PathBuf::from(format!("{}-{suffix}.csv", a.out.display()));

    let mut samples = String::from("index,log_ratio\n");
    for (i, v) in r.values.iter().enumerate() {
        let _ = writeln!(samples, "{i},{v}");
    }
    write_file(&with_suffix("samples"), samples)?;
    let hist = histogram(&r.values, a.bin_width);
    let mut csv = String::from("bin_left,bin_right,count\n");
    for (l, rr, c) in &hist {
        let _ = writeln!(csv, "{l},{rr},{c}");
    }
    if summary.infinite > 0 {
        let _ = writeln!(csv, "inf,inf,{}", summary.infinite);
    }
    write_file(&with_suffix("hist"), csv)?;

    println!("samples = {}", a.n);
    println!("kl_estimate = {}", summary.mean);
    println!("kl_stderr = {}", summary.std_err);
    println!("infinite = {}", summary.infinite);
    if let Some((l, rr, _)) = hist.iter().max_by_key(|(_, _, c)| *c) {
        println!("histogram_mode = {}", (l + rr) / 2.0);
    }
    Ok(())
}

pub enum ConstructKind {
    BarsStripes { side: usize },
    Ising { beta: f64, height: usize, width: usize },
    Random { height: usize, width: usize, phys_dim: usize, bond_dim: usize, seed: u64 },
}

pub fn construct(kind: &ConstructKind, out: &Path) -> Result<()> {
    let p: Peps64 = match *kind {
        ConstructKind::BarsStripes { side } => {
            if side < 2 {
                return Err(PepsError::Input("bars-and-stripes side must be at least 2".into()));
            }
            bars_stripes_peps(side)
        }
        ConstructKind::Ising { beta, height, width } => {
            if height == 0 || width == 0 || !beta.is_finite() {
                return Err(PepsError::Input("Ising grid must be nonempty with finite beta".into()));
            }
            ising_peps(IsingParams { beta, height, width })
        }
        ConstructKind::Random { height, width, phys_dim, bond_dim, seed } => {
            if height == 0 || width == 0 || phys_dim < 2 || bond_dim == 0 {
                return Err(PepsError::Input("invalid random model dimensions".into()));
            }
            random_peps(height, width, phys_dim, bond_dim, seed)
        }
    };
    save_peps(&p, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
