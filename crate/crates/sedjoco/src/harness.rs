//! Run configuration, the bundled benchmark experiments, CSV/gnuplot output,
//! and the self-test battery behind `sedjoco selftest`.
//!
//! A run is described by a flat `key = value` configuration (see
//! [`Config::parse`] for the grammar and [`KNOWN_KEYS`] for the vocabulary).
//! The executor sweeps the configured grids in a fixed order, computes the
//! closed-form interference prediction at every grid point, and optionally
//! verifies it with Monte-Carlo trials.  Trials run in parallel but are
//! reduced in trial order, so results do not depend on the thread count;
//! together with fixed-precision number formatting this makes the CSV output
//! byte-identical across repeat runs of the same configuration and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::banded::BandedChol;
use crate::covariance::{
    mixture_covariance, scv_covariance_from_firs, scv_precision, FirBank, ScvCovariance,
    ScvPrecision,
};
use crate::error::{Error, Result};
use crate::model::{DemixingSet, IsrTable, ProblemDims, QIndexer, TargetSet};
use crate::perturbation::{
    asymptotic_gains, closed_form_diag_gradients, predict_pairwise, q_covariance_identity,
    solve_gradients, Prediction,
};
use crate::solver::{
    compute_targets_factored, drilled_check, expected_targets, jacobian, newton_solve,
};
use crate::sourcegen::{
    bank_from_zeros, draw_bank, draw_gaussian_bank, gen_mixture_sources, gen_sources,
    interpolate_zeros, mix, perturb_zeros, std_normal, trial_rng, IsrAccumulator, NoiseFamily,
    ZeroSet,
};
use crate::spectral::{compute_targets_circulant, predict_circulant, SpectralPrecision};

/// Every key the configuration grammar accepts; anything else is rejected so
/// typos fail loudly instead of silently falling back to a default.
pub const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "model.datasets",
    "model.sources",
    "model.samples",
    "model.filter_len",
    "filter.kind",
    "filter.eta",
    "filter.decay_a",
    "mismatch.phase_b",
    "mismatch.radius_c",
    "grid.mu",
    "grid.t",
    "grid.p",
    "source.kind",
    "noise.family",
    "presumed.model",
    "run.trials",
    "run.seed",
    "run.excluded_budget",
    "solver.tol",
    "solver.max_iter",
];

/// Flat `key = value` run configuration.  Blank lines and lines starting
/// with `#` are ignored; later assignments win.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    ln + 1
                )));
            };
            let key = k.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", ln + 1)));
            }
            map.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Config(format!("override '{pair}' is not of the form key=value")));
        };
        let key = k.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.map.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    fn get_or(&self, key: &str, default: &str) -> String {
        self.map.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}

fn parse_usize(key: &str, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Config(format!("{key}: '{s}' is not a non-negative integer")))
}

fn parse_u64(key: &str, s: &str) -> Result<u64> {
    s.parse().map_err(|_| Error::Config(format!("{key}: '{s}' is not a non-negative integer")))
}

fn parse_f64(key: &str, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Config(format!("{key}: '{s}' is not a number")))
}

fn parse_list_f64(key: &str, s: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> =
        s.split(',').map(|p| parse_f64(key, p.trim())).collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(vals)
}

fn parse_list_usize(key: &str, s: &str) -> Result<Vec<usize>> {
    let vals: Vec<usize> =
        s.split(',').map(|p| parse_usize(key, p.trim())).collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    /// Minimum-phase filters from drawn zeros; the presumed model walks from
    /// the true zeros (`mu = 0`) to perturbed ones (`mu = 1`).
    Zeros,
    /// Plain Gaussian taps; the presumed model is exact.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Filtered white noise from one bank.
    Fir,
    /// Samplewise Bernoulli switch between two independent banks.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresumedModel {
    /// Exact block-Toeplitz presumed covariances, inverted per source.
    Toeplitz,
    /// Circulant embedding of the presumed covariances, handled per
    /// frequency; the only tractable choice at large sample sizes.
    Circulant,
}

/// Fully resolved run description.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub id: String,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub eta: f64,
    pub decay_a: f64,
    pub phase_b: f64,
    pub radius_c: f64,
    pub filter: FilterKind,
    pub source: SourceKind,
    pub presumed: PresumedModel,
    pub t_grid: Vec<usize>,
    pub mu_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    pub families: Vec<NoiseFamily>,
    pub trials: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub excluded_budget: f64,
}

impl RunSpec {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let id = cfg.get_or("experiment", "run");
        let m = parse_usize("model.datasets", &cfg.get_or("model.datasets", "2"))?;
        let k = parse_usize("model.sources", &cfg.get_or("model.sources", "2"))?;
        let l = parse_usize("model.filter_len", &cfg.get_or("model.filter_len", "4"))?;
        let samples = parse_usize("model.samples", &cfg.get_or("model.samples", "1000"))?;
        let eta = parse_f64("filter.eta", &cfg.get_or("filter.eta", "1.0"))?;
        let decay_a = parse_f64("filter.decay_a", &cfg.get_or("filter.decay_a", "2.0"))?;
        let phase_b = parse_f64("mismatch.phase_b", &cfg.get_or("mismatch.phase_b", "0.1"))?;
        let radius_c = parse_f64("mismatch.radius_c", &cfg.get_or("mismatch.radius_c", "0.1"))?;
        let filter = match cfg.get_or("filter.kind", "zeros").as_str() {
            "zeros" => FilterKind::Zeros,
            "gaussian" => FilterKind::Gaussian,
            other => {
                return Err(Error::Config(format!(
                    "filter.kind: expected zeros|gaussian, got '{other}'"
                )))
            }
        };
        let source = match cfg.get_or("source.kind", "fir").as_str() {
            "fir" => SourceKind::Fir,
            "mixture" => SourceKind::Mixture,
            other => {
                return Err(Error::Config(format!(
                    "source.kind: expected fir|mixture, got '{other}'"
                )))
            }
        };
        let presumed = match cfg.get_or("presumed.model", "toeplitz").as_str() {
            "toeplitz" => PresumedModel::Toeplitz,
            "circulant" => PresumedModel::Circulant,
            other => {
                return Err(Error::Config(format!(
                    "presumed.model: expected toeplitz|circulant, got '{other}'"
                )))
            }
        };
        let t_grid = match cfg.map.get("grid.t") {
            Some(s) => parse_list_usize("grid.t", s)?,
            None => vec![samples],
        };
        let mu_grid = parse_list_f64("grid.mu", &cfg.get_or("grid.mu", "0"))?;
        let p_grid = match cfg.map.get("grid.p") {
            Some(s) => parse_list_f64("grid.p", s)?,
            None => Vec::new(),
        };
        let families = match cfg.get_or("noise.family", "gaussian").as_str() {
            "all" => NoiseFamily::ALL.to_vec(),
            one => vec![NoiseFamily::parse(one)?],
        };
        let trials = parse_usize("run.trials", &cfg.get_or("run.trials", "1000"))?;
        let seed = parse_u64("run.seed", &cfg.get_or("run.seed", "1"))?;
        let tol = parse_f64("solver.tol", &cfg.get_or("solver.tol", "1e-9"))?;
        let max_iter = parse_usize("solver.max_iter", &cfg.get_or("solver.max_iter", "100"))?;
        let excluded_budget =
            parse_f64("run.excluded_budget", &cfg.get_or("run.excluded_budget", "0.01"))?;

        if source == SourceKind::Mixture && p_grid.is_empty() {
            return Err(Error::Config("source.kind = mixture needs grid.p".into()));
        }
        if source == SourceKind::Mixture && filter != FilterKind::Zeros {
            return Err(Error::Config("source.kind = mixture needs filter.kind = zeros".into()));
        }
        if mu_grid.iter().any(|&mu| !(0.0..=1.0).contains(&mu)) {
            return Err(Error::Config("grid.mu: values must lie in [0, 1]".into()));
        }
        if p_grid.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("grid.p: values must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&excluded_budget) {
            return Err(Error::Config("run.excluded_budget: must lie in [0, 1]".into()));
        }

        Ok(Self {
            id,
            m,
            k,
            l,
            eta,
            decay_a,
            phase_b,
            radius_c,
            filter,
            source,
            presumed,
            t_grid,
            mu_grid,
            p_grid,
            families,
            trials,
            seed,
            tol,
            max_iter,
            excluded_budget,
        })
    }

    /// Deterministic dump of every resolved setting, for CSV headers.
    pub fn dump(&self) -> Vec<(String, String)> {
        let join_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("experiment".to_string(), self.id.clone()),
            ("model.datasets".to_string(), self.m.to_string()),
            ("model.sources".to_string(), self.k.to_string()),
            ("model.filter_len".to_string(), self.l.to_string()),
            ("filter.kind".to_string(), match self.filter {
                FilterKind::Zeros => "zeros".to_string(),
                FilterKind::Gaussian => "gaussian".to_string(),
            }),
            ("filter.eta".to_string(), self.eta.to_string()),
        ];
        if self.filter == FilterKind::Zeros {
            out.push(("filter.decay_a".to_string(), self.decay_a.to_string()));
            out.push(("mismatch.phase_b".to_string(), self.phase_b.to_string()));
            out.push(("mismatch.radius_c".to_string(), self.radius_c.to_string()));
            out.push(("grid.mu".to_string(), join_f(&self.mu_grid)));
        }
        out.push(("grid.t".to_string(), join_u(&self.t_grid)));
        if self.source == SourceKind::Mixture {
            out.push(("grid.p".to_string(), join_f(&self.p_grid)));
        }
        out.push((
            "source.kind".to_string(),
            match self.source {
                SourceKind::Fir => "fir".to_string(),
                SourceKind::Mixture => "mixture".to_string(),
            },
        ));
        out.push((
            "noise.family".to_string(),
            self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
        ));
        out.push((
            "presumed.model".to_string(),
            match self.presumed {
                PresumedModel::Toeplitz => "toeplitz".to_string(),
                PresumedModel::Circulant => "circulant".to_string(),
            },
        ));
        out.push(("run.trials".to_string(), self.trials.to_string()));
        out.push(("run.seed".to_string(), self.seed.to_string()));
        out.push(("run.excluded_budget".to_string(), self.excluded_budget.to_string()));
        out.push(("solver.tol".to_string(), self.tol.to_string()));
        out.push(("solver.max_iter".to_string(), self.max_iter.to_string()));
        out
    }
}

/// Covariance mismodeling sweep: the presumed filters interpolate from the
/// true ones (`mu = 0`, where the prediction must coincide with the
/// matched-model bound) to fully perturbed ones (`mu = 1`).
pub const EXP1_MU: &str = "\
experiment = exp1-mu
model.datasets = 2
model.sources = 3
model.samples = 1000
model.filter_len = 10
filter.kind = zeros
filter.eta = 1.0
filter.decay_a = 2.0
mismatch.phase_b = 0.1
mismatch.radius_c = 0.1
grid.mu = 0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0
source.kind = fir
noise.family = gaussian
presumed.model = toeplitz
run.trials = 2000
run.seed = 1
";

/// Sample-size scaling at three mismodeling strengths; the predicted totals
/// fall off as `1/T` while the empirical ones track them.
pub const EXP1_T: &str = "\
experiment = exp1-t
model.datasets = 2
model.sources = 3
model.filter_len = 10
filter.kind = zeros
filter.eta = 1.0
filter.decay_a = 2.0
mismatch.phase_b = 0.1
mismatch.radius_c = 0.1
grid.t = 50,100,200,500,1000
grid.mu = 0,0.5,1.0
source.kind = fir
noise.family = gaussian
presumed.model = toeplitz
run.trials = 1000
run.seed = 1
";

/// Distribution mismodeling: correct covariances, four driving-noise
/// families sharing one filter bank and one uniform stream, so the only
/// thing that changes between families is the inverse-CDF transform.
pub const EXP2: &str = "\
experiment = exp2
model.datasets = 5
model.sources = 2
model.samples = 1000
model.filter_len = 4
filter.kind = gaussian
filter.eta = 0.5
source.kind = fir
noise.family = all
presumed.model = toeplitz
run.trials = 2000
run.seed = 2
";

/// Bernoulli-mixture sources with a circulant presumed model, swept over the
/// switch probability.  Desk scale; `exp3-paper` restores the full sample
/// size and trial count.
pub const EXP3: &str = "\
experiment = exp3
model.datasets = 8
model.sources = 5
model.samples = 5000
model.filter_len = 10
filter.kind = zeros
filter.eta = 0.1
filter.decay_a = 2.0
mismatch.phase_b = 0.1
mismatch.radius_c = 0.1
grid.mu = 0.5
grid.p = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9
source.kind = mixture
noise.family = gaussian
presumed.model = circulant
run.trials = 200
run.seed = 3
";

/// `exp3` at full scale.
pub const EXP3_PAPER: &str = "\
experiment = exp3-paper
model.datasets = 8
model.sources = 5
model.samples = 10000
model.filter_len = 10
filter.kind = zeros
filter.eta = 0.1
filter.decay_a = 2.0
mismatch.phase_b = 0.1
mismatch.radius_c = 0.1
grid.mu = 0.5
grid.p = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9
source.kind = mixture
noise.family = gaussian
presumed.model = circulant
run.trials = 1000
run.seed = 3
";

/// Returns the configuration of a bundled experiment.
pub fn builtin_config(id: &str) -> Result<Config> {
    let text = match id {
        "exp1-mu" => EXP1_MU,
        "exp1-t" | "exp1-T" => EXP1_T,
        "exp2" => EXP2,
        "exp3" => EXP3,
        "exp3-paper" => EXP3_PAPER,
        _ => {
            return Err(Error::Config(format!(
                "unknown experiment '{id}' (available: exp1-mu, exp1-t, exp2, exp3, exp3-paper)"
            )))
        }
    };
    Config::parse(text)
}

/// One grid point's totals.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub experiment: String,
    pub t: usize,
    pub mu: Option<f64>,
    pub p: Option<f64>,
    pub family: Option<NoiseFamily>,
    pub predicted_db: f64,
    pub empirical_db: Option<f64>,
    pub trials: usize,
    pub excluded: usize,
    pub status: String,
    /// Wall-clock cost of the grid point.  Reported on stdout only; keeping
    /// it out of the CSV is what lets identical runs produce identical files.
    pub wall_ms: u128,
}

/// One grid point's per-element interference ratios.
#[derive(Debug, Clone)]
pub struct ElementRow {
    pub t: usize,
    pub mu: Option<f64>,
    pub p: Option<f64>,
    pub family: Option<NoiseFamily>,
    pub m: usize,
    pub i: usize,
    pub j: usize,
    pub predicted_db: f64,
    pub empirical_db: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub rows: Vec<ResultRow>,
    pub elements: Vec<ElementRow>,
    /// True when any grid point blew the excluded-trial budget.
    pub failed: bool,
}

enum Banks {
    Zeros { bank: FirBank, z0: Vec<ZeroSet>, z1: Vec<ZeroSet> },
    Gaussian { bank: FirBank },
    Mixture { a: BankPair, b: BankPair },
}

struct BankPair {
    bank: FirBank,
    z0: Vec<ZeroSet>,
    z1: Vec<ZeroSet>,
}

impl Banks {
    fn draw(spec: &RunSpec) -> Result<Banks> {
        // dedicated stream far outside the trial range
        let mut rng = trial_rng(spec.seed, u64::MAX);
        let pair = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<BankPair> {
            let (bank, z0) = draw_bank(spec.k, spec.m, spec.l, spec.eta, spec.decay_a, rng)?;
            let z1: Vec<ZeroSet> =
                z0.iter().map(|z| perturb_zeros(z, spec.phase_b, spec.radius_c, rng)).collect();
            Ok(BankPair { bank, z0, z1 })
        };
        match (spec.source, spec.filter) {
            (SourceKind::Fir, FilterKind::Zeros) => {
                let BankPair { bank, z0, z1 } = pair(&mut rng)?;
                Ok(Banks::Zeros { bank, z0, z1 })
            }
            (SourceKind::Fir, FilterKind::Gaussian) => Ok(Banks::Gaussian {
                bank: draw_gaussian_bank(spec.k, spec.m, spec.l, spec.eta, &mut rng)?,
            }),
            (SourceKind::Mixture, FilterKind::Zeros) => {
                Ok(Banks::Mixture { a: pair(&mut rng)?, b: pair(&mut rng)? })
            }
            (SourceKind::Mixture, FilterKind::Gaussian) => {
                Err(Error::Config("source.kind = mixture needs filter.kind = zeros".into()))
            }
        }
    }
}

fn presumed_bank(spec: &RunSpec, z0: &[ZeroSet], z1: &[ZeroSet], mu: f64) -> Result<FirBank> {
    let zt: Vec<ZeroSet> = z0
        .iter()
        .zip(z1)
        .map(|(a, b)| interpolate_zeros(a, b, mu))
        .collect::<Result<_>>()?;
    bank_from_zeros(spec.k, spec.m, spec.l, spec.eta, &zt)
}

fn covariances(bank: &FirBank, k: usize, t: usize) -> Vec<ScvCovariance> {
    (1..=k).map(|kk| scv_covariance_from_firs(bank, kk, t)).collect()
}

#[derive(Clone, Copy)]
struct GridPoint {
    t: usize,
    mu: Option<f64>,
    p: Option<f64>,
    family: NoiseFamily,
}

#[derive(Clone, Copy)]
enum SourceSpec<'a> {
    Fir(&'a FirBank),
    Mixture { a: &'a FirBank, b: &'a FirBank, p: f64 },
}

enum Machinery {
    Banded(Vec<BandedChol>),
    Spectral(SpectralPrecision),
}

/// Runs the configured sweep; `on_row` sees each finished grid point in
/// order.  `threads = 0` lets the runtime pick the thread count.
pub fn run(
    spec: &RunSpec,
    threads: usize,
    mut on_row: impl FnMut(&ResultRow),
) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let banks = Banks::draw(spec)?;
    let mu_points: Vec<Option<f64>> = match spec.filter {
        FilterKind::Zeros => spec.mu_grid.iter().map(|&mu| Some(mu)).collect(),
        FilterKind::Gaussian => vec![None],
    };
    let p_points: Vec<Option<f64>> = match spec.source {
        SourceKind::Fir => vec![None],
        SourceKind::Mixture => spec.p_grid.iter().map(|&p| Some(p)).collect(),
    };

    let mut rows = Vec::new();
    let mut elements = Vec::new();
    let mut failed = false;
    for &t in &spec.t_grid {
        for &mu in &mu_points {
            for &p in &p_points {
                for &family in &spec.families {
                    let pt = GridPoint { t, mu, p, family };
                    let started = Instant::now();
                    let (pred, emp) = run_point(spec, &banks, &pt, &pool)?;
                    let wall_ms = started.elapsed().as_millis();
                    let (trials_done, excluded, table) = match emp {
                        Some((table, done, excl)) => (done, excl, Some(table)),
                        None => (0, 0, None),
                    };
                    let over_budget = spec.trials > 0
                        && (excluded as f64) > spec.excluded_budget * (spec.trials as f64);
                    failed |= over_budget;
                    for mm in 1..=spec.m {
                        for i in 1..=spec.k {
                            for j in 1..=spec.k {
                                if i == j {
                                    continue;
                                }
                                elements.push(ElementRow {
                                    t,
                                    mu,
                                    p,
                                    family: Some(family),
                                    m: mm,
                                    i,
                                    j,
                                    predicted_db: pred.isr.get_db(mm, i, j),
                                    empirical_db: table.as_ref().map(|tb| tb.get_db(mm, i, j)),
                                });
                            }
                        }
                    }
                    let row = ResultRow {
                        experiment: spec.id.clone(),
                        t,
                        mu,
                        p,
                        family: Some(family),
                        predicted_db: pred.isr.total_db(),
                        empirical_db: table.as_ref().map(|tb| tb.total_db()),
                        trials: trials_done,
                        excluded,
                        status: if over_budget { "excluded-budget".into() } else { "ok".into() },
                        wall_ms,
                    };
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(RunOutput { spec: spec.clone(), rows, elements, failed })
}

type PointResult = (Prediction, Option<(IsrTable, usize, usize)>);

fn run_point(
    spec: &RunSpec,
    banks: &Banks,
    pt: &GridPoint,
    pool: &rayon::ThreadPool,
) -> Result<PointResult> {
    let dims = ProblemDims::new(spec.m, spec.k, pt.t, spec.l)?;
    let (cs, pres, gen) = match banks {
        Banks::Zeros { bank, z0, z1 } => {
            let mu = pt.mu.expect("zeros filter kind always sets mu");
            let cs = covariances(bank, spec.k, pt.t);
            let pres_bank = presumed_bank(spec, z0, z1, mu)?;
            (cs, covariances(&pres_bank, spec.k, pt.t), SourceSpec::Fir(bank))
        }
        Banks::Gaussian { bank } => {
            let cs = covariances(bank, spec.k, pt.t);
            let pres = cs.clone();
            (cs, pres, SourceSpec::Fir(bank))
        }
        Banks::Mixture { a, b } => {
            let mu = pt.mu.expect("zeros filter kind always sets mu");
            let p = pt.p.expect("mixture source kind always sets p");
            let ca = covariances(&a.bank, spec.k, pt.t);
            let cb = covariances(&b.bank, spec.k, pt.t);
            let cs: Vec<ScvCovariance> = ca
                .iter()
                .zip(&cb)
                .map(|(x, y)| mixture_covariance(x, y, p))
                .collect::<Result<_>>()?;
            let pa = covariances(&presumed_bank(spec, &a.z0, &a.z1, mu)?, spec.k, pt.t);
            let pb = covariances(&presumed_bank(spec, &b.z0, &b.z1, mu)?, spec.k, pt.t);
            let pres: Vec<ScvCovariance> = pa
                .iter()
                .zip(&pb)
                .map(|(x, y)| mixture_covariance(x, y, p))
                .collect::<Result<_>>()?;
            (cs, pres, SourceSpec::Mixture { a: &a.bank, b: &b.bank, p })
        }
    };

    let pred = match spec.presumed {
        PresumedModel::Toeplitz => {
            let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
            predict_pairwise(&dims, &cs, &ps)?
        }
        PresumedModel::Circulant => predict_circulant(&dims, &cs, &pres)?,
    };
    let emp = simulate_point(spec, &dims, &cs, &pres, gen, pt, pool)?;
    Ok((pred, emp))
}

fn simulate_point(
    spec: &RunSpec,
    dims: &ProblemDims,
    cs_true: &[ScvCovariance],
    pres: &[ScvCovariance],
    gen: SourceSpec<'_>,
    pt: &GridPoint,
    pool: &rayon::ThreadPool,
) -> Result<Option<(IsrTable, usize, usize)>> {
    if spec.trials == 0 {
        return Ok(None);
    }
    let mach = match spec.presumed {
        PresumedModel::Toeplitz => Machinery::Banded(
            pres.iter().map(|c| c.banded_cholesky()).collect::<Result<_>>()?,
        ),
        PresumedModel::Circulant => Machinery::Spectral(SpectralPrecision::new(pres)?),
    };
    let ident = DemixingSet::identity(dims);
    let family = pt.family;
    let t = dims.t;
    // parallel map, sequential reduction in trial order: the accumulated
    // sums cannot depend on the thread count
    let results: Vec<Option<DemixingSet>> = pool.install(|| {
        (0..spec.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(spec.seed, trial as u64);
                let xs = match gen {
                    SourceSpec::Fir(bank) => gen_sources(bank, t, family, &mut rng),
                    SourceSpec::Mixture { a, b, p } => {
                        gen_mixture_sources(a, b, p, t, family, &mut rng)
                    }
                };
                let q = match &mach {
                    Machinery::Banded(chols) => compute_targets_factored(&xs, chols),
                    Machinery::Spectral(sp) => compute_targets_circulant(&xs, sp),
                }
                .ok()?;
                let (bhat, _) = newton_solve(&q, &ident, spec.tol, spec.max_iter).ok()?;
                Some(bhat)
            })
            .collect()
    });
    let mut acc = IsrAccumulator::new(spec.m, spec.k);
    for r in &results {
        match r {
            Some(bhat) => acc.add_trial(bhat),
            None => acc.add_excluded(),
        }
    }
    let powers: Vec<Vec<f64>> = (1..=spec.m)
        .map(|mm| (1..=spec.k).map(|kk| cs_true[kk - 1].power(mm)).collect())
        .collect();
    Ok(Some((acc.table(&powers), acc.trials(), acc.excluded())))
}

/// Which grid axis a run sweeps; used for stdout lines and plot scripts.
pub fn axis(spec: &RunSpec) -> &'static str {
    if spec.t_grid.len() > 1 {
        "t"
    } else if spec.filter == FilterKind::Zeros && spec.mu_grid.len() > 1 {
        "mu"
    } else if spec.source == SourceKind::Mixture && spec.p_grid.len() > 1 {
        "p"
    } else if spec.families.len() > 1 {
        "family"
    } else {
        "mu"
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_db(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One-line stdout summary of a finished grid point.
pub fn row_line(row: &ResultRow) -> String {
    let mut s = format!("t={}", row.t);
    if let Some(mu) = row.mu {
        let _ = write!(s, " mu={mu}");
    }
    if let Some(p) = row.p {
        let _ = write!(s, " p={p}");
    }
    if let Some(f) = row.family {
        let _ = write!(s, " family={}", f.name());
    }
    let _ = write!(s, " predicted={:.3} dB", row.predicted_db);
    if let Some(e) = row.empirical_db {
        let _ = write!(
            s,
            " empirical={:.3} dB gap={:+.3} dB trials={} excluded={}",
            e,
            e - row.predicted_db,
            row.trials,
            row.excluded
        );
    }
    let _ = write!(s, " [{} ms]", row.wall_ms);
    if row.status != "ok" {
        let _ = write!(s, " status={}", row.status);
    }
    s
}

fn header_comments(s: &mut String, out: &RunOutput) {
    let _ = writeln!(s, "# sedjoco {}", env!("CARGO_PKG_VERSION"));
    for (k, v) in out.spec.dump() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    let _ = writeln!(s, "# axis = {}", axis(&out.spec));
}

/// Writes `<id>.csv` (totals) and `<id>_elements.csv` (per-element ratios)
/// into `dir`.  All numbers use fixed formatting, so a rerun with the same
/// configuration and seed reproduces both files byte for byte.
pub fn write_csv(out: &RunOutput, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let main_path = dir.join(format!("{}.csv", out.spec.id));
    let elem_path = dir.join(format!("{}_elements.csv", out.spec.id));

    let mut s = String::new();
    header_comments(&mut s, out);
    s.push_str(
        "experiment,t,mu,p,family,predicted_total_db,empirical_total_db,gap_db,trials,excluded,status\n",
    );
    for r in &out.rows {
        let gap = r.empirical_db.map(|e| e - r.predicted_db);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{},{},{},{}",
            r.experiment,
            r.t,
            opt_num(r.mu),
            opt_num(r.p),
            r.family.map(|f| f.name()).unwrap_or(""),
            r.predicted_db,
            opt_db(r.empirical_db),
            opt_db(gap),
            r.trials,
            r.excluded,
            r.status
        );
    }
    std::fs::write(&main_path, s)?;

    let mut s = String::new();
    header_comments(&mut s, out);
    s.push_str("experiment,t,mu,p,family,m,i,j,predicted_db,empirical_db\n");
    for r in &out.elements {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.6},{}",
            out.spec.id,
            r.t,
            opt_num(r.mu),
            opt_num(r.p),
            r.family.map(|f| f.name()).unwrap_or(""),
            r.m,
            r.i,
            r.j,
            r.predicted_db,
            opt_db(r.empirical_db),
        );
    }
    std::fs::write(&elem_path, s)?;
    Ok((main_path, elem_path))
}

/// Emits a gnuplot script next to the CSV files.
pub fn emit_plot(out: &RunOutput, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("{}.gp", out.spec.id));
    let csv = format!("{}.csv", out.spec.id);
    let ax = axis(&out.spec);
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile columnheaders");
    let _ = writeln!(s, "set ylabel 'total interference-to-source ratio [dB]'");
    let _ = writeln!(s, "set xlabel '{ax}'");
    let _ = writeln!(s, "set key left top");
    let _ = writeln!(s, "set style data linespoints");
    if ax == "t" {
        let _ = writeln!(s, "set logscale x");
    }
    if ax == "family" {
        let _ = writeln!(
            s,
            "plot '{csv}' using 6:xticlabels(5) title 'predicted', '' using 7:xticlabels(5) title 'empirical'"
        );
    } else {
        let col = match ax {
            "t" => 2,
            "p" => 4,
            _ => 3,
        };
        let _ = writeln!(
            s,
            "plot '{csv}' using {col}:6 title 'predicted', '' using {col}:7 title 'empirical'"
        );
    }
    std::fs::write(&path, s)?;
    Ok(path)
}

/// Outcome of one self-test check.
#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the full battery: solver certification, gradient oracles, the
/// target-covariance oracle, and the mutation guards.
pub fn selftest() -> Vec<Check> {
    vec![
        check_solver_certification(43),
        check_gradient_oracle(20, 41),
        check_covariance_oracle(200_000, 42),
        check_mutation_guards(44),
    ]
}

/// Small mismatched test model: true bank plus a perturbed presumed bank.
fn mismatched_model(
    m: usize,
    k: usize,
    t: usize,
    l: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(ProblemDims, FirBank, Vec<ScvCovariance>, Vec<ScvCovariance>)> {
    let dims = ProblemDims::new(m, k, t, l)?;
    let (bank, z0) = draw_bank(k, m, l, 1.0, 2.0, rng)?;
    let z1: Vec<ZeroSet> = z0.iter().map(|z| perturb_zeros(z, 0.3, 0.15, rng)).collect();
    let bank_p = bank_from_zeros(k, m, l, 1.0, &z1)?;
    let cs = covariances(&bank, k, t);
    let pres = covariances(&bank_p, k, t);
    Ok((dims, bank, cs, pres))
}

/// Rescales the expected targets so the unit demixing set solves them
/// exactly; this is the frame in which the gradients are defined.
fn normalized_targets(dims: &ProblemDims, qbar: &TargetSet) -> Result<TargetSet> {
    let gains = asymptotic_gains(qbar)?;
    let scales: Vec<Vec<f64>> = (1..=dims.m)
        .map(|mm| (1..=dims.k).map(|kk| gains[kk - 1][mm - 1]).collect())
        .collect();
    Ok(qbar.scale_congruence(&scales))
}

/// Gradient oracle: analytic demixing gradients against central finite
/// differences pushed through the Newton solver, the closed-form diagonal
/// columns against the generic solve, and the zero structure of same-source
/// columns.
pub fn check_gradient_oracle(instances: usize, seed: u64) -> Check {
    let name = "gradient-oracle";
    let body = || -> Result<(f64, f64, f64)> {
        let mut worst_fd = 0.0f64;
        let mut worst_cf = 0.0f64;
        let mut worst_zero = 0.0f64;
        for inst in 0..instances {
            let mut rng = trial_rng(seed, 10_000 + inst as u64);
            let m = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let t = [16, 32, 64][rng.gen_range(0..3)];
            let l = rng.gen_range(2..=4);
            let (dims, _, cs, pres) = mismatched_model(m, k, t, l, &mut rng)?;
            let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
            let qbar = expected_targets(&cs, &ps)?;
            let qn = normalized_targets(&dims, &qbar)?;
            let qidx = QIndexer::new(&dims);
            let ident = DemixingSet::identity(&dims);
            let h = jacobian(&ident, &qn);
            let g = solve_gradients(&dims, &h, &ident, &qidx)?;

            // columns of same-source diagonal elements: the closed form
            // yields the diagonal demixing rows dB_kk^(m)/dq across datasets
            for (r, alpha) in closed_form_diag_gradients(&dims, &qn, &qidx)? {
                let e = qidx.elem(r);
                for (mm, &cf) in alpha.iter().enumerate() {
                    worst_cf = worst_cf.max((g.entry(mm + 1, e.k, e.k, r) - cf).abs());
                }
            }
            for (r, e) in qidx.elems().iter().enumerate() {
                if e.i == e.j {
                    for mm in 1..=m {
                        for p in 1..=k {
                            for q in 1..=k {
                                if p != q {
                                    worst_zero = worst_zero.max(g.entry(mm, p, q, r).abs());
                                }
                            }
                        }
                    }
                }
            }
            // near-singular pair systems push the higher derivatives up as
            // fast as the gradients; 1e-6 keeps the central-difference
            // truncation below the tolerance even there, while the solver
            // noise floor (1e-12 residuals) stays two decades under it
            let h_step = 1e-6;
            for (r, e) in qidx.elems().iter().enumerate() {
                let mut qp = qn.clone();
                qp.perturb(e, h_step);
                let mut qm = qn.clone();
                qm.perturb(e, -h_step);
                let (bp, _) = newton_solve(&qp, &ident, 1e-12, 200)?;
                let (bm, _) = newton_solve(&qm, &ident, 1e-12, 200)?;
                let fp = bp.to_flat();
                let fm = bm.to_flat();
                for row in 0..dims.n_b() {
                    let fd = (fp[row] - fm[row]) / (2.0 * h_step);
                    let gv = g.mat()[(row, r)];
                    worst_fd = worst_fd.max((fd - gv).abs() / gv.abs().max(1.0));
                }
            }
        }
        Ok((worst_fd, worst_cf, worst_zero))
    };
    match body() {
        Ok((fd, cf, zero)) => Check {
            name,
            passed: fd <= 1e-4 && cf <= 1e-10 && zero <= 1e-10,
            detail: format!(
                "{instances} instances: finite differences {fd:.2e} (tol 1e-4), \
                 closed-form diagonal columns {cf:.2e} (tol 1e-10), \
                 same-source zero structure {zero:.2e} (tol 1e-10)"
            ),
        },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Target-covariance oracle: the analytic covariance of the empirical
/// targets against a Monte-Carlo estimate, exact zeros where neither index
/// gate opens, and an exact fourth-moment enumeration at tiny sizes.
pub fn check_covariance_oracle(trials: usize, seed: u64) -> Check {
    let name = "covariance-oracle";
    let body = || -> Result<(f64, bool, f64)> {
        let mut rng = trial_rng(seed, 20_000);
        let (dims, bank, cs, pres) = mismatched_model(2, 2, 64, 3, &mut rng)?;
        let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
        let qidx = QIndexer::new(&dims);
        let cq = q_covariance_identity(&cs, &ps, &qidx);
        let qbar = expected_targets(&cs, &ps)?;
        let qbar_flat: Vec<f64> = qidx
            .elems()
            .iter()
            .map(|e| qbar.block(e.k, e.m1, e.m2)[(e.i - 1, e.j - 1)])
            .collect();
        let n = qidx.len();
        let chols: Vec<BandedChol> =
            pres.iter().map(|c| c.banded_cholesky()).collect::<Result<_>>()?;

        let mut s1 = vec![0.0f64; n * (n + 1) / 2];
        let mut s2 = vec![0.0f64; n * (n + 1) / 2];
        let mut d = vec![0.0f64; n];
        for trial in 0..trials {
            let mut rng = trial_rng(seed, trial as u64);
            let xs = gen_sources(&bank, dims.t, NoiseFamily::Gaussian, &mut rng);
            let qh = compute_targets_factored(&xs, &chols)?;
            for (r, e) in qidx.elems().iter().enumerate() {
                d[r] = qh.block(e.k, e.m1, e.m2)[(e.i - 1, e.j - 1)] - qbar_flat[r];
            }
            let mut idx = 0;
            for r1 in 0..n {
                for r2 in r1..n {
                    let v = d[r1] * d[r2];
                    s1[idx] += v;
                    s2[idx] += v * v;
                    idx += 1;
                }
            }
        }
        let nn = trials as f64;
        let mut worst_sigmas = 0.0f64;
        let mut zeros_exact = true;
        let mut idx = 0;
        for r1 in 0..n {
            let e1 = qidx.elem(r1);
            for r2 in r1..n {
                let e2 = qidx.elem(r2);
                let mean = s1[idx] / nn;
                let var = (s2[idx] / nn - mean * mean).max(0.0);
                let se = (var / nn).sqrt();
                let a = cq.get(r1, r2);
                if se > 0.0 {
                    worst_sigmas = worst_sigmas.max((mean - a).abs() / se);
                }
                let gate_a = e1.i == e2.i && e1.j == e2.j;
                let gate_b = e1.i == e2.j && e1.j == e2.i;
                if !gate_a && !gate_b && a != 0.0 {
                    zeros_exact = false;
                }
                idx += 1;
            }
        }
        let isserlis = isserlis_worst(seed)?;
        Ok((worst_sigmas, zeros_exact, isserlis))
    };
    match body() {
        Ok((sigmas, zeros, isserlis)) => Check {
            name,
            passed: sigmas <= 3.0 && zeros && isserlis <= 1e-10,
            detail: format!(
                "{trials} trials: worst deviation {sigmas:.2} standard errors (tol 3), \
                 ungated entries exactly zero: {zeros}, \
                 exact fourth-moment enumeration {isserlis:.2e} (tol 1e-10)"
            ),
        },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Exact check of the analytic target covariance at tiny sizes: every entry
/// against a full fourth-moment (pairing) enumeration over the stacked
/// Gaussian source vector.
fn isserlis_worst(seed: u64) -> Result<f64> {
    let mut rng = trial_rng(seed, 30_000);
    let (m, k, t, l) = (2usize, 2usize, 4usize, 2usize);
    let (dims, _, cs, pres) = mismatched_model(m, k, t, l, &mut rng)?;
    let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
    let qidx = QIndexer::new(&dims);
    let cq = q_covariance_identity(&cs, &ps, &qidx);

    // stacked vector of all sources in all datasets, index ((k, m), t)
    let dim = k * m * t;
    let mut sigma = DMatrix::zeros(dim, dim);
    for kk in 0..k {
        let full = cs[kk].assemble_full();
        let base = kk * m * t;
        for a in 0..m * t {
            for b in 0..m * t {
                sigma[(base + a, base + b)] = full[(a, b)];
            }
        }
    }
    let pfull: Vec<DMatrix<f64>> = ps.iter().map(|p| p.assemble_full()).collect();
    let a_mat = |r: usize| -> DMatrix<f64> {
        let e = qidx.elem(r);
        let mut a = DMatrix::zeros(dim, dim);
        for t1 in 0..t {
            for t2 in 0..t {
                a[(
                    ((e.i - 1) * m + (e.m1 - 1)) * t + t1,
                    ((e.j - 1) * m + (e.m2 - 1)) * t + t2,
                )] = pfull[e.k - 1][((e.m1 - 1) * t + t1, (e.m2 - 1) * t + t2)] / t as f64;
            }
        }
        a
    };
    let mut worst = 0.0f64;
    for r1 in 0..qidx.len() {
        let a1 = a_mat(r1);
        for r2 in r1..qidx.len() {
            let a2 = a_mat(r2);
            let cov = (a1.transpose() * &sigma * &a2 * &sigma).trace()
                + (a1.transpose() * &sigma * a2.transpose() * &sigma).trace();
            worst = worst.max((cov - cq.get(r1, r2)).abs());
        }
    }
    Ok(worst)
}

/// Solver certification: drilled residuals of every Newton solution,
/// mixing-equivariance of the full data path, and the scale-gain equations.
pub fn check_solver_certification(seed: u64) -> Check {
    let name = "solver-certification";
    let body = || -> Result<(f64, f64, f64)> {
        let mut worst_drill = 0.0f64;
        for inst in 0..10u64 {
            let mut rng = trial_rng(seed, 40_000 + inst);
            let m = rng.gen_range(1..=3);
            let k = rng.gen_range(2..=3);
            let l = rng.gen_range(2..=4);
            let (dims, bank, cs, pres) = mismatched_model(m, k, 128, l, &mut rng)?;
            let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
            let qbar = expected_targets(&cs, &ps)?;
            let qn = normalized_targets(&dims, &qbar)?;
            let ident = DemixingSet::identity(&dims);
            let (b, _) = newton_solve(&qn, &ident, 1e-11, 100)?;
            worst_drill = worst_drill.max(drilled_check(&b, &qn));
            // one data-driven solve per instance
            let chols: Vec<BandedChol> =
                pres.iter().map(|c| c.banded_cholesky()).collect::<Result<_>>()?;
            let xs = gen_sources(&bank, dims.t, NoiseFamily::Gaussian, &mut rng);
            let qh = compute_targets_factored(&xs, &chols)?;
            let (bh, _) = newton_solve(&qh, &ident, 1e-11, 100)?;
            worst_drill = worst_drill.max(drilled_check(&bh, &qh));
        }

        // equivariance: mixing the data and mapping the initial point must
        // reproduce the unmixed solve's global matrices exactly
        let mut rng = trial_rng(seed, 50_000);
        let (dims, bank, _, pres) = mismatched_model(2, 3, 512, 3, &mut rng)?;
        let chols: Vec<BandedChol> =
            pres.iter().map(|c| c.banded_cholesky()).collect::<Result<_>>()?;
        let sources = gen_sources(&bank, dims.t, NoiseFamily::Gaussian, &mut rng);
        let ident = DemixingSet::identity(&dims);
        let q_i = compute_targets_factored(&sources, &chols)?;
        let (b_i, _) = newton_solve(&q_i, &ident, 1e-11, 100)?;
        let mats: Vec<DMatrix<f64>> = (0..dims.m)
            .map(|_| loop {
                let a = DMatrix::from_fn(dims.k, dims.k, |r, c| {
                    (if r == c { 1.0 } else { 0.0 }) + 0.4 * std_normal(&mut rng)
                });
                if a.determinant().abs() >= 0.3 {
                    break a;
                }
            })
            .collect();
        let a_set = DemixingSet::new(mats)?;
        let a_inv: Vec<DMatrix<f64>> = a_set
            .mats()
            .iter()
            .map(|a| a.clone().try_inverse().ok_or(Error::SingularCovariance))
            .collect::<Result<_>>()?;
        let xs = mix(&a_set, &sources);
        let q_a = compute_targets_factored(&xs, &chols)?;
        let (b_a, _) = newton_solve(&q_a, &DemixingSet::new(a_inv)?, 1e-11, 100)?;
        let mut worst_equi = 0.0f64;
        for mm in 1..=dims.m {
            let global = b_a.mat(mm) * a_set.mat(mm);
            worst_equi = worst_equi.max((global - b_i.mat(mm)).amax());
        }

        // scale-gain equations on a mismatched model
        let mut rng = trial_rng(seed, 60_000);
        let (dims, _, cs, pres) = mismatched_model(3, 2, 256, 3, &mut rng)?;
        let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
        let qbar = expected_targets(&cs, &ps)?;
        let gains = asymptotic_gains(&qbar)?;
        let mut worst_gain = 0.0f64;
        for kk in 1..=dims.k {
            for m1 in 1..=dims.m {
                let s: f64 = (1..=dims.m)
                    .map(|m2| {
                        qbar.block(kk, m1, m2)[(kk - 1, kk - 1)] * gains[kk - 1][m2 - 1]
                    })
                    .sum();
                worst_gain = worst_gain.max((gains[kk - 1][m1 - 1] * s - 1.0).abs());
            }
        }
        Ok((worst_drill, worst_equi, worst_gain))
    };
    match body() {
        Ok((drill, equi, gain)) => Check {
            name,
            passed: drill <= 1e-10 && equi <= 1e-8 && gain <= 1e-10,
            detail: format!(
                "drilled residuals {drill:.2e} (tol 1e-10), \
                 mixing equivariance {equi:.2e} (tol 1e-8), \
                 scale-gain equations {gain:.2e} (tol 1e-10)"
            ),
        },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Mutation guards: an independent dense evaluation of the target covariance
/// agrees with the production formula, and deliberately corrupted variants
/// (second trace negated; its `1/T^2` dropped) are flagged.
pub fn check_mutation_guards(seed: u64) -> Check {
    let name = "mutation-guards";
    let body = || -> Result<(f64, f64, f64)> {
        let mut rng = trial_rng(seed, 70_000);
        let (m, k, t, l) = (2usize, 2usize, 8usize, 2usize);
        let (dims, _, cs, pres) = mismatched_model(m, k, t, l, &mut rng)?;
        let ps: Vec<ScvPrecision> = pres.iter().map(scv_precision).collect::<Result<_>>()?;
        let qidx = QIndexer::new(&dims);
        let cq = q_covariance_identity(&cs, &ps, &qidx);

        let pfull: Vec<DMatrix<f64>> = ps.iter().map(|p| p.assemble_full()).collect();
        let pblock = |kk: usize, m1: usize, m2: usize| -> DMatrix<f64> {
            pfull[kk - 1]
                .view(((m1 - 1) * t, (m2 - 1) * t), (t, t))
                .into_owned()
        };
        // Gaussian fourth moments pair the four source factors in two ways;
        // each pairing only survives when its source indices match, so the
        // entry is a sum of at most two dense trace terms.
        let dense = |second_sign: f64, second_scale: f64| -> DMatrix<f64> {
            let n = qidx.len();
            let mut mat = DMatrix::zeros(n, n);
            for r1 in 0..n {
                let e1 = qidx.elem(r1);
                let m1 = pblock(e1.k, e1.m1, e1.m2);
                for r2 in r1..n {
                    let e2 = qidx.elem(r2);
                    let m2m = pblock(e2.k, e2.m1, e2.m2);
                    let mut v = 0.0;
                    if e1.i == e2.i && e1.j == e2.j {
                        let cu = cs[e1.i - 1].block_dense(e1.m1, e2.m1);
                        let cv = cs[e1.j - 1].block_dense(e1.m2, e2.m2);
                        v += (m1.transpose() * &cu * &m2m * cv.transpose()).trace()
                            / (t * t) as f64;
                    }
                    if e1.i == e2.j && e1.j == e2.i {
                        let cyu = cs[e1.j - 1].block_dense(e1.m2, e2.m1);
                        let cxv = cs[e1.i - 1].block_dense(e1.m1, e2.m2);
                        v += second_sign * second_scale
                            * (&m1 * &cyu * &m2m * cxv.transpose()).trace()
                            / (t * t) as f64;
                    }
                    mat[(r1, r2)] = v;
                    mat[(r2, r1)] = v;
                }
            }
            mat
        };
        let agree = (dense(1.0, 1.0) - cq.mat()).amax();
        let flip = (dense(-1.0, 1.0) - cq.mat()).amax();
        let unscaled = (dense(1.0, (t * t) as f64) - cq.mat()).amax();
        Ok((agree, flip, unscaled))
    };
    match body() {
        Ok((agree, flip, unscaled)) => Check {
            name,
            passed: agree <= 1e-10 && flip > 1e-6 && unscaled > 1e-6,
            detail: format!(
                "independent dense covariance agrees to {agree:.2e} (tol 1e-10); \
                 negated second trace shifts it by {flip:.2e} (detected), \
                 dropped 1/T^2 shifts it by {unscaled:.2e} (detected)"
            ),
        },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}
