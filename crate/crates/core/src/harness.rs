//! Monte-Carlo experiments: scene and operator generation, one trial per
//! (sweep value, algorithm, seed), sweeps over one parameter, runtime
//! benchmarks and result files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fista_solve, omp_solve, BaselineAlgorithm, BaselineConfig, OmpAtoms};
use crate::channel_model::{build_dictionaries, generate_scene, ChannelRealization, NoiseSpec, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{fro2, median, CMat};
use crate::measurement::{add_noise, calibrate_noise, MeasurementOperator};
use crate::metrics::{aer, channel_nmse, detect_activity, oracle_threshold, FALLBACK_THRESHOLD};
use crate::solver::{solve, MrasRun, SolverConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "RG-MRAS")]
    RgMras,
    #[serde(rename = "RC-MRAS")]
    RcMras,
    #[serde(rename = "FISTA")]
    Fista,
    #[serde(rename = "OMP")]
    Omp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::RgMras, Algorithm::RcMras, Algorithm::Fista, Algorithm::Omp];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RgMras => "RG-MRAS",
            Algorithm::RcMras => "RC-MRAS",
            Algorithm::Fista => "FISTA",
            Algorithm::Omp => "OMP",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RG-MRAS" | "RG" => Ok(Algorithm::RgMras),
            "RC-MRAS" | "RC" => Ok(Algorithm::RcMras),
            "FISTA" => Ok(Algorithm::Fista),
            "OMP" => Ok(Algorithm::Omp),
            _ => Err(Error::Parse(format!("unknown algorithm {s:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The swept scenario or solver parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "p")]
    Spread,
    #[serde(rename = "B_p")]
    PilotLength,
    /// Activity ratio `K / N`.
    #[serde(rename = "K/N")]
    Activity,
    #[serde(rename = "K")]
    Active,
    /// Number of devices at the base activity ratio.
    #[serde(rename = "N")]
    Devices,
    #[serde(rename = "SNR")]
    Snr,
    #[serde(rename = "L_max")]
    Clusters,
    #[serde(rename = "L_hat")]
    AssumedRank,
    /// `M = M_p = M_1 = D`.
    #[serde(rename = "M")]
    Antennas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// How the activity threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// From the true state matrices of each scene.
    Oracle,
    Fixed(f64),
}

fn default_trials() -> usize {
    50
}
fn default_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}
fn default_threshold() -> Threshold {
    Threshold::Oracle
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub system: SystemConfig,
    pub solver: SolverConfig,
    pub baseline: BaselineConfig,
    pub sweep: Sweep,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: Threshold,
    /// Scale every active device to the same received power, so that each
    /// device sees the target SNR.
    #[serde(default = "default_true")]
    pub power_control: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// One fully resolved sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialPoint {
    pub sweep_value: f64,
    pub system: SystemConfig,
    pub solver: SolverConfig,
    pub baseline: BaselineConfig,
    pub threshold: Threshold,
    pub power_control: bool,
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidConfig(format!("{what} = {v} is not a count")))
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(Error::InvalidConfig("sweep has no values".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::InvalidConfig("no algorithms selected".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        self.solver.validate()?;
        self.baseline.validate()?;
        for i in 0..self.sweep.values.len() {
            self.point(i)?;
        }
        Ok(())
    }

    /// Resolves sweep value `index` into concrete configs.
    pub fn point(&self, index: usize) -> Result<TrialPoint> {
        let v = *self
            .sweep
            .values
            .get(index)
            .ok_or_else(|| Error::InvalidConfig(format!("sweep index {index} out of range")))?;
        let mut sys = self.system.clone();
        let mut solver = self.solver.clone();
        match self.sweep.param {
            SweepParam::Spread => sys.p = as_count(v, "p")?,
            SweepParam::PilotLength => sys.b_p = as_count(v, "B_p")?,
            SweepParam::Activity => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidConfig(format!("K/N = {v} outside [0, 1]")));
                }
                sys.k = (v * sys.n as f64).round() as usize;
            }
            SweepParam::Active => sys.k = as_count(v, "K")?,
            SweepParam::Devices => {
                let ratio = self.system.k as f64 / self.system.n as f64;
                sys.n = as_count(v, "N")?;
                sys.k = (ratio * sys.n as f64).round() as usize;
                sys.l_n = None;
            }
            SweepParam::Snr => sys = sys.with_snr_db(v),
            SweepParam::Clusters => {
                sys.l_max = as_count(v, "L_max")?;
                sys.l_n = None;
            }
            SweepParam::AssumedRank => solver.rank = Some(as_count(v, "L_hat")?),
            SweepParam::Antennas => {
                let m = as_count(v, "M")?;
                sys.m = m;
                sys.m_p = m;
                sys.m_1 = m;
                if m > sys.b {
                    return Err(Error::InvalidConfig(format!("D = M = {m} exceeds B = {}", sys.b)));
                }
                sys = sys.with_delay_grid(m);
            }
        }
        sys.validate()?;
        solver.validate()?;
        Ok(TrialPoint {
            sweep_value: v,
            system: sys,
            solver,
            baseline: self.baseline.clone(),
            threshold: self.threshold,
            power_control: self.power_control,
        })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tag for the scene stream, shared by all algorithms of a cell.
pub const SCENE_TAG: u64 = 0;

/// Hash of `(base, sweep index, stream tag, trial index)`.
pub fn derive_seed(base: u64, sweep_index: usize, tag: u64, trial: usize) -> u64 {
    let mut h = splitmix(base);
    for x in [sweep_index as u64, tag, trial as u64] {
        h = splitmix(h ^ x);
    }
    h
}

/// Scene, operator and noisy observation of one trial.
#[derive(Clone, Debug)]
pub struct Instance {
    pub scene: ChannelRealization,
    pub op: MeasurementOperator,
    pub y: CMat,
    pub sigma2: f64,
    pub a_theta: CMat,
    pub a_tau: CMat,
}

/// Scales each active device, gains included, so that
/// `||B X_n A_n||^2 = M_p B_p`.
pub fn equalize_received_power(scene: &mut ChannelRealization, op: &MeasurementOperator) {
    for &k in &scene.support {
        let e = fro2(&op.forward_device(k, &scene.state[k])) / op.measurements() as f64;
        if e > 0.0 {
            let c = e.sqrt().recip();
            scene.state[k] *= Complex64::new(c, 0.0);
            let g = Complex64::new(c.sqrt(), 0.0);
            for cl in scene.params[k].clusters.iter_mut() {
                cl.angle_gains.iter_mut().for_each(|z| *z *= g);
                cl.delay_gains.iter_mut().for_each(|z| *z *= g);
            }
        }
    }
}

/// Draws scene, operator and noise from one seed.
pub fn prepare_instance(sys: &SystemConfig, seed: u64, power_control: bool) -> Result<Instance> {
    sys.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = generate_scene(sys, &mut rng);
    let op = MeasurementOperator::random(sys, &mut rng)?;
    if power_control {
        equalize_received_power(&mut scene, &op);
    }
    let xs = scene.device_matrices();
    let clean = op.forward(&xs)?;
    let sigma2 = match sys.noise() {
        NoiseSpec::Noiseless => 0.0,
        NoiseSpec::Variance(v) => v,
        NoiseSpec::SnrDb(snr) => calibrate_noise(&op, &xs, &scene.support, snr),
    };
    let y = add_noise(&clean, sigma2, &mut rng);
    let (a_theta, a_tau) = build_dictionaries(sys);
    Ok(Instance {
        scene,
        op,
        y,
        sigma2,
        a_theta,
        a_tau,
    })
}

/// One row of the raw result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    #[serde(with = "nonfinite")]
    pub aer: f64,
    #[serde(with = "nonfinite")]
    pub nmse: f64,
    pub seconds: f64,
    pub iterations: usize,
    #[serde(with = "nonfinite")]
    pub loss: f64,
    #[serde(default)]
    pub failed: bool,
}

/// Non-finite floats as the strings `NaN`, `inf` and `-inf`, which JSON
/// cannot carry as numbers.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

struct Outcome {
    xs: Vec<CMat>,
    iterations: usize,
    loss: f64,
}

fn run_algorithm(inst: &Instance, point: &TrialPoint, algorithm: Algorithm, seed: u64) -> Result<Outcome> {
    let sys = &point.system;
    match algorithm {
        Algorithm::RgMras | Algorithm::RcMras => {
            let mut cfg = point.solver.clone();
            cfg.variant = if algorithm == Algorithm::RgMras {
                Variant::Rg
            } else {
                Variant::Rc
            };
            cfg.seed = seed;
            let out = solve(&inst.op, &inst.y, sys.l_max, &cfg, None)?;
            Ok(Outcome {
                xs: out.xs,
                iterations: out.trace.iterations(),
                loss: out.trace.loss.last().copied().unwrap_or(f64::NAN),
            })
        }
        Algorithm::Fista => {
            let cfg = BaselineConfig {
                algorithm: BaselineAlgorithm::Fista,
                ..point.baseline.clone()
            };
            let out = fista_solve(&inst.op, &inst.y, &cfg)?;
            Ok(Outcome {
                xs: out.xs,
                iterations: out.iterations,
                loss: out.objective,
            })
        }
        Algorithm::Omp => {
            let cfg = BaselineConfig {
                algorithm: BaselineAlgorithm::Omp,
                ..point.baseline.clone()
            };
            let budget = match cfg.omp_atoms {
                OmpAtoms::Block => sys.k.clamp(1, sys.n),
                OmpAtoms::Entry => (sys.k * sys.p * sys.p * sys.l_max).max(1),
            };
            let out = omp_solve(&inst.op, &inst.y, &cfg, budget)?;
            Ok(Outcome {
                xs: out.xs,
                iterations: out.iterations,
                loss: out.objective,
            })
        }
    }
}

/// Scores one algorithm on a prepared instance.
pub fn score_instance(
    inst: &Instance,
    point: &TrialPoint,
    algorithm: Algorithm,
    seed: u64,
    alg_seed: u64,
) -> ResultRecord {
    let t0 = Instant::now();
    let outcome = run_algorithm(inst, point, algorithm, alg_seed);
    let seconds = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => {
            let v1 = match point.threshold {
                Threshold::Oracle => oracle_threshold(&inst.scene),
                Threshold::Fixed(v) => v,
            };
            let det = detect_activity(&o.xs, v1);
            let truth = inst.scene.device_matrices();
            let support = &inst.scene.support;
            ResultRecord {
                sweep_value: point.sweep_value,
                algorithm,
                seed,
                aer: aer(support, &det.support, point.system.n),
                nmse: channel_nmse(&truth, &o.xs, support, &det.support, &inst.a_theta, &inst.a_tau),
                seconds,
                iterations: o.iterations,
                loss: o.loss,
                failed: false,
            }
        }
        Err(e) => {
            warn!("{algorithm} failed at {} (seed {seed}): {e}", point.sweep_value);
            ResultRecord {
                sweep_value: point.sweep_value,
                algorithm,
                seed,
                aer: f64::NAN,
                nmse: f64::NAN,
                seconds,
                iterations: 0,
                loss: f64::NAN,
                failed: true,
            }
        }
    }
}

/// Generates the instance for `seed`, runs `algorithm` and scores it.
///
/// Solver errors produce a record flagged `failed`.
pub fn run_trial(point: &TrialPoint, algorithm: Algorithm, seed: u64) -> ResultRecord {
    let alg_seed = splitmix(seed ^ algorithm.tag());
    match prepare_instance(&point.system, seed, point.power_control) {
        Ok(inst) => score_instance(&inst, point, algorithm, seed, alg_seed),
        Err(e) => {
            warn!("instance generation failed (seed {seed}): {e}");
            ResultRecord {
                sweep_value: point.sweep_value,
                algorithm,
                seed,
                aer: f64::NAN,
                nmse: f64::NAN,
                seconds: 0.0,
                iterations: 0,
                loss: f64::NAN,
                failed: true,
            }
        }
    }
}

/// Per-cell summary over the non-failed trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub failures: usize,
    #[serde(with = "nonfinite")]
    pub mean_aer: f64,
    #[serde(with = "nonfinite")]
    pub median_aer: f64,
    #[serde(with = "nonfinite")]
    pub mean_nmse: f64,
    #[serde(with = "nonfinite")]
    pub median_nmse: f64,
    #[serde(with = "nonfinite")]
    pub median_seconds: f64,
    #[serde(with = "nonfinite")]
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub param: SweepParam,
    pub records: Vec<ResultRecord>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median_or_nan(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        median(v)
    }
}

impl ResultTable {
    /// Groups by sweep value in table order, then by algorithm.
    pub fn aggregate(&self) -> Vec<AggregateRecord> {
        let mut order: Vec<f64> = Vec::new();
        let mut cells: BTreeMap<(usize, Algorithm), Vec<&ResultRecord>> = BTreeMap::new();
        for r in &self.records {
            let idx = match order.iter().position(|&v| v.to_bits() == r.sweep_value.to_bits()) {
                Some(i) => i,
                None => {
                    order.push(r.sweep_value);
                    order.len() - 1
                }
            };
            cells.entry((idx, r.algorithm)).or_default().push(r);
        }
        cells
            .into_iter()
            .map(|((idx, algorithm), rows)| {
                let ok: Vec<&ResultRecord> = rows.iter().copied().filter(|r| !r.failed).collect();
                let col = |f: fn(&ResultRecord) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
                let aers = col(|r| r.aer);
                let nmses = col(|r| r.nmse);
                AggregateRecord {
                    sweep_value: order[idx],
                    algorithm,
                    trials: rows.len(),
                    failures: rows.len() - ok.len(),
                    mean_aer: mean(&aers),
                    median_aer: median_or_nan(&aers),
                    mean_nmse: mean(&nmses),
                    median_nmse: median_or_nan(&nmses),
                    median_seconds: median_or_nan(&col(|r| r.seconds)),
                    mean_iterations: mean(&col(|r| r.iterations as f64)),
                }
            })
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Every (sweep value, algorithm, trial) cell. Algorithms of the same sweep
/// value and trial see the same scene; records come back sorted by sweep
/// index, algorithm and trial.
pub fn run_sweep(spec: &ExperimentSpec, threads: Option<usize>) -> Result<ResultTable> {
    spec.validate()?;
    let points: Vec<TrialPoint> = (0..spec.sweep.values.len())
        .map(|i| spec.point(i))
        .collect::<Result<_>>()?;
    let mut algos = spec.algorithms.clone();
    algos.sort();
    algos.dedup();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|i| (0..spec.trials).map(move |t| (i, t)))
        .collect();
    info!(
        "sweep {:?}: {} points x {} trials x {} algorithms",
        spec.sweep.param,
        points.len(),
        spec.trials,
        algos.len()
    );
    let mut rows: Vec<(usize, usize, ResultRecord)> = with_pool(threads, || {
        jobs.par_iter()
            .flat_map_iter(|&(i, t)| {
                let seed = derive_seed(spec.seed, i, SCENE_TAG, t);
                let inst = prepare_instance(&points[i].system, seed, points[i].power_control);
                algos
                    .iter()
                    .map(|&a| {
                        let rec = match &inst {
                            Ok(inst) => {
                                score_instance(inst, &points[i], a, seed, derive_seed(spec.seed, i, a.tag(), t))
                            }
                            Err(_) => run_trial(&points[i], a, seed),
                        };
                        (i, t, rec)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    })?;
    rows.sort_by_key(|a| (a.0, a.2.algorithm, a.1));
    let table = ResultTable {
        param: spec.sweep.param,
        records: rows.into_iter().map(|r| r.2).collect(),
    };
    if table.failures() > 0 {
        warn!("{} of {} trials failed", table.failures(), table.records.len());
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    /// Median wall time of one iteration.
    pub seconds_per_iteration: f64,
    pub samples: usize,
}

/// Median per-iteration wall time for each sweep value and algorithm.
///
/// MRAS iterations are timed individually after the spectral start; the
/// baselines are timed as a whole and divided by their iteration count.
/// Runs single threaded.
pub fn benchmark_runtime(spec: &ExperimentSpec, iterations: usize) -> Result<Vec<TimingRecord>> {
    spec.validate()?;
    let iterations = iterations.max(1);
    let mut out = Vec::new();
    for i in 0..spec.sweep.values.len() {
        let point = spec.point(i)?;
        for &alg in &spec.algorithms {
            let mut samples = Vec::new();
            for t in 0..spec.trials {
                let inst = prepare_instance(
                    &point.system,
                    derive_seed(spec.seed, i, SCENE_TAG, t),
                    point.power_control,
                )?;
                match alg {
                    Algorithm::RgMras | Algorithm::RcMras => {
                        let mut cfg = point.solver.clone();
                        cfg.variant = if alg == Algorithm::RgMras {
                            Variant::Rg
                        } else {
                            Variant::Rc
                        };
                        cfg.tol = 0.0;
                        let mut run = MrasRun::new(&inst.op, &inst.y, point.system.l_max, &cfg)?;
                        for it in 0..iterations {
                            let t0 = Instant::now();
                            run.iterate(it)?;
                            samples.push(t0.elapsed().as_secs_f64());
                        }
                    }
                    Algorithm::Fista | Algorithm::Omp => {
                        let mut p = point.clone();
                        p.baseline.max_iter = iterations;
                        let t0 = Instant::now();
                        let o = run_algorithm(&inst, &p, alg, 0)?;
                        samples.push(t0.elapsed().as_secs_f64() / o.iterations.max(1) as f64);
                    }
                }
            }
            out.push(TimingRecord {
                sweep_value: point.sweep_value,
                algorithm: alg,
                seconds_per_iteration: median(&samples),
                samples: samples.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    All,
}

/// One curve of the plot data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub algorithm: Algorithm,
    pub x: Vec<f64>,
    #[serde(with = "nonfinite_vec")]
    pub median_nmse: Vec<f64>,
    #[serde(with = "nonfinite_vec")]
    pub mean_nmse: Vec<f64>,
    #[serde(with = "nonfinite_vec")]
    pub mean_aer: Vec<f64>,
}

mod nonfinite_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "super::nonfinite")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            seq.serialize_element(&W(x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub param: SweepParam,
    pub series: Vec<Series>,
}

pub fn plot_data(table: &ResultTable) -> PlotData {
    let agg = table.aggregate();
    let mut algos: Vec<Algorithm> = agg.iter().map(|a| a.algorithm).collect();
    algos.sort();
    algos.dedup();
    let series = algos
        .into_iter()
        .map(|alg| {
            let rows: Vec<&AggregateRecord> = agg.iter().filter(|a| a.algorithm == alg).collect();
            Series {
                algorithm: alg,
                x: rows.iter().map(|r| r.sweep_value).collect(),
                median_nmse: rows.iter().map(|r| r.median_nmse).collect(),
                mean_nmse: rows.iter().map(|r| r.mean_nmse).collect(),
                mean_aer: rows.iter().map(|r| r.mean_aer).collect(),
            }
        })
        .collect();
    PlotData {
        param: table.param,
        series,
    }
}

pub fn write_records_csv<W: Write, T: Serialize>(rows: &[T], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<ResultRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn create(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)?;
    written.push(path);
    Ok(BufWriter::new(f))
}

/// Writes `records.*`, `aggregate.*`, `plot.json` and one
/// `series_<algorithm>.csv` per algorithm into `dir`.
pub fn emit_results(table: &ResultTable, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    if table.records.is_empty() {
        return Err(Error::InvalidConfig("nothing to write".into()));
    }
    std::fs::create_dir_all(dir)?;
    let agg = table.aggregate();
    let mut written = Vec::new();
    if matches!(format, Format::Csv | Format::All) {
        write_records_csv(&table.records, create(dir, "records.csv", &mut written)?)?;
        write_records_csv(&agg, create(dir, "aggregate.csv", &mut written)?)?;
    }
    if matches!(format, Format::Json | Format::All) {
        serde_json::to_writer_pretty(create(dir, "records.json", &mut written)?, table)?;
        serde_json::to_writer_pretty(create(dir, "aggregate.json", &mut written)?, &agg)?;
    }
    let plot = plot_data(table);
    serde_json::to_writer_pretty(create(dir, "plot.json", &mut written)?, &plot)?;
    for s in &plot.series {
        let mut w = csv::Writer::from_writer(create(dir, &format!("series_{}.csv", s.algorithm), &mut written)?);
        w.write_record(["x", "median_nmse", "mean_nmse", "mean_aer"])?;
        for i in 0..s.x.len() {
            w.write_record([s.x[i], s.median_nmse[i], s.mean_nmse[i], s.mean_aer[i]].map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    Ok(written)
}

/// Preset names accepted by [`preset`].
pub const PRESETS: [&str; 9] = [
    "fig2",
    "fig2-full",
    "fig3",
    "fig4",
    "fig5",
    "fig6",
    "fig7",
    "fig8",
    "fig9",
];

/// Desk-scale replicas of the standard experiments. `fig2-full` keeps the
/// full dimensions and takes hours.
pub fn preset(name: &str) -> Option<ExperimentSpec> {
    let desk = SystemConfig::new(16, 5, 32, 32, 32, 512, 96, 1.0 / 16.0, 2, 6);
    let base = |name: &str, system: SystemConfig, param: SweepParam, values: Vec<f64>| ExperimentSpec {
        name: name.into(),
        system,
        solver: SolverConfig::new(Variant::Rg),
        baseline: BaselineConfig::fista(),
        sweep: Sweep { param, values },
        trials: default_trials(),
        algorithms: default_algorithms(),
        seed: 1,
        threshold: Threshold::Oracle,
        power_control: true,
        out: None,
    };
    let spec = match name {
        "fig2" => {
            let mut s = base(name, desk, SweepParam::Spread, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
            s.solver.step_scale = 16.0;
            s.solver.nu = 0.0;
            s.baseline.lambda_rel = 0.01;
            s
        }
        "fig2-full" => base(
            name,
            SystemConfig::new(60, 18, 64, 64, 64, 4096, 370, 1.0 / 64.0, 2, 6),
            SweepParam::Spread,
            vec![2.0, 4.0, 6.0, 8.0, 10.0],
        ),
        "fig3" => base(
            name,
            SystemConfig::new(8, 2, 32, 32, 32, 512, 96, 1.0 / 16.0, 2, 5),
            SweepParam::PilotLength,
            vec![32.0, 48.0, 64.0, 96.0, 128.0],
        ),
        "fig4" => {
            let mut s = base(
                name,
                SystemConfig::new(8, 4, 16, 16, 16, 512, 12, 1.0 / 32.0, 2, 4),
                SweepParam::Antennas,
                vec![16.0, 24.0, 32.0, 48.0, 64.0],
            );
            s.trials = 3;
            s.algorithms = vec![Algorithm::RgMras, Algorithm::RcMras, Algorithm::Fista];
            s
        }
        "fig5" => base(name, desk, SweepParam::Activity, vec![0.125, 0.25, 0.5, 0.75]),
        "fig6" => base(
            name,
            SystemConfig::new(16, 5, 32, 32, 32, 512, 96, 1.0 / 16.0, 2, 6),
            SweepParam::Devices,
            vec![8.0, 16.0, 24.0, 32.0],
        ),
        "fig7" => {
            let mut s = base(
                name,
                SystemConfig::new(8, 2, 32, 32, 32, 512, 96, 1.0 / 16.0, 2, 4),
                SweepParam::Snr,
                vec![0.0, 5.0, 10.0, 15.0, 20.0],
            );
            s.solver.step_scale = 16.0;
            s.solver.nu = 3.0;
            s
        }
        "fig8" => base(name, desk, SweepParam::Clusters, vec![1.0, 2.0, 3.0, 4.0]),
        "fig9" => {
            let mut s = base(
                name,
                SystemConfig::new(8, 2, 16, 16, 16, 512, 256, 1.0 / 32.0, 2, 3),
                SweepParam::AssumedRank,
                vec![1.0, 2.0, 3.0, 4.0, 5.0],
            );
            s.solver.step_scale = 16.0;
            s.solver.nu = 0.0;
            s.algorithms = vec![Algorithm::RgMras];
            s
        }
        _ => return None,
    };
    Some(spec)
}

/// Fixed threshold used by callers without ground truth.
pub fn fallback_threshold() -> Threshold {
    Threshold::Fixed(FALLBACK_THRESHOLD)
}
