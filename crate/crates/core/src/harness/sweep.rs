//! Iteration and subcarrier sweeps over held-out realizations.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::channel::{Dataset, LinkModel};
use crate::error::{Error, Result};
use crate::phase_opt::{alternating_optimize, tune_gd_step, AoOptions, Method, UnfoldingParams};
use crate::scenario::ScenarioConfig;
use crate::training::TrainingState;

/// Which axis a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Stages per block `T`, with `I_max` fixed.
    Inner,
    /// Outer iterations `I_max`, with `T` fixed.
    Outer,
    /// Subcarriers per band `M_L = M_H`, with `T` and `I_max` fixed.
    Subcarriers,
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inner" | "inner_t" => Ok(Self::Inner),
            "outer" | "outer_i" => Ok(Self::Outer),
            "subcarriers" => Ok(Self::Subcarriers),
            _ => Err(Error::InvalidValue("kind".into(), s.into())),
        }
    }
}

/// A sweep request. `t` and `i_max` hold the values of the axes that are
/// not swept.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub grid: Vec<usize>,
    pub methods: Vec<Method>,
    pub n_eval: usize,
    pub t: usize,
    pub i_max: usize,
    /// Trained states for the unfolded methods; several per method are
    /// allowed and the closest one covering each grid point is used.
    pub checkpoints: Vec<(Method, TrainingState)>,
    /// First dataset index used for evaluation; defaults to the largest
    /// index consumed by any checkpoint.
    pub eval_offset: Option<usize>,
    pub allow_config_drift: bool,
    pub threads: usize,
    pub opts: AoOptions,
}

/// One `(method, grid value, realization)` evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub t: usize,
    pub i_max: usize,
    pub m_low: usize,
    pub m_high: usize,
    pub realization_id: usize,
    pub r_total: f64,
    pub r_low: f64,
    pub r_high: f64,
    pub wall_ms: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub fingerprint: String,
    /// Tuned GD step per grid config, as `(M per band, η)`.
    pub gd_steps: Vec<(usize, f64)>,
    pub rows: Vec<ResultRow>,
}

pub const CSV_HEADER: &str =
    "method,T,I_max,M_L,M_H,realization_id,R_total_bps,R_L_bps,R_H_bps,wall_ms,failed";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        let steps: Vec<String> = self.gd_steps.iter().map(|(m, e)| format!("M{m}:{e:e}")).collect();
        let _ = writeln!(out, "# fingerprint={} gd_eta={}", self.fingerprint, steps.join(";"));
        for r in &self.rows {
            let rates = if r.failed {
                ",,".to_string()
            } else {
                format!("{},{},{}", r.r_total, r.r_low, r.r_high)
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3},{}",
                r.method,
                r.t,
                r.i_max,
                r.m_low,
                r.m_high,
                r.realization_id,
                rates,
                r.wall_ms,
                u8::from(r.failed)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean total rate of the successful rows of one `(method, grid value)`.
    pub fn mean_rate(&self, method: Method, kind: SweepKind, value: usize) -> Option<f64> {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && !r.failed && grid_value(kind, r) == value)
            .map(|r| r.r_total)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

fn grid_value(kind: SweepKind, r: &ResultRow) -> usize {
    match kind {
        SweepKind::Inner => r.t,
        SweepKind::Outer => r.i_max,
        SweepKind::Subcarriers => r.m_low,
    }
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidValue("grid".into(), "must be non-empty and strictly increasing".into()));
        }
        if self.methods.is_empty() || self.n_eval == 0 {
            return Err(Error::InvalidValue("sweep".into(), "needs methods and evaluation realizations".into()));
        }
        if self.grid.contains(&0) {
            return Err(Error::InvalidValue("grid".into(), "values must be positive".into()));
        }
        Ok(())
    }

    /// `(I_max, T)` at which the GD step is tuned: the largest grid point.
    pub fn tuning_shape(&self) -> (usize, usize) {
        let horizon = self.grid.last().copied().unwrap_or(1);
        match self.kind {
            SweepKind::Inner => (self.i_max, horizon),
            SweepKind::Outer => (horizon, self.t),
            SweepKind::Subcarriers => (self.i_max, self.t),
        }
    }

    /// `(config, I_max, T)` of one grid point.
    fn point(&self, cfg: &ScenarioConfig, value: usize) -> (ScenarioConfig, usize, usize) {
        match self.kind {
            SweepKind::Inner => (cfg.clone(), self.i_max, value),
            SweepKind::Outer => (cfg.clone(), value, self.t),
            SweepKind::Subcarriers => (
                ScenarioConfig {
                    m_low: value,
                    m_high: value,
                    ..cfg.clone()
                },
                self.i_max,
                self.t,
            ),
        }
    }
}

/// Parameters of an unfolded method at `(i_max, t)`: an exact checkpoint if
/// one exists, otherwise the smallest one that covers the point, truncated.
pub fn select_checkpoint(
    checkpoints: &[(Method, TrainingState)],
    method: Method,
    i_max: usize,
    t: usize,
) -> Result<UnfoldingParams> {
    checkpoints
        .iter()
        .filter(|(m, s)| *m == method && s.params.i_max >= i_max && s.params.t >= t)
        .min_by_key(|(_, s)| (s.params.i_max * s.params.t, s.params.i_max))
        .map(|(_, s)| s.params.truncate(i_max, t))
        .unwrap_or_else(|| Err(Error::MissingCheckpoint(format!("{method} at I_max={i_max}, T={t}"))))
}

/// GD step of a sweep: the grid search on dataset realization 0 of `cfg`.
pub fn gd_reference_step(
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    (i_max, t): (usize, usize),
    opts: &AoOptions,
) -> Result<f64> {
    let link = LinkModel::<f64>::new(cfg, dataset.materialize_unchecked(cfg, 0)?)?;
    Ok(tune_gd_step(&link, i_max, t, opts)?.0)
}

struct Task {
    method: Method,
    point: usize,
    realization: usize,
}

/// Runs the sweep; rows are sorted by method, grid value and realization.
pub fn run_sweep(spec: &SweepSpec, cfg: &ScenarioConfig, dataset: &Dataset) -> Result<SweepResult> {
    spec.validate()?;
    dataset.check_fingerprint(cfg)?;
    for (m, s) in &spec.checkpoints {
        if s.fingerprint != cfg.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: cfg.fingerprint(),
                found: format!("{} (checkpoint for {m})", s.fingerprint),
            });
        }
    }
    let offset = spec
        .eval_offset
        .unwrap_or_else(|| spec.checkpoints.iter().map(|(_, s)| s.n_consumed).max().unwrap_or(0));
    if offset + spec.n_eval > dataset.n {
        return Err(Error::InvalidValue(
            "n_eval".into(),
            format!("{} realizations from index {offset} exceed the dataset ({})", spec.n_eval, dataset.n),
        ));
    }

    // per grid point: config, shape, GD step, parameters per method
    let mut points = Vec::with_capacity(spec.grid.len());
    let mut gd_steps: Vec<(usize, f64)> = Vec::new();
    let mut step_for = |pcfg: &ScenarioConfig| -> Result<f64> {
        let m = pcfg.m_low;
        if let Some(&(_, e)) = gd_steps.iter().find(|(mm, _)| *mm == m) {
            return Ok(e);
        }
        let e = gd_reference_step(pcfg, dataset, spec.tuning_shape(), &spec.opts)?;
        log::info!("GD step for M={m}: {e:e}");
        gd_steps.push((m, e));
        Ok(e)
    };
    for &value in &spec.grid {
        let (pcfg, i_max, t) = spec.point(cfg, value);
        let drifted = pcfg.fingerprint() != cfg.fingerprint();
        if drifted && !spec.allow_config_drift {
            return Err(Error::FingerprintMismatch {
                expected: cfg.fingerprint(),
                found: pcfg.fingerprint(),
            });
        }
        let eta = step_for(&pcfg)?;
        let params = spec
            .methods
            .iter()
            .map(|&method| match method {
                Method::Gd => Ok(UnfoldingParams::gd(i_max, t, eta)),
                _ => select_checkpoint(&spec.checkpoints, method, i_max, t),
            })
            .collect::<Result<Vec<_>>>()?;
        points.push((pcfg, params));
    }
    gd_steps.sort_by_key(|&(m, _)| m);

    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let mut tasks = Vec::new();
    for &method in &methods {
        for point in 0..spec.grid.len() {
            for realization in offset..offset + spec.n_eval {
                tasks.push(Task {
                    method,
                    point,
                    realization,
                });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let sink: Mutex<Vec<Option<ResultRow>>> = Mutex::new(vec![None; tasks.len()]);
    let fatal: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(task) = tasks.get(i) else { break };
        let (pcfg, params) = &points[task.point];
        let slot = spec.methods.iter().position(|m| *m == task.method).expect("method listed");
        match evaluate(pcfg, dataset, task, &params[slot], &spec.opts) {
            Ok(row) => sink.lock().expect("sink lock")[i] = Some(row),
            Err(e) => {
                *fatal.lock().expect("error lock") = Some(e);
                break;
            }
        }
    };
    let threads = spec.threads.max(1).min(tasks.len().max(1));
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    if let Some(e) = fatal.into_inner().expect("error lock") {
        return Err(e);
    }
    let rows = sink
        .into_inner()
        .expect("sink lock")
        .into_iter()
        .map(|r| r.expect("every task produced a row"))
        .collect();
    Ok(SweepResult {
        fingerprint: cfg.fingerprint(),
        gd_steps,
        rows,
    })
}

/// One AO run; numerical failures become flagged rows, anything else aborts.
fn evaluate(
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    task: &Task,
    params: &UnfoldingParams,
    opts: &AoOptions,
) -> Result<ResultRow> {
    let link = LinkModel::<f64>::new(cfg, dataset.materialize_unchecked(cfg, task.realization)?)?;
    let start = Instant::now();
    let outcome = alternating_optimize(&link, params, opts);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut row = ResultRow {
        method: task.method,
        t: params.t,
        i_max: params.i_max,
        m_low: cfg.m_low,
        m_high: cfg.m_high,
        realization_id: task.realization,
        r_total: f64::NAN,
        r_low: f64::NAN,
        r_high: f64::NAN,
        wall_ms,
        failed: false,
    };
    match outcome {
        Ok(trace) => {
            let r = trace.final_rate();
            row.r_total = r.total;
            row.r_low = r.rate_low;
            row.r_high = r.rate_high;
        }
        Err(
            e @ (Error::SingularSystem(_)
            | Error::NotPositiveDefinite(_)
            | Error::ZeroChannel { .. }
            | Error::NonFiniteInput(_)),
        ) => {
            log::warn!("{} realization {} failed: {e}", task.method, task.realization);
            row.failed = true;
        }
        Err(e) => return Err(e),
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::make_dataset;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            grid_rows: 2,
            grid_cols: 2,
            m_low: 1,
            m_high: 1,
            ..ScenarioConfig::desk()
        }
    }

    fn gd_spec(kind: SweepKind, grid: Vec<usize>) -> SweepSpec {
        SweepSpec {
            kind,
            grid,
            methods: vec![Method::Gd],
            n_eval: 2,
            t: 2,
            i_max: 1,
            checkpoints: Vec::new(),
            eval_offset: Some(1),
            allow_config_drift: false,
            threads: 1,
            opts: AoOptions::default(),
        }
    }

    #[test]
    fn rows_cover_the_grid_in_order() {
        let cfg = tiny();
        let ds = make_dataset(&cfg, 4, 7).unwrap();
        let res = run_sweep(&gd_spec(SweepKind::Inner, vec![1, 2, 3]), &cfg, &ds).unwrap();
        assert_eq!(res.rows.len(), 6);
        let keys: Vec<(usize, usize)> = res.rows.iter().map(|r| (r.t, r.realization_id)).collect();
        assert_eq!(keys, vec![(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]);
        for r in &res.rows {
            assert!((r.r_low + r.r_high - r.r_total).abs() <= 1e-9 * r.r_total);
        }
        let csv = res.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("# fingerprint="));
    }

    #[test]
    fn threaded_run_matches_serial() {
        let cfg = tiny();
        let ds = make_dataset(&cfg, 4, 7).unwrap();
        let mut spec = gd_spec(SweepKind::Outer, vec![1, 2]);
        let a = run_sweep(&spec, &cfg, &ds).unwrap();
        spec.threads = 3;
        let b = run_sweep(&spec, &cfg, &ds).unwrap();
        let strip = |r: &SweepResult| r.rows.iter().map(|x| (x.r_total.to_bits(), x.realization_id)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn unfolded_method_without_checkpoint_is_rejected() {
        let cfg = tiny();
        let ds = make_dataset(&cfg, 4, 7).unwrap();
        let mut spec = gd_spec(SweepKind::Inner, vec![1]);
        spec.methods.push(Method::Du);
        assert!(matches!(run_sweep(&spec, &cfg, &ds), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn subcarrier_sweep_needs_drift_waiver() {
        let cfg = tiny();
        let ds = make_dataset(&cfg, 4, 7).unwrap();
        let mut spec = gd_spec(SweepKind::Subcarriers, vec![1, 2]);
        assert!(matches!(run_sweep(&spec, &cfg, &ds), Err(Error::FingerprintMismatch { .. })));
        spec.allow_config_drift = true;
        let res = run_sweep(&spec, &cfg, &ds).unwrap();
        assert_eq!(res.gd_steps.len(), 2);
        assert!(res.rows.iter().any(|r| r.m_low == 2));
    }

    #[test]
    fn grid_must_increase() {
        let cfg = tiny();
        let ds = make_dataset(&cfg, 4, 7).unwrap();
        assert!(run_sweep(&gd_spec(SweepKind::Inner, vec![2, 1]), &cfg, &ds).is_err());
    }
}
