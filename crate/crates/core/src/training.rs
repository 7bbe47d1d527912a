//! Offline training of unfolding parameters: hyper-gradient estimators, Adam,
//! the training loop and checkpoint files.
//!
//! Step sizes are trained in units of a reference step `eta_ref` (the tuned
//! GD step of the training configuration), so every trainable coordinate is
//! of order one. Checkpoints store the physical step sizes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Dataset, LinkModel};
use crate::error::{Error, Result};
use crate::phase_opt::{
    final_rate_from, initial_snapshot, tune_gd_step, AoOptions, AoSnapshot, Method,
    UnfoldingParams,
};
use crate::scenario::ScenarioConfig;

/// Hyper-gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    CentralFd,
    Spsa,
}

/// Training loop settings. Step-size initial values are in units of the
/// reference step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub estimator: Estimator,
    /// `δ = fd_rel_delta·max(1, |x|)`.
    pub fd_rel_delta: f64,
    pub spsa_samples: usize,
    pub spsa_c: f64,
    pub eta0: f64,
    pub theta0: f64,
    pub xi0: f64,
    pub eval_every: usize,
    /// Relative held-out gain needed to replace the selected parameters.
    #[serde(default)]
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            estimator: Estimator::CentralFd,
            fd_rel_delta: 1e-4,
            spsa_samples: 8,
            spsa_c: 0.05,
            eta0: 1.0,
            theta0: 0.5,
            xi0: 1.0,
            eval_every: 1,
            min_rel_improvement: 0.0,
            seed: 0,
            n_train: 16,
            n_val: 8,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::InvalidValue(k.into(), why));
        if !(self.lr > 0.0) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", format!("{} not in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", format!("{} not in [0, 1)", self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if !(self.min_rel_improvement >= 0.0) {
            return bad("min_rel_improvement", format!("{} is negative", self.min_rel_improvement));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return bad("n_train/n_val", "both splits must be non-empty".into());
        }
        if !(self.fd_rel_delta > 0.0) || !(self.spsa_c > 0.0) || self.spsa_samples == 0 {
            return bad("estimator", "perturbation sizes and sample count must be positive".into());
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step descending on the loss.
pub fn adam_step(x: &mut [f64], state: &mut AdamState, grad: &[f64], hyper: &TrainingHyper) -> Result<()> {
    if x.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradient entries, {} moments",
            x.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.step += 1;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - hyper.beta1.powi(step);
    let c2 = 1.0 - hyper.beta2.powi(step);
    for i in 0..x.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        x[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
    }
    Ok(())
}

/// `δ` for coordinate value `x`.
pub fn fd_delta(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_fd(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], rel: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let d = fd_delta(x[i], rel);
        probe[i] = x[i] + d;
        let up = f(&probe)?;
        probe[i] = x[i] - d;
        let down = f(&probe)?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * d));
    }
    Ok(g)
}

/// Averaged simultaneous-perturbation estimate with Rademacher directions.
pub fn spsa(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    c: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    for _ in 0..samples {
        let dir: Vec<f64> = (0..x.len())
            .map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let up: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + c * d).collect();
        let down: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - c * d).collect();
        let diff = (f(&up)? - f(&down)?) / (2.0 * c);
        for (gi, d) in g.iter_mut().zip(&dir) {
            *gi += diff * d;
        }
    }
    let n = samples.max(1) as f64;
    Ok(g.into_iter().map(|v| v / n).collect())
}

/// Maps normalized trainable coordinates to physical parameters.
pub fn to_physical(
    method: Method,
    i_max: usize,
    t: usize,
    x: &[f64],
    eta_ref: f64,
) -> Result<UnfoldingParams> {
    let mut p = UnfoldingParams::init(method, i_max, t, 0.0, 0.0, 0.0);
    p.set_flat(x)?;
    for tab in [&mut p.eta, &mut p.eta_low, &mut p.eta_high] {
        for v in tab.iter_mut().flatten() {
            *v *= eta_ref;
        }
    }
    Ok(p)
}

/// Inverse of [`to_physical`].
pub fn to_normalized(params: &UnfoldingParams, eta_ref: f64) -> Vec<f64> {
    let mut p = params.clone();
    for tab in [&mut p.eta, &mut p.eta_low, &mut p.eta_high] {
        for v in tab.iter_mut().flatten() {
            *v /= eta_ref;
        }
    }
    p.flatten()
}

/// `(block, stage)` a coordinate acts on; `None` when it acts on every stage.
fn coordinate_position(method: Method, i_max: usize, t: usize, j: usize) -> Option<(usize, usize)> {
    match method {
        Method::Gd => None,
        Method::Du | Method::Mbdu => {
            let k = j % (i_max * t);
            Some((k / t, k % t))
        }
    }
}

/// A realization prepared for repeated AO runs.
pub struct TrainingSample {
    pub link: LinkModel<f64>,
    start: Option<AoSnapshot<f64>>,
}

impl TrainingSample {
    pub fn new(link: LinkModel<f64>, i_max: usize, t: usize, opts: &AoOptions) -> Result<Self> {
        let start = initial_snapshot(&link, &UnfoldingParams::gd(i_max, t, 0.0), opts)?;
        Ok(Self { link, start })
    }

    /// Final AO rate for `params`.
    pub fn final_rate(&self, params: &UnfoldingParams, opts: &AoOptions) -> Result<f64> {
        match &self.start {
            Some(s) => final_rate_from(&self.link, params, opts, s, None),
            None => Err(Error::InvalidValue("I_max".into(), "training needs at least one block".into())),
        }
    }
}

fn mean_rate_over(
    samples: &[&TrainingSample],
    params: &UnfoldingParams,
    opts: &AoOptions,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut ok = 0;
    for s in samples {
        match s.final_rate(params, opts) {
            Ok(r) => {
                sum += r;
                ok += 1;
            }
            Err(Error::SingularSystem(msg)) => {
                log::warn!("realization {} failed: {msg}", s.link.realization.seed);
            }
            Err(e) => return Err(e),
        }
    }
    if ok == 0 {
        return Err(Error::AllRunsFailed(samples.len()));
    }
    Ok((sum / ok as f64, samples.len() - ok))
}

/// `𝓛 = −mean final R` over a batch; failed runs are excluded and counted.
pub fn loss(samples: &[&TrainingSample], params: &UnfoldingParams, opts: &AoOptions) -> Result<(f64, usize)> {
    if samples.is_empty() {
        return Err(Error::InvalidValue("batch".into(), "empty".into()));
    }
    let (r, failed) = mean_rate_over(samples, params, opts)?;
    Ok((-r, failed))
}

/// Problem shape shared by the estimators.
#[derive(Debug, Clone, Copy)]
pub struct ParamSpace {
    pub method: Method,
    pub i_max: usize,
    pub t: usize,
    pub eta_ref: f64,
}

impl ParamSpace {
    pub fn physical(&self, x: &[f64]) -> Result<UnfoldingParams> {
        to_physical(self.method, self.i_max, self.t, x, self.eta_ref)
    }
}

/// Central-difference gradient of the batch loss in normalized coordinates.
///
/// Each perturbed run restarts from the cached AO state just before the
/// first stage the coordinate influences. Realizations that fail at the
/// base point are dropped; returns `(gradient, base loss)`.
pub fn fd_gradient(
    samples: &[&TrainingSample],
    space: &ParamSpace,
    x: &[f64],
    rel: f64,
    opts: &AoOptions,
) -> Result<(Vec<f64>, f64)> {
    let base = space.physical(x)?;
    let mut usable = Vec::with_capacity(samples.len());
    let mut base_sum = 0.0;
    for s in samples {
        let Some(start) = &s.start else {
            return Err(Error::InvalidValue("I_max".into(), "training needs at least one block".into()));
        };
        let mut snaps = Vec::with_capacity(space.i_max * space.t);
        match final_rate_from(&s.link, &base, opts, start, Some(&mut snaps)) {
            Ok(r) => {
                base_sum += r;
                usable.push((s, snaps));
            }
            Err(Error::SingularSystem(msg)) => {
                log::warn!("realization {} dropped from batch: {msg}", s.link.realization.seed);
            }
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Err(Error::AllRunsFailed(samples.len()));
    }
    let base_loss = -base_sum / usable.len() as f64;
    let mut probe = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for j in 0..x.len() {
        let d = fd_delta(x[j], rel);
        probe[j] = x[j] + d;
        let up = space.physical(&probe)?;
        probe[j] = x[j] - d;
        let down = space.physical(&probe)?;
        probe[j] = x[j];
        let pos = coordinate_position(space.method, space.i_max, space.t, j);
        let (mut acc, mut n) = (0.0, 0usize);
        for (s, snaps) in &usable {
            let start = match pos {
                Some((b, t)) => &snaps[b * space.t + t],
                None => s.start.as_ref().expect("checked above"),
            };
            let r_up = final_rate_from(&s.link, &up, opts, start, None);
            let r_down = final_rate_from(&s.link, &down, opts, start, None);
            match (r_up, r_down) {
                (Ok(a), Ok(b)) => {
                    acc += a - b;
                    n += 1;
                }
                (Err(Error::SingularSystem(_)), _) | (_, Err(Error::SingularSystem(_))) => {}
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        if n > 0 {
            g[j] = -(acc / n as f64) / (2.0 * d);
        }
    }
    Ok((g, base_loss))
}

/// SPSA gradient of the batch loss; returns `(gradient, mean of probe losses)`.
pub fn spsa_gradient(
    samples: &[&TrainingSample],
    space: &ParamSpace,
    x: &[f64],
    hyper: &TrainingHyper,
    rng: &mut ChaCha8Rng,
    opts: &AoOptions,
) -> Result<(Vec<f64>, f64)> {
    let mut seen = Vec::new();
    let mut f = |p: &[f64]| -> Result<f64> {
        let l = loss(samples, &space.physical(p)?, opts)?.0;
        seen.push(l);
        Ok(l)
    };
    let g = spsa(&mut f, x, hyper.spsa_c, hyper.spsa_samples, rng)?;
    let mean = seen.iter().sum::<f64>() / seen.len().max(1) as f64;
    Ok((g, mean))
}

/// One entry of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out mean rate, when evaluated this epoch.
    pub val_rate: Option<f64>,
}

/// Parameters, optimizer state and history of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub fingerprint: String,
    pub params: UnfoldingParams,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub eta_ref: f64,
    /// Dataset indices below this value were used for training or selection.
    pub n_consumed: usize,
}

/// Optional starting point of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    /// Reference step; tuned on the first training realization when absent.
    pub eta_ref: Option<f64>,
    /// Initial parameters replacing the `eta0/theta0/xi0` defaults. A DU
    /// table seeds MBDU as `η_L = η_H = η`, `θ = ξ = 0`; larger tables are
    /// truncated.
    pub params: Option<UnfoldingParams>,
}

/// Initial parameters of `method` at `(i_max, t)` derived from `from`.
pub fn warm_params(from: &UnfoldingParams, method: Method, i_max: usize, t: usize) -> Result<UnfoldingParams> {
    if from.method == Method::Gd && method != Method::Gd {
        let eta = from.eta.first().and_then(|r| r.first()).copied().unwrap_or(0.0);
        return Ok(UnfoldingParams::init(method, i_max, t, eta, 0.0, 0.0));
    }
    let base = from.truncate(i_max, t)?;
    match (base.method, method) {
        (a, b) if a == b => Ok(base),
        (Method::Du, Method::Mbdu) => {
            let mut p = UnfoldingParams::mbdu(i_max, t, 0.0, 0.0, 0.0);
            p.eta_low = base.eta.clone();
            p.eta_high = base.eta;
            Ok(p)
        }
        (a, b) => Err(Error::InvalidValue(
            "init".into(),
            format!("cannot start {b} from {a} parameters"),
        )),
    }
}

/// [`train_from`] with the default starting point.
pub fn train(
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    hyper: &TrainingHyper,
    method: Method,
    i_max: usize,
    t: usize,
    opts: &AoOptions,
) -> Result<(UnfoldingParams, TrainingState)> {
    train_from(cfg, dataset, hyper, method, i_max, t, opts, &WarmStart::default())
}

/// Trains `method` on the first `n_train` dataset realizations, selecting
/// on the next `n_val`. Returns the best held-out parameters (the initial
/// ones included) and the final optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    hyper: &TrainingHyper,
    method: Method,
    i_max: usize,
    t: usize,
    opts: &AoOptions,
    warm: &WarmStart,
) -> Result<(UnfoldingParams, TrainingState)> {
    hyper.validate()?;
    dataset.check_fingerprint(cfg)?;
    if i_max == 0 || t == 0 {
        return Err(Error::InvalidValue("I_max/T".into(), "both must be at least 1".into()));
    }
    let n_consumed = hyper.n_train + hyper.n_val;
    if n_consumed > dataset.n {
        return Err(Error::InvalidValue(
            "dataset".into(),
            format!("{} realizations, need {n_consumed}", dataset.n),
        ));
    }
    let load = |idx: usize| -> Result<TrainingSample> {
        let link = LinkModel::new(cfg, dataset.materialize(cfg, idx)?)?;
        TrainingSample::new(link, i_max, t, opts)
    };
    let train_set = (0..hyper.n_train).map(load).collect::<Result<Vec<_>>>()?;
    let val_set = (hyper.n_train..n_consumed).map(load).collect::<Result<Vec<_>>>()?;
    let val_refs: Vec<&TrainingSample> = val_set.iter().collect();

    let eta_ref = match warm.eta_ref {
        Some(e) if e > 0.0 && e.is_finite() => e,
        Some(e) => return Err(Error::InvalidValue("eta_ref".into(), e.to_string())),
        None => tune_gd_step(&train_set[0].link, i_max, t, opts)?.0,
    };
    let space = ParamSpace {
        method,
        i_max,
        t,
        eta_ref,
    };
    log::info!("{method}: reference step {eta_ref:e}, {} parameters", method.param_count(i_max, t));
    let init = match &warm.params {
        Some(p) => warm_params(p, method, i_max, t)?,
        None => UnfoldingParams::init(method, i_max, t, hyper.eta0 * eta_ref, hyper.theta0, hyper.xi0),
    };
    let mut x = to_normalized(&init, eta_ref);
    let mut adam = AdamState::new(x.len());
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best = (mean_rate_over(&val_refs, &init, opts)?.0, x.clone());
    log::info!("epoch 0: held-out mean rate {:.6e}", best.0);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (g, l) = match hyper.estimator {
                Estimator::CentralFd => fd_gradient(&batch, &space, &x, hyper.fd_rel_delta, opts)?,
                Estimator::Spsa => spsa_gradient(&batch, &space, &x, hyper, &mut rng, opts)?,
            };
            adam_step(&mut x, &mut adam, &g, hyper)?;
            losses.push(l);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_rate = if epoch % hyper.eval_every == 0 || epoch == hyper.epochs {
            let r = mean_rate_over(&val_refs, &space.physical(&x)?, opts)?.0;
            if r > best.0 + hyper.min_rel_improvement * best.0.abs() {
                best = (r, x.clone());
            }
            Some(r)
        } else {
            None
        };
        log::info!("epoch {epoch}: train loss {train_loss:.6e}, held-out {val_rate:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_rate,
        });
    }
    let params = space.physical(&best.1)?;
    let state = TrainingState {
        fingerprint: cfg.fingerprint(),
        params: params.clone(),
        adam,
        history,
        eta_ref,
        n_consumed,
    };
    Ok((params, state))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamTables {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    eta: Option<Vec<Vec<f64>>>,
    #[serde(rename = "eta_L", skip_serializing_if = "Option::is_none", default)]
    eta_low: Option<Vec<Vec<f64>>>,
    #[serde(rename = "eta_H", skip_serializing_if = "Option::is_none", default)]
    eta_high: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    theta: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    xi: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    fingerprint: String,
    method: Method,
    #[serde(rename = "I_max")]
    i_max: usize,
    #[serde(rename = "T")]
    t: usize,
    params: ParamTables,
    adam: AdamState,
    history: Vec<EpochRecord>,
    eta_ref: f64,
    n_consumed: usize,
}

fn nonempty(tab: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    (!tab.is_empty()).then(|| tab.to_vec())
}

impl TrainingState {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let file = CheckpointFile {
            fingerprint: self.fingerprint.clone(),
            method: p.method,
            i_max: p.i_max,
            t: p.t,
            params: ParamTables {
                eta: nonempty(&p.eta),
                eta_low: nonempty(&p.eta_low),
                eta_high: nonempty(&p.eta_high),
                theta: nonempty(&p.theta),
                xi: nonempty(&p.xi),
            },
            adam: self.adam.clone(),
            history: self.history.clone(),
            eta_ref: self.eta_ref,
            n_consumed: self.n_consumed,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    /// Parses a checkpoint without checking the fingerprint.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let take = |tab: Option<Vec<Vec<f64>>>| tab.unwrap_or_default();
        let params = UnfoldingParams {
            method: f.method,
            i_max: f.i_max,
            t: f.t,
            eta: take(f.params.eta),
            eta_low: take(f.params.eta_low),
            eta_high: take(f.params.eta_high),
            theta: take(f.params.theta),
            xi: take(f.params.xi),
        };
        params
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let n = params.param_count();
        if f.adam.m.len() != n || f.adam.v.len() != n {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer moments do not match {n} parameters"
            )));
        }
        if !(f.eta_ref > 0.0) {
            return Err(Error::CorruptCheckpoint("reference step must be positive".into()));
        }
        Ok(Self {
            fingerprint: f.fingerprint,
            params,
            adam: f.adam,
            history: f.history,
            eta_ref: f.eta_ref,
            n_consumed: f.n_consumed,
        })
    }
}

pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    std::fs::write(path, state.to_json())?;
    Ok(())
}

/// Loads a checkpoint and checks it against `cfg` unless `cfg` is `None`.
pub fn load_checkpoint(path: &Path, cfg: Option<&ScenarioConfig>) -> Result<TrainingState> {
    let text = std::fs::read_to_string(path)?;
    let state = TrainingState::from_json(&text)?;
    if let Some(cfg) = cfg {
        let expected = cfg.fingerprint();
        if state.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: state.fingerprint,
            });
        }
    }
    Ok(state)
}
