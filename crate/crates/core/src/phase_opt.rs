//! SIM phase updates (projected gradient, unfolded gradient, multi-band
//! momentum unfolding) and the alternating optimization driver.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::LinkModel;
use crate::error::{Error, Result};
use crate::linalg::RMat;
use crate::precoding::{
    equal_power_mrt, iterate_precoders, PrecoderSet, DEFAULT_PRECODER_ITERS, DEFAULT_PRECODER_TOL,
};
use crate::rates::{phase_gradient_bands, sum_rate, PhaseGradient, RateReport};
use crate::rng::{PinnedStream, PHASE_INIT_TAG};
use crate::scalar::{two_pi, Real};
use crate::sim_device::{phase_derivatives, SimPhases};

/// Phase update rule of the inner block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    Du,
    Mbdu,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gd, Method::Du, Method::Mbdu];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Du => "du",
            Method::Mbdu => "mbdu",
        }
    }

    /// Trainable parameter count for `i_max` blocks of `t` stages.
    pub fn param_count(self, i_max: usize, t: usize) -> usize {
        match self {
            Method::Gd => 1,
            Method::Du => i_max * t,
            Method::Mbdu => 4 * i_max * t,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(Method::Gd),
            "du" => Ok(Method::Du),
            "mbdu" => Ok(Method::Mbdu),
            other => Err(Error::InvalidValue("method".into(), other.into())),
        }
    }
}

/// Per-(outer iteration, stage) step sizes and momentum parameters.
///
/// Tables are `i_max × t`; tables a method does not use are empty. GD keeps a
/// single step size, broadcast into `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldingParams {
    pub method: Method,
    pub i_max: usize,
    pub t: usize,
    pub eta: Vec<Vec<f64>>,
    pub eta_low: Vec<Vec<f64>>,
    pub eta_high: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

fn table(i_max: usize, t: usize, v: f64) -> Vec<Vec<f64>> {
    vec![vec![v; t]; i_max]
}

impl UnfoldingParams {
    pub fn gd(i_max: usize, t: usize, eta: f64) -> Self {
        Self {
            method: Method::Gd,
            i_max,
            t,
            eta: table(i_max, t, eta),
            eta_low: Vec::new(),
            eta_high: Vec::new(),
            theta: Vec::new(),
            xi: Vec::new(),
        }
    }

    pub fn du(i_max: usize, t: usize, eta: f64) -> Self {
        Self {
            method: Method::Du,
            ..Self::gd(i_max, t, eta)
        }
    }

    pub fn mbdu(i_max: usize, t: usize, eta: f64, theta: f64, xi: f64) -> Self {
        Self {
            method: Method::Mbdu,
            i_max,
            t,
            eta: Vec::new(),
            eta_low: table(i_max, t, eta),
            eta_high: table(i_max, t, eta),
            theta: table(i_max, t, theta),
            xi: table(i_max, t, xi),
        }
    }

    /// Uniform initialization for `method`.
    pub fn init(method: Method, i_max: usize, t: usize, eta: f64, theta: f64, xi: f64) -> Self {
        match method {
            Method::Gd => Self::gd(i_max, t, eta),
            Method::Du => Self::du(i_max, t, eta),
            Method::Mbdu => Self::mbdu(i_max, t, eta, theta, xi),
        }
    }

    pub fn param_count(&self) -> usize {
        self.method.param_count(self.i_max, self.t)
    }

    fn tables(&self) -> Vec<&Vec<Vec<f64>>> {
        match self.method {
            Method::Gd | Method::Du => vec![&self.eta],
            Method::Mbdu => vec![&self.xi, &self.theta, &self.eta_low, &self.eta_high],
        }
    }

    fn tables_mut(&mut self) -> Vec<&mut Vec<Vec<f64>>> {
        match self.method {
            Method::Gd | Method::Du => vec![&mut self.eta],
            Method::Mbdu => vec![&mut self.xi, &mut self.theta, &mut self.eta_low, &mut self.eta_high],
        }
    }

    /// Checks table shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        for tab in self.tables() {
            if tab.len() != self.i_max || tab.iter().any(|r| r.len() != self.t) {
                return Err(Error::DimensionMismatch(format!(
                    "{} parameter table is not {}×{}",
                    self.method, self.i_max, self.t
                )));
            }
            if tab.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("{} parameters", self.method)));
            }
        }
        if self.method == Method::Gd && self.i_max * self.t > 0 {
            let first = self.eta[0][0];
            if self.eta.iter().flatten().any(|&v| v != first) {
                return Err(Error::InvalidValue("eta".into(), "GD uses one fixed step size".into()));
            }
        }
        Ok(())
    }

    /// Trainable coordinates; MBDU order is `ξ, θ, η_L, η_H`, each `(i, t)`
    /// row-major.
    pub fn flatten(&self) -> Vec<f64> {
        if self.method == Method::Gd {
            return vec![self.eta.first().and_then(|r| r.first()).copied().unwrap_or(0.0)];
        }
        self.tables().into_iter().flatten().flatten().copied().collect()
    }

    /// Inverse of [`UnfoldingParams::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        if self.method == Method::Gd {
            self.eta = table(self.i_max, self.t, values[0]);
            return Ok(());
        }
        let mut it = values.iter();
        for tab in self.tables_mut() {
            for v in tab.iter_mut().flatten() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// First `i_max` blocks and first `t` stages of each block.
    pub fn truncate(&self, i_max: usize, t: usize) -> Result<Self> {
        if i_max > self.i_max || t > self.t {
            return Err(Error::InvalidValue(
                "truncation".into(),
                format!("{}×{} exceeds trained {}×{}", i_max, t, self.i_max, self.t),
            ));
        }
        let cut = |tab: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            tab.iter().take(i_max).map(|r| r[..t].to_vec()).collect()
        };
        Ok(Self {
            method: self.method,
            i_max,
            t,
            eta: cut(&self.eta),
            eta_low: cut(&self.eta_low),
            eta_high: cut(&self.eta_high),
            theta: cut(&self.theta),
            xi: cut(&self.xi),
        })
    }
}

/// `φ ← φ mod 2π` into `[0, 2π)`, entry-wise.
pub fn project_phases<T: Real>(raw: &RMat<T>) -> Result<SimPhases<T>> {
    if !raw.is_finite() {
        return Err(Error::NonFiniteInput("phase matrix".into()));
    }
    SimPhases::new(raw.map(wrap))
}

#[inline]
fn wrap<T: Real>(x: T) -> T {
    let tau = two_pi::<T>();
    let mut r = x % tau;
    if r < T::zero() {
        r += tau;
    }
    if r >= tau {
        r = T::zero();
    }
    r
}

/// `D = η_L ∇R_L + η_H ∇R_H`.
fn direction<T: Real>(grad: &PhaseGradient<T>, eta_low: T, eta_high: T) -> RMat<T> {
    grad.low.zip_map(&grad.high, |l, h| eta_low * l + eta_high * h)
}

/// `‖D‖∞ ≤ π`; returns whether the direction was rescaled.
fn clip_direction<T: Real>(d: &mut RMat<T>) -> bool {
    let peak = d.max_abs();
    if peak > T::PI() {
        let s = T::PI() / peak;
        for v in d.as_mut_slice() {
            *v *= s;
        }
        true
    } else {
        false
    }
}

/// One projected gradient ascent step, `wrap(Φ + η∇R)`.
pub fn gd_step<T: Real>(phases: &RMat<T>, grad: &PhaseGradient<T>, eta: T) -> Result<SimPhases<T>> {
    let d = direction(grad, eta, eta);
    project_phases(&phases.zip_map(&d, |p, s| p + s))
}

/// Evaluates the band-split rate gradient at arbitrary (unwrapped) phases.
pub trait GradientProvider<T: Real> {
    fn gradient(&mut self, phases: &RMat<T>) -> Result<PhaseGradient<T>>;
}

impl<T: Real, F> GradientProvider<T> for F
where
    F: FnMut(&RMat<T>) -> Result<PhaseGradient<T>>,
{
    fn gradient(&mut self, phases: &RMat<T>) -> Result<PhaseGradient<T>> {
        self(phases)
    }
}

/// Gradient and rate of one realization for fixed precoders.
pub struct LinkGradient<'a, T: Real> {
    pub link: &'a LinkModel<T>,
    pub precoders: &'a PrecoderSet<T>,
}

impl<T: Real> LinkGradient<'_, T> {
    pub fn rate(&self, phases: &RMat<T>) -> Result<RateReport<T>> {
        let h = self.link.effective_channels(phases)?;
        sum_rate(&h, self.precoders, &self.link.specs())
    }
}

impl<T: Real> GradientProvider<T> for LinkGradient<'_, T> {
    fn gradient(&mut self, phases: &RMat<T>) -> Result<PhaseGradient<T>> {
        let transfers = self.link.transfers(phases, true)?;
        let derivs = phase_derivatives(&self.link.cfg, phases);
        phase_gradient_bands(
            self.link.channels(),
            &transfers,
            &derivs,
            self.precoders,
            phases.shape(),
        )
    }
}

/// Velocity carried between MBDU stages.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityState<T: Real>(pub RMat<T>);

impl<T: Real> VelocityState<T> {
    pub fn zeros(layers: usize, elements: usize) -> Self {
        Self(RMat::zeros(layers, elements))
    }
}

/// Per-stage values of one MBDU application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams<T: Real> {
    pub xi: T,
    pub theta: T,
    pub eta_low: T,
    pub eta_high: T,
}

/// Result of one stage: new phases, new velocity, and whether the direction
/// was clipped.
pub struct StageOutput<T: Real> {
    pub phases: SimPhases<T>,
    pub velocity: VelocityState<T>,
    pub clipped: bool,
}

/// Look-ahead, band-weighted direction, momentum update and projection.
pub fn mbdu_stage<T: Real>(
    phases: &RMat<T>,
    velocity: &VelocityState<T>,
    p: StageParams<T>,
    provider: &mut dyn GradientProvider<T>,
) -> Result<StageOutput<T>> {
    let v = &velocity.0;
    let look = phases.zip_map(v, |x, u| x + p.xi * u);
    let grad = provider.gradient(&look)?;
    let mut d = direction(&grad, p.eta_low, p.eta_high);
    let clipped = clip_direction(&mut d);
    let v_next = v.zip_map(&d, |u, s| p.theta * u + s);
    let raw = look.zip_map(&v_next, |x, u| x + u);
    Ok(StageOutput {
        phases: project_phases(&raw)?,
        velocity: VelocityState(v_next),
        clipped,
    })
}

/// Outcome of one inner block.
#[derive(Debug, Clone)]
pub struct BlockOutput<T: Real> {
    pub phases: SimPhases<T>,
    pub clip_events: usize,
}

/// Phases and velocity between stages of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState<T: Real> {
    pub phases: SimPhases<T>,
    pub velocity: VelocityState<T>,
}

impl<T: Real> StageState<T> {
    /// Block entry: the velocity starts at zero.
    pub fn entry(phases: SimPhases<T>) -> Self {
        let (l, m) = phases.as_mat().shape();
        Self {
            phases,
            velocity: VelocityState::zeros(l, m),
        }
    }
}

/// Stage `t` of outer iteration `block`. GD and DU steps are
/// `wrap(Φ + η∇R_L + η∇R_H)` under the same direction guard as MBDU, so the
/// three rules coincide when `θ = ξ = 0` and `η_L = η_H = η`.
pub fn apply_stage<T: Real>(
    params: &UnfoldingParams,
    block: usize,
    t: usize,
    state: &StageState<T>,
    provider: &mut dyn GradientProvider<T>,
) -> Result<(StageState<T>, bool)> {
    match params.method {
        Method::Gd | Method::Du => {
            let eta = T::lit(params.eta[block][t]);
            let phi = state.phases.as_mat();
            let grad = provider.gradient(phi)?;
            let mut d = direction(&grad, eta, eta);
            let clipped = clip_direction(&mut d);
            let next = project_phases(&phi.zip_map(&d, |x, s| x + s))?;
            Ok((
                StageState {
                    phases: next,
                    velocity: state.velocity.clone(),
                },
                clipped,
            ))
        }
        Method::Mbdu => {
            let p = StageParams {
                xi: T::lit(params.xi[block][t]),
                theta: T::lit(params.theta[block][t]),
                eta_low: T::lit(params.eta_low[block][t]),
                eta_high: T::lit(params.eta_high[block][t]),
            };
            let out = mbdu_stage(state.phases.as_mat(), &state.velocity, p, provider)?;
            Ok((
                StageState {
                    phases: out.phases,
                    velocity: out.velocity,
                },
                out.clipped,
            ))
        }
    }
}

/// Runs the `T` stages of outer iteration `block` from a zero velocity.
pub fn run_phase_block<T: Real>(
    phases: &SimPhases<T>,
    params: &UnfoldingParams,
    block: usize,
    provider: &mut dyn GradientProvider<T>,
    mut on_stage: impl FnMut(usize, &SimPhases<T>) -> Result<()>,
) -> Result<BlockOutput<T>> {
    if block >= params.i_max {
        return Err(Error::IndexOutOfRange {
            index: block,
            len: params.i_max,
        });
    }
    let mut state = StageState::entry(phases.clone());
    let mut clip_events = 0;
    for t in 0..params.t {
        let (next, clipped) = apply_stage(params, block, t, &state, provider)?;
        clip_events += usize::from(clipped);
        state = next;
        on_stage(t, &state.phases)?;
    }
    Ok(BlockOutput {
        phases: state.phases,
        clip_events,
    })
}

/// Knobs of [`alternating_optimize`] that are not unfolding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoOptions {
    pub precoder_max_iters: usize,
    pub precoder_tol: f64,
    /// Evaluate the rate after every stage (one extra solve per stage).
    pub record_stage_rates: bool,
}

impl Default for AoOptions {
    fn default() -> Self {
        Self {
            precoder_max_iters: DEFAULT_PRECODER_ITERS,
            precoder_tol: DEFAULT_PRECODER_TOL,
            record_stage_rates: false,
        }
    }
}

/// One outer iteration of the AO loop.
#[derive(Debug, Clone)]
pub struct OuterRecord<T: Real> {
    pub after_precoders: RateReport<T>,
    pub after_phases: RateReport<T>,
    pub stage_rates: Vec<T>,
    pub clip_events: usize,
    pub wall_ms: f64,
}

/// Full AO history of one realization.
#[derive(Debug, Clone)]
pub struct AoTrace<T: Real> {
    pub initial_phases: SimPhases<T>,
    pub initial_rate: RateReport<T>,
    pub outer: Vec<OuterRecord<T>>,
    pub phases: SimPhases<T>,
    pub precoders: PrecoderSet<T>,
}

impl<T: Real> AoTrace<T> {
    /// Rate after the last phase update (the initialization rate if none).
    pub fn final_rate(&self) -> &RateReport<T> {
        self.outer.last().map_or(&self.initial_rate, |o| &o.after_phases)
    }

    pub fn clip_events(&self) -> usize {
        self.outer.iter().map(|o| o.clip_events).sum()
    }
}

/// Uniform phases on `[0, 2π)` from the realization's phase sub-stream.
pub fn initial_phases<T: Real>(seed: u64, layers: usize, elements: usize) -> Result<SimPhases<T>> {
    let mut s = PinnedStream::new(seed ^ PHASE_INIT_TAG);
    let raw = RMat::from_fn(layers, elements, |_, _| {
        T::lit(s.uniform() * std::f64::consts::TAU)
    });
    project_phases(&raw)
}

/// Alternates precoder optimization and `i_max` phase blocks.
pub fn alternating_optimize<T: Real>(
    link: &LinkModel<T>,
    params: &UnfoldingParams,
    opts: &AoOptions,
) -> Result<AoTrace<T>> {
    params.validate()?;
    let cfg = &link.cfg;
    let specs = link.specs();
    let p_total = T::lit(cfg.p_total);
    let phi0: SimPhases<T> =
        initial_phases(link.realization.seed, cfg.layers, cfg.elements())?;
    let h0 = link.effective_channels(phi0.as_mat())?;
    let w0 = equal_power_mrt(&h0, p_total)?;
    let initial_rate = sum_rate(&h0, &w0, &specs)?;
    let mut trace = AoTrace {
        initial_phases: phi0.clone(),
        initial_rate,
        outer: Vec::with_capacity(params.i_max),
        phases: phi0,
        precoders: w0,
    };
    for block in 0..params.i_max {
        let start = Instant::now();
        let (h, w) = block_precoders(link, &trace.phases, opts)?;
        let after_precoders = sum_rate(&h, &w, &specs)?;
        let mut provider = LinkGradient {
            link,
            precoders: &w,
        };
        let mut stage_rates = Vec::new();
        let out = if opts.record_stage_rates {
            let eval = LinkGradient {
                link,
                precoders: &w,
            };
            run_phase_block(&trace.phases, params, block, &mut provider, |_, phi| {
                stage_rates.push(eval.rate(phi.as_mat())?.total);
                Ok(())
            })?
        } else {
            run_phase_block(&trace.phases, params, block, &mut provider, |_, _| Ok(()))?
        };
        let after_phases = provider.rate(out.phases.as_mat())?;
        trace.phases = out.phases;
        trace.precoders = w;
        trace.outer.push(OuterRecord {
            after_precoders,
            after_phases,
            stage_rates,
            clip_events: out.clip_events,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(trace)
}

/// Precoder subproblem at the start of an outer iteration.
fn block_precoders<T: Real>(
    link: &LinkModel<T>,
    phases: &SimPhases<T>,
    opts: &AoOptions,
) -> Result<(Vec<crate::linalg::CMat<T>>, PrecoderSet<T>)> {
    let h = link.effective_channels(phases.as_mat())?;
    let (w, _) = iterate_precoders(
        &h,
        &link.specs(),
        T::lit(link.cfg.p_total),
        link.cfg.waterfilling_weighting,
        opts.precoder_max_iters,
        opts.precoder_tol,
    )?;
    Ok((h, w))
}

/// AO state just before stage `stage` of outer iteration `block`, after that
/// iteration's precoder update.
#[derive(Debug, Clone)]
pub struct AoSnapshot<T: Real> {
    pub block: usize,
    pub stage: usize,
    pub state: StageState<T>,
    pub precoders: Arc<PrecoderSet<T>>,
}

/// Snapshot at the first stage of the first outer iteration; `None` when
/// `i_max = 0`.
pub fn initial_snapshot<T: Real>(
    link: &LinkModel<T>,
    params: &UnfoldingParams,
    opts: &AoOptions,
) -> Result<Option<AoSnapshot<T>>> {
    if params.i_max == 0 {
        return Ok(None);
    }
    let cfg = &link.cfg;
    let phi0 = initial_phases(link.realization.seed, cfg.layers, cfg.elements())?;
    let (_, w) = block_precoders(link, &phi0, opts)?;
    Ok(Some(AoSnapshot {
        block: 0,
        stage: 0,
        state: StageState::entry(phi0),
        precoders: Arc::new(w),
    }))
}

/// Final sum rate of the AO loop continued from `start`, optionally
/// recording a snapshot before every stage visited. Matches
/// [`alternating_optimize`] bit for bit when started from
/// [`initial_snapshot`].
pub fn final_rate_from<T: Real>(
    link: &LinkModel<T>,
    params: &UnfoldingParams,
    opts: &AoOptions,
    start: &AoSnapshot<T>,
    mut record: Option<&mut Vec<AoSnapshot<T>>>,
) -> Result<T> {
    let mut block = start.block;
    let mut stage = start.stage;
    let mut state = start.state.clone();
    let mut w = Arc::clone(&start.precoders);
    loop {
        let mut provider = LinkGradient {
            link,
            precoders: &w,
        };
        for t in stage..params.t {
            if let Some(rec) = record.as_deref_mut() {
                rec.push(AoSnapshot {
                    block,
                    stage: t,
                    state: state.clone(),
                    precoders: Arc::clone(&w),
                });
            }
            state = apply_stage(params, block, t, &state, &mut provider)?.0;
        }
        block += 1;
        if block >= params.i_max {
            return Ok(provider.rate(state.phases.as_mat())?.total);
        }
        let (_, next) = block_precoders(link, &state.phases, opts)?;
        w = Arc::new(next);
        state = StageState::entry(state.phases);
        stage = 0;
    }
}

/// Number of candidates in the GD step-size search.
pub const GD_GRID_POINTS: usize = 16;

/// Inverse of the largest phase-gradient entry at the start of the first
/// phase block; the unit of the GD step search.
fn gd_step_scale<T: Real>(link: &LinkModel<T>, i_max: usize, t: usize, opts: &AoOptions) -> Result<f64> {
    let probe = UnfoldingParams::gd(i_max.max(1), t, 0.0);
    let start = initial_snapshot(link, &probe, opts)?.expect("at least one block");
    let mut provider = LinkGradient {
        link,
        precoders: &start.precoders,
    };
    let peak = provider
        .gradient(start.state.phases.as_mat())?
        .total()
        .max_abs()
        .to_f64_lossy();
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::InvalidValue(
            "gradient".into(),
            format!("cannot scale the step search from a peak of {peak}"),
        ));
    }
    Ok(1.0 / peak)
}

/// Logarithmic GD step-size search on one realization.
///
/// Candidates are `base·10^{−3 + 4k/15}`, `k = 0..15`, with
/// `base = 1/‖∇R(Φ₀)‖∞` at the initial phases and first-iteration precoders.
/// Returns the step with the best final rate and every `(η, R)` tried;
/// failed candidates are skipped.
pub fn tune_gd_step<T: Real>(
    link: &LinkModel<T>,
    i_max: usize,
    t: usize,
    opts: &AoOptions,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let base = gd_step_scale(link, i_max, t, opts)?;
    let mut tried = Vec::with_capacity(GD_GRID_POINTS);
    let mut best: Option<(f64, f64)> = None;
    for k in 0..GD_GRID_POINTS {
        let eta = base * 10f64.powf(-3.0 + 4.0 * k as f64 / (GD_GRID_POINTS - 1) as f64);
        let params = UnfoldingParams::gd(i_max, t, eta);
        let rate = match initial_snapshot(link, &params, opts)? {
            None => link_rate_at_init(link)?,
            Some(s) => match final_rate_from(link, &params, opts, &s, None) {
                Ok(r) => r.to_f64_lossy(),
                Err(Error::SingularSystem(msg)) => {
                    log::warn!("step {eta:e} skipped: singular system ({msg})");
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        tried.push((eta, rate));
        if best.is_none_or(|(_, r)| rate > r) {
            best = Some((eta, rate));
        }
    }
    let (eta, _) = best.ok_or(Error::AllRunsFailed(GD_GRID_POINTS))?;
    Ok((eta, tried))
}

fn link_rate_at_init<T: Real>(link: &LinkModel<T>) -> Result<f64> {
    let cfg = &link.cfg;
    let phi0: SimPhases<T> = initial_phases(link.realization.seed, cfg.layers, cfg.elements())?;
    let h = link.effective_channels(phi0.as_mat())?;
    let w = equal_power_mrt(&h, T::lit(cfg.p_total))?;
    Ok(sum_rate(&h, &w, &link.specs())?.total.to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use std::f64::consts::PI;

    fn one(x: f64) -> RMat<f64> {
        RMat::from_vec(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_phases(&one(PI)).unwrap().as_mat()[(0, 0)], PI);
        assert_eq!(project_phases(&one(2.0 * PI)).unwrap().as_mat()[(0, 0)], 0.0);
        let v = project_phases(&one(-PI / 2.0)).unwrap().as_mat()[(0, 0)];
        assert!((v - 1.5 * PI).abs() < 1e-15);
        assert!(project_phases(&one(f64::NAN)).is_err());
        assert!(project_phases(&one(f64::INFINITY)).is_err());
    }

    #[test]
    fn tiny_negative_wraps_inside_range() {
        let v = project_phases(&one(-1e-300)).unwrap().as_mat()[(0, 0)];
        assert!((0.0..2.0 * PI).contains(&v));
    }

    fn synthetic(g_low: f64, g_high: f64) -> PhaseGradient<f64> {
        PhaseGradient {
            low: one(g_low),
            high: one(g_high),
        }
    }

    #[test]
    fn gd_step_by_hand() {
        let out = gd_step(&one(1.0), &synthetic(0.25, 0.5), 0.4).unwrap();
        assert!((out.as_mat()[(0, 0)] - (1.0 + 0.4 * 0.75)).abs() < 1e-15);
        let still = gd_step(&one(1.0), &synthetic(0.0, 0.0), 0.4).unwrap();
        assert_eq!(still.as_mat()[(0, 0)], 1.0);
        let frozen = gd_step(&one(1.0), &synthetic(3.0, 1.0), 0.0).unwrap();
        assert_eq!(frozen.as_mat()[(0, 0)], 1.0);
    }

    #[test]
    fn mbdu_two_stages_by_hand() {
        // synthetic gradient field: ∇R_L = cos φ, ∇R_H = −sin φ / 2
        let mut provider = |p: &RMat<f64>| -> Result<PhaseGradient<f64>> {
            let x = p[(0, 0)];
            Ok(synthetic(x.cos(), -0.5 * x.sin()))
        };
        let sp = StageParams {
            xi: 0.7,
            theta: 0.4,
            eta_low: 0.3,
            eta_high: 0.2,
        };
        let s1 = mbdu_stage(&one(0.5), &VelocityState(one(0.0)), sp, &mut provider).unwrap();
        let s2 = mbdu_stage(s1.phases.as_mat(), &s1.velocity, sp, &mut provider).unwrap();

        let d = |x: f64| 0.3 * x.cos() + 0.2 * (-0.5 * x.sin());
        let (phi0, v0) = (0.5, 0.0);
        let look1 = phi0 + 0.7 * v0;
        let v1 = 0.4 * v0 + d(look1);
        let phi1 = (look1 + v1).rem_euclid(2.0 * PI);
        let look2 = phi1 + 0.7 * v1;
        let v2 = 0.4 * v1 + d(look2);
        let phi2 = (look2 + v2).rem_euclid(2.0 * PI);
        assert!((s1.phases.as_mat()[(0, 0)] - phi1).abs() < 1e-15);
        assert!((s2.velocity.0[(0, 0)] - v2).abs() < 1e-15);
        assert!((s2.phases.as_mat()[(0, 0)] - phi2).abs() < 1e-15);
    }

    #[test]
    fn zero_velocity_look_ahead_is_current_point() {
        let mut seen = None;
        let mut provider = |p: &RMat<f64>| -> Result<PhaseGradient<f64>> {
            seen = Some(p[(0, 0)]);
            Ok(synthetic(0.0, 0.0))
        };
        let sp = StageParams {
            xi: 123.0,
            theta: 0.5,
            eta_low: 1.0,
            eta_high: 1.0,
        };
        mbdu_stage(&one(2.0), &VelocityState(one(0.0)), sp, &mut provider).unwrap();
        assert_eq!(seen, Some(2.0));
    }

    #[test]
    fn direction_guard_limits_the_step() {
        let mut provider = |_: &RMat<f64>| -> Result<PhaseGradient<f64>> { Ok(synthetic(1e9, 0.0)) };
        let sp = StageParams {
            xi: 0.0,
            theta: 0.0,
            eta_low: 1.0,
            eta_high: 1.0,
        };
        let out = mbdu_stage(&one(0.0), &VelocityState(one(0.0)), sp, &mut provider).unwrap();
        assert!(out.clipped);
        assert!((out.velocity.0[(0, 0)] - PI).abs() < 1e-15);
    }

    #[test]
    fn zero_stages_leave_phases_alone() {
        let phi = SimPhases::new(one(1.25)).unwrap();
        let params = UnfoldingParams::mbdu(1, 0, 1.0, 0.5, 1.0);
        let mut provider = |_: &RMat<f64>| -> Result<PhaseGradient<f64>> { unreachable!() };
        let out = run_phase_block(&phi, &params, 0, &mut provider, |_, _| Ok(())).unwrap();
        assert_eq!(out.phases, phi);
    }

    #[test]
    fn degenerate_mbdu_equals_du_equals_gd() {
        let mut provider = |p: &RMat<f64>| -> Result<PhaseGradient<f64>> {
            Ok(PhaseGradient {
                low: p.map(|x| (3.0 * x).sin()),
                high: p.map(|x| 0.3 * (x + 1.0).cos()),
            })
        };
        let phi = SimPhases::new(RMat::from_fn(2, 3, |r, c| 0.4 + r as f64 + 0.7 * c as f64)).unwrap();
        let eta = 0.37;
        let run = |params: UnfoldingParams, provider: &mut dyn GradientProvider<f64>| {
            let mut stages = Vec::new();
            run_phase_block(&phi, &params, 0, provider, |_, p| {
                stages.push(p.clone());
                Ok(())
            })
            .unwrap();
            stages
        };
        let gd = run(UnfoldingParams::gd(1, 5, eta), &mut provider);
        let du = run(UnfoldingParams::du(1, 5, eta), &mut provider);
        let mb = run(UnfoldingParams::mbdu(1, 5, eta, 0.0, 0.0), &mut provider);
        assert_eq!(gd, du);
        assert_eq!(gd, mb);
    }

    #[test]
    fn flatten_round_trip_and_counts() {
        let mut p = UnfoldingParams::mbdu(5, 6, 1.0, 0.5, 1.0);
        assert_eq!(p.param_count(), 120);
        let flat: Vec<f64> = (0..120).map(|i| i as f64).collect();
        p.set_flat(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
        assert_eq!(p.xi[0][1], 1.0);
        assert_eq!(p.theta[0][0], 30.0);
        assert_eq!(p.eta_high[4][5], 119.0);
        let du = UnfoldingParams::du(2, 3, 0.1);
        assert_eq!(du.param_count(), 6);
        assert_eq!(UnfoldingParams::gd(5, 6, 0.1).flatten(), vec![0.1]);
        let cut = p.truncate(2, 3).unwrap();
        assert_eq!(cut.eta_low[1], vec![66.0, 67.0, 68.0]);
        cut.validate().unwrap();
        assert!(p.truncate(6, 1).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("MBDU".parse::<Method>().unwrap(), Method::Mbdu);
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn zero_outer_iterations_return_initial_state() {
        let cfg = ScenarioConfig::desk();
        let link = LinkModel::<f64>::from_seed(&cfg, 7).unwrap();
        let trace = alternating_optimize(&link, &UnfoldingParams::gd(0, 6, 1e-6), &AoOptions::default()).unwrap();
        assert!(trace.outer.is_empty());
        assert_eq!(trace.phases, trace.initial_phases);
        assert_eq!(trace.final_rate(), &trace.initial_rate);
    }

    #[test]
    fn frozen_phases_give_precoder_only_rate() {
        let cfg = ScenarioConfig::desk();
        let link = LinkModel::<f64>::from_seed(&cfg, 11).unwrap();
        let trace = alternating_optimize(&link, &UnfoldingParams::gd(1, 3, 0.0), &AoOptions::default()).unwrap();
        let h = link.effective_channels(trace.initial_phases.as_mat()).unwrap();
        let (w, _) = iterate_precoders(
            &h,
            &link.specs(),
            cfg.p_total,
            cfg.waterfilling_weighting,
            DEFAULT_PRECODER_ITERS,
            DEFAULT_PRECODER_TOL,
        )
        .unwrap();
        let expected = sum_rate(&h, &w, &link.specs()).unwrap().total;
        assert_eq!(trace.final_rate().total, expected);
        assert_eq!(trace.phases, trace.initial_phases);
    }

    #[test]
    fn resumed_run_matches_full_trace() {
        let cfg = ScenarioConfig::desk();
        let link = LinkModel::<f64>::from_seed(&cfg, 3).unwrap();
        let opts = AoOptions::default();
        let params = UnfoldingParams::mbdu(2, 3, 2e-8, 0.5, 1.0);
        let full = alternating_optimize(&link, &params, &opts).unwrap();
        let start = initial_snapshot(&link, &params, &opts).unwrap().unwrap();
        let mut snaps = Vec::new();
        let r = final_rate_from(&link, &params, &opts, &start, Some(&mut snaps)).unwrap();
        assert_eq!(r, full.final_rate().total);
        assert_eq!(snaps.len(), 6);
        for s in &snaps {
            let again = final_rate_from(&link, &params, &opts, s, None).unwrap();
            assert_eq!(again, r);
        }
    }
}
