//! Iterative water-filling and matched-filter beamformers for fixed phases.

use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::rates::{sum_rate, whitening_context, RateReport, WhiteningContext};
use crate::scalar::Real;
use crate::scenario::{SubcarrierSpec, WaterfillWeighting};

/// Default iteration cap of [`iterate_precoders`].
pub const DEFAULT_PRECODER_ITERS: usize = 50;
/// Default relative convergence tolerance of [`iterate_precoders`].
pub const DEFAULT_PRECODER_TOL: f64 = 1e-6;

const BUDGET_TOL: f64 = 1e-9;

/// Beamformers `W_i` (`N_t × K`) and stream powers `powers[i][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet<T: Real> {
    pub beams: Vec<CMat<T>>,
    pub powers: Vec<Vec<T>>,
}

impl<T: Real> PrecoderSet<T> {
    pub fn zeros(subcarriers: usize, antennas: usize, users: usize) -> Self {
        Self {
            beams: vec![CMat::zeros(antennas, users); subcarriers],
            powers: vec![vec![T::zero(); users]; subcarriers],
        }
    }

    pub fn total_power(&self) -> T {
        self.powers.iter().flatten().copied().sum()
    }
}

/// Water-filling outcome; `powers[i][k]` follows the gain table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillResult<T: Real> {
    pub powers: Vec<Vec<T>>,
    pub mu: T,
    pub iterations: usize,
    pub converged: bool,
}

/// `λ_{k,i} = ‖h̃_{i,k}‖²`, laid out as `[i][k]`.
pub fn effective_gains<T: Real>(ctx: &WhiteningContext<T>) -> Vec<Vec<T>> {
    ctx.gains.clone()
}

/// Per-subcarrier water-level weights `B̂_i`.
pub fn waterfill_weights<T: Real>(specs: &[SubcarrierSpec], mode: WaterfillWeighting) -> Vec<T> {
    specs
        .iter()
        .map(|s| match mode {
            WaterfillWeighting::Weighted => T::lit(s.bandwidth),
            WaterfillWeighting::Unweighted => T::one(),
        })
        .collect()
}

/// Solves `p_{k,i} = [μ B̂_i − 1/λ_{k,i}]⁺` with `Σ p = P_T`.
///
/// The water level is bracketed and bisected, then snapped to the closed
/// form of the resulting active set so the budget holds to rounding.
pub fn waterfill<T: Real>(gains: &[Vec<T>], p_total: T, weights: &[T]) -> Result<WaterfillResult<T>> {
    if gains.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gain rows for {} weights",
            gains.len(),
            weights.len()
        )));
    }
    let p = p_total.to_f64_lossy();
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidValue("P_T".into(), format!("{p} must be positive")));
    }
    let mut streams = Vec::new(); // (i, k, λ, B̂)
    for (i, (row, &w)) in gains.iter().zip(weights).enumerate() {
        let w = w.to_f64_lossy();
        if !(w > 0.0) {
            return Err(Error::InvalidValue("waterfill weight".into(), w.to_string()));
        }
        for (k, &l) in row.iter().enumerate() {
            let l = l.to_f64_lossy();
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidValue("gain".into(), l.to_string()));
            }
            if l > 0.0 {
                streams.push((i, k, l, w));
            }
        }
    }
    let mut powers: Vec<Vec<T>> = gains.iter().map(|r| vec![T::zero(); r.len()]).collect();
    if streams.is_empty() {
        return Ok(WaterfillResult {
            powers,
            mu: T::zero(),
            iterations: 0,
            converged: false,
        });
    }

    let fill = |mu: f64| -> f64 {
        streams
            .iter()
            .map(|&(_, _, l, w)| (mu * w - 1.0 / l).max(0.0))
            .sum()
    };
    let min_w = streams.iter().map(|s| s.3).fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    let mut hi = (p + streams.iter().map(|s| 1.0 / s.2).sum::<f64>()) / min_w;
    let mut iterations = 0;
    let mut mu = hi;
    while iterations < 2000 {
        iterations += 1;
        mu = 0.5 * (lo + hi);
        let s = fill(mu);
        if (s - p).abs() <= BUDGET_TOL * p || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if s > p {
            hi = mu;
        } else {
            lo = mu;
        }
    }

    // closed form on the active set; repeat while the set changes
    for _ in 0..streams.len() + 1 {
        let active: Vec<_> = streams.iter().filter(|s| mu * s.3 - 1.0 / s.2 > 0.0).collect();
        if active.is_empty() {
            break;
        }
        let num = p + active.iter().map(|s| 1.0 / s.2).sum::<f64>();
        let den: f64 = active.iter().map(|s| s.3).sum();
        let next = num / den;
        let same = streams
            .iter()
            .all(|s| (next * s.3 - 1.0 / s.2 > 0.0) == (mu * s.3 - 1.0 / s.2 > 0.0));
        mu = next;
        if same {
            break;
        }
    }

    for &(i, k, l, w) in &streams {
        powers[i][k] = T::lit((mu * w - 1.0 / l).max(0.0));
    }
    let total: f64 = powers.iter().flatten().map(|x| x.to_f64_lossy()).sum();
    Ok(WaterfillResult {
        powers,
        mu: T::lit(mu),
        iterations,
        converged: (total - p).abs() <= BUDGET_TOL * p * 10.0,
    })
}

/// `w_{i,k} = √p · h̃ᴴ/‖h̃‖`, zero when `p = 0`.
pub fn update_beamformers<T: Real>(ctx: &WhiteningContext<T>, powers: &[Vec<T>]) -> Result<PrecoderSet<T>> {
    if ctx.whitened.len() != powers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} whitened subcarriers for {} power rows",
            ctx.whitened.len(),
            powers.len()
        )));
    }
    let mut beams = Vec::with_capacity(powers.len());
    for (i, (rows, pw)) in ctx.whitened.iter().zip(powers).enumerate() {
        let users = rows.len();
        let nt = rows.first().map_or(0, Vec::len);
        let mut w = CMat::zeros(nt, users);
        for (k, (h, &p)) in rows.iter().zip(pw).enumerate() {
            if p <= T::zero() {
                continue;
            }
            let norm = h.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::ZeroChannel {
                    stream: k,
                    subcarrier: i,
                });
            }
            let s = p.sqrt() / norm;
            for (t, z) in h.iter().enumerate() {
                w[(t, k)] = z.conj() * s;
            }
        }
        beams.push(w);
    }
    Ok(PrecoderSet {
        beams,
        powers: powers.to_vec(),
    })
}

/// Equal power `P_T/(K·N_sc)` along the maximum-ratio direction `hᴴ/‖h‖`.
pub fn equal_power_mrt<T: Real>(channels: &[CMat<T>], p_total: T) -> Result<PrecoderSet<T>> {
    let users = channels.first().map_or(0, CMat::rows);
    let share = p_total / T::lit((users * channels.len()).max(1) as f64);
    let mut beams = Vec::with_capacity(channels.len());
    let mut powers = Vec::with_capacity(channels.len());
    for h in channels {
        let mut w = CMat::zeros(h.cols(), h.rows());
        let mut pw = vec![T::zero(); h.rows()];
        for k in 0..h.rows() {
            let norm = h.row(k).iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
            if norm <= T::zero() {
                continue;
            }
            let s = share.sqrt() / norm;
            for (t, z) in h.row(k).iter().enumerate() {
                w[(t, k)] = z.conj() * s;
            }
            pw[k] = share;
        }
        beams.push(w);
        powers.push(pw);
    }
    Ok(PrecoderSet { beams, powers })
}

/// Precoder loop for fixed phases; returns the kept precoders and the rate
/// trace (initialization first).
pub fn iterate_precoders<T: Real>(
    channels: &[CMat<T>],
    specs: &[SubcarrierSpec],
    p_total: T,
    weighting: WaterfillWeighting,
    max_iters: usize,
    tol: f64,
) -> Result<(PrecoderSet<T>, Vec<RateReport<T>>)> {
    let weights = waterfill_weights::<T>(specs, weighting);
    let init = equal_power_mrt(channels, p_total)?;
    let init_rate = sum_rate(channels, &init, specs)?;
    let mut trace = vec![init_rate.clone()];
    let mut best = (init.clone(), init_rate.total);
    let mut current = init;
    let mut prev = init_rate.total;
    for _ in 0..max_iters {
        let ctx = whitening_context(channels, &current, specs)?;
        let wf = waterfill(&effective_gains(&ctx), p_total, &weights)?;
        current = update_beamformers(&ctx, &wf.powers)?;
        let rate = sum_rate(channels, &current, specs)?;
        let r = rate.total;
        trace.push(rate);
        if r > best.1 {
            best = (current.clone(), r);
        }
        let scale = T::one().max(prev.abs());
        if (r - prev).abs() <= T::lit(tol) * scale {
            break;
        }
        prev = r;
    }
    let last = trace.last().map_or(T::zero(), |r| r.total);
    if last < init_rate.total {
        log::debug!("precoder loop ended below its initialization; keeping the best iterate");
        let rate = sum_rate(channels, &best.0, specs)?;
        trace.push(rate);
        return Ok((best.0, trace));
    }
    Ok((current, trace))
}

#[cfg(test)]
fn beam_direction<T: Real>(h: &[crate::scalar::C<T>]) -> Vec<crate::scalar::C<T>> {
    let norm = h.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
    h.iter().map(|z| z.conj() / norm).collect()
}
