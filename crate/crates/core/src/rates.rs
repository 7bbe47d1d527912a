//! Interference-plus-noise terms, whitened channels, band-resolved sum rates
//! and the analytic gradient of the rate with respect to every SIM phase.
//!
//! Interference at user `k` on subcarrier `i` flows through the user's own
//! channel: `ι_{i,k} = σ_i² + Σ_{j≠k} |h_{i,k} w_{i,j}|²`, and the transmit
//! domain covariance is `ι_{i,k}·I`. Under that reading the whitened
//! determinant form of the rate reduces exactly to the downlink SINR rate.

use crate::channel::SubcarrierChannel;
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig, CMat, Lu, RMat};
use crate::precoding::PrecoderSet;
use crate::scalar::{cplx, Real, C};
use crate::scenario::{Band, SubcarrierSpec};
use crate::sim_device::{PhaseDerivative, SimTransfer};

/// Per-stream SINRs and band-split sum rate (bit/s).
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport<T: Real> {
    /// `sinr[i][k]`.
    pub sinr: Vec<Vec<T>>,
    pub rate_low: T,
    pub rate_high: T,
    pub total: T,
}

/// Per-user interference-plus-noise, whitened channels and effective gains.
#[derive(Debug, Clone)]
pub struct WhiteningContext<T: Real> {
    /// `iota[i][k]`.
    pub iota: Vec<Vec<T>>,
    /// `whitened[i][k]`, a length-`N_t` row.
    pub whitened: Vec<Vec<Vec<C<T>>>>,
    /// `gains[i][k] = ‖h̃_{i,k}‖²`.
    pub gains: Vec<Vec<T>>,
}

fn check_pair<T: Real>(h: &CMat<T>, w: &CMat<T>) -> Result<()> {
    if h.cols() != w.rows() || h.rows() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "channel {:?} with precoder {:?}",
            h.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// `ι_k = σ² + Σ_{j≠k} |h_k w_j|²` for one subcarrier.
pub fn interference_noise<T: Real>(h: &CMat<T>, w: &CMat<T>, noise: T) -> Result<Vec<T>> {
    check_pair(h, w)?;
    let hw = h.matmul(w)?;
    Ok((0..h.rows())
        .map(|k| {
            let mut acc = noise;
            for j in 0..w.cols() {
                if j != k {
                    acc += hw[(k, j)].norm_sqr();
                }
            }
            acc
        })
        .collect())
}

/// `h̃ = h·U·Λ^{−1/2}` from the eigendecomposition of a positive definite `C`.
pub fn whiten<T: Real>(h: &[C<T>], cov: &CMat<T>) -> Result<Vec<C<T>>> {
    let n = cov.rows();
    if h.len() != n || cov.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "row of {} against covariance {:?}",
            h.len(),
            cov.shape()
        )));
    }
    let (vals, u) = hermitian_eig(cov)?;
    let floor = T::lit(1e-12) * cov.trace().re.abs();
    if let Some(&bad) = vals.iter().find(|&&v| v <= floor) {
        return Err(Error::NotPositiveDefinite(bad.to_f64_lossy()));
    }
    Ok((0..n)
        .map(|c| {
            let proj: C<T> = (0..n).map(|r| h[r] * u[(r, c)]).sum();
            proj / vals[c].sqrt()
        })
        .collect())
}

/// Whitening under the scalar-covariance reading: `h̃ = h/√ι`, `λ = ‖h‖²/ι`.
pub fn whitening_context<T: Real>(
    channels: &[CMat<T>],
    precoders: &PrecoderSet<T>,
    specs: &[SubcarrierSpec],
) -> Result<WhiteningContext<T>> {
    check_lengths(channels.len(), precoders.beams.len(), specs.len())?;
    let mut iota = Vec::with_capacity(channels.len());
    let mut whitened = Vec::with_capacity(channels.len());
    let mut gains = Vec::with_capacity(channels.len());
    for ((h, w), spec) in channels.iter().zip(&precoders.beams).zip(specs) {
        let io = interference_noise(h, w, T::lit(spec.noise_var))?;
        let mut rows = Vec::with_capacity(h.rows());
        let mut g = Vec::with_capacity(h.rows());
        for (k, &ik) in io.iter().enumerate() {
            let s = ik.sqrt().recip();
            let row: Vec<C<T>> = h.row(k).iter().map(|&x| x * s).collect();
            g.push(row.iter().map(|z| z.norm_sqr()).sum());
            rows.push(row);
        }
        iota.push(io);
        whitened.push(rows);
        gains.push(g);
    }
    Ok(WhiteningContext {
        iota,
        whitened,
        gains,
    })
}

fn check_lengths(channels: usize, precoders: usize, specs: usize) -> Result<()> {
    if channels != precoders || channels != specs {
        return Err(Error::DimensionMismatch(format!(
            "{channels} channels, {precoders} precoders, {specs} subcarrier specs"
        )));
    }
    Ok(())
}

fn ln2<T: Real>() -> T {
    T::LN_2()
}

/// `R = Σ_i Σ_k B_i log₂(1 + s_{i,k})`, split by band.
pub fn sum_rate<T: Real>(
    channels: &[CMat<T>],
    precoders: &PrecoderSet<T>,
    specs: &[SubcarrierSpec],
) -> Result<RateReport<T>> {
    check_lengths(channels.len(), precoders.beams.len(), specs.len())?;
    let mut sinr = Vec::with_capacity(channels.len());
    let (mut low, mut high) = (T::zero(), T::zero());
    for ((h, w), spec) in channels.iter().zip(&precoders.beams).zip(specs) {
        check_pair(h, w)?;
        let hw = h.matmul(w)?;
        let noise = T::lit(spec.noise_var);
        let bw = T::lit(spec.bandwidth);
        let mut row = Vec::with_capacity(h.rows());
        for k in 0..h.rows() {
            let mut iota = noise;
            for j in 0..w.cols() {
                if j != k {
                    iota += hw[(k, j)].norm_sqr();
                }
            }
            let s = hw[(k, k)].norm_sqr() / iota;
            let r = bw * s.ln_1p() / ln2::<T>();
            match spec.band {
                Band::Low => low += r,
                Band::High => high += r,
            }
            row.push(s);
        }
        sinr.push(row);
    }
    Ok(RateReport {
        sinr,
        rate_low: low,
        rate_high: high,
        total: low + high,
    })
}

/// The whitened determinant form `Σ B_i log₂ det(I + w wᴴ h̃ᴴ h̃)`, with the
/// whitening done by the general eigendecomposition path on `C = ι·I`.
pub fn rate_via_determinant<T: Real>(
    channels: &[CMat<T>],
    precoders: &PrecoderSet<T>,
    specs: &[SubcarrierSpec],
) -> Result<T> {
    check_lengths(channels.len(), precoders.beams.len(), specs.len())?;
    let mut total = T::zero();
    for ((h, w), spec) in channels.iter().zip(&precoders.beams).zip(specs) {
        let nt = h.cols();
        let iota = interference_noise(h, w, T::lit(spec.noise_var))?;
        for (k, &ik) in iota.iter().enumerate() {
            let cov = CMat::identity(nt).scale(cplx(ik, T::zero()));
            let ht = whiten(h.row(k), &cov)?;
            let ht = CMat::from_vec(1, nt, ht)?;
            let wk = CMat::from_fn(nt, 1, |r, _| w[(r, k)]);
            let m = CMat::identity(nt).add(&wk.matmul(&wk.adjoint())?.matmul(&ht.adjoint().matmul(&ht)?)?)?;
            let det = Lu::factor(&m, T::infinity())?.determinant();
            total += T::lit(spec.bandwidth) * det.re.log2();
        }
    }
    Ok(total)
}

/// Which subcarriers a gradient sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandFilter {
    All,
    Low,
    High,
}

/// `∂R/∂Φ` split into low- and high-band parts (bit/s per radian).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGradient<T: Real> {
    pub low: RMat<T>,
    pub high: RMat<T>,
}

impl<T: Real> PhaseGradient<T> {
    pub fn zeros(layers: usize, elements: usize) -> Self {
        Self {
            low: RMat::zeros(layers, elements),
            high: RMat::zeros(layers, elements),
        }
    }

    /// `∇R = ∇R_L + ∇R_H`, entry-wise.
    pub fn total(&self) -> RMat<T> {
        self.low.zip_map(&self.high, |a, b| a + b)
    }

    pub fn select(&self, filter: BandFilter) -> RMat<T> {
        match filter {
            BandFilter::All => self.total(),
            BandFilter::Low => self.low.clone(),
            BandFilter::High => self.high.clone(),
        }
    }
}

/// Analytic `∂R/∂φ_{ℓ,m}` for both bands.
///
/// Each `∂h_{i,k}/∂φ` is a rank-two update assembled from the inverse
/// slices retained in `transfers`; the SINR is differentiated through both
/// its numerator and the interference term.
pub fn phase_gradient_bands<T: Real>(
    channels: &[SubcarrierChannel<T>],
    transfers: &[SimTransfer<T>],
    derivatives: &[PhaseDerivative<T>],
    precoders: &PrecoderSet<T>,
    shape: (usize, usize),
) -> Result<PhaseGradient<T>> {
    if channels.len() != transfers.len() || channels.len() != precoders.beams.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} channels, {} transfers, {} precoders",
            channels.len(),
            transfers.len(),
            precoders.beams.len()
        )));
    }
    if derivatives.len() != shape.0 * shape.1 {
        return Err(Error::DimensionMismatch(format!(
            "{} phase derivatives for a {:?} phase matrix",
            derivatives.len(),
            shape
        )));
    }
    let mut grad = PhaseGradient::zeros(shape.0, shape.1);
    for ((ch, tr), w) in channels.iter().zip(transfers).zip(&precoders.beams) {
        if tr.frequency != ch.spec.frequency {
            return Err(Error::StaleGradient(format!(
                "transfer at {} Hz for subcarrier at {} Hz",
                tr.frequency, ch.spec.frequency
            )));
        }
        let rows = tr.last_rows.as_ref().ok_or_else(|| {
            Error::StaleGradient("transfer was solved without gradient slices".into())
        })?;
        let h = ch.z_rs.matmul(&tr.g21)?.matmul(&ch.z_st)?;
        check_pair(&h, w)?;
        let a = h.matmul(w)?; // a[k][j] = h_k w_j
        let u = ch.z_rs.matmul(rows)?; // K × 2LM
        let q = tr.first_columns.matmul(&ch.z_st)?.matmul(w)?; // 2LM × K
        let users = h.rows();
        let noise = T::lit(ch.spec.noise_var);
        let weight = T::lit(ch.spec.bandwidth) / ln2::<T>();
        // per-user SINR pieces
        let mut iota = vec![noise; users];
        let mut sinr = vec![T::zero(); users];
        for k in 0..users {
            for j in 0..users {
                if j != k {
                    iota[k] += a[(k, j)].norm_sqr();
                }
            }
            sinr[k] = a[(k, k)].norm_sqr() / iota[k];
        }
        let target = match ch.spec.band {
            Band::Low => &mut grad.low,
            Band::High => &mut grad.high,
        };
        for d in derivatives {
            let (p, qq) = (d.port_incident, d.port_transmit);
            let neg = -d.dz;
            let mut acc = T::zero();
            for k in 0..users {
                let (ukp, ukq) = (u[(k, p)], u[(k, qq)]);
                let mut d_interf = T::zero();
                let mut d_signal = T::zero();
                for j in 0..users {
                    let da = neg * (ukp * q[(qq, j)] + ukq * q[(p, j)]);
                    let dpow = (a[(k, j)].conj() * da).re;
                    let dpow = dpow + dpow;
                    if j == k {
                        d_signal = dpow;
                    } else {
                        d_interf += dpow;
                    }
                }
                let ds = (d_signal - sinr[k] * d_interf) / iota[k];
                acc += weight * ds / (T::one() + sinr[k]);
            }
            target[(d.layer, d.element)] += acc;
        }
    }
    Ok(grad)
}

/// Band-filtered gradient; see [`phase_gradient_bands`].
pub fn phase_gradient<T: Real>(
    channels: &[SubcarrierChannel<T>],
    transfers: &[SimTransfer<T>],
    derivatives: &[PhaseDerivative<T>],
    precoders: &PrecoderSet<T>,
    shape: (usize, usize),
    filter: BandFilter,
) -> Result<RMat<T>> {
    Ok(phase_gradient_bands(channels, transfers, derivatives, precoders, shape)?.select(filter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use num_complex::Complex;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / (1u64 << 53) as f64 - 0.5
        }
    }

    fn random_c(rows: usize, cols: usize, seed: u64) -> CMat<f64> {
        let mut r = lcg(seed);
        CMat::from_fn(rows, cols, |_, _| Complex::new(r(), r()))
    }

    fn spec(noise: f64, bw: f64, band: Band) -> SubcarrierSpec {
        SubcarrierSpec {
            index: 0,
            frequency: 1e9,
            bandwidth: bw,
            noise_var: noise,
            band,
        }
    }

    #[test]
    fn single_user_has_no_interference() {
        let h = random_c(1, 3, 1);
        let w = random_c(3, 1, 2);
        assert_eq!(interference_noise(&h, &w, 0.3).unwrap(), vec![0.3]);
    }

    #[test]
    fn orthogonal_beams_cause_no_interference() {
        let h = CMat::from_vec(
            2,
            2,
            vec![
                Complex::new(1.0, 0.0),
                Complex::new(0.0, 0.0),
                Complex::new(0.0, 0.0),
                Complex::new(2.0, 0.0),
            ],
        )
        .unwrap();
        let w = CMat::identity(2);
        assert_eq!(interference_noise(&h, &w, 0.5).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn interference_matches_triple_loop() {
        let h = random_c(3, 4, 3);
        let w = random_c(4, 3, 4);
        let got = interference_noise(&h, &w, 0.1).unwrap();
        for k in 0..3 {
            let mut acc = 0.1;
            for j in 0..3 {
                if j == k {
                    continue;
                }
                let mut ip = Complex::new(0.0, 0.0);
                for t in 0..4 {
                    ip += h[(k, t)] * w[(t, j)];
                }
                acc += ip.norm_sqr();
            }
            assert!((got[k] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn whitening_identities() {
        let h = vec![Complex::new(1.0, 2.0), Complex::new(-0.5, 0.25)];
        let same = whiten(&h, &CMat::identity(2)).unwrap();
        let n0: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        let n1: f64 = same.iter().map(|z| z.norm_sqr()).sum();
        assert!((n0 - n1).abs() < 1e-14);
        let four = CMat::identity(2).scale(Complex::new(4.0, 0.0));
        let half = whiten(&h, &four).unwrap();
        for (a, b) in half.iter().zip(&h) {
            assert!((a - b / 2.0).norm() < 1e-15);
        }
    }

    #[test]
    fn whitening_matches_inverse_quadratic_form() {
        let b = random_c(3, 3, 8);
        let c = b
            .matmul(&b.adjoint())
            .unwrap()
            .add(&CMat::identity(3).scale(Complex::new(0.2, 0.0)))
            .unwrap();
        let h = random_c(1, 3, 9);
        let ht = whiten(h.row(0), &c).unwrap();
        let lhs: f64 = ht.iter().map(|z| z.norm_sqr()).sum();
        let x = Lu::factor(&c, 1e12).unwrap().solve(&h.adjoint()).unwrap();
        let rhs = h.matmul(&x).unwrap()[(0, 0)];
        assert!((lhs - rhs.re).abs() < 1e-10 * lhs);
        assert!(rhs.im.abs() < 1e-10 * lhs);
    }

    #[test]
    fn whitening_rejects_singular_covariance() {
        let c = CMat::from_fn(2, 2, |r, cc| {
            if r == 0 && cc == 0 {
                Complex::new(1.0, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            }
        });
        let h = vec![Complex::new(1.0, 0.0); 2];
        assert!(matches!(whiten(&h, &c), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn zero_precoder_gives_zero_rate() {
        let h = vec![random_c(2, 2, 1)];
        let p = PrecoderSet::zeros(1, 2, 2);
        let r = sum_rate(&h, &p, &[spec(1.0, 1.0, Band::Low)]).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn scalar_closed_form() {
        let h = CMat::from_vec(1, 1, vec![Complex::new(0.6, -0.8)]).unwrap();
        let p: f64 = 2.5;
        let pre = PrecoderSet {
            beams: vec![CMat::from_vec(1, 1, vec![Complex::new(p.sqrt(), 0.0)]).unwrap()],
            powers: vec![vec![p]],
        };
        let r = sum_rate(&[h], &pre, &[spec(0.5, 1e5, Band::High)]).unwrap();
        let expected = 1e5 * (1.0 + 1.0 * p / 0.5f64).log2();
        assert!((r.total - expected).abs() < 1e-9);
        assert_eq!(r.rate_low, 0.0);
        assert_eq!(r.rate_high, r.total);
    }

    #[test]
    fn two_user_rate_matches_sinr_oracle_and_determinant() {
        let h = random_c(2, 2, 31);
        let w = random_c(2, 2, 32);
        let pre = PrecoderSet {
            powers: vec![(0..2).map(|k| w.column(k).iter().map(|z| z.norm_sqr()).sum()).collect()],
            beams: vec![w.clone()],
        };
        let sp = [spec(0.05, 2e5, Band::Low)];
        let r = sum_rate(std::slice::from_ref(&h), &pre, &sp).unwrap();
        let mut oracle = 0.0;
        for k in 0..2 {
            let ip = |j: usize| (0..2).map(|t| h[(k, t)] * w[(t, j)]).sum::<Complex<f64>>();
            let sig = ip(k).norm_sqr();
            let int = ip(1 - k).norm_sqr();
            oracle += 2e5 * (1.0 + sig / (0.05 + int)).log2();
        }
        assert!((r.total - oracle).abs() <= 1e-10 * oracle);
        let det = rate_via_determinant(&[h], &pre, &sp).unwrap();
        assert!((det - oracle).abs() <= 1e-10 * oracle);
    }

    #[test]
    fn more_noise_means_less_rate() {
        let h = random_c(2, 2, 41);
        let w = random_c(2, 2, 42);
        let pre = PrecoderSet {
            powers: vec![vec![1.0, 1.0]],
            beams: vec![w],
        };
        let a = sum_rate(std::slice::from_ref(&h), &pre, &[spec(0.1, 1.0, Band::Low)]).unwrap();
        let b = sum_rate(&[h], &pre, &[spec(0.2, 1.0, Band::Low)]).unwrap();
        assert!(b.total < a.total);
    }

    #[test]
    fn whitening_context_gains() {
        let cfg = ScenarioConfig::desk();
        let specs = &cfg.subcarrier_grid()[..1];
        let h = vec![random_c(2, 2, 5)];
        let pre = PrecoderSet::zeros(1, 2, 2);
        let ctx = whitening_context(&h, &pre, specs).unwrap();
        for k in 0..2 {
            let n: f64 = h[0].row(k).iter().map(|z| z.norm_sqr()).sum();
            assert!((ctx.gains[0][k] - n / specs[0].noise_var).abs() <= 1e-12 * ctx.gains[0][k]);
            assert_eq!(ctx.iota[0][k], specs[0].noise_var);
        }
    }
}
