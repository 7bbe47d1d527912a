//! Impedance-domain model of the stacked metasurface.
//!
//! The SIM has `L` layers of `M` meta-atoms, each layer a `2M`-port network
//! (face 1 toward the BS, face 2 toward the users), for `2LM` ports overall.
//! Its response at frequency `f` is `G = (Z_SS(f) + Z_S(Φ))⁻¹`; only the
//! `(2L, 1)` block, mapping the first face of layer 1 to the last face of
//! layer `L`, enters the end-to-end channel.
//!
//! `Z_SS` uses a free-space transimpedance kernel between adjacent faces and
//! `(R_a + jX_a)·I` self blocks. The loads hold `jX_c` on same-face entries
//! and `jX_g·e^{jφ}` on the cross-face diagonals, so every phase enters the
//! system through exactly one symmetric pair of entries.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::linalg::{identity_columns, CMat, Lu, RMat};
use crate::scalar::{cplx, expj, two_pi, Real, C};
use crate::scenario::{ScenarioConfig, SPEED_OF_LIGHT};

/// Default cap on the LU condition estimate before a system is declared singular.
pub const DEFAULT_COND_CAP: f64 = 1e12;

/// Face of a metasurface layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    /// Face 1, toward the base station.
    Incident,
    /// Face 2, toward the users.
    Transmit,
}

/// Layer-major, face-minor, element-innermost port numbering (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortIndexMap {
    pub layers: usize,
    pub elements: usize,
}

impl PortIndexMap {
    pub fn new(layers: usize, elements: usize) -> Self {
        Self { layers, elements }
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self::new(cfg.layers, cfg.elements())
    }

    #[inline]
    pub fn ports(&self) -> usize {
        2 * self.layers * self.elements
    }

    /// Index of the first port of face block `b ∈ 0..2L`.
    #[inline]
    pub fn block_start(&self, block: usize) -> usize {
        block * self.elements
    }

    #[inline]
    pub fn block_of(&self, layer: usize, face: Face) -> usize {
        2 * layer
            + match face {
                Face::Incident => 0,
                Face::Transmit => 1,
            }
    }

    #[inline]
    pub fn port(&self, layer: usize, face: Face, element: usize) -> usize {
        debug_assert!(layer < self.layers && element < self.elements);
        self.block_start(self.block_of(layer, face)) + element
    }

    /// Inverse of [`port`](Self::port).
    pub fn locate(&self, port: usize) -> (usize, Face, usize) {
        let block = port / self.elements;
        let face = if block.is_multiple_of(2) {
            Face::Incident
        } else {
            Face::Transmit
        };
        (block / 2, face, port % self.elements)
    }

    /// Block index of the last face (face 2 of layer `L`).
    #[inline]
    pub fn last_block(&self) -> usize {
        2 * self.layers - 1
    }
}

/// Planar positions `(x, y)` of the meta-atoms of one face, centered on the axis.
pub fn element_positions(cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let rmid = (rows as f64 - 1.0) / 2.0;
    let cmid = (cols as f64 - 1.0) / 2.0;
    (0..rows * cols)
        .map(|m| {
            let (r, c) = (m / cols, m % cols);
            (
                (c as f64 - cmid) * cfg.element_spacing,
                (r as f64 - rmid) * cfg.element_spacing,
            )
        })
        .collect()
}

/// Free-space transimpedance surrogate `κ·e^{−j2πfd/c}/d`, evaluated in `f64`.
pub fn transimpedance(kappa: f64, f: f64, d: f64) -> Complex<f64> {
    let phase = -2.0 * std::f64::consts::PI * f * d / SPEED_OF_LIGHT;
    Complex::from_polar(kappa / d, phase)
}

#[inline]
fn to_t<T: Real>(z: Complex<f64>) -> C<T> {
    cplx(T::lit(z.re), T::lit(z.im))
}

/// `Z_SS(f)` with its block sparsity pattern.
#[derive(Debug, Clone)]
pub struct InterconnectMatrix<T: Real> {
    pub frequency: f64,
    pub map: PortIndexMap,
    pub matrix: CMat<T>,
    /// Nonzero `(row block, column block)` coordinates.
    pub pattern: Vec<(usize, usize)>,
}

pub fn build_interconnect<T: Real>(cfg: &ScenarioConfig, f: f64) -> Result<InterconnectMatrix<T>> {
    if !(cfg.layer_spacing > 0.0) {
        return Err(Error::Geometry(format!(
            "layer_spacing must be positive, got {}",
            cfg.layer_spacing
        )));
    }
    if !(cfg.element_spacing > 0.0) {
        return Err(Error::Geometry(format!(
            "element_spacing must be positive, got {}",
            cfg.element_spacing
        )));
    }
    if !(f > 0.0) {
        return Err(Error::InvalidValue("frequency".into(), format!("{f} must be positive")));
    }
    let map = PortIndexMap::from_config(cfg);
    let m = map.elements;
    let n = map.ports();
    let mut z = CMat::zeros(n, n);
    let self_z = cplx(T::lit(cfg.r_a), T::lit(cfg.x_a));
    for p in 0..n {
        z[(p, p)] = self_z;
    }
    let mut pattern: Vec<(usize, usize)> = (0..2 * cfg.layers).map(|b| (b, b)).collect();
    let pos = element_positions(cfg);
    let dz2 = cfg.layer_spacing * cfg.layer_spacing;
    for layer in 0..cfg.layers.saturating_sub(1) {
        let out_block = map.block_of(layer, Face::Transmit);
        let in_block = map.block_of(layer + 1, Face::Incident);
        for p in 0..m {
            for q in 0..m {
                let dx = pos[p].0 - pos[q].0;
                let dy = pos[p].1 - pos[q].1;
                let d = (dx * dx + dy * dy + dz2).sqrt();
                let v = to_t::<T>(transimpedance(cfg.kappa_t, f, d));
                let (r, c) = (map.block_start(out_block) + p, map.block_start(in_block) + q);
                z[(r, c)] = v;
                z[(c, r)] = v;
            }
        }
        pattern.push((out_block, in_block));
        pattern.push((in_block, out_block));
    }
    pattern.sort_unstable();
    Ok(InterconnectMatrix {
        frequency: f,
        map,
        matrix: z,
        pattern,
    })
}

/// SIM phase matrix `Φ` (`L × M`), every entry in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPhases<T: Real>(RMat<T>);

impl<T: Real> SimPhases<T> {
    /// Wraps an already-projected matrix; rejects entries outside `[0, 2π)`.
    pub fn new(phases: RMat<T>) -> Result<Self> {
        let tp = two_pi::<T>();
        if let Some(bad) = phases.as_slice().iter().find(|&&x| !(x >= T::zero() && x < tp)) {
            return Err(Error::InvalidValue(
                "phases".into(),
                format!("{bad} outside [0, 2π)"),
            ));
        }
        Ok(Self(phases))
    }

    pub fn zeros(layers: usize, elements: usize) -> Self {
        Self(RMat::zeros(layers, elements))
    }

    #[inline]
    pub fn as_mat(&self) -> &RMat<T> {
        &self.0
    }

    pub fn into_mat(self) -> RMat<T> {
        self.0
    }
}

/// `Z_S(Φ)` together with the phases it was built from.
#[derive(Debug, Clone)]
pub struct LoadMatrix<T: Real> {
    pub map: PortIndexMap,
    pub matrix: CMat<T>,
    pub phases: RMat<T>,
}

/// Builds the load matrix for any real phase matrix (wrapped or not).
pub fn build_loads<T: Real>(cfg: &ScenarioConfig, phases: &RMat<T>) -> Result<LoadMatrix<T>> {
    let map = PortIndexMap::from_config(cfg);
    if phases.shape() != (map.layers, map.elements) {
        return Err(Error::DimensionMismatch(format!(
            "phases {:?}, expected ({}, {})",
            phases.shape(),
            map.layers,
            map.elements
        )));
    }
    let n = map.ports();
    let mut z = CMat::zeros(n, n);
    let same = cplx(T::zero(), T::lit(cfg.x_c));
    let cross = cplx(T::zero(), T::lit(cfg.x_g));
    for layer in 0..map.layers {
        for m in 0..map.elements {
            let p = map.port(layer, Face::Incident, m);
            let q = map.port(layer, Face::Transmit, m);
            let x = cross * expj(phases[(layer, m)]);
            z[(p, p)] = same;
            z[(q, q)] = same;
            z[(p, q)] = x;
            z[(q, p)] = x;
        }
    }
    Ok(LoadMatrix {
        map,
        matrix: z,
        phases: phases.clone(),
    })
}

/// `G_{2L,1}(Φ, f)` and the inverse slices needed to differentiate it.
#[derive(Debug, Clone)]
pub struct SimTransfer<T: Real> {
    pub frequency: f64,
    pub map: PortIndexMap,
    /// `M × M` block `(2L, 1)` of the inverse.
    pub g21: CMat<T>,
    /// Columns of block 1 of the inverse, `2LM × M`.
    pub first_columns: CMat<T>,
    /// Rows of block `2L` of the inverse, `M × 2LM` (present when requested).
    pub last_rows: Option<CMat<T>>,
    pub condition_estimate: T,
}

fn system_matrix<T: Real>(zss: &InterconnectMatrix<T>, zs: &LoadMatrix<T>) -> Result<CMat<T>> {
    if zss.map != zs.map {
        return Err(Error::DimensionMismatch(format!(
            "interconnect {:?} vs loads {:?}",
            zss.map, zs.map
        )));
    }
    zss.matrix.add(&zs.matrix)
}

/// Solves for `G_{2L,1}` only.
pub fn sim_transfer<T: Real>(
    zss: &InterconnectMatrix<T>,
    zs: &LoadMatrix<T>,
) -> Result<SimTransfer<T>> {
    solve_transfer(zss, zs, false, T::lit(DEFAULT_COND_CAP))
}

/// Solves for `G_{2L,1}` and retains both inverse slices for gradients.
pub fn sim_transfer_with_slices<T: Real>(
    zss: &InterconnectMatrix<T>,
    zs: &LoadMatrix<T>,
) -> Result<SimTransfer<T>> {
    solve_transfer(zss, zs, true, T::lit(DEFAULT_COND_CAP))
}

pub fn solve_transfer<T: Real>(
    zss: &InterconnectMatrix<T>,
    zs: &LoadMatrix<T>,
    keep_slices: bool,
    cond_cap: T,
) -> Result<SimTransfer<T>> {
    let a = system_matrix(zss, zs)?;
    let map = zss.map;
    let (n, m) = (map.ports(), map.elements);
    let lu = Lu::factor(&a, cond_cap)?;
    let first_columns = lu.solve(&identity_columns(n, 0, m))?;
    let last = map.block_start(map.last_block());
    let g21 = first_columns.block(last, 0, m, m);
    let last_rows = if keep_slices {
        // rows of A⁻¹ are columns of A⁻ᵀ
        Some(lu.solve_transpose(&identity_columns(n, last, m))?.transpose())
    } else {
        None
    };
    Ok(SimTransfer {
        frequency: zss.frequency,
        map,
        g21,
        first_columns,
        last_rows,
        condition_estimate: lu.condition_estimate(),
    })
}

/// Rank-two description of `∂G_{2L,1}/∂φ_{ℓ,m}`:
/// `−dz · (R[:,p] C[q,:] + R[:,q] C[p,:])` with `R`, `C` the stored slices,
/// `p`, `q` the two cross-face ports of the atom and `dz = −X_g e^{jφ}`.
#[derive(Debug, Clone, Copy)]
pub struct PhaseDerivative<T: Real> {
    pub layer: usize,
    pub element: usize,
    pub port_incident: usize,
    pub port_transmit: usize,
    /// `∂(Z_S)_{pq}/∂φ = j·jX_g·e^{jφ}`.
    pub dz: C<T>,
}

/// The perturbation pattern for every phase, in `(ℓ, m)` row-major order.
pub fn phase_derivatives<T: Real>(cfg: &ScenarioConfig, phases: &RMat<T>) -> Vec<PhaseDerivative<T>> {
    let map = PortIndexMap::from_config(cfg);
    let xg = T::lit(cfg.x_g);
    let mut out = Vec::with_capacity(map.layers * map.elements);
    for layer in 0..map.layers {
        for element in 0..map.elements {
            let e = expj(phases[(layer, element)]);
            out.push(PhaseDerivative {
                layer,
                element,
                port_incident: map.port(layer, Face::Incident, element),
                port_transmit: map.port(layer, Face::Transmit, element),
                dz: -e * xg,
            });
        }
    }
    out
}

impl<T: Real> SimTransfer<T> {
    /// Dense `∂G_{2L,1}/∂φ` for one atom, assembled from two outer products.
    pub fn derivative(&self, d: &PhaseDerivative<T>) -> Result<CMat<T>> {
        let rows = self.last_rows.as_ref().ok_or_else(|| {
            Error::InvalidValue("transfer".into(), "inverse row slice not retained".into())
        })?;
        let cols = &self.first_columns;
        let m = self.map.elements;
        let (p, q) = (d.port_incident, d.port_transmit);
        let neg = -d.dz;
        Ok(CMat::from_fn(m, m, |r, c| {
            neg * (rows[(r, p)] * cols[(q, c)] + rows[(r, q)] * cols[(p, c)])
        }))
    }
}

/// `∂G_{2L,1}/∂φ_{ℓ,m}` for every phase, in `(ℓ, m)` row-major order.
pub fn sim_transfer_grad<T: Real>(
    cfg: &ScenarioConfig,
    zss: &InterconnectMatrix<T>,
    zs: &LoadMatrix<T>,
) -> Result<Vec<CMat<T>>> {
    let transfer = sim_transfer_with_slices(zss, zs)?;
    phase_derivatives(cfg, &zs.phases)
        .iter()
        .map(|d| transfer.derivative(d))
        .collect()
}

/// Number of nonzeros of `∂Z_S/∂φ_{ℓ,m}`; always the symmetric cross-face pair.
pub fn load_derivative_nonzeros<T: Real>(d: &PhaseDerivative<T>) -> [(usize, usize, C<T>); 2] {
    [
        (d.port_incident, d.port_transmit, d.dz),
        (d.port_transmit, d.port_incident, d.dz),
    ]
}

#[doc(hidden)]
pub fn is_zero_block<T: Real>(m: &CMat<T>) -> bool {
    m.as_slice().iter().all(|z| z.is_zero())
}
