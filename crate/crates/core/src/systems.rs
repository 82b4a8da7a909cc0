//! Analytic toy molecular systems.
//!
//! Three systems are provided, all in dimensionless units with `k_B = 1`:
//!
//! * `doublewell1d`: one particle on a line, `U = a (x^2 - 1)^2 + tilt * x`.
//! * `mullerbrown2d`: one particle on the standard Müller–Brown surface.
//! * `butane4`: a four-bead chain in 3D with harmonic bonds and angles and a
//!   threefold torsion `c (1 + cos 3 phi)`.
//!
//! Each system knows its slow coordinate, its basin split, its basin minima
//! and, through quadrature, the exact free-energy difference between basins.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry;

/// Flat particle coordinates of one system state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Configuration {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for Configuration {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasinLabel {
    A,
    B,
}

impl BasinLabel {
    pub fn other(self) -> Self {
        match self {
            BasinLabel::A => BasinLabel::B,
            BasinLabel::B => BasinLabel::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Doublewell1d,
    Mullerbrown2d,
    Butane4,
}

impl SystemKind {
    fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            SystemKind::Doublewell1d => &[("a", 5.0), ("tilt", 0.0), ("threshold", 0.0)],
            SystemKind::Mullerbrown2d => &[
                ("min_a_x", -0.558),
                ("min_a_y", 1.442),
                ("min_b_x", 0.623),
                ("min_b_y", 0.028),
                ("threshold", 0.75),
            ],
            SystemKind::Butane4 => &[
                ("bond_k", 100.0),
                ("bond_length", 1.0),
                ("angle_k", 20.0),
                ("angle", 1.911),
                ("torsion_c", 3.0),
                ("threshold", 2.0 * PI / 3.0),
            ],
        }
    }

    pub fn particle_count(self) -> usize {
        match self {
            SystemKind::Doublewell1d | SystemKind::Mullerbrown2d => 1,
            SystemKind::Butane4 => 4,
        }
    }

    pub fn spatial_dim(self) -> usize {
        match self {
            SystemKind::Doublewell1d => 1,
            SystemKind::Mullerbrown2d => 2,
            SystemKind::Butane4 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Doublewell1d => "doublewell1d",
            SystemKind::Mullerbrown2d => "mullerbrown2d",
            SystemKind::Butane4 => "butane4",
        }
    }
}

// Standard Müller–Brown constants.
const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_SA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_SB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_SC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
enum Potential {
    DoubleWell {
        a: f64,
        tilt: f64,
    },
    MullerBrown {
        origin: [f64; 2],
        axis: [f64; 2],
    },
    Butane {
        bond_k: f64,
        bond_length: f64,
        angle_k: f64,
        angle: f64,
        torsion_c: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSpecRepr {
    kind: SystemKind,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default = "unit_mass")]
    mass: f64,
}

fn unit_mass() -> f64 {
    1.0
}

/// A toy system: kind, resolved parameters and particle masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemSpecRepr", into = "SystemSpecRepr")]
pub struct SystemSpec {
    kind: SystemKind,
    params: BTreeMap<String, f64>,
    mass: f64,
    threshold: f64,
    potential: Potential,
}

impl TryFrom<SystemSpecRepr> for SystemSpec {
    type Error = Error;
    fn try_from(r: SystemSpecRepr) -> Result<Self> {
        SystemSpec::with_params(r.kind, &r.params, r.mass)
    }
}

impl From<SystemSpec> for SystemSpecRepr {
    fn from(s: SystemSpec) -> Self {
        SystemSpecRepr {
            kind: s.kind,
            params: s.params,
            mass: s.mass,
        }
    }
}

impl SystemSpec {
    pub fn new(kind: SystemKind) -> Self {
        Self::with_params(kind, &BTreeMap::new(), 1.0).expect("defaults are valid")
    }

    pub fn doublewell(a: f64, tilt: f64) -> Self {
        let params = BTreeMap::from([("a".to_string(), a), ("tilt".to_string(), tilt)]);
        Self::with_params(SystemKind::Doublewell1d, &params, 1.0).expect("valid double well")
    }

    /// Resolve `overrides` against the per-kind defaults. Unknown keys and
    /// non-finite values are rejected.
    pub fn with_params(kind: SystemKind, overrides: &BTreeMap<String, f64>, mass: f64) -> Result<Self> {
        let mut params: BTreeMap<String, f64> = kind.defaults().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in overrides {
            if !params.contains_key(k) {
                return Err(Error::InvalidParameter(format!(
                    "unknown parameter `{k}` for system {}",
                    kind.name()
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("parameter `{k}` must be finite")));
            }
            params.insert(k.clone(), *v);
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidParameter("mass must be positive".into()));
        }
        let p = |k: &str| params[k];
        let potential = match kind {
            SystemKind::Doublewell1d => Potential::DoubleWell {
                a: p("a"),
                tilt: p("tilt"),
            },
            SystemKind::Mullerbrown2d => {
                let origin = [p("min_b_x"), p("min_b_y")];
                let d = [p("min_a_x") - origin[0], p("min_a_y") - origin[1]];
                let n2 = d[0] * d[0] + d[1] * d[1];
                if n2 == 0.0 {
                    return Err(Error::InvalidParameter("basin minima must differ".into()));
                }
                Potential::MullerBrown {
                    origin,
                    axis: [d[0] / n2, d[1] / n2],
                }
            }
            SystemKind::Butane4 => {
                if p("bond_length") <= 0.0 || p("angle") <= 0.0 || p("angle") >= PI {
                    return Err(Error::InvalidParameter(
                        "butane bond_length > 0 and 0 < angle < pi required".into(),
                    ));
                }
                Potential::Butane {
                    bond_k: p("bond_k"),
                    bond_length: p("bond_length"),
                    angle_k: p("angle_k"),
                    angle: p("angle"),
                    torsion_c: p("torsion_c"),
                }
            }
        };
        let threshold = p("threshold");
        Ok(Self {
            kind,
            params,
            mass,
            threshold,
            potential,
        })
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn particle_count(&self) -> usize {
        self.kind.particle_count()
    }

    pub fn spatial_dim(&self) -> usize {
        self.kind.spatial_dim()
    }

    pub fn dim(&self) -> usize {
        self.particle_count() * self.spatial_dim()
    }

    pub fn masses(&self) -> Vec<f64> {
        vec![self.mass; self.particle_count()]
    }

    /// Mass of each coordinate (each particle's mass repeated `spatial_dim` times).
    pub fn coordinate_masses(&self) -> Vec<f64> {
        vec![self.mass; self.dim()]
    }

    pub fn basin_threshold(&self) -> f64 {
        self.threshold
    }

    /// Whether the energy is invariant under rigid motion. External-field
    /// systems (the 1D and 2D surfaces) are not, so structural comparisons
    /// and featurization must not superimpose them.
    pub fn is_rigid_invariant(&self) -> bool {
        matches!(self.kind, SystemKind::Butane4)
    }

    /// Period of the ground-truth coordinate, if it is an angle.
    pub fn cv_period(&self) -> Option<f64> {
        match self.kind {
            SystemKind::Butane4 => Some(2.0 * PI),
            _ => None,
        }
    }

    /// Difference `a - b` of two ground-truth coordinate values, wrapped to
    /// the principal interval for angular coordinates.
    pub fn cv_difference(&self, a: f64, b: f64) -> f64 {
        match self.cv_period() {
            Some(p) => wrap(a - b, p),
            None => a - b,
        }
    }

    pub fn potential_energy(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        Ok(match &self.potential {
            Potential::DoubleWell { a, tilt } => {
                let s = x[0] * x[0] - 1.0;
                a * s * s + tilt * x[0]
            }
            Potential::MullerBrown { .. } => mb_energy_force(x[0], x[1]).0,
            Potential::Butane { .. } => self.butane_energy_force(x, false)?.0,
        })
    }

    /// `-grad U`.
    pub fn force(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.dim()];
        self.energy_and_force(x, &mut f)?;
        Ok(f)
    }

    /// Potential energy, writing `-grad U` into `force`.
    pub fn energy_and_force(&self, x: &[f64], force: &mut [f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        check_len(self.dim(), force.len())?;
        match &self.potential {
            Potential::DoubleWell { a, tilt } => {
                let s = x[0] * x[0] - 1.0;
                force[0] = -(4.0 * a * x[0] * s + tilt);
                Ok(a * s * s + tilt * x[0])
            }
            Potential::MullerBrown { .. } => {
                let (u, gx, gy) = mb_energy_force(x[0], x[1]);
                force[0] = -gx;
                force[1] = -gy;
                Ok(u)
            }
            Potential::Butane { .. } => {
                let (u, f) = self.butane_energy_force(x, true)?;
                force.copy_from_slice(&f);
                Ok(u)
            }
        }
    }

    fn butane_energy_force(&self, x: &[f64], want_force: bool) -> Result<(f64, Vec<f64>)> {
        let Potential::Butane {
            bond_k,
            bond_length,
            angle_k,
            angle,
            torsion_c,
        } = self.potential
        else {
            unreachable!("butane terms on a non-butane system");
        };
        let p = |i: usize| &x[3 * i..3 * i + 3];
        let mut f = vec![0.0; 12];
        let mut u = 0.0;
        for i in 0..3 {
            let d: Vec<f64> = (0..3).map(|k| x[3 * (i + 1) + k] - x[3 * i + k]).collect();
            let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dr = r - bond_length;
            u += 0.5 * bond_k * dr * dr;
            if want_force && r > 0.0 {
                for k in 0..3 {
                    let g = bond_k * dr * d[k] / r;
                    f[3 * (i + 1) + k] -= g;
                    f[3 * i + k] += g;
                }
            }
        }
        for j in 1..3 {
            let (theta, grads) = bend_angle(p(j - 1), p(j), p(j + 1))?;
            let dt = theta - angle;
            u += 0.5 * angle_k * dt * dt;
            if want_force {
                for (slot, g) in grads.iter().enumerate() {
                    let particle = j - 1 + slot / 3;
                    f[3 * particle + slot % 3] -= angle_k * dt * g;
                }
            }
        }
        let phi = geometry::dihedral(p(0), p(1), p(2), p(3))?;
        u += torsion_c * (1.0 + (3.0 * phi).cos());
        if want_force {
            let dphi = geometry::dihedral_gradient(p(0), p(1), p(2), p(3))?;
            let du = -3.0 * torsion_c * (3.0 * phi).sin();
            for (fi, g) in f.iter_mut().zip(dphi) {
                *fi -= du * g;
            }
        }
        Ok((u, f))
    }

    pub fn ground_truth_cv(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        Ok(match &self.potential {
            Potential::DoubleWell { .. } => x[0],
            Potential::MullerBrown { origin, axis } => (x[0] - origin[0]) * axis[0] + (x[1] - origin[1]) * axis[1],
            Potential::Butane { .. } => geometry::dihedral(&x[0..3], &x[3..6], &x[6..9], &x[9..12])?,
        })
    }

    /// Ground-truth coordinate and its gradient with respect to `x`.
    pub fn ground_truth_cv_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = self.ground_truth_cv(x)?;
        let g = match &self.potential {
            Potential::DoubleWell { .. } => vec![1.0],
            Potential::MullerBrown { axis, .. } => axis.to_vec(),
            Potential::Butane { .. } => geometry::dihedral_gradient(&x[0..3], &x[3..6], &x[6..9], &x[9..12])?.to_vec(),
        };
        Ok((s, g))
    }

    /// Basin A iff the (folded, for butane) ground-truth coordinate reaches the threshold.
    pub fn basin_of(&self, x: &[f64]) -> Result<BasinLabel> {
        let s = self.ground_truth_cv(x)?;
        Ok(self.basin_of_cv(s))
    }

    pub fn basin_of_cv(&self, s: f64) -> BasinLabel {
        let folded = if self.cv_period().is_some() { s.abs() } else { s };
        if folded >= self.threshold {
            BasinLabel::A
        } else {
            BasinLabel::B
        }
    }

    /// Minimum-energy configuration of a basin. For butane, basin B is the
    /// gauche(+) minimum at `phi = pi/3`.
    pub fn minimum(&self, basin: BasinLabel) -> Configuration {
        match &self.potential {
            Potential::DoubleWell { .. } => {
                let start = if basin == BasinLabel::A { 1.0 } else { -1.0 };
                Configuration(self.descend(vec![start]))
            }
            Potential::MullerBrown { .. } => {
                let start = match basin {
                    BasinLabel::A => vec![self.params["min_a_x"], self.params["min_a_y"]],
                    BasinLabel::B => vec![self.params["min_b_x"], self.params["min_b_y"]],
                };
                Configuration(self.descend(start))
            }
            Potential::Butane { bond_length, angle, .. } => {
                let phi = if basin == BasinLabel::A { PI } else { PI / 3.0 };
                butane_chain(*bond_length, *angle, phi)
            }
        }
    }

    /// Alignment reference: the basin-A minimum.
    pub fn reference(&self) -> Configuration {
        self.minimum(BasinLabel::A)
    }

    fn descend(&self, mut x: Vec<f64>) -> Vec<f64> {
        // Newton iterations with a finite-difference Hessian; the surfaces are
        // smooth and the starting points lie inside the basins.
        let n = x.len();
        for _ in 0..100 {
            let f = self.force(&x).expect("dimension checked");
            let h = 1e-6;
            let mut hess = nalgebra::DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = self.force(&xp).expect("dimension checked");
                let fm = self.force(&xm).expect("dimension checked");
                for i in 0..n {
                    hess[(i, j)] = -(fp[i] - fm[i]) / (2.0 * h);
                }
            }
            let grad = nalgebra::DVector::from_iterator(n, f.iter().map(|v| -v));
            let Some(step) = hess.lu().solve(&grad) else {
                break;
            };
            for i in 0..n {
                x[i] -= step[i];
            }
            if step.norm() < 1e-14 {
                break;
            }
        }
        x
    }

    /// Build a configuration from the natural low-dimensional parameterization
    /// used for landscape grids: `[x]`, `[x, y]`, or `[phi]` (butane at its
    /// equilibrium bond length and angle).
    pub fn configuration_at(&self, coords: &[f64]) -> Result<Configuration> {
        match &self.potential {
            Potential::DoubleWell { .. } | Potential::MullerBrown { .. } => {
                check_len(self.dim(), coords.len())?;
                Ok(Configuration(coords.to_vec()))
            }
            Potential::Butane { bond_length, angle, .. } => {
                check_len(1, coords.len())?;
                Ok(butane_chain(*bond_length, *angle, coords[0]))
            }
        }
    }

    /// Structural distance used by path metrics: Kabsch RMSD for rigid-invariant
    /// systems, plain RMSD for systems living in an external field.
    pub fn structural_rmsd(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if self.is_rigid_invariant() {
            geometry::rmsd(x, y, self.spatial_dim())
        } else {
            geometry::rmsd_unaligned(x, y, self.spatial_dim())
        }
    }

    /// Exact `Delta F = (1/beta) ln(Z_A / Z_B)` along the ground-truth
    /// coordinate, by quadrature of the Boltzmann weight.
    pub fn reference_delta_f(&self, beta: f64) -> f64 {
        let (za, zb) = self.basin_partition_functions(beta);
        (za / zb).ln() / beta
    }

    /// Unnormalized basin populations `(Z_A, Z_B)` by quadrature.
    pub fn basin_partition_functions(&self, beta: f64) -> (f64, f64) {
        let mut za = 0.0;
        let mut zb = 0.0;
        match &self.potential {
            Potential::DoubleWell { a, .. } => {
                // Integrand is negligible beyond |x| = 1 + 4/sqrt(a beta) + 1.
                let half = 2.0 + 4.0 / (a * beta).max(1e-3).sqrt();
                let n = 200_000;
                let h = 2.0 * half / n as f64;
                for i in 0..n {
                    let x = -half + (i as f64 + 0.5) * h;
                    let w = (-beta * self.potential_energy(&[x]).unwrap()).exp() * h;
                    match self.basin_of_cv(x) {
                        BasinLabel::A => za += w,
                        BasinLabel::B => zb += w,
                    }
                }
            }
            Potential::MullerBrown { origin, axis } => {
                let (nx, ny) = (1200, 1200);
                let (x0, x1, y0, y1) = (-2.0, 1.5, -0.8, 2.5);
                let hx = (x1 - x0) / nx as f64;
                let hy = (y1 - y0) / ny as f64;
                let e0 = -146.7;
                for i in 0..nx {
                    let x = x0 + (i as f64 + 0.5) * hx;
                    for j in 0..ny {
                        let y = y0 + (j as f64 + 0.5) * hy;
                        let u = mb_energy_force(x, y).0;
                        let w = (-beta * (u - e0)).exp() * hx * hy;
                        let s = (x - origin[0]) * axis[0] + (y - origin[1]) * axis[1];
                        match self.basin_of_cv(s) {
                            BasinLabel::A => za += w,
                            BasinLabel::B => zb += w,
                        }
                    }
                }
            }
            Potential::Butane { torsion_c, .. } => {
                // The chain Jacobian prod b^2 sin(theta) does not involve phi,
                // so the dihedral marginal is the torsion Boltzmann factor.
                let n = 200_000;
                let h = 2.0 * PI / n as f64;
                for i in 0..n {
                    let phi = -PI + (i as f64 + 0.5) * h;
                    let w = (-beta * torsion_c * (1.0 + (3.0 * phi).cos())).exp() * h;
                    match self.basin_of_cv(phi) {
                        BasinLabel::A => za += w,
                        BasinLabel::B => zb += w,
                    }
                }
            }
        }
        (za, zb)
    }
}

/// Wrap an angular difference into `(-period/2, period/2]`.
pub fn wrap(d: f64, period: f64) -> f64 {
    let half = 0.5 * period;
    let mut w = (d + half).rem_euclid(period) - half;
    if w <= -half {
        w += period;
    }
    w
}

fn mb_energy_force(x: f64, y: f64) -> (f64, f64, f64) {
    let mut u = 0.0;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for k in 0..4 {
        let dx = x - MB_X0[k];
        let dy = y - MB_Y0[k];
        let e = MB_A[k] * (MB_SA[k] * dx * dx + MB_SB[k] * dx * dy + MB_SC[k] * dy * dy).exp();
        u += e;
        gx += e * (2.0 * MB_SA[k] * dx + MB_SB[k] * dy);
        gy += e * (MB_SB[k] * dx + 2.0 * MB_SC[k] * dy);
    }
    (u, gx, gy)
}

/// Bond angle at `b` and its gradient with respect to `(a, b, c)` (9 entries).
fn bend_angle(a: &[f64], b: &[f64], c: &[f64]) -> Result<(f64, [f64; 9])> {
    let u: [f64; 3] = std::array::from_fn(|k| a[k] - b[k]);
    let w: [f64; 3] = std::array::from_fn(|k| c[k] - b[k]);
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nu == 0.0 || nw == 0.0 {
        return Err(Error::DegenerateGeometry("coincident beads"));
    }
    let cos = (u.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() / (nu * nw)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = (1.0 - cos * cos).sqrt();
    if sin < 1e-12 {
        return Err(Error::DegenerateGeometry("collinear beads in bend angle"));
    }
    let mut g = [0.0; 9];
    for k in 0..3 {
        let dcos_da = w[k] / (nu * nw) - cos * u[k] / (nu * nu);
        let dcos_dc = u[k] / (nu * nw) - cos * w[k] / (nw * nw);
        g[k] = -dcos_da / sin;
        g[6 + k] = -dcos_dc / sin;
        g[3 + k] = -(g[k] + g[6 + k]);
    }
    Ok((theta, g))
}

/// Four-bead chain with equal bonds and angles and the given dihedral.
pub fn butane_chain(bond: f64, angle: f64, phi: f64) -> Configuration {
    let (st, ct) = angle.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Configuration(vec![
        bond * ct,
        bond * st,
        0.0,
        0.0,
        0.0,
        0.0,
        bond,
        0.0,
        0.0,
        bond - bond * ct,
        bond * st * cp,
        bond * st * sp,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_well_values() {
        let s = SystemSpec::doublewell(5.0, 0.0);
        assert_eq!(s.potential_energy(&[1.0]).unwrap(), 0.0);
        assert_eq!(s.potential_energy(&[0.0]).unwrap(), 5.0);
        assert_eq!(s.force(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(s.force(&[2.0]).unwrap(), vec![-120.0]);
        assert_eq!(s.ground_truth_cv(&[0.7]).unwrap(), 0.7);
        assert_eq!(s.basin_of(&[1.0]).unwrap(), BasinLabel::A);
        assert_eq!(s.basin_of(&[-1.0]).unwrap(), BasinLabel::B);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = SystemSpec::new(SystemKind::Butane4);
        assert!(matches!(
            s.potential_energy(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(s.force(&[0.0; 11]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn butane_chain_has_requested_dihedral() {
        for phi in [-2.5, -1.0, 0.3, PI / 3.0, 2.0, PI] {
            let x = butane_chain(1.0, 1.911, phi);
            let got = geometry::dihedral(&x[0..3], &x[3..6], &x[6..9], &x[9..12]).unwrap();
            assert!((got - phi).abs() < 1e-12, "phi {phi} got {got}");
        }
    }

    #[test]
    fn butane_trans_and_gauche() {
        let s = SystemSpec::new(SystemKind::Butane4);
        let trans = s.minimum(BasinLabel::A);
        assert!((s.ground_truth_cv(&trans).unwrap() - PI).abs() < 1e-12);
        assert!(s.potential_energy(&trans).unwrap().abs() < 1e-12);
        assert_eq!(s.basin_of(&trans).unwrap(), BasinLabel::A);
        let gauche = butane_chain(1.0, 1.911, PI / 3.0);
        assert_eq!(s.basin_of(&gauche).unwrap(), BasinLabel::B);
        assert!(s.potential_energy(&gauche).unwrap().abs() < 1e-12);
    }

    #[test]
    fn butane_collinear_dihedral_errors() {
        let s = SystemSpec::new(SystemKind::Butane4);
        let x = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 1.0, 0.0];
        assert!(matches!(s.ground_truth_cv(&x), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn unknown_parameter_rejected() {
        let params = BTreeMap::from([("depth".to_string(), 1.0)]);
        assert!(SystemSpec::with_params(SystemKind::Doublewell1d, &params, 1.0).is_err());
        assert!(SystemSpec::with_params(SystemKind::Doublewell1d, &BTreeMap::new(), 0.0).is_err());
    }

    #[test]
    fn wrap_is_principal() {
        assert!((wrap(2.0 * PI - 0.1, 2.0 * PI) + 0.1).abs() < 1e-12);
        assert!((wrap(-PI, 2.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap(0.3, 2.0 * PI) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn butane_reference_delta_f_is_ln_half() {
        // Three equal wells, trans holds one of them.
        let s = SystemSpec::new(SystemKind::Butane4);
        assert!((s.reference_delta_f(1.0) + 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn symmetric_double_well_reference_is_zero() {
        let s = SystemSpec::doublewell(5.0, 0.0);
        assert!(s.reference_delta_f(2.0).abs() < 1e-9);
    }

    #[test]
    fn system_spec_toml_roundtrip_and_rejection() {
        let spec: SystemSpec = serde_json::from_str(r#"{"kind":"butane4","params":{"torsion_c":2.5}}"#).unwrap();
        assert_eq!(spec.params()["torsion_c"], 2.5);
        let back: SystemSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<SystemSpec>(r#"{"kind":"butane4","extra":1}"#).is_err());
    }
}
