//! Underdamped Langevin dynamics with the BAOAB splitting.
//!
//! Every trajectory draws from its own ChaCha8 stream (`seed`, `stream`), so
//! replicas can run concurrently and stay bit-reproducible. Gaussian noise
//! comes from `rand_distr::StandardNormal` (ziggurat) on top of that stream.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::systems::{BasinLabel, Configuration, SystemSpec};

/// Anything that supplies `U(x)` and `-grad U(x)`.
pub trait ForceField {
    fn dim(&self) -> usize;
    /// Mass of each coordinate.
    fn coordinate_masses(&self) -> Vec<f64>;
    fn energy_and_force(&self, x: &[f64], force: &mut [f64]) -> Result<f64>;
}

impl ForceField for SystemSpec {
    fn dim(&self) -> usize {
        SystemSpec::dim(self)
    }
    fn coordinate_masses(&self) -> Vec<f64> {
        SystemSpec::coordinate_masses(self)
    }
    fn energy_and_force(&self, x: &[f64], force: &mut [f64]) -> Result<f64> {
        SystemSpec::energy_and_force(self, x, force)
    }
}

/// Isotropic harmonic well `U = k/2 |x|^2` with unit masses unless set.
#[derive(Debug, Clone)]
pub struct HarmonicWell {
    pub k: f64,
    pub dim: usize,
    pub mass: f64,
}

impl ForceField for HarmonicWell {
    fn dim(&self) -> usize {
        self.dim
    }
    fn coordinate_masses(&self) -> Vec<f64> {
        vec![self.mass; self.dim]
    }
    fn energy_and_force(&self, x: &[f64], force: &mut [f64]) -> Result<f64> {
        check_len(self.dim, x.len())?;
        let mut u = 0.0;
        for (f, xi) in force.iter_mut().zip(x) {
            *f = -self.k * xi;
            u += 0.5 * self.k * xi * xi;
        }
        Ok(u)
    }
}

/// What a bias hook reports about the configuration it was evaluated at.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BiasEval {
    pub energy: f64,
    pub cv: Option<f64>,
}

/// Additive bias force, evaluated at `(x, step)`. Implementations may keep
/// state (OPES deposits kernels from inside `apply`).
pub trait BiasHook {
    /// Add the bias force into `force` and return the bias energy.
    fn apply(&mut self, x: &[f64], step: u64, force: &mut [f64]) -> Result<BiasEval>;
}

impl<F> BiasHook for F
where
    F: FnMut(&[f64], u64, &mut [f64]) -> Result<BiasEval>,
{
    fn apply(&mut self, x: &[f64], step: u64, force: &mut [f64]) -> Result<BiasEval> {
        self(x, step, force)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinParams {
    pub dt: f64,
    pub gamma: f64,
    /// `k_B T` with `k_B = 1`.
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LangevinParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.gamma >= 0.0 && self.temperature >= 0.0) {
            return Err(Error::InvalidParameter(
                "langevin requires dt > 0, gamma >= 0, temperature >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.temperature
    }
}

/// Random stream for trajectory `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Position, velocity and step counter, plus the force evaluated at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdState {
    pub x: Configuration,
    pub v: Vec<f64>,
    pub t: u64,
    force: Vec<f64>,
    pub potential: f64,
    pub bias: BiasEval,
}

impl MdState {
    /// Build a state and evaluate forces at `x`.
    pub fn new<'h>(
        field: &dyn ForceField,
        x: Configuration,
        v: Vec<f64>,
        bias: Option<&mut (dyn BiasHook + 'h)>,
    ) -> Result<Self> {
        check_len(field.dim(), x.len())?;
        check_len(field.dim(), v.len())?;
        let mut force = vec![0.0; x.len()];
        let potential = field.energy_and_force(&x, &mut force)?;
        let bias = match bias {
            Some(b) => b.apply(&x, 0, &mut force)?,
            None => BiasEval::default(),
        };
        let state = Self {
            x,
            v,
            t: 0,
            force,
            potential,
            bias,
        };
        if !state.force.iter().all(|f| f.is_finite()) {
            return Err(Error::SimulationDiverged {
                step: 0,
                bias: Some(state.bias.energy),
            });
        }
        Ok(state)
    }

    pub fn force(&self) -> &[f64] {
        &self.force
    }

    pub fn kinetic_energy(&self, masses: &[f64]) -> f64 {
        0.5 * self.v.iter().zip(masses).map(|(v, m)| m * v * v).sum::<f64>()
    }
}

/// Maxwell–Boltzmann velocities at `temperature`.
pub fn thermal_velocities(masses: &[f64], temperature: f64, rng: &mut impl Rng) -> Vec<f64> {
    masses
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z * (temperature / m).sqrt()
        })
        .collect()
}

/// One BAOAB step (B half-kick, A half-drift, exact OU, A half-drift, B half-kick).
pub fn step<'h>(
    state: &mut MdState,
    params: &LangevinParams,
    field: &dyn ForceField,
    masses: &[f64],
    bias: Option<&mut (dyn BiasHook + 'h)>,
    rng: &mut impl Rng,
) -> Result<()> {
    let dt = params.dt;
    let c1 = (-params.gamma * dt).exp();
    let c2 = (1.0 - c1 * c1).sqrt();
    let n = state.x.len();
    for i in 0..n {
        state.v[i] += 0.5 * dt * state.force[i] / masses[i];
        state.x[i] += 0.5 * dt * state.v[i];
    }
    if params.temperature > 0.0 && c2 > 0.0 {
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            state.v[i] = c1 * state.v[i] + c2 * (params.temperature / masses[i]).sqrt() * z;
        }
    } else {
        for v in &mut state.v {
            *v *= c1;
        }
    }
    for i in 0..n {
        state.x[i] += 0.5 * dt * state.v[i];
    }
    state.t += 1;
    state.potential = field.energy_and_force(&state.x, &mut state.force)?;
    state.bias = match bias {
        Some(b) => b.apply(&state.x, state.t, &mut state.force)?,
        None => BiasEval::default(),
    };
    if !state.force.iter().all(|f| f.is_finite()) || !state.potential.is_finite() {
        return Err(Error::SimulationDiverged {
            step: state.t,
            bias: Some(state.bias.energy),
        });
    }
    for i in 0..n {
        state.v[i] += 0.5 * dt * state.force[i] / masses[i];
    }
    Ok(())
}

/// Per-frame annotations recorded alongside positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub potential: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub cv: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spatial_dim: usize,
    pub frames: Vec<Configuration>,
    pub record_stride: u64,
    pub params: LangevinParams,
    pub annotations: Annotations,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub n_steps: u64,
    pub record_stride: u64,
    /// Record potential energy, and bias energy / CV when a hook is present.
    pub annotate: bool,
    /// RNG stream within `params.seed`.
    pub stream: u64,
}

/// Run Langevin dynamics from `init` with velocities drawn from Maxwell–Boltzmann.
pub fn run<'h>(
    system: &SystemSpec,
    params: &LangevinParams,
    init: &Configuration,
    opts: RunOptions,
    bias: Option<&mut (dyn BiasHook + 'h)>,
) -> Result<Trajectory> {
    run_field(system, system.spatial_dim(), params, init, opts, bias)
}

pub fn run_field<'h>(
    field: &dyn ForceField,
    spatial_dim: usize,
    params: &LangevinParams,
    init: &Configuration,
    opts: RunOptions,
    mut bias: Option<&mut (dyn BiasHook + 'h)>,
) -> Result<Trajectory> {
    params.validate()?;
    if opts.record_stride == 0 || opts.n_steps < opts.record_stride {
        return Err(Error::InvalidParameter("need n_steps >= record_stride >= 1".into()));
    }
    let masses = field.coordinate_masses();
    let mut rng = stream_rng(params.seed, opts.stream);
    let v0 = thermal_velocities(&masses, params.temperature, &mut rng);
    let mut state = MdState::new(field, init.clone(), v0, bias.as_deref_mut())?;

    let n_frames = (opts.n_steps / opts.record_stride + 1) as usize;
    let mut frames = Vec::with_capacity(n_frames);
    let mut potential = Vec::new();
    let mut bias_values = Vec::new();
    let mut cvs = Vec::new();
    let has_bias = bias.is_some();
    let mut record = |s: &MdState| {
        frames.push(s.x.clone());
        if opts.annotate {
            potential.push(s.potential);
            if has_bias {
                bias_values.push(s.bias.energy);
                cvs.push(s.bias.cv.unwrap_or(f64::NAN));
            }
        }
    };
    record(&state);
    for _ in 0..opts.n_steps {
        step(&mut state, params, field, &masses, bias.as_deref_mut(), &mut rng)?;
        if state.t % opts.record_stride == 0 {
            record(&state);
        }
    }
    let annotations = if opts.annotate {
        Annotations {
            potential: Some(potential),
            bias: has_bias.then_some(bias_values),
            cv: (has_bias && cvs.iter().all(|c| !c.is_nan())).then_some(cvs),
        }
    } else {
        Annotations::default()
    };
    Ok(Trajectory {
        spatial_dim,
        frames,
        record_stride: opts.record_stride,
        params: *params,
        annotations,
    })
}

/// Time-lagged pairs `(x_t, x_{t+tau})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<(Configuration, Configuration)>,
    pub tau_steps: u64,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.0.len())
    }

    pub fn current(&self) -> impl Iterator<Item = &Configuration> {
        self.pairs.iter().map(|p| &p.0)
    }

    pub fn lagged(&self) -> impl Iterator<Item = &Configuration> {
        self.pairs.iter().map(|p| &p.1)
    }
}

/// Index pairs `(traj, i)` eligible for lag `lag_frames`, before subsampling.
pub fn eligible_pairs(
    trajs: &[Trajectory],
    system: &SystemSpec,
    lag_frames: usize,
    exclude_transitions: bool,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        if traj.len() <= lag_frames {
            continue;
        }
        let labels: Vec<BasinLabel> = if exclude_transitions {
            traj.frames.iter().map(|f| system.basin_of(f)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        for i in 0..traj.len() - lag_frames {
            if !exclude_transitions || labels[i] == labels[i + lag_frames] {
                out.push((ti, i));
            }
        }
    }
    Ok(out)
}

/// Extract uniformly subsampled lagged pairs. With `exclude_transitions`, pairs
/// whose endpoints sit in different basins are dropped before subsampling.
pub fn extract_pairs(
    trajs: &[Trajectory],
    system: &SystemSpec,
    tau_steps: u64,
    exclude_transitions: bool,
    max_pairs: usize,
    rng: &mut impl Rng,
) -> Result<PairDataset> {
    if tau_steps == 0 {
        return Err(Error::InvalidParameter("tau_steps must be positive".into()));
    }
    let stride = trajs
        .first()
        .ok_or(Error::EmptyDataset("no trajectories"))?
        .record_stride;
    if trajs.iter().any(|t| t.record_stride != stride) || tau_steps % stride != 0 {
        return Err(Error::InvalidParameter(format!(
            "tau_steps {tau_steps} must be a multiple of the common record stride {stride}"
        )));
    }
    let lag = (tau_steps / stride) as usize;
    let mut idx = eligible_pairs(trajs, system, lag, exclude_transitions)?;
    if idx.is_empty() {
        return Err(Error::EmptyDataset("no eligible time-lagged pairs"));
    }
    if idx.len() > max_pairs {
        // Partial Fisher-Yates: a uniform subset, then restore temporal order.
        for k in 0..max_pairs {
            let j = rng.random_range(k..idx.len());
            idx.swap(k, j);
        }
        idx.truncate(max_pairs);
        idx.sort_unstable();
    }
    let pairs = idx
        .into_iter()
        .map(|(t, i)| (trajs[t].frames[i].clone(), trajs[t].frames[i + lag].clone()))
        .collect();
    Ok(PairDataset { pairs, tau_steps })
}

const TRJ_MAGIC: &[u8; 7] = b"TLCTRJ1";
const TRJ_VERSION: u32 = 1;
const ANN_POTENTIAL: u8 = 1;
const ANN_BIAS: u8 = 2;
const ANN_CV: u8 = 4;
const ANN_THERMOSTAT: u8 = 8;

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize to the `TLCTRJ1` binary layout: magic, little-endian header
/// (u32 version, u32 n_particles, u32 spatial_dim, u64 n_frames, f64 dt,
/// u64 record_stride, u64 seed), the frames as contiguous f64, then a trailer
/// byte flagging which optional blocks follow (potential, bias, cv, and the
/// thermostat's gamma/temperature).
pub fn write_trajectory(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    let dim = traj.dim();
    w.write_all(TRJ_MAGIC)?;
    w.write_all(&TRJ_VERSION.to_le_bytes())?;
    w.write_all(&((dim / traj.spatial_dim) as u32).to_le_bytes())?;
    w.write_all(&(traj.spatial_dim as u32).to_le_bytes())?;
    w.write_all(&(traj.frames.len() as u64).to_le_bytes())?;
    w.write_all(&traj.params.dt.to_le_bytes())?;
    w.write_all(&traj.record_stride.to_le_bytes())?;
    w.write_all(&traj.params.seed.to_le_bytes())?;
    for f in &traj.frames {
        put_f64s(w, f)?;
    }
    let a = &traj.annotations;
    let mut mask = ANN_THERMOSTAT;
    if a.potential.is_some() {
        mask |= ANN_POTENTIAL;
    }
    if a.bias.is_some() {
        mask |= ANN_BIAS;
    }
    if a.cv.is_some() {
        mask |= ANN_CV;
    }
    w.write_all(&[mask])?;
    for block in [&a.potential, &a.bias, &a.cv].into_iter().flatten() {
        put_f64s(w, block)?;
    }
    put_f64s(w, &[traj.params.gamma, traj.params.temperature])?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated trajectory".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn read_trajectory(r: &mut impl Read) -> Result<Trajectory> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(7)? != TRJ_MAGIC {
        return Err(Error::Format("bad trajectory magic".into()));
    }
    let version = c.u32()?;
    if version != TRJ_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let n_particles = c.u32()? as usize;
    let spatial_dim = c.u32()? as usize;
    let n_frames = c.u64()? as usize;
    let dt = c.f64()?;
    let record_stride = c.u64()?;
    let seed = c.u64()?;
    let dim = n_particles * spatial_dim;
    if dim == 0 || n_frames.checked_mul(dim * 8).is_none_or(|b| b > buf.len()) {
        return Err(Error::Format("inconsistent trajectory header".into()));
    }
    let frames = (0..n_frames)
        .map(|_| c.f64s(dim).map(Configuration))
        .collect::<Result<_>>()?;
    let mut params = LangevinParams {
        dt,
        gamma: f64::NAN,
        temperature: f64::NAN,
        seed,
    };
    let mut annotations = Annotations::default();
    if c.pos < buf.len() {
        let mask = c.take(1)?[0];
        if mask & ANN_POTENTIAL != 0 {
            annotations.potential = Some(c.f64s(n_frames)?);
        }
        if mask & ANN_BIAS != 0 {
            annotations.bias = Some(c.f64s(n_frames)?);
        }
        if mask & ANN_CV != 0 {
            annotations.cv = Some(c.f64s(n_frames)?);
        }
        if mask & ANN_THERMOSTAT != 0 {
            params.gamma = c.f64()?;
            params.temperature = c.f64()?;
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after trajectory".into()));
    }
    Ok(Trajectory {
        spatial_dim,
        frames,
        record_stride,
        params,
        annotations,
    })
}

/// One frame per row: `frame,step,c0,c1,...[,potential][,bias][,cv]`.
pub fn write_trajectory_csv(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    let dim = traj.dim();
    let a = &traj.annotations;
    let mut header = vec!["frame".to_string(), "step".to_string()];
    header.extend((0..dim).map(|i| format!("c{i}")));
    for (name, col) in [("potential", &a.potential), ("bias", &a.bias), ("cv", &a.cv)] {
        if col.is_some() {
            header.push(name.to_string());
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, f) in traj.frames.iter().enumerate() {
        let mut row = vec![i.to_string(), (i as u64 * traj.record_stride).to_string()];
        row.extend(f.iter().map(|v| v.to_string()));
        for col in [&a.potential, &a.bias, &a.cv].into_iter().flatten() {
            row.push(col[i].to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

const PAIR_MAGIC: &[u8; 8] = b"TLCPAIR1";

/// Pair datasets: magic `TLCPAIR1`, u32 dim, u64 n_pairs, u64 tau_steps,
/// then `x_t` and `x_{t+tau}` interleaved per pair as f64.
pub fn write_pairs(w: &mut impl Write, pairs: &PairDataset) -> Result<()> {
    w.write_all(PAIR_MAGIC)?;
    w.write_all(&(pairs.dim() as u32).to_le_bytes())?;
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    w.write_all(&pairs.tau_steps.to_le_bytes())?;
    for (a, b) in &pairs.pairs {
        put_f64s(w, a)?;
        put_f64s(w, b)?;
    }
    Ok(())
}

pub fn read_pairs(r: &mut impl Read) -> Result<PairDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != PAIR_MAGIC {
        return Err(Error::Format("bad pair-dataset magic".into()));
    }
    let dim = c.u32()? as usize;
    let n = c.u64()? as usize;
    let tau_steps = c.u64()?;
    if n.checked_mul(dim * 16).is_none_or(|b| b > buf.len()) {
        return Err(Error::Format("inconsistent pair-dataset header".into()));
    }
    let pairs = (0..n)
        .map(|_| Ok((Configuration(c.f64s(dim)?), Configuration(c.f64s(dim)?))))
        .collect::<Result<_>>()?;
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after pair dataset".into()));
    }
    Ok(PairDataset { pairs, tau_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::SystemKind;

    fn params(dt: f64, gamma: f64, temperature: f64, seed: u64) -> LangevinParams {
        LangevinParams {
            dt,
            gamma,
            temperature,
            seed,
        }
    }

    #[test]
    fn free_particle_velocity_decays_exactly() {
        struct Free;
        impl ForceField for Free {
            fn dim(&self) -> usize {
                3
            }
            fn coordinate_masses(&self) -> Vec<f64> {
                vec![1.0; 3]
            }
            fn energy_and_force(&self, _: &[f64], f: &mut [f64]) -> Result<f64> {
                f.fill(0.0);
                Ok(0.0)
            }
        }
        let p = params(0.01, 1.0, 0.0, 0);
        let v0 = vec![1.0, -2.0, 0.5];
        let norm0 = v0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut s = MdState::new(&Free, Configuration(vec![0.0; 3]), v0, None).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..500 {
            step(&mut s, &p, &Free, &[1.0; 3], None, &mut rng).unwrap();
        }
        let norm = s.v.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - norm0 * (-5.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn verlet_limit_conserves_energy() {
        let field = HarmonicWell {
            k: 1.0,
            dim: 1,
            mass: 1.0,
        };
        let p = params(0.01, 0.0, 0.0, 0);
        let mut s = MdState::new(&field, Configuration(vec![1.0]), vec![0.0], None).unwrap();
        let e0 = s.potential + s.kinetic_energy(&[1.0]);
        let mut rng = stream_rng(0, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..100_000 {
            step(&mut s, &p, &field, &[1.0], None, &mut rng).unwrap();
            let e = s.potential + s.kinetic_energy(&[1.0]);
            worst = worst.max(((e - e0) / e0).abs());
        }
        assert!(worst < 1e-4, "relative drift {worst}");
    }

    #[test]
    fn frame_count_and_determinism() {
        let sys = SystemSpec::new(SystemKind::Butane4);
        let p = params(0.005, 1.0, 1.0, 42);
        let opts = RunOptions {
            n_steps: 100,
            record_stride: 10,
            annotate: true,
            stream: 3,
        };
        let a = run(&sys, &p, &sys.reference(), opts, None).unwrap();
        let b = run(&sys, &p, &sys.reference(), opts, None).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a, b);
        let c = run(&sys, &p, &sys.reference(), RunOptions { stream: 4, ..opts }, None).unwrap();
        assert_ne!(a.frames[10], c.frames[10]);
    }

    #[test]
    fn diverging_force_reports_step() {
        let sys = SystemSpec::doublewell(5.0, 0.0);
        let p = params(0.5, 0.0, 0.0, 0);
        let opts = RunOptions {
            n_steps: 1000,
            record_stride: 1,
            annotate: false,
            stream: 0,
        };
        match run(&sys, &p, &Configuration(vec![3.0]), opts, None) {
            Err(Error::SimulationDiverged { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn alternating_trajectory(n: usize) -> Trajectory {
        Trajectory {
            spatial_dim: 1,
            frames: (0..n)
                .map(|i| Configuration(vec![if i % 2 == 0 { 1.0 } else { -1.0 }]))
                .collect(),
            record_stride: 1,
            params: params(0.01, 1.0, 1.0, 0),
            annotations: Annotations::default(),
        }
    }

    #[test]
    fn pair_exclusion_on_alternating_basins() {
        let sys = SystemSpec::doublewell(5.0, 0.0);
        let traj = alternating_trajectory(20);
        let mut rng = stream_rng(0, 0);
        let r = extract_pairs(std::slice::from_ref(&traj), &sys, 1, true, 100, &mut rng);
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
        let all = extract_pairs(&[traj], &sys, 1, false, 100, &mut rng).unwrap();
        assert_eq!(all.len(), 19);
    }

    #[test]
    fn lag_must_match_stride() {
        let sys = SystemSpec::doublewell(5.0, 0.0);
        let mut traj = alternating_trajectory(20);
        traj.record_stride = 10;
        let mut rng = stream_rng(0, 0);
        assert!(extract_pairs(&[traj], &sys, 15, false, 10, &mut rng).is_err());
    }

    #[test]
    fn trajectory_binary_roundtrip_is_bit_exact() {
        let sys = SystemSpec::new(SystemKind::Butane4);
        let p = params(0.005, 1.0, 1.0, 9);
        let opts = RunOptions {
            n_steps: 50,
            record_stride: 5,
            annotate: true,
            stream: 0,
        };
        let mut t = run(&sys, &p, &sys.reference(), opts, None).unwrap();
        t.annotations.cv = Some((0..t.len()).map(|i| i as f64 * 0.1).collect());
        let mut bytes = Vec::new();
        write_trajectory(&mut bytes, &t).unwrap();
        assert_eq!(&bytes[..7], b"TLCTRJ1");
        let back = read_trajectory(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        write_trajectory(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_trajectory_rejected() {
        let t = alternating_trajectory(4);
        let mut bytes = Vec::new();
        write_trajectory(&mut bytes, &t).unwrap();
        bytes.truncate(40);
        assert!(matches!(read_trajectory(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
