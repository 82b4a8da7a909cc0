//! Collective-variable encoders: featurization (alignment or distances), a
//! dense network, and an affine calibration onto [-1, 1]. Also the baseline
//! learners (TAE, VDE, DeepTDA, linear TICA and LDA).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{stream_rng, PairDataset};
use crate::error::{check_len, Error, Result};
use crate::geometry::{kabsch_align, RigidAlignment};
use crate::nn::{adam_update, Activation, AdamState, Checkpoint, DenseNet, Gradients, Trace};
use crate::stats;
use crate::systems::{BasinLabel, Configuration, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Kabsch-aligned coordinates, flattened.
    AlignedCoords,
    /// All inter-particle distances.
    PairwiseDistances,
    /// Raw coordinates, for systems in an external field.
    Cartesian,
}

impl InputMode {
    pub fn default_for(system: &SystemSpec) -> Self {
        if system.is_rigid_invariant() {
            InputMode::AlignedCoords
        } else {
            InputMode::Cartesian
        }
    }
}

/// Maps a configuration to network input features.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub mode: InputMode,
    pub reference: Configuration,
    pub spatial_dim: usize,
}

/// What is needed to pull a feature-space gradient back to coordinates.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    Aligned(RigidAlignment),
    Distances(Vec<f64>),
    Identity,
}

impl Featurizer {
    pub fn new(mode: InputMode, reference: Configuration, spatial_dim: usize) -> Result<Self> {
        if spatial_dim == 0 || reference.len() % spatial_dim != 0 || reference.is_empty() {
            return Err(Error::InvalidParameter("reference does not match spatial_dim".into()));
        }
        let f = Self {
            mode,
            reference,
            spatial_dim,
        };
        if f.feature_dim() == 0 {
            return Err(Error::InvalidParameter(
                "pairwise distances need at least two particles".into(),
            ));
        }
        Ok(f)
    }

    pub fn for_system(system: &SystemSpec, mode: InputMode) -> Result<Self> {
        Self::new(mode, system.reference(), system.spatial_dim())
    }

    pub fn n_particles(&self) -> usize {
        self.reference.len() / self.spatial_dim
    }

    pub fn input_dim(&self) -> usize {
        self.reference.len()
    }

    pub fn feature_dim(&self) -> usize {
        match self.mode {
            InputMode::AlignedCoords | InputMode::Cartesian => self.reference.len(),
            InputMode::PairwiseDistances => {
                let n = self.n_particles();
                n * (n - 1) / 2
            }
        }
    }

    pub fn featurize(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.featurize_with_map(x)?.0)
    }

    pub fn featurize_with_map(&self, x: &[f64]) -> Result<(Vec<f64>, FeatureMap)> {
        check_len(self.input_dim(), x.len())?;
        match self.mode {
            InputMode::AlignedCoords => {
                let (aligned, t) = kabsch_align(x, &self.reference, self.spatial_dim)?;
                Ok((aligned, FeatureMap::Aligned(t)))
            }
            InputMode::PairwiseDistances => {
                let d = self.spatial_dim;
                let n = self.n_particles();
                let mut out = Vec::with_capacity(self.feature_dim());
                for i in 0..n {
                    for j in i + 1..n {
                        let sq: f64 = (0..d).map(|c| (x[i * d + c] - x[j * d + c]).powi(2)).sum();
                        out.push(sq.sqrt());
                    }
                }
                Ok((out, FeatureMap::Distances(x.to_vec())))
            }
            InputMode::Cartesian => Ok((x.to_vec(), FeatureMap::Identity)),
        }
    }

    /// Chain a feature-space gradient back to coordinates (alignment frozen).
    pub fn pull_back(&self, map: &FeatureMap, grad_features: &[f64]) -> Result<Vec<f64>> {
        check_len(self.feature_dim(), grad_features.len())?;
        Ok(match map {
            FeatureMap::Aligned(t) => t.pull_back_gradient(grad_features),
            FeatureMap::Identity => grad_features.to_vec(),
            FeatureMap::Distances(x) => {
                let d = self.spatial_dim;
                let n = self.n_particles();
                let mut g = vec![0.0; x.len()];
                let mut k = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        let diff: Vec<f64> = (0..d).map(|c| x[i * d + c] - x[j * d + c]).collect();
                        let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if r == 0.0 {
                            return Err(Error::DegenerateGeometry("coincident particles"));
                        }
                        for c in 0..d {
                            let gc = grad_features[k] * diff[c] / r;
                            g[i * d + c] += gc;
                            g[j * d + c] -= gc;
                        }
                        k += 1;
                    }
                }
                g
            }
        })
    }
}

/// Affine map from raw network output onto [-1, 1] with a sign flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub raw_min: f64,
    pub raw_max: f64,
    pub sign: f64,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            raw_min: -1.0,
            raw_max: 1.0,
            sign: 1.0,
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.sign * (2.0 * (raw - self.raw_min) / (self.raw_max - self.raw_min) - 1.0)
    }

    /// d(calibrated)/d(raw).
    pub fn slope(&self) -> f64 {
        self.sign * 2.0 / (self.raw_max - self.raw_min)
    }
}

/// Anything usable as a biasing coordinate: value plus configuration gradient.
pub trait CollectiveVariable: Sync {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(x)?.0)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Period of the CV if it is an angle.
    fn period(&self) -> Option<f64> {
        None
    }
}

/// The system's own reaction coordinate (position, projection or dihedral).
#[derive(Debug, Clone)]
pub struct GroundTruthCv(pub SystemSpec);

impl CollectiveVariable for GroundTruthCv {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.0.ground_truth_cv(x)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.0.ground_truth_cv_gradient(x)
    }
    fn period(&self) -> Option<f64> {
        self.0.cv_period()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvEncoder {
    pub net: DenseNet,
    pub featurizer: Featurizer,
    pub calibration: Calibration,
}

impl CvEncoder {
    pub fn new(net: DenseNet, featurizer: Featurizer) -> Result<Self> {
        check_len(featurizer.feature_dim(), net.input_dim())?;
        if net.output_dim() == 0 {
            return Err(Error::InvalidParameter("encoder needs an output".into()));
        }
        Ok(Self {
            net,
            featurizer,
            calibration: Calibration::identity(),
        })
    }

    /// First network output before calibration.
    pub fn raw(&self, x: &[f64]) -> Result<f64> {
        let f = self.featurizer.featurize(x)?;
        Ok(self.net.forward(&f)?[0])
    }

    pub fn encode(&self, x: &[f64]) -> Result<f64> {
        Ok(self.calibration.apply(self.raw(x)?))
    }

    /// Calibrated CV and its gradient with respect to `x`.
    pub fn cv_input_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, map) = self.featurizer.featurize_with_map(x)?;
        let (s, gf) = self.feature_gradient(&f)?;
        Ok((s, self.featurizer.pull_back(&map, &gf)?))
    }

    /// Calibrated CV and its gradient with respect to the features.
    pub fn feature_gradient(&self, features: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut trace = Trace::default();
        self.net.forward_trace(features, &mut trace)?;
        let raw = trace.output()[0];
        let mut upstream = vec![0.0; self.net.output_dim()];
        upstream[0] = self.calibration.slope();
        let mut scratch = Gradients::zeros_like(&self.net);
        let g = self.net.backward_trace(&trace, &upstream, &mut scratch)?;
        Ok((self.calibration.apply(raw), g))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = serde_json::Map::new();
        extras.insert("input_mode".into(), serde_json::to_value(self.featurizer.mode)?);
        extras.insert("reference".into(), serde_json::to_value(&self.featurizer.reference)?);
        extras.insert("spatial_dim".into(), self.featurizer.spatial_dim.into());
        extras.insert("calibration".into(), serde_json::to_value(self.calibration)?);
        Ok(Checkpoint::from_net(&self.net, extras))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.extras
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("encoder checkpoint lacks `{k}`")))
        };
        let mode: InputMode = serde_json::from_value(get("input_mode")?)?;
        let reference: Configuration = serde_json::from_value(get("reference")?)?;
        let spatial_dim: usize = serde_json::from_value(get("spatial_dim")?)?;
        let calibration: Calibration = serde_json::from_value(get("calibration")?)?;
        let mut enc = Self::new(ckpt.to_net()?, Featurizer::new(mode, reference, spatial_dim)?)?;
        if !(calibration.raw_min < calibration.raw_max) || calibration.sign.abs() != 1.0 {
            return Err(Error::Format("invalid calibration".into()));
        }
        enc.calibration = calibration;
        Ok(enc)
    }
}

impl CollectiveVariable for CvEncoder {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.encode(x)
    }
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.cv_input_gradient(x)
    }
}

/// Fit the calibration: dataset extremes of the raw output, sign chosen so the
/// basin-A mean is positive.
pub fn calibrate(encoder: &CvEncoder, dataset: &[Configuration], basin_a: &[Configuration]) -> Result<Calibration> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("calibration dataset"));
    }
    if basin_a.is_empty() {
        return Err(Error::EmptyDataset("basin A samples"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in dataset {
        let r = encoder.raw(x)?;
        if !r.is_finite() {
            return Err(Error::DegenerateEncoder("non-finite encoder output".into()));
        }
        lo = lo.min(r);
        hi = hi.max(r);
    }
    calibration_from_raw(
        lo,
        hi,
        &basin_a.iter().map(|x| encoder.raw(x)).collect::<Result<Vec<_>>>()?,
    )
}

fn calibration_from_raw(lo: f64, hi: f64, basin_a_raw: &[f64]) -> Result<Calibration> {
    if !(hi > lo) {
        return Err(Error::DegenerateEncoder(format!("constant encoder output {lo}")));
    }
    let mut cal = Calibration {
        raw_min: lo,
        raw_max: hi,
        sign: 1.0,
    };
    let mean_a = basin_a_raw.iter().map(|&r| cal.apply(r)).sum::<f64>() / basin_a_raw.len() as f64;
    if mean_a <= 0.0 {
        cal.sign = -1.0;
    }
    Ok(cal)
}

/// Calibrate on the current side of a pair dataset, basin A decided by the
/// system's ground-truth coordinate.
pub fn calibrate_on_pairs(encoder: &CvEncoder, pairs: &PairDataset, system: &SystemSpec) -> Result<Calibration> {
    let xs: Vec<Configuration> = pairs.current().cloned().collect();
    let mut basin_a = Vec::new();
    for x in &xs {
        if system.basin_of(x)? == BasinLabel::A {
            basin_a.push(x.clone());
        }
    }
    calibrate(encoder, &xs, &basin_a)
}

/// Linear CV `direction . features + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCv {
    pub direction: Vec<f64>,
    pub offset: f64,
    pub eigenvalues: Option<Vec<f64>>,
}

impl LinearCv {
    pub fn value(&self, features: &[f64]) -> f64 {
        self.offset + self.direction.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()
    }

    /// Wrap as a single-layer encoder (identity calibration).
    pub fn into_encoder(self, featurizer: Featurizer) -> Result<CvEncoder> {
        let n = self.direction.len();
        let net = DenseNet::from_parts(
            vec![n, 1],
            Activation::Identity,
            vec![self.direction],
            vec![vec![self.offset]],
        )?;
        CvEncoder::new(net, featurizer)
    }
}

/// Shared optimizer settings for the network learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub seed: u64,
    /// Defaults to aligned coordinates for rigid-invariant systems, raw
    /// coordinates otherwise.
    pub input_mode: Option<InputMode>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 256,
            n_iters: 2000,
            seed: 0,
            input_mode: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.n_iters == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "lr, batch_size, n_iters and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }

    /// Mirror of the encoder: scalar latent up to `output`.
    fn decoder_sizes(&self, output: usize) -> Vec<usize> {
        let mut s = vec![1];
        s.extend(self.hidden.iter().rev());
        s.push(output);
        s
    }

    pub fn featurizer(&self, system: &SystemSpec) -> Result<Featurizer> {
        Featurizer::for_system(
            system,
            self.input_mode.unwrap_or_else(|| InputMode::default_for(system)),
        )
    }
}

pub(crate) fn featurize_all<'a>(
    featurizer: &Featurizer,
    xs: impl Iterator<Item = &'a Configuration>,
) -> Result<Vec<Vec<f64>>> {
    xs.map(|x| featurizer.featurize(x)).collect()
}

pub(crate) fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Time-lagged autoencoder result.
#[derive(Debug, Clone)]
pub struct TaeModel {
    pub encoder: CvEncoder,
    pub decoder: DenseNet,
    pub loss_history: Vec<f64>,
}

/// Mean reconstruction loss `mean |dec(enc(x)) - y|^2`, accumulating gradients
/// when `grads` is given.
pub fn tae_batch_loss(
    encoder: &DenseNet,
    decoder: &DenseNet,
    xs: &[&[f64]],
    ys: &[&[f64]],
    mut grads: Option<(&mut Gradients, &mut Gradients)>,
) -> Result<f64> {
    let b = xs.len() as f64;
    let (mut te, mut td) = (Trace::default(), Trace::default());
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        encoder.forward_trace(x, &mut te)?;
        decoder.forward_trace(te.output(), &mut td)?;
        let resid: Vec<f64> = td.output().iter().zip(y.iter()).map(|(a, b)| a - b).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        if let Some((ge, gd)) = grads.as_mut() {
            let up: Vec<f64> = resid.iter().map(|r| 2.0 * r / b).collect();
            let dz = decoder.backward_trace(&td, &up, gd)?;
            encoder.backward_trace(&te, &dz, ge)?;
        }
    }
    Ok(loss / b)
}

pub fn train_tae(pairs: &PairDataset, system: &SystemSpec, cfg: &NetConfig) -> Result<TaeModel> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("pair dataset"));
    }
    let featurizer = cfg.featurizer(system)?;
    let xs = featurize_all(&featurizer, pairs.current())?;
    let ys = featurize_all(&featurizer, pairs.lagged())?;
    let d = featurizer.feature_dim();
    let mut enc = DenseNet::init(&cfg.sizes(d, 1), cfg.activation, cfg.seed)?;
    let mut dec = DenseNet::init(&cfg.decoder_sizes(d), cfg.activation, cfg.seed ^ 0xdec0)?;
    let (mut ae, mut ad) = (AdamState::new(&enc, cfg.lr), AdamState::new(&dec, cfg.lr));
    let (mut ge, mut gd) = (Gradients::zeros_like(&enc), Gradients::zeros_like(&dec));
    let mut rng = stream_rng(cfg.seed, 0x7ae);
    let mut history = Vec::with_capacity(cfg.n_iters);
    for it in 0..cfg.n_iters {
        let idx = sample_batch(&mut rng, xs.len(), cfg.batch_size);
        let bx: Vec<&[f64]> = idx.iter().map(|&i| xs[i].as_slice()).collect();
        let by: Vec<&[f64]> = idx.iter().map(|&i| ys[i].as_slice()).collect();
        ge.fill_zero();
        gd.fill_zero();
        let loss = tae_batch_loss(&enc, &dec, &bx, &by, Some((&mut ge, &mut gd)))?;
        if !loss.is_finite() || !ge.is_finite() || !gd.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        adam_update(&mut enc, &ge, &mut ae)?;
        adam_update(&mut dec, &gd, &mut ad)?;
        history.push(loss);
    }
    let mut encoder = CvEncoder::new(enc, featurizer)?;
    encoder.calibration = calibrate_on_pairs(&encoder, pairs, system)?;
    Ok(TaeModel {
        encoder,
        decoder: dec,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VdeConfig {
    pub net: NetConfig,
    pub beta_kl: f64,
    /// Weight of the negative lag autocorrelation of the latent means.
    pub lambda: f64,
    /// Scale of the reparameterization noise (1 = standard VAE sampling).
    pub noise_scale: f64,
}

impl Default for VdeConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            beta_kl: 1e-3,
            lambda: 0.1,
            noise_scale: 1.0,
        }
    }
}

/// KL(N(mu, exp(logvar)) || N(0, 1)).
pub fn kl_standard_normal(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdeTerms {
    pub recon: f64,
    pub kl: f64,
    pub ac: f64,
    pub total: f64,
}

/// VDE batch loss. `encoder` emits `(mean, logvar)`; `noise` holds one
/// standard-normal draw per sample.
pub fn vde_batch_loss(
    encoder: &DenseNet,
    decoder: &DenseNet,
    xs: &[&[f64]],
    ys: &[&[f64]],
    noise: &[f64],
    cfg: &VdeConfig,
    mut grads: Option<(&mut Gradients, &mut Gradients)>,
) -> Result<VdeTerms> {
    let n = xs.len();
    let b = n as f64;
    let mut traces_x = vec![Trace::default(); n];
    let mut traces_y = vec![Trace::default(); n];
    let mut mu_x = Vec::with_capacity(n);
    let mut mu_y = Vec::with_capacity(n);
    for i in 0..n {
        encoder.forward_trace(xs[i], &mut traces_x[i])?;
        mu_x.push(traces_x[i].output()[0]);
        if cfg.lambda != 0.0 {
            encoder.forward_trace(ys[i], &mut traces_y[i])?;
            mu_y.push(traces_y[i].output()[0]);
        }
    }
    let pearson = if cfg.lambda != 0.0 {
        stats::pearson_with_gradient(&mu_x, &mu_y)
    } else {
        None
    };
    let ac = pearson.as_ref().map_or(0.0, |p| -p.0);
    let mut td = Trace::default();
    let (mut recon, mut kl) = (0.0, 0.0);
    for i in 0..n {
        let out = traces_x[i].output();
        let (mu, logvar) = (out[0], out[1]);
        let sd = (0.5 * logvar).exp();
        let z = mu + cfg.noise_scale * sd * noise[i];
        decoder.forward_trace(&[z], &mut td)?;
        let resid: Vec<f64> = td.output().iter().zip(ys[i]).map(|(a, b)| a - b).collect();
        recon += resid.iter().map(|r| r * r).sum::<f64>();
        kl += kl_standard_normal(mu, logvar);
        if let Some((ge, gd)) = grads.as_mut() {
            let up: Vec<f64> = resid.iter().map(|r| 2.0 * r / b).collect();
            let dz = decoder.backward_trace(&td, &up, gd)?[0];
            let mut dmu = dz + cfg.beta_kl * mu / b;
            let dlv = dz * cfg.noise_scale * noise[i] * 0.5 * sd + cfg.beta_kl * 0.5 * (logvar.exp() - 1.0) / b;
            if let Some((_, gx, gy)) = &pearson {
                dmu -= cfg.lambda * gx[i];
                encoder.backward_trace(&traces_y[i], &[-cfg.lambda * gy[i], 0.0], ge)?;
            }
            encoder.backward_trace(&traces_x[i], &[dmu, dlv], ge)?;
        }
    }
    let (recon, kl) = (recon / b, kl / b);
    Ok(VdeTerms {
        recon,
        kl,
        ac,
        total: recon + cfg.beta_kl * kl + cfg.lambda * ac,
    })
}

#[derive(Debug, Clone)]
pub struct VdeModel {
    /// Mean head only.
    pub encoder: CvEncoder,
    /// Full `(mean, logvar)` network.
    pub variational: DenseNet,
    pub decoder: DenseNet,
    pub loss_history: Vec<VdeTerms>,
}

pub fn train_vde(pairs: &PairDataset, system: &SystemSpec, cfg: &VdeConfig) -> Result<VdeModel> {
    cfg.net.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("pair dataset"));
    }
    if cfg.net.batch_size < 2 && cfg.lambda != 0.0 {
        return Err(Error::InvalidParameter(
            "autocorrelation term needs batch_size >= 2".into(),
        ));
    }
    let net = &cfg.net;
    let featurizer = net.featurizer(system)?;
    let xs = featurize_all(&featurizer, pairs.current())?;
    let ys = featurize_all(&featurizer, pairs.lagged())?;
    let d = featurizer.feature_dim();
    let mut enc = DenseNet::init(&net.sizes(d, 2), net.activation, net.seed)?;
    let mut dec = DenseNet::init(&net.decoder_sizes(d), net.activation, net.seed ^ 0xdec0)?;
    let (mut ae, mut ad) = (AdamState::new(&enc, net.lr), AdamState::new(&dec, net.lr));
    let (mut ge, mut gd) = (Gradients::zeros_like(&enc), Gradients::zeros_like(&dec));
    let mut rng = stream_rng(net.seed, 0x7de);
    let mut history = Vec::with_capacity(net.n_iters);
    for it in 0..net.n_iters {
        let idx = sample_batch(&mut rng, xs.len(), net.batch_size);
        let noise: Vec<f64> = idx.iter().map(|_| rng.sample(StandardNormal)).collect();
        let bx: Vec<&[f64]> = idx.iter().map(|&i| xs[i].as_slice()).collect();
        let by: Vec<&[f64]> = idx.iter().map(|&i| ys[i].as_slice()).collect();
        ge.fill_zero();
        gd.fill_zero();
        let terms = vde_batch_loss(&enc, &dec, &bx, &by, &noise, cfg, Some((&mut ge, &mut gd)))?;
        if !terms.total.is_finite() || !ge.is_finite() || !gd.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        adam_update(&mut enc, &ge, &mut ae)?;
        adam_update(&mut dec, &gd, &mut ad)?;
        history.push(terms);
    }
    let mut encoder = CvEncoder::new(enc.select_outputs(&[0])?, featurizer)?;
    encoder.calibration = calibrate_on_pairs(&encoder, pairs, system)?;
    Ok(VdeModel {
        encoder,
        variational: enc,
        decoder: dec,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepTdaConfig {
    pub net: NetConfig,
    /// Target means for basins A and B.
    pub target_centers: [f64; 2],
    pub target_sigmas: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DeepTdaConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            target_centers: [-7.0, 7.0],
            target_sigmas: [0.2, 0.2],
            alpha: 1.0,
            beta: 100.0,
        }
    }
}

/// DeepTDA loss on a batch of raw outputs, with its gradient. `None` when
/// the batch lacks one of the states.
pub fn deeptda_loss(outputs: &[f64], labels: &[BasinLabel], cfg: &DeepTdaConfig) -> Option<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; outputs.len()];
    for (s, label) in [BasinLabel::A, BasinLabel::B].into_iter().enumerate() {
        let idx: Vec<usize> = (0..outputs.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            return None;
        }
        let m = idx.len() as f64;
        let mu = idx.iter().map(|&i| outputs[i]).sum::<f64>() / m;
        let sigma = (idx.iter().map(|&i| (outputs[i] - mu).powi(2)).sum::<f64>() / m).sqrt();
        let dmu = cfg.target_centers[s];
        let dsig = cfg.target_sigmas[s];
        loss += cfg.alpha * (mu - dmu).powi(2) + cfg.beta * (sigma - dsig).powi(2);
        for &i in &idx {
            grad[i] += 2.0 * cfg.alpha * (mu - dmu) / m;
            if sigma > 0.0 {
                grad[i] += 2.0 * cfg.beta * (sigma - dsig) * (outputs[i] - mu) / (m * sigma);
            }
        }
    }
    Some((loss, grad))
}

#[derive(Debug, Clone)]
pub struct DeepTdaModel {
    pub encoder: CvEncoder,
    pub loss_history: Vec<f64>,
    pub skipped_batches: usize,
}

pub fn train_deeptda(
    labeled: &[(Configuration, BasinLabel)],
    system: &SystemSpec,
    cfg: &DeepTdaConfig,
) -> Result<DeepTdaModel> {
    let net = &cfg.net;
    net.validate()?;
    if !labeled.iter().any(|l| l.1 == BasinLabel::A) || !labeled.iter().any(|l| l.1 == BasinLabel::B) {
        return Err(Error::EmptyDataset("both basins must be labeled"));
    }
    let featurizer = net.featurizer(system)?;
    let xs = featurize_all(&featurizer, labeled.iter().map(|l| &l.0))?;
    let mut enc = DenseNet::init(&net.sizes(featurizer.feature_dim(), 1), net.activation, net.seed)?;
    let mut adam = AdamState::new(&enc, net.lr);
    let mut grads = Gradients::zeros_like(&enc);
    let mut rng = stream_rng(net.seed, 0x7da);
    let mut traces = vec![Trace::default(); net.batch_size];
    let mut history = Vec::with_capacity(net.n_iters);
    let mut skipped = 0;
    for it in 0..net.n_iters {
        let idx = sample_batch(&mut rng, xs.len(), net.batch_size);
        let mut outs = Vec::with_capacity(idx.len());
        for (t, &i) in traces.iter_mut().zip(&idx) {
            enc.forward_trace(&xs[i], t)?;
            outs.push(t.output()[0]);
        }
        let labels: Vec<BasinLabel> = idx.iter().map(|&i| labeled[i].1).collect();
        let Some((loss, g)) = deeptda_loss(&outs, &labels, cfg) else {
            skipped += 1;
            continue;
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        grads.fill_zero();
        for (t, gi) in traces.iter().zip(&g) {
            enc.backward_trace(t, &[*gi], &mut grads)?;
        }
        adam_update(&mut enc, &grads, &mut adam)?;
        history.push(loss);
    }
    let mut encoder = CvEncoder::new(enc, featurizer)?;
    let all: Vec<Configuration> = labeled.iter().map(|l| l.0.clone()).collect();
    let basin_a: Vec<Configuration> = labeled
        .iter()
        .filter(|l| l.1 == BasinLabel::A)
        .map(|l| l.0.clone())
        .collect();
    encoder.calibration = calibrate(&encoder, &all, &basin_a)?;
    Ok(DeepTdaModel {
        encoder,
        loss_history: history,
        skipped_batches: skipped,
    })
}

/// Per-feature mean and standard deviation; constant features keep unit scale.
fn standardization(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

fn standardized(rows: &[&[f64]], mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), mean.len(), |i, j| (rows[i][j] - mean[j]) / sd[j])
}

/// Express a direction over standardized features in raw-feature terms.
fn unstandardize(w: &DVector<f64>, mean: &[f64], sd: &[f64]) -> (Vec<f64>, f64) {
    let direction: Vec<f64> = w.iter().zip(sd).map(|(w, s)| w / s).collect();
    let offset = -direction.iter().zip(mean).map(|(d, m)| d * m).sum::<f64>();
    (direction, offset)
}

/// Fix the arbitrary eigenvector sign: the largest-magnitude entry is positive.
fn canonical_sign(w: &mut DVector<f64>) {
    let k = w.iamax();
    if w[k] < 0.0 {
        *w = -w.clone();
    }
}

/// Linear TICA on featurized pairs.
pub fn tica(xs: &[Vec<f64>], ys: &[Vec<f64>], reg: f64) -> Result<LinearCv> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::EmptyDataset("TICA needs at least two pairs"));
    }
    if !(reg >= 0.0) {
        return Err(Error::InvalidParameter("reg must be non-negative".into()));
    }
    let all: Vec<&[f64]> = xs.iter().chain(ys).map(Vec::as_slice).collect();
    let (mean, sd) = standardization(&all);
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let x = standardized(&xr, &mean, &sd);
    let y = standardized(&yr, &mean, &sd);
    let n = xs.len() as f64;
    let c0 = (x.transpose() * &x + y.transpose() * &y) / (2.0 * n);
    let ct = x.transpose() * &y / n;
    let ct = (&ct + ct.transpose()) * 0.5;
    let d = mean.len();
    let c0_reg = &c0 + DMatrix::identity(d, d) * reg;
    let eig0 = c0_reg.clone().symmetric_eigen();
    let (lo, hi) = eig0
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v.abs())));
    if !(lo > 1e-12 * hi.max(1e-300)) {
        return Err(Error::IllConditioned(format!(
            "C0 smallest eigenvalue {lo:e} (largest {hi:e})"
        )));
    }
    let chol = c0_reg
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("C0 is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("singular Cholesky factor".into()))?;
    let m = &l_inv * ct * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let mut w = l_inv.transpose() * v;
    let var = (w.transpose() * &c0 * &w)[(0, 0)];
    if var > 0.0 {
        w /= var.sqrt();
    }
    canonical_sign(&mut w);
    let (direction, offset) = unstandardize(&w, &mean, &sd);
    Ok(LinearCv {
        direction,
        offset,
        eigenvalues: Some(eigenvalues),
    })
}

pub fn fit_linear_tica(pairs: &PairDataset, featurizer: &Featurizer, reg: f64) -> Result<LinearCv> {
    let xs = featurize_all(featurizer, pairs.current())?;
    let ys = featurize_all(featurizer, pairs.lagged())?;
    tica(&xs, &ys, reg)
}

/// Fisher discriminant on featurized samples of the two classes.
pub fn lda(a: &[Vec<f64>], b: &[Vec<f64>], reg: f64) -> Result<LinearCv> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset("LDA needs both classes"));
    }
    if !(reg >= 0.0) {
        return Err(Error::InvalidParameter("reg must be non-negative".into()));
    }
    let all: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let (mean, sd) = standardization(&all);
    let za = standardized(&a.iter().map(Vec::as_slice).collect::<Vec<_>>(), &mean, &sd);
    let zb = standardized(&b.iter().map(Vec::as_slice).collect::<Vec<_>>(), &mean, &sd);
    let d = mean.len();
    let mu_a = za.row_mean().transpose();
    let mu_b = zb.row_mean().transpose();
    let scatter = |z: &DMatrix<f64>, mu: &DVector<f64>| {
        let mut c = z.clone();
        for mut row in c.row_iter_mut() {
            row -= mu.transpose();
        }
        c.transpose() * c
    };
    let sw = (scatter(&za, &mu_a) + scatter(&zb, &mu_b)) / (a.len() + b.len()) as f64 + DMatrix::identity(d, d) * reg;
    let delta = &mu_a - &mu_b;
    if delta.norm() < 1e-10 {
        return Err(Error::DegenerateEncoder("class means coincide".into()));
    }
    let w = sw
        .clone()
        .cholesky()
        .map(|c| c.solve(&delta))
        .ok_or_else(|| Error::IllConditioned("within-class scatter is singular".into()))?;
    if !w.iter().all(|v| v.is_finite()) || w.norm() < 1e-12 {
        return Err(Error::DegenerateEncoder("near-zero discriminant".into()));
    }
    let (direction, _) = unstandardize(&w, &mean, &sd);
    // Zero sits halfway between the class means.
    let mid: Vec<f64> = a[0]
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let ma = a.iter().map(|r| r[j]).sum::<f64>() / a.len() as f64;
            let mb = b.iter().map(|r| r[j]).sum::<f64>() / b.len() as f64;
            0.5 * (ma + mb)
        })
        .collect();
    let offset = -direction.iter().zip(&mid).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearCv {
        direction,
        offset,
        eigenvalues: None,
    })
}

pub fn fit_lda(labeled: &[(Configuration, BasinLabel)], featurizer: &Featurizer, reg: f64) -> Result<LinearCv> {
    let a = featurize_all(
        featurizer,
        labeled.iter().filter(|l| l.1 == BasinLabel::A).map(|l| &l.0),
    )?;
    let b = featurize_all(
        featurizer,
        labeled.iter().filter(|l| l.1 == BasinLabel::B).map(|l| &l.0),
    )?;
    lda(&a, &b, reg)
}

/// Mean `|ds/dfeature|` over `dataset`, as `(feature index, value)` sorted
/// from most to least sensitive.
pub fn sensitivity(encoder: &CvEncoder, dataset: &[Configuration]) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("sensitivity dataset"));
    }
    let mut acc = vec![0.0; encoder.featurizer.feature_dim()];
    for x in dataset {
        let f = encoder.featurizer.featurize(x)?;
        let (_, g) = encoder.feature_gradient(&f)?;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi.abs();
        }
    }
    let mut out: Vec<(usize, f64)> = acc.into_iter().map(|a| a / dataset.len() as f64).enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{butane_chain, SystemKind};

    fn butane_featurizer(mode: InputMode) -> Featurizer {
        Featurizer::for_system(&SystemSpec::new(SystemKind::Butane4), mode).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    fn rotate(r: &[[f64; 3]; 3], x: &[f64], shift: [f64; 3]) -> Vec<f64> {
        x.chunks_exact(3)
            .flat_map(|p| (0..3).map(move |i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + shift[i]))
            .collect()
    }

    fn perturbed_butane(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = butane_chain(1.0, 1.9, rng.random_range(-3.0..3.0)).0;
        x.iter_mut()
            .for_each(|v| *v += 0.05 * rng.sample::<f64, _>(StandardNormal));
        x
    }

    #[test]
    fn reference_features_are_reference() {
        let f = butane_featurizer(InputMode::AlignedCoords);
        let feats = f.featurize(&f.reference).unwrap();
        for (a, b) in feats.iter().zip(f.reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(butane_featurizer(InputMode::PairwiseDistances).feature_dim(), 6);
    }

    #[test]
    fn calibration_arithmetic() {
        let cal = calibration_from_raw(2.0, 6.0, &[5.0]).unwrap();
        assert_eq!((cal.raw_min, cal.raw_max, cal.sign), (2.0, 6.0, 1.0));
        assert_eq!(cal.apply(5.0), 0.5);
        assert_eq!(cal.apply(2.0), -1.0);
        assert_eq!(cal.apply(6.0), 1.0);
        assert_eq!(calibration_from_raw(2.0, 6.0, &[3.0]).unwrap().sign, -1.0);
        assert!(matches!(
            calibration_from_raw(1.0, 1.0, &[1.0]),
            Err(Error::DegenerateEncoder(_))
        ));
    }

    #[test]
    fn calibrate_is_idempotent() {
        let f = butane_featurizer(InputMode::AlignedCoords);
        let net = DenseNet::init(&[12, 8, 1], Activation::Tanh, 3).unwrap();
        let mut enc = CvEncoder::new(net, f).unwrap();
        let mut rng = stream_rng(1, 0);
        let data: Vec<Configuration> = (0..50).map(|_| perturbed_butane(&mut rng).into()).collect();
        let cal = calibrate(&enc, &data, &data[..10]).unwrap();
        enc.calibration = cal;
        let before: Vec<f64> = data.iter().map(|x| enc.encode(x).unwrap()).collect();
        let lo = before.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        enc.calibration = calibrate(&enc, &data, &data[..10]).unwrap();
        let after: Vec<f64> = data.iter().map(|x| enc.encode(x).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn encode_matches_hand_composition() {
        let f = butane_featurizer(InputMode::AlignedCoords);
        let net = DenseNet::init(&[12, 6, 1], Activation::Gelu, 9).unwrap();
        let mut enc = CvEncoder::new(net.clone(), f.clone()).unwrap();
        enc.calibration = Calibration {
            raw_min: -0.3,
            raw_max: 0.8,
            sign: -1.0,
        };
        let x = perturbed_butane(&mut stream_rng(4, 0));
        let (aligned, _) = kabsch_align(&x, &f.reference, 3).unwrap();
        let raw = net.forward(&aligned).unwrap()[0];
        let expected = -(2.0 * (raw + 0.3) / 1.1 - 1.0);
        assert!((enc.encode(&x).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn linear_net_gradient_is_weight() {
        let sys = SystemSpec::doublewell(5.0, 0.0);
        let f = Featurizer::for_system(&sys, InputMode::Cartesian).unwrap();
        let enc = LinearCv {
            direction: vec![0.7],
            offset: 0.1,
            eigenvalues: None,
        }
        .into_encoder(f)
        .unwrap();
        let (s, g) = enc.cv_input_gradient(&[0.4]).unwrap();
        assert!((s - 0.38).abs() < 1e-15);
        assert_eq!(g, vec![0.7]);
    }

    /// Encoder evaluated with the rotation held at its value for `x0`.
    fn frozen_encode(enc: &CvEncoder, t: &RigidAlignment, x: &[f64]) -> f64 {
        let c = crate::geometry::centroid(x, 3);
        let cr = crate::geometry::centroid(&enc.featurizer.reference, 3);
        let mut aligned = Vec::new();
        for p in x.chunks_exact(3) {
            for r in 0..3 {
                let v: f64 = (0..3).map(|k| t.rotation_entry(r, k) * (p[k] - c[k])).sum();
                aligned.push(v + cr[r]);
            }
        }
        enc.calibration.apply(enc.net.forward(&aligned).unwrap()[0])
    }

    #[test]
    fn aligned_gradient_matches_frozen_fd() {
        let f = butane_featurizer(InputMode::AlignedCoords);
        let mut rng = stream_rng(11, 0);
        for case in 0..20 {
            let net = DenseNet::init(&[12, 10, 1], Activation::Tanh, case).unwrap();
            let mut enc = CvEncoder::new(net, f.clone()).unwrap();
            enc.calibration = Calibration {
                raw_min: -0.5,
                raw_max: 1.5,
                sign: -1.0,
            };
            let x = perturbed_butane(&mut rng);
            let (_, t) = kabsch_align(&x, &f.reference, 3).unwrap();
            let (_, g) = enc.cv_input_gradient(&x).unwrap();
            let h = 1e-6;
            for i in 0..12 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (frozen_encode(&enc, &t, &xp) - frozen_encode(&enc, &t, &xm)) / (2.0 * h);
                let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(
                    (fd - g[i]).abs() < 1e-5 * scale,
                    "case {case} coord {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn distance_gradient_matches_fd() {
        let f = butane_featurizer(InputMode::PairwiseDistances);
        let net = DenseNet::init(&[6, 8, 1], Activation::Tanh, 2).unwrap();
        let enc = CvEncoder::new(net, f).unwrap();
        let x = perturbed_butane(&mut stream_rng(5, 0));
        let (_, g) = enc.cv_input_gradient(&x).unwrap();
        for i in 0..12 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (enc.encode(&xp).unwrap() - enc.encode(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradient_rotates_covariantly() {
        let f = butane_featurizer(InputMode::AlignedCoords);
        let enc = CvEncoder::new(DenseNet::init(&[12, 8, 1], Activation::Tanh, 7).unwrap(), f).unwrap();
        let mut rng = stream_rng(8, 0);
        for _ in 0..20 {
            let x = perturbed_butane(&mut rng);
            let r = random_rotation(&mut rng);
            let xr = rotate(&r, &x, [0.3, -1.0, 2.0]);
            let (s0, g0) = enc.cv_input_gradient(&x).unwrap();
            let (s1, g1) = enc.cv_input_gradient(&xr).unwrap();
            assert!((s0 - s1).abs() < 1e-9);
            let g0r = rotate(&r, &g0, [0.0; 3]);
            for (a, b) in g0r.iter().zip(&g1) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let f = butane_featurizer(InputMode::PairwiseDistances);
        let mut enc = CvEncoder::new(DenseNet::init(&[6, 5, 1], Activation::Gelu, 1).unwrap(), f).unwrap();
        enc.calibration = Calibration {
            raw_min: -0.123456789,
            raw_max: 0.3,
            sign: -1.0,
        };
        let json = enc.to_checkpoint().unwrap().to_json().unwrap();
        let back = CvEncoder::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(0.0, 0.0), 0.0);
        assert!((kl_standard_normal(1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vde_degenerates_to_tae() {
        let enc2 = DenseNet::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let enc1 = enc2.select_outputs(&[0]).unwrap();
        let dec = DenseNet::init(&[1, 4, 3], Activation::Tanh, 2).unwrap();
        let mut rng = stream_rng(3, 0);
        let data: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let xs: Vec<&[f64]> = data[..8].iter().map(Vec::as_slice).collect();
        let ys: Vec<&[f64]> = data[8..].iter().map(Vec::as_slice).collect();
        let noise: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let cfg = VdeConfig {
            beta_kl: 0.0,
            lambda: 0.0,
            noise_scale: 0.0,
            ..Default::default()
        };
        let v = vde_batch_loss(&enc2, &dec, &xs, &ys, &noise, &cfg, None).unwrap();
        let t = tae_batch_loss(&enc1, &dec, &xs, &ys, None).unwrap();
        assert_eq!(v.total, t);
    }

    #[test]
    fn vde_gradient_matches_fd() {
        let mut enc = DenseNet::init(&[2, 3, 2], Activation::Tanh, 4).unwrap();
        let dec = DenseNet::init(&[1, 3, 2], Activation::Tanh, 5).unwrap();
        let mut rng = stream_rng(6, 0);
        let data: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let xs: Vec<&[f64]> = data[..6].iter().map(Vec::as_slice).collect();
        let ys: Vec<&[f64]> = data[6..].iter().map(Vec::as_slice).collect();
        let noise: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let cfg = VdeConfig {
            beta_kl: 0.3,
            lambda: 0.7,
            noise_scale: 1.0,
            ..Default::default()
        };
        let mut ge = Gradients::zeros_like(&enc);
        let mut gd = Gradients::zeros_like(&dec);
        vde_batch_loss(&enc, &dec, &xs, &ys, &noise, &cfg, Some((&mut ge, &mut gd))).unwrap();
        let analytic: Vec<f64> = ge.iter().copied().collect();
        let h = 1e-6;
        for (k, g) in analytic.iter().enumerate() {
            let p0 = *enc.params().nth(k).unwrap();
            *enc.params_mut().nth(k).unwrap() = p0 + h;
            let lp = vde_batch_loss(&enc, &dec, &xs, &ys, &noise, &cfg, None).unwrap().total;
            *enc.params_mut().nth(k).unwrap() = p0 - h;
            let lm = vde_batch_loss(&enc, &dec, &xs, &ys, &noise, &cfg, None).unwrap().total;
            *enc.params_mut().nth(k).unwrap() = p0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "param {k}: {fd} vs {g}");
        }
    }

    #[test]
    fn deeptda_gradient_and_skip() {
        let cfg = DeepTdaConfig::default();
        let outs = [0.3, -0.2, 1.1, 0.5, -0.7];
        let labels = [
            BasinLabel::A,
            BasinLabel::A,
            BasinLabel::B,
            BasinLabel::B,
            BasinLabel::A,
        ];
        let (_, g) = deeptda_loss(&outs, &labels, &cfg).unwrap();
        for i in 0..outs.len() {
            let h = 1e-6;
            let mut p = outs;
            let mut m = outs;
            p[i] += h;
            m[i] -= h;
            let fd =
                (deeptda_loss(&p, &labels, &cfg).unwrap().0 - deeptda_loss(&m, &labels, &cfg).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()));
        }
        assert!(deeptda_loss(&outs, &[BasinLabel::A; 5], &cfg).is_none());
    }

    #[test]
    fn deeptda_identical_states_lower_bound() {
        // Same outputs for both states: mu_A = mu_B = m, so the mean terms sum
        // to (m+7)^2 + (m-7)^2 >= 2*49 = alpha * gap^2 / 2.
        let cfg = DeepTdaConfig::default();
        let mut rng = stream_rng(2, 0);
        for _ in 0..200 {
            let v: Vec<f64> = (0..4).map(|_| 20.0 * rng.random::<f64>() - 10.0).collect();
            let outs = [v[0], v[1], v[0], v[1]];
            let labels = [BasinLabel::A, BasinLabel::A, BasinLabel::B, BasinLabel::B];
            let (loss, _) = deeptda_loss(&outs, &labels, &cfg).unwrap();
            assert!(loss >= 0.5 * 14.0f64.powi(2) - 1e-9);
        }
    }

    #[test]
    fn tica_scalar_is_autocorrelation() {
        let mut rng = stream_rng(12, 0);
        let mut x = 0.0;
        let mut series = Vec::new();
        for _ in 0..2000 {
            x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
            series.push(vec![x + 3.0]);
        }
        let xs = series[..1999].to_vec();
        let ys = series[1..].to_vec();
        let cv = tica(&xs, &ys, 0.0).unwrap();
        let all: Vec<f64> = series[..1999].iter().chain(&series[1..]).map(|v| v[0]).collect();
        let m = stats::mean(&all);
        let num: f64 = xs.iter().zip(&ys).map(|(a, b)| (a[0] - m) * (b[0] - m)).sum::<f64>() / 1999.0;
        let den = all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((cv.eigenvalues.unwrap()[0] - num / den).abs() < 1e-10);
    }

    #[test]
    fn tica_symmetric_under_time_reversal() {
        let mut rng = stream_rng(13, 0);
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                x.iter()
                    .map(|v| 0.5 * v + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let a = tica(&xs, &ys, 0.0).unwrap().eigenvalues.unwrap();
        let b = tica(&ys, &xs, 0.0).unwrap().eigenvalues.unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tica_rejects_singular_c0() {
        let xs = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let ys = vec![vec![2.0, 4.0], vec![3.0, 6.0], vec![1.0, 2.0]];
        assert!(matches!(tica(&xs, &ys, 0.0), Err(Error::IllConditioned(_))));
        assert!(tica(&xs, &ys, 1e-3).is_ok());
    }

    #[test]
    fn lda_whitened_direction_is_mean_difference() {
        // Class-centered samples with identity within-class scatter.
        let base = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let a: Vec<Vec<f64>> = base.iter().map(|p| vec![p[0] + 2.0, p[1] + 1.0]).collect();
        let b: Vec<Vec<f64>> = base.iter().map(|p| vec![p[0] - 1.0, p[1]]).collect();
        let cv = lda(&a, &b, 0.0).unwrap();
        let ratio = cv.direction[0] / cv.direction[1];
        assert!((ratio - 3.0).abs() < 1e-12);
        assert!(cv.value(&[2.0, 1.0]) > 0.0 && cv.value(&[-1.0, 0.0]) < 0.0);
        assert!(matches!(lda(&a, &a, 0.0), Err(Error::DegenerateEncoder(_))));
    }

    #[test]
    fn sensitivity_of_linear_encoder() {
        let sys = SystemSpec::new(SystemKind::Mullerbrown2d);
        let f = Featurizer::for_system(&sys, InputMode::Cartesian).unwrap();
        let enc = LinearCv {
            direction: vec![-0.25, 0.0],
            offset: 1.0,
            eigenvalues: None,
        }
        .into_encoder(f)
        .unwrap();
        let data: Vec<Configuration> = vec![vec![0.1, 0.2].into(), vec![-0.5, 1.0].into()];
        assert_eq!(sensitivity(&enc, &data).unwrap(), vec![(0, 0.25), (1, 0.0)]);
    }
}
