//! Time-lagged conditional flow matching: a velocity field over features
//! conditioned on the encoder output of the earlier frame, trained jointly
//! with the encoder, and an RK4 sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cvmodels::{calibrate_on_pairs, featurize_all, sample_batch, CvEncoder, Featurizer, InputMode};
use crate::dynamics::{stream_rng, PairDataset};
use crate::error::{check_len, Error, Result};
use crate::nn::{adam_update, Activation, AdamState, Checkpoint, DenseNet, Gradients, Trace};
use crate::stats;
use crate::systems::{Configuration, SystemSpec};

/// Velocity field `v(x_r, r | s)`; the network input is `[x_r, r, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub net: DenseNet,
    pub sigma: f64,
    pub featurizer: Featurizer,
}

impl FlowModel {
    pub fn new(net: DenseNet, sigma: f64, featurizer: Featurizer) -> Result<Self> {
        let d = featurizer.feature_dim();
        check_len(d + 2, net.input_dim())?;
        check_len(d, net.output_dim())?;
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter("sigma must be positive".into()));
        }
        Ok(Self { net, sigma, featurizer })
    }

    pub fn feature_dim(&self) -> usize {
        self.featurizer.feature_dim()
    }

    pub fn velocity(&self, x: &[f64], r: f64, s: f64) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(x.len() + 2);
        input.extend_from_slice(x);
        input.push(r);
        input.push(s);
        self.net.forward(&input)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = serde_json::Map::new();
        extras.insert("sigma".into(), self.sigma.into());
        extras.insert("condition_dim".into(), 1.into());
        extras.insert("input_mode".into(), serde_json::to_value(self.featurizer.mode)?);
        extras.insert("reference".into(), serde_json::to_value(&self.featurizer.reference)?);
        extras.insert("spatial_dim".into(), self.featurizer.spatial_dim.into());
        Ok(Checkpoint::from_net(&self.net, extras))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.extras
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("flow checkpoint lacks `{k}`")))
        };
        let sigma: f64 = serde_json::from_value(get("sigma")?)?;
        let condition_dim: usize = serde_json::from_value(get("condition_dim")?)?;
        if condition_dim != 1 {
            return Err(Error::Format(format!("unsupported condition_dim {condition_dim}")));
        }
        let mode: InputMode = serde_json::from_value(get("input_mode")?)?;
        let reference: Configuration = serde_json::from_value(get("reference")?)?;
        let spatial_dim: usize = serde_json::from_value(get("spatial_dim")?)?;
        Self::new(ckpt.to_net()?, sigma, Featurizer::new(mode, reference, spatial_dim)?)
    }
}

/// How the condition reaches the velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// The encoder output of `x_t`.
    Learned,
    /// A constant zero: an unconditional flow over `x_{t+tau}`.
    Zeroed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TlcConfig {
    pub tau_steps: u64,
    pub lambda: f64,
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub ode_steps: usize,
    pub seed: u64,
    pub flow_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub input_mode: Option<InputMode>,
    pub condition: ConditionMode,
}

impl Default for TlcConfig {
    fn default() -> Self {
        Self {
            tau_steps: 100,
            lambda: 0.1,
            sigma: 0.05,
            lr: 1e-3,
            batch_size: 256,
            n_iters: 5000,
            ode_steps: 100,
            seed: 0,
            flow_hidden: vec![64, 64],
            encoder_hidden: vec![32, 32],
            activation: Activation::Tanh,
            input_mode: None,
            condition: ConditionMode::Learned,
        }
    }
}

impl TlcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.tau_steps > 0
            && self.sigma > 0.0
            && self.lr > 0.0
            && self.batch_size >= 2
            && self.n_iters > 0
            && self.ode_steps > 0
            && !self.flow_hidden.contains(&0)
            && !self.encoder_hidden.contains(&0);
        if !positive || !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(
                "TLC settings must be positive (batch_size >= 2, lambda >= 0)".into(),
            ));
        }
        Ok(())
    }
}

/// One draw from the conditional probability path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatchSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub r: f64,
    pub x_r: Vec<f64>,
    pub u: Vec<f64>,
}

/// Build the path sample for given `x0`, `r` and path noise `xi`.
pub fn path_point(x0: Vec<f64>, x1: &[f64], r: f64, xi: &[f64], sigma: f64) -> FlowMatchSample {
    let x_r = x1
        .iter()
        .zip(&x0)
        .zip(xi)
        .map(|((a, b), e)| r * a + (1.0 - r) * b + sigma * e)
        .collect();
    let u = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
    FlowMatchSample {
        x0,
        x1: x1.to_vec(),
        r,
        x_r,
        u,
    }
}

pub fn sample_path(x1: &[f64], rng: &mut impl Rng, sigma: f64) -> Result<FlowMatchSample> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    let r: f64 = rng.random();
    let x0: Vec<f64> = x1.iter().map(|_| rng.sample(StandardNormal)).collect();
    let xi: Vec<f64> = x1.iter().map(|_| rng.sample(StandardNormal)).collect();
    Ok(path_point(x0, x1, r, &xi, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TlcLoss {
    pub l_cfm: f64,
    pub l_ac: f64,
    pub l_total: f64,
    /// The encoder outputs had no spread on one side, so `l_ac` was set to 0.
    pub degenerate_ac: bool,
}

/// TLC loss on a batch of featurized pairs with pre-drawn path samples (one
/// per pair, built from the lagged features). Gradients for the flow and the
/// encoder are accumulated when `grads` is given.
pub fn tlc_batch_loss(
    flow: &DenseNet,
    encoder: &DenseNet,
    xs_t: &[&[f64]],
    xs_tau: &[&[f64]],
    samples: &[FlowMatchSample],
    lambda: f64,
    condition: ConditionMode,
    mut grads: Option<(&mut Gradients, &mut Gradients)>,
) -> Result<TlcLoss> {
    let n = xs_t.len();
    if n < 2 || xs_tau.len() != n || samples.len() != n {
        return Err(Error::InvalidParameter(
            "TLC batches need at least two aligned pairs".into(),
        ));
    }
    let b = n as f64;
    let mut tr_t = vec![Trace::default(); n];
    let mut tr_tau = vec![Trace::default(); n];
    let mut s_t = Vec::with_capacity(n);
    let mut s_tau = Vec::with_capacity(n);
    for i in 0..n {
        encoder.forward_trace(xs_t[i], &mut tr_t[i])?;
        encoder.forward_trace(xs_tau[i], &mut tr_tau[i])?;
        s_t.push(tr_t[i].output()[0]);
        s_tau.push(tr_tau[i].output()[0]);
    }
    let corr = stats::pearson_with_gradient(&s_t, &s_tau);
    let l_ac = corr.as_ref().map_or(0.0, |c| -c.0);

    let d = samples[0].u.len();
    let mut tf = Trace::default();
    let mut input = Vec::with_capacity(d + 2);
    let mut l_cfm = 0.0;
    for (i, smp) in samples.iter().enumerate() {
        input.clear();
        input.extend_from_slice(&smp.x_r);
        input.push(smp.r);
        input.push(if condition == ConditionMode::Learned {
            s_t[i]
        } else {
            0.0
        });
        flow.forward_trace(&input, &mut tf)?;
        let resid: Vec<f64> = tf.output().iter().zip(&smp.u).map(|(v, u)| v - u).collect();
        l_cfm += resid.iter().map(|r| r * r).sum::<f64>();
        if let Some((gf, ge)) = grads.as_mut() {
            let up: Vec<f64> = resid.iter().map(|r| 2.0 * r / b).collect();
            let gin = flow.backward_trace(&tf, &up, gf)?;
            let mut ds = if condition == ConditionMode::Learned {
                gin[d + 1]
            } else {
                0.0
            };
            if let Some((_, gx, gy)) = &corr {
                ds -= lambda * gx[i];
                encoder.backward_trace(&tr_tau[i], &[-lambda * gy[i]], ge)?;
            }
            encoder.backward_trace(&tr_t[i], &[ds], ge)?;
        }
    }
    let l_cfm = l_cfm / b;
    Ok(TlcLoss {
        l_cfm,
        l_ac,
        l_total: l_cfm + lambda * l_ac,
        degenerate_ac: corr.is_none(),
    })
}

/// TLC loss on configurations, drawing path samples from `rng`.
pub fn tlc_loss(
    flow: &FlowModel,
    encoder: &CvEncoder,
    batch: &[(Configuration, Configuration)],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<TlcLoss> {
    let xs: Vec<Vec<f64>> = batch
        .iter()
        .map(|p| encoder.featurizer.featurize(&p.0))
        .collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = batch
        .iter()
        .map(|p| flow.featurizer.featurize(&p.1))
        .collect::<Result<_>>()?;
    let samples: Vec<FlowMatchSample> = ys
        .iter()
        .map(|y| sample_path(y, rng, flow.sigma))
        .collect::<Result<_>>()?;
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    tlc_batch_loss(
        &flow.net,
        &encoder.net,
        &xr,
        &yr,
        &samples,
        lambda,
        ConditionMode::Learned,
        None,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub iter: usize,
    pub l_cfm: f64,
    pub l_ac: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct TlcModel {
    pub flow: FlowModel,
    /// Calibrated on the current side of the training pairs.
    pub encoder: CvEncoder,
    pub history: Vec<LossRow>,
}

/// Joint Adam training of the velocity field and the encoder.
pub fn train_tlc(pairs: &PairDataset, system: &SystemSpec, cfg: &TlcConfig) -> Result<TlcModel> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("pair dataset"));
    }
    let mode = cfg.input_mode.unwrap_or_else(|| InputMode::default_for(system));
    let featurizer = Featurizer::for_system(system, mode)?;
    let xs = featurize_all(&featurizer, pairs.current())?;
    let ys = featurize_all(&featurizer, pairs.lagged())?;
    let d = featurizer.feature_dim();

    let sizes = |input: usize, hidden: &[usize], output: usize| {
        let mut s = vec![input];
        s.extend(hidden);
        s.push(output);
        s
    };
    let mut flow = DenseNet::init(&sizes(d + 2, &cfg.flow_hidden, d), cfg.activation, cfg.seed ^ 0xf10)?;
    let mut enc = DenseNet::init(&sizes(d, &cfg.encoder_hidden, 1), cfg.activation, cfg.seed)?;
    let (mut af, mut ae) = (AdamState::new(&flow, cfg.lr), AdamState::new(&enc, cfg.lr));
    let (mut gf, mut ge) = (Gradients::zeros_like(&flow), Gradients::zeros_like(&enc));
    let mut rng = stream_rng(cfg.seed, 0x71c);
    let mut history = Vec::with_capacity(cfg.n_iters);
    for it in 0..cfg.n_iters {
        let idx = sample_batch(&mut rng, xs.len(), cfg.batch_size);
        let samples: Vec<FlowMatchSample> = idx
            .iter()
            .map(|&i| sample_path(&ys[i], &mut rng, cfg.sigma))
            .collect::<Result<_>>()?;
        let bx: Vec<&[f64]> = idx.iter().map(|&i| xs[i].as_slice()).collect();
        let by: Vec<&[f64]> = idx.iter().map(|&i| ys[i].as_slice()).collect();
        gf.fill_zero();
        ge.fill_zero();
        let loss = tlc_batch_loss(
            &flow,
            &enc,
            &bx,
            &by,
            &samples,
            cfg.lambda,
            cfg.condition,
            Some((&mut gf, &mut ge)),
        )?;
        if !loss.l_total.is_finite() || !gf.is_finite() || !ge.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        adam_update(&mut flow, &gf, &mut af)?;
        adam_update(&mut enc, &ge, &mut ae)?;
        history.push(LossRow {
            iter: it,
            l_cfm: loss.l_cfm,
            l_ac: loss.l_ac,
            l_total: loss.l_total,
        });
    }
    let mut encoder = CvEncoder::new(enc, featurizer.clone())?;
    encoder.calibration = calibrate_on_pairs(&encoder, pairs, system)?;
    Ok(TlcModel {
        flow: FlowModel::new(flow, cfg.sigma, featurizer)?,
        encoder,
        history,
    })
}

/// Integrate `dx/dr = v(x, r | s)` from `x0` over `r` in [0, 1] with RK4.
pub fn generate_from(flow: &FlowModel, s: f64, x0: Vec<f64>, ode_steps: usize) -> Result<Vec<f64>> {
    if ode_steps == 0 {
        return Err(Error::InvalidParameter("ode_steps must be at least 1".into()));
    }
    check_len(flow.feature_dim(), x0.len())?;
    let h = 1.0 / ode_steps as f64;
    let mut x = x0;
    let shifted = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    for step in 0..ode_steps {
        let r = step as f64 * h;
        let k1 = flow.velocity(&x, r, s)?;
        let k2 = flow.velocity(&shifted(&x, &k1, 0.5 * h), r + 0.5 * h, s)?;
        let k3 = flow.velocity(&shifted(&x, &k2, 0.5 * h), r + 0.5 * h, s)?;
        let k4 = flow.velocity(&shifted(&x, &k3, h), r + h, s)?;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::GenerationDiverged { step });
        }
    }
    Ok(x)
}

/// Draw `x(0) ~ N(0, I)` and transport it to a feature vector.
pub fn generate(flow: &FlowModel, s: f64, ode_steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x0: Vec<f64> = (0..flow.feature_dim()).map(|_| rng.sample(StandardNormal)).collect();
    generate_from(flow, s, x0, ode_steps)
}
