//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tlc_core::analysis::{
    cv_landscape, delta_f, delta_f_series, path_metrics, reweighted_fes, GridSpec, PathMetrics, SeriesOptions,
};
use tlc_core::cvmodels::{
    calibrate, calibrate_on_pairs, fit_lda, fit_linear_tica, sensitivity, train_deeptda, train_tae, train_vde,
    CollectiveVariable, CvEncoder, Featurizer, GroundTruthCv, InputMode,
};
use tlc_core::dynamics::{
    read_pairs, read_trajectory, run, stream_rng, write_pairs, write_trajectory, PairDataset, RunOptions, Trajectory,
};
use tlc_core::enhanced::{run_opes, run_smd, OpesConfig, SmdConfig};
use tlc_core::flowgen::train_tlc;
use tlc_core::nn::{Checkpoint, DenseNet};
use tlc_core::stats;
use tlc_core::{BasinLabel, Configuration, SystemKind, SystemSpec};

use crate::config::{CvChoice, FesCoordinate, ModelKind, RunConfig};
use crate::io::{csv, sha256_hex, DirLock, Manifest, RunDir};
use crate::svg::{heatmap, line_plot, Series};
use crate::{CliError, CliResult};

pub const REPORT_SCHEMA: u32 = 1;

const SIMULATE_MANIFEST: &str = "data/manifest_simulate.json";
const PAIRS_MANIFEST: &str = "data/manifest_make_pairs.json";
const TRAIN_MANIFEST: &str = "models/manifest_train.json";
const CALIBRATE_MANIFEST: &str = "models/manifest_calibrate.json";
const PROJECT_MANIFEST: &str = "report/manifest_project.json";
const SMD_MANIFEST: &str = "smd/manifest_smd.json";
const OPES_MANIFEST: &str = "opes/manifest_opes.json";
const FES_MANIFEST: &str = "report/manifest_fes.json";
const REPORT_MANIFEST: &str = "report/manifest_report.json";

const PAIRS: &str = "data/pairs.bin";
const ENCODER: &str = "models/encoder.json";
const OPES_TRAJ: &str = "opes/traj.bin";
const PROJECTION_JSON: &str = "report/projection.json";
const SMD_SUMMARY: &str = "smd/summary.json";
const FES_SUMMARY: &str = "report/fes_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    MakePairs,
    Train,
    Calibrate,
    Project,
    Smd,
    Opes,
    Fes,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::MakePairs => "make-pairs",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Project => "project",
            Stage::Smd => "smd",
            Stage::Opes => "opes",
            Stage::Fes => "fes",
            Stage::Report => "report",
        }
    }
}

/// Run one stage under the output-directory lock.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> CliResult<()> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let dir = RunDir::new(&cfg.out_dir, Manifest::new(stage.name(), &cfg.hash(), cfg.seed));
    match stage {
        Stage::Simulate => simulate(cfg, dir),
        Stage::MakePairs => make_pairs(cfg, dir),
        Stage::Train => train(cfg, dir),
        Stage::Calibrate => recalibrate(cfg, dir),
        Stage::Project => project(cfg, dir),
        Stage::Smd => smd(cfg, dir),
        Stage::Opes => opes(cfg, dir),
        Stage::Fes => fes(cfg, dir),
        Stage::Report => report(cfg, dir),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn traj_bytes(traj: &Trajectory) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, traj)?;
    Ok(buf)
}

fn basin_tag(b: BasinLabel) -> &'static str {
    match b {
        BasinLabel::A => "a",
        BasinLabel::B => "b",
    }
}

fn simulate(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let lp = cfg.langevin_params();
    let d = &cfg.data;
    let mut frames = 0usize;
    for (bi, basin) in [BasinLabel::A, BasinLabel::B].into_iter().enumerate() {
        for k in 0..d.n_trajs_per_basin {
            let opts = RunOptions {
                n_steps: d.n_steps,
                record_stride: d.stride,
                annotate: true,
                stream: ((bi as u64) << 32) | k,
            };
            let traj = run(sys, &lp, &sys.minimum(basin), opts, None)?;
            frames += traj.len();
            dir.put(
                &format!("data/traj_{}_{k:03}.bin", basin_tag(basin)),
                &traj_bytes(&traj)?,
            )?;
        }
    }
    dir.manifest.notes.insert("system".into(), json!(sys.kind().name()));
    dir.manifest.notes.insert("total_frames".into(), json!(frames));
    dir.finish(SIMULATE_MANIFEST)?;
    Ok(())
}

/// Trajectories listed by the simulate manifest, in name order.
fn load_trajectories(dir: &mut RunDir) -> CliResult<Vec<(String, Trajectory)>> {
    let producer = Manifest::read(&dir.path(SIMULATE_MANIFEST))?;
    let names: Vec<String> = producer
        .outputs
        .keys()
        .filter(|k| k.starts_with("data/traj_"))
        .cloned()
        .collect();
    names
        .into_iter()
        .map(|name| {
            let bytes = dir.take(&name, &producer)?;
            Ok((name, read_trajectory(&mut bytes.as_slice())?))
        })
        .collect()
}

fn check_dim(sys: &SystemSpec, x: &Configuration) -> CliResult<()> {
    if x.len() != sys.dim() {
        return Err(CliError::Config(format!(
            "artifact holds {}-coordinate frames but {} has {}",
            x.len(),
            sys.kind().name(),
            sys.dim()
        )));
    }
    Ok(())
}

fn make_pairs(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let trajs: Vec<Trajectory> = load_trajectories(&mut dir)?.into_iter().map(|t| t.1).collect();
    if let Some(f) = trajs.first().and_then(|t| t.frames.first()) {
        check_dim(&cfg.system, f)?;
    }
    let d = &cfg.data;
    let mut rng = stream_rng(cfg.seed, 1);
    let pairs = tlc_core::dynamics::extract_pairs(
        &trajs,
        &cfg.system,
        d.tau_steps,
        d.exclude_transitions,
        d.max_pairs,
        &mut rng,
    )?;
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs)?;
    dir.put(PAIRS, &buf)?;
    dir.manifest.notes.insert("n_pairs".into(), json!(pairs.len()));
    dir.manifest.notes.insert("tau_steps".into(), json!(pairs.tau_steps));
    dir.finish(PAIRS_MANIFEST)?;
    Ok(())
}

fn load_pairs(cfg: &RunConfig, dir: &mut RunDir) -> CliResult<PairDataset> {
    let producer = Manifest::read(&dir.path(PAIRS_MANIFEST))?;
    let bytes = dir.take(PAIRS, &producer)?;
    let pairs = read_pairs(&mut bytes.as_slice())?;
    if let Some((x, _)) = pairs.pairs.first() {
        check_dim(&cfg.system, x)?;
    }
    Ok(pairs)
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> CliResult<Vec<u8>> {
    let mut s = ckpt.to_json()?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn labeled_frames(
    sys: &SystemSpec,
    xs: impl Iterator<Item = Configuration>,
) -> CliResult<Vec<(Configuration, BasinLabel)>> {
    xs.map(|x| {
        let b = sys.basin_of(&x)?;
        Ok((x, b))
    })
    .collect()
}

fn write_loss(dir: &mut RunDir, header: &[&str], rows: Vec<Vec<f64>>) -> CliResult<()> {
    let total_col = header.len() - 1;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[total_col])).collect();
    dir.put(
        "models/loss.csv",
        &csv(header, rows.iter().map(|r| r.iter().map(|v| num(*v)).collect())),
    )?;
    let svg = line_plot(
        "training loss",
        "iteration",
        header[total_col],
        &[Series {
            label: header[total_col],
            points: pts,
        }],
    );
    dir.put("models/loss.svg", svg.as_bytes())
}

fn train(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let pairs = load_pairs(cfg, &mut dir)?;
    let m = &cfg.model;
    let encoder = match m.kind {
        ModelKind::Tlc => {
            let mut tc = m.tlc.clone();
            tc.seed = cfg.seed;
            tc.tau_steps = pairs.tau_steps;
            let model = train_tlc(&pairs, sys, &tc)?;
            let net_only = Checkpoint::from_net(&model.encoder.net, serde_json::Map::new());
            let mut flow = model.flow.to_checkpoint()?;
            flow.extras.insert(
                "encoder_net_sha256".into(),
                json!(sha256_hex(&checkpoint_bytes(&net_only)?)),
            );
            dir.put("models/flow.json", &checkpoint_bytes(&flow)?)?;
            let rows = model
                .history
                .iter()
                .map(|r| vec![r.iter as f64, r.l_cfm, r.l_ac, r.l_total])
                .collect();
            write_loss(&mut dir, &["iter", "l_cfm", "l_ac", "l_total"], rows)?;
            model.encoder
        }
        ModelKind::Tae => {
            let mut nc = m.tae.clone();
            nc.seed = cfg.seed;
            let model = train_tae(&pairs, sys, &nc)?;
            dir.put(
                "models/decoder.json",
                &checkpoint_bytes(&Checkpoint::from_net(&model.decoder, serde_json::Map::new()))?,
            )?;
            let rows = model
                .loss_history
                .iter()
                .enumerate()
                .map(|(i, l)| vec![i as f64, *l])
                .collect();
            write_loss(&mut dir, &["iter", "loss"], rows)?;
            model.encoder
        }
        ModelKind::Vde => {
            let mut vc = m.vde.clone();
            vc.net.seed = cfg.seed;
            let model = train_vde(&pairs, sys, &vc)?;
            let plain = |n: &DenseNet| checkpoint_bytes(&Checkpoint::from_net(n, serde_json::Map::new()));
            dir.put("models/decoder.json", &plain(&model.decoder)?)?;
            dir.put("models/variational.json", &plain(&model.variational)?)?;
            let rows = model
                .loss_history
                .iter()
                .enumerate()
                .map(|(i, t)| vec![i as f64, t.recon, t.kl, t.ac, t.total])
                .collect();
            write_loss(&mut dir, &["iter", "recon", "kl", "ac", "total"], rows)?;
            model.encoder
        }
        ModelKind::Deeptda => {
            let mut dc = m.deeptda.clone();
            dc.net.seed = cfg.seed;
            let labeled = labeled_frames(sys, pairs.current().cloned())?;
            let model = train_deeptda(&labeled, sys, &dc)?;
            dir.manifest
                .notes
                .insert("skipped_batches".into(), json!(model.skipped_batches));
            let rows = model
                .loss_history
                .iter()
                .enumerate()
                .map(|(i, l)| vec![i as f64, *l])
                .collect();
            write_loss(&mut dir, &["iter", "loss"], rows)?;
            model.encoder
        }
        ModelKind::Tica | ModelKind::Lda => {
            let mode = m.linear.input_mode.unwrap_or_else(|| InputMode::default_for(sys));
            let featurizer = Featurizer::for_system(sys, mode)?;
            let lin = if m.kind == ModelKind::Tica {
                fit_linear_tica(&pairs, &featurizer, m.linear.reg)?
            } else {
                fit_lda(
                    &labeled_frames(sys, pairs.current().cloned())?,
                    &featurizer,
                    m.linear.reg,
                )?
            };
            dir.put_json(
                "models/linear.json",
                &json!({
                    "direction": lin.direction,
                    "offset": lin.offset,
                    "eigenvalues": lin.eigenvalues,
                }),
            )?;
            let mut enc = lin.into_encoder(featurizer)?;
            enc.calibration = calibrate_on_pairs(&enc, &pairs, sys)?;
            enc
        }
    };
    dir.put(ENCODER, &checkpoint_bytes(&encoder.to_checkpoint()?)?)?;
    dir.put_json("models/calibration.json", &encoder.calibration)?;
    dir.manifest.notes.insert("model".into(), serde_json::to_value(m.kind)?);
    dir.manifest.notes.insert("n_pairs".into(), json!(pairs.len()));
    // A fresh encoder supersedes any earlier recalibration.
    let stale = dir.path(CALIBRATE_MANIFEST);
    if stale.exists() {
        std::fs::remove_file(stale)?;
    }
    dir.finish(TRAIN_MANIFEST)?;
    Ok(())
}

/// The latest manifest that wrote the encoder.
fn encoder_producer(root: &Path) -> CliResult<Manifest> {
    let cal = root.join(CALIBRATE_MANIFEST);
    if cal.exists() {
        Manifest::read(&cal)
    } else {
        Manifest::read(&root.join(TRAIN_MANIFEST))
    }
}

fn load_encoder(cfg: &RunConfig, dir: &mut RunDir) -> CliResult<CvEncoder> {
    let producer = encoder_producer(&dir.root)?;
    let bytes = dir.take(ENCODER, &producer)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Io(format!("{ENCODER}: {e}")))?;
    let enc = CvEncoder::from_checkpoint(&Checkpoint::from_json(&text)?)?;
    if enc.featurizer.input_dim() != cfg.system.dim() {
        return Err(CliError::Config(format!(
            "encoder expects {} coordinates but {} has {}",
            enc.featurizer.input_dim(),
            cfg.system.kind().name(),
            cfg.system.dim()
        )));
    }
    Ok(enc)
}

fn recalibrate(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let mut enc = load_encoder(cfg, &mut dir)?;
    let frames: Vec<Configuration> = load_trajectories(&mut dir)?
        .into_iter()
        .flat_map(|t| t.1.frames)
        .collect();
    let basin_a: Vec<Configuration> = labeled_frames(&cfg.system, frames.iter().cloned())?
        .into_iter()
        .filter(|l| l.1 == BasinLabel::A)
        .map(|l| l.0)
        .collect();
    enc.calibration = calibrate(&enc, &frames, &basin_a)?;
    dir.put(ENCODER, &checkpoint_bytes(&enc.to_checkpoint()?)?)?;
    dir.put_json("models/calibration.json", &enc.calibration)?;
    dir.manifest.notes.insert("n_frames".into(), json!(frames.len()));
    dir.finish(CALIBRATE_MANIFEST)?;
    Ok(())
}

fn landscape_grid(sys: &SystemSpec, n: usize) -> (GridSpec, Vec<&'static str>) {
    use std::f64::consts::PI;
    match sys.kind() {
        SystemKind::Doublewell1d => (
            GridSpec {
                axes: vec![(-1.6, 1.6, n)],
            },
            vec!["x"],
        ),
        SystemKind::Mullerbrown2d => (
            GridSpec {
                axes: vec![(-1.5, 1.2, n), (-0.5, 2.0, n)],
            },
            vec!["x", "y"],
        ),
        SystemKind::Butane4 => (
            GridSpec {
                axes: vec![(-PI, PI, n)],
            },
            vec!["phi"],
        ),
    }
}

/// Ground-truth coordinate folded onto `[0, period)` for rank statistics.
fn unwrapped_truth(sys: &SystemSpec, x: &[f64]) -> CliResult<f64> {
    let s = sys.ground_truth_cv(x)?;
    Ok(match sys.cv_period() {
        Some(p) => s.rem_euclid(p),
        None => s,
    })
}

fn project(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let enc = load_encoder(cfg, &mut dir)?;
    let trajs = load_trajectories(&mut dir)?;
    let mut rows = Vec::new();
    let (mut cvs, mut truth, mut cv_a, mut cv_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (name, traj) in &trajs {
        let short = name.trim_start_matches("data/").trim_end_matches(".bin");
        for (i, f) in traj.frames.iter().enumerate() {
            let s = enc.encode(f)?;
            let g = sys.ground_truth_cv(f)?;
            rows.push(vec![short.to_string(), i.to_string(), num(g), num(s)]);
            cvs.push(s);
            truth.push(unwrapped_truth(sys, f)?);
            match sys.basin_of_cv(g) {
                BasinLabel::A => cv_a.push(s),
                BasinLabel::B => cv_b.push(s),
            }
        }
    }
    dir.put(
        "report/projection.csv",
        &csv(&["traj", "frame", "ground_truth", "cv"], rows),
    )?;

    let (grid, axis_names) = landscape_grid(sys, cfg.project.grid_nodes);
    let land = cv_landscape(&enc, sys, &grid)?;
    let mut header = axis_names.clone();
    header.push("cv");
    dir.put(
        "report/landscape.csv",
        &csv(
            &header,
            land.iter()
                .map(|(node, v)| node.iter().chain([v]).map(|x| num(*x)).collect()),
        ),
    )?;
    let svg = if grid.axes.len() == 1 {
        line_plot(
            "CV landscape",
            axis_names[0],
            "cv",
            &[Series {
                label: "cv",
                points: land.iter().map(|(n, v)| (n[0], *v)).collect(),
            }],
        )
    } else {
        let (ax, ay) = (grid.axes[0], grid.axes[1]);
        let values: Vec<Vec<f64>> = (0..ay.2)
            .map(|iy| (0..ax.2).map(|ix| land[ix * ay.2 + iy].1).collect())
            .collect();
        heatmap("CV landscape", "x", "y", (ax.0, ax.1), (ay.0, ay.1), &values)
    };
    dir.put("report/landscape.svg", svg.as_bytes())?;

    let all_frames: Vec<Configuration> = trajs
        .iter()
        .flat_map(|t| t.1.frames.iter().step_by(10).cloned())
        .collect();
    let sens = sensitivity(&enc, &all_frames)?;
    let summary = json!({
        "schema_version": REPORT_SCHEMA,
        "n_frames": cvs.len(),
        "spearman_vs_ground_truth": stats::spearman(&cvs, &truth),
        "mean_cv_basin_a": (!cv_a.is_empty()).then(|| stats::mean(&cv_a)),
        "mean_cv_basin_b": (!cv_b.is_empty()).then(|| stats::mean(&cv_b)),
        "cv_at_minimum_a": enc.encode(&sys.minimum(BasinLabel::A))?,
        "cv_at_minimum_b": enc.encode(&sys.minimum(BasinLabel::B))?,
        "feature_sensitivity": sens,
    });
    dir.put_json(PROJECTION_JSON, &summary)?;
    dir.finish(PROJECT_MANIFEST)?;
    Ok(())
}

enum Cv {
    Truth(GroundTruthCv),
    Model(Box<CvEncoder>),
}

impl Cv {
    fn load(choice: CvChoice, cfg: &RunConfig, dir: &mut RunDir) -> CliResult<Self> {
        Ok(match choice {
            CvChoice::GroundTruth => Cv::Truth(GroundTruthCv(cfg.system.clone())),
            CvChoice::Model => Cv::Model(Box::new(load_encoder(cfg, dir)?)),
        })
    }

    fn as_dyn(&self) -> &dyn CollectiveVariable {
        match self {
            Cv::Truth(t) => t,
            Cv::Model(m) => m.as_ref(),
        }
    }
}

fn cv_label(choice: CvChoice) -> &'static str {
    match choice {
        CvChoice::Model => "model",
        CvChoice::GroundTruth => "ground_truth",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cv: String,
    pub k: f64,
    pub failed_replicas: usize,
    pub rmsd_mean: Option<f64>,
    pub thp_percent: f64,
    pub ets_mean: Option<f64>,
    pub ets_std: Option<f64>,
    pub under_cap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdSummary {
    pub schema_version: u32,
    pub energy_cap: f64,
    pub cap_from_unbiased: bool,
    pub hit_threshold: f64,
    pub rows: Vec<SweepRow>,
    /// Highest THP among rows of the steered CV whose mean E_TS is under the cap.
    pub best: Option<SweepRow>,
    pub best_reference: Option<SweepRow>,
}

/// Highest THP under the cap; ties go to the lower E_TS, then the lower k.
pub fn best_under_cap<'a>(rows: impl Iterator<Item = &'a SweepRow>) -> Option<SweepRow> {
    rows.filter(|r| r.under_cap).cloned().reduce(|best, r| {
        let key = |x: &SweepRow| (x.thp_percent, -x.ets_mean.unwrap_or(f64::INFINITY), -x.k);
        let (a, b) = (key(&best), key(&r));
        if b.partial_cmp(&a) == Some(std::cmp::Ordering::Greater) {
            r
        } else {
            best
        }
    })
}

fn k_tag(k: f64) -> String {
    format!("{k}").replace('.', "p")
}

fn smd(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let sc = &cfg.smd;
    let lp = cfg.langevin_params();
    let steered = Cv::load(sc.cv, cfg, &mut dir)?;
    let mut batches = vec![(cv_label(sc.cv), steered)];
    if sc.reference && sc.cv != CvChoice::GroundTruth {
        batches.push(("reference", Cv::Truth(GroundTruthCv(sys.clone()))));
    }
    let base = SmdConfig {
        k: sc.k,
        horizon_steps: sc.horizon_steps,
        s_initial: 0.0,
        s_target: 0.0,
        n_replicas: sc.n_replicas,
        seed: cfg.seed,
        record_stride: sc.record_stride,
        equilibration_steps: sc.equilibration_steps,
    };
    let (cap, cap_from_unbiased) = match sc.energy_cap {
        Some(c) => (c, false),
        None => {
            // k = 0 reuses the replica streams without any restraint.
            let free = run_smd(
                sys,
                &GroundTruthCv(sys.clone()),
                &lp,
                &SmdConfig { k: 0.0, ..base.clone() },
            )?;
            let mut max_e = f64::NEG_INFINITY;
            for t in free {
                let t = t?;
                let e = t.annotations.potential.as_deref().unwrap_or_default();
                max_e = e.iter().copied().fold(max_e, f64::max);
            }
            (max_e + sc.cap_margin_kt * cfg.langevin.temperature, true)
        }
    };
    let ks = sc.k_grid.clone().unwrap_or_else(|| vec![sc.k]);
    let target = sys.minimum(BasinLabel::B);
    let mut rows = Vec::new();
    for (label, cv) in &batches {
        let cv = cv.as_dyn();
        let s_initial = cv.value(&sys.minimum(BasinLabel::A))?;
        let s_target = cv.value(&target)?;
        for &k in &ks {
            let run_cfg = SmdConfig {
                k,
                s_initial,
                s_target,
                ..base.clone()
            };
            let mut ok = Vec::new();
            let mut failed = 0;
            for (r, t) in run_smd(sys, cv, &lp, &run_cfg)?.into_iter().enumerate() {
                match t {
                    Ok(t) => {
                        dir.put(
                            &format!("smd/{label}_k{}/replica_{r:03}.bin", k_tag(k)),
                            &traj_bytes(&t)?,
                        )?;
                        ok.push(t);
                    }
                    Err(e) => match CliError::from(e) {
                        CliError::Numeric(msg) => {
                            eprintln!("tlc: smd {label} k={k} replica {r}: {msg}");
                            failed += 1;
                        }
                        other => return Err(other),
                    },
                }
            }
            let m: Option<PathMetrics> = if ok.is_empty() {
                None
            } else {
                Some(path_metrics(&ok, sys, &target, sc.hit_threshold)?)
            };
            let n = sc.n_replicas as f64;
            let hits = m.as_ref().map_or(0, |m| m.replicas.iter().filter(|r| r.hit).count());
            let ets_mean = m.as_ref().and_then(|m| m.ets_mean);
            rows.push(SweepRow {
                cv: label.to_string(),
                k,
                failed_replicas: failed,
                rmsd_mean: m.as_ref().map(|m| m.rmsd_mean),
                thp_percent: 100.0 * hits as f64 / n,
                ets_mean,
                ets_std: m.as_ref().and_then(|m| m.ets_std),
                under_cap: ets_mean.is_some_and(|e| e <= cap),
            });
        }
    }
    let steered_label = cv_label(sc.cv);
    let summary = SmdSummary {
        schema_version: REPORT_SCHEMA,
        energy_cap: cap,
        cap_from_unbiased,
        hit_threshold: sc.hit_threshold,
        best: best_under_cap(rows.iter().filter(|r| r.cv == steered_label)),
        best_reference: best_under_cap(rows.iter().filter(|r| r.cv == "reference")),
        rows,
    };
    let opt = |v: Option<f64>| v.map_or(String::new(), num);
    dir.put(
        "smd/summary.csv",
        &csv(
            &[
                "cv",
                "k",
                "failed_replicas",
                "rmsd_mean",
                "thp_percent",
                "ets_mean",
                "ets_std",
                "under_cap",
            ],
            summary.rows.iter().map(|r| {
                vec![
                    r.cv.clone(),
                    num(r.k),
                    r.failed_replicas.to_string(),
                    opt(r.rmsd_mean),
                    num(r.thp_percent),
                    opt(r.ets_mean),
                    opt(r.ets_std),
                    r.under_cap.to_string(),
                ]
            }),
        ),
    )?;
    let series: Vec<Series> = batches
        .iter()
        .map(|(label, _)| Series {
            label,
            points: summary
                .rows
                .iter()
                .filter(|r| r.cv == *label)
                .map(|r| (r.k, r.thp_percent))
                .collect(),
        })
        .collect();
    dir.put(
        "smd/sweep.svg",
        line_plot("SMD target hit percentage", "k", "THP (%)", &series).as_bytes(),
    )?;
    dir.put_json(SMD_SUMMARY, &summary)?;
    dir.manifest.notes.insert("cv".into(), json!(steered_label));
    dir.finish(SMD_MANIFEST)?;
    Ok(())
}

fn opes(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let oc = &cfg.opes;
    let lp = cfg.langevin_params();
    let ocfg = OpesConfig {
        pace: oc.pace,
        sigma: oc.sigma,
        barrier: oc.barrier,
        gamma: oc.gamma,
        epsilon: oc.epsilon,
        beta: lp.beta(),
        record_stride: oc.record_stride,
        total_steps: oc.total_steps,
        seed: cfg.seed,
    };
    ocfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if oc.pace > oc.total_steps {
        eprintln!(
            "tlc: warning: pace {} exceeds total_steps {}; no deposits",
            oc.pace, oc.total_steps
        );
    }
    let cv = Cv::load(oc.cv, cfg, &mut dir)?;
    let (traj, state) = run_opes(sys, cv.as_dyn(), &lp, &ocfg, &sys.minimum(BasinLabel::A))?;
    dir.put(OPES_TRAJ, &traj_bytes(&traj)?)?;

    let bias = traj.annotations.bias.as_deref().unwrap_or_default();
    let s = traj.annotations.cv.as_deref().unwrap_or_default();
    let rows = (0..traj.len()).map(|i| {
        let step = i as u64 * traj.record_stride;
        vec![step.to_string(), num(s[i]), num(bias[i]), (step / oc.pace).to_string()]
    });
    dir.put("opes/bias_log.csv", &csv(&["step", "s", "V", "n_kernels"], rows))?;
    dir.put(
        "opes/kernels.csv",
        &csv(
            &["center", "weight"],
            state.kernels.iter().map(|&(c, w)| vec![num(c), num(w)]),
        ),
    )?;
    dir.put_json("opes/state.json", &state)?;

    let mut crossings = 0usize;
    let mut prev = None;
    for f in &traj.frames {
        let b = sys.basin_of(f)?;
        if prev.is_some_and(|p| p != b) {
            crossings += 1;
        }
        prev = Some(b);
    }
    dir.manifest.notes.insert("cv".into(), json!(cv_label(oc.cv)));
    dir.manifest.notes.insert("n_deposits".into(), json!(state.n_deposits));
    dir.manifest.notes.insert("basin_crossings".into(), json!(crossings));
    dir.manifest.notes.insert("gamma".into(), json!(ocfg.gamma()));
    dir.manifest.notes.insert("epsilon".into(), json!(ocfg.epsilon()));
    dir.finish(OPES_MANIFEST)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FesSummary {
    pub schema_version: u32,
    pub coordinate: String,
    pub split: f64,
    /// From the binned curve; absent for angular coordinates, whose basins
    /// are not one-sided.
    pub delta_f_fes: Option<f64>,
    pub delta_f_final: f64,
    pub reference_delta_f: Option<f64>,
    pub converged: Option<bool>,
    pub n_checkpoints: usize,
}

fn fes(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let sys = &cfg.system;
    let fc = &cfg.fes;
    let producer = Manifest::read(&dir.path(OPES_MANIFEST))?;
    let traj = read_trajectory(&mut dir.take(OPES_TRAJ, &producer)?.as_slice())?;
    if let Some(f) = traj.frames.first() {
        check_dim(sys, f)?;
    }
    let beta = 1.0 / cfg.langevin.temperature;
    let periodic = sys.cv_period().is_some();

    let cv_holder;
    let (coord_name, curve_coord, basin_coord, split, reference): (
        &str,
        Box<dyn Fn(&Configuration) -> tlc_core::Result<f64> + '_>,
        Box<dyn Fn(&Configuration) -> tlc_core::Result<f64> + '_>,
        f64,
        Option<f64>,
    ) = match fc.coordinate {
        FesCoordinate::GroundTruth => {
            let split = fc.split.unwrap_or(sys.basin_threshold());
            let reference = (split == sys.basin_threshold()).then(|| sys.reference_delta_f(beta));
            // Angular basins are |phi| >= threshold, so the series uses |phi|.
            let basin: Box<dyn Fn(&Configuration) -> tlc_core::Result<f64>> = if periodic {
                Box::new(|c: &Configuration| Ok(sys.ground_truth_cv(c)?.abs()))
            } else {
                Box::new(|c: &Configuration| sys.ground_truth_cv(c))
            };
            (
                "ground_truth",
                Box::new(|c: &Configuration| sys.ground_truth_cv(c)),
                basin,
                split,
                reference,
            )
        }
        FesCoordinate::Cv => {
            let choice = match producer.notes.get("cv").and_then(|v| v.as_str()) {
                Some("ground_truth") => CvChoice::GroundTruth,
                _ => CvChoice::Model,
            };
            cv_holder = Cv::load(choice, cfg, &mut dir)?;
            let h = &cv_holder;
            (
                "cv",
                Box::new(move |c: &Configuration| h.as_dyn().value(c)),
                Box::new(move |c: &Configuration| h.as_dyn().value(c)),
                fc.split.unwrap_or(0.0),
                None,
            )
        }
    };
    let angular_curve = periodic && fc.coordinate == FesCoordinate::GroundTruth;

    let curve = reweighted_fes(&traj, &*curve_coord, beta, fc.n_bins, fc.burn_in_fraction, fc.range)?;
    let delta_f_fes = if angular_curve {
        None
    } else {
        Some(delta_f(&curve, split)?)
    };
    let opts = SeriesOptions {
        split,
        burn_in_fraction: fc.burn_in_fraction,
        checkpoint_stride: fc.checkpoint_stride,
        tolerance_kt: fc.tolerance_kt,
        final_window: fc.final_window,
    };
    let series = delta_f_series(&traj, &*basin_coord, beta, &opts, reference)?;

    dir.put(
        "report/fes.csv",
        &csv(
            &["center", "free_energy", "count", "ess"],
            (0..curve.centers.len()).map(|i| {
                vec![
                    num(curve.centers[i]),
                    num(curve.free_energy[i]),
                    curve.counts[i].to_string(),
                    num(curve.ess[i]),
                ]
            }),
        ),
    )?;
    let fes_pts = curve
        .centers
        .iter()
        .copied()
        .zip(curve.free_energy.iter().copied())
        .collect();
    dir.put(
        "report/fes.svg",
        line_plot(
            "reweighted free energy",
            coord_name,
            "F",
            &[Series {
                label: "F",
                points: fes_pts,
            }],
        )
        .as_bytes(),
    )?;
    dir.put(
        "report/delta_f.csv",
        &csv(
            &["step", "delta_f"],
            series.checkpoints.iter().map(|(s, d)| vec![s.to_string(), num(*d)]),
        ),
    )?;
    let mut lines = vec![Series {
        label: "delta F",
        points: series.checkpoints.iter().map(|&(s, d)| (s as f64, d)).collect(),
    }];
    if let Some(r) = reference {
        lines.push(Series {
            label: "reference",
            points: series.checkpoints.iter().map(|&(s, _)| (s as f64, r)).collect(),
        });
    }
    dir.put(
        "report/delta_f.svg",
        line_plot("delta F", "step", "delta F", &lines).as_bytes(),
    )?;
    let summary = FesSummary {
        schema_version: REPORT_SCHEMA,
        coordinate: coord_name.to_string(),
        split,
        delta_f_fes,
        delta_f_final: series.final_delta_f,
        reference_delta_f: reference,
        converged: series.converged,
        n_checkpoints: series.checkpoints.len(),
    };
    dir.put_json(FES_SUMMARY, &summary)?;
    dir.finish(FES_MANIFEST)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(xs: &[f64]) -> Option<Aggregate> {
    (!xs.is_empty()).then(|| Aggregate {
        n: xs.len(),
        mean: stats::mean(xs),
        std: stats::std_dev(xs),
    })
}

fn read_verified<T: for<'de> Deserialize<'de>>(
    dir: &mut RunDir,
    run: &Path,
    manifest: &str,
    file: &str,
) -> CliResult<Option<T>> {
    let mpath = run.join(manifest);
    if !mpath.exists() {
        return Ok(None);
    }
    let producer = Manifest::read(&mpath)?;
    let bytes = std::fs::read(run.join(file))?;
    let expected = producer
        .outputs
        .get(file)
        .ok_or_else(|| CliError::Config(format!("{file} not in {manifest}")))?;
    let got = sha256_hex(&bytes);
    if &got != expected {
        return Err(CliError::Config(format!(
            "{} does not match its manifest; rerun `{}`",
            run.join(file).display(),
            producer.stage
        )));
    }
    dir.manifest.inputs.insert(run.join(file).display().to_string(), got);
    Ok(Some(serde_json::from_slice(&bytes)?))
}

fn report(cfg: &RunConfig, mut dir: RunDir) -> CliResult<()> {
    let runs = if cfg.report.runs.is_empty() {
        vec![cfg.out_dir.clone()]
    } else {
        cfg.report.runs.clone()
    };
    let mut df = Vec::new();
    let mut df_err = Vec::new();
    let mut converged = 0usize;
    let mut reference = None;
    let mut thp = Vec::new();
    let mut ets = Vec::new();
    let mut best_k = Vec::new();
    let mut spearman = Vec::new();
    let mut per_run = BTreeMap::new();
    for run in &runs {
        let fes: Option<FesSummary> = read_verified(&mut dir, run, FES_MANIFEST, FES_SUMMARY)?;
        let smd: Option<SmdSummary> = read_verified(&mut dir, run, SMD_MANIFEST, SMD_SUMMARY)?;
        let proj: Option<serde_json::Value> = read_verified(&mut dir, run, PROJECT_MANIFEST, PROJECTION_JSON)?;
        if fes.is_none() && smd.is_none() && proj.is_none() {
            return Err(CliError::Config(format!(
                "{} holds no finished fes, smd or project stage",
                run.display()
            )));
        }
        if let Some(f) = &fes {
            df.push(f.delta_f_final);
            if let Some(r) = f.reference_delta_f {
                df_err.push(f.delta_f_final - r);
                reference = Some(r);
            }
            converged += usize::from(f.converged == Some(true));
        }
        if let Some(b) = smd.as_ref().and_then(|s| s.best.as_ref()) {
            thp.push(b.thp_percent);
            ets.extend(b.ets_mean);
            best_k.push(b.k);
        }
        let rho = proj.as_ref().and_then(|p| p["spearman_vs_ground_truth"].as_f64());
        spearman.extend(rho);
        per_run.insert(
            run.display().to_string(),
            json!({
                "delta_f_final": fes.as_ref().map(|f| f.delta_f_final),
                "converged": fes.as_ref().and_then(|f| f.converged),
                "smd_best": smd.as_ref().and_then(|s| s.best.clone()),
                "spearman": rho,
            }),
        );
    }
    let summary = json!({
        "schema_version": REPORT_SCHEMA,
        "runs": per_run,
        "delta_f": aggregate(&df),
        "delta_f_error": aggregate(&df_err),
        "reference_delta_f": reference,
        "converged_runs": converged,
        "smd_best_thp": aggregate(&thp),
        "smd_best_ets": aggregate(&ets),
        "smd_best_k": aggregate(&best_k),
        "spearman": aggregate(&spearman),
    });
    dir.put_json("report/report.json", &summary)?;

    let pm = |a: Option<Aggregate>| {
        a.map_or("n/a".to_string(), |a| {
            format!("{:.3} ± {:.3} (n={})", a.mean, a.std, a.n)
        })
    };
    let mut md = String::from("# Run report\n\n| quantity | value |\n|---|---|\n");
    md.push_str(&format!("| runs | {} |\n", runs.len()));
    md.push_str(&format!("| ΔF | {} |\n", pm(aggregate(&df))));
    md.push_str(&format!(
        "| ΔF reference | {} |\n",
        reference.map_or("n/a".into(), |r| format!("{r:.3}"))
    ));
    md.push_str(&format!("| ΔF error | {} |\n", pm(aggregate(&df_err))));
    md.push_str(&format!("| converged within tolerance | {converged}/{} |\n", df.len()));
    md.push_str(&format!("| SMD best THP (%) | {} |\n", pm(aggregate(&thp))));
    md.push_str(&format!("| SMD best E_TS | {} |\n", pm(aggregate(&ets))));
    md.push_str(&format!(
        "| Spearman vs ground truth | {} |\n",
        pm(aggregate(&spearman))
    ));
    dir.put("report/report.md", md.as_bytes())?;
    dir.finish(REPORT_MANIFEST)?;
    Ok(())
}
