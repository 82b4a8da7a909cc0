use tlc_core::analysis::*;
use tlc_core::cvmodels::GroundTruthCv;
use tlc_core::dynamics::LangevinParams;
use tlc_core::enhanced::*;
use tlc_core::*;

fn opes_fes(sys: &SystemSpec, seed: u64) -> FesCurve {
    let lp = LangevinParams {
        dt: 0.01,
        gamma: 1.0,
        temperature: 1.0,
        seed: 0,
    };
    let cfg = OpesConfig {
        pace: 500,
        sigma: 0.1,
        barrier: 10.0,
        total_steps: 1_000_000,
        seed,
        ..Default::default()
    };
    let (traj, _) = run_opes(sys, &GroundTruthCv(sys.clone()), &lp, &cfg, &sys.minimum(BasinLabel::A)).unwrap();
    reweighted_fes(&traj, &|c: &Configuration| Ok(c[0]), 1.0, 64, 0.15, Some((-1.6, 1.6))).unwrap()
}

#[test]
fn reweighted_fes_recovers_the_potential() {
    let sys = SystemSpec::doublewell(5.0, 1.0);
    let fes = opes_fes(&sys, 11);
    let rows: Vec<(f64, f64)> = fes
        .centers
        .iter()
        .zip(&fes.free_energy)
        .zip(&fes.ess)
        .filter(|(_, ess)| **ess >= 100.0)
        .map(|((x, f), _)| (*f, sys.potential_energy(&[*x]).unwrap()))
        .collect();
    assert!(rows.len() > 20, "only {} well-sampled bins", rows.len());
    let offset = rows.iter().map(|(f, u)| f - u).sum::<f64>() / rows.len() as f64;
    let rms = (rows.iter().map(|(f, u)| (f - u - offset).powi(2)).sum::<f64>() / rows.len() as f64).sqrt();
    assert!(rms < 0.5, "rms deviation {rms}");
}

#[test]
fn symmetric_well_gives_mirror_fes() {
    let sys = SystemSpec::doublewell(5.0, 0.0);
    let fes = opes_fes(&sys, 12);
    let n = fes.centers.len();
    let diffs: Vec<f64> = (0..n / 2)
        .filter(|&i| fes.ess[i] >= 100.0 && fes.ess[n - 1 - i] >= 100.0)
        .map(|i| (fes.free_energy[i] - fes.free_energy[n - 1 - i]).abs())
        .collect();
    assert!(diffs.len() > 10);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean < 0.3, "mean asymmetry {mean}");
    let df = delta_f(&fes, 0.0).unwrap();
    assert!(df.abs() < 0.3, "delta F {df}");
}
