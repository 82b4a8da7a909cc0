"""Smoke test for the `tlc` extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
Then run:                 python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import tlc


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok    {what}")


def main():
    dw = tlc.System("doublewell1d", {"a": 5.0, "tilt": 1.0})
    check(dw.dim == 1 and dw.kind == "doublewell1d", "system construction")
    check(abs(dw.potential_energy([1.0]) - 1.0) < 1e-12, "potential at x = 1")
    check(dw.basin_of(dw.minimum("A")) == "A", "basin-A minimum is in basin A")
    check(tlc.System.from_json(dw.to_json()).params == dw.params, "system JSON round-trip")

    trajs = [
        tlc.simulate(dw, basin, 20_000, record_stride=10, dt=0.01, seed=1, stream=i)
        for i, basin in enumerate("AB")
    ]
    check(len(trajs[0]) == 2001, "trajectory length")
    check(trajs[0].potential is not None, "energy annotations present")

    pairs = tlc.make_pairs(trajs, dw, tau_steps=50, max_pairs=2000, seed=2)
    check(len(pairs) == 2000 and pairs.tau_steps == 50, "pair dataset")

    cfg = json.dumps({"n_iters": 300, "batch_size": 64, "flow_hidden": [16], "encoder_hidden": [8]})
    enc, flow, history = tlc.train_tlc(pairs, dw, cfg)
    check(len(history) == 300 and all(math.isfinite(h[3]) for h in history), "TLC training history")
    s_a, s_b = enc.encode(dw.minimum("A")), enc.encode(dw.minimum("B"))
    check(s_a > 0 > s_b, "calibrated CV is positive in basin A, negative in B")
    s, grad = enc.gradient([0.3])
    check(len(grad) == 1 and math.isfinite(s), "encoder gradient")
    xs = [t for traj in trajs for t in traj.frames]
    rho = tlc.spearman([enc.encode(x) for x in xs], [x[0] for x in xs])
    check(rho is not None and rho > 0.9, f"CV ranks frames like x (spearman {rho:.3f})")

    samples = flow.generate(0.9, 50, seed=3, ode_steps=20)
    check(len(samples) == 50 and len(samples[0]) == flow.feature_dim, "flow generation")

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "enc.json")
        enc.save(p)
        back = tlc.Encoder.load(p)
        check(back.encode([0.3]) == enc.encode([0.3]), "encoder checkpoint round-trip")
        tp = os.path.join(d, "traj.bin")
        trajs[0].save(tp)
        check(tlc.Trajectory.load(tp).frames == trajs[0].frames, "trajectory round-trip")
    check(tlc.Flow.from_json(flow.to_json()).feature_dim == 1, "flow checkpoint round-trip")

    smd_cfg = json.dumps(
        {"k": 20.0, "horizon_steps": 2000, "n_replicas": 8, "s_initial": s_a, "s_target": s_b, "seed": 4}
    )
    replicas = tlc.run_smd(dw, enc, smd_cfg, dt=0.01)
    ok = [r for r in replicas if r is not None]
    metrics = tlc.path_metrics(ok, dw, hit_threshold=0.2)
    check(0.0 <= metrics["thp_percent"] <= 100.0, f"SMD path metrics (THP {metrics['thp_percent']:.0f}%)")

    opes_cfg = json.dumps({"pace": 200, "sigma": 0.1, "barrier": 10.0, "total_steps": 200_000, "seed": 5})
    traj, kernels = tlc.run_opes(dw, None, opes_cfg, dt=0.01)
    check(len(kernels) == 1000, "one kernel per pace")
    check(min(traj.bias) >= -10.0 - 1e-9, "bias never drops below -barrier")
    fes = tlc.reweighted_fes(traj, dw, beta=1.0, n_bins=48, range=(-1.6, 1.6))
    df, ref = fes.delta_f(0.0), dw.reference_delta_f(1.0)
    check(abs(df - ref) < 1.0, f"OPES delta F {df:.3f} near quadrature {ref:.3f}")

    try:
        tlc.System("nonsense")
    except ValueError:
        check(True, "bad system kind raises ValueError")
    else:
        check(False, "bad system kind raises ValueError")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
