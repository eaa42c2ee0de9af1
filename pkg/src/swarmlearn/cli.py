"""Command-line interface.

    swarmlearn simulate  --preset od --M 10 --seed 0 --out traj.bin
    swarmlearn learn     --preset od --data traj.bin --out estimate.npz
    swarmlearn evaluate  --preset od --estimate estimate.npz --out report/
    swarmlearn reproduce od --out report/ [--seed 0] [--desk-scale 1]
                            [--workers 1] [--paper-scale] [--config cfg.yaml]

`reproduce` runs the full protocol at desk scale and exits 0 only when
every threshold check for the preset passes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io as io_mod
from .dynamics import Trajectory, fill_derivatives
from .estimator import ObservationSet, build_hypothesis, fit
from .experiment import (ExperimentConfig, desk_config, paper_config,
                         run_experiment, simulate_ensemble)
from .measures import estimate_rho, kernel_l2_error, trajectory_error, ZeroNormError
from .models import PRESETS, BasisPlan, params_from_dict
from .reports import emit_reports


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=str, required=True)


def _preset_cfg(args, **overrides) -> ExperimentConfig:
    base = paper_config(args.preset) if getattr(args, "paper_scale", False) \
        else desk_config(args.preset)
    kw = {}
    if getattr(args, "config", None):
        raw = io_mod.load_config(args.config)
        bases = raw.pop("bases", None)
        if bases:
            raw["bases"] = {ch: BasisPlan(**bp) for ch, bp in bases.items()}
        kw.update(raw)
    kw.update(overrides)
    for name in ("seed", "workers"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    if getattr(args, "desk_scale", None) is not None:
        kw["desk_scale"] = args.desk_scale
    if getattr(args, "M", None) is not None:
        kw["M"] = args.M
    if getattr(args, "L", None) is not None:
        kw["L"] = args.L
    if getattr(args, "trials", None) is not None:
        kw["trials"] = args.trials
    kw.setdefault("preset", args.preset)
    return dataclasses.replace(base, **{k: v for k, v in kw.items() if k != "preset"})


def cmd_simulate(args) -> int:
    cfg = _preset_cfg(args)
    preset = PRESETS[cfg.preset]
    spec = preset.build(params_from_dict(cfg.preset, cfg.params))
    grid_train, _ = cfg.grids()
    ics = preset.sampler.sample(cfg.eff_M, cfg.seed)
    results, failed = simulate_ensemble(spec, ics, grid_train, cfg.integrator(),
                                        cfg.workers, cfg.chunk)
    trajs = [r for r in results if isinstance(r, Trajectory)]
    io_mod.save_trajectories(args.out, trajs)
    if args.csv:
        io_mod.export_trajectory_csv(Path(args.out).with_suffix(".csv"), trajs[0])
    print(f"simulated {len(trajs)} trajectories ({len(failed)} failed) -> {args.out}")
    return 0


def cmd_learn(args) -> int:
    cfg = _preset_cfg(args)
    preset = PRESETS[cfg.preset]
    spec = preset.build(params_from_dict(cfg.preset, cfg.params))
    trajs = io_mod.load_trajectories(args.data)
    observed = frozenset()
    if args.exact_derivatives:
        trajs = [fill_derivatives(spec, tr) for tr in trajs]
        observed = frozenset({"dX", "dV", "dXi"})
    obs = ObservationSet(spec=spec, trajectories=tuple(trajs), observed=observed)
    plans = cfg.bases if cfg.bases is not None else preset.bases
    hyp = build_hypothesis(obs, plans)
    est, systems = fit(obs, hyp, tol=cfg.solve_tol)
    io_mod.save_estimate(args.out, est)
    for g, s in systems.items():
        print(f"group {g}: n={s.n}, samples={s.sample_count}, "
              f"pair evaluations={s.pair_evaluations}")
    print(f"estimate -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _preset_cfg(args)
    preset = PRESETS[cfg.preset]
    params = params_from_dict(cfg.preset, cfg.params)
    spec = preset.build(params)
    est = io_mod.load_estimate(args.estimate)
    grid_train, grid_full = cfg.grids()
    icfg = cfg.integrator()
    ics = preset.sampler.sample(cfg.eff_M_rho, cfg.seed)
    runs, _ = simulate_ensemble(spec, ics, grid_train, icfg, cfg.workers, cfg.chunk)
    trajs = [r for r in runs if isinstance(r, Trajectory)]
    channels = sorted({ch for ch, _, _ in est.blocks})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    kernels = {"x": spec.kernels_x, "xdot": spec.kernels_xdot, "xi": spec.kernels_xi}
    for ch in channels:
        measures = estimate_rho(trajs, spec, ch, bins=cfg.rho_bins)
        weighting = {"x": "r2", "xdot": "rdot2"}.get(
            ch, "none" if spec.order == "first" else "xi2")
        for (k, kp), meas in measures.items():
            key = (ch, k, kp)
            if key not in est.blocks or meas.total_mass == 0:
                continue
            true_kern = (kernels[ch] or {}).get((k, kp))
            if true_kern is None:
                true_kern = lambda r, s=None: np.zeros_like(np.asarray(r, float))
            try:
                table[key] = kernel_l2_error(true_kern, est.blocks[key], meas, weighting)
            except ZeroNormError:
                table[key] = None
    # fresh-IC prediction errors
    learned = est.as_spec(spec)
    ics_new = preset.sampler.sample(max(1, cfg.eff_M // 4), cfg.seed + 1)
    true_runs, _ = simulate_ensemble(spec, ics_new, grid_full, icfg, cfg.workers, cfg.chunk)
    pred_runs, _ = simulate_ensemble(learned, ics_new, grid_full, icfg, cfg.workers, cfg.chunk)
    traj_errs = []
    for t, p in zip(true_runs, pred_runs):
        if isinstance(t, Trajectory) and isinstance(p, Trajectory):
            traj_errs.append(trajectory_error(t, p, spec, "x",
                                              window=(cfg.T0, grid_train[-1])))
    report = {
        "kernel_errors": {f"{ch}:{k}:{kp}": v for (ch, k, kp), v in sorted(table.items())},
        "trajectory_error_x_train_window": {
            "mean": float(np.mean(traj_errs)) if traj_errs else None,
            "std": float(np.std(traj_errs)) if traj_errs else None,
        },
    }
    (out / "evaluate.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_reproduce(args) -> int:
    cfg = _preset_cfg(args)
    artifact = run_experiment(cfg)
    emit_reports(artifact, args.out)
    print(f"preset {cfg.preset}: M={cfg.eff_M}, M_rho={cfg.eff_M_rho}, "
          f"L={cfg.L}, trials={cfg.eff_trials}")
    all_ok = True
    for name, (value, op, thr, ok) in artifact.checks.items():
        all_ok &= bool(ok)
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {value:.6g} {op} {thr:g}")
    print(f"reports -> {args.out}")
    return 0 if all_ok else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="swarmlearn", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a training ensemble")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--M", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--config", type=str)
    p.add_argument("--csv", action="store_true", help="also export the first trajectory")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("learn", help="estimate kernels from saved trajectories")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--data", required=True)
    p.add_argument("--config", type=str)
    p.add_argument("--exact-derivatives", action="store_true",
                   help="fill derivatives from the governing equations "
                        "(the observed-derivative protocol)")
    _add_common(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("evaluate", help="score a saved estimate against the truth")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--estimate", required=True)
    p.add_argument("--M", type=int)
    p.add_argument("--config", type=str)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", help="full protocol for one preset")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("--config", type=str)
    p.add_argument("--desk-scale", type=float, dest="desk_scale")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--M", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--trials", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_reproduce)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
