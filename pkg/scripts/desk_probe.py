"""Run one preset's desk-scale protocol and print check values + timings."""
import json
import sys
import time

import numpy as np

from swarmlearn.experiment import desk_config, run_experiment
from swarmlearn.io import _jsonable


def main(preset, **overrides):
    cfg = desk_config(preset, **overrides)
    t0 = time.time()
    art = run_experiment(cfg)
    wall = time.time() - t0
    print(f"== {preset}: wall {wall:.0f}s  (M={cfg.eff_M}, M_rho={cfg.eff_M_rho}, "
          f"L={cfg.L}, trials={cfg.eff_trials}, workers={cfg.workers})", flush=True)
    for name, (v, op, thr, ok) in art.checks.items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {v!r} {op} {thr!r}", flush=True)
    for i, t in enumerate(art.trials):
        print(f"  trial {i}: timings={ {k: round(v,1) if isinstance(v,float) else v for k,v in t.timings.items()} }", flush=True)
        print(f"           failed={t.n_failed}", flush=True)
    ker = {f"{k}": v["mean"] for k, v in art.aggregates["kernel_errors"].items()}
    print("  kernel errors:", json.dumps(_jsonable(ker), default=str)[:600], flush=True)
    for ic in ("training", "random"):
        ev = art.aggregates["events"][ic]
        print(f"  events[{ic}]: true={ev['true_rate']['mean']:.3f} pred={ev['pred_rate']['mean']:.3f} agree={ev['agree_rate']['mean']:.3f}", flush=True)
        pat = art.aggregates["pattern"][ic]
        print(f"  PI[{ic}]: pi1={pat['pi1_mean']['mean']!r} pi2={pat['pi2_mean']['mean']!r}", flush=True)
    te = art.aggregates["trajectory_errors"]
    for key in sorted(te):
        print(f"  traj_err{key}: {te[key]['mean_ic']['mean']:.3e}", flush=True)
    if art.aggregates["gss"]:
        g = art.aggregates["gss"]
        print("  masses est:", [round(m["mean"], 4) for m in g["masses_est"]], flush=True)
        print("  mass rel err:", [f"{m['mean']:.3e}" for m in g["mass_rel_err"]], flush=True)
    return art


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[2:]:
        k, v = arg.split("=")
        kwargs[k] = int(v) if v.isdigit() else float(v)
    main(sys.argv[1], **kwargs)
