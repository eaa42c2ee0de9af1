"""Report emission: delimiter-separated tables mirroring the evaluation
protocol (kernel errors, trajectory errors, confusion matrices and their
statistics, pattern indicators, recovered masses) plus plot-data files
from which every kernel-comparison figure can be regenerated."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dynamics import FIRST
from .experiment import RunArtifact
from .io import _jsonable, save_config
from .models import GSS_BODIES, PRESETS, params_from_dict


def _cell(v) -> str:
    if v is None:
        return "undef"
    if isinstance(v, float) and not np.isfinite(v):
        return "undef" if np.isnan(v) else repr(v)
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def emit_reports(artifact: RunArtifact, out_dir) -> list:
    """Write every report table and plot-data file; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = artifact.config
    agg = artifact.aggregates
    written = []

    save_config(cfg, out / "config.yaml")
    written.append(out / "config.yaml")

    (out / "metadata.json").write_text(
        json.dumps(_jsonable(artifact.metadata), indent=2, sort_keys=True))
    written.append(out / "metadata.json")

    checks = {name: {"value": _jsonable(v), "op": op, "threshold": thr, "pass": bool(ok)}
              for name, (v, op, thr, ok) in artifact.checks.items()}
    (out / "checks.json").write_text(json.dumps(checks, indent=2, sort_keys=True))
    written.append(out / "checks.json")

    rows = [[ch, k, kp, v["mean"], v["std"]]
            for (ch, k, kp), v in sorted(agg["kernel_errors"].items())]
    _write_csv(out / "kernel_errors.csv", ["channel", "k", "kp", "mean", "std"], rows)
    written.append(out / "kernel_errors.csv")

    rows = [[ic, ch, w, stat, v[stat]["mean"], v[stat]["std"]]
            for (ic, ch, w), v in sorted(agg["trajectory_errors"].items())
            for stat in ("mean_ic", "std_ic")]
    _write_csv(out / "trajectory_errors.csv",
               ["ic_set", "channel", "window", "stat", "mean", "std"], rows)
    written.append(out / "trajectory_errors.csv")

    rows = [[ic, cell, v["mean"], v["std"]]
            for ic, cells in sorted(agg["confusion"].items())
            for cell, v in cells.items()]
    _write_csv(out / "confusion.csv", ["ic_set", "cell", "mean_pct", "std_pct"], rows)
    written.append(out / "confusion.csv")

    rows = [[ic, stat, v["mean"], v["std"]]
            for ic, stats in sorted(agg["confusion_stats"].items())
            for stat, v in stats.items()]
    _write_csv(out / "confusion_stats.csv", ["ic_set", "stat", "mean", "std"], rows)
    written.append(out / "confusion_stats.csv")

    rows = [[ic, q, v["mean"], v["std"]]
            for ic, quants in sorted(agg["pattern"].items())
            for q, v in quants.items()]
    _write_csv(out / "pattern_indicators.csv", ["ic_set", "quantity", "mean", "std"], rows)
    written.append(out / "pattern_indicators.csv")

    rows = [[ic, q, v["mean"], v["std"]]
            for ic, quants in sorted(agg["events"].items())
            for q, v in quants.items()]
    _write_csv(out / "events.csv", ["ic_set", "quantity", "mean", "std"], rows)
    written.append(out / "events.csv")

    if agg["gss"] is not None:
        rows = []
        for i, body in enumerate(GSS_BODIES):
            rows.append([body, agg["gss"]["masses_true"][i],
                         agg["gss"]["masses_est"][i]["mean"],
                         agg["gss"]["masses_est"][i]["std"],
                         agg["gss"]["mass_rel_err"][i]["mean"],
                         agg["gss"]["mass_rel_err"][i]["std"]])
        _write_csv(out / "gss_masses.csv",
                   ["body", "true_mass", "est_mean", "est_std",
                    "rel_err_mean", "rel_err_std"], rows)
        written.append(out / "gss_masses.csv")

    written.extend(_emit_plot_data(artifact, out / "plotdata"))
    return written


def _true_kernel_table(cfg) -> dict:
    params = params_from_dict(cfg.preset, cfg.params)
    spec = PRESETS[cfg.preset].build(params)
    return {"x": spec.kernels_x or {}, "xdot": spec.kernels_xdot or {},
            "xi": spec.kernels_xi or {}}, spec


def _emit_plot_data(artifact: RunArtifact, pdir: Path) -> list:
    pdir.mkdir(parents=True, exist_ok=True)
    cfg = artifact.config
    true_kernels, spec = _true_kernel_table(cfg)
    trials = artifact.trials
    written = []
    blocks = trials[0].estimate.blocks
    for (ch, k, kp), kern0 in sorted(blocks.items()):
        meas = trials[0].measures[ch][(k, kp)]
        meas_train = trials[0].measures_train[ch][(k, kp)]
        if meas.total_mass == 0.0:
            continue
        true_kern = true_kernels[ch].get((k, kp))
        dom = kern0.bspec.domain
        if kern0.bspec.kind == "tensor-pw-linear":
            rr, ss = meas.center_grid()
            cols = ["r", "s"]
            pts = (rr, ss)
        else:
            rr = np.linspace(dom.r_min, dom.r_max, 600)
            cols = ["r"]
            pts = (rr,)
        phi_hats = np.stack([
            t.estimate.blocks[(ch, k, kp)](*pts) for t in trials])
        if true_kern is None:
            phi_true = np.zeros_like(rr)
        else:
            phi_true = np.asarray(true_kern(*pts), dtype=float)
        rho = np.array([meas.mass_at(p) for p in np.stack(pts, axis=-1)])
        rho_train = np.array([meas_train.mass_at(p) for p in np.stack(pts, axis=-1)])
        header = cols + ["phi_true", "phi_hat_mean", "phi_hat_std",
                         "rho_mass", "rho_train_mass"]
        rows = []
        for idx in range(len(rr)):
            row = [pts[j][idx] for j in range(len(cols))]
            row += [phi_true[idx], phi_hats[:, idx].mean(), phi_hats[:, idx].std(),
                    rho[idx], rho_train[idx]]
            rows.append(row)
        path = pdir / f"kernel_{ch}_{k}_{kp}.csv"
        _write_csv(path, header, rows)
        written.append(path)

    if trials[0].gss is not None:
        g0 = trials[0].gss
        _write_csv(pdir / "gss_profile_samples.csv", ["r", "profile"],
                   [[r, p] for r, p in zip(g0["profile_r"], g0["profile_samples"])])
        written.append(pdir / "gss_profile_samples.csv")
        R1, R2 = g0["provenance"]["extension_domain"]
        rr = np.linspace(R1, R2, 600)
        splines = np.stack([t.gss["spline"](rr) for t in trials])
        ref = rr ** -3.0
        _write_csv(pdir / "gss_profile.csv",
                   ["r", "profile_mean", "profile_std", "inverse_cube_ref"],
                   [[rr[i], splines[:, i].mean(), splines[:, i].std(), ref[i]]
                    for i in range(len(rr))])
        written.append(pdir / "gss_profile.csv")
        # denoised kernels: shared profile scaled by the influencing body
        for (ch, k, kp), kern0 in sorted(blocks.items()):
            if ch != "x" or k == kp:
                continue
            dom = kern0.bspec.domain
            rr = np.linspace(dom.r_min, dom.r_max, 600)
            cleaned = np.stack([t.gss["betas"][kp] * t.gss["spline"](rr) for t in trials])
            true_kern = true_kernels["x"].get((k, kp))
            phi_true = np.zeros_like(rr) if true_kern is None else true_kern(rr)
            _write_csv(pdir / f"kernel_cleaned_x_{k}_{kp}.csv",
                       ["r", "phi_true", "phi_clean_mean", "phi_clean_std"],
                       [[rr[i], phi_true[i], cleaned[:, i].mean(), cleaned[:, i].std()]
                        for i in range(len(rr))])
            written.append(pdir / f"kernel_cleaned_x_{k}_{kp}.csv")
    return written
