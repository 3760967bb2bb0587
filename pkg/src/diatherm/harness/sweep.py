"""Sweep driver: independent grid points, grouped for spectrum reuse.

Grid points sharing (N, alpha, sign) also share the trap solution, the
coupling matrix, and - because the ramp always ends at the same ratio
B(t_f)/B0 - the final-Hamiltonian spectrum, so each group runs them once.
The step-size gate runs on the group's longest final time, the worst case,
and the resulting resolution is reused for the shorter ramps.  Groups
execute in a process pool; one point failing is recorded and never disturbs
its siblings.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from ..errors import SimulationError
from .config import config_hash, render_config, validate_config
from .emit import fmt, read_fits_txt, read_table, write_table
from .runner import build_system, run_experiment

#: Environment variable overriding the worker-pool size.
WORKERS_ENV = "SIMULATE_WORKERS"


@dataclass(frozen=True)
class PointResult:
    tag: str
    n_ions: int
    alpha: float
    sign: str
    t_f_ms: float
    out_dir: str
    ok: bool
    error: str = ""


def _point_tag(n, alpha, sign, t_f_ms):
    tf = "default" if t_f_ms is None else f"{t_f_ms:g}ms"
    a = "axial" if alpha is None else f"{alpha:g}"
    return f"n{n}_alpha{a}_{sign}_tf{tf}"


def _grid_axes(config, grid):
    n_values = grid.get("n_ions") or (config.n_ions,)
    alpha_values = grid.get("alpha") or (config.alpha_target,)
    sign_values = grid.get("sign") or (config.sign,)
    tf_values = grid.get("t_f_ms") or (config.t_f_ms,)
    return n_values, alpha_values, sign_values, tf_values


def run_group(config, n, alpha, sign, tf_values, points_root):
    """Run every final time of one (N, alpha, sign) group sequentially."""
    overrides = {"n_ions": n, "sign": sign}
    if alpha is not None:
        overrides.update(alpha_target=alpha, omega_axial=None)
    group_config = replace(config, **overrides)
    results = []
    try:
        system = build_system(group_config)
    except SimulationError as exc:
        for t_f_ms in tf_values:
            tag = _point_tag(n, alpha, sign, t_f_ms)
            results.append(PointResult(
                tag, n, alpha, sign, t_f_ms if t_f_ms is not None else math.nan,
                os.path.join(points_root, tag), False, f"{type(exc).__name__}: {exc}",
            ))
        return results

    # Gate on the slowest ramp: at fixed steps-per-tau the step error grows
    # with tau, so a resolution that converges there converges everywhere.
    steps_override = None
    ordered = sorted(tf_values, key=lambda t: -(t if t is not None else 0.0))
    spectrum_cache = {}
    for t_f_ms in ordered:
        tag = _point_tag(n, alpha, sign, t_f_ms)
        out_dir = os.path.join(points_root, tag)
        point_config = replace(group_config, t_f_ms=t_f_ms)
        try:
            bundle = run_experiment(
                point_config, out_dir=out_dir, system=system,
                spectrum_cache=spectrum_cache, steps_override=steps_override,
            )
            if steps_override is None:
                steps_override = bundle.gate.steps_per_tau
            results.append(PointResult(
                tag, n, alpha, sign,
                t_f_ms if t_f_ms is not None else bundle.schedule.t_final * 1e3,
                out_dir, True,
            ))
        except SimulationError as exc:
            results.append(PointResult(
                tag, n, alpha, sign, t_f_ms if t_f_ms is not None else math.nan,
                out_dir, False, f"{type(exc).__name__}: {exc}",
            ))
    results.sort(key=lambda r: r.t_f_ms if not math.isnan(r.t_f_ms) else -1.0)
    return results


def _worker(args):
    return run_group(*args)


def run_sweep(config, grid, out_root, workers=None):
    """Execute the grid and merge per-point tables into figure-layout CSVs."""
    validate_config(config)
    n_values, alpha_values, sign_values, tf_values = _grid_axes(config, grid)
    points_root = os.path.join(out_root, "points")
    os.makedirs(points_root, exist_ok=True)
    with open(os.path.join(out_root, "config.txt"), "w", encoding="utf-8") as f:
        f.write(render_config(config))

    groups = [
        (config, n, alpha, sign, tuple(tf_values), points_root)
        for n in n_values
        for alpha in alpha_values
        for sign in sign_values
    ]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, 0)) or (os.cpu_count() or 1)
    results = []
    if workers <= 1 or len(groups) == 1:
        for group in groups:
            results.extend(run_group(*group))
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(groups))) as pool:
            for group_results in pool.map(_worker, groups):
                results.extend(group_results)

    results.sort(key=lambda r: (r.n_ions, _alpha_key(r.alpha), r.sign, r.t_f_ms))
    failures = [r for r in results if not r.ok]
    if failures:
        write_table(
            os.path.join(out_root, "failures.csv"),
            "failures/v1",
            ["tag", "error"],
            [[r.tag, r.error.replace(",", ";")] for r in failures],
        )
    digest = config_hash(config)
    _merge_figures(results, out_root, digest)
    return results


def _alpha_tag(alpha):
    return "axial" if alpha is None else f"{alpha:g}"


def _alpha_key(alpha):
    return -1.0 if alpha is None else alpha


def _merge_figures(results, out_root, digest):
    ok_points = [r for r in results if r.ok]
    tag = f"config_hash={digest}"

    # Fig. 2 layout per (N, alpha): Binder cumulant vs final time and sign.
    combos = sorted({(r.n_ions, r.alpha) for r in ok_points},
                    key=lambda c: (c[0], _alpha_key(c[1])))
    for n, alpha in combos:
        rows = []
        for r in sorted((p for p in ok_points if (p.n_ions, p.alpha) == (n, alpha)),
                        key=lambda p: (p.t_f_ms, p.sign)):
            record = _point_observables(r.out_dir)
            rows.append([
                fmt(r.t_f_ms), r.sign,
                record["dia"].get("g_bar", "nan"),
                record.get("therm", {}).get("g_bar", "nan"),
            ])
        write_table(
            os.path.join(out_root, f"fig2_n{n}_alpha{_alpha_tag(alpha)}.csv"),
            "fig2/v1",
            ["t_f_ms", "sign", "g_bar_dia", "g_bar_therm"],
            rows,
            provenance=tag,
        )

    # Fig. 3 layout: one structure-factor file per point (already written in
    # the bundle); re-emit under the figure name for each (sign, alpha, t_f).
    for r in ok_points:
        sf_path = os.path.join(r.out_dir, "structure_factor.csv")
        if not os.path.exists(sf_path):
            continue
        meta, header, rows = read_table(sf_path, expect_schema="fig3/v1")
        write_table(
            os.path.join(out_root, f"fig3_{r.tag}.csv"),
            "fig3/v1", header, rows, provenance=tag,
        )

    # Fig. 4 layout per alpha: specific heat vs final time, chain length, sign.
    for alpha in sorted({r.alpha for r in ok_points}, key=_alpha_key):
        rows = []
        for r in sorted((p for p in ok_points if p.alpha == alpha),
                        key=lambda p: (p.t_f_ms, p.n_ions, p.sign)):
            record = _point_observables(r.out_dir)
            fits = read_fits_txt(os.path.join(r.out_dir, "fits.txt"))
            t_eff = fits.get("average", {}).get("t_khz", "nan")
            rows.append([
                fmt(r.t_f_ms), str(r.n_ions), r.sign,
                record["dia"].get("c_v", "nan"),
                record.get("therm", {}).get("c_v", "nan"),
                t_eff,
            ])
        write_table(
            os.path.join(out_root, f"fig4_alpha{_alpha_tag(alpha)}.csv"),
            "fig4/v1",
            ["t_f_ms", "n", "sign", "cv_dia", "cv_therm", "t_eff_khz"],
            rows,
            provenance=tag,
        )


def _point_observables(out_dir):
    path = os.path.join(out_dir, "observables.csv")
    if not os.path.exists(path):
        return {"dia": {}}
    meta, header, rows = read_table(path, expect_schema="observables/v1")
    records = {}
    for row in rows:
        records[row[0]] = dict(zip(header[1:], row[1:]))
    return records
