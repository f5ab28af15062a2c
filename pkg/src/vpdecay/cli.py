"""Command-line driver: config parsing, experiment dispatch and CSV reports.

Config grammar: one ``key = value`` per line, ``# comments``, optional
``[section]`` headers.  Keys inside a section are addressed as
``section.key``.  Every violation is reported with its line number.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigurationError, VPDecayError
from .fitting import DecayFit, DecayReport, default_window, fit_decay

SUBCOMMANDS = ("penrose", "kernel", "green", "free-transport", "chars", "linres", "bootstrap",
               "rates")


def _positive(x):
    return x > 0


def _at_least_one(x):
    return x >= 1


def _non_negative(x):
    return x >= 0


# key -> (type, default, check, description); a default of ... marks a required key
SCHEMA = {
    "subcommand": (str, ..., lambda s: s in SUBCOMMANDS, f"one of {', '.join(SUBCOMMANDS)}"),
    "family": (str, "maxwellian", None, "equilibrium family"),
    "d": (int, 3, _at_least_one, ">= 1"),
    "sigma": (float, 1.0, _positive, "> 0"),
    "u": (float, 0.0, None, "drift"),
    "N": (int, 2, _at_least_one, ">= 1"),
    "eps0": (float, 1e-3, _positive, "> 0"),
    "M0": (float, 100.0, _positive, "> 0"),
    "T": (float, None, _positive, "> 0"),
    "dt": (float, None, _positive, "> 0"),
    "k_max": (int, 2, _non_negative, ">= 0"),
    "max_iter": (int, 8, _at_least_one, ">= 1"),
    "tol": (float, 1e-12, _positive, "> 0"),
    "output": (str, ".", None, "output directory"),
    "grid.x_n": (int, 64, lambda n: n >= 2, ">= 2"),
    "grid.x_side": (float, 40.0, _positive, "> 0"),
    "grid.xi_max": (float, 9.0, _positive, "> 0"),
    "grid.xi_step": (float, 0.005, _positive, "> 0"),
    "grid.t_samples": (int, 25, lambda n: n >= 5, ">= 5"),
    "grid.t_min": (float, 2.0, _positive, "> 0"),
    "grid.method": (str, "radial", lambda s: s in ("radial", "cartesian"), "radial or cartesian"),
    "grid.dr": (float, 0.4, _positive, "> 0"),
    "datum.kind": (str, "gaussian", lambda s: s in ("gaussian", "bump", "zero"),
                   "gaussian, bump or zero"),
    "datum.sigma_x": (float, 1.0, _positive, "> 0"),
    "datum.sigma_v": (float, 1.0, _positive, "> 0"),
    "fit.window_min": (float, None, _positive, "> 0"),
    "fit.window_max": (float, None, _positive, "> 0"),
    "fit.log_correction": (bool, False, None, "true or false"),
    "green.blocks": (bool, False, None, "true or false"),
    "green.q_min": (int, -2, None, "integer"),
    "green.q_max": (int, 3, None, "integer"),
    "chars.eps": (float, 1e-2, _positive, "> 0"),
    "chars.t_values": (list, [5.0, 10.0, 20.0], lambda v: all(x > 0 for x in v),
                       "comma-separated positive times"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(kind, text):
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(text)
    if kind is list:
        return [float(x) for x in text.split(",") if x.strip()]
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


@dataclass
class ExperimentConfig:
    """Validated settings; ``values`` holds every schema key (defaults filled)."""

    subcommand: str
    values: dict
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def echo(self) -> str:
        """Canonical text form; parses back to the same config."""
        top, sections = [], {}
        for key in SCHEMA:
            value = self.values.get(key)
            if value is None:
                continue
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = ", ".join(repr(float(x)) for x in value)
            else:
                text = str(value)
            if "." in key:
                sec, name = key.split(".", 1)
                sections.setdefault(sec, []).append(f"{name} = {text}")
            else:
                top.append(f"{key} = {text}")
        out = top[:]
        for sec, body in sections.items():
            out += ["", f"[{sec}]"] + body
        return "\n".join(out) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigurationError listing all violations."""
    errors, raw, where = [], {}, {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]") or not body[1:-1].strip():
                errors.append(f"line {lineno}: malformed section header {body!r}")
                continue
            section = body[1:-1].strip()
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'key = value', got {body!r}")
            continue
        key, value = (part.strip() for part in body.split("=", 1))
        full = f"{section}.{key}" if section else key
        if full not in SCHEMA:
            errors.append(f"line {lineno}: unknown key {full!r}")
            continue
        if full in raw:
            errors.append(f"line {lineno}: duplicate key {full!r} (first set on line {where[full]})")
            continue
        raw[full] = value
        where[full] = lineno
    values = {}
    for key, (kind, default, check, desc) in SCHEMA.items():
        if key not in raw:
            if default is ...:
                errors.append(f"missing required key {key!r}")
            else:
                values[key] = default
            continue
        try:
            value = _convert(kind, raw[key])
        except ValueError:
            errors.append(f"line {where[key]}: {key} expects {kind.__name__}, got {raw[key]!r}")
            continue
        if check is not None and not check(value):
            errors.append(f"line {where[key]}: {key} = {raw[key]} violates {key} {desc}")
            continue
        values[key] = value
    if "family" in values and values.get("family") is not None:
        from .equilibria import FAMILIES
        if values["family"] not in FAMILIES:
            errors.append(f"line {where.get('family', '?')}: family must be one of "
                          f"{', '.join(FAMILIES)}")
    if errors:
        err = ConfigurationError("; ".join(errors), "cli")
        err.violations = errors
        raise err
    return ExperimentConfig(values["subcommand"], values, where)


# --- output ---------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12e}"
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    return buf.getvalue()


class _Staging:
    """Collects output files; nothing lands in the target directory until commit."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.files = {}

    def add(self, name, text):
        self.files[name] = text

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name, text in self.files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, os.path.join(self.out_dir, name))


def _versions():
    import scipy
    out = {"vpdecay": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return out


# --- subcommands ------------------------------------------------------------------


def _equilibrium(cfg):
    from .equilibria import make_equilibrium
    return make_equilibrium(cfg["family"], cfg["d"], sigma=cfg["sigma"], u=cfg["u"])


def _window(cfg, T):
    lo, hi = default_window(T)
    return cfg.get("fit.window_min", lo), cfg.get("fit.window_max", hi)


def _fit_summary(report: DecayReport):
    out = {}
    for name, fit in report.fits.items():
        out[name] = None if fit is None else {"exponent": fit.exponent, "residual": fit.residual,
                                              "window": [fit.t_min, fit.t_max]}
    return out


def _run_penrose(cfg, stage):
    from .dispersion import penrose_margin
    rep = penrose_margin(_equilibrium(cfg), keep_rows=True)
    rows = [(r, tau, depth, re, im, dist) for r, tau, depth, re, im, dist in rep.rows]
    stage.add("penrose.csv", csv_text(("r", "tau_re", "tau_im", "re_K", "im_K",
                                       "abs_one_minus_K"), rows))
    winding_zero = all(c == 0 for c in rep.winding_counts.values())
    return {"margin": rep.margin, "argmin": list(rep.argmin), "all_windings_zero": winding_zero,
            "stable": rep.stable, "max_tail": rep.max_tail}


def _run_kernel(cfg, stage):
    from .kernel import laplace_consistency, resolvent_for_radii, resolvent_residual
    eq = _equilibrium(cfg)
    T = cfg.get("T", 40.0)
    dt = cfg.get("dt", 0.02)
    radii = np.arange(0.25, cfg["grid.xi_max"] + 1e-9, 0.25)
    res = resolvent_for_radii(eq, radii, dt, T)
    stride = max(1, int(round(0.1 / dt)))
    rows = [(res.t_grid[n], r, res.table.K[n, m], res.G[n, m])
            for n in range(0, res.t_grid.size, stride) for m, r in enumerate(radii)]
    stage.add("kernel.csv", csv_text(("t", "xi", "K", "G"), rows))
    taus = np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) - 0.5j
    modes = [int(np.argmin(np.abs(radii - r))) for r in (0.5, 1.0, 2.0, 3.0)]
    return {"laplace_max_rel_error": laplace_consistency(res, taus, modes),
            "resolvent_residual": resolvent_residual(res)}


def _run_green(cfg, stage):
    from .kernel import (assemble_physical_green, littlewood_paley_block, default_lp_table,
                         lp_spread, resolvent_for_radii)
    eq = _equilibrium(cfg)
    if cfg["green.blocks"]:
        qs = range(cfg["green.q_min"], cfg["green.q_max"] + 1)
        res = default_lp_table(eq, cfg["green.q_max"])
        t_samples = [1.0, 2.0, 5.0, 10.0, 20.0]
        blocks = [littlewood_paley_block(res, q, t_samples) for q in qs]
        rows = []
        for b in blocks:
            for i, t in enumerate(b.t):
                rows.append((b.q, t, b.L1[i], b.Linf[i],
                             max(b.ratio_L1[i], b.ratio_Linf[i])))
        stage.add("green_blocks.csv", csv_text(("q", "t", "L1", "Linf", "bound_ratio"), rows))
        return {"spread": {k: list(v) for k, v in lp_spread(blocks).items()}}
    T = cfg.get("T", 50.0)
    res = resolvent_for_radii(eq, np.arange(0.0, cfg["grid.xi_max"] + 1e-9, cfg["grid.xi_step"]),
                              cfg.get("dt", 0.05), T)
    t_samples = np.geomspace(cfg["grid.t_min"], T, cfg["grid.t_samples"])
    if cfg["grid.method"] == "cartesian":
        from .grids import CartesianGrid
        norms = assemble_physical_green(res, CartesianGrid(cfg["grid.x_n"], cfg["grid.x_side"]),
                                        cfg["k_max"], t_samples)
    else:
        norms = assemble_physical_green(res, None, cfg["k_max"], t_samples, method="radial")
    rows = [(t, k, norms.norms[i, k, 0], norms.norms[i, k, 1])
            for i, t in enumerate(norms.t) for k in range(cfg["k_max"] + 1)]
    stage.add("green.csv", csv_text(("t", "k", "norm_L1", "norm_Linf"), rows))
    report = DecayReport(np.asarray(norms.t))
    for k in range(cfg["k_max"] + 1):
        for which in ("L1", "Linf"):
            report.add(f"{which}_k{k}", norms.series(k, which), (cfg["grid.t_min"], T),
                       cfg["fit.log_correction"])
    return {"fits": _fit_summary(report)}


def _datum(cfg):
    from .transport import make_initial_datum
    return make_initial_datum(cfg["datum.kind"], cfg["d"], sigma_x=cfg["datum.sigma_x"],
                              sigma_v=cfg["datum.sigma_v"])


def _run_free(cfg, stage):
    from .transport import free_decay_report
    T = cfg.get("T", 100.0)
    t_samples = np.geomspace(cfg["grid.t_min"], T, cfg["grid.t_samples"])
    report = free_decay_report(_datum(cfg), cfg["k_max"], t_samples, _window(cfg, T))
    rows = [(t, k, report.series[f"L1_k{k}"][i], report.series[f"Linf_k{k}"][i])
            for i, t in enumerate(report.t) for k in range(cfg["k_max"] + 1)]
    stage.add("free_transport.csv", csv_text(("t", "k", "L1", "Linf"), rows))
    return {"fits": _fit_summary(report)}


def _run_chars(cfg, stage):
    from .characteristics import characteristics_decay_report, synthetic_field
    eps = cfg["chars.eps"]
    E = synthetic_field(eps, cfg["d"])
    rep = characteristics_decay_report(E, cfg["chars.t_values"], min(cfg["k_max"], 3),
                                       eps=eps, tol=min(cfg["tol"], 1e-12))
    stage.add("chars.csv", csv_text(("t", "s", "k", "supY_k", "supW_k", "supGradxY"), rep.rows))
    return {"iterations": {str(k): v for k, v in rep.iterations.items()},
            "max_ratio_Y": rep.max_ratio("Y"), "max_ratio_W": rep.max_ratio("W"),
            "max_ratio_gradxY": rep.max_ratio("gx")}


def synthetic_forcing(grid, t_grid, N: int = 2, d: int = 3):
    """Gaussian forcing of variance 1 + t^2 normalised to a unit Y_T^N ledger."""
    from .response import DensityHistory
    from .transport import gaussian_free_oracle
    r = np.stack([grid.r, np.zeros_like(grid.r), np.zeros_like(grid.r)], -1)
    vals = np.array([gaussian_free_oracle(t, r) for t in t_grid])
    S = DensityHistory(t_grid, grid, values=vals)
    return S.scaled(1.0 / float(S.ledger(N)[-1]))


def _run_linres(cfg, stage):
    from .response import default_radial_grid, linear_response, resolvent_for_grid
    eq = _equilibrium(cfg)
    T = cfg.get("T", 40.0)
    dt = cfg.get("dt", 0.05)
    grid = default_radial_grid(T, eq=eq, dr=cfg["grid.dr"])
    res = resolvent_for_grid(eq, grid, dt, T)
    S = synthetic_forcing(grid, res.t_grid, cfg["N"], eq.dimension)
    t_out = np.arange(0.0, T + 1e-9, 0.5)
    rho = linear_response(S, res).restrict(t_out)
    norms = rho.derivative_norms(cfg["N"])
    from .response import weighted_norms
    led = weighted_norms(t_out, norms, eq.dimension, log_weight=True)
    rows = [(t, k, norms[i, k, 0], norms[i, k, 1], led[i])
            for i, t in enumerate(t_out) for k in range(cfg["N"] + 1)]
    stage.add("linres.csv", csv_text(("t", "k", "L1", "Linf", "ledger"), rows))
    return {"max_ledger": float(np.max(led)), "final_ledger": float(led[-1])}


def _run_bootstrap(cfg, stage):
    from .response import (bootstrap_run, default_radial_grid, normalized_datum,
                           resolvent_for_grid)
    eq = _equilibrium(cfg)
    T = cfg.get("T", 20.0)
    f0 = normalized_datum(cfg["eps0"], eq.dimension, cfg["N"], cfg["datum.sigma_x"],
                          cfg["datum.sigma_v"])
    if cfg["datum.kind"] == "zero":
        f0 = f0.scaled(0.0)
    grid = default_radial_grid(T, f0, eq, cfg["grid.dr"])
    res = resolvent_for_grid(eq, grid, cfg.get("dt", 0.05), T)
    states = bootstrap_run(f0, eq, res, T, cfg["max_iter"], cfg["eps0"], cfg["M0"], N=cfg["N"],
                           grid=grid)
    rows = []
    for st in states:
        for t, n_val in zip(st.t_grid, st.N_ledger):
            rows.append((st.iteration, t, n_val, n_val > st.M0 * st.eps0))
    stage.add("bootstrap.csv", csv_text(("iter", "t", "N_ledger", "flag"), rows))
    last = states[-1]
    return {"iterations": len(states), "N_T": last.N_final, "change": last.change,
            "violated": last.violated,
            "T_ledger": float(last.forcing.ledger("T")[-1]),
            "RL_ledger": float(last.forcing.ledger("RL")[-1])}


def _run_rates(cfg, stage):
    """Fitted exponents of the free-transport and Green-kernel norms beside their targets."""
    from .kernel import assemble_physical_green, resolvent_for_radii
    from .transport import free_decay_report
    d = cfg["d"]
    rows = []
    T = cfg.get("T", 50.0)
    t_samples = np.geomspace(cfg["grid.t_min"], T, cfg["grid.t_samples"])
    free = free_decay_report(_datum(cfg), cfg["k_max"], t_samples, (cfg["grid.t_min"], T))
    res = resolvent_for_radii(_equilibrium(cfg), np.arange(0.0, cfg["grid.xi_max"] + 1e-9,
                                                           cfg["grid.xi_step"]),
                              cfg.get("dt", 0.05), T)
    green = assemble_physical_green(res, None, cfg["k_max"], t_samples, method="radial")
    green_rep = DecayReport(np.asarray(green.t))
    for k in range(cfg["k_max"] + 1):
        for which in ("L1", "Linf"):
            green_rep.add(f"{which}_k{k}", green.series(k, which), (cfg["grid.t_min"], T))
    for label, rep, target in (("free", free, lambda k, w: -k if w == "L1" else -(d + k)),
                               ("green", green_rep,
                                lambda k, w: -(k + 1) if w == "L1" else -(d + 1 + k))):
        for k in range(cfg["k_max"] + 1):
            for which in ("L1", "Linf"):
                fit = rep.fits.get(f"{which}_k{k}")
                if fit is None:
                    continue
                rows.append((label, k, which, fit.exponent, target(k, which), fit.residual))
    stage.add("rates.csv", csv_text(("series", "k", "norm", "exponent", "target", "residual"),
                                    rows))
    return {"n_fits": len(rows)}


_DISPATCH = {
    "penrose": _run_penrose, "kernel": _run_kernel, "green": _run_green,
    "free-transport": _run_free, "chars": _run_chars, "linres": _run_linres,
    "bootstrap": _run_bootstrap, "rates": _run_rates,
}


def run_experiment(config: ExperimentConfig, out_dir: str | None = None, quiet: bool = True) -> int:
    """Run one subcommand; files appear in ``out_dir`` only on success."""
    out_dir = out_dir or config["output"]
    stage = _Staging(out_dir)
    tic = time.perf_counter()
    summary = _DISPATCH[config.subcommand](config, stage)
    manifest = {"subcommand": config.subcommand, "config": config.echo(),
                "versions": _versions(), "wall_time_s": time.perf_counter() - tic,
                "summary": summary}
    stage.add("manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    stage.commit()
    if not quiet:
        print(f"{config.subcommand}: " + ", ".join(f"{k}={v}" for k, v in summary.items()
                                                   if not isinstance(v, dict)))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vpdecay", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS,
                        help="overrides the config's subcommand")
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--out", help="output directory (default: config 'output')")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    try:
        text = ""
        if args.config:
            with open(args.config) as fh:
                text = fh.read()
        if args.subcommand and "subcommand" not in _keys(text):
            text = f"subcommand = {args.subcommand}\n" + text
        cfg = parse_config(text)
        if args.subcommand and args.subcommand != cfg.subcommand:
            cfg = ExperimentConfig(args.subcommand, {**cfg.values, "subcommand": args.subcommand},
                                   cfg.lines)
        return run_experiment(cfg, args.out, args.quiet)
    except VPDecayError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    except OSError as exc:
        print(f"error [cli]: {exc}", file=sys.stderr)
        return 1


def _keys(text):
    out = set()
    section = ""
    for line in text.splitlines():
        body = line.split("#", 1)[0].strip()
        if body.startswith("["):
            section = body.strip("[]").strip()
        elif "=" in body and not section:
            out.add(body.split("=", 1)[0].strip())
    return out


__all__ = ["DecayFit", "ExperimentConfig", "SCHEMA", "SUBCOMMANDS", "csv_text", "fit_decay",
           "main", "parse_config", "run_experiment", "synthetic_forcing"]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
