"""Config-driven experiment runner.

    trapwave run config.json [--workers N] [--cache-dir PATH]
    trapwave describe config.json

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
STOCHASTIC = {"volume", "rates", "decay", "concentration"}
KINDS = ["validate", "volume", "rates", "exponents", "spectrum", "decay", "concentration", "resonances"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schema

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}
_tgrid = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"start": _pos, "stop": _pos, "num": {"type": "integer", "minimum": 2},
                   "spacing": {"enum": ["log", "linear"]}, "values": {"type": "array", "items": _num, "minItems": 1}},
}

PARAMS = {
    "validate": {},
    "volume": {"t_grid": _tgrid, "n_samples": {"type": "integer", "minimum": 1000},
               "method": {"enum": ["direct", "focused"]}, "r_ball": _pos,
               "fit_window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
    "rates": {"t_grid": _tgrid, "n_samples": {"type": "integer", "minimum": 1000},
              "method": {"enum": ["direct", "focused"]}, "r_ball": _pos,
              "fit_window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
              "lambda_t_fit": {"type": "number", "minimum": 10}, "lambda_samples": {"type": "integer", "minimum": 1000}},
    "exponents": {"gamma": {"type": "number", "minimum": 0}, "Lambda": _pos, "delta": {"type": "number", "minimum": 0},
                  "beta_max": _pos, "n_beta": {"type": "integer", "minimum": 2}},
    "spectrum": {"R": {"type": "array", "items": _pos, "minItems": 1}, "eps_prime": _pos,
                 "eigenvalue_tables": {"type": "boolean"}},
    "decay": {"R": {"type": "array", "items": _pos, "minItems": 1}, "eps_prime": _pos,
              "eps_energy": _pos, "t_grid": _tgrid, "n_trials": _int_pos, "alpha_param": _pos,
              "eps": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
              "gamma": {"type": "number", "minimum": 0}, "Lambda": _pos, "cutoff_radius": _pos,
              "dump_trials": {"type": "boolean"}},
    "concentration": {"N": _int_pos, "m_grid": {"type": "array", "items": {"type": "number", "minimum": 10}, "minItems": 1},
                      "n_trials": {"type": "integer", "minimum": 10},
                      "operators": {"type": "array", "items": {"enum": ["identity", "projector", "half"]}, "minItems": 1}},
    "resonances": {"R": {"type": "array", "items": _pos, "minItems": 1}, "beta": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                   "theta": {"type": "number", "exclusiveMinimum": 0.1, "exclusiveMaximum": 0.785},
                   "points_per_wavelength": {"type": "number", "minimum": 8}},
}

REQUIRED = {
    "volume": ["t_grid", "n_samples"],
    "rates": ["t_grid", "n_samples"],
    "exponents": ["gamma", "Lambda", "delta"],
    "spectrum": ["R"],
    "decay": ["R", "n_trials"],
    "concentration": ["N", "m_grid", "n_trials"],
    "resonances": ["R", "beta"],
}


def schema_for(kind: str) -> dict:
    manifold = {
        "type": "object",
        "additionalProperties": False,
        "required": ["profile"],
        "properties": {
            "profile": {
                "type": "object",
                "required": ["family"],
                "properties": {"family": {"enum": ["cylindrical", "degenerate", "neck", "custom"]}},
            },
            "d": {"type": "integer", "minimum": 2},
            "r0": _pos, "r1": _pos,
        },
    }
    props = {
        "kind": {"enum": KINDS},
        "manifold": manifold,
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "workers": _int_pos,
        "params": {"type": "object", "additionalProperties": False, "properties": PARAMS.get(kind, {}),
                   "required": REQUIRED.get(kind, [])},
    }
    req = ["kind", "params"] + (["manifold"] if kind not in ("exponents", "concentration") else [])
    if kind in STOCHASTIC:
        req.append("seed")
    return {"type": "object", "additionalProperties": False, "required": req, "properties": props}


def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or cfg.get("kind") not in KINDS:
        raise ConfigError(f"'kind' must be one of {KINDS}")
    try:
        jsonschema.validate(cfg, schema_for(cfg["kind"]))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (output location and worker count excluded)."""
    core = {k: v for k, v in cfg.items() if k not in ("output_dir", "workers")}
    return hashlib.sha256(json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_manifold(spec: dict):
    from .geometry import Manifold, make_builtin_profile, make_custom_profile
    params = dict(spec["profile"])
    family = params.pop("family")
    try:
        if family == "custom":
            prof = make_custom_profile(params["core"], params["core_radius"], params["blend_width"], params["end_radius"])
        else:
            prof = make_builtin_profile(family, **params)
        return Manifold(prof, spec.get("d", 2), spec.get("r0"), spec.get("r1"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"manifold: {exc}") from exc


def make_grid(g: dict) -> np.ndarray:
    if "values" in g:
        t = np.asarray(g["values"], dtype=float)
    else:
        try:
            a, b, n = float(g["start"]), float(g["stop"]), int(g["num"])
        except KeyError as exc:
            raise ConfigError(f"t_grid needs start, stop and num (or values): missing {exc}") from exc
        t = np.geomspace(a, b, n) if g.get("spacing", "log") == "log" else np.linspace(a, b, n)
    if np.any(np.diff(t) <= 0):
        raise ConfigError("t_grid must be strictly increasing")
    return t


# ---------------------------------------------------------------- runners


@dataclass
class RunContext:
    cfg: dict
    out: Path
    workers: int
    cache_dir: Path | None
    chash: str
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def header(self) -> str:
        return f"config_hash: {self.chash}"

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def write_csv(self, name: str, columns: list[str], rows) -> None:
        import csv
        with open(self.path(name), "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _run_validate(ctx: RunContext) -> None:
    from .geometry import critical_set, validate_profile
    m = build_manifold(ctx.cfg["manifold"])
    rep = validate_profile(m)
    ctx.write_csv("validation.csv", ["check", "passed", "residual", "witness"],
                  [(c.name, int(c.passed), c.residual, "" if c.witness is None else c.witness) for c in rep.checks])
    crit = critical_set(m.profile)
    ctx.write_csv("critical_set.csv", ["lo", "hi"], [(float(a), float(b)) for a, b in crit])
    ctx.summary.update(passed=rep.passed)
    if not rep.passed:
        raise RuntimeError("profile validation failed: " + "; ".join(rep.lines()))


def _volume(ctx: RunContext, m, p):
    from .volume import estimate_volume_curve
    t = make_grid(p["t_grid"])
    return estimate_volume_curve(m, t, p["n_samples"], ctx.cfg["seed"], method=p.get("method", "direct"),
                                 r_ball=p.get("r_ball"), workers=ctx.workers)


def _run_volume(ctx: RunContext) -> None:
    from . import svg
    from .volume import fit_power_law
    m = build_manifold(ctx.cfg["manifold"])
    p = ctx.cfg["params"]
    curve = _volume(ctx, m, p)
    curve.to_csv(ctx.path("volume.csv"), ctx.header)
    svg.line_plot([svg.Series(curve.t, curve.V, "V_hat", markers=True)], ctx.path("volume.svg"),
                  title="trapped volume", xlabel="t", ylabel="V_hat", logx=True, logy=True)
    fit = fit_power_law(curve, p.get("fit_window"))
    ctx.write_csv("volume_fit.csv", ["quantity", "value", "stderr", "t_lo", "t_hi"],
                  [("loglog_slope", fit.value, fit.stderr, fit.window[0], fit.window[1])])
    ctx.summary.update(loglog_slope=fit.value, slope_stderr=fit.stderr)


def _run_rates(ctx: RunContext) -> None:
    from .volume import estimate_lambda_max, fit_escape_rate
    m = build_manifold(ctx.cfg["manifold"])
    p = ctx.cfg["params"]
    curve = _volume(ctx, m, p)
    curve.to_csv(ctx.path("volume.csv"), ctx.header)
    rate = fit_escape_rate(curve, p.get("fit_window"))
    rows = [("gamma", rate.gamma, rate.gamma_stderr, rate.regime),
            ("exponential_rate", rate.exponential.value, rate.exponential.stderr, ""),
            ("power_law_slope", rate.power_law.value, rate.power_law.stderr, "")]
    if "lambda_t_fit" in p:
        lam = estimate_lambda_max(m, p["lambda_t_fit"], p.get("lambda_samples", 100_000), ctx.cfg["seed"],
                                  r_ball=p.get("r_ball"))
        rows.append(("Lambda_max", lam.value, lam.stderr, f"n_trapped={lam.n_trapped}"))
        ctx.summary.update(Lambda_max=lam.value)
    ctx.write_csv("rates.csv", ["quantity", "value", "stderr", "note"], rows)
    ctx.summary.update(gamma=rate.gamma, regime=rate.regime)


def _run_exponents(ctx: RunContext) -> None:
    from . import svg
    from .exponents import exponent_curve
    p = ctx.cfg["params"]
    d = ctx.cfg.get("manifold", {}).get("d", 2)
    beta = np.linspace(0.0, p.get("beta_max", max(1.5 * p["gamma"], 1.0)), p.get("n_beta", 101))
    curve = exponent_curve(d, p["gamma"], p["Lambda"], p["delta"], beta)
    curve.to_csv(ctx.path("figure1a.csv"), ctx.header)
    svg.line_plot([svg.Series(curve.beta, curve.m, "m(beta, gamma)"),
                   svg.Series(curve.beta, curve.m_prime, "m'(beta, delta)", dashed=True)],
                  ctx.path("figure1a.svg"), title="counting exponents", xlabel="beta", ylabel="exponent")


def _run_spectrum(ctx: RunContext) -> None:
    from .spectral import eigenvalue_table_csv, frequency_window
    m = build_manifold(ctx.cfg["manifold"])
    p = ctx.cfg["params"]
    rows = []
    for R in p["R"]:
        win = frequency_window(m, R, p.get("eps_prime", 0.1))
        if win.N == 0:
            raise RuntimeError(f"empty frequency window at R = {R}")
        rows.append((float(R), win.N, win.k_max))
        if p.get("eigenvalue_tables", True):
            eigenvalue_table_csv(win, ctx.path(f"eigenvalues_R{R:g}.csv"), ctx.header)
    ctx.write_csv("window_counts.csv", ["R", "N_R", "k_max"], rows)
    if len(rows) >= 2:
        from .volume import loglog_slope
        s, se = loglog_slope([r[0] for r in rows], [r[1] for r in rows])
        ctx.summary.update(N_R_exponent=s, N_R_exponent_stderr=se)


def _run_decay(ctx: RunContext) -> None:
    from .decay import decay_experiment
    from .exponents import decay_envelope
    from .spectral import Cutoff, PlanCache
    m = build_manifold(ctx.cfg["manifold"])
    p = ctx.cfg["params"]
    cache = PlanCache(ctx.cache_dir) if ctx.cache_dir else None
    cutoff = Cutoff(p["cutoff_radius"]) if "cutoff_radius" in p else None
    alpha = p.get("alpha_param", 1.0)
    for R in p["R"]:
        if "t_grid" in p:
            t = make_grid(p["t_grid"])
        else:
            from .exponents import ehrenfest_time
            te = ehrenfest_time(R, p.get("Lambda", 1.0))
            t = np.linspace(alpha * math.log(R), 6.0 * te, 25)
        curve, ev = decay_experiment(m, R, p.get("eps_prime", 0.1), t, p["n_trials"], ctx.cfg["seed"],
                                     cutoff=cutoff, alpha_param=alpha, eps_energy=p.get("eps_energy", 0.35),
                                     workers=ctx.workers, cache=cache)
        env = None
        if "gamma" in p and "Lambda" in p:
            env = decay_envelope(t, R, p["gamma"], p["Lambda"], p.get("eps", 0.0), alpha)
        curve.to_csv(ctx.path(f"decay_R{R:g}.csv"), env, ctx.header)
        curve.to_svg(ctx.path(f"decay_R{R:g}.svg"), env)
        ctx.write_csv(f"hs_R{R:g}.csv", ["t", "hs2", "hs2_over_N"],
                      zip(ev.t, ev.hs2, ev.normalized_hs2))
        if p.get("dump_trials"):
            curve.dump_trials(ctx.path(f"decay_trials_R{R:g}.csv"))
        ctx.summary[f"R{R:g}"] = {"N_R": ev.N, "max_leakage": ev.max_leakage, "t_valid": ev.plan["t_valid"]}


def _run_concentration(ctx: RunContext) -> None:
    from .decay import concentration_test, make_operator, mean_identity_check
    p = ctx.cfg["params"]
    rows, mrows = [], []
    ok = True
    for i, kind in enumerate(p.get("operators", ["projector", "half"])):
        op = make_operator(kind, p["N"])
        rep = concentration_test(op, p["m_grid"], p["n_trials"], ctx.cfg["seed"] + i)
        ok &= rep.passed
        rows += [(kind, p["N"], mi, e, lo, hi, b) for mi, e, lo, hi, b in
                 zip(rep.m, rep.exceed, rep.ci_low, rep.ci_high, rep.bound)]
        mi = mean_identity_check(op, p["n_trials"], ctx.cfg["seed"] + 1000 + i)
        mrows.append((kind, mi.mean, mi.stderr, mi.expected, mi.z))
    ctx.write_csv("concentration.csv", ["operator", "N", "m", "exceedance", "wilson_low", "wilson_high", "bound"], rows)
    ctx.write_csv("mean_identity.csv", ["operator", "mean", "stderr", "expected", "z"], mrows)
    ctx.summary.update(all_under_bound=bool(ok))


def _run_resonances(ctx: RunContext) -> None:
    from .resonances import ResonanceSet, count_resonances
    m = build_manifold(ctx.cfg["manifold"])
    p = ctx.cfg["params"]
    theta = p.get("theta", 0.35)
    rows, sets = [], []
    for R in p["R"]:
        top = max(p["beta"])
        res = count_resonances(m, R, top, theta=theta, points_per_wavelength=p.get("points_per_wavelength", 24.0))
        sets.append(res.resonances)
        for beta in sorted(p["beta"]):
            sel = res.resonances.omega.imag >= -beta
            rows.append((float(R), float(beta), int(res.resonances.multiplicity()[sel].sum())))
    allres = ResonanceSet.concat(sets)
    allres.to_csv(ctx.path("resonances.csv"), ctx.header)
    allres.to_svg(ctx.path("resonances.svg"))
    ctx.write_csv("counts.csv", ["R", "beta", "N"], rows)
    if len(allres):
        ctx.summary.update(mean_im_omega=float(np.mean(allres.omega.imag)))


RUNNERS = {"validate": _run_validate, "volume": _run_volume, "rates": _run_rates, "exponents": _run_exponents,
           "spectrum": _run_spectrum, "decay": _run_decay, "concentration": _run_concentration,
           "resonances": _run_resonances}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def run(config_path: str | Path, workers: int | None = None, cache_dir: str | None = None,
        output_dir: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
        out = Path(output_dir or cfg.get("output_dir") or Path(config_path).with_suffix("").name + "_out")
        cache = cache_dir or os.environ.get("TRAPWAVE_CACHE")
        ctx = RunContext(cfg, out, workers or cfg.get("workers", 1), Path(cache) if cache else None, config_hash(cfg))
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        _error({"status": "config_error", "message": str(exc)})
        return EXIT_CONFIG
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        RUNNERS[cfg["kind"]](ctx)
    except ConfigError as exc:
        _error({"status": "config_error", "message": str(exc)})
        return EXIT_CONFIG
    except Exception as exc:  # numerical or module failure
        err = {"status": "numerical_failure", "kind": cfg["kind"], "error": type(exc).__name__,
               "message": str(exc), "traceback": traceback.format_exc(limit=6)}
        (out / "error.json").write_text(json.dumps(err, indent=2))
        _error(err)
        return EXIT_NUMERIC
    manifest = {
        "config_hash": ctx.chash,
        "code_version": __version__,
        "kind": cfg["kind"],
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "workers": ctx.workers,
        "outputs": [{"file": p.name, "sha256": _sha256(p)} for p in ctx.outputs],
        "summary": _jsonable(ctx.summary),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({"status": "ok", "output_dir": str(out), "summary": manifest["summary"]}))
    return EXIT_OK


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def _error(obj: dict) -> None:
    print(json.dumps(obj), file=sys.stderr)


# ---------------------------------------------------------------- describe


def describe_plan(cfg: dict, workers: int = 1) -> dict:
    """Resource plan for a validated config; no heavy computation."""
    kind = cfg["kind"]
    p = cfg["params"]
    plan: dict = {"kind": kind, "config_hash": config_hash(cfg), "workers": workers}
    if kind in ("volume", "rates"):
        from .volume import CHUNK
        n = p["n_samples"]
        batches = -(-n // CHUNK)
        plan.update(samples=n, batch_size=CHUNK, batches=batches, batches_per_worker=-(-batches // workers),
                    t_points=int(make_grid(p["t_grid"]).size), method=p.get("method", "direct"),
                    memory_mb=round(8 * 4 * CHUNK * workers / 2**20, 1))
        if kind == "rates" and "lambda_t_fit" in p:
            plan.update(lambda_samples=p.get("lambda_samples", 100_000))
    elif kind in ("spectrum", "decay"):
        from .spectral import b_grid, domain_half_length, horizon, max_mode
        m = build_manifold(cfg["manifold"])
        eps = p.get("eps_prime", 0.1)
        area = 2 * math.pi * m.profile.integral_power(-m.r1, m.r1, 1)
        rows = []
        for R in p["R"]:
            dr, half = b_grid(m, R, eps)
            row = {"R": R, "dr": dr, "grid_points_B": 2 * half - 1, "modes": 2 * max_mode(m, R, eps) + 1,
                   "N_R_estimate": int(area * R * R * ((1 + eps) ** 2 - (1 - eps) ** 2) / (4 * math.pi))}
            if kind == "decay":
                alpha = p.get("alpha_param", 1.0)
                t_max = float(make_grid(p["t_grid"])[-1]) if "t_grid" in p else 6 * math.log(R) / (2 * p.get("Lambda", 1.0))
                L = domain_half_length(m.r1, t_max)
                big = 2 * int(math.ceil(L / dr)) - 1
                e_e = p.get("eps_energy", 0.35)
                band = int(2 * L / math.pi * R * (math.sqrt(1 + e_e) - math.sqrt(1 - e_e)))
                row.update(L=L, t_valid=horizon(L, m.r1), grid_points_big=big, band_vectors_per_mode=band,
                           trials=p["n_trials"], memory_mb_per_mode=round(8 * (big * band / 2 + band * band) / 2**20, 1),
                           t_min=alpha * math.log(R))
            rows.append(row)
        plan["per_R"] = rows
    elif kind == "resonances":
        m = build_manifold(cfg["manifold"])
        ppw = p.get("points_per_wavelength", 24.0)
        rows = []
        for R in p["R"]:
            h = 2 * math.pi / (ppw * (R + 1))
            L = 2 * m.r1 + 8
            n = int(L / h)
            kmax = int(math.ceil((R + 1) * float(np.max(m.profile.alpha(np.linspace(-m.r1, m.r1, 2001))))))
            rows.append({"R": R, "contour_points_per_parity": n, "modes": kmax + 1,
                         "shift_invert_solves": 4 * (kmax + 1), "flops_estimate": 4 * (kmax + 1) * 60 * n * 12})
        plan.update(theta=p.get("theta", 0.35), per_R=rows)
    elif kind == "concentration":
        plan.update(N=p["N"], trials=p["n_trials"], operators=p.get("operators", ["projector", "half"]),
                    memory_mb=round(16 * p["N"] * 4096 / 2**20, 1))
    elif kind == "exponents":
        plan.update(beta_points=p.get("n_beta", 101))
    return plan


def describe(config_path: str | Path, workers: int | None = None) -> int:
    try:
        cfg = load_config(config_path)
        print(json.dumps(describe_plan(cfg, workers or cfg.get("workers", 1)), indent=2))
    except ConfigError as exc:
        _error({"status": "config_error", "message": str(exc)})
        return EXIT_CONFIG
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="trapwave", description="Trapping, wave decay and resonance experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "describe"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--workers", type=int, default=None)
        if name == "run":
            sp.add_argument("--cache-dir", default=None)
            sp.add_argument("--output-dir", default=None)
    args = ap.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        _error({"status": "config_error", "message": "--workers must be >= 1"})
        return EXIT_CONFIG
    if args.command == "run":
        return run(args.config, args.workers, args.cache_dir, args.output_dir)
    return describe(args.config, args.workers)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
