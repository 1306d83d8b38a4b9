"""Experiment orchestration: config files, seeded sweeps and result files.

A config is an INI file with an ``[experiment]`` section (``kind``, ``seed``,
``output_dir``) and one section named after the kind holding its
parameters.  Every key is checked against the schema below; unknown keys
and malformed values are errors.  Each run writes ``manifest.json`` with the
fully resolved config, which can itself be passed back to :func:`run`.
"""

import configparser
import csv
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .constants import ACTIVATIONS, auto_order, compute_constants
from .features import (
    RFModel,
    SpectralMeasure,
    build_gram_gep,
    build_gram_mc,
    sample_gaussian_data,
    sample_weights,
)
from . import generation as gen
from . import spectrum as spec
from . import training as tr

logger = logging.getLogger(__name__)

CSV_SCHEMA = "rfmem-csv/1"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
WORKERS_ENV = "RFMEM_WORKERS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema


def _float_list(text):
    return [float(v) for v in re.split(r"[,\s]+", text.strip()) if v]


def _int_list(text):
    return [int(v) for v in re.split(r"[,\s]+", text.strip()) if v]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        v = text.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _measure(text):
    text = text.strip()
    if os.path.isfile(text):
        text = Path(text).read_text().strip()
    SpectralMeasure.parse(text)  # validate
    return text


_COMMON = {
    "activation": (_choice(*ACTIVATIONS), "tanh"),
    "measure": (_measure, "1:1"),
}

SCHEMA = {
    "constants": {
        "activation": _COMMON["activation"],
        "sigma_x2": (float, 1.0),
        "t": (float, 0.01),
        "order": (int, 0),
    },
    "spectrum": {
        **_COMMON,
        "psi_p": (float, 64.0),
        "psi_n": (float, 8.0),
        "t": (float, 0.01),
        "n_grid": (int, 3000),
        "eps_final": (float, 1e-4),
        "empirical_d": (int, 0),
        "refine_edges": (_bool, True),
    },
    "train": {
        **_COMMON,
        "d": (int, 100),
        "psi_p": (float, 64.0),
        "psi_n": (float, 8.0),
        "t": (float, 0.1),
        "optimizer": (_choice("flow", "gd", "adam"), "flow"),
        "eta": (float, 0.0),
        "n_steps": (int, 10_000),
        "tau_min": (float, 1.0),
        "tau_max": (float, 1e7),
        "n_tau": (int, 200),
        "gram": (_choice("gep", "mc"), "gep"),
        "n_noise": (int, 100),
        "score_samples": (int, 10_000),
        "threshold": (float, 0.01),
    },
    "generate": {
        "provider": (_choice("gmm", "empirical", "rf"), "empirical"),
        "scheme": (_choice("em", "ddim"), "em"),
        "d": (int, 8),
        "n_train": (int, 16),
        "n_samples": (int, 1000),
        "k": (float, 1.0 / 3.0),
        "steps": (int, 1000),
        "n_bootstrap": (int, 1000),
        "normalize_mu": (_bool, False),
        "kl": (_bool, True),
        "rf_psi_p": (float, 32.0),
        "rf_tau": (float, 1e4),
        "rf_times": (_float_list, [1e-3, 1e-2, 1e-1, 1.0, 5.0]),
    },
    "phase": {
        **_COMMON,
        "d": (int, 50),
        "t": (float, 0.1),
        "psi_n": (_float_list, [1, 2, 4, 8, 16, 32, 64]),
        "psi_p": (_float_list, [4, 8, 16, 32, 64]),
        "tau": (_float_list, [1e3, 1e4]),
        "threshold": (float, 0.01),
    },
}
SCHEMA["collapse"] = {
    **{k: v for k, v in SCHEMA["train"].items() if k not in ("psi_n",)},
    "psi_n": (_float_list, [4, 8, 16, 32]),
}
KINDS = tuple(SCHEMA)
_LIST_KEYS = {"psi_n", "psi_p", "tau", "rf_times"}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    output_dir: str
    parameters: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "seed": self.seed, "output_dir": self.output_dir,
                "parameters": self.parameters}


def _key_lines(text):
    """Map ``(section, key)`` to the 1-based line it appears on."""
    lines, section = {}, None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = i
            continue
        key = re.split(r"[=:]", line, 1)[0].strip().lower()
        lines.setdefault((section, key), i)
    return lines


def _where(lines, section, key):
    ln = lines.get((section, key))
    return f"[{section}] {key}" + (f" (line {ln})" if ln else "")


def resolve(kind, raw, seed=0, output_dir=".", lines=None):
    """Validate raw string values against the schema and fill defaults."""
    if kind not in SCHEMA:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    lines = lines or {}
    schema = SCHEMA[kind]
    params = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {_where(lines, kind, key)}")
        parser, _ = schema[key]
        try:
            params[key] = parser(value) if isinstance(value, str) else _coerce(parser, value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {_where(lines, kind, key)}: {exc}") from None
        if key in _LIST_KEYS and not params[key]:
            raise ConfigError(f"empty sweep list for {_where(lines, kind, key)}")
    for key, (_, default) in schema.items():
        params.setdefault(key, default)
    _check_ranges(kind, params)
    return ExperimentConfig(kind, int(seed), str(output_dir), params)


def _coerce(parser, value):
    if parser in (_float_list, _int_list):
        return [float(v) for v in value]
    if parser is _bool:
        return bool(value)
    if parser in (int, float):
        return parser(value)
    return parser(str(value))


def _check_ranges(kind, p):
    def need(cond, msg):
        if not cond:
            raise ConfigError(f"[{kind}] {msg}")

    if "t" in p:
        need(p["t"] > 0, "t must be > 0")
    for key in ("d", "n_tau", "n_grid", "n_samples", "n_train", "steps", "n_noise", "score_samples"):
        if key in p:
            need(p[key] >= 1, f"{key} must be >= 1")
    if kind == "generate":
        need(p["n_train"] >= 2, "n_train must be >= 2")
    for key in ("psi_p", "psi_n"):
        if key in p:
            vals = p[key] if isinstance(p[key], list) else [p[key]]
            need(all(v > 0 for v in vals), f"{key} must be > 0")


def load_config(path):
    """Read an INI config or a previously written ``manifest.json``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = data.get("config", data)
        try:
            return resolve(cfg["kind"], cfg.get("parameters", {}), cfg.get("seed", 0), cfg.get("output_dir", "."))
        except KeyError as exc:
            raise ConfigError(f"{path}: missing {exc}") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = _key_lines(text)
    if not parser.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = dict(parser["experiment"])
    for key in exp:
        if key not in ("kind", "seed", "output_dir"):
            raise ConfigError(f"unknown key {_where(lines, 'experiment', key)}")
    kind = exp.get("kind")
    if kind is None:
        raise ConfigError(f"{path}: [experiment] kind is required")
    for section in parser.sections():
        if section not in ("experiment", kind):
            ln = lines.get((section, None))
            raise ConfigError(f"unexpected section [{section}]" + (f" (line {ln})" if ln else ""))
    try:
        seed = int(exp.get("seed", "0"))
    except ValueError:
        raise ConfigError(f"invalid value for {_where(lines, 'experiment', 'seed')}") from None
    out = exp.get("output_dir", str(path.parent / "out"))
    raw = dict(parser[kind]) if parser.has_section(kind) else {}
    return resolve(kind, raw, seed, out, lines)


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, comment=""):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {CSV_SCHEMA} {comment}".rstrip() + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` (comment lines skipped)."""
    with open(path, encoding="utf-8") as fh:
        body = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(body)
    header = next(reader)
    return header, [[float(v) for v in row] for row in reader]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest(config):
    return {"artifact": "rfmem", "version": __version__, "config": config.to_dict()}


def workers():
    value = os.environ.get(WORKERS_ENV)
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def _map(fn, items):
    """Ordered map over a bounded process pool (in-process when one worker)."""
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def cell_seed(seed, *indices):
    """Independent 32-bit seed for a sweep cell."""
    return int(np.random.SeedSequence([int(seed), *map(int, indices)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# runners


def run_constants(cfg):
    p = cfg.parameters
    order = p["order"] or auto_order(math.exp(-2 * p["t"]) * p["sigma_x2"] - math.expm1(-2 * p["t"]))
    c = compute_constants(p["activation"], p["sigma_x2"], p["t"], order)
    out = c.to_dict()
    out["activation"] = p["activation"]
    out["order"] = order
    return {"constants.json": out}


def run_spectrum(cfg):
    p = cfg.parameters
    measure = SpectralMeasure.parse(p["measure"])
    c = compute_constants(p["activation"], measure.sigma_x2, p["t"])
    psi_p, psi_n = p["psi_p"], p["psi_n"]
    n2 = p["n_grid"] // 2
    grid = spec.default_grid(c, psi_p, psi_n, measure, n_points=(n2, p["n_grid"] - n2))
    eps = sorted({1e-1, 1e-2, 1e-3, p["eps_final"]} - {x for x in (1e-1, 1e-2, 1e-3) if x <= p["eps_final"]},
                 reverse=True)
    curve = spec.density_plemelj(grid, measure, c, psi_p, psi_n, eps_schedule=eps)
    rho2 = spec.rho2_density(measure, c, psi_p, grid, eps=p["eps_final"])
    summary = spec.summarize(measure, c, psi_p, psi_n, curve)
    out = summary.to_dict()
    if p["refine_edges"]:
        sups = curve.supports()
        if len(sups) >= 2:
            _, b1, b2 = spec.classify_supports(sups)
            b1 = spec.refine_edges(curve, b1, measure, c, psi_p, psi_n)
            out["analytic_bulk1_support"] = [b1.lower, b1.upper]
            out["analytic_bulk2_support"] = [b2.lower, b2.upper]
    out.update({"grid_points": int(grid.size), "eps_schedule": eps, "constants": c.to_dict(),
                "measure": measure.to_list(), "failed_points": int(curve.failed.sum())})
    rows = [(lam, r1, r2) for lam, r1, r2 in zip(grid, curve.rho, rho2.rho)]
    files = {"density.csv": (("lambda", "rho_analytic", "rho2_analytic"), rows), "summary.json": out}
    if p["empirical_d"] > 0:
        d = p["empirical_d"]
        pp, nn = int(round(psi_p * d)), int(round(psi_n * d))
        W = sample_weights(pp, d, cell_seed(cfg.seed, 0))
        data = sample_gaussian_data(d, nn, measure, cell_seed(cfg.seed, 1))
        g = build_gram_gep(W, data, c, seed=cell_seed(cfg.seed, 2))
        ev = spec.empirical_spectrum(g.U)
        files["eigenvalues.csv"] = (("eigenvalue",), [(v,) for v in ev])
        out["empirical"] = {"d": d, "p": pp, "n": nn,
                            "moments": [float(np.mean(ev**k)) for k in (1, 2, 3)],
                            "analytic_moments": [curve.moment(k, include_delta=True) for k in (1, 2, 3)]}
    return files


def _train_one(args):
    """One training run at a single ``psi_n``; returns trace and diagnostics."""
    p, seed, psi_n = args
    measure = SpectralMeasure.parse(p["measure"])
    d = p["d"]
    pp, n = int(round(p["psi_p"] * d)), int(round(psi_n * d))
    c = compute_constants(p["activation"], measure.sigma_x2, p["t"])
    W = sample_weights(pp, d, cell_seed(seed, 0))
    model = RFModel(W, p["activation"])
    train_data = sample_gaussian_data(d, n, measure, cell_seed(seed, 1))
    test_data = sample_gaussian_data(d, n, measure, cell_seed(seed, 2))
    if p["gram"] == "gep":
        g = build_gram_gep(W, train_data, c, seed=cell_seed(seed, 3))
        gt = build_gram_gep(W, test_data, c, seed=cell_seed(seed, 4))
    else:
        g = build_gram_mc(model, train_data, p["t"], p["n_noise"], seed=cell_seed(seed, 3))
        gt = build_gram_mc(model, test_data, p["t"], p["n_noise"], seed=cell_seed(seed, 4))
    stats = tr.score_stats_mc(model, measure, p["t"], p["score_samples"], seed=cell_seed(seed, 5))
    taus = np.geomspace(p["tau_min"], p["tau_max"], p["n_tau"])
    if p["optimizer"] == "flow":
        trace = tr.flow_trace(g, p["t"], taus, gt, stats)
    else:
        eta = p["eta"] if p["eta"] > 0 else tr.stable_eta(g, p["t"], d, target=1.0)
        h = eta / d**2
        steps = p["n_steps"]
        rec = [x for x in taus if x <= steps * h] or [steps * h]
        conf = tr.TrainConfig(t=p["t"], eta=eta, n_steps=steps, optimizer=p["optimizer"], record_times=rec)
        trace = tr.train(model, g, gt, conf, stats)
    tau_gen, tau_mem = spec.timescales(c, p["psi_p"], psi_n, measure)
    info = {
        "psi_n": psi_n, "p": pp, "n": n,
        "tau_star": tr.onset_time(trace, p["threshold"]),
        "tau_mem": tau_mem, "tau_gen_theory": tau_gen,
        "tau_gen_observed": tr.generalization_time(trace) if np.all(np.isfinite(trace.e_score)) else None,
        "min_e_score": float(np.nanmin(trace.e_score)),
        "provenance": trace.provenance,
    }
    return trace, info


TRACE_HEADER = ("tau", "l_train", "l_test", "l_gen", "e_score")


def run_train(cfg):
    trace, info = _train_one((cfg.parameters, cfg.seed, cfg.parameters["psi_n"]))
    return {"trace.csv": (TRACE_HEADER, list(trace.rows())), "train.json": info}


def run_collapse(cfg):
    p = cfg.parameters
    jobs = [(p, cell_seed(cfg.seed, i), psi_n) for i, psi_n in enumerate(p["psi_n"])]
    results = _map(_train_one, jobs)
    files, runs = {}, []
    for (trace, info) in results:
        files[f"trace_psin{info['psi_n']:g}.csv"] = (TRACE_HEADER, list(trace.rows()))
        runs.append(info)
    files["collapse.json"] = collapse_summary(runs)
    return files


def collapse_summary(runs):
    tau_star = np.array([r["tau_star"] for r in runs], dtype=float)
    tau_mem = np.array([r["tau_mem"] for r in runs], dtype=float)
    ok = np.isfinite(tau_star)
    slope, r2 = tr.fit_proportional(tau_mem[ok], tau_star[ok]) if ok.sum() >= 2 else (float("nan"),) * 2
    ratios = tau_star[ok] / tau_mem[ok]
    gen = [r["tau_gen_observed"] for r in runs if r["tau_gen_observed"] is not None]
    return {
        "runs": runs,
        "fit": {"slope": slope, "r2": r2,
                "ratio_spread": float(ratios.max() / ratios.min()) if ratios.size else None},
        "tau_gen_spread": float(max(gen) / min(gen)) if gen else None,
    }


@dataclass
class PhaseGrid:
    psi_n_values: list
    psi_p_values: list
    tau_checkpoints: list
    l_gen: np.ndarray
    failures: list = field(default_factory=list)

    def __post_init__(self):
        shape = (len(self.psi_n_values), len(self.psi_p_values), len(self.tau_checkpoints))
        if self.l_gen.shape != shape:
            raise ValueError(f"l_gen has shape {self.l_gen.shape}, expected {shape}")

    def rows(self):
        for i, a in enumerate(self.psi_n_values):
            for j, b in enumerate(self.psi_p_values):
                for k, tau in enumerate(self.tau_checkpoints):
                    yield a, b, tau, self.l_gen[i, j, k]

    def smallest_generalizing_psi_n(self, threshold=0.01):
        """For each ``(psi_p, tau)``, the smallest ``psi_n`` with ``l_gen < threshold``."""
        out = np.full((len(self.psi_p_values), len(self.tau_checkpoints)), np.nan)
        order = np.argsort(self.psi_n_values)
        for j in range(len(self.psi_p_values)):
            for k in range(len(self.tau_checkpoints)):
                for i in order:
                    if self.l_gen[i, j, k] < threshold:
                        out[j, k] = self.psi_n_values[i]
                        break
        return out


def _phase_cell(args):
    p, seed, psi_n, psi_p = args
    measure = SpectralMeasure.parse(p["measure"])
    d = p["d"]
    pp, n = int(round(psi_p * d)), int(round(psi_n * d))
    c = compute_constants(p["activation"], measure.sigma_x2, p["t"])
    W = sample_weights(pp, d, cell_seed(seed, 0))
    g = build_gram_gep(W, sample_gaussian_data(d, n, measure, cell_seed(seed, 1)), c, seed=cell_seed(seed, 2))
    gt = build_gram_gep(W, sample_gaussian_data(d, n, measure, cell_seed(seed, 3)), c, seed=cell_seed(seed, 4))
    taus = np.asarray(p["tau"], dtype=float)
    trace = tr.flow_trace(g, p["t"], taus, gt)
    return trace.l_gen


def _safe_phase_cell(args):
    try:
        return _phase_cell(args), None
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def phase_sweep(cfg):
    """``L_gen`` over the ``(psi_n, psi_p)`` grid at each ``tau`` checkpoint."""
    p = cfg.parameters
    cells = [(i, j) for i in range(len(p["psi_n"])) for j in range(len(p["psi_p"]))]
    jobs = [(p, cell_seed(cfg.seed, i, j), p["psi_n"][i], p["psi_p"][j]) for i, j in cells]
    out = _map(_safe_phase_cell, jobs)
    grid = np.full((len(p["psi_n"]), len(p["psi_p"]), len(p["tau"])), np.nan)
    failures = []
    for (i, j), (val, err) in zip(cells, out):
        if err is None:
            grid[i, j] = val
        else:
            failures.append({"psi_n": p["psi_n"][i], "psi_p": p["psi_p"][j], "error": err})
            logger.warning("phase cell (psi_n=%g, psi_p=%g) failed: %s", p["psi_n"][i], p["psi_p"][j], err)
    return PhaseGrid(list(p["psi_n"]), list(p["psi_p"]), list(p["tau"]), grid, failures)


def run_phase(cfg):
    pg = phase_sweep(cfg)
    summary = {
        "psi_n": pg.psi_n_values, "psi_p": pg.psi_p_values, "tau": pg.tau_checkpoints,
        "l_gen": pg.l_gen, "failures": pg.failures,
        "smallest_generalizing_psi_n": pg.smallest_generalizing_psi_n(cfg.parameters["threshold"]),
    }
    files = {"phase.csv": (("psi_n", "psi_p", "tau", "l_gen"), list(pg.rows())), "phase.json": summary}
    if pg.failures:
        files["_failed"] = pg.failures
    return files


def _rf_provider(p, X, seed):
    """Random-features scores fit at several times on the training set ``X``.

    Each snapshot uses Monte-Carlo Gram matrices of the training data and the
    closed-form flow at ``rf_tau``.
    """
    d, n = X.shape
    pp = int(round(p["rf_psi_p"] * d))
    W = sample_weights(pp, d, cell_seed(seed, 10))
    snaps = {}
    ds = _dataset(X)
    for i, t in enumerate(p["rf_times"]):
        model = RFModel(W, "tanh")
        g = build_gram_mc(model, ds, t, n_noise=100, seed=cell_seed(seed, 11, i))
        model.A = tr.closed_form_A(p["rf_tau"], g, t)
        snaps[float(t)] = model
    return gen.ScoreProvider.trained_rf(snaps)


def _dataset(X):
    from .features import Dataset

    return Dataset(X, SpectralMeasure.isotropic(1.0), None)


def run_generate(cfg):
    p = cfg.parameters
    d = p["d"]
    mu = gen.gmm_mean(d, p["normalize_mu"])
    X = gen.gmm_sample(mu, p["n_train"], cell_seed(cfg.seed, 0))
    if p["provider"] == "gmm":
        provider = gen.ScoreProvider.exact_gmm(mu)
    elif p["provider"] == "empirical":
        provider = gen.ScoreProvider.empirical(X)
    else:
        provider = _rf_provider(p, X, cfg.seed)
    sc = gen.SamplerConfig(scheme=p["scheme"], n_samples=p["n_samples"], seed=cell_seed(cfg.seed, 1),
                           steps=p["steps"])
    samples = gen.sample(provider, sc)
    report = gen.memorization_fraction(samples, X, p["k"], p["n_bootstrap"], cell_seed(cfg.seed, 2))
    out = report.to_dict()
    out["provider"] = p["provider"]
    out["scheme"] = p["scheme"]
    if p["kl"]:
        out["kl"] = gen.kl_divergence_gmm(provider, mu, p["n_samples"], sc, seed=cell_seed(cfg.seed, 3),
                                          samples=samples)
    header = tuple(f"x{i}" for i in range(d))
    return {"samples.csv": (header, [tuple(col) for col in samples.T]),
            "train.csv": (header, [tuple(col) for col in X.T]),
            "report.json": out}


RUNNERS = {
    "constants": run_constants,
    "spectrum": run_spectrum,
    "train": run_train,
    "collapse": run_collapse,
    "generate": run_generate,
    "phase": run_phase,
}

NUMERICAL_ERRORS = (spec.ConvergenceError, tr.StepSizeError, FloatingPointError, np.linalg.LinAlgError)


def run(config):
    """Execute a config and write its artifacts; returns an exit status.

    Files are only written once the whole run has succeeded, so a failed run
    leaves just ``manifest.json`` and ``error.json`` behind.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "manifest.json", manifest(config))
    try:
        files = RUNNERS[config.kind](config)
    except ConfigError as exc:
        write_json(out / "error.json", {"kind": "config", "message": str(exc)})
        logger.error("%s", exc)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        ctx = {"kind": "numerical", "type": type(exc).__name__, "message": str(exc)}
        for attr in ("residual", "z"):
            if hasattr(exc, attr):
                ctx[attr] = str(getattr(exc, attr))
        write_json(out / "error.json", ctx)
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    failed = files.pop("_failed", None)
    for name, content in files.items():
        if name.endswith(".csv"):
            header, rows = content
            write_csv(out / name, header, rows, f"kind={config.kind}")
        else:
            write_json(out / name, content)
    if failed:
        write_json(out / "error.json", {"kind": "numerical", "failed_cells": failed})
        return EXIT_NUMERICAL
    return EXIT_OK
