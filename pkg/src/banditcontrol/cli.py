"""Config-driven command line: runs, sweeps, and invariant suites.

One JSON document drives everything; every emitted artifact is a pure
function of (config, seed) so reruns are byte-identical.  Exit codes:
0 success, 1 check failure, 2 config error, 3 runtime error.
"""

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from .bco import run_bcoam, run_spherical_baseline
from .checks import run_checks, summary_table
from .control import (
    CostSchedule,
    default_memory,
    make_stabilizable_system,
    run_control,
)
from .geometry import EuclideanBall, OperatorL1Ball
from .harness import (
    ControlComparatorProblem,
    _fixed_policy_costs,
    best_fixed_comparator,
    bound_diagnostics,
    compute_regret,
    scaling_sweep,
)
from .losses import (
    AdversarySchedule,
    BcomInstanceConfig,
    make_synthetic_bcom_instance,
    stack_unary,
)

SCHEMA_VERSION = 1

TRACE_HEADER = "t,loss,comparator_loss,cum_regret,updated,logdet_A"
SWEEP_HEADER = "T,seed,final_regret,arm"


class ConfigError(ValueError):
    """Configuration rejected; the message names the offending field path."""


def _fail(path, message):
    raise ConfigError(f"{path}: {message}")


def _typename(value):
    return type(value).__name__


def _field(doc, key, path, kind, required=False, default=None):
    """Typed fetch with a field-path error message."""
    if key not in doc:
        if required:
            _fail(f"{path}{key}", "required field is missing")
        return default
    value = doc[key]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(f"{path}{key}", f"expected an integer, got {_typename(value)}")
    elif kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path}{key}", f"expected a number, got {_typename(value)}")
        value = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            _fail(f"{path}{key}", f"expected a string, got {_typename(value)}")
    elif kind == "bool":
        if not isinstance(value, bool):
            _fail(f"{path}{key}", f"expected a boolean, got {_typename(value)}")
    elif kind == "dict":
        if not isinstance(value, dict):
            _fail(f"{path}{key}", f"expected an object, got {_typename(value)}")
    elif kind == "list":
        if not isinstance(value, list):
            _fail(f"{path}{key}", f"expected a list, got {_typename(value)}")
    return value


def _no_unknown_keys(doc, allowed, path):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        _fail(f"{path}{unknown[0]}", "unknown field")


def _positive(value, path, strict=True):
    if value is None:
        return None
    if strict and not value > 0:
        _fail(path, f"must be positive, got {value}")
    if not strict and value < 0:
        _fail(path, f"must be nonnegative, got {value}")
    return value


_BCOM_INSTANCE_KEYS = {
    "d": ("int", True), "m": ("int", True), "alpha": ("number", False),
    "beta": ("number", False), "r_h": ("number", False),
    "base_kind": ("str", False), "schedule_kind": ("str", False),
    "schedule_period": ("int", False), "set_radius": ("number", False),
    "offset_scale": ("number", False), "target_scale": ("number", False),
    "well_conditioned": ("bool", False),
    "n": ("int", False), "p": ("int", False),
}

_SWEEP_FAMILY_KEYS = {
    "bcom": {
        "d": "int", "m": "int", "alpha": "number", "beta": "number",
        "r_h": "number", "base_kind": "str", "schedule_kind": "str",
        "schedule_period": "int", "set_radius": "number",
        "offset_scale": "number", "target_scale": "number",
        "well_conditioned": "bool", "n": "int",
        "p": "int", "c_eta": "number", "delta_scale": "number",
        "instance_seed": "int",
    },
    "control": {
        "c_eta": "number", "gamma": "number", "system_seed": "int",
        "r_m": "number", "r_we": "number", "cost_kind": "str",
        "alpha": "number", "beta": "number", "d_x": "int", "d_u": "int",
        "d_y": "int", "kappa": "number", "kappa_sys": "number",
        "w_kind": "str", "w_period": "int", "e_kind": "str",
        "e_period": "int",
    },
}


def _validate_algorithm(doc, path, for_control):
    allowed = {"arm", "eta", "c_eta", "delta", "delta_scale", "metric_scale"}
    if for_control:
        allowed |= {"m", "r_m", "set_kind", "n_truncation"}
        allowed -= {"arm", "delta", "delta_scale"}
    _no_unknown_keys(doc, allowed, path)
    out = {}
    eta = _field(doc, "eta", path, "number")
    c_eta = _field(doc, "c_eta", path, "number")
    if eta is not None and c_eta is not None:
        _fail(f"{path}eta", "give either eta or c_eta, not both")
    _positive(eta, f"{path}eta")
    _positive(c_eta, f"{path}c_eta")
    if eta is None and c_eta is None:
        c_eta = 1.0
    out["eta"], out["c_eta"] = eta, c_eta
    out["metric_scale"] = _positive(
        _field(doc, "metric_scale", path, "number", default=1.0),
        f"{path}metric_scale",
    )
    if for_control:
        m = _field(doc, "m", path, "int")
        if m is not None and m < 1:
            _fail(f"{path}m", f"must be at least 1, got {m}")
        out["m"] = m
        out["r_m"] = _positive(
            _field(doc, "r_m", path, "number", default=1.0), f"{path}r_m"
        )
        out["set_kind"] = _field(doc, "set_kind", path, "str", default="ball")
        if out["set_kind"] not in ("ball", "l1op"):
            _fail(f"{path}set_kind", f"must be ball or l1op, got {out['set_kind']!r}")
        n_trunc = _field(doc, "n_truncation", path, "int")
        if n_trunc is not None and n_trunc < 1:
            _fail(f"{path}n_truncation", f"must be at least 1, got {n_trunc}")
        out["n_truncation"] = n_trunc
    else:
        arm = _field(doc, "arm", path, "str", default="newton")
        if arm not in ("newton", "spherical"):
            _fail(f"{path}arm", f"must be newton or spherical, got {arm!r}")
        out["arm"] = arm
        delta = _field(doc, "delta", path, "number")
        if delta is not None and not 0.0 < delta <= 1.0:
            _fail(f"{path}delta", f"must be in (0, 1], got {delta}")
        out["delta"] = delta
        out["delta_scale"] = _positive(
            _field(doc, "delta_scale", path, "number", default=1.0),
            f"{path}delta_scale",
        )
    return out


def validate_config(doc):
    """Normalize and validate one experiment document; raises ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    version = _field(doc, "schema_version", "", "int", required=True)
    if version != SCHEMA_VERSION:
        _fail("schema_version", f"expected {SCHEMA_VERSION}, got {version}")
    mode = _field(doc, "mode", "", "str", required=True)
    if mode not in ("bcom", "control", "sweep", "check"):
        _fail("mode", f"must be bcom, control, sweep, or check, got {mode!r}")
    common = {"schema_version", "mode", "seed", "out_dir", "timestamp"}
    cfg = {
        "mode": mode,
        "seed": _field(doc, "seed", "", "int", default=0),
        "out_dir": _field(doc, "out_dir", "", "str", default="runs"),
        "timestamp": _field(doc, "timestamp", "", "bool", default=False),
    }
    if cfg["seed"] < 0:
        _fail("seed", f"must be nonnegative, got {cfg['seed']}")

    if mode == "check":
        _no_unknown_keys(doc, common, "")
        return cfg

    if mode == "sweep":
        _no_unknown_keys(doc, common | {"family", "t_grid", "seeds", "arm",
                                        "jobs", "family_kwargs"}, "")
        family = _field(doc, "family", "", "str", required=True)
        if family not in ("bcom", "control"):
            _fail("family", f"must be bcom or control, got {family!r}")
        t_grid = _field(doc, "t_grid", "", "list", required=True)
        if len(t_grid) < 4:
            _fail("t_grid", f"need at least 4 horizons, got {len(t_grid)}")
        for i, t in enumerate(t_grid):
            if isinstance(t, bool) or not isinstance(t, int) or t < 8:
                _fail(f"t_grid[{i}]", f"must be an integer of at least 8, got {t!r}")
            if i and t <= t_grid[i - 1]:
                _fail(f"t_grid[{i}]", "horizons must be strictly increasing")
        seeds = _field(doc, "seeds", "", "int", required=True)
        if seeds < 5:
            _fail("seeds", f"need at least 5 seeds, got {seeds}")
        arm = _field(doc, "arm", "", "str", default="newton")
        if arm not in ("newton", "spherical", "both"):
            _fail("arm", f"must be newton, spherical, or both, got {arm!r}")
        if family == "control" and arm != "newton":
            _fail("arm", "control sweeps support only the newton arm")
        jobs = _field(doc, "jobs", "", "int", default=1)
        if jobs < 1:
            _fail("jobs", f"must be at least 1, got {jobs}")
        fam_kwargs = _field(doc, "family_kwargs", "", "dict", default={})
        allowed = _SWEEP_FAMILY_KEYS[family]
        _no_unknown_keys(fam_kwargs, allowed, "family_kwargs.")
        for key, kind in allowed.items():
            if key in fam_kwargs:
                _field(fam_kwargs, key, "family_kwargs.", kind)
        if "gamma" in fam_kwargs and not 0.0 < float(fam_kwargs["gamma"]) < 1.0:
            _fail("family_kwargs.gamma",
                  f"must be strictly between 0 and 1, got {fam_kwargs['gamma']}")
        for key in ("w_kind", "e_kind", "schedule_kind"):
            if key in fam_kwargs and fam_kwargs[key] not in AdversarySchedule.KINDS:
                _fail(f"family_kwargs.{key}",
                      f"must be one of {sorted(AdversarySchedule.KINDS)}, "
                      f"got {fam_kwargs[key]!r}")
        for key in ("base_kind", "cost_kind"):
            if key in fam_kwargs and fam_kwargs[key] not in ("quadratic",
                                                             "pseudo_huber"):
                _fail(f"family_kwargs.{key}",
                      f"must be quadratic or pseudo_huber, "
                      f"got {fam_kwargs[key]!r}")
        if family == "bcom":
            for key in ("d", "m"):
                if key not in fam_kwargs:
                    _fail(f"family_kwargs.{key}", "required for bcom sweeps")
        cfg.update(family=family, t_grid=[int(t) for t in t_grid], seeds=seeds,
                   arm=arm, jobs=jobs, family_kwargs=dict(fam_kwargs))
        return cfg

    # single runs share the horizon/algorithm blocks
    extra = {"horizon", "instance", "algorithm"}
    if mode == "control":
        extra |= {"cost", "noise"}
    _no_unknown_keys(doc, common | extra, "")
    horizon = _field(doc, "horizon", "", "int", required=True)
    if horizon < 4:
        _fail("horizon", f"must be at least 4, got {horizon}")
    cfg["horizon"] = horizon
    instance = _field(doc, "instance", "", "dict", required=True)

    if mode == "bcom":
        _no_unknown_keys(instance, _BCOM_INSTANCE_KEYS, "instance.")
        inst_kwargs = {}
        for key, (kind, required) in _BCOM_INSTANCE_KEYS.items():
            value = _field(instance, key, "instance.", kind, required=required)
            if value is not None:
                inst_kwargs[key] = value
        for key in ("d", "m", "n", "p", "schedule_period"):
            if key in inst_kwargs and inst_kwargs[key] < 1:
                _fail(f"instance.{key}", f"must be at least 1, got {inst_kwargs[key]}")
        if inst_kwargs["m"] > horizon:
            _fail("instance.m", f"memory {inst_kwargs['m']} exceeds horizon {horizon}")
        cfg["instance"] = inst_kwargs
        cfg["algorithm"] = _validate_algorithm(
            _field(doc, "algorithm", "", "dict", default={}), "algorithm.", False
        )
        return cfg

    _no_unknown_keys(
        instance,
        {"d_x", "d_u", "d_y", "kappa", "gamma", "kappa_sys", "system_seed"},
        "instance.",
    )
    inst = {
        "d_x": _field(instance, "d_x", "instance.", "int", required=True),
        "d_u": _field(instance, "d_u", "instance.", "int", required=True),
        "d_y": _field(instance, "d_y", "instance.", "int", required=True),
        "kappa": _field(instance, "kappa", "instance.", "number", default=2.0),
        "gamma": _field(instance, "gamma", "instance.", "number", required=True),
        "kappa_sys": _field(instance, "kappa_sys", "instance.", "number",
                            default=1.5),
        "system_seed": _field(instance, "system_seed", "instance.", "int",
                              default=0),
    }
    for key in ("d_x", "d_u", "d_y"):
        if inst[key] < 1:
            _fail(f"instance.{key}", f"must be at least 1, got {inst[key]}")
    if not 0.0 < inst["gamma"] < 1.0:
        _fail("instance.gamma",
              f"must be strictly between 0 and 1, got {inst['gamma']}")
    for key in ("kappa", "kappa_sys"):
        if not inst[key] >= 1.0:
            _fail(f"instance.{key}", f"must be at least 1, got {inst[key]}")
    if inst["system_seed"] < 0:
        _fail("instance.system_seed", "must be nonnegative")
    cfg["instance"] = inst

    cost_doc = _field(doc, "cost", "", "dict", default={})
    _no_unknown_keys(cost_doc, {"kind", "alpha", "beta", "period"}, "cost.")
    cost = {
        "kind": _field(cost_doc, "kind", "cost.", "str", default="quadratic"),
        "alpha": _field(cost_doc, "alpha", "cost.", "number", default=0.5),
        "beta": _field(cost_doc, "beta", "cost.", "number", default=2.0),
        "period": _field(cost_doc, "period", "cost.", "int", default=97),
    }
    if cost["kind"] not in ("quadratic", "pseudo_huber"):
        _fail("cost.kind", f"must be quadratic or pseudo_huber, got {cost['kind']!r}")
    if not 0.0 < cost["alpha"] <= 1.0:
        _fail("cost.alpha", f"must be in (0, 1], got {cost['alpha']}")
    if not cost["beta"] >= 1.0:
        _fail("cost.beta", f"must be at least 1, got {cost['beta']}")
    if cost["period"] < 1:
        _fail("cost.period", f"must be at least 1, got {cost['period']}")
    cfg["cost"] = cost

    noise_doc = _field(doc, "noise", "", "dict", default={})
    _no_unknown_keys(noise_doc,
                     {"w_kind", "w_radius", "w_period", "e_kind", "e_radius",
                      "e_period"}, "noise.")
    noise = {
        "w_kind": _field(noise_doc, "w_kind", "noise.", "str",
                         default="sinusoidal"),
        "w_radius": _field(noise_doc, "w_radius", "noise.", "number",
                           default=0.5),
        "w_period": _field(noise_doc, "w_period", "noise.", "int", default=61),
        "e_kind": _field(noise_doc, "e_kind", "noise.", "str",
                         default="seeded_bounded"),
        "e_radius": _field(noise_doc, "e_radius", "noise.", "number",
                           default=0.5),
        "e_period": _field(noise_doc, "e_period", "noise.", "int", default=53),
    }
    for key in ("w_kind", "e_kind"):
        if noise[key] not in AdversarySchedule.KINDS:
            _fail(f"noise.{key}",
                  f"must be one of {sorted(AdversarySchedule.KINDS)}, got {noise[key]!r}")
    for key in ("w_radius", "e_radius"):
        _positive(noise[key], f"noise.{key}", strict=False)
    cfg["noise"] = noise
    cfg["algorithm"] = _validate_algorithm(
        _field(doc, "algorithm", "", "dict", default={}), "algorithm.", True
    )
    return cfg


def config_hash(doc):
    """Stable digest of the canonicalized JSON document."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                       ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    return doc


# ---------------------------------------------------------------------------
# CSV / JSON emission

def _g17(x):
    return "%.17g" % float(x)


def emit_csv(records, path, timestamp=False):
    """Write one CSV artifact; bytes depend only on the records.

    ``records`` is {"kind": "trace"|"sweep", "rows": [...]}; rows are dicts
    keyed by the header columns.  A timestamp comment is prepended only on
    request so default artifacts stay byte-identical across reruns.
    """
    kind = records["kind"]
    rows = records["rows"]
    lines = []
    if timestamp:
        lines.append(f"# generated {datetime.now(timezone.utc).isoformat()}")
    if kind == "trace":
        lines.append(TRACE_HEADER)
        for r in rows:
            lines.append(
                f"{int(r['t'])},{_g17(r['loss'])},{_g17(r['comparator_loss'])},"
                f"{_g17(r['cum_regret'])},{1 if r['updated'] else 0},"
                f"{_g17(r['logdet_A'])}"
            )
    elif kind == "sweep":
        lines.append(SWEEP_HEADER)
        for r in rows:
            lines.append(
                f"{int(r['T'])},{int(r['seed'])},{_g17(r['final_regret'])},"
                f"{r['arm']}"
            )
    else:
        raise ValueError(f"unknown record kind {kind!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def parse_trace_csv(path):
    """Re-ingest a trace CSV into column arrays (comments skipped)."""
    columns = {name: [] for name in TRACE_HEADER.split(",")}
    with open(path, "r", encoding="utf-8") as fh:
        rows = [ln for ln in fh.read().splitlines() if not ln.startswith("#")]
    if rows[0] != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {rows[0]!r}")
    for ln in rows[1:]:
        bits = ln.split(",")
        for name, bit in zip(columns, bits):
            columns[name].append(float(bit))
    return {name: np.array(vals) for name, vals in columns.items()}


def _pyify(obj):
    if isinstance(obj, dict):
        return {k: _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_pyify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return None if math.isnan(value) else value
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def write_summary(summary, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_pyify(summary), sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# run paths

def _resolve_eta(algorithm, horizon):
    if algorithm.get("eta"):
        return float(algorithm["eta"])
    return float(algorithm["c_eta"]) / math.sqrt(horizon)


def _trace_rows(incurred, comp_series, record, updated, logdets):
    rows = []
    for t in range(1, len(incurred) + 1):
        rows.append({
            "t": t,
            "loss": float(incurred[t - 1]),
            "comparator_loss": float(comp_series[t - 1]),
            "cum_regret": float(record.cum_regret[t - 1]),
            "updated": bool(updated[t - 1]),
            "logdet_A": float(logdets[t - 1]),
        })
    return rows


def run_bcom_config(cfg, digest):
    horizon, seed = cfg["horizon"], cfg["seed"]
    alg = cfg["algorithm"]
    inst_cfg = BcomInstanceConfig(horizon=horizon, seed=seed, **cfg["instance"])
    inst = make_synthetic_bcom_instance(inst_cfg)
    m = inst_cfg.m
    eta = _resolve_eta(alg, horizon)
    certs = inst.certificates
    if alg["arm"] == "newton":
        run = run_bcoam(inst.losses, inst.set_, eta=eta, m=m,
                        alpha=certs["alpha"], horizon=horizon, seed=seed,
                        metric_scale=alg["metric_scale"])
    else:
        delta = alg["delta"] or min(1.0, alg["delta_scale"] * horizon ** -0.25)
        run = run_spherical_baseline(inst.losses, inst.set_, eta=eta,
                                     delta=delta, m=m, horizon=horizon,
                                     seed=seed)
    z_star, comp_total = best_fixed_comparator(inst.losses, inst.set_, seed=seed)
    comp_series = np.zeros(horizon)
    comp_series[m - 1:] = stack_unary(inst.losses[m - 1:]).per_step_values(z_star)
    record = compute_regret(
        run.incurred, comp_series, start=m, comparator_point=z_star, seed=seed,
        config_hash=digest,
        certificates={
            "alpha": certs["alpha"], "beta": certs["beta"],
            "g_unary": math.sqrt(m) * certs["g_f"],
            "diameter": certs["diameter"], "r_h": certs["r_h"],
            "kappa_proxy": certs["kappa_proxy"],
        },
        metadata={"eta": eta, "m": m, "d": inst_cfg.d},
    )
    diagnostics = bound_diagnostics(record, updated=run.updated)
    rows = _trace_rows(run.incurred, comp_series, record, run.updated,
                       run.logdets)
    summary = {
        "mode": "bcom",
        "config_hash": digest,
        "seed": seed,
        "horizon": horizon,
        "arm": alg["arm"],
        "eta": eta,
        "m": m,
        "d": inst_cfg.d,
        "final_regret": record.final_regret,
        "comparator_value": comp_total,
        "comparator_point": list(map(float, z_star)),
        "update_count": int(np.sum(run.updated)),
        "certificates": record.certificates,
        "diagnostics": diagnostics,
    }
    return rows, summary


def run_control_config(cfg, digest):
    horizon, seed = cfg["horizon"], cfg["seed"]
    inst_doc, alg = cfg["instance"], cfg["algorithm"]
    instance, controller = make_stabilizable_system(
        inst_doc["d_x"], inst_doc["d_u"], inst_doc["d_y"],
        kappa=inst_doc["kappa"], gamma=inst_doc["gamma"],
        kappa_sys=inst_doc["kappa_sys"], seed=inst_doc["system_seed"],
    )
    cost = CostSchedule(cfg["cost"]["kind"],
                        dim=inst_doc["d_y"] + inst_doc["d_u"],
                        alpha=cfg["cost"]["alpha"], beta=cfg["cost"]["beta"],
                        seed=1000 + seed, period=cfg["cost"]["period"])
    noise = cfg["noise"]
    w_sched = AdversarySchedule(noise["w_kind"], dim=inst_doc["d_x"],
                                seed=2000 + seed, radius=noise["w_radius"],
                                period=noise["w_period"])
    e_sched = AdversarySchedule(noise["e_kind"], dim=inst_doc["d_y"],
                                seed=3000 + seed, radius=noise["e_radius"],
                                period=noise["e_period"])
    m = alg["m"] or default_memory(horizon, inst_doc["gamma"])
    eta = _resolve_eta(alg, horizon)
    run = run_control(instance, controller, cost, w_sched, e_sched, m=m,
                      r_m=alg["r_m"], eta=eta, horizon=horizon, seed=seed,
                      set_kind=alg["set_kind"],
                      metric_scale=alg["metric_scale"],
                      n_truncation=alg["n_truncation"])
    meta = run.metadata
    problem = ControlComparatorProblem(
        instance=instance, controller=controller, cost=cost,
        w_schedule=w_sched, e_schedule=e_sched, m=m, horizon=horizon,
    )
    d = meta["d"]
    if alg["set_kind"] == "ball":
        set_ = EuclideanBall(np.zeros(d), meta["set_radius"])
    else:
        set_ = OperatorL1Ball(m, inst_doc["d_u"], inst_doc["d_y"], alg["r_m"])
    w_star, comp_total = best_fixed_comparator(problem, set_, seed=seed)
    comp_series = _fixed_policy_costs(problem, w_star)
    record = compute_regret(
        run.incurred, comp_series, start=1, comparator_point=w_star, seed=seed,
        config_hash=digest,
        certificates={
            "alpha": cost.alpha, "beta": cost.beta,
            "g_unary": meta["g_unary_cert"], "diameter": set_.diameter(),
            "r_h": meta["r_h_measured"], "kappa_proxy": meta["kappa_proxy"],
        },
        metadata={"eta": eta, "m": m, "d": d},
    )
    diagnostics = bound_diagnostics(record, updated=run.updated)
    rows = _trace_rows(run.incurred, comp_series, record, run.updated,
                       run.logdets)
    summary = {
        "mode": "control",
        "config_hash": digest,
        "seed": seed,
        "horizon": horizon,
        "eta": eta,
        "m": m,
        "d": d,
        "final_regret": record.final_regret,
        "comparator_value": comp_total,
        "comparator_point": list(map(float, w_star)),
        "update_count": int(np.sum(run.updated)),
        "discrepancy_total": meta["discrepancy_total"],
        "reduction_slack": meta["reduction_slack"],
        "discrepancy_within_slack":
            meta["discrepancy_total"] <= meta["reduction_slack"],
        "l1op_max": meta["l1op_max"],
        "pair_norm_max": meta["pair_norm_max"],
        "certified_radius": meta["certified_radius"],
        "tail_bound": meta["tail_bound"],
        "certificates": record.certificates,
        "diagnostics": diagnostics,
    }
    return rows, summary


def run_sweep_config(cfg, digest):
    sweep = scaling_sweep(cfg["family"], cfg["t_grid"], cfg["seeds"],
                          arm=cfg["arm"], jobs=cfg["jobs"],
                          **cfg["family_kwargs"])
    rows = [
        {"T": p["t"], "seed": p["seed"], "final_regret": p["final_regret"],
         "arm": p["arm"]}
        for p in sweep.points
    ]
    fits = {}
    for arm, fit in sweep.fits.items():
        fits[arm] = {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "slope_ci": fit.slope_ci,
            "t_grid": list(map(float, fit.t_grid)),
            "means": list(map(float, fit.means)),
            "stderrs": list(map(float, fit.stderrs)),
        }
    summary = {
        "mode": "sweep",
        "config_hash": digest,
        "family": cfg["family"],
        "seed": cfg["seed"],
        "t_grid": cfg["t_grid"],
        "seeds": cfg["seeds"],
        "arm": cfg["arm"],
        "points": len(rows),
        "fits": fits,
    }
    if cfg["family"] == "control":
        summary["discrepancy_within_slack"] = all(
            p["discrepancy_total"] <= p["reduction_slack"] for p in sweep.points
        )
    return rows, summary


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="banditcontrol",
        description="Bandit control and BCO-with-memory experiment runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        if needs_out:
            p.add_argument("--out", default=None,
                           help="output directory (overrides config out_dir)")

    bcom = sub.add_parser("bcom", help="BCO-with-memory experiments")
    bcom_sub = bcom.add_subparsers(dest="action", required=True)
    add_common(bcom_sub.add_parser("run", help="single learner run"))

    control = sub.add_parser("control", help="bandit control experiments")
    control_sub = control.add_subparsers(dest="action", required=True)
    add_common(control_sub.add_parser("run", help="single control run"))

    sweep = sub.add_parser("sweep", help="scaling sweep over a horizon grid")
    add_common(sweep)
    sweep.add_argument("--seeds", type=int, default=None,
                       help="seeds per grid point (overrides config)")
    sweep.add_argument("--jobs", type=int, default=None,
                       help="parallel worker processes (overrides config)")

    check = sub.add_parser("check", help="run all module invariant suites")
    add_common(check, needs_out=False)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if exc.code else 0

    try:
        doc = load_config(args.config)
        cfg = validate_config(doc)
        expected_mode = args.command
        if cfg["mode"] != expected_mode:
            _fail("mode", f"config says {cfg['mode']!r} but the "
                          f"{expected_mode!r} subcommand was invoked")
        if getattr(args, "seeds", None) is not None:
            if args.seeds < 5:
                _fail("seeds", f"need at least 5 seeds, got {args.seeds}")
            cfg["seeds"] = args.seeds
        if getattr(args, "jobs", None) is not None:
            if args.jobs < 1:
                _fail("jobs", f"must be at least 1, got {args.jobs}")
            cfg["jobs"] = args.jobs
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    digest = config_hash(doc)

    if cfg["mode"] == "check":
        results = run_checks(seed=cfg["seed"])
        print(f"config {digest[:12]} mode check seed {cfg['seed']}")
        print(summary_table(results))
        return 0 if all(r.ok for r in results) else 1

    out_dir = getattr(args, "out", None) or cfg["out_dir"]
    try:
        os.makedirs(out_dir, exist_ok=True)
        if cfg["mode"] == "bcom":
            rows, summary = run_bcom_config(cfg, digest)
            csv_path = emit_csv({"kind": "trace", "rows": rows},
                                os.path.join(out_dir, "trace.csv"),
                                timestamp=cfg["timestamp"])
        elif cfg["mode"] == "control":
            rows, summary = run_control_config(cfg, digest)
            csv_path = emit_csv({"kind": "trace", "rows": rows},
                                os.path.join(out_dir, "trace.csv"),
                                timestamp=cfg["timestamp"])
        else:
            rows, summary = run_sweep_config(cfg, digest)
            csv_path = emit_csv({"kind": "sweep", "rows": rows},
                                os.path.join(out_dir, "sweep.csv"),
                                timestamp=cfg["timestamp"])
        summary_path = write_summary(summary, os.path.join(out_dir,
                                                           "summary.json"))
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3

    print(f"config {digest[:12]} mode {cfg['mode']} seed {cfg['seed']}")
    if cfg["mode"] == "sweep":
        for arm, fit in summary["fits"].items():
            print(f"  {arm}: slope {fit['slope']:.4f} "
                  f"(ci +/- {fit['slope_ci']:.4f})")
    else:
        print(f"  final regret {summary['final_regret']:.6g}; "
              f"bound ok: {summary['diagnostics']['ok']}")
    print(f"  wrote {csv_path} and {summary_path}")
    return 0


def entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
