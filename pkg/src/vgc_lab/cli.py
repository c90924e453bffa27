"""Command-line front end: ``vgc-lab run | sweep | check``.

Exit codes: 0 success, 2 configuration error, 3 runtime or solver error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .checks import MUTATIONS, run_checks
from .errors import ConfigError, VgcLabError
from .experiments import SWEEP_AXES, Scenario, run_replications, sweep_scenarios
from .policies import CLASS_IDS, SAA, PolicyGrid

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

HEADER = [
    "scenario", "n", "policy_class", "theta_id", "estimator", "h", "mean", "bias",
    "variance", "std_err", "replications", "seed", "runtime_ms",
]

PRESETS = {
    "toy": dict(kind="toy", n=100, s_samples=3),
    "coupled_lp": dict(
        kind="coupled_lp", n=800, s_samples=None, h_rule="n^-1/4",
        estimators=("in_sample", "oracle", "vgc_cf1", "vgc_cf2", "stein"),
    ),
    "drone": dict(
        kind="drone", n=280, s_samples=5, params={"n_depots": 6, "budget": 2},
        estimators=("in_sample", "oracle", "vgc_cf2", "cv", "stein"),
    ),
}

CONFIG_KEYS = {"scenario", "policy", "estimators", "h", "draws", "folds", "replications", "seed", "workers", "out"}
SCENARIO_KEYS = {"name", "kind", "n", "s_samples", "params", "nu_scale"}
POLICY_KEYS = {"class", "tau", "beta", "thetas", "a_min"}


def _fmt(v) -> str:
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    return f"{float(v):.9g}"


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Parse a JSON config file; syntax errors report line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _field(name: str, msg: str) -> ConfigError:
    return ConfigError(f"field '{name}': {msg}")


def _unknown(section: str, given: dict, allowed: set) -> None:
    extra = sorted(set(given) - allowed)
    if extra:
        raise _field(f"{section}{extra[0]}", f"unknown key; expected one of {sorted(allowed)}")


def _int(cfg, key, minimum=None):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise _field(key, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise _field(key, f"must be at least {minimum}, got {v}")
    return v


def _policy(spec) -> PolicyGrid:
    if spec is None:
        return PolicyGrid(SAA)
    if not isinstance(spec, dict):
        raise _field("policy", "expected an object")
    _unknown("policy.", spec, POLICY_KEYS)
    cls = spec.get("class", SAA)
    if cls not in CLASS_IDS:
        raise _field("policy.class", f"unknown class {cls!r}; expected one of {list(CLASS_IDS)}")
    a_min = float(spec.get("a_min", 1e-8))
    try:
        if "thetas" in spec:
            return PolicyGrid(cls, tuple(tuple(t) for t in spec["thetas"]), a_min)
        return PolicyGrid.product(cls, spec.get("tau"), spec.get("beta"), a_min)
    except (TypeError, ValueError) as exc:
        raise _field("policy", str(exc)) from exc


def scenario_from_config(cfg: dict, seed=None, replications=None) -> Scenario:
    """Build a scenario; ``seed`` and ``replications`` override the config."""
    _unknown("", cfg, CONFIG_KEYS)
    if "scenario" not in cfg:
        raise _field("scenario", "missing")
    sc = cfg["scenario"]
    if isinstance(sc, str):
        if sc not in PRESETS:
            raise _field("scenario", f"unknown preset {sc!r}; expected one of {sorted(PRESETS)}")
        base, name = dict(PRESETS[sc]), sc
    elif isinstance(sc, dict):
        _unknown("scenario.", sc, SCENARIO_KEYS)
        kind = sc.get("kind", sc.get("name"))
        if kind not in PRESETS:
            raise _field("scenario.kind", f"unknown kind {kind!r}; expected one of {sorted(PRESETS)}")
        base = dict(PRESETS[kind])
        base.update({k: v for k, v in sc.items() if k != "name"})
        name = sc.get("name", kind)
    else:
        raise _field("scenario", "expected a preset name or an object")
    if seed is None:
        if "seed" not in cfg:
            raise _field("seed", "missing (pass --seed or set it in the config)")
        seed = _int(cfg, "seed", 0)
    if replications is None:
        replications = _int(cfg, "replications", 1) if "replications" in cfg else None
    kw = dict(base, name=name, seed=int(seed), policy=_policy(cfg.get("policy")))
    if replications is not None:
        kw["replications"] = int(replications)
    if "estimators" in cfg:
        est = cfg["estimators"]
        if not isinstance(est, list) or not all(isinstance(e, str) for e in est) or not est:
            raise _field("estimators", "expected a non-empty list of names")
        kw["estimators"] = tuple(est)
    if "h" in cfg:
        h = cfg["h"]
        if isinstance(h, str):
            kw["h_rule"], kw["h"] = h, None
        elif isinstance(h, (int, float)) and not isinstance(h, bool):
            kw["h"] = float(h)
        else:
            raise _field("h", f"expected a number or a rule name, got {h!r}")
    if "draws" in cfg:
        kw["draws"] = _int(cfg, "draws", 1)
    if "folds" in cfg:
        kw["folds"] = _int(cfg, "folds", 2)
    try:
        return Scenario(**kw)
    except TypeError as exc:
        raise ConfigError(f"field 'scenario': {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(_label(str(exc))) from exc


_FIELD_BY_WORD = {
    "seed": "seed",
    "replications": "replications",
    "folds": "folds",
    "cross-validation": "folds",
    "step": "h",
    "n": "scenario.n",
    "nu_scale": "scenario.nu_scale",
}


def _label(msg: str) -> str:
    """Prefix a scenario validation message with the config field it concerns."""
    words = msg.split()
    if msg.startswith("unknown estimator"):
        return f"field 'estimators': {msg}"
    if words and words[0] in _FIELD_BY_WORD:
        return f"field '{_FIELD_BY_WORD[words[0]]}': {msg}"
    return msg


def _workers(flag, cfg) -> int:
    if flag is not None:
        w = flag
    elif os.environ.get("VGC_LAB_WORKERS"):
        try:
            w = int(os.environ["VGC_LAB_WORKERS"])
        except ValueError as exc:
            raise ConfigError(f"VGC_LAB_WORKERS must be an integer, got {os.environ['VGC_LAB_WORKERS']!r}") from exc
    else:
        w = cfg.get("workers", 1)
    if isinstance(w, bool) or not isinstance(w, int) or w < 1:
        raise _field("workers", f"must be a positive integer, got {w!r}")
    return w


def _output(flag, cfg) -> Path:
    out = flag or cfg.get("out")
    if not out:
        raise _field("out", "missing (pass --out or set it in the config)")
    path = Path(out)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK) or (path.exists() and not os.access(path, os.W_OK)):
        raise ConfigError(f"output path {out} is not writable")
    return path


# ---------------------------------------------------------------------------
# CSV


def result_rows(result, timing: bool = False) -> list[list]:
    sc = result.scenario
    runtime = result.runtime_ms if timing else 0
    rows = []
    for (p, est) in result.stats.keys():
        st = result.stats[(p, est)]
        rows.append([
            sc.name, sc.n, result.policies[p].class_id, p, est, result.h, st.mean, st.bias,
            st.variance, st.std_err, st.replications, sc.seed, runtime,
        ])
    rows.sort(key=lambda r: (r[0], r[4], r[3]))
    return rows


def write_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg, args.seed, args.replications)
    workers = _workers(args.workers, cfg)
    out = _output(args.out, cfg)
    result = run_replications(scenario, workers)
    write_csv(out, HEADER, result_rows(result, args.timing))
    return EXIT_OK


def parse_grid(text: str) -> list[float]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise _field("grid", "empty grid")
    try:
        return [float(s) for s in items]
    except ValueError as exc:
        raise _field("grid", f"not a comma-separated list of numbers: {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    scenario = scenario_from_config(cfg, args.seed, args.replications)
    workers = _workers(args.workers, cfg)
    out = _output(args.out, cfg)
    grid = parse_grid(args.grid)
    rows = []
    for pos, (value, sc) in enumerate(zip(grid, sweep_scenarios(scenario, args.axis, grid))):
        result = run_replications(sc, workers)
        rows.extend((row + [value], pos) for row in result_rows(result, args.timing))
    rows.sort(key=lambda item: (item[0][0], item[0][4], item[0][3], item[1]))
    write_csv(out, HEADER + ["axis_value"], [r for r, _ in rows])
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(args.cases, args.seed, args.mutate)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    total = sum(r.cases for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} properties passed over {total} cases")
    return EXIT_OK if not failed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgc-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, help="worker threads (default: $VGC_LAB_WORKERS or 1)")
        p.add_argument("--replications", type=int, help="override the configured replication count")
        p.add_argument("--timing", action="store_true", help="record wall-clock runtime in runtime_ms")

    common(sub.add_parser("run", help="run one replication study"))
    sw = sub.add_parser("sweep", help="repeat a study over a parameter grid")
    common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--grid", required=True, help="comma-separated grid values")
    ck = sub.add_parser("check", help="run the randomized invariant suite")
    ck.add_argument("--cases", type=int, default=1000)
    ck.add_argument("--seed", type=int, default=0)
    ck.add_argument("--mutate", choices=sorted(MUTATIONS), help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    handler = {"run": cmd_run, "sweep": cmd_sweep, "check": cmd_check}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VgcLabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
