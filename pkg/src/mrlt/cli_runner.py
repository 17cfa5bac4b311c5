"""Batch front-end: config parsing, run orchestration, reference runs, output files."""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diagnostics import RunMetrics, l1_error, self_convergence_order
from .lt_scheduler import ClockError, run_lt
from .models import InadmissibleStateError, ModelSpec, UnknownProblemError, get_problem
from .mr_analysis import project_dense
from .stepping import SimulationResult, initial_tree, run_mr, run_uniform, two_block_tree
from .time_schemes import SchemeKind, TimeStepError
from .tree_mesh import GradedTree, MeshError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (InadmissibleStateError, TimeStepError, ClockError, FloatingPointError, MeshError)


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set when the problem has a source line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    problem: str
    scheme: SchemeKind
    max_level: int
    epsilon: float
    cfl: float
    tend: float
    dt: float | None = None
    out: Path = Path("out")
    snapshot_every: int = 0
    reference_level: int | None = None
    cache_dir: Path | None = None
    params: dict[str, float] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        checks = [
            ("max_level", self.max_level >= 1, "must be at least 1"),
            ("epsilon", self.epsilon >= 0, "must be nonnegative"),
            ("cfl", self.cfl > 0, "must be positive"),
            ("tend", self.tend > 0, "must be positive"),
            ("dt", self.dt is None or self.dt > 0, "must be positive"),
            ("snapshot_every", self.snapshot_every >= 0, "must be nonnegative"),
            (
                "reference_level",
                self.reference_level is None or self.reference_level >= self.max_level,
                "must not be below max_level",
            ),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg} (got {getattr(self, name)})")
        return self

    def model(self) -> ModelSpec:
        return get_problem(self.problem, self.params)


_RUN_KEYS: dict[str, Callable] = {
    "problem": str,
    "scheme": SchemeKind.parse,
    "max_level": int,
    "epsilon": float,
    "cfl": float,
    "tend": float,
    "dt": float,
    "out": Path,
    "snapshot_every": int,
    "reference_level": int,
    "cache_dir": Path,
}
_ALIASES = {"L": "max_level", "sigma": "cfl", "t_f": "tend", "eps": "epsilon"}
_SECTIONS = ("run", "params")


def _defaults(problem: str, params: dict) -> dict:
    try:
        model = get_problem(problem, params)
    except UnknownProblemError as exc:
        raise ConfigError(str(exc.args[0])) from None
    return dict(model.defaults)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines grouped under ``[run]`` and ``[params]``.

    Lines before any header belong to ``[run]``.  ``#`` and ``;`` start
    comments.  Missing run keys are filled from the problem's defaults.
    """
    section = "run"
    raw: dict[str, tuple[object, int]] = {}
    params: dict[str, tuple[float, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if section == "params":
            try:
                params[key] = (float(value), lineno)
            except ValueError:
                raise ConfigError(f"parameter {key!r} needs a number, got {value!r}", lineno) from None
            continue
        key = _ALIASES.get(key, key)
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            raw[key] = (_RUN_KEYS[key](value), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None

    if "problem" not in raw:
        raise ConfigError("missing required key 'problem'")
    problem = raw["problem"][0]
    plain_params = {k: v for k, (v, _) in params.items()}
    try:
        defaults = _defaults(problem, plain_params)
    except ValueError as exc:
        bad = next((ln for k, (_, ln) in params.items() if repr(k) in str(exc)), None)
        raise ConfigError(str(exc), bad) from None
    values = {k: v for k, (v, _) in raw.items()}
    return build_config(problem, values, defaults, plain_params)


def build_config(problem: str, values: dict, defaults: dict | None = None, params: dict | None = None) -> RunConfig:
    defaults = _defaults(problem, params or {}) if defaults is None else defaults
    # a reference run is expensive, so it only happens on request
    merged = {k: v for k, v in defaults.items() if k in _RUN_KEYS and k != "reference_level"}
    merged.update({k: v for k, v in values.items() if v is not None})
    scheme = merged.get("scheme", "mrlt-nerk2")
    cfg = RunConfig(
        problem=problem,
        scheme=scheme if isinstance(scheme, SchemeKind) else SchemeKind.parse(scheme),
        max_level=int(merged["max_level"]),
        epsilon=float(merged["epsilon"]),
        cfl=float(merged["cfl"]),
        tend=float(merged["tend"]),
        dt=None if merged.get("dt") is None else float(merged["dt"]),
        out=Path(merged.get("out", "out")),
        snapshot_every=int(merged.get("snapshot_every", 0)),
        reference_level=None if merged.get("reference_level") is None else int(merged["reference_level"]),
        cache_dir=None if merged.get("cache_dir") is None else Path(merged["cache_dir"]),
        params=dict(params or {}),
    )
    return cfg.validate()


# ---------------------------------------------------------------------------
# output


def _uniform_columns(q: np.ndarray, model: ModelSpec, level: int):
    n = 2**level
    flat = np.arange(n**model.d)
    coords = np.stack(np.unravel_index(flat, (n,) * model.d))
    dx = np.array([(b - a) / n for a, b in model.bounds])
    centers = np.stack([model.bounds[a][0] + (coords[a] + 0.5) * dx[a] for a in range(model.d)])
    return np.full(flat.size, level), coords, centers, np.full(flat.size, dx[0]), q.reshape(model.ncomp, -1)


def _tree_columns(tree: GradedTree, slot: str = "q_new"):
    levels, coords, centers, sizes, values = [], [], [], [], []
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if not leaves.size:
            continue
        levels.append(np.full(leaves.size, k))
        coords.append(np.stack(np.unravel_index(leaves, tree.shape(k))))
        centers.append(tree.centers(k, leaves))
        sizes.append(np.full(leaves.size, tree.dx(k)[0]))
        values.append(tree.data[slot][k][:, leaves])
    cat = lambda parts: np.concatenate(parts, axis=-1)
    return cat(levels), cat(coords), cat(centers), cat(sizes), cat(values)


def write_snapshot(path: Path, model: ModelSpec, scheme: SchemeKind, time: float, iteration: int, state) -> None:
    """One record per leaf: level, integer coordinates, center, size, variables."""
    if isinstance(state, GradedTree):
        levels, coords, centers, sizes, values = _tree_columns(state)
    else:
        level = int(round(math.log2(state.shape[1])))
        levels, coords, centers, sizes, values = _uniform_columns(state, model, level)
    axes = "xyz"[: model.d]
    names = ["level"] + [f"i{a}" for a in axes] + list(axes) + ["size"] + list(model.variables)
    table = np.column_stack([levels, coords.T, centers.T, sizes, values.T])
    fmt = ["%d"] * (1 + model.d) + ["%.17g"] * (model.d + 1 + model.ncomp)
    with open(path, "w") as fh:
        fh.write("# mrlt snapshot\n")
        fh.write(f"# problem: {model.name}\n# scheme: {scheme.value}\n")
        fh.write(f"# time: {time:.17g}\n# iteration: {iteration}\n# cells: {table.shape[0]}\n")
        fh.write("# columns: " + " ".join(names) + "\n")
        np.savetxt(fh, table, fmt=fmt)


def write_grid(path: Path, tree: GradedTree | None, max_level: int, d: int) -> None:
    with open(path, "w") as fh:
        fh.write("# mrlt grid\n# columns: level " + " ".join(f"i{a}" for a in "xyz"[:d]) + " kind\n")
        if tree is None:
            fh.write(f"# uniform level {max_level}\n")
            return
        for k in range(tree.L + 1):
            topo = tree.topology(k)
            for kind, flat in (("leaf", topo.leaves), ("virtual", topo.virtual)):
                for f in flat:
                    c = np.unravel_index(int(f), tree.shape(k))
                    fh.write(f"{k} " + " ".join(str(int(x)) for x in c) + f" {kind}\n")


def write_metrics(path: Path, config: RunConfig, result: SimulationResult, metrics: RunMetrics) -> None:
    lines = [
        "# mrlt metrics",
        f"problem = {config.problem}",
        f"scheme = {config.scheme.value}",
        f"max_level = {config.max_level}",
        f"epsilon = {config.epsilon:.17g}",
        f"cfl = {config.cfl:.17g}",
        f"tend = {config.tend:.17g}",
        f"time = {result.time:.17g}",
        f"steps = {result.steps}",
        f"wall_time = {result.wall_time:.6f}",
        f"compression_mean = {metrics.compression_mean:.6f}",
        f"compression_final = {metrics.compression_final:.6f}",
        f"leaves_final = {metrics.leaf_counts[-1] if metrics.leaf_counts else 0}",
    ]
    if config.reference_level is not None:
        lines.append(f"reference_level = {config.reference_level}")
    for var, err in metrics.e_l1.items():
        lines.append(f"e_l1.{var} = {err:.17g}")
    lines.append("")
    lines.append("[records]")
    lines.append("# record time leaves percent")
    for i, (t, n, p) in enumerate(zip(result.times, result.leaf_count, result.leaf_percent), start=1):
        lines.append(f"{i} {t:.17g} {n} {p:.6f}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# references


def project_to_level(field_: np.ndarray, level: int) -> np.ndarray:
    """Average a uniform ``(ncomp, n, ...)`` field down to ``level``."""
    while field_.shape[1] > 2**level:
        field_ = project_dense(field_)
    if field_.shape[1] != 2**level:
        raise ValueError("reference is coarser than the requested level")
    return field_


def _cache_key(problem: str, params: dict, L_ref: int, cfl: float, tend: float) -> str:
    blob = json.dumps({"p": problem, "params": params, "L": L_ref, "cfl": cfl, "tend": tend}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def reference_run_manager(
    problem: str,
    L_ref: int,
    level: int | None = None,
    *,
    params: dict | None = None,
    cfl: float | None = None,
    tend: float | None = None,
    cache_dir: Path | None = None,
) -> np.ndarray:
    """FV/RK3 reference at ``L_ref``, cached on disk and projected to ``level``.

    A cache file whose checksum does not match its data is recomputed.
    """
    params = dict(params or {})
    model = get_problem(problem, params)
    cfl = model.defaults.get("cfl", 0.5) if cfl is None else cfl
    tend = model.defaults["tend"] if tend is None else tend
    ref = None
    path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"ref_{problem}_L{L_ref}_{_cache_key(problem, params, L_ref, cfl, tend)}.npz"
        if path.exists():
            try:
                with np.load(path) as z:
                    data, stored = z["field"], str(z["sha256"])
                if _checksum(data) == stored:
                    ref = data
            except (OSError, ValueError, KeyError):
                ref = None
    if ref is None:
        ref = run_uniform(model, 3, L_ref, cfl, tend).uniform
        if path is not None:
            np.savez(path, field=ref, sha256=_checksum(ref))
    return project_to_level(ref, L_ref if level is None else level)


# ---------------------------------------------------------------------------
# runs


def simulate(config: RunConfig, model: ModelSpec | None = None, on_step: Callable | None = None) -> SimulationResult:
    model = config.model() if model is None else model
    s = config.scheme
    if not s.adaptive:
        return run_uniform(model, s.order, config.max_level, config.cfl, config.tend, config.dt, on_step=on_step)
    tree = initial_tree(model, config.max_level, config.epsilon)
    runner = run_lt if s.local_time_stepping else run_mr
    return runner(model, s, tree, config.cfl, config.tend, config.epsilon, config.dt, on_step)


def run(config: RunConfig) -> RunMetrics:
    """Execute one configured run and write snapshots, grid and metrics into ``config.out``."""
    model = config.model()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    def snapshot(count, t, state):
        if config.snapshot_every and count % config.snapshot_every == 0:
            write_snapshot(out / f"snapshot_{count:06d}.txt", model, config.scheme, t, count, state)

    result = simulate(config, model, snapshot)
    final_state = result.tree if result.tree is not None else result.uniform
    write_snapshot(out / "snapshot_final.txt", model, config.scheme, result.time, result.steps, final_state)
    write_grid(out / "grid.txt", result.tree, config.max_level, model.d)

    metrics = RunMetrics(
        scheme=config.scheme.value,
        max_level=config.max_level,
        wall_time=result.wall_time,
        steps=result.steps,
        leaf_counts=list(result.leaf_count),
        compression_mean=result.mean_compression,
        compression_final=result.final_compression,
    )
    if config.reference_level is not None:
        ref = reference_run_manager(
            config.problem,
            config.reference_level,
            config.max_level,
            params=config.params,
            cfl=config.cfl,
            tend=config.tend,
            cache_dir=config.cache_dir if config.cache_dir is not None else out / "cache",
        )
        errs = l1_error(result.uniform, ref, config.max_level, model.d)
        metrics.e_l1 = {v: float(e) for v, e in zip(model.variables, errs)}
    write_metrics(out / "metrics.txt", config, result, metrics)
    return metrics


DEFAULT_DTS = (1.6e-4, 0.8e-4, 0.4e-4, 0.2e-4)


def convergence_harness(
    schemes: Sequence[SchemeKind | str] = tuple(SchemeKind),
    dt_list: Sequence[float] = DEFAULT_DTS,
    problem: str = "advection",
    max_level: int = 9,
    tend: float = 1.0,
) -> dict[SchemeKind, list[float]]:
    """Self-convergence orders on the frozen two-block grid.

    Entry ``i`` of each list uses the runs at ``dt_list[i:i+3]``.
    """
    dts = [float(x) for x in dt_list]
    if len(dts) < 3:
        raise ValueError("need at least three time steps")
    if any(not math.isclose(a / b, 2.0) for a, b in zip(dts, dts[1:])):
        raise ValueError("time steps must decrease by factors of two")
    if any(abs(tend / dt - round(tend / dt)) > 1e-6 for dt in dts):
        raise ValueError("tend must be a whole number of every time step")
    model = get_problem(problem)
    table: dict[SchemeKind, list[float]] = {}
    for s in schemes:
        s = SchemeKind.parse(s) if isinstance(s, str) else s
        fields = []
        for dt in dts:
            if not s.adaptive:
                fields.append(run_uniform(model, s.order, max_level, 0.5, tend, dt).uniform)
                continue
            tree = two_block_tree(model, max_level)
            runner = run_lt if s.local_time_stepping else run_mr
            fields.append(runner(model, s, tree, 0.5, tend, None, dt).uniform)
        table[s] = [self_convergence_order(*fields[i : i + 3]) for i in range(len(dts) - 2)]
    return table


def format_convergence_table(table: dict[SchemeKind, list[float]], dt_list: Sequence[float]) -> str:
    schemes = list(table)
    rows = ["dt " + " ".join(s.value for s in schemes)]
    for i in range(len(dt_list) - 2):
        rows.append(f"{dt_list[i]:.2g} " + " ".join(f"{table[s][i]:.4f}" for s in schemes))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrlt", description="Adaptive multiresolution solver with local time stepping.")
    p.add_argument("--config", type=Path, help="configuration file")
    p.add_argument("--problem", help="built-in problem name")
    p.add_argument("--scheme", help="fv-rk2, fv-rk3, mr-rk2, mr-rk3, mrlt-rk2, mrlt-nerk2 or mrlt-nerk3")
    p.add_argument("--max-level", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--cfl", type=float)
    p.add_argument("--tend", type=float)
    p.add_argument("--out", type=Path)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--reference-level", type=int)
    p.add_argument("--convergence", action="store_true", help="run the two-grid time-convergence study")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {
        "scheme": args.scheme,
        "max_level": args.max_level,
        "epsilon": args.epsilon,
        "cfl": args.cfl,
        "tend": args.tend,
        "out": args.out,
        "snapshot_every": args.snapshot_every,
        "reference_level": args.reference_level,
    }
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        base = parse_config(text if args.problem is None else text + f"\n[run]\nproblem = {args.problem}\n")
        values = {k: getattr(base, k) for k in _RUN_KEYS if k != "problem"}
        values.update({k: v for k, v in flags.items() if v is not None})
        if args.scheme is not None:
            values["scheme"] = SchemeKind.parse(args.scheme)
        return build_config(base.problem, values, params=base.params)
    if args.problem is None:
        raise ConfigError("give --problem or --config")
    return build_config(args.problem, flags)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.convergence:
            schemes = [SchemeKind.parse(args.scheme)] if args.scheme else list(SchemeKind)
            max_level = args.max_level or 9
            tend = args.tend or 1.0
            if max_level < 2 or tend <= 0:
                raise ConfigError("convergence study needs max_level >= 2 and tend > 0")
        else:
            config = config_from_args(args)
    except (ConfigError, UnknownProblemError, ValueError) as exc:
        print(f"config error: {exc.args[0] if isinstance(exc, UnknownProblemError) else exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.convergence:
            table = convergence_harness(schemes, DEFAULT_DTS, max_level=max_level, tend=tend)
            text = format_convergence_table(table, DEFAULT_DTS)
            if args.out is not None:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "convergence.txt").write_text(text)
            sys.stdout.write(text)
        else:
            metrics = run(config)
            print(
                f"done: {config.scheme.value} L={config.max_level} steps={metrics.steps} "
                f"compression={metrics.compression_mean:.2f}% -> {config.out}"
            )
            for var, e in metrics.e_l1.items():
                print(f"e_l1[{var}] = {e:.6e}")
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
