"""Command-line front end for the benchmark runs.

Subcommands::

    paraid run --run 1 --algo tr --eps-pod 1e-12 --cells 30 --K 25
    paraid compare DIR_FOM DIR_TR
    paraid sweep --run 1 --cells 30 --K 25 --jobs 4

Every run directory holds ``manifest.txt`` (resolved configuration, versions
and results as ``key=value`` lines), ``history.csv``, the final parameter as a
field dump ``q_final.bin`` and, for trust-region runs, ``decisions.csv``.
Output directories default to ``$PARAID_OUTPUT_ROOT`` (or ``./runs``).

Exit codes: 0 ok, 2 configuration error, 3 solver failure, 4 stagnation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, SolverError, StagnationError
from .fieldio import read_field, write_field
from .fom import RUN_KINDS, exact_parameter, make_noisy_data, problem_for_run
from .grid_fem import Mesh, assemble_h1_product, assemble_mass
from .irgnm import IrgnmSettings, run_fom_irgnm
from .subproblem import PgdSettings
from .tr_irgnm import TrSettings, run_tr_irgnm

__all__ = [
    "RunConfig",
    "RunOutcome",
    "execute",
    "compare",
    "sweep_grid",
    "write_manifest",
    "read_manifest",
    "problem_hash",
    "main",
    "FOM_COLUMNS",
    "TR_COLUMNS",
    "TIME_COLUMNS",
    "COMPARE_COLUMNS",
]

OUTPUT_ENV = "PARAID_OUTPUT_ROOT"
MANIFEST = "manifest.txt"
HISTORY = "history.csv"
DECISIONS = "decisions.csv"
FIELD = "q_final.bin"
COMPARISON = "comparison.csv"
MANIFEST_VERSION = 1

FOM_COLUMNS = ("iteration", "J_h", "alpha", "inner_iterations", "fom_solves", "wall_time")
TR_COLUMNS = FOM_COLUMNS + ("eta", "n_Q", "n_V", "branch", "delta_J_trial")
TIME_COLUMNS = ("wall_time",)
DECISION_COLUMNS = ("iteration", "branch", "accepted", "eta_before", "eta_after", "n_Q_before", "n_V_before",
                    "n_Q_after", "n_V_after", "decision_fom_solves", "R_trial", "J_r_trial", "delta_J_trial",
                    "J_r_agc", "rho", "max_inner_R", "alphas", "failure_enrichments")
COMPARE_COLUMNS = ("eps_pod", "l2_rel_err", "h1_rel_err", "time", "speedup", "fom_solves", "n_Q", "n_V",
                   "outer_iterations")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_STAGNATION = 0, 2, 3, 4

# fields owned by the problem section rather than the algorithm sections
_SHARED = {"delta", "eps_pod", "pgd"}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _settings_fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _SHARED}


_SECTIONS = {"irgnm": IrgnmSettings, "tr": TrSettings, "pgd": PgdSettings}


def _default_of(cls, name):
    f = next(f for f in dataclasses.fields(cls) if f.name == name)
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _convert(key: str, raw: str):
    section, _, name = key.partition(".")
    cls = _SECTIONS.get(section)
    if cls is None or name in _SHARED or name not in {f.name for f in dataclasses.fields(cls)}:
        valid = sorted(f"{s}.{n}" for s, c in _SECTIONS.items() for n in _settings_fields(c))
        raise ConfigError(f"unknown setting {key!r}; valid settings are: {', '.join(valid)}")
    default = _default_of(cls, name)
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"setting {key!r} expects a number, got {raw!r}") from exc


@dataclass
class RunConfig:
    """Resolved configuration of one benchmark run.

    ``overrides`` maps dotted keys such as ``tr.eta0`` or ``pgd.tolerance``
    to values; everything else keeps the published defaults.
    """

    run_id: int = 1
    cells: int = 300
    K: int = 50
    delta: float = 1e-5
    seed: int = 0
    algo: str = "tr"
    eps_pod: float = 1e-12
    output: str | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.run_id not in RUN_KINDS:
            raise ConfigError(f"run must be one of {sorted(RUN_KINDS)}, got {self.run_id!r}")
        if self.algo not in ("fom", "tr"):
            raise ConfigError(f"algorithm must be 'fom' or 'tr', got {self.algo!r}")
        if int(self.cells) < 1:
            raise ConfigError(f"cells per side must be at least 1, got {self.cells}")
        if int(self.K) < 1:
            raise ConfigError(f"number of time steps must be at least 1, got {self.K}")
        if not self.delta > 0:
            raise ConfigError(f"noise level must be positive, got {self.delta}")
        if not self.eps_pod > 0:
            raise ConfigError(f"POD tolerance must be positive, got {self.eps_pod}")
        self.run_id, self.cells, self.K, self.seed = int(self.run_id), int(self.cells), int(self.K), int(self.seed)
        self.delta, self.eps_pod = float(self.delta), float(self.eps_pod)
        self.overrides = {k: (_convert(k, v) if isinstance(v, str) else v) for k, v in self.overrides.items()}
        for k in self.overrides:
            _convert(k, "0")  # rejects unknown keys
        # build once so invalid combinations surface here with the settings' own message
        try:
            self.settings()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid settings: {exc}") from exc

    # ---- settings ----------------------------------------------------------------------
    def _section(self, name: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.overrides.items() if k.startswith(name + ".")}

    def pgd_settings(self) -> PgdSettings:
        return PgdSettings(**self._section("pgd"))

    def settings(self):
        pgd = self.pgd_settings()
        if self.algo == "fom":
            return IrgnmSettings(delta=self.delta, pgd=pgd, **self._section("irgnm"))
        return TrSettings(delta=self.delta, eps_pod=self.eps_pod, pgd=pgd, **self._section("tr"))

    @property
    def problem_key(self) -> str:
        return problem_hash(self.run_id, self.cells, self.K, self.delta, self.seed)

    def default_output(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        name = f"run{self.run_id}-{self.algo}-n{self.cells}-K{self.K}-seed{self.seed}"
        if self.algo == "tr":
            name += f"-eps{self.eps_pod:.0e}"
        return root / name

    @property
    def output_dir(self) -> Path:
        return Path(self.output) if self.output else self.default_output()

    # ---- flat key=value form -----------------------------------------------------------
    def to_items(self) -> dict:
        out = {
            "problem.run": self.run_id,
            "problem.cells": self.cells,
            "problem.K": self.K,
            "problem.delta": self.delta,
            "problem.seed": self.seed,
            "problem.hash": self.problem_key,
            "problem.noise": "uniform on observation dofs, scaled to delta in L2(0,T;H1)",
            "algorithm.name": self.algo,
            "algorithm.eps_pod": self.eps_pod,
        }
        s = self.settings()
        section = "irgnm" if self.algo == "fom" else "tr"
        for name in _settings_fields(type(s)):
            out[f"{section}.{name}"] = getattr(s, name)
        for name in _settings_fields(PgdSettings):
            out[f"pgd.{name}"] = getattr(s.pgd, name)
        out["output.dir"] = str(self.output_dir)
        return out

    @classmethod
    def from_items(cls, items: dict) -> "RunConfig":
        """Inverse of :meth:`to_items`; sections that are not configuration are ignored."""
        try:
            algo = items.get("algorithm.name", "tr")
            section = "irgnm" if algo == "fom" else "tr"
            overrides = {}
            for key, raw in items.items():
                sec = key.split(".", 1)[0]
                if sec not in (section, "pgd"):
                    continue
                value = _convert(key, raw) if isinstance(raw, str) else raw
                if key == "tr.delta_tilde":
                    overrides[key] = value  # resolved value, kept explicitly
                    continue
                cls_ = _SECTIONS[sec]
                if value != _default_of(cls_, key.split(".", 1)[1]):
                    overrides[key] = value
            delta = float(items.get("problem.delta", 1e-5))
            if overrides.get("tr.delta_tilde") == delta:
                del overrides["tr.delta_tilde"]
            cfg = cls(
                run_id=int(items.get("problem.run", 1)),
                cells=int(items.get("problem.cells", 300)),
                K=int(items.get("problem.K", 50)),
                delta=delta,
                seed=int(items.get("problem.seed", 0)),
                algo=algo,
                eps_pod=float(items.get("algorithm.eps_pod", 1e-12)),
                output=items.get("output.dir") or None,
                overrides=overrides,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed configuration: {exc}") from exc
        stored = items.get("problem.hash")
        if stored is not None and stored != cfg.problem_key:
            raise ConfigError("problem.hash does not match the problem section; the file was edited by hand")
        if cfg.output is not None and Path(cfg.output) == cfg.default_output():
            cfg.output = None  # resolved default, keep it relocatable
        return cfg


def problem_hash(run_id: int, cells: int, K: int, delta: float, seed: int) -> str:
    key = f"run={int(run_id)};cells={int(cells)};K={int(K)};delta={float(delta)!r};seed={int(seed)}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


# ---- manifest ------------------------------------------------------------------------------
def write_manifest(path, items: dict) -> Path:
    path = Path(path)
    lines = [f"manifest.version={MANIFEST_VERSION}"]
    lines += [f"{k}={_fmt(v)}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _versions() -> dict:
    return {
        "versions.paraid": __version__,
        "versions.python": platform.python_version(),
        "versions.numpy": np.__version__,
        "versions.scipy": scipy.__version__,
    }


# ---- history -------------------------------------------------------------------------------
def _history_rows(result, algo: str) -> list:
    rows = []
    for r in result.history:
        row = [r.iteration, r.J, r.alpha, r.inner_iterations, r.fom_solves, r.wall_time]
        if algo == "tr":
            row += [r.eta, r.n_q, r.n_v, r.branch, r.delta_J_trial]
        rows.append(row)
    return rows


def _write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _decision_rows(result) -> list:
    rows = []
    for d in result.decisions:
        max_r = max((r for r, _ in d.inner_R), default=float("nan"))
        rows.append([d.iteration, d.branch, d.accepted, d.eta_before, d.eta_after, d.n_q_before, d.n_v_before,
                     d.n_q_after, d.n_v_after, d.decision_fom_solves, d.R_trial, d.J_r_trial, d.delta_J_trial,
                     d.J_r_agc, d.rho, max_r, " ".join(_fmt(a) for a in d.alphas),
                     " ".join(f"{k}:{_fmt(e)}" for k, e in d.failure_enrichments)])
    return rows


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- execution -----------------------------------------------------------------------------
@dataclass
class RunOutcome:
    config: RunConfig
    result: object
    problem: object
    elapsed: float
    fom_solves: int
    directory: Path
    obs: object = None


def execute(config: RunConfig, write: bool = True) -> RunOutcome:
    """Build the instance, run the algorithm and (optionally) write all artifacts."""
    problem = problem_for_run(config.run_id, config.cells, config.K)
    q_exact = exact_parameter(config.run_id, problem.mesh, config.K)
    obs = make_noisy_data(problem, q_exact, config.delta, config.seed)
    problem.counter.clear()  # count only the solves of the algorithm itself
    t0 = time.perf_counter()
    settings = config.settings()
    if config.algo == "fom":
        result = run_fom_irgnm(problem, obs, settings)
    else:
        result = run_tr_irgnm(problem, obs, settings)
    elapsed = time.perf_counter() - t0
    outcome = RunOutcome(config, result, problem, elapsed, problem.fom_solves, config.output_dir, obs)
    if write:
        write_artifacts(outcome)
    return outcome


def write_artifacts(outcome: RunOutcome) -> Path:
    cfg, res = outcome.config, outcome.result
    out = outcome.directory
    out.mkdir(parents=True, exist_ok=True)
    items = cfg.to_items()
    items.update(_versions())
    items.update({
        "results.converged": bool(res.converged),
        "results.stop_reason": res.stop_reason,
        "results.J_h": float(res.J),
        "results.outer_iterations": int(res.iterations),
        "results.fom_solves": int(outcome.fom_solves),
        "results.time": float(outcome.elapsed),
    })
    if cfg.algo == "tr":
        items["results.n_Q"] = res.bases.n_q
        items["results.n_V"] = res.bases.n_v
    write_manifest(out / MANIFEST, items)
    _write_csv(out / HISTORY, TR_COLUMNS if cfg.algo == "tr" else FOM_COLUMNS, _history_rows(res, cfg.algo))
    if cfg.algo == "tr":
        _write_csv(out / DECISIONS, DECISION_COLUMNS, _decision_rows(res))
    write_field(out / FIELD, res.q, {"run": cfg.run_id, "algorithm": cfg.algo, "cells": cfg.cells, "K": cfg.K,
                                     "layout": "nodes lexicographic (x fastest), columns time steps 1..K"})
    return out


# ---- comparison ----------------------------------------------------------------------------
def _fe_norm(gram, q: np.ndarray, dt: float) -> float:
    w = 1.0 if q.shape[1] == 1 else dt
    return float(np.sqrt(max(w * float(np.sum(q * (gram @ q))), 0.0)))


def compare(dir_fom, dir_tr) -> dict:
    """One comparison row; relative errors are measured against the first run."""
    ma, mb = read_manifest(dir_fom), read_manifest(dir_tr)
    for key in ("problem.hash", "problem.run", "problem.cells", "problem.K", "problem.delta", "problem.seed"):
        if ma.get(key) != mb.get(key):
            raise ConfigError(f"runs are not comparable: {key} differs ({ma.get(key)} vs {mb.get(key)})")
    qa = read_field(Path(dir_fom) / FIELD)
    qb = read_field(Path(dir_tr) / FIELD)
    if qa.shape != qb.shape:
        raise ConfigError(f"runs are not comparable: parameter shapes {qa.shape} and {qb.shape}")
    mesh = Mesh(int(ma["problem.cells"]))
    if qa.shape[0] != mesh.n_nodes:
        raise ConfigError("field dump does not match the mesh in the manifest")
    dt = 1.0 / int(ma["problem.K"])
    diff = qa - qb
    rel = {}
    for name, gram in (("l2", assemble_mass(mesh)), ("h1", assemble_h1_product(mesh))):
        ref = _fe_norm(gram, qa, dt)
        rel[name] = _fe_norm(gram, diff, dt) / ref if ref > 0 else float("nan")
    t_a, t_b = float(ma["results.time"]), float(mb["results.time"])
    return {
        "eps_pod": mb.get("algorithm.eps_pod", "-") if mb.get("algorithm.name") == "tr" else "-",
        "l2_rel_err": rel["l2"],
        "h1_rel_err": rel["h1"],
        "time": t_b,
        "speedup": t_a / t_b if t_b > 0 else float("inf"),
        "fom_solves": int(mb["results.fom_solves"]),
        "n_Q": mb.get("results.n_Q", "-"),
        "n_V": mb.get("results.n_V", "-"),
        "outer_iterations": int(mb["results.outer_iterations"]),
    }


def format_table(rows: list[dict]) -> str:
    cells = [list(COMPARE_COLUMNS)]
    for r in rows:
        cells.append([f"{r[c]:.3e}" if isinstance(r[c], float) else str(r[c]) for c in COMPARE_COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def write_comparison(path, rows: list[dict]) -> Path:
    _write_csv(path, COMPARE_COLUMNS, [[r[c] for c in COMPARE_COLUMNS] for r in rows])
    return Path(path)


# ---- sweep ---------------------------------------------------------------------------------
def sweep_grid(lo: float = 1e-9, hi: float = 1e-14, count: int = 6) -> list[float]:
    """Logarithmically spaced POD tolerances from ``lo`` down to ``hi``."""
    if count < 1:
        raise ConfigError("sweep needs at least one tolerance")
    return [float(v) for v in np.logspace(np.log10(lo), np.log10(hi), count)]


def _execute_dir(config: RunConfig) -> str:
    return str(execute(config).directory)


# ---- command line --------------------------------------------------------------------------
def _parse_set(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config_from_args(args, algo: str | None = None, eps: float | None = None, output=None) -> RunConfig:
    items = read_manifest(args.config) if getattr(args, "config", None) else {}
    base = RunConfig.from_items(items) if items else None
    overrides = dict(base.overrides) if base else {}
    overrides.update(_parse_set(args.set))

    def pick(name, fallback, attr=None):
        v = getattr(args, name, None)
        if v is not None:
            return v
        return getattr(base, attr or name) if base else fallback

    return RunConfig(
        run_id=pick("run", 1, "run_id"),
        cells=pick("cells", 300),
        K=pick("K", 50),
        delta=pick("delta", 1e-5),
        seed=pick("seed", 0),
        algo=algo or pick("algo", "tr"),
        eps_pod=eps if eps is not None else pick("eps_pod", 1e-12),
        output=output,
        overrides=overrides,
    )


def _add_problem_args(p) -> None:
    p.add_argument("--run", type=int, choices=sorted(RUN_KINDS), help="benchmark run (default 1)")
    p.add_argument("--cells", type=int, help="cells per side of the mesh (default 300)")
    p.add_argument("--K", type=int, help="number of implicit Euler steps (default 50)")
    p.add_argument("--delta", type=float, help="noise level (default 1e-5)")
    p.add_argument("--seed", type=int, help="noise seed (default 0)")
    p.add_argument("--config", help="key=value file, e.g. a previous manifest")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a setting, e.g. tr.eta0=0.2 or pgd.tolerance=1e-10")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paraid", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one algorithm on one instance")
    _add_problem_args(p)
    p.add_argument("--algo", choices=("fom", "tr"), help="fom or tr (default tr)")
    p.add_argument("--eps-pod", dest="eps_pod", type=float, help="POD tolerance (default 1e-12)")
    p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ENV} or ./runs)")

    p = sub.add_parser("compare", help="compare two finished runs of the same instance")
    p.add_argument("dir_fom")
    p.add_argument("dir_tr")
    p.add_argument("--out", help="comparison csv (default DIR_TR/comparison.csv)")

    p = sub.add_parser("sweep", help="one full-order run plus trust-region runs over a POD tolerance grid")
    _add_problem_args(p)
    p.add_argument("--eps", type=float, nargs="+", help="POD tolerances (default 6 values from 1e-9 to 1e-14)")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")
    p.add_argument("--out", help="root directory of the sweep")
    return parser


def _cmd_run(args) -> int:
    cfg = _config_from_args(args, output=args.out)
    outcome = execute(cfg)
    res = outcome.result
    print(f"{cfg.algo} run {cfg.run_id}: J_h={res.J:.6e} converged={res.converged} "
          f"iterations={res.iterations} fom_solves={outcome.fom_solves} time={outcome.elapsed:.2f}s")
    print(f"artifacts in {outcome.directory}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    row = compare(args.dir_fom, args.dir_tr)
    out = Path(args.out) if args.out else Path(args.dir_tr) / COMPARISON
    write_comparison(out, [row])
    print(format_table([row]))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    eps_grid = args.eps or sweep_grid()
    probe = _config_from_args(args, algo="fom")
    root = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ENV, "runs")) / (
        f"sweep-run{probe.run_id}-n{probe.cells}-K{probe.K}-seed{probe.seed}")
    configs = [_config_from_args(args, algo="fom", output=str(root / "fom"))]
    configs += [_config_from_args(args, algo="tr", eps=e, output=str(root / f"tr-eps{e:.0e}")) for e in eps_grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_execute_dir, configs))
    else:
        dirs = [_execute_dir(c) for c in configs]
    rows = [compare(dirs[0], d) for d in dirs[1:]]
    write_comparison(root / COMPARISON, rows)
    print(format_table(rows))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "sweep": _cmd_sweep}
    try:
        return handlers[args.command](args)
    except StagnationError as exc:
        print(f"stagnation: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            print(f"  {k}={v}", file=sys.stderr)
        return EXIT_STAGNATION
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
