"""Command-line front end.

Subcommands ``estimate``, ``simulate``, ``bias-decomp``, ``rates`` and
``diagnostics``. Settings come from a flat ``key=value`` config file with
dotted keys (``basis.q.segments=4``), overridden by flags and ``--set``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crossfit import SCHEME_ALIASES, CrossFitScheme, run
from .data import AffineMap, Dataset
from .estimands import ESTIMAND_NAMES, get_functional
from .spline_basis import BasisSpec

log = logging.getLogger("crossfit_dr")

COMMANDS = ("estimate", "simulate", "bias-decomp", "rates", "diagnostics")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (attribute, parser)
_KEYS = {
    "command": ("command", str),
    "estimand": ("estimand", str),
    "scheme": ("scheme", str),
    "iterations": ("iterations", int),
    "all_permutations": ("all_permutations", _bool),
    "combine": ("combine", str),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "reps": ("reps", int),
    "format": ("format", str),
    "out_dir": ("out_dir", str),
    "input": ("input", str),
    "c_columns": ("c_columns", _ints),
    "dgp": ("dgp", str),
    "n": ("n", int),
    "n_grid": ("n_grid", _ints),
    "k_grid": ("k_grid", _ints),
    "targets": ("targets", _floats),
    "basis.q.segments": ("q_segments", int),
    "basis.q.degree": ("q_degree", int),
    "basis.b.segments": ("b_segments", int),
    "basis.b.degree": ("b_degree", int),
    "rates.q_scale": ("q_scale", float),
    "rates.b_scale": ("b_scale", float),
    "rates.schemes": ("rate_schemes", lambda s: tuple(v.strip() for v in s.split(",") if v.strip())),
}


@dataclass
class RunConfig:
    """Fully resolved settings of one CLI run."""

    command: str = "simulate"
    estimand: str = "cov"
    scheme: str = "three_way"
    iterations: int | None = None
    all_permutations: bool = False
    combine: str = "mean"
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    reps: int = 200
    format: str = "csv"
    out_dir: str = "."
    input: str | None = None
    c_columns: tuple[int, ...] = (1,)
    dgp: str | None = None
    n: int = 400
    n_grid: tuple[int, ...] = (500, 1000, 2000, 4000, 8000)
    k_grid: tuple[int, ...] = (16, 32)
    targets: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    q_segments: int = 4
    q_degree: int = 1
    b_segments: int = 4
    b_degree: int = 1
    q_scale: float = 1.0
    b_scale: float = 0.5
    rate_schemes: tuple[str, ...] = ("oracle", "three_way", "two_way")

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"command: expected one of {list(COMMANDS)}, got {self.command!r}")
        if self.estimand not in ESTIMAND_NAMES:
            raise ConfigError(f"estimand: expected one of {list(ESTIMAND_NAMES)}, got {self.estimand!r}")
        if self.scheme not in SCHEME_ALIASES:
            raise ConfigError(f"scheme: expected none, 2way or 3way, got {self.scheme!r}")
        self.scheme = SCHEME_ALIASES[self.scheme]
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format: expected csv or json, got {self.format!r}")
        if self.combine not in ("mean", "median"):
            raise ConfigError(f"combine: expected mean or median, got {self.combine!r}")
        for name in ("reps", "threads", "n", "q_segments", "b_segments"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations: must be positive, got {self.iterations}")
        for name in ("q_degree", "b_degree"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must fit in 64 unsigned bits")
        if self.q_scale <= 0 or self.b_scale <= 0:
            raise ConfigError("rates.q_scale and rates.b_scale must be positive")
        if self.command == "estimate" and not self.input:
            raise ConfigError("input: the estimate command needs a dataset CSV (--input)")
        if self.command == "rates" and len(self.n_grid) < 3:
            raise ConfigError("n_grid: rate fits need at least 3 grid points")
        for s in self.rate_schemes:
            if s != "oracle" and s not in SCHEME_ALIASES:
                raise ConfigError(f"rates.schemes: unknown scheme {s!r}")
        if self.command == "simulate":
            self.check_basis_growth(self.q_spec(self._dgp_dim()).size, self.n)
        if self.command == "bias-decomp":
            for k in self.k_grid:
                self.check_basis_growth(k, self.n)
        return self

    @staticmethod
    def check_basis_growth(k: int, n: int) -> None:
        if k >= n:
            raise ConfigError(
                f"basis size k_n={k} >= n={n} violates Limited basis growth (k_n < n required)")

    def _dgp_dim(self) -> int:
        from .simlab import PRESETS
        name = self.dgp or {"simulate": "cate" if self.estimand == "cate" else "rate",
                            "bias-decomp": "piecewise_cov", "rates": "rate",
                            "diagnostics": "smooth"}.get(self.command, "rate")
        if name not in PRESETS:
            raise ConfigError(f"dgp: expected one of {sorted(PRESETS)}, got {name!r}")
        return PRESETS[name]().d_x

    def q_spec(self, d_x: int) -> BasisSpec:
        return BasisSpec(d_x, self.q_segments, self.q_degree)

    def b_spec(self, d_c: int) -> BasisSpec:
        return BasisSpec(max(1, d_c), self.b_segments, self.b_degree)

    def as_lines(self) -> list[str]:
        inverse = {attr: key for key, (attr, _) in _KEYS.items()}
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{inverse[f.name]}={'' if v is None else v}")
        return sorted(out)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _apply(cfg: RunConfig, key: str, value: str, where: str) -> None:
    if key not in _KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    attr, parse = _KEYS[key]
    try:
        setattr(cfg, attr, None if value == "" and attr in ("input", "dgp", "iterations") else parse(value))
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config_file(path, cfg: RunConfig | None = None) -> RunConfig:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    cfg = cfg or RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        _apply(cfg, key, value, f"{path}:{lineno}")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossfit-dr", description=__doc__.split("\n\n")[0])
    p.add_argument("subcommand", nargs="?", choices=COMMANDS, help="what to run")
    p.add_argument("--command", choices=COMMANDS, help="alternative to the positional subcommand")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    p.add_argument("--estimand", choices=ESTIMAND_NAMES)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--input", help="dataset CSV with header x1,...,xd,a,y")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, the config file and flags into a validated :class:`RunConfig`."""
    args = build_parser().parse_args(argv)
    cfg = RunConfig()
    if args.config:
        parse_config_file(args.config, cfg)
    if args.subcommand and args.command and args.subcommand != args.command:
        raise ConfigError(f"conflicting commands {args.subcommand!r} and {args.command!r}")
    command = args.subcommand or args.command
    if command:
        cfg.command = command
    for flag, attr in (("scheme", "scheme"), ("estimand", "estimand"), ("seed", "seed"),
                       ("threads", "threads"), ("out_dir", "out_dir"), ("format", "format"),
                       ("input", "input")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, attr, v)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _apply(cfg, k.strip(), v.strip(), "--set")
    return cfg.validate()


# ---------------------------------------------------------------------------
# dataset CSV
# ---------------------------------------------------------------------------

def ingest_csv(path, c_columns=(1,), rescale: bool = True) -> Dataset:
    """Read ``x1,...,xd,a,y`` into a :class:`Dataset` on the unit hypercube.

    ``c_columns`` are 1-based covariate numbers used as ``C``; the affine
    rescaling is recorded on ``Dataset.scaler``.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in ("a", "y"):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r} in header {header}")
    x_cols = [h for h in header if h not in ("a", "y")]
    expected = [f"x{j}" for j in range(1, len(x_cols) + 1)]
    if not x_cols:
        raise DataError(f"{path}: missing column 'x1' in header {header}")
    if x_cols != expected:
        missing = [e for e in expected if e not in x_cols]
        what = f"missing column {missing[0]!r}" if missing else f"unexpected columns {x_cols}"
        raise DataError(f"{path}: {what}; expected header x1,...,xd,a,y")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    try:
        values = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows; every row needs {len(header)} cells")
    bad = ~np.isfinite(values)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DataError(f"{path}: non-finite value in row {i + 2}, column {header[j]!r}")
    idx = {h: j for j, h in enumerate(header)}
    x = values[:, [idx[c] for c in expected]]
    a, y = values[:, idx["a"]], values[:, idx["y"]]
    c_idx = tuple(int(c) - 1 for c in c_columns)
    if any(c < 0 or c >= x.shape[1] for c in c_idx):
        raise DataError(f"c_columns {tuple(c_columns)} out of range for {x.shape[1]} covariate(s)")
    scaler = AffineMap.fit(x) if rescale else None
    if scaler is not None:
        x = scaler.forward(x)
    log.info("read %d rows from %s; covariate ranges %s", len(a), path,
             [(float(lo), float(hi)) for lo, hi in zip(values[:, :x.shape[1]].min(0), values[:, :x.shape[1]].max(0))])
    return Dataset(x, a, y, c_idx, scaler)


def write_csv(dataset: Dataset, path) -> None:
    """Emit ``x1,...,xd,a,y`` in original units with round-trip float formatting."""
    x = dataset.scaler.inverse(dataset.x) if dataset.scaler is not None else dataset.x
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(1, dataset.d_x + 1)] + ["a", "y"])
        for xi, ai, yi in zip(x, dataset.a, dataset.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(ai)), repr(float(yi))])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _emit(cfg: RunConfig, name: str, columns, rows: list[dict], extra: dict | None = None) -> list[Path]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = cfg.command.replace("-", "_")
    paths = []
    if cfg.format == "csv":
        p = out / f"{stem}_{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in columns])
        paths.append(p)
    else:
        p = out / f"{stem}_{name}.json"
        doc = {"config": cfg.to_dict(), name: rows}
        if extra:
            doc.update(extra)
        p.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")
        paths.append(p)
    cfg_path = out / f"{stem}.config"
    cfg_path.write_text("\n".join(cfg.as_lines()) + "\n")
    paths.append(cfg_path)
    return paths


def _summary(columns, rows, limit: int = 20) -> str:
    cells = [[c for c in columns]] + [[(f"{r[c]:.6g}" if isinstance(r[c], (float, np.floating)) else str(r[c]))
                                       for c in columns] for r in rows[:limit]]
    widths = [max(len(row[j]) for row in cells) for j in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    if len(rows) > limit:
        lines.append(f"... {len(rows) - limit} more row(s)")
    return "\n".join(lines)


def _preset(cfg: RunConfig, default: str):
    from .simlab import PRESETS
    return PRESETS[cfg.dgp or default]()


def _targets(cfg: RunConfig, d_c: int) -> np.ndarray:
    t = np.asarray(cfg.targets, dtype=float)
    if d_c > 1:
        if t.size % d_c:
            raise ConfigError(f"targets: {t.size} values do not form points of dimension {d_c}")
        return t.reshape(-1, d_c)
    return t.reshape(-1, 1)


def cmd_estimate(cfg: RunConfig):
    data = ingest_csv(cfg.input, cfg.c_columns)
    try:
        for name in (("trt", "ctrl") if cfg.estimand == "cate" else (cfg.estimand,)):
            get_functional(name).validate(data.a)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    q_spec, b_spec = cfg.q_spec(data.d_x), cfg.b_spec(len(data.c_idx))
    fold_n = len(data) // CrossFitScheme(cfg.scheme).n_folds
    RunConfig.check_basis_growth(q_spec.size, fold_n)
    if data.c_idx:
        targets = _targets(cfg, len(data.c_idx))
        # targets are given in original units; map them like the covariates
        lo = data.scaler.lo[list(data.c_idx)]
        hi = data.scaler.hi[list(data.c_idx)]
        scaled = (targets - lo) / (hi - lo)
    else:
        targets = scaled = np.zeros((1, 1))
    scheme = CrossFitScheme(cfg.scheme, cfg.iterations, cfg.seed, cfg.all_permutations, cfg.combine)
    est = run(data, cfg.estimand, q_spec, b_spec, scheme, scaled)
    flagged = sum(f["flagged_eval_rows"] for f in est.flags)
    rows = []
    for t in range(len(targets)):
        rows.append({"target_id": t, "c": ";".join(_fmt(v) for v in targets[t]),
                     "theta": float(est.theta[t]), "no_support": bool(est.no_support[t]),
                     "flagged_rows": int(flagged), "iterations": int(est.per_iteration.shape[0])})
    cols = ["target_id", "c", "theta", "no_support", "flagged_rows", "iterations"]
    return "estimates", cols, rows, {"per_iteration": est.per_iteration}


def _report_rows(report) -> list[dict]:
    return [dataclasses.asdict(r) for r in report.rows]


def cmd_simulate(cfg: RunConfig):
    from .simlab.experiments import CSV_COLUMNS, simulate
    dgp = _preset(cfg, "cate" if cfg.estimand == "cate" else "rate")
    q_spec, b_spec = cfg.q_spec(dgp.d_x), cfg.b_spec(len(dgp.c_idx))
    report = simulate(dgp, cfg.estimand, cfg.n, q_spec, b_spec, cfg.scheme, cfg.reps,
                      _targets(cfg, len(dgp.c_idx)), cfg.seed, cfg.iterations, cfg.threads)
    return "report", list(CSV_COLUMNS), _report_rows(report), None


def cmd_bias_decomp(cfg: RunConfig):
    from .simlab.experiments import bias_decomposition_cov
    if cfg.estimand != "cov":
        raise ConfigError("bias-decomp is defined for the cov estimand only")
    dgp = _preset(cfg, "piecewise_cov")
    out = bias_decomposition_cov(dgp, cfg.n, cfg.k_grid, reps=cfg.reps, seed=cfg.seed,
                                 degree=0, threads=cfg.threads)
    cols = ["scheme", "n", "k_n", "reps", "bias", "se_bias", "sd", "rmse", "predicted", "hat_trace", "cov"]
    return "table", cols, out["rows"], {"truth": out["truth"]}


def cmd_rates(cfg: RunConfig):
    from .simlab.experiments import CSV_COLUMNS, cube_root_rule, rate_experiment
    dgp = _preset(cfg, "cate" if cfg.estimand == "cate" else "rate")
    d_c = max(1, len(dgp.c_idx))
    # variance exponent of sqrt(r_n / n) when r_n grows like n^(d_C / 3)
    predicted = -(1.0 - d_c / 3.0) / 2.0
    report = rate_experiment(dgp, cfg.estimand, cfg.n_grid, cube_root_rule(cfg.q_scale, 1),
                             cube_root_rule(cfg.b_scale, 1), cfg.rate_schemes, cfg.reps,
                             _targets(cfg, d_c) if dgp.c_idx else None, cfg.seed, cfg.q_degree,
                             cfg.b_degree, cfg.threads, predicted)
    slopes = [dataclasses.asdict(s) for s in report.slopes]
    if cfg.format == "csv":
        _emit(cfg, "slopes", ["scheme", "slope", "stderr", "ci_low", "ci_high", "predicted"],
              [{**s, "predicted": s["predicted"] if s["predicted"] is not None else ""} for s in slopes])
    print(_summary(["scheme", "slope", "ci_low", "ci_high", "predicted"],
                   [{**s, "predicted": s["predicted"] if s["predicted"] is not None else "n/a"} for s in slopes]))
    return "report", list(CSV_COLUMNS), _report_rows(report), {"slopes": slopes}


def cmd_diagnostics(cfg: RunConfig):
    from .simlab.experiments import mean_zero_diagnostics
    dgp = _preset(cfg, "smooth")
    fun = "trt" if cfg.estimand == "cate" else cfg.estimand
    ds = mean_zero_diagnostics(dgp, fun, cfg.n, cfg.q_spec(dgp.d_x), cfg.reps, cfg.seed, threads=cfg.threads)
    rows = []
    for name in ds.h_means:
        for j, (m, s) in enumerate(zip(ds.h_means[name], ds.h_ses[name])):
            rows.append({"quantity": name, "index": j, "mean": float(m), "se": float(s),
                         "z": float(m / s) if s > 0 else 0.0})
    for n, freq in ds.indicator_freq.items():
        rows.append({"quantity": "indicator_hat_frequency", "index": n, "mean": freq, "se": float("nan"),
                     "z": float("nan")})
    rows.append({"quantity": "reproducing_residual", "index": 0, "mean": ds.reproducing_residual,
                 "se": float("nan"), "z": float("nan")})
    return "diagnostics", ["quantity", "index", "mean", "se", "z"], rows, None


DISPATCH = {"estimate": cmd_estimate, "simulate": cmd_simulate, "bias-decomp": cmd_bias_decomp,
            "rates": cmd_rates, "diagnostics": cmd_diagnostics}


def run_command(cfg: RunConfig) -> tuple[int, list[Path]]:
    """Dispatch a validated config; returns the exit status and written files."""
    name, cols, rows, extra = DISPATCH[cfg.command](cfg)
    paths = _emit(cfg, name, cols, rows, extra)
    print(_summary(cols, rows))
    return EXIT_OK, paths


def _exit_code(exc: BaseException) -> int:
    from .simlab.dgp import QuadratureError
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (np.linalg.LinAlgError, QuadratureError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    cause = exc.__cause__
    if cause is not None and cause is not exc:
        return _exit_code(cause)
    if isinstance(exc, ValueError):
        return EXIT_DATA
    return EXIT_NUMERIC


def main(argv=None) -> int:
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = parse_config(argv)
        print("\n".join(f"# {line}" for line in cfg.as_lines()))
        code, paths = run_command(cfg)
        for p in paths:
            log.info("wrote %s", p)
        return code
    except SystemExit as exc:  # argparse
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
