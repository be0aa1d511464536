"""Experiment harness for single runs, parameter sweeps and baselines.

Also exports the synthetic cohort as CSV.

Every run follows the same protocol: preprocess the whole cohort, split the
labeled rows into stratified train/test parts, hide a fraction of the
training labels, fit transductively and score the held-out test rows.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autoencoder import TrainConfig
from .dataset import (
    UNLABELED,
    SemiLabels,
    SynthConfig,
    load_csv,
    mask_labels,
    reference_cohort,
    stratified_split,
    synth_generate,
)
from .errors import ConfigError, KTooLarge, MatchADError, NumericalError
from .metrics import MetricsReport, evaluate, format_table
from .pipeline import JointConfig, fit, propagate_raw, save_model
from .preprocessing import preprocess

log = logging.getLogger(__name__)

LABEL_GRID = (5, 10, 15, 20, 25, 30, 40, 50, 60, 70, 80, 90, 100)
ALPHA_GRID = (0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
K_GRID = (5, 10, 15, 20, 25, 30)
SWEEP_KEYS = {"labels": "label_pct", "alpha": "alpha", "k": "k"}
METRIC_COLUMNS = (("accuracy", "accuracy"), ("kappa", "kappa"), ("f1", "f1_weighted"))
INVERSION_TOL = 1e-9  # percentage points; below this a drop is float noise


@dataclass(frozen=True)
class RunSpec:
    data: str | None = None
    label_col: str = "label"
    unlabeled_token: str = "-1"
    synth: SynthConfig | None = None  # None with no data -> reference cohort
    keep: float = 0.3
    test_fraction: float = 0.2
    seed: int = 1
    repeats: int = 3
    jobs: int = 1
    epochs: int = 100
    joint: JointConfig = field(default_factory=JointConfig)
    grid: tuple | None = None
    out: str | None = None

    def __post_init__(self):
        if not 0 < self.keep <= 1:
            raise ConfigError(f"keep must lie in (0, 1], got {self.keep}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.repeats < 1 or self.jobs < 1 or self.epochs < 0:
            raise ConfigError("repeats and jobs must be >= 1 and epochs >= 0")

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(range(self.seed, self.seed + self.repeats))

    def resolved(self) -> dict:
        """Full configuration for reports; the output location is left out
        so reports written to different directories compare equal."""
        doc = asdict(self)
        doc.pop("out")
        if self.data is None:
            doc["synth"] = asdict(self.synth or reference_cohort())
        if doc["grid"] is not None:
            doc["grid"] = list(doc["grid"])
        return doc


@dataclass
class Cohort:
    X: np.ndarray
    semi: SemiLabels
    feature_names: list[str]
    removed: int


# ---------------------------------------------------------------- config

def read_key_values(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _floats(text) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


SYNTH_FIELDS = {
    "n_per_class": lambda v: tuple(int(x) for x in str(v).split(",")),
    "ambient_dim": int,
    "manifold_dim": int,
    "class_separation": float,
    "noise_sigma": float,
    "missing_rate": float,
    "seed": int,
}


def synth_from_file(path) -> SynthConfig:
    """Reference cohort with the file's ``key=value`` overrides applied."""
    values = read_key_values(path)
    unknown = sorted(set(values) - set(SYNTH_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown synth keys {unknown}")
    try:
        overrides = {k: SYNTH_FIELDS[k](v) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return replace(reference_cohort(), **overrides)


OPTION_KEYS = ("data", "label_col", "unlabeled_token", "synth", "keep", "test_fraction",
               "alpha", "k", "betas", "lambda_ot", "t_outer", "epochs", "seed", "repeats",
               "jobs", "grid", "out")


def spec_from_options(options: dict) -> RunSpec:
    """Build a ``RunSpec`` from string-valued options (config file merged
    with command-line flags)."""
    unknown = sorted(set(options) - set(OPTION_KEYS))
    if unknown:
        raise ConfigError(f"unknown options {unknown}")
    o = {k: v for k, v in options.items() if v is not None}
    try:
        joint = {}
        if "alpha" in o:
            joint["alpha"] = float(o["alpha"])
        if "k" in o:
            joint["k_neighbors"] = int(o["k"])
        if "t_outer" in o:
            joint["t_outer"] = int(o["t_outer"])
        if "lambda_ot" in o:
            joint["lambda_ot"] = float(o["lambda_ot"])
        if "betas" in o:
            betas = _floats(o["betas"])
            if len(betas) != 3:
                raise ConfigError("betas needs three comma-separated values")
            joint.update(beta1=betas[0], beta2=betas[1], beta3=betas[2])
        kw = {"joint": JointConfig(**joint)}
        for key in ("data", "label_col", "unlabeled_token", "out"):
            if key in o:
                kw[key] = str(o[key])
        for key in ("keep", "test_fraction"):
            if key in o:
                kw[key] = float(o[key])
        for key in ("epochs", "seed", "repeats", "jobs"):
            if key in o:
                kw[key] = int(o[key])
        if "synth" in o:
            kw["synth"] = synth_from_file(o["synth"])
        if "grid" in o:
            kw["grid"] = _floats(o["grid"])
    except ValueError as exc:
        if isinstance(exc, MatchADError):
            raise
        raise ConfigError(str(exc)) from exc
    if kw.get("data") and kw.get("synth"):
        raise ConfigError("give either data or synth, not both")
    return RunSpec(**kw)


# -------------------------------------------------------------- protocol

def load_cohort(spec: RunSpec) -> Cohort:
    if spec.data:
        try:
            table, semi = load_csv(spec.data, spec.label_col, spec.unlabeled_token)
        except MatchADError as exc:
            exc.args = (f"{spec.data}: {exc}",)
            raise
    else:
        table, semi = synth_generate(spec.synth or reference_cohort())
    X, _, kept, names = preprocess(table)
    return Cohort(X, semi.take(kept), names, table.n - kept.size)


def protocol_labels(semi: SemiLabels, keep: float, test_fraction: float, seed: int):
    """Split labeled rows, hide test labels, then mask within the training part.

    Returns ``(masked SemiLabels, train_idx, test_idx)``.
    """
    train, test = stratified_split(semi, test_fraction, seed)
    base = np.full(semi.n, UNLABELED)
    base[train] = semi.labels[train]
    return mask_labels(semi.with_labels(base), keep, seed), train, test


def run_once(cohort: Cohort, spec: RunSpec, seed: int, joint: JointConfig | None = None,
             keep: float | None = None, return_model: bool = False):
    joint = spec.joint if joint is None else joint
    keep = spec.keep if keep is None else keep
    if joint.k_neighbors >= cohort.semi.n:
        raise KTooLarge(f"k={joint.k_neighbors} requires k < n={cohort.semi.n}")
    masked, train, test = protocol_labels(cohort.semi, keep, spec.test_fraction, seed)
    model = fit(cohort.X, masked, TrainConfig(epochs=spec.epochs, seed=seed), joint)
    c = cohort.semi.class_count
    truth = cohort.semi.labels
    result = {
        "seed": seed,
        "n_labeled": masked.labeled_count,
        "n_train": int(train.size),
        "n_test": int(test.size),
        "metrics": evaluate(truth[test], model.labels[test], c).to_dict(),
        "train_accuracy": evaluate(truth[train], model.labels[train], c).accuracy,
        "outer_iterations": len(model.trace),
        "stopped_by_eps_y": model.stopped_by_eps_y,
    }
    return (result, model) if return_model else result


def _grid_task(args):
    cohort, spec, seed, joint, keep = args
    try:
        return run_once(cohort, spec, seed, joint, keep)
    except KTooLarge as exc:
        return {"seed": seed, "error": f"KTooLarge: {exc}"}


def _map(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_grid_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_grid_task, tasks))


# ---------------------------------------------------------------- sweeps

def sweep_columns(key: str, repeats: int) -> list[str]:
    cols = [key, "n_samples"]
    for name, _ in METRIC_COLUMNS + (("train_accuracy", None),):
        cols.append(f"{name}_mean")
        if repeats > 1:
            cols.append(f"{name}_std")
    return cols + ["n_train", "error"]


def _aggregate(key: str, value, results: list[dict], repeats: int) -> dict:
    row = {key: value}
    ok = [r for r in results if "error" not in r]
    if not ok:
        row["error"] = results[0]["error"]
        return row
    row["n_samples"] = ok[0]["n_labeled"]
    series = {name: [r["metrics"][m] for r in ok] for name, m in METRIC_COLUMNS}
    series["train_accuracy"] = [r["train_accuracy"] for r in ok]
    for name, vals in series.items():
        row[f"{name}_mean"] = float(np.mean(vals))
        if repeats > 1:
            row[f"{name}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    row["n_train"] = ok[0]["n_train"]
    row["error"] = ""
    return row


def monotonicity(values) -> dict:
    """Drops between consecutive grid points of a curve in percentage points."""
    pts = [100.0 * v for v in values]
    drops = [(i, pts[i] - pts[i + 1]) for i in range(len(pts) - 1)
             if pts[i] - pts[i + 1] > INVERSION_TOL]
    return {
        "gain_pp": pts[-1] - pts[0] if pts else 0.0,
        "inversions": len(drops),
        "max_drop_pp": max((d for _, d in drops), default=0.0),
        "inversion_positions": [i for i, _ in drops],
    }


@dataclass
class SweepReport:
    kind: str
    columns: list[str]
    rows: list[dict]
    runs: list[dict]
    summary: dict
    config: dict

    def to_dict(self) -> dict:
        return {"command": f"sweep-{self.kind}", "config": self.config, "columns": self.columns,
                "rows": self.rows, "runs": self.runs, "summary": self.summary}

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_json(directory / "sweep.json", self.to_dict())
        with open(directory / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, restval="", lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows)


def cmd_sweep(spec: RunSpec, kind: str, grid=None, cohort: Cohort | None = None) -> SweepReport:
    """Run ``kind`` in {"labels", "alpha", "k"} over its grid and repeat seeds."""
    if kind not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep {kind!r}")
    default = {"labels": LABEL_GRID, "alpha": ALPHA_GRID, "k": K_GRID}[kind]
    grid = tuple(grid if grid is not None else spec.grid if spec.grid is not None else default)
    if not grid:
        raise ConfigError("empty grid")
    cohort = cohort or load_cohort(spec)
    points = []
    for g in grid:
        if kind == "labels":
            if not 0 < g <= 100:
                raise ConfigError(f"label percentages must lie in (0, 100], got {g}")
            points.append((int(g) if float(g).is_integer() else g, spec.joint, g / 100.0))
        elif kind == "alpha":
            points.append((g, replace(spec.joint, alpha=float(g)), spec.keep))
        else:
            points.append((int(g), replace(spec.joint, k_neighbors=int(g)), spec.keep))
    tasks = [(cohort, spec, seed, joint, keep) for _, joint, keep in points for seed in spec.seeds]
    results = _map(tasks, spec.jobs)
    key = SWEEP_KEYS[kind]
    rows, runs = [], []
    r = len(spec.seeds)
    for i, (value, _, _) in enumerate(points):
        chunk = results[i * r:(i + 1) * r]
        rows.append(_aggregate(key, value, chunk, spec.repeats))
        runs.extend({key: value, **res} for res in chunk)
    ok = [row for row in rows if not row.get("error")]
    if kind == "labels":
        summary = monotonicity([row["accuracy_mean"] for row in ok])
    else:
        best = max(ok, key=lambda row: row["kappa_mean"]) if ok else None
        summary = {"best": best[key] if best else None,
                   "best_kappa": best["kappa_mean"] if best else None}
    summary["failed_points"] = [row[key] for row in rows if row.get("error")]
    report = SweepReport(kind, sweep_columns(key, spec.repeats), rows, runs, summary,
                         spec.resolved())
    if spec.out:
        report.write(spec.out)
    return report


def cmd_sweep_labels(spec: RunSpec, grid=LABEL_GRID, cohort=None) -> SweepReport:
    return cmd_sweep(spec, "labels", grid, cohort)


def cmd_sweep_alpha(spec: RunSpec, grid=ALPHA_GRID, cohort=None) -> SweepReport:
    return cmd_sweep(spec, "alpha", grid, cohort)


def cmd_sweep_k(spec: RunSpec, grid=K_GRID, cohort=None) -> SweepReport:
    return cmd_sweep(spec, "k", grid, cohort)


# ------------------------------------------------------------ run / misc

def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(spec: RunSpec, cohort: Cohort | None = None) -> dict:
    """One seeded fit; writes ``report.json``, ``trace.json`` and ``model/``."""
    cohort = cohort or load_cohort(spec)
    result, model = run_once(cohort, spec, spec.seed, return_model=True)
    report = {"command": "run", "config": spec.resolved(), "n_rows": int(cohort.semi.n),
              "n_removed": int(cohort.removed), "class_names": cohort.semi.class_names, **result}
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", report)
        _write_json(out / "trace.json", model.trace)
        save_model(model, out / "model")
    return report


def majority_class(labels, class_count: int) -> int:
    """Most frequent labeled class; ties go to the lowest id."""
    labels = np.asarray(labels)
    return int(np.argmax(np.bincount(labels[labels != UNLABELED], minlength=class_count)))


def knn_classify(X_train, y_train, X_query, k: int, class_count: int) -> np.ndarray:
    """Plain majority vote of the ``k`` nearest training rows (Euclidean,
    stable order); vote ties go to the lowest class id."""
    X_train = np.asarray(X_train, dtype=float)
    X_query = np.asarray(X_query, dtype=float)
    k = min(k, X_train.shape[0])
    d2 = (np.einsum("ij,ij->i", X_query, X_query)[:, None]
          + np.einsum("ij,ij->i", X_train, X_train)[None, :] - 2.0 * X_query @ X_train.T)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = np.asarray(y_train)[order]
    return np.array([np.argmax(np.bincount(v, minlength=class_count)) for v in votes])


def cmd_baseline(spec: RunSpec, cohort: Cohort | None = None) -> dict:
    """Majority class, k-NN and propagation on the scaled input features,
    all under the run protocol with ``spec.seed``."""
    cohort = cohort or load_cohort(spec)
    masked, _, test = protocol_labels(cohort.semi, spec.keep, spec.test_fraction, spec.seed)
    c = cohort.semi.class_count
    truth = cohort.semi.labels[test]
    known = masked.labeled_mask
    k = spec.joint.k_neighbors
    preds = {
        "majority": np.full(test.size, majority_class(masked.labels, c)),
        "knn": knn_classify(cohort.X[known], masked.labels[known], cohort.X[test], k, c),
        "propagation_raw": propagate_raw(cohort.X, masked, spec.joint.alpha, k).labels[test],
    }
    report = {"command": "baseline", "config": spec.resolved(), "seed": spec.seed,
              "n_labeled": masked.labeled_count, "n_test": int(test.size),
              "methods": {name: evaluate(truth, p, c).to_dict() for name, p in preds.items()}}
    if spec.out:
        Path(spec.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(spec.out) / "baseline.json", report)
    return report


def cmd_synth_dump(spec: RunSpec, path) -> Path:
    """Write the synthetic cohort as a CSV readable by ``load_csv``."""
    table, semi = synth_generate(spec.synth or reference_cohort())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(table.feature_names) + [spec.label_col])
        for i in range(table.n):
            cells = ["NaN" if table.missing[i, j] else repr(float(table.values[i, j]))
                     for j in range(table.d)]
            writer.writerow(cells + [int(semi.labels[i])])
    return path


# ------------------------------------------------------------------ main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--data", help="CSV file with a header row")
    common.add_argument("--label-col", dest="label_col")
    common.add_argument("--unlabeled-token", dest="unlabeled_token")
    common.add_argument("--synth", help="key=value synthetic cohort file")
    common.add_argument("--keep", help="fraction of training labels kept, in (0, 1]")
    common.add_argument("--test-fraction", dest="test_fraction")
    common.add_argument("--alpha")
    common.add_argument("--k")
    common.add_argument("--betas", help="beta1,beta2,beta3")
    common.add_argument("--lambda-ot", dest="lambda_ot")
    common.add_argument("--t-outer", dest="t_outer")
    common.add_argument("--epochs")
    common.add_argument("--seed")
    common.add_argument("--repeats")
    common.add_argument("--jobs")
    common.add_argument("--grid", help="comma-separated sweep values (label sweep in percent)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="matchad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("run", "single seeded fit and evaluation"),
                       ("sweep-labels", "accuracy against the fraction of kept labels"),
                       ("sweep-alpha", "sensitivity to the propagation weight"),
                       ("sweep-k", "sensitivity to the neighborhood size"),
                       ("baseline", "majority, k-NN and raw-feature propagation"),
                       ("synth-dump", "write the synthetic cohort as CSV")]:
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _options(args) -> dict:
    options = read_key_values(args.config) if args.config else {}
    for key in OPTION_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    return options


def _print_sweep(report: SweepReport) -> None:
    cols = [c for c in report.columns if c != "error"]
    print("  ".join(cols))
    for row in report.rows:
        if row.get("error"):
            print(f"{row[cols[0]]}  error: {row['error']}")
            continue
        print("  ".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c])
                        for c in cols))
    print(json.dumps(report.summary, sort_keys=True))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_options(_options(args))
        if args.command == "run":
            report = cmd_run(spec)
            m = report["metrics"]
            print(f"accuracy {m['accuracy']:.4f}  kappa {m['kappa']:.4f}  "
                  f"f1 {m['f1_weighted']:.4f}  labeled {report['n_labeled']}  "
                  f"test {report['n_test']}")
        elif args.command.startswith("sweep-"):
            _print_sweep(cmd_sweep(spec, args.command[len("sweep-"):]))
        elif args.command == "baseline":
            report = cmd_baseline(spec)
            rows = [(name, MetricsReport(**m)) for name, m in report["methods"].items()]
            print(format_table(rows))
        else:
            path = cmd_synth_dump(spec, Path(spec.out or ".") / "cohort.csv")
            print(path)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (MatchADError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
