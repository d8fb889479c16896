"""Experiment configs, method x seed run grids, persisted histories and summaries.

Layout of an output directory::

    manifest.json           resolved config, one entry per run, checksums
    <label>_<seed>.jsonl    one IterationRecord per line
    summary.csv             written by summarize
    curves.csv              written by summarize

The config schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from abo import influence, objectives, optimizer
from abo.acquisition import AcquisitionConfig
from abo.objectives import ObjectiveSpec
from abo.optimizer import IterationRecord, OptimizerConfig, RunHistory
from abo.similarity import SimilaritySpec

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SEED_OFFSET_ENV = "ABO_SEED_OFFSET"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_PARSE = 2
EXIT_INVALID = 3
EXIT_NAN = 4
EXIT_REFUSED = 5

_SECTIONS = ("similarity", "acquisition", "objective")
_METHOD_KEYS = {
    "label", "method", "budget", "init_design_size", "lo", "hi",
    "rank_tol", "gp_random_starts", "normalize_y", *_SECTIONS,
}
_TOP_KEYS = {"name", "seeds", "output_dir", "defaults", "methods", *_SECTIONS}


class ConfigParseError(Exception):
    pass


class ConfigValidationError(Exception):
    pass


@dataclass(frozen=True)
class MethodConfig:
    label: str
    optimizer: OptimizerConfig
    objective: ObjectiveSpec

    def with_seed(self, seed: int) -> OptimizerConfig:
        return replace(self.optimizer, seed=seed)

    def to_dict(self) -> dict:
        c = self.optimizer
        return {
            "label": self.label,
            "method": c.method,
            "budget": c.budget,
            "init_design_size": c.init_design_size,
            "lo": list(c.lo),
            "hi": list(c.hi),
            "rank_tol": c.rank_tol,
            "gp_random_starts": c.gp_random_starts,
            "normalize_y": c.normalize_y,
            "similarity": c.similarity.to_dict(),
            "acquisition": c.acquisition.to_dict(),
            "objective": self.objective.to_dict(),
        }


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    methods: tuple[MethodConfig, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    seed_offset: int = 0

    @property
    def run_seeds(self) -> list[int]:
        return [s + self.seed_offset for s in self.seeds]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "seed_offset": self.seed_offset,
            "methods": [m.to_dict() for m in self.methods],
        }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def method_from_dict(d: dict) -> MethodConfig:
    """Build one method from a fully merged table; raises ConfigValidationError."""
    extra = set(d) - _METHOD_KEYS
    if extra:
        raise ConfigValidationError(f"unknown method keys: {sorted(extra)}")
    try:
        label = str(d["label"])
        opt = OptimizerConfig(
            lo=d["lo"],
            hi=d["hi"],
            budget=int(d.get("budget", 30)),
            init_design_size=int(d.get("init_design_size", 5)),
            method=str(d.get("method", "abo")),
            similarity=SimilaritySpec.from_dict(d.get("similarity", {})),
            acquisition=AcquisitionConfig.from_dict(d.get("acquisition", {})),
            rank_tol=float(d.get("rank_tol", influence.DEFAULT_RANK_TOL)),
            gp_random_starts=int(d.get("gp_random_starts", 10)),
            normalize_y=bool(d.get("normalize_y", True)),
        )
        obj = ObjectiveSpec.from_dict(d.get("objective", {}))
    except KeyError as exc:
        raise ConfigValidationError(f"missing key {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(str(exc)) from None
    if obj.variant == "quadratic" and len(obj.center) not in (0, len(opt.lo)):
        raise ConfigValidationError("objective.center must match the box dimension")
    if obj.variant == "branin_negated" and len(opt.lo) != 2:
        raise ConfigValidationError("branin_negated is two dimensional")
    if obj.variant == "mc_expectation":
        # the symkl box floors variances at sigma_min; other similarities need lo > 0
        k = len(opt.lo) // 2
        if len(opt.lo) % 2 or (opt.similarity.variant != "symkl" and min(opt.lo[k:]) <= 0):
            raise ConfigValidationError("mc_expectation needs [mean; variance] coordinates with variance > 0")
    return MethodConfig(label, opt, obj)


def parse_config(data: dict, base_dir: Path, seed_offset: int = 0) -> ExperimentConfig:
    extra = set(data) - _TOP_KEYS
    if extra:
        raise ConfigValidationError(f"unknown top-level keys: {sorted(extra)}")
    defaults = dict(data.get("defaults", {}))
    for section in _SECTIONS:
        if section in data:
            defaults[section] = _merge(defaults.get(section, {}), data[section])
    methods = tuple(method_from_dict(_merge(defaults, m)) for m in data.get("methods", []))
    if not methods:
        raise ConfigValidationError("at least one [[methods]] entry is required")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigValidationError(f"method labels must be unique: {labels}")
    seeds = data.get("seeds", [])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigValidationError("seeds must be a non-empty list of integers")
    out = Path(data.get("output_dir", "results"))
    if not out.is_absolute():
        out = (base_dir / out).resolve()
    return ExperimentConfig(str(data.get("name", "experiment")), methods, tuple(seeds), out, seed_offset)


def seed_offset_from_env() -> int:
    raw = os.environ.get(SEED_OFFSET_ENV, "0").strip() or "0"
    try:
        return int(raw)
    except ValueError:
        raise ConfigValidationError(f"{SEED_OFFSET_ENV} must be an integer, got {raw!r}") from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    return parse_config(data, path.parent, seed_offset_from_env())


# --- histories ------------------------------------------------------------------


def history_name(label: str, seed: int) -> str:
    return f"{label}_{seed}.jsonl"


def dump_history(history: RunHistory) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in history.records)


def parse_history(text: str) -> RunHistory:
    return RunHistory([IterationRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_one(method: dict, seed: int) -> tuple[str, int, str, str]:
    """Worker entry point; takes and returns plain data so it pickles cheaply."""
    m = method_from_dict(method)
    objective = objectives.make_objective(m.objective)
    status, message = "ok", ""
    try:
        history = optimizer.run(objective, m.with_seed(seed))
    except optimizer.OptimizationAborted as exc:
        history, status, message = exc.history, "nan_abort", str(exc)
    return dump_history(history), seed, status, message


@dataclass
class RunOutcome:
    code: int
    written: list[Path] = field(default_factory=list)
    message: str = ""


def planned_files(config: ExperimentConfig) -> list[Path]:
    return [
        config.output_dir / history_name(m.label, s)
        for m in config.methods
        for s in config.run_seeds
    ]


def run_experiment(config: ExperimentConfig, force: bool = False, jobs: int = 1) -> RunOutcome:
    out = config.output_dir
    targets = planned_files(config) + [out / MANIFEST]
    existing = [p for p in targets if p.exists()]
    if existing and not force:
        return RunOutcome(EXIT_REFUSED, message=f"refusing to overwrite {len(existing)} file(s) in {out}; use --force")
    out.mkdir(parents=True, exist_ok=True)

    grid = [(m, s) for m in config.methods for s in config.run_seeds]
    payload = [(m.to_dict(), s) for m, s in grid]
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, *zip(*payload)))
    else:
        results = [_run_one(d, s) for d, s in payload]

    runs, written = [], []
    for (m, seed), (text, _, status, message) in zip(grid, results):
        path = out / history_name(m.label, seed)
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)
        history = parse_history(text)
        if status != "ok":
            logger.warning("%s seed %d: %s", m.label, seed, message)
        runs.append({
            "label": m.label,
            "method": m.optimizer.method,
            "seed": seed,
            "file": path.name,
            "sha256": _sha256(path),
            "status": status,
            "evaluations": history.evaluations,
            "final_best": history.best,
        })
    partial = any(r["status"] != "ok" for r in runs)
    manifest = {
        "name": config.name,
        "status": "partial" if partial else "complete",
        "config": config.to_dict(),
        "runs": runs,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
    written.append(out / MANIFEST)
    return RunOutcome(EXIT_NAN if partial else EXIT_OK, written)


# --- summaries ------------------------------------------------------------------


@dataclass
class SummaryTable:
    finals: dict[str, dict[int, float]] = field(default_factory=dict)
    evals: dict[str, dict[int, int]] = field(default_factory=dict)
    curves: dict[str, list[tuple[int, float, float, float]]] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def stats(self, label: str) -> tuple[float, float, float]:
        """(median, q25, q75) of the final best across seeds."""
        v = np.array(list(self.finals[label].values()))
        return float(np.median(v)), float(np.percentile(v, 25)), float(np.percentile(v, 75))


def summarize(directory: str | os.PathLike) -> SummaryTable:
    """Read the manifest and histories under ``directory`` and write the CSVs.

    Missing, unreadable or checksum-mismatched histories are listed in
    ``skipped`` and left out. Raises FileNotFoundError without a manifest.
    """
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    table = SummaryTable()
    per_round: dict[str, dict[int, list[float]]] = {}
    for run in manifest["runs"]:
        path = directory / run["file"]
        if not path.exists():
            table.skipped.append((run["file"], "missing"))
            continue
        if _sha256(path) != run.get("sha256"):
            table.skipped.append((run["file"], "checksum mismatch"))
            continue
        try:
            history = parse_history(path.read_text(encoding="utf-8"))
        except (ValueError, KeyError, TypeError) as exc:
            table.skipped.append((run["file"], f"corrupt: {exc}"))
            continue
        if not history.records:
            table.skipped.append((run["file"], "empty"))
            continue
        label, seed = run["label"], int(run["seed"])
        table.finals.setdefault(label, {})[seed] = history.best
        table.evals.setdefault(label, {})[seed] = history.evaluations
        rounds = per_round.setdefault(label, {})
        for rec in history.records:
            rounds.setdefault(rec.round, []).append(rec.best_so_far)

    for label, rounds in per_round.items():
        rows = []
        for r in sorted(rounds):
            v = np.array(rounds[r])
            rows.append((r, float(np.median(v)), float(np.percentile(v, 25)), float(np.percentile(v, 75))))
        table.curves[label] = rows

    with open(directory / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "final_best", "evals"])
        for label in sorted(table.finals):
            for seed in sorted(table.finals[label]):
                w.writerow([label, seed, repr(table.finals[label][seed]), table.evals[label][seed]])
    with open(directory / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "round", "median_best", "q25", "q75"])
        for label in sorted(table.curves):
            for r, med, q25, q75 in table.curves[label]:
                w.writerow([label, r, repr(med), repr(q25), repr(q75)])
    return table


def format_table(table: SummaryTable) -> str:
    lines = [f"{'method':<20} {'seeds':>5} {'median':>12} {'q25':>12} {'q75':>12}"]
    for label in sorted(table.finals):
        med, q25, q75 = table.stats(label)
        lines.append(f"{label:<20} {len(table.finals[label]):>5} {med:>12.6g} {q25:>12.6g} {q75:>12.6g}")
    return "\n".join(lines)
