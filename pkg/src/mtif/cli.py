"""Command-line pipeline: gen -> train -> influence -> oracle -> eval -> select.

Every stage reads one JSON run config and writes into the output directory.
Each output names the hash of the config that produced it, and a stage
refuses upstream files that carry a different hash. Randomness comes from
``global_seed`` through :func:`stage_seed`.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    MtlDataset,
    SyntheticConfig,
    corrupt_labels,
    file_sha256,
    generate_synthetic,
    load_csv,
    meta_path,
    pca_reduce,
    save_csv,
)
from .errors import ConfigHashMismatch, InvalidConfig, MissingInput, MtifError, SchemaError
from .eval import instance_protocol, loto_protocol, matched_pairs, pearson, scatter_export
from .influence import InfluenceMatrix, MultitaskInfluence
from .models import KINDS, ModelSpec, MtlParams
from .oracle import LooRecord, loo_all, loto_all
from .selection import DEFAULT_GRID, select_and_retrain
from .trainer import FitResult, SolverConfig, fit

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.csv"
MODEL_FILE = "model.json"
SCORES_FILE = "scores.csv"
TASK_SCORES_FILE = "task_scores.csv"
ORACLE_FILE = "oracle.csv"
LOTO_FILE = "loto.csv"
SCATTER_FILE = "scatter.csv"
EVAL_FILE = "eval.json"
SELECTION_FILE = "selection.json"
SELECTED_MODEL_FILE = "selected_model.json"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def stage_seed(global_seed: int, stage: str) -> int:
    """64-bit seed from ``sha256("<global_seed>:<stage>")``."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# Config


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ridge_linear"
    lam: float = 1.0
    lambdas: tuple | None = None  # per-task override of lam


@dataclass(frozen=True)
class SyntheticSection:
    """Generator settings; the generator seed comes from ``global_seed``."""

    K: int = 10
    n: int = 200
    d: int = 50
    delta: float = 1.0
    alpha: float = 0.0
    noise_sd: float = 1.0
    labels: str = "regression"


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSection | None = field(default_factory=SyntheticSection)
    csv: str | None = None  # ingest this file instead of generating
    pca_dim: int | None = None
    corrupt_fraction: float = 0.0


@dataclass(frozen=True)
class InfluenceConfig:
    targets: tuple | None = None
    renormalize: bool = False  # oracle: delete sample and use n_k - 1


@dataclass(frozen=True)
class SelectionConfig:
    grid: tuple = DEFAULT_GRID
    flip_sign: bool = False


@dataclass(frozen=True)
class EvalConfig:
    n_seeds: int = 5
    protocols: tuple = ("instance", "loto")
    val_fraction: float = 0.2


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "solver": SolverConfig,
    "influence": InfluenceConfig,
    "selection": SelectionConfig,
    "eval": EvalConfig,
}


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidConfig(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if cls is DataConfig and key == "synthetic" and value is not None:
            value = _build(SyntheticSection, value, f"{where}.synthetic")
        kwargs[key] = _tuples(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "out"
    global_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model.kind not in KINDS:
            raise InvalidConfig(f"model.kind must be one of {KINDS}")
        if self.data.csv is None and self.data.synthetic is None:
            raise InvalidConfig("data needs either a synthetic section or a csv path")
        syn = self.data.synthetic
        if self.data.csv is None and syn is not None:
            SyntheticConfig(**asdict(syn)).validate()
            want = "binary" if self.model.kind == "soft_logistic" else "regression"
            if syn.labels != want:
                raise InvalidConfig(f"{self.model.kind} needs {want} labels, config has {syn.labels!r}")
        if not 0 <= self.data.corrupt_fraction <= 1:
            raise InvalidConfig("data.corrupt_fraction must lie in [0, 1]")
        if self.data.corrupt_fraction and self.model.kind != "soft_logistic":
            raise InvalidConfig("label corruption needs binary labels")
        if not self.selection.grid or any(not 0 <= f <= 0.5 for f in self.selection.grid):
            raise InvalidConfig("selection.grid must be nonempty with values in [0, 0.5]")
        if self.eval.n_seeds < 1 or not 0 < self.eval.val_fraction < 1:
            raise InvalidConfig("eval.n_seeds must be positive and eval.val_fraction in (0, 1)")
        bad = set(self.eval.protocols) - {"instance", "loto"}
        if bad:
            raise InvalidConfig(f"unknown eval protocols {sorted(bad)}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown top-level keys: {sorted(unknown)}")
        kwargs = {k: _build(_SECTIONS[k], v, k) if k in _SECTIONS else v for k, v in raw.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"config file not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def model_spec(self, K: int, d: int) -> ModelSpec:
        if self.model.lambdas is not None:
            if len(self.model.lambdas) != K:
                raise InvalidConfig(f"model.lambdas has {len(self.model.lambdas)} entries for {K} tasks")
            return ModelSpec(self.model.kind, self.model.lambdas, d)
        return ModelSpec.uniform(self.model.kind, K, d, self.model.lam)


# Artifact IO


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"required input not found: {path}")
    return path


def _check_hash(found, expected: str, path: Path) -> None:
    if found != expected:
        raise ConfigHashMismatch(f"{path} was produced by config {found}, current config is {expected}")


def _read_json(path: Path) -> dict:
    _require(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    return raw


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(out: Path, h: str) -> MtlDataset:
    path = _require(out / DATASET_FILE)
    meta = _read_json(meta_path(path))
    _check_hash(meta.get("config_hash"), h, meta_path(path))
    return load_csv(path)


def save_model(path: Path, spec: ModelSpec, res: FitResult, h: str, extra: dict | None = None) -> None:
    _write_json(
        path,
        {
            "config_hash": h,
            "kind": spec.kind,
            "lambdas": list(spec.lambdas),
            "d": spec.d,
            "thetas": [t.tolist() for t in res.params.thetas],
            "gamma": res.params.gamma.tolist(),
            "iterations": res.iterations,
            "final_grad_norm": res.final_grad_norm,
            "converged": res.converged,
            "damping": res.damping,
            "objective": res.objective,
            **(extra or {}),
        },
    )


def load_model(path: Path, h: str) -> tuple[ModelSpec, FitResult]:
    raw = _read_json(path)
    _check_hash(raw.get("config_hash"), h, path)
    try:
        spec = ModelSpec(raw["kind"], tuple(raw["lambdas"]), int(raw["d"]))
        params = MtlParams([np.asarray(t, dtype=float) for t in raw["thetas"]], np.asarray(raw["gamma"], dtype=float))
        params.check(spec)
        res = FitResult(
            params,
            int(raw["iterations"]),
            float(raw["final_grad_norm"]),
            bool(raw["converged"]),
            float(raw.get("damping", 0.0)),
            (float(raw["objective"]),),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed model file ({exc})") from None
    return spec, res


def write_scores(path: Path, rows, h: str, source: str | None = None) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["source_task", "source_index", "target_task", "score"]
        if source is not None:
            header.append("source")
        writer.writerow(header + ["config_hash"])
        for l, i, k, s in rows:
            tail = [source] if source is not None else []
            writer.writerow([l, i, k, _fmt(s), *tail, h])


def read_score_rows(path: Path, h: str) -> list[tuple[int, int, int, float]]:
    _require(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"source_task", "source_index", "target_task", "score", "config_hash"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: missing columns, need {sorted(need)}")
        for line_no, row in enumerate(reader, start=2):
            _check_hash(row["config_hash"], h, path)
            try:
                rows.append(
                    (int(row["source_task"]), int(row["source_index"]), int(row["target_task"]), float(row["score"]))
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {line_no}: {exc}") from None
    return rows


def scores_to_matrix(rows, n_sources) -> InfluenceMatrix:
    targets = tuple(sorted({k for _, _, k, _ in rows}))
    col = {k: j for j, k in enumerate(targets)}
    blocks = [np.full((n, len(targets)), np.nan) for n in n_sources]
    try:
        for l, i, k, s in rows:
            blocks[l][i, col[k]] = s
    except IndexError:
        raise SchemaError("score file indexes samples outside the dataset") from None
    if any(np.isnan(b).any() for b in blocks):
        raise SchemaError("score file does not cover every (sample, target) pair")
    return InfluenceMatrix(tuple(blocks), targets)


# Stages


def cmd_gen(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": h}
    if cfg.data.csv is not None:
        ds = load_csv(cfg.data.csv)
        meta["source_sha256"] = ds.provenance["sha256"]
    else:
        syn = SyntheticConfig(**asdict(cfg.data.synthetic), seed=stage_seed(cfg.global_seed, "gen"))
        ds = generate_synthetic(syn)
        meta["synthetic"] = asdict(syn)
        meta["replaced_tasks"] = ds.provenance["replaced_tasks"]
    if cfg.data.pca_dim is not None:
        ds = pca_reduce(ds, cfg.data.pca_dim)
        meta["pca_dim"] = cfg.data.pca_dim
    if cfg.data.corrupt_fraction > 0:
        ds, flipped = corrupt_labels(ds, cfg.data.corrupt_fraction, stage_seed(cfg.global_seed, "corrupt"))
        meta["corrupted"] = sorted([l, i] for l, i in flipped)
    meta["K"], meta["d"], meta["n_train"] = ds.K, ds.d, ds.n_train()
    save_csv(ds, out / DATASET_FILE, meta)


def cmd_train(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    ds = load_dataset(out, h)
    spec = cfg.model_spec(ds.K, ds.d)
    res = fit(spec, ds, cfg=cfg.solver)
    save_model(out / MODEL_FILE, spec, res, h, {"dataset_sha256": file_sha256(out / DATASET_FILE)})


def _targets(cfg: RunConfig, K: int) -> tuple:
    t = tuple(range(K)) if cfg.influence.targets is None else tuple(int(k) for k in cfg.influence.targets)
    if any(not 0 <= k < K for k in t):
        raise InvalidConfig(f"influence.targets must index the {K} tasks")
    return t


def cmd_influence(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    ds = load_dataset(out, h)
    spec, res = load_model(out / MODEL_FILE, h)
    model = MultitaskInfluence(spec, ds, res)
    targets = _targets(cfg, ds.K)
    write_scores(out / SCORES_FILE, model.scores(targets).rows(), h)
    ta = model.task_scores(targets)
    rows = [(l, -1, k, ta.scores[l, k]) for l in range(ds.K) for k in targets]
    _write_task_scores(out / TASK_SCORES_FILE, rows, h)


def _write_task_scores(path: Path, rows, h: str, source: str | None = None) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_task", "target_task", "score"] + (["source"] if source else []) + ["config_hash"])
        for l, _, k, s in rows:
            writer.writerow([l, k, _fmt(s), *([source] if source else []), h])


def cmd_oracle(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    ds = load_dataset(out, h)
    spec, res = load_model(out / MODEL_FILE, h)
    targets = _targets(cfg, ds.K)
    records = loo_all(spec, ds, cfg.solver, targets, base=res, jobs=jobs, renormalize=cfg.influence.renormalize)
    write_scores(out / ORACLE_FILE, [(r.source_task, r.source_index, r.target, r.delta) for r in records], h, "oracle")
    if ds.K >= 2:
        loto = loto_all(spec, ds, cfg.solver, targets, base=res, jobs=jobs)
        _write_task_scores(out / LOTO_FILE, [(r.source_task, -1, r.target, r.delta) for r in loto], h, "oracle")


def cmd_eval(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    ds = load_dataset(out, h)
    spec, res = load_model(out / MODEL_FILE, h)
    im = scores_to_matrix(read_score_rows(out / SCORES_FILE, h), ds.n_train())
    oracle_rows = read_score_rows(out / ORACLE_FILE, h)
    records = [LooRecord(l, i, k, s, 0) for l, i, k, s in oracle_rows]
    scatter_export(im, records, out / SCATTER_FILE, {"config_hash": h})

    report: dict = {"config_hash": h, "instance": [], "loto": None}
    if "instance" in cfg.eval.protocols:
        for k in im.targets:
            for name, keep in (("within", lambda r: r.source_task == k), ("between", lambda r: r.source_task != k)):
                sel = [r for r in records if r.target == k and keep(r)]
                r = pearson(*matched_pairs(im, sel)) if len(sel) >= 2 else None
                report["instance"].append({"target_task": k, "pairs": name, "pearson": r, "n_points": len(sel)})
    if "loto" in cfg.eval.protocols and ds.K >= 3:
        seeds = [stage_seed(cfg.global_seed, f"eval:{j}") for j in range(cfg.eval.n_seeds)]
        result = loto_protocol(spec, ds, cfg.solver, seeds, val_fraction=cfg.eval.val_fraction, jobs=jobs)
        report["loto"] = result.to_json()
    _write_json(out / EVAL_FILE, report)


def cmd_select(cfg: RunConfig, out: Path, jobs: int = 1, flip_sign: bool = False) -> None:
    h = cfg.config_hash()
    ds = load_dataset(out, h)
    spec, res = load_model(out / MODEL_FILE, h)
    im = scores_to_matrix(read_score_rows(out / SCORES_FILE, h), ds.n_train())
    meta = _read_json(meta_path(out / DATASET_FILE))
    corrupted = {tuple(p) for p in meta["corrupted"]} if "corrupted" in meta else None
    flip = flip_sign or cfg.selection.flip_sign
    best, refit, report = select_and_retrain(spec, ds, im, cfg.selection.grid, cfg.solver, corrupted, flip, res)
    _write_json(out / SELECTION_FILE, {"config_hash": h, "flip_sign": flip, **report.to_json()})
    save_model(out / SELECTED_MODEL_FILE, spec, refit, h, {"removal_fraction": best})


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "influence": cmd_influence,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
    "select": cmd_select,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtif", description="Multitask influence pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override global_seed")
        p.add_argument("--jobs", type=int, default=1, help="max concurrent retrains")
        p.add_argument("--flip-sign", action="store_true", help="remove the most negative total scores instead")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, global_seed=args.seed)
        if args.jobs < 1:
            raise InvalidConfig("--jobs must be at least 1")
        out = args.out or Path(cfg.output_dir)
        COMMANDS[args.command](cfg, out, args.jobs, args.flip_sign)
    except MtifError as exc:
        print(f"mtif {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0
