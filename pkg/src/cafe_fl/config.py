"""Experiment configuration: TOML parsing and whole-file validation.

Layout (every key optional unless marked)::

    seeds = [0, 1, 2]
    output_dir = "runs/cafe"
    participation = "all"            # or one Bernoulli probability per client
    baseline_method = "fedavg"       # FATE reference, run alongside each seed
    fate_metric = "f1"               # or "accuracy"

    [method]                         # MethodConfig fields
    method = "cafe"
    alpha = 0.92

    [model]
    layer_widths = [8, 16, 1]        # required
    hidden_activation = "tanh"
    output = "sigmoid-binary"

    [data]                           # either a CSV dataset ...
    path = "data.csv"
    # ... or the synthetic generator
    fixture = "disparity"            # preset; explicit generator keys override it
    n_total = 1500
    seed = 0                         # default: the run seed

    [partition]
    mode = "multi_person"
    client_compositions = [[4, 1], [4, 1]]   # required
    train_ratio = 0.8
    shuffle = true

Validation reports every violation at once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import PartitionSpec, SyntheticSpec, disparity_fixture
from .errors import ConfigError, InputError
from .nn import MlpSpec
from .protocol import METHODS, MethodConfig

TOP_KEYS = {"seeds", "output_dir", "participation", "baseline_method", "fate_metric", "method", "model", "data", "partition"}
MODEL_KEYS = {"layer_widths", "hidden_activation", "output"}
DATA_KEYS = {
    "path", "fixture", "seed", "dim", "group_means", "label_noise", "group_ratio", "n_total",
    "n_persons", "person_scale", "noise_scale", "positive_rate",
}
FIXTURES = ("disparity",)
PARTITION_KEYS = {f.name for f in dataclasses.fields(PartitionSpec)}
METHOD_KEYS = {f.name for f in dataclasses.fields(MethodConfig)}


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    synthetic: SyntheticSpec | None = None
    seed: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    method: MethodConfig
    model: MlpSpec
    data: DataConfig
    partition: PartitionSpec
    seeds: tuple[int, ...] = (0,)
    participation: tuple[float, ...] | None = None
    baseline_method: str = "fedavg"
    fate_metric: str = "f1"
    output_dir: str = "runs/experiment"
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        """Canonical, fully-populated form used for the manifest and its hash."""
        syn = self.data.synthetic
        return {
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "participation": "all" if self.participation is None else list(self.participation),
            "baseline_method": self.baseline_method,
            "fate_metric": self.fate_metric,
            "method": dataclasses.asdict(self.method),
            "model": {
                "layer_widths": list(self.model.layer_widths),
                "hidden_activation": self.model.hidden_activation,
                "output": self.model.output,
            },
            "data": {
                "path": self.data.path,
                "seed": self.data.seed,
                "synthetic": None if syn is None else _jsonable(dataclasses.asdict(syn)),
            },
            "partition": _jsonable(dataclasses.asdict(self.partition)),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def _unknown(section: str, given: dict, allowed: set) -> list[str]:
    prefix = f"{section}." if section else ""
    return [f"{prefix}{k}: unknown key" for k in sorted(set(given) - allowed)]


def _table(raw: dict, key: str, problems: list[str]) -> dict:
    val = raw.get(key, {})
    if not isinstance(val, dict):
        problems.append(f"{key}: must be a table")
        return {}
    return val


def build_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed config mapping; raise ConfigError listing every problem."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    problems += _unknown("", raw, TOP_KEYS)

    # method
    mraw = _table(raw, "method", problems)
    problems += _unknown("method", mraw, METHOD_KEYS)
    method = None
    try:
        method = MethodConfig(**{k: v for k, v in mraw.items() if k in METHOD_KEYS})
        problems += [f"method.{p}" for p in method.problems()]
    except TypeError as exc:
        method = None
        problems.append(f"method: {exc}")

    # model
    model_raw = _table(raw, "model", problems)
    problems += _unknown("model", model_raw, MODEL_KEYS)
    model = None
    if "layer_widths" not in model_raw:
        problems.append("model.layer_widths: required")
    else:
        try:
            model = MlpSpec(tuple(model_raw["layer_widths"]), model_raw.get("hidden_activation", "tanh"), model_raw.get("output", "sigmoid-binary"))
            if model.layer_widths[-1] != 1:
                problems.append("model.layer_widths: last width must be 1 (binary output)")
        except (InputError, TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")

    # data
    draw = _table(raw, "data", problems)
    problems += _unknown("data", draw, DATA_KEYS)
    data_cfg = None
    seed = draw.get("seed")
    if seed is not None and not isinstance(seed, int):
        problems.append("data.seed: must be an integer")
    if "path" in draw:
        extra = sorted(set(draw) - {"path", "seed"})
        if extra:
            problems.append(f"data: 'path' cannot be combined with generator keys {extra}")
        path = Path(draw["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            problems.append(f"data.path: file not found: {path}")
        data_cfg = DataConfig(path=str(path), seed=seed)
    else:
        fixture = draw.get("fixture", "disparity")
        if fixture not in FIXTURES:
            problems.append(f"data.fixture: must be one of {FIXTURES}, got {fixture!r}")
        else:
            gen_keys = {k: v for k, v in draw.items() if k not in ("fixture", "seed")}
            try:
                base = disparity_fixture(
                    n_total=gen_keys.get("n_total", 1500),
                    n_persons=tuple(gen_keys.get("n_persons", (20, 5))),
                    dim=gen_keys.get("dim", 8),
                )
                for k in ("label_noise", "n_persons"):
                    if k in gen_keys:
                        gen_keys[k] = tuple(gen_keys[k])
                data_cfg = DataConfig(synthetic=dataclasses.replace(base, **gen_keys), seed=seed)
            except (InputError, TypeError, ValueError, IndexError) as exc:
                problems.append(f"data: {exc}")

    # partition
    praw = _table(raw, "partition", problems)
    problems += _unknown("partition", praw, PARTITION_KEYS)
    partition = None
    if "client_compositions" not in praw:
        problems.append("partition.client_compositions: required")
    else:
        try:
            comps = tuple(tuple(int(x) for x in c) for c in praw["client_compositions"])
            if any(len(c) != 2 for c in comps):
                problems.append("partition.client_compositions: each entry must be [group0_persons, group1_persons]")
            partition = PartitionSpec(**{**praw, "client_compositions": comps})
            problems += [f"partition.{p}" for p in partition.problems()]
        except (TypeError, ValueError) as exc:
            problems.append(f"partition: {exc}")

    # top level
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        problems.append("seeds: must be a non-empty list of non-negative integers")
        seeds = [0]
    participation = raw.get("participation", "all")
    part = None
    if participation != "all":
        if not isinstance(participation, list) or not all(isinstance(p, (int, float)) and 0 <= p <= 1 for p in participation):
            problems.append("participation: must be 'all' or a list of probabilities in [0, 1]")
        else:
            part = tuple(float(p) for p in participation)
            if partition is not None and len(part) != len(partition.client_compositions):
                problems.append("participation: need one probability per client")
    baseline = raw.get("baseline_method", "fedavg")
    if baseline not in METHODS:
        problems.append(f"baseline_method: must be one of {METHODS}, got {baseline!r}")
    fate_metric = raw.get("fate_metric", "f1")
    if fate_metric not in ("f1", "accuracy"):
        problems.append(f"fate_metric: must be 'f1' or 'accuracy', got {fate_metric!r}")
    output_dir = raw.get("output_dir", "runs/experiment")
    if not isinstance(output_dir, str):
        problems.append("output_dir: must be a string")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        method=method,
        model=model,
        data=data_cfg,
        partition=partition,
        seeds=tuple(seeds),
        participation=part,
        baseline_method=baseline,
        fate_metric=fate_metric,
        output_dir=output_dir,
        raw=raw,
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(raw, base_dir=path.parent)
