"""Experiment configuration: YAML file to nested dataclasses.

Every key has a default, so an empty file is a valid configuration. Unknown
keys, wrong types and out-of-range values are reported with the file line
and column of the offending node.

Top-level sections: ``system``, ``devices``, ``learning``, ``scheduler``,
``data``, ``run`` and ``bounds``. See README for the key list.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import SyntheticSpec
from .sysmodel import SystemConfig, db_to_linear, dbm_to_watts

POLICIES = ("lyapunov", "random-expansion", "all-feasible")
SOURCES = ("synthetic", "mnist")
SWEEP_AXES = ("V", "split_depth", "energy_budget", "t_max")


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None,
                 column: int | None = None):
        self.source, self.line, self.column = source, line, column
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {message}")


@dataclass
class SystemSection:
    bandwidth_hz: float = 10e6
    noise_dbm_per_hz: float = -174.0
    t_max: float = 2.0
    path_loss_db: float = -30.0
    path_loss_exp: float = 2.0
    ref_distance: float = 1.0
    model_bits: Optional[float] = None      # None: shared parameter count x bits_per_param

    def build(self, model_bits: float, rounds: int, tau: int) -> SystemConfig:
        return SystemConfig(bandwidth=self.bandwidth_hz,
                            noise_psd=dbm_to_watts(self.noise_dbm_per_hz),
                            t_max=self.t_max, local_iters=tau, model_bits=model_bits,
                            rounds=rounds, path_loss_const=db_to_linear(self.path_loss_db),
                            path_loss_exp=self.path_loss_exp, ref_distance=self.ref_distance)


@dataclass
class DevicesSection:
    count: int = 20
    cell_size: float = 500.0
    min_distance: float = 10.0
    energy_budget: float = 0.1
    f_max: float = 1e9
    p_max: float = 1.0
    kappa: float = 5e-27
    cycles_per_sample: Optional[float] = None     # None: total parameter count of the model
    data_size_range: list[int] = field(default_factory=lambda: [20, 60])  # without training


@dataclass
class LearningSection:
    enabled: bool = True            # false: scheduling-only simulation
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    split_depth: int = 2
    eta_u: float = 0.05
    eta_v: float = 0.05
    momentum: float = 0.9
    tau: int = 5
    batch_size: int = 0             # 0: whole shard up to 64 samples, else 32
    bits_per_param: int = 16
    eval_every: int = 1


@dataclass
class SchedulerSection:
    policy: str = "lyapunov"
    V: float = 0.01
    max_devices: int = 0            # cap for random-expansion, 0 = band-limited only
    zero_queue_weight: float = 0.0  # >0: zero-queue devices get least-energy allocations


@dataclass
class MnistPaths:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class DataSection:
    source: str = "synthetic"
    shards_per_device: int = 2
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    mnist: MnistPaths = field(default_factory=MnistPaths)


@dataclass
class RunSection:
    seeds: list[int] = field(default_factory=lambda: [0])
    rounds: int = 60
    out: str = "runs/default"
    threads: int = 1


@dataclass
class BoundsSection:
    L_u: Optional[float] = None     # supply to get A_t and bound_t columns
    L_v: float = 0.0
    chi: float = 0.0
    delta: float = 0.0
    rho: float = 0.0
    initial_gap: Optional[float] = None   # None: first loss minus best observed loss
    estimate: bool = False          # probe gradients during training and fit constants
    probe_every: int = 10


@dataclass
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    devices: DevicesSection = field(default_factory=DevicesSection)
    learning: LearningSection = field(default_factory=LearningSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"scheduler.V": 0.1})``."""
        data = self.to_dict()
        for path, value in changes.items():
            *parents, leaf = path.split(".")
            node = data
            for p in parents:
                node = node.get(p) if isinstance(node, dict) else None
            if not isinstance(node, dict) or leaf not in node:
                raise ConfigError(f"unknown key {path!r}")
            node[leaf] = _plain(value)
        return from_dict(data)


# ------------------------------------------------------------------ parsing


def _plain(value):
    """Numpy scalars and tuples to the builtin types the YAML dumper knows."""
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value.item() if hasattr(value, "item") and not isinstance(value, str) else value


def _mark(node) -> tuple[int | None, int | None]:
    if node is None:
        return None, None
    return node.start_mark.line + 1, node.start_mark.column + 1


def _fail(msg, node, source):
    line, col = _mark(node)
    raise ConfigError(msg, source, line, col)


def _scalar(node, tp, path, source):
    if not isinstance(node, yaml.ScalarNode):
        _fail(f"{path}: expected a scalar", node, source)
    value = yaml.safe_load(yaml.serialize(node))
    if tp is bool:
        if not isinstance(value, bool):
            _fail(f"{path}: expected true/false, got {node.value!r}", node, source)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(f"{path}: expected an integer, got {node.value!r}", node, source)
        return value
    if tp is float:
        if isinstance(value, str):
            try:            # YAML 1.1 does not read "1e6" as a number
                value = float(value)
            except ValueError:
                _fail(f"{path}: expected a number, got {node.value!r}", node, source)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path}: expected a number, got {node.value!r}", node, source)
        return float(value)
    if tp is str:
        if value is None or isinstance(value, (dict, list)):
            _fail(f"{path}: expected a string", node, source)
        return str(value)
    _fail(f"{path}: unsupported type {tp}", node, source)


def _convert(node, tp, path, source):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null"):
            return None
        return _convert(node, args[0], path, source)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(node, yaml.SequenceNode):
            _fail(f"{path}: expected a list", node, source)
        return [_convert(n, item, f"{path}[{i}]", source) for i, n in enumerate(node.value)]
    if dataclasses.is_dataclass(tp):
        return _build(node, tp, path, source)
    return _scalar(node, tp, path, source)


def _build(node, cls, path, source):
    if isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null"):
        return cls()
    if not isinstance(node, yaml.MappingNode):
        _fail(f"{path or 'top level'}: expected a mapping", node, source)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs, seen = {}, set()
    for key_node, value_node in node.value:
        key = key_node.value
        full = f"{path}.{key}" if path else key
        if key not in names:
            _fail(f"unknown key {full!r}; expected one of {sorted(names)}", key_node, source)
        if key in seen:
            _fail(f"duplicate key {full!r}", key_node, source)
        seen.add(key)
        kwargs[key] = _convert(value_node, hints[key], full, source)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        _fail(f"{path}: {exc}", node, source)


def _where(root, path: str):
    """Node for a dotted path, for diagnostics raised after conversion."""
    node = root
    for part in path.split("."):
        if not isinstance(node, yaml.MappingNode):
            return node
        nxt = next((v for k, v in node.value if k.value == part), None)
        if nxt is None:
            return node
        node = nxt
    return node


def _check(cond: bool, path: str, msg: str, problems: list):
    if not cond:
        problems.append((path, f"{path}: {msg}"))


def validate(cfg: ExperimentConfig, root=None, source: str = "<config>") -> ExperimentConfig:
    p: list = []
    s, d, lr, sc, da, r, b = (cfg.system, cfg.devices, cfg.learning, cfg.scheduler,
                              cfg.data, cfg.run, cfg.bounds)
    _check(s.bandwidth_hz > 0, "system.bandwidth_hz", "must be > 0", p)
    _check(s.t_max > 0, "system.t_max", "must be > 0", p)
    _check(s.ref_distance > 0, "system.ref_distance", "must be > 0", p)
    _check(s.model_bits is None or s.model_bits > 0, "system.model_bits", "must be > 0", p)
    _check(d.count >= 1, "devices.count", "must be >= 1", p)
    _check(0 < d.min_distance < d.cell_size / 2, "devices.min_distance",
           "must be > 0 and below half the cell size", p)
    for name in ("energy_budget", "f_max", "p_max", "kappa"):
        _check(getattr(d, name) > 0, f"devices.{name}", "must be > 0", p)
    _check(d.cycles_per_sample is None or d.cycles_per_sample > 0,
           "devices.cycles_per_sample", "must be > 0", p)
    _check(len(d.data_size_range) == 2 and 1 <= d.data_size_range[0] <= d.data_size_range[-1],
           "devices.data_size_range", "must be [lo, hi] with 1 <= lo <= hi", p)
    _check(all(h >= 1 for h in lr.hidden), "learning.hidden", "layer widths must be >= 1", p)
    _check(0 <= lr.split_depth <= len(lr.hidden) + 1, "learning.split_depth",
           f"must be in [0, {len(lr.hidden) + 1}]", p)
    _check(lr.eta_u > 0 and lr.eta_v > 0, "learning.eta_u", "learning rates must be > 0", p)
    _check(0 <= lr.momentum < 1, "learning.momentum", "must be in [0, 1)", p)
    _check(lr.tau >= 1, "learning.tau", "must be >= 1", p)
    _check(lr.batch_size >= 0, "learning.batch_size", "must be >= 0", p)
    _check(lr.bits_per_param >= 1, "learning.bits_per_param", "must be >= 1", p)
    _check(lr.eval_every >= 1, "learning.eval_every", "must be >= 1", p)
    _check(sc.policy in POLICIES, "scheduler.policy", f"must be one of {list(POLICIES)}", p)
    _check(sc.V >= 0, "scheduler.V", "must be >= 0", p)
    _check(sc.max_devices >= 0, "scheduler.max_devices", "must be >= 0", p)
    _check(0 <= sc.zero_queue_weight < 1, "scheduler.zero_queue_weight", "must be in [0, 1)", p)
    _check(da.source in SOURCES, "data.source", f"must be one of {list(SOURCES)}", p)
    _check(da.shards_per_device >= 1, "data.shards_per_device", "must be >= 1", p)
    if lr.enabled and d.count > 1:
        _check(d.count * da.shards_per_device >= da.synthetic.n_classes
               if da.source == "synthetic" else d.count * da.shards_per_device >= 10,
               "data.shards_per_device", "devices x shards must cover every class", p)
    if lr.enabled and da.source == "mnist":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            _check(bool(getattr(da.mnist, name)), f"data.mnist.{name}", "path required", p)
    _check(len(r.seeds) >= 1, "run.seeds", "at least one seed", p)
    _check(all(x >= 0 for x in r.seeds), "run.seeds", "seeds must be >= 0", p)
    _check(r.rounds >= 0, "run.rounds", "must be >= 0", p)
    _check(r.threads >= 1, "run.threads", "must be >= 1", p)
    for name in ("L_u", "L_v", "chi", "delta", "rho", "initial_gap"):
        val = getattr(b, name)
        _check(val is None or val >= 0, f"bounds.{name}", "must be >= 0", p)
    _check(b.probe_every >= 1, "bounds.probe_every", "must be >= 1", p)
    if p:
        path, msg = p[0]
        node = _where(root, path) if root is not None else None
        line, col = _mark(node)
        more = f" (and {len(p) - 1} more)" if len(p) > 1 else ""
        raise ConfigError(msg + more, source, line, col)
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        col = mark.column + 1 if mark else None
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source, line, col)
    cfg = ExperimentConfig() if root is None else _build(root, ExperimentConfig, "", source)
    return validate(cfg, root, source)


def load_config(path) -> ExperimentConfig:
    """Parse a config file. OSError propagates so callers can tell IO from content errors."""
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Round trip for resolved configs stored in run manifests."""
    return parse_config(yaml.safe_dump(data, sort_keys=False), "<dict>")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
