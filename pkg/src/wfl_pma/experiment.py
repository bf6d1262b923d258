"""Seeded end-to-end simulation: scheduling, local training, aggregation, metrics.

Every random draw comes from a counter-based stream keyed by the run seed and
tagged by purpose (channel, training, policy, data, initialisation, devices),
so a single-threaded run is reproducible bit for bit and one purpose never
shifts another's draws.

Each run directory holds

* ``metrics.csv``  one row per round, columns :data:`METRIC_COLUMNS`
* ``devices.csv``  the population and its final energy account
* ``manifest.json`` resolved config, seed and format version
* ``model.npz``    final shared extractor and per-device predictors
"""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import bounds as B
from . import data as Dm
from . import model as M
from . import pmafl as P
from . import scheduler as Sc
from . import sysmodel as S
from .config import SWEEP_AXES, ConfigError, ExperimentConfig, dump_config
from .resopt import SolverError, SolverOptions

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METRIC_COLUMNS = [
    "round", "n_scheduled", "scheduled_data", "total_data", "objective",
    "energy_total", "queue_max", "queue_mean", "status",
    "mean_accuracy", "pooled_accuracy", "global_loss",
    "scheduled", "energy_by_device", "A_t", "bound_t",
]
DEVICE_COLUMNS = ["id", "data_size", "distance", "energy_budget", "cycles_per_sample",
                  "cumulative_energy", "final_queue", "rounds_scheduled"]
SWEEP_AXIS_KEYS = {"V": "scheduler.V", "split_depth": "learning.split_depth",
                   "energy_budget": "devices.energy_budget", "t_max": "system.t_max"}
NAN = float("nan")


class SchemaError(ValueError):
    pass


def fmt(x) -> str:
    """Full-precision decimal text; integers stay integral."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (list, tuple)):
        return ";".join(fmt(v) for v in x)
    return str(x)


# ------------------------------------------------------------------ setup


def model_sizes(cfg: ExperimentConfig) -> list[int]:
    if cfg.data.source == "mnist":
        d_in, n_out = 784, 10
    else:
        d_in, n_out = cfg.data.synthetic.dim, cfg.data.synthetic.n_classes
    return [d_in, *cfg.learning.hidden, n_out]


@dataclass
class LearningSetup:
    model: M.SplitModel                 # initial model; predictors are copied per device
    learners: dict[int, P.DeviceLearner]
    test: dict[int, Dm.Dataset]


@dataclass
class Population:
    profiles: list[S.DeviceProfile]
    system: S.SystemConfig
    learning: LearningSetup | None = None

    @property
    def total_data(self) -> int:
        return int(sum(p.data_size for p in self.profiles))


def _load_data(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[Dm.Dataset, Dm.Dataset]:
    if cfg.data.source == "mnist":
        m = cfg.data.mnist
        return Dm.load_mnist(m.train_images, m.train_labels, m.test_images, m.test_labels)
    return Dm.make_synthetic(cfg.data.synthetic, rng)


def build_population(cfg: ExperimentConfig, seed: int) -> Population:
    """Devices, system parameters and (when training) data shards and learners."""
    K = cfg.devices.count
    lr = cfg.learning
    sizes = model_sizes(cfg)
    setup = None
    if lr.enabled:
        rng = S.stream(seed, S.STREAM_DATA)
        train, test = _load_data(cfg, rng)
        part = Dm.partition_non_iid(train, K, cfg.data.shards_per_device, rng)
        tpart = Dm.partition_like(part, test, rng)
        model = M.SplitModel.init(sizes, lr.split_depth, S.stream(seed, S.STREAM_INIT))
        data_sizes = [len(part.indices[k]) for k in range(K)]
        learners = {k: P.DeviceLearner(k, [p.copy() for p in model.predictor], part.local(k),
                                       lr.eta_u, lr.eta_v, lr.momentum, lr.tau, lr.batch_size)
                    for k in range(K)}
        setup = LearningSetup(model, learners, {k: tpart.local(k) for k in range(K)})
        bits = M.payload_bits(model, lr.bits_per_param)
    else:
        lo, hi = cfg.devices.data_size_range
        data_sizes = S.stream(seed, S.STREAM_DATA).integers(lo, hi + 1, size=K)
        template = M.SplitModel(sizes, lr.split_depth,
                                [np.zeros(s) for a, b in zip(sizes[:-1], sizes[1:])
                                 for s in ((a, b), (b,))])
        bits = M.payload_bits(template, lr.bits_per_param)
    n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if cfg.system.model_bits is not None:
        bits = cfg.system.model_bits
    cycles = cfg.devices.cycles_per_sample or float(n_params)
    d = cfg.devices
    profiles = S.generate_devices(K, seed, data_sizes=data_sizes, cycles_per_sample=cycles,
                                  cell_size=d.cell_size, min_distance=d.min_distance,
                                  f_max=d.f_max, p_max=d.p_max, energy_budget=d.energy_budget,
                                  kappa=d.kappa)
    system = cfg.system.build(bits, cfg.run.rounds, lr.tau)
    return Population(profiles, system, setup)


# ------------------------------------------------------------------- rounds


@dataclass
class RunResult:
    seed: int
    rows: list[dict]
    state: Sc.VirtualQueueState
    population: Population
    u: list = field(default_factory=list)
    constants: B.BoundConstants | None = None
    estimate: B.EstimateReport | None = None
    initial_loss: float = NAN
    initial_gap: float = NAN
    gap_label: str = ""
    rounds_scheduled: dict[int, int] = field(default_factory=dict)


def _policy_round(cfg: ExperimentConfig, state, gains, table, system, seed, t):
    sc = cfg.scheduler
    opts = SolverOptions(zero_queue_weight=sc.zero_queue_weight)
    if sc.policy == "lyapunov":
        return Sc.schedule_round(state, gains, sc.V, system, table=table, options=opts)
    if sc.policy == "random-expansion":
        rng = S.stream(seed, S.STREAM_POLICY, 0, t)
        return Sc.random_expansion(state, gains, sc.V, system, table, rng,
                                   max_devices=sc.max_devices, options=opts)
    if sc.policy == "all-feasible":
        return Sc.all_feasible(state, gains, sc.V, system, table, options=opts)
    raise ConfigError(f"unknown policy {sc.policy!r}")


def _flat(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def _snapshot(u, setup: LearningSetup) -> B.GradientSnapshot:
    grads_u, grads_v, weights = {}, [], {}
    total = float(sum(lr.data_size for lr in setup.learners.values()))
    for k in sorted(setup.learners):
        lr = setup.learners[k]
        params = list(u) + list(lr.predictor)
        _, g = M.loss_and_grad(params, M.activations_for(len(params) // 2),
                               lr.dataset.x, lr.dataset.y)
        grads_u[k] = _flat(g[: len(u)])
        grads_v.append((lr.data_size / total) * _flat(g[len(u):]))
        weights[k] = float(lr.data_size)
    v = _flat([p for k in sorted(setup.learners) for p in setup.learners[k].predictor])
    return B.GradientSnapshot(u=_flat(u), device_grads_u=grads_u, weights=weights,
                              v=v, grad_v=np.concatenate(grads_v))


def run_single(cfg: ExperimentConfig, seed: int, threads: int = 1) -> RunResult:
    """All rounds for one seed, in memory."""
    pop = build_population(cfg, seed)
    system, setup = pop.system, pop.learning
    table = Sc.DeviceTable(pop.profiles, system)
    state = Sc.VirtualQueueState.initial(pop.profiles, cfg.run.rounds)
    total = pop.total_data
    sizes = {p.id: p.data_size for p in pop.profiles}
    counts = {p.id: 0 for p in pop.profiles}
    u = [p.copy() for p in setup.model.extractor] if setup else []
    snapshots: list[B.GradientSnapshot] = []
    probe = setup is not None and cfg.bounds.estimate and cfg.learning.split_depth > 0

    loss0 = NAN
    if setup:
        loss0 = P.evaluate(u, {k: lr.predictor for k, lr in setup.learners.items()},
                           setup.test, {k: lr.dataset for k, lr in setup.learners.items()}
                           ).global_loss

    rows = []
    for t in range(cfg.run.rounds):
        gains = S.sample_channels(pop.profiles, system, seed, t)
        try:
            outcome = _policy_round(cfg, state, gains, table, system, seed, t)
            selected = outcome.decision.selected
            energy = outcome.decision.energy()
            objective, status = outcome.objective, outcome.exhausted
        except SolverError as exc:
            log.warning("seed %d round %d skipped: %s", seed, t, exc)
            selected, energy, objective, status = [], {}, NAN, "solver-failure"

        if probe and t % cfg.bounds.probe_every == 0:
            snapshots.append(_snapshot(u, setup))
        if setup and selected:
            chosen = [setup.learners[k] for k in selected]
            rngs = [S.stream(seed, S.STREAM_TRAIN, k, t) for k in selected]
            results = P.local_updates(u, chosen, rngs, threads=threads, probe=False)
            for lr, res in zip(chosen, results):
                lr.predictor, lr.v_velocity = res.v, res.v_velocity
            new_u = P.aggregate([(r.id, r.u, sizes[r.id]) for r in results], selected)
            if new_u is not None:
                u = new_u
        state.step(energy)
        for k in selected:
            counts[k] += 1

        acc = pooled = loss = NAN
        if setup and ((t + 1) % cfg.learning.eval_every == 0 or t == cfg.run.rounds - 1):
            ev = P.evaluate(u, {k: lr.predictor for k, lr in setup.learners.items()},
                            setup.test, {k: lr.dataset for k, lr in setup.learners.items()})
            acc, pooled, loss = ev.mean_accuracy, ev.pooled_accuracy, ev.global_loss
        rows.append({
            "round": t, "n_scheduled": len(selected),
            "scheduled_data": int(sum(sizes[k] for k in selected)), "total_data": total,
            "objective": float(objective), "energy_total": float(sum(energy.values())),
            "queue_max": float(state.queues.max()), "queue_mean": float(state.queues.mean()),
            "status": status, "mean_accuracy": acc, "pooled_accuracy": pooled,
            "global_loss": loss, "scheduled": list(selected),
            "energy_by_device": [float(energy.get(k, 0.0)) for k in state.ids],
            "A_t": NAN, "bound_t": NAN,
        })

    result = RunResult(seed=seed, rows=rows, state=state, population=pop, u=u,
                       initial_loss=loss0, rounds_scheduled=counts)
    _attach_bounds(cfg, result, snapshots)
    return result


def _attach_bounds(cfg: ExperimentConfig, result: RunResult, snapshots) -> None:
    b = cfg.bounds
    consts = None
    if b.L_u is not None:
        consts = B.BoundConstants(L_u=b.L_u, L_v=b.L_v, chi=b.chi, delta=b.delta,
                                  rho=b.rho, eta_u=cfg.learning.eta_u)
    elif len(snapshots) >= 2:
        try:
            consts, result.estimate = B.estimate_constants(snapshots, cfg.learning.eta_u)
        except B.DegenerateInputError as exc:
            log.warning("constant estimation skipped: %s", exc)
    result.constants = consts
    if b.initial_gap is not None:
        result.initial_gap, result.gap_label = b.initial_gap, "configured"
    else:
        losses = [r["global_loss"] for r in result.rows if r["global_loss"] == r["global_loss"]]
        if losses and result.initial_loss == result.initial_loss:
            result.initial_gap = max(result.initial_loss - min(losses), 0.0)
            result.gap_label = "initial loss minus best observed loss"
    if consts is not None:
        bound_columns(result.rows, consts, result.initial_gap)


def bound_columns(rows: list[dict], consts: B.BoundConstants, initial_gap: float) -> None:
    """Fill A_t and bound_t in place from the scheduled-data column."""
    if not rows:
        return
    D = float(rows[0]["total_data"])
    trace = B.ScheduleTrace([float(r["scheduled_data"]) for r in rows], D)
    for r in rows:
        r["A_t"] = B.contraction_factor(float(r["scheduled_data"]), D, consts)
    gap = initial_gap if initial_gap == initial_gap else NAN
    if gap == gap:
        consts.check(strict=False)
        seq = B.t_round_bound(gap, trace, consts, strict=False)
        for r, val in zip(rows, seq):
            r["bound_t"] = float(val)


# ------------------------------------------------------------------ output


def write_metrics(path: Path, rows: Sequence[dict], extra: dict | None = None) -> None:
    extra = extra or {}
    cols = list(extra) + METRIC_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(extra[c]) for c in extra] + [fmt(r[c]) for c in METRIC_COLUMNS])


def write_devices(path: Path, result: RunResult) -> None:
    st = result.state
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEVICE_COLUMNS)
        for p in sorted(result.population.profiles, key=lambda p: p.id):
            i = st.index(p.id)
            w.writerow([fmt(v) for v in (p.id, p.data_size, p.distance, p.energy_budget,
                                         p.cycles_per_sample, st.cumulative_energy[i],
                                         st.queues[i], result.rounds_scheduled.get(p.id, 0))])


def write_model(path: Path, result: RunResult) -> None:
    setup = result.population.learning
    arrays = {}
    if setup is not None:
        arrays["sizes"] = np.array(setup.model.sizes)
        arrays["split_depth"] = np.array(setup.model.split_depth)
        for i, p in enumerate(result.u):
            arrays[f"u_{i}"] = p
        for k, lr in setup.learners.items():
            for i, p in enumerate(lr.predictor):
                arrays[f"v_{k}_{i}"] = p
    np.savez(path, **arrays)


def _manifest(cfg: ExperimentConfig, result: RunResult) -> dict:
    out = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "seed": result.seed,
        "metric_columns": METRIC_COLUMNS,
        "config": cfg.to_dict(),
        "config_yaml": dump_config(cfg),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "initial_loss": result.initial_loss,
        "initial_gap": result.initial_gap,
        "initial_gap_source": result.gap_label,
        "files": ["metrics.csv", "devices.csv", "model.npz"],
    }
    if result.constants is not None:
        c = result.constants
        out["bound_constants"] = {"L_u": c.L_u, "L_v": c.L_v, "chi": c.chi, "delta": c.delta,
                                  "rho": c.rho, "eta_u": c.eta_u, "step_ok": c.step_ok(),
                                  "estimated": result.estimate is not None}
        if result.estimate is not None:
            out["bound_constants"]["notes"] = result.estimate.notes
    return json.loads(json.dumps(out, default=float).replace("NaN", "null"))


def write_run(out_dir: Path, cfg: ExperimentConfig, result: RunResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(out_dir / "metrics.csv", result.rows)
    write_devices(out_dir / "devices.csv", result)
    write_model(out_dir / "model.npz", result)
    (out_dir / "manifest.json").write_text(json.dumps(_manifest(cfg, result), indent=2))


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None,
                   seeds: Sequence[int] | None = None, threads: int | None = None,
                   write: bool = True) -> list[RunResult]:
    """One run per seed; files go to ``<out>/seed_<s>/`` when ``write`` is set."""
    seeds = list(cfg.run.seeds if seeds is None else seeds)
    threads = cfg.run.threads if threads is None else threads
    out = Path(cfg.run.out if out is None else out)
    results = []
    for s in seeds:
        res = run_single(cfg, s, threads)
        if write:
            write_run(out / f"seed_{s}", cfg, res)
        results.append(res)
    return results


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out: str | Path | None = None,
              seeds: Sequence[int] | None = None, threads: int | None = None) -> Path:
    """One sub-run per (value, seed) and an aggregated ``sweep.csv`` keyed by (value, seed, round)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {list(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(cfg.run.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    agg = out / "sweep.csv"
    with open(agg, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "seed"] + METRIC_COLUMNS)
        for val in values:
            sub_cfg = cfg.replace(**{SWEEP_AXIS_KEYS[axis]: val})
            for res in run_experiment(sub_cfg, out / f"{axis}={fmt(val)}", seeds, threads):
                for r in res.rows:
                    w.writerow([axis, fmt(val), res.seed] + [fmt(r[c]) for c in METRIC_COLUMNS])
    return agg


def check_bounds(metrics_path: str | Path, consts: B.BoundConstants, initial_gap: float,
                 out_path: str | Path | None = None) -> Path:
    """Recompute the A_t and bound_t columns of a metrics CSV."""
    metrics_path = Path(metrics_path)
    with open(metrics_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        rows = list(reader)
    for col in ("scheduled_data", "total_data"):
        if col not in header:
            raise SchemaError(f"{metrics_path}: missing column {col!r}")
    parsed = [{"scheduled_data": float(r["scheduled_data"]),
               "total_data": float(r["total_data"])} for r in rows]
    bound_columns(parsed, consts, initial_gap)
    cols = header + [c for c in ("A_t", "bound_t") if c not in header]
    out_path = Path(out_path) if out_path else metrics_path.with_name(
        metrics_path.stem + "_bounds.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r, p in zip(rows, parsed):
            r = dict(r, A_t=fmt(p.get("A_t", NAN)), bound_t=fmt(p.get("bound_t", NAN)))
            w.writerow([r[c] for c in cols])
    return out_path


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
