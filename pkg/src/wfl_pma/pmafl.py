"""Local training, partial aggregation and personalised evaluation.

Only the extractor ``u`` travels between server and devices. Each device keeps
its own predictor ``v_k`` and trains both parts jointly for ``tau`` steps of
momentum SGD starting from the broadcast ``u``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .model import Params, activations_for, cross_entropy_loss, forward, loss_and_grad


@dataclass
class DeviceLearner:
    id: int
    predictor: Params
    dataset: Dataset
    eta_u: float = 0.05
    eta_v: float = 0.05
    momentum: float = 0.9
    tau: int = 5
    batch_size: int = 0              # 0 = full shard up to 64 samples, else 32
    v_velocity: Params = field(default_factory=list)

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ValueError(f"device {self.id}: empty dataset")
        if self.eta_u < 0 or self.eta_v < 0:
            raise ValueError("learning rates must be >= 0")
        if not self.v_velocity:
            self.v_velocity = [np.zeros_like(p) for p in self.predictor]

    @property
    def data_size(self) -> int:
        return len(self.dataset)

    def effective_batch(self) -> int:
        n = len(self.dataset)
        if self.batch_size > 0:
            return min(self.batch_size, n)
        return n if n <= 64 else 32


@dataclass
class LocalResult:
    id: int
    u: Params
    v: Params
    v_velocity: Params
    loss_before: float
    loss_after: float
    grad_u_sq: float          # squared norm of the full-shard extractor gradient at the broadcast point
    grad_v_sq: float


def _sq_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(sum(np.vdot(a, a) for a in arrays))


def local_update(u_global: Params, learner: DeviceLearner, rng: np.random.Generator,
                 probe: bool = True) -> LocalResult:
    """``tau`` momentum-SGD steps on (u, v_k) from (u_global, v_k).

    The extractor velocity starts at zero every round because the broadcast
    replaces the extractor; the predictor velocity carries over and is
    returned for the caller to commit. Nothing in ``learner`` is modified.
    """
    n_u = len(u_global)
    params = [p.copy() for p in u_global] + [p.copy() for p in learner.predictor]
    acts = activations_for(len(params) // 2)
    vel = [np.zeros_like(p) for p in u_global] + [v.copy() for v in learner.v_velocity]
    data = learner.dataset
    n = len(data)
    batch = learner.effective_batch()
    if batch < 1:
        raise ValueError(f"device {learner.id}: empty batch")

    loss0, g0 = (loss_and_grad(params, acts, data.x, data.y) if probe
                 else (float("nan"), None))
    for _ in range(learner.tau):
        idx = np.arange(n) if batch == n else np.sort(rng.choice(n, size=batch, replace=False))
        _, grads = loss_and_grad(params, acts, data.x[idx], data.y[idx])
        for i, g in enumerate(grads):
            eta = learner.eta_u if i < n_u else learner.eta_v
            vel[i] = learner.momentum * vel[i] + g
            params[i] = params[i] - eta * vel[i]
    loss1 = float("nan")
    if probe:
        out, _ = forward(params, acts, data.x)
        loss1, _ = cross_entropy_loss(out, data.y)
    return LocalResult(
        id=learner.id, u=params[:n_u], v=params[n_u:], v_velocity=vel[n_u:],
        loss_before=loss0, loss_after=loss1,
        grad_u_sq=_sq_norm(g0[:n_u]) if probe else float("nan"),
        grad_v_sq=_sq_norm(g0[n_u:]) if probe else float("nan"))


def local_updates(u_global: Params, learners: Sequence[DeviceLearner], rngs: Sequence,
                  threads: int = 1, probe: bool = True) -> list[LocalResult]:
    """Independent local updates; results are returned in the order given."""
    if threads <= 1 or len(learners) <= 1:
        return [local_update(u_global, lr, r, probe) for lr, r in zip(learners, rngs)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: local_update(u_global, a[0], a[1], probe),
                             zip(learners, rngs)))


def aggregate(u_updates: Sequence[tuple[int, Params, float]], scheduled) -> Params | None:
    """Data-weighted mean of the extractors of scheduled devices.

    Accumulated in ascending id order as offsets from the first extractor, so
    identical inputs come back bit for bit. Returns None when nothing was
    scheduled, meaning the previous extractor stays in force.
    """
    chosen = sorted((u for u in u_updates if u[0] in set(scheduled)), key=lambda u: u[0])
    if not chosen:
        return None
    total = float(sum(d for _, _, d in chosen))
    base = chosen[0][1]
    out = [b.copy() for b in base]
    for _, u_k, d_k in chosen[1:]:
        w = d_k / total
        for i, (b, p) in enumerate(zip(base, u_k)):
            if p.shape != b.shape:
                raise ValueError("extractor shapes differ between devices")
            out[i] += w * (p - b)
    return out


@dataclass
class Evaluation:
    accuracy: dict[int, float]
    mean_accuracy: float
    pooled_accuracy: float
    global_loss: float
    local_loss: dict[int, float]


def evaluate(u: Params, predictors: Mapping[int, Params], test: Mapping[int, Dataset],
             train: Mapping[int, Dataset] | None = None) -> Evaluation:
    """Personalised evaluation: device k scores its own test data with (u, v_k).

    The global loss is the data-weighted mean of local losses on the training
    shards (test shards when ``train`` is omitted).
    """
    ids = sorted(predictors)
    acc, losses, weights = {}, {}, {}
    correct = seen = 0
    for k in ids:
        params = list(u) + list(predictors[k])
        acts = activations_for(len(params) // 2)
        ds = test[k]
        if len(ds):
            out, _ = forward(params, acts, ds.x)
            hits = int(np.sum(np.argmax(out, axis=1) == ds.y))
            acc[k] = hits / len(ds)
            correct += hits
            seen += len(ds)
        else:
            acc[k] = float("nan")
        src = train[k] if train is not None else ds
        if len(src):
            out, _ = forward(params, acts, src.x)
            losses[k], _ = cross_entropy_loss(out, src.y)
            weights[k] = len(src)
    total = sum(weights.values())
    global_loss = (sum(weights[k] * losses[k] for k in weights) / total
                   if total else float("nan"))
    vals = [a for a in acc.values() if a == a]
    return Evaluation(accuracy=acc, mean_accuracy=float(np.mean(vals)) if vals else float("nan"),
                      pooled_accuracy=correct / seen if seen else float("nan"),
                      global_loss=float(global_loss), local_loss=losses)
