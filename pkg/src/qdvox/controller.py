"""One-hidden-layer controller: forward pass, mutation, noise and distillation.

Actions are squashed into the actuation range as ``mid + half * tanh(z)``, so
an all-zero network outputs the midpoint and large pre-activations saturate
at the range bounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateDataset
from .sim import TaskConfig, rollout
from .sim.body import N_FEATURES

HIDDEN = 32
TENSORS = ("W1", "b1", "W2", "b2")


@dataclass
class ControllerParams:
    W1: np.ndarray  # (hidden, n_in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (n_out, hidden)
    b2: np.ndarray  # (n_out,)

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def dims(self) -> dict:
        return {"n_in": self.n_in, "n_hidden": self.n_hidden, "n_out": self.n_out}

    def tensors(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ControllerParams":
        return ControllerParams(*(t.copy() for t in self.tensors()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def to_bytes(self) -> bytes:
        return self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, n_in: int, n_hidden: int, n_out: int) -> "ControllerParams":
        flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
        sizes = [n_hidden * n_in, n_hidden, n_out * n_hidden, n_out]
        if flat.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} floats, got {flat.size}")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(n_hidden, n_in), parts[1].copy(),
                   parts[2].reshape(n_out, n_hidden), parts[3].copy())

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


def dims_for_box(width: int, height: int) -> tuple:
    """(n_in, n_out) of a controller sized for the full bounding box."""
    return width * height * N_FEATURES, width * height


def init_params(n_in: int, n_out: int, rng: np.random.Generator,
                hidden: int = HIDDEN, sigma: float = 0.1) -> ControllerParams:
    """Weights from N(0, sigma), biases zero."""
    return ControllerParams(
        rng.normal(0.0, sigma, (hidden, n_in)),
        np.zeros(hidden),
        rng.normal(0.0, sigma, (n_out, hidden)),
        np.zeros(n_out),
    )


def save_params(params: ControllerParams, path) -> None:
    """Write ``<path>.bin`` (little-endian float64, W1 b1 W2 b2) and ``<path>.json``."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(params.to_bytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f8", "order": list(TENSORS), **params.dims}))


def load_params(path) -> ControllerParams:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    return ControllerParams.from_bytes(path.with_suffix(".bin").read_bytes(),
                                       header["n_in"], header["n_hidden"], header["n_out"])


def _squash(z, actuation_range):
    lo, hi = actuation_range
    half = 0.5 * (hi - lo)
    return lo + half + half * np.tanh(z)


def forward(params: ControllerParams, obs: np.ndarray, actuation_range=(0.6, 1.6)) -> np.ndarray:
    """Actions for one observation vector or a (rows, n_in) batch."""
    hidden = np.tanh(obs @ params.W1.T + params.b1)
    return _squash(hidden @ params.W2.T + params.b2, actuation_range)


def mutate(params: ControllerParams, rng: np.random.Generator, sigma: float = 0.1) -> ControllerParams:
    """Independent N(0, sigma) perturbation of every entry."""
    if sigma == 0:
        return params.copy()
    return ControllerParams(*(t + rng.normal(0.0, sigma, t.shape) for t in params.tensors()))


def apply_noise(vec: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if sigma == 0:
        return vec.copy()
    return vec + rng.normal(0.0, sigma, vec.shape)


@dataclass(frozen=True)
class NoiseSpec:
    obs_sigma: float = 0.01
    act_sigma: float = 0.01
    mutation_sigma: float = 0.1

    def __post_init__(self):
        if min(self.obs_sigma, self.act_sigma, self.mutation_sigma) < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass
class RolloutDataset:
    """Pooled (noisy observation, pre-noise action) rows with their origin."""

    obs: np.ndarray
    act: np.ndarray
    teacher: np.ndarray
    episode: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


def collect_dataset(teachers: Sequence, episodes_per_teacher: int, seed: int,
                    cfg: Optional[TaskConfig] = None, noise: Optional[NoiseSpec] = None) -> RolloutDataset:
    """Run each ``(morphology, params)`` teacher for a number of noisy episodes.

    Episode ``e`` of teacher ``k`` draws its noise from ``SeedSequence([seed, k, e])``.
    """
    if not teachers:
        raise ValueError("need at least one teacher")
    cfg = cfg or TaskConfig()
    noise = noise or NoiseSpec()
    obs, act, who, ep = [], [], [], []
    for k, (morphology, params) in enumerate(teachers):
        for e in range(episodes_per_teacher):
            res = rollout(morphology, params, np.random.SeedSequence([seed, k, e]), cfg,
                          obs_sigma=noise.obs_sigma, act_sigma=noise.act_sigma, record=True)
            obs.append(res.observations)
            act.append(res.actions)
            who.append(np.full(res.steps, k))
            ep.append(np.full(res.steps, e))
    return RolloutDataset(np.concatenate(obs), np.concatenate(act),
                          np.concatenate(who), np.concatenate(ep))


def mse(params: ControllerParams, obs: np.ndarray, targets: np.ndarray, actuation_range=(0.6, 1.6)) -> float:
    """Mean over rows and outputs of the squared action error."""
    return float(np.mean((forward(params, obs, actuation_range) - targets) ** 2))


def gradient(params: ControllerParams, obs: np.ndarray, targets: np.ndarray,
             actuation_range=(0.6, 1.6)) -> ControllerParams:
    """Exact gradient of :func:`mse` with respect to every tensor.

    Returned as a ``ControllerParams`` holding the four gradient tensors.
    """
    lo, hi = actuation_range
    half = 0.5 * (hi - lo)
    hidden = np.tanh(obs @ params.W1.T + params.b1)
    out = np.tanh(hidden @ params.W2.T + params.b2)
    pred = lo + half + half * out
    d_pred = 2.0 * (pred - targets) / targets.size
    d_z2 = d_pred * half * (1.0 - out * out)
    d_hidden = d_z2 @ params.W2
    d_z1 = d_hidden * (1.0 - hidden * hidden)
    return ControllerParams(d_z1.T @ obs, d_z1.sum(axis=0), d_z2.T @ hidden, d_z2.sum(axis=0))


@dataclass(frozen=True)
class DistillConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100


def distill(dataset: RolloutDataset, init: ControllerParams, hyper: Optional[DistillConfig] = None,
            rng: Optional[np.random.Generator] = None, actuation_range=(0.6, 1.6)):
    """Fit a controller to the dataset by mini-batch SGD with momentum.

    Returns ``(params, loss_curve)``; ``loss_curve[0]`` is the full-dataset MSE
    of ``init`` and ``loss_curve[e]`` the MSE after epoch ``e``.
    """
    hyper = hyper or DistillConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(dataset)
    if n < hyper.batch_size:
        raise DegenerateDataset(f"{n} rows is less than one batch of {hyper.batch_size}")
    params = init.copy()
    velocity = [np.zeros_like(t) for t in params.tensors()]
    curve = [mse(params, dataset.obs, dataset.act, actuation_range)]
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            grad = gradient(params, dataset.obs[idx], dataset.act[idx], actuation_range)
            for t, v, g in zip(params.tensors(), velocity, grad.tensors()):
                v *= hyper.momentum
                v -= hyper.lr * g
                t += v
        curve.append(mse(params, dataset.obs, dataset.act, actuation_range))
    return params, np.array(curve)
