"""The CNN + LSTM hybrid demand model with external-factor fusion.

Stage shapes for a batch of ``B`` samples::

    E (B, L, W, H)                      demand lags, lag 0 = most recent
    -> two 3x3 conv + batch norm + ReLU, shared across lags
    D (B, L, W, H, K)
    -> concat factor lags F (B, L, W, H, M)
    C (B, L, W, H, K + M)
    -> flatten spatial and channel axes per lag
    Bf (B, L, W*H*(K + M))
    -> one dense layer + ReLU per lag (distinct weights)
    A (B, L, d)
    -> LSTM over lags, oldest first; final hidden state
    g (B, u)
    -> dense, linear
    h (B, W*H) -> reshape (B, W, H)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor
from .container import read_container, write_container

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StefConfig:
    W: int
    H: int
    M: int
    L: int = 4
    K: int = 32
    d: int = 128
    u: int = 128
    input_scale: float = 1.0

    def __post_init__(self):
        for name in ("W", "H", "M", "L", "K", "d", "u"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"StefConfig.{name} must be a positive integer, got {v}")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")

    @property
    def N(self) -> int:
        return self.W * self.H

    @property
    def flat_dim(self) -> int:
        return self.W * self.H * (self.K + self.M)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StefConfig":
        return cls(**d)


def param_shapes(cfg: StefConfig) -> dict[str, tuple[int, ...]]:
    K, L, d, u = cfg.K, cfg.L, cfg.d, cfg.u
    shapes = {
        "conv1.kernel": (3, 3, 1, K), "conv1.bias": (K,),
        "bn1.gamma": (K,), "bn1.beta": (K,),
        "conv2.kernel": (3, 3, K, K), "conv2.bias": (K,),
        "bn2.gamma": (K,), "bn2.beta": (K,),
    }
    for lag in range(L):
        shapes[f"dense1.{lag}.weight"] = (cfg.flat_dim, d)
        shapes[f"dense1.{lag}.bias"] = (d,)
    shapes.update({
        "lstm.w_input": (d, 4 * u), "lstm.w_hidden": (u, 4 * u), "lstm.bias": (4 * u,),
        "dense2.weight": (u, cfg.N), "dense2.bias": (cfg.N,),
    })
    return shapes


def param_count(cfg: StefConfig) -> int:
    """Trainable parameter count in closed form."""
    K, M, L, d, u, N = cfg.K, cfg.M, cfg.L, cfg.d, cfg.u, cfg.N
    conv = (9 * K + K + 2 * K) + (9 * K * K + K + 2 * K)
    dense1 = L * (N * (K + M) * d + d)
    lstm = 4 * u * (d + u + 1)
    dense2 = u * N + N
    return conv + dense1 + lstm + dense2


# Parameter groups in the order conv1, conv2, per-lag dense, LSTM, output dense.
GROUPS = ("theta1", "theta2", "thetaD1", "thetaL", "thetaD2")


def group_of(name: str) -> str:
    head = name.split(".")[0]
    return {"conv1": "theta1", "bn1": "theta1", "conv2": "theta2", "bn2": "theta2",
            "dense1": "thetaD1", "lstm": "thetaL", "dense2": "thetaD2"}[head]


class ModelParams:
    """All trainable arrays plus batch-norm running statistics."""

    def __init__(self, config: StefConfig, arrays: dict[str, np.ndarray],
                 bn: Optional[dict[str, BatchNormState]] = None, seed: Optional[int] = None):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise ShapeError(f"parameter {name!r} has shape {np.shape(arrays[name])}, "
                                 f"config requires {shape}")
        self.config = config
        self.seed = seed
        self.trained_epochs = 0
        self.tensors = {name: Tensor(arrays[name], requires_grad=True, name=name)
                        for name in expected}
        self.bn = bn if bn is not None else {"bn1": BatchNormState.fresh(config.K),
                                             "bn2": BatchNormState.fresh(config.K)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, t in self.tensors.items():
            out[group_of(name)][name] = t
        return out

    def copy(self) -> "ModelParams":
        other = ModelParams(self.config, {k: t.data.copy() for k, t in self.tensors.items()},
                            {k: s.copy() for k, s in self.bn.items()}, self.seed)
        other.trained_epochs = self.trained_epochs
        return other

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def bn_populated(self) -> bool:
        return all(s.populated for s in self.bn.values())


def init_params(config: StefConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name.endswith(".beta"):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            arrays[name] = np.ones(shape)
        else:
            if len(shape) == 4:
                fan_in, fan_out = 9 * shape[2], 9 * shape[3]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, arrays, seed=seed)


def factor_rows(config: StefConfig) -> np.ndarray:
    """Row indices of a per-lag dense weight that multiply factor channels."""
    per_cell = config.K + config.M
    cells = np.arange(config.N)[:, None] * per_cell
    return (cells + config.K + np.arange(config.M)[None, :]).ravel()


def forward(params: ModelParams, E, F, mode: str = "train",
            trace: Optional[dict] = None) -> Tensor:
    """Run the network on demand lags ``E`` and factor lags ``F``.

    If ``trace`` is a dict it receives the intermediate arrays under the
    keys ``"D"``, ``"C"``, ``"B"``, ``"A"``, ``"g"`` and ``"h"``.
    """
    cfg = params.config
    E = E.data if isinstance(E, Tensor) else np.asarray(E, dtype=np.float64)
    F = F.data if isinstance(F, Tensor) else np.asarray(F, dtype=np.float64)
    if E.ndim != 4 or E.shape[1:] != (cfg.L, cfg.W, cfg.H):
        raise ShapeError(f"forward[input E]: expected (B, {cfg.L}, {cfg.W}, {cfg.H}), got {E.shape}")
    B = E.shape[0]
    if F.shape != (B, cfg.L, cfg.W, cfg.H, cfg.M):
        raise ShapeError(f"forward[input F]: expected ({B}, {cfg.L}, {cfg.W}, {cfg.H}, {cfg.M}), "
                         f"got {F.shape}")
    p = params.tensors

    x = Tensor._wrap(E.reshape(B * cfg.L, cfg.W, cfg.H, 1) / cfg.input_scale, False)
    x = ad.conv2d_same(x, p["conv1.kernel"], p["conv1.bias"])
    x = ad.relu(ad.batch_norm(x, p["bn1.gamma"], p["bn1.beta"], params.bn["bn1"], mode))
    x = ad.conv2d_same(x, p["conv2.kernel"], p["conv2.bias"])
    x = ad.relu(ad.batch_norm(x, p["bn2.gamma"], p["bn2.beta"], params.bn["bn2"], mode))
    D = ad.reshape(x, (B, cfg.L, cfg.W, cfg.H, cfg.K))

    C = ad.concat_last_axis(D, Tensor._wrap(F, False))
    Bf = ad.reshape(C, (B, cfg.L, cfg.flat_dim))

    A = [ad.relu(ad.dense_affine(ad.take(Bf, lag, axis=1),
                                 p[f"dense1.{lag}.weight"], p[f"dense1.{lag}.bias"]))
         for lag in range(cfg.L)]

    h = Tensor._wrap(np.zeros((B, cfg.u)), False)
    c = Tensor._wrap(np.zeros((B, cfg.u)), False)
    for lag in reversed(range(cfg.L)):
        h, c = ad.lstm_step(A[lag], h, c, p["lstm.w_input"], p["lstm.w_hidden"], p["lstm.bias"])

    out = ad.dense_affine(h, p["dense2.weight"], p["dense2.bias"])
    if cfg.input_scale != 1.0:
        out = ad.mul(out, Tensor(cfg.input_scale))
    pred = ad.reshape(out, (B, cfg.W, cfg.H))

    if trace is not None:
        trace.update(D=D.data, C=C.data, B=Bf.data, A=np.stack([a.data for a in A], axis=1),
                     g=h.data, h=out.data)
    return pred


def predict_batch(params: ModelParams, samples=None, *, E=None, F=None,
                  batch_size: int = 512) -> np.ndarray:
    """Inference-mode predictions ``(B, W, H)`` for a SampleSet or raw lags."""
    if samples is not None:
        E, F = samples.E, samples.F
    if not params.bn_populated():
        raise ValueError("predict_batch: batch-norm running statistics are unpopulated; "
                         "train the model or load a checkpoint first")
    outs = []
    with ad.no_grad():
        for s in range(0, len(E), batch_size):
            outs.append(forward(params, E[s:s + batch_size], F[s:s + batch_size], "infer").data)
    if not outs:
        cfg = params.config
        return np.zeros((0, cfg.W, cfg.H))
    return np.concatenate(outs, axis=0)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(params: ModelParams, path, trained_epochs: int = 0) -> None:
    """Write parameters and batch-norm statistics to a container file."""
    arrays = {name: t.data.astype("<f8") for name, t in params.tensors.items()}
    bn_meta = {}
    for key, state in params.bn.items():
        arrays[f"{key}.running_mean"] = state.running_mean.astype("<f8")
        arrays[f"{key}.running_var"] = state.running_var.astype("<f8")
        bn_meta[key] = {"momentum": state.momentum, "eps": state.eps, "updates": state.updates}
    meta = {"kind": "checkpoint", "format_version": CHECKPOINT_VERSION,
            "config": params.config.to_dict(), "seed": params.seed,
            "trained_epochs": int(trained_epochs), "batch_norm": bn_meta}
    write_container(path, meta, arrays)


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint; rejects version, config or shape inconsistencies."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint format_version {version} is not supported "
                         f"(this build reads version {CHECKPOINT_VERSION})")
    config = StefConfig.from_dict(meta["config"])
    bn = {}
    for key, info in meta["batch_norm"].items():
        bn[key] = BatchNormState(arrays.pop(f"{key}.running_mean"), arrays.pop(f"{key}.running_var"),
                                 info["momentum"], info["eps"], info["updates"])
        if bn[key].running_mean.shape != (config.K,):
            raise ShapeError(f"{path}: {key} statistics do not match K={config.K}")
    params = ModelParams(config, arrays, bn, seed=meta.get("seed"))
    params.trained_epochs = meta.get("trained_epochs", 0)
    return params


def zero_params(config: StefConfig) -> ModelParams:
    """Every trainable array (batch-norm gamma included) set to zero."""
    return ModelParams(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})


__all__ = [
    "CHECKPOINT_VERSION", "ModelParams", "StefConfig", "factor_rows", "forward", "init_params",
    "load_checkpoint", "param_count", "param_shapes", "predict_batch", "save_checkpoint",
    "zero_params",
]
