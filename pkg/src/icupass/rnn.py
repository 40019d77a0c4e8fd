"""Single-layer LSTM sequence regressor written directly in numpy.

Gate blocks are stacked in the order (input, forget, candidate, output) along
the first axis of ``W``, ``U`` and ``b``. Every time step emits a 3-vector of
standardized target predictions through a linear head. Two training regimes
differ only in which steps enter the loss: ``PMD`` uses every grid step before
medical discharge, ``H12`` only the steps of the first 12 hours.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .cohort import Episode
from .featurize import FeatureMatrix, NormStats, build_matrix, grid_length
from .io import read_json, write_json

log = logging.getLogger(__name__)

MODEL_FORMAT = "icupass.lstm"
MODEL_VERSION = 1
PARAM_NAMES = ("W", "U", "b", "V", "c_out")
N_TARGETS = 3
PREDICTION_HOUR = 12.0
REGIMES = ("PMD", "H12")


class TrainingDivergedError(RuntimeError):
    pass


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmParams:
    W: np.ndarray  # 4H x D
    U: np.ndarray  # 4H x H
    b: np.ndarray  # 4H
    V: np.ndarray  # 3 x H
    c_out: np.ndarray  # 3

    def __post_init__(self):
        H4, D = self.W.shape
        if H4 % 4:
            raise ValueError("W must have 4H rows")
        H = H4 // 4
        expected = {"U": (4 * H, H), "b": (4 * H,), "V": (N_TARGETS, H), "c_out": (N_TARGETS,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "LstmParams":
        return LstmParams(**{n: a.copy() for n, a in self.arrays().items()})

    def zeros_like(self) -> "LstmParams":
        return LstmParams(**{n: np.zeros_like(a) for n, a in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def to_dict(self) -> dict:
        return {n: a.tolist() for n, a in self.arrays().items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LstmParams":
        return cls(**{n: np.asarray(d[n], dtype=float) for n in PARAM_NAMES})


def init_params(input_size: int, hidden_size: int, rng: np.random.Generator, forget_bias: float = 1.0) -> LstmParams:
    H, D = hidden_size, input_size
    k = 1.0 / math.sqrt(H)
    W = rng.uniform(-k, k, (4 * H, D))
    U = rng.uniform(-k, k, (4 * H, H))
    V = rng.uniform(-k, k, (N_TARGETS, H))
    b = np.zeros(4 * H)
    b[H : 2 * H] = forget_bias
    return LstmParams(W, U, b, V, np.zeros(N_TARGETS))


def zero_params(input_size: int, hidden_size: int) -> LstmParams:
    H, D = hidden_size, input_size
    return LstmParams(
        np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros((N_TARGETS, H)), np.zeros(N_TARGETS)
    )


# --- forward ------------------------------------------------------------------------


class GateCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    preact: np.ndarray  # 4H pre-activations
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def cell_forward(params: LstmParams, x_t, h_prev, c_prev) -> tuple[np.ndarray, np.ndarray, GateCache]:
    x_t, h_prev, c_prev = (np.asarray(a, dtype=float) for a in (x_t, h_prev, c_prev))
    H = params.hidden_size
    if x_t.shape != (params.input_size,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError("cell_forward: dimension mismatch")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev)) and np.all(np.isfinite(c_prev))):
        raise ValueError("cell_forward: non-finite input")
    a = params.W @ x_t + params.U @ h_prev + params.b
    i = sigmoid(a[:H])
    f = sigmoid(a[H : 2 * H])
    g = np.tanh(a[2 * H : 3 * H])
    o = sigmoid(a[3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, GateCache(x_t, h_prev, c_prev, a, i, f, g, o, tc)


class _Trace(NamedTuple):
    X: np.ndarray  # T x B x D
    h: np.ndarray  # (T+1) x B x H, h[0] = 0
    c: np.ndarray  # (T+1) x B x H
    act: np.ndarray  # T x B x 4H gate activations
    tanh_c: np.ndarray  # T x B x H
    Y: np.ndarray  # T x B x 3


def _forward(params: LstmParams, X: np.ndarray) -> _Trace:
    """Batched forward over ``X`` shaped (B, T, D) from zero initial state."""
    B, T, D = X.shape
    H = params.hidden_size
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
    XW = Xt @ params.W.T + params.b
    UT = params.U.T
    h = np.zeros((T + 1, B, H))
    c = np.zeros((T + 1, B, H))
    act = np.empty((T, B, 4 * H))
    tanh_c = np.empty((T, B, H))
    for t in range(T):
        a = XW[t] + h[t] @ UT
        s = act[t]
        s[:, : 2 * H] = sigmoid(a[:, : 2 * H])
        s[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        s[:, 3 * H :] = sigmoid(a[:, 3 * H :])
        c[t + 1] = s[:, H : 2 * H] * c[t] + s[:, :H] * s[:, 2 * H : 3 * H]
        tanh_c[t] = np.tanh(c[t + 1])
        h[t + 1] = s[:, 3 * H :] * tanh_c[t]
    Y = h[1:] @ params.V.T + params.c_out
    return _Trace(Xt, h, c, act, tanh_c, Y)


def _as_time_major(matrix) -> np.ndarray:
    values = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=float)
    return values.T  # D x T -> T x D


def sequence_forward(params: LstmParams, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Per-step predictions (T x 3) in standardized target space."""
    X = _as_time_major(matrix)
    if X.shape[1] != params.input_size:
        raise ValueError(f"matrix has {X.shape[1]} variables, model expects {params.input_size}")
    return _forward(params, X[None])[5][:, 0, :]


# --- loss and BPTT -----------------------------------------------------------------------


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # B x T_max x D, zero padded
    lengths: np.ndarray  # B
    loss_end: np.ndarray  # B, exclusive end of each loss window
    targets: np.ndarray  # B x 3, standardized

    def __post_init__(self):
        B = self.inputs.shape[0]
        if not (len(self.lengths) == len(self.loss_end) == len(self.targets) == B):
            raise ValueError("batch fields disagree on batch size")
        if np.any(self.lengths < 1) or np.any(self.loss_end > self.lengths):
            raise ValueError("need lengths >= 1 and loss_end <= length")
        if np.any(self.loss_end < 1):
            raise ValueError("empty loss window")


def make_batch(sequences: Sequence[np.ndarray], targets: np.ndarray, loss_end: Sequence[int]) -> SequenceBatch:
    """Pad time-major (T_i x D) sequences into one batch."""
    lengths = np.array([len(s) for s in sequences])
    D = sequences[0].shape[1]
    X = np.zeros((len(sequences), int(lengths.max()), D))
    for k, s in enumerate(sequences):
        X[k, : len(s)] = s
    return SequenceBatch(X, lengths, np.asarray(loss_end, dtype=int), np.asarray(targets, dtype=float))


def _loss_weights(batch: SequenceBatch, T: int) -> np.ndarray:
    # each sequence contributes the mean over its own window; sequences are averaged
    B = len(batch.lengths)
    steps = np.arange(T)[:, None]
    inside = steps < batch.loss_end[None, :]
    return inside / (B * N_TARGETS * batch.loss_end[None, :].astype(float))


def batch_loss(params: LstmParams, batch: SequenceBatch) -> float:
    T = int(batch.loss_end.max())
    tr = _forward(params, batch.inputs[:, :T])
    w = _loss_weights(batch, T)
    return float(np.sum(w[..., None] * (tr.Y - batch.targets[None]) ** 2))


def loss_and_gradients(params: LstmParams, batch: SequenceBatch) -> tuple[float, LstmParams]:
    """Mean squared error over every sequence's loss window and its exact
    gradient by backpropagation through time."""
    T = int(batch.loss_end.max())  # later steps cannot influence the loss
    H = params.hidden_size
    tr = _forward(params, batch.inputs[:, :T])
    w = _loss_weights(batch, T)[..., None]
    err = tr.Y - batch.targets[None]
    loss = float(np.sum(w * err**2))

    dY = 2.0 * w * err  # T x B x 3
    dV = np.einsum("tbk,tbh->kh", dY, tr.h[1:])
    dc_out = dY.sum(axis=(0, 1))
    dH_out = dY @ params.V
    dA = np.empty_like(tr.act)
    dh_next = np.zeros_like(tr.h[0])
    dc_next = np.zeros_like(tr.c[0])
    U = params.U
    for t in range(T - 1, -1, -1):
        s = tr.act[t]
        i, f, g, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H : 3 * H], s[:, 3 * H :]
        tc = tr.tanh_c[t]
        dh = dH_out[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = dA[t]
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H : 2 * H] = dc * tr.c[t] * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = da @ U
    flat = dA.reshape(-1, 4 * H)
    dW = flat.T @ tr.X.reshape(-1, tr.X.shape[2])
    dU = flat.T @ tr.h[:-1].reshape(-1, H)
    db = flat.sum(axis=0)
    return loss, LstmParams(dW, dU, db, dV, dc_out)


# --- optimizer ------------------------------------------------------------------------------


def global_norm(grads: LstmParams) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays().values()))


def clip_gradients(grads: LstmParams, max_norm: float) -> tuple[LstmParams, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return grads, norm
    scale = max_norm / norm
    return LstmParams(**{n: a * scale for n, a in grads.arrays().items()}), norm


class Adam:
    def __init__(self, params: LstmParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: LstmParams, grads: LstmParams) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in PARAM_NAMES:
            g = getattr(grads, name)
            m = getattr(self.m, name)
            v = getattr(self.v, name)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = getattr(params, name)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- training -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "PMD"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    hidden_size: int = 64
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("learning_rate", "eps", "batch_size", "max_epochs", "patience", "clip_norm", "hidden_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        return cls(**known)


@dataclass
class LstmModel:
    params: LstmParams
    target_mean: np.ndarray
    target_std: np.ndarray
    stats: NormStats
    config: TrainConfig
    grid_step_hr: float = 1.0
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "input_size": self.params.input_size,
            "hidden_size": self.params.hidden_size,
            "gate_order": ["input", "forget", "candidate", "output"],
            "params": self.params.to_dict(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "input_stats": self.stats.to_dict(),
            "grid_step_hr": self.grid_step_hr,
            "config": asdict(self.config),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LstmModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"not a version-{MODEL_VERSION} LSTM model artifact")
        return cls(
            LstmParams.from_dict(d["params"]),
            np.asarray(d["target_mean"], dtype=float),
            np.asarray(d["target_std"], dtype=float),
            NormStats.from_dict(d["input_stats"]),
            TrainConfig.from_dict(d["config"]),
            float(d["grid_step_hr"]),
            list(d.get("trace", [])),
        )


def save_model(path: str | os.PathLike, model: LstmModel) -> Path:
    return write_json(path, model.to_dict())


def load_model(path: str | os.PathLike) -> LstmModel:
    return LstmModel.from_dict(read_json(path))


def prediction_index(grid_step_hr: float) -> int:
    return grid_length(PREDICTION_HOUR, grid_step_hr) - 1


def regime_end_hr(episode: Episode, regime: str) -> float:
    if regime == "PMD":
        return episode.medical_discharge_hr
    return min(PREDICTION_HOUR, episode.medical_discharge_hr)


def _sequences(episodes, end_hrs, stats, grid_step_hr) -> list[np.ndarray]:
    return [np.ascontiguousarray(build_matrix(e, t, stats, grid_step_hr).values.T) for e, t in zip(episodes, end_hrs)]


def _batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # shuffle, then sort by length inside large chunks to limit padding
    order = rng.permutation(len(lengths))
    chunk = batch_size * 16
    batches = []
    for s in range(0, len(order), chunk):
        part = order[s : s + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches += [part[k : k + batch_size] for k in range(0, len(part), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def _predict_std(params: LstmParams, seqs: Sequence[np.ndarray], index: int, chunk: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(seqs), chunk):
        part = seqs[s : s + chunk]
        X = np.zeros((len(part), index + 1, params.input_size))
        for k, seq in enumerate(part):
            X[k] = seq[: index + 1]
        out.append(_forward(params, X).Y[index])
    return np.concatenate(out, axis=0)


def train(
    train_episodes: Sequence[Episode],
    train_targets: np.ndarray,
    val_episodes: Sequence[Episode],
    val_targets: np.ndarray,
    stats: NormStats,
    config: TrainConfig,
    grid_step_hr: float = 1.0,
) -> LstmModel:
    """Adam + global-norm clipping on the regime's loss windows; keeps the
    parameters with the best mean 12th-hour validation rMSE (raw units) and
    stops after ``patience`` epochs without improvement."""
    if not train_episodes or not val_episodes:
        raise ValueError("train and validation partitions must be non-empty")
    train_targets = np.asarray(train_targets, dtype=float).reshape(-1, N_TARGETS)
    val_targets = np.asarray(val_targets, dtype=float).reshape(-1, N_TARGETS)
    t_mean = train_targets.mean(axis=0)
    t_std = train_targets.std(axis=0)
    t_std = np.where(t_std > 0, t_std, 1.0)
    y_train = (train_targets - t_mean) / t_std

    idx12 = prediction_index(grid_step_hr)
    seqs = _sequences(train_episodes, [regime_end_hr(e, config.regime) for e in train_episodes], stats, grid_step_hr)
    lengths = np.array([len(s) for s in seqs])
    if np.any(lengths < idx12 + 1):
        raise ValueError("every training episode needs at least 12 hours before medical discharge")
    loss_end = lengths if config.regime == "PMD" else np.minimum(lengths, idx12 + 1)
    val_seqs = _sequences(val_episodes, [PREDICTION_HOUR] * len(val_episodes), stats, grid_step_hr)

    rng = np.random.default_rng(config.seed)
    params = init_params(len(stats.variable_ids), config.hidden_size, rng, config.forget_bias)
    opt = Adam(params, config.learning_rate, config.betas, config.eps)

    def val_score(p):
        pred = _predict_std(p, val_seqs, idx12) * t_std + t_mean
        per_vital = np.sqrt(np.mean((pred - val_targets) ** 2, axis=0))
        return float(per_vital.mean()), per_vital

    best_score, best_params, best_epoch = math.inf, params.copy(), 0
    trace = []
    for epoch in range(1, config.max_epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(lengths, config.batch_size, rng):
            batch = make_batch([seqs[k] for k in idx], y_train[idx], loss_end[idx])
            loss, grads = loss_and_gradients(params, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"{config.regime}: non-finite loss at epoch {epoch} (lr={config.learning_rate}, "
                    f"hidden={config.hidden_size}); last finite epoch loss {trace[-1]['train_loss'] if trace else None}"
                )
            grads, _ = clip_gradients(grads, config.clip_norm)
            opt.step(params, grads)
            total += loss * len(idx)
            seen += len(idx)
        score, per_vital = val_score(params)
        trace.append(
            {"epoch": epoch, "train_loss": total / seen, "val_score": score, "val_rmse": per_vital.tolist()}
        )
        if score < best_score:
            best_score, best_params, best_epoch = score, params.copy(), epoch
        elif epoch - best_epoch >= config.patience:
            break
        log.debug("%s epoch %d loss %.4f val %.4f", config.regime, epoch, total / seen, score)
    log.info("%s: best validation score %.4f at epoch %d of %d", config.regime, best_score, best_epoch, len(trace))
    return LstmModel(best_params, t_mean, t_std, stats, config, grid_step_hr, trace)


def grid_search(
    train_episodes,
    train_targets,
    val_episodes,
    val_targets,
    stats: NormStats,
    config: TrainConfig,
    hidden_sizes: Sequence[int] = (32, 64, 128),
    learning_rates: Sequence[float] = (1e-3, 3e-4),
    grid_step_hr: float = 1.0,
) -> LstmModel:
    """Train every (hidden size, learning rate) pair; keep the best on validation."""
    best, best_score = None, math.inf
    for H in hidden_sizes:
        for lr in learning_rates:
            m = train(
                train_episodes, train_targets, val_episodes, val_targets, stats,
                replace(config, hidden_size=H, learning_rate=lr), grid_step_hr,
            )
            score = min(r["val_score"] for r in m.trace)
            if score < best_score:
                best, best_score = m, score
    return best


def predict_many(model: LstmModel, episodes: Sequence[Episode], stats: NormStats | None = None) -> np.ndarray:
    """12th-hour predictions in raw units (N x 3: bpm, mmHg, mmHg)."""
    stats = stats or model.stats
    idx = prediction_index(model.grid_step_hr)
    seqs = _sequences(episodes, [PREDICTION_HOUR] * len(episodes), stats, model.grid_step_hr)
    return _predict_std(model.params, seqs, idx) * model.target_std + model.target_mean


def predict_at_12h(model: LstmModel, episode: Episode, stats: NormStats | None = None) -> tuple[float, float, float]:
    return tuple(float(v) for v in predict_many(model, [episode], stats)[0])
