"""Full-precision training: cross-entropy, BPTT through the Euler unroll,
Adam updates, and accuracy/confusion reporting.

Forward and backward passes are vectorized over the batch dimension; the
math is identical to the per-sequence functions in ``afua`` (cross-checked
by tests).  Clamps are treated as straight-through in the backward pass, so
the gradients are the exact reverse-mode derivatives of the unclamped
recursion.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .afua import IntegrationConfig, NetworkParams, sigmoid
from .datapipe import DatasetSplit, InputSequence
from .errors import ConfigError, NumericalError

_PARAM_NAMES = ("W_z", "U_z", "W", "U", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 500
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainReport:
    """Per-epoch curves plus the selected parameters."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_seconds: float = 0.0
    config: TrainConfig | None = None


def loss(probabilities: np.ndarray, label: int) -> float:
    """Negative log probability of the true class, clamped at 1e-12."""
    return float(-np.log(max(float(probabilities[label]), 1e-12)))


def _stack_batch(batch: list[InputSequence]):
    X = np.stack([np.asarray(getattr(s, "steps", s), dtype=float)
                  for s in batch])  # (B, T, D)
    y = np.array([s.label for s in batch], dtype=np.int64)
    return X, y


def _forward_batch(X: np.ndarray, params: NetworkParams,
                   cfg: IntegrationConfig, keep_cache: bool):
    """Euler unroll over a (B, T, D) batch; optionally cache for backward."""
    B, T, _ = X.shape
    n = params.n_hidden
    dt_tau = cfg.dt / params.tau_h
    H = np.full((B, n), 0.5)
    cache = [] if keep_cache else None
    for t in range(T):
        Xt = X[:, t, :]
        xWz = Xt @ params.W_z.T
        xW = Xt @ params.W.T
        for _ in range(cfg.substeps_per_pattern):
            Z = sigmoid(xWz + H @ params.U_z.T)
            C = sigmoid(xW + H @ params.U.T)
            Ht = np.maximum(C, cfg.epsilon)
            G = 1.0 - H / Ht
            H_new = H + dt_tau * Z * G
            if keep_cache:
                cache.append((t, H, Z, C, Ht, G))
            H = np.clip(H_new, cfg.epsilon, 1.0 - cfg.epsilon)
    return H, cache


def _head_batch(H: np.ndarray, params: NetworkParams):
    A1 = sigmoid(H @ params.fc1_w.T + params.fc1_b)
    pre2 = A1 @ params.fc2_w.T + params.fc2_b
    A2 = np.maximum(pre2, 0.0)
    shifted = A2 - A2.max(axis=1, keepdims=True)
    E = np.exp(shifted)
    P = E / E.sum(axis=1, keepdims=True)
    return P, A1, A2


def forward_probabilities(batch, params: NetworkParams,
                          cfg: IntegrationConfig) -> np.ndarray:
    """Class probabilities for a list of sequences (batched)."""
    X, _ = _stack_batch(batch)
    H, _ = _forward_batch(X, params, cfg, keep_cache=False)
    P, _, _ = _head_batch(H, params)
    return P


def gradients(batch: list[InputSequence], params: NetworkParams,
              cfg: IntegrationConfig) -> dict[str, np.ndarray]:
    """Mean-loss gradients for every parameter via reverse-mode BPTT."""
    if not batch:
        raise ConfigError("gradient batch must be non-empty")
    X, y = _stack_batch(batch)
    B = len(batch)
    H_final, cache = _forward_batch(X, params, cfg, keep_cache=True)
    P, A1, A2 = _head_batch(H_final, params)

    grads = {name: np.zeros_like(getattr(params, name))
             for name in _PARAM_NAMES}

    # softmax + cross-entropy
    dA2 = P.copy()
    dA2[np.arange(B), y] -= 1.0
    dA2 /= B
    dpre2 = dA2 * (A2 > 0.0)
    grads["fc2_w"] = dpre2.T @ A1
    grads["fc2_b"] = dpre2.sum(axis=0)
    dA1 = dpre2 @ params.fc2_w
    dpre1 = dA1 * A1 * (1.0 - A1)
    grads["fc1_w"] = dpre1.T @ H_final
    grads["fc1_b"] = dpre1.sum(axis=0)
    dH = dpre1 @ params.fc1_w

    dt_tau = cfg.dt / params.tau_h
    for t, H_in, Z, C, Ht, G in reversed(cache):
        Xt = X[:, t, :]
        # clamp on the updated state is straight-through
        dZ = dH * dt_tau * G
        dG = dH * dt_tau * Z
        dHt = dG * (H_in / (Ht * Ht))
        dC = dHt  # straight-through at the epsilon floor
        dpre_c = dC * C * (1.0 - C)
        dpre_z = dZ * Z * (1.0 - Z)
        grads["W_z"] += dpre_z.T @ Xt
        grads["U_z"] += dpre_z.T @ H_in
        grads["W"] += dpre_c.T @ Xt
        grads["U"] += dpre_c.T @ H_in
        dH = dH - dG / Ht + dpre_z @ params.U_z + dpre_c @ params.U

    for name, gmat in grads.items():
        if not np.all(np.isfinite(gmat)):
            raise NumericalError(f"non-finite gradient in {name}")
    return grads


def batch_loss_and_hits(batch, params, cfg):
    X, y = _stack_batch(batch)
    H, _ = _forward_batch(X, params, cfg, keep_cache=False)
    P, _, _ = _head_batch(H, params)
    p_true = np.clip(P[np.arange(len(y)), y], 1e-12, None)
    pred = (P[:, 1] > P[:, 0]).astype(np.int64)
    return float(-np.log(p_true).mean()), int((pred == y).sum())


def init_params(seed: int, n_inputs: int = 25, n_hidden: int = 16,
                tau_h: float = 1.0) -> NetworkParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(0,)))

    def u(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return NetworkParams(
        W_z=u((n_hidden, n_inputs), n_inputs),
        U_z=u((n_hidden, n_hidden), n_hidden),
        W=u((n_hidden, n_inputs), n_inputs),
        U=u((n_hidden, n_hidden), n_hidden),
        fc1_w=u((2, n_hidden), n_hidden),
        fc1_b=np.zeros(2),
        fc2_w=u((2, 2), 2),
        fc2_b=np.zeros(2),
        tau_h=tau_h,
    )


def train(splits: DatasetSplit, config: TrainConfig,
          cfg: IntegrationConfig = IntegrationConfig()):
    """Adam over mini-batches; returns best-validation-epoch params + report.

    The training list is sorted by provenance before the seeded shuffle, so
    results do not depend on the order sequences were loaded from disk.
    Deterministic given config.seed.
    """
    if not splits.train or not splits.validation:
        raise ConfigError("train and validation sets must be non-empty")
    t_start = time.perf_counter()
    train_set = sorted(splits.train, key=lambda s: s.provenance)
    val_set = sorted(splits.validation, key=lambda s: s.provenance)

    params = init_params(config.seed)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))

    m = {k: np.zeros_like(getattr(params, k)) for k in _PARAM_NAMES}
    v = {k: np.zeros_like(getattr(params, k)) for k in _PARAM_NAMES}
    step = 0
    report = TrainReport(config=config)
    best_acc = -1.0
    best_params = params

    n = len(train_set)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        epoch_hits = 0
        for lo in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            bl, hits = batch_loss_and_hits(batch, params, cfg)
            if not np.isfinite(bl):
                raise NumericalError(f"training diverged at epoch {epoch}")
            epoch_loss += bl * len(batch)
            epoch_hits += hits
            grads = gradients(batch, params, cfg)
            step += 1
            updates = {}
            for k in _PARAM_NAMES:
                m[k] = config.beta1 * m[k] + (1 - config.beta1) * grads[k]
                v[k] = config.beta2 * v[k] + (1 - config.beta2) * grads[k] ** 2
                mhat = m[k] / (1 - config.beta1 ** step)
                vhat = v[k] / (1 - config.beta2 ** step)
                updates[k] = (getattr(params, k)
                              - config.learning_rate * mhat
                              / (np.sqrt(vhat) + config.adam_eps))
            params = replace(params, **updates)

        vl, vhits = _eval_in_batches(val_set, params, cfg)
        report.train_loss.append(epoch_loss / n)
        report.train_acc.append(epoch_hits / n)
        report.val_loss.append(vl)
        val_acc = vhits / len(val_set)
        report.val_acc.append(val_acc)
        if val_acc >= best_acc:  # ties resolve to the later epoch
            best_acc = val_acc
            best_params = params
            report.best_epoch = epoch

    report.wall_seconds = time.perf_counter() - t_start
    return best_params, report


def _eval_in_batches(sequences, params, cfg, batch_size: int = 256):
    total_loss = 0.0
    hits = 0
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo:lo + batch_size]
        bl, h = batch_loss_and_hits(chunk, params, cfg)
        total_loss += bl * len(chunk)
        hits += h
    return total_loss / len(sequences), hits


def evaluate(params, sequences: list[InputSequence],
             cfg: IntegrationConfig = IntegrationConfig()):
    """Accuracy and 2x2 confusion matrix (rows true, columns predicted).

    Accepts full-precision NetworkParams or QuantizedParams (dequantized on
    the fly).
    """
    if not sequences:
        raise ConfigError("evaluation set must be non-empty")
    if hasattr(params, "dequantize"):
        params = params.dequantize()
    confusion = np.zeros((2, 2), dtype=np.int64)
    for lo in range(0, len(sequences), 256):
        chunk = sequences[lo:lo + 256]
        P = forward_probabilities(chunk, params, cfg)
        pred = (P[:, 1] > P[:, 0]).astype(np.int64)
        for s, p in zip(chunk, pred):
            confusion[s.label, p] += 1
    accuracy = float(np.trace(confusion)) / len(sequences)
    return accuracy, confusion


def save_training_curve(report: TrainReport, path) -> None:
    """CSV: epoch, train_loss, train_acc, val_loss, val_acc."""
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for i in range(len(report.train_loss)):
            w.writerow([i, repr(report.train_loss[i]), repr(report.train_acc[i]),
                        repr(report.val_loss[i]), repr(report.val_acc[i])])


def save_confusion_csv(accuracy: float, confusion: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f)
        w.writerow(["", "pred_negative", "pred_positive"])
        w.writerow(["true_negative", int(confusion[0, 0]), int(confusion[0, 1])])
        w.writerow(["true_positive", int(confusion[1, 0]), int(confusion[1, 1])])
        w.writerow(["accuracy", repr(accuracy), ""])
