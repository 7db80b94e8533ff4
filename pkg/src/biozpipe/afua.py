"""Gated continuous-time recurrent classifier.

The recurrent layer holds each input vector fixed while its hidden state
relaxes toward a gated candidate:

    z      = logistic(W_z x + U_z h)
    h_cand = max(logistic(W x + U h), eps)
    tau_h * dh/dt = z * (1 - h / h_cand)

integrated with forward Euler.  A two-unit sigmoid layer, a two-unit ReLU
layer, and a softmax head map the final hidden state to class
probabilities.  The state update multiplies no two state vectors together
(no Hadamard products); each unit couples to the others only through the
four matrix-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, NumericalError

N_HIDDEN = 16

LABEL_BENIGN = 0
LABEL_LESION = 1


@dataclass(frozen=True)
class NetworkParams:
    """All learnable weights plus the (fixed) relaxation time constant."""

    W_z: np.ndarray  # (16, 25)
    U_z: np.ndarray  # (16, 16)
    W: np.ndarray  # (16, 25)
    U: np.ndarray  # (16, 16)
    fc1_w: np.ndarray  # (2, 16)
    fc1_b: np.ndarray  # (2,)
    fc2_w: np.ndarray  # (2, 2)
    fc2_b: np.ndarray  # (2,)
    tau_h: float = 1.0

    def __post_init__(self):
        if self.tau_h <= 0:
            raise ConfigError("tau_h must be positive")
        for name in ("W_z", "U_z", "W", "U", "fc1_w", "fc1_b", "fc2_w", "fc2_b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"non-finite entries in {name}")

    @property
    def n_hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W_z.shape[1]

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name)
                for name in ("W_z", "U_z", "W", "U",
                             "fc1_w", "fc1_b", "fc2_w", "fc2_b")}


@dataclass(frozen=True)
class AfuaState:
    """Hidden state plus the most recently computed gate and candidate."""

    h: np.ndarray
    z: np.ndarray
    h_tilde: np.ndarray


@dataclass(frozen=True)
class IntegrationConfig:
    """Euler discretization: S substeps of size dt per held input."""

    substeps_per_pattern: int = 10
    dt: float = 0.1
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.substeps_per_pattern < 1:
            raise ConfigError("substeps_per_pattern must be >= 1")
        if self.dt < 0:
            raise ConfigError("dt must be non-negative")
        if not 0 < self.epsilon <= 1e-4:
            raise ConfigError("epsilon must be in (0, 1e-4]")


# output clamped strictly inside (0, 1): the candidate state is divided by,
# and the saturated tails would otherwise round to exactly 0 or 1
_SIG_FLOOR = np.nextafter(0.0, 1.0)
_SIG_CEIL = np.nextafter(1.0, 0.0)


def sigmoid(v):
    """Logistic function, numerically stable, with open range (0, 1)."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    out = np.clip(out, _SIG_FLOOR, _SIG_CEIL)
    if out.ndim == 0:
        return float(out)
    return out


def initial_state(n_hidden: int = N_HIDDEN, h0: float = 0.5) -> AfuaState:
    h = np.full(n_hidden, h0)
    return AfuaState(h=h, z=np.full(n_hidden, 0.5),
                     h_tilde=np.full(n_hidden, 0.5))


def afua_step(x: np.ndarray, state: AfuaState, params: NetworkParams,
              cfg: IntegrationConfig) -> AfuaState:
    """One forward-Euler substep with the input held at x."""
    h = state.h
    z = sigmoid(params.W_z @ x + params.U_z @ h)
    h_tilde = np.maximum(sigmoid(params.W @ x + params.U @ h), cfg.epsilon)
    h_new = h + cfg.dt * (z / params.tau_h) * (1.0 - h / h_tilde)
    for name, vec in (("gate", z), ("candidate", h_tilde), ("state", h_new)):
        bad = ~np.isfinite(vec)
        if bad.any():
            raise NumericalError(
                f"non-finite {name} value at unit {int(np.argmax(bad))}"
            )
    h_new = np.clip(h_new, cfg.epsilon, 1.0 - cfg.epsilon)
    return AfuaState(h=h_new, z=z, h_tilde=h_tilde)


def run_sequence(seq, params: NetworkParams, cfg: IntegrationConfig,
                 h0: float = 0.5) -> np.ndarray:
    """Integrate through all input steps; return the final hidden vector.

    ``seq`` is an InputSequence or a plain (steps, inputs) array.  Each row
    is held constant for S substeps.
    """
    steps = np.asarray(getattr(seq, "steps", seq), dtype=float)
    if steps.ndim != 2 or steps.shape[1] != params.n_inputs:
        raise ConfigError(
            f"sequence width {steps.shape} does not match {params.n_inputs} inputs"
        )
    if cfg.dt > params.tau_h:
        raise ConfigError("dt must not exceed tau_h")
    state = initial_state(params.n_hidden, h0)
    for t, x in enumerate(steps):
        try:
            for _ in range(cfg.substeps_per_pattern):
                state = afua_step(x, state, params, cfg)
        except NumericalError as exc:
            raise NumericalError(f"step {t}: {exc}") from exc
    return state.h


def head_forward(h: np.ndarray, params: NetworkParams) -> np.ndarray:
    """Sigmoid FC, ReLU FC, softmax; returns the 2 class probabilities."""
    a1 = sigmoid(params.fc1_w @ h + params.fc1_b)
    a2 = np.maximum(params.fc2_w @ a1 + params.fc2_b, 0.0)
    e = np.exp(a2 - a2.max())
    return e / e.sum()


def classify(seq, params: NetworkParams,
             cfg: IntegrationConfig = IntegrationConfig()):
    """Label one sequence; ties resolve to the benign class (0)."""
    p = head_forward(run_sequence(seq, params, cfg), params)
    label = LABEL_LESION if p[1] > p[0] else LABEL_BENIGN
    return label, p


# ---------------------------------------------------------------------------
# Model file: named matrices in plain text, bit-exact on reload
# ---------------------------------------------------------------------------

_MODEL_HEADER = "biozpipe-model v1"


def save_model(params: NetworkParams, cfg: IntegrationConfig, path) -> None:
    lines = [_MODEL_HEADER,
             f"tau_h {float(params.tau_h)!r}",
             f"substeps {cfg.substeps_per_pattern}",
             f"dt {float(cfg.dt)!r}",
             f"epsilon {float(cfg.epsilon)!r}"]
    for name, mat in params.matrices().items():
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        lines.append(f"matrix {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path) -> tuple[NetworkParams, IntegrationConfig]:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != _MODEL_HEADER:
        raise FormatError(f"{path}: not a biozpipe model file")
    try:
        tau_h = float(lines[1].split()[1])
        substeps = int(lines[2].split()[1])
        dt = float(lines[3].split()[1])
        epsilon = float(lines[4].split()[1])
        mats: dict[str, np.ndarray] = {}
        idx = 5
        while idx < len(lines):
            _, name, r, c = lines[idx].split()
            r, c = int(r), int(c)
            rows = [[float(v) for v in lines[idx + 1 + k].split()]
                    for k in range(r)]
            mats[name] = np.array(rows)
            idx += 1 + r
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed model file: {exc}") from exc
    expected = {"W_z", "U_z", "W", "U", "fc1_w", "fc1_b", "fc2_w", "fc2_b"}
    if set(mats) != expected:
        raise FormatError(f"{path}: missing matrices {expected - set(mats)}")
    params = NetworkParams(
        W_z=mats["W_z"], U_z=mats["U_z"], W=mats["W"], U=mats["U"],
        fc1_w=mats["fc1_w"], fc1_b=mats["fc1_b"].ravel(),
        fc2_w=mats["fc2_w"], fc2_b=mats["fc2_b"].ravel(), tau_h=tau_h,
    )
    cfg = IntegrationConfig(substeps_per_pattern=substeps, dt=dt,
                            epsilon=epsilon)
    return params, cfg
