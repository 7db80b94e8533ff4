"""Signed fixed-point weight quantization and the bit-width accuracy sweep.

N total bits means one sign bit plus N-1 magnitude bits: codes live in
[-(2^(N-1)-1), +(2^(N-1)-1)] with a symmetric per-matrix scale equal to the
largest absolute weight, and ties round half away from zero.  Only weights
are quantized; activations, state, and the time constant stay full
precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .afua import IntegrationConfig, NetworkParams, classify
from .errors import ConfigError, FormatError

MIN_BITS = 3
MAX_BITS = 16

_MATRIX_NAMES = ("W_z", "U_z", "W", "U", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass(frozen=True)
class QuantSpec:
    """Bit width plus the per-matrix symmetric scales."""

    total_bits: int
    scales: dict[str, float]

    def __post_init__(self):
        if not MIN_BITS <= self.total_bits <= MAX_BITS:
            raise ConfigError(
                f"bit width {self.total_bits} outside [{MIN_BITS}, {MAX_BITS}]"
            )
        if any(s <= 0 for s in self.scales.values()):
            raise ConfigError("scales must be positive")

    @property
    def max_code(self) -> int:
        return 2 ** (self.total_bits - 1) - 1

    def step(self, name: str) -> float:
        return self.scales[name] / self.max_code


@dataclass(frozen=True)
class QuantizedParams:
    """Integer codes mirroring NetworkParams; tau_h stays full precision."""

    codes: dict[str, np.ndarray]
    spec: QuantSpec
    tau_h: float

    def dequantize(self) -> NetworkParams:
        deq = {name: self.codes[name] * self.spec.step(name)
               for name in _MATRIX_NAMES}
        return NetworkParams(tau_h=self.tau_h, **deq)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (unlike banker's rounding)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def make_spec(params: NetworkParams, total_bits: int) -> QuantSpec:
    scales = {}
    for name in _MATRIX_NAMES:
        s = float(np.max(np.abs(getattr(params, name))))
        scales[name] = s if s > 0 else 1.0
    return QuantSpec(total_bits=total_bits, scales=scales)


def quantize(params: NetworkParams, total_bits: int) -> QuantizedParams:
    """Quantize every weight matrix and bias with the per-matrix rule."""
    spec = make_spec(params, total_bits)
    codes = {}
    for name in _MATRIX_NAMES:
        w = np.asarray(getattr(params, name), dtype=float)
        c = round_half_away(w / spec.step(name))
        codes[name] = np.clip(c, -spec.max_code, spec.max_code).astype(np.int32)
    return QuantizedParams(codes=codes, spec=spec, tau_h=float(params.tau_h))


def quantized_forward(qparams, seq, cfg: IntegrationConfig = IntegrationConfig()):
    """Classify with dequantized weights; full-precision state/activations.

    Passing full-precision NetworkParams runs the identical classify path
    (passthrough mode).
    """
    if isinstance(qparams, NetworkParams):
        return classify(seq, qparams, cfg)
    return classify(seq, qparams.dequantize(), cfg)


def sweep(params: NetworkParams, test_set, bit_list,
          cfg: IntegrationConfig = IntegrationConfig()):
    """Accuracy at each bit width plus full precision.

    Returns rows of (label, accuracy) where label is the bit count or the
    literal "FP".
    """
    from .trainer import evaluate  # local import avoids a cycle

    if not test_set:
        raise ConfigError("sweep needs a non-empty evaluation set")
    rows = []
    for bits in bit_list:
        acc, _ = evaluate(quantize(params, int(bits)), test_set, cfg)
        rows.append((str(int(bits)), acc))
    acc_fp, _ = evaluate(params, test_set, cfg)
    rows.append(("FP", acc_fp))
    return rows


def save_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f)
        w.writerow(["bits", "accuracy"])
        for label, acc in rows:
            w.writerow([label, repr(float(acc))])


# ---------------------------------------------------------------------------
# Quantized model file: the model format extended with codes and scales
# ---------------------------------------------------------------------------

_QMODEL_HEADER = "biozpipe-qmodel v1"


def save_quantized_model(qparams: QuantizedParams, cfg: IntegrationConfig,
                         path) -> None:
    lines = [_QMODEL_HEADER,
             f"bits {qparams.spec.total_bits}",
             f"tau_h {float(qparams.tau_h)!r}",
             f"substeps {cfg.substeps_per_pattern}",
             f"dt {float(cfg.dt)!r}",
             f"epsilon {float(cfg.epsilon)!r}"]
    for name in _MATRIX_NAMES:
        mat = np.atleast_2d(qparams.codes[name])
        lines.append(f"codes {name} {mat.shape[0]} {mat.shape[1]} "
                     f"{qparams.spec.scales[name]!r}")
        for row in mat:
            lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_quantized_model(path) -> tuple[QuantizedParams, IntegrationConfig]:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != _QMODEL_HEADER:
        raise FormatError(f"{path}: not a biozpipe quantized model file")
    try:
        bits = int(lines[1].split()[1])
        tau_h = float(lines[2].split()[1])
        substeps = int(lines[3].split()[1])
        dt = float(lines[4].split()[1])
        epsilon = float(lines[5].split()[1])
        codes: dict[str, np.ndarray] = {}
        scales: dict[str, float] = {}
        idx = 6
        while idx < len(lines):
            _, name, r, c, scale = lines[idx].split()
            r, c = int(r), int(c)
            rows = [[int(v) for v in lines[idx + 1 + k].split()]
                    for k in range(r)]
            mat = np.array(rows, dtype=np.int32)
            codes[name] = mat.ravel() if name.endswith("_b") else mat
            scales[name] = float(scale)
            idx += 1 + r
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed quantized model: {exc}") from exc
    if set(codes) != set(_MATRIX_NAMES):
        raise FormatError(f"{path}: missing matrices")
    spec = QuantSpec(total_bits=bits, scales=scales)
    return (QuantizedParams(codes=codes, spec=spec, tau_h=tau_h),
            IntegrationConfig(substeps_per_pattern=substeps, dt=dt,
                              epsilon=epsilon))
