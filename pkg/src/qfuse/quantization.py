"""Fake quantizers with straight-through gradients.

Four families share one uniform quantize-dequantize forward:

    x_hat = clamp(round((x - offset) / step), q_min, q_max) * step + offset

and differ in which parameters learn:

  - ``uniform``: nothing learns; step frozen at calibration.
  - ``pact``: activation clip bound learns; step is re-derived as
    clip / q_max each forward. Gradient flows only through the clamp.
  - ``lsq``: step learns, for weights and activations.
  - ``lsq+``: step learns everywhere; activations add a learnable offset.

Rounding uses round-half-to-even (np.rint) for cross-platform determinism.
Gradients follow straight-through semantics: the round op is treated as
slope-1 at the working point. ``ste_backward``, ``pact_clip_gradient`` and
``lsq_step_gradient`` expose the individual rules on raw arrays; the tape op
``fake_quantize`` wires them into reverse mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qfuse.autodiff import Parameter, Tape, Tensor, _result

STEP_FLOOR = 1e-8

_KINDS = ("uniform", "pact", "lsq", "lsq+")


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    signed: bool
    target: str  # "weights" | "activations"

    def __post_init__(self):
        if not (2 <= self.bits <= 8):
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.target not in ("weights", "activations"):
            raise ValueError(f"bad target {self.target!r}")

    @property
    def q_min(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1


@dataclass
class QuantizerState:
    """Per-site quantizer parameters plus static config."""

    config: QuantConfig
    kind: str = "uniform"
    step: Parameter = field(default=None)   # type: ignore[assignment]
    clip: Parameter = field(default=None)   # type: ignore[assignment]
    offset: Parameter = field(default=None)  # type: ignore[assignment]
    name: str = "q"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.step is None:
            self.step = Parameter(f"{self.name}.step", np.array(1.0),
                                  project=lambda v: np.maximum(v, STEP_FLOOR))
        if self.clip is None:
            self.clip = Parameter(f"{self.name}.clip", np.array(1.0),
                                  project=lambda v: np.maximum(v, STEP_FLOOR))
        if self.offset is None:
            self.offset = Parameter(f"{self.name}.offset", np.array(0.0))

    # -- learnability per family ------------------------------------------
    @property
    def learns_step(self) -> bool:
        return self.kind in ("lsq", "lsq+")

    @property
    def learns_clip(self) -> bool:
        return self.kind == "pact" and self.config.target == "activations"

    @property
    def learns_offset(self) -> bool:
        return self.kind == "lsq+" and self.config.target == "activations"

    def learnable_parameters(self) -> list[Parameter]:
        out = []
        if self.learns_step:
            out.append(self.step)
        if self.learns_clip:
            out.append(self.clip)
        if self.learns_offset:
            out.append(self.offset)
        return out

    def effective_step(self) -> float:
        """PACT derives its step from the clip bound; others store it."""
        if self.kind == "pact" and self.config.target == "activations":
            s = float(self.clip.value) / self.config.q_max
            self.step.value = np.array(max(s, STEP_FLOOR))
        return float(self.step.value)

    def snapshot(self) -> dict:
        return {
            "kind": self.kind,
            "bits": self.config.bits,
            "signed": self.config.signed,
            "target": self.config.target,
            "step": float(self.step.value),
            "clip": float(self.clip.value),
            "offset": float(self.offset.value),
        }

    def frozen_copy(self) -> "QuantizerState":
        """Value snapshot so a backward pass sees forward-time parameters."""
        q = QuantizerState(config=self.config, kind=self.kind, name=self.name)
        q.step.value = self.step.value.copy()
        q.clip.value = self.clip.value.copy()
        q.offset.value = self.offset.value.copy()
        return q


# ---------------------------------------------------------------------------
# raw array rules


def quantize_array(x: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Quantize-dequantize a raw array (no tape, no gradients)."""
    s = q.effective_step()
    if s <= 0:
        raise ValueError("quantizer step must be positive")
    o = float(q.offset.value)
    v = (x - o) / s
    qv = np.clip(np.rint(v), q.config.q_min, q.config.q_max)
    return qv * s + o


def in_range_mask(x: np.ndarray, q: QuantizerState) -> np.ndarray:
    s = q.effective_step()
    v = (x - float(q.offset.value)) / s
    return (v >= q.config.q_min) & (v <= q.config.q_max)


def ste_backward(upstream: np.ndarray, x: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Pass-through gradient inside the representable range, zero outside."""
    if upstream.shape != x.shape:
        raise ValueError("upstream/x shape mismatch")
    return upstream * in_range_mask(x, q)


def pact_clip_gradient(upstream: np.ndarray, x: np.ndarray, q: QuantizerState) -> float:
    """d loss / d clip: upstream summed where the activation hit the bound.

    Unsigned convention: positions with x >= clip. Signed sites extend this
    symmetrically with a -1 contribution at x <= -clip.
    """
    if q.config.target != "activations":
        raise ValueError("pact clip gradient applies to activation quantizers")
    c = float(q.clip.value)
    g = float(upstream[x >= c].sum())
    if q.config.signed:
        g -= float(upstream[x <= -c].sum())
    return g


def lsq_gradient_scale(x: np.ndarray, q: QuantizerState) -> float:
    return 1.0 / np.sqrt(x.size * q.config.q_max)


def lsq_step_gradient(upstream: np.ndarray, x: np.ndarray, q: QuantizerState) -> float:
    """d loss / d step with the straight-through convention on round.

    In-range positions contribute round(v) - v, clipped ones q_min / q_max;
    the whole sum is multiplied by the gradient scale 1/sqrt(N * q_max).
    """
    s = q.effective_step()
    if s <= 0:
        raise ValueError("quantizer step must be positive")
    o = float(q.offset.value)
    v = (x - o) / s
    qmin, qmax = q.config.q_min, q.config.q_max
    # strict comparisons: a grid point exactly at the range edge counts as
    # in range (zero contribution), matching the STE mask convention
    local = np.where(v < qmin, float(qmin),
                     np.where(v > qmax, float(qmax), np.rint(v) - v))
    return float((upstream * local).sum()) * lsq_gradient_scale(x, q)


def lsq_offset_gradient(upstream: np.ndarray, x: np.ndarray, q: QuantizerState) -> float:
    """d loss / d offset: 1 per clipped position, 0 in range."""
    return float(upstream[~in_range_mask(x, q)].sum())


# ---------------------------------------------------------------------------
# tape op


def fake_quantize(x: Tensor, q: QuantizerState, train: bool = True) -> Tensor:
    """Quantize-dequantize with STE backward; learnable params join the tape."""
    s = q.effective_step()
    if s <= 0:
        raise ValueError("quantizer step must be positive")
    out = quantize_array(x.data, q)
    tape = x.tape
    xd = x.data
    xn = x.nid

    step_t = clip_t = offset_t = None
    if tape is not None and train:
        if q.learns_step:
            step_t = tape.bind(q.step)
        if q.learns_clip:
            clip_t = tape.bind(q.clip)
        if q.learns_offset:
            offset_t = tape.bind(q.offset)
    sn = step_t.nid if step_t is not None else -1
    cn = clip_t.nid if clip_t is not None else -1
    on = offset_t.nid if offset_t is not None else -1
    qf = q.frozen_copy()

    def mk():
        def bwd(g, accum):
            accum(xn, ste_backward(g, xd, qf))
            if sn >= 0:
                accum(sn, np.array(lsq_step_gradient(g, xd, qf)))
            if cn >= 0:
                accum(cn, np.array(pact_clip_gradient(g, xd, qf)))
            if on >= 0:
                accum(on, np.array(lsq_offset_gradient(g, xd, qf)))
        return bwd

    inputs = [t for t in (x, step_t, clip_t, offset_t) if t is not None]
    return _result(tape, "fake_quantize", inputs, out, mk)


# ---------------------------------------------------------------------------
# calibration


def make_weight_quantizer(name: str, kind: str, bits: int, weight: np.ndarray) -> QuantizerState:
    cfg = QuantConfig(bits=bits, signed=True, target="weights")
    q = QuantizerState(config=cfg, kind=kind, name=name)
    q.step.value = np.array(max(float(np.abs(weight).max()) / cfg.q_max, STEP_FLOOR))
    return q


def make_activation_quantizer(name: str, kind: str, bits: int, sample: np.ndarray) -> QuantizerState:
    """Calibrate one activation site from a sample batch.

    Signedness follows the observed data: sites that never go negative get
    the unsigned grid. Step starts at max|x| / q_max, clip at the 99.9th
    percentile of |x|.
    """
    signed = bool((sample < 0).any())
    cfg = QuantConfig(bits=bits, signed=signed, target="activations")
    q = QuantizerState(config=cfg, kind=kind, name=name)
    amax = float(np.abs(sample).max())
    q.step.value = np.array(max(amax / cfg.q_max, STEP_FLOOR))
    q.clip.value = np.array(max(float(np.quantile(np.abs(sample), 0.999)), STEP_FLOOR))
    if q.kind == "pact":
        q.effective_step()  # sync step to the freshly calibrated clip
    return q
