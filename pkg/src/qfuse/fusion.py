"""Gradient-balanced feature fusion.

A fusion node rescales the shallow branch by alpha = sigmoid(logit) and the
deep branch by 1 - alpha, concatenates along channels, and (in balanced mode)
applies an affine-free layer normalization across all channels at each
spatial position. The sigmoid parameterization keeps alpha in (0, 1) without
projection; init logit 0 means neutral 0.5 / 0.5 fusion.

``layernorm_backward_analytic`` implements the simplified gradient rule

    dL/dh_k = (1/sigma) * (g_k - mean_j g_j)

which drops the term that backpropagates through sigma. It exists to be
cross-checked against the autodiff backward of ``layernorm_positionwise``;
``layernorm_sigma_path_term`` quantifies the difference exactly.
"""

from __future__ import annotations

import numpy as np

from qfuse import autodiff as ad
from qfuse.autodiff import Parameter, Tensor, _result

LN_EPS = 1e-6


class FusionNode:
    """Learnable branch balance plus a normalization mode flag."""

    def __init__(self, channels_shallow: int, channels_deep: int,
                 normalize: bool = True, name: str = "fusion"):
        self.channels_shallow = int(channels_shallow)
        self.channels_deep = int(channels_deep)
        self.normalize = bool(normalize)
        self.alpha_logit = Parameter(f"{name}.alpha_logit", np.array(0.0))

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_logit.value)))

    def parameters(self) -> list[Parameter]:
        return [self.alpha_logit]


def _ln_stats(h: np.ndarray, eps: float):
    mu = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    sigma = np.sqrt(var + eps)
    return (h - mu) / sigma, sigma


def layernorm_positionwise(h: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize across channels at every (batch, i, j) position, no affine."""
    if h.data.ndim != 4:
        raise ValueError("layernorm_positionwise expects [B,C,H,W]")
    if h.shape[1] < 2:
        raise ValueError("need at least 2 channels to normalize across")
    xhat, sigma = _ln_stats(h.data, eps)
    hn = h.nid
    c = h.shape[1]

    def mk():
        def bwd(g, accum):
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            accum(hn, (g - gm - xhat * gx) / sigma)
        return bwd

    return _result(h.tape, "layernorm_positionwise", (h,), xhat, mk)


def layernorm_backward_analytic(upstream: np.ndarray, h: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Simplified LN input gradient: recenter the upstream, divide by sigma.

    Uses sigma = sqrt(var + eps) like the forward so the two backward routes
    are comparable on degenerate inputs.
    """
    if upstream.shape != h.shape:
        raise ValueError("upstream/h shape mismatch")
    _, sigma = _ln_stats(h, eps)
    return (upstream - upstream.mean(axis=1, keepdims=True)) / sigma


def layernorm_sigma_path_term(upstream: np.ndarray, h: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """The term the simplified rule omits: -xhat * mean(g * xhat) / sigma."""
    xhat, sigma = _ln_stats(h, eps)
    return -xhat * (upstream * xhat).mean(axis=1, keepdims=True) / sigma


def fuse(f_shallow: Tensor, f_deep: Tensor, node: FusionNode, balanced: bool = True) -> Tensor:
    """Concatenate two shape-aligned branches, optionally alpha-scaled + LN.

    With ``balanced`` False this is a plain channel concat (the unmodified
    fusion used by full-precision baselines).
    """
    if f_shallow.shape[2:] != f_deep.shape[2:] or f_shallow.shape[0] != f_deep.shape[0]:
        raise ValueError(f"spatial/batch mismatch: {f_shallow.shape} vs {f_deep.shape}")
    if not balanced:
        return ad.concat_channels(f_shallow, f_deep)
    tape = f_shallow.tape if f_shallow.tape is not None else f_deep.tape
    if tape is not None:
        logit = tape.bind(node.alpha_logit)
    else:
        logit = Tensor(node.alpha_logit.value)
    alpha = ad.sigmoid(logit)
    one_minus = ad.add_const(ad.scale(alpha, -1.0), 1.0)
    cat = ad.concat_channels(ad.mul(f_shallow, alpha), ad.mul(f_deep, one_minus))
    if node.normalize:
        return layernorm_positionwise(cat)
    return cat


def set_normalization(model, enabled: bool) -> None:
    """Flip the normalize flag on every fusion node of a model."""
    for node in model.fusion_nodes():
        node.normalize = bool(enabled)


def strip_normalization(model, eval_fn=None) -> dict:
    """Turn fusion LN off for inference and report the metric impact.

    ``eval_fn(model)`` should return a metrics dict; it is called once with
    normalization on and once with it off so the removability claim is
    measured rather than assumed. Models whose fusion runs in plain mode
    produce an empty report.
    """
    nodes = [n for n in model.fusion_nodes() if getattr(model, "balanced_fusion", True)]
    report: dict = {"nodes": len(nodes), "comparison": None}
    if not nodes:
        return report
    if eval_fn is not None:
        before = eval_fn(model)
        set_normalization(model, False)
        after = eval_fn(model)
        report["comparison"] = {"with_ln": before, "without_ln": after}
    else:
        set_normalization(model, False)
    return report
