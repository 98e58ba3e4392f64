"""Gradient-times-input attribution for the fusion head.

``a_i = (d logit / d x_i) * x_i`` on the raw (unstandardized) inputs. For a
head without hidden layers the attributions plus the logit at x = 0 add up to
the logit exactly; with a hidden layer they are a first-order account and the
result says so.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .cardiac import CardiacFeatureVector
from .errors import ValidationError, VersionMismatchError
from .fusion import FusionInput, ModelParams, input_gradient, logits
from .reasoning import ReasoningTrace, default_knowledge_base
from .volume import CtVolume, IntensityState


@dataclass(frozen=True)
class Attribution:
    values: np.ndarray
    logit: float
    baseline_logit: float
    blocks: dict[str, tuple[int, int]]
    exact: bool

    def block(self, name: str) -> np.ndarray:
        lo, hi = self.blocks[name]
        return self.values[lo:hi]

    def block_sums(self) -> dict[str, float]:
        return {name: float(self.values[lo:hi].sum()) for name, (lo, hi) in self.blocks.items()}

    def to_json(self) -> dict:
        return {
            "logit": self.logit,
            "baseline_logit": self.baseline_logit,
            "block_sums": self.block_sums(),
            "first_order_only": not self.exact,
            "values": self.values.tolist(),
        }


def attribute_input(params: ModelParams, x) -> Attribution:
    vec = x.vector() if isinstance(x, FusionInput) else np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape != (params.d_in,):
        raise ValidationError(f"attribution input width {vec.shape} != model D_in {params.d_in}")
    grad = input_gradient(params, vec)[0]
    blocks = {name: (s.start, s.stop) for name, s in params.block_slices().items()}
    return Attribution(
        values=grad * vec,
        logit=float(logits(params, vec)[0]),
        baseline_logit=float(logits(params, np.zeros_like(vec))[0]),
        blocks=blocks,
        exact=len(params.weights) == 1,
    )


def project_cardiac_attribution(attr, features: CardiacFeatureVector, roi: CtVolume) -> CtVolume:
    """Spread each cardiac channel's attribution evenly over its voxel support.

    ``attr`` is an :class:`Attribution` (its cardiac block is used) or a
    per-channel vector. Channels with empty support project nothing.
    """
    if features.voxel_support is None:
        raise ValidationError("cardiac features carry no voxel support; re-extract with support")
    channel_attr = attr.block("cardiac") if isinstance(attr, Attribution) else np.asarray(attr, dtype=np.float64)
    if channel_attr.shape != (len(features.channel_names),):
        raise ValidationError(f"need {len(features.channel_names)} channel attributions, got {channel_attr.shape}")
    if features.roi_dims is not None and tuple(features.roi_dims) != roi.dims:
        raise ValidationError(f"features were computed on an ROI of {features.roi_dims}, got {roi.dims}")
    heat = np.zeros(int(np.prod(roi.dims)), dtype=np.float64)
    for a, support in zip(channel_attr, features.voxel_support):
        if a != 0.0 and support.size:
            heat[support] += a / support.size
    return CtVolume(heat.reshape(roi.dims), roi.spacing, IntensityState.RAW_HU, roi.subject_id, roi.scan_id)


def attribute_indicators(attr: Attribution, trace: ReasoningTrace, params: ModelParams | None = None,
                         top_k: int = 3, block: str = "reasoning") -> dict:
    """Rationale annotated with each mechanism's signed attribution."""
    if params is not None and params.kb_version and params.kb_version != trace.kb_version:
        raise VersionMismatchError(f"model uses KB {params.kb_version}, trace was built with {trace.kb_version}")
    if block not in attr.blocks:
        raise ValidationError(f"model has no {block!r} input block")
    values = attr.block(block)
    if values.size != len(trace.indicator_names):
        raise VersionMismatchError(f"{values.size} reasoning attributions vs {len(trace.indicator_names)} indicators")
    kb = default_knowledge_base()
    label = kb.label if kb.version == trace.kb_version else (lambda n: n.replace("_", " "))
    mechanisms = [
        {"name": n, "label": label(n), "activation": act, "attribution": float(a)}
        for n, act, a in zip(trace.indicator_names, trace.indicator_vector, values)
    ]
    ranked = sorted((m for m in mechanisms if m["attribution"] != 0.0),
                    key=lambda m: (-abs(m["attribution"]), m["name"]))
    text = trace.rationale
    for m in mechanisms:
        if m["activation"] > 0.0:
            text = re.sub(re.escape(m["label"]), lambda hit, m=m: f"{hit.group(0)} [{m['attribution']:+.3f}]",
                          text, count=1, flags=re.IGNORECASE)
    return {
        "rationale": trace.rationale,
        "annotated_rationale": text,
        "mechanisms": mechanisms,
        "top": ranked[:top_k],
        "first_order_only": not attr.exact,
    }
