"""Proxy-based source-model weight estimation.

Three steps: proxy-accuracy weights from visible source domains (excluding
each model's own training data), target-confidence weights from average
max-softmax scores, and their lambda-combination normalized back onto the
simplex. With fewer than two usable proxies per model the estimate falls
back to confidence weights alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .errors import ExclusionError, ParameterError
from .nn import SourceModel, forward

DATA_VISIBLE = "data-visible"
MODEL_ONLY = "model-only"

PROVENANCE_MAGIC = "#shiftlab-provenance v1"
WEIGHTS_MAGIC = "#shiftlab-weights v1"


@dataclass
class VisibilitySpec:
    """Per-domain sharing mode: raw labeled data or trained model only."""

    modes: dict  # domain_id -> DATA_VISIBLE | MODEL_ONLY

    def __post_init__(self) -> None:
        if not self.modes:
            raise ParameterError("visibility spec needs at least one domain")
        for domain, mode in self.modes.items():
            if mode not in (DATA_VISIBLE, MODEL_ONLY):
                raise ParameterError(f"domain {domain!r}: unknown visibility {mode!r}")

    def visible_domains(self) -> list:
        return [d for d, m in self.modes.items() if m == DATA_VISIBLE]


@dataclass
class WeightEstimate:
    w_s: np.ndarray | None
    w_t: np.ndarray
    lam: float
    w_raw: np.ndarray
    w_final: np.ndarray
    fallback: bool = False

    def __post_init__(self) -> None:
        self.w_t = np.asarray(self.w_t, dtype=np.float64)
        self.w_raw = np.asarray(self.w_raw, dtype=np.float64)
        self.w_final = np.asarray(self.w_final, dtype=np.float64)
        if self.w_s is not None:
            self.w_s = np.asarray(self.w_s, dtype=np.float64)
            _check_simplex(self.w_s, "w_s")
        _check_simplex(self.w_t, "w_t")
        _check_simplex(self.w_final, "w_final")
        expected = 1.0 if self.fallback else 1.0 + self.lam
        if abs(self.w_raw.sum() - expected) > 1e-9:
            raise ParameterError(f"w_raw must sum to {expected}, got {self.w_raw.sum()}")
        if int(np.argmax(self.w_final)) != int(np.argmax(self.w_raw)):
            raise ParameterError("normalization must preserve the argmax of w_raw")


def _check_simplex(v: np.ndarray, name: str) -> None:
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise ParameterError(f"{name} must be non-negative and sum to 1, got {v}")


def _domain_accuracy(model: SourceModel, ds: Dataset) -> float:
    probs = forward(model, ds.features)[2]
    return float(np.mean(probs.argmax(axis=1) == ds.labels))


def proxy_accuracy(
    model: SourceModel, proxies: list[Dataset], provenance: list | None = None
) -> float:
    """Macro-averaged accuracy of `model` over the proxy domains.

    The model's own training domain must not appear among the proxies.
    """
    if not proxies:
        raise ParameterError("proxy list is empty")
    own = model.meta.get("domain_id", "")
    accs = []
    for ds in proxies:
        if ds.labels is None:
            raise ParameterError(f"proxy domain {ds.domain_id!r} is unlabeled")
        if own and ds.domain_id == own:
            raise ExclusionError(
                f"model trained on {own!r} cannot be scored on its own training domain"
            )
        acc = _domain_accuracy(model, ds)
        accs.append(acc)
        if provenance is not None:
            provenance.append(
                {"kind": "proxy", "model": own, "proxy": ds.domain_id, "accuracy": acc}
            )
    return float(np.mean(accs))


def proxy_weights(
    models: list[SourceModel],
    visibility: VisibilitySpec,
    datasets: dict,
    provenance: list | None = None,
) -> np.ndarray | None:
    """Eq.-style proxy-accuracy weights, or None when any model lacks proxies.

    `datasets` maps each data-visible domain_id to its labeled Dataset.
    """
    visible = visibility.visible_domains()
    for domain in visible:
        if domain not in datasets:
            raise ParameterError(f"data-visible domain {domain!r} has no dataset")
    per_model_proxies = []
    for model in models:
        own = model.meta.get("domain_id", "")
        proxies = [datasets[d] for d in visible if d != own]
        if not proxies:
            return None  # single-source fallback
        per_model_proxies.append(proxies)
    acc = np.array(
        [proxy_accuracy(m, p, provenance) for m, p in zip(models, per_model_proxies)]
    )
    total = acc.sum()
    if total <= 0:
        return np.full(len(models), 1.0 / len(models))
    return acc / total


def confidence_weights(
    models: list[SourceModel], target: Dataset, provenance: list | None = None
) -> np.ndarray:
    """Average max-softmax confidence per model on the target, normalized."""
    if target.n < 1:
        raise ParameterError("target dataset is empty")
    conf = []
    for model in models:
        probs = forward(model, target.features)[2]
        c = float(probs.max(axis=1).mean())
        conf.append(c)
        if provenance is not None:
            provenance.append(
                {"kind": "confidence", "model": model.meta.get("domain_id", ""), "confidence": c}
            )
    conf = np.asarray(conf)
    return conf / conf.sum()


def combine_weights(w_t, w_s, lam: float) -> WeightEstimate:
    """w_raw = w_t + lam * w_s, renormalized by (1 + lam) onto the simplex."""
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    w_t = np.asarray(w_t, dtype=np.float64)
    if w_s is None:
        return WeightEstimate(None, w_t, lam, w_t.copy(), w_t.copy(), fallback=True)
    w_s = np.asarray(w_s, dtype=np.float64)
    if w_s.shape != w_t.shape:
        raise ParameterError("w_s and w_t must have the same length")
    w_raw = w_t + lam * w_s
    return WeightEstimate(w_s, w_t, lam, w_raw, w_raw / (1.0 + lam))


def estimate(
    models: list[SourceModel],
    visibility: VisibilitySpec,
    datasets: dict,
    target: Dataset,
    lam: float = 1.0,
) -> tuple[WeightEstimate, list]:
    """Full three-step estimation; returns the estimate and its provenance log."""
    if not models:
        raise ParameterError("need at least one model")
    provenance: list = []
    w_s = proxy_weights(models, visibility, datasets, provenance) if len(models) > 1 else None
    w_t = confidence_weights(models, target, provenance)
    est = combine_weights(w_t, w_s, lam)
    return est, provenance


def _fmt_vec(v: np.ndarray | None) -> str:
    if v is None:
        return "absent"
    return " ".join(format(x, ".17g") for x in v)


def format_provenance(est: WeightEstimate, provenance: list, model_ids: list) -> str:
    """Render the provenance log in its documented text schema."""
    lines = [PROVENANCE_MAGIC]
    lines.append("models " + ",".join(model_ids))
    for rec in provenance:
        if rec["kind"] == "proxy":
            lines.append(
                f"proxy model={rec['model']} proxy={rec['proxy']} "
                f"accuracy={format(rec['accuracy'], '.17g')}"
            )
        else:
            lines.append(
                f"confidence model={rec['model']} "
                f"confidence={format(rec['confidence'], '.17g')}"
            )
    lines.append(f"lambda {format(est.lam, '.17g')}")
    lines.append(f"fallback {str(est.fallback).lower()}")
    lines.append("w_s " + _fmt_vec(est.w_s))
    lines.append("w_t " + _fmt_vec(est.w_t))
    lines.append("w_raw " + _fmt_vec(est.w_raw))
    lines.append("w_final " + _fmt_vec(est.w_final))
    return "\n".join(lines) + "\n"


def format_weights(est: WeightEstimate, model_ids: list) -> str:
    lines = [WEIGHTS_MAGIC]
    lines.append("models " + ",".join(model_ids))
    lines.append(f"lambda {format(est.lam, '.17g')}")
    lines.append(f"fallback {str(est.fallback).lower()}")
    lines.append("w_s " + _fmt_vec(est.w_s))
    lines.append("w_t " + _fmt_vec(est.w_t))
    lines.append("w_raw " + _fmt_vec(est.w_raw))
    lines.append("w_final " + _fmt_vec(est.w_final))
    return "\n".join(lines) + "\n"


def parse_weights(text: str) -> WeightEstimate:
    lines = text.splitlines()
    if not lines or lines[0] != WEIGHTS_MAGIC:
        raise ParameterError("not a shiftlab weights file")
    fields = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    def vec(key):
        raw = fields.get(key, "absent")
        if raw == "absent":
            return None
        return np.array([float(x) for x in raw.split()])
    return WeightEstimate(
        vec("w_s"),
        vec("w_t"),
        float(fields["lambda"]),
        vec("w_raw"),
        vec("w_final"),
        fallback=fields.get("fallback", "false") == "true",
    )
