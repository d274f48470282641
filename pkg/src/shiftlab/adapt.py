"""Trainers: supervised source training, UDA, SFDA, and weighted MSFDA.

Source-freedom is enforced by signature: the SFDA/MSFDA trainers take no
source dataset argument at all. Evaluation labels are supplied by the
harness through `eval_set` and are used only for accuracy logging, never
for gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .errors import ParameterError
from .nn import (
    SourceModel,
    backward,
    forward,
    init_model,
    init_optimizer,
    sgd_step,
)
from .objectives import (
    cross_entropy,
    cross_entropy_probs_grad,
    im_loss,
    im_probs_grad,
    mmd_rbf,
    mmd_rbf_grad,
    softmax_probs_to_logits_grad,
)
from .records import ExperimentRecord, TrajectoryRow

EVAL_INTERVAL = 10

EXPANDED_MODES = ("ce-only", "ce+mmd")


@dataclass
class AdaptationConfig:
    iterations: int = 300
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lambda_uda: float = 1.0
    lambda_mea: float = 1.0
    beta_pseudo: float = 0.3
    pseudo_refresh: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.pseudo_refresh < 1:
            raise ParameterError("iterations, batch_size and pseudo_refresh must be positive")
        for name in ("learning_rate", "momentum", "lambda_uda", "lambda_mea", "beta_pseudo"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class TrainerOutput:
    models: list
    weights: np.ndarray
    record: ExperimentRecord

    @property
    def model(self) -> SourceModel:
        return self.models[0]


class _BatchStream:
    """Seeded epoch-wise shuffled mini-batch index stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _stream(n: int, cfg: AdaptationConfig, stream_id: int) -> _BatchStream:
    return _BatchStream(n, cfg.batch_size, np.random.default_rng([cfg.seed, stream_id]))


def _ensemble_probs(models, weights, X) -> np.ndarray:
    out = None
    for w, model in zip(weights, models):
        if w == 0.0:
            continue
        p = w * forward(model, X)[2]
        out = p if out is None else out + p
    return out


def _ensemble_accuracy(models, weights, eval_set: Dataset) -> float:
    probs = _ensemble_probs(models, weights, eval_set.features)
    return float(np.mean(probs.argmax(axis=1) == eval_set.labels))


def _should_eval(step: int, iterations: int) -> bool:
    return step % EVAL_INTERVAL == 0 or step == iterations - 1


def train_source(ds: Dataset, cfg: AdaptationConfig, eval_set: Dataset | None = None) -> TrainerOutput:
    """Supervised cross-entropy training from a fresh seeded model."""
    if ds.labels is None:
        raise ParameterError("train_source requires a labeled dataset")
    model = init_model(ds.d, num_classes=ds.num_classes, seed=cfg.seed, domain_id=ds.domain_id)
    opt = init_optimizer(model, cfg.learning_rate, cfg.momentum)
    stream = _stream(ds.n, cfg, 17)
    record = ExperimentRecord(run_id=f"source-{ds.domain_id}-s{cfg.seed}", scenario="source")
    t0 = time.perf_counter()
    for step in range(cfg.iterations):
        idx = stream.next()
        xb, yb = ds.features[idx], ds.labels[idx]
        _, _, probs = forward(model, xb)
        ce = cross_entropy(probs, yb)
        dlogits = softmax_probs_to_logits_grad(probs, cross_entropy_probs_grad(probs, yb))
        sgd_step(model, backward(model, xb, dlogits), opt)
        acc = None
        if eval_set is not None and _should_eval(step, cfg.iterations):
            acc = _ensemble_accuracy([model], [1.0], eval_set)
        record.rows.append(
            TrajectoryRow(
                iteration=step,
                loss_total=ce.value,
                loss_ce=ce.value,
                acc_target=acc,
                ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    model.meta["epochs"] = str(cfg.iterations)
    record.summary = {"final_accuracy": record.final_accuracy(), "iterations": cfg.iterations}
    return TrainerOutput([model], np.array([1.0]), record)


def train_uda(
    source: Dataset,
    target: Dataset,
    cfg: AdaptationConfig,
    eval_set: Dataset | None = None,
) -> TrainerOutput:
    """Joint source cross-entropy plus MMD feature alignment to the target."""
    if source.labels is None:
        raise ParameterError("train_uda requires a labeled source dataset")
    if source.d != target.d:
        raise ParameterError("source and target dimensions differ")
    model = init_model(source.d, num_classes=source.num_classes, seed=cfg.seed, domain_id=source.domain_id)
    opt = init_optimizer(model, cfg.learning_rate, cfg.momentum)
    src_stream = _stream(source.n, cfg, 17)
    tgt_stream = _stream(target.n, cfg, 29)
    lam = cfg.lambda_uda
    record = ExperimentRecord(run_id=f"uda-{source.domain_id}->{target.domain_id}-s{cfg.seed}", scenario="uda")
    t0 = time.perf_counter()
    for step in range(cfg.iterations):
        idx = src_stream.next()
        xb, yb = source.features[idx], source.labels[idx]
        feat_s, _, probs = forward(model, xb)
        ce = cross_entropy(probs, yb)
        dlogits = softmax_probs_to_logits_grad(probs, cross_entropy_probs_grad(probs, yb))
        mmd_value = 0.0
        if lam > 0:
            tb = target.features[tgt_stream.next()]
            feat_t = forward(model, tb)[0]
            mmd_value, gx, gy = mmd_rbf_grad(feat_s, feat_t)
            grad = backward(model, xb, dlogits, lam * gx)
            grad.add_(backward(model, tb, loss_grad_on_features=lam * gy))
        else:
            grad = backward(model, xb, dlogits)
        sgd_step(model, grad, opt)
        acc = None
        if _should_eval(step, cfg.iterations):
            if eval_set is not None:
                acc = _ensemble_accuracy([model], [1.0], eval_set)
            if lam > 0:
                # diagnostic: full-dataset alignment, not the per-batch estimate
                fs = forward(model, source.features)[0]
                ft = forward(model, target.features)[0]
                mmd_value = mmd_rbf(fs, ft)
        record.rows.append(
            TrajectoryRow(
                iteration=step,
                loss_total=ce.value + lam * mmd_value,
                loss_ce=ce.value,
                loss_mmd=mmd_value,
                acc_target=acc,
                ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    model.meta["epochs"] = str(cfg.iterations)
    record.summary = {"final_accuracy": record.final_accuracy(), "iterations": cfg.iterations}
    return TrainerOutput([model], np.array([1.0]), record)


def _cosine_distances(feats: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    fn = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)
    cn = centroids / (np.linalg.norm(centroids, axis=1, keepdims=True) + 1e-12)
    return 1.0 - fn @ cn.T


def _ensemble_pseudo_labels(models, weights, X) -> tuple[np.ndarray, list]:
    """Two-round weighted nearest-centroid pseudo labels (SHOT style).

    Round 1 builds per-model class centroids as ensemble-probability-weighted
    feature means and assigns each sample to the class minimizing the
    weight-averaged cosine distance. Round 2 recomputes centroids from the
    hard assignments (empty classes keep their round-1 centroid) and
    reassigns.
    """
    active = [(i, w) for i, w in enumerate(weights) if w != 0.0]
    feats = {i: forward(models[i], X)[0] for i, _ in active}
    probs = _ensemble_probs(models, weights, X)
    k = probs.shape[1]

    centroids = {}
    for i, _ in active:
        col = probs.sum(axis=0)[:, None] + 1e-8
        centroids[i] = (probs.T @ feats[i]) / col

    def assign() -> np.ndarray:
        dist = np.zeros((X.shape[0], k))
        for i, w in active:
            dist += w * _cosine_distances(feats[i], centroids[i])
        return dist.argmin(axis=1)

    labels = assign()
    for i, _ in active:
        for c in range(k):
            mask = labels == c
            if mask.any():
                centroids[i][c] = feats[i][mask].mean(axis=0)
    labels = assign()
    return labels, [centroids[i] for i, _ in active]


def pseudo_labels(model: SourceModel, target: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Two-round centroid pseudo labels for a single model."""
    labels, cents = _ensemble_pseudo_labels([model], [1.0], target.features)
    return labels, cents[0]


def _adapt_loop(
    models,
    weights,
    target: Dataset,
    cfg: AdaptationConfig,
    eval_set: Dataset | None,
    visible_sources: list | None = None,
    mode: str | None = None,
    scenario: str = "sfda",
) -> TrainerOutput:
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(models):
        raise ParameterError("one weight per model required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
        raise ParameterError("weights must be a simplex vector")
    k = models[0].num_classes
    for m in models[1:]:
        if m.num_classes != k:
            raise ParameterError("all models must share num_classes")
    models = [m.clone() for m in models]
    opts = [init_optimizer(m, cfg.learning_rate, cfg.momentum) for m in models]
    stream = _stream(target.n, cfg, 17)
    vs_streams = (
        [_stream(vs.n, cfg, 41 + j) for j, vs in enumerate(visible_sources)]
        if visible_sources
        else []
    )
    lam = cfg.lambda_uda
    pl = None
    record = ExperimentRecord(run_id=f"{scenario}->{target.domain_id}-s{cfg.seed}", scenario=scenario)
    t0 = time.perf_counter()
    for step in range(cfg.iterations):
        if cfg.beta_pseudo > 0 and step % cfg.pseudo_refresh == 0:
            pl, _ = _ensemble_pseudo_labels(models, weights, target.features)
        idx = stream.next()
        xb = target.features[idx]

        per_model = {}  # i -> (probs_i on xb)
        ens = None
        for i, w in enumerate(weights):
            if w == 0.0:
                continue
            per_model[i] = forward(models[i], xb)[2]
            contrib = w * per_model[i]
            ens = contrib if ens is None else ens + contrib

        im = im_loss(ens)
        dprobs = im_probs_grad(ens)
        ce_value = 0.0
        if cfg.beta_pseudo > 0:
            ce = cross_entropy(ens, pl[idx])
            ce_value = ce.value
            dprobs = dprobs + cfg.beta_pseudo * cross_entropy_probs_grad(ens, pl[idx])

        grads = {
            i: backward(models[i], xb, softmax_probs_to_logits_grad(per_model[i], w * dprobs))
            for i, w in enumerate(weights)
            if w != 0.0
        }

        vis_ce_value = 0.0
        mmd_value = 0.0
        if visible_sources:
            scale = 1.0 / len(visible_sources)
            for vs, vstream in zip(visible_sources, vs_streams):
                vidx = vstream.next()
                xs, ys = vs.features[vidx], vs.labels[vidx]
                per_model_s = {i: forward(models[i], xs)[2] for i in grads}
                ens_s = sum(weights[i] * per_model_s[i] for i in grads)
                vce = cross_entropy(ens_s, ys)
                vis_ce_value += scale * vce.value
                dprobs_s = scale * cross_entropy_probs_grad(ens_s, ys)
                for i in grads:
                    dlog = softmax_probs_to_logits_grad(per_model_s[i], weights[i] * dprobs_s)
                    if mode == "ce+mmd" and lam > 0:
                        fs = forward(models[i], xs)[0]
                        ft = forward(models[i], xb)[0]
                        mv, gs, gt = mmd_rbf_grad(fs, ft)
                        mmd_value += scale * weights[i] * mv
                        grads[i].add_(backward(models[i], xs, dlog, lam * scale * weights[i] * gs))
                        grads[i].add_(
                            backward(models[i], xb, loss_grad_on_features=lam * scale * weights[i] * gt)
                        )
                    else:
                        grads[i].add_(backward(models[i], xs, dlog))

        for i, g in grads.items():
            g.zero_classifier_()  # classifier stays the source hypothesis
            sgd_step(models[i], g, opts[i])

        acc = None
        if eval_set is not None and _should_eval(step, cfg.iterations):
            acc = _ensemble_accuracy(models, weights, eval_set)
        record.rows.append(
            TrajectoryRow(
                iteration=step,
                loss_total=im.value + cfg.beta_pseudo * ce_value + vis_ce_value + lam * mmd_value,
                loss_ce=ce_value + vis_ce_value,
                loss_mmd=mmd_value,
                loss_im=im.value,
                acc_target=acc,
                ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    record.summary = {"final_accuracy": record.final_accuracy(), "iterations": cfg.iterations}
    return TrainerOutput(models, weights, record)


def train_sfda(
    source_model: SourceModel,
    target: Dataset,
    cfg: AdaptationConfig,
    eval_set: Dataset | None = None,
) -> TrainerOutput:
    """Single-source source-free adaptation: IM loss plus pseudo-label CE.

    Starts from the source model; the classifier is frozen and only the
    extractor adapts. No source data is reachable from this signature.
    """
    if source_model.input_dim != target.d:
        raise ParameterError("model input dim does not match target dimension")
    return _adapt_loop([source_model], [1.0], target, cfg, eval_set, scenario="sfda")


def train_msfda(
    models: list,
    weights,
    target: Dataset,
    cfg: AdaptationConfig,
    eval_set: Dataset | None = None,
) -> TrainerOutput:
    """Weighted multi-source-free adaptation with fixed ensemble weights."""
    if not models:
        raise ParameterError("need at least one source model")
    return _adapt_loop(models, weights, target, cfg, eval_set, scenario="msfda")


def train_expanded_base(
    models: list,
    weights,
    target: Dataset,
    visible_sources: list,
    mode: str,
    cfg: AdaptationConfig,
    eval_set: Dataset | None = None,
) -> TrainerOutput:
    """MSFDA plus cross-entropy on visible source data (optionally plus MMD)."""
    if not visible_sources:
        raise ParameterError("expanded base requires at least one visible source")
    if mode not in EXPANDED_MODES:
        raise ParameterError(f"mode must be one of {EXPANDED_MODES}, got {mode!r}")
    for vs in visible_sources:
        if vs.labels is None:
            raise ParameterError(f"visible source {vs.domain_id!r} must be labeled")
        if vs.d != target.d:
            raise ParameterError("visible source and target dimensions differ")
    return _adapt_loop(
        models, weights, target, cfg, eval_set, visible_sources, mode, scenario="expanded"
    )
