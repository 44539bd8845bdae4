"""Downstream evaluation: frozen features, linear probe, few-shot episodes,
masking-strategy baselines, and mask export."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, dataio, geometry
from .model import ParamStore, aggregate_features, embed_patches, encode, \
    generate_masks, prepend_cls
from .trainer import TrainConfig, stream


@dataclass
class ProbeResult:
    accuracy_mean: float
    accuracy_std: float
    confusion: np.ndarray
    n_train: int
    n_test: int
    per_seed: list = field(default_factory=list)


@dataclass
class Episode:
    way: int
    shot: int
    support: np.ndarray  # indices into the feature matrix
    query: np.ndarray
    classes: np.ndarray


# ---------------------------------------------------------------------------
# feature extraction


def eval_subsample(cloud, m):
    """Deterministic eval-time downsampling: straight FPS from a content-based
    start (farthest point from the centroid), so the result depends only on
    the point set, never on input order or RNG state."""
    if cloud.n <= m:
        return cloud
    idx = geometry.fps(cloud, m, start="far")
    return geometry.PointCloud(cloud.points[idx], label=cloud.label)


def extract_features(clouds, params: ParamStore, cfg: TrainConfig, seed=0):
    """Frozen-encoder features: subsample, patchify with the global patch
    config, encode in eval mode, aggregate. Returns (n, 2*embed_dim)."""
    model_cfg = cfg.model_config()
    feats = []
    for cloud in clouds:
        sub = eval_subsample(cloud, cfg.points)
        ps = geometry.patchify(sub, min(cfg.patches_global, sub.n),
                               min(cfg.group_size_global, sub.n), start="far")
        with ad.no_grad():
            tokens = embed_patches(params, ps.groups[None], ps.centers[None])
            enc = encode(params, prepend_cls(params, tokens), model_cfg.encoder,
                         train_mode=False)
            feats.append(aggregate_features(enc).data[0])
    return np.stack(feats)


def standardize(train_feats, feats):
    """Standardize with statistics from the train split only."""
    mu = train_feats.mean(axis=0)
    sd = train_feats.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    return (feats - mu) / sd


# ---------------------------------------------------------------------------
# linear probe (multinomial logistic regression, full-batch GD)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logreg(X, y, n_classes, l2=1e-2, max_iter=5000, tol=1e-5, seed=0):
    """Full-batch gradient descent on L2-penalized multinomial logistic
    regression. Returns (W, b). The step size adapts by halving whenever the
    objective increases, which keeps the descent monotone and deterministic."""
    n, d = X.shape
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(d, n_classes))
    b = np.zeros(n_classes)
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0

    def objective(W, b):
        P = _softmax(X @ W + b)
        nll = -np.log(np.maximum(P[np.arange(n), y], 1e-12)).mean()
        return nll + 0.5 * l2 * (W * W).sum()

    lr = 1.0
    prev = objective(W, b)
    for _ in range(max_iter):
        P = _softmax(X @ W + b)
        gW = X.T @ (P - Y) / n + l2 * W
        gb = (P - Y).mean(axis=0)
        gnorm = math.sqrt((gW * gW).sum() + (gb * gb).sum())
        if gnorm < tol:
            break
        W2, b2 = W - lr * gW, b - lr * gb
        new = objective(W2, b2)
        while new > prev and lr > 1e-8:
            lr *= 0.5
            W2, b2 = W - lr * gW, b - lr * gb
            new = objective(W2, b2)
        W, b, prev = W2, b2, new
        lr *= 1.05  # gentle recovery after halvings
    return W, b


def linear_probe(train_feats, train_labels, test_feats, test_labels,
                 n_seeds=10, l2=1e-2) -> ProbeResult:
    """Probe frozen features with a from-scratch linear classifier, repeated
    over n_seeds initializations; features are standardized on the train
    split only."""
    classes = np.unique(train_labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in the train split")
    n_classes = int(train_labels.max()) + 1
    Xtr = standardize(train_feats, train_feats)
    Xte = standardize(train_feats, test_feats)
    accs = []
    confusion = None
    for s in range(n_seeds):
        W, b = fit_logreg(Xtr, train_labels, n_classes, l2=l2, seed=s)
        pred = (Xte @ W + b).argmax(axis=1)
        accs.append(float((pred == test_labels).mean()))
        if confusion is None:
            confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
            for t, p in zip(test_labels, pred):
                confusion[t, p] += 1
    return ProbeResult(accuracy_mean=float(np.mean(accs)),
                       accuracy_std=float(np.std(accs)),
                       confusion=confusion,
                       n_train=len(train_labels), n_test=len(test_labels),
                       per_seed=accs)


# ---------------------------------------------------------------------------
# few-shot episodes


def sample_episode(labels, way, shot, query_per_class, rng) -> Episode:
    classes = np.unique(labels)
    if way > classes.size:
        raise ValueError(f"way={way} exceeds {classes.size} available classes")
    chosen = rng.choice(classes, size=way, replace=False)
    support, query = [], []
    for c in chosen:
        pool = np.flatnonzero(labels == c)
        need = shot + query_per_class
        if pool.size < need:
            raise ValueError(
                f"class {c} has {pool.size} samples, episode needs {need}")
        picked = rng.choice(pool, size=need, replace=False)
        support.extend(picked[:shot])
        query.extend(picked[shot:])
    return Episode(way=way, shot=shot, support=np.asarray(support),
                   query=np.asarray(query), classes=chosen)


def fewshot_eval(features, labels, way, shot, n_folds=10, query_per_class=20,
                 seed=0):
    """n-way m-shot protocol: per fold, fit the linear probe on the support
    set and score the query set. Returns (mean, std, per-fold accuracies,
    episodes)."""
    labels = np.asarray(labels)
    accs, episodes = [], []
    for fold in range(n_folds):
        rng = stream(seed, "fewshot", fold)
        ep = sample_episode(labels, way, shot, query_per_class, rng)
        remap = {c: i for i, c in enumerate(ep.classes)}
        y_sup = np.asarray([remap[labels[i]] for i in ep.support])
        y_qry = np.asarray([remap[labels[i]] for i in ep.query])
        if way == 1:
            accs.append(1.0)
        else:
            res = linear_probe(features[ep.support], y_sup,
                               features[ep.query], y_qry, n_seeds=1)
            accs.append(res.accuracy_mean)
        episodes.append(ep)
    return float(np.mean(accs)), float(np.std(accs)), accs, episodes


# ---------------------------------------------------------------------------
# masking baselines (Table-6-style ablation interface)


def baseline_masks(kind, p, ratio_range, rng, centers=None):
    """Binary mask row over p patches.

    random: exactly ceil(r*p) uniformly chosen patches.
    block: the ceil(r*p) patches whose centers are nearest to a random anchor
    patch center (requires `centers`).
    """
    lo, hi = ratio_range
    if not (0 < lo <= hi < 1):
        raise ValueError(f"mask ratio range must lie in (0,1), got [{lo}, {hi}]")
    r = rng.uniform(lo, hi)
    count = int(np.ceil(r * p))
    mask = np.zeros(p, dtype=np.float32)
    if kind == "random":
        mask[rng.choice(p, size=count, replace=False)] = 1.0
    elif kind == "block":
        if centers is None:
            raise ValueError("block masking needs patch centers")
        anchor = int(rng.integers(p))
        d2 = ((centers - centers[anchor]) ** 2).sum(axis=1)
        mask[np.argsort(d2, kind="stable")[:count]] = 1.0
    else:
        raise ValueError(f"unknown baseline mask kind {kind!r}")
    return mask


# ---------------------------------------------------------------------------
# mask export (PCAM v2)


def export_masks(cloud, params: ParamStore, cfg: TrainConfig, out_prefix, seed=0):
    """Assign each patch to its argmax mask and write one PCAM file per mask
    plus a combined PCAM v2 file with a per-point mask id."""
    model_cfg = cfg.model_config()
    sub = eval_subsample(cloud, cfg.points)
    ps = geometry.patchify(sub, min(cfg.patches_global, sub.n),
                           min(cfg.group_size_global, sub.n), start="far")
    with ad.no_grad():
        tokens = embed_patches(params, ps.groups[None], ps.centers[None])
        m = generate_masks(params, tokens, model_cfg.maskgen,
                           cfg.n_masks, train_mode=False).data[0]  # (N, p)
    patch_assign = m.argmax(axis=0)                                # (p,)

    # per-point id via the nearest patch center
    d2 = ((sub.points[:, None, :] - ps.centers[None]) ** 2).sum(-1)
    point_assign = patch_assign[d2.argmin(axis=1)].astype(np.uint8)

    paths = []
    for i in range(cfg.n_masks):
        part = ps.absolute_groups()[patch_assign == i].reshape(-1, 3)
        path = f"{out_prefix}_mask{i}.pcam"
        dataio.write_cloud(path, geometry.PointCloud(part) if len(part)
                           else geometry.PointCloud(np.zeros((1, 3), np.float32)))
        paths.append(path)
    combined = f"{out_prefix}_combined.pcam"
    dataio.write_cloud(combined, sub, mask_ids=point_assign)
    paths.append(combined)
    return paths, patch_assign, point_assign


# ---------------------------------------------------------------------------
# report formatting


def format_probe_report(name, res: ProbeResult, class_names=None):
    lines = [f"[{name}]",
             f"accuracy = {res.accuracy_mean:.4f} +/- {res.accuracy_std:.4f} "
             f"({len(res.per_seed)} seeds)",
             f"n_train = {res.n_train}, n_test = {res.n_test}",
             "confusion (rows = true, cols = predicted):"]
    for i, row in enumerate(res.confusion):
        label = class_names[i] if class_names else str(i)
        lines.append(f"  {label:>10s}: " + " ".join(f"{v:4d}" for v in row))
    return "\n".join(lines)
