"""Single-image morphing attack detection: image features and a random forest."""
from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import metrics
from .imgcore import GrayImage
from .parallel import ordered_map

FEATURE_SIDE = 64
EXTRACTORS = ("gray", "freq")
BONAFIDE, MORPH = 0, 1
TRAIN_FRACTION = 0.7

# power-spectrum values below this fraction of N * energy are rounding noise
_POWER_TOL = 4 * np.finfo(np.float64).eps


class MadError(ValueError):
    pass


# ----------------------------------------------------------------- features

@lru_cache(maxsize=32)
def _area_weights(n_in: int, n_out: int) -> tuple[np.ndarray, int]:
    """Integer overlap weights (n_out, n_in) of area resampling, divided by their gcd.

    Output cell i covers [i*n_in/n_out, (i+1)*n_in/n_out); overlaps are
    multiples of 1/n_out, so ``n_out * overlap`` is integral. Returns the
    reduced weights and the factor that turns them back into averages.
    """
    edges = np.arange(n_out + 1) * n_in  # in units of 1/n_out pixels
    lo = np.arange(n_in) * n_out
    start = np.maximum(edges[:-1, None], lo[None, :])
    stop = np.minimum(edges[1:, None], lo[None, :] + n_out)
    w = np.maximum(stop - start, 0).astype(np.int64)
    g = int(np.gcd.reduce(w[w > 0]))
    return w // g, g


def _area_sum(img: GrayImage) -> tuple[np.ndarray, float]:
    """Integer-valued weighted block sums and the scale mapping them into [0, 1]."""
    wr, gr = _area_weights(img.height, FEATURE_SIDE)
    wc, gc = _area_weights(img.width, FEATURE_SIDE)
    x = wr @ img.pixels.astype(np.int64) @ wc.T
    return x.astype(np.float64), gr * gc / (img.height * img.width * 255.0)


def feat_gray(img: GrayImage) -> np.ndarray:
    """64x64 area-averaged intensities in [0, 1], row-major."""
    x, scale = _area_sum(img)
    return (x * scale).reshape(-1)


def _power_spectrum(x: np.ndarray) -> np.ndarray:
    """|DFT(x)|^2 computed from the exact circular autocorrelation of integer data.

    The autocorrelation of a circularly shifted array is the same integer
    array, so everything derived from it is bit-identical under shifts.
    """
    energy = float((x * x).sum())
    if energy >= 2.0 ** 45:
        # rounding to integers would no longer be exact; plain transform instead
        return np.abs(np.fft.fft2(x)) ** 2
    auto = np.rint(np.fft.ifft2(np.abs(np.fft.fft2(x)) ** 2).real)
    power = np.fft.fft2(auto).real
    power[power < _POWER_TOL * x.size * energy] = 0.0
    return power


def feat_freq(img: GrayImage) -> np.ndarray:
    """log(1 + |DFT|) of the 64x64 [0, 1] image, DC moved to (32, 32), row-major.

    Invariant, bit for bit, to circular shifts of the resampled image (any
    shift of a 64x64 input, or whole-block shifts of a larger one).
    """
    x, scale = _area_sum(img)
    mag = np.sqrt(_power_spectrum(x)) * scale
    return np.log1p(np.fft.fftshift(mag)).reshape(-1)


def extract(img: GrayImage, extractor: str) -> np.ndarray:
    if extractor == "gray":
        return feat_gray(img)
    if extractor == "freq":
        return feat_freq(img)
    raise MadError(f"unknown extractor {extractor!r}; expected one of {EXTRACTORS}")


# ------------------------------------------------------------ random forest

@dataclass(frozen=True, eq=False)
class Tree:
    """Array tree; node k is a leaf when ``feature[k] < 0``. Go left when x <= threshold."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, morph probability at leaves

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            k = node[active]
            go_left = X[active, self.feature[k]] <= self.threshold[k]
            node[active] = np.where(go_left, self.left[k], self.right[k])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[Tree, ...]
    n_features: int
    seed: int

    def __post_init__(self):
        for t in self.trees:
            internal = t.feature >= 0
            if (t.feature[internal] >= self.n_features).any():
                raise MadError("tree references a feature beyond n_features")
            leaf = ~internal
            if ((t.value[leaf] < 0) | (t.value[leaf] > 1)).any():
                raise MadError("leaf probability outside [0, 1]")


def _best_split(Xn: np.ndarray, yn: np.ndarray, min_leaf: int):
    """Lowest weighted Gini split over the columns of ``Xn``; None when none is admissible."""
    n, m = Xn.shape
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ys = yn[order]
    pos_left = np.cumsum(ys, axis=0)[:-1].astype(np.float64)  # cut after row i
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    pos_right = ys.sum(axis=0)[None, :] - pos_left
    gini_l = 2 * pos_left * (n_left - pos_left) / n_left
    gini_r = 2 * pos_right * (n_right - pos_right) / n_right
    impurity = (gini_l + gini_r) / n  # weighted Gini of the two children
    ok = xs[1:] > xs[:-1]
    ok &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    impurity = np.where(ok, impurity, np.inf)
    # ties: earliest drawn feature, then the lowest cut
    flat = np.argmin(impurity.T.reshape(-1))
    col, row = divmod(int(flat), n - 1)
    thr = 0.5 * (xs[row, col] + xs[row + 1, col])
    if not thr < xs[row + 1, col]:  # midpoint collapsed onto the upper value
        thr = xs[row, col]
    return col, float(thr), float(impurity[row, col])


def _grow_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int, mtry: int,
               rng: np.random.Generator) -> Tree:
    n, d = X.shape
    boot = rng.integers(0, n, size=n)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(boot, 0, new_node(boot))]
    while stack:
        idx, depth, node = stack.pop()
        pos = int(y[idx].sum())
        if depth >= max_depth or pos == 0 or pos == len(idx) or len(idx) < 2 * min_leaf:
            continue
        feats = rng.choice(d, size=mtry, replace=False)
        found = _best_split(X[np.ix_(idx, feats)], y[idx], min_leaf)
        if found is None:
            continue
        col, thr, _ = found
        f = int(feats[col])
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((ri, depth + 1, right[node]))
        stack.append((li, depth + 1, left[node]))
    return Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32), np.array(right, dtype=np.int32), np.array(value, dtype=np.float64))


def _label_array(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if lab in ("morph", MORPH, True):
            out.append(MORPH)
        elif lab in ("bonafide", BONAFIDE, False):
            out.append(BONAFIDE)
        else:
            raise MadError(f"unknown label {lab!r}")
    return np.array(out, dtype=np.int64)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tree_index])


def rf_train(features, labels, n_trees: int = 100, max_depth: int = 12, min_leaf: int = 2,
             mtry: int | None = None, seed: int = 0, workers: int = 1) -> ForestModel:
    """Bootstrap-aggregated Gini trees. Tree t draws from its own stream seeded by (seed, t)."""
    X = np.asarray(features, dtype=np.float64)
    y = _label_array(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise MadError("features must be an (n, d) array matching labels")
    if not np.isfinite(X).all():
        raise MadError("features must be finite")
    counts = np.bincount(y, minlength=2)
    if counts.min() == 0:
        raise MadError("training set contains a single class")
    if counts.min() < 2:
        raise MadError("need at least 2 samples per class")
    d = X.shape[1]
    mtry = max(1, math.isqrt(d)) if mtry is None else int(mtry)
    if not 1 <= mtry <= d:
        raise MadError(f"mtry must lie in [1, {d}]")
    if n_trees < 1 or max_depth < 0 or min_leaf < 1:
        raise MadError("need n_trees >= 1, max_depth >= 0, min_leaf >= 1")
    trees = ordered_map(lambda t: _grow_tree(X, y, max_depth, min_leaf, mtry, _tree_rng(seed, t)),
                        range(n_trees), workers)
    return ForestModel(tuple(trees), d, int(seed))


def rf_predict_many(model: ForestModel, features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise MadError(f"feature length {X.shape[1]} does not match model ({model.n_features})")
    return np.mean([t.predict(X) for t in model.trees], axis=0)


def rf_predict(model: ForestModel, f) -> float:
    """Mean morph probability over the trees' leaves."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise MadError("rf_predict takes a single feature vector")
    return float(rf_predict_many(model, f[None, :])[0])


def rf_classify(model: ForestModel, f, threshold: float = 0.5) -> bool:
    return rf_predict(model, f) >= threshold


def oob_accuracy(model: ForestModel, features, labels) -> float:
    """Out-of-bag accuracy; replays each tree's bootstrap draw from its seed."""
    X = np.asarray(features, dtype=np.float64)
    y = _label_array(labels)
    n = len(X)
    total = np.zeros(n)
    votes = np.zeros(n)
    for t, tree in enumerate(model.trees):
        boot = _tree_rng(model.seed, t).integers(0, n, size=n)
        out = np.ones(n, dtype=bool)
        out[boot] = False
        total[out] += tree.predict(X[out])
        votes[out] += 1
    seen = votes > 0
    if not seen.any():
        raise MadError("no out-of-bag samples")
    pred = (total[seen] / votes[seen]) >= 0.5
    return float((pred == y[seen].astype(bool)).mean())


# ------------------------------------------------------------ serialisation

_RF_MAGIC = b"RFM1"


def model_to_bytes(model: ForestModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_RF_MAGIC)
    buf.write(struct.pack("<IIq", model.n_features, len(model.trees), model.seed))
    for t in model.trees:
        buf.write(struct.pack("<I", len(t.feature)))
        for arr, dt in ((t.feature, "<i4"), (t.threshold, "<f8"), (t.left, "<i4"), (t.right, "<i4"),
                        (t.value, "<f8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> ForestModel:
    if data[:4] != _RF_MAGIC:
        raise MadError("not an RFM1 model")
    n_features, n_trees, seed = struct.unpack_from("<IIq", data, 4)
    pos = 4 + struct.calcsize("<IIq")
    trees = []
    for _ in range(n_trees):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = []
        for dt, size in (("<i4", 4), ("<f8", 8), ("<i4", 4), ("<i4", 4), ("<f8", 8)):
            arrays.append(np.frombuffer(data, dtype=dt, count=n, offset=pos).copy())
            pos += n * size
        trees.append(Tree(*arrays))
    if pos != len(data):
        raise MadError(f"RFM1 has {len(data) - pos} trailing bytes")
    return ForestModel(tuple(trees), n_features, seed)


def save_model(path, model: ForestModel) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> ForestModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# --------------------------------------------------------------- experiment

def subject_split(groups: Sequence[str], seed: int, train_fraction: float = TRAIN_FRACTION):
    """Boolean train mask; every group lands wholly on one side."""
    uniq = sorted(set(groups))
    order = np.random.default_rng(seed).permutation(len(uniq))
    n_train = int(round(train_fraction * len(uniq)))
    train_groups = {uniq[i] for i in order[:n_train]}
    return np.array([g in train_groups for g in groups], dtype=bool)


def evaluate_scores(morph_scores, bonafide_scores) -> tuple[dict, list]:
    """Report dict and DET points for detector scores (higher = more morph-like)."""
    ss = metrics.detector_scoreset(morph_scores, bonafide_scores)
    eer, thr = metrics.eer(ss)
    dec = metrics.DecisionSet(tuple(s >= thr for s in morph_scores), tuple(s >= thr for s in bonafide_scores))
    report = {
        "macer": metrics.macer(dec),
        "bpcer": metrics.bpcer(dec),
        "eer": eer,
        "threshold": {"value": thr, "criterion": "eer"},
        "bpcer_at": {},
        "confusion": metrics.confusion(morph_scores, bonafide_scores, thr),
    }
    for target in (0.10, 0.01):
        try:
            bp, t = metrics.bpcer_at_macer(morph_scores, bonafide_scores, target)
        except metrics.MetricError:
            bp, t = None, None
        report["bpcer_at"][f"{target:.2f}"] = bp
        report["threshold"][f"macer<={target:.2f}"] = t
    return report, metrics.det_points(ss)


def smad_experiment(bonafide: Sequence[tuple[str, GrayImage]], morphs_train: Sequence[GrayImage],
                    morphs_test: Sequence[GrayImage], extractor: str = "freq", split_seed: int = 0,
                    out_dir: str | None = None, n_trees: int = 100, max_depth: int = 12, min_leaf: int = 2,
                    mtry: int | None = None, forest_seed: int | None = None, workers: int = 1) -> dict:
    """Cross-morph-type S-MAD protocol.

    ``bonafide`` pairs each image with its subject key; subjects are split
    70/30 into train and test. The forest learns bona fide-train against
    ``morphs_train`` and is scored on bona fide-test against ``morphs_test``.
    Writes ``report.json``, ``det.csv`` and ``model.rfm`` when ``out_dir`` is set.
    """
    if extractor not in EXTRACTORS:
        raise MadError(f"unknown extractor {extractor!r}")
    if not bonafide or not morphs_train or not morphs_test:
        raise MadError("bona fide and both morph sets must be non-empty")
    train_mask = subject_split([g for g, _ in bonafide], split_seed)
    if train_mask.all() or not train_mask.any():
        raise MadError("subject split left an empty partition")
    bf = np.stack([extract(img, extractor) for _, img in bonafide])
    mt = np.stack([extract(img, extractor) for img in morphs_train])
    ms = np.stack([extract(img, extractor) for img in morphs_test])
    X = np.concatenate([bf[train_mask], mt])
    y = np.concatenate([np.zeros(train_mask.sum(), dtype=int), np.ones(len(mt), dtype=int)])
    model = rf_train(X, y, n_trees, max_depth, min_leaf, mtry,
                     split_seed if forest_seed is None else forest_seed, workers)
    s_bf = rf_predict_many(model, bf[~train_mask]).tolist()
    s_m = rf_predict_many(model, ms).tolist()
    report, det = evaluate_scores(s_m, s_bf)
    report["counts"] = {"bonafide_train": int(train_mask.sum()), "bonafide_test": int((~train_mask).sum()),
                        "morph_train": len(mt), "morph_test": len(ms)}
    report["extractor"] = extractor
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report(os.path.join(out_dir, "report.json"), report)
        metrics.save_det_csv(os.path.join(out_dir, "det.csv"), det)
        save_model(os.path.join(out_dir, "model.rfm"), model)
    return report


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
