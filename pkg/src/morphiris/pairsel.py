"""Dataset manifests and morph pair selection (random / radius similarity)."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

MANIFEST_FIELDS = ("subject_id", "eye_side", "image_path", "pupil_radius", "iris_radius")
PAIR_FIELDS = ("pathA", "pathB", "strategy")
STRATEGIES = ("random", "radius")


class CapacityError(ValueError):
    """Fewer valid pairs than requested."""


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    eye_side: str
    image_path: str
    pupil_radius: float
    iris_radius: float

    def __post_init__(self):
        if self.eye_side not in ("L", "R"):
            raise ValueError(f"eye_side must be L or R, got {self.eye_side!r}")
        if not 0 < self.pupil_radius < self.iris_radius:
            raise ValueError(f"need 0 < pupil_radius < iris_radius for {self.image_path}")

    @property
    def identity(self) -> str:
        """Left and right eyes are separate identities."""
        return f"{self.subject_id}{self.eye_side}"

    @property
    def stem(self) -> str:
        return os.path.splitext(os.path.basename(self.image_path))[0]


class DatasetManifest:
    def __init__(self, entries: Iterable[ManifestEntry]):
        self.entries: tuple[ManifestEntry, ...] = tuple(entries)
        keys = [(e.subject_id, e.eye_side, e.image_path) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (subject_id, eye_side, image_path) in manifest")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.entries == other.entries

    def side(self, eye_side: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.eye_side == eye_side]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for e in self.entries:
                w.writerow([e.subject_id, e.eye_side, e.image_path, repr(float(e.pupil_radius)),
                            repr(float(e.iris_radius))])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and tuple(rows[0].keys()) != MANIFEST_FIELDS:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        return cls(ManifestEntry(r["subject_id"], r["eye_side"], r["image_path"],
                                 float(r["pupil_radius"]), float(r["iris_radius"])) for r in rows)


@dataclass(frozen=True)
class MorphPair:
    entry_a: ManifestEntry
    entry_b: ManifestEntry
    strategy: str

    def __post_init__(self):
        if self.entry_a.subject_id == self.entry_b.subject_id:
            raise ValueError("a morph pair needs two different subjects")
        if self.entry_a.eye_side != self.entry_b.eye_side:
            raise ValueError("a morph pair needs the same eye side")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def pupil_delta(self) -> float:
        return abs(self.entry_a.pupil_radius - self.entry_b.pupil_radius)


def _valid_pairs(manifest: DatasetManifest) -> list[tuple[ManifestEntry, ManifestEntry]]:
    out = []
    for side in ("L", "R"):
        entries = sorted(manifest.side(side), key=lambda e: (e.subject_id, e.image_path))
        for a, b in combinations(entries, 2):
            if a.subject_id != b.subject_id:
                out.append((a, b))
    return out


def select_random(manifest: DatasetManifest, n_pairs: int, seed: int) -> list[MorphPair]:
    """Uniform sample without replacement from all same-side, cross-subject pairs."""
    pool = _valid_pairs(manifest)
    if n_pairs > len(pool):
        raise CapacityError(f"requested {n_pairs} pairs but only {len(pool)} valid pairs exist")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n_pairs, replace=False)
    return [MorphPair(*pool[i], "random") for i in picks]


def _radius_greedy(entries: Sequence[ManifestEntry]) -> list[tuple[tuple, MorphPair]]:
    """Greedy adjacent matching on pupil radius within one eye side."""
    live = sorted(entries, key=lambda e: (e.pupil_radius, e.iris_radius, e.subject_id, e.image_path))
    chosen = []
    while True:
        best = None
        for k in range(len(live) - 1):
            a, b = live[k], live[k + 1]
            if a.subject_id == b.subject_id:
                continue
            key = (abs(a.pupil_radius - b.pupil_radius), abs(a.iris_radius - b.iris_radius),
                   tuple(sorted((a.subject_id, b.subject_id))), a.image_path, b.image_path)
            if best is None or key < best[0]:
                best = (key, k)
        if best is None:
            return chosen
        key, k = best
        a, b = live[k], live[k + 1]
        if b.subject_id < a.subject_id:
            a, b = b, a
        chosen.append((key, MorphPair(a, b, "radius")))
        del live[k:k + 2]


def select_by_radius(manifest: DatasetManifest, n_pairs: int) -> list[MorphPair]:
    """Most similar pupil radii first; each image is used at most once."""
    found = _radius_greedy(manifest.side("L")) + _radius_greedy(manifest.side("R"))
    if n_pairs > len(found):
        raise CapacityError(f"requested {n_pairs} pairs but radius matching yields at most {len(found)}")
    found.sort(key=lambda kp: kp[0] + (kp[1].entry_a.eye_side,))
    return [p for _, p in found[:n_pairs]]


def max_radius_pairs(manifest: DatasetManifest) -> int:
    return len(_radius_greedy(manifest.side("L"))) + len(_radius_greedy(manifest.side("R")))


def max_random_pairs(manifest: DatasetManifest) -> int:
    return len(_valid_pairs(manifest))


# ----------------------------------------------------------------- pair files

def save_pairs(path, pairs: Sequence[MorphPair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_FIELDS)
        for p in pairs:
            w.writerow([p.entry_a.image_path, p.entry_b.image_path, p.strategy])


def load_pairs(path, manifest: DatasetManifest) -> list[MorphPair]:
    by_path = {e.image_path: e for e in manifest}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        try:
            out.append(MorphPair(by_path[r["pathA"]], by_path[r["pathB"]], r["strategy"]))
        except KeyError as exc:
            raise ValueError(f"pair references an image missing from the manifest: {exc}") from exc
    return out


def mean_pupil_delta(pairs: Sequence[MorphPair]) -> float:
    return math.fsum(p.pupil_delta for p in pairs) / len(pairs) if pairs else float("nan")
