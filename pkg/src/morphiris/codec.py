"""Iris codes: 1-D log-Gabor phase quantisation and shifted Hamming distance."""
from __future__ import annotations

import csv
import functools
import struct
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .normalization import RubberSheet

DEFAULT_WAVELENGTH = 24.0
DEFAULT_SIGMA_RATIO = 0.5
DEFAULT_ROWS_USED = 16
DEFAULT_EPS = 1e-3
DEFAULT_MAX_SHIFT = 8
DEFAULT_DELTA = 0.32
MAX_ROWS_PACKED = 32

SCORE_FIELDS = ("idA", "idB", "label", "score", "shift")
SCORE_LABELS = ("mated", "nonmated", "morphA", "morphB")


class EncodeError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IrisCode:
    """``bits[r, c]`` = (Re >= 0, Im >= 0); ``mask[r, c]`` marks usable samples."""

    bits: np.ndarray  # (rows, cols, 2) bool
    mask: np.ndarray  # (rows, cols) bool

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        mask = np.array(self.mask, dtype=bool)
        if bits.ndim != 3 or bits.shape[2] != 2 or bits.shape[:2] != mask.shape:
            raise ValueError(f"bits {bits.shape} and mask {mask.shape} disagree")
        if bits.shape[0] > MAX_ROWS_PACKED:
            raise ValueError(f"at most {MAX_ROWS_PACKED} code rows are supported")
        bits.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "mask", mask)

    @property
    def rows(self) -> int:
        return self.mask.shape[0]

    @property
    def cols(self) -> int:
        return self.mask.shape[1]

    @functools.cached_property
    def words(self) -> tuple[np.ndarray, np.ndarray]:
        """One uint64 per angular column: bit 2r is Re, 2r+1 is Im of row r."""
        weights = np.uint64(1) << np.arange(2 * self.rows, dtype=np.uint64)
        flat_bits = self.bits.transpose(1, 0, 2).reshape(self.cols, -1).astype(np.uint64)
        flat_mask = np.repeat(self.mask.T, 2, axis=1).astype(np.uint64)
        return (flat_bits * weights).sum(axis=1, dtype=np.uint64), (flat_mask * weights).sum(axis=1, dtype=np.uint64)

    def __eq__(self, other):
        if not isinstance(other, IrisCode):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and np.array_equal(self.mask, other.mask)

    __hash__ = None

    def rotated(self, k: int) -> "IrisCode":
        return IrisCode(np.roll(self.bits, k, axis=1), np.roll(self.mask, k, axis=1))


@dataclass(frozen=True)
class ComparisonScore:
    hd: float
    best_shift: int
    valid_bits: int


# ------------------------------------------------------------------- encode

def log_gabor(n: int, wavelength: float, sigma_ratio: float) -> np.ndarray:
    """One-sided 1-D log-Gabor transfer function over FFT bins; zero at DC and negative frequencies."""
    freqs = np.fft.fftfreq(n)
    h = np.zeros(n)
    pos = freqs > 0
    f0 = 1.0 / wavelength
    h[pos] = np.exp(-(np.log(freqs[pos] / f0) ** 2) / (2.0 * np.log(sigma_ratio) ** 2))
    return h


def code_rows(sheet_rows: int, rows_used: int) -> np.ndarray:
    """Centres of ``rows_used`` equal radial bands."""
    return np.floor((np.arange(rows_used) + 0.5) * sheet_rows / rows_used).astype(int)


def filter_responses(sheet: RubberSheet, wavelength: float = DEFAULT_WAVELENGTH,
                     sigma_ratio: float = DEFAULT_SIGMA_RATIO, rows_used: int = DEFAULT_ROWS_USED):
    """Complex log-Gabor responses, source validity and per-row RMS of the selected rows."""
    idx = code_rows(sheet.rows, rows_used)
    sig = sheet.intensity[idx].astype(np.float64)
    valid = sheet.valid[idx]
    filled = sig.copy()
    for r in range(len(idx)):
        if valid[r].any() and not valid[r].all():
            filled[r, ~valid[r]] = sig[r, valid[r]].mean()
    rms = np.sqrt((filled ** 2).mean(axis=1))
    resp = np.fft.ifft(np.fft.fft(filled, axis=1) * log_gabor(sheet.cols, wavelength, sigma_ratio), axis=1)
    return resp, valid, rms


def encode(sheet: RubberSheet, wavelength: float = DEFAULT_WAVELENGTH, sigma_ratio: float = DEFAULT_SIGMA_RATIO,
           rows_used: int = DEFAULT_ROWS_USED, eps: float = DEFAULT_EPS) -> IrisCode:
    if wavelength < 4:
        raise ValueError("wavelength must be at least 4 samples")
    if not 1 <= rows_used <= min(sheet.rows, MAX_ROWS_PACKED):
        raise ValueError(f"rows_used must lie in [1, {min(sheet.rows, MAX_ROWS_PACKED)}]")
    if not sheet.valid.any():
        raise EncodeError("rubber sheet has no valid samples")
    resp, valid, rms = filter_responses(sheet, wavelength, sigma_ratio, rows_used)
    bits = np.stack([resp.real >= 0, resp.imag >= 0], axis=-1)
    mask = valid & (np.abs(resp) > eps * rms[:, None])
    return IrisCode(bits, mask)


# ------------------------------------------------------------------ compare

def _shift_order(max_shift: int) -> list[int]:
    order = [0]
    for k in range(1, max_shift + 1):
        order += [k, -k]
    return order


def hamming_many(code: IrisCode, others: Sequence[IrisCode], max_shift: int = DEFAULT_MAX_SHIFT):
    """Shift-compensated HD of ``code`` against each of ``others``.

    ``others[i]`` is rolled by s columns for s in [-max_shift, max_shift];
    the minimum HD wins, ties going to the smaller |s| (then +s before -s).
    Returns (hd, best_shift, valid_bits) arrays; hd is NaN when no shift has
    any jointly valid bit.
    """
    if not others:
        return np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    for o in others:
        if o.mask.shape != code.mask.shape:
            raise ComparisonError(f"code dimensions differ: {code.mask.shape} vs {o.mask.shape}")
    a_bits, a_mask = code.words
    b_bits = np.stack([o.words[0] for o in others])
    b_mask = np.stack([o.words[1] for o in others])
    n = len(others)
    best_hd = np.full(n, np.inf)
    best_shift = np.zeros(n, dtype=int)
    best_valid = np.zeros(n, dtype=int)
    for s in _shift_order(max_shift):
        joint = a_mask & np.roll(b_mask, s, axis=1)
        diff = (a_bits ^ np.roll(b_bits, s, axis=1)) & joint
        valid = np.bitwise_count(joint).sum(axis=1, dtype=np.int64)
        num = np.bitwise_count(diff).sum(axis=1, dtype=np.int64)
        with np.errstate(invalid="ignore", divide="ignore"):
            hd = np.where(valid > 0, num / np.maximum(valid, 1), np.inf)
        better = hd < best_hd
        best_hd[better] = hd[better]
        best_shift[better] = s
        best_valid[better] = valid[better]
    best_hd[np.isinf(best_hd)] = np.nan
    return best_hd, best_shift, best_valid


def hamming(code_a: IrisCode, code_b: IrisCode, max_shift: int = DEFAULT_MAX_SHIFT) -> ComparisonScore:
    hd, shift, valid = hamming_many(code_a, [code_b], max_shift)
    if np.isnan(hd[0]):
        raise ComparisonError("no jointly valid bits at any shift")
    return ComparisonScore(float(hd[0]), int(shift[0]), int(valid[0]))


def attack_success(code_m: IrisCode, code_a: IrisCode, code_b: IrisCode, delta: float = DEFAULT_DELTA,
                   max_shift: int = DEFAULT_MAX_SHIFT) -> bool:
    """The morph fools the system when both contributors match: max(HD_A, HD_B) <= delta."""
    return attack_success_scores(hamming(code_m, code_a, max_shift).hd,
                                 hamming(code_m, code_b, max_shift).hd, delta)


def attack_success_scores(hd_a: float, hd_b: float, delta: float = DEFAULT_DELTA) -> bool:
    return max(hd_a, hd_b) <= delta


class Comparator(Protocol):
    """Anything producing a dissimilarity for two sample ids."""

    name: str

    def compare(self, id_a: str, id_b: str) -> float: ...


class HammingComparator:
    name = "hd"

    def __init__(self, codes: dict[str, IrisCode], max_shift: int = DEFAULT_MAX_SHIFT):
        self.codes = codes
        self.max_shift = max_shift

    def compare(self, id_a: str, id_b: str) -> float:
        return hamming(self.codes[id_a], self.codes[id_b], self.max_shift).hd


class ScoreFileComparator:
    """Replays dissimilarities computed elsewhere (e.g. by an embedding network)."""

    def __init__(self, rows: Iterable["ScoreRow"], name: str = "external"):
        self.name = name
        self.table = {}
        for r in rows:
            self.table[(r.id_a, r.id_b)] = r.score
            self.table.setdefault((r.id_b, r.id_a), r.score)

    def compare(self, id_a: str, id_b: str) -> float:
        try:
            return self.table[(id_a, id_b)]
        except KeyError:
            raise ComparisonError(f"no imported score for ({id_a}, {id_b})") from None


# ------------------------------------------------------------------ file I/O

_MAGIC = b"IRC1"


def code_to_bytes(code: IrisCode) -> bytes:
    bits = np.packbits(code.bits.reshape(-1), bitorder="little")
    mask = np.packbits(code.mask.reshape(-1), bitorder="little")
    return _MAGIC + struct.pack("<II", code.rows, code.cols) + bits.tobytes() + mask.tobytes()


def code_from_bytes(buf: bytes) -> IrisCode:
    if buf[:4] != _MAGIC:
        raise ValueError("not an IRC1 iris code")
    rows, cols = struct.unpack_from("<II", buf, 4)
    nb = (rows * cols * 2 + 7) // 8
    nm = (rows * cols + 7) // 8
    body = np.frombuffer(buf, dtype=np.uint8, offset=12)
    if body.size != nb + nm:
        raise ValueError(f"IRC1 payload has {body.size} bytes, expected {nb + nm}")
    bits = np.unpackbits(body[:nb], bitorder="little", count=rows * cols * 2).astype(bool)
    mask = np.unpackbits(body[nb:], bitorder="little", count=rows * cols).astype(bool)
    return IrisCode(bits.reshape(rows, cols, 2), mask.reshape(rows, cols))


def save_code(path, code: IrisCode) -> None:
    with open(path, "wb") as fh:
        fh.write(code_to_bytes(code))


def load_code(path) -> IrisCode:
    with open(path, "rb") as fh:
        return code_from_bytes(fh.read())


@dataclass(frozen=True)
class ScoreRow:
    id_a: str
    id_b: str
    label: str
    score: float
    shift: int = 0


def save_scores(path, rows: Iterable[ScoreRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in rows:
            w.writerow([r.id_a, r.id_b, r.label, repr(float(r.score)), int(r.shift)])


def load_scores(path) -> list[ScoreRow]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            if r["label"] not in SCORE_LABELS:
                raise ValueError(f"unknown score label {r['label']!r}")
            out.append(ScoreRow(r["idA"], r["idB"], r["label"], float(r["score"]), int(r["shift"] or 0)))
    return out
