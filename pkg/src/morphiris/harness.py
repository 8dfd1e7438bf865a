"""Command-line pipeline: synthetic data through recognition, morphing, vulnerability and S-MAD reports.

Every stage reads and writes plain files under a work directory and skips
outputs that already exist, so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import os
import sys
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import __version__, codec, mad, metrics, pairsel
from .imgcore import FormatError, GrayImage, load_label_mask, load_pgm, save_label_mask, save_pgm
from .morphgen import MorphError, morph_pair
from .normalization import load_sheet, save_sheet, sheet_exists, unwrap
from .parallel import default_workers, ordered_map
from .segmentation import FitError, GeometryError, SegmentationError, geometry_from_mask, segment
from .synthgen import derive_seed, generate_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, item: str, message: str):
        super().__init__(f"stage {stage!r} failed on {item!r}: {message}")
        self.stage, self.item = stage, item


# ------------------------------------------------------------------- config

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """One flat ``section.key = value`` file; see ``CONFIG_KEYS`` for the spelling of each field."""

    seed: int = 7
    dataset: str = ""  # existing manifest.csv; empty = generate synthetic data
    n_subjects: int = 50
    images_per_subject: int = 4
    pupil_radius_range: tuple[float, ...] = (20.0, 38.0)
    strategies: tuple[str, ...] = ("random", "radius")
    n_pairs: int = 40
    alpha: float = 0.5
    sheet_rows: int = 64
    sheet_cols: int = 512
    wavelengths: tuple[float, ...] = (24.0, 16.0)
    sigma_ratio: float = codec.DEFAULT_SIGMA_RATIO
    rows_used: int = codec.DEFAULT_ROWS_USED
    eps: float = codec.DEFAULT_EPS
    max_shift: int = codec.DEFAULT_MAX_SHIFT
    probe_cap: int = 5
    external_scores: tuple[str, ...] = ()
    delta: float = codec.DEFAULT_DELTA
    fmr_targets: tuple[float, ...] = (0.10, 0.05, 0.01, 0.001)
    threshold: str = "delta"  # delta | eer | fmr:<target> | <number>
    mad_enabled: bool = True
    mad_extractor: str = "freq"
    mad_n_trees: int = 100
    mad_max_depth: int = 12
    mad_min_leaf: int = 2
    mad_mtry: int = 0  # 0 = floor(sqrt(d))

    def __post_init__(self):
        if self.n_subjects < 2 or self.images_per_subject < 1:
            raise ConfigError("gen.n_subjects must be >= 2 and gen.images_per_subject >= 1")
        if len(self.pupil_radius_range) != 2 or not 0 < self.pupil_radius_range[0] <= self.pupil_radius_range[1]:
            raise ConfigError("gen.pupil_radius_range must be 'lo,hi' with 0 < lo <= hi")
        bad = set(self.strategies) - set(pairsel.STRATEGIES)
        if bad or not self.strategies or len(set(self.strategies)) != len(self.strategies):
            raise ConfigError(f"pairs.strategies must be distinct values from {pairsel.STRATEGIES}")
        if self.n_pairs < 1:
            raise ConfigError("pairs.n_pairs must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("morph.alpha must lie in [0, 1]")
        if self.sheet_rows < 2 or self.sheet_cols < 4:
            raise ConfigError("sheet.rows must be >= 2 and sheet.cols >= 4")
        if not self.wavelengths or min(self.wavelengths) < 4:
            raise ConfigError("codec.wavelengths needs at least one value >= 4")
        if not 1 <= self.rows_used <= min(self.sheet_rows, codec.MAX_ROWS_PACKED):
            raise ConfigError("codec.rows_used out of range")
        if self.max_shift < 0 or self.probe_cap < 1:
            raise ConfigError("codec.max_shift must be >= 0 and compare.probe_cap >= 1")
        if not all(0 < t < 1 for t in self.fmr_targets):
            raise ConfigError("vuln.fmr_targets must lie in (0, 1)")
        _threshold_policy(self.threshold)
        if self.mad_extractor not in mad.EXTRACTORS:
            raise ConfigError(f"mad.extractor must be one of {mad.EXTRACTORS}")
        if self.mad_n_trees < 1 or self.mad_max_depth < 0 or self.mad_min_leaf < 1 or self.mad_mtry < 0:
            raise ConfigError("invalid mad.* forest settings")

    @property
    def system_names(self) -> tuple[str, ...]:
        names = tuple(f"hd{w:g}" for w in self.wavelengths)
        return names + tuple(f"ext{i}" for i in range(len(self.external_scores)))

    def stream(self, name: str) -> int:
        """Named seed sub-stream derived from the global seed."""
        return derive_seed(self.seed, zlib.crc32(name.encode()))

    def to_text(self) -> str:
        lines = []
        for key, (attr, _) in sorted(CONFIG_KEYS.items()):
            v = getattr(self, attr)
            if isinstance(v, tuple):
                v = ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


CONFIG_KEYS = {
    "seed": ("seed", int),
    "gen.dataset": ("dataset", str),
    "gen.n_subjects": ("n_subjects", int),
    "gen.images_per_subject": ("images_per_subject", int),
    "gen.pupil_radius_range": ("pupil_radius_range", _floats),
    "pairs.strategies": ("strategies", _names),
    "pairs.n_pairs": ("n_pairs", int),
    "morph.alpha": ("alpha", float),
    "sheet.rows": ("sheet_rows", int),
    "sheet.cols": ("sheet_cols", int),
    "codec.wavelengths": ("wavelengths", _floats),
    "codec.sigma_ratio": ("sigma_ratio", float),
    "codec.rows_used": ("rows_used", int),
    "codec.eps": ("eps", float),
    "codec.max_shift": ("max_shift", int),
    "compare.probe_cap": ("probe_cap", int),
    "compare.external_scores": ("external_scores", _names),
    "vuln.delta": ("delta", float),
    "vuln.fmr_targets": ("fmr_targets", _floats),
    "vuln.threshold": ("threshold", str),
    "mad.enabled": ("mad_enabled", _bool),
    "mad.extractor": ("mad_extractor", str),
    "mad.n_trees": ("mad_n_trees", int),
    "mad.max_depth": ("mad_max_depth", int),
    "mad.min_leaf": ("mad_min_leaf", int),
    "mad.mtry": ("mad_mtry", int),
}


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse ``key = value`` lines ('#' starts a comment), then apply ``key=value`` overrides."""
    values = {}
    for lineno, line in enumerate(list(text.splitlines()) + list(overrides), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        attr, conv = CONFIG_KEYS[key]
        try:
            values[attr] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from None
    if "seed" not in values:
        raise ConfigError("config must set seed")
    return ExperimentConfig(**values)


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def _threshold_policy(text: str):
    t = text.strip()
    if t in ("delta", "eer"):
        return t, None
    if t.startswith("fmr:"):
        v = float(t[4:])
        if not 0 < v < 1:
            raise ConfigError("vuln.threshold fmr target must lie in (0, 1)")
        return "fmr", v
    try:
        return "fixed", float(t)
    except ValueError:
        raise ConfigError(f"vuln.threshold must be delta, eer, fmr:<x> or a number, got {text!r}") from None


# ------------------------------------------------------------------- stages

def morph_name(stem_a: str, stem_b: str, alpha: float) -> str:
    return f"M_{stem_a}_{stem_b}_{alpha:g}"


@dataclass
class SegOutcome:
    geometry: object = None  # IrisGeometry on success
    error: str = ""


def _write_csv(path, header, rows) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def stage_segment(items: Sequence[tuple[str, str]], out_dir: str, workers: int) -> dict[str, SegOutcome]:
    """Segment (id, image path) items; masks go to ``<id>.mask.pgm``, failures are recorded, not raised."""
    os.makedirs(out_dir, exist_ok=True)

    def work(item):
        sid, path = item
        mpath = os.path.join(out_dir, sid + ".mask.pgm")
        try:
            if os.path.exists(mpath):
                return SegOutcome(geometry_from_mask(load_label_mask(mpath)))
            mask, geom = segment(load_pgm(path))
        except (SegmentationError, FitError, GeometryError) as exc:
            return SegOutcome(error=str(exc))
        except (OSError, FormatError) as exc:
            raise StageError("segment", sid, str(exc)) from exc
        save_label_mask(mpath, mask)
        return SegOutcome(geom)

    out = dict(zip([i for i, _ in items], ordered_map(work, items, workers)))
    rows = []
    for sid in sorted(out):
        o = out[sid]
        geo = [repr(v) for v in o.geometry.as_row()] if o.geometry is not None else [""] * 8
        rows.append([sid, "ok" if o.geometry is not None else "failed", *geo, o.error])
    _write_csv(os.path.join(out_dir, "segmentation.csv"),
               ["id", "status", "pcx", "pcy", "prmin", "prmax", "icx", "icy", "irmin", "irmax", "error"], rows)
    return out


def stage_normalize(items: Sequence[tuple[str, str]], seg: dict[str, SegOutcome], seg_dir: str, out_dir: str,
                    rows: int, cols: int, workers: int) -> list[str]:
    """Unwrap every successfully segmented item; returns the ids that have a sheet."""
    os.makedirs(out_dir, exist_ok=True)
    todo = [(sid, path) for sid, path in items if seg[sid].geometry is not None]

    def work(item):
        sid, path = item
        stem = os.path.join(out_dir, sid)
        if not sheet_exists(stem):
            try:
                mask = load_label_mask(os.path.join(seg_dir, sid + ".mask.pgm"))
                save_sheet(stem, unwrap(load_pgm(path), seg[sid].geometry, rows, cols, mask))
            except (OSError, FormatError) as exc:
                raise StageError("normalize", sid, str(exc)) from exc
        return sid

    return ordered_map(work, todo, workers)


def stage_encode(ids: Sequence[str], sheet_dir: str, out_dir: str, wavelength: float, cfg: ExperimentConfig,
                 workers: int) -> dict[str, str]:
    """Encode saved sheets; returns id -> error for sheets that could not be encoded."""
    os.makedirs(out_dir, exist_ok=True)

    def work(sid):
        path = os.path.join(out_dir, sid + ".irc")
        if os.path.exists(path):
            return ""
        try:
            code = codec.encode(load_sheet(os.path.join(sheet_dir, sid)), wavelength, cfg.sigma_ratio,
                                cfg.rows_used, cfg.eps)
        except codec.EncodeError as exc:
            return str(exc)
        except (OSError, FormatError) as exc:
            raise StageError("encode", sid, str(exc)) from exc
        codec.save_code(path, code)
        return ""

    errs = ordered_map(work, list(ids), workers)
    return {sid: e for sid, e in zip(ids, errs) if e}


def _load_codes(ids, code_dir) -> dict[str, codec.IrisCode]:
    out = {}
    for sid in ids:
        path = os.path.join(code_dir, sid + ".irc")
        if os.path.exists(path):
            out[sid] = codec.load_code(path)
    return out


def bonafide_comparisons(manifest: pairsel.DatasetManifest, codes: dict[str, codec.IrisCode],
                         max_shift: int) -> list[codec.ScoreRow]:
    """All within-identity pairs (mated) and first-image pairs across identities (non-mated)."""
    by_ident = defaultdict(list)
    for e in manifest:
        if e.stem in codes:
            by_ident[e.identity].append(e.stem)
    rows = []
    for ident in sorted(by_ident):
        stems = sorted(by_ident[ident])
        for i, a in enumerate(stems[:-1]):
            hd, sh, _ = codec.hamming_many(codes[a], [codes[b] for b in stems[i + 1:]], max_shift)
            rows += [codec.ScoreRow(a, b, "mated", float(h), int(s)) for b, h, s in zip(stems[i + 1:], hd, sh)]
    firsts = [sorted(by_ident[i])[0] for i in sorted(by_ident)]
    for i, a in enumerate(firsts[:-1]):
        hd, sh, _ = codec.hamming_many(codes[a], [codes[b] for b in firsts[i + 1:]], max_shift)
        rows += [codec.ScoreRow(a, b, "nonmated", float(h), int(s)) for b, h, s in zip(firsts[i + 1:], hd, sh)]
    return [r for r in rows if np.isfinite(r.score)]


def probes_for(manifest: pairsel.DatasetManifest, source: pairsel.ManifestEntry, available, cap: int) -> list[str]:
    """Other images of the source's identity, sorted, at most ``cap``."""
    stems = sorted(e.stem for e in manifest if e.identity == source.identity and e.stem != source.stem
                   and e.stem in available)
    return stems[:cap]


def morph_comparisons(morphs: Sequence[tuple[str, pairsel.MorphPair]], morph_codes, codes, manifest,
                      probe_cap: int, max_shift: int) -> list[codec.ScoreRow]:
    rows = []
    for mid, pair in morphs:
        if mid not in morph_codes:
            continue
        for label, src in (("morphA", pair.entry_a), ("morphB", pair.entry_b)):
            probes = probes_for(manifest, src, codes, probe_cap)
            hd, sh, _ = codec.hamming_many(morph_codes[mid], [codes[p] for p in probes], max_shift)
            rows += [codec.ScoreRow(mid, p, label, float(h), int(s)) for p, h, s in zip(probes, hd, sh)]
    return rows


# ------------------------------------------------------------------- report

def rate_key(t: float) -> str:
    """0.1 -> '0.10', 0.001 -> '0.001'."""
    return f"{t:.2f}" if round(t, 2) == t else f"{t:g}"


def _split_scores(rows: Sequence[codec.ScoreRow]):
    mated = [r.score for r in rows if r.label == "mated"]
    nonmated = [r.score for r in rows if r.label == "nonmated"]
    attempts: dict[str, tuple[list, list]] = {}
    for r in rows:
        if r.label in ("morphA", "morphB"):
            attempts.setdefault(r.id_a, ([], []))[r.label == "morphB"].append(r.score)
    return mated, nonmated, attempts


def _strategy_of(morph_id: str) -> str:
    return morph_id.split("/", 1)[0] if "/" in morph_id else "all"


def recognition_summary(mated, nonmated, fmr_targets, delta) -> dict:
    ss = metrics.ScoreSet(mated, nonmated)
    e, t = metrics.eer(ss)
    out = {"scores": ss.stats(), "d_prime": metrics.d_prime(ss),
           "eer": {"value": e, "threshold": t, "criterion": "fmr == fnmr (interpolated)"}, "fnmr_at": {}}
    for target in fmr_targets:
        try:
            fnmr, thr = metrics.fnmr_at_fmr(ss, target)
            fmr, _ = metrics.rates_at(ss, thr)
        except metrics.MetricError:
            fnmr = thr = fmr = None
        out["fnmr_at"][rate_key(target)] = {"fnmr": fnmr, "fmr": fmr, "threshold": thr,
                                         "criterion": f"lowest fnmr with fmr <= {target:g}"}
    n = np.asarray(nonmated)
    m = np.asarray(mated)
    out["at_delta"] = {"threshold": delta, "criterion": "fixed delta, match when score <= delta",
                       "fmr": float((n <= delta).mean()), "fnmr": float((m > delta).mean())}
    return out


def _policy_threshold(policy: str, ss: metrics.ScoreSet, delta: float) -> tuple[float, str]:
    kind, v = _threshold_policy(policy)
    if kind == "delta":
        return delta, f"fixed delta {delta:g}"
    if kind == "eer":
        return metrics.eer(ss)[1], "eer threshold"
    if kind == "fmr":
        return metrics.fnmr_at_fmr(ss, v)[1], f"fmr <= {v:g}"
    return v, "explicit threshold"


def vulnerability_section(strategy: str, systems: Sequence[str], per_system, delta: float, threshold_policy: str,
                          fmr_targets) -> dict:
    """``per_system[name] = (mated, nonmated, attempts)`` restricted to this strategy's morphs."""
    primary = systems[0]
    mated, nonmated, attempts = per_system[primary]
    ss = metrics.ScoreSet(mated, nonmated)
    ids = sorted(attempts)
    sec = {"morphs_compared": len(ids)}
    if not ids:
        return sec
    n_att = succ = morph_succ = 0
    for mid in ids:
        a, b = attempts[mid]
        k = min(len(a), len(b))
        hits = [codec.attack_success_scores(a[i], b[i], delta) for i in range(k)]
        n_att += k
        succ += sum(hits)
        morph_succ += any(hits)
    scores = [s for mid in ids for s in attempts[mid][0] + attempts[mid][1]]
    sec["morph_scores"] = {"n": len(scores), "mean": float(np.mean(scores)), "std": float(np.std(scores))}
    sec["attack_success"] = {
        "criterion": "attempt k succeeds when max(HD to probe k of A, HD to probe k of B) <= delta",
        "delta": delta, "attempts": n_att, "successes": succ, "rate": succ / n_att if n_att else None,
        "morph_rate": morph_succ / len(ids)}
    rec = recognition_summary(mated, nonmated, fmr_targets, delta)
    sec["d_prime"] = rec["d_prime"]
    sec["eer"] = rec["eer"]["value"]
    sec["fnmr_at"] = {k: v["fnmr"] for k, v in rec["fnmr_at"].items()}
    tau, crit = _policy_threshold(threshold_policy, ss, delta)
    thresholds = {"mmpmr": {"value": tau, "criterion": crit},
                  "eer": {"value": rec["eer"]["threshold"], "criterion": rec["eer"]["criterion"]}}
    for k, v in rec["fnmr_at"].items():
        thresholds[f"fmr<={k}"] = {"value": v["threshold"], "criterion": v["criterion"]}
    sec["thresholds"] = thresholds
    # metrics.mmpmr matches on score < tau; nudge up one ulp so "<= tau" counts, as for attack success
    tau_incl = float(np.nextafter(tau, np.inf))
    records = [metrics.MorphAttackRecord(mid, tuple(per_system[s][2].get(mid, ((), ())) for s in systems))
               for mid in ids]
    records = [r for r in records if all(len(a) and len(b) for a, b in r.attempts)]
    fnmr_tau = float((np.asarray(mated) > tau).mean())
    mm = {v: metrics.mmpmr(records, tau_incl, v) for v in ("minmax", "prodavg")}
    sec["mmpmr"] = mm
    sec["fnmr_at_mmpmr_threshold"] = fnmr_tau
    sec["rmmr"] = {v: metrics.rmmr(mm[v], fnmr_tau) for v in mm}
    max_att = max(len(x) for r in records for a in r.attempts for x in a)
    sec["map"] = metrics.map_matrix(records, [tau_incl] * len(systems), max_att).tolist()
    sec["map_axes"] = {"rows": "at least i successful attempts per subject (i = 1..)",
                       "cols": "at least j systems fooled (j = 1..)", "systems": list(systems),
                       "threshold": {"value": tau, "criterion": crit + ", match when score <= threshold"}}
    return sec


def build_report(score_rows: dict[str, list[codec.ScoreRow]], delta: float, fmr_targets, threshold_policy: str,
                 provenance: dict, extra: dict | None = None) -> dict:
    """Vulnerability report from per-system score rows; the first system is primary."""
    systems = list(score_rows)
    split = {s: _split_scores(score_rows[s]) for s in systems}
    report = {"provenance": provenance, "systems": systems,
              "recognition": {s: recognition_summary(split[s][0], split[s][1], fmr_targets, delta) for s in systems}}
    strategies = sorted({_strategy_of(mid) for mid in split[systems[0]][2]})
    vuln = {}
    for strat in strategies:
        per_system = {s: (split[s][0], split[s][1],
                          {m: v for m, v in split[s][2].items() if _strategy_of(m) == strat}) for s in systems}
        vuln[strat] = vulnerability_section(strat, systems, per_system, delta, threshold_policy, fmr_targets)
    report["vulnerability"] = vuln
    if "radius" in vuln and "random" in vuln:
        ra = vuln["radius"].get("attack_success", {}).get("rate")
        rn = vuln["random"].get("attack_success", {}).get("rate")
        report["pair_selection"] = {"radius_success_rate": ra, "random_success_rate": rn,
                                    "radius_at_least_random": None if ra is None or rn is None else ra >= rn}
    if extra:
        report.update(extra)
    return metrics.jsonable(report)


def write_json(path, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(metrics.jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# ------------------------------------------------------------------ cmd_run

def _artefacts(work: str) -> list[str]:
    out = []
    for root, _, files in os.walk(work):
        out += [os.path.relpath(os.path.join(root, f), work) for f in files]
    return sorted(out)


def _check_hash(cfg: ExperimentConfig, work: str) -> None:
    path = os.path.join(work, "config.hash")
    if os.path.exists(path):
        with open(path) as fh:
            old = fh.read().strip()
        if old != cfg.hash:
            raise ConfigError(f"work directory {work} was produced by a different config "
                              f"(hash {old[:12]} != {cfg.hash[:12]}); use a fresh directory")
        return
    os.makedirs(work, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(cfg.hash + "\n")
    with open(os.path.join(work, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())


def cmd_run(cfg: ExperimentConfig, work: str, workers: int | None = None, log=print) -> dict:
    """Full pipeline into ``work``; returns the report that is also written to ``report.json``."""
    workers = default_workers() if workers is None else workers
    _check_hash(cfg, work)
    try:
        return _run(cfg, work, workers, log)
    except StageError:
        with open(os.path.join(work, "partial_manifest.txt"), "w") as fh:
            fh.write("\n".join(_artefacts(work)) + "\n")
        raise


def _run(cfg: ExperimentConfig, work: str, workers: int, log) -> dict:
    # generate
    if cfg.dataset:
        data_dir = os.path.dirname(os.path.abspath(cfg.dataset))
        manifest = pairsel.DatasetManifest.load(cfg.dataset)
    else:
        data_dir = os.path.join(work, "data")
        mpath = os.path.join(data_dir, "manifest.csv")
        log(f"[gen] {cfg.n_subjects} subjects x 2 eyes x {cfg.images_per_subject} images")
        try:
            manifest = generate_dataset(cfg.n_subjects, cfg.images_per_subject, cfg.pupil_radius_range,
                                        cfg.stream("gen"), data_dir, workers=workers, skip_existing=True)
        except (OSError, ValueError) as exc:
            raise StageError("gen", mpath, str(exc)) from exc
    by_stem = {e.stem: e for e in manifest}
    items = [(e.stem, os.path.join(data_dir, e.image_path)) for e in manifest]

    # recognition chain for bona fide images
    log(f"[segment] {len(items)} bona fide images")
    seg = stage_segment(items, os.path.join(work, "seg"), workers)
    sheets = stage_normalize(items, seg, os.path.join(work, "seg"), os.path.join(work, "sheets"),
                             cfg.sheet_rows, cfg.sheet_cols, workers)
    log(f"[encode] {len(sheets)} sheets x {len(cfg.wavelengths)} systems")
    codes = {}
    enc_fail = {}
    for name, w in zip(cfg.system_names, cfg.wavelengths):
        enc_fail.update(stage_encode(sheets, os.path.join(work, "sheets"), os.path.join(work, "codes", name), w,
                                     cfg, workers))
        codes[name] = _load_codes(sheets, os.path.join(work, "codes", name))
    seg_report = {"bonafide": _seg_summary(seg, enc_fail)}

    # pairs and morphs
    morphs: dict[str, list[tuple[str, pairsel.MorphPair]]] = {}
    morph_codes: dict[str, dict[str, codec.IrisCode]] = {s: {} for s in cfg.system_names[:len(cfg.wavelengths)]}
    pair_info = {}
    for strat in cfg.strategies:
        ppath = os.path.join(work, "pairs", f"{strat}.csv")
        os.makedirs(os.path.dirname(ppath), exist_ok=True)
        if os.path.exists(ppath):
            pairs = pairsel.load_pairs(ppath, manifest)
        else:
            try:
                if strat == "random":
                    pairs = pairsel.select_random(manifest, cfg.n_pairs, cfg.stream("pairs.random"))
                else:
                    pairs = pairsel.select_by_radius(manifest, cfg.n_pairs)
            except pairsel.CapacityError as exc:
                raise StageError("select-pairs", strat, str(exc)) from exc
            pairsel.save_pairs(ppath, pairs)
        pair_info[strat] = {"pairs": len(pairs), "mean_pupil_delta": pairsel.mean_pupil_delta(pairs)}
        mdir = os.path.join(work, "morphs", strat)
        log(f"[morph] {strat}: {len(pairs)} pairs")
        built = stage_morph(pairs, seg, items_dict=dict(items), out_dir=mdir, alpha=cfg.alpha, workers=workers)
        morphs[strat] = [(f"{strat}/{name}", p) for name, p in built if name]
        pair_info[strat]["morphs_created"] = len(morphs[strat])
        pair_info[strat]["morph_failures"] = [p.entry_a.stem + "+" + p.entry_b.stem for name, p in built if not name]
        m_items = [(name, os.path.join(mdir, name + ".pgm")) for name, _ in built if name]
        mseg = stage_segment(m_items, os.path.join(mdir, "seg"), workers)
        msheets = stage_normalize(m_items, mseg, os.path.join(mdir, "seg"), os.path.join(mdir, "sheets"),
                                  cfg.sheet_rows, cfg.sheet_cols, workers)
        mfail = {}
        for name, w in zip(cfg.system_names, cfg.wavelengths):
            cdir = os.path.join(mdir, "codes", name)
            mfail.update(stage_encode(msheets, os.path.join(mdir, "sheets"), cdir, w, cfg, workers))
            morph_codes[name].update({f"{strat}/{k}": v for k, v in _load_codes(msheets, cdir).items()})
        seg_report[strat] = _seg_summary(mseg, mfail)

    # comparisons
    log("[compare]")
    score_rows = {}
    os.makedirs(os.path.join(work, "scores"), exist_ok=True)
    for name in cfg.system_names[:len(cfg.wavelengths)]:
        spath = os.path.join(work, "scores", f"{name}.csv")
        if not os.path.exists(spath):
            rows = bonafide_comparisons(manifest, codes[name], cfg.max_shift)
            for strat in cfg.strategies:
                rows += morph_comparisons(morphs[strat], morph_codes[name], codes[name], manifest, cfg.probe_cap,
                                          cfg.max_shift)
            codec.save_scores(spath, rows)
        score_rows[name] = codec.load_scores(spath)
    for name, path in zip(cfg.system_names[len(cfg.wavelengths):], cfg.external_scores):
        score_rows[name] = _external_rows(path, score_rows[cfg.system_names[0]])
    primary = cfg.system_names[0]
    mated, nonmated, _ = _split_scores(score_rows[primary])
    os.makedirs(os.path.join(work, "det"), exist_ok=True)
    for name, rows in score_rows.items():
        m, n, _ = _split_scores(rows)
        metrics.save_det_csv(os.path.join(work, "det", f"{name}.csv"), metrics.det_points(metrics.ScoreSet(m, n)))

    # S-MAD
    extra = {"segmentation": seg_report, "pairs": pair_info}
    if cfg.mad_enabled and len(cfg.strategies) == 2:
        extra["mad"] = stage_mad(cfg, work, manifest, data_dir, log)

    prov = {"config_hash": cfg.hash, "seed": cfg.seed, "tool_version": __version__,
            "attempts_cap": cfg.probe_cap, "primary_system": primary}
    report = build_report(score_rows, cfg.delta, cfg.fmr_targets, cfg.threshold, prov, extra)
    write_json(os.path.join(work, "report.json"), report)
    log(f"[report] {os.path.join(work, 'report.json')}")
    return report


def _seg_summary(seg: dict[str, SegOutcome], enc_fail: dict[str, str]) -> dict:
    failed = sorted(k for k, o in seg.items() if o.geometry is None)
    return {"total": len(seg), "segmentation_failed": len(failed), "failed_ids": failed,
            "encode_failed": sorted(enc_fail)}


def _external_rows(path, like: Sequence[codec.ScoreRow]) -> list[codec.ScoreRow]:
    """Look up every comparison of the primary system in an imported score file."""
    cmp = codec.ScoreFileComparator(codec.load_scores(path), name=path)
    try:
        return [dataclasses.replace(r, score=cmp.compare(r.id_a, r.id_b), shift=0) for r in like]
    except codec.ComparisonError as exc:
        raise StageError("compare", path, str(exc)) from exc


def stage_morph(pairs: Sequence[pairsel.MorphPair], seg: dict[str, SegOutcome], items_dict: dict[str, str],
                out_dir: str, alpha: float, workers: int) -> list[tuple[str, pairsel.MorphPair]]:
    """Write one morph per pair; the returned name is empty when a source could not be segmented."""
    os.makedirs(out_dir, exist_ok=True)

    def work(pair):
        a, b = pair.entry_a.stem, pair.entry_b.stem
        name = morph_name(a, b, alpha)
        path = os.path.join(out_dir, name + ".pgm")
        if os.path.exists(path):
            return name, pair
        if seg[a].geometry is None or seg[b].geometry is None:
            return "", pair
        try:
            res = morph_pair(load_pgm(items_dict[a]), seg[a].geometry, load_pgm(items_dict[b]), seg[b].geometry,
                             alpha, (a, b))
        except MorphError as exc:
            raise StageError("morph", name, str(exc)) from exc
        save_pgm(path, res.morph)
        return name, pair

    return ordered_map(work, list(pairs), workers)


def _mad_images(pattern: str) -> list[GrayImage]:
    return [load_pgm(p) for p in sorted(glob.glob(pattern))]


def stage_mad(cfg: ExperimentConfig, work: str, manifest, data_dir: str, log) -> dict:
    bona = [(e.subject_id, load_pgm(os.path.join(data_dir, e.image_path))) for e in manifest]
    sets = {s: _mad_images(os.path.join(work, "morphs", s, "M_*.pgm")) for s in cfg.strategies}
    out = {}
    for train, test in (("random", "radius"), ("radius", "random")):
        odir = os.path.join(work, "mad", f"{train}_to_{test}")
        rpath = os.path.join(odir, "report.json")
        if os.path.exists(rpath) and os.path.exists(os.path.join(odir, "det.csv")):
            with open(rpath) as fh:
                out[f"{train}_to_{test}"] = json.load(fh)
            continue
        log(f"[mad] train {train}, test {test}")
        try:
            rep = mad.smad_experiment(bona, sets[train], sets[test], cfg.mad_extractor, cfg.stream("mad.split"),
                                      odir, cfg.mad_n_trees, cfg.mad_max_depth, cfg.mad_min_leaf,
                                      cfg.mad_mtry or None, cfg.stream("mad.forest"), default_workers())
        except (mad.MadError, metrics.MetricError) as exc:
            raise StageError("mad", f"{train}_to_{test}", str(exc)) from exc
        out[f"{train}_to_{test}"] = metrics.jsonable(rep)
    return out


# ---------------------------------------------------------------------- CLI

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _need(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _manifest_items(path: str) -> tuple[pairsel.DatasetManifest, list[tuple[str, str]]]:
    m = pairsel.DatasetManifest.load(_need(path, "manifest"))
    base = os.path.dirname(os.path.abspath(path))
    return m, [(e.stem, os.path.join(base, e.image_path)) for e in m]


def _cmd_gen(a):
    lo, hi = _floats(a.pupil_range)
    m = generate_dataset(a.subjects, a.images, (lo, hi), a.seed, a.out, workers=a.workers)
    print(f"wrote {len(m)} images to {a.out}")


def _cmd_segment(a):
    _, items = _manifest_items(a.manifest)
    seg = stage_segment(items, a.out, a.workers)
    print(f"segmented {sum(o.geometry is not None for o in seg.values())}/{len(seg)} images")


def _seg_from_dir(items, seg_dir) -> dict[str, SegOutcome]:
    out = {}
    for sid, _ in items:
        mpath = os.path.join(seg_dir, sid + ".mask.pgm")
        try:
            out[sid] = SegOutcome(geometry_from_mask(load_label_mask(mpath))) if os.path.exists(mpath) else \
                SegOutcome(error="no mask")
        except (GeometryError, FitError) as exc:
            out[sid] = SegOutcome(error=str(exc))
    return out


def _cmd_normalize(a):
    _, items = _manifest_items(a.manifest)
    seg = _seg_from_dir(items, _need(a.seg, "segmentation directory"))
    done = stage_normalize(items, seg, a.seg, a.out, a.rows, a.cols, a.workers)
    print(f"wrote {len(done)} rubber sheets to {a.out}")


def _codec_cfg(a) -> ExperimentConfig:
    return ExperimentConfig(sigma_ratio=a.sigma_ratio, rows_used=a.rows_used, eps=a.eps)


def _cmd_encode(a):
    ids = sorted(os.path.basename(p)[:-len(".rs.pgm")] for p in glob.glob(os.path.join(_need(a.sheets, "sheets"),
                                                                                    "*.rs.pgm")))
    fails = stage_encode(ids, a.sheets, a.out, a.wavelength, _codec_cfg(a), a.workers)
    print(f"encoded {len(ids) - len(fails)}/{len(ids)} sheets")


def _cmd_select(a):
    m = pairsel.DatasetManifest.load(_need(a.manifest, "manifest"))
    try:
        pairs = pairsel.select_random(m, a.n, a.seed) if a.strategy == "random" else pairsel.select_by_radius(m, a.n)
    except pairsel.CapacityError as exc:
        raise ConfigError(str(exc)) from None
    pairsel.save_pairs(a.out, pairs)
    print(f"wrote {len(pairs)} {a.strategy} pairs to {a.out}")


def _read_pair_paths(path):
    import csv
    with open(_need(path, "pair file"), newline="") as fh:
        return [(r["pathA"], r["pathB"]) for r in csv.DictReader(fh)]


def _cmd_morph(a):
    base = a.data or os.path.dirname(os.path.abspath(a.pairs))
    os.makedirs(a.out, exist_ok=True)
    n = 0
    for pa, pb in _read_pair_paths(a.pairs):
        ia, ib = load_pgm(os.path.join(base, pa)), load_pgm(os.path.join(base, pb))
        try:
            (_, ga), (_, gb) = segment(ia), segment(ib)
        except (SegmentationError, FitError, GeometryError) as exc:
            print(f"skipped {pa} x {pb}: {exc}", file=sys.stderr)
            continue
        sa, sb = (os.path.splitext(os.path.basename(p))[0] for p in (pa, pb))
        save_pgm(os.path.join(a.out, morph_name(sa, sb, a.alpha) + ".pgm"),
                 morph_pair(ia, ga, ib, gb, a.alpha, (sa, sb)).morph)
        n += 1
    print(f"wrote {n} morphs to {a.out}")


def _cmd_compare(a):
    m = pairsel.DatasetManifest.load(_need(a.manifest, "manifest"))
    codes = _load_codes([e.stem for e in m], _need(a.codes, "code directory"))
    rows = bonafide_comparisons(m, codes, a.max_shift)
    if a.pairs:
        pairs = pairsel.load_pairs(_need(a.pairs, "pair file"), m)
        named = [(morph_name(p.entry_a.stem, p.entry_b.stem, a.alpha), p) for p in pairs]
        mcodes = _load_codes([n for n, _ in named], _need(a.morph_codes, "morph code directory"))
        # same "<strategy>/<morph>" ids as the full pipeline, so reports split by strategy
        rows += morph_comparisons([(f"{p.strategy}/{n}", p) for n, p in named],
                                  {f"{p.strategy}/{n}": mcodes[n] for n, p in named if n in mcodes},
                                  codes, m, a.probe_cap, a.max_shift)
    codec.save_scores(a.out, rows)
    print(f"wrote {len(rows)} scores to {a.out}")


def _cmd_vuln(a):
    rows = {f"s{i}": codec.load_scores(_need(p, "score file")) for i, p in enumerate(a.scores)}
    prov = {"score_files": list(a.scores), "tool_version": __version__}
    report = build_report(rows, a.delta, _floats(a.fmr_targets), a.threshold, prov)
    write_json(a.out, report)
    print(f"wrote {a.out}")


def _labelled_features(manifest_path, morph_dir, extractor):
    _, items = _manifest_items(manifest_path)
    bona = [mad.extract(load_pgm(p), extractor) for _, p in items]
    morphs = [mad.extract(img, extractor) for img in _mad_images(os.path.join(_need(morph_dir, "morph dir"),
                                                                              "*.pgm"))]
    return bona, morphs


def _cmd_mad_train(a):
    bona, morphs = _labelled_features(a.manifest, a.morphs, a.extractor)
    model = mad.rf_train(np.array(bona + morphs), [0] * len(bona) + [1] * len(morphs), a.n_trees, a.max_depth,
                         a.min_leaf, a.mtry, a.seed, a.workers)
    mad.save_model(a.out, model)
    print(f"wrote {a.out}")


def _cmd_mad_eval(a):
    model = mad.load_model(_need(a.model, "model"))
    bona, morphs = _labelled_features(a.manifest, a.morphs, a.extractor)
    s_b = mad.rf_predict_many(model, np.array(bona)).tolist()
    s_m = mad.rf_predict_many(model, np.array(morphs)).tolist()
    report, det = mad.evaluate_scores(s_m, s_b)
    os.makedirs(a.out, exist_ok=True)
    mad.write_report(os.path.join(a.out, "report.json"), report)
    metrics.save_det_csv(os.path.join(a.out, "det.csv"), det)
    print(f"EER {report['eer']:.4f}; wrote {a.out}")


def _cmd_run(a):
    cfg = load_config(_need(a.config, "config"), a.set or ())
    report = cmd_run(cfg, a.work, a.workers)
    rec = report["recognition"][report["systems"][0]]
    print(f"d'={rec['d_prime']:.3f} EER={rec['eer']['value']:.4f}")
    for strat, sec in report["vulnerability"].items():
        rate = sec.get("attack_success", {}).get("rate")
        print(f"{strat}: attack success {rate}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="morphiris", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--workers", type=int, default=default_workers())
        return sp

    sp = add("gen-synthetic", _cmd_gen, "render a synthetic periocular dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=50)
    sp.add_argument("--images", type=int, default=4)
    sp.add_argument("--pupil-range", default="20,38")
    sp.add_argument("--seed", type=int, required=True)

    sp = add("segment", _cmd_segment, "threshold segmentation and circle fits")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    sp = add("normalize", _cmd_normalize, "rubber-sheet unwrapping")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seg", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", type=int, default=64)
    sp.add_argument("--cols", type=int, default=512)

    sp = add("encode", _cmd_encode, "iris codes from rubber sheets")
    sp.add_argument("--sheets", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wavelength", type=float, default=codec.DEFAULT_WAVELENGTH)
    sp.add_argument("--sigma-ratio", type=float, default=codec.DEFAULT_SIGMA_RATIO)
    sp.add_argument("--rows-used", type=int, default=codec.DEFAULT_ROWS_USED)
    sp.add_argument("--eps", type=float, default=codec.DEFAULT_EPS)

    sp = add("select-pairs", _cmd_select, "choose morph pairs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--strategy", choices=pairsel.STRATEGIES, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("morph", _cmd_morph, "one morph per pair")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="directory the pair paths are relative to (default: next to the pair file)")

    sp = add("compare", _cmd_compare, "mated, non-mated and morph comparisons")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--pairs")
    sp.add_argument("--morph-codes")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--probe-cap", type=int, default=5)
    sp.add_argument("--max-shift", type=int, default=codec.DEFAULT_MAX_SHIFT)
    sp.add_argument("--out", required=True)

    sp = add("vuln-report", _cmd_vuln, "vulnerability report from score files")
    sp.add_argument("--scores", action="append", required=True, help="repeat for more systems; first is primary")
    sp.add_argument("--fmr-targets", default="0.10,0.05,0.01")
    sp.add_argument("--delta", type=float, default=codec.DEFAULT_DELTA)
    sp.add_argument("--threshold", default="delta")
    sp.add_argument("--out", required=True)

    for name, fn in (("mad-train", _cmd_mad_train), ("mad-eval", _cmd_mad_eval)):
        sp = add(name, fn, "train the S-MAD forest" if fn is _cmd_mad_train else "score images with a forest")
        sp.add_argument("--manifest", required=True, help="bona fide images")
        sp.add_argument("--morphs", required=True, help="directory of morph PGMs")
        sp.add_argument("--extractor", choices=mad.EXTRACTORS, default="freq")
        sp.add_argument("--out", required=True)
        if fn is _cmd_mad_train:
            sp.add_argument("--n-trees", type=int, default=100)
            sp.add_argument("--max-depth", type=int, default=12)
            sp.add_argument("--min-leaf", type=int, default=2)
            sp.add_argument("--mtry", type=int)
            sp.add_argument("--seed", type=int, required=True)
        else:
            sp.add_argument("--model", required=True)

    sp = add("run", _cmd_run, "whole pipeline from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--work", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, pairsel.CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
