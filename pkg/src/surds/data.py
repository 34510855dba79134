"""Corpus manifests, writer-disjoint splits, sampling and synthetic signatures.

A manifest is a UTF-8 CSV with header ``path,writer_id,label`` where label
is ``genuine`` or ``forged`` and paths are relative to the manifest file.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import preprocess as pp
from .errors import DataError, InsufficientSamples, MissingFile, ParseError, SurdsError

log = logging.getLogger(__name__)

LABELS = ("genuine", "forged")
HEADER = ["path", "writer_id", "label"]
MIN_GENUINE, MIN_FORGED = 2, 1


class InsufficientSamplesWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SampleRecord:
    path: str
    writer_id: str
    label: str
    sample_index: int

    @property
    def sample_id(self) -> str:
        return self.path


@dataclass(frozen=True)
class WriterSet:
    """Samples grouped by writer, then by label. Treated as immutable."""
    root: Path
    writers: dict = field(default_factory=dict)  # writer_id -> {"genuine": [...], "forged": [...]}

    @property
    def writer_ids(self) -> list[str]:
        return sorted(self.writers)

    def genuine(self, writer_id: str) -> list[SampleRecord]:
        return self.writers[writer_id]["genuine"]

    def forged(self, writer_id: str) -> list[SampleRecord]:
        return self.writers[writer_id]["forged"]

    def records(self) -> list[SampleRecord]:
        return [r for w in self.writer_ids for lab in LABELS for r in self.writers[w][lab]]

    def __len__(self) -> int:
        return sum(len(v[lab]) for v in self.writers.values() for lab in LABELS)

    def abspath(self, rec: SampleRecord) -> Path:
        return self.root / rec.path

    def subset(self, writer_ids) -> "WriterSet":
        return WriterSet(self.root, {w: self.writers[w] for w in sorted(writer_ids)})

    def counts(self) -> dict[str, tuple[int, int]]:
        return {w: (len(self.genuine(w)), len(self.forged(w))) for w in self.writer_ids}


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def load_manifest(path, check_files: bool = True) -> WriterSet:
    path = Path(path)
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise MissingFile(f"manifest not found: {path}") from e
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ParseError(f"{path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    if header[:3] != HEADER:
        raise ParseError(f"{path}: header must be {','.join(HEADER)}, got {','.join(header)}")
    writers: dict[str, dict[str, list[SampleRecord]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        rel, wid, label = (c.strip() for c in row[:3])
        if not rel or not wid:
            raise ParseError(f"{path}:{lineno}: empty path or writer_id")
        if label not in LABELS:
            raise ParseError(f"{path}:{lineno}: label must be genuine/forged, got {label!r}")
        if check_files and not (root / rel).is_file():
            raise MissingFile(f"{path}:{lineno}: referenced image does not exist: {rel}")
        group = writers.setdefault(wid, {"genuine": [], "forged": []})[label]
        group.append(SampleRecord(rel, wid, label, len(group)))
    if not writers:
        raise ParseError(f"{path}: manifest has a header but no rows")
    ws = WriterSet(root, writers)
    short = [w for w, (g, f) in ws.counts().items() if g < MIN_GENUINE or f < MIN_FORGED]
    if short:
        warnings.warn(f"{len(short)} writer(s) below {MIN_GENUINE} genuine / {MIN_FORGED} forged: "
                      f"{', '.join(short[:10])}", InsufficientSamplesWarning, stacklevel=2)
    log.info("loaded %d records from %d writers (%s)", len(ws), len(writers), path)
    return ws


def write_manifest(ws_or_records, path) -> Path:
    path = Path(path)
    records = ws_or_records.records() if isinstance(ws_or_records, WriterSet) else list(ws_or_records)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([r.path, r.writer_id, r.label])
    return path


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def bhsig260_manifest(dataset_dir, out_path=None) -> Path:
    """Write a manifest for a BHSig260 language folder.

    Expects ``<dataset_dir>/<writer>/X-S-<writer>-{G,F}-<nn>.tif``.
    """
    dataset_dir = Path(dataset_dir)
    out_path = Path(out_path) if out_path else dataset_dir / "manifest.csv"
    pat = re.compile(r"-(G|F)-\d+\.\w+$", re.IGNORECASE)
    records = []
    for f in sorted(dataset_dir.rglob("*")):
        m = pat.search(f.name)
        if not f.is_file() or not m:
            continue
        label = "genuine" if m.group(1).upper() == "G" else "forged"
        rel = f.relative_to(out_path.parent).as_posix()
        records.append(SampleRecord(rel, f.parent.name, label, 0))
    if not records:
        raise ParseError(f"no BHSig260-style files under {dataset_dir}")
    return write_manifest(records, out_path)


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float
    seed: int
    train_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()


def make_split(writer_ids, train_ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    ids = sorted(writer_ids)
    if len(ids) < 2:
        raise InsufficientSamples("need at least 2 writers to split")
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")
    n_train = min(max(int(round(train_ratio * len(ids))), 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = tuple(sorted(ids[i] for i in perm[:n_train]))
    test = tuple(sorted(ids[i] for i in perm[n_train:]))
    return SplitSpec(train_ratio, seed, train, test)


def split_writers(ws: WriterSet, train_ratio: float = 0.7, seed: int = 0) -> tuple[WriterSet, WriterSet]:
    spec = make_split(ws.writer_ids, train_ratio, seed)
    return ws.subset(spec.train_ids), ws.subset(spec.test_ids)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class QuadrupletSpec:
    anchor: SampleRecord
    positive: SampleRecord
    neg_intra: SampleRecord
    neg_cross: SampleRecord


def sample_quadruplet(train: WriterSet, rng) -> QuadrupletSpec:
    """Anchor/positive: two distinct genuine samples of a writer; intra-writer
    negative: one of that writer's forgeries; cross-writer negative: a genuine
    sample of some other writer. All choices uniform."""
    rng = _rng(rng)
    eligible = [w for w in train.writer_ids
                if len(train.genuine(w)) >= MIN_GENUINE and len(train.forged(w)) >= MIN_FORGED]
    if not eligible:
        raise InsufficientSamples("no writer has >=2 genuine and >=1 forged samples")
    w = eligible[rng.integers(len(eligible))]
    others = [o for o in train.writer_ids if o != w and train.genuine(o)]
    if not others:
        raise InsufficientSamples(f"no other writer with genuine samples to pair with {w}")
    gen = train.genuine(w)
    a, p = rng.choice(len(gen), size=2, replace=False)
    forged = train.forged(w)
    n_iw = forged[rng.integers(len(forged))]
    o = others[rng.integers(len(others))]
    n_cw = train.genuine(o)[rng.integers(len(train.genuine(o)))]
    return QuadrupletSpec(gen[a], gen[p], n_iw, n_cw)


def make_pretrain_batch(ws: WriterSet, batch_size: int, rng, size: int = pp.IMAGE_SIZE,
                        cache_dir=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random batch (without replacement) of preprocessed images and their patch grids."""
    rng = _rng(rng)
    records = ws.records()
    if not records:
        raise InsufficientSamples("empty corpus")
    idx = rng.choice(len(records), size=min(batch_size, len(records)), replace=False)
    out = []
    for i in idx:
        img = _preprocess_record(ws, records[i], size, cache_dir)
        out.append((img, pp.patchify(img, size)))
    return out


def _preprocess_record(ws: WriterSet, rec: SampleRecord, size: int, cache_dir=None) -> np.ndarray:
    try:
        return pp.preprocess_file(ws.abspath(rec), size, cache_dir, rec.path)
    except (SurdsError, OSError) as e:
        raise DataError(f"failed to preprocess {rec.path} (writer {rec.writer_id}): {e}") from e


class ProcessedCorpus:
    """Every record of a WriterSet preprocessed once and kept in memory."""

    def __init__(self, ws: WriterSet, size: int = pp.IMAGE_SIZE, workers: int = 1, cache_dir=None):
        self.ws = ws
        self.size = size
        self.records = ws.records()
        fn = lambda r: _preprocess_record(ws, r, size, cache_dir)  # noqa: E731
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                imgs = list(ex.map(fn, self.records))  # map keeps input order
        else:
            imgs = [fn(r) for r in self.records]
        self.images = np.stack(imgs) if imgs else np.zeros((0, size, size, 3), np.float32)
        self.index = {r.sample_id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def get(self, sample_ids) -> np.ndarray:
        return self.images[[self.index[s] for s in sample_ids]]


# ---------------------------------------------------------------- synthetic corpus

CANVAS = (96, 192)  # (height, width)


@dataclass
class SyntheticParams:
    genuine_jitter: float = 0.012   # control-point noise, fraction of canvas
    forgery_jitter: float = 0.1
    stroke_width: int = 4
    width_jitter_forged: int = 1
    forgery_extra_width: int = 2    # heavier pen on forgeries
    forgery_tremor: float = 0.004    # per-point wobble of forged strokes, fraction of canvas


def random_template(rng, n_strokes: int | None = None) -> list[np.ndarray]:
    """A writer's signature template: strokes of chained cubic Beziers,
    each given as a ``(3k+1, 2)`` array of control points in [0, 1]^2 (x, y)."""
    rng = _rng(rng)
    n_strokes = n_strokes or int(rng.integers(2, 4))
    strokes = []
    x = 0.08
    for _ in range(n_strokes):
        segs = int(rng.integers(2, 4))
        span = rng.uniform(0.2, 0.35)
        xs = np.sort(rng.uniform(x, min(x + span, 0.95), size=3 * segs + 1))
        xs += rng.normal(0, 0.04, size=xs.shape)
        ys = rng.uniform(0.15, 0.85, size=3 * segs + 1)
        strokes.append(np.clip(np.stack([xs, ys], axis=1), 0.03, 0.97))
        x = min(x + span * 0.8, 0.7)
    return strokes


def _bezier_points(ctrl: np.ndarray, per_seg: int = 24) -> np.ndarray:
    t = np.linspace(0.0, 1.0, per_seg)[:, None]
    pts = []
    for s in range(0, len(ctrl) - 1, 3):
        p0, p1, p2, p3 = ctrl[s:s + 4]
        pts.append((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3)
    return np.concatenate(pts)


def render(strokes, stroke_width: int = 3, canvas=CANVAS, tremor: float = 0.0, rng=None) -> np.ndarray:
    """Rasterize strokes as black ink on white; uint8 array of shape ``canvas``.

    ``tremor > 0`` adds independent Gaussian wobble to every sampled point of
    the curve (a shaky, slowly drawn line).
    """
    h, w = canvas
    im = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(im)
    for ctrl in strokes:
        pts = _bezier_points(np.asarray(ctrl))
        if tremor > 0:
            pts = np.clip(pts + _rng(rng).normal(0.0, tremor, size=pts.shape), 0.0, 1.0)
        pts = pts * [w - 1, h - 1]
        draw.line([tuple(p) for p in pts.round(2)], fill=0, width=stroke_width, joint="curve")
    return np.asarray(im)


def perturb(strokes, sigma: float, rng) -> list[np.ndarray]:
    rng = _rng(rng)
    return [np.clip(s + rng.normal(0.0, sigma, size=s.shape), 0.0, 1.0) for s in strokes]


def generate_synthetic_corpus(num_writers: int, per_writer: int, out_dir, rng=0,
                              params: SyntheticParams | None = None,
                              forged_per_writer: int | None = None) -> Path:
    """Render a toy signature corpus and its manifest.

    Each writer gets a random template; genuine samples are small jitters of
    it and skilled forgeries larger distortions. Writes
    ``out_dir/<writer>/{g,f}_NN.png`` and ``out_dir/manifest.csv``; the clean
    template of each writer goes to ``out_dir/<writer>/template.png`` (not
    listed in the manifest).
    """
    if num_writers < 2:
        raise ValueError("num_writers must be >= 2")
    params = params or SyntheticParams()
    rng = _rng(rng)
    n_forged = per_writer if forged_per_writer is None else forged_per_writer
    out_dir = Path(out_dir)
    records = []
    for wi in range(num_writers):
        wid = f"w{wi:03d}"
        (out_dir / wid).mkdir(parents=True, exist_ok=True)
        template = random_template(rng)
        Image.fromarray(render(template, params.stroke_width)).save(out_dir / wid / "template.png", format="PNG")
        for label, n, sigma in (("genuine", per_writer, params.genuine_jitter),
                                ("forged", n_forged, params.forgery_jitter)):
            for i in range(n):
                width, tremor = params.stroke_width, 0.0
                if label == "forged":
                    width += params.forgery_extra_width
                    width += int(rng.integers(-params.width_jitter_forged, params.width_jitter_forged + 1))
                    tremor = params.forgery_tremor
                img = render(perturb(template, sigma, rng), max(width, 1), tremor=tremor, rng=rng)
                rel = f"{wid}/{label[0]}_{i:02d}.png"
                Image.fromarray(img).save(out_dir / rel, format="PNG")
                records.append(SampleRecord(rel, wid, label, i))
    return write_manifest(records, out_dir / "manifest.csv")
