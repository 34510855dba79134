"""Reference-based verification protocol and FAR/FRR threshold sweep.

For every test writer, ``k`` genuine signatures are drawn as references;
every other sample of that writer is a query scored by its mean Euclidean
distance to the references. A query is accepted as genuine when its score
is ``<= tau``. Scores are pooled over writers and tau is swept to maximize
balanced accuracy ``(TPR + TNR) / 2``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .data import ProcessedCorpus, SampleRecord, WriterSet
from .errors import DegenerateInput, InsufficientSamples, MissingEmbedding
from .model import SurdsNet, to_tensor

DEFAULT_STEP = 5e-5
_CHUNK = 1 << 20


@dataclass(frozen=True)
class ScoredQuery:
    query_id: str
    true_label: str
    score: float
    writer_id: str = ""


@dataclass
class VerificationReport:
    best_threshold: float
    accuracy: float
    far: float
    frr: float
    n_genuine: int
    n_forged: int
    step: float | None
    genuine_scores: list[float] = field(default_factory=list)
    forged_scores: list[float] = field(default_factory=list)
    per_writer: dict = field(default_factory=dict)
    seed: int | None = None
    k: int | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


# ---------------------------------------------------------------- embeddings

@torch.no_grad()
def embed_corpus(corpus, model: SurdsNet, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Embeddings of every sample with the model in inference mode."""
    if isinstance(model, (str, Path)):
        from .checkpoint import load_checkpoint
        model, _ = load_checkpoint(model)
    if isinstance(corpus, WriterSet):
        corpus = ProcessedCorpus(corpus, model.config.image_size)
    was_training = model.training
    model.eval()
    out = {}
    try:
        for start in range(0, len(corpus), batch_size):
            recs = corpus.records[start:start + batch_size]
            z = model.embed(to_tensor(corpus.images[start:start + len(recs)])).numpy()
            out.update({r.sample_id: z[i].copy() for i, r in enumerate(recs)})
    finally:
        model.train(was_training)
    return out


def write_embeddings(embeddings: dict[str, np.ndarray], path) -> Path:
    """Binary cache: per record a uint32-LE byte length, the UTF-8 sample id,
    then ``dim`` float32-LE values. ``<path>.index`` lists ``dim`` on its first
    line, then one ``sample_id<TAB>byte_offset`` line per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = {len(v) for v in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"mixed embedding sizes {sorted(dims)}")
    dim = dims.pop() if dims else 0
    index = [f"dim\t{dim}"]
    with path.open("wb") as f:
        for sid, z in embeddings.items():
            index.append(f"{sid}\t{f.tell()}")
            b = sid.encode("utf-8")
            f.write(struct.pack("<I", len(b)) + b)
            f.write(np.asarray(z, dtype="<f4").tobytes())
    Path(str(path) + ".index").write_text("\n".join(index) + "\n", encoding="utf-8")
    return path


def read_embeddings(path) -> dict[str, np.ndarray]:
    path = Path(path)
    first = Path(str(path) + ".index").read_text(encoding="utf-8").split("\n", 1)[0]
    dim = int(first.split("\t")[1])
    raw = path.read_bytes()
    out, pos = {}, 0
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        sid = raw[pos:pos + n].decode("utf-8")
        pos += n
        out[sid] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += 4 * dim
    return out


# ---------------------------------------------------------------- protocol

def pair_distance(zi, zj) -> float:
    return float(np.linalg.norm(np.asarray(zi, np.float64) - np.asarray(zj, np.float64)))


def select_references(genuine: list[SampleRecord], forged: list[SampleRecord], k: int = 8,
                      rng=None) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Draw ``k`` genuine references; queries are the other genuine plus all forged."""
    if len(genuine) < k + 1:
        wid = genuine[0].writer_id if genuine else (forged[0].writer_id if forged else "?")
        raise InsufficientSamples(f"writer {wid}: {len(genuine)} genuine samples, need at least {k + 1} for k={k}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    chosen = set(rng.choice(len(genuine), size=k, replace=False).tolist())
    refs = [g for i, g in enumerate(genuine) if i in chosen]
    queries = [g for i, g in enumerate(genuine) if i not in chosen] + list(forged)
    return refs, queries


def score_queries(refs, queries, embeddings) -> list[ScoredQuery]:
    """Score each query by its mean distance to the references."""
    def get(rec):
        try:
            return embeddings[rec.sample_id]
        except KeyError:
            raise MissingEmbedding(f"no embedding for {rec.sample_id}") from None

    ref_z = [get(r) for r in refs]
    out = []
    for q in queries:
        zq = get(q)
        score = sum(pair_distance(zq, zr) for zr in ref_z) / len(ref_z)
        out.append(ScoredQuery(q.sample_id, q.label, score, q.writer_id))
    return out


# ---------------------------------------------------------------- metrics

def _split(scored) -> tuple[np.ndarray, np.ndarray]:
    g = np.sort(np.array([s.score for s in scored if s.true_label == "genuine"], dtype=np.float64))
    f = np.sort(np.array([s.score for s in scored if s.true_label == "forged"], dtype=np.float64))
    if len(g) == 0 or len(f) == 0:
        raise DegenerateInput(f"need both classes, got {len(g)} genuine and {len(f)} forged queries")
    return g, f


def confusion_counts(scored, tau: float) -> tuple[int, int, int, int]:
    """``(TP, TN, FP, FN)`` with acceptance iff ``score <= tau``."""
    g, f = _split(scored)
    tp = int(np.count_nonzero(g <= tau))
    fp = int(np.count_nonzero(f <= tau))
    return tp, len(f) - fp, fp, len(g) - tp


def confusion_at(scored, tau: float) -> tuple[Fraction, Fraction, Fraction, Fraction]:
    """``(TPR, TNR, FPR, FNR)`` as exact fractions."""
    tp, tn, fp, fn = confusion_counts(scored, tau)
    n_g, n_f = tp + fn, tn + fp
    return Fraction(tp, n_g), Fraction(tn, n_f), Fraction(fp, n_f), Fraction(fn, n_g)


def _best(g: np.ndarray, f: np.ndarray, tau_chunks) -> tuple[int, int, int, float]:
    """Index of the first tau maximizing balanced accuracy, scanning in chunks.

    Compares ``TP*nF + TN*nG`` (twice the balanced accuracy times nG*nF), an
    exact integer, so ties resolve to the smallest tau.
    """
    n_g, n_f = len(g), len(f)
    best_val, best_tau, best_tp, best_fp = -1, 0.0, 0, 0
    for t in tau_chunks:
        tp = np.searchsorted(g, t, side="right").astype(np.int64)
        fp = np.searchsorted(f, t, side="right").astype(np.int64)
        val = tp * n_f + (n_f - fp) * n_g
        i = int(np.argmax(val))
        if val[i] > best_val:
            best_val, best_tau, best_tp, best_fp = int(val[i]), float(t[i]), int(tp[i]), int(fp[i])
    return best_tp, best_fp, best_val, best_tau


def threshold_grid(lo: float, hi: float, step: float, chunk: int = _CHUNK):
    """Yield ``lo, lo + step, ...`` up to ``hi`` in chunks; ``hi`` is always included."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(np.floor((hi - lo) / step)) + 1
    last = None
    for start in range(0, n, chunk):
        taus = lo + step * np.arange(start, min(start + chunk, n), dtype=np.float64)
        taus = taus[taus <= hi]
        if len(taus):
            last = taus[-1]
            yield taus
    if last is None or last < hi:
        yield np.array([hi])


def _report(scored, g, f, tp, fp, tau, step) -> VerificationReport:
    n_g, n_f = len(g), len(f)
    acc = (tp / n_g + (n_f - fp) / n_f) / 2
    per_writer = {}
    for w in sorted({s.writer_id for s in scored}):
        sub = [s for s in scored if s.writer_id == w]
        ng = sum(s.true_label == "genuine" for s in sub)
        nf = len(sub) - ng
        fa = sum(s.true_label == "forged" and s.score <= tau for s in sub)
        fr = sum(s.true_label == "genuine" and s.score > tau for s in sub)
        per_writer[w] = {"n_genuine": ng, "n_forged": nf, "false_accepts": fa, "false_rejects": fr,
                         "far": fa / nf if nf else None, "frr": fr / ng if ng else None}
    return VerificationReport(
        best_threshold=tau, accuracy=acc, far=fp / n_f, frr=(n_g - tp) / n_g,
        n_genuine=n_g, n_forged=n_f, step=step,
        genuine_scores=g.tolist(), forged_scores=f.tolist(),  # sorted: order-free report
        per_writer=per_writer)


def sweep_thresholds(scored: list[ScoredQuery], step: float = DEFAULT_STEP) -> VerificationReport:
    """Fixed-step scan of tau from the smallest to the largest score."""
    g, f = _split(scored)
    lo, hi = min(g[0], f[0]), max(g[-1], f[-1])
    tp, fp, _, tau = _best(g, f, threshold_grid(lo, hi, step))
    return _report(scored, g, f, tp, fp, tau, step)


def sweep_exact(scored: list[ScoredQuery]) -> VerificationReport:
    """Exact optimum: tau ranges over the distinct scores (each stands for the
    whole interval up to the next distinct score)."""
    g, f = _split(scored)
    tp, fp, _, tau = _best(g, f, [np.unique(np.concatenate([g, f]))])
    return _report(scored, g, f, tp, fp, tau, None)


def score_writers(ws: WriterSet, embeddings, k: int = 8, seed: int = 0) -> list[ScoredQuery]:
    """Reference selection and scoring for every writer, in sorted writer order."""
    rng = np.random.default_rng(seed)
    scored = []
    for w in ws.writer_ids:
        refs, queries = select_references(ws.genuine(w), ws.forged(w), k, rng)
        scored += score_queries(refs, queries, embeddings)
    return scored


def evaluate(model: SurdsNet, corpus, k: int = 8, seed: int = 0, step: float | None = DEFAULT_STEP,
             embeddings: dict | None = None) -> VerificationReport:
    """Full protocol on held-out writers. ``step=None`` uses the exact sweep."""
    if isinstance(corpus, WriterSet):
        corpus = ProcessedCorpus(corpus, model.config.image_size)
    if embeddings is None:
        embeddings = embed_corpus(corpus, model)
    scored = score_writers(corpus.ws, embeddings, k, seed)
    rep = sweep_exact(scored) if step is None else sweep_thresholds(scored, step)
    rep.seed, rep.k = seed, k
    return rep
