"""Direction statistics, ratio MSE and ratio histograms.

Samples are split by advantage sign. Samples with a zero advantage are
neutral and belong to neither class; samples with ``w == 1`` and a nonzero
advantage are neutral too but still count towards their class size.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .surrogate import Direction, direction_codes

__all__ = [
    "DirectionStats",
    "Histogram",
    "direction_stats",
    "mse_from_one",
    "histogram",
    "export",
    "load_export",
    "SCHEMA_PATH",
    "STATS_CSV_HEADER",
    "HISTOGRAM_CSV_HEADER",
]

SCHEMA_PATH = Path(__file__).parent / "schemas" / "diagnostics.schema.json"

STATS_CSV_HEADER = (
    "n_pos,n_neg,wrong_pos,wrong_neg,strict_pos,strict_neg,"
    "frac_wrong_pos,frac_wrong_neg,frac_strict_pos,frac_strict_neg,mse_pos,mse_neg"
)
HISTOGRAM_CSV_HEADER = "sign,bin_lo,bin_hi,count"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def _ratio(num, den):
    return num / den if den else None


@dataclass
class DirectionStats:
    """Counts of wrong and strictly-wrong ratios per advantage sign.

    Squared deviations from 1 are kept as sums so that shards merge by plain
    addition; ``mse_pos`` and ``mse_neg`` are ``None`` for an empty class.
    """

    n_pos: int = 0
    n_neg: int = 0
    wrong_pos: int = 0
    wrong_neg: int = 0
    strict_pos: int = 0
    strict_neg: int = 0
    sse_pos: float = 0.0
    sse_neg: float = 0.0

    @property
    def mse_pos(self):
        return _ratio(self.sse_pos, self.n_pos)

    @property
    def mse_neg(self):
        return _ratio(self.sse_neg, self.n_neg)

    @property
    def frac_wrong_pos(self):
        return _ratio(self.wrong_pos, self.n_pos) or 0.0

    @property
    def frac_wrong_neg(self):
        return _ratio(self.wrong_neg, self.n_neg) or 0.0

    @property
    def frac_strict_pos(self):
        return _ratio(self.strict_pos, self.n_pos) or 0.0

    @property
    def frac_strict_neg(self):
        return _ratio(self.strict_neg, self.n_neg) or 0.0

    def __add__(self, other: "DirectionStats") -> "DirectionStats":
        return DirectionStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def summary(self) -> dict:
        return {
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "wrong_pos": self.wrong_pos,
            "wrong_neg": self.wrong_neg,
            "strict_pos": self.strict_pos,
            "strict_neg": self.strict_neg,
            "frac_wrong_pos": self.frac_wrong_pos,
            "frac_wrong_neg": self.frac_wrong_neg,
            "frac_strict_pos": self.frac_strict_pos,
            "frac_strict_neg": self.frac_strict_neg,
            "mse_pos": self.mse_pos,
            "mse_neg": self.mse_neg,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["sse_pos"], d["sse_neg"] = self.sse_pos, self.sse_neg
        return d

    @classmethod
    def from_dict(cls, d) -> "DirectionStats":
        sse_pos = d.get("sse_pos")
        sse_neg = d.get("sse_neg")
        if sse_pos is None:
            sse_pos = (d["mse_pos"] or 0.0) * d["n_pos"]
        if sse_neg is None:
            sse_neg = (d["mse_neg"] or 0.0) * d["n_neg"]
        return cls(int(d["n_pos"]), int(d["n_neg"]), int(d["wrong_pos"]), int(d["wrong_neg"]),
                   int(d["strict_pos"]), int(d["strict_neg"]), float(sse_pos), float(sse_neg))


def _aligned(ratios, advantages):
    w = np.asarray(ratios, dtype=float).ravel()
    A = np.asarray(advantages, dtype=float).ravel()
    if w.shape != A.shape:
        raise ValueError(f"ratios ({w.size}) and advantages ({A.size}) are not aligned")
    return w, A


def direction_stats(ratios, advantages, beta: float) -> DirectionStats:
    w, A = _aligned(ratios, advantages)
    codes = direction_codes(w, A, beta)
    pos, neg = A > 0, A < 0
    wrong = codes >= Direction.WRONG
    strict = codes == Direction.STRICT_WRONG
    sq = (w - 1.0) ** 2
    return DirectionStats(
        n_pos=int(pos.sum()),
        n_neg=int(neg.sum()),
        wrong_pos=int((wrong & pos).sum()),
        wrong_neg=int((wrong & neg).sum()),
        strict_pos=int((strict & pos).sum()),
        strict_neg=int((strict & neg).sum()),
        sse_pos=float(sq[pos].sum()),
        sse_neg=float(sq[neg].sum()),
    )


def mse_from_one(ratios, advantages):
    """Mean of ``(w - 1)**2`` over positive and negative advantages separately."""
    w, A = _aligned(ratios, advantages)
    pos, neg = A > 0, A < 0
    mse_pos = float(((w[pos] - 1.0) ** 2).mean()) if pos.any() else None
    mse_neg = float(((w[neg] - 1.0) ** 2).mean()) if neg.any() else None
    return mse_pos, mse_neg


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    split: str

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if self.counts.shape != (self.bin_edges.size - 1,):
            raise ValueError("need one count per bin")

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.bin_edges, other.bin_edges) or self.split != other.split:
            raise ValueError("histograms have different binning")
        return Histogram(self.bin_edges, self.counts + other.counts, self.split)


def _bin_counts(w, edges):
    n_bins = edges.size - 1
    idx = np.clip(np.searchsorted(edges, w, side="right") - 1, 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


def histogram(ratios, advantages, n_bins: int = 40, range=(0.0, 2.0)):
    """Ratio histograms for positive and negative advantages.

    Bins are uniform and half-open ``[lo, hi)`` except the last, which is
    closed. Ratios outside ``range`` fall into the nearest edge bin.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = range
    if not lo < hi:
        raise ValueError("histogram range must satisfy lower < upper")
    w, A = _aligned(ratios, advantages)
    edges = np.linspace(lo, hi, n_bins + 1)
    return (
        Histogram(edges, _bin_counts(w[A > 0], edges), "pos"),
        Histogram(edges, _bin_counts(w[A < 0], edges), "neg"),
    )


def export(obj, path, format: str | None = None) -> Path:
    """Write a ``DirectionStats`` or a ``(pos, neg)`` histogram pair to CSV or JSON."""
    path = Path(path)
    format = format or path.suffix.lstrip(".")
    if format not in ("csv", "json"):
        raise ValueError(f"unsupported export format {format!r}")
    if isinstance(obj, DirectionStats):
        body = obj.summary()
        if format == "json":
            text = json.dumps({"kind": "direction_stats", **obj.to_dict()}, indent=2)
        else:
            text = STATS_CSV_HEADER + "\n" + ",".join(_fmt(body[k]) for k in STATS_CSV_HEADER.split(",")) + "\n"
    else:
        pos, neg = obj
        if format == "json":
            text = json.dumps({
                "kind": "histogram",
                "bin_edges": pos.bin_edges.tolist(),
                "counts_pos": pos.counts.tolist(),
                "counts_neg": neg.counts.tolist(),
            }, indent=2)
        else:
            rows = [HISTOGRAM_CSV_HEADER]
            for h in (pos, neg):
                for k, c in enumerate(h.counts):
                    rows.append(f"{h.split},{_fmt(h.bin_edges[k])},{_fmt(h.bin_edges[k + 1])},{int(c)}")
            text = "\n".join(rows) + "\n"
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def load_export(path):
    """Inverse of :func:`export`."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc["kind"] == "direction_stats":
            return DirectionStats.from_dict(doc)
        edges = doc["bin_edges"]
        return Histogram(edges, doc["counts_pos"], "pos"), Histogram(edges, doc["counts_neg"], "neg")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if "sign" in rows[0]:
        out = {}
        for sign in ("pos", "neg"):
            sub = [r for r in rows if r["sign"] == sign]
            edges = [float(r["bin_lo"]) for r in sub] + [float(sub[-1]["bin_hi"])]
            out[sign] = Histogram(edges, [int(r["count"]) for r in sub], sign)
        return out["pos"], out["neg"]
    r = rows[0]
    d = {k: (None if v == "" else float(v)) for k, v in r.items()}
    return DirectionStats.from_dict(d)
