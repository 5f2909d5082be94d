"""Binned spectra, MC background expectations, CSV I/O and toy generation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

SPECTRUM_HEADER = ("bin_low_keV", "bin_high_keV", "counts")
BACKGROUND_HEADER = ("bin_low_keV", "bin_high_keV", "expected")
EDGE_TOLERANCE_KEV = 1e-9
_INVERSION_LIMIT = 30.0


@dataclass(frozen=True)
class Binning:
    edges: np.ndarray

    def __post_init__(self):
        edges = np.array(self.edges, dtype=float)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or len(edges) < 2:
            raise ValidationError("binning needs at least two edges")
        if not np.all(np.isfinite(edges)):
            raise ValidationError("bin edges must be finite")
        bad = np.nonzero(np.diff(edges) <= 0)[0]
        if len(bad):
            i = int(bad[0])
            raise ValidationError(f"bin edges not strictly increasing at edge {i + 1} ({edges[i]} -> {edges[i + 1]})")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def lows(self):
        return self.edges[:-1]

    @property
    def highs(self):
        return self.edges[1:]


@dataclass(frozen=True)
class BinnedSpectrum:
    binning: Binning
    counts: np.ndarray
    exposure_seconds: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.shape != (self.binning.n_bins,):
            raise ValidationError(f"{len(counts)} counts for {self.binning.n_bins} bins")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise ValidationError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValidationError(f"negative count in bin {int(np.argmax(counts < 0))}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class BackgroundModel:
    binning: Binning
    expected: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = np.array(self.expected, dtype=float)
        if expected.shape != (self.binning.n_bins,):
            raise ValidationError(f"{len(expected)} expectations for {self.binning.n_bins} bins")
        if not np.all(np.isfinite(expected)):
            raise ValidationError("background expectations must be finite")
        if np.any(expected < 0):
            raise ValidationError(f"negative background in bin {int(np.argmax(expected < 0))}")
        expected.setflags(write=False)
        object.__setattr__(self, "expected", expected)


@dataclass(frozen=True)
class Mismatch:
    index: int
    message: str


# ------------------------------------------------------------------ reading


def _read_table(path, header, value_parser):
    path = Path(path)
    metadata: dict[str, str] = {}
    rows = []
    seen_header = False
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                key, sep, value = stripped[1:].partition(":")
                if sep:
                    metadata[key.strip()] = value.strip()
                continue
            cells = [c.strip() for c in next(csv.reader([stripped]))]
            if not seen_header:
                if tuple(cells) != header:
                    raise ParseError(f"{path}:{lineno}: expected header {','.join(header)}")
                seen_header = True
                continue
            if len(cells) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(cells)}")
            try:
                lo, hi = float(cells[0]), float(cells[1])
                value = value_parser(cells[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed row {stripped!r}") from None
            if any(math.isnan(x) for x in (lo, hi, float(value))):
                raise ValidationError(f"{path}:{lineno}: NaN value")
            rows.append((lineno, lo, hi, value))
    if not seen_header:
        raise ParseError(f"{path}: missing header {','.join(header)}")
    if not rows:
        raise ValidationError(f"{path}: no bins")
    for lineno, lo, hi, value in rows:
        if not lo < hi:
            raise ValidationError(f"{path}:{lineno}: bin [{lo}, {hi}] has zero or negative width")
        if value < 0:
            raise ValidationError(f"{path}:{lineno}: negative value {value}")
    for (_, _, prev_hi, _), (lineno, lo, _, _) in zip(rows, rows[1:]):
        if lo < prev_hi - EDGE_TOLERANCE_KEV:
            raise ValidationError(f"{path}:{lineno}: bin overlaps previous bin")
        if lo > prev_hi + EDGE_TOLERANCE_KEV:
            raise ValidationError(f"{path}:{lineno}: gap after previous bin")
    edges = [rows[0][1]] + [r[2] for r in rows]
    return Binning(np.array(edges)), [r[3] for r in rows], metadata


def _parse_count(text):
    value = float(text)
    if value != int(value):
        raise ValueError(text)
    return int(value)


def load_spectrum(path) -> BinnedSpectrum:
    binning, counts, metadata = _read_table(path, SPECTRUM_HEADER, _parse_count)
    exposure = metadata.get("exposure_seconds")
    try:
        exposure = float(exposure) if exposure is not None else None
    except ValueError:
        raise ParseError(f"{path}: malformed exposure_seconds {exposure!r}") from None
    return BinnedSpectrum(binning, np.array(counts, dtype=np.int64), exposure, metadata)


def load_background(path) -> BackgroundModel:
    binning, expected, metadata = _read_table(path, BACKGROUND_HEADER, float)
    return BackgroundModel(binning, np.array(expected), metadata)


# ------------------------------------------------------------------ writing


def _write_table(path, header, binning, values, metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for key in sorted(metadata):
            fh.write(f"# {key}: {metadata[key]}\n")
        fh.write(",".join(header) + "\n")
        for lo, hi, v in zip(binning.lows, binning.highs, values):
            fh.write(f"{float(lo)!r},{float(hi)!r},{v}\n")


def save_spectrum(spectrum: BinnedSpectrum, path):
    meta = dict(spectrum.metadata)
    if spectrum.exposure_seconds is not None:
        meta["exposure_seconds"] = repr(float(spectrum.exposure_seconds))
    _write_table(path, SPECTRUM_HEADER, spectrum.binning, [int(c) for c in spectrum.counts], meta)


def save_background(background: BackgroundModel, path):
    _write_table(path, BACKGROUND_HEADER, background.binning,
                 [repr(float(x)) for x in background.expected], background.metadata)


def check_compatible(spectrum: BinnedSpectrum, background: BackgroundModel) -> Mismatch | None:
    """None when both share the binning edge by edge, else the first mismatch."""
    a, b = spectrum.binning.edges, background.binning.edges
    for i in range(min(len(a), len(b))):
        if abs(a[i] - b[i]) > EDGE_TOLERANCE_KEV:
            return Mismatch(i, f"edge {i} differs: spectrum {a[i]!r} keV, background {b[i]!r} keV")
    if len(a) != len(b):
        i = min(len(a), len(b)) - 1
        return Mismatch(i, f"bin count differs: spectrum {len(a) - 1}, background {len(b) - 1} (first unmatched bin {i})")
    return None


# ------------------------------------------------------------ toy spectra


def poisson_draw(mean: float, rng: np.random.Generator) -> int:
    """One Poisson variate from the uniforms of ``rng``.

    Inversion by sequential search below mean 30, otherwise transformed
    rejection with squeeze (PTRS).
    """
    if mean < 0 or not math.isfinite(mean):
        raise ValidationError(f"invalid Poisson mean {mean}")
    if mean == 0.0:
        return 0
    if mean < _INVERSION_LIMIT:
        u = rng.random()
        k = 0
        p = math.exp(-mean)
        cdf = p
        while u > cdf:
            k += 1
            p *= mean / k
            cdf += p
            if p == 0.0 and k > mean:
                break
        return k
    slam = math.sqrt(mean)
    loglam = math.log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    while True:
        U = rng.random() - 0.5
        V = rng.random()
        us = 0.5 - abs(U)
        k = math.floor((2 * a / us + b) * U + mean + 0.43)
        if us >= 0.07 and V <= vr:
            return k
        if k < 0 or (us < 0.013 and V > us):
            continue
        if math.log(V) + math.log(inv_alpha) - math.log(a / (us * us) + b) <= -mean + k * loglam - math.lgamma(k + 1):
            return k


def bin_generator(seed, bin_index: int) -> np.random.Generator:
    """Counter-based stream for one bin.

    The Philox key comes from ``seed`` (an int or SeedSequence); the bin index
    occupies the top word of the 256-bit counter, so each bin reads a disjoint
    block regardless of the order bins are drawn in.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    key = ss.generate_state(2, np.uint64)
    counter = np.array([0, 0, 0, bin_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def toy_seed(seed: int, toy_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(toy_index,))


def simulate_toy(background: BackgroundModel, y_true: float, signal_column, seed) -> BinnedSpectrum:
    """Draw counts_i ~ Poisson(b_i + y_true * s_i)."""
    s = np.asarray(signal_column, dtype=float)
    if s.shape != background.expected.shape:
        raise ValidationError("signal column length does not match background")
    if y_true < 0:
        raise ValidationError("y_true must be >= 0")
    means = background.expected + y_true * s
    counts = np.array([poisson_draw(float(m), bin_generator(seed, i)) for i, m in enumerate(means)], dtype=np.int64)
    seed_repr = seed if isinstance(seed, int) else f"{seed.entropy}:{'/'.join(map(str, seed.spawn_key))}"
    meta = {"source": "toy", "seed": str(seed_repr), "y_true": repr(float(y_true))}
    return BinnedSpectrum(background.binning, counts, None, meta)
