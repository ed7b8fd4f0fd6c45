"""Turn raw multichannel recordings into standardized 32 x 512 segments at 256 Hz."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal, stats

log = logging.getLogger(__name__)

TARGET_FS = 256
SEGMENT_SECONDS = 2.0
SUPPORTED_FS = (256, 500, 512)
LABELS = ("HC", "PD")

BIOSEMI32 = (
    "Fp1", "AF3", "F7", "F3", "FC1", "FC5", "T7", "C3", "CP1", "CP5", "P7", "P3",
    "Pz", "PO3", "O1", "Oz", "O2", "PO4", "P4", "P8", "CP6", "CP2", "C4", "T8",
    "FC6", "FC2", "F4", "F8", "AF4", "Fp2", "Fz", "Cz",
)


class MontageError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"recording lacks required channels: {', '.join(self.missing)}")


@dataclass
class Recording:
    subject_id: str
    label: str                      # PD | HC
    medication: str                 # on | off | n/a
    fs_hz: float
    channel_labels: tuple[str, ...]
    samples: np.ndarray             # channels x time, microvolts
    missing: tuple[str, ...] = ()   # canonical channels awaiting zero-fill
    zero_filled: tuple[str, ...] = ()

    def __post_init__(self):
        self.channel_labels = tuple(self.channel_labels)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channel_labels):
            raise ValueError(f"samples shape {self.samples.shape} does not match "
                             f"{len(self.channel_labels)} channel labels")
        if len(set(self.channel_labels)) != len(self.channel_labels):
            raise ValueError("channel labels must be unique")
        if self.label not in LABELS:
            raise ValueError(f"label must be PD or HC, got {self.label!r}")
        if self.medication not in ("on", "off", "n/a"):
            raise ValueError(f"medication must be on, off or n/a, got {self.medication!r}")
        if not self.fs_hz > 0:
            raise ValueError("fs_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs_hz


@dataclass(frozen=True)
class MontageSpec:
    name: str
    canonical_labels: tuple[str, ...]
    zero_fill_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.canonical_labels) != 32 or len(set(self.canonical_labels)) != 32:
            raise ValueError("a montage names exactly 32 distinct channels")
        if not set(self.zero_fill_labels) <= set(self.canonical_labels):
            raise ValueError("zero-fill labels must be canonical labels")


MONTAGES = {
    "biosemi32": MontageSpec("biosemi32", BIOSEMI32, ("Pz",)),
    "biosemi32-strict": MontageSpec("biosemi32-strict", BIOSEMI32, ()),
}


def get_montage(name: str) -> MontageSpec:
    try:
        return MONTAGES[name]
    except KeyError:
        raise ValueError(f"unknown montage {name!r}; known: {sorted(MONTAGES)}") from None


@dataclass
class SegmentBatch:
    data: np.ndarray                # N x 32 x 512
    labels: np.ndarray              # N, 1 = PD
    subject_ids: np.ndarray         # N strings
    medication: np.ndarray          # N strings

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.medication = np.asarray(self.medication, dtype=str)
        n = len(self.data)
        if self.data.ndim != 3 or self.data.shape[1:] != (32, 512):
            raise ValueError(f"segments must be N x 32 x 512, got {self.data.shape}")
        if not (len(self.labels) == len(self.subject_ids) == len(self.medication) == n):
            raise ValueError("per-segment metadata length mismatch")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def subjects(self) -> list[str]:
        """The subject table: unique ids in first-appearance order."""
        seen: dict[str, None] = {}
        for s in self.subject_ids:
            seen.setdefault(str(s), None)
        return list(seen)

    def subject_labels(self) -> dict[str, int]:
        return {str(s): int(l) for s, l in zip(self.subject_ids, self.labels)}

    def subset(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentBatch(self.data[idx], self.labels[idx], self.subject_ids[idx], self.medication[idx])

    @classmethod
    def concat(cls, batches: list["SegmentBatch"]) -> "SegmentBatch":
        if not batches:
            return cls(np.zeros((0, 32, 512)), [], [], [])
        return cls(np.concatenate([b.data for b in batches]),
                   np.concatenate([b.labels for b in batches]),
                   np.concatenate([b.subject_ids for b in batches]),
                   np.concatenate([b.medication for b in batches]))


# ----------------------------------------------------------------------------
# montage


def select_channels(rec: Recording, montage: MontageSpec) -> Recording:
    """Keep canonical channels in canonical order; record zero-fillable gaps in ``missing``."""
    index = {lab: i for i, lab in enumerate(rec.channel_labels)}
    absent = [lab for lab in montage.canonical_labels if lab not in index]
    required = [lab for lab in absent if lab not in montage.zero_fill_labels]
    if required:
        raise MontageError(required)
    keep = [lab for lab in montage.canonical_labels if lab in index]
    rows = rec.samples[[index[lab] for lab in keep]]
    return replace(rec, channel_labels=tuple(keep), samples=rows, missing=tuple(absent))


def zero_fill_missing(rec: Recording, montage: MontageSpec) -> Recording:
    """Insert exact-zero rows for canonical channels the recording lacks."""
    index = {lab: i for i, lab in enumerate(rec.channel_labels)}
    absent = [lab for lab in montage.canonical_labels if lab not in index]
    bad = [lab for lab in absent if lab not in montage.zero_fill_labels]
    if bad:
        raise MontageError(bad)
    if not absent and tuple(rec.channel_labels) == montage.canonical_labels:
        return rec
    out = np.zeros((32, rec.n_samples))
    for i, lab in enumerate(montage.canonical_labels):
        if lab in index:
            out[i] = rec.samples[index[lab]]
    return replace(rec, channel_labels=montage.canonical_labels, samples=out, missing=(),
                   zero_filled=tuple(dict.fromkeys(rec.zero_filled + tuple(absent))))


# ----------------------------------------------------------------------------
# filtering


def resample(rec: Recording, target_hz: float = TARGET_FS, kaiser_beta: float = 8.0) -> Recording:
    """Polyphase rational downsampling with a Kaiser-windowed anti-alias filter."""
    if target_hz > rec.fs_hz:
        raise ValueError(f"upsampling {rec.fs_hz} Hz -> {target_hz} Hz is not supported")
    if target_hz == rec.fs_hz:
        return rec
    ratio = Fraction(target_hz / rec.fs_hz).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    y = signal.resample_poly(rec.samples, up, down, axis=1, window=("kaiser", kaiser_beta))
    n_out = int(round(rec.n_samples * target_hz / rec.fs_hz))
    y = y[:, :n_out]
    zero_rows = ~np.any(rec.samples, axis=1)
    y[zero_rows] = 0.0
    return replace(rec, fs_hz=float(target_hz), samples=y)


def butter_bandpass(low_hz: float, high_hz: float, fs_hz: float, order: int = 4) -> np.ndarray:
    if not 0 < low_hz < high_hz < fs_hz / 2:
        raise ValueError(f"invalid band edges {low_hz}-{high_hz} Hz for fs {fs_hz} Hz")
    if order < 1:
        raise ValueError("filter order must be >= 1")
    return signal.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs_hz, output="sos")


def zero_phase_filter(sos: np.ndarray, x: np.ndarray, padlen: int) -> np.ndarray:
    """Forward-backward filtering, averaged with its time-reversed twin.

    The average makes the operator exactly commute with time reversal; each
    term alone is already zero-phase with magnitude |H|^2.
    """
    padlen = min(padlen, x.shape[-1] - 1)
    a = signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)
    b = signal.sosfiltfilt(sos, x[..., ::-1], axis=-1, padtype="even", padlen=padlen)[..., ::-1]
    return 0.5 * (a + b)


def bandpass(rec: Recording, low_hz: float = 0.5, high_hz: float = 64.0, order: int = 4) -> Recording:
    sos = butter_bandpass(low_hz, high_hz, rec.fs_hz, order)
    y = zero_phase_filter(sos, rec.samples, padlen=3 * 2 * order)
    return replace(rec, samples=y)


# ----------------------------------------------------------------------------
# ICA


@dataclass
class IcaDecomposition:
    unmixing: np.ndarray     # r x r, acts on whitened data
    mixing: np.ndarray       # r x r, pseudo-inverse of unmixing
    sources: np.ndarray      # r x T
    whitening: np.ndarray    # r x C
    dewhitening: np.ndarray  # C x r
    mean: np.ndarray         # C
    rank: int
    n_iter: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)

    def whiten(self, x: np.ndarray) -> np.ndarray:
        return self.whitening @ (x - self.mean[:, None])


def fastica(rec_or_x, n_components: int = 32, seed: int = 0, tol: float = 1e-6,
            max_iter: int = 500, rank_tol: float = 1e-10) -> IcaDecomposition:
    """Deflationary FastICA with the tanh contrast on centered, whitened data.

    Directions whose covariance eigenvalue falls below ``rank_tol`` times the
    largest (e.g. a zero-filled channel) are dropped; the kept count is
    reported in ``rank``.
    """
    x = rec_or_x.samples if isinstance(rec_or_x, Recording) else np.asarray(rec_or_x, dtype=np.float64)
    C, T = x.shape
    if T < 10 * C:
        raise ValueError(f"ICA needs at least {10 * C} samples for {C} channels, got {T}")
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / T
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > rank_tol * max(evals[0], np.finfo(float).tiny)
    r = int(min(n_components, keep.sum()))
    if r < min(n_components, C):
        log.info("ICA: covariance rank %d < %d requested components", r, min(n_components, C))
    if r == 0:
        raise ValueError("ICA: data has zero variance")
    d, e = evals[:r], evecs[:, :r]
    whitening = (e / np.sqrt(d)).T
    dewhitening = e * np.sqrt(d)
    xw = whitening @ xc

    rng = np.random.default_rng(seed)
    W = np.zeros((r, r))
    n_iter, converged = [], []
    for p in range(r):
        w = rng.standard_normal(r)
        w -= W[:p].T @ (W[:p] @ w)
        w /= np.linalg.norm(w)
        done = False
        for it in range(1, max_iter + 1):
            g = np.tanh(w @ xw)
            w_new = (xw * g).mean(axis=1) - (1.0 - g * g).mean() * w
            w_new -= W[:p].T @ (W[:p] @ w_new)
            w_new /= np.linalg.norm(w_new)
            change = abs(abs(w_new @ w) - 1.0)
            w = w_new
            if change < tol:
                done = True
                break
        W[p] = w
        n_iter.append(it)
        converged.append(done)
    sources = W @ xw
    return IcaDecomposition(W, np.linalg.pinv(W), sources, whitening, dewhitening, mean, r,
                            n_iter, converged)


def suggest_artifact_components(decomp: IcaDecomposition, threshold: float = 5.0) -> list[int]:
    """Advisory only: components whose excess kurtosis exceeds ``threshold``."""
    k = stats.kurtosis(decomp.sources, axis=1, fisher=True)
    return [int(i) for i in np.flatnonzero(k > threshold)]


def remove_components(rec: Recording, decomp: IcaDecomposition, reject) -> Recording:
    """Subtract the channel-space contribution of the rejected sources."""
    reject = [int(i) for i in reject]
    bad = [i for i in reject if not 0 <= i < decomp.rank]
    if bad:
        raise IndexError(f"component indices out of range [0, {decomp.rank}): {bad}")
    if not reject:
        return replace(rec, samples=rec.samples.copy())
    if decomp.sources.shape[1] != rec.n_samples or decomp.dewhitening.shape[0] != rec.samples.shape[0]:
        raise ValueError("decomposition does not belong to this recording")
    contrib = decomp.dewhitening @ decomp.mixing[:, reject] @ decomp.sources[reject]
    out = rec.samples - contrib
    out[~np.any(rec.samples, axis=1)] = 0.0
    return replace(rec, samples=out)


# ----------------------------------------------------------------------------
# segmentation


def segment(rec: Recording, seconds: float = SEGMENT_SECONDS) -> SegmentBatch:
    """Non-overlapping consecutive windows; the trailing remainder is dropped."""
    if rec.fs_hz != TARGET_FS:
        raise ValueError(f"segment expects {TARGET_FS} Hz input, got {rec.fs_hz}")
    if rec.samples.shape[0] != 32:
        raise ValueError("segment expects the 32-channel canonical montage")
    width = int(round(seconds * rec.fs_hz))
    n = rec.n_samples // width
    if n < 1:
        raise ValueError(f"recording of {rec.n_samples} samples is shorter than one {width}-sample window")
    data = rec.samples[:, : n * width].reshape(32, n, width).transpose(1, 0, 2).copy()
    lab = 1 if rec.label == "PD" else 0
    return SegmentBatch(data, np.full(n, lab), np.full(n, rec.subject_id), np.full(n, rec.medication))


def standardize(batch: SegmentBatch, enabled: bool = True) -> SegmentBatch:
    """Per (segment, channel) zero mean / unit variance; all-zero traces stay zero."""
    if not enabled:
        return batch
    x = batch.data.astype(np.float64)
    mu = x.mean(axis=2, keepdims=True)
    sd = x.std(axis=2, keepdims=True)
    flat = sd == 0
    out = np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))
    out[np.broadcast_to(~np.any(x, axis=2, keepdims=True), out.shape)] = 0.0
    return SegmentBatch(out, batch.labels, batch.subject_ids, batch.medication)


@dataclass
class PreprocessConfig:
    montage: str = "biosemi32"
    target_hz: int = TARGET_FS
    low_hz: float = 0.5
    high_hz: float = 64.0
    filter_order: int = 4
    ica_reject: tuple[int, ...] | None = None
    ica_seed: int = 0
    standardize: bool = True


def preprocess_recording(rec: Recording, cfg: PreprocessConfig = PreprocessConfig()) -> SegmentBatch:
    """select -> zero-fill -> resample -> band-pass -> (ICA) -> segment -> standardize."""
    montage = get_montage(cfg.montage)
    r = select_channels(rec, montage)
    r = zero_fill_missing(r, montage)
    r = resample(r, cfg.target_hz)
    r = bandpass(r, cfg.low_hz, cfg.high_hz, cfg.filter_order)
    if cfg.ica_reject:
        decomp = fastica(r, n_components=32, seed=cfg.ica_seed)
        valid = [i for i in cfg.ica_reject if i < decomp.rank]
        r = remove_components(r, decomp, valid)
    return standardize(segment(r), cfg.standardize)
