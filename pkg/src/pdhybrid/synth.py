"""Synthetic resting-state EEG with a learnable, purely distributional class difference.

Each channel is pink background noise plus theta, alpha and beta oscillations
with slowly varying random envelopes. Oscillations mix a source shared across
channels (through a fixed scalp topography) with channel-local activity. The
PD class scales beta amplitude up by ``separation`` and alpha amplitude down by
the same factor. Nothing here is a clinical claim.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import build_manifest, encode_recording, locked_writer, write_manifest
from .preprocess import BIOSEMI32, Recording

BANDS = {"theta": (4.0, 8.0), "alpha": (8.0, 13.0), "beta": (13.0, 30.0)}
BAND_UV = {"theta": 4.0, "alpha": 8.0, "beta": 3.0}
PINK_UV = 6.0
EXTRA_LABELS = tuple(f"X{i:02d}" for i in range(1, 33))


@dataclass
class SynthSpec:
    n_pd: int = 20
    n_hc: int = 20
    duration_s: float = 60.0
    fs_hz: float = 512.0
    seed: int = 7
    separation: float = 2.0
    omit_channels: tuple[str, ...] = ()
    extra_channels: int = 0
    montage: str = "biosemi32"
    subject_jitter: float = 0.1
    envelope_hz: float = 0.5
    shared_fraction: float = 0.6

    def __post_init__(self):
        self.omit_channels = tuple(self.omit_channels)
        if self.n_pd < 0 or self.n_hc < 0 or self.n_pd + self.n_hc < 1:
            raise ValueError("need at least one subject")
        if self.duration_s < 2.0:
            raise ValueError("duration must be at least 2 s")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if not 0 <= self.extra_channels <= len(EXTRA_LABELS):
            raise ValueError(f"extra_channels must be in 0..{len(EXTRA_LABELS)}")
        if set(self.omit_channels) - set(BIOSEMI32):
            raise ValueError("omit_channels must name canonical channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omit_channels"] = list(self.omit_channels)
        return d


def _band_noise(rng, n, fs, lo, hi):
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, 1 / fs)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / x.std()


def _pink(rng, shape, fs):
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.fft.rfftfreq(n, 1 / fs)
    scale = np.zeros_like(f)
    scale[f > 0] = 1 / np.sqrt(f[f > 0])
    x = np.fft.irfft(spec * scale, n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _envelope(rng, n, fs, cutoff):
    slow = _band_noise(rng, n, fs, 0.0, cutoff)
    return np.exp(0.35 * slow)


def _topography(seed):
    """Fixed per-band spatial gains shared by every subject."""
    rng = np.random.default_rng([seed, 0xE56])
    posterior = np.array([lab.startswith(("P", "O")) for lab in BIOSEMI32], dtype=float)
    frontal = np.array([lab.startswith(("F", "AF")) for lab in BIOSEMI32], dtype=float)
    return {
        "theta": 0.7 + 0.3 * frontal + 0.1 * rng.random(32),
        "alpha": 0.6 + 0.6 * posterior + 0.1 * rng.random(32),
        "beta": 0.8 + 0.2 * rng.random(32),
    }


def synth_recording(spec: SynthSpec, subject_index: int, label: str) -> Recording:
    rng = np.random.default_rng([spec.seed, subject_index])
    fs, n = spec.fs_hz, int(round(spec.duration_s * spec.fs_hz))
    topo = _topography(spec.seed)
    gains = {"theta": 1.0, "alpha": 1.0, "beta": 1.0}
    if label == "PD":
        gains["alpha"] = 1.0 / spec.separation
        gains["beta"] = spec.separation
    x = PINK_UV * _pink(rng, (32, n), fs)
    a = spec.shared_fraction
    for band, (lo, hi) in BANDS.items():
        shared = _band_noise(rng, n, fs, lo, hi) * _envelope(rng, n, fs, spec.envelope_hz)
        local = np.stack([_band_noise(rng, n, fs, lo, hi) for _ in range(32)])
        jitter = 1.0 + spec.subject_jitter * rng.uniform(-1, 1, size=32)
        amp = BAND_UV[band] * gains[band] * topo[band] * jitter
        x += amp[:, None] * (np.sqrt(a) * shared[None, :] + np.sqrt(1 - a) * local)
    labels = list(BIOSEMI32)
    if spec.extra_channels:
        extra = PINK_UV * _pink(rng, (spec.extra_channels, n), fs)
        x = np.concatenate([x, extra])
        labels += list(EXTRA_LABELS[: spec.extra_channels])
    keep = [i for i, lab in enumerate(labels) if lab not in spec.omit_channels]
    if label == "PD":
        med = "on" if subject_index % 2 == 0 else "off"
    else:
        med = "n/a"
    sid = f"{label.lower()}{subject_index:03d}"
    return Recording(sid, label, med, fs, [labels[i] for i in keep], x[keep])


def synth_subjects(spec: SynthSpec) -> list[tuple[int, str]]:
    return [(i, "PD") for i in range(spec.n_pd)] + [(spec.n_pd + i, "HC") for i in range(spec.n_hc)]


def synth_recordings(spec: SynthSpec):
    for idx, label in synth_subjects(spec):
        yield synth_recording(spec, idx, label)


def synth_generate(spec: SynthSpec, out_dir):
    """Write one raw file per subject plus ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for rec in synth_recordings(spec):
        rel = f"{rec.subject_id}.raw"
        blob = encode_recording(rec)
        with locked_writer(out / rel) as fh:
            fh.write(blob)
        files.append((rel, blob, rec))
    manifest = build_manifest(out, files, spec.montage)
    write_manifest(manifest)
    return manifest
