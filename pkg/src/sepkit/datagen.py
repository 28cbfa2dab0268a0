"""Synthetic corpus forge: harmonic sources, colored noise, exponential-decay
room responses, and manifest-driven dataset builds.

Sources are harmonic complexes with a linear pitch trajectory and optional
raised-cosine amplitude modulation, pitch-differentiated stand-ins for
speech. Everything is a pure function of its spec, seed included, so a
manifest always rebuilds a bit-identical corpus.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .dsp import Waveform, wav_write
from .errors import FormatError, InvalidArgument

SAMPLE_RATE = 8000


@dataclass
class SourceSpec:
    f0_start: float
    f0_end: float
    harmonics: int = 1
    am_rate: float = 0.0       # Hz; 0 disables amplitude modulation
    duration: float = 1.0      # seconds
    seed: int = 0

    def validate(self):
        for f0 in (self.f0_start, self.f0_end):
            if not 50.0 <= f0 <= 400.0:
                raise InvalidArgument(f"f0 {f0} Hz outside the 50..400 range")
        if self.harmonics < 1:
            raise InvalidArgument("harmonics must be >= 1")
        if self.harmonics * max(self.f0_start, self.f0_end) >= SAMPLE_RATE / 2:
            raise InvalidArgument("highest harmonic exceeds Nyquist")
        if self.duration <= 0:
            raise InvalidArgument("duration must be positive")


@dataclass
class RIRSpec:
    t60: float                 # seconds
    drr_db: float | None = None  # None means +inf: pure direct path
    length: int = 2000         # samples
    seed: int = 0

    def validate(self):
        if self.t60 <= 0:
            raise InvalidArgument("t60 must be positive")
        if self.length < 1:
            raise InvalidArgument("RIR length must be >= 1")


@dataclass
class NoiseSpec:
    color: str = "white"       # white | pink
    snr_db: float = 10.0       # vs the power sum of the scaled sources
    seed: int = 0

    def validate(self):
        if self.color not in ("white", "pink"):
            raise InvalidArgument(f"unknown noise color {self.color!r}")
        if not math.isfinite(self.snr_db):
            raise InvalidArgument("SNR must be finite")


@dataclass
class MixtureRecipe:
    sources: list
    gains_db: list = None      # relative source gains, one per source
    noise: NoiseSpec | None = None
    rirs: list | None = None   # one RIRSpec per source, or None
    seed: int = 0

    def __post_init__(self):
        if self.gains_db is None:
            self.gains_db = [0.0] * len(self.sources)

    def validate(self):
        if not self.sources:
            raise InvalidArgument("recipe has no sources")
        if len(self.gains_db) != len(self.sources):
            raise InvalidArgument("one gain per source required")
        if not all(math.isfinite(g) for g in self.gains_db):
            raise InvalidArgument("gains must be finite")
        for s in self.sources:
            s.validate()
        if self.noise is not None:
            self.noise.validate()
        if self.rirs is not None:
            if len(self.rirs) != len(self.sources):
                raise InvalidArgument("one RIR per source required")
            for r in self.rirs:
                r.validate()

    def to_dict(self):
        d = {"sources": [asdict(s) for s in self.sources],
             "gains_db": list(self.gains_db), "seed": self.seed}
        d["noise"] = asdict(self.noise) if self.noise else None
        d["rirs"] = [asdict(r) for r in self.rirs] if self.rirs else None
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            sources=[SourceSpec(**s) for s in d["sources"]],
            gains_db=d.get("gains_db"),
            noise=NoiseSpec(**d["noise"]) if d.get("noise") else None,
            rirs=[RIRSpec(**r) for r in d["rirs"]] if d.get("rirs") else None,
            seed=d.get("seed", 0))


@dataclass
class ManifestItem:
    name: str
    recipe: MixtureRecipe
    split: str = "train"


@dataclass
class Manifest:
    items: list = field(default_factory=list)

    def validate(self):
        names = [it.name for it in self.items]
        if len(set(names)) != len(names):
            raise InvalidArgument("duplicate output names in manifest")
        seeds = [it.recipe.seed for it in self.items]
        if len(set(seeds)) != len(seeds):
            raise InvalidArgument("recipe seeds must be unique")
        for it in self.items:
            if it.split not in ("train", "valid", "test"):
                raise InvalidArgument(f"unknown split {it.split!r}")
            it.recipe.validate()

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
            items = [ManifestItem(name=d["name"],
                                  recipe=MixtureRecipe.from_dict(d["recipe"]),
                                  split=d.get("split", "train"))
                     for d in doc["items"]]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad manifest {path}: {exc}") from exc
        m = cls(items)
        m.validate()
        return m

    def to_json(self, path):
        doc = {"items": [{"name": it.name, "split": it.split,
                          "recipe": it.recipe.to_dict()} for it in self.items]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def synth_source(spec: SourceSpec, sample_rate=SAMPLE_RATE) -> Waveform:
    """Harmonic complex with 1/k rolloff, linear f0 glide, raised-cosine AM.

    Peak-normalized to 0.9; the seed randomizes the starting phase.
    """
    spec.validate()
    n = int(round(spec.duration * sample_rate))
    if n < 1:
        raise InvalidArgument("duration too short for one sample")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate
    f0 = spec.f0_start + (spec.f0_end - spec.f0_start) * (t / spec.duration)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    sig = np.zeros(n)
    for h in range(1, spec.harmonics + 1):
        sig += np.sin(h * (phase + phase0)) / h
    if spec.am_rate > 0:
        sig *= 0.5 * (1.0 - np.cos(2.0 * np.pi * spec.am_rate * t))
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.9 / peak
    return Waveform(sig, sample_rate)


def synth_noise(color: str, duration: float, seed: int,
                sample_rate=SAMPLE_RATE) -> Waveform:
    """Unit-variance white or pink (-3 dB/octave) noise."""
    n = int(round(duration * sample_rate))
    if n < 1:
        raise InvalidArgument("noise duration too short for one sample")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    if color == "white":
        sig = white
    elif color == "pink":
        # shape the spectrum by 1/sqrt(f): -3 dB per octave in power
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        scale = np.ones_like(freqs)
        scale[1:] = 1.0 / np.sqrt(freqs[1:])
        sig = np.fft.irfft(spectrum * scale, n=n)
        sig /= np.std(sig)
    else:
        raise InvalidArgument(f"unknown noise color {color!r}")
    return Waveform(sig, sample_rate)


def synth_rir(spec: RIRSpec, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Unit direct-path impulse plus an exponentially decaying noise tail.

    The tail amplitude envelope is exp(-6.9 t / t60), i.e. -60 dB at t60;
    its total energy is scaled to the requested direct-to-reverberant
    ratio. drr_db=None means no tail at all.
    """
    spec.validate()
    h = np.zeros(spec.length)
    h[0] = 1.0
    if spec.drr_db is None or spec.length == 1:
        return h
    rng = np.random.default_rng(spec.seed)
    t = np.arange(1, spec.length) / sample_rate
    tail = rng.standard_normal(spec.length - 1) * np.exp(-6.9 * t / spec.t60)
    tail_energy = np.dot(tail, tail)
    if tail_energy > 0:
        # direct energy is 1; want 10*log10(1 / tail_energy') = drr_db
        target = 10.0 ** (-spec.drr_db / 10.0)
        tail *= np.sqrt(target / tail_energy)
    h[1:] = tail
    return h


def mix(recipe: MixtureRecipe, sample_rate=SAMPLE_RATE):
    """Render a recipe to (mixture, [reference_1..reference_K]).

    References are the post-RIR, gain-scaled sources (reverberant targets
    share the mixture's acoustics). Noise is scaled so that
    10 log10(sum_k P(s_k) / P(noise)) equals the requested SNR. If the
    mixture peak exceeds 1, mixture and references are scaled down by the
    same factor.
    """
    recipe.validate()
    sources = [synth_source(s, sample_rate).samples for s in recipe.sources]
    n = min(len(s) for s in sources)
    sources = [s[:n] for s in sources]
    if recipe.rirs is not None:
        sources = [np.convolve(s, synth_rir(r, sample_rate))[:n]
                   for s, r in zip(sources, recipe.rirs)]
    sources = [s * 10.0 ** (g / 20.0) for s, g in zip(sources, recipe.gains_db)]
    noise = None
    if recipe.noise is not None:
        noise = synth_noise(recipe.noise.color, n / sample_rate,
                            recipe.noise.seed, sample_rate).samples[:n]
        p_sources = sum(float(np.dot(s, s)) for s in sources) / n
        p_noise = float(np.dot(noise, noise)) / n
        if p_noise == 0:
            raise InvalidArgument("degenerate zero-power noise")
        noise = noise * np.sqrt(p_sources / p_noise
                                * 10.0 ** (-recipe.noise.snr_db / 10.0))

    def assemble(srcs, nse):
        total = srcs[0].copy()
        for s in srcs[1:]:
            total += s
        if nse is not None:
            total += nse
        return total

    mixture = assemble(sources, noise)
    peak = np.max(np.abs(mixture))
    if peak > 1.0:
        # scale the components and re-sum so mixture - sum(refs) stays
        # exactly the (scaled) noise
        sources = [s / peak for s in sources]
        noise = noise / peak if noise is not None else None
        mixture = assemble(sources, noise)
    return (Waveform(mixture, sample_rate),
            [Waveform(s, sample_rate) for s in sources])


def build_dataset(manifest: Manifest, out_dir, sample_rate=SAMPLE_RATE):
    """Render every manifest item under out_dir and write index.jsonl.

    Layout: out_dir/<name>/mix.wav, s1.wav..sK.wav. Returns per-split
    counts. Raises on duplicate output paths.
    """
    manifest.validate()
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.jsonl")
    counts = {"train": 0, "valid": 0, "test": 0}
    with open(index_path, "w") as index:
        for item in manifest.items:
            item_dir = os.path.join(out_dir, item.name)
            os.makedirs(item_dir, exist_ok=True)
            mixture, refs = mix(item.recipe, sample_rate)
            mix_path = os.path.join(item_dir, "mix.wav")
            wav_write(mix_path, mixture)
            ref_paths = []
            for i, ref in enumerate(refs, start=1):
                p = os.path.join(item_dir, f"s{i}.wav")
                wav_write(p, ref)
                ref_paths.append(p)
            record = {
                "name": item.name,
                "split": item.split,
                "mix": mix_path,
                "sources": ref_paths,
                "seed": item.recipe.seed,
                "snr_db": item.recipe.noise.snr_db if item.recipe.noise else None,
                "t60": [r.t60 for r in item.recipe.rirs] if item.recipe.rirs else None,
                "recipe": item.recipe.to_dict(),
            }
            index.write(json.dumps(record) + "\n")
            counts[item.split] += 1
    return counts


def read_index(data_dir):
    """Parse index.jsonl into a list of record dicts."""
    path = os.path.join(data_dir, "index.jsonl")
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad dataset index {path}: {exc}") from exc
