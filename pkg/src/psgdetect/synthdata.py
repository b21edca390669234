"""Synthetic multichannel PSG records with planted arousal bursts.

The real study data is access-restricted, so experiments here run on
generated records: per-channel 1/f^beta background noise plus, for every
planted event, a band-limited (16-40 Hz) burst on the EEG/EOG channels and
a broadband amplitude increase on chin EMG. Records are a pure function of
(config, record index); all draws come from named `rng.Stream`s so another
implementation of the documented algorithm reproduces them exactly.

Draw order per record, with root seed = cfg.rng_seed:
  1. Stream(seed, "record", index, "events"):
       count ~ Poisson(events_per_record); then `count` duration uniforms
       mapped to [dmin, dmax]; then `count` placement uniforms. Events are
       laid out non-overlapping with a 1 s minimum gap by the order-
       statistics construction in `_place_events` (drops trailing events
       only in the rare case the draws cannot fit).
  2. Stream(seed, "record", index, "background", ch) per channel: one
     normal per sample, shaped to a 1/f^beta spectrum, unit variance.
  3. Stream(seed, "record", index, "burst", k, ch) per event k and channel:
     one normal per in-event sample, band-limited, ramped, RMS-scaled.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream

CANONICAL_CHANNELS = ("EEG-C3", "EEG-C4", "EOG-L", "EOG-R", "EMG-chin")

EVENT_GAP_S = 1.0            # minimum spacing between planted events
BURST_BAND_HZ = (16.0, 40.0)  # EEG/EOG burst band
EMG_BAND_HZ = (20.0, 60.0)    # EMG gets a broadband amplitude increase
# burst amplitude relative to cfg.event_snr, per canonical channel
CHANNEL_BURST_GAIN = {
    "EEG-C3": 1.0,
    "EEG-C4": 1.0,
    "EOG-L": 0.75,
    "EOG-R": 0.75,
    "EMG-chin": 1.0,
}


class ConfigError(ValueError):
    """Invalid generator or partition configuration."""


class PartitionError(ValueError):
    """Partition request cannot be satisfied."""


class RecordFormatError(ValueError):
    """Malformed record file; message carries the failing byte offset."""


class RecordVersionError(RecordFormatError):
    """Record file has an unsupported format version."""


@dataclass
class EventInterval:
    start_s: float
    duration_s: float
    label: int = 1

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass
class SignalRecord:
    record_id: str
    sample_rate_hz: float
    channels: list[tuple[str, np.ndarray]]
    events: list[EventInterval]
    duration_s: float

    @property
    def channel_names(self) -> list[str]:
        return [name for name, _ in self.channels]

    @property
    def n_samples(self) -> int:
        return len(self.channels[0][1])

    def samples(self) -> np.ndarray:
        """Channel-major sample matrix, shape (n_channels, n_samples)."""
        return np.stack([x for _, x in self.channels])

    def validate(self) -> None:
        n_expect = round(self.duration_s * self.sample_rate_hz)
        names = self.channel_names
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate channel names: {names}")
        for name, x in self.channels:
            if len(x) != n_expect:
                raise ConfigError(
                    f"channel {name} has {len(x)} samples, expected {n_expect}"
                )
        for ev in self.events:
            if ev.duration_s <= 0:
                raise ConfigError(f"event at {ev.start_s} has non-positive duration")
            if ev.start_s < 0 or ev.end_s > self.duration_s + 1e-9:
                raise ConfigError(
                    f"event [{ev.start_s}, {ev.end_s}] outside record "
                    f"[0, {self.duration_s}]"
                )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.duration_s == other.duration_s
            and self.events == other.events
            and self.channel_names == other.channel_names
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for (_, a), (_, b) in zip(self.channels, other.channels)
            )
        )


@dataclass
class PartitionSpec:
    train1: int
    eval1: int
    test1: int
    train2: int
    eval2: int
    test2: int
    rng_seed: int = 0

    def validate(self) -> None:
        counts = (self.train1, self.eval1, self.test1,
                  self.train2, self.eval2, self.test2)
        if any(c < 0 for c in counts):
            raise ConfigError(f"negative partition count in {counts}")
        if self.train2 + self.eval2 + self.test2 > self.test1:
            raise ConfigError(
                f"nested partition {self.train2}+{self.eval2}+{self.test2} "
                f"exceeds test1={self.test1}"
            )

    @property
    def total(self) -> int:
        return self.train1 + self.eval1 + self.test1


@dataclass
class GeneratorConfig:
    n_records: int = 60
    record_duration_s: float = 600.0
    channel_sample_rate_hz: float = 256.0
    events_per_record: float = 20.0
    event_duration_range_s: tuple[float, float] = (3.0, 15.0)
    event_snr: float = 1.0
    background_spectrum_exponent: float = 1.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_records <= 0:
            raise ConfigError(f"n_records must be positive, got {self.n_records}")
        if self.record_duration_s <= 0:
            raise ConfigError("record_duration_s must be positive")
        if self.channel_sample_rate_hz <= 0:
            raise ConfigError("channel_sample_rate_hz must be positive")
        if self.events_per_record < 0:
            raise ConfigError("events_per_record must be non-negative")
        dmin, dmax = self.event_duration_range_s
        if not (3.0 <= dmin < dmax <= 15.0):
            raise ConfigError(
                f"event_duration_range_s must satisfy 3 <= min < max <= 15, "
                f"got ({dmin}, {dmax})"
            )
        if self.event_snr < 0:
            raise ConfigError("event_snr must be non-negative")


def _place_events(stream: Stream, cfg: GeneratorConfig) -> list[EventInterval]:
    """Draw count, durations, and non-overlapping placements.

    Order statistics layout: with k events of durations d_i and gap g, draw
    k uniforms on [0, free] where free = duration - sum(d) - (k-1)*g, sort
    them, and put event i at sorted_u[i] + sum_{j<i}(d_j + g). Trailing
    events are dropped first if the draws cannot fit (never at the default
    duration/event-rate settings).
    """
    count = stream.poisson(cfg.events_per_record)
    dmin, dmax = cfg.event_duration_range_s
    durations = list(dmin + stream.uniform(count) * (dmax - dmin)) if count else []
    offsets = list(stream.uniform(count)) if count else []
    while durations and (
        sum(durations) + (len(durations) - 1) * EVENT_GAP_S > cfg.record_duration_s
    ):
        durations.pop()
        offsets.pop()
    k = len(durations)
    if k == 0:
        return []
    free = cfg.record_duration_s - sum(durations) - (k - 1) * EVENT_GAP_S
    slack = sorted(u * free for u in offsets)
    events = []
    cursor = 0.0
    for i in range(k):
        start = slack[i] + cursor
        events.append(EventInterval(start_s=start, duration_s=durations[i], label=1))
        cursor += durations[i] + EVENT_GAP_S
    return events


def _colored_noise(stream: Stream, n: int, fs: float, beta: float) -> np.ndarray:
    """Unit-variance noise with power spectral density ~ 1/f^beta."""
    white = stream.normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-beta / 2.0)
    x = np.fft.irfft(spec * scale, n=n)
    std = float(np.std(x))
    return x / std if std > 0 else x


def _bandlimited_burst(
    stream: Stream, n: int, fs: float, band: tuple[float, float], rms: float
) -> np.ndarray:
    """Band-passed white noise with cosine onset/offset ramps at target RMS."""
    white = stream.normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    lo, hi = band
    spec[(freqs < lo) | (freqs > min(hi, fs / 2))] = 0.0
    x = np.fft.irfft(spec, n=n)
    ramp = max(2, min(round(0.5 * fs), n // 4))
    env = np.ones(n)
    t = np.arange(ramp) / ramp
    env[:ramp] = 0.5 * (1.0 - np.cos(np.pi * t))
    env[n - ramp:] = env[:ramp][::-1]
    x = x * env
    cur = float(np.sqrt(np.mean(x**2)))
    return x * (rms / cur) if cur > 0 else x


def generate_record_parts(
    cfg: GeneratorConfig, index: int
) -> tuple[SignalRecord, np.ndarray]:
    """Generate one record plus its clean burst component.

    The burst matrix (n_channels, n_samples, float64) is exactly zero
    outside planted events; it backs the energy-threshold recall self-test.
    """
    cfg.validate()
    if not (0 <= index < cfg.n_records):
        raise ConfigError(f"record index {index} outside [0, {cfg.n_records})")
    fs = cfg.channel_sample_rate_hz
    n = round(cfg.record_duration_s * fs)
    seed = cfg.rng_seed

    events = _place_events(Stream(seed, "record", index, "events"), cfg)

    burst = np.zeros((len(CANONICAL_CHANNELS), n))
    for k, ev in enumerate(events):
        i0 = round(ev.start_s * fs)
        i1 = min(round(ev.end_s * fs), n)
        span = i1 - i0
        if span < 2:
            continue
        for ci, name in enumerate(CANONICAL_CHANNELS):
            s = Stream(seed, "record", index, "burst", k, ci)
            band = EMG_BAND_HZ if name.startswith("EMG") else BURST_BAND_HZ
            rms = cfg.event_snr * CHANNEL_BURST_GAIN[name]
            burst[ci, i0:i1] = _bandlimited_burst(s, span, fs, band, rms)

    channels = []
    for ci, name in enumerate(CANONICAL_CHANNELS):
        bg = _colored_noise(
            Stream(seed, "record", index, "background", ci),
            n, fs, cfg.background_spectrum_exponent,
        )
        channels.append((name, (bg + burst[ci]).astype(np.float32)))

    rec = SignalRecord(
        record_id=f"rec{index:04d}",
        sample_rate_hz=fs,
        channels=channels,
        events=events,
        duration_s=cfg.record_duration_s,
    )
    rec.validate()
    return rec, burst


def generate_record(cfg: GeneratorConfig, index: int) -> SignalRecord:
    """Generate one synthetic record; deterministic in (cfg, index)."""
    return generate_record_parts(cfg, index)[0]


def partition(record_ids: list[str], spec: PartitionSpec) -> dict[str, list[str]]:
    """Assign record ids to the six experiment subsets.

    Ids are sorted, shuffled once with the seeded stream, and sliced:
    train1 | eval1 | test1. The nested train2/eval2/test2 split reuses the
    shuffle order inside the test1 slice. Ids beyond the requested totals
    land in the "unused" bucket.
    """
    spec.validate()
    if len(record_ids) < spec.total:
        raise PartitionError(
            f"need {spec.total} records "
            f"({spec.train1}+{spec.eval1}+{spec.test1}), have {len(record_ids)}"
        )
    order = Stream(spec.rng_seed, "partition").shuffle(sorted(record_ids))
    a, b, c = spec.train1, spec.train1 + spec.eval1, spec.total
    test1 = order[b:c]
    d, e, f = spec.train2, spec.train2 + spec.eval2, spec.train2 + spec.eval2 + spec.test2
    return {
        "train1": order[:a],
        "eval1": order[a:b],
        "test1": test1,
        "train2": test1[:d],
        "eval2": test1[d:e],
        "test2": test1[e:f],
        "unused": order[c:],
    }


# ---------------------------------------------------------------------------
# On-disk format, version 1:
#   bytes 0-3   magic b"PSGB"
#   bytes 4-7   format version, uint32 LE
#   bytes 8-11  header length H, uint32 LE
#   bytes 12-.. header, UTF-8 JSON: record_id, sample_rate_hz, duration_s,
#               n_samples, channels (names in order), events
#   then        one float32 LE block of n_samples per channel, in order
# ---------------------------------------------------------------------------

_MAGIC = b"PSGB"
_VERSION = 1


def save_record(rec: SignalRecord, path: str | Path) -> None:
    """Write a record; samples are stored as little-endian float32."""
    rec.validate()
    header = {
        "record_id": rec.record_id,
        "sample_rate_hz": rec.sample_rate_hz,
        "duration_s": rec.duration_s,
        "n_samples": rec.n_samples,
        "channels": rec.channel_names,
        "events": [
            {"start_s": ev.start_s, "duration_s": ev.duration_s, "label": ev.label}
            for ev in rec.events
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, x in rec.channels:
            fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def _read_header(fh) -> tuple[dict, int]:
    head = fh.read(12)
    if len(head) < 12:
        raise RecordFormatError(f"truncated file at byte {len(head)}: no header")
    if head[:4] != _MAGIC:
        raise RecordFormatError(f"bad magic at byte 0: {head[:4]!r}")
    version, hlen = struct.unpack("<II", head[4:12])
    if version != _VERSION:
        raise RecordVersionError(
            f"unsupported format version {version} at byte 4 (expected {_VERSION})"
        )
    blob = fh.read(hlen)
    if len(blob) < hlen:
        raise RecordFormatError(f"truncated header at byte {12 + len(blob)}")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecordFormatError(f"unparseable header at byte 12: {exc}") from exc
    return header, 12 + hlen


def load_record(path: str | Path, channels: list[str] | None = None) -> SignalRecord:
    """Read a record, optionally only a subset of channels (partial read)."""
    with open(path, "rb") as fh:
        header, data_start = _read_header(fh)
        n = header["n_samples"]
        names = header["channels"]
        wanted = names if channels is None else list(channels)
        unknown = [c for c in wanted if c not in names]
        if unknown:
            raise KeyError(f"channels {unknown} not in record ({names})")
        chans = []
        for name in wanted:
            offset = data_start + names.index(name) * n * 4
            fh.seek(offset)
            raw = fh.read(n * 4)
            if len(raw) < n * 4:
                raise RecordFormatError(
                    f"truncated sample block at byte {offset + len(raw)}"
                )
            chans.append((name, np.frombuffer(raw, dtype="<f4").copy()))
    rec = SignalRecord(
        record_id=header["record_id"],
        sample_rate_hz=header["sample_rate_hz"],
        channels=chans,
        events=[
            EventInterval(ev["start_s"], ev["duration_s"], ev["label"])
            for ev in header["events"]
        ],
        duration_s=header["duration_s"],
    )
    rec.validate()
    return rec


def generate_dataset(
    cfg: GeneratorConfig, spec: PartitionSpec, out_dir: str | Path
) -> dict:
    """Generate all records, write them under their top-level subset
    directory, and write manifest.json. Returns the manifest dict."""
    cfg.validate()
    spec.validate()
    if cfg.n_records < spec.total:
        raise PartitionError(
            f"config generates {cfg.n_records} records but partition "
            f"needs {spec.total}"
        )
    out = Path(out_dir)
    ids = [f"rec{i:04d}" for i in range(cfg.n_records)]
    parts = partition(ids, spec)
    top_of = {}
    for top in ("train1", "eval1", "test1"):
        for rid in parts[top]:
            top_of[rid] = top
        (out / top).mkdir(parents=True, exist_ok=True)
    for i, rid in enumerate(ids):
        top = top_of.get(rid)
        if top is None:
            continue
        rec = generate_record(cfg, i)
        save_record(rec, out / top / f"{rid}.psgbin")
    manifest = {
        "format_version": _VERSION,
        "generator_config": {
            "n_records": cfg.n_records,
            "record_duration_s": cfg.record_duration_s,
            "channel_sample_rate_hz": cfg.channel_sample_rate_hz,
            "events_per_record": cfg.events_per_record,
            "event_duration_range_s": list(cfg.event_duration_range_s),
            "event_snr": cfg.event_snr,
            "background_spectrum_exponent": cfg.background_spectrum_exponent,
            "rng_seed": cfg.rng_seed,
        },
        "partition_seed": spec.rng_seed,
        "partitions": {k: v for k, v in parts.items() if k != "unused"},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    with open(path) as fh:
        return json.load(fh)


def record_path(dataset_dir: str | Path, manifest: dict, record_id: str) -> Path:
    """Resolve a record id to its file via the top-level partitions."""
    for top in ("train1", "eval1", "test1"):
        if record_id in manifest["partitions"][top]:
            return Path(dataset_dir) / top / f"{record_id}.psgbin"
    raise KeyError(f"record {record_id} not in manifest")
