"""Training loop and threshold selection.

Segments are sampled event-centered: pick one of the record's events
uniformly, then place the segment uniformly among all positions that keep
at least half of that event inside.  Validation uses a fixed, seeded set
of segments so the loss is comparable across steps; the checkpoint with
the lowest validation loss wins.  Everything is driven by counter-mode
streams keyed on (seed, purpose, indices), so a run is a pure function of
its config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import events as ev
from . import loss as lo
from .nncore import Adam, OptimizerConfig, Tensor
from .rng import Stream
from .synthdata import EventInterval, SignalRecord


class SamplingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss. Carries a diagnostic snapshot of the run state."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def _default_grid() -> tuple:
    return tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 5000
    eval_every: int = 100
    patience: int = 10
    segment_duration_s: float = 120.0
    threshold_grid: tuple = field(default_factory=_default_grid)
    rng_seed: int = 0
    val_segments: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.segment_duration_s <= 0:
            raise ValueError("segment_duration_s must be positive")
        if self.val_segments < 1:
            raise ValueError(f"val_segments must be >= 1, got {self.val_segments}")
        _check_threshold_grid(self.threshold_grid)


def _check_threshold_grid(grid) -> None:
    if len(grid) == 0:
        raise ValueError("threshold_grid must be non-empty")
    for tau in grid:
        if not 0.0 < tau < 1.0:
            raise ValueError(f"thresholds must lie in (0, 1), got {tau}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"threshold_grid must be strictly increasing: {grid}")


@dataclass
class TrainState:
    step: int = 0
    best_val_loss: float = float("inf")
    best_step: int = -1
    evals_since_best: int = 0


@dataclass
class TrainResult:
    metrics: list           # one dict per step: step/loc/pos/neg/total/val_total
    best_val_loss: float
    best_step: int
    steps_run: int
    best_history: list      # (step, val_loss) each time the best improved


# -- segment sampling --------------------------------------------------------

def _clip_events(events, start_s: float, end_s: float):
    """Events overlapping [start_s, end_s], clipped, in segment coordinates."""
    out = []
    for e in events:
        a = max(e.start_s, start_s)
        b = min(e.end_s, end_s)
        if b - a > 0.0:
            out.append(EventInterval(start_s=a - start_s, duration_s=b - a))
    return out


def sample_segment(
    record: SignalRecord, segment_duration_s: float, stream: Stream
):
    """Draw one training segment from a preprocessed record.

    Returns (samples (n_channels, n_segment) view, truth events in segment
    coordinates).  With events present, placement is uniform over the
    positions that keep >= 50 % of one uniformly chosen event inside the
    segment; the feasible interval is clamped to the record, and stays
    non-empty because events are shorter than segments.
    """
    fs = record.sample_rate_hz
    n_seg = round(segment_duration_s * fs)
    max_i0 = record.n_samples - n_seg
    if segment_duration_s > record.duration_s or max_i0 < 0:
        raise SamplingError(
            f"segment {segment_duration_s} s exceeds record "
            f"{record.record_id} ({record.duration_s} s)"
        )
    if record.events:
        k = int(stream.integers(1, len(record.events))[0])
        e = record.events[k]
        # feasible starts: half the event must land inside the segment;
        # bounds rounded inward so sample quantization never breaks the rule
        lo_t = e.start_s + e.duration_s / 2.0 - segment_duration_s
        hi_t = e.end_s - e.duration_s / 2.0
        i_lo = max(0, math.ceil(lo_t * fs - 1e-9))
        i_hi = min(max_i0, math.floor(hi_t * fs + 1e-9))
        if i_hi < i_lo:  # event longer than the segment: best effort
            i_lo = i_hi = min(max(0, round(e.start_s * fs)), max_i0)
        i0 = i_lo + int(stream.integers(1, i_hi - i_lo + 1)[0])
    else:
        i0 = int(stream.integers(1, max_i0 + 1)[0])

    start = i0 / fs
    seg = record.samples()[:, i0:i0 + n_seg]
    return seg, _clip_events(record.events, start, start + segment_duration_s)


def fixed_validation_set(records, cfg: TrainConfig):
    """The seeded segment set used for every validation pass of a run."""
    out = []
    for i in range(cfg.val_segments):
        stream = Stream(cfg.rng_seed, "val", i)
        rec = records[int(stream.integers(1, len(records))[0])]
        out.append(sample_segment(rec, cfg.segment_duration_s, stream))
    return out


# -- loss plumbing -----------------------------------------------------------

def _batch_forward_loss(model, segments, matches, loss_cfg, training):
    """Mean loss over a list of (n_channels, n_samples) segments.

    Returns (total Tensor, mean LossBreakdown).
    """
    x = np.stack(segments).astype(model.dtype)[:, None, :, :]
    out = model.forward(Tensor(x), training=training)
    n = len(segments)
    totals = []
    comps = np.zeros(3)
    for i, match in enumerate(matches):
        t, bd = lo.total_loss(out.p[i], out.y[i], match, loss_cfg)
        totals.append(t)
        comps += (bd.loc, bd.pos, bd.neg)
    acc = totals[0]
    for t in totals[1:]:
        acc = acc + t
    comps /= n
    return acc * (1.0 / n), lo.LossBreakdown(*comps, total=comps.sum())


def _validation_loss(model, val_set, matches, cfg, loss_cfg) -> float:
    total = 0.0
    b = cfg.batch_size
    for i in range(0, len(val_set), b):
        chunk = val_set[i:i + b]
        t, _ = _batch_forward_loss(
            model,
            [seg for seg, _ in chunk],
            matches[i:i + b],
            loss_cfg,
            training=False,
        )
        total += float(t.data) * len(chunk)
    return total / len(val_set)


def _snapshot(model) -> dict:
    snap = {"params": {p.name: p.data.copy() for p in model.parameters()}}
    snap["buffers"] = {
        name: buf.copy()
        for bn in model.batchnorms()
        for name, buf in bn.buffers()
    }
    return snap


def _restore(model, snap: dict) -> None:
    for p in model.parameters():
        p.tensor.data = snap["params"][p.name].copy()
    for bn in model.batchnorms():
        for name, _ in bn.buffers():
            bn.load_buffer(name, snap["buffers"][name])


def train(
    model,
    train_records,
    val_records,
    cfg: TrainConfig,
    loss_cfg: lo.LossConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
) -> TrainResult:
    """Optimize ``model`` in place; on return it holds the best-validation
    parameters.  Raises TrainingDiverged on a non-finite training loss.
    """
    loss_cfg = loss_cfg or lo.LossConfig()
    if not train_records or not val_records:
        raise ValueError("train() needs non-empty train and validation splits")
    fs = train_records[0].sample_rate_hz
    n_seg = round(cfg.segment_duration_s * fs)
    if n_seg != model.config.segment_samples:
        raise ValueError(
            f"segment of {cfg.segment_duration_s} s at {fs} Hz gives "
            f"{n_seg} samples, model expects {model.config.segment_samples}"
        )
    grid = ev.build_anchor_grid(cfg.segment_duration_s)
    if len(grid) != model.config.n_windows:
        raise ValueError(
            f"anchor grid has {len(grid)} windows, model emits "
            f"{model.config.n_windows}"
        )

    val_set = fixed_validation_set(val_records, cfg)
    val_matches = [ev.assign_targets(grid, truth) for _, truth in val_set]

    adam = Adam(model.parameters(), opt_cfg)
    state = TrainState()
    metrics: list = []
    best_history: list = []
    best_snap = None

    for step in range(1, cfg.max_steps + 1):
        state.step = step
        segments, matches = [], []
        for i in range(cfg.batch_size):
            stream = Stream(cfg.rng_seed, "batch", step, i)
            rec = train_records[int(stream.integers(1, len(train_records))[0])]
            seg, truth = sample_segment(rec, cfg.segment_duration_s, stream)
            segments.append(seg)
            matches.append(ev.assign_targets(grid, truth))

        total, bd = _batch_forward_loss(
            model, segments, matches, loss_cfg, training=True
        )
        if not np.isfinite(bd.total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}",
                {
                    "step": step,
                    "loss": {"loc": bd.loc, "pos": bd.pos, "neg": bd.neg},
                    "max_abs_param": float(np.max(
                        [np.max(np.abs(p.data)) for p in model.parameters()]
                    )),
                    "best_val_loss": state.best_val_loss,
                },
            )
        adam.zero_grad()
        total.backward()
        adam.step()

        row = {
            "step": step,
            "loc": bd.loc,
            "pos": bd.pos,
            "neg": bd.neg,
            "total": bd.total,
            "val_total": None,
        }

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val = _validation_loss(model, val_set, val_matches, cfg, loss_cfg)
            row["val_total"] = val
            if val < state.best_val_loss:
                state.best_val_loss = val
                state.best_step = step
                state.evals_since_best = 0
                best_snap = _snapshot(model)
                best_history.append((step, val))
            else:
                state.evals_since_best += 1
            metrics.append(row)
            if state.evals_since_best >= cfg.patience:
                break
        else:
            metrics.append(row)

    if best_snap is not None:
        _restore(model, best_snap)
    return TrainResult(
        metrics=metrics,
        best_val_loss=state.best_val_loss,
        best_step=state.best_step,
        steps_run=state.step,
        best_history=best_history,
    )


def write_metrics_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("step,loc,pos,neg,total,val_total\n")
        for r in rows:
            val = "" if r["val_total"] is None else repr(r["val_total"])
            fh.write(
                f"{r['step']},{r['loc']!r},{r['pos']!r},{r['neg']!r},"
                f"{r['total']!r},{val}\n"
            )


# -- whole-record inference and threshold selection -------------------------

def record_outputs(model, record: SignalRecord, segment_duration_s: float):
    """Run the network over a record in consecutive segments.

    Returns a list of (probs (n_windows, 2), boxes (n_windows, 2),
    segment start in seconds).  A partial tail is covered by one extra
    segment flushed against the record end (duplicates resolved by NMS).
    """
    fs = record.sample_rate_hz
    n_seg = round(segment_duration_s * fs)
    n = record.n_samples
    if n_seg > n:
        raise SamplingError(
            f"segment {segment_duration_s} s exceeds record "
            f"{record.record_id}"
        )
    starts = list(range(0, n - n_seg + 1, n_seg))
    if starts[-1] + n_seg < n:
        starts.append(n - n_seg)
    mat = record.samples()
    x = np.stack(
        [mat[:, i0:i0 + n_seg] for i0 in starts]
    ).astype(model.dtype)[:, None, :, :]
    out = model.forward(Tensor(x), training=False)
    return [
        (out.p.data[i], out.y.data[i], i0 / fs)
        for i, i0 in enumerate(starts)
    ]


def detections_from_outputs(
    outputs, grid: ev.AnchorGrid, threshold: float,
    segment_duration_s: float, record_duration_s: float,
    nms_iou: float = 0.5,
):
    """Decode cached per-segment outputs at one threshold and merge."""
    all_events = []
    for probs, boxes, offset in outputs:
        for e in ev.decode((probs, boxes), grid, threshold, segment_duration_s):
            start = e.start_s + offset
            end = min(start + e.duration_s, record_duration_s)
            if end > start:
                all_events.append(
                    ev.ScoredEvent(start, end - start, e.probability, e.label)
                )
    return ev.nms(all_events, nms_iou)


def detect_record(
    model, record: SignalRecord, threshold: float,
    segment_duration_s: float, nms_iou: float = 0.5,
):
    """End-to-end detection on one record at a fixed threshold."""
    grid = ev.build_anchor_grid(segment_duration_s)
    outputs = record_outputs(model, record, segment_duration_s)
    return detections_from_outputs(
        outputs, grid, threshold, segment_duration_s,
        record.duration_s, nms_iou,
    )


def threshold_sweep(
    model, records, threshold_grid, segment_duration_s: float,
    match_iou: float = 0.5,
) -> dict:
    """tau -> mean per-record F1 over the split (zero-truth records skipped).

    The network runs once per record; only decode/NMS/match repeat per
    threshold.
    """
    _check_threshold_grid(tuple(threshold_grid))
    grid = ev.build_anchor_grid(segment_duration_s)
    cached = [(rec, record_outputs(model, rec, segment_duration_s))
              for rec in records]
    sweep = {}
    for tau in threshold_grid:
        f1s = []
        for rec, outputs in cached:
            if not rec.events:
                continue
            detected = detections_from_outputs(
                outputs, grid, tau, segment_duration_s, rec.duration_s
            )
            m = ev.match_evaluation(detected, rec.events, match_iou)
            f1s.append(2 * m.tp / (2 * m.tp + m.fp + m.fn))
        if not f1s:
            raise ValueError("threshold selection needs records with events")
        sweep[tau] = float(np.mean(f1s))
    return sweep


def select_threshold(
    model, records, threshold_grid, segment_duration_s: float,
    match_iou: float = 0.5,
) -> float:
    """The grid threshold with the highest mean per-record F1 (ties ->
    smaller threshold)."""
    sweep = threshold_sweep(
        model, records, threshold_grid, segment_duration_s, match_iou
    )
    best_tau, best_f1 = None, -1.0
    for tau in threshold_grid:
        if sweep[tau] > best_f1:
            best_tau, best_f1 = tau, sweep[tau]
    return best_tau
