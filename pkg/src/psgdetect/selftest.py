"""Built-in verification suites behind the ``selftest`` CLI command.

Five suites, each pinning a module against an independent reference:
finite-difference gradients, filter frequency response, NMS versus an
exhaustive greedy reference, evaluation matching versus brute-force
maximum matching, and the rank statistics versus permutation enumeration.
A sixth pipeline suite exercises data generation, sampling, and model
surgery end to end.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import dsp, evalstats
from . import events as ev
from . import loss as lo
from . import model as mo
from . import synthdata, training
from .nncore import Tensor, ops
from .nncore.gradcheck import max_relative_error
from .rng import Stream

# Test hook: added to one analytic gradient inside the gradient suite so the
# harness itself can be shown to catch a wrong derivative.
GRADIENT_PERTURBATION = 0.0


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _check(results, suite, name, passed, detail=""):
    results.append(CheckResult(suite, name, bool(passed), detail))


# -- gradient suite -----------------------------------------------------------

def suite_gradients() -> list:
    out = []
    rng = np.random.default_rng(11)

    def fd_case(name, build, tensors, tol=1e-4):
        err = max_relative_error(build, tensors)
        _check(out, "gradients", name, err < tol, f"rel err {err:.2e}")

    x = Tensor(rng.normal(size=(2, 3, 4, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3, 1, 3)) * 0.3, requires_grad=True)
    fd_case(
        "conv2d",
        lambda: ops.sum_(ops.conv2d(x, w, stride=(1, 2),
                                    padding=((0, 0), (1, 0))) ** 2),
        [x, w],
    )

    h = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    mixw = Tensor(rng.normal(size=(3, 6)))
    fd_case("softmax",
            lambda: ops.sum_(ops.softmax(h, axis=-1) * mixw), [h])

    g = Tensor(rng.normal(size=(2, 4, 1, 6)), requires_grad=True)
    fd_case("avgpool", lambda: ops.sum_(ops.avgpool1d(g, 3) ** 2), [g])

    from .nncore import BatchNorm2d, BiGRU
    bn = BatchNorm2d("st_bn", 3, dtype=np.float64)
    xb = Tensor(rng.normal(size=(2, 3, 2, 5)), requires_grad=True)
    fd_case(
        "batchnorm",
        lambda: ops.sum_(bn(xb, training=True) ** 2),
        [xb, bn.gamma.tensor, bn.beta.tensor],
    )

    gru = BiGRU("st_gru", 3, 4, seed=5, dtype=np.float64)
    xg = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    fd_case(
        "bigru",
        lambda: ops.sum_(gru(xg) ** 2),
        [xg] + [p.tensor for p in gru.parameters()],
        tol=1e-3,
    )

    # full loss with the perturbation hook applied to the analytic gradient
    grid = ev.build_anchor_grid(45.0)
    truth = [synthdata.EventInterval(6.0, 8.0)]
    match = ev.assign_targets(grid, truth)
    logits = Tensor(rng.normal(size=(len(grid), 2)) * 0.5, requires_grad=True)
    boxes = Tensor(rng.normal(size=(len(grid), 2)) * 0.3, requires_grad=True)

    def loss_value(lv, bv):
        p = ops.softmax(Tensor(lv, requires_grad=True), axis=-1)
        total, _ = lo.total_loss(p, Tensor(bv, requires_grad=True), match)
        return float(total.data)

    p = ops.softmax(logits, axis=-1)
    total, _ = lo.total_loss(p, boxes, match)
    logits.grad = None
    boxes.grad = None
    total.backward()
    worst = 0.0
    for leaf in (logits, boxes):
        analytic = leaf.grad + GRADIENT_PERTURBATION
        fd = np.zeros_like(leaf.data)
        h_step = 1e-5
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h_step
            up = loss_value(logits.data, boxes.data)
            flat[i] = orig - h_step
            dn = loss_value(logits.data, boxes.data)
            flat[i] = orig
            fd.reshape(-1)[i] = (up - dn) / (2 * h_step)
        rel = np.abs(analytic - fd) / np.maximum(
            1.0, np.maximum(np.abs(analytic), np.abs(fd))
        )
        worst = max(worst, float(rel.max()))
    _check(out, "gradients", "detection_loss", worst < 1e-4,
           f"rel err {worst:.2e}")
    return out


# -- filter response suite ------------------------------------------------------

def suite_filters() -> list:
    out = []
    fs = dsp.TARGET_RATE_HZ
    for name, spec in (
        ("eeg_bandpass", dsp.FilterSpec("bandpass", dsp.EEG_BANDPASS_ORDER,
                                        dsp.EEG_BANDPASS_HZ, fs)),
        ("emg_highpass", dsp.FilterSpec("highpass", dsp.EMG_HIGHPASS_ORDER,
                                        (dsp.EMG_HIGHPASS_HZ,), fs)),
    ):
        cascade = dsp.design_butterworth(spec)
        worst = 0.0
        for edge in spec.cutoffs_hz:
            mag = abs(cascade.response(edge, fs)[0])
            worst = max(worst, abs(mag - 1 / math.sqrt(2)) * math.sqrt(2))
        _check(out, "filters", f"{name}_edge_gain", worst < 0.005,
               f"-3 dB deviation {worst * 100:.3f}%")
        pole_max = float(cascade.pole_magnitudes().max())
        _check(out, "filters", f"{name}_stable", pole_max < 1.0,
               f"max |pole| {pole_max:.6f}")

    t_in = np.arange(int(256 * 10)) / 256.0
    x = np.sin(2 * np.pi * 5.0 * t_in)
    y = dsp.resample_polyphase(x, 256.0)
    t_out = np.arange(len(y)) / 128.0
    ideal = np.sin(2 * np.pi * 5.0 * t_out)
    sl = slice(int(0.1 * len(y)), int(0.9 * len(y)))
    snr = 10 * np.log10(
        np.mean(ideal[sl] ** 2) / np.mean((y[sl] - ideal[sl]) ** 2)
    )
    _check(out, "filters", "resampler_tone_snr", snr > 60.0,
           f"{snr:.1f} dB")

    mat = np.vstack([y, x[::2][:len(y)]])
    z, _, _, _ = dsp.standardize(mat)
    _check(
        out, "filters", "standardize",
        abs(z.mean(axis=1)).max() < 1e-9
        and abs(z.std(axis=1) - 1).max() < 1e-9,
        f"max |mean| {abs(z.mean(axis=1)).max():.1e}",
    )
    return out


# -- NMS oracle suite ---------------------------------------------------------

def _ref_iou(a, b):
    inter = max(0.0, min(a[0] + a[1], b[0] + b[1]) - max(a[0], b[0]))
    union = a[1] + b[1] - inter
    return inter / union if union > 0 else 0.0


def _reference_nms(items, thr):
    """Plain quadratic keep-list NMS, ordered by (-prob, start)."""
    pending = sorted(items, key=lambda e: (-e.probability, e.start_s))
    kept = []
    for e in pending:
        if all(
            _ref_iou((e.start_s, e.duration_s), (k.start_s, k.duration_s)) < thr
            for k in kept
        ):
            kept.append(e)
    return kept


def suite_nms_oracle(n_instances: int = 300) -> list:
    out = []
    rng = np.random.default_rng(29)
    mismatch = None
    for i in range(n_instances):
        n = int(rng.integers(0, 11))
        items = [
            ev.ScoredEvent(
                start_s=float(rng.uniform(0, 50)),
                duration_s=float(rng.uniform(0.5, 15)),
                probability=float(rng.uniform(0.01, 1.0)),
                label=1,
            )
            for _ in range(n)
        ]
        got = ev.nms(items, 0.5)
        want = _reference_nms(items, 0.5)
        if got != want:
            mismatch = i
            break
    _check(out, "nms_oracle", f"greedy_reference_{n_instances}_instances",
           mismatch is None,
           "all matched" if mismatch is None else f"instance {mismatch}")
    return out


# -- matching oracle suite ------------------------------------------------------

def _brute_force_max_matching(table) -> int:
    n_a, n_b = table.shape

    def best(i, used):
        if i == n_a:
            return 0
        top = best(i + 1, used)
        for j in range(n_b):
            if table[i, j] and not used & (1 << j):
                top = max(top, 1 + best(i + 1, used | (1 << j)))
        return top

    return best(0, 0)


def suite_matching_oracle(n_instances: int = 200) -> list:
    out = []
    rng = np.random.default_rng(31)
    bad = None
    for i in range(n_instances):
        n_det = int(rng.integers(0, 7))
        n_tru = int(rng.integers(0, 7))
        detected = [
            ev.ScoredEvent(float(rng.uniform(0, 30)),
                           float(rng.uniform(1, 10)),
                           float(rng.uniform(0.1, 1.0)), 1)
            for _ in range(n_det)
        ]
        truth = [
            synthdata.EventInterval(float(rng.uniform(0, 30)),
                                    float(rng.uniform(1, 10)))
            for _ in range(n_tru)
        ]
        m = ev.match_evaluation(detected, truth, 0.5)
        table = (ev.iou_matrix(detected, truth) >= 0.5) if n_det and n_tru \
            else np.zeros((n_det, n_tru), dtype=bool)
        want = _brute_force_max_matching(np.asarray(table, dtype=bool))
        if m.tp != want:
            bad = (i, m.tp, want)
            break
    _check(out, "matching_oracle", f"max_cardinality_{n_instances}_instances",
           bad is None, "all matched" if bad is None else str(bad))
    return out


# -- statistics oracle suite ----------------------------------------------------

def suite_stats_oracle() -> list:
    out = []
    h, p = evalstats.kruskal_wallis([[1, 2], [3, 4], [5, 6]])
    _check(out, "stats_oracle", "kruskal_wallis_hand_value",
           abs(h - 4.57143) < 1e-5 and abs(p - 0.10170) < 1e-5,
           f"H {h:.5f}, p {p:.5f}")

    rng = np.random.default_rng(37)
    worst = 0.0
    for i in range(25):
        na, nb = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        a = rng.integers(0, 4, size=na).astype(float)
        b = rng.integers(0, 4, size=nb).astype(float)
        _, p_mine = evalstats.mann_whitney_u(a, b)
        pooled = list(a) + list(b)
        mu = na * nb / 2.0

        def u_of(aa, bb):
            return sum(
                1.0 if x > y else 0.5 if x == y else 0.0
                for x in aa for y in bb
            )

        d_obs = abs(u_of(a, b) - mu)
        hits = total = 0
        for idx in itertools.combinations(range(na + nb), na):
            chosen = set(idx)
            aa = [pooled[k] for k in chosen]
            bb = [pooled[k] for k in range(na + nb) if k not in chosen]
            total += 1
            hits += abs(u_of(aa, bb) - mu) >= d_obs
        worst = max(worst, abs(p_mine - hits / total))
    _check(out, "stats_oracle", "mwu_exact_permutation_25_instances",
           worst == 0.0, f"max |dp - oracle| {worst:.1e}")

    adj = evalstats.bonferroni([0.01, 0.02, 0.5])
    _check(out, "stats_oracle", "bonferroni", adj == [0.03, 0.06, 1.0],
           str(adj))
    return out


# -- pipeline suite -------------------------------------------------------------

def suite_pipeline(tmp_dir=None) -> list:
    import tempfile
    from pathlib import Path

    out = []
    cfg = synthdata.GeneratorConfig(
        n_records=2, record_duration_s=60.0, events_per_record=4.0, rng_seed=3
    )
    rec = synthdata.generate_record(cfg, 0)
    again = synthdata.generate_record(cfg, 0)
    _check(out, "pipeline", "generator_deterministic", rec == again)

    with tempfile.TemporaryDirectory(dir=tmp_dir) as td:
        path = Path(td) / "r.psgbin"
        synthdata.save_record(rec, path)
        loaded = synthdata.load_record(path)
        _check(out, "pipeline", "record_roundtrip", loaded == rec)

    pre = dsp.preprocess_record(rec)
    ok = True
    for i in range(50):
        seg, truth = training.sample_segment(pre, 20.0, Stream(1, "st", i))
        if pre.events:
            covered = sum(e.duration_s for e in truth)
            shortest = min(e.duration_s for e in pre.events)
            ok = ok and covered >= shortest / 2.0 - 1e-6
    _check(out, "pipeline", "sampling_containment_50_draws", ok)

    mcfg = mo.ModelConfig(
        in_channels=5, segment_samples=256, base_maps=2, n_blocks=2,
        anchor_pool=16,
    )
    src = mo.build(mcfg, rng_seed=1)
    xb = Tensor(np.random.default_rng(0).normal(
        size=(1, 1, 5, 256)).astype(np.float32))
    src.forward(xb, training=True)  # populate norm stats
    surg = mo.replace_input_layers(src, 1, rng_seed=2)
    same = all(
        np.array_equal(sp.data, dp.data)
        for sp, dp in zip(src.parameters(), surg.parameters())
        if not (sp.name.startswith("mix.") or sp.name.startswith("conv1.")
                or sp.name.startswith("bn1."))
    )
    _check(out, "pipeline", "surgery_preserves_downstream", same)
    y = surg.forward(Tensor(xb.data[:, :, :1]), training=True)
    _check(out, "pipeline", "surgery_single_channel_forward",
           y.p.data.shape == (1, mcfg.n_windows, 2))
    return out


SUITES = {
    "gradients": suite_gradients,
    "filters": suite_filters,
    "nms_oracle": suite_nms_oracle,
    "matching_oracle": suite_matching_oracle,
    "stats_oracle": suite_stats_oracle,
    "pipeline": suite_pipeline,
}


def run_selftest(suites=None, report=print) -> bool:
    names = list(SUITES) if suites is None else list(suites)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise ValueError(f"unknown suites: {bad}; have {list(SUITES)}")
    all_ok = True
    for name in names:
        for res in SUITES[name]():
            mark = "ok" if res.passed else "FAIL"
            detail = f"  ({res.detail})" if res.detail else ""
            report(f"[{mark:>4}] {res.suite}:{res.name}{detail}")
            all_ok = all_ok and res.passed
    report("selftest: all suites passed" if all_ok
           else "selftest: FAILURES detected")
    return all_ok
