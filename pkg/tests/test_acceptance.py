"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; ``conftest.py`` prints them at the end of the run.
Run just this file with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from jsms import flow as F
from jsms import netgraph as ng
from jsms import tensor as T
from jsms import train as tr
from jsms.context import build_context, insert_context
from jsms.metrics import ConfusionMatrix, Evaluation, iou, ppv
from jsms.rasters import ClassCatalog
from jsms.synth import generate_dataset, save_dataset
from jsms.weights import TransferPlan, init_state, transfer_extend_head

from oracles import confusion_loop, conv_direct, numeric_grad, rel_error

RESULTS: list[str] = []


def record(name, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(RESULTS[-1])
    assert ok, detail


# -- conv oracle -------------------------------------------------------------

def test_conv_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(200):
        d = int(rng.choice([1, 2, 4]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.choice([0, 1, 2]))
        k = int(rng.choice([1, 2, 3]))
        mode = "reflect" if case % 4 == 3 else "zero"
        span = (k - 1) * d + 1
        h = int(rng.integers(max(span - 2 * pad, pad + 1, 3), 14))
        w = int(rng.integers(max(span - 2 * pad, pad + 1, 3), 14))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), cin, h, w)).astype(np.float32)
        wt = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        p = T.ConvParams(k, k, stride, d, pad, mode)
        got = T.dilated_conv2d(x, wt, b, p)
        ref = conv_direct(x, wt, b, stride, d, pad, mode)
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref))))
    el = time.perf_counter() - t0
    record("conv oracle", worst <= 1e-5 and el < 30, f"200 cases, max |diff| {worst:.2e} (<= 1e-5), {el:.1f}s (< 30s)")


# -- gradient suite -----------------------------------------------------------

def _check(fn, inputs, rng, n_coords=10, h=1e-3):
    """Taped gradients of sum(fn(*inputs) * u) against central differences."""
    tape = T.GradTape()
    out = fn(*inputs, tape)
    u = rng.normal(size=out.shape)
    tape.backward(out, u)
    worst = 0.0
    for x in inputs:
        coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
        num = numeric_grad(lambda: float((fn(*inputs, None) * u).sum()), x, h=h, coords=coords)
        g = tape.grad(x)
        g = np.zeros_like(x) if g is None else g
        worst = max(worst, float(rel_error(g.reshape(-1)[coords], num.reshape(-1)[coords]).max()))
    return worst


def _spaced(rng, shape):
    # distinct values at least 0.01 apart, so max and relu kinks sit far from the probe step
    v = (rng.permutation(int(np.prod(shape))) - np.prod(shape) / 2) * 0.01 + 0.005
    return v.reshape(shape).astype(np.float64)


def _grad_trials():
    rng = np.random.default_rng(7)
    trials = []
    for _ in range(30):
        d, s, pad = int(rng.choice([1, 2, 4])), int(rng.choice([1, 2])), int(rng.choice([0, 1, 2]))
        mode = str(rng.choice(["zero", "reflect"]))
        p = T.ConvParams(3, 3, s, d, pad, mode)
        n = 2 * d + 4
        args = [rng.normal(size=(1, 2, n, n + 1)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)]
        trials.append(("conv", lambda x, w, b, t, p=p: T.dilated_conv2d(x, w, b, p, t), args))
    for _ in range(10):
        trials.append(("max_pool", lambda x, t: T.max_pool2d(x, 2, t), [_spaced(rng, (1, 2, 6, 8))]))
    for _ in range(10):
        trials.append(("relu", T.relu, [_spaced(rng, (2, 3, 4, 4))]))
    for _ in range(10):
        trials.append(("softmax", T.softmax_channels, [rng.normal(size=(2, 4, 3, 3))]))
    for _ in range(10):
        oh, ow = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        trials.append(("bilinear", lambda x, t, oh=oh, ow=ow: T.bilinear_resize(x, oh, ow, t), [rng.normal(size=(1, 2, 4, 5))]))
    for _ in range(5):
        trials.append(("add", T.add, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 1, 4, 4))]))
        trials.append(("mul", T.mul, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(4, 4))]))
        trials.append(("scale", lambda x, t: T.scale(x, 1.7, t), [rng.normal(size=(3, 5))]))
        amp = F.normalize_quantize(rng.uniform(0, 5, size=(5, 5))).astype(np.float64)
        trials.append(("amplify", lambda x, t, a=amp: F.amplify(x, a, t), [rng.normal(size=(1, 3, 5, 5))]))
    return trials


def _loss_trials(rng, n):
    out = []
    for _ in range(n):
        logits = rng.normal(size=(2, 6, 3, 4))
        labels = rng.integers(0, 6, size=(2, 3, 4)).astype(np.uint8)
        labels[0, 0, 0] = 255
        _, g = tr.softmax_xent_loss(logits, labels)
        coords = rng.choice(logits.size, 12, replace=False)
        num = numeric_grad(lambda: tr.softmax_xent_loss(logits, labels)[0], logits, coords=coords)
        out.append(float(rel_error(g.reshape(-1)[coords], num.reshape(-1)[coords]).max()))
    return out


def _network_trials(rng):
    cat = ClassCatalog.toy(6)
    base = init_state(ng.build_front_end("toy", 6), seed=0)
    joint = tr.prepare_stage("joint", base, cat)
    ctx = tr.prepare_stage("joint_context", joint, cat)
    out = []
    for state in (base, joint, ctx):
        p64 = ng.NetworkState(state.spec, {k: v.astype(np.float64) for k, v in state.params.items()})
        if state is ctx:
            # move off the identity init so every context layer carries gradient
            for k in p64.params:
                if k.startswith("ctx"):
                    p64.params[k] = p64.params[k] + rng.normal(scale=0.05, size=p64.params[k].shape)
        for _ in range(4):
            x = rng.normal(size=(1, 3, 16, 16))
            y = rng.integers(0, 6, size=(1, 4, 4)).astype(np.uint8)
            amp = rng.uniform(1, 2, size=(1, 1, 4, 4)) if state.spec.has_amplify else None
            tape = T.GradTape()
            logits = ng.forward(p64, x, amp, tape)
            _, g = tr.softmax_xent_loss(logits, y)
            tape.backward(logits, g)
            worst = 0.0
            names = [n for n in p64.trainable_names() if n.endswith("weight")]
            for name in rng.choice(names, size=3, replace=False):
                p = p64.params[name]
                coords = rng.choice(p.size, size=min(4, p.size), replace=False)
                num = numeric_grad(lambda: tr.softmax_xent_loss(ng.forward(p64, x, amp), y)[0], p, h=1e-6, coords=coords)
                worst = max(worst, float(rel_error(tape.grad(p).reshape(-1)[coords], num.reshape(-1)[coords]).max()))
            out.append(worst)
    return out


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    errors = {}
    for name, fn, args in _grad_trials():
        errors.setdefault(name, []).append(_check(fn, args, rng))
    errors["xent_loss"] = _loss_trials(rng, 5)
    errors["toy_network"] = _network_trials(rng)
    el = time.perf_counter() - t0
    n = sum(len(v) for v in errors.values())
    worst = max(max(v) for v in errors.values())
    per_op = ", ".join(f"{k} {max(v):.1e}" for k, v in errors.items())
    ok = worst <= 1e-3 and n >= 100 and el < 120
    record("gradient suite", ok, f"{n} trials, max rel err {worst:.2e} (<= 1e-3), {el:.1f}s (< 120s) [{per_op}]")


# -- initialisation ------------------------------------------------------------

def test_identity_init():
    rng = np.random.default_rng(1)
    module = build_context(64)
    worst = 0.0
    for _ in range(20):
        # context input is post-ReLU, so nonnegative
        x = np.abs(rng.normal(size=(1, 64, int(rng.integers(8, 24)), int(rng.integers(8, 24))))).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(ng.forward(module, x) - x))))
    state = init_state(ng.with_amplify(ng.build_front_end("toy", 6)), seed=2)
    after = insert_context(state)
    same = 0
    for _ in range(20):
        x = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
        amp = rng.uniform(1, 2, size=(1, 1, 8, 8)).astype(np.float32)
        a, b = ng.forward(state, x, amp), ng.forward(after, x, amp)
        pa, pb = ng.predict_labels(state, x, amp), ng.predict_labels(after, x, amp)
        same += a.tobytes() == b.tobytes() and pa.tobytes() == pb.tobytes()
    record("identity init", worst == 0 and same == 20,
           f"max |module(x)-x| = {worst} over 20 inputs; {same}/20 pipelines bitwise unchanged")


def test_transfer_init():
    rng = np.random.default_rng(2)
    src = init_state(ng.build_front_end("toy", 5), seed=3)
    target = src.spec.with_layers(replace(l, out_channels=6) if l.role_tag == "head" else l for l in src.spec.layers)
    dst = transfer_extend_head(TransferPlan(src, target, 5, 1), seed=4)
    same = 0
    for _ in range(20):
        x = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
        same += ng.forward(dst, x)[:, :5].tobytes() == ng.forward(src, x).tobytes()
    record("transfer init", same == 20, f"C=5, M=1: {same}/20 inputs with bitwise-equal semantic logits")


# -- freeze contract ------------------------------------------------------------

def test_freeze_contract():
    cat = ClassCatalog.toy(6)
    samples = [s for s in generate_dataset(10, seed=5) if s.split == "train"]
    state = tr.prepare_stage("joint", init_state(ng.build_front_end("toy", 6), seed=5), cat)
    frozen = [l.name for l in state.spec.convs if l.freeze]
    before = state.checksum(frozen)
    fc = {n: state.params[n].copy() for n in state.trainable_names()}
    _, losses = tr.run_stage(tr.TrainConfig("joint", 1e-2, 0.9, 100, 1, 32, seed=5), state, samples, cat)
    changed = [n for n in fc if not np.array_equal(fc[n], state.params[n])]
    ok = min(losses) > 0 and state.checksum(frozen) == before and any(n.startswith("fc") for n in changed)
    record("freeze contract", ok,
           f"100 steps, min loss {min(losses):.3f}; {len(frozen)} frozen checksums unchanged: "
           f"{state.checksum(frozen) == before}; {len(changed)} trainable tensors changed")


# -- amplifier map ---------------------------------------------------------------

def test_amplifier_map():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(100):
        h, w = int(rng.integers(8, 65)), int(rng.integers(8, 65))
        flow = rng.normal(scale=rng.uniform(0.1, 10), size=(h, w, 2)).astype(np.float32)
        full = F.amplifier_map(flow, h, w)
        grid = F.amplifier_map(flow, max(1, h // 4), max(1, w // 4))
        k = np.rint((full.astype(np.float64) - 1) * 255)
        levels = np.array_equal(full, (1 + k / 255).astype(np.float32)) and k.min() == 0 and k.max() == 255
        bad += not (levels and 1 <= full.min() and full.max() <= 2 and 1 <= grid.min() and grid.max() <= 2)
    flow = np.zeros((64, 64, 2), np.float32)
    flow[..., 0] = -1
    flow[24:40, 12:32] = (4, 3)
    amp = F.amplifier_map(flow, 16, 16)
    ys, xs = np.nonzero(amp == 2.0)
    inside = len(ys) > 0 and ys.min() >= 6 and ys.max() <= 9 and xs.min() >= 3 and xs.max() <= 7
    record("amplifier map", bad == 0 and inside,
           f"{100 - bad}/100 fields in [1,2] on 256 levels; level 255 reached inside the fast region's footprint: {inside}")


# -- metrics -------------------------------------------------------------------

def test_metrics():
    rng = np.random.default_rng(4)
    exact = order = 0
    for _ in range(50):
        k = int(rng.integers(2, 8))
        gt = rng.integers(0, k, size=(int(rng.integers(4, 20)), int(rng.integers(4, 20)))).astype(np.uint8)
        gt[rng.random(gt.shape) < 0.05] = 255
        pred = rng.integers(0, k, size=gt.shape).astype(np.uint8)
        cm = ConfusionMatrix(k).accumulate(pred, gt)
        tp, fp, fn, tn = confusion_loop(pred, gt, k)
        exact += (cm.tp.tolist(), cm.fp.tolist(), cm.fn.tolist(), cm.tn.tolist()) == (tp, fp, fn, tn)
        ok = True
        for c in range(k):
            ref_iou = tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else math.nan
            i, p = iou(cm, c), ppv(cm, c)
            ok &= (math.isnan(i) and math.isnan(ref_iou)) or i == ref_iou
            ok &= math.isnan(p) or i <= p
        order += ok
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [1, 0]]
    six = iou(cm, 0)
    record("metrics", exact == 50 and order == 50 and six == 0.6,
           f"{exact}/50 match the pixel loop, {order}/50 with exact IoU and IoU <= PPV; TP=3 FP=1 FN=1 -> IoU {six!r}")


# -- receptive field -------------------------------------------------------------

def _footprint(convs, size):
    x = np.ones((1, 1, size, size))
    tape = T.GradTape()
    h = x
    for d, relu in convs:
        h = T.dilated_conv2d(h, np.ones((1, 1, 3, 3)), np.zeros(1), T.ConvParams(dilation=d, pad=d), tape)
        if relu:
            h = T.relu(h, tape)
    up = np.zeros_like(h)
    up[0, 0, size // 2, size // 2] = 1.0
    tape.backward(h, up)
    ys, xs = np.nonzero(tape.grad(x)[0, 0])
    return ys.max() - ys.min() + 1, xs.max() - xs.min() + 1, len(ys)


def test_receptive_field():
    a = _footprint([(1, False), (2, False), (4, False)], 31)
    module = build_context(1)
    convs = [(l.dilation, i < 6) for i, l in enumerate(module.spec.convs)]
    b = _footprint(convs, 81)
    record("receptive field", a == (15, 15, 225) and b == (67, 67, 67 * 67),
           f"dilations 1,2,4 -> {a[0]}x{a[1]}; context stack -> {b[0]}x{b[1]}")


# -- end to end ------------------------------------------------------------------

E2E_SEEDS = (0, 1, 2)
STAGE_ORDER = ("semantic", "baseline", "joint", "joint_context")


def run_pipeline(seed, stages=None):
    """Generate 160/40 samples and train every stage; returns per-stage (moving IoU, stationary mIoU)."""
    stages = stages or tr.TOY_STAGES
    cat = ClassCatalog.toy(6)
    ds = generate_dataset(200, seed=seed)
    train = [s for s in ds if s.split == "train"]
    val = [s for s in ds if s.split == "val"]
    state, scores = None, {}
    for st in STAGE_ORDER:
        state = tr.prepare_stage(st, state, cat, seed)
        state, _ = tr.run_stage(replace(stages[st], seed=seed), state, train, cat)
        if st != "semantic":
            ev = tr.evaluate(state, val, cat)
            scores[st] = (ev.class_iou("moving-box"), ev.stationary_mean_iou())
    return scores, state


@pytest.mark.slow
def test_end_to_end():
    budget = sum(tr.TOY_STAGES[s].iterations for s in STAGE_ORDER)
    t0 = time.perf_counter()
    runs = {}
    for seed in E2E_SEEDS:
        runs[seed], _ = run_pipeline(seed)
        b, j, c = (runs[seed][s] for s in ("baseline", "joint", "joint_context"))
        print(f"  seed {seed}: moving-box IoU baseline {b[0]:.3f} joint {j[0]:.3f} context {c[0]:.3f}; "
              f"stationary mIoU {c[1]:.3f}")
    el = time.perf_counter() - t0
    mov = {s: [runs[k][s][0] for k in E2E_SEEDS] for s in ("baseline", "joint", "joint_context")}
    stat = [runs[k]["joint_context"][1] for k in E2E_SEEDS]
    a = all(j >= b - 0.01 for b, j in zip(mov["baseline"], mov["joint"])) and \
        sum(j > b for b, j in zip(mov["baseline"], mov["joint"])) >= 2
    b_ = all(c >= j - 0.01 for j, c in zip(mov["joint"], mov["joint_context"])) and \
        sum(c > j for j, c in zip(mov["joint"], mov["joint_context"])) >= 2
    c_ = min(mov["joint_context"]) >= 0.50
    d_ = min(stat) >= 0.70
    e_ = el <= 15 * 60 and budget <= 2000
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)
    record("end-to-end", a and b_ and c_ and d_ and e_,
           f"moving IoU baseline {fmt(mov['baseline'])} -> joint {fmt(mov['joint'])} -> context "
           f"{fmt(mov['joint_context'])}; stationary mIoU {fmt(stat)}; {budget} iters/seed, {el:.0f}s for 3 seeds "
           f"[a={a} b={b_} c={c_} d={d_} e={e_}]")


# -- determinism ----------------------------------------------------------------

def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(tmp_path):
    cat = ClassCatalog.toy(6)
    small = {s: replace(c, iterations=5, batch_size=2, crop_size=32) for s, c in tr.TOY_STAGES.items()}
    out = []
    for run in ("a", "b"):
        root = tmp_path / run
        ds = generate_dataset(12, seed=9)
        save_dataset(root / "data", ds, cat, manifest={"seed": 9})
        train = [s for s in ds if s.split == "train"]
        val = [s for s in ds if s.split == "val"]
        state = None
        for st in STAGE_ORDER:
            state = tr.prepare_stage(st, state, cat, 9)
            state, _ = tr.run_stage(replace(small[st], seed=9), state, train, cat)
            ng.save_checkpoint(state, root / f"{st}.jsms")
        (root / "report.txt").write_text(tr.evaluate(state, val, cat).report())
        out.append(_tree_bytes(root))
    data = all(out[0][k] == out[1][k] for k in out[0] if k.startswith("data/"))
    ckpt = all(out[0][k] == out[1][k] for k in out[0] if ".jsms" in k)
    rep = out[0]["report.txt"] == out[1]["report.txt"]
    record("determinism", out[0] == out[1],
           f"dataset identical: {data}; {len(STAGE_ORDER)} checkpoints identical: {ckpt}; eval report identical: {rep}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
