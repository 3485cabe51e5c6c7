"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
Criterion 10 trains the desk-scale model and takes several minutes.
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from gevit import autograd as ag
from gevit.autograd import Tensor, finite_diff_check, no_grad, precision
from gevit.certify import (check_abs_pe, check_dense_oracle, check_group, check_lifting,
                           check_permutation, check_rel_pe, randomize_encoder, transform_planar)
from gevit.cli import rotate_split
from gevit.groups import GROUP_SPECS, make_group, parse_group
from gevit.model import build, loss
from gevit.posenc import EncoderNet
from gevit.train import evaluate, fit, load_configs, make_splits

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.txt"


def report(lines, number, ok, detail):
    line = f"criterion {number:02d} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    lines.append(line)
    assert ok, line


def desk():
    return load_configs(DESK_CONFIG)


# 1 -------------------------------------------------------------------------
def test_criterion_01_group_axioms(acceptance_report):
    t0 = time.perf_counter()
    failures, hom = 0, 0.0
    for spec in GROUP_SPECS:
        g = parse_group(spec)
        T, inv = g.compose_table, g.inverse_table
        for a, b in itertools.product(g.elements, repeat=2):
            c = T[a, b]
            failures += not (0 <= c < g.order)                        # closure
            hom = max(hom, float(np.abs(g.matrix(c) - g.matrix(a) @ g.matrix(b)).max()))
            for d in g.elements:
                failures += T[c, d] != T[a, T[b, d]]                  # associativity
        for a in g.elements:
            failures += T[0, a] != a or T[a, 0] != a                   # identity
            failures += T[a, inv[a]] != 0 or T[inv[a], a] != 0         # inverse
    dt = time.perf_counter() - t0
    report(acceptance_report, 1, failures == 0 and hom < 1e-12 and dt < 1.0,
           f"axiom failures={failures} homomorphism err={hom:.1e} runtime={dt:.2f}s")


# 2 -------------------------------------------------------------------------
PRIMITIVES = {
    "add": lambda t, o: ((t + o) ** 2).sum(),
    "sub": lambda t, o: ((t - o) ** 2).sum(),
    "mul": lambda t, o: (t * o * t).sum(),
    "div": lambda t, o: (t / (o * o + 1.0)).sum(),
    "pow": lambda t, o: ((t * t + 1.0) ** 1.5 * o).sum(),
    "exp": lambda t, o: (t.exp() * o).sum(),
    "log": lambda t, o: ((t * t + 0.5).log() * o).sum(),
    "matmul": lambda t, o: ((t @ o.transpose(1, 0)) ** 2).sum(),
    "softmax": lambda t, o: (ag.softmax(t) * o).sum(),
    "log_softmax": lambda t, o: (ag.log_softmax(t) * o).sum(),
    "sigmoid": lambda t, o: (ag.sigmoid(t) * o).sum(),
    "swish": lambda t, o: (ag.swish(t) * o).sum(),
    "layer_norm": lambda t, o: (ag.layer_norm(t, o[0] + 1.0, o[1]) * o).sum(),
    "sum": lambda t, o: ((t * o).sum(axis=1) ** 2).sum(),
    "mean": lambda t, o: ((t * o).mean(axis=0) ** 2).sum(),
    "max": lambda t, o: (t.max(axis=1) ** 2).sum(),
    "reshape_transpose": lambda t, o: ((t.transpose(1, 0).reshape(-1) * o.transpose(1, 0).reshape(-1)) ** 2).sum(),
    "getitem": lambda t, o: (t[1:, ::2] ** 2).sum(),
    "take": lambda t, o: (ag.take(t, np.array([[0, 2], [3, 1]]), axis=1) ** 2).sum(),
    "concat": lambda t, o: (ag.concat([t, o * t], axis=0) ** 2).sum(),
    "cross_entropy": lambda t, o: ag.cross_entropy(t, np.array([0, 3, 1])),
}


def test_criterion_02_finite_differences(acceptance_report):
    t0 = time.perf_counter()
    worst = {}
    with precision("f64"):
        for name, f in PRIMITIVES.items():
            for seed in range(3):
                rng = np.random.default_rng(seed)
                x, o = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
                worst[name] = max(worst.get(name, 0.0), finite_diff_check(lambda t: f(t, o), x))
    mcfg, _ = desk()
    mcfg = mcfg.replace(precision="f64", image_size=5, attn_dropout=0.0, value_dropout=0.0)
    model = build(mcfg, 0)
    n_params = model.num_parameters()
    for net in model.modules():
        if isinstance(net, EncoderNet):
            randomize_encoder(net, np.random.default_rng(1))
    images = np.random.default_rng(2).uniform(0, 1, (2, 5, 5))
    labels = np.array([3, 8])
    model.eval()
    loss(model(images), labels).backward()
    rng = np.random.default_rng(3)
    model_err, coords = 0.0, 0
    eps = 1e-6
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        idx = rng.choice(flat.size, min(flat.size, 12), replace=False)
        for i in idx:
            orig = flat[i]
            vals = []
            for step in (eps, -eps):
                flat[i] = orig + step
                with no_grad():
                    vals.append(float(loss(model(images), labels).data))
            flat[i] = orig
            num = (vals[0] - vals[1]) / (2 * eps)
            model_err = max(model_err, abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1e-3))
            coords += 1
    dt = time.perf_counter() - t0
    prim = max(worst.values())
    ok = prim < 1e-4 and model_err < 1e-4 and n_params < 5000 and dt < 120
    report(acceptance_report, 2, ok,
           f"primitives={len(worst)} max rel err={prim:.1e}; model params={n_params} "
           f"coords={coords} max rel err={model_err:.1e}; runtime={dt:.0f}s")


# 3-5 -------------------------------------------------------------------------
def test_criterion_03_permutation_equivariance(acceptance_report):
    r = check_permutation(seed=0, prec="f64", tokens=6, trials=20)
    report(acceptance_report, 3, r.max_abs_error < 1e-9, f"20 perms of 6 tokens max diff={r.max_abs_error:.1e}")


def test_criterion_04_absolute_encoding_negative_control(acceptance_report):
    r = check_abs_pe(seed=0, prec="f64")
    report(acceptance_report, 4, r.max_abs_error > 1e-3,
           f"translation violation={r.max_abs_error:.2e} (must exceed 1e-3)")


def test_criterion_05_relative_encoding_translation(acceptance_report):
    r = check_rel_pe(seed=0, prec="f64", size=8)
    report(acceptance_report, 5, r.max_abs_error < 1e-9, f"8x8 torus, 63 shifts, max diff={r.max_abs_error:.1e}")


# 6-8 -------------------------------------------------------------------------
def layer_errors(variant="gevit"):
    out = {}
    for spec in ("c4", "d4", "c8", "d8"):
        g = parse_group(spec)
        for prec in ("f64", "f32"):
            recs = check_group(g, 0, prec, size=6, nsize=5, variant=variant)
            if variant == "gevit":
                recs += check_lifting(g, 0, prec, size=8, nsize=5)
            out[(spec, prec)] = recs
    return out


def test_criterion_06_layer_equivariance(acceptance_report):
    errs = layer_errors()
    worst = {p: max(r.max_abs_error for (s, q), recs in errs.items() if q == p for r in recs)
             for p in ("f64", "f32")}
    n = sum(len(v) for v in errs.values())
    elems = {(s, r.transformation) for (s, _), recs in errs.items() for r in recs}
    ok = worst["f64"] < 1e-10 and worst["f32"] < 1e-4
    report(acceptance_report, 6, ok, f"{n} checks over {len(elems)} group/transform pairs: "
           f"max f64={worst['f64']:.1e} max f32={worst['f32']:.1e}")


def test_criterion_07_baseline_encoding_gap(acceptance_report):
    base = []
    good = []
    for spec in ("c4", "d4"):
        g = parse_group(spec)
        base += [r for r in check_group(g, 0, "f64", size=6, nsize=5, variant="baseline")
                 if r.transformation != "all shifts"]
        good += check_group(g, 0, "f64", size=6, nsize=5)
    b = max(r.max_abs_error for r in base)
    e = max(r.max_abs_error for r in good)
    report(acceptance_report, 7, b >= 1e-2 and b >= 1e3 * e,
           f"baseline rotation error={b:.2e} vs twist encoding={e:.1e} (ratio {b / max(e, 1e-300):.0e})")


def test_criterion_08_dense_oracle(acceptance_report):
    r = check_dense_oracle(seed=0)
    report(acceptance_report, 8, r.max_abs_error < 1e-12, f"3x3 c4 loops vs batched max diff={r.max_abs_error:.1e}")


# 9-10 ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    mcfg, tcfg = desk()
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    train, val, test = make_splits(tcfg)
    summary = fit(mcfg, tcfg, out, train, val)
    summary["total_seconds"] = time.perf_counter() - t0
    summary.update(out=out, mcfg=mcfg, tcfg=tcfg, train=train, val=val, test=test)
    return summary


def test_criterion_09_end_to_end_invariance(acceptance_report, trained):
    mcfg, tcfg = trained["mcfg"], trained["tcfg"]
    # logits of a torus-boundary model with nonzero encodings, and of the trained model
    torus = build(mcfg.replace(boundary="torus", precision="f32"), 5)
    for net in torus.modules():
        if isinstance(net, EncoderNet):
            randomize_encoder(net, np.random.default_rng(6))
    model = build(mcfg, tcfg.seed)
    model.load(trained["out"] / "best.gevt")
    s = mcfg.image_size
    x = trained["test"].images[:16]
    c4 = make_group("cyclic", 4)
    worst = 0.0
    with no_grad():
        for m in (torus.eval(), model.eval()):
            base = m(x).data
            for k in (1, 2, 3):
                moved = transform_planar(x.reshape(16, s * s, 1), c4, k, s, s).reshape(16, s, s)
                worst = max(worst, float(np.abs(m(moved).data - base).max()))
    # paired evaluation on an exact-right-angle test copy
    _, _, test90 = make_splits(tcfg.__class__(**{**tcfg.__dict__, "angle_mode": "exact90"}))
    acc = evaluate(model, test90)["accuracy"]
    acc_rot = evaluate(model, rotate_split(test90))["accuracy"]
    report(acceptance_report, 9, worst < 1e-4 and acc == acc_rot,
           f"max logit diff under rotation={worst:.1e} (f32); exact90 acc={acc:.4f} rotated={acc_rot:.4f}")


def test_criterion_10_desk_scale_training(acceptance_report, trained):
    mcfg, tcfg = trained["mcfg"], trained["tcfg"]
    best = trained["best_val_acc"]
    secs = trained["total_seconds"]
    model = build(mcfg, tcfg.seed)
    model.load(trained["out"] / "best.gevt")
    test_acc = evaluate(model, trained["test"])["accuracy"]
    # replay the first epoch from scratch and compare the loss trajectory bitwise
    n = int(np.ceil(tcfg.train_count / tcfg.batch_size))
    replay = fit(mcfg, tcfg, None, trained["train"], trained["val"], max_steps=n)["losses"]
    same = replay == trained["losses"][:n]
    losses = trained["losses"]
    ok = best >= 0.75 and secs < 30 * 60 and same and tcfg.epochs <= 10
    accs = " ".join(f"{a:.3f}" for a in trained["val_acc"])
    report(acceptance_report, 10, ok,
           f"best held-out acc={best:.4f} (per epoch: {accs}); test acc of best={test_acc:.4f}; "
           f"runtime={secs / 60:.1f} min; first-epoch replay bit-identical={same} "
           f"({n} steps); loss {np.mean(losses[:n]):.3f}->{np.mean(losses[-n:]):.3f}")


# 11 ------------------------------------------------------------------------
def test_criterion_11_twist_covariance(acceptance_report):
    failures, total = 0, 0
    for g in (make_group("cyclic", 4), make_group("dihedral", 4)):
        T, inv = g.compose_table, g.inverse_table
        for hb, hq, hk in itertools.product(g.elements, repeat=3):
            a, b = T[hb, hq], T[hb, hk]
            lhs = T[T[a, inv[b]], a]
            rhs = T[hb, T[T[hq, inv[hk]], hq]]
            failures += lhs != rhs
            total += 1
    report(acceptance_report, 11, failures == 0, f"{total} triples over c4 and d4, failures={failures}")
