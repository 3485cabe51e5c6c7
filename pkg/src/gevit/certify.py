"""Numerical equivariance certification with fresh random weights.

Every check compares "transform, then layer" with "layer, then transform"
and records the max and mean absolute discrepancy. Negative controls are
checks whose *expected* outcome is a large discrepancy; they are reported
but do not affect the overall verdict.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, GlobalNeighborhood, LocalAttention, Neighborhood
from .autograd import Tensor, no_grad, precision
from .groups import GROUP_SPECS, FiniteGroup, make_group, parse_group
from .model import ModelConfig, build
from .posenc import EncoderNet
from .reference import group_attention_loops

THRESHOLDS = {"f64": 1e-10, "f32": 1e-4}
TOKEN_THRESHOLDS = {"f64": 1e-9, "f32": 1e-4}
NEGATIVE_CONTROL_MIN = 1e-3
ORACLE_THRESHOLD = 1e-12


# -- transforms ----------------------------------------------------------------
def element_label(group: FiniteGroup, g: int) -> str:
    deg = round(np.degrees(group.angle(g)), 6)
    deg = int(deg) if float(deg).is_integer() else deg
    return f"{'flip*' if group.is_reflection(g) else ''}rot{deg}"


def transform_planar(f: np.ndarray, group: FiniteGroup, g: int, width: int, height: int) -> np.ndarray:
    """``(L_g f)(x) = f(g⁻¹x)`` on a batch of planar maps ``(B, P, C)``."""
    perm = group.grid_permutation(g, width, height)
    out = np.empty_like(f)
    out[:, perm] = f
    return out


def transform_lifted(f: np.ndarray, group: FiniteGroup, g: int, width: int, height: int) -> np.ndarray:
    """``(L_g f)(x, h) = f(g⁻¹x, g⁻¹h)`` on lifted maps ``(B, P, |H|, C)``."""
    perm = group.grid_permutation(g, width, height)
    out = np.empty_like(f)
    out[:, perm] = f[:, :, group.regular_permutation(g)]
    return out


def translate(f: np.ndarray, dx: int, dy: int, width: int, height: int) -> np.ndarray:
    """Cyclic shift of the pixel axis (axis 1) by ``(dx, dy)`` on a torus."""
    shape = f.shape
    grid = f.reshape((shape[0], height, width) + shape[2:])
    return np.roll(grid, (dy, dx), axis=(1, 2)).reshape(shape)


def _errors(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return float(d.max()), float(d.mean())


# -- report --------------------------------------------------------------------
@dataclass(frozen=True)
class CheckRecord:
    name: str
    group: str
    layer: str
    transformation: str
    max_abs_error: float
    mean_abs_error: float
    precision: str
    threshold: float
    negative_control: bool = False

    @property
    def passed(self) -> bool:
        if self.negative_control:
            return self.max_abs_error >= self.threshold
        return self.max_abs_error <= self.threshold

    @property
    def status(self) -> str:
        if self.negative_control:
            return "expected-fail" if self.passed else "UNEXPECTED-PASS"
        return "pass" if self.passed else "FAIL"


COLUMNS = ("name", "group", "layer", "transformation", "max_abs_error", "mean_abs_error",
           "precision", "threshold", "status")


@dataclass
class CertReport:
    records: list[CheckRecord]

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.name)
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise ValueError("duplicate check names in report")

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.records if not r.negative_control)

    def failures(self) -> list[CheckRecord]:
        return [r for r in self.records if not r.negative_control and not r.passed]

    def __getitem__(self, name: str) -> CheckRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def _rows(self) -> list[list[str]]:
        return [[r.name, r.group, r.layer, r.transformation, f"{r.max_abs_error:.3e}",
                 f"{r.mean_abs_error:.3e}", r.precision, f"{r.threshold:.0e}", r.status]
                for r in self.records]

    def to_text(self) -> str:
        rows = [list(COLUMNS)] + self._rows()
        widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        n_fail = len(self.failures())
        lines.append(f"{len(self.records)} checks, {n_fail} failed: {'OK' if self.ok else 'FAILED'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.records:
            w.writerow([r.name, r.group, r.layer, r.transformation, repr(r.max_abs_error),
                        repr(r.mean_abs_error), r.precision, repr(r.threshold), r.status])
        return buf.getvalue()


# -- layer fixtures ----------------------------------------------------------
def _layer(rng, c_in=4, heads=2, c_head=3, c_out=4) -> LocalAttention:
    return LocalAttention(AttentionParams(c_in, heads, c_head, c_out, rng))


def randomize_encoder(net: EncoderNet, rng) -> EncoderNet:
    """Encoders start at zero; certification needs a non-trivial one."""
    net.fc2.weight.data[...] = rng.uniform(-1, 1, net.fc2.weight.shape)
    net.fc2.bias.data[...] = rng.uniform(-1, 1, net.fc2.bias.shape)
    return net


def encoder(group: FiniteGroup, out_dim: int, radius: int, with_element: bool, rng) -> EncoderNet:
    return randomize_encoder(EncoderNet(group, out_dim, 8, radius, with_element, rng), rng)


# -- individual checks --------------------------------------------------------
def check_group_axioms() -> CheckRecord:
    worst = 0.0
    failures = 0
    for spec in GROUP_SPECS:
        g = parse_group(spec)
        t = g.compose_table
        n = g.order
        idx = np.arange(n)
        failures += int((t[t[:, :, None], idx[None, None, :]] != t[idx[:, None, None], t[None, :, :]]).sum())
        failures += int((t[0] != idx).sum() + (t[:, 0] != idx).sum())
        failures += int((t[idx, g.inverse_table] != 0).sum() + (t[g.inverse_table, idx] != 0).sum())
        for a, b in itertools.product(idx, repeat=2):
            worst = max(worst, float(np.abs(g.matrix(t[a, b]) - g.matrix(a) @ g.matrix(b)).max()))
    return CheckRecord("groups.axioms", "all", "-", "cayley", float(failures) + worst,
                       float(failures), "f64", 1e-12)


def check_twist_covariance() -> CheckRecord:
    failures = 0
    for g in (make_group("cyclic", 4), make_group("dihedral", 4)):
        for hb, a, b in itertools.product(g.elements, repeat=3):
            if g.twist(g.compose(hb, a), g.compose(hb, b)) != g.compose(hb, g.twist(a, b)):
                failures += 1
    return CheckRecord("groups.twist_covariance", "c4,d4", "-", "all triples", float(failures),
                       float(failures), "exact", 0.0)


def check_permutation(seed: int, prec: str = "f64", tokens: int = 6, trials: int = 20) -> CheckRecord:
    rng = np.random.default_rng([seed, 11])
    with precision(prec):
        layer = _layer(rng)
        nb = GlobalNeighborhood(tokens)
        x = rng.standard_normal((1, tokens, 4))
        with no_grad():
            base = layer.plain(Tensor(x), nb).data
            errs = []
            for _ in range(trials):
                pi = rng.permutation(tokens)
                errs.append(_errors(layer.plain(Tensor(x[:, pi]), nb).data, base[:, pi]))
    return CheckRecord("attn.plain.permutation", "-", "plain_mhsa", f"{trials} perms",
                       max(e[0] for e in errs), float(np.mean([e[1] for e in errs])), prec,
                       TOKEN_THRESHOLDS[prec])


def check_abs_pe(seed: int, prec: str = "f64", size: int = 6) -> CheckRecord:
    rng = np.random.default_rng([seed, 12])
    with precision(prec):
        layer = _layer(rng)
        nb = Neighborhood(size, size, 3, "torus")
        x = rng.standard_normal((1, size * size, 4))
        pe = Tensor(rng.standard_normal((size * size, 4)))
        with no_grad():
            out = layer.abs_pe(Tensor(x), nb, pe).data
            moved = layer.abs_pe(Tensor(translate(x, 1, 0, size, size)), nb, pe).data
    mx, mean = _errors(moved, translate(out, 1, 0, size, size))
    return CheckRecord("attn.abs_pe.translation", "-", "abs_pe_mhsa", "shift(1,0)", mx, mean, prec,
                       NEGATIVE_CONTROL_MIN, negative_control=True)


def _shifts(size: int):
    return [(dx, dy) for dy in range(size) for dx in range(size) if (dx, dy) != (0, 0)]


def check_rel_pe(seed: int, prec: str = "f64", size: int = 8, nsize: int = 3) -> CheckRecord:
    rng = np.random.default_rng([seed, 13])
    with precision(prec):
        layer = _layer(rng)
        net = encoder(make_group("cyclic", 1), 4, nsize // 2, False, rng)
        nb = Neighborhood(size, size, nsize, "torus")
        x = rng.standard_normal((1, size * size, 4))
        errs = []
        with no_grad():
            out = layer.rel_pe(Tensor(x), nb, net).data
            for dx, dy in _shifts(size):
                moved = layer.rel_pe(Tensor(translate(x, dx, dy, size, size)), nb, net).data
                errs.append(_errors(moved, translate(out, dx, dy, size, size)))
    return CheckRecord("attn.rel_pe.translation", "-", "rel_pe_mhsa", "all shifts",
                       max(e[0] for e in errs), float(np.mean([e[1] for e in errs])), prec,
                       TOKEN_THRESHOLDS[prec])


def _lifting_setup(group, seed, prec, size, nsize):
    rng = np.random.default_rng([seed, 14])
    layer = _layer(rng)
    net = encoder(group, 4, nsize // 2, False, rng)
    nb = Neighborhood(size, size, nsize, "torus")
    x = rng.standard_normal((2, size * size, 4))
    return layer, net, nb, x


def _group_setup(group, seed, prec, size, nsize, variant="gevit"):
    rng = np.random.default_rng([seed, 15])
    layer = _layer(rng)
    net = encoder(group, 4, nsize // 2, True, rng)
    nb = Neighborhood(size, size, nsize, "torus")
    x = rng.standard_normal((1, size * size, group.order, 4))
    return layer, net, nb, x


def check_lifting(group: FiniteGroup, seed: int, prec: str = "f64", size: int = 8,
                  nsize: int = 5) -> list[CheckRecord]:
    out = []
    with precision(prec), no_grad():
        layer, net, nb, x = _lifting_setup(group, seed, prec, size, nsize)
        base = layer.lifting(Tensor(x), nb, net).data
        for g in group.exact_elements(size, size):
            if g == group.identity:
                continue
            moved = layer.lifting(Tensor(transform_planar(x, group, g, size, size)), nb, net).data
            mx, mean = _errors(moved, transform_lifted(base, group, g, size, size))
            label = element_label(group, g)
            out.append(CheckRecord(f"lifting.{group.name}.{label}.{prec}", group.name, "lifting",
                                   label, mx, mean, prec, THRESHOLDS[prec]))
        errs = [_errors(layer.lifting(Tensor(translate(x, dx, dy, size, size)), nb, net).data,
                        translate(base, dx, dy, size, size)) for dx, dy in _shifts(size)]
    out.append(CheckRecord(f"lifting.{group.name}.translation.{prec}", group.name, "lifting",
                           "all shifts", max(e[0] for e in errs), float(np.mean([e[1] for e in errs])),
                           prec, THRESHOLDS[prec]))
    return out


def check_group(group: FiniteGroup, seed: int, prec: str = "f64", size: int = 6, nsize: int = 5,
                variant: str = "gevit") -> list[CheckRecord]:
    negative = variant != "gevit"
    thr = NEGATIVE_CONTROL_MIN * 10 if negative else THRESHOLDS[prec]
    tag = "" if variant == "gevit" else f".{variant}"
    out = []
    with precision(prec), no_grad():
        layer, net, nb, x = _group_setup(group, seed, prec, size, nsize)
        base = layer.group(Tensor(x), nb, net, variant).data
        for g in group.exact_elements(size, size):
            if g == group.identity:
                continue
            moved = layer.group(Tensor(transform_lifted(x, group, g, size, size)), nb, net, variant).data
            mx, mean = _errors(moved, transform_lifted(base, group, g, size, size))
            label = element_label(group, g)
            out.append(CheckRecord(f"group.{group.name}.{label}.{prec}{tag}", group.name,
                                   f"group_attention[{variant}]", label, mx, mean, prec, thr,
                                   negative_control=negative))
        errs = [_errors(layer.group(Tensor(translate(x, dx, dy, size, size)), nb, net, variant).data,
                        translate(base, dx, dy, size, size)) for dx, dy in _shifts(size)]
    # translations commute with both encodings, so this stays a positive check
    out.append(CheckRecord(f"group.{group.name}.translation.{prec}{tag}", group.name,
                           f"group_attention[{variant}]", "all shifts", max(e[0] for e in errs),
                           float(np.mean([e[1] for e in errs])), prec, THRESHOLDS[prec]))
    return out


def check_dense_oracle(seed: int, size: int = 3, nsize: int = 3) -> CheckRecord:
    group = make_group("cyclic", 4)
    with precision("f64"), no_grad():
        rng = np.random.default_rng([seed, 16])
        layer = _layer(rng)
        net = encoder(group, 4, nsize // 2, True, rng)
        nb = Neighborhood(size, size, nsize, "torus")
        x = rng.standard_normal((1, size * size, group.order, 4))
        fast = layer.group(Tensor(x), nb, net).data[0]
        slow = group_attention_loops(x[0], layer.p, net, size, size, nsize)
    mx, mean = _errors(fast, slow)
    return CheckRecord("oracle.group_attention.c4", "c4", "group_attention", "loops vs batched",
                       mx, mean, "f64", ORACLE_THRESHOLD)


def check_model_invariance(cfg: ModelConfig, seed: int, prec: str, size: int = 8) -> CheckRecord:
    group = parse_group(cfg.group)
    small = cfg.replace(image_size=size, boundary="torus", precision=prec, embed_dim=4, heads=2,
                        head_dim=3, mlp_hidden=6, pe_hidden_width=6, blocks=1)
    model = build(small, seed).eval()
    for m in model.modules():
        if isinstance(m, EncoderNet):
            randomize_encoder(m, np.random.default_rng([seed, 17]))
    rng = np.random.default_rng([seed, 18])
    x = rng.uniform(0, 1, (2, size * size, 1))
    errs = []
    with no_grad():
        base = model(x.reshape(2, size, size)).data
        for g in group.exact_elements(size, size):
            moved = transform_planar(x, group, g, size, size).reshape(2, size, size)
            errs.append(_errors(model(moved).data, base))
    thr = THRESHOLDS[prec] if prec == "f64" else 1e-4
    return CheckRecord(f"model.invariance.{group.name}.{prec}", group.name, "model logits",
                       "exact elements", max(e[0] for e in errs), float(np.mean([e[1] for e in errs])),
                       prec, thr)


def run_checks(cfg: ModelConfig, seed: int = 0, prec: str | None = None) -> CertReport:
    """The full suite for the configured group and encoding variant."""
    prec = prec or "f64"
    group = parse_group(cfg.group)
    recs = [check_group_axioms(), check_twist_covariance(), check_permutation(seed, prec),
            check_abs_pe(seed, prec), check_rel_pe(seed, prec)]
    recs += check_lifting(group, seed, prec, nsize=cfg.neighborhood)
    recs += check_group(group, seed, prec, nsize=cfg.neighborhood, variant=cfg.pe_variant)
    if cfg.pe_variant != "gevit":
        recs += check_group(group, seed, prec, nsize=cfg.neighborhood)
    if cfg.pe_variant == "gevit":
        recs.append(check_model_invariance(cfg, seed, prec))
    recs.append(check_dense_oracle(seed))
    return CertReport(recs)
