"""GE-ViT classifier: pixel embedding, lifting attention, group attention blocks, pooling."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .attention import BOUNDARIES, AttentionParams, LocalAttention, Neighborhood
from .autograd import Tensor, cross_entropy, precision, swish
from .groups import FiniteGroup, parse_group
from .nn import LayerNorm, Linear, Module
from .posenc import PE_VARIANTS, EncoderNet


@dataclass
class ModelConfig:
    group: str = "c4"
    neighborhood: int = 5
    image_size: int = 28
    embed_dim: int = 8
    heads: int = 4
    head_dim: int = 8
    blocks: int = 2
    mlp_hidden: int = 16
    classes: int = 10
    pe_hidden_width: int = 16
    pe_share_heads: bool = True
    pe_variant: str = "gevit"
    attn_dropout: float = 0.1
    value_dropout: float = 0.1
    boundary: str = "torus"
    scale_scores: bool = False
    input_mean: float = 0.0
    input_std: float = 1.0
    precision: str = "f32"

    def validate(self) -> None:
        problems = []
        try:
            parse_group(self.group)
        except ValueError as exc:
            problems.append(str(exc))
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            problems.append(f"neighborhood must be odd and >= 1 (got {self.neighborhood})")
        for name in ("image_size", "embed_dim", "heads", "head_dim", "mlp_hidden", "classes",
                     "pe_hidden_width"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.blocks < 0:
            problems.append(f"blocks must be >= 0 (got {self.blocks})")
        if self.pe_variant not in PE_VARIANTS:
            problems.append(f"pe_variant must be one of {PE_VARIANTS} (got {self.pe_variant!r})")
        if self.boundary not in BOUNDARIES:
            problems.append(f"boundary must be one of {BOUNDARIES} (got {self.boundary!r})")
        if not self.input_std > 0:
            problems.append(f"input_std must be > 0 (got {self.input_std})")
        if self.precision not in ("f32", "f64"):
            problems.append(f"precision must be f32 or f64 (got {self.precision!r})")
        for name in ("attn_dropout", "value_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    # key=value text form
    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> ModelConfig:
        return cls(**parse_kv(text, cls))

    @classmethod
    def load(cls, path) -> ModelConfig:
        return cls.loads(Path(path).read_text())


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_kv(text: str, cls, strict: bool = True) -> dict:
    """Parse ``key=value`` lines (``#`` comments allowed) against a dataclass' fields."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            if strict:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            continue
        out[key] = _coerce(val, types[key])
    return out


def _coerce(val: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val


class AttentionBlock(Module):
    """Pre-norm residual block: group attention, then a pointwise swish MLP."""

    def __init__(self, cfg: ModelConfig, group: FiniteGroup, rng: np.random.Generator):
        c = cfg.embed_dim
        self.norm1 = LayerNorm(c)
        self.attn = LocalAttention(AttentionParams(c, cfg.heads, cfg.head_dim, c, rng),
                                   scale=cfg.scale_scores, attn_dropout=cfg.attn_dropout,
                                   value_dropout=cfg.value_dropout)
        pe_out = c if cfg.pe_share_heads else cfg.heads * c
        self.encoder = EncoderNet(group, pe_out, cfg.pe_hidden_width, cfg.neighborhood // 2,
                                  with_element=True, rng=rng)
        self.norm2 = LayerNorm(c)
        self.fc1 = Linear(c, cfg.mlp_hidden, rng)
        self.fc2 = Linear(cfg.mlp_hidden, c, rng)
        self.variant = cfg.pe_variant

    def __call__(self, x: Tensor, nb: Neighborhood) -> Tensor:
        x = x + self.attn.group(self.norm1(x), nb, self.encoder, self.variant)
        return x + self.fc2(swish(self.fc1(self.norm2(x))))


class GEViT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        self.group_ = parse_group(cfg.group)
        rng = np.random.default_rng(seed)
        c = cfg.embed_dim
        with precision(cfg.precision):
            self.embed = Linear(1, c, rng)
            self.lift = LocalAttention(AttentionParams(c, cfg.heads, cfg.head_dim, c, rng),
                                       scale=cfg.scale_scores, attn_dropout=cfg.attn_dropout,
                                       value_dropout=cfg.value_dropout)
            pe_out = c if cfg.pe_share_heads else cfg.heads * c
            self.lift_encoder = EncoderNet(self.group_, pe_out, cfg.pe_hidden_width,
                                           cfg.neighborhood // 2, with_element=False, rng=rng)
            self.blocks = [AttentionBlock(cfg, self.group_, rng) for _ in range(cfg.blocks)]
            self.norm = LayerNorm(c)
            self.head = Linear(c, cfg.classes, rng)
        self.nb = Neighborhood(cfg.image_size, cfg.image_size, cfg.neighborhood, cfg.boundary)
        self.dtype = self.embed.weight.dtype

    @property
    def group(self) -> FiniteGroup:
        return self.group_

    def set_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, LocalAttention):
                m.rng = rng

    def _input(self, images) -> Tensor:
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        s = self.config.image_size
        if x.ndim == 2 and x.shape == (s, s):
            x = x[None]
        if x.shape[-2:] != (s, s) and not (x.ndim == 2 and x.shape[1] == s * s):
            raise ValueError(f"expected images of {s}x{s}, got array of shape {x.shape}")
        x = (x.reshape(x.shape[0], s * s, 1) - self.config.input_mean) / self.config.input_std
        return Tensor(x, dtype=self.dtype)

    def features(self, images, depth: int | None = None) -> Tensor:
        """Lifted feature map ``(B, P, |H|, C)`` after the lifting layer and ``depth`` blocks."""
        depth = len(self.blocks) if depth is None else depth
        if not 0 <= depth <= len(self.blocks):
            raise ValueError(f"depth must be in [0, {len(self.blocks)}]")
        x = self.lift.lifting(self.embed(self._input(images)), self.nb, self.lift_encoder)
        for blk in self.blocks[:depth]:
            x = blk(x, self.nb)
        return x

    def __call__(self, images) -> Tensor:
        """Class logits ``(B, classes)`` for images ``(B, S, S)``."""
        return self.head(self.norm(global_pool(self.features(images))))

    forward = __call__

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))


def build(cfg: ModelConfig, seed: int = 0) -> GEViT:
    return GEViT(cfg, seed)


def expected_num_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`GEViT` for ``cfg``."""
    c, h, ch, pe = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.pe_hidden_width
    pe_out = c if cfg.pe_share_heads else h * c
    attn = 3 * c * h * ch + h * ch * c
    lift_enc = (2 * pe + pe) + (pe * pe_out + pe_out)
    grp_enc = (5 * pe + pe) + (pe * pe_out + pe_out)
    mlp = (c * cfg.mlp_hidden + cfg.mlp_hidden) + (cfg.mlp_hidden * c + c)
    block = 2 * c + attn + grp_enc + 2 * c + mlp
    return (2 * c) + attn + lift_enc + cfg.blocks * block + 2 * c + (c * cfg.classes + cfg.classes)


def global_pool(f: Tensor) -> Tensor:
    """Max over the group axis, then mean over pixels: ``(B, P, G, C) -> (B, C)``."""
    return f.max(axis=2).mean(axis=1)


def loss(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)
