"""End-to-end capsule models.

``ParseCaps`` narrows a capsule field stage by stage (fewer, longer capsules)
down to a single top capsule: stem, primary capsules, capsule blocks whose
first cell downsamples, apex cells that finish the narrowing, a routed class
head off the final block, the concept layer on the top capsule, and the
reconstruction decoder on the global capsule. ``WidthConstantBaseline`` keeps
the capsule field at primary size throughout (the no-narrowing comparison
model). ``ThreeLayerCapsNet`` is the minimal conv/primary/class-capsule model
used by the routing benchmark.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .entmax import DEFAULT_ALPHA
from .layers import (
    CapsuleTensor,
    ConceptLayer,
    ConceptState,
    Conv,
    Decoder,
    Linear,
    MLPCell,
    Module,
    PConvCaps,
    PrimaryCaps,
    Stem,
    capsule_norms,
    grid_width,
    pconv_out_count,
    squash,
    uniform_param,
)
from .losses import ConceptEmbedding, LossWeights
from .routing import SAARouter, capsule_votes, dynamic_route
from .tensor import ShapeError, Tensor, dropout, relu, tmean


class ScheduleError(ValueError):
    """Raised when a capsule schedule violates the narrowing structure."""


@dataclass
class ModelConfig:
    image_hw: int = 28
    in_channels: int = 1
    stem_channels: tuple = (16, 32, 32, 32)
    stem_strides: tuple = (2, 2, 1, 1)
    primary_dim: int = 8
    block_cells: tuple = (1, 2, 5)
    block_dims: tuple = (16, 36, 64)
    n_class: int = 10
    d_class: Optional[int] = None          # defaults to the final block dim
    m: int = 16                            # concept count
    d_c: int = 8
    d_e: int = 16
    alpha: float = DEFAULT_ALPHA
    dropout: float = 0.25
    decoder_channels: tuple = (32, 32, 16, 8)
    loss_mode: str = "unsupervised"
    weights: LossWeights = field(default_factory=LossWeights)
    use_presentation: bool = True
    use_triplet: bool = True
    use_reconstruction: bool = True
    seed: int = 0

    @property
    def top_dim(self) -> int:
        return self.block_dims[-1]

    @property
    def class_dim(self) -> int:
        return self.d_class if self.d_class is not None else self.block_dims[-1]


def validate_schedule(stages) -> None:
    """Enforce the parse-tree structure on a (n, d) stage sequence: every
    stage a perfect square count, n strictly decreasing, d non-decreasing."""
    if len(stages) < 2:
        raise ScheduleError(f"schedule needs at least two stages, got {stages}")
    for n, d in stages:
        grid_width(n)
        if d < 1:
            raise ScheduleError(f"capsule dim must be positive in {stages}")
    ns = [n for n, _ in stages]
    ds = [d for _, d in stages]
    if any(b >= a for a, b in zip(ns, ns[1:])):
        raise ScheduleError(f"capsule counts must strictly decrease, got {ns}")
    if any(b < a for a, b in zip(ds, ds[1:])):
        raise ScheduleError(f"capsule dims must not decrease, got {ds}")


def derive_schedule(cfg: ModelConfig) -> list:
    """Analytic (n, d) stage sequence implied by a config: primary stage,
    one stage per block, then apex stages narrowing to a single capsule."""
    if len(cfg.block_cells) != len(cfg.block_dims):
        raise ScheduleError(
            f"{len(cfg.block_cells)} block cell counts vs "
            f"{len(cfg.block_dims)} block dims")
    if any(c < 1 for c in cfg.block_cells):
        raise ScheduleError(f"every block needs at least one cell: {cfg.block_cells}")
    w0 = Stem.out_size(cfg.image_hw, cfg.stem_strides)
    if w0 < 2:
        raise ScheduleError(f"stem output {w0}x{w0} leaves no room for capsules")
    stages = [(w0 * w0, cfg.primary_dim)]
    n = w0 * w0
    for d in cfg.block_dims:
        n = pconv_out_count(n, stride=2)
        stages.append((n, d))
    while n > 1:
        n = pconv_out_count(n, stride=2)
        stages.append((n, cfg.top_dim))
    validate_schedule(stages)
    return stages


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, stage by stage."""

    stages: list                       # realized (n, d) per schedule stage
    capsules: list                     # CapsuleTensor per stage
    final_block: CapsuleTensor         # last block output (feeds the class head)
    top_capsule: CapsuleTensor         # (B, 1, d_top) apex output
    class_caps: CapsuleTensor          # (B, n_class, d_class)
    class_norms: Tensor                # (B, n_class)
    concepts: Optional[ConceptState] = None
    reconstruction: Optional[Tensor] = None

    def predictions(self) -> np.ndarray:
        return self.class_norms.value.argmax(axis=1)


class CapsuleCell(Module):
    """One capsule cell: parse-conv prediction, SAA routing, MLP."""

    def __init__(self, rng, d_in: int, d_out: int, alpha: float, stride: int):
        self.pconv = PConvCaps(rng, d_in, d_out, stride=stride)
        self.router = SAARouter(rng, d_in, d_out, alpha)
        self.mlp = MLPCell(rng, d_out)

    def __call__(self, u: CapsuleTensor) -> CapsuleTensor:
        u_ds, u_hat = self.pconv(u)
        return self.mlp(self.router.route(u, u_ds, u_hat))


class ClassHead(Module):
    """Class capsules via one SAA routing from the final block's capsules.

    Predictions and the axial key/value source come from learned linear maps
    of the flattened capsule field (there is no spatial downsample between
    the final block and the class capsules)."""

    def __init__(self, rng, n_in: int, d_in: int, n_class: int, d_class: int,
                 alpha: float):
        self.pred = Linear(rng, n_in * d_in, n_class * d_class)
        self.axial_source = Linear(rng, n_in * d_in, n_class * d_in)
        self.router = SAARouter(rng, d_in, d_class, alpha)
        self.n_class = n_class
        self.d_class = d_class
        self.d_in = d_in

    def __call__(self, u: CapsuleTensor) -> CapsuleTensor:
        b = u.batch
        flat = u.data.reshape((b, -1))
        u_hat = CapsuleTensor(
            self.pred(flat).reshape((b, self.n_class, self.d_class)))
        source = CapsuleTensor(
            self.axial_source(flat).reshape((b, self.n_class, self.d_in)))
        return self.router.route(u, source, u_hat)


class ParseCaps(Module):
    def __init__(self, cfg: ModelConfig):
        schedule = derive_schedule(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.schedule = schedule
        self.stem = Stem(rng, cfg.in_channels, cfg.stem_channels, cfg.stem_strides)
        self.primary = PrimaryCaps(rng, cfg.stem_channels[-1], cfg.primary_dim)
        self.blocks = []
        d_prev = cfg.primary_dim
        for cells, d in zip(cfg.block_cells, cfg.block_dims):
            block = [CapsuleCell(rng, d_prev, d, cfg.alpha, stride=2)]
            block.extend(CapsuleCell(rng, d, d, cfg.alpha, stride=1)
                         for _ in range(cells - 1))
            self.blocks.append(block)
            d_prev = d
        n_apex = len(schedule) - 1 - len(cfg.block_dims)
        self.apex = [CapsuleCell(rng, d_prev, d_prev, cfg.alpha, stride=2)
                     for _ in range(n_apex)]
        n_final = schedule[len(cfg.block_dims)][0]
        self.class_head = ClassHead(rng, n_final, d_prev, cfg.n_class,
                                    cfg.class_dim, cfg.alpha)
        self.concept = ConceptLayer(rng, cfg.top_dim, cfg.m, cfg.d_c)
        self.embed = ConceptEmbedding(rng, cfg.m, cfg.d_c, cfg.d_e)
        self.decoder = Decoder(rng, cfg.m, cfg.in_channels, cfg.image_hw,
                               cfg.decoder_channels)

    # blocks/apex live in nested lists; Module.named_parameters handles
    # lists of Modules, so flatten one level for it.
    def named_parameters(self, prefix: str = ""):
        out = []
        for name, obj in (("stem", self.stem), ("primary", self.primary)):
            out.extend(obj.named_parameters(f"{prefix}{name}."))
        for bi, block in enumerate(self.blocks):
            for ci, cell in enumerate(block):
                out.extend(cell.named_parameters(f"{prefix}blocks.{bi}.{ci}."))
        for ai, cell in enumerate(self.apex):
            out.extend(cell.named_parameters(f"{prefix}apex.{ai}."))
        for name, obj in (("class_head", self.class_head),
                          ("concept", self.concept), ("embed", self.embed),
                          ("decoder", self.decoder)):
            out.extend(obj.named_parameters(f"{prefix}{name}."))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_uniform_couplings(self, flag: bool) -> None:
        """Debug switch: force every routing coupling row uniform."""
        for _, cell in self._all_cells():
            cell.router.uniform_couplings = flag
        self.class_head.router.uniform_couplings = flag

    def _all_cells(self):
        for bi, block in enumerate(self.blocks):
            for cell in block:
                yield bi, cell
        for cell in self.apex:
            yield len(self.blocks), cell

    def forward(self, x, concepts_required: bool = False,
                reconstruction_required: bool = False, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardTrace:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        phi = self.stem(x)
        if training and self.cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            phi = dropout(phi, self.cfg.dropout, rng, training=True)
        u = self.primary(phi)
        stages = [(u.count, u.dim)]
        capsules = [u]
        for block in self.blocks:
            for cell in block:
                u = cell(u)
            stages.append((u.count, u.dim))
            capsules.append(u)
        final_block = u
        for cell in self.apex:
            u = cell(u)
            stages.append((u.count, u.dim))
            capsules.append(u)
        class_caps = self.class_head(final_block)
        trace = ForwardTrace(
            stages=stages,
            capsules=capsules,
            final_block=final_block,
            top_capsule=u,
            class_caps=class_caps,
            class_norms=capsule_norms(class_caps.data),
        )
        if concepts_required or reconstruction_required:
            trace.concepts = self.concept(trace.top_capsule)
        if reconstruction_required:
            trace.reconstruction = self.decoder(trace.concepts.global_capsule)
        return trace


class WidthConstantBaseline(Module):
    """Same stem/primary/routing machinery but no narrowing: every cell
    keeps (n, d) at the primary values, and the concept layer reads a pooled
    capsule instead of a tree apex."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        w0 = Stem.out_size(cfg.image_hw, cfg.stem_strides)
        n1 = w0 * w0
        d1 = cfg.primary_dim
        self.stem = Stem(rng, cfg.in_channels, cfg.stem_channels, cfg.stem_strides)
        self.primary = PrimaryCaps(rng, cfg.stem_channels[-1], d1)
        n_cells = sum(cfg.block_cells)
        self.cells = [CapsuleCell(rng, d1, d1, cfg.alpha, stride=1)
                      for _ in range(n_cells)]
        self.class_head = ClassHead(rng, n1, d1, cfg.n_class,
                                    cfg.class_dim, cfg.alpha)
        self.concept = ConceptLayer(rng, d1, cfg.m, cfg.d_c)
        self.embed = ConceptEmbedding(rng, cfg.m, cfg.d_c, cfg.d_e)
        self.decoder = Decoder(rng, cfg.m, cfg.in_channels, cfg.image_hw,
                               cfg.decoder_channels)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x, concepts_required: bool = False,
                reconstruction_required: bool = False, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardTrace:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        phi = self.stem(x)
        if training and self.cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            phi = dropout(phi, self.cfg.dropout, rng, training=True)
        u = self.primary(phi)
        stages = [(u.count, u.dim)]
        capsules = [u]
        for cell in self.cells:
            u = cell(u)
            stages.append((u.count, u.dim))
            capsules.append(u)
        pooled = CapsuleTensor(tmean(u.data, axis=1, keepdims=True))
        class_caps = self.class_head(u)
        trace = ForwardTrace(
            stages=stages,
            capsules=capsules,
            final_block=u,
            top_capsule=pooled,
            class_caps=class_caps,
            class_norms=capsule_norms(class_caps.data),
        )
        if concepts_required or reconstruction_required:
            trace.concepts = self.concept(trace.top_capsule)
        if reconstruction_required:
            trace.reconstruction = self.decoder(trace.concepts.global_capsule)
        return trace


def build(cfg: ModelConfig) -> ParseCaps:
    return ParseCaps(cfg)


def build_baseline(cfg: ModelConfig) -> WidthConstantBaseline:
    return WidthConstantBaseline(cfg)


# -- the three-layer benchmark model ----------------------------------------------

@dataclass
class ThreeLayerConfig:
    """Conv + primary capsules + one routed class-capsule layer."""

    image_hw: int = 28
    in_channels: int = 1
    conv_channels: int = 16
    d1: int = 8
    n_class: int = 10
    d_class: int = 16
    routing: str = "saa"            # "saa" or "dynamic"
    alpha: float = DEFAULT_ALPHA
    iterations: int = 3
    seed: int = 0


class ThreeLayerCapsNet(Module):
    """The routing-ablation model. With SAA routing the primary layer holds
    one capsule per feature-map site; with dynamic routing it uses the
    classic channel-partitioned capsules and per-pair vote transforms."""

    def __init__(self, cfg: ThreeLayerConfig):
        if cfg.routing not in ("saa", "dynamic"):
            raise ValueError(f"unsupported routing {cfg.routing!r}")
        if cfg.conv_channels % cfg.d1 != 0:
            raise ValueError("conv channels must be a multiple of the capsule dim")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.conv = Conv(rng, cfg.in_channels, cfg.conv_channels, kernel=3,
                         stride=2, padding=1)
        hw = (cfg.image_hw + 2 - 3) // 2 + 1
        self.feature_hw = hw
        if cfg.routing == "saa":
            self.primary = PrimaryCaps(rng, cfg.conv_channels, cfg.d1)
            self.head = ClassHead(rng, hw * hw, cfg.d1, cfg.n_class,
                                  cfg.d_class, cfg.alpha)
        else:
            n_in = hw * hw * (cfg.conv_channels // cfg.d1)
            self.vote_weight = uniform_param(
                rng, (n_in, cfg.d1, cfg.n_class * cfg.d_class), cfg.d1)
            self.n_in = n_in

    def forward(self, x) -> CapsuleTensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        phi = relu(self.conv(x))
        cfg = self.cfg
        if cfg.routing == "saa":
            u = self.primary(phi)
            return self.head(u)
        b = phi.shape[0]
        hw = self.feature_hw
        groups = cfg.conv_channels // cfg.d1
        caps = phi.reshape((b, groups, cfg.d1, hw * hw)).transpose((0, 1, 3, 2))
        caps = squash(caps.reshape((b, self.n_in, cfg.d1)))
        votes = capsule_votes(CapsuleTensor(caps), self.vote_weight,
                              cfg.n_class, cfg.d_class)
        return dynamic_route(votes, iterations=cfg.iterations)

    def class_norms(self, x) -> Tensor:
        return capsule_norms(self.forward(x).data)


# -- checkpoints --------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCAP"
CHECKPOINT_VERSION = 1


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def save_checkpoint(path: str, model: Module, config_text: str) -> None:
    """Versioned binary container; float64 payloads round-trip bit-exactly."""
    params = model.named_parameters()
    digest = config_digest(config_text).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path: str, model: Module, config_text: Optional[str] = None,
                    strict_digest: bool = True) -> None:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a ParseCaps checkpoint")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        dlen = struct.unpack("<I", fh.read(4))[0]
        digest = fh.read(dlen).decode("ascii")
        if config_text is not None and strict_digest:
            if digest != config_digest(config_text):
                raise ValueError(
                    f"{path}: checkpoint was written under a different config")
        count = struct.unpack("<I", fh.read(4))[0]
        loaded = {}
        for _ in range(count):
            nlen = struct.unpack("<I", fh.read(4))[0]
            name = fh.read(nlen).decode("utf-8")
            ndim = struct.unpack("<I", fh.read(4))[0]
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            numel = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * numel)
            loaded[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    params = dict(model.named_parameters())
    if set(params) != set(loaded):
        missing = sorted(set(params) - set(loaded))
        extra = sorted(set(loaded) - set(params))
        raise ValueError(f"{path}: parameter mismatch, missing={missing[:3]} "
                         f"extra={extra[:3]}")
    for name, p in params.items():
        if loaded[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {loaded[name].shape} "
                             f"!= model shape {p.shape}")
        p.value = loaded[name]
