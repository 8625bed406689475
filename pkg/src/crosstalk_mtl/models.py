"""Single-task, shared-trunk and cross-talk multi-task classifiers.

Every architecture is assembled from the same block recipe
(conv or FDY conv -> FLN -> relu -> optional max-pool) followed by
per-task heads (global average pool -> dense).

* ``stl``   one stream, one task.
* ``tcdcn`` one shared trunk, one head per task.
* ``mtan``  shared trunk, a sigmoid attention mask per task, then heads.
* ``cs`` / ``cc`` / ``nddr`` / ``rndr``  one stream per task; after every
  block flagged as a CTL site the streams exchange features through the
  corresponding cross-talk layer.

Stream parameters are drawn from a generator keyed by ``(seed, task name)``,
so an ``stl`` model for task *t* starts from exactly the parameters of the
*t* stream of a cross-talk model built with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .nn import FLN, Conv2D, Dense, FDYConv, Layer, global_avg_pool, max_pool2d
from .seeding import derive_rng

KINDS = ("stl", "tcdcn", "mtan", "cs", "cc", "nddr", "rndr")
SHARED_TRUNK = frozenset({"tcdcn", "mtan"})
CROSS_TALK = frozenset({"cs", "cc", "nddr", "rndr"})


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2
    ctl_site: bool = False
    fdy: bool = False


@dataclass(frozen=True)
class BackboneSpec:
    blocks: tuple[BlockSpec, ...]
    in_channels: int = 1
    freq_bins: int = 129
    fdy_basis: int = 4
    fdy_temperature: float = 31.0
    fln_eps: float = 1e-5

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        if self.in_channels < 1 or self.freq_bins < 1:
            raise ConfigError("backbone input channels and frequency bins must be positive")
        first_fdy_allowed = max(0, len(self.blocks) - 2)
        for i, b in enumerate(self.blocks):
            if b.fdy and i < first_fdy_allowed:
                raise ConfigError(f"block {i}: FDY is only allowed on the last two blocks")
            if b.out_channels < 1 or b.kernel < 1 or b.stride < 1:
                raise ConfigError(f"block {i}: non-positive size")

    @property
    def has_ctl_sites(self) -> bool:
        return any(b.ctl_site for b in self.blocks)

    def without_ctl(self) -> BackboneSpec:
        return replace(self, blocks=tuple(replace(b, ctl_site=False) for b in self.blocks))

    def with_ctl_sites(self, sites: Sequence[int] | None = None) -> BackboneSpec:
        """CTL after the given blocks (default: every block except the first)."""
        if sites is None:
            sites = range(1, len(self.blocks))
        sites = set(sites)
        return replace(self, blocks=tuple(replace(b, ctl_site=i in sites) for i, b in enumerate(self.blocks)))


def default_backbone(in_channels: int = 1, freq_bins: int = 129, fdy: bool = False, ctl: bool = True,
                     channels: Sequence[int] = (16, 32, 64, 64), pools: Sequence[int] | None = None,
                     kernel: int = 3, **kw) -> BackboneSpec:
    n = len(channels)
    if pools is None:
        pools = [2] * (n - 1) + [1]
    blocks = tuple(
        BlockSpec(c, kernel=kernel, pool=p, ctl_site=ctl and i > 0, fdy=fdy and i >= n - 2)
        for i, (c, p) in enumerate(zip(channels, pools))
    )
    return BackboneSpec(blocks, in_channels=in_channels, freq_bins=freq_bins, **kw)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_classes: int
    role: str = "main"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"task {self.name!r} needs at least 2 classes")
        if self.role not in ("main", "auxiliary"):
            raise ConfigError(f"task {self.name!r}: role must be main or auxiliary")


# ---------------------------------------------------------------- blocks

class ConvBlock(Layer):
    def __init__(self, spec: BlockSpec, in_ch: int, freq_in: int, bb: BackboneSpec, rng, dtype):
        pad = spec.kernel // 2
        if spec.fdy:
            self.conv = FDYConv(in_ch, spec.out_channels, spec.kernel, spec.stride, pad,
                                n_basis=bb.fdy_basis, temperature=bb.fdy_temperature, rng=rng, dtype=dtype)
        else:
            self.conv = Conv2D(in_ch, spec.out_channels, spec.kernel, spec.stride, pad, rng=rng, dtype=dtype)
        freq_out = (freq_in + 2 * pad - spec.kernel) // spec.stride + 1
        if freq_out < 1:
            raise ConfigError("kernel larger than the frequency axis")
        self.norm = FLN(freq_out, eps=bb.fln_eps, dtype=dtype)
        self.pool = spec.pool
        self.freq_out = freq_out // spec.pool if spec.pool > 1 else freq_out
        self.params = {**{f"conv.{k}": v for k, v in self.conv.params.items()},
                       **{f"norm.{k}": v for k, v in self.norm.params.items()}}

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.relu(self.norm(self.conv(x)))
        if self.pool > 1:
            y = max_pool2d(y, self.pool)
        return y


class Stream(Layer):
    """A stack of conv blocks (no head)."""

    def __init__(self, bb: BackboneSpec, rng, dtype):
        self.blocks = []
        ch, f = bb.in_channels, bb.freq_bins
        for spec in bb.blocks:
            blk = ConvBlock(spec, ch, f, bb, rng, dtype)
            self.blocks.append(blk)
            ch, f = spec.out_channels, blk.freq_out
        self.out_channels = ch
        self.params = {f"block{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.params.items()}


class Head(Layer):
    def __init__(self, in_ch: int, n_classes: int, rng, dtype):
        self.fc = Dense(in_ch, n_classes, rng=rng, dtype=dtype)
        self.params = {f"fc.{k}": v for k, v in self.fc.params.items()}

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(global_avg_pool(x))


# ---------------------------------------------------------------- cross-talk layers

class CrossTalkLayer(Layer):
    kind = ""

    def __init__(self, n_tasks: int, channels: int):
        self.n_tasks = n_tasks
        self.channels = channels

    def _check(self, feats: Sequence[Tensor]) -> None:
        if len(feats) != self.n_tasks:
            raise ShapeError(f"{self.kind} layer expects {self.n_tasks} streams, got {len(feats)}")
        ref = feats[0].shape
        for f in feats[1:]:
            if f.shape != ref:
                raise ShapeError(f"stream shapes differ: {ref} vs {f.shape}")
        if ref[1] != self.channels:
            raise ShapeError(f"{self.kind} layer built for {self.channels} channels, got {ref[1]}")

    def __call__(self, feats: Sequence[Tensor]) -> list[Tensor]:
        self._check(feats)
        return self.apply(feats)

    def apply(self, feats):
        raise NotImplementedError


class CrossStitch(CrossTalkLayer):
    """out_i = sum_j alpha[i, j] * x_j with one unconstrained N x N matrix."""

    kind = "cs"

    def __init__(self, n_tasks, channels, rng, dtype, noise: float = 0.05):
        super().__init__(n_tasks, channels)
        alpha = np.eye(n_tasks) + rng.uniform(-noise, noise, size=(n_tasks, n_tasks))
        self.params = {"alpha": Tensor(np.asarray(alpha, dtype=dtype), requires_grad=True)}

    def apply(self, feats):
        shape = feats[0].shape
        flat = ad.concat([ad.reshape(f, (1, -1)) for f in feats], axis=0)
        mixed = ad.matmul(self.params["alpha"], flat)
        return [ad.reshape(ad.slice_axis(mixed, 0, i, 1), shape) for i in range(self.n_tasks)]


class CrossConnected(CrossTalkLayer):
    """out_i = x_i + sum_{j != i} relu(conv_ij(x_j)) with 1x1 convolutions."""

    kind = "cc"

    def __init__(self, n_tasks, channels, rng, dtype, init_scale: float = 0.01):
        super().__init__(n_tasks, channels)
        self.convs: dict[tuple[int, int], Conv2D] = {}
        self.params = {}
        for i in range(n_tasks):
            for j in range(n_tasks):
                if i == j:
                    continue
                conv = Conv2D(channels, channels, 1, padding=0, rng=rng, dtype=dtype)
                conv.weight.data *= conv.weight.dtype.type(init_scale)
                self.convs[(i, j)] = conv
                for k, v in conv.params.items():
                    self.params[f"conv{i}_{j}.{k}"] = v

    def apply(self, feats):
        out = []
        for i, x in enumerate(feats):
            y = x
            for j, xj in enumerate(feats):
                if j != i:
                    y = ad.add(y, ad.relu(self.convs[(i, j)](xj)))
            out.append(y)
        return out


class NDDR(CrossTalkLayer):
    """out_i = conv_i(concat_channels(x_1..x_N)): N*C channels reduced to C."""

    kind = "nddr"
    residual = False

    def __init__(self, n_tasks, channels, rng, dtype, own_weight: float = 0.9):
        super().__init__(n_tasks, channels)
        self.convs = []
        self.params = {}
        for i in range(n_tasks):
            conv = Conv2D(n_tasks * channels, channels, 1, padding=0, init="zeros", dtype=dtype)
            self._init_weights(conv, i, own_weight)
            self.convs.append(conv)
            for k, v in conv.params.items():
                self.params[f"reduce{i}.{k}"] = v

    def _init_weights(self, conv: Conv2D, i: int, own_weight: float) -> None:
        n, c = self.n_tasks, self.channels
        other = (1.0 - own_weight) / (n - 1) if n > 1 else 0.0
        w = conv.weight.data
        for j in range(n):
            for ch in range(c):
                w[ch, j * c + ch, 0, 0] = own_weight if j == i else other

    def set_selector(self) -> None:
        """Own-stream channel weight 1, every other weight and bias 0."""
        for i, conv in enumerate(self.convs):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0
            for ch in range(self.channels):
                conv.weight.data[ch, i * self.channels + ch, 0, 0] = 1

    def apply(self, feats):
        cat = ad.concat(list(feats), axis=1)
        out = []
        for i, x in enumerate(feats):
            y = self.convs[i](cat)
            out.append(ad.add(x, y) if self.residual else y)
        return out


class RNDR(NDDR):
    """NDDR reduction plus an identity residual per stream; reductors start at zero."""

    kind = "rndr"
    residual = True

    def _init_weights(self, conv: Conv2D, i: int, own_weight: float) -> None:
        conv.weight.data[...] = 0


_CTL_TYPES = {"cs": CrossStitch, "cc": CrossConnected, "nddr": NDDR, "rndr": RNDR}


class AttentionBlock(Layer):
    """Task-specific soft mask over shared features: sigmoid(1x1 convs) * x."""

    def __init__(self, channels: int, rng, dtype, depth: int = 1):
        if depth < 1:
            raise ConfigError("attention depth must be at least 1")
        self.convs = []
        for d in range(depth):
            last = d == depth - 1
            self.convs.append(Conv2D(channels, channels, 1, padding=0, rng=rng, dtype=dtype,
                                     init="zeros" if last else "he"))
        self.params = {f"att{d}.{k}": v for d, c in enumerate(self.convs) for k, v in c.params.items()}

    def mask(self, shared: Tensor) -> Tensor:
        h = shared
        for d, conv in enumerate(self.convs):
            h = conv(h)
            if d < len(self.convs) - 1:
                h = ad.relu(h)
        return ad.sigmoid(h)

    def __call__(self, shared: Tensor) -> Tensor:
        return ad.mul(self.mask(shared), shared)


# ---------------------------------------------------------------- model

@dataclass
class MultiTaskModel:
    kind: str
    backbone: BackboneSpec
    tasks: tuple[TaskSpec, ...]
    seed: int
    dtype: np.dtype
    attention_depth: int = 1
    streams: list[Stream] = field(default_factory=list)
    heads: list[Head] = field(default_factory=list)
    ctls: dict[int, CrossTalkLayer] = field(default_factory=dict)
    attention: list[AttentionBlock] = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.kind in SHARED_TRUNK:
            out.update({f"trunk.{k}": v for k, v in self.streams[0].params.items()})
        else:
            for t, s in zip(self.tasks, self.streams):
                out.update({f"{t.name}.stream.{k}": v for k, v in s.params.items()})
        for site, ctl in sorted(self.ctls.items()):
            out.update({f"ctl{site}.{k}": v for k, v in ctl.params.items()})
        for t, a in zip(self.tasks, self.attention):
            out.update({f"{t.name}.attention.{k}": v for k, v in a.params.items()})
        for t, h in zip(self.tasks, self.heads):
            out.update({f"{t.name}.head.{k}": v for k, v in h.params.items()})
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise FormatError(f"state lacks parameters: {sorted(missing)[:3]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape}, model {p.shape}")
            p.data[...] = arr

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.backbone.in_channels:
            raise ShapeError(f"model expects [B, {self.backbone.in_channels}, F, T], got {x.shape}")

    def forward(self, x: Tensor) -> list[Tensor]:
        self._check_input(x)
        if self.kind in SHARED_TRUNK:
            h = x
            for blk in self.streams[0].blocks:
                h = blk(h)
            if self.kind == "mtan":
                return [head(att(h)) for att, head in zip(self.attention, self.heads)]
            return [head(h) for head in self.heads]
        feats = [x] * len(self.streams)
        for b in range(len(self.backbone.blocks)):
            feats = [s.blocks[b](f) for s, f in zip(self.streams, feats)]
            if b in self.ctls:
                feats = self.ctls[b](feats)
        return [head(f) for head, f in zip(self.heads, feats)]

    __call__ = forward

    def descriptor(self) -> str:
        return format_descriptor(self.kind, self.backbone, self.tasks, self.seed, self.dtype,
                                 self.attention_depth)


def build_model(kind: str, backbone: BackboneSpec, tasks: Sequence[TaskSpec], seed: int = 0,
                dtype=np.float32, attention_depth: int = 1) -> MultiTaskModel:
    kind = kind.lower()
    if kind not in KINDS:
        raise ConfigError(f"unknown architecture {kind!r}; expected one of {', '.join(KINDS)}")
    tasks = tuple(tasks)
    if not tasks:
        raise ConfigError("at least one task is required")
    if not any(t.role == "main" for t in tasks):
        raise ConfigError("at least one main task is required")
    if len({t.name for t in tasks}) != len(tasks):
        raise ConfigError("task names must be unique")
    if kind == "stl" and len(tasks) != 1:
        raise ConfigError(f"stl carries exactly one task, got {len(tasks)}")
    if kind in CROSS_TALK and len(tasks) < 2:
        raise ConfigError(f"{kind} needs at least two tasks")
    if kind not in CROSS_TALK and backbone.has_ctl_sites:
        raise ConfigError(f"{kind} does not take cross-talk sites")
    backbone.validate()
    dtype = np.dtype(dtype)
    model = MultiTaskModel(kind, backbone, tasks, int(seed), dtype, attention_depth)

    if kind in SHARED_TRUNK:
        trunk = Stream(backbone, derive_rng(seed, "trunk"), dtype)
        model.streams = [trunk]
        for t in tasks:
            rng = derive_rng(seed, "task", t.name)
            if kind == "mtan":
                model.attention.append(AttentionBlock(trunk.out_channels, rng, dtype, attention_depth))
            model.heads.append(Head(trunk.out_channels, t.n_classes, rng, dtype))
    else:
        for t in tasks:
            rng = derive_rng(seed, "stream", t.name)
            s = Stream(backbone, rng, dtype)
            model.streams.append(s)
            model.heads.append(Head(s.out_channels, t.n_classes, rng, dtype))
        if kind in CROSS_TALK:
            for i, b in enumerate(backbone.blocks):
                if b.ctl_site:
                    rng = derive_rng(seed, "ctl", i)
                    model.ctls[i] = _CTL_TYPES[kind](len(tasks), b.out_channels, rng, dtype)
    return model


# ---------------------------------------------------------------- descriptor text

def format_descriptor(kind, backbone: BackboneSpec, tasks, seed, dtype, attention_depth=1) -> str:
    blocks = ",".join(
        f"{b.out_channels}:{b.kernel}:{b.stride}:{b.pool}:{int(b.ctl_site)}:{int(b.fdy)}" for b in backbone.blocks
    )
    lines = [
        f"kind = {kind}",
        f"seed = {seed}",
        f"dtype = {np.dtype(dtype).name}",
        f"in_channels = {backbone.in_channels}",
        f"freq_bins = {backbone.freq_bins}",
        f"fdy_basis = {backbone.fdy_basis}",
        f"fdy_temperature = {backbone.fdy_temperature!r}",
        f"fln_eps = {backbone.fln_eps!r}",
        f"attention_depth = {attention_depth}",
        "# out:kernel:stride:pool:ctl:fdy",
        f"blocks = {blocks}",
        "tasks = " + ",".join(f"{t.name}:{t.n_classes}:{t.role}" for t in tasks),
    ]
    return "\n".join(lines) + "\n"


def parse_descriptor(text: str) -> dict:
    from .config import parse_kv

    kv = parse_kv(text)
    try:
        blocks = []
        for item in kv["blocks"].split(","):
            out, k, s, p, c, f = (int(v) for v in item.split(":"))
            blocks.append(BlockSpec(out, k, s, p, bool(c), bool(f)))
        backbone = BackboneSpec(
            tuple(blocks),
            in_channels=int(kv["in_channels"]),
            freq_bins=int(kv["freq_bins"]),
            fdy_basis=int(kv.get("fdy_basis", 4)),
            fdy_temperature=float(kv.get("fdy_temperature", 31.0)),
            fln_eps=float(kv.get("fln_eps", 1e-5)),
        )
        tasks = []
        for item in kv["tasks"].split(","):
            name, n, role = item.split(":")
            tasks.append(TaskSpec(name, int(n), role))
        return {
            "kind": kv["kind"],
            "backbone": backbone,
            "tasks": tuple(tasks),
            "seed": int(kv.get("seed", 0)),
            "dtype": np.dtype(kv.get("dtype", "float32")),
            "attention_depth": int(kv.get("attention_depth", 1)),
        }
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model descriptor: {exc}") from exc


def model_from_descriptor(text: str) -> MultiTaskModel:
    d = parse_descriptor(text)
    return build_model(d["kind"], d["backbone"], d["tasks"], d["seed"], d["dtype"], d["attention_depth"])
