"""Spherical graph-attention U-Net predicting per-vertex (or global) Euler angles."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .deform import EulerField, encode_vertices
from .mesh import build_icosphere

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SUGARMODEL 1\n"


@lru_cache(maxsize=None)
def graph_edges(level: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(src, dst) over every 1-ring edge plus a self loop per vertex, grouped by dst."""
    mesh = build_icosphere(level).mesh
    ring, val = mesh.ring_index, mesh.valence
    n = mesh.n_vertices
    dst = np.concatenate([np.arange(n), np.repeat(np.arange(n), val)])
    src = np.concatenate([np.arange(n), ring[ring >= 0]])
    order = np.argsort(dst, kind="stable")
    return torch.from_numpy(src[order].copy()), torch.from_numpy(dst[order].copy())


@lru_cache(maxsize=None)
def _pool_index(fine_level: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    n_coarse = build_icosphere(fine_level - 1).mesh.n_vertices
    src, dst = graph_edges(fine_level)
    keep = dst < n_coarse
    tgt, s = dst[keep], src[keep]
    counts = torch.bincount(tgt, minlength=n_coarse).to(DTYPE)
    return s, tgt, counts


def pool(h: torch.Tensor, fine_level: int) -> torch.Tensor:
    """Scatter-mean of each coarse vertex's own and 1-ring features on the fine mesh.

    ``h`` is (B, N_fine, F) or (N_fine, F).
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    src, tgt, counts = _pool_index(fine_level)
    out = h.new_zeros((h.shape[0], len(counts), h.shape[2]))
    out.index_add_(1, tgt, h[:, src])
    out = out / counts[None, :, None]
    return out[0] if squeeze else out


def unpool(h: torch.Tensor, fine_level: int) -> torch.Tensor:
    """Coarse vertices copy; each edge midpoint averages its two parents."""
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    parents = torch.from_numpy(np.array(build_icosphere(fine_level).parent_vertex_pairs))
    mids = 0.5 * (h[:, parents[:, 0]] + h[:, parents[:, 1]])
    out = torch.cat([h, mids], dim=1)
    return out[0] if squeeze else out


def _glorot(gen: torch.Generator, shape, fan_in: int, fan_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def adjacency_edges(neighbors) -> tuple[torch.Tensor, torch.Tensor]:
    """(src, dst) edges for an arbitrary graph given per-vertex neighbour lists, self loops added."""
    src, dst = [], []
    for i, nb in enumerate(neighbors):
        for j in [i, *[int(x) for x in nb if int(x) != i]]:
            src.append(j)
            dst.append(i)
    return torch.tensor(src, dtype=torch.int64), torch.tensor(dst, dtype=torch.int64)


class GATLayer(nn.Module):
    """Multi-head graph attention over ``N_i`` plus the self edge.

    Per head, ``W`` is (F', 2F): the first F columns act on the centre vertex
    and the last F on the neighbour, so ``W [h_i || h_j]`` splits into two
    vertex-wise products. Messages carry the neighbour half ``W_r h_j``.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, concat: bool, slope: float = 0.2):
        super().__init__()
        if concat and out_dim % heads:
            raise ValueError(f"width {out_dim} not divisible by {heads} heads")
        self.in_dim, self.heads, self.concat, self.slope = in_dim, heads, concat, slope
        self.head_dim = out_dim // heads if concat else out_dim
        self.out_dim = out_dim
        self.W = nn.Parameter(torch.zeros(heads, self.head_dim, 2 * in_dim, dtype=DTYPE))
        self.a = nn.Parameter(torch.zeros(heads, self.head_dim, dtype=DTYPE))

    def reset(self, gen: torch.Generator):
        with torch.no_grad():
            self.W.copy_(_glorot(gen, self.W.shape, 2 * self.in_dim, self.head_dim))
            self.a.copy_(_glorot(gen, self.a.shape, self.head_dim, 1))

    def _check(self, h, src, dst):
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} feature channels, got {h.shape[-1]}")
        n = h.shape[-2]
        if len(src) != len(dst) or (len(src) and max(int(src.max()), int(dst.max())) >= n):
            raise ValueError("adjacency does not match the feature rows")

    def attention(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, trace=None):
        """Attention coefficients (B, E, K) and projected neighbour features."""
        table = _dense_table(src, dst, h.shape[1])
        alpha, xj = self._dense_attention(h, table, trace)
        return alpha[:, table.rows, table.slots], xj

    def _dense_attention(self, h, table, trace=None):
        F = self.in_dim
        W = self.W.reshape(-1, 2 * F)
        xi = (h @ W[:, :F].T).reshape(*h.shape[:2], self.heads, self.head_dim)
        xj = (h @ W[:, F:].T).reshape(*h.shape[:2], self.heads, self.head_dim)
        z = xi[:, :, None] + xj[:, table.neighbors]
        if trace is not None:
            trace.append(z[:, table.rows, table.slots].detach())
        e = (nn.functional.leaky_relu(z, self.slope) * self.a).sum(-1)
        e = e.masked_fill(~table.valid[None, :, :, None], -torch.inf)
        alpha = torch.softmax(e.masked_fill(table.isolated[None, :, None, None], 0.0), dim=2)
        return alpha * table.valid[None, :, :, None], xj

    def forward(self, h: torch.Tensor, src, dst, trace=None) -> torch.Tensor:
        self._check(h, src, dst)
        table = _dense_table(src, dst, h.shape[1])
        alpha, xj = self._dense_attention(h, table, trace)
        out = (xj[:, table.neighbors] * alpha[..., None]).sum(2)
        if self.concat:
            return out.reshape(h.shape[0], h.shape[1], -1)
        return out.mean(2)


@dataclass(frozen=True)
class DenseTable:
    """Edges (src -> dst) laid out as a padded (N, max in-degree) neighbour table."""
    neighbors: torch.Tensor
    valid: torch.Tensor
    rows: torch.Tensor
    slots: torch.Tensor
    isolated: torch.Tensor


_TABLES: dict = {}


def _dense_table(src: torch.Tensor, dst: torch.Tensor, n: int) -> DenseTable:
    key = (n, src.numpy().tobytes(), dst.numpy().tobytes())
    hit = _TABLES.get(key)
    if hit is not None:
        return hit
    order = torch.argsort(dst, stable=True)
    d = dst[order]
    counts = torch.bincount(dst, minlength=n)
    start = torch.cumsum(counts, 0) - counts
    pos = torch.arange(len(d)) - start[d]
    width = max(int(counts.max()) if n else 0, 1)
    neighbors = torch.arange(n)[:, None].repeat(1, width)
    valid = torch.zeros((n, width), dtype=torch.bool)
    neighbors[d, pos] = src[order]
    valid[d, pos] = True
    rows = torch.empty_like(dst)
    slots = torch.empty_like(dst)
    rows[order], slots[order] = d, pos
    if len(_TABLES) > 64:
        _TABLES.clear()
    _TABLES[key] = table = DenseTable(neighbors, valid, rows, slots, ~valid.any(1))
    return table


def attention_coefficients(layer: GATLayer, h, src, dst) -> torch.Tensor:
    """Per-edge softmax weights (E, K) for an unbatched (N, F) feature matrix."""
    h = torch.as_tensor(h, dtype=DTYPE)
    layer._check(h, src, dst)
    return layer.attention(h[None], src, dst)[0][0]


def gat_layer_forward(layer: GATLayer, h, src, dst) -> torch.Tensor:
    """Layer output before the activation; heads concatenated or averaged per the layer."""
    h = torch.as_tensor(h, dtype=DTYPE)
    return layer(h[None], src, dst)[0]


@dataclass(frozen=True)
class SgatConfig:
    level: int
    feature_channels: int = 1
    pe_L: int = 4
    widths: tuple[int, ...] = (64, 128)
    heads: int = 4
    slope: float = 0.2
    output_mode: str = "vertex"  # or "global"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.output_mode not in ("vertex", "global"):
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if not 1 <= len(self.widths) <= self.level:
            raise ValueError(f"depth {len(self.widths)} must be in 1..level ({self.level})")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def pe_dim(self) -> int:
        return 2 * (2 * self.pe_L + 1)

    @property
    def input_channels(self) -> int:
        return 2 * (self.feature_channels + self.pe_dim)


class SGAT(nn.Module):
    def __init__(self, config: SgatConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        c = config
        w = c.widths
        self.enc = nn.ModuleList()
        prev = c.input_channels
        for wi in w:
            self.enc.append(GATLayer(prev, wi, c.heads, True, c.slope))
            prev = wi
        self.bottom = GATLayer(prev, prev, c.heads, True, c.slope)
        self.dec = nn.ModuleList()
        for i in reversed(range(c.depth)):
            self.dec.append(GATLayer(prev + w[i], w[i], c.heads, concat=i > 0, slope=c.slope))
            prev = w[i]
        self.head = nn.Linear(prev, 3, dtype=DTYPE)
        self.reset(seed)

    def reset(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for layer in [*self.enc, self.bottom, *self.dec]:
            layer.reset(gen)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(self, x: torch.Tensor, trace=None) -> torch.Tensor:
        """(B, N, input_channels) -> (B, N, 3) or (B, 1, 3) angles."""
        c = self.config
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        lvl = c.level
        skips = []
        h = x
        for i, layer in enumerate(self.enc):
            if i > 0:
                h = pool(h, lvl)
                lvl -= 1
            h = self._act(layer(h, *graph_edges(lvl), trace), trace)
            skips.append(h)
        h = pool(h, lvl)
        lvl -= 1
        h = self._act(self.bottom(h, *graph_edges(lvl), trace), trace)
        for layer, skip in zip(self.dec, reversed(skips)):
            lvl += 1
            h = torch.cat([unpool(h, lvl), skip], dim=-1)
            h = self._act(layer(h, *graph_edges(lvl), trace), trace)
        out = self.head(h)
        if c.output_mode == "global":
            out = out.mean(1, keepdim=True)
        return out[0] if squeeze else out

    def _act(self, h, trace):
        if trace is not None:
            trace.append(h.detach())
        return nn.functional.leaky_relu(h, self.config.slope)


def build_inputs(moving, fixed, positional) -> torch.Tensor:
    """Concatenate [moving features, PE, fixed features, PE] along channels."""
    m = torch.from_numpy(np.array(moving, dtype=np.float64))
    f = torch.from_numpy(np.array(fixed, dtype=np.float64))
    p = torch.from_numpy(np.array(positional, dtype=np.float64))
    if m.ndim == 1:
        m, f = m[:, None], f[:, None]
    return torch.cat([m, p, f, p], dim=-1)


@lru_cache(maxsize=None)
def positional_features(level: int, L: int = 4) -> np.ndarray:
    pe = encode_vertices(build_icosphere(level).mesh.vertices, L)
    pe.setflags(write=False)
    return pe


def sgat_forward(model: SGAT, moving_features, fixed_features, positional=None) -> EulerField:
    """Euler angles for one moving/fixed pair living on the model's input icosphere."""
    c = model.config
    mesh = build_icosphere(c.level).mesh
    mv = np.asarray(getattr(moving_features, "values", moving_features), dtype=np.float64)
    fx = np.asarray(getattr(fixed_features, "values", fixed_features), dtype=np.float64)
    if mv.ndim == 1:
        mv, fx = mv[:, None], fx[:, None]
    if mv.shape != (mesh.n_vertices, c.feature_channels) or fx.shape != mv.shape:
        raise ValueError(f"inputs must be ({mesh.n_vertices}, {c.feature_channels}) on ico_{c.level}")
    pe = positional_features(c.level, c.pe_L) if positional is None else positional
    with torch.no_grad():
        out = model(build_inputs(mv, fx, pe)).numpy()
    ref = "" if c.output_mode == "global" else mesh.key
    return EulerField(out, ref)


def param_gradients(model: nn.Module, loss_fn) -> dict[str, np.ndarray]:
    """Gradient of ``loss_fn(model)`` (a scalar tensor) for every named parameter."""
    params = dict(model.named_parameters())
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        k: (np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy())
        for (k, p), g in zip(params.items(), grads)
    }


# ---------------------------------------------------------------------------
# checkpoint: magic line, one JSON line, raw little-endian float64 tensors


@dataclass
class ModelBundle:
    """Named S-GATs: ``"rigid"`` (global mode) and ``"ico<l>"`` per non-rigid level."""

    nets: dict[str, SGAT] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def level_net(self, level: int) -> SGAT | None:
        return self.nets.get(f"ico{level}")

    @property
    def rigid(self) -> SGAT | None:
        return self.nets.get("rigid")


def _header(bundle: ModelBundle) -> dict:
    nets = []
    for name, net in bundle.nets.items():
        nets.append(
            {
                "name": name,
                "config": asdict(net.config),
                "seed": net.seed,
                "params": [[k, list(p.shape)] for k, p in net.named_parameters()],
            }
        )
    return {"format": 1, "meta": bundle.meta, "nets": nets}


def dumps(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(_header(bundle), sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for net in bundle.nets.values():
        for _, p in net.named_parameters():
            buf.write(p.detach().numpy().astype("<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> ModelBundle:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a model checkpoint (bad magic line)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    head = json.loads(rest[:nl])
    if head.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {head.get('format')}")
    blob = rest[nl + 1:]
    off = 0
    nets = {}
    for spec in head["nets"]:
        cfg = spec["config"]
        cfg["widths"] = tuple(cfg["widths"])
        net = SGAT(SgatConfig(**cfg), seed=spec["seed"])
        params = dict(net.named_parameters())
        if [k for k in params] != [k for k, _ in spec["params"]]:
            raise ValueError(f"parameter layout mismatch for {spec['name']}")
        with torch.no_grad():
            for k, shape in spec["params"]:
                n = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
                params[k].copy_(torch.from_numpy(arr.astype(np.float64)))
                off += 8 * n
        nets[spec["name"]] = net
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return ModelBundle(nets, head.get("meta", {}))


def save(bundle: ModelBundle, path) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, dumps(bundle))


def load(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return loads(fh.read())
