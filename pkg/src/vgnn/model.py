"""The multi-view spatiotemporal network.

Data flow for a batch of ``B`` windows over ``N`` virtual nodes::

    x0 (B, M, N) -> embed -> X1 (B, N, M, C1)
      -> gated temporal conv -> X2 (B, N, M, C2)
      -> per-graph 2-layer multi-head GAT, concatenated -> X3 (B, N, M, g*C3)
      -> X4 = X1 + X3 -> + positional encoding -> multi-head self-attention
      -> X5 (B, N, M, d_m) -> last step -> FNN readout -> (B, N)

Tensors keep the node axis before the time axis except inside the GAT,
which attends across nodes and so puts time first.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, Tensor
from .graphgen import GRAPH_KINDS, VirtualGraphSet


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int
    M: int = 12
    graphs: tuple[str, ...] = ("distance", "correlation")
    C1: int = 12
    C2: int | None = None
    C3: int | None = None
    K: int = 3
    L: int = 4
    d_k: int = 16
    d_m: int | None = None
    d_f1: int | None = None
    gat_layers: int = 2
    short_term: bool = True
    long_term: bool = True
    pe_mode: str = "standard"
    leaky_slope: float = 0.2

    def __post_init__(self):
        g = len(self.graphs)
        fill = {}
        if self.C2 is None:
            fill["C2"] = self.C1
        if self.C3 is None:
            if g == 0 or self.C1 % g:
                raise ConfigError(f"C1={self.C1} is not divisible by g={g}")
            fill["C3"] = self.C1 // g
        if self.d_m is None:
            fill["d_m"] = self.C1
        if self.d_f1 is None:
            fill["d_f1"] = 2 * self.C1
        for k, v in fill.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "graphs", tuple(self.graphs))
        self.validate()

    @property
    def g(self) -> int:
        return len(self.graphs)

    def validate(self) -> None:
        if self.g < 1 or len(set(self.graphs)) != self.g:
            raise ConfigError(f"need at least one distinct graph, got {self.graphs}")
        bad = set(self.graphs) - set(GRAPH_KINDS)
        if bad:
            raise ConfigError(f"unknown graph kinds {sorted(bad)}")
        if self.C1 != self.g * self.C3:
            raise ConfigError(f"residual needs C1 == g*C3, got C1={self.C1}, g={self.g}, C3={self.C3}")
        if not self.short_term and self.C2 != self.C1:
            raise ConfigError("removing the short-term view requires C2 == C1")
        if self.K % 2 == 0:
            raise ConfigError(f"kernel size K must be odd, got {self.K}")
        if min(self.M, self.N, self.L, self.d_k, self.d_m, self.d_f1, self.gat_layers) < 1:
            raise ConfigError("all sizes must be positive")
        if self.pe_mode not in ("standard", "literal"):
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["graphs"] = list(self.graphs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "graphs" in d:
            d["graphs"] = tuple(d["graphs"])
        return cls(**d)

    def variant(self, **changes) -> "ModelConfig":
        """Copy with changes; derived widths are recomputed unless given."""
        base = {k: v for k, v in self.to_dict().items()}
        if "graphs" in changes and "C3" not in changes:
            base["C3"] = None
        base.update(changes)
        return ModelConfig.from_dict(base)


# stages as free functions

def embed(x0: Tensor, w0: Tensor) -> Tensor:
    """Lift scalar demand to ``C1`` channels at every (node, time) position."""
    if x0.shape[-1] != w0.shape[0]:
        raise dc.ShapeError(f"embed: input {x0.shape} vs weight {w0.shape}")
    return dc.matmul(x0, w0)


def gated_conv(x1: Tensor, gamma1: Tensor, gamma2: Tensor) -> Tensor:
    """GLU over time: ``conv(x, gamma1) * sigmoid(conv(x, gamma2))``, length kept."""
    return dc.mul(dc.conv1d_same(x1, gamma1), dc.sigmoid(dc.conv1d_same(x1, gamma2)))


def gat_layer(h: Tensor, mask: np.ndarray, W: Tensor, phi: Tensor, slope: float = 0.2,
              capture: list | None = None) -> Tensor:
    """One multi-head graph attention layer.

    ``h`` is ``(..., N, Cin)``, ``W`` is ``(L, Cin, C3)``, ``phi`` is
    ``(L, 2*C3)``; ``mask`` is the boolean neighbourhood (self included).
    Head outputs are averaged before the LeakyReLU.
    """
    L, cin, c3 = W.shape
    lead = h.shape[:-2]
    n = h.shape[-2]
    hx = dc.reshape(h, lead + (1, n, cin))
    wh = dc.matmul(hx, W)                                   # (..., L, N, C3)
    a_src = dc.reshape(phi[:, :c3], (L, c3, 1))
    a_dst = dc.reshape(phi[:, c3:], (L, c3, 1))
    src = dc.matmul(wh, a_src)                              # (..., L, N, 1)
    dst = dc.swapaxes(dc.matmul(wh, a_dst), -1, -2)         # (..., L, 1, N)
    alpha = attention_coefficients(src, dst, mask, slope)
    if capture is not None:
        capture.append(alpha.data)
    out = dc.mean(dc.matmul(alpha, wh), axis=len(lead))     # average heads
    return dc.leaky_relu(out, slope)


def attention_coefficients(src: Tensor, dst: Tensor, mask: np.ndarray, slope: float) -> Tensor:
    """``softmax_j(leaky_relu(src_i + dst_j))`` over the neighbours ``j`` allowed by ``mask``.

    Fused into one op: the (..., N, N) score tensor is the largest
    intermediate in the network.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a node without neighbours")
    e = src.data + dst.data
    neg = e <= 0
    dc.note_kinks(~neg)
    np.multiply(e, slope, out=e, where=neg)
    e += np.where(mask, 0.0, -np.inf)
    e -= e.max(axis=-1, keepdims=True)
    alpha = np.exp(e, out=e)
    alpha /= alpha.sum(axis=-1, keepdims=True)

    def backward(g):
        ge = g * alpha
        ge -= alpha * ge.sum(axis=-1, keepdims=True)
        np.multiply(ge, slope, out=ge, where=neg)
        return ge.sum(axis=-1, keepdims=True), ge.sum(axis=-2, keepdims=True)

    return dc.custom((src, dst), alpha, backward)


def neighborhood_mask(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj) != 0
    return adj | np.eye(adj.shape[0], dtype=bool)


def positional_encoding(M: int, width: int, mode: str = "standard") -> np.ndarray:
    """Sinusoid table of shape ``(M, width)``.

    ``standard``: channel ``2i`` holds ``sin(pos / 10000**(2i/width))`` and
    channel ``2i+1`` the matching cosine. ``literal``: row ``m`` is the
    constant ``sin`` (even ``m``) or ``cos`` (odd ``m``) of
    ``m / 10000**(2m/width)``.
    """
    pos = np.arange(M, dtype=np.float64)[:, None]
    if mode == "standard":
        pe = np.zeros((M, width))
        i2 = np.arange(0, width, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, i2 / width)
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : width // 2])
        return pe
    if mode == "literal":
        m = pos[:, 0]
        arg = m / np.power(10000.0, 2 * m / width)
        row = np.where(m % 2 == 0, np.sin(arg), np.cos(arg))
        return np.repeat(row[:, None], width, axis=1)
    raise ConfigError(f"unknown pe mode {mode!r}")


def mhsa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
         capture: list | None = None) -> Tensor:
    """Multi-head self-attention over the time axis (-2) of ``x``.

    Heads are concatenated along channels and projected by ``wo``.
    """
    L, c, dk = wq.shape
    lead = x.shape[:-2]
    m = x.shape[-2]
    if x.shape[-1] != c:
        raise dc.ShapeError(f"mhsa: input {x.shape} vs projection {wq.shape}")
    xx = dc.reshape(x, lead + (1, m, c))
    q = dc.matmul(xx, wq)
    k = dc.matmul(xx, wk)
    v = dc.matmul(xx, wv)                                   # (..., L, M, dk)
    scores = dc.scale(dc.matmul(q, dc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    att = dc.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(att.data)
    heads = dc.matmul(att, v)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    merged = dc.reshape(dc.transpose(heads, perm), lead + (m, L * dk))
    return dc.matmul(merged, wo)


def readout(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, bn_gamma: Tensor,
            bn_beta: Tensor, bn_state: BatchNormState, training: bool) -> Tensor:
    """``relu(relu(bn(h @ w1 + b1)) @ w2 + b2)`` with the trailing unit axis dropped."""
    z = dc.add(dc.matmul(h, w1), b1)
    z = dc.relu(dc.batchnorm(z, bn_gamma, bn_beta, bn_state, training))
    y = dc.relu(dc.add(dc.matmul(z, w2), b2))
    return dc.reshape(y, y.shape[:-1])


# the network

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class DMVSTVGNN:
    config: ModelConfig
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    bn_state: BatchNormState | None = None

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config, np.random.default_rng(self.seed))
        if self.bn_state is None:
            self.bn_state = BatchNormState.fresh(self.config.d_f1)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def masks(self, graphs: VirtualGraphSet | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for kind in self.config.graphs:
            adj = graphs.adjacency(kind) if isinstance(graphs, VirtualGraphSet) else graphs.get(kind)
            if adj is None:
                raise ConfigError(f"{kind} graph required by the model is missing")
            if adj.shape != (self.config.N, self.config.N):
                raise dc.ShapeError(f"{kind} adjacency {adj.shape} vs N={self.config.N}")
            out[kind] = neighborhood_mask(adj)
        return out

    def forward(self, x0, graphs, training: bool = False, capture: dict | None = None) -> Tensor:
        """Predict the next slot for a batch of windows.

        ``x0`` is ``(B, M, N)`` (or a single ``(M, N)`` window); ``graphs``
        is a :class:`VirtualGraphSet` or a mapping from graph kind to
        adjacency. With ``capture`` set, attention weights are stored under
        ``"gat"`` and ``"mhsa"``.
        """
        cfg, p = self.config, self.params
        x = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (cfg.M, cfg.N):
            raise dc.ShapeError(f"input {x.shape} does not match M={cfg.M}, N={cfg.N}")
        masks = graphs if isinstance(graphs, _MaskCache) else self.masks(graphs)
        if capture is not None:
            capture.setdefault("gat", {})
            capture.setdefault("mhsa", [])
            capture["masks"] = masks

        x1 = embed(Tensor(np.transpose(x, (0, 2, 1))[..., None]), p["w0"])  # (B,N,M,C1)
        x2 = gated_conv(x1, p["gamma1"], p["gamma2"]) if cfg.short_term else x1
        x3 = self._spatial(x2, masks, capture)
        x4 = dc.add(x1, x3)
        if cfg.long_term:
            pe = Tensor(positional_encoding(cfg.M, cfg.C1, cfg.pe_mode))
            cap = capture["mhsa"] if capture is not None else None
            x5 = mhsa(dc.add(x4, pe), p["mhsa.wq"], p["mhsa.wk"], p["mhsa.wv"], p["mhsa.wo"], cap)
        else:
            x5 = x4
        last = x5[:, :, -1, :]
        y = readout(last, p["ff.w1"], p["ff.b1"], p["ff.w2"], p["ff.b2"], p["bn.gamma"],
                    p["bn.beta"], self.bn_state, training)
        return y[0] if single else y

    __call__ = forward

    def _spatial(self, x2: Tensor, masks: Mapping[str, np.ndarray], capture) -> Tensor:
        cfg, p = self.config, self.params
        h0 = dc.transpose(x2, (0, 2, 1, 3))                               # (B,M,N,C2)
        outs = []
        for kind in cfg.graphs:
            h = h0
            for layer in range(cfg.gat_layers):
                cap = None
                if capture is not None:
                    cap = capture["gat"].setdefault((kind, layer), [])
                h = gat_layer(h, masks[kind], p[f"gat.{kind}.{layer}.W"],
                              p[f"gat.{kind}.{layer}.phi"], cfg.leaky_slope, cap)
            outs.append(h)
        x3 = outs[0] if len(outs) == 1 else dc.concat(outs, axis=-1)
        return dc.transpose(x3, (0, 2, 1, 3))                             # (B,N,M,g*C3)

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {name: t.data.copy() for name, t in self.params.items()}
        d["bn.running_mean"] = self.bn_state.mean.copy()
        d["bn.running_var"] = self.bn_state.var.copy()
        return d

    def load_state_dict(self, d: Mapping[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if d[name].shape != t.shape:
                raise dc.ShapeError(f"{name}: checkpoint {d[name].shape} vs model {t.shape}")
            t.data = np.array(d[name], dtype=np.float64)
        self.bn_state.mean = np.array(d["bn.running_mean"], dtype=np.float64)
        self.bn_state.var = np.array(d["bn.running_var"], dtype=np.float64)

    def save(self, path) -> None:
        dc.save_archive(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(dc.load_archive(path))


class _MaskCache(dict):
    """Precomputed neighbourhood masks, reusable across forward calls."""


def prepare_masks(model: DMVSTVGNN, graphs) -> _MaskCache:
    return _MaskCache(model.masks(graphs))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    shapes = param_shapes(cfg)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".b1") or name.endswith(".b2") or name == "bn.beta":
            arr = np.zeros(shape)
        elif name == "bn.gamma":
            arr = np.ones(shape)
        elif name in ("gamma1", "gamma2"):
            K, cin, cout = shape
            arr = _glorot(rng, shape, K * cin, K * cout)
        elif name.endswith(".phi"):
            arr = _glorot(rng, shape, shape[1], 1)
        elif len(shape) == 3:
            arr = _glorot(rng, shape, shape[1], shape[2])
        else:
            arr = _glorot(rng, shape, shape[0], shape[1])
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    s: dict[str, tuple[int, ...]] = {"w0": (1, cfg.C1)}
    if cfg.short_term:
        s["gamma1"] = (cfg.K, cfg.C1, cfg.C2)
        s["gamma2"] = (cfg.K, cfg.C1, cfg.C2)
    for kind in cfg.graphs:
        cin = cfg.C2
        for layer in range(cfg.gat_layers):
            s[f"gat.{kind}.{layer}.W"] = (cfg.L, cin, cfg.C3)
            s[f"gat.{kind}.{layer}.phi"] = (cfg.L, 2 * cfg.C3)
            cin = cfg.C3
    width = cfg.C1
    if cfg.long_term:
        for w in ("wq", "wk", "wv"):
            s[f"mhsa.{w}"] = (cfg.L, cfg.C1, cfg.d_k)
        s["mhsa.wo"] = (cfg.L * cfg.d_k, cfg.d_m)
        width = cfg.d_m
    s["ff.w1"] = (width, cfg.d_f1)
    s["ff.b1"] = (cfg.d_f1,)
    s["bn.gamma"] = (cfg.d_f1,)
    s["bn.beta"] = (cfg.d_f1,)
    s["ff.w2"] = (cfg.d_f1, 1)
    s["ff.b2"] = (1,)
    return s


def parameter_census(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts grouped by stage."""
    groups = {"embed": 0, "short_term": 0, "spatial": 0, "long_term": 0, "readout": 0}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if name == "w0":
            groups["embed"] += n
        elif name.startswith("gamma"):
            groups["short_term"] += n
        elif name.startswith("gat."):
            groups["spatial"] += n
        elif name.startswith("mhsa."):
            groups["long_term"] += n
        else:
            groups["readout"] += n
    return groups
