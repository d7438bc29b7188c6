"""Multi-head positional encoder and the additive insertion rule.

The encoder turns a fixed sinusoidal table into ``N`` learnable positional
embeddings, one per insertion point of a frozen host network::

    table (L x D) --> M tiny MLPs --> mixer (A: N x M, g_i: D -> dim_i) --> p_1..p_N

and each latent feature ``h_i`` of the host is replaced by ``h_i + p_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ContractError, DimensionError
from .layers import LayerNorm, Linear

PAPER_TABLE_LENGTH = 80_000
DEFAULT_TABLE_LENGTH = 4096
DEFAULT_DIM = 64
DEFAULT_BASE = 10_000.0


@dataclass
class SinusoidalTable:
    table: np.ndarray  # (L, D)
    L: int
    D: int
    C: float

    def rows(self, n: int) -> Tensor:
        if n > self.L:
            raise ContractError(f"requested {n} positions but the table only has {self.L}")
        return Tensor(self.table[:n])


def build_sinusoidal_table(L: int = DEFAULT_TABLE_LENGTH, D: int = DEFAULT_DIM,
                           C: float = DEFAULT_BASE) -> SinusoidalTable:
    """Row ``l`` holds sin(l / C^(2k/D)) in slot 2k and cos(...) in slot 2k+1."""
    if D <= 0 or D % 2:
        raise ContractError(f"embedding dim must be a positive even number, got {D}")
    if L < 1:
        raise ContractError(f"table length must be >= 1, got {L}")
    if C <= 0:
        raise ContractError(f"frequency constant must be positive, got {C}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    k = np.arange(D // 2, dtype=np.float64)[None, :]
    angle = pos / C ** (2.0 * k / D)
    table = np.empty((L, D))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return SinusoidalTable(table=table, L=L, D=D, C=float(C))


@dataclass
class InsertionPoint:
    """One latent feature of the host that receives a positional embedding.

    ``positions[t]`` is the table row used for token slot ``t``.
    """

    id: int
    name: str
    host: str
    dim: int
    positions: np.ndarray = field(repr=False)

    @property
    def tokens(self) -> int:
        return len(self.positions)


class TinyMLP:
    """Two blocks of linear -> LayerNorm -> SwiGLU, all at width D."""

    def __init__(self, store: ParamStore, name: str, D: int, rng, trainable=True):
        self.D = D
        self.blocks = []
        for b in range(2):
            pre = f"{name}.block{b}"
            self.blocks.append((
                Linear(store, f"{pre}.linear", D, D, rng, trainable),
                LayerNorm(store, f"{pre}.norm", D, trainable),
                Linear(store, f"{pre}.gate", D, D, rng, trainable),
                Linear(store, f"{pre}.value", D, D, rng, trainable),
            ))

    def __call__(self, x: Tensor) -> Tensor:
        return tiny_mlp_forward(self, x)


def tiny_mlp_forward(mlp: TinyMLP, x: Tensor) -> Tensor:
    if x.shape[-1] != mlp.D:
        raise DimensionError(f"tiny MLP expects width {mlp.D}, got input {x.shape}")
    for lin, norm, gate, value in mlp.blocks:
        y = norm(lin(x))
        x = ad.swish(gate(y)) * value(y)
    return x


def mix(E: list, A: Tensor, g: list, points: list) -> list:
    """p_i = g_i(sum_j A_ij E_j), gathered at each point's table rows."""
    N = len(points)
    if A.shape != (N, len(E)):
        raise DimensionError(f"mixer matrix has shape {A.shape}, expected ({N}, {len(E)})")
    if len(g) != N:
        raise DimensionError(f"{len(g)} output maps for {N} insertion points")
    if E:
        n, D = E[0].shape
        flat = ad.concat([ad.reshape(e, (1, n * D)) for e in E], axis=0)
        mixed = ad.reshape(ad.matmul(A, flat), (N, n, D))
    else:
        mixed = None
    out = []
    for i, (pt, gi) in enumerate(zip(points, g)):
        if gi.d_out != pt.dim:
            raise DimensionError(
                f"insertion point {pt.id} ({pt.name}) has dim {pt.dim} but its map outputs {gi.d_out}"
            )
        if mixed is None:
            rows = Tensor(np.zeros((pt.tokens, gi.d_in)))
        else:
            rows = mixed[i, pt.positions]
        out.append(gi(rows))
    return out


def insert(h: Tensor, p: Tensor, point_id=None) -> Tensor:
    """h' = h + p, with p broadcast over the batch axis."""
    if tuple(h.shape[-2:]) != tuple(p.shape):
        raise DimensionError(
            f"insertion point {point_id}: feature shape {h.shape} cannot take embedding {p.shape}"
        )
    return h + p


class MHPEncoder:
    """Learnable positional encoder producing one embedding per insertion point.

    The output maps ``g_i`` start at exactly zero so the adapted host initially
    reproduces the frozen host bit for bit.  ``A`` starts random: if it were
    zero too, neither ``A`` nor ``g_i`` could ever receive a gradient.
    """

    def __init__(self, store: ParamStore, points: list, M: int = 12, D: int = DEFAULT_DIM,
                 L: int = DEFAULT_TABLE_LENGTH, C: float = DEFAULT_BASE,
                 rng: np.random.Generator | None = None, prefix: str = "mhp",
                 zero_mixer: bool = False):
        if M < 0:
            raise ContractError(f"number of tiny MLPs must be >= 0, got {M}")
        rng = rng if rng is not None else np.random.default_rng(0)
        ids = [p.id for p in points]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate insertion point ids: {ids}")
        self.points = list(points)
        self.M, self.D = M, D
        self.table = build_sinusoidal_table(L, D, C)
        self.n_rows = max((int(p.positions.max()) + 1 for p in points if p.tokens), default=0)
        if self.n_rows > L:
            raise ContractError(f"insertion points index row {self.n_rows - 1} >= table length {L}")
        self.mlps = [TinyMLP(store, f"{prefix}.mlp{j}", D, rng) for j in range(M)]
        N = len(points)
        a0 = np.zeros((N, M)) if zero_mixer or M == 0 else rng.normal(0.0, 1.0 / math.sqrt(M), (N, M))
        self.A = store.add(f"{prefix}.A", a0)
        self.g = [Linear(store, f"{prefix}.g{p.id}", D, p.dim, zero=True) for p in points]
        self.prefix = prefix

    @property
    def N(self):
        return len(self.points)

    def __call__(self) -> dict:
        """Embeddings keyed by insertion point name."""
        e = self.table.rows(self.n_rows)
        E = [mlp(e) for mlp in self.mlps]
        P = mix(E, self.A, self.g, self.points)
        return {pt.name: p for pt, p in zip(self.points, P)}


def count_params(M: int, points: list, D: int = DEFAULT_DIM) -> dict:
    """Closed-form learnable-scalar breakdown of an encoder."""
    block = 3 * (D * D + D) + 2 * D  # linear + gate + value, LayerNorm gain/bias
    per_mlp = 2 * block
    per_g = [D * p.dim + p.dim for p in points]
    mixer_a = len(points) * M
    total = M * per_mlp + mixer_a + sum(per_g)
    return {
        "per_tiny_mlp": per_mlp,
        "tiny_mlps": M * per_mlp,
        "mixer_A": mixer_a,
        "per_g": per_g,
        "g_total": sum(per_g),
        "total": total,
    }
