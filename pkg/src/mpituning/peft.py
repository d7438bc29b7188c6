"""Parameter-efficient tuning methods for the toy detector.

Each method decides which registry entries are trainable:

=============  ==================================================
zero-shot      nothing
mpi            the multi-head positional encoder
adapter        bottleneck adapters on decoder self-attention / FFN
coop           learnable text context tokens
coop-dec       text context tokens + the whole decoder
vpt            learnable visual tokens in the image encoder
vpt-dec        visual tokens + the whole decoder
full           every detector weight
=============  ==================================================
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .detector import DetectorConfig, ToyGroundedDetector
from .errors import ContractError
from .layers import LayerNorm, Linear
from .mhp import DEFAULT_BASE, DEFAULT_DIM, DEFAULT_TABLE_LENGTH, MHPEncoder


class TuningMethod(str, enum.Enum):
    ZERO_SHOT = "zero-shot"
    MPI = "mpi"
    ADAPTER = "adapter"
    COOP = "coop"
    COOP_DEC = "coop-dec"
    VPT = "vpt"
    VPT_DEC = "vpt-dec"
    FULL = "full"

    @property
    def tunes_decoder(self) -> bool:
        return self in (TuningMethod.COOP_DEC, TuningMethod.VPT_DEC)


@dataclass
class PeftConfig:
    M: int = 12
    mhp_dim: int = DEFAULT_DIM
    table_length: int = DEFAULT_TABLE_LENGTH
    table_base: float = DEFAULT_BASE
    n_ctx: int = 8
    n_visual: int = 8
    visual_deep: bool = True
    adapter_dim: int | None = None  # default d // 2
    seed: int = 1


class AdapterModule:
    """out = x + LayerNorm(W2 relu(W1 x)).

    The LayerNorm gain starts at zero, which makes the branch vanish exactly at
    attachment.  Zeroing W2 instead would feed LayerNorm an all-zero vector,
    where its input gradient is scaled by 1/sqrt(eps).
    """

    def __init__(self, store: ParamStore, name: str, d: int, bottleneck: int, rng):
        self.down = Linear(store, f"{name}.down", d, bottleneck, rng)
        self.up = Linear(store, f"{name}.up", bottleneck, d, rng)
        self.norm = LayerNorm(store, f"{name}.norm", d)
        self.norm.gain.data[:] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.norm(self.up(ad.relu(self.down(x))))


def attach_adapters(det: ToyGroundedDetector, bottleneck: int | None = None, rng=None) -> ToyGroundedDetector:
    if det.adapters:
        raise ContractError("adapters are already attached")
    rng = rng if rng is not None else np.random.default_rng(1)
    b = bottleneck or det.cfg.d // 2
    for i in range(det.cfg.dec_blocks):
        for site in ("self_attn", "ffn"):
            key = f"decoder{i}.{site}"
            det.adapters[key] = AdapterModule(det.store, f"adapter.{key}", det.cfg.d, b, rng)
    return det


def attach_text_prompts(det: ToyGroundedDetector, n_ctx: int, rng=None) -> ToyGroundedDetector:
    if n_ctx <= 0:
        raise ContractError("number of context tokens must be positive")
    if det.text_prompt is not None:
        raise ContractError("text prompts are already attached")
    rng = rng if rng is not None else np.random.default_rng(2)
    det.text_prompt = det.store.add("prompt.text", rng.normal(0.0, 0.02, (n_ctx, det.cfg.d)))
    return det


def attach_visual_prompts(det: ToyGroundedDetector, n_tok: int, deep: bool = True,
                          rng=None) -> ToyGroundedDetector:
    if n_tok <= 0:
        raise ContractError("number of visual tokens must be positive")
    if det.visual_prompts is not None:
        raise ContractError("visual prompts are already attached")
    rng = rng if rng is not None else np.random.default_rng(3)
    layers = len(det.image_layers) if deep else 1
    det.visual_prompts = [
        det.store.add(f"prompt.visual{i}", rng.normal(0.0, 0.02, (n_tok, det.cfg.d)))
        for i in range(layers)
    ]
    det.visual_deep = deep
    return det


def set_decoder_trainable(det: ToyGroundedDetector, flag: bool) -> None:
    det.store.set_trainable(det.decoder_param_names(), flag)


def setup_method(det: ToyGroundedDetector, method, peft: PeftConfig | None = None):
    """Freeze the detector and attach whatever ``method`` trains.

    Returns the MHPEncoder for ``mpi`` and None otherwise.
    """
    method = TuningMethod(method)
    peft = peft or PeftConfig()
    rng = np.random.default_rng(peft.seed)
    store = det.store
    store.set_trainable(det.backbone_param_names(), method is TuningMethod.FULL)
    mhp = None
    if method is TuningMethod.MPI:
        mhp = MHPEncoder(store, det.points, M=peft.M, D=peft.mhp_dim, L=peft.table_length,
                         C=peft.table_base, rng=rng)
    elif method is TuningMethod.ADAPTER:
        attach_adapters(det, peft.adapter_dim, rng)
    elif method in (TuningMethod.COOP, TuningMethod.COOP_DEC):
        attach_text_prompts(det, peft.n_ctx, rng)
    elif method in (TuningMethod.VPT, TuningMethod.VPT_DEC):
        attach_visual_prompts(det, peft.n_visual, peft.visual_deep, rng)
    if method.tunes_decoder:
        set_decoder_trainable(det, True)
    return mhp


GROUPS = ("mhp", "adapter", "prompt", "decoder", "backbone")


def learnable_breakdown(store: ParamStore) -> dict:
    """Trainable scalars per group, plus the total."""
    out = {g: 0 for g in GROUPS}
    for name, t in store.items():
        if not store.is_trainable(name):
            continue
        head = name.split(".")[0]
        group = head if head in ("mhp", "adapter", "prompt", "decoder") else "backbone"
        out[group] += t.size
    out["total"] = sum(out[g] for g in GROUPS)
    return out


def count_learnable(method, cfg: DetectorConfig | None = None, peft: PeftConfig | None = None) -> dict:
    """Exact learnable-scalar counts of ``method`` on a freshly built detector."""
    det = ToyGroundedDetector(cfg or DetectorConfig())
    setup_method(det, method, peft)
    return learnable_breakdown(det.store)
