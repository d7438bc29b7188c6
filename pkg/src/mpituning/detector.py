"""A miniature grounded detector in the Grounding-DINO mould.

Five stages, every one small enough to train on a laptop core:

* text encoder  - one embedding per category name plus a self-attention block
* image encoder - patchify, linear embed, two self-attention blocks
* feature enhancer - per block: text self-attention, image self-attention,
  bidirectional cross-attention fusion and feed-forward layers
* query selector - top-K image tokens by their best text-alignment logit
* decoder - query self-attention, image and text cross-attention, FFN; boxes
  refine the selected token's reference box, logits are query-text dot products

The registry of insertion points (where positional embeddings can be added)
has ``2 + 2 * fe_blocks + 2 * dec_blocks`` entries.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ContractError, DimensionError, VocabularyError
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention
from .mhp import InsertionPoint, insert

CATEGORIES = (
    "disc", "square", "triangle", "ring", "cross",
    "bar-h", "bar-v", "diamond", "dot-cluster",
)


@dataclass
class DetectorConfig:
    image_size: int = 96
    patch_size: int = 8
    channels: int = 1
    d: int = 64
    heads: int = 4
    fe_blocks: int = 2
    dec_blocks: int = 2
    num_queries: int = 16
    ffn_hidden: int = 128
    init_box_size: float = 0.1
    categories: tuple = CATEGORIES
    seed: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.d % self.heads:
            raise ContractError(f"model dim {self.d} not divisible by {self.heads} heads")
        if self.num_queries > self.num_tokens:
            raise ContractError(f"{self.num_queries} queries exceed {self.num_tokens} image tokens")

    @classmethod
    def full_depth(cls, **overrides):
        """Six enhancer and six decoder blocks, the layout with 26 insertion points."""
        return cls(**{"fe_blocks": 6, "dec_blocks": 6, **overrides})

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def num_insertion_points(self) -> int:
        return 2 + 2 * self.fe_blocks + 2 * self.dec_blocks

    def to_dict(self):
        out = asdict(self)
        out["categories"] = list(self.categories)
        return out


@dataclass
class DetectorOutput:
    boxes: Tensor                # (B, K, 4) cx, cy, w, h in [0, 1]
    logits: Tensor               # (B, K, T)
    aux: list = field(default_factory=list)  # [(boxes, logits)] for earlier decoder blocks
    enc_logits: Tensor | None = None          # (B, S, T) token-text alignment
    selected: np.ndarray | None = None        # (B, K) selected token indices
    reference: np.ndarray | None = None       # (B, K, 4)


def box_sine_embedding(boxes: np.ndarray, d: int, temperature: float = 10_000.0) -> np.ndarray:
    """Fixed sinusoidal features of (cx, cy, w, h), d // 4 per coordinate."""
    per = d // 4
    freq = temperature ** (2 * (np.arange(per) // 2) / per)
    ang = boxes[..., :, None] * 2 * math.pi / freq
    feats = np.where(np.arange(per) % 2 == 0, np.sin(ang), np.cos(ang))
    return feats.reshape(*boxes.shape[:-1], 4 * per)


def inverse_sigmoid(x, eps=1e-5):
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


class ToyGroundedDetector:
    def __init__(self, cfg: DetectorConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(cfg.seed)
        s, d, h, hid = self.store, cfg.d, cfg.heads, cfg.ffn_hidden

        self.vocab = {name: i for i, name in enumerate(cfg.categories)}
        self.text_embed = s.add("text.embed", rng.normal(0, 1.0, (len(cfg.categories), d)))
        self.text_attn = MultiHeadAttention(s, "text.attn", d, h, rng)
        self.text_norm = LayerNorm(s, "text.norm", d)

        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_embed = Linear(s, "image.patch", patch_dim, d, rng)
        self.image_pos = s.add("image.pos", rng.normal(0, 0.1, (cfg.num_tokens, d)))
        self.image_layers = []
        for i in range(2):
            pre = f"image.layer{i}"
            self.image_layers.append(dict(
                attn=MultiHeadAttention(s, f"{pre}.attn", d, h, rng),
                norm1=LayerNorm(s, f"{pre}.norm1", d),
                ffn=FeedForward(s, f"{pre}.ffn", d, hid, rng),
                norm2=LayerNorm(s, f"{pre}.norm2", d),
            ))

        self.fe_layers = []
        for i in range(cfg.fe_blocks):
            pre = f"enhancer.block{i}"
            self.fe_layers.append(dict(
                text_sa=MultiHeadAttention(s, f"{pre}.text_sa", d, h, rng),
                text_norm1=LayerNorm(s, f"{pre}.text_norm1", d),
                image_sa=MultiHeadAttention(s, f"{pre}.image_sa", d, h, rng),
                image_norm1=LayerNorm(s, f"{pre}.image_norm1", d),
                i2t=MultiHeadAttention(s, f"{pre}.image_from_text", d, h, rng),
                image_norm2=LayerNorm(s, f"{pre}.image_norm2", d),
                t2i=MultiHeadAttention(s, f"{pre}.text_from_image", d, h, rng),
                text_norm2=LayerNorm(s, f"{pre}.text_norm2", d),
                image_ffn=FeedForward(s, f"{pre}.image_ffn", d, hid, rng),
                image_norm3=LayerNorm(s, f"{pre}.image_norm3", d),
                text_ffn=FeedForward(s, f"{pre}.text_ffn", d, hid, rng),
                text_norm3=LayerNorm(s, f"{pre}.text_norm3", d),
            ))
        self.enc_logit_bias = s.add("select.bias", np.array([-4.6]))

        self.query_pos = Linear(s, "decoder.query_pos", d, d, rng)
        self.dec_layers = []
        for i in range(cfg.dec_blocks):
            pre = f"decoder.block{i}"
            self.dec_layers.append(dict(
                sa=MultiHeadAttention(s, f"{pre}.self_attn", d, h, rng),
                norm1=LayerNorm(s, f"{pre}.norm1", d),
                image_ca=MultiHeadAttention(s, f"{pre}.image_ca", d, h, rng),
                norm2=LayerNorm(s, f"{pre}.norm2", d),
                text_ca=MultiHeadAttention(s, f"{pre}.text_ca", d, h, rng),
                norm3=LayerNorm(s, f"{pre}.norm3", d),
                ffn=FeedForward(s, f"{pre}.ffn", d, hid, rng),
                norm4=LayerNorm(s, f"{pre}.norm4", d),
            ))
        self.box_fc1 = Linear(s, "decoder.box.fc1", d, d, rng)
        self.box_fc2 = Linear(s, "decoder.box.fc2", d, 4, rng, zero=True)
        self.cls_proj = Linear(s, "decoder.cls.proj", d, d, rng)
        self.cls_bias = s.add("decoder.cls.bias", np.array([-4.6]))

        # PEFT attachments, populated by mpituning.peft
        self.adapters: dict = {}
        self.text_prompt: Tensor | None = None
        self.visual_prompts: list | None = None
        self.visual_deep = True

        self.points = self._build_registry()

    # ------------------------------------------------------------------
    # insertion registry
    # ------------------------------------------------------------------
    def _build_registry(self) -> list:
        cfg = self.cfg
        T, S, K, d = len(cfg.categories), cfg.num_tokens, cfg.num_queries, cfg.d
        text_pos, image_pos, query_pos = np.arange(T), np.arange(S), np.arange(K)
        pts = [
            ("text-input", "text_encoder", text_pos),
            ("image-input", "image_encoder", image_pos),
        ]
        for i in range(cfg.fe_blocks):
            pts.append((f"enhancer{i}.text-self-attn", "feature_enhancer", text_pos))
            pts.append((f"enhancer{i}.image-self-attn", "feature_enhancer", image_pos))
        for i in range(cfg.dec_blocks):
            pts.append((f"decoder{i}.image-cross-attn", "decoder", query_pos))
            pts.append((f"decoder{i}.text-cross-attn", "decoder", query_pos))
        return [InsertionPoint(id=i, name=n, host=hst, dim=d, positions=pos)
                for i, (n, hst, pos) in enumerate(pts)]

    @property
    def N(self) -> int:
        return len(self.points)

    def decoder_param_names(self) -> list:
        return self.store.names("decoder.")

    def backbone_param_names(self) -> list:
        return [n for n in self.store if n.split(".")[0] in
                ("text", "image", "enhancer", "select", "decoder")]

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------
    def _insert(self, h: Tensor, mhp: dict | None, name: str, lead: int = 0) -> Tensor:
        if mhp is None:
            return h
        p = mhp[name]
        if lead:
            p = ad.concat([Tensor(np.zeros((lead, p.shape[1]))), p], axis=0)
        pid = next(pt.id for pt in self.points if pt.name == name)
        return insert(h, p, point_id=f"{pid} ({name})")

    def _adapt(self, site: str, x: Tensor) -> Tensor:
        adapter = self.adapters.get(site)
        return x if adapter is None else adapter(x)

    def _check_mhp(self, mhp):
        if mhp is None:
            return None
        if hasattr(mhp, "__call__") and not isinstance(mhp, dict):
            mhp = mhp()
        missing = [f"{pt.id} ({pt.name})" for pt in self.points if pt.name not in mhp]
        if missing or len(mhp) != self.N:
            raise ContractError(
                f"expected {self.N} positional embeddings, got {len(mhp)}; missing points: {missing}"
            )
        return mhp

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------
    def encode_text(self, categories, mhp: dict | None = None) -> Tensor:
        """(n_ctx + T, d) text features; learnable context tokens, if any, lead."""
        if not categories:
            raise ContractError("need at least one category")
        try:
            ids = np.array([self.vocab[c] for c in categories])
        except KeyError as exc:
            raise VocabularyError(f"unknown category {exc.args[0]!r}") from None
        x = self.text_embed[ids]
        lead = 0
        if self.text_prompt is not None:
            lead = self.text_prompt.shape[0]
            x = ad.concat([self.text_prompt, x], axis=0)
        x3 = ad.reshape(x, (1,) + x.shape)
        x3 = self.text_norm(x3 + self.text_attn(x3, x3))
        out = ad.reshape(x3, x.shape)
        if mhp is not None:
            out = ad.reshape(self._insert(x3, mhp, "text-input", lead), x.shape)
        return out

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        b, H, W, c = images.shape
        if H != cfg.image_size or W != cfg.image_size or c != cfg.channels:
            raise DimensionError(
                f"expected images of {cfg.image_size}x{cfg.image_size}x{cfg.channels}, got {images.shape}"
            )
        p, g = cfg.patch_size, cfg.grid
        x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * c)

    def encode_image(self, images, mhp: dict | None = None) -> Tensor:
        images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        x = self.patch_embed(Tensor(self.patchify(images))) + self.image_pos
        b, S, _ = x.shape
        prompts = self.visual_prompts
        if prompts is not None and not self.visual_deep:
            x = ad.concat([ad.stack([prompts[0]] * b, axis=0), x], axis=1)
        for i, layer in enumerate(self.image_layers):
            if prompts is not None and self.visual_deep:
                x = ad.concat([ad.stack([prompts[i]] * b, axis=0), x], axis=1)
            x = layer["norm1"](x + layer["attn"](x, x))
            x = layer["norm2"](x + layer["ffn"](x))
            if prompts is not None and self.visual_deep:
                x = x[:, prompts[i].shape[0]:]
        if prompts is not None and not self.visual_deep:
            x = x[:, prompts[0].shape[0]:]
        return self._insert(x, mhp, "image-input")

    def enhance(self, text: Tensor, image: Tensor, mhp: dict | None = None, lead: int = 0):
        for i, blk in enumerate(self.fe_layers):
            t = blk["text_sa"](text, text)
            t = self._insert(t, mhp, f"enhancer{i}.text-self-attn", lead)
            text = blk["text_norm1"](text + t)
            v = blk["image_sa"](image, image)
            v = self._insert(v, mhp, f"enhancer{i}.image-self-attn")
            image = blk["image_norm1"](image + v)
            image_new = blk["image_norm2"](image + blk["i2t"](image, text))
            text = blk["text_norm2"](text + blk["t2i"](text, image))
            image = blk["image_norm3"](image_new + blk["image_ffn"](image_new))
            text = blk["text_norm3"](text + blk["text_ffn"](text))
        return text, image

    def token_logits(self, image: Tensor, text: Tensor) -> Tensor:
        scale = 1.0 / math.sqrt(self.cfg.d)
        return ad.matmul(image, ad.swapaxes(text, -1, -2)) * scale + self.enc_logit_bias

    def select_queries(self, image: Tensor, text: Tensor, K: int | None = None,
                       enc_logits: Tensor | None = None):
        """Top-K image tokens by max text-alignment logit; ties go to the lower index."""
        cfg = self.cfg
        K = cfg.num_queries if K is None else K
        b, S, _ = image.shape
        if K > S:
            raise ContractError(f"cannot select {K} queries from {S} tokens")
        if enc_logits is None:
            enc_logits = self.token_logits(image, text)
        scores = enc_logits.data.max(axis=-1)
        idx = np.argsort(-scores, axis=1, kind="stable")[:, :K]
        rows = np.arange(b)[:, None]
        content = image[rows, idx]
        g = cfg.grid
        cx = ((idx % g) + 0.5) / g
        cy = ((idx // g) + 0.5) / g
        wh = np.full_like(cx, cfg.init_box_size, dtype=np.float64)
        ref = np.stack([cx, cy, wh, wh], axis=-1)
        return content, ref, idx, np.take_along_axis(scores, idx, axis=1)

    def heads(self, q: Tensor, text: Tensor, ref: np.ndarray):
        delta = self.box_fc2(ad.relu(self.box_fc1(q)))
        boxes = ad.sigmoid(delta + inverse_sigmoid(ref))
        scale = 1.0 / math.sqrt(self.cfg.d)
        logits = ad.matmul(self.cls_proj(q), ad.swapaxes(text, -1, -2)) * scale + self.cls_bias
        return boxes, logits

    def decode(self, queries: Tensor, ref: np.ndarray, text: Tensor, image: Tensor,
               mhp: dict | None = None) -> DetectorOutput:
        pos = self.query_pos(Tensor(box_sine_embedding(ref, self.cfg.d)))
        keys = image + self.image_pos
        q = queries
        outputs = []
        for i, blk in enumerate(self.dec_layers):
            qp = q + pos
            sa = self._adapt(f"decoder{i}.self_attn", blk["sa"](qp, qp, q))
            q = blk["norm1"](q + sa)
            ca = blk["image_ca"](q + pos, keys, image)
            ca = self._insert(ca, mhp, f"decoder{i}.image-cross-attn")
            q = blk["norm2"](q + ca)
            ct = blk["text_ca"](q, text)
            ct = self._insert(ct, mhp, f"decoder{i}.text-cross-attn")
            q = blk["norm3"](q + ct)
            ff = self._adapt(f"decoder{i}.ffn", blk["ffn"](q))
            q = blk["norm4"](q + ff)
            outputs.append(self.heads(q, text, ref))
        boxes, logits = outputs[-1]
        return DetectorOutput(boxes=boxes, logits=logits, aux=outputs[:-1], reference=ref)

    def forward(self, images, categories=None, mhp=None) -> DetectorOutput:
        """End-to-end pass; ``mhp`` is an MHPEncoder or a dict of embeddings by point name."""
        categories = self.cfg.categories if categories is None else categories
        mhp = self._check_mhp(mhp)
        text = self.encode_text(categories, mhp)
        lead = 0 if self.text_prompt is None else self.text_prompt.shape[0]
        image = self.encode_image(images, mhp)
        b = image.shape[0]
        text_b = ad.stack([text] * b, axis=0)
        text_b, image = self.enhance(text_b, image, mhp, lead)
        if lead:
            text_b = text_b[:, lead:]
        enc_logits = self.token_logits(image, text_b)
        content, ref, idx, _ = self.select_queries(image, text_b, enc_logits=enc_logits)
        out = self.decode(content, ref, text_b, image, mhp)
        out.enc_logits = enc_logits
        out.selected = idx
        return out

    __call__ = forward
