"""Fusion encoders over two frame-rate-mismatched streams.

Both streams are linearly projected into a shared width, then fused by one
of six strategies:

    concat    mean-pool each stream, concatenate, classify (no attention)
    isa+isa   two per-modality self-attention towers, two layers each
    ica+ica   two layers of bidirectional cross-attention (audio queries
              video and vice versa, separate parameters per direction)
    isa+ica   self-attention layer, then cross-attention layer
    ica+isa   cross-attention layer, then self-attention layer
    msa+msa   both streams concatenated into one token sequence, two shared
              self-attention blocks over all tokens

All attention blocks are pre-norm residual blocks (multi-head attention +
GELU feed-forward) with identical parameter shapes, so every stacked
two-tower variant has exactly the same parameter count.  Token pooling is a
mean over all tokens of both streams, followed by a linear classifier.

A matching-space projection (unit-norm embeddings for the cross-temporal
loss) taps the shared-space features right after input projection, before
any positional addition.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tz
from .ctm import CtmProjection
from .data import FeatureSequence
from .posenc import (AUDIO, VIDEO, RateSpec, RotaryBank, normalize_posenc,
                     positions_for, sinusoidal_table)
from .tensor import Tensor

FUSION_VARIANTS = ("concat", "isa+isa", "ica+ica", "isa+ica", "ica+isa", "msa+msa")
_FUSION_ALIASES = {"msa": "msa+msa", "msa_msa": "msa+msa", "isa_isa": "isa+isa",
                   "ica_ica": "ica+ica", "isa_ica": "isa+ica", "ica_isa": "ica+isa"}
# stacked two-tower variants share one parameter count
STACKED_VARIANTS = ("isa+isa", "ica+ica", "isa+ica", "ica+isa")

_NEG_INF = -1e30


class EncoderConfigError(ValueError):
    """Inconsistent encoder configuration or input dimensions."""


def normalize_fusion(tag: str) -> str:
    t = tag.strip().lower().replace("-", "+")
    t = _FUSION_ALIASES.get(t, t)
    if t not in FUSION_VARIANTS:
        raise EncoderConfigError(f"unknown fusion variant {tag!r}; expected one of {FUSION_VARIANTS}")
    return t


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 0                   # 0 means 4 * d_model
    n_blocks: int = 2
    fusion: str = "msa+msa"
    posenc: str = "tarope"
    n_classes: int = 6
    d_in_audio: int = 1024
    d_in_video: int = 35
    dropout_rate: float = 0.1
    max_len: int = 512              # additive positional table capacity

    def __post_init__(self):
        object.__setattr__(self, "fusion", normalize_fusion(self.fusion))
        object.__setattr__(self, "posenc", normalize_posenc(self.posenc))
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.n_heads != 0:
            raise EncoderConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise EncoderConfigError("head_dim = d_model / n_heads must be even")
        if self.n_blocks < 1:
            raise EncoderConfigError("n_blocks must be at least 1")
        if self.fusion in ("isa+ica", "ica+isa") and self.n_blocks != 2:
            raise EncoderConfigError(f"{self.fusion} is a two-layer composition (n_blocks=2)")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise EncoderConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.n_classes < 2:
            raise EncoderConfigError("need at least 2 classes")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ForwardResult:
    logits: Tensor          # 1 x n_classes
    e_audio: Tensor         # unit-norm matching embeddings, T_a x d_emb
    e_video: Tensor
    ctm_pre_audio: Tensor   # matching projections before normalization
    ctm_pre_video: Tensor
    shared_audio: Tensor    # shared-space features after input projection
    shared_video: Tensor
    t_audio: np.ndarray     # frame timestamps, seconds
    t_video: np.ndarray
    rates: RateSpec


def _layer_prefixes(fusion: str, n_blocks: int) -> list[list[str]]:
    """Block parameter prefixes per layer; each inner list is one layer."""
    if fusion == "concat":
        return []
    if fusion == "msa+msa":
        return [[f"fuse.msa{i}"] for i in range(n_blocks)]
    isa = lambda i: [f"fuse.audio{i}", f"fuse.video{i}"]
    ica = lambda i: [f"fuse.a_from_v{i}", f"fuse.v_from_a{i}"]
    kinds = {"isa+isa": (isa, isa), "ica+ica": (ica, ica),
             "isa+ica": (isa, ica), "ica+isa": (ica, isa)}
    first, second = kinds[fusion]
    layers = [first(0)]
    for i in range(1, n_blocks):
        layers.append(second(i))
    return layers


@lru_cache(maxsize=1024)
def _stream_meta(modality: str, n: int):
    """Token metadata tuple for one single-modality stream."""
    return ((modality,) * n, tuple(range(n)))


@lru_cache(maxsize=1024)
def _msa_meta(posenc: str, t_a: int, t_v: int):
    """Token metadata for the concatenated sequence.

    Plain rotary encoding numbers tokens straight through the concatenation;
    the time-aligned variant keeps per-stream frame indices (the rate ratio
    rescales them later).
    """
    modalities = (AUDIO,) * t_a + (VIDEO,) * t_v
    if posenc == "rope":
        indices = tuple(range(t_a + t_v))
    else:
        indices = tuple(range(t_a)) + tuple(range(t_v))
    return (modalities, indices)


@lru_cache(maxsize=512)
def _rope_tables(variant: str, modalities: tuple, indices: tuple, ratio: float,
                 head_dim: int, n_heads: int):
    """Cached cos/sin rotation tables; None for additive variants.

    Keyed on immutable token metadata so repeated sequence shapes (every
    block, every epoch) reuse one table.  Returned arrays are never mutated.
    """
    if variant not in ("rope", "tarope"):
        return None
    rates = RateSpec(ratio, 1.0) if variant == "tarope" else None
    pos = positions_for(variant, list(modalities), list(indices), rates)
    bank = RotaryBank(head_dim)
    angles = np.tile(pos[:, None] * bank.freqs[None, :], (1, n_heads))
    return np.cos(angles), np.sin(angles)


class FusionModel:
    """A configured fusion encoder with named float64 parameters."""

    def __init__(self, cfg: EncoderConfig, d_emb: int = 128, seed: int = 0):
        self.cfg = cfg
        self.d_emb = int(d_emb)
        self.seed = int(seed)
        self.bank = RotaryBank(cfg.head_dim)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def _add_linear(self, prefix: str, d_in: int, d_out: int, rng) -> None:
        bound = 1.0 / math.sqrt(d_in)
        self._add(f"{prefix}.W", rng.uniform(-bound, bound, size=(d_in, d_out)))
        self._add(f"{prefix}.b", np.zeros(d_out))

    def _add_block(self, prefix: str, rng) -> None:
        d, d_ff = self.cfg.d_model, self.cfg.d_ff
        self._add(f"{prefix}.ln1.g", np.ones(d))
        self._add(f"{prefix}.ln1.b", np.zeros(d))
        for name in ("Wq", "Wk", "Wv", "Wo"):
            self._add_linear(f"{prefix}.{name}", d, d, rng)
        self._add(f"{prefix}.ln2.g", np.ones(d))
        self._add(f"{prefix}.ln2.b", np.zeros(d))
        self._add_linear(f"{prefix}.ffn1", d, d_ff, rng)
        self._add_linear(f"{prefix}.ffn2", d_ff, d, rng)

    def _init_params(self, rng) -> None:
        cfg = self.cfg
        self._add_linear("proj_audio", cfg.d_in_audio, cfg.d_model, rng)
        self._add_linear("proj_video", cfg.d_in_video, cfg.d_model, rng)
        self._add_linear("ctm_audio", cfg.d_model, self.d_emb, rng)
        self._add_linear("ctm_video", cfg.d_model, self.d_emb, rng)
        if cfg.posenc == "learnable":
            self._add("posenc.table", rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_model)))
        for layer in _layer_prefixes(cfg.fusion, cfg.n_blocks):
            for prefix in layer:
                self._add_block(prefix, rng)
        cls_in = 2 * cfg.d_model if cfg.fusion == "concat" else cfg.d_model
        self._add_linear("classifier", cls_in, cfg.n_classes, rng)

    # -- pieces -------------------------------------------------------------

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return tz.add(tz.matmul(x, self.params[f"{prefix}.W"]), self.params[f"{prefix}.b"])

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        p = self.cfg.dropout_rate
        if not train or p == 0.0:
            return x
        if rng is None:
            raise ValueError("training forward with dropout needs an rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return tz.mul_const(x, mask)

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor, meta_q, meta_kv,
                   rates: RateSpec, train: bool, rng, capture, pair_mask) -> Tensor:
        cfg = self.cfg
        p = self.params
        normed_q = tz.layer_norm(x_q, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        normed_kv = normed_q if x_kv is x_q else tz.layer_norm(
            x_kv, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = self._linear(f"{prefix}.Wq", normed_q)
        k = self._linear(f"{prefix}.Wk", normed_kv)
        v = self._linear(f"{prefix}.Wv", normed_kv)
        tab_q = _rope_tables(cfg.posenc, meta_q[0], meta_q[1], rates.ratio,
                             cfg.head_dim, cfg.n_heads)
        tab_kv = tab_q if meta_kv is meta_q else _rope_tables(
            cfg.posenc, meta_kv[0], meta_kv[1], rates.ratio, cfg.head_dim, cfg.n_heads)
        if tab_q is not None:
            q = tz.rope_pairs(q, *tab_q)
            k = tz.rope_pairs(k, *tab_kv)

        hd = cfg.head_dim
        inv_sqrt = 1.0 / math.sqrt(hd)
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * hd, (h + 1) * hd
            qh = tz.slice_cols(q, lo, hi)
            kh = tz.slice_cols(k, lo, hi)
            vh = tz.slice_cols(v, lo, hi)
            scores = tz.scale(tz.matmul(qh, tz.transpose(kh)), inv_sqrt)
            if pair_mask is not None:
                scores = tz.add(scores, Tensor(pair_mask))
            attn = tz.softmax(scores, axis=1)
            if capture is not None:
                capture.setdefault("attn", []).append(attn.data.copy())
                capture.setdefault("scores", []).append(scores.data.copy())
            attn = self._dropout(attn, train, rng)
            heads.append(tz.matmul(attn, vh))
        ctx = heads[0] if len(heads) == 1 else tz.concat_cols(heads)
        return self._linear(f"{prefix}.Wo", ctx)

    def _block(self, prefix: str, x_q: Tensor, x_kv: Tensor, meta_q, meta_kv,
               rates: RateSpec, train: bool, rng, capture, pair_mask=None) -> Tensor:
        p = self.params
        h = tz.add(x_q, self._attention(prefix, x_q, x_kv, meta_q, meta_kv,
                                        rates, train, rng, capture, pair_mask))
        normed = tz.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        ff = self._linear(f"{prefix}.ffn2", tz.gelu(self._linear(f"{prefix}.ffn1", normed)))
        ff = self._dropout(ff, train, rng)
        return tz.add(h, ff)

    @staticmethod
    def _stream_meta(modality: str, n: int):
        return _stream_meta(modality, n)

    def _msa_meta(self, t_a: int, t_v: int):
        return _msa_meta(self.cfg.posenc, t_a, t_v)

    # -- fusion blocks (exposed individually for direct inspection) ---------

    def msa_block(self, i: int, f_a: Tensor, f_v: Tensor, rates: RateSpec, *,
                  train: bool = False, rng=None, capture=None,
                  intra_only: bool = False) -> tuple[Tensor, Tensor]:
        """One shared self-attention block over the concatenated token sequence."""
        t_a, t_v = f_a.shape[0], f_v.shape[0]
        z = f_a if t_v == 0 else (f_v if t_a == 0 else tz.concat_rows([f_a, f_v]))
        meta = self._msa_meta(t_a, t_v)
        pair_mask = None
        if intra_only:
            # suppress cross-modal attention (diagnostic: isolates intra paths)
            is_audio = np.array([1.0] * t_a + [0.0] * t_v)
            cross = is_audio[:, None] != is_audio[None, :]
            pair_mask = np.where(cross, _NEG_INF, 0.0)
        z = self._block(f"fuse.msa{i}", z, z, meta, meta, rates, train, rng,
                        capture, pair_mask)
        if t_v == 0:
            return z, f_v
        if t_a == 0:
            return f_a, z
        return tz.slice_rows(z, 0, t_a), tz.slice_rows(z, t_a, t_a + t_v)

    def isa_block(self, prefix: str, f_x: Tensor, modality: str, rates: RateSpec, *,
                  train: bool = False, rng=None, capture=None) -> Tensor:
        """Per-modality self-attention block (one tower layer)."""
        meta = self._stream_meta(modality, f_x.shape[0])
        return self._block(prefix, f_x, f_x, meta, meta, rates, train, rng, capture)

    def ica_block(self, prefix: str, f_q: Tensor, f_kv: Tensor, modality_q: str,
                  modality_kv: str, rates: RateSpec, *, train: bool = False,
                  rng=None, capture=None) -> Tensor:
        """Cross-attention block: queries from one stream, keys/values from the other."""
        meta_q = self._stream_meta(modality_q, f_q.shape[0])
        meta_kv = self._stream_meta(modality_kv, f_kv.shape[0])
        return self._block(prefix, f_q, f_kv, meta_q, meta_kv, rates, train, rng, capture)

    # -- full forward -------------------------------------------------------

    def project_inputs(self, audio: FeatureSequence, video: FeatureSequence) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if audio.dim != cfg.d_in_audio:
            raise EncoderConfigError(f"audio width {audio.dim} != configured {cfg.d_in_audio}")
        if video.dim != cfg.d_in_video:
            raise EncoderConfigError(f"video width {video.dim} != configured {cfg.d_in_video}")
        f_a = self._linear("proj_audio", Tensor(audio.frames))
        f_v = self._linear("proj_video", Tensor(video.frames))
        return f_a, f_v

    def _additive_posenc(self, f_a: Tensor, f_v: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        t_a, t_v = f_a.shape[0], f_v.shape[0]
        if cfg.posenc == "sinusoidal":
            table = sinusoidal_table(t_a + t_v, cfg.d_model)
            return (tz.add(f_a, Tensor(table[:t_a])),
                    tz.add(f_v, Tensor(table[t_a:t_a + t_v])))
        if cfg.posenc == "learnable":
            if t_a + t_v > cfg.max_len:
                raise EncoderConfigError(
                    f"sequence of {t_a + t_v} tokens exceeds positional table ({cfg.max_len})")
            table = self.params["posenc.table"]
            return (tz.add(f_a, tz.slice_rows(table, 0, t_a)),
                    tz.add(f_v, tz.slice_rows(table, t_a, t_a + t_v)))
        return f_a, f_v

    def forward(self, audio: FeatureSequence, video: FeatureSequence, *,
                train: bool = False, rng=None, capture=None,
                intra_only: bool = False) -> ForwardResult:
        cfg = self.cfg
        rates = RateSpec(audio.fps, video.fps)
        f_a0, f_v0 = self.project_inputs(audio, video)

        ctm_proj = CtmProjection(self.params["ctm_audio.W"], self.params["ctm_audio.b"],
                                 self.params["ctm_video.W"], self.params["ctm_video.b"])
        pre_a = tz.add(tz.matmul(f_a0, ctm_proj.w_audio), ctm_proj.b_audio)
        pre_v = tz.add(tz.matmul(f_v0, ctm_proj.w_video), ctm_proj.b_video)
        e_a = tz.l2norm_rows(pre_a)
        e_v = tz.l2norm_rows(pre_v)

        f_a, f_v = self._additive_posenc(f_a0, f_v0)

        if cfg.fusion == "concat":
            pooled = concat_fusion(f_a, f_v)
        else:
            for layer in _layer_prefixes(cfg.fusion, cfg.n_blocks):
                if layer[0].startswith("fuse.msa"):
                    i = int(layer[0].removeprefix("fuse.msa"))
                    f_a, f_v = self.msa_block(i, f_a, f_v, rates, train=train,
                                              rng=rng, capture=capture,
                                              intra_only=intra_only)
                elif layer[0].startswith("fuse.audio"):
                    a_pref, v_pref = layer
                    f_a2 = self.isa_block(a_pref, f_a, AUDIO, rates, train=train,
                                          rng=rng, capture=capture)
                    f_v2 = self.isa_block(v_pref, f_v, VIDEO, rates, train=train,
                                          rng=rng, capture=capture)
                    f_a, f_v = f_a2, f_v2
                else:
                    a_pref, v_pref = layer
                    f_a2 = self.ica_block(a_pref, f_a, f_v, AUDIO, VIDEO, rates,
                                          train=train, rng=rng, capture=capture)
                    f_v2 = self.ica_block(v_pref, f_v, f_a, VIDEO, AUDIO, rates,
                                          train=train, rng=rng, capture=capture)
                    f_a, f_v = f_a2, f_v2
            pooled = tz.mean_rows(tz.concat_rows([f_a, f_v]))

        logits = tz.add(tz.matmul(pooled, self.params["classifier.W"]),
                        self.params["classifier.b"])
        return ForwardResult(
            logits=logits, e_audio=e_a, e_video=e_v,
            ctm_pre_audio=pre_a, ctm_pre_video=pre_v,
            shared_audio=f_a0, shared_video=f_v0,
            t_audio=audio.timestamps(), t_video=video.timestamps(), rates=rates)

    # -- parameter plumbing --------------------------------------------------

    def zero_grad(self) -> None:
        tz.zero_grad(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise EncoderConfigError(f"parameter names do not match: {sorted(missing)}")
        for name, arr in state.items():
            t = self.params[name]
            if arr.shape != t.data.shape:
                raise EncoderConfigError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)


def pool_and_classify(f_a: Tensor, f_v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Mean over all tokens of both streams, then a linear class map."""
    if f_a.shape[0] + f_v.shape[0] == 0:
        raise tz.ShapeError("cannot pool zero tokens")
    pooled = tz.mean_rows(tz.concat_rows([f_a, f_v]))
    return tz.add(tz.matmul(pooled, w), b)


def concat_fusion(f_a: Tensor, f_v: Tensor) -> Tensor:
    """Pool each stream separately and concatenate into one utterance row."""
    return tz.concat_cols([tz.mean_rows(f_a), tz.mean_rows(f_v)])


# ---------------------------------------------------------------------------
# parameter counting

COUNT_SCOPES = ("all", "fusion", "table2")


def count_parameters(model: FusionModel, scope: str = "table2") -> int:
    """Learnable scalar count.

    ``fusion`` counts the attention fusion blocks alone; ``table2`` adds the
    per-modality input projections (the scope that reproduces the reported
    per-variant totals); ``all`` counts everything including the matching
    head and classifier.
    """
    if scope not in COUNT_SCOPES:
        raise ValueError(f"scope must be one of {COUNT_SCOPES}")
    total = 0
    for name, t in model.params.items():
        if scope == "fusion" and not name.startswith("fuse."):
            continue
        if scope == "table2" and not name.startswith(("fuse.", "proj_audio.", "proj_video.")):
            continue
        total += t.data.size
    return total


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TAF1"
CKPT_VERSION = 1


def save_checkpoint(model: FusionModel, path) -> None:
    """Write a deterministic binary checkpoint (config + named parameters)."""
    meta = {
        "format_version": CKPT_VERSION,
        "d_emb": model.d_emb,
        "config": {
            "d_model": model.cfg.d_model, "n_heads": model.cfg.n_heads,
            "d_ff": model.cfg.d_ff, "n_blocks": model.cfg.n_blocks,
            "fusion": model.cfg.fusion, "posenc": model.cfg.posenc,
            "n_classes": model.cfg.n_classes, "d_in_audio": model.cfg.d_in_audio,
            "d_in_video": model.cfg.d_in_video, "dropout_rate": model.cfg.dropout_rate,
            "max_len": model.cfg.max_len,
        },
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    from pathlib import Path
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> FusionModel:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    from pathlib import Path
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise EncoderConfigError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise EncoderConfigError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    off = 12 + meta_len
    (n_params,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", raw[off:off + 2]); off += 2
        name = raw[off:off + name_len].decode("utf-8"); off += name_len
        (ndim,) = struct.unpack("<B", raw[off:off + 1]); off += 1
        shape = struct.unpack(f"<{ndim}I", raw[off:off + 4 * ndim]); off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw[off:off + 8 * size], dtype="<f8").reshape(shape)
        off += 8 * size
        state[name] = arr.astype(np.float64)
    cfg = EncoderConfig(**meta["config"])
    model = FusionModel(cfg, d_emb=meta["d_emb"], seed=0)
    model.load_state_arrays(state)
    return model
