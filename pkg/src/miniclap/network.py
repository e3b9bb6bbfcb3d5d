"""Parametric components: patch encoders, predictor, audio projector,
text path, plus checkpoint serialization.

All components are dataclasses of `Tensor` leaves; forwards are free
functions building an autodiff graph. The target encoder's tensors are
created with `requires_grad=False`, so no gradient can ever reach it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import masking
from .autodiff import Tensor, gelu, softmax
from .config import ModelConfig, N_FREQ_PATCHES, PATCH_SIZE
from .errors import FormatError, InvalidInput
from .frontend import PatchGrid, PositionalEncoding, build_posenc, interpolate_posenc
from .masking import MaskPartition

backward = ad.backward  # reverse-mode differentiation entry point

LN_EPS = 1e-6
PAD_ID = 1
_NEG_BIAS = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/-2 std by resampling."""
    x = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * std


# -- building blocks -----------------------------------------------------------


@dataclass
class Affine:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor  # [d_out]


def init_affine(rng, d_in: int, d_out: int, trainable: bool = True) -> Affine:
    return Affine(
        Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=trainable),
        Tensor(np.zeros(d_out), requires_grad=trainable),
    )


def affine(p: Affine, x) -> Tensor:
    return Tensor.wrap(x) @ p.weight + p.bias


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor


def init_layernorm(rng, dim: int, trainable: bool = True) -> LayerNorm:
    return LayerNorm(
        Tensor(np.ones(dim), requires_grad=trainable),
        Tensor(np.zeros(dim), requires_grad=trainable),
    )


def layer_norm(p: LayerNorm, x) -> Tensor:
    return ad.layer_norm_core(Tensor.wrap(x), LN_EPS) * p.gain + p.bias


@dataclass
class Block:
    """Pre-norm transformer block: x + attn(LN(x)), x + mlp(LN(x))."""

    norm1: LayerNorm
    attn_q: Affine
    attn_k: Affine
    attn_v: Affine
    attn_out: Affine
    norm2: LayerNorm
    mlp_in: Affine
    mlp_out: Affine
    n_heads: int


def init_block(rng, dim: int, n_heads: int, mlp_hidden: int, trainable: bool = True) -> Block:
    if dim % n_heads != 0:
        raise InvalidInput("dim must be divisible by the head count")
    return Block(
        norm1=init_layernorm(rng, dim, trainable),
        attn_q=init_affine(rng, dim, dim, trainable),
        attn_k=init_affine(rng, dim, dim, trainable),
        attn_v=init_affine(rng, dim, dim, trainable),
        attn_out=init_affine(rng, dim, dim, trainable),
        norm2=init_layernorm(rng, dim, trainable),
        mlp_in=init_affine(rng, dim, mlp_hidden, trainable),
        mlp_out=init_affine(rng, mlp_hidden, dim, trainable),
        n_heads=n_heads,
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def block_forward(p: Block, x, key_bias: np.ndarray | None = None) -> Tensor:
    """key_bias, if given, is broadcastable to the attention logits
    [B, H, N, N]; padded key columns carry a large negative value."""
    x = Tensor.wrap(x)
    b, n, d = x.shape
    dh = d // p.n_heads

    h = layer_norm(p.norm1, x)
    q = _split_heads(affine(p.attn_q, h), p.n_heads)
    k = _split_heads(affine(p.attn_k, h), p.n_heads)
    v = _split_heads(affine(p.attn_v, h), p.n_heads)
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if key_bias is not None:
        logits = logits + key_bias
    ctx = softmax(logits, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
    x = x + affine(p.attn_out, ctx)

    h2 = layer_norm(p.norm2, x)
    return x + affine(p.mlp_out, gelu(affine(p.mlp_in, h2)))


# -- components ------------------------------------------------------------


@dataclass
class EncoderParams:
    patch_embed: Affine  # 256 -> dim
    posenc: PositionalEncoding
    blocks: list[Block]
    final_norm: LayerNorm


@dataclass
class PredictorParams:
    blocks: list[Block]
    out: Affine  # dim -> dim
    mask_token: Tensor  # [1, 1, dim]


@dataclass
class AudioProjectorParams:
    kind: str  # "transformer" or "mlp"
    cls_token: Tensor | None
    blocks: list[Block]
    mlp_in: Affine | None
    mlp_out: Affine | None
    n_heads: int


@dataclass
class TextEncoderParams:
    tok_embed: Tensor  # [vocab, dim]
    pos_embed: Tensor  # [max_len, dim]
    blocks: list[Block]
    max_len: int


@dataclass
class TextPathParams:
    llm_map: Affine | None  # stage-1: emb_dim -> dim
    encoder: TextEncoderParams | None  # stage-2/2.1
    projector_in: Affine | None  # optional text-projector ablation
    projector_out: Affine | None


@dataclass
class ModelState:
    online: EncoderParams
    target: EncoderParams
    predictor: PredictorParams
    projector: AudioProjectorParams
    textpath: TextPathParams
    tau: Tensor
    config: ModelConfig


def _init_encoder(rng, cfg: ModelConfig, trainable: bool) -> EncoderParams:
    mlp_hidden = int(cfg.dim * cfg.mlp_ratio)
    return EncoderParams(
        patch_embed=init_affine(rng, PATCH_SIZE * PATCH_SIZE, cfg.dim, trainable),
        posenc=build_posenc(N_FREQ_PATCHES, cfg.n_time_patches, cfg.dim),
        blocks=[init_block(rng, cfg.dim, cfg.heads, mlp_hidden, trainable)
                for _ in range(cfg.depth)],
        final_norm=init_layernorm(rng, cfg.dim, trainable),
    )


def _init_projector(rng, cfg: ModelConfig) -> AudioProjectorParams:
    if cfg.projector_kind == "mlp":
        return AudioProjectorParams(
            kind="mlp", cls_token=None, blocks=[],
            mlp_in=init_affine(rng, cfg.dim, cfg.dim),
            mlp_out=init_affine(rng, cfg.dim, cfg.dim),
            n_heads=1,
        )
    # feed-forward latent matches the model dim (not the 4x encoder ratio)
    return AudioProjectorParams(
        kind="transformer",
        cls_token=Tensor(trunc_normal(rng, (1, 1, cfg.dim)), requires_grad=True),
        blocks=[init_block(rng, cfg.dim, cfg.projector_heads, cfg.dim)
                for _ in range(cfg.projector_blocks)],
        mlp_in=None, mlp_out=None,
        n_heads=cfg.projector_heads,
    )


def _init_textpath(rng, cfg: ModelConfig) -> TextPathParams:
    encoder = None
    if cfg.text_vocab > 0:
        encoder = TextEncoderParams(
            tok_embed=Tensor(trunc_normal(rng, (cfg.text_vocab, cfg.dim)), requires_grad=True),
            pos_embed=Tensor(np.zeros((cfg.text_maxlen, cfg.dim)), requires_grad=True),
            blocks=[init_block(rng, cfg.dim, cfg.text_heads, int(cfg.dim * cfg.mlp_ratio))
                    for _ in range(cfg.text_depth)],
            max_len=cfg.text_maxlen,
        )
    projector_in = projector_out = None
    if cfg.text_projector:
        projector_in = init_affine(rng, cfg.dim, cfg.dim)
        projector_out = init_affine(rng, cfg.dim, cfg.dim)
    return TextPathParams(
        llm_map=init_affine(rng, cfg.emb_dim, cfg.dim),
        encoder=encoder,
        projector_in=projector_in,
        projector_out=projector_out,
    )


def init_model_state(cfg: ModelConfig, seed: int) -> ModelState:
    rng = np.random.default_rng(seed)
    online = _init_encoder(rng, cfg, trainable=True)
    mlp_hidden = int(cfg.dim * cfg.mlp_ratio)
    predictor = PredictorParams(
        blocks=[init_block(rng, cfg.dim, cfg.predictor_heads, mlp_hidden)
                for _ in range(cfg.predictor_depth)],
        out=init_affine(rng, cfg.dim, cfg.dim),
        mask_token=Tensor(trunc_normal(rng, (1, 1, cfg.dim)), requires_grad=True),
    )
    projector = _init_projector(rng, cfg)
    textpath = _init_textpath(rng, cfg)
    state = ModelState(
        online=online,
        target=_init_encoder(rng, cfg, trainable=False),
        predictor=predictor,
        projector=projector,
        textpath=textpath,
        tau=Tensor(np.float64(0.07), requires_grad=True),
        config=cfg,
    )
    # the target starts as an exact copy of the online encoder
    copy_params(state.online, state.target)
    return state


def copy_params(src, dst) -> None:
    src_named = named_params(src)
    dst_named = named_params(dst)
    if src_named.keys() != dst_named.keys():
        raise InvalidInput("parameter trees do not match")
    for name, tensor in src_named.items():
        if dst_named[name].data.shape != tensor.data.shape:
            raise InvalidInput(f"shape mismatch for {name}")
        dst_named[name].data = tensor.data.copy()


def named_params(obj, prefix: str = "") -> dict[str, Tensor]:
    """Deterministically ordered {name: Tensor} over a component tree."""
    out: dict[str, Tensor] = {}
    _walk(obj, prefix, out)
    return out


def _walk(obj, prefix, out):
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _walk(item, f"{prefix}.{i}", out)
    elif isinstance(obj, ModelState):
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out)
    elif isinstance(obj, PositionalEncoding):
        return  # fixed buffer, derived from the config
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out)


def param_digest(obj) -> str:
    """sha256 hex over the raw bytes of all parameters, in name order."""
    h = hashlib.sha256()
    for name, tensor in named_params(obj).items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()


# -- forward passes ---------------------------------------------------------


def _posenc_for(params: EncoderParams, n_f: int, n_t: int) -> np.ndarray:
    pe = params.posenc
    if (n_f, n_t) == (pe.n_f, pe.n_t):
        return pe.table
    if n_f != pe.n_f:
        raise InvalidInput(f"grid has {n_f} frequency patches, encoder expects {pe.n_f}")
    return interpolate_posenc(pe, n_t).table


def encode_tokens(params: EncoderParams, patch_vectors, pe_rows) -> Tensor:
    """Batched core: [B, k, 256] patches plus their [B|1, k, dim] position rows."""
    x = affine(params.patch_embed, Tensor.wrap(patch_vectors)) + pe_rows
    for block in params.blocks:
        x = block_forward(block, x)
    return layer_norm(params.final_norm, x)


def encode(params: EncoderParams, grid: PatchGrid, part: MaskPartition,
           branch: str = "visible") -> Tensor:
    """Encode the selected side of the partition; output [k, dim]."""
    if part.n != grid.n:
        raise InvalidInput(f"partition over {part.n} patches, grid has {grid.n}")
    if branch not in ("visible", "masked"):
        raise InvalidInput(f"branch must be 'visible' or 'masked', got {branch!r}")
    idx = part.visible_idx if branch == "visible" else part.masked_idx
    pe = _posenc_for(params, grid.n_f, grid.n_t)
    out = encode_tokens(params, grid.patches[idx][None], pe[idx][None])
    return out.reshape(out.shape[1], out.shape[2])


def predictor_forward(pp: PredictorParams, seq) -> Tensor:
    x = Tensor.wrap(seq)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    for block in pp.blocks:
        x = block_forward(block, x)
    x = affine(pp.out, x)
    return x.reshape(x.shape[1], x.shape[2]) if squeeze else x


def predict_masked(pp: PredictorParams, z_v, mask_token, pe: PositionalEncoding,
                   part: MaskPartition) -> Tensor:
    """Predict features of the masked positions; output [|masked|, dim]."""
    seq = masking.assemble_predictor_input(z_v, mask_token, pe.table, part)
    out = predictor_forward(pp, seq)
    return masking.gather(out, part.masked_idx)


def standardize_targets(z_m, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over all entries (per sample when batched)."""
    z = Tensor.wrap(z_m)
    if z.ndim == 2:
        count = z.data.size
    else:
        count = z.shape[-1] * z.shape[-2]
    if count < 2:
        raise InvalidInput("need at least two target entries to standardize")
    mu = z.mean(axis=(-2, -1), keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=(-2, -1), keepdims=True)
    return centered / (var + eps).sqrt()


def project_audio(ap: AudioProjectorParams, z) -> Tensor:
    """Summarize patch features into one semantic audio feature.

    z is [k, dim] or [B, k, dim]; output [dim] or [B, dim].
    """
    z = Tensor.wrap(z)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.reshape(1, *z.shape)
    if z.shape[1] < 1:
        raise InvalidInput("audio projector needs at least one feature row")
    if ap.kind == "mlp":
        pooled = z.mean(axis=1)
        out = affine(ap.mlp_out, gelu(affine(ap.mlp_in, pooled)))
    else:
        b, _, d = z.shape
        cls = ap.cls_token.expand((b, 1, d))
        x = ad.concat([cls, z], axis=1)
        for block in ap.blocks:
            x = block_forward(block, x)
        out = ad.gather_rows(x, np.zeros((b, 1), dtype=int)).reshape(b, d)
    return out.reshape(out.shape[1]) if squeeze else out


def projector_attention(ap: AudioProjectorParams, z) -> np.ndarray:
    """Class-token attention over the k patch keys of the first block.

    Softmax is taken over the patch keys only (the class-token key is
    excluded), so the weights are a length-k probability vector.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise InvalidInput("expected a [k, dim] feature array")
    block = ap.blocks[0]
    d = z.shape[1]
    x = np.concatenate([ap.cls_token.data.reshape(1, d), z], axis=0)
    h = layer_norm(block.norm1, Tensor(x)).data
    q = h[0] @ block.attn_q.weight.data + block.attn_q.bias.data
    keys = h[1:] @ block.attn_k.weight.data + block.attn_k.bias.data
    logits = keys @ q / np.sqrt(d)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def map_text_embedding(tp: TextPathParams, e) -> Tensor:
    """Affine map from cached sentence embeddings to the semantic dim."""
    if tp.llm_map is None:
        raise InvalidInput("text path has no embedding map (stage-1 configuration required)")
    e = Tensor.wrap(e)
    want = tp.llm_map.weight.shape[0]
    if e.ndim not in (1, 2) or e.shape[-1] != want:
        raise InvalidInput(f"expected {want}-d embeddings, got shape {e.shape}")
    squeeze = e.ndim == 1
    if squeeze:
        e = e.reshape(1, want)
    out = _apply_text_projector(tp, affine(tp.llm_map, e))
    return out.reshape(out.shape[1]) if squeeze else out


def _apply_text_projector(tp: TextPathParams, s_t: Tensor) -> Tensor:
    if tp.projector_in is None:
        return s_t
    return affine(tp.projector_out, gelu(affine(tp.projector_in, s_t)))


def encode_text(tp: TextPathParams, tokens) -> Tensor:
    """Token ids -> pooled first-token feature, [dim]."""
    out = encode_text_batch(tp, [list(tokens)])
    return out.reshape(out.shape[1])


def encode_text_batch(tp: TextPathParams, token_rows: list[list[int]]) -> Tensor:
    enc = tp.encoder
    if enc is None:
        raise InvalidInput("text path has no text encoder (stage-2 configuration required)")
    lengths = [len(row) for row in token_rows]
    if min(lengths) < 1:
        raise InvalidInput("empty token sequence")
    if max(lengths) > enc.max_len:
        raise InvalidInput(f"sequence longer than max_len={enc.max_len}")
    width = max(lengths)
    b = len(token_rows)
    ids = np.full((b, width), PAD_ID, dtype=int)
    for i, row in enumerate(token_rows):
        ids[i, :len(row)] = row
    if ids.max() >= enc.tok_embed.shape[0]:
        raise InvalidInput("token id outside the vocabulary")

    flat = ad.gather_rows(enc.tok_embed, ids.reshape(-1))
    x = flat.reshape(b, width, enc.tok_embed.shape[1])
    x = x + ad.gather_rows(enc.pos_embed, np.arange(width))
    key_bias = None
    if width > min(lengths):
        pad = np.arange(width)[None, :] >= np.asarray(lengths)[:, None]
        key_bias = np.where(pad, _NEG_BIAS, 0.0)[:, None, None, :]
    for block in enc.blocks:
        x = block_forward(block, x, key_bias=key_bias)
    pooled = ad.gather_rows(x, np.zeros((b, 1), dtype=int)).reshape(b, x.shape[2])
    return _apply_text_projector(tp, pooled)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


def save_checkpoint(path, state: ModelState) -> None:
    params = named_params(state)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(state.config.digest())
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(tensor.data).astype("<f4")  # astype keeps 0-d shape
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint file")
    return data


def load_checkpoint(path, cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Rebuild a ModelState for `cfg` and fill it from the file."""
    state = init_model_state(cfg, seed)
    params = named_params(state)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if _read_exact(fh, 32) != cfg.digest():
            raise FormatError("checkpoint was written with a different model config")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(params):
            raise FormatError(f"expected {len(params)} tensors, file has {count}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            payload = _read_exact(fh, 4 * size)
            if name not in params:
                raise FormatError(f"unknown tensor {name!r} in checkpoint")
            tensor = params[name]
            if tuple(tensor.data.shape) != shape:
                raise FormatError(f"shape mismatch for {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            tensor.data = arr.astype(np.float64)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return state
