"""Model configuration, config-file parsing, and override handling.

Config files are flat ``key = value`` text with dotted keys grouping
sections (``model.dim``, ``stage1.mask_ratio``, ``data.manifest``).
CLI ``--set KEY=VALUE`` overrides are applied after parsing, last wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import InvalidConfig, ParseError

# Mel front-end constants. The 16 kHz / 25 ms / 10 ms / 80-bin front-end
# and the standardization statistics are fixed for every stage.
SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
FMIN_HZ = 50.0
FMAX_HZ = 8000.0
LOG_FLOOR = 1e-7
MEL_MEAN = -7.26
MEL_STD = 4.35
PATCH_SIZE = 16
N_FREQ_PATCHES = N_MELS // PATCH_SIZE  # 5


@dataclass
class ModelConfig:
    """Dimensions of every parametric component.

    The desk-scale defaults keep tests in the minutes range; the
    full-scale preset restores full-size dimensions.
    """

    dim: int = 64
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    input_frames: int = 608
    predictor_depth: int = 2
    predictor_heads: int = 4
    projector_blocks: int = 1
    projector_heads: int = 1
    projector_kind: str = "transformer"  # or "mlp"
    text_projector: bool = False
    emb_dim: int = 4096
    text_vocab: int = 0  # 0: no text encoder (stage-1 configuration)
    text_depth: int = 2
    text_heads: int = 4
    text_maxlen: int = 32

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise InvalidConfig("dim must be divisible by heads")
        if self.dim % 4 != 0:
            raise InvalidConfig("dim must be divisible by 4 for 2-D positional encoding")
        if self.input_frames % PATCH_SIZE != 0:
            raise InvalidConfig("input_frames must be a multiple of the patch size")
        if self.projector_kind not in ("transformer", "mlp"):
            raise InvalidConfig(f"unknown projector kind {self.projector_kind!r}")

    @property
    def n_time_patches(self) -> int:
        return self.input_frames // PATCH_SIZE

    @property
    def n_patches(self) -> int:
        return N_FREQ_PATCHES * self.n_time_patches

    def canonical(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


def full_scale_config(**overrides) -> ModelConfig:
    """Full-scale preset: 768-d, 12-block encoder, 608-frame input."""
    base = dict(dim=768, depth=12, heads=12, input_frames=608,
                predictor_depth=2, predictor_heads=12)
    base.update(overrides)
    return ModelConfig(**base)


def _coerce(value: str):
    text = value.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Parse flat key-value config text into {dotted_key: value}."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ParseError("empty key", line=lineno)
        out[key] = _coerce(value)
    return out


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply repeatable KEY=VALUE overrides (dotted keys, last wins)."""
    out = dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise InvalidConfig(f"override must be KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if not key:
            raise InvalidConfig(f"override has empty key: {pair!r}")
        out[key] = _coerce(value)
    return out


def section(cfg: dict, prefix: str) -> dict:
    """Extract ``prefix.*`` keys with the prefix stripped."""
    dot = prefix + "."
    return {k[len(dot):]: v for k, v in cfg.items() if k.startswith(dot)}


def render_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def model_config_from(cfg: dict) -> ModelConfig:
    params = section(cfg, "model")
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(params) - known
    if unknown:
        raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**params)
