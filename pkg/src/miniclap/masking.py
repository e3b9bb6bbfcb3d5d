"""Random visible/masked partitions of the patch sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInput


@dataclass
class MaskPartition:
    visible_idx: np.ndarray  # sorted
    masked_idx: np.ndarray  # sorted
    n: int
    ratio: float


def masked_count(n: int, ratio: float) -> int:
    # round half away from zero; plain round() would round 0.5 to even
    return int(np.floor(ratio * n + 0.5))


def sample_partition(n: int, ratio: float, rng: np.random.Generator) -> MaskPartition:
    if n < 1:
        raise InvalidInput("n must be at least 1")
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInput(f"masking ratio {ratio} outside [0, 1]")
    n_masked = masked_count(n, ratio)
    order = rng.permutation(n)
    masked = np.sort(order[:n_masked])
    visible = np.sort(order[n_masked:])
    return MaskPartition(visible, masked, n, ratio)


def assemble_predictor_input(z_v, mask_token, pe_table, part: MaskPartition) -> Tensor:
    """Restore grid order: visible rows from z_v, mask tokens elsewhere,
    plus the positional-encoding row of every position.

    z_v is [V, D] or [B, V, D]; pe_table is the [n, D] table (or a
    PositionalEncoding).
    """
    pe_table = getattr(pe_table, "table", pe_table)
    z_v = Tensor.wrap(z_v)
    mask_token = Tensor.wrap(mask_token)
    n_visible = len(part.visible_idx)
    n_masked = len(part.masked_idx)
    if z_v.shape[-2] != n_visible:
        raise InvalidInput(f"expected {n_visible} visible rows, got {z_v.shape[-2]}")
    d = z_v.shape[-1]

    batched = z_v.ndim == 3
    shape = (z_v.shape[0], n_masked, d) if batched else (n_masked, d)
    tokens = mask_token.reshape((1,) * (len(shape) - 1) + (d,)).expand(shape)
    stacked = ad.concat([z_v, tokens], axis=-2)
    # position i of the output comes from stacked row order[i]
    order = np.empty(part.n, dtype=int)
    order[part.visible_idx] = np.arange(n_visible)
    order[part.masked_idx] = n_visible + np.arange(n_masked)
    return ad.gather_rows(stacked, order) + pe_table


def gather(seq, idx) -> Tensor:
    """Select rows of seq in idx order (bounds-checked)."""
    idx = np.asarray(idx, dtype=int)
    return ad.gather_rows(Tensor.wrap(seq), idx)
