"""Block quantization noise for quantization-aware training.

A weight matrix is tiled into fixed-size blocks (ragged edge blocks allowed);
each training step an i.i.d. Bernoulli(rate) subset of blocks is replaced with
its fake-quantized values while the rest stay FP-32.  The backward pass
treats the substitution as identity (straight-through), so gradients reach
every weight.  Masks own their seed; the grid spec is refit from the current
weights by the caller each step so the grid tracks weight drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantizer import QuantSpec, fake_quantize
from .tensor import Tensor, record_op


@dataclass(frozen=True)
class BlockGrid:
    """Tiling of a (rows x cols) matrix into block_rows x block_cols blocks."""

    rows: int
    cols: int
    block_rows: int
    block_cols: int

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"block grid: matrix dims must be positive, got {self.rows}x{self.cols}")
        if self.block_rows <= 0 or self.block_cols <= 0:
            raise ValueError(
                f"block grid: block dims must be positive, got {self.block_rows}x{self.block_cols}")

    @property
    def row_bands(self) -> int:
        return -(-self.rows // self.block_rows)

    @property
    def col_bands(self) -> int:
        return -(-self.cols // self.block_cols)

    @property
    def num_blocks(self) -> int:
        return self.row_bands * self.col_bands


def partition_blocks(shape: tuple, block_rows: int = 8, block_cols: int = 8) -> BlockGrid:
    """Cover a 2-D shape with ceil-division bands; edge blocks may be ragged."""
    if len(shape) != 2:
        raise ValueError(f"partition_blocks: need a 2-D shape, got {shape}")
    return BlockGrid(rows=int(shape[0]), cols=int(shape[1]),
                     block_rows=block_rows, block_cols=block_cols)


@dataclass(frozen=True)
class BlockMask:
    """Bernoulli block selection; `selected` is (row_bands, col_bands) bool."""

    grid: BlockGrid
    selected: np.ndarray
    rate: float
    seed: int

    def elementwise(self) -> np.ndarray:
        """Expand the block mask to per-entry booleans of the matrix shape."""
        g = self.grid
        expanded = np.repeat(np.repeat(self.selected, g.block_rows, axis=0),
                             g.block_cols, axis=1)
        return expanded[:g.rows, :g.cols]

    def selected_fraction(self) -> float:
        return float(self.selected.mean())


def sample_mask(grid: BlockGrid, rate: float, seed: int) -> BlockMask:
    """Select each block independently with probability `rate` (own generator)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"sample_mask: rate must be in [0, 1], got {rate}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    selected = rng.random((grid.row_bands, grid.col_bands)) < rate
    return BlockMask(grid=grid, selected=selected, rate=rate, seed=int(seed))


def apply_quant_noise(w: np.ndarray, mask: BlockMask, spec: QuantSpec) -> np.ndarray:
    """Replace the selected blocks with fake-quantized values (pure numpy)."""
    w = np.asarray(w)
    if w.shape != (mask.grid.rows, mask.grid.cols):
        raise ValueError(
            f"apply_quant_noise: weight shape {w.shape} does not match grid "
            f"{(mask.grid.rows, mask.grid.cols)}")
    elem = mask.elementwise()
    return np.where(elem, fake_quantize(w, spec), w).astype(w.dtype, copy=False)


def quant_noise_op(w: Tensor, mask: BlockMask, spec: QuantSpec) -> Tensor:
    """Graph op: noisy forward, identity (straight-through) backward."""
    out = apply_quant_noise(w.data, mask, spec)
    return record_op("quant_noise", (w,), out,
                     lambda g: (g,), lambda v: apply_quant_noise(v, mask, spec))
