"""Multi-stream delay interleaving for token grids.

A token grid holds `n_books` parallel codebook streams over `L` frames.
The delay mapping shifts stream i (0-indexed) right by i columns, so
that when the grid is decoded column-by-column, stream i at frame j is
generated strictly after streams < i saw frames <= j. Cells that no
stream maps onto are PAD.

Reserved ids sit directly above the codebook range of size S:

    PAD   = S
    START = S + 1       (decoder input shift)
    SEG_A = S + 2       }
    SEG_B = S + 3       }  fill-in-the-middle segment markers
    SEG_C = S + 4       }
    EOS   = S + 5
"""

from __future__ import annotations

import numpy as np

N_RESERVED = 6

PAD_OFFSET = 0
START_OFFSET = 1
SEG_A_OFFSET = 2
SEG_B_OFFSET = 3
SEG_C_OFFSET = 4
EOS_OFFSET = 5


class DelayError(ValueError):
    """Malformed grid handed to the delay mapping or its inverse."""


def pad_id(codebook_size: int) -> int:
    return codebook_size + PAD_OFFSET


def total_vocab(codebook_size: int) -> int:
    """Codebook ids plus the reserved block."""
    return codebook_size + N_RESERVED


def apply_delay(grid: np.ndarray, codebook_size: int) -> np.ndarray:
    """Shift stream i right by i columns; unmapped cells become PAD.

    Input must contain plain codebook ids only; reserved ids are rejected
    because PAD placement would become ambiguous for the inverse.
    Output length is L + n_books - 1.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DelayError(f"expected 2-d token grid, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() >= codebook_size):
        raise DelayError("grid contains reserved or out-of-range ids")
    return _shift(grid, codebook_size)


def _shift(grid: np.ndarray, codebook_size: int) -> np.ndarray:
    """Delay mapping without the reserved-id check (fill-in-the-middle
    training grids legitimately carry segment markers through the shift)."""
    n_books, length = grid.shape
    out = np.full((n_books, length + n_books - 1), pad_id(codebook_size), dtype=grid.dtype)
    for i in range(n_books):
        out[i, i : i + length] = grid[i]
    return out


def revert_delay(grid: np.ndarray, codebook_size: int) -> np.ndarray:
    """Exact inverse of apply_delay; validates the PAD frame first."""
    return _unshift(grid, codebook_size, check_interior=True)


def _unshift(grid: np.ndarray, codebook_size: int, check_interior: bool = False) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DelayError(f"expected 2-d token grid, got shape {grid.shape}")
    n_books, total = grid.shape
    length = total - n_books + 1
    if length < 0:
        raise DelayError(f"delayed grid of shape {grid.shape} is too short")
    pad = pad_id(codebook_size)
    out = np.empty((n_books, length), dtype=grid.dtype)
    for i in range(n_books):
        if grid[i, :i].size and not (grid[i, :i] == pad).all():
            raise DelayError(f"stream {i}: leading cells are not PAD")
        if grid[i, i + length :].size and not (grid[i, i + length :] == pad).all():
            raise DelayError(f"stream {i}: trailing cells are not PAD")
        row = grid[i, i : i + length]
        if check_interior and row.size and (row == pad).any():
            raise DelayError(f"stream {i}: PAD inside the mapped span")
        out[i] = row
    return out


def pad_mask(n_books: int, length: int) -> np.ndarray:
    """Boolean (n_books, length + n_books - 1) mask of the PAD cells a
    delayed grid of `length` frames carries."""
    total = length + n_books - 1
    cols = np.arange(total)[None, :]
    rows = np.arange(n_books)[:, None]
    return (cols < rows) | (cols >= rows + length)
