"""Padding-free batching of rows that use different adapters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atmm import atmm_multiply, lookup_config
from .matrix import Matrix, ShapeError


class UnknownAdapterError(KeyError):
    pass


@dataclass(frozen=True)
class Segment:
    adapter_id: int
    row_indices: np.ndarray

    def __len__(self):
        return len(self.row_indices)


@dataclass(frozen=True)
class BatchPlan:
    segments: tuple
    total_rows: int

    def adapter_ids(self):
        return [s.adapter_id for s in self.segments]


def plan_batch(assignment) -> BatchPlan:
    """Group row positions by adapter id; ascending ids, original row order kept inside a segment."""
    ids = np.asarray(assignment)
    if ids.size == 0:
        raise ValueError("empty assignment")
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    cuts = np.flatnonzero(sorted_ids[1:] != sorted_ids[:-1]) + 1
    segments = tuple(
        Segment(sorted_ids[start].item(), rows)
        for start, rows in zip(np.concatenate(([0], cuts)), np.split(order, cuts))
    )
    return BatchPlan(segments, int(ids.size))


def run_bypass(x: Matrix, plan: BatchPlan, adapters, layer, table, *, tag="bypass") -> Matrix:
    """Row i of the result is ``(x_i @ down_a) @ up_a`` for the adapter a assigned to row i.

    Each segment is gathered into a dense block, pushed through two tiled
    products at its own rank and scattered back. No row is padded.
    """
    if x.rows != plan.total_rows:
        raise ShapeError("bypass input rows do not match plan", x.shape, (plan.total_rows, x.cols))
    out = np.zeros(x.shape, dtype=x.dtype)
    d = x.cols
    for seg in plan.segments:
        try:
            ad = adapters[seg.adapter_id]
        except KeyError:
            raise UnknownAdapterError(seg.adapter_id) from None
        n_seg = len(seg)
        block = Matrix.wrap(x.array[seg.row_indices])
        down, up = ad.down[layer], ad.up[layer]
        r = down.cols
        h = atmm_multiply(block, down, lookup_config(table, n_seg, d, r), tag=tag)
        out[seg.row_indices] = atmm_multiply(h, up, lookup_config(table, n_seg, r, up.cols), tag=tag).array
    return Matrix.wrap(out)
