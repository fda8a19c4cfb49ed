"""Kernel backend selection.

The compiled extension is used when available; set ``LBCF_BACKEND=python``
(or ``compiled``) to force a choice. Both backends expose ``route``,
``forest_predict`` and ``update_tree`` with identical semantics and consume
identical randomness, so results are bit-comparable.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels_c
except ImportError:  # extension not built; pure-Python fallback
    _kernels_c = None


def available_backends() -> dict:
    out = {"python": _kernels_py}
    if _kernels_c is not None:
        out["compiled"] = _kernels_c
    return out


def default_backend():
    name = os.environ.get("LBCF_BACKEND", "").strip().lower()
    if name:
        try:
            return available_backends()[name]
        except KeyError:
            raise RuntimeError(
                f"LBCF_BACKEND={name!r} is not available; choices: "
                f"{sorted(available_backends())}"
            ) from None
    return _kernels_c if _kernels_c is not None else _kernels_py


class Workspace:
    """Reusable scratch buffers for update_tree (compiled backend)."""

    def __init__(self, n_rows: int, cap: int = 64):
        self.resize(n_rows, cap)

    def resize(self, n_rows: int, cap: int) -> None:
        self.n_rows = n_rows
        self.cap = cap
        self.s_part = np.empty(n_rows)
        self.dbuf = np.empty(n_rows)
        self.vbuf = np.empty(n_rows)
        self.slots_prop = np.empty(n_rows, dtype=np.int32)
        self.memb = np.empty(n_rows, dtype=np.uint8)
        self.ncur = np.empty(cap)
        self.scur = np.empty(cap)
        self.nprop = np.empty(cap)
        self.sprop = np.empty(cap)
        self.lbuf = np.empty(cap, dtype=np.int32)
        self.stack = np.empty(cap, dtype=np.int32)
        self.rowcnt = np.empty(cap, dtype=np.int32)
