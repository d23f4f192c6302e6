"""Zero-fill embedding of a low-dimensional filter into a larger policy's input.

A policy trained on an ``(n_x, n_z)`` system can drive a smaller one by
placing the small system's whitened innovation, log-scale and gain at fixed
offsets of an otherwise-zero feature vector and reading the adaptation rates
back from the matching output slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import OffsetOutOfRange

COUPLED_OFFSETS = ((0, 0), (4, 1), (8, 2), (12, 3), (16, 4))
DECOUPLED_OFFSETS = ((0, 3), (8, 3), (16, 3))
TABLE_OFFSETS = COUPLED_OFFSETS + DECOUPLED_OFFSETS


@dataclass(frozen=True)
class TransferMap:
    x_off: int
    z_off: int
    n_x_src: int = 3
    n_z_src: int = 2
    n_x_dst: int = 19
    n_z_dst: int = 6

    def __post_init__(self):
        if self.x_off < 0 or self.x_off + self.n_x_src > self.n_x_dst:
            raise OffsetOutOfRange(f"x_off={self.x_off} does not fit {self.n_x_src} states into {self.n_x_dst}")
        if self.z_off < 0 or self.z_off + self.n_z_src > self.n_z_dst:
            raise OffsetOutOfRange(f"z_off={self.z_off} does not fit {self.n_z_src} channels into {self.n_z_dst}")

    @property
    def dst_dim(self) -> int:
        return 2 * self.n_z_dst + self.n_x_dst * self.n_z_dst

    def _gain_index(self) -> np.ndarray:
        """Flat (row-major) positions of the source gain block inside ``vec(K_dst)``."""
        rows = np.arange(self.x_off, self.x_off + self.n_x_src)[:, None]
        cols = np.arange(self.z_off, self.z_off + self.n_z_src)[None, :]
        return (2 * self.n_z_dst + rows * self.n_z_dst + cols).reshape(-1)

    def index(self) -> np.ndarray:
        """Destination index of every source feature ``[nu_w; l; vec(K)]``."""
        nu = np.arange(self.z_off, self.z_off + self.n_z_src)
        l = self.n_z_dst + nu
        return np.concatenate([nu, l, self._gain_index()])

    def selection(self) -> np.ndarray:
        """0/1 matrix ``E`` with ``y_dst = E @ y_src``."""
        idx = self.index()
        E = np.zeros((self.dst_dim, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        return E


def embed_cross_domain(tm: TransferMap, nu_w, l, K):
    """Place source features into a zero destination vector ``(..., dst_dim, 1)``.

    Accepts arrays or tensors; ``nu_w`` and ``l`` are ``(..., n_z, 1)`` columns
    and ``K`` is ``(..., n_x, n_z)``.
    """
    nu_w, l, K = tn.as_tensor(nu_w), tn.as_tensor(l), tn.as_tensor(K)
    vecK = tn.reshape(K, K.shape[:-2] + (K.shape[-2] * K.shape[-1], 1))
    y_src = tn.concat([nu_w, l, vecK], axis=-2)
    return tm.selection() @ y_src


def embed_features(tm: TransferMap, y_src):
    """Embed an already-assembled whitened feature column."""
    return tm.selection() @ tn.as_tensor(y_src)


def extract_adaptation(d, tm: TransferMap):
    """Return ``(d_Q, d_R)`` read from the active destination slots."""
    d = tn.as_tensor(d)
    dQ = d[..., tm.x_off : tm.x_off + tm.n_x_src, :]
    start = tm.n_x_dst + tm.z_off
    dR = d[..., start : start + tm.n_z_src, :]
    return dQ, dR
