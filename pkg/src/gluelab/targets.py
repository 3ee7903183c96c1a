"""Target charts: the flat space ``C^n`` and the three standard charts of ``CP^2``.

Chart ``c`` of ``CP^2`` is ``[x_0 : x_1 : x_2] -> (x_{c+1} / x_c, x_{c+2} / x_c)``
with indices mod 3.  Points are stored in real layout ``(Re w, Im w)``.
"""

from __future__ import annotations

import numpy as np


def to_complex(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1] // 2
    return x[..., :n] + 1j * x[..., n:]


def to_real(w: np.ndarray) -> np.ndarray:
    return np.concatenate([w.real, w.imag], axis=-1)


def complex_to_real_matrix(c: np.ndarray) -> np.ndarray:
    """Real ``2n x 2n`` form of complex ``n x n`` matrices (batched)."""
    return np.block([[c.real, -c.imag], [c.imag, c.real]]) if c.ndim == 2 else np.concatenate(
        [np.concatenate([c.real, -c.imag], axis=-1), np.concatenate([c.imag, c.real], axis=-1)], axis=-2
    )


class FlatTarget:
    """``C^n`` with a single chart."""

    charts = 1

    def __init__(self, n: int = 2):
        self.n = n

    def transition(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        return np.array(x, dtype=float, copy=True)

    def jacobian(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        d = 2 * self.n
        return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()

    def embed(self, x: np.ndarray, chart: int = 0) -> np.ndarray:
        return np.asarray(x, dtype=float)


class ProjectivePlane:
    """``CP^2`` with its three affine charts."""

    charts = 3
    n = 2

    @staticmethod
    def homogeneous(x: np.ndarray, chart: int) -> np.ndarray:
        w = to_complex(np.asarray(x, dtype=float))
        out = np.zeros(w.shape[:-1] + (3,), dtype=complex)
        out[..., chart % 3] = 1.0
        out[..., (chart + 1) % 3] = w[..., 0]
        out[..., (chart + 2) % 3] = w[..., 1]
        return out

    @staticmethod
    def from_homogeneous(big_x: np.ndarray, chart: int) -> np.ndarray:
        c = chart % 3
        den = big_x[..., c]
        w = np.stack([big_x[..., (c + 1) % 3] / den, big_x[..., (c + 2) % 3] / den], axis=-1)
        return to_real(w)

    def transition(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        if a % 3 == b % 3:
            return np.array(x, dtype=float, copy=True)
        return self.from_homogeneous(self.homogeneous(x, a), b)

    def complex_jacobian(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        w = to_complex(np.asarray(x, dtype=float))
        shape = w.shape[:-1]
        if a % 3 == b % 3:
            return np.broadcast_to(np.eye(2, dtype=complex), shape + (2, 2)).copy()
        big_x = self.homogeneous(x, a)
        c = b % 3
        den = big_x[..., c]
        # d X / d w: columns are e_{a+1}, e_{a+2}
        dx = np.zeros(shape + (3, 2), dtype=complex)
        dx[..., (a + 1) % 3, 0] = 1.0
        dx[..., (a + 2) % 3, 1] = 1.0
        out = np.zeros(shape + (2, 2), dtype=complex)
        for row, idx in enumerate(((c + 1) % 3, (c + 2) % 3)):
            num = big_x[..., idx]
            out[..., row, :] = dx[..., idx, :] / den[..., None] - (num / den**2)[..., None] * dx[..., c, :]
        return out

    def jacobian(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        return complex_to_real_matrix(self.complex_jacobian(x, a, b))

    def embed(self, x: np.ndarray, chart: int) -> np.ndarray:
        """Fubini-Study embedding ``X X^* / |X|^2`` flattened to real coordinates."""
        big_x = self.homogeneous(x, chart)
        big_x = big_x / np.linalg.norm(big_x, axis=-1, keepdims=True)
        p = big_x[..., :, None] * big_x[..., None, :].conj()
        p = p.reshape(p.shape[:-2] + (9,))
        return np.concatenate([p.real, p.imag], axis=-1) / np.sqrt(2.0)


def cp2_line(i: int, z: np.ndarray, chart: int) -> np.ndarray:
    """The line ``z -> [V_i + z V_{i+1}]`` in the given chart (real layout)."""
    z = np.asarray(z, dtype=complex)
    big_x = np.zeros(z.shape + (3,), dtype=complex)
    big_x[..., i % 3] = 1.0
    big_x[..., (i + 1) % 3] = z
    return ProjectivePlane.from_homogeneous(big_x, chart)
