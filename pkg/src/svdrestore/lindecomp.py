"""Exact SVD, 2D DFT spectra, recomposition and the SVD/FFT timing harness."""

from __future__ import annotations

import csv
import json
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft

ORTHO_TOL = 1e-5
EPS = 1e-12


class NonOrthogonalError(ValueError):
    pass


@dataclass
class SvdFactors:
    u: np.ndarray  # (h, h)
    sigma: np.ndarray  # (min(h, w),), descending
    v: np.ndarray  # (w, w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def reconstruct(self, sigma: np.ndarray | None = None) -> np.ndarray:
        s = self.sigma if sigma is None else sigma
        k = len(s)
        return (self.u[:, :k] * s) @ self.v[:, :k].T

    def check(self, x: np.ndarray | None = None, tol: float = ORTHO_TOL) -> None:
        """Raise AssertionError if any factor invariant is violated."""
        s = self.sigma
        assert np.all(s >= 0), "negative singular value"
        assert np.all(np.diff(s) <= 0), "singular values not descending"
        h, w = self.shape
        assert np.abs(self.u.T @ self.u - np.eye(h)).max() <= tol, "U not orthonormal"
        assert np.abs(self.v.T @ self.v - np.eye(w)).max() <= tol, "V not orthonormal"
        if x is not None:
            rel = np.linalg.norm(self.reconstruct() - x) / max(np.linalg.norm(x), EPS)
            assert rel <= tol, f"reconstruction residual {rel:.3g}"


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """In place: make the largest-magnitude entry of each u_i nonnegative.

    Pairs (u_i, v_i) with i < k flip together.  Columns beyond k have no
    partner and are normalized on their own.
    """
    k = min(u.shape[0], v.shape[0])
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1
    v[:, :k][:, flip[:k]] *= -1
    if v.shape[1] > k:
        tail = v[:, k:]
        idx = np.argmax(np.abs(tail), axis=0)
        tail[:, tail[idx, np.arange(tail.shape[1])] < 0] *= -1


def svd(x: np.ndarray, method: str = "lapack") -> SvdFactors:
    """Full SVD of a real matrix.

    ``method="lapack"`` calls numpy's divide-and-conquer routine and is the
    fast path.  ``method="jacobi"`` runs :func:`jacobi_svd`, a slower
    self-contained implementation that shares no code with LAPACK and serves
    as a cross-check.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise ValueError(f"svd needs a non-empty 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("svd input contains non-finite values")
    if method == "lapack":
        u, s, vt = np.linalg.svd(x, full_matrices=True)
        v = vt.T.copy()
    elif method == "jacobi":
        u, s, v = jacobi_svd(x)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    _fix_signs(u, v)
    return SvdFactors(u, s, v)


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append([(min(players[i], players[n - 1 - i]), max(players[i], players[n - 1 - i]))
                       for i in range(n // 2)])
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_svd(x: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD returning full ``(U, sigma, V)``.

    Rotates column pairs of ``A = X V`` until every pair is orthogonal to
    relative tolerance ``tol``; disjoint pairs of each round-robin round are
    rotated together.  The column norms are the singular values.
    """
    x = np.asarray(x, dtype=np.float64)
    transpose = x.shape[0] < x.shape[1]
    a = (x.T if transpose else x).copy()
    m, n = a.shape
    v = np.eye(n)
    if n > 1:
        npad = n + (n % 2)
        if npad != n:
            a = np.hstack([a, np.zeros((m, 1))])
            v = np.pad(v, ((0, 1), (0, 1)))
            v[n, n] = 1.0
        rounds = [np.array(r).T for r in _round_robin(npad)]
        for _ in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                ap, aq = a[:, p], a[:, q]
                alpha = np.einsum("ij,ij->j", ap, ap)
                beta = np.einsum("ij,ij->j", aq, aq)
                gamma = np.einsum("ij,ij->j", ap, aq)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                active &= np.abs(gamma) > 0
                if not active.any():
                    continue
                rotated = True
                zeta = np.where(active, (beta - alpha) / np.where(active, 2 * gamma, 1.0), 0.0)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1 + zeta**2))
                t = np.where(zeta == 0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1 / np.sqrt(1 + t**2)
                s = c * t
                vp, vq = v[:, p], v[:, q]
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
            if not rotated:
                break
        a, v = a[:, :n], v[:n, :n]
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    u = np.zeros((m, m))
    nz = sigma > sigma.max(initial=0.0) * max(m, n) * 1e-15 if sigma.size else np.zeros(0, bool)
    u[:, : n][:, nz] = a[:, nz] / sigma[nz]
    u = _complete_basis(u, int(nz.sum()))
    if transpose:
        return v, sigma, u
    return u, sigma, v


def _complete_basis(u: np.ndarray, filled: int) -> np.ndarray:
    """Fill columns ``filled:`` of ``u`` by Gram-Schmidt over identity columns."""
    m = u.shape[0]
    basis = [u[:, i] for i in range(filled)]
    for e in np.eye(m):
        if len(basis) == m:
            break
        vec = e.copy()
        for _ in range(2):
            for b in basis:
                vec -= (b @ vec) * b
        nrm = np.linalg.norm(vec)
        if nrm > 1e-8:
            basis.append(vec / nrm)
    return np.stack(basis, axis=1)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def orthogonality_residual(m: np.ndarray) -> float:
    return float(np.abs(m.T @ m - np.eye(m.shape[1])).max())


def check_orthogonal_invariance(x: np.ndarray, p: np.ndarray, q: np.ndarray, tol: float = 1e-8,
                   method: str = "lapack") -> float:
    """Max deviation between the singular values of ``p @ x @ q`` and ``x``.

    Returned relative to ``sigma_1(x)``.  Raises NonOrthogonalError if ``p``
    or ``q`` is not orthogonal to within ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    if p.shape != (h, h) or q.shape != (w, w):
        raise ValueError(f"p must be {h}x{h} and q {w}x{w}")
    for name, mat in (("p", p), ("q", q)):
        res = orthogonality_residual(mat)
        if res > tol:
            raise NonOrthogonalError(f"{name} orthogonality residual {res:.3g} exceeds {tol:g}")
    s0 = svd(x, method).sigma
    s1 = svd(p @ x @ q, method).sigma
    return float(np.abs(s1 - s0).max() / max(s0[0], EPS))


def recompose(vectors_from: SvdFactors, values_from: SvdFactors) -> np.ndarray:
    """U_a diag(sigma_b) V_a^T: singular vectors of one matrix, values of another."""
    if vectors_from.shape != values_from.shape:
        raise ValueError(f"shape mismatch {vectors_from.shape} vs {values_from.shape}")
    return vectors_from.reconstruct(values_from.sigma)


def relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(a - ref) / max(np.linalg.norm(ref), EPS))


@dataclass
class Spectrum:
    amplitude: np.ndarray  # (c, h, w), >= 0
    phase: np.ndarray  # (c, h, w), in (-pi, pi]

    @property
    def coefficients(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


def _as_channels(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (h, w) or (c, h, w), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("dft input contains non-finite values")
    return x


def dft2(x: np.ndarray) -> Spectrum:
    """Per-channel unnormalized 2D DFT of ``(c, h, w)`` (or ``(h, w)``) data."""
    g = np.fft.fft2(_as_channels(x), axes=(-2, -1))
    phase = np.angle(g)
    phase[phase <= -np.pi] = np.pi
    return Spectrum(np.abs(g), phase)


def idft2(s: Spectrum, check_real: bool = True) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real part as ``(c, h, w)``."""
    if np.any(s.amplitude < 0):
        raise ValueError("negative amplitude")
    out = np.fft.ifft2(s.coefficients, axes=(-2, -1))
    if check_real:
        imag = np.linalg.norm(out.imag) / max(np.linalg.norm(out.real), EPS)
        if imag > 1e-6:
            raise ValueError(f"spectrum is not Hermitian (imaginary residual {imag:.3g})")
    return out.real


def frequency_radius(h: int, w: int) -> np.ndarray:
    fu = np.minimum(np.arange(h), h - np.arange(h)) / h
    fv = np.minimum(np.arange(w), w - np.arange(w)) / w
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def progressive_reconstruction(x: np.ndarray, order: str = "svd_rank") -> np.ndarray:
    """Relative F-norm error after adding components one group at a time.

    ``svd_rank``: entry j uses the j largest rank-1 terms (length k).
    ``fft_radius``: Fourier coefficients by increasing frequency radius, each
    coefficient added together with its conjugate partner; entry j covers j
    groups, so the curve has one entry per group (at most h*w).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("progressive_reconstruction needs a finite 2-D matrix")
    norm = max(np.linalg.norm(x), EPS)
    if order == "svd_rank":
        f = svd(x)
        k = len(f.sigma)
        errs = np.empty(k)
        approx = np.zeros_like(x)
        for j in range(k):
            approx += f.sigma[j] * np.outer(f.u[:, j], f.v[:, j])
            errs[j] = np.linalg.norm(x - approx) / norm
        return errs
    if order == "fft_radius":
        h, w = x.shape
        g = np.fft.fft2(x)
        radius = frequency_radius(h, w)
        groups = _conjugate_groups(h, w, radius)
        mask = np.zeros((h, w), dtype=bool)
        errs = np.empty(len(groups))
        for j, members in enumerate(groups):
            for uu, vv in members:
                mask[uu, vv] = True
            approx = np.fft.ifft2(np.where(mask, g, 0)).real
            errs[j] = np.linalg.norm(x - approx) / norm
        return errs
    raise ValueError(f"unknown order {order!r}; expected svd_rank or fft_radius")


def _conjugate_groups(h: int, w: int, radius: np.ndarray) -> list[list[tuple[int, int]]]:
    seen = np.zeros((h, w), dtype=bool)
    flat = np.lexsort((np.arange(h * w), radius.ravel()))
    groups = []
    for idx in flat:
        uu, vv = divmod(int(idx), w)
        if seen[uu, vv]:
            continue
        partner = ((-uu) % h, (-vv) % w)
        seen[uu, vv] = seen[partner] = True
        groups.append([(uu, vv)] if partner == (uu, vv) else [(uu, vv), partner])
    return groups


@dataclass
class BenchReport:
    shape: tuple[int, int, int]
    reps: int
    svd_decompose_ms: float
    svd_compose_ms: float
    svd_total_ms: float
    fft_decompose_ms: float
    fft_compose_ms: float
    fft_total_ms: float

    @property
    def ratio(self) -> float:
        return self.svd_total_ms / self.fft_total_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["ratio"] = self.ratio
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["formation", "decompose_ms", "compose_ms", "total_ms"])
            wr.writerow(["svd", self.svd_decompose_ms, self.svd_compose_ms, self.svd_total_ms])
            wr.writerow(["fft", self.fft_decompose_ms, self.fft_compose_ms, self.fft_total_ms])


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def _svd_round_trip(x: np.ndarray) -> tuple[float, float]:
    t0 = time.perf_counter()
    factors = [np.linalg.svd(ch, full_matrices=False) for ch in x]
    t1 = time.perf_counter()
    np.stack([(u * s) @ vt for u, s, vt in factors])
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def _fft_round_trip(x: np.ndarray) -> tuple[float, float]:
    h, w = x.shape[-2:]
    t0 = time.perf_counter()
    # real input: the half spectrum carries every coefficient
    g = scipy.fft.rfft2(x, axes=(-2, -1))
    t1 = time.perf_counter()
    scipy.fft.irfft2(g, s=(h, w), axes=(-2, -1))
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def bench_decomp(c: int = 64, h: int = 128, w: int = 128, reps: int = 10, seed: int = 0) -> BenchReport:
    """Median wall time of per-channel SVD round trips against FFT round trips.

    Repetitions interleave the two formations so both see the same machine
    state; every timed call is preceded by an untimed call of the same
    formation so neither runs on a cache the other just evicted.
    """
    if min(c, h, w) < 8:
        raise ValueError("bench dims must be >= 8")
    if reps < 3:
        raise ValueError("bench needs reps >= 3")
    x = np.random.default_rng(seed).standard_normal((c, h, w)).astype(np.float32)
    runs: dict[str, list[tuple[float, float]]] = {"svd": [], "fft": []}
    with _single_thread():
        for _ in range(reps):
            for name, fn in (("svd", _svd_round_trip), ("fft", _fft_round_trip)):
                fn(x)
                runs[name].append(fn(x))
    med = {name: (statistics.median(r[0] for r in rs) * 1e3, statistics.median(r[1] for r in rs) * 1e3)
           for name, rs in runs.items()}
    return BenchReport(
        shape=(c, h, w), reps=reps,
        svd_decompose_ms=med["svd"][0], svd_compose_ms=med["svd"][1],
        svd_total_ms=med["svd"][0] + med["svd"][1],
        fft_decompose_ms=med["fft"][0], fft_compose_ms=med["fft"][1],
        fft_total_ms=med["fft"][0] + med["fft"][1],
    )


def write_curve_csv(curve: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["components", "relative_error"])
        for j, e in enumerate(curve, start=1):
            wr.writerow([j, repr(float(e))])
