"""
SL(3) geometry for homographies.

Homographies are unit-determinant 3x3 matrices parameterized by 8 Lie-algebra
coefficients. All functions accept batched torch tensors (or array-likes) in
float64: vectors have shape (..., 8), matrices (..., 3, 3), points (..., 2).

Composition reads left to right in application order: hom_compose(a, b) warps
by a first and then by b, which is the matrix product b @ a.
"""

import logging
import math
from typing import NamedTuple, Tuple

import numpy as np
import torch

from kpalign.errors import (
    InvalidArgumentError,
    NumericalFailureError,
    PointAtInfinityError,
    Sl3DomainError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64

TAYLOR_DEGREE = 12
MERCATOR_TERMS = 40
LOG_RADIUS = 0.25
MAX_SQUARE_ROOTS = 60
W_EPSILON = 1e-12
DET_TOLERANCE = 1e-9


def _unit(row, col):
    m = torch.zeros(3, 3, dtype=DTYPE)
    m[row, col] = 1.0
    return m


def _build_generators():
    return torch.stack([
        _unit(0, 2),                                     # x-translation
        _unit(1, 2),                                     # y-translation
        _unit(1, 0) - _unit(0, 1),                       # rotation
        torch.diag(torch.tensor([1.0, 1.0, -2.0], dtype=DTYPE)) / math.sqrt(6.0),
        torch.diag(torch.tensor([1.0, -1.0, 0.0], dtype=DTYPE)),
        _unit(0, 1) + _unit(1, 0),                       # shear
        _unit(2, 0),                                     # projective x
        _unit(2, 1),                                     # projective y
    ])


_GENERATORS = _build_generators()
_VEE = torch.linalg.pinv(_GENERATORS.reshape(8, 9).T)


def as_tensor(x) -> torch.Tensor:
    """Convert an array-like to a float64 tensor without copying tensors that already are."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def sl3_generators() -> torch.Tensor:
    """
    Return the ordered sl(3) basis G_1..G_8 as an (8, 3, 3) tensor.

    Order: x-translation, y-translation, rotation, isotropic scale,
    anisotropic stretch, shear, projective x, projective y.
    """
    return _GENERATORS.clone()


def hat(v) -> torch.Tensor:
    """Map coefficients (..., 8) to traceless algebra elements (..., 3, 3)."""
    v = as_tensor(v)
    if v.shape[-1] != 8:
        raise InvalidArgumentError(f"expected 8 coefficients, got shape {tuple(v.shape)}")
    return torch.einsum('...k,kij->...ij', v, _GENERATORS)


def vee(a) -> torch.Tensor:
    """Project algebra elements (..., 3, 3) onto basis coefficients (..., 8)."""
    a = as_tensor(a)
    return a.reshape(*a.shape[:-2], 9) @ _VEE.T


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidArgumentError(f"{what} contains non-finite values")


def sl3_exp(v) -> torch.Tensor:
    """
    Matrix exponential of the algebra element with coefficients v.

    Scaling and squaring: the element is scaled by 2**-s so that its Frobenius
    norm is at most 1/2, a degree-12 Taylor series is evaluated by Horner's
    rule, and the result is squared s times. Differentiable through torch.

    Args:
        v: Coefficients, shape (..., 8)

    Returns:
        torch.Tensor: Homographies, shape (..., 3, 3), det 1 within 1e-9

    Raises:
        InvalidArgumentError: If v is not finite
    """
    v = as_tensor(v)
    _check_finite(v, "Lie-algebra vector")
    a = hat(v)
    norm = torch.linalg.matrix_norm(a.detach())
    squarings = torch.where(
        norm > 0,
        torch.ceil(torch.log2(norm.clamp_min(1e-300))) + 1,
        torch.zeros_like(norm),
    ).clamp_min(0)
    scaled = a / torch.pow(2.0, squarings)[..., None, None]

    eye = torch.eye(3, dtype=DTYPE).expand_as(a)
    e = eye
    for k in range(TAYLOR_DEGREE, 0, -1):
        e = eye + (scaled @ e) / k

    n_squarings = int(squarings.max().item()) if squarings.numel() else 0
    for step in range(n_squarings):
        e = torch.where((squarings > step)[..., None, None], e @ e, e)
    return e


def _sqrtm(m: torch.Tensor) -> torch.Tensor:
    """Principal square root by the Denman-Beavers iteration."""
    y = m
    z = torch.eye(3, dtype=DTYPE)
    for _ in range(100):
        y_next = 0.5 * (y + torch.linalg.inv(z))
        z_next = 0.5 * (z + torch.linalg.inv(y))
        if torch.linalg.matrix_norm(y_next - y) <= 1e-15 * torch.linalg.matrix_norm(y_next):
            return y_next
        y, z = y_next, z_next
    raise Sl3DomainError("Denman-Beavers square root did not converge")


def _logm(m: torch.Tensor) -> torch.Tensor:
    eigenvalues = torch.linalg.eigvals(m)
    scale = float(eigenvalues.abs().max())
    on_negative_axis = (eigenvalues.imag.abs() <= 1e-12 * max(scale, 1.0)) & (eigenvalues.real <= 0)
    if bool(on_negative_axis.any()):
        raise Sl3DomainError("matrix has an eigenvalue on the closed negative real axis")

    eye = torch.eye(3, dtype=DTYPE)
    y = m
    roots = 0
    while float(torch.linalg.matrix_norm(y - eye)) >= LOG_RADIUS:
        if roots >= MAX_SQUARE_ROOTS:
            raise Sl3DomainError("inverse scaling did not reach the series radius")
        y = _sqrtm(y)
        roots += 1

    x = y - eye
    power = x
    series = torch.zeros_like(x)
    for n in range(1, MERCATOR_TERMS + 1):
        series = series + ((-1) ** (n + 1)) * power / n
        power = power @ x
    return series * (2.0 ** roots)


def sl3_log(h) -> torch.Tensor:
    """
    Principal logarithm of SL(3) matrices as basis coefficients.

    Inverse scaling and squaring: repeated principal square roots until
    ||H - I||_F < 0.25, a Mercator series, then rescaling.

    Args:
        h: Homographies, shape (..., 3, 3)

    Returns:
        torch.Tensor: Coefficients, shape (..., 8)

    Raises:
        Sl3DomainError: If an eigenvalue lies on the negative real axis
    """
    h = as_tensor(h).detach()
    _check_finite(h, "homography")
    flat = h.reshape(-1, 3, 3)
    logs = torch.stack([_logm(m) for m in flat]) if len(flat) else flat
    return vee(logs).reshape(*h.shape[:-2], 8)


def renormalize(m: torch.Tensor) -> torch.Tensor:
    """Divide by the real cube root of the determinant."""
    det = torch.linalg.det(m)
    root = torch.sign(det) * det.abs().pow(1.0 / 3.0)
    return m / root[..., None, None]


def hom_compose(a, b) -> torch.Tensor:
    """Warp by a, then by b; the product is renormalized to det 1."""
    return renormalize(as_tensor(b) @ as_tensor(a))


def hom_inverse(h) -> torch.Tensor:
    return torch.linalg.inv(as_tensor(h))


def project_points(h, p) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Perspective-divide points through homographies without raising.

    Args:
        h: Homographies, shape (..., 3, 3), broadcast against p
        p: Points, shape (..., 2)

    Returns:
        tuple: (warped points, mask of points with |w| > 1e-12). Entries
        outside the mask hold the undivided numerators.
    """
    h = as_tensor(h)
    p = as_tensor(p)
    x, y = p[..., 0], p[..., 1]
    u = h[..., 0, 0] * x + h[..., 0, 1] * y + h[..., 0, 2]
    v = h[..., 1, 0] * x + h[..., 1, 1] * y + h[..., 1, 2]
    w = h[..., 2, 0] * x + h[..., 2, 1] * y + h[..., 2, 2]
    ok = w.abs() > W_EPSILON
    safe_w = torch.where(ok, w, torch.ones_like(w))
    return torch.stack([u / safe_w, v / safe_w], dim=-1), ok


def hom_apply(h, p) -> torch.Tensor:
    """
    Apply homographies to points.

    Raises:
        PointAtInfinityError: If any homogeneous coordinate is within 1e-12 of 0
    """
    q, ok = project_points(h, p)
    if not bool(ok.all()):
        raise PointAtInfinityError("point maps to infinity under the homography")
    return q


def ic_warp(theta_i, theta_j, p) -> torch.Tensor:
    """Map points of image i into image j: p warped by exp(theta_i), then exp(-theta_j)."""
    return hom_apply(hom_compose(sl3_exp(theta_i), sl3_exp(-as_tensor(theta_j))), p)


class KarcherMean(NamedTuple):
    matrix: torch.Tensor
    converged: bool
    iterations: int


def karcher_mean(hs, tol: float = 1e-10, max_iter: int = 100) -> KarcherMean:
    """
    Riemannian barycenter of SL(3) elements.

    Iterates mu <- mu @ exp(mean_i log(mu^-1 @ h_i)) from mu = hs[0] until the
    mean increment norm drops below tol. A log-domain failure stops the
    iteration and returns the partial mean flagged as non-convergent.
    """
    hs = as_tensor(hs).detach()
    if hs.ndim != 3 or len(hs) == 0:
        raise InvalidArgumentError("karcher_mean needs a non-empty (n, 3, 3) stack")
    mu = hs[0]
    for iteration in range(1, max_iter + 1):
        try:
            delta = sl3_log(hom_inverse(mu) @ hs).mean(dim=0)
        except Sl3DomainError as exc:
            logger.warning("Karcher mean stopped at iteration %d: %s", iteration, exc)
            return KarcherMean(mu, False, iteration)
        mu = renormalize(mu @ sl3_exp(delta))
        if float(torch.linalg.vector_norm(delta)) < tol:
            return KarcherMean(mu, True, iteration)
    return KarcherMean(mu, False, max_iter)


class GaugedHomographies(NamedTuple):
    homographies: torch.Tensor
    mode: str
    fell_back: bool


def gauge_matrices(hs, mode: str) -> GaugedHomographies:
    """Fix the global gauge of a stack of homographies (see gauge_normalize)."""
    hs = as_tensor(hs).detach()
    if mode not in ('karcher', 'first', 'none'):
        raise InvalidArgumentError(f"unknown gauge mode {mode!r}")
    if len(hs) == 0:
        raise InvalidArgumentError("gauge normalization needs at least one homography")
    if mode == 'none':
        return GaugedHomographies(hs, 'none', False)
    if mode == 'karcher':
        mean = karcher_mean(hs)
        if mean.converged:
            return GaugedHomographies(renormalize(hom_inverse(mean.matrix) @ hs), 'karcher', False)
        logger.warning("Karcher mean did not converge; falling back to gauge 'first'")
        return GaugedHomographies(renormalize(hom_inverse(hs[0]) @ hs), 'first', True)
    return GaugedHomographies(renormalize(hom_inverse(hs[0]) @ hs), 'first', False)


def gauge_normalize(thetas, mode: str = 'karcher') -> GaugedHomographies:
    """
    Exponentiate per-image parameters and remove the global gauge.

    karcher right-composes every warp with the inverse Karcher mean, first
    makes image 1 the identity and none returns the raw exponentials. Relative
    warps H_j^-1 @ H_i are unchanged by every mode.
    """
    return gauge_matrices(sl3_exp(as_tensor(thetas).detach()), mode)


def matrix_chart(theta) -> torch.Tensor:
    """Direct chart used by the parameterization ablation: H = I + [theta, 0] row-major."""
    theta = as_tensor(theta)
    pad = torch.zeros(*theta.shape[:-1], 1, dtype=DTYPE)
    return torch.eye(3, dtype=DTYPE) + torch.cat([theta, pad], dim=-1).reshape(*theta.shape[:-1], 3, 3)


def warp_matrices(thetas, param: str = 'lie') -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Forward and inverse warps for per-image parameters.

    Raises:
        NumericalFailureError: If the matrix chart produces a singular warp
    """
    thetas = as_tensor(thetas)
    if param == 'lie':
        return sl3_exp(thetas), sl3_exp(-thetas)
    if param != 'matrix':
        raise InvalidArgumentError(f"unknown parameterization {param!r}")
    forward = matrix_chart(thetas)
    try:
        inverse = torch.linalg.inv(forward)
    except torch.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"non-invertible warp in matrix chart: {exc}") from exc
    if not bool(torch.isfinite(inverse).all()):
        raise NumericalFailureError("non-invertible warp in matrix chart")
    return forward, inverse


def check_homography(h, tol: float = DET_TOLERANCE) -> bool:
    """True when every matrix in h is finite with det 1 within tol (relative)."""
    h = as_tensor(h)
    if not bool(torch.isfinite(h).all()):
        return False
    return bool(((torch.linalg.det(h) - 1.0).abs() <= tol).all())


def to_normalized(points, width: int, height: int) -> np.ndarray:
    """Pixel coordinates to the [-1, 1] frame: (2 px / (W - 1) - 1, 2 py / (H - 1) - 1)."""
    points = np.asarray(points, dtype=np.float64)
    scale = np.array([width - 1, height - 1], dtype=np.float64)
    return 2.0 * points / scale - 1.0


def to_pixels(points, width: int, height: int) -> np.ndarray:
    """Inverse of to_normalized."""
    points = np.asarray(points, dtype=np.float64)
    scale = np.array([width - 1, height - 1], dtype=np.float64)
    return (points + 1.0) * scale / 2.0
