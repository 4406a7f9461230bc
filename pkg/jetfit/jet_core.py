"""n-jet surface fitting: Vandermonde assembly, preconditioning, (weighted)
least-squares solve and the geometric quantities read off the coefficients.

All functions work on torch tensors batched over any leading dimensions and
accept numpy arrays or nested lists (converted to float64). Monomials are
enumerated by ascending total degree, then ascending y-exponent:
1, x, y, x^2, xy, y^2, x^3, ...
"""

from dataclasses import dataclass
from functools import lru_cache

import torch
from loguru import logger

from jetfit.errors import (
    InvalidInputError, DegeneratePatchError, SingularFitError, UnsupportedOrderError, NumericalFaultError
)

# ======================================================================================
# Solver parameters

MIN_ORDER = 1
MAX_ORDER = 4
DEFAULT_RIDGE = 1e-8  # in preconditioned units
MAX_RIDGE = 1e-2
RIDGE_GROWTH = 10.0

# ======================================================================================


def _as_tensor(values, dtype=torch.float64) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values if values.is_floating_point() else values.to(dtype)
    return torch.as_tensor(values, dtype=dtype)


def check_order(order: int) -> int:
    if not isinstance(order, int) or not MIN_ORDER <= order <= MAX_ORDER:
        raise UnsupportedOrderError(f"jet order must be an integer in [{MIN_ORDER}, {MAX_ORDER}], got {order!r}")
    return order


def coefficient_count(order: int) -> int:
    """N_n = (n+1)(n+2)/2."""
    check_order(order)
    return (order + 1) * (order + 2) // 2


@lru_cache(maxsize=None)
def monomial_exponents(order: int) -> tuple:
    """Canonical (exp_x, exp_y) column order for an order-n jet."""
    check_order(order)
    return tuple((degree - i, i) for degree in range(order + 1) for i in range(degree + 1))


def order_from_count(count: int) -> int:
    for order in range(MIN_ORDER, MAX_ORDER + 1):
        if coefficient_count(order) == count:
            return order
    raise UnsupportedOrderError(f"{count} coefficients don't correspond to a jet of order {MIN_ORDER}..{MAX_ORDER}")


@dataclass(frozen=True)
class DesignMatrix:
    matrix: torch.Tensor  # (..., N_p, N_n)
    column_order: tuple


@dataclass(frozen=True)
class Preconditioner:
    d_diag: torch.Tensor  # (..., N_n), entry h^(a+b)
    h: torch.Tensor  # (...)


@dataclass(frozen=True)
class JetCoefficients:
    beta: torch.Tensor  # (..., N_n), local-frame length units
    order: int

    def __post_init__(self):
        if self.beta.shape[-1] != coefficient_count(self.order):
            raise InvalidInputError(
                f"beta has {self.beta.shape[-1]} entries, order {self.order} needs {coefficient_count(self.order)}")

    @classmethod
    def from_beta(cls, beta) -> "JetCoefficients":
        beta = _as_tensor(beta)
        return cls(beta=beta, order=order_from_count(beta.shape[-1]))

    def coefficient(self, exp_x: int, exp_y: int) -> torch.Tensor:
        return self.beta[..., monomial_exponents(self.order).index((exp_x, exp_y))]


@dataclass(frozen=True)
class CurvaturePair:
    k1: torch.Tensor  # |k1| >= |k2|
    k2: torch.Tensor
    dir1: torch.Tensor  # (..., 3) unit, local frame
    dir2: torch.Tensor


@dataclass(frozen=True)
class JetFit:
    coefficients: JetCoefficients
    preconditioner: Preconditioner
    ridge: torch.Tensor  # ridge actually used per fit


def _check_points2d(points2d) -> torch.Tensor:
    points2d = _as_tensor(points2d)
    if points2d.ndim < 2 or points2d.shape[-1] != 2:
        raise InvalidInputError(f"expected (..., N_p, 2) points, got shape {tuple(points2d.shape)}")
    if points2d.shape[-2] == 0:
        raise InvalidInputError("point set is empty")
    if not torch.isfinite(points2d).all():
        raise InvalidInputError("non-finite point coordinate")
    return points2d


def _monomials(x: torch.Tensor, y: torch.Tensor, exponents) -> torch.Tensor:
    return torch.stack([x ** a * y ** b for a, b in exponents], dim=-1)


def build_vandermonde(points2d, order: int) -> DesignMatrix:
    """Monomial values of every point: rows index points, columns monomials."""
    exponents = monomial_exponents(order)
    points2d = _check_points2d(points2d)
    return DesignMatrix(
        matrix=_monomials(points2d[..., 0], points2d[..., 1], exponents),
        column_order=exponents,
    )


def make_preconditioner(points2d, order: int) -> Preconditioner:
    """Column scaling D with h = mean ||(x, y)||."""
    exponents = monomial_exponents(order)
    points2d = _check_points2d(points2d)
    h = torch.linalg.vector_norm(points2d, dim=-1).mean(dim=-1)
    if (h <= 0).any():
        raise DegeneratePatchError("all points lie at the origin; no preconditioning length")
    degrees = torch.tensor([a + b for a, b in exponents], dtype=h.dtype, device=h.device)
    return Preconditioner(d_diag=h.unsqueeze(-1) ** degrees, h=h)


class _WeightedNormalSolve(torch.autograd.Function):
    """beta' = (M'^T W M' + ridge I)^-1 M'^T W B with an implicit-differentiation adjoint.

    Backward reuses the forward Cholesky factor: lambda = A^-1 dL/dbeta', then
    dL/dw_j = (m_j . lambda) r_j, dL/dB_j = w_j (m_j . lambda),
    dL/dm_j = w_j (r_j lambda - (m_j . lambda) beta'), with r_j = B_j - m_j . beta'.
    """

    @staticmethod
    def forward(ctx, m, w, b, ridge):
        mtw = m.transpose(-1, -2) * w.unsqueeze(-2)
        normal = mtw @ m
        rhs = (mtw @ b.unsqueeze(-1)).squeeze(-1)
        chol, used_ridge = _factorize(normal, ridge)
        beta = torch.cholesky_solve(rhs.unsqueeze(-1), chol).squeeze(-1)
        ctx.save_for_backward(m, w, b, chol, beta)
        ctx.mark_non_differentiable(used_ridge)
        return beta, used_ridge

    @staticmethod
    def backward(ctx, grad_beta, _grad_ridge):
        m, w, b, chol, beta = ctx.saved_tensors
        lam = torch.cholesky_solve(grad_beta.unsqueeze(-1), chol).squeeze(-1)
        if not torch.isfinite(lam).all():
            raise NumericalFaultError("wls_adjoint", "singular normal matrix in adjoint solve")
        m_lam = (m @ lam.unsqueeze(-1)).squeeze(-1)  # (..., N_p)
        residual = b - (m @ beta.unsqueeze(-1)).squeeze(-1)
        grad_m = grad_w = grad_b = None
        if ctx.needs_input_grad[0]:
            grad_m = w.unsqueeze(-1) * (residual.unsqueeze(-1) * lam.unsqueeze(-2)
                                        - m_lam.unsqueeze(-1) * beta.unsqueeze(-2))
        if ctx.needs_input_grad[1]:
            grad_w = m_lam * residual
        if ctx.needs_input_grad[2]:
            grad_b = w * m_lam
        return grad_m, grad_w, grad_b, None


def _factorize(normal: torch.Tensor, ridge: float):
    """Cholesky of normal + ridge*I, escalating ridge x10 up to MAX_RIDGE for failing members."""
    n = normal.shape[-1]
    eye = torch.eye(n, dtype=normal.dtype, device=normal.device)
    used = torch.full(normal.shape[:-2], float(ridge), dtype=normal.dtype, device=normal.device)
    chol, info = torch.linalg.cholesky_ex(normal + used[..., None, None] * eye)
    failed = info != 0
    current = float(ridge)
    while failed.any():
        current = max(current * RIDGE_GROWTH, DEFAULT_RIDGE) if current > 0 else DEFAULT_RIDGE
        if current > MAX_RIDGE * (1 + 1e-12):
            worst = normal[failed][0] if normal.ndim > 2 else normal
            condition = float(torch.linalg.cond(worst))
            raise SingularFitError(f"{int(failed.sum())} normal matrices not factorizable with ridge <= {MAX_RIDGE}",
                                   condition=condition)
        logger.debug(f"Escalating ridge to {current:.1e} for {int(failed.sum())} fit(s).")
        used = torch.where(failed, torch.full_like(used, current), used)
        retry, retry_info = torch.linalg.cholesky_ex(normal + used[..., None, None] * eye)
        chol = torch.where(failed[..., None, None], retry, chol)
        failed = failed & (retry_info != 0)
    return chol, used


def solve_wls(m: DesignMatrix, w, b, precond: Preconditioner, ridge: float = DEFAULT_RIDGE) -> JetFit:
    """Weighted least squares in the preconditioned basis M' = M D^-1; returns beta = D^-1 beta'."""
    if ridge < 0:
        raise InvalidInputError(f"ridge must be non-negative, got {ridge}")
    matrix = m.matrix
    w = _as_tensor(w).to(matrix.dtype)
    b = _as_tensor(b).to(matrix.dtype)
    if w.shape != matrix.shape[:-1] or b.shape != matrix.shape[:-1]:
        raise InvalidInputError(
            f"design matrix {tuple(matrix.shape)} doesn't match weights {tuple(w.shape)} / heights {tuple(b.shape)}")
    if (w <= 0).any():
        raise InvalidInputError("weights must be strictly positive")
    d_diag = precond.d_diag.to(matrix.dtype)
    scaled_beta, used_ridge = _WeightedNormalSolve.apply(matrix / d_diag.unsqueeze(-2), w, b, float(ridge))
    beta = scaled_beta / d_diag
    order = order_from_count(matrix.shape[-1])
    return JetFit(JetCoefficients(beta=beta, order=order), precond, used_ridge)


def solve_ls(m: DesignMatrix, b, precond: Preconditioner, ridge: float = DEFAULT_RIDGE) -> JetFit:
    """Unweighted least squares (solve_wls with W = I)."""
    b = _as_tensor(b).to(m.matrix.dtype)
    return solve_wls(m, torch.ones_like(b), b, precond, ridge)


def fit_jet(points3d, weights=None, order: int = 3, ridge: float = DEFAULT_RIDGE) -> JetFit:
    """Fit z = J(x, y) to local-frame points (..., N_p, 3); weights None means uniform."""
    points3d = _as_tensor(points3d)
    design = build_vandermonde(points3d[..., :2], order)
    precond = make_preconditioner(points3d[..., :2], order)
    if weights is None:
        return solve_ls(design, points3d[..., 2], precond, ridge)
    return solve_wls(design, weights, points3d[..., 2], precond, ridge)


def _unpack(beta) -> JetCoefficients:
    return beta if isinstance(beta, JetCoefficients) else JetCoefficients.from_beta(beta)


def evaluate_jet(beta, x, y) -> torch.Tensor:
    """z = sum beta_(a,b) x^a y^b."""
    jet = _unpack(beta)
    x = _as_tensor(x).to(jet.beta.dtype)
    y = _as_tensor(y).to(jet.beta.dtype)
    values = _monomials(x, y, monomial_exponents(jet.order))
    return (values * jet.beta).sum(dim=-1)


def jet_gradient(beta, x, y) -> tuple:
    """Analytic (dJ/dx, dJ/dy) at (x, y)."""
    jet = _unpack(beta)
    x = _as_tensor(x).to(jet.beta.dtype)
    y = _as_tensor(y).to(jet.beta.dtype)
    exponents = monomial_exponents(jet.order)
    # exponents clamp at 0 so that 0 ** -1 never appears; the factor a (or b) zeroes those terms
    dx_terms = torch.stack([a * x ** max(a - 1, 0) * y ** b for a, b in exponents], dim=-1)
    dy_terms = torch.stack([b * x ** a * y ** max(b - 1, 0) for a, b in exponents], dim=-1)
    return (dx_terms * jet.beta).sum(dim=-1), (dy_terms * jet.beta).sum(dim=-1)


def _unit_normal(dzdx: torch.Tensor, dzdy: torch.Tensor) -> torch.Tensor:
    normal = torch.stack([-dzdx, -dzdy, torch.ones_like(dzdx)], dim=-1)
    return normal / torch.linalg.vector_norm(normal, dim=-1, keepdim=True)


def jet_normal(beta) -> torch.Tensor:
    """(-beta_1, -beta_2, 1) normalized; local frame, positive z."""
    jet = _unpack(beta)
    return _unit_normal(jet.beta[..., 1], jet.beta[..., 2])


def neighbor_normals(beta, points2d) -> torch.Tensor:
    """Normals of the implicit surface z - J(x, y) = 0 at every neighbor's (x, y)."""
    jet = _unpack(beta)
    points2d = _as_tensor(points2d).to(jet.beta.dtype)
    dzdx, dzdy = jet_gradient(jet.beta.unsqueeze(-2), points2d[..., 0], points2d[..., 1])
    return _unit_normal(dzdx, dzdy)


def _fundamental_forms(beta: torch.Tensor):
    b1, b2, b3, b4, b5 = (beta[..., i] for i in range(1, 6))
    first = torch.stack([
        torch.stack([1 + b1 * b1, b1 * b2], dim=-1),
        torch.stack([b1 * b2, 1 + b2 * b2], dim=-1),
    ], dim=-2)
    second = torch.stack([
        torch.stack([2 * b3, b4], dim=-1),
        torch.stack([b4, 2 * b5], dim=-1),
    ], dim=-2)
    norm = torch.sqrt(b1 * b1 + b2 * b2 + 1)
    return first, second, norm


def weingarten(beta) -> torch.Tensor:
    """-(1/sqrt(b1^2 + b2^2 + 1)) I^-1 II for the jet's height function at the origin."""
    jet = _unpack(beta)
    if jet.order < 2:
        raise UnsupportedOrderError("the Weingarten map needs a jet of order >= 2")
    first, second, norm = _fundamental_forms(jet.beta)
    return -torch.linalg.solve(first, second) / norm[..., None, None]


def principal_curvatures(beta) -> CurvaturePair:
    """Eigen-decomposition of the Weingarten map, sorted so that |k1| >= |k2|.

    The map is self-adjoint w.r.t. the first fundamental form I, so it is solved
    as the symmetric problem L^-1 (-II/|n|) L^-T with I = L L^T; eigenvectors
    v = L^-T u are I-orthogonal, which makes their 3D lifts (a, b, a b1 + b b2)
    orthogonal tangent vectors.
    """
    jet = _unpack(beta)
    if jet.order < 2:
        raise UnsupportedOrderError("principal curvatures need a jet of order >= 2")
    first, second, norm = _fundamental_forms(jet.beta)
    chol = torch.linalg.cholesky(first)
    shape = -second / norm[..., None, None]
    half = torch.linalg.solve_triangular(chol, shape, upper=False)
    symmetric = torch.linalg.solve_triangular(chol, half.transpose(-1, -2), upper=False)
    symmetric = 0.5 * (symmetric + symmetric.transpose(-1, -2))
    values, vectors = torch.linalg.eigh(symmetric)
    params = torch.linalg.solve_triangular(chol.transpose(-1, -2), vectors, upper=True)  # columns v_i

    b1 = jet.beta[..., 1, None]
    b2 = jet.beta[..., 2, None]
    a, b = params[..., 0, :], params[..., 1, :]
    tangents = torch.stack([a, b, a * b1 + b * b2], dim=-1)  # (..., 2, 3), one row per eigenvector
    tangents = tangents / torch.linalg.vector_norm(tangents, dim=-1, keepdim=True)

    # larger magnitude first
    swap = values[..., 0].abs() < values[..., 1].abs()
    k1 = torch.where(swap, values[..., 1], values[..., 0])
    k2 = torch.where(swap, values[..., 0], values[..., 1])
    dir1 = torch.where(swap[..., None], tangents[..., 1, :], tangents[..., 0, :])
    dir2 = torch.where(swap[..., None], tangents[..., 0, :], tangents[..., 1, :])

    # remove round-off: dir2 re-orthogonalized against dir1 and the normal
    normal = jet_normal(jet)
    dir1 = dir1 - (dir1 * normal).sum(-1, keepdim=True) * normal
    dir1 = dir1 / torch.linalg.vector_norm(dir1, dim=-1, keepdim=True)
    completed = torch.linalg.cross(normal, dir1, dim=-1)
    dir2 = torch.where((completed * dir2).sum(-1, keepdim=True) < 0, -completed, completed)
    return CurvaturePair(k1=k1, k2=k2, dir1=dir1, dir2=dir2)
