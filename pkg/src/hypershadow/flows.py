"""One-dimensional reparametrization flows.

The time change is carried by a scalar field X = 1 + xhat with
sup|xhat| < 1, so X stays positive and its flow phi, solving
phi' = X(phi) with phi(0) = 0, is a strictly increasing bijection.
solve_flow integrates phi with a fixed-step fourth order scheme whose
equal substeps keep the dense output on the grid nodes, and obtains the
inverse from the exact identity phi_inv(t) = int_0^t dsigma / X(sigma).
composite_window assembles the reparametrized history maps
alpha(rho, s) = phi(phi_inv(rho) + s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .funcspace import BallRadii, GridFunction, WeightParam

__all__ = [
    "ScalarField",
    "Flow",
    "DistortionReport",
    "solve_flow",
    "distortion_check",
    "composite_window",
    "flow_difference_eta",
    "composite_difference_eta",
    "phi_derivative_bounds",
]


class ScalarField:
    """A scalar vector field X = 1 + xhat on the line.

    ``xhat`` stores the deviation X - 1 (m = 1); ``ball`` holds the
    radii (t_0, ..., t_l, t_l^Lip) the field is asserted to live in,
    with t_0 < 1 so X remains positive. Construction rejects fields
    whose nodal sup deviation reaches 1.
    """

    def __init__(self, xhat, ball):
        if not isinstance(xhat, GridFunction):
            raise TypeError("xhat must be a GridFunction")
        if xhat.m != 1:
            raise ValueError("a scalar field needs m = 1 samples")
        if not isinstance(ball, BallRadii):
            raise TypeError("ball must be BallRadii")
        if ball.c[0] >= 1.0:
            raise ValueError("ball radius t_0 must be < 1")
        if float(np.abs(xhat.values).max()) >= 1.0:
            raise ValueError("sup|X - 1| must be < 1")
        self.xhat = xhat
        self.ball = ball
        self._fast = None

    @property
    def t0(self):
        return self.ball.c[0]

    def sup_deviation(self):
        return float(np.abs(self.xhat.values).max())

    def value(self, t):
        """X(t) = 1 + xhat(t), scalar or vectorized."""
        return 1.0 + self.xhat.eval1(t)

    @classmethod
    def identity(cls, half_width, delta, ball=None, interp_order=5,
                 extension="zero"):
        n = int(np.floor(2.0 * half_width / delta + 1e-9)) + 1
        g = GridFunction(half_width, delta, np.zeros(n),
                         interp_order=interp_order, extension=extension)
        return cls(g, ball if ball is not None else BallRadii((0.0, 0.0)))

    @classmethod
    def from_callable(cls, fn, half_width, delta, ball, interp_order=5,
                      extension="zero"):
        g = GridFunction.sample(fn, half_width, delta,
                                interp_order=interp_order, extension=extension)
        return cls(g, ball)

    def fast_value(self, t):
        """Scalar X(t) through precomputed per-cell Horner coefficients.

        Same interpolant as ``value`` up to rounding, but cheap enough
        for the inner loop of the time stepper.
        """
        if self._fast is None:
            self._fast = _FastScalar(self.xhat)
        return 1.0 + self._fast(t)


class _FastScalar:
    """Per-cell polynomial coefficients for fast scalar evaluation."""

    def __init__(self, g):
        p = g.interp_order
        n = g.n
        ncells = n - 1
        i = np.arange(ncells)
        start = np.clip(i - (p - 1) // 2, 0, n - 1 - p)
        pattern = i - start
        coeffs = np.empty((ncells, p + 1))
        vals = g.values[:, 0]
        for q in np.unique(pattern):
            # local coordinates of the stencil in cell units
            coords = np.arange(p + 1, dtype=float) - q
            V = np.vander(coords, p + 1, increasing=True)
            inv = np.linalg.inv(V)
            rows = np.nonzero(pattern == q)[0]
            gathered = vals[start[rows][:, None] + np.arange(p + 1)[None, :]]
            coeffs[rows] = gathered @ inv.T
        self.lo = float(g.nodes[0])
        self.delta = float(g.delta)
        self.ncells = ncells
        self.coeffs = [tuple(row) for row in coeffs]
        self.order = p
        self.extension = g.extension
        self.v_left = float(vals[0])
        self.v_right = float(vals[-1])
        self.slope_left = float(g._boundary_slope(-1)[0])
        self.slope_right = float(g._boundary_slope(+1)[0])

    def __call__(self, t):
        u = (t - self.lo) / self.delta
        if u < 0.0:
            return self._outside(self.v_left, -u, self.slope_left, -1)
        if u > self.ncells:
            return self._outside(self.v_right, u - self.ncells,
                                 self.slope_right, +1)
        cell = int(u)
        if cell == self.ncells:
            cell -= 1
        x = u - cell
        c = self.coeffs[cell]
        acc = c[self.order]
        for r in range(self.order - 1, -1, -1):
            acc = acc * x + c[r]
        return acc

    def _outside(self, v, d_cells, slope, side):
        if self.extension == "constant-hold":
            return v
        if self.extension == "zero":
            return v * (1.0 - d_cells) if d_cells < 1.0 else 0.0
        return v + side * d_cells * self.delta * slope


class Flow:
    """The flow of a scalar field and its inverse.

    ``phi`` is sampled in t, ``phi_inv`` in rho; both windows are large
    enough that each covers the image of the other. Construction checks
    the normalization phi(0) = 0, strict monotonicity of both maps, and
    a round-trip defect below 1e-9.

    The certification covers the part of the range whose image stays
    inside the field's sampled window. Beyond it the field is governed
    by its extension policy, which is continuous but not smooth at the
    window edge, so interpolating the flow across those points cannot
    sustain the tolerance; callers are expected to size the field window
    so every lookup they care about lands in the certified region.
    """

    ROUNDTRIP_TOL = 1e-9

    def __init__(self, phi, phi_inv, source):
        self.phi = phi
        self.phi_inv = phi_inv
        self.source = source
        self._validate()

    @property
    def t0(self):
        return self.source.t0

    def _validate(self):
        izero = (self.phi.n - 1) // 2
        if self.phi.values[izero, 0] != 0.0:
            raise ValueError("phi(0) must vanish exactly")
        if not (np.diff(self.phi.values[:, 0]) > 0.0).all():
            raise ValueError("phi must be strictly increasing")
        if not (np.diff(self.phi_inv.values[:, 0]) > 0.0).all():
            raise ValueError("phi_inv must be strictly increasing")
        defect = self.roundtrip_defect()
        if defect > self.ROUNDTRIP_TOL:
            raise ValueError(f"round-trip defect {defect:.3e} beyond tolerance")

    def roundtrip_defect(self):
        """max |phi(phi_inv(rho)) - rho| plus the reverse composition.

        Taken over the certified region: nodes whose composition stays
        inside both the partner's window and the field's sampled window.
        """
        Tf = self.source.xhat.half_width
        # a full interpolation stencil must stay clear of the extension
        # kinks at the field window edge
        reach = (self.phi.interp_order + 1) * self.phi.delta
        rho = self.phi_inv.nodes
        t = self.phi_inv.values[:, 0]
        keep = ((np.abs(rho) <= Tf - (1.0 + self.t0) * reach)
                & (np.abs(t) <= min(self.phi.half_width, Tf) - reach))
        worst = 0.0
        if keep.any():
            worst = float(np.abs(self.phi.eval1(t[keep]) - rho[keep]).max())
        t2 = self.phi.nodes
        r2 = self.phi.values[:, 0]
        keep2 = ((np.abs(t2) <= Tf)
                 & (np.abs(r2) <= min(self.phi_inv.half_width, Tf) - reach))
        if keep2.any():
            worst = max(worst, float(
                np.abs(self.phi_inv.eval1(r2[keep2]) - t2[keep2]).max()))
        return worst

    def phi_at(self, t):
        return self.phi.eval1(t)

    def inv_at(self, rho):
        return self.phi_inv.eval1(rho)


def solve_flow(field, window, substeps=8, interp_order=7):
    """Integrate phi' = X(phi), phi(0) = 0 and build the inverse map.

    Parameters
    ----------
    field : ScalarField
    window : float or pair
        Half-width (or interval) the flow must cover in t; it is rounded
        up to a whole number of grid cells so 0 stays a node.
    substeps : int
        Equal fourth-order substeps per grid cell. The step stays fixed
        over the whole range.
    interp_order : int
        Interpolation degree of the dense output.

    The inverse is not obtained by root finding: phi_inv(t) is the
    integral of 1/X, evaluated per cell with a fixed Gauss rule, on a
    window inflated by (1 + t_0) so it covers the image of phi.
    """
    if float(np.abs(field.xhat.values).max()) >= 1.0:
        raise ValueError("sup|X - 1| must be < 1")
    if isinstance(window, (tuple, list)):
        R = max(abs(float(window[0])), abs(float(window[1])))
    else:
        R = abs(float(window))
    delta = field.xhat.delta
    K = max(int(math.ceil(R / delta - 1e-9)), (interp_order + 2) // 2)
    R_phi = K * delta

    h = delta / int(substeps)
    vals = np.empty(2 * K + 1)
    vals[K] = 0.0
    fast = field.fast_value
    for direction in (+1, -1):
        y = 0.0
        step = h * direction
        for i in range(K):
            for _ in range(int(substeps)):
                k1 = fast(y)
                k2 = fast(y + 0.5 * step * k1)
                k3 = fast(y + 0.5 * step * k2)
                k4 = fast(y + step * k3)
                y += (step / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            vals[K + direction * (i + 1)] = y
    phi = GridFunction(R_phi, delta, vals, interp_order=interp_order,
                       extension="linear")

    K_inv = max(int(math.ceil((1.0 + field.t0) * R_phi / delta - 1e-9)),
                (interp_order + 2) // 2)
    R_inv = K_inv * delta
    gl_x, gl_w = np.polynomial.legendre.leggauss(6)
    cell_lo = -R_inv + np.arange(2 * K_inv) * delta
    # quadrature points of every cell at once, then 1/X there
    pts = cell_lo[:, None] + (0.5 * delta) * (gl_x[None, :] + 1.0)
    integrand = 1.0 / (1.0 + field.xhat.eval1(pts.ravel()))
    cells = (integrand.reshape(pts.shape) @ gl_w) * (0.5 * delta)
    inv_vals = np.empty(2 * K_inv + 1)
    inv_vals[K_inv] = 0.0
    inv_vals[K_inv + 1:] = np.cumsum(cells[K_inv:])
    inv_vals[:K_inv] = -np.cumsum(cells[:K_inv][::-1])[::-1]
    phi_inv = GridFunction(R_inv, delta, inv_vals, interp_order=interp_order,
                           extension="linear")
    return Flow(phi, phi_inv, field)


@dataclass(frozen=True)
class DistortionReport:
    """Worst slack of the two-sided flow distortion bounds.

    Slacks are bound minus measured (lower bounds measured minus bound),
    so negative entries beyond the tolerance are violations.
    """

    t0: float
    phi_lower: float
    phi_upper: float
    inv_lower: float
    inv_upper: float
    violations: int
    tolerance: float

    @property
    def ok(self):
        return self.violations == 0

    @property
    def worst(self):
        return min(self.phi_lower, self.phi_upper,
                   self.inv_lower, self.inv_upper)


def _pairwise_slacks(x, y, lo_fac, hi_fac, chunk=256):
    worst_lo = np.inf
    worst_hi = np.inf
    n = x.size
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        dx = np.abs(x[a:b, None] - x[None, :])
        dy = np.abs(y[a:b, None] - y[None, :])
        same = dx == 0.0
        lo = dy - lo_fac * dx
        hi = hi_fac * dx - dy
        lo[same] = np.inf
        hi[same] = np.inf
        worst_lo = min(worst_lo, float(lo.min()))
        worst_hi = min(worst_hi, float(hi.min()))
    return worst_lo, worst_hi


def distortion_check(fl, tolerance=1e-8):
    """Verify the two-sided distortion bounds over all node pairs.

    phi must move pairs by between (1 - t_0) and (1 + t_0) times their
    separation, and phi_inv by the reciprocal factors. Returns the worst
    slack per bound and the count of violations beyond the tolerance.
    """
    t0 = fl.t0
    phi_lo, phi_hi = _pairwise_slacks(fl.phi.nodes, fl.phi.values[:, 0],
                                      1.0 - t0, 1.0 + t0)
    inv_lo, inv_hi = _pairwise_slacks(fl.phi_inv.nodes,
                                      fl.phi_inv.values[:, 0],
                                      1.0 / (1.0 + t0), 1.0 / (1.0 - t0))
    slacks = (phi_lo, phi_hi, inv_lo, inv_hi)
    violations = sum(1 for s in slacks if s < -tolerance)
    return DistortionReport(t0=t0, phi_lower=phi_lo, phi_upper=phi_hi,
                            inv_lower=inv_lo, inv_upper=inv_hi,
                            violations=violations, tolerance=tolerance)


class CompositeWindow:
    """The map s -> alpha(rho, s) = phi(phi_inv(rho) + s) on [-h, h]."""

    def __init__(self, flow, rho, h):
        base = flow.inv_at(float(rho))
        if abs(base) + h > flow.phi.half_width + 1e-12:
            raise ValueError("rho leaves the flow's valid range")
        self.flow = flow
        self.rho = float(rho)
        self.h = float(h)
        self.base = float(base)

    def __call__(self, s):
        return self.flow.phi.eval1(self.base + np.asarray(s, dtype=float))


def composite_window(fl, rho, h):
    """History-window composite alpha(rho, .) for segments of radius h."""
    return CompositeWindow(fl, rho, h)


def flow_difference_eta(X, Y, weight):
    """Weighted distance of the inverse flows against its a-priori bound.

    Returns (lhs, rhs) with lhs = ||phi_inv - psi_inv||_eta and
    rhs = ||X - Y||_eta / (eta (1 - t_0)^2), t_0 the larger of the two
    ball radii. Raises if the bound fails beyond rounding.
    """
    if not isinstance(weight, WeightParam):
        weight = WeightParam(float(weight))
    X.xhat._check_compatible(Y.xhat)
    eta = weight.eta
    t0 = max(X.t0, Y.t0)
    flX = solve_flow(X, X.xhat.half_width)
    flY = solve_flow(Y, Y.xhat.half_width)
    R = min(flX.phi_inv.half_width, flY.phi_inv.half_width)
    gx = flX.phi_inv.restrict(R)
    gy = flY.phi_inv.restrict(R)
    lhs = (gx - gy).norm_razumikhin(weight)
    rhs = (X.xhat - Y.xhat).norm_razumikhin(weight) / (eta * (1.0 - t0) ** 2)
    if lhs > rhs + 1e-12:
        raise RuntimeError(
            f"inverse-flow difference bound violated: {lhs:.3e} > {rhs:.3e}")
    return lhs, rhs


def composite_difference_eta(X, Y, h, weight, rho_count=41, s_count=21):
    """Weighted sup over rho of max_s |alpha(rho,s) - beta(rho,s)| and its bound.

    The bound is z ||X - Y||_eta with
    z = e^{t_1 h} (e^{eta (1 + t_0) h} - 1) / (eta (1 + t_0)),
    where t_0, t_1 come from the larger of the two balls. Returns
    (lhs, rhs, z).
    """
    if not isinstance(weight, WeightParam):
        weight = WeightParam(float(weight))
    X.xhat._check_compatible(Y.xhat)
    eta = weight.eta
    t0 = max(X.t0, Y.t0)
    t1 = max(X.ball.c[1], Y.ball.c[1])
    T = X.xhat.half_width
    h = float(h)
    # keep every composite evaluation inside the sampled field window,
    # where the declared ball radii genuinely hold
    R_t = T / (1.0 + t0)
    R_rho = (1.0 - t0) * (R_t - h) - X.xhat.delta
    if R_rho <= 0.0:
        raise ValueError("field window too small for this history radius")
    flX = solve_flow(X, R_t)
    flY = solve_flow(Y, R_t)
    rhos = np.linspace(-R_rho, R_rho, rho_count)
    ss = np.linspace(-h, h, s_count)
    lhs = 0.0
    for rho in rhos:
        a = composite_window(flX, rho, h)
        b = composite_window(flY, rho, h)
        gap = float(np.abs(a(ss) - b(ss)).max())
        lhs = max(lhs, gap * math.exp(-eta * abs(rho)))
    z = math.exp(t1 * h) * math.expm1(eta * (1.0 + t0) * h) / (eta * (1.0 + t0))
    rhs = z * (X.xhat - Y.xhat).norm_razumikhin(weight)
    return lhs, rhs, z


def _partitions(r):
    # multisets (m_1, ..., m_r) with sum j m_j = r
    def rec(remaining, j):
        if remaining == 0:
            yield {}
            return
        if j > remaining:
            return
        for m in range(remaining // j + 1):
            for rest in rec(remaining - j * m, j + 1):
                if m:
                    rest = dict(rest)
                    rest[j] = m
                yield rest
    yield from rec(r, 1)


def phi_derivative_bounds(ball):
    """Bounds on |D^{j+1} phi| for j = 0..l from the field's ball radii.

    Chain of the flow equation: |D phi| <= 1 + t_0, and each further
    derivative comes from differentiating xhat(phi) with the composite
    derivative formula, replacing |D^k xhat| by t_k and lower phi
    derivatives by the already computed bounds.
    """
    t = ball.c
    ell = ball.ell
    bounds = [1.0 + t[0]]
    for r in range(1, ell + 1):
        total = 0.0
        for part in _partitions(r):
            order = sum(part.values())
            coef = math.factorial(r)
            prod = 1.0
            for j, m in part.items():
                coef //= math.factorial(m) * math.factorial(j) ** m
                prod *= bounds[j - 1] ** m
            total += coef * t[order] * prod
        bounds.append(total)
    return bounds
