"""Perturbation functionals acting on history segments.

Each perturbation is a map (t, theta, eps) -> R^n where theta is a
history segment over [-h, h]. Builders cover forcing terms that only
read theta(0), state-dependent and nested delays, neutral terms that
read theta'(0), weighted multi-delay sums, and the induced functional
of a small state-dependent delay. Declared Lipschitz constants ride
along and can be cross-checked empirically with lipschitz_probe; the
probe is a sampling lower bound, not a certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .funcspace import GridFunction

__all__ = [
    "HistorySegment",
    "PerturbationSpec",
    "ProbeReport",
    "ode_term",
    "state_dependent_delay",
    "nested_delay",
    "neutral_delay",
    "small_delay_q",
    "multi_delay_advance",
    "apply_P",
    "lipschitz_probe",
    "segment_distance_c1",
    "functional_output_grid",
    "spec_from_descriptor",
    "mu_sensitivity",
]

_LOOKUP_SLACK = 1e-9


class HistorySegment:
    """A trajectory piece around a center time: s in [-h, h] -> theta(s).

    Lookups outside the radius raise; delays never get clamped. The
    derivative evaluator is optional so that purely retarded specs can
    consume segments built from plain callables.
    """

    __slots__ = ("t", "h", "_eval", "_deriv")

    def __init__(self, t, h, eval_fn, deriv_fn=None):
        if not (h > 0.0):
            raise ValueError("history radius must be positive")
        self.t = float(t)
        self.h = float(h)
        self._eval = eval_fn
        self._deriv = deriv_fn

    def _guard(self, s):
        s = float(s)
        if abs(s) > self.h + _LOOKUP_SLACK:
            raise ValueError(
                f"history lookup at {s:+.6g} outside radius {self.h:.6g}")
        return s

    def eval(self, s):
        return np.asarray(self._eval(self._guard(s)), dtype=float)

    __call__ = eval

    def deriv(self, s):
        if self._deriv is None:
            raise ValueError("segment does not expose a derivative")
        return np.asarray(self._deriv(self._guard(s)), dtype=float)

    @property
    def has_derivative(self):
        return self._deriv is not None

    @classmethod
    def from_grid(cls, traj, t, h):
        """Window the GridFunction ``traj`` at center t."""
        if abs(t) + h > traj.half_width + 1e-12:
            raise ValueError("trajectory window too small for this segment")
        d1 = traj.derivative(1)
        return cls(t, h, lambda s: traj.eval(t + s),
                   lambda s: d1.eval(t + s))

    @classmethod
    def from_callable(cls, fn, t, h, dfn=None):
        ev = (lambda s: fn(t + s))
        dv = None if dfn is None else (lambda s: dfn(t + s))
        return cls(t, h, ev, dv)


@dataclass(frozen=True)
class PerturbationSpec:
    """Immutable perturbation functional with declared metadata.

    ``evaluate(t, segment, eps) -> (n,)``. L1 and L2 are the declared
    time/state Lipschitz constants against |s - t| and the C^1 segment
    distance; ``ell`` is the regularity budget the builder vouches for.
    """

    h: float
    mu: object
    evaluate: object
    L1: float
    L2: float
    ell: int = 3
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    uses_derivative: bool = False

    def __post_init__(self):
        if not (self.h > 0.0):
            raise ValueError("history radius must be positive")
        if self.L1 < 0.0 or self.L2 < 0.0:
            raise ValueError("Lipschitz constants must be nonnegative")

    def __call__(self, t, segment, eps):
        return self.evaluate(t, segment, eps)

    def descriptor(self):
        return {"kind": self.kind, "parameters": dict(self.params),
                "h": self.h, "mu": self.mu, "L1": self.L1, "L2": self.L2}


# -- builders -------------------------------------------------------------

def ode_term(g, lip_t=0.0, lip_x=0.0, mu=None, ell=3, kind="ode",
             params=None):
    """Perturbation reading only the present state: p(t, theta) = g(t, theta(0)).

    A vanishing history radius is represented by a tiny positive one.
    """

    def evaluate(t, seg, eps):
        return np.asarray(g(t, seg.eval(0.0)), dtype=float)

    return PerturbationSpec(h=1e-9, mu=mu, evaluate=evaluate, L1=lip_t,
                            L2=lip_x, ell=ell, kind=kind,
                            params=dict(params or {}))


def state_dependent_delay(Q, r, h, r_bound=None, lip_q=1.0, lip_r=1.0,
                          traj_c1=1.0, mu=None, ell=3, kind="sdd",
                          params=None):
    """p(t, theta) = Q(t, theta(r(t, theta(0)))).

    ``r_bound`` is the declared sup of |r|; it must fit inside h.
    L1 and L2 follow the add-and-subtract chain bound with a C^1
    trajectory budget ``traj_c1``.
    """
    r_bound = h if r_bound is None else float(r_bound)
    if r_bound > h + 1e-12:
        raise ValueError("declared delay bound exceeds the history radius")

    def evaluate(t, seg, eps):
        shift = float(r(t, seg.eval(0.0)))
        return np.asarray(Q(t, seg.eval(shift)), dtype=float)

    L = lip_q * (1.0 + traj_c1 * lip_r)
    return PerturbationSpec(h=h, mu=mu, evaluate=evaluate, L1=L, L2=L,
                            ell=ell, kind=kind, params=dict(params or {}))


def nested_delay(Q, r, r1, h, r_bound=None, r1_bound=None, lip_q=1.0,
                 lip_r=1.0, lip_r1=1.0, traj_c1=1.0, mu=None, ell=3,
                 kind="nested", params=None):
    """p(t, theta) = Q(t, theta(r(t, theta(r1(theta(0)))))).

    The inner shift r1 produces a lookup whose value feeds the outer
    delay map, so both declared shift bounds must fit inside h.
    """
    r_bound = h if r_bound is None else float(r_bound)
    r1_bound = h if r1_bound is None else float(r1_bound)
    if max(r_bound, r1_bound) > h + 1e-12:
        raise ValueError("declared delay bound exceeds the history radius")

    def evaluate(t, seg, eps):
        inner_shift = float(r1(seg.eval(0.0)))
        inner = seg.eval(inner_shift)
        shift = float(r(t, inner))
        return np.asarray(Q(t, seg.eval(shift)), dtype=float)

    L1 = lip_q * (1.0 + traj_c1 * lip_r)
    L2 = lip_q * (1.0 + traj_c1 * lip_r * (1.0 + traj_c1 * lip_r1))
    return PerturbationSpec(h=h, mu=mu, evaluate=evaluate, L1=L1, L2=L2,
                            ell=ell, kind=kind, params=dict(params or {}))


def neutral_delay(Q, r, h, r_bound=None, lip_q=1.0, lip_r=1.0, traj_c1=1.0,
                  mu=None, ell=3, kind="neutral", params=None):
    """p(t, theta) = Q(t, theta(r(t, theta'(0)))).

    The delay consumes the segment derivative at zero, which equals the
    trajectory's time derivative, so this spec costs one derivative of
    regularity relative to the plain delay case.
    """
    r_bound = h if r_bound is None else float(r_bound)
    if r_bound > h + 1e-12:
        raise ValueError("declared delay bound exceeds the history radius")

    def evaluate(t, seg, eps):
        shift = float(r(t, seg.deriv(0.0)))
        return np.asarray(Q(t, seg.eval(shift)), dtype=float)

    L = lip_q * (1.0 + traj_c1 * lip_r)
    return PerturbationSpec(h=h, mu=mu, evaluate=evaluate, L1=L, L2=L,
                            ell=max(1, ell), kind=kind,
                            params=dict(params or {}), uses_derivative=True)


def small_delay_q(f_model, tau_fns, h, blocks=None, tau_bounds=None,
                  eps_max=1.0, quad_order=8, declared=None, mu=None, ell=2,
                  kind="small-delay", params=None):
    """The induced functional of small state-dependent delays.

    Encodes x'(t) = f(x(t - eps tau_1), ..., x(t - eps tau_L)) as the
    unperturbed field plus eps times

        evaluate(t, theta, eps) =
            - sum_i int_0^1 D_i f(y_sigma) theta'(-sigma eps tau_i) tau_i dsigma

    where the i-th argument group of f is the coordinate block
    blocks[i] read at the i-th delayed time, and D_i f are the matching
    Jacobian columns. With one delay and the full block this is the
    classical one-delay rewrite. The sigma integral uses fixed-order
    Gauss quadrature.
    """
    n = f_model.n
    L = len(tau_fns)
    if L == 0:
        raise ValueError("at least one delay functional is required")
    if blocks is None:
        if L != 1:
            raise ValueError("several delays need explicit coordinate blocks")
        blocks = [np.arange(n)]
    blocks = [np.asarray(b, dtype=int) for b in blocks]
    flat = np.concatenate(blocks)
    if len(flat) != n or set(flat.tolist()) != set(range(n)):
        raise ValueError("blocks must partition the coordinates")
    if tau_bounds is None:
        tau_bounds = [h / max(eps_max, 1e-300)] * L
    worst = max(float(b) for b in tau_bounds)
    if eps_max * worst > h + 1e-12:
        raise ValueError("eps times the delay bound exceeds the history radius")
    nodes, weights = np.polynomial.legendre.leggauss(int(quad_order))
    sig = 0.5 * (nodes + 1.0)
    wts = 0.5 * weights

    def evaluate(t, seg, eps):
        taus = [float(tau(t, seg)) for tau in tau_fns]
        for tv in taus:
            if abs(eps * tv) > h + _LOOKUP_SLACK:
                raise ValueError("eps times the delay leaves the history window")
        out = np.zeros(n)
        for s_val, w in zip(sig, wts):
            y = np.empty(n)
            looked = []
            for b, tv in zip(blocks, taus):
                th = seg.eval(-s_val * eps * tv)
                y[b] = th[b]
                looked.append(tv)
            J = np.asarray(f_model.df(y), dtype=float)
            for b, tv in zip(blocks, taus):
                dth = seg.deriv(-s_val * eps * tv)
                out -= w * tv * (J[:, b] @ dth[b])
        return out

    if declared is None:
        declared = (1.0, 1.0)
    L1, L2 = declared
    return PerturbationSpec(h=h, mu=mu, evaluate=evaluate, L1=L1, L2=L2,
                            ell=ell, kind=kind, params=dict(params or {}),
                            uses_derivative=True)


def multi_delay_advance(pairs, h=None, mu=None, ell=3, kind="multi-delay",
                        params=None):
    """Weighted sum of fixed shifts: sum_i w_i theta(s_i), mixed signs allowed."""
    pairs = [(float(s), float(w)) for s, w in pairs]
    worst = max((abs(s) for s, _ in pairs), default=0.0)
    if h is None:
        h = max(worst, 1e-9)
    if worst > h + 1e-12:
        raise ValueError("shift outside the history radius")

    def evaluate(t, seg, eps):
        if not pairs:
            probe = seg.eval(0.0)
            return np.zeros_like(probe)
        out = pairs[0][1] * seg.eval(pairs[0][0])
        for s, w in pairs[1:]:
            out = out + w * seg.eval(s)
        return out

    L2 = sum(abs(w) for _, w in pairs)
    return PerturbationSpec(h=h, mu=mu, evaluate=evaluate, L1=0.0, L2=L2,
                            ell=ell, kind=kind,
                            params=dict(params or {"pairs": pairs}))


# -- application and probing ----------------------------------------------

def apply_P(spec, u, eps, t, du=None):
    """Evaluate the functional on a trajectory at time t.

    ``u`` is a GridFunction, an already-built HistorySegment, or a
    callable (then ``du`` optionally supplies the derivative).
    """
    if isinstance(u, HistorySegment):
        seg = u
    elif isinstance(u, GridFunction):
        seg = HistorySegment.from_grid(u, t, spec.h)
    else:
        seg = HistorySegment.from_callable(u, t, spec.h, dfn=du)
    return spec.evaluate(t, seg, eps)


def segment_distance_c1(seg_a, seg_b, samples=33):
    """max over levels 0,1 of the sampled sup distance between segments."""
    h = min(seg_a.h, seg_b.h)
    ss = np.linspace(-h, h, samples)
    d0 = max(float(np.linalg.norm(seg_a.eval(s) - seg_b.eval(s)))
             for s in ss)
    if seg_a.has_derivative and seg_b.has_derivative:
        d1 = max(float(np.linalg.norm(seg_a.deriv(s) - seg_b.deriv(s)))
                 for s in ss)
    else:
        d1 = 0.0
    return max(d0, d1)


@dataclass(frozen=True)
class ProbeReport:
    """Empirical Lipschitz estimates and whether the declared pair dominates."""

    L1_hat: float
    L2_hat: float
    dominated: bool
    worst_excess: float


def lipschitz_probe(spec, sample_pairs, eps=0.0, tol=1e-9):
    """Empirical check of the declared (L1, L2) on sampled segment pairs.

    Each sample is ((t, segment), (s, segment)). Pure time shifts feed
    the L1 estimate, equal-time pairs feed L2, and every sample must
    satisfy the combined declared bound up to ``tol`` slack.
    """
    L1_hat = 0.0
    L2_hat = 0.0
    worst = -math.inf
    for (t, seg_a), (s, seg_b) in sample_pairs:
        pa = spec.evaluate(t, seg_a, eps)
        pb = spec.evaluate(s, seg_b, eps)
        lhs = float(np.linalg.norm(pb - pa))
        dt = abs(s - t)
        dist = segment_distance_c1(seg_a, seg_b)
        if dist <= 1e-12 and dt > 0.0:
            L1_hat = max(L1_hat, lhs / dt)
        if dt <= 1e-12 and dist > 0.0:
            L2_hat = max(L2_hat, lhs / dist)
        worst = max(worst, lhs - (spec.L1 * dt + spec.L2 * dist))
    return ProbeReport(L1_hat=L1_hat, L2_hat=L2_hat,
                       dominated=worst <= tol, worst_excess=worst)


def functional_output_grid(spec, traj, eps, half_width, delta):
    """Sample t -> P[u](t) on a grid, for regularity probing.

    The window must leave room for the history radius on both sides.
    """
    if half_width + spec.h > traj.half_width + 1e-12:
        raise ValueError("trajectory window too small for this probe")
    K = int(round(half_width / delta))
    ts = -half_width + delta * np.arange(2 * K + 1)
    vals = np.stack([apply_P(spec, traj, eps, t) for t in ts])
    return GridFunction(half_width, delta, vals, interp_order=5,
                        extension="constant-hold")


# -- descriptors -----------------------------------------------------------

def _id_q(t, x):
    return x


def spec_from_descriptor(desc):
    """Build a shipped perturbation from its JSON descriptor."""
    try:
        return _build_from_descriptor(desc)
    except KeyError as exc:
        raise ValueError(
            f"descriptor kind {desc.get('kind', '?')!r} is missing "
            f"parameter {exc.args[0]!r}") from exc


def _build_from_descriptor(desc):
    kind = desc["kind"]
    p = dict(desc.get("parameters", {}))
    mu = desc.get("mu")

    if kind == "zero":
        n = int(p.get("n", 3))
        return ode_term(lambda t, x: np.zeros(n), kind="zero", params=p,
                        mu=mu)

    if kind == "ode-sin-forcing":
        a = float(p["a"])
        omega = float(p["omega"])
        shift = float(p.get("shift", 0.0))
        axis = int(p.get("axis", 1))
        n = int(p.get("n", 3))

        def g(t, x):
            out = np.zeros(n)
            out[axis] = a * math.sin(omega * (t - shift))
            return out

        return ode_term(g, lip_t=abs(a * omega), lip_x=0.0, mu=mu,
                        kind=kind, params=p)

    if kind == "multi-delay":
        pairs = [(float(s), float(w)) for s, w in p["pairs"]]
        return multi_delay_advance(pairs, h=p.get("h"), mu=mu, kind=kind,
                                   params=p)

    if kind == "delayed-sin-forcing":
        # sine of the delayed first coordinate on one slot; on a saddle
        # orbit this reads a*sin(omega*(t - lag)) and admits a closed
        # form response, which makes it the standard oracle scenario
        a = float(p["a"])
        omega = float(p["omega"])
        lag = float(p.get("lag", 1.0))
        h = float(p.get("h", max(1.0, lag)))
        axis = int(p.get("axis", 1))
        n = int(p.get("n", 3))

        def Q(t, y):
            out = np.zeros(n)
            out[axis] = a * math.sin(omega * y[0])
            return out

        def r(t, y):
            return -lag

        return state_dependent_delay(
            Q, r, h, r_bound=lag, lip_q=abs(a * omega), lip_r=0.0,
            traj_c1=float(p.get("traj_c1", 2.0)), mu=mu, kind=kind, params=p)

    if kind == "sdd-tanh":
        h = float(p["h"])
        c0 = float(p["c0"])
        c1 = float(p["c1"])
        comp = int(p.get("component", 0))

        def r(t, x):
            return -(c0 + c1 * math.tanh(x[comp]))

        return state_dependent_delay(
            _id_q, r, h, r_bound=abs(c0) + abs(c1), lip_q=1.0, lip_r=abs(c1),
            traj_c1=float(p.get("traj_c1", 2.0)), mu=mu, kind=kind, params=p)

    if kind == "neutral-linear":
        h = float(p["h"])
        c0 = float(p["c0"])
        c1 = float(p["c1"])
        comp = int(p.get("component", 0))
        v_bound = float(p.get("deriv_bound", 2.0))

        def r(t, y):
            return -(c0 + c1 * y[comp])

        return neutral_delay(
            _id_q, r, h, r_bound=abs(c0) + abs(c1) * v_bound, lip_q=1.0,
            lip_r=abs(c1), traj_c1=v_bound, mu=mu, kind=kind, params=p)

    if kind == "nested-abs":
        h = float(p["h"])
        inner = float(p.get("inner_shift", -0.5))
        comp = int(p.get("component", 0))

        def r(t, x):
            return max(-h, -abs(x[comp]))

        def r1(x):
            return inner

        return nested_delay(_id_q, r, r1, h, r_bound=h, r1_bound=abs(inner),
                            lip_q=1.0, lip_r=1.0, lip_r1=0.0,
                            traj_c1=float(p.get("traj_c1", 2.0)), mu=mu,
                            kind=kind, params=p)

    if kind == "small-delay":
        from .hyperbolic import builtin_model
        model = builtin_model(p.get("model", "lin-saddle"),
                              p.get("model_params", {}))
        tau = float(p.get("tau", 1.0))
        h = float(p["h"])
        return small_delay_q(model, [lambda t, seg: tau], h,
                             tau_bounds=[abs(tau)],
                             eps_max=float(p.get("eps_max", h / max(abs(tau), 1e-12))),
                             mu=mu, kind=kind, params=p)

    raise ValueError(f"unknown perturbation kind {desc['kind']!r}")


def mu_sensitivity(desc, t, segment, eps, target, dmu=1e-4):
    """Central difference of the functional output in the parameter mu.

    ``target`` names the entry of ``parameters`` that mu feeds.
    """
    lo = {**desc, "parameters": {**desc.get("parameters", {})}}
    hi = {**desc, "parameters": {**desc.get("parameters", {})}}
    base = float(desc["parameters"][target])
    lo["parameters"][target] = base - dmu
    hi["parameters"][target] = base + dmu
    plo = spec_from_descriptor(lo).evaluate(t, segment, eps)
    phi = spec_from_descriptor(hi).evaluate(t, segment, eps)
    return (phi - plo) / (2.0 * dmu)
