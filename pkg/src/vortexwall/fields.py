"""Closed-form initial objects: the point vortex and its mollification, the
Oseen profile and velocity, the wall slip trace, and the cutoff/weight family.

All cutoffs are quintic smoothsteps (C^2) between the prescribed plateau
sets.  The vortex sits at (0, 20); cutoff geometry is hard-wired to that
normalization.
"""

from dataclasses import dataclass
import warnings

import numpy as np
from scipy import integrate

VORTEX_POS = (0.0, 20.0)


def smoothstep(s, d=0):
    """Quintic smoothstep 6s^5-15s^4+10s^3 clamped to [0,1]; d = 0,1,2 picks
    the derivative order (derivatives vanish at both ends, so the composite
    cutoffs are C^2)."""
    s = np.clip(s, 0.0, 1.0)
    if d == 0:
        return s ** 3 * (6.0 * s ** 2 - 15.0 * s + 10.0)
    if d == 1:
        return 30.0 * s ** 2 * (s - 1.0) ** 2
    if d == 2:
        return 60.0 * s * (s - 1.0) * (2.0 * s - 1.0)
    raise ValueError("d must be 0, 1, or 2")


def rise(v, a, b, d=0):
    """0 for v <= a, 1 for v >= b, smoothstep between."""
    return smoothstep((np.asarray(v, float) - a) / (b - a), d) / (b - a) ** d


def fall(v, a, b, d=0):
    """1 for v <= a, 0 for v >= b, smoothstep between."""
    out = rise(v, a, b, d)
    return 1.0 - out if d == 0 else -out


def _r_vp(x, y):
    return np.hypot(np.asarray(x, float) - VORTEX_POS[0],
                    np.asarray(y, float) - VORTEX_POS[1])


def chi_vp(x, y):
    """1 within distance 5 of the vortex, 0 beyond 6."""
    return fall(_r_vp(x, y), 5.0, 6.0)


def _radial_grad(x, y, dchi_dr):
    r = _r_vp(x, y)
    with np.errstate(invalid="ignore"):
        cx = np.where(r > 0, (np.asarray(x, float) - VORTEX_POS[0]) / np.maximum(r, 1e-300), 0.0)
        cy = np.where(r > 0, (np.asarray(y, float) - VORTEX_POS[1]) / np.maximum(r, 1e-300), 0.0)
    return dchi_dr * cx, dchi_dr * cy


def chi_vp_grad(x, y):
    return _radial_grad(x, y, fall(_r_vp(x, y), 5.0, 6.0, d=1))


def chi_vp_lap(x, y):
    # radial Laplacian chi'' + chi'/r; the transition zone sits at r in (5,6)
    r = _r_vp(x, y)
    d1 = fall(r, 5.0, 6.0, d=1)
    d2 = fall(r, 5.0, 6.0, d=2)
    return d2 + np.where(r > 0, d1 / np.maximum(r, 1e-300), 0.0)


def chi_m(x, y):
    """1 when both distance-to-vortex >= 4 and y >= 3/8; 0 when distance <= 3
    or y <= 1/4."""
    return rise(_r_vp(x, y), 3.0, 4.0) * rise(np.asarray(y, float), 0.25, 0.375)


def chi_m_grad(x, y):
    r = _r_vp(x, y)
    a, b = rise(r, 3.0, 4.0), rise(np.asarray(y, float), 0.25, 0.375)
    gx, gy = _radial_grad(x, y, rise(r, 3.0, 4.0, d=1))
    return gx * b, gy * b + a * rise(np.asarray(y, float), 0.25, 0.375, d=1)


def chi_b(y, d=0):
    """1 for y <= 2, 0 for y >= 3 (wall collar)."""
    return fall(np.asarray(y, float), 2.0, 3.0, d)


def zeta1(y, d=0):
    """1 for y <= 3/8, 0 for y >= 1/2."""
    return fall(np.asarray(y, float), 0.375, 0.5, d)


def zeta2(x, y):
    """1 within distance 2 of the vortex, 0 beyond 3."""
    return fall(_r_vp(x, y), 2.0, 3.0)


def theta(x, y):
    """1 on {distance <= 4 or y <= 3/8}, 1/4 on {distance >= 5 and y >= 1/2},
    C^2 in between, with range [1/4, 1]."""
    away = rise(_r_vp(x, y), 4.0, 5.0) * rise(np.asarray(y, float), 0.375, 0.5)
    return 1.0 - 0.75 * away


@dataclass(frozen=True)
class CutoffFamily:
    chi_vp: callable
    chi_m: callable
    chi_b: callable
    zeta1: callable
    zeta2: callable
    theta: callable


CUTOFFS = CutoffFamily(chi_vp, chi_m, chi_b, zeta1, zeta2, theta)


@dataclass(frozen=True)
class PointVortexConfig:
    """Circulation alpha at the fixed location (0, 20), mollified at scale
    sqrt(delta)."""
    alpha: float = 1.0
    delta: float = 0.02

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta={self.delta} outside (0, 1]")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    @property
    def x0(self):
        return VORTEX_POS


@dataclass(frozen=True)
class WeightParams:
    """Parameters of the weighted norms.

    eps0 controls both the analytic x-frequency weight e^{eps0(1+mu-y)|xi|}
    and the Gaussian-in-y weight e^{eps0(1+mu)y^2/t}; the latter must stay
    integrable against e^{-y^2/4t} tails, hence eps0(1+mu0) < 1/4 is enforced.
    gamma shrinks the analyticity band mu < mu0 - gamma*t.
    """
    eps0: float = 0.05
    eps1: float = 0.05
    gamma: float = 200.0
    mu0: float = 0.1
    beta: float = 0.75
    m: float = 3.0

    def __post_init__(self):
        errs = []
        if self.mu0 != 0.1:
            errs.append(f"mu0={self.mu0} must be exactly 1/10")
        if not (0.5 < self.beta < 1.0):
            errs.append(f"beta={self.beta} outside (1/2, 1)")
        if self.m <= 2.0:
            errs.append(f"m={self.m} must exceed 2")
        if not (self.eps0 > 0 and self.eps1 > 0 and self.gamma > 0):
            errs.append("eps0, eps1, gamma must be positive")
        elif self.eps0 * (1.0 + self.mu0) >= 0.25:
            errs.append(f"eps0(1+mu0)={self.eps0 * (1 + self.mu0):.4f} must be < 1/4")
        if errs:
            raise ValueError("invalid weight parameters: " + "; ".join(errs))
        if 5.0 * self.eps0 >= (7.0 / 8.0) ** 2 / 4.0:
            warnings.warn("5*eps0 >= (7/8)^2/4: the e^{5 eps0/t} band norm "
                          "outruns the heat tail as t->0; treat it as a "
                          "log-scale trend only", RuntimeWarning)
        if 20.0 * self.eps0 * (0.75) ** 2 > 0.25 ** 2:
            warnings.warn("eps0 > 1/180: e^Psi can outgrow e^{-y^2/4t} on the "
                          "middle-region transition as t->0; weighted norms "
                          "are evaluated in log space", RuntimeWarning)


def oseen_profile(eta):
    """Gaussian vortex profile G(eta) = e^{-|eta|^2/4}/(4 pi); eta has the
    two components along its last axis."""
    eta = np.asarray(eta, float)
    r2 = np.sum(eta ** 2, axis=-1)
    return np.exp(-r2 / 4.0) / (4.0 * np.pi)


def oseen_velocity(eta):
    """Whole-plane velocity of G: (1/2 pi) eta^perp/|eta|^2 (1-e^{-|eta|^2/4}),
    extended by 0 at the origin."""
    eta = np.asarray(eta, float)
    r2 = np.sum(eta ** 2, axis=-1)
    fac = np.where(r2 > 1e-12, -np.expm1(-r2 / 4.0) / np.where(r2 > 1e-12, r2, 1.0), 0.25)
    out = np.empty_like(eta)
    out[..., 0] = -eta[..., 1] * fac / (2.0 * np.pi)
    out[..., 1] = eta[..., 0] * fac / (2.0 * np.pi)
    return out


def mollified_vorticity_xy(cfg, x, y):
    """Pointwise mollified vorticity (alpha/delta) G((X-X0)/sqrt(delta)) cut
    off sharply at distance 6; resolution is the caller's responsibility."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    r2 = (x - VORTEX_POS[0]) ** 2 + (y - VORTEX_POS[1]) ** 2
    vals = (cfg.alpha / (4.0 * np.pi * cfg.delta)) * np.exp(-r2 / (4.0 * cfg.delta))
    return np.where(r2 <= 36.0, vals, 0.0)


def mollified_vorticity(cfg, grid):
    """Mollified point vortex sampled on the grid.

    Rejects grids whose spacing near the vortex exceeds sqrt(delta)/6: the
    Gaussian core must carry at least six points per width in each direction,
    otherwise the samples alias.
    """
    need = np.sqrt(cfg.delta) / 6.0
    i = np.searchsorted(grid.y_nodes, VORTEX_POS[1])
    hy = np.max(np.diff(grid.y_nodes[max(i - 2, 0):i + 3]))
    errs = []
    if grid.dx > need:
        errs.append(f"dx={grid.dx:.4f} > sqrt(delta)/6={need:.4f}")
    if hy > need:
        errs.append(f"y-spacing {hy:.4f} near y=20 > sqrt(delta)/6={need:.4f}")
    if errs:
        raise ValueError("grid does not resolve the mollified core: "
                         + "; ".join(errs))
    X, Y = np.meshgrid(grid.x, grid.y_nodes, indexing="ij")
    from .grid import PhysicalField
    return PhysicalField(grid, mollified_vorticity_xy(cfg, X, Y))


def mollified_vorticity_modes(cfg, grid):
    """Exact x-Fourier coefficients of the periodized mollified vortex.

    Poisson summation of the Gaussian gives coefficients
    (alpha/Lx) e^{-delta xi^2} e^{-(y-20)^2/(4 delta)}/sqrt(4 pi delta)
    exactly; dropping the sharp radius-6 truncation perturbs them by at most
    alpha e^{-9/delta}/Lx per unit y, hence the delta <= 0.5 guard.  This
    route needs no x-resolution of the core, unlike sampling + fft.
    """
    if cfg.delta > 0.5:
        raise ValueError("analytic mode construction requires delta <= 0.5 "
                         "(truncation term e^{-9/delta} not negligible)")
    from .grid import ModeField
    y = grid.y_nodes
    gauss_y = np.exp(-(y - VORTEX_POS[1]) ** 2 / (4.0 * cfg.delta)) / np.sqrt(4.0 * np.pi * cfg.delta)
    decay_x = np.exp(-cfg.delta * grid.xi ** 2)
    return ModeField(grid, (cfg.alpha / grid.Lx) * decay_x[:, None] * gauss_y[None, :])


def boundary_trace_u0(x, cfg=None, quadrature=False):
    """Slip velocity u0(x) that the vortex induces along the wall.

    Default is the point-vortex closed form (alpha/pi) 20/(x^2+400).  With
    quadrature=True the delta > 0 double integral of the wall Poisson kernel
    against the mollified vorticity is evaluated by Gauss-Hermite instead.
    """
    alpha = 1.0 if cfg is None else cfg.alpha
    x = np.asarray(x, float)
    if not quadrature:
        return (alpha / np.pi) * 20.0 / (x ** 2 + 400.0)
    if cfg is None:
        raise ValueError("quadrature branch needs a PointVortexConfig")
    # u(x,0) = (1/pi) int y2 /((x-y1)^2 + y2^2) * omega0(y1,y2) dY; substitute
    # Y = X0 + 2 sqrt(delta) s so the Gaussian becomes the e^{-|s|^2} weight
    nodes, wts = np.polynomial.hermite.hermgauss(60)
    s1, s2 = np.meshgrid(nodes, nodes, indexing="ij")
    w2 = np.outer(wts, wts)
    y1 = 2.0 * np.sqrt(cfg.delta) * s1
    y2 = 20.0 + 2.0 * np.sqrt(cfg.delta) * s2
    inside = (y1 ** 2 + (y2 - 20.0) ** 2 <= 36.0) & (y2 > 0)
    out = np.empty_like(x, float)
    it = np.nditer(x, flags=["multi_index"])
    for xv in it:
        ker = y2 / ((float(xv) - y1) ** 2 + y2 ** 2)
        out[it.multi_index] = np.sum(np.where(inside, ker * w2, 0.0))
    return out * alpha / np.pi ** 2


def boundary_trace_u0_periodized(x, Lx, alpha=1.0):
    """Closed form of sum_n u0(x + n Lx): the periodic wall trace that a
    periodic-in-x solver actually sees."""
    x = np.asarray(x, float)
    a = 40.0 * np.pi / Lx
    return (alpha / Lx) * np.sinh(a) / (np.cosh(a) - np.cos(2.0 * np.pi * x / Lx))


def weight_psi_Psi(t, x, y, params):
    """The middle-region weights: psi = y^2(1+|x|) and
    Psi = (20 eps0/t)(1 - gamma t - theta)_+^2."""
    if t <= 0:
        raise ValueError("weights need t > 0")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    psi = y ** 2 * (1.0 + np.abs(x))
    pos = np.maximum(1.0 - params.gamma * t - theta(x, y), 0.0)
    Psi = (20.0 * params.eps0 / t) * pos ** 2
    return psi, Psi
