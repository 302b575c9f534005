"""Half-plane grid, x-Fourier transforms, and per-mode elliptic solves.

The domain is periodic in x with period Lx and truncated in y to [0, Ly].
Fields are real on the (x, y) tensor grid; their mode representation stores
Fourier coefficients per y-row with the angular-wavenumber convention

    f_xi(y) = (1/Lx) sum_x f(x, y) e^{-i xi x} dx,   xi_k = 2 pi k / Lx,

so that d_x has symbol i*xi and |D_x| has symbol |xi|, and wall kernels of the
form e^{-|xi| y} apply verbatim.  Coefficients are fft(values)/Nx in numpy's
default frequency ordering.

The y-grid is a strictly increasing node set with y_0 = 0, y_{Ny-1} = Ly,
geometrically clustered at the wall (adjacent spacing ratio <= 1.05) and
optionally refined in a band around a given height through a smooth node
density.  Derivatives in y use three-point stencils exact on quadratics, so
they stay second order on smoothly graded nodes.
"""

from dataclasses import dataclass, field
import json
import warnings

import numpy as np
from scipy.linalg import solve_banded

MAX_SPACING_RATIO = 1.05


def _geometric_nodes(Ly, Ny, ratio):
    if ratio == 1.0:
        return np.linspace(0.0, Ly, Ny)
    k = np.arange(Ny)
    return Ly * (ratio ** k - 1.0) / (ratio ** (Ny - 1) - 1.0)


def _limit_ratios(h, rmax):
    """Clip spacing growth to rmax per step (log-space min propagation), then
    rescale; uniform rescaling preserves the ratios."""
    logh = np.log(h)
    lr = np.log(rmax)
    for i in range(1, len(logh)):
        logh[i] = min(logh[i], logh[i - 1] + lr)
    for i in range(len(logh) - 2, -1, -1):
        logh[i] = min(logh[i], logh[i + 1] + lr)
    return np.exp(logh)


def _cone_limit(h, yf, c):
    """Largest field below h with |dh/dy| <= c (erosion by a cone)."""
    fwd = c * yf + np.minimum.accumulate(h - c * yf)
    bwd = -c * yf + np.minimum.accumulate((h + c * yf)[::-1])[::-1]
    return np.minimum(fwd, bwd)


def _density_nodes(Ly, Ny, ratio, band):
    """Nodes from a smooth sizing field: a geometric wall term plus a Gaussian
    refinement band, gradient-limited so adjacent spacings stay within
    MAX_SPACING_RATIO.

    The band weight counts nodes: roughly `weight` nodes go to the band, so
    the spacing at the band center comes out near width*sqrt(2 pi)/weight;
    the rest follow the wall-clustered geometric law.
    """
    center, width, weight = band
    if not (0 < weight <= Ny - 16):
        raise ValueError(f"band weight {weight} not in (0, Ny-16]")
    yf = np.linspace(0.0, Ly, 20 * Ny)
    n_bg = Ny - weight
    if ratio > 1.0:
        A = Ly / (ratio ** (n_bg - 1) - 1.0)
        dens = 1.0 / ((ratio - 1.0) * (A + yf))
    else:
        dens = np.full_like(yf, (n_bg - 1.0) / Ly)
    dens = dens + (weight / (width * np.sqrt(2 * np.pi))) * np.exp(
        -0.5 * ((yf - center) / width) ** 2)
    h_des = 1.0 / dens
    # realized spacing is s*h_lim; the per-step ratio bound translates to the
    # slope bound |d(s h)/dy| <= r-1, so the cone slope is (r-1)/s.  The scale
    # s making the node count come out to Ny-1 is found by fixed point.
    s = 1.0
    hl = h_des
    for _ in range(40):
        hl = _cone_limit(h_des, yf, 0.98 * (MAX_SPACING_RATIO - 1.0) / s)
        s_new = np.trapezoid(1.0 / hl, yf) / (Ny - 1)
        if abs(s_new - s) < 1e-10 * s:
            s = s_new
            break
        s = s_new
    inv = 1.0 / (s * hl)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(yf) * (inv[1:] + inv[:-1]))])
    y = np.interp(np.linspace(0.0, cdf[-1], Ny), cdf, yf)
    # discrete safety pass; a no-op when the cone limit already suffices
    h = _limit_ratios(np.diff(y), MAX_SPACING_RATIO)
    y = np.concatenate([[0.0], np.cumsum(h * (Ly / np.sum(h)))])
    y[-1] = Ly
    return y


@dataclass(frozen=True)
class HalfPlaneGrid:
    Lx: float
    Nx: int
    Ly: float
    Ny: int
    y_nodes: np.ndarray
    grading_ratio: float = 1.0
    band: tuple = None

    def __post_init__(self):
        errs = []
        if self.Lx < 80.0:
            errs.append(f"Lx={self.Lx} must be >= 80 (slip-trace tail control)")
        if self.Nx < 8 or self.Nx % 2 != 0:
            errs.append(f"Nx={self.Nx} must be even and >= 8")
        if self.Ly < 40.0:
            errs.append(f"Ly={self.Ly} must be >= 40 (vortex at height 20 inside)")
        y = np.asarray(self.y_nodes, float)
        if y.shape != (self.Ny,):
            errs.append(f"y_nodes shape {y.shape} != (Ny={self.Ny},)")
        else:
            if y[0] != 0.0 or abs(y[-1] - self.Ly) > 1e-12 * self.Ly:
                errs.append("y_nodes must start at 0 and end at Ly")
            h = np.diff(y)
            if np.any(h <= 0):
                errs.append("y_nodes must be strictly increasing")
            else:
                r = np.max(np.maximum(h[1:] / h[:-1], h[:-1] / h[1:]))
                if r > MAX_SPACING_RATIO + 1e-9:
                    errs.append(f"adjacent y-spacing ratio {r:.4f} exceeds {MAX_SPACING_RATIO}")
        if errs:
            raise ValueError("invalid grid: " + "; ".join(errs))
        object.__setattr__(self, "y_nodes", y)

    @property
    def x(self):
        return (np.arange(self.Nx) - self.Nx // 2) * (self.Lx / self.Nx)

    @property
    def xi(self):
        """Angular wavenumbers in fft ordering, matching mode array rows."""
        return 2.0 * np.pi * np.fft.fftfreq(self.Nx, d=self.Lx / self.Nx)

    @property
    def dx(self):
        return self.Lx / self.Nx

    @property
    def wy(self):
        """Trapezoid weights on y_nodes."""
        h = np.diff(self.y_nodes)
        w = np.zeros(self.Ny)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return w

    def to_json(self):
        d = {"Lx": self.Lx, "Nx": self.Nx, "Ly": self.Ly, "Ny": self.Ny,
             "grading_ratio": self.grading_ratio}
        if self.band is not None:
            d["band"] = list(self.band)
        return json.dumps(d)

    @classmethod
    def from_json(cls, s):
        d = json.loads(s)
        band = tuple(d["band"]) if "band" in d else None
        return make_grid(d["Lx"], d["Nx"], d["Ly"], d["Ny"],
                         grading_ratio=d["grading_ratio"], band=band)


def make_grid(Lx=160.0, Nx=256, Ly=60.0, Ny=256, grading_ratio=1.02, band=None):
    """Build a half-plane grid.

    Parameters
    ----------
    grading_ratio : float
        Adjacent y-spacing ratio of the wall clustering, in (1, 1.05].
    band : tuple or None
        Optional (center, width, weight) Gaussian refinement of the y-node
        density, used by vortex-resolving runs to add nodes near y=center.
    """
    if not (1.0 <= grading_ratio <= MAX_SPACING_RATIO):
        raise ValueError(f"grading_ratio={grading_ratio} outside [1, {MAX_SPACING_RATIO}]")
    if band is None:
        y = _geometric_nodes(Ly, Ny, grading_ratio)
    else:
        y = _density_nodes(Ly, Ny, grading_ratio, band)
    return HalfPlaneGrid(Lx, Nx, Ly, Ny, y, grading_ratio, band)


def refine_grid(grid, factor=2):
    """Refined grid sharing the same smooth node map (for convergence studies).

    Keeps the wall-clustering map fixed by taking the per-step ratio to the
    1/factor power, so spacing differences shrink like h^2 and three-point
    stencils keep second order across the family.
    """
    Ny2 = factor * (grid.Ny - 1) + 1
    ratio2 = grid.grading_ratio ** (1.0 / factor)
    return make_grid(grid.Lx, factor * grid.Nx, grid.Ly, Ny2, ratio2, grid.band)


@dataclass
class PhysicalField:
    """Real scalar samples on the (x, y) grid, shape (Nx, Ny)."""
    grid: HalfPlaneGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.shape != (self.grid.Nx, self.grid.Ny):
            raise ValueError(f"values shape {v.shape} != (Nx, Ny)")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite samples in PhysicalField")
        self.values = v


@dataclass
class ModeField:
    """Fourier coefficients per y-row, shape (Nx, Ny) complex, fft ordering."""
    grid: HalfPlaneGrid
    modes: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.modes, complex)
        if m.shape != (self.grid.Nx, self.grid.Ny):
            raise ValueError(f"modes shape {m.shape} != (Nx, Ny)")
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite coefficients in ModeField")
        self.modes = m


def _origin_phase(grid):
    # samples start at x = -Lx/2; this phase re-references coefficients to
    # the centered origin so that e^{-y0 |xi|} style traces hold verbatim
    return np.exp(1j * grid.xi * grid.Lx / 2.0)


def to_modes(f):
    """Forward x-transform of a PhysicalField; coefficients are fft/Nx up to
    the phase that accounts for the first sample sitting at x = -Lx/2."""
    ph = _origin_phase(f.grid)
    return ModeField(f.grid, ph[:, None] * np.fft.fft(f.values, axis=0) / f.grid.Nx)


def to_physical(m, tol=1e-10):
    """Inverse x-transform.  The imaginary residual must be below tol."""
    ph = _origin_phase(m.grid)
    vals = np.fft.ifft(m.modes / ph[:, None] * m.grid.Nx, axis=0)
    imax = np.max(np.abs(vals.imag))
    scale = max(np.max(np.abs(vals.real)), 1.0)
    if imax > tol * scale:
        raise ValueError(f"mode array not conjugate-symmetric: imag residual {imax:.2e}")
    return PhysicalField(m.grid, vals.real)


def apply_dx(f):
    """x-derivative; diagonal i*xi on modes, works on either representation.

    The Nyquist row is dropped: it has no conjugate partner, so i*xi there
    would break the real-field symmetry.
    """
    def dx_modes(m, grid):
        out = m * (1j * grid.xi)[:, None]
        out[grid.Nx // 2] = 0.0
        return out

    if isinstance(f, ModeField):
        return ModeField(f.grid, dx_modes(f.modes, f.grid))
    m = to_modes(f)
    return to_physical(ModeField(f.grid, dx_modes(m.modes, f.grid)))


def _dy_weights(y):
    """Three-point first-derivative weights exact on quadratics.

    Returns (wl, wc, wr) arrays of length Ny; end rows use one-sided stencils
    folded into the same triple (left weight applies to node i-1 etc., with
    the convention that row 0 uses nodes 0,1,2 and row -1 uses -3,-2,-1).
    """
    n = len(y)
    wl = np.zeros(n)
    wc = np.zeros(n)
    wr = np.zeros(n)
    hm = y[1:-1] - y[:-2]
    hp = y[2:] - y[1:-1]
    wl[1:-1] = -hp / (hm * (hm + hp))
    wc[1:-1] = (hp - hm) / (hm * hp)
    wr[1:-1] = hm / (hp * (hm + hp))
    h0, h1 = y[1] - y[0], y[2] - y[1]
    wl[0] = -(2 * h0 + h1) / (h0 * (h0 + h1))
    wc[0] = (h0 + h1) / (h0 * h1)
    wr[0] = -h0 / (h1 * (h0 + h1))
    hn, hm1 = y[-1] - y[-2], y[-2] - y[-3]
    wl[-1] = hn / (hm1 * (hm1 + hn))
    wc[-1] = -(hm1 + hn) / (hm1 * hn)
    wr[-1] = (2 * hn + hm1) / (hn * (hm1 + hn))
    return wl, wc, wr


def _apply_dy_array(vals, y):
    wl, wc, wr = _dy_weights(y)
    out = np.empty_like(vals)
    out[..., 1:-1] = (wl[1:-1] * vals[..., :-2] + wc[1:-1] * vals[..., 1:-1]
                      + wr[1:-1] * vals[..., 2:])
    out[..., 0] = wl[0] * vals[..., 0] + wc[0] * vals[..., 1] + wr[0] * vals[..., 2]
    out[..., -1] = wl[-1] * vals[..., -3] + wc[-1] * vals[..., -2] + wr[-1] * vals[..., -1]
    return out


def _dyy_weights(y):
    """Three-point second-derivative weights (interior rows only)."""
    hm = y[1:-1] - y[:-2]
    hp = y[2:] - y[1:-1]
    al = 2.0 / (hm * (hm + hp))
    ac = -2.0 / (hm * hp)
    ar = 2.0 / (hp * (hm + hp))
    return al, ac, ar


def _apply_dyy_array(vals, y):
    al, ac, ar = _dyy_weights(y)
    out = np.empty_like(vals)
    out[..., 1:-1] = al * vals[..., :-2] + ac * vals[..., 1:-1] + ar * vals[..., 2:]
    # one-sided second differences at the ends (first-order; end rows are
    # Dirichlet rows everywhere these values are consumed)
    out[..., 0] = out[..., 1]
    out[..., -1] = out[..., -2]
    return out


def apply_dy(f):
    """y-derivative on the nonuniform node set (second order)."""
    if isinstance(f, ModeField):
        return ModeField(f.grid, _apply_dy_array(f.modes, f.grid.y_nodes))
    return PhysicalField(f.grid, _apply_dy_array(f.values, f.grid.y_nodes))


def apply_dyy(f):
    """Second y-derivative (second order on smoothly graded nodes)."""
    if isinstance(f, ModeField):
        return ModeField(f.grid, _apply_dyy_array(f.modes, f.grid.y_nodes))
    return PhysicalField(f.grid, _apply_dyy_array(f.values, f.grid.y_nodes))


def _poisson_banded(y, xi_k):
    """Banded matrix (l=2, u=1) for (d_yy - xi^2) with wall Dirichlet row and
    top closure d_y phi + |xi| phi = 0 (Neumann when xi=0)."""
    n = len(y)
    al, ac, ar = _dyy_weights(y)
    ab = np.zeros((4, n))
    # row 0: phi(0) = 0
    ab[1, 0] = 1.0
    # interior rows
    ab[0, 2:] = ar                      # superdiagonal
    ab[1, 1:-1] = ac - xi_k ** 2        # diagonal
    ab[2, :-2] = al                     # subdiagonal
    # top row: one-sided derivative + |xi_k| at the last node
    wl, wc, wr = _dy_weights(y)
    ab[3, n - 3] = wl[-1]
    ab[2, n - 2] = wc[-1]
    ab[1, n - 1] = wr[-1] + abs(xi_k)
    return ab


def dirichlet_laplacian_inverse(rhs, return_trace=True):
    """Solve (d_yy - xi^2) phi_xi = rhs_xi per mode with phi_xi(0) = 0.

    The top boundary uses the transparent closure d_y phi = -|xi| phi that an
    exponentially decaying half-line solution satisfies (plain Neumann for the
    xi=0 mode, which matches the decaying Green's function -min(y, z) and
    keeps the wall flux identity exact on the truncated domain).

    Returns (phi, trace) where trace[k] approximates d_y phi_xi(0) by the
    one-sided second-order stencil, or phi alone if return_trace is False.
    """
    grid = rhs.grid
    y = grid.y_nodes
    phi = np.empty_like(rhs.modes)
    for k in range(grid.Nx):
        ab = _poisson_banded(y, grid.xi[k])
        b = rhs.modes[k].copy()
        b[0] = 0.0
        b[-1] = 0.0
        phi[k] = solve_banded((2, 1), ab, b)
    out = ModeField(grid, phi)
    if not return_trace:
        return out
    wl, wc, wr = _dy_weights(y)
    trace = wl[0] * phi[:, 0] + wc[0] * phi[:, 1] + wr[0] * phi[:, 2]
    return out, trace


def wall_flux_trace(rhs, ymax=None):
    """d_y phi_xi(0) via the quadrature identity -int_0^Ly e^{-|xi| z} rhs dz.

    Exact counterpart of dirichlet_laplacian_inverse's trace under the same
    top closure (integrate the defining equation against e^{-|xi| z}; the
    boundary terms at Ly cancel by the Robin/Neumann row).  Cheap enough to
    call every step; the banded solve doubles as its independent check.
    """
    grid = rhs.grid
    y = grid.y_nodes
    w = grid.wy
    if ymax is not None:
        w = np.where(y <= ymax, w, 0.0)
    ker = np.exp(-np.abs(grid.xi)[:, None] * y[None, :])
    return -np.sum(ker * rhs.modes * w[None, :], axis=1)
