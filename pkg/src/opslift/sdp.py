"""Small dense semidefinite / linear conic solver.

One real kernel serves the whole toolkit: a homogeneous self-dual embedding
with Nesterov-Todd scaling and Mehrotra predictor-corrector steps, on
problems of the form

    maximize    c . (x, z)
    subject to  A_cone x + A_free z = b,   x in a product of PSD and
                                           nonnegative-orthant blocks,
                                           z free.

Free variables are eliminated by QR before the interior-point iteration and
recovered afterwards; redundant or inconsistent equality rows are removed by
rank-revealing QR, the latter yielding an exact Farkas certificate.  All
Hermitian data is embedded as real symmetric blocks by the caller-facing
builder (see :class:`ProblemBuilder`), so the kernel never sees complex
numbers.

Statuses are Optimal / Feasible / Infeasible / Inconclusive.  Infeasible
verdicts always carry a dual improving ray that is re-verified by direct
arithmetic; solutions are re-checked against the original data outside the
iteration loop.  A numerically ambiguous run is reported as Inconclusive,
never coerced to a boolean verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import CapabilityError, ShapeMismatchError
from . import matrix_kernel as mk

SCHEMA_VERSION = 1

FEASTOL = 1e-9
GAPTOL = 1e-9
INFTOL = 1e-10
MAX_ITER = 200
STEP_FRAC = 0.99

_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# svec coordinates for real symmetric matrices
# ---------------------------------------------------------------------------

@lru_cache(maxsize=128)
def _svec_meta(n: int):
    iu = np.triu_indices(n)
    w = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    return iu, w


def svec(mat: np.ndarray) -> np.ndarray:
    """Isometric vectorization of a symmetric matrix (off-diagonals x sqrt2)."""
    n = mat.shape[0]
    iu, w = _svec_meta(n)
    return np.asarray(mat)[iu] * w


def smat(vec: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    iu, w = _svec_meta(n)
    out = np.zeros((n, n))
    vals = np.asarray(vec) / w
    out[iu] = vals
    out[(iu[1], iu[0])] = vals
    return out


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def _rows_to_mats(rows: np.ndarray, n: int) -> np.ndarray:
    """Stack of svec rows -> (m, n, n) symmetric matrices."""
    iu, w = _svec_meta(n)
    m = rows.shape[0]
    out = np.zeros((m, n, n))
    vals = rows / w
    out[:, iu[0], iu[1]] = vals
    out[:, iu[1], iu[0]] = vals
    return out


def _mats_to_rows(mats: np.ndarray) -> np.ndarray:
    n = mats.shape[-1]
    iu, w = _svec_meta(n)
    return mats[:, iu[0], iu[1]] * w


# ---------------------------------------------------------------------------
# Problem / solution containers
# ---------------------------------------------------------------------------

BlockSpec = tuple[str, int]  # ("psd", n) or ("nn", n)


def _cone_dim(blocks: Sequence[BlockSpec]) -> int:
    total = 0
    for kind, n in blocks:
        if kind == "psd":
            total += svec_dim(n)
        elif kind == "nn":
            total += n
        else:
            raise ValueError(f"unknown block kind {kind!r}")
    return total


def _block_slices(blocks: Sequence[BlockSpec]) -> list[slice]:
    out, pos = [], 0
    for kind, n in blocks:
        d = svec_dim(n) if kind == "psd" else n
        out.append(slice(pos, pos + d))
        pos += d
    return out


@dataclass
class SdpProblem:
    """Conic problem in equality form; the objective is maximized."""

    blocks: list[BlockSpec]
    a_cone: np.ndarray
    a_free: np.ndarray
    b: np.ndarray
    c_cone: np.ndarray
    c_free: np.ndarray
    obj_const: float = 0.0

    def __post_init__(self):
        self.a_cone = np.atleast_2d(np.asarray(self.a_cone, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        m = len(self.b)
        ncone = _cone_dim(self.blocks)
        if self.a_cone.size == 0:
            self.a_cone = np.zeros((m, ncone))
        if self.a_cone.shape != (m, ncone):
            raise ShapeMismatchError(
                f"A_cone has shape {self.a_cone.shape}, expected {(m, ncone)}")
        self.a_free = np.asarray(self.a_free, dtype=float).reshape(m, -1)
        self.c_cone = np.asarray(self.c_cone, dtype=float).ravel()
        if self.c_cone.size == 0:
            self.c_cone = np.zeros(ncone)
        if self.c_cone.shape != (ncone,):
            raise ShapeMismatchError("objective/cone dimension mismatch")
        self.c_free = np.asarray(self.c_free, dtype=float).ravel()
        if self.c_free.shape[0] != self.a_free.shape[1]:
            raise ShapeMismatchError("objective/free dimension mismatch")

    @property
    def n_free(self) -> int:
        return self.a_free.shape[1]

    @property
    def n_constraints(self) -> int:
        return len(self.b)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "blocks": [list(bs) for bs in self.blocks],
            "A_cone": self.a_cone.tolist(),
            "A_free": self.a_free.tolist(),
            "b": self.b.tolist(),
            "c_cone": self.c_cone.tolist(),
            "c_free": self.c_free.tolist(),
            "obj_const": self.obj_const,
        }

    @staticmethod
    def from_json(data: dict) -> "SdpProblem":
        return SdpProblem(
            blocks=[(str(k), int(n)) for k, n in data["blocks"]],
            a_cone=np.asarray(data["A_cone"], dtype=float),
            a_free=np.asarray(data["A_free"], dtype=float),
            b=np.asarray(data["b"], dtype=float),
            c_cone=np.asarray(data["c_cone"], dtype=float),
            c_free=np.asarray(data["c_free"], dtype=float),
            obj_const=float(data.get("obj_const", 0.0)),
        )

    def to_sdpa(self) -> str:
        """Dual-form text dump in the sparse SDPA interchange layout.

        The emitted problem is  min b.y  s.t.  sum_i y_i F_i - F_0 >= 0
        with F_0 built from the (maximized) objective and F_i from the
        constraint rows; nonnegative blocks appear as diagonal blocks with
        negative size per the format convention.  Free variables are not
        representable and are rejected.
        """
        if self.n_free:
            raise CapabilityError("SDPA dump requires a problem without free variables")
        lines = [f"{self.n_constraints} = mDIM", f"{len(self.blocks)} = nBLOCK"]
        lines.append(" ".join(str(n if kind == "psd" else -n)
                              for kind, n in self.blocks) + " = bLOCKsTRUCT")
        lines.append(" ".join(repr(v) for v in self.b))
        slices = _block_slices(self.blocks)

        def emit(mat_idx: int, row: np.ndarray):
            for bi, ((kind, n), sl) in enumerate(zip(self.blocks, slices)):
                seg = row[sl]
                if kind == "psd":
                    m = smat(seg, n)
                    for i in range(n):
                        for j in range(i, n):
                            if m[i, j] != 0.0:
                                lines.append(f"{mat_idx} {bi + 1} {i + 1} {j + 1} {m[i, j]!r}")
                else:
                    for i, v in enumerate(seg):
                        if v != 0.0:
                            lines.append(f"{mat_idx} {bi + 1} {i + 1} {i + 1} {v!r}")

        emit(0, self.c_cone)
        for k in range(self.n_constraints):
            emit(k + 1, self.a_cone[k])
        return "\n".join(lines) + "\n"


@dataclass
class SdpSolution:
    """Solver outcome.

    ``status`` is one of ``optimal``, ``feasible``, ``infeasible``,
    ``inconclusive``.  For conclusive primal solutions ``x_blocks`` holds one
    symmetric matrix (psd blocks) or vector (nn blocks) per block and ``y``
    the dual multipliers of the original constraints.  For ``infeasible`` the
    ``certificate`` carries a dual improving ray ``y`` with  -A^T y  in the
    dual cone and  b^T y = 1, re-verified by direct arithmetic; its quality
    is recorded in ``certificate['slack_min_eig']``.
    """

    status: str
    x_blocks: list[np.ndarray] | None = None
    x_free: np.ndarray | None = None
    y: np.ndarray | None = None
    objective: float = np.nan
    margin: float = np.nan
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    certificate: dict | None = None

    def to_json(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "status": self.status,
            "objective": None if np.isnan(self.objective) else self.objective,
            "margin": None if np.isnan(self.margin) else self.margin,
            "iterations": self.iterations,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
        }
        if self.x_blocks is not None:
            out["x_blocks"] = [np.asarray(xb).tolist() for xb in self.x_blocks]
        if self.x_free is not None:
            out["x_free"] = self.x_free.tolist()
        if self.y is not None:
            out["y"] = self.y.tolist()
        if self.certificate is not None:
            out["certificate"] = {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.certificate.items()
            }
        return out


# ---------------------------------------------------------------------------
# Interior-point kernel (min form, cone variables only)
# ---------------------------------------------------------------------------

class _Kernel:
    def __init__(self, blocks, a, b, c, feastol, gaptol):
        self.blocks = list(blocks)
        self.a = a
        self.b = b
        self.c = c
        self.m, self.n = a.shape
        self.slices = _block_slices(blocks)
        self.nu = sum(n for _, n in blocks)
        self.feastol = feastol
        self.gaptol = gaptol
        self.bnorm = 1.0 + np.linalg.norm(b)
        self.cnorm = 1.0 + np.linalg.norm(c)

    # -- block helpers ------------------------------------------------------

    def _e(self) -> np.ndarray:
        out = np.zeros(self.n)
        for (kind, n), sl in zip(self.blocks, self.slices):
            out[sl] = svec(np.eye(n)) if kind == "psd" else np.ones(n)
        return out

    def _unpack(self, v):
        out = []
        for (kind, n), sl in zip(self.blocks, self.slices):
            out.append(smat(v[sl], n) if kind == "psd" else np.array(v[sl]))
        return out

    def _min_eigs(self, v) -> float:
        worst = np.inf
        for (kind, n), sl in zip(self.blocks, self.slices):
            if kind == "psd":
                worst = min(worst, float(np.linalg.eigvalsh(smat(v[sl], n))[0]))
            elif n:
                worst = min(worst, float(np.min(v[sl])))
        return worst if worst != np.inf else 0.0

    def _nt_scaling(self, x, s):
        """Per-block NT scaling factors G with scaled point Lambda diagonal."""
        scal = []
        for (kind, n), sl in zip(self.blocks, self.slices):
            if kind == "psd":
                xm, sm = smat(x[sl], n), smat(s[sl], n)
                lx = np.linalg.cholesky(xm)
                ls = np.linalg.cholesky(sm)
                u_, sv, vt_ = np.linalg.svd(ls.T @ lx)
                if sv[-1] <= 0:
                    raise np.linalg.LinAlgError("NT scaling broke down")
                g = lx @ vt_.T / np.sqrt(sv)
                ginv = (np.sqrt(sv)[:, None] * vt_) @ np.linalg.inv(lx)
                scal.append(("psd", g, ginv, sv, lx, ls))
            else:
                xx, ss = x[sl], s[sl]
                if np.any(xx <= 0) or np.any(ss <= 0):
                    raise np.linalg.LinAlgError("nn iterate left the cone")
                w = np.sqrt(xx / ss)
                lam = np.sqrt(xx * ss)
                scal.append(("nn", w, lam))
        return scal

    def _gm_rows(self, scal, rows: np.ndarray) -> np.ndarray:
        """Apply the NT metric W . W (W = G G^T) to a batch of svec rows."""
        out = np.empty_like(rows)
        for sc, ((kind, n), sl) in zip(scal, zip(self.blocks, self.slices)):
            if kind == "psd":
                g = sc[1]
                mats = _rows_to_mats(rows[:, sl], n)
                inner = np.matmul(np.matmul(g.T[None], mats), g[None])
                outer = np.matmul(np.matmul(g[None], inner), g.T[None])
                out[:, sl] = _mats_to_rows(outer)
            else:
                w = sc[1]
                out[:, sl] = rows[:, sl] * (w * w)[None, :]
        return out

    def _gm_vec(self, scal, v: np.ndarray) -> np.ndarray:
        return self._gm_rows(scal, v[None, :])[0]

    def _lambda_solve(self, scal, rhs_mats):
        """Solve lambda o u = rhs per block in scaled coordinates."""
        out = []
        for sc, rhs in zip(scal, rhs_mats):
            if sc[0] == "psd":
                lam = sc[3]
                out.append(2.0 * rhs / (lam[:, None] + lam[None, :]))
            else:
                out.append(rhs / sc[2])
        return out

    def _scaled_to_flat(self, scal, mats, mode: str) -> np.ndarray:
        """Map scaled-space blocks back: mode 'contra' gives G^{-T} U G^{-1}."""
        out = np.zeros(self.n)
        for sc, m_, ((kind, n), sl) in zip(scal, mats, zip(self.blocks, self.slices)):
            if kind == "psd":
                ginv = sc[2]
                out[sl] = svec(ginv.T @ m_ @ ginv) if mode == "contra" else svec(sc[1] @ m_ @ sc[1].T)
            else:
                w = sc[1]
                out[sl] = m_ / w if mode == "contra" else m_ * w
        return out

    def _to_scaled(self, scal, v: np.ndarray, side: str):
        """Scaled coordinates of a flat vector: side 'x' gives G^{-1} V G^{-T},
        side 's' gives G^T V G."""
        out = []
        for sc, ((kind, n), sl) in zip(scal, zip(self.blocks, self.slices)):
            if kind == "psd":
                vm = smat(v[sl], n)
                g, ginv = sc[1], sc[2]
                out.append(ginv @ vm @ ginv.T if side == "x" else g.T @ vm @ g)
            else:
                w = sc[1]
                out.append(v[sl] / w if side == "x" else v[sl] * w)
        return out

    def _max_step(self, scal, v, dv, side: str) -> float:
        """Largest alpha with v + alpha dv staying in the cone (v interior)."""
        alpha = np.inf
        for sc, ((kind, n), sl) in zip(scal, zip(self.blocks, self.slices)):
            if kind == "psd":
                l_ = sc[4] if side == "x" else sc[5]
                dm = smat(dv[sl], n)
                z = scipy.linalg.solve_triangular(l_, dm, lower=True)
                z = scipy.linalg.solve_triangular(l_, z.T, lower=True)
                emin = float(np.linalg.eigvalsh((z + z.T) / 2)[0])
                if emin < 0:
                    alpha = min(alpha, -1.0 / emin)
            else:
                vv, dd = v[sl], dv[sl]
                neg = dd < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-vv[neg] / dd[neg])))
        return alpha

    # -- main loop ----------------------------------------------------------

    def solve(self):
        a, b, c = self.a, self.b, self.c
        x = self._e()
        s = self._e()
        y = np.zeros(self.m)
        tau, kappa = 1.0, 1.0
        best = None
        status = "inconclusive"
        info: dict = {}

        for it in range(MAX_ITER):
            r_p = a @ x - b * tau
            r_d = -(a.T @ y) + c * tau - s
            r_g = b @ y - c @ x - kappa
            mu = (x @ s + tau * kappa) / (self.nu + 1)

            # -- convergence tests on the de-homogenized candidate
            if tau > max(1e-12, 1e-6 * kappa):
                xh, yh, sh = x / tau, y / tau, s / tau
                pres = np.linalg.norm(a @ xh - b) / self.bnorm
                dres = np.linalg.norm(a.T @ yh + sh - c) / self.cnorm
                pobj, dobj = c @ xh, b @ yh
                gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
                if pres <= self.feastol and dres <= self.feastol and gap <= self.gaptol:
                    status = "optimal"
                    best = (xh, yh, sh)
                    info = {"pres": pres, "dres": dres, "gap": gap, "mu": mu / tau**2}
                    break
            # -- infeasibility certificates
            bty = b @ y
            ctx = c @ x
            if bty > 0:
                quality = np.linalg.norm(a.T @ y + s) / bty
                if quality <= INFTOL * self.cnorm:
                    status = "infeasible"
                    best = (x / bty, y / bty, s / bty)
                    info = {"cert_residual": quality}
                    break
            if ctx < 0:
                quality = np.linalg.norm(a @ x) / (-ctx)
                if quality <= INFTOL * self.bnorm:
                    status = "unbounded"
                    best = (x / (-ctx), y / (-ctx), s / (-ctx))
                    info = {"cert_residual": quality}
                    break
            if tau < 1e-13 and kappa < 1e-13:
                break

            try:
                scal = self._nt_scaling(x, s)
            except np.linalg.LinAlgError:
                break
            gm_a = self._gm_rows(scal, a)
            m_mat = gm_a @ a.T
            m_mat = (m_mat + m_mat.T) / 2
            cho = None
            ridge = 0.0
            base = max(np.trace(m_mat) / max(1, self.m), 1e-30)
            for attempt in range(4):
                try:
                    cho = scipy.linalg.cho_factor(
                        m_mat + ridge * np.eye(self.m), lower=True)
                    break
                except np.linalg.LinAlgError:
                    ridge = base * 10.0 ** (-14 + 4 * attempt)
            if cho is None:
                break

            gm_c = self._gm_vec(scal, c)
            dy_c = scipy.linalg.cho_solve(cho, b + a @ gm_c)
            dx_c = self._gm_vec(scal, a.T @ dy_c - c)
            denom_base = b @ dy_c - c @ dx_c + kappa / tau

            lam_mats = [np.diag(sc[3]) if sc[0] == "psd" else sc[2] for sc in scal]

            def newton(rhs4_mats, r5):
                u = self._lambda_solve(scal, rhs4_mats)
                ut = self._scaled_to_flat(scal, u, "contra")
                q = ut - r_d
                gm_q = self._gm_vec(scal, q)
                dy_r = scipy.linalg.cho_solve(cho, -r_p - a @ gm_q)
                dx_r = self._gm_vec(scal, a.T @ dy_r) + gm_q
                num = -r_g - b @ dy_r + c @ dx_r + r5 / tau
                den = denom_base
                if abs(den) < 1e-30:
                    raise np.linalg.LinAlgError("degenerate tau step")
                dtau = num / den
                dy = dy_r + dtau * dy_c
                dx = dx_r + dtau * dx_c
                ds = -(a.T @ dy) + c * dtau + r_d
                dkappa = (r5 - kappa * dtau) / tau
                return dx, dy, ds, dtau, dkappa

            try:
                # predictor
                rhs4_aff = []
                for sc, lm in zip(scal, lam_mats):
                    if sc[0] == "psd":
                        rhs4_aff.append(-lm @ lm)
                    else:
                        rhs4_aff.append(-lm * lm)
                d_aff = newton(rhs4_aff, -tau * kappa)
            except np.linalg.LinAlgError:
                break
            dx_a, dy_a, ds_a, dtau_a, dkap_a = d_aff
            alpha_a = min(
                self._max_step(scal, x, dx_a, "x"),
                self._max_step(scal, s, ds_a, "s"),
                (-tau / dtau_a) if dtau_a < 0 else np.inf,
                (-kappa / dkap_a) if dkap_a < 0 else np.inf,
                1.0,
            )
            mu_aff = ((x + alpha_a * dx_a) @ (s + alpha_a * ds_a)
                      + (tau + alpha_a * dtau_a) * (kappa + alpha_a * dkap_a)) / (self.nu + 1)
            sigma = min(1.0, max(0.0, (mu_aff / mu))) ** 3

            # corrector
            u_aff = self._to_scaled(scal, dx_a, "x")
            v_aff = self._to_scaled(scal, ds_a, "s")
            rhs4 = []
            for sc, lm, ua, va in zip(scal, lam_mats, u_aff, v_aff):
                if sc[0] == "psd":
                    n_b = lm.shape[0]
                    jordan = (ua @ va + va @ ua) / 2
                    rhs4.append(sigma * mu * np.eye(n_b) - lm @ lm - jordan)
                else:
                    rhs4.append(sigma * mu - lm * lm - ua * va)
            try:
                dx, dy, ds, dtau, dkappa = newton(rhs4, sigma * mu - tau * kappa - dtau_a * dkap_a)
            except np.linalg.LinAlgError:
                break
            alpha = STEP_FRAC * min(
                self._max_step(scal, x, dx, "x"),
                self._max_step(scal, s, ds, "s"),
                (-tau / dtau) if dtau < 0 else np.inf,
                (-kappa / dkappa) if dkappa < 0 else np.inf,
            )
            alpha = min(alpha, 1.0)
            if not np.isfinite(alpha) or alpha <= 1e-14:
                break
            x = x + alpha * dx
            y = y + alpha * dy
            s = s + alpha * ds
            tau += alpha * dtau
            kappa += alpha * dkappa
        else:
            it = MAX_ITER - 1

        return status, best, it + 1, info


# ---------------------------------------------------------------------------
# Presolve + public solve
# ---------------------------------------------------------------------------

def _qr_rank(r_diag: np.ndarray, nrows: int, ncols: int) -> int:
    if r_diag.size == 0:
        return 0
    thresh = max(nrows, ncols) * np.finfo(float).eps * abs(r_diag[0])
    thresh = max(thresh, 1e-13 * abs(r_diag[0]), 1e-300)
    return int(np.sum(np.abs(r_diag) > thresh))


def solve(problem: SdpProblem, feastol: float = FEASTOL, gaptol: float = GAPTOL) -> SdpSolution:
    """Solve a conic problem (objective maximized); deterministic.

    The returned solution is re-verified against the *original* data: an
    Optimal/Feasible status implies constraint residual <= 1e-8 and block
    min-eigenvalues >= -1e-8; an Infeasible status implies a re-verified
    Farkas ray.  Anything that fails re-verification is downgraded to
    Inconclusive.
    """
    blocks = list(problem.blocks)
    m = problem.n_constraints
    a_c = problem.a_cone.copy()
    a_f = problem.a_free.copy()
    b = problem.b.copy()
    # minimization form for the kernel
    c_c = -problem.c_cone.copy()
    c_f = -problem.c_free.copy()
    k = problem.n_free
    ncone = a_c.shape[1]

    if m + ncone + k > 40000:
        raise CapabilityError("problem exceeds the supported desk scale")

    # --- stage 1: eliminate free variables ---------------------------------
    w_dual = np.zeros(m)
    obj0 = 0.0
    free_recover = None
    if k > 0:
        q_full, r_full, piv = scipy.linalg.qr(a_f, pivoting=True)
        r_diag = np.diagonal(r_full)[: min(m, k)]
        r_f = _qr_rank(r_diag, m, k)
        q1, q2 = q_full[:, :r_f], q_full[:, r_f:]
        r1 = r_full[:r_f, :r_f]
        cfp = c_f[piv]
        if r_f < k:
            # free directions not touching the constraints: objective must
            # be flat along them, otherwise the problem is unbounded
            null_f = scipy.linalg.null_space(a_f)
            comp = null_f.T @ c_f
            if np.linalg.norm(comp, ord=np.inf) > 1e-10 * (1 + np.linalg.norm(c_f)):
                ray = null_f @ comp
                ray = -ray / np.linalg.norm(ray)
                return SdpSolution(status="inconclusive",
                                   residuals={"unbounded_free": 1.0},
                                   certificate={"improving_free_ray": ray})
        v_ = scipy.linalg.solve_triangular(r1.T, cfp[:r_f], lower=True) if r_f else np.zeros(0)
        w_dual = q1 @ v_
        obj0 = float(w_dual @ b)
        c_red = c_c - a_c.T @ w_dual
        a_red = q2.T @ a_c
        b_red = q2.T @ b
        free_recover = (q1, r1, piv, r_f)
    else:
        a_red, b_red, c_red = a_c, b, c_c
        q2 = np.eye(m)

    # --- stage 2: drop dependent rows, with consistency certificates -------
    m_red = a_red.shape[0]
    keep = np.arange(m_red)
    if m_red > 0:
        qr_q, qr_r, rpiv = scipy.linalg.qr(a_red.T, pivoting=True)
        r_diag = np.diagonal(qr_r)[: min(a_red.shape)]
        rank = _qr_rank(r_diag, a_red.shape[1], m_red)
        if rank < m_red:
            keep = np.sort(rpiv[:rank])
            drop = rpiv[rank:]
            r1r = qr_r[:rank, :rank]
            bscale = 1.0 + np.linalg.norm(b_red)
            for jpos, j in enumerate(drop):
                coef = scipy.linalg.solve_triangular(
                    r1r, qr_r[:rank, rank + jpos], lower=False) if rank else np.zeros(0)
                mismatch = b_red[j] - coef @ b_red[rpiv[:rank]]
                if abs(mismatch) > 1e-9 * bscale:
                    y_red = np.zeros(m_red)
                    y_red[j] = np.sign(mismatch)
                    y_red[rpiv[:rank]] = -np.sign(mismatch) * coef
                    y_orig = q2 @ y_red
                    pairing = float(b @ y_orig)
                    y_orig /= pairing
                    slack = -(a_c.T @ y_orig)
                    return SdpSolution(
                        status="infeasible",
                        y=y_orig,
                        margin=1.0,
                        residuals={"cert_residual": float(np.linalg.norm(a_f.T @ y_orig))
                                   if k else 0.0},
                        certificate={"ray": y_orig, "pairing": 1.0,
                                     "slack_min_eig": _min_eig_blocks(blocks, slack)},
                    )
            a_red = a_red[keep]
            b_red = b_red[keep]

    # --- stage 3: kernel ----------------------------------------------------
    if a_red.shape[0] == 0:
        # no constraints left: optimal iff the (min-form) objective is in the
        # dual cone, so that x = 0 is the minimizer
        me = _min_eig_blocks(blocks, c_red) if ncone else 0.0
        if me >= -1e-10 * (1 + np.linalg.norm(c_red)):
            xh = np.zeros(ncone)
            yh = np.zeros(0)
            status, it, info = "optimal", 0, {"pres": 0.0, "dres": 0.0, "gap": 0.0}
            best = (xh, yh, c_red.copy())
        else:
            return SdpSolution(status="inconclusive",
                               residuals={"unbounded_cone": float(me)})
    else:
        kern = _Kernel(blocks, a_red, b_red, c_red, feastol, gaptol)
        status, best, it, info = kern.solve()
        if best is None:
            return SdpSolution(status="inconclusive", iterations=it,
                               residuals={k_: float(v) for k_, v in info.items()})
        xh, yh, sh = best

    # --- stage 4: recover, re-check, report ---------------------------------
    def recover_y(y_red_vec: np.ndarray, homogeneous: bool) -> np.ndarray:
        y_full = np.zeros(m_red)
        y_full[keep] = y_red_vec
        y_o = q2 @ y_full if (k > 0 or q2.shape[0] == m) else y_full
        if not homogeneous:
            y_o = y_o + w_dual
        return y_o

    if status == "infeasible":
        y_orig = recover_y(yh, homogeneous=True)
        pairing = float(b @ y_orig)
        if pairing <= 0:
            return SdpSolution(status="inconclusive", iterations=it,
                               residuals={"bad_certificate": 1.0})
        y_orig = y_orig / pairing
        slack = -(a_c.T @ y_orig)
        sl_min = _min_eig_blocks(blocks, slack)
        free_res = float(np.linalg.norm(a_f.T @ y_orig)) if k else 0.0
        ok = sl_min >= -1e-8 and free_res <= 1e-8 * (1 + np.linalg.norm(y_orig))
        return SdpSolution(
            status="infeasible" if ok else "inconclusive",
            y=y_orig, iterations=it, margin=float(sl_min),
            residuals={"cert_slack_min_eig": sl_min, "cert_free_residual": free_res},
            certificate={"ray": y_orig, "pairing": 1.0, "slack_min_eig": sl_min},
        )
    if status == "unbounded":
        return SdpSolution(status="inconclusive", iterations=it,
                           residuals={"unbounded": 1.0},
                           certificate={"improving_cone_ray": xh})
    if status != "optimal":
        return SdpSolution(status="inconclusive", iterations=it,
                           residuals={k_: float(v) for k_, v in info.items()})

    # primal recovery
    if free_recover is not None:
        q1, r1, piv, r_f = free_recover
        rhs = q1.T @ (b - a_c @ xh)
        z_piv = np.zeros(k)
        if r_f:
            z_piv[:r_f] = scipy.linalg.solve_triangular(r1, rhs, lower=False)
        z = np.zeros(k)
        z[piv] = z_piv
    else:
        z = np.zeros(0)
    y_orig = recover_y(yh, homogeneous=False)

    pres = float(np.linalg.norm(a_c @ xh + (a_f @ z if k else 0) - b, ord=np.inf))
    xmin = _min_eig_blocks(blocks, xh) if ncone else 0.0
    scale_ok = 1e-8 * (1 + np.linalg.norm(b, ord=np.inf))
    obj_max = -(c_red @ xh + obj0)
    pure_feas = np.linalg.norm(problem.c_cone) == 0 and np.linalg.norm(problem.c_free) == 0
    verdict = "feasible" if pure_feas else "optimal"
    if pres > scale_ok or xmin < -1e-8 * (1 + abs(xmin)):
        verdict = "inconclusive"
    slices = _block_slices(blocks)
    x_blocks = [smat(xh[sl], n) if kind == "psd" else np.array(xh[sl])
                for (kind, n), sl in zip(blocks, slices)]
    return SdpSolution(
        status=verdict,
        x_blocks=x_blocks,
        x_free=z,
        y=-y_orig,  # dual multipliers for the maximized form
        objective=float(obj_max + problem.obj_const),
        margin=float(xmin),
        iterations=it,
        residuals={"primal_residual": pres, "block_min_eig": float(xmin),
                   **{k_: float(v) for k_, v in info.items()}},
    )


def _min_eig_blocks(blocks: Sequence[BlockSpec], v: np.ndarray) -> float:
    worst = np.inf
    for (kind, n), sl in zip(blocks, _block_slices(blocks)):
        if n == 0:
            continue
        if kind == "psd":
            worst = min(worst, float(np.linalg.eigvalsh(smat(v[sl], n))[0]))
        else:
            worst = min(worst, float(np.min(v[sl])))
    return worst if worst != np.inf else 0.0


def lp_solve(problem: SdpProblem, **kw) -> SdpSolution:
    """Degenerate solve path for problems with nonnegative blocks only."""
    if any(kind != "nn" for kind, _ in problem.blocks):
        raise CapabilityError("lp_solve accepts nonnegative blocks only")
    return solve(problem, **kw)


# ---------------------------------------------------------------------------
# Builder with Hermitian-block sugar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockHandle:
    index: int
    kind: str  # "psd" | "herm" | "nn"
    size: int
    shift: "FreeHandle | None" = None


@dataclass(frozen=True)
class FreeHandle:
    offset: int
    size: int


class ProblemBuilder:
    """Assembles conic problems from matrix-shaped data.

    Hermitian PSD variables are embedded as real symmetric blocks of twice
    the size via ``realify``; every functional against such a block is the
    realified Hermitian functional (halved), so the real problem is exactly
    the complex one and solutions project back losslessly.  Any block may be
    declared with a ``shift``: the listed free scalar times the identity is
    added to the represented variable, which is how max-min-eigenvalue
    objectives are posed.
    """

    def __init__(self):
        self._blocks: list[BlockHandle] = []
        self._kernel_blocks: list[BlockSpec] = []
        self._free = 0
        self._rows: list[tuple[dict, dict, float]] = []
        self._obj_cone: dict = {}
        self._obj_free: dict = {}
        self._obj_const = 0.0

    # -- declarations -------------------------------------------------------

    def add_psd(self, n: int, shift: FreeHandle | None = None) -> BlockHandle:
        h = BlockHandle(len(self._blocks), "psd", n, shift)
        self._blocks.append(h)
        self._kernel_blocks.append(("psd", n))
        return h

    def add_herm(self, s: int, shift: FreeHandle | None = None) -> BlockHandle:
        h = BlockHandle(len(self._blocks), "herm", s, shift)
        self._blocks.append(h)
        self._kernel_blocks.append(("psd", 2 * s))
        return h

    def add_nn(self, n: int, shift: FreeHandle | None = None) -> BlockHandle:
        h = BlockHandle(len(self._blocks), "nn", n, shift)
        self._blocks.append(h)
        self._kernel_blocks.append(("nn", n))
        return h

    def add_free(self, size: int = 1) -> FreeHandle:
        h = FreeHandle(self._free, size)
        self._free += size
        return h

    # -- rows ----------------------------------------------------------------

    def _coeff_segment(self, handle: BlockHandle, coeff) -> tuple[np.ndarray, float]:
        """Kernel-coordinate segment and the trace term for shifted blocks."""
        if handle.kind == "psd":
            mat = np.asarray(coeff, dtype=float)
            if mat.shape != (handle.size, handle.size):
                raise ShapeMismatchError("psd coefficient has the wrong shape")
            mat = (mat + mat.T) / 2
            return svec(mat), float(np.trace(mat))
        if handle.kind == "herm":
            hm = mk.as_herm(coeff)
            if hm.dim != handle.size:
                raise ShapeMismatchError("hermitian coefficient has the wrong shape")
            return svec(mk.realify(hm)) / 2.0, float(hm.trace())
        vec = np.asarray(coeff, dtype=float).ravel()
        if vec.shape != (handle.size,):
            raise ShapeMismatchError("nn coefficient has the wrong shape")
        return vec, float(np.sum(vec))

    def _accumulate(self, cone_terms, free_terms):
        cone_row: dict[int, np.ndarray] = {}
        free_row: dict[int, float] = {}
        for handle, coeff in cone_terms:
            seg, tr = self._coeff_segment(handle, coeff)
            if handle.index in cone_row:
                cone_row[handle.index] = cone_row[handle.index] + seg
            else:
                cone_row[handle.index] = seg
            if handle.shift is not None and tr != 0.0:
                off = handle.shift.offset
                free_row[off] = free_row.get(off, 0.0) + tr
        for fh, coeff in free_terms:
            coeff = np.asarray(coeff, dtype=float).ravel()
            if coeff.shape != (fh.size,):
                raise ShapeMismatchError("free coefficient has the wrong size")
            for i in range(fh.size):
                off = fh.offset + i
                free_row[off] = free_row.get(off, 0.0) + coeff[i]
        return cone_row, free_row

    def add_constraint(self, cone_terms=(), free_terms=(), rhs: float = 0.0):
        cone_row, free_row = self._accumulate(cone_terms, free_terms)
        self._rows.append((cone_row, free_row, float(rhs)))

    def maximize(self, cone_terms=(), free_terms=(), const: float = 0.0):
        self._obj_cone, self._obj_free = self._accumulate(cone_terms, free_terms)
        self._obj_const = float(const)

    def cap_free(self, fh: FreeHandle, cap: float):
        """Adds  fh + slack = cap  with a fresh nonnegative slack."""
        if fh.size != 1:
            raise ShapeMismatchError("cap_free expects a scalar free handle")
        u = self.add_nn(1)
        self.add_constraint(cone_terms=[(u, np.ones(1))],
                            free_terms=[(fh, np.ones(1))], rhs=cap)
        return u

    # -- build / solve -------------------------------------------------------

    def build(self) -> SdpProblem:
        slices = _block_slices(self._kernel_blocks)
        ncone = _cone_dim(self._kernel_blocks)
        m = len(self._rows)
        a_cone = np.zeros((m, ncone))
        a_free = np.zeros((m, self._free))
        b = np.zeros(m)
        for r, (cone_row, free_row, rhs) in enumerate(self._rows):
            for bi, seg in cone_row.items():
                a_cone[r, slices[bi]] = seg
            for off, vv in free_row.items():
                a_free[r, off] = vv
            b[r] = rhs
        c_cone = np.zeros(ncone)
        c_free = np.zeros(self._free)
        for bi, seg in self._obj_cone.items():
            c_cone[slices[bi]] = seg
        for off, vv in self._obj_free.items():
            c_free[off] = vv
        return SdpProblem(blocks=self._kernel_blocks, a_cone=a_cone, a_free=a_free,
                          b=b, c_cone=c_cone, c_free=c_free, obj_const=self._obj_const)

    def solve(self, **kw) -> "BuiltSolution":
        return BuiltSolution(self, solve(self.build(), **kw))


class BuiltSolution:
    """Solution wrapper that maps kernel blocks back to declared variables."""

    def __init__(self, builder: ProblemBuilder, sol: SdpSolution):
        self._builder = builder
        self.raw = sol

    @property
    def status(self) -> str:
        return self.raw.status

    @property
    def objective(self) -> float:
        return self.raw.objective

    @property
    def y(self):
        return self.raw.y

    @property
    def certificate(self):
        return self.raw.certificate

    def free(self, fh: FreeHandle) -> np.ndarray:
        if self.raw.x_free is None:
            raise ValueError(f"no primal point available (status {self.status})")
        return self.raw.x_free[fh.offset:fh.offset + fh.size]

    def value(self, handle: BlockHandle):
        """Represented variable value: Hermitian for herm blocks, including
        any declared identity shift."""
        if self.raw.x_blocks is None:
            raise ValueError(f"no primal point available (status {self.status})")
        raw = self.raw.x_blocks[handle.index]
        shift = float(self.free(handle.shift)[0]) if handle.shift is not None else 0.0
        if handle.kind == "herm":
            q = mk.herm_from_realified(raw)
            if shift:
                q = q + shift * mk.identity(handle.size)
            return q
        if handle.kind == "psd":
            return raw + shift * np.eye(handle.size)
        return raw + shift
