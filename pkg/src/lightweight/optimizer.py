"""Stress-constrained mass minimization over the reduced design ``alpha``.

Each iteration factorizes the stiffness once, finds the critical instant for
the current density, differentiates the p-norm stress of that instant (and
of a few recently critical ones) with one adjoint solve each, and takes one
trust-region SQP step.

Stresses scale linearly with the force budget ``P``, so the analysis runs at
unit budget against the limit ``sigma_y / P``; reported stresses are scaled
back by ``P``.  This makes the trajectory depend on ``sigma_y / P`` only.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize as sopt
from scipy.spatial import cKDTree

from .criticality import CriticalityAnalyzer
from .fem import FemSystem, MaterialModel, element_dofs, recover_stress, von_mises_gradient
from .mesh import RegionSpec, TetMesh
from .reduction import LogisticMap, MaterialBasis, binarize, compute_material_basis, density_from_alpha, \
    density_jacobian

logger = logging.getLogger(__name__)


def mass_and_gradient(basis: MaterialBasis, logistic: LogisticMap, alpha, volumes):
    """Mass ``M = rho . V`` and ``dM/dalpha``."""
    rho = density_from_alpha(basis, logistic, alpha)
    volumes = np.asarray(volumes, dtype=float)
    return float(rho @ volumes), density_jacobian(basis, logistic, alpha).T @ volumes


def pnorm(values, p=15.0) -> float:
    """``(sum v^p)^(1/p)`` evaluated without overflow."""
    v = np.asarray(values, dtype=float)
    top = float(v.max()) if v.size else 0.0
    if top <= 0:
        return 0.0
    return top * float(np.sum((v / top) ** p)) ** (1.0 / p)


@dataclass
class StressGradient:
    H: float                  # p-norm of von Mises over the element subset
    max_vm: float             # plain maximum over the same subset
    grad_alpha: np.ndarray    # dH/dalpha
    grad_rho: np.ndarray      # dH/drho


def adjoint_stress_gradient(system: FemSystem, basis: MaterialBasis, logistic: LogisticMap, alpha, u,
                            elements, p=15.0) -> StressGradient:
    """Gradient of the p-norm von Mises stress over ``elements`` for the load
    that produced displacement ``u``.

    Uses one adjoint back-substitution on the existing factorization.
    """
    mesh, data = system.mesh, system.data
    elements = np.asarray(elements, dtype=np.int64)
    stress = recover_stress(system, u)
    vm = stress.von_mises[elements]
    H = pnorm(vm, p)
    grad_rho = np.zeros(mesh.n_elements)
    if H <= 0:
        warnings.warn("zero von Mises stress on the aggregation set; gradient is zero", stacklevel=2)
        return StressGradient(0.0, 0.0, np.zeros(basis.k), grad_rho)

    w = (vm / H) ** (p - 1)                                       # dH/dvm
    dvm = von_mises_gradient(stress.sigma[elements], vm)          # dvm/dsigma, (ne, 6)
    C = data.C_solid
    B = data.B[elements]                                          # (ne, 6, 12)
    s = system.stress_scale[elements]
    ds = system.material.stress_scale_derivative(system.density[elements])
    dofs = element_dofs(mesh)[elements]
    ue = u[dofs]

    # adjoint load: sum_e B_e^T (s_e C)^T dvm_e w_e
    a = (w[:, None] * dvm) @ C                                    # C symmetric
    rhs_e = s[:, None] * np.einsum("eij,ei->ej", B, a)
    rhs = np.bincount(dofs.ravel(), weights=rhs_e.ravel(), minlength=3 * mesh.n_nodes)
    xi = system.solve(rhs)

    # explicit part (aggregation set only): dH/dsigma . s'(rho) C B u
    grad_rho[elements] = ds * np.einsum("ei,ei->e", a, np.einsum("eij,ej->ei", B, ue))
    # implicit part (every element): -xi_e^T s'(rho) K_solid u_e
    all_dofs = element_dofs(mesh)
    dsa = system.material.stiffness_scale_derivative(system.density)
    grad_rho -= dsa * np.einsum("ei,eij,ej->e", xi[all_dofs], data.K_solid, u[all_dofs])
    grad_alpha = density_jacobian(basis, logistic, alpha).T @ grad_rho
    return StressGradient(H, float(vm.max()), grad_alpha, grad_rho)


@dataclass(frozen=True)
class OptimizerConfig:
    force_budget: float = 1.0
    max_iters: int = 300
    tol_mass: float = 1e-4       # relative mass change counted as stalled
    patience: int = 3            # consecutive small changes needed to stop
    trust_radius: float = 0.5
    trust_max: float = 1.0
    trust_min: float = 1e-6
    feas_tol: float = 0.01       # accepted overshoot of sigma_y
    pnorm: float = 15.0
    cache_size: int = 3          # recent distinct critical instants kept as constraints
    verify_tol: float = 0.05     # final brute-force check allows sigma_y * (1 + verify_tol)
    threshold: float = 0.5
    sharpen: int = 4             # penalty raises allowed when the binary design fails verification
    penalty_step: float = 1.0    # added to the SIMP exponent per raise

    def __post_init__(self):
        if self.force_budget < 0:
            raise ValueError("force_budget must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not 0 < self.trust_min <= self.trust_radius <= self.trust_max:
            raise ValueError("need 0 < trust_min <= trust_radius <= trust_max")
        if self.pnorm < 1:
            raise ValueError("pnorm must be >= 1")
        if self.sharpen < 0:
            raise ValueError("sharpen must be non-negative")
        if not self.penalty_step > 0:
            raise ValueError("penalty_step must be positive")


@dataclass
class StepResult:
    step: np.ndarray
    status: str          # "ok", "restoration" or "zero"
    predicted: float     # model change of the objective


def constrained_step(grad_f, c, A, radius) -> StepResult:
    """One trust-region SQP step.

    Minimizes ``g.d + h/2 |d|^2`` subject to ``c + A d <= 0`` and
    ``|d| <= radius`` with the damped identity Hessian ``h = |g| / radius``.
    If the linearized constraints cannot be met inside the ball, the step
    instead minimizes the largest linearized violation.
    """
    g = np.asarray(grad_f, dtype=float)
    n = len(g)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    A = np.asarray(A, dtype=float).reshape(len(c), n)
    gn = float(np.linalg.norm(g))
    if gn == 0 and (c <= 0).all():
        return StepResult(np.zeros(n), "zero", 0.0)
    h = max(gn / radius, 1e-12)
    ball = {"type": "ineq", "fun": lambda d: radius**2 - d @ d, "jac": lambda d: -2 * d}
    cons = [ball]
    if len(c):
        cons.append({"type": "ineq", "fun": lambda d: -(c + A @ d), "jac": lambda d: -A})
    res = sopt.minimize(lambda d: g @ d + 0.5 * h * d @ d, np.zeros(n), jac=lambda d: g + h * d,
                        constraints=cons, method="SLSQP", options=dict(maxiter=200, ftol=1e-12))
    d = res.x
    scale = max(1.0, float(np.abs(c).max()) if len(c) else 1.0)
    ok = res.success and d @ d <= radius**2 * (1 + 1e-6) and (not len(c) or (c + A @ d).max() <= 1e-7 * scale)
    if ok:
        return StepResult(d, "ok", float(g @ d))
    # restoration: min t s.t. c + A d <= t, |d| <= radius
    x0 = np.zeros(n + 1)
    x0[-1] = float(c.max())
    cons = [{"type": "ineq", "fun": lambda x: radius**2 - x[:-1] @ x[:-1],
             "jac": lambda x: np.append(-2 * x[:-1], 0.0)},
            {"type": "ineq", "fun": lambda x: x[-1] - (c + A @ x[:-1]),
             "jac": lambda x: np.hstack([-A, np.ones((len(c), 1))])}]
    e = np.zeros(n + 1)
    e[-1] = 1.0
    res = sopt.minimize(lambda x: x[-1], x0, jac=lambda x: e, constraints=cons, method="SLSQP",
                        options=dict(maxiter=200, ftol=1e-14))
    d = res.x[:-1]
    nd = float(np.linalg.norm(d))
    if nd > radius:
        d *= radius / nd
    return StepResult(d, "restoration", float(g @ d))


@dataclass
class OptimizationState:
    iteration: int
    alpha: np.ndarray
    density: np.ndarray
    mass: float
    sigma_cr: float              # max von Mises over the weak regions, critical instant
    node: int
    H: float
    n_wr: int
    constraint: float            # sigma_cr / sigma_y - 1
    grad_mass: np.ndarray | None = None
    grad_H: np.ndarray | None = None
    n_fea: int = 0               # analysis solves
    n_fea_gradient: int = 0      # extra solves for gradients
    accepted: bool = True
    trust_radius: float = 0.0
    step: str = ""

    def summary(self) -> dict:
        return dict(iteration=self.iteration, mass=self.mass, sigma_cr=self.sigma_cr, node=self.node,
                    H=self.H, n_wr=self.n_wr, constraint=self.constraint, n_fea=self.n_fea,
                    n_fea_gradient=self.n_fea_gradient, accepted=self.accepted,
                    trust_radius=self.trust_radius, step=self.step)


@dataclass
class OptimizationResult:
    history: list
    alpha: np.ndarray
    density: np.ndarray
    binary_density: np.ndarray
    status: str                  # "converged", "max_iters", "stalled", "infeasible_start", "skipped"
    verdict: str                 # "PASS", "FAIL", "INFEASIBLE" or "SKIPPED"
    verification: object = None  # brute-force CriticalInstantResult on the binary design
    sigma_verified: float = float("nan")
    mass_initial: float = 0.0
    mass_final: float = 0.0
    mass_binary: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return sum(1 for s in self.history if s.accepted) - 1 if self.history else 0


def violating_peaks(orc, library, bound, max_count=4) -> list[int]:
    """Contact nodes of an oracle sweep whose stress exceeds ``bound`` and is
    the largest within two patch radii; worst first."""
    nodes, vals = orc.all_nodes, orc.max_all
    over = np.flatnonzero(vals > bound)
    if len(over) == 0:
        return []
    x = library.mesh.nodes[nodes]
    tree = cKDTree(x)
    peaks = [k for k in over if vals[k] >= vals[tree.query_ball_point(x[k], 2 * library.patch_radius)].max()]
    peaks.sort(key=lambda k: -vals[k])
    return [int(nodes[k]) for k in peaks[:max_count]]


def optimize(mesh: TetMesh, regions: RegionSpec, material: MaterialModel = MaterialModel(),
             basis: MaterialBasis | None = None, logistic: LogisticMap = LogisticMap(),
             config: OptimizerConfig = OptimizerConfig(), analyzer: CriticalityAnalyzer | None = None,
             k: int = 15, callback=None, verify=True) -> OptimizationResult:
    """Minimize interior mass subject to ``sigma_cr <= sigma_y`` for every
    contact location, starting from the fully solid design ``alpha = 0``.

    Every evaluation runs the critical instant analysis and re-checks the
    most recent distinct critical instants (``config.cache_size`` in total),
    so an instant found critical at a rejected trial point is not forgotten.
    Instants that the brute-force check of a converged design finds critical
    are pinned and checked at every later evaluation.
    ``sigma_cr`` of a state is the largest weak-region stress over those
    instants. Trial points are measured over their own weak regions joined
    with the current point's, so a change of the selected set alone cannot
    make the accept test flip.

    ``analyzer`` may be passed to reuse its setup; it must run at unit budget.
    ``callback(state)`` is called after every evaluation.
    """
    if basis is None:
        basis = compute_material_basis(mesh, regions.shell_elements, k)
    if analyzer is None:
        analyzer = CriticalityAnalyzer(mesh, regions, material, budget=1.0)
    elif analyzer.budget != 1.0:
        raise ValueError("the analyzer must run at unit budget")
    P = config.force_budget
    limit = material.yield_strength / P if P > 0 else math.inf   # unit-budget stress limit
    constrained = math.isfinite(limit)
    V = mesh.tet_volumes
    zscale = math.sqrt(float(V.sum()))      # alpha = zscale * z keeps G's argument O(z)
    penalized = material        # SIMP exponent raised when thresholding loses load-bearing gray material
    history: list[OptimizationState] = []
    accepted: list[OptimizationState] = []
    cache: list[int] = []
    pinned: list[int] = []      # oracle-critical instants the search missed

    def evaluate(alpha, iteration, ctx_wr=None):
        rho = density_from_alpha(basis, logistic, alpha)
        M, dM = mass_and_gradient(basis, logistic, alpha, V)
        if not constrained:
            # no stress limit: the analysis cannot influence the step
            return OptimizationState(iteration, alpha, rho, M, 0.0, -1, 0.0, 0, -1.0, dM), None
        system = analyzer.factorize(rho, penalized)
        an = analyzer.analyze(system=system)
        # weak regions are a discrete selection; measuring a trial point over the current point's
        # set as well keeps the accept test from seeing a jump caused only by a set change
        wr = an.wrs.elements if ctx_wr is None else np.union1d(an.wrs.elements, ctx_wr)
        cache[:] = [an.result.node] + [i for i in cache if i != an.result.node][: config.cache_size - 1]
        before = system.n_solves
        monitored = cache + [i for i in pinned if i not in cache]
        fields = {i: an.result.u if i == an.result.node else system.solve(analyzer.library.rhs(i, 1.0))
                  for i in monitored}
        peak = {i: float(recover_stress(system, u).von_mises[wr].max()) for i, u in fields.items()}
        node = max(monitored, key=lambda i: peak[i])
        st = OptimizationState(iteration, alpha, rho, M, peak[node] * P, node, 0.0, len(wr),
                               peak[node] / limit - 1.0, dM, n_fea=an.n_fea + system.n_solves - before)
        return st, (system, an, fields, wr)

    def gradients(st, ctx):
        """Scaled constraint values and gradients (in z) for the checked instants."""
        system, an, fields, wr = ctx
        before = system.n_solves
        cs, As = [], []
        for i, u in fields.items():
            sg = adjoint_stress_gradient(system, basis, logistic, st.alpha, u, wr, config.pnorm)
            if sg.H <= 0:
                continue
            # H <= limit * H_k / max_k: the p-norm limit rescaled by the current ratio
            cs.append(sg.max_vm / limit - 1.0)
            As.append(sg.grad_alpha * (sg.max_vm / sg.H) / limit * zscale)
            if i == st.node:
                st.H = sg.H * P
                st.grad_H = sg.grad_alpha * P
        st.n_fea_gradient = system.n_solves - before
        return np.array(cs), np.array(As).reshape(len(cs), basis.k)

    def record(st):
        history.append(st)
        if callback:
            callback(st)

    def verify_binary(st):
        binary = binarize(st.density, config.threshold, regions.shell_elements)
        orc = analyzer.oracle(density=binary) if verify and P > 0 else None
        sigma = orc.sigma_cr * P if orc is not None else 0.0
        return binary, orc, sigma

    def finish(status, verdict=None, checked=None):
        cur = accepted[-1]
        binary, orc, sigma = checked or (binarize(cur.density, config.threshold, regions.shell_elements), None, 0.0)
        out = OptimizationResult(history, cur.alpha, cur.density, binary, status, verdict or "",
                                 mass_initial=accepted[0].mass, mass_final=cur.mass, mass_binary=float(binary @ V))
        out.extras["simp_exponent"] = penalized.simp_exponent
        out.extras["pinned_nodes"] = list(pinned)
        if verdict is None:
            if checked is None:
                binary, orc, sigma = verify_binary(cur)
            out.verification, out.sigma_verified = orc, sigma
            ok = not constrained or cur.constraint <= config.feas_tol
            ok = ok and sigma <= (1 + config.verify_tol) * material.yield_strength
            out.verdict = "PASS" if ok else "FAIL"
        return out

    cur, ctx = evaluate(np.zeros(basis.k), 0)
    M0 = cur.mass
    cur.trust_radius = config.trust_radius
    record(cur)
    accepted.append(cur)
    logger.info("start: mass %.6g sigma_cr %.6g (yield %.6g)", M0, cur.sigma_cr, material.yield_strength)
    if constrained and cur.sigma_cr > material.yield_strength:
        logger.error("solid start is infeasible: sigma_cr %.6g > sigma_y %.6g at node %d",
                     cur.sigma_cr, material.yield_strength, cur.node)
        return finish("infeasible_start", "INFEASIBLE")
    if config.max_iters == 0:
        return finish("skipped", "SKIPPED")

    radius = config.trust_radius
    small = 0
    grads = None
    status = "max_iters"
    sharpened = 0
    restarts = 0
    it = 0
    while it < config.max_iters:
        it += 1
        if grads is None:
            grads = gradients(cur, ctx) if constrained else (np.zeros(0), np.zeros((0, basis.k)))
        c, A = grads
        step = constrained_step(cur.grad_mass * zscale / M0, c, A, radius)
        converged = not np.any(step.step)
        if not converged:
            new, new_ctx = evaluate(cur.alpha + zscale * step.step, it, ctx[3] if constrained else None)
            new.step = step.status
            new.trust_radius = radius
            # a trial point may not end up clearly infeasible and no better than the current one
            new.accepted = not (constrained and new.constraint > config.feas_tol and new.constraint >= cur.constraint)
            record(new)
            if not new.accepted:
                radius *= 0.5
                logger.debug("iter %d rejected (sigma_cr %.4g); radius %.3g", it, new.sigma_cr, radius)
                if radius < config.trust_min:
                    status = "stalled"
                    break
                if constrained:
                    # check the current point against the trial's critical instant and weak regions
                    system, an, fields, wr = ctx
                    wr = np.union1d(wr, new_ctx[3])
                    if new.node not in fields:
                        fields[new.node] = system.solve(analyzer.library.rhs(new.node, 1.0))
                    for i, u in fields.items():
                        vm = float(recover_stress(system, u).von_mises[wr].max())
                        if vm * P > cur.sigma_cr:
                            cur.sigma_cr, cur.node, cur.constraint = vm * P, i, vm / limit - 1.0
                    cur.n_wr = len(wr)
                    ctx, grads = (system, an, fields, wr), None
                continue
            change = abs(new.mass - cur.mass) / max(cur.mass, 1e-300)
            feasible = not constrained or new.constraint <= config.feas_tol
            small = small + 1 if (change < config.tol_mass and feasible) else 0
            if step.status == "ok":
                radius = min(2 * radius, config.trust_max)
            cur, ctx, grads = new, new_ctx, None
            accepted.append(cur)
            logger.info("iter %d mass %.6g sigma_cr %.6g node %d radius %.3g %s", it, cur.mass, cur.sigma_cr,
                        cur.node, radius, step.status)
            converged = small >= config.patience
        if not converged:
            continue
        status = "converged"
        if not (constrained and verify and P > 0) or restarts >= 2 * config.sharpen:
            break
        checked = verify_binary(cur)
        bound = (1 + config.verify_tol) * material.yield_strength
        if checked[2] <= bound:
            return finish(status, checked=checked)
        restarts += 1
        missed = [i for i in violating_peaks(checked[1], analyzer.library, bound / P)
                  if i not in cache and i not in pinned]
        label = "pin" if missed else "sharpen"
        if label == "pin":
            # the search never looked at the instants that break the design: monitor them from now on
            pinned.extend(missed)
            logger.info("binary design fails verification (sigma %.6g); pinned unmonitored nodes %s",
                        checked[2], missed)
        elif sharpened < config.sharpen:
            # thresholding removed load-bearing gray material: penalize it harder and re-converge
            sharpened += 1
            # only the stiffness is penalized; the stress keeps the starting exponent (qp relaxation)
            penalized = replace(penalized, simp_exponent=penalized.simp_exponent + config.penalty_step,
                                stress_exponent=material.stress_beta)
            logger.info("binary design fails verification (sigma %.6g); SIMP exponent -> %g", checked[2],
                        penalized.simp_exponent)
        else:
            return finish(status, checked=checked)
        cur, ctx = evaluate(cur.alpha, it)
        cur.step, cur.trust_radius = label, radius
        record(cur)
        accepted.append(cur)
        radius, small, grads, status = config.trust_radius, 0, None, "max_iters"
    return finish(status)


@dataclass
class GradientCheck:
    alpha: np.ndarray
    node: int
    adjoint_H: np.ndarray
    fd_H: np.ndarray
    fd_H_half: np.ndarray        # central differences with half the step
    adjoint_M: np.ndarray
    fd_M: np.ndarray

    @staticmethod
    def _rel(a, b):
        floor = 1e-8 * max(np.abs(b).max(), 1e-300)
        return np.abs(a - b) / np.maximum(np.abs(b), floor)

    @property
    def rel_error_H(self):
        return self._rel(self.adjoint_H, self.fd_H_half)

    @property
    def rel_error_M(self):
        return self._rel(self.adjoint_M, self.fd_M)

    @property
    def fd_stable(self) -> bool:
        """Halving the step leaves the differences unchanged to well below the H tolerance."""
        scale = max(np.abs(self.fd_H_half).max(), 1e-300)
        return bool(np.abs(self.fd_H - self.fd_H_half).max() <= 1e-4 * scale)

    def passed(self, tol_H=1e-3, tol_M=1e-6) -> bool:
        return bool(self.rel_error_H.max() < tol_H and self.rel_error_M.max() < tol_M)


def gradient_check(analyzer: CriticalityAnalyzer, basis: MaterialBasis, alpha, logistic: LogisticMap = LogisticMap(),
                   p=15.0, rel_step=1e-4, node=None, corrupt=0.0) -> GradientCheck:
    """Adjoint gradients of ``H`` and ``M`` against central differences.

    The load instant (critical one at ``alpha`` unless ``node`` is given) and
    the weak regions are frozen at ``alpha`` so ``H`` is a smooth function.
    ``corrupt`` scales the adjoint result by ``1 + corrupt`` (negative control).
    """
    mesh = analyzer.mesh
    V = mesh.tet_volumes
    alpha = np.asarray(alpha, dtype=float)
    step = rel_step * math.sqrt(float(V.sum()))
    system = analyzer.factorize(density_from_alpha(basis, logistic, alpha))
    if node is None:
        node = analyzer.analyze(system=system).node
    wr = analyzer.weak_regions(system).elements
    f = analyzer.library.rhs(node, 1.0)
    sg = adjoint_stress_gradient(system, basis, logistic, alpha, system.solve(f), wr, p)
    _, dM = mass_and_gradient(basis, logistic, alpha, V)

    def H(a):
        s = analyzer.factorize(density_from_alpha(basis, logistic, a))
        return pnorm(recover_stress(s, s.solve(f)).von_mises[wr], p)

    def M(a):
        return float(density_from_alpha(basis, logistic, a) @ V)

    def central(fun, h):
        out = np.zeros(basis.k)
        for j in range(basis.k):
            e = np.zeros(basis.k)
            e[j] = h
            out[j] = (fun(alpha + e) - fun(alpha - e)) / (2 * h)
        return out

    return GradientCheck(alpha, int(node), sg.grad_alpha * (1 + corrupt), central(H, step), central(H, step / 2),
                         dM * (1 + corrupt), central(M, step / 2))


def random_alpha(k, volume, rng, offset=1.0, spread=0.25):
    """A test design: uniform shift ``offset`` plus Gaussian mode weights, in units of sqrt(volume)."""
    scale = math.sqrt(volume)
    alpha = rng.normal(0.0, spread * scale, k)
    alpha[0] = offset * scale
    return alpha
