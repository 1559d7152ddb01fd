"""Shared-basis factorization of grouped expert matrices.

Each expert ``i`` in group ``g`` is approximated as

    W_i ~ A_i @ phi(sum_j alpha[i, j] * align(B_j, K_g)) + slice_i(P @ eta_g)

where ``B_j`` is the ``K_j x d`` basis of group ``j``, ``A_i`` is ``p x K_g`` and
``align`` truncates or zero-pads a basis to ``K_g`` rows.  Factors start from
the truncated SVD of the stacked group matrix and are refined with Adam on the
summed squared Frobenius error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, DivergenceError, RankError, ShapeError
from .linalg import as_matrix, silu, silu_derivative, svd, truncated_factors
from .projection import SparseProjection, adjoint_projection, apply_projection
from .routing import GroupPlan

logger = logging.getLogger(__name__)

__all__ = [
    "ACTIVATIONS",
    "TrainConfig",
    "BasisBank",
    "FactorState",
    "Gradients",
    "TrainResult",
    "Adam",
    "align_basis",
    "mixed_basis",
    "init_alpha",
    "init_factors",
    "init_state",
    "reconstruct_expert",
    "reconstruct_all",
    "reconstruction_loss",
    "loss_gradients",
    "scaled_loss",
    "train_group",
    "finite_difference_check",
]


def _identity(x):
    return np.asarray(x, dtype=np.float64)


def _identity_derivative(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (silu, silu_derivative),
    "identity": (_identity, _identity_derivative),
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ArgumentError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    activation: str = "silu"
    early_stop_window: int = 100
    early_stop_tol: float = 1e-6
    log_interval: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ArgumentError("beta1 and beta2 must lie in (0, 1)")
        _activation(self.activation)

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class BasisBank:
    bases: list[np.ndarray]

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(int(b.shape[0]) for b in self.bases)

    @property
    def m(self) -> int:
        return len(self.bases)


def align_basis(B: np.ndarray, K_target: int) -> np.ndarray:
    """Top ``K_target`` rows of ``B``, zero-padded when ``B`` has fewer."""
    K = B.shape[0]
    if K >= K_target:
        return B[:K_target]
    out = np.zeros((K_target, B.shape[1]))
    out[:K] = B
    return out


def mixed_basis(bank: BasisBank, alpha_row, K_target: int) -> np.ndarray:
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if alpha_row.shape != (bank.m,):
        raise ShapeError(f"alpha row has shape {alpha_row.shape}, bank has {bank.m} bases")
    d = bank.bases[0].shape[1]
    out = np.zeros((K_target, d))
    for j, B in enumerate(bank.bases):
        if alpha_row[j] != 0.0:
            out += alpha_row[j] * align_basis(B, K_target)
    return out


def reconstruct_expert(A_i, bank: BasisBank, alpha_row, residual=None,
                       activation: str = "silu") -> np.ndarray:
    """``A_i @ phi(mixed basis)`` plus the expert's residual slice (p x d) if given."""
    A_i = as_matrix(A_i, "A_i")
    phi, _ = _activation(activation)
    Z = phi(mixed_basis(bank, alpha_row, A_i.shape[1]))
    W = A_i @ Z
    if residual is not None:
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != W.shape:
            raise ShapeError(f"residual slice {residual.shape} vs expert {W.shape}")
        W = W + residual
    return W


@dataclass
class FactorState:
    """All trainable factors of one (layer, matrix kind) problem.

    ``targets`` is ``(n, p, d)`` indexed by expert id.  ``A[g]`` is
    ``(k, p, K_g)`` with rows in the order of ``plan.groups[g]``; that order
    also fixes which ``p*d`` slice of ``P @ eta[g]`` belongs to which expert.
    """

    targets: np.ndarray
    plan: GroupPlan
    A: list[np.ndarray]
    bank: BasisBank
    alpha: np.ndarray
    eta: Optional[np.ndarray] = None
    projection: Optional[SparseProjection] = None
    activation: str = "silu"

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def p(self) -> int:
        return self.targets.shape[1]

    @property
    def d(self) -> int:
        return self.targets.shape[2]

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.bank.ranks

    @property
    def has_residual(self) -> bool:
        return self.eta is not None

    def expert_factor(self, i: int) -> np.ndarray:
        """``A_i`` for expert id ``i``."""
        owner = self.plan.group_of()[i]
        slot = self.plan.groups[owner].index(i)
        return self.A[owner][slot]

    def parameters(self) -> list[np.ndarray]:
        params = list(self.A) + list(self.bank.bases) + [self.alpha]
        if self.eta is not None:
            params.append(self.eta)
        return params

    def copy(self) -> "FactorState":
        return FactorState(
            targets=self.targets, plan=self.plan,
            A=[a.copy() for a in self.A],
            bank=BasisBank([b.copy() for b in self.bank.bases]),
            alpha=self.alpha.copy(),
            eta=None if self.eta is None else self.eta.copy(),
            projection=self.projection, activation=self.activation)

    def float_parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


@dataclass
class Gradients:
    A: list[np.ndarray]
    B: list[np.ndarray]
    alpha: np.ndarray
    eta: Optional[np.ndarray] = None

    def as_list(self) -> list[np.ndarray]:
        out = list(self.A) + list(self.B) + [self.alpha]
        if self.eta is not None:
            out.append(self.eta)
        return out


def init_alpha(plan: GroupPlan) -> np.ndarray:
    """One-hot mixing rows: each expert starts on its own group's basis."""
    alpha = np.zeros((plan.n_experts, plan.m))
    alpha[np.arange(plan.n_experts), plan.group_of()] = 1.0
    return alpha


def init_factors(W_g, K_g: int, k: int, activation: str = "identity",
                 name: str = "W_g") -> tuple[list[np.ndarray], np.ndarray]:
    """Truncated-SVD start for one group.

    ``W_g`` is the ``k*p x d`` vertical stack of the group's experts.  Returns
    the per-expert ``A_i`` (row blocks of ``U_K``) and ``B_g = diag(S_K) Vt_K``.
    For a non-identity activation ``A`` is refit by least squares against
    ``phi(B_g)``; under the identity this refit reproduces ``U_K`` exactly.
    """
    W_g = as_matrix(W_g, name)
    kp, d = W_g.shape
    if kp % k:
        raise ShapeError(f"{name}: {kp} rows not divisible into k={k} experts")
    r = min(kp, d)
    if not 1 <= K_g <= r:
        raise RankError(f"{name}: rank K_g={K_g} outside [1, min(kp, d)={r}]")
    U_K, B = truncated_factors(svd(W_g, name), int(K_g))
    if activation != "identity":
        phi, _ = _activation(activation)
        Z = phi(B)
        U_K = np.linalg.lstsq(Z.T, W_g.T, rcond=None)[0].T
    p = kp // k
    return [U_K[s * p:(s + 1) * p].copy() for s in range(k)], B


def init_state(targets, plan: GroupPlan, ranks: Sequence[int], activation: str = "silu",
               projection: Optional[SparseProjection] = None, label: str = "") -> FactorState:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 3 or targets.shape[0] != plan.n_experts:
        raise ShapeError(f"targets shape {targets.shape} does not match plan of "
                         f"{plan.n_experts} experts")
    if len(ranks) != plan.m:
        raise ShapeError(f"{len(ranks)} ranks for {plan.m} groups")
    _, p, d = targets.shape
    A, bases = [], []
    for g, members in enumerate(plan.groups):
        W_g = targets[list(members)].reshape(-1, d)
        A_blocks, B = init_factors(W_g, int(ranks[g]), plan.k, activation,
                                   name=f"{label}group{g}")
        A.append(np.stack(A_blocks))
        bases.append(B)
    eta = None
    if projection is not None:
        if projection.D != plan.k * p * d:
            raise ShapeError(f"projection D={projection.D} != k*p*d={plan.k * p * d}")
        eta = np.zeros((plan.m, projection.a))
    return FactorState(targets=targets, plan=plan, A=A, bank=BasisBank(bases),
                       alpha=init_alpha(plan), eta=eta, projection=projection,
                       activation=activation)


def _aligned_stack(bank: BasisBank, K: int) -> np.ndarray:
    return np.stack([align_basis(B, K) for B in bank.bases])


def _group_forward(state: FactorState, g: int):
    members = list(state.plan.groups[g])
    K = state.A[g].shape[2]
    phi, _ = _activation(state.activation)
    Bal = _aligned_stack(state.bank, K)
    M = np.einsum("kj,jrd->krd", state.alpha[members], Bal)
    Z = phi(M)
    W_hat = state.A[g] @ Z
    if state.eta is not None:
        W_hat = W_hat + apply_projection(state.projection, state.eta[g]).reshape(W_hat.shape)
    return members, Bal, M, Z, W_hat


def reconstruct_all(state: FactorState) -> np.ndarray:
    """Reconstructed ``(n, p, d)`` weights indexed by expert id."""
    out = np.empty_like(state.targets)
    for g in range(state.plan.m):
        members, _, _, _, W_hat = _group_forward(state, g)
        out[members] = W_hat
    return out


def reconstruction_loss(state: FactorState) -> float:
    total = 0.0
    for g in range(state.plan.m):
        members, _, _, _, W_hat = _group_forward(state, g)
        R = W_hat - state.targets[members]
        total += float(np.sum(R * R))
    return total


def loss_gradients(state: FactorState) -> tuple[float, Gradients]:
    """Loss and its analytic gradient with respect to every factor block."""
    _, dphi = _activation(state.activation)
    gA = []
    gB = [np.zeros_like(B) for B in state.bank.bases]
    galpha = np.zeros_like(state.alpha)
    geta = None if state.eta is None else np.zeros_like(state.eta)
    total = 0.0
    for g in range(state.plan.m):
        members, Bal, M, Z, W_hat = _group_forward(state, g)
        R = W_hat - state.targets[members]
        total += float(np.sum(R * R))
        R2 = 2.0 * R
        gA.append(R2 @ np.swapaxes(Z, 1, 2))
        dM = (np.swapaxes(state.A[g], 1, 2) @ R2) * dphi(M)
        galpha[members] = np.einsum("krd,jrd->kj", dM, Bal)
        dBal = np.einsum("kj,krd->jrd", state.alpha[members], dM)
        K = Bal.shape[1]
        for j, B in enumerate(state.bank.bases):
            rows = min(K, B.shape[0])
            gB[j][:rows] += dBal[j, :rows]
        if geta is not None:
            geta[g] = adjoint_projection(state.projection, R2.ravel())
    return total, Gradients(A=gA, B=gB, alpha=galpha, eta=geta)


def scaled_loss(loss: float, targets) -> float:
    """Per-element RMS error divided by the standard deviation of the targets."""
    targets = np.asarray(targets, dtype=np.float64)
    std = float(np.std(targets))
    rms = math.sqrt(max(loss, 0.0) / targets.size)
    if std == 0.0:
        return 0.0 if rms == 0.0 else math.inf
    return rms / std


class Adam:
    """Adam with bias correction over a fixed list of arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-2, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


@dataclass
class TrainResult:
    state: FactorState
    history: list[float]
    log: list[dict] = field(default_factory=list)
    best_step: int = 0
    stopped_early: bool = False

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[self.best_step]


def train_group(state: FactorState, config: TrainConfig, label: str = "") -> TrainResult:
    """Adam refinement of every factor block.

    The input state is left untouched.  ``history[t]`` is the loss after ``t``
    updates.  The returned state is the best iterate seen, so its loss never
    exceeds the starting loss.
    """
    if state.activation != config.activation:
        raise ArgumentError(f"state activation {state.activation!r} != "
                            f"config activation {config.activation!r}")
    work = state.copy()
    params = work.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    history: list[float] = []
    log: list[dict] = []
    best_loss, best_step, best_params = math.inf, 0, None
    stopped_early = False
    where = f" [{label}]" if label else ""

    for step in range(config.steps + 1):
        loss, grads = loss_gradients(work)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step} with learning rate "
                                  f"{config.learning_rate}{where}")
        history.append(loss)
        if loss < best_loss:
            best_loss, best_step = loss, step
            best_params = [p.copy() for p in params]
        if config.log_interval and (step % config.log_interval == 0 or step == config.steps):
            entry = {"step": step, "loss": loss, "scaled_loss": scaled_loss(loss, work.targets)}
            log.append(entry)
            logger.debug("%sstep %d loss %.6e scaled %.6e", label and label + " ",
                         step, loss, entry["scaled_loss"])
        if step == config.steps:
            break
        w = config.early_stop_window
        if w and step >= w:
            prev = history[step - w]
            if prev <= 0.0 or (prev - loss) / prev < config.early_stop_tol:
                stopped_early = True
                break
        opt.step(params, grads.as_list())

    for p, best in zip(params, best_params):
        p[...] = best
    return TrainResult(state=work, history=history, log=log, best_step=best_step,
                       stopped_early=stopped_early)


def finite_difference_check(state: FactorState, h: float = 1e-5, points: int = 50,
                            seed: int = 0, abs_floor: float = 1e-8) -> float:
    """Worst relative disagreement between analytic and central-difference gradients.

    ``points`` scalar parameters are drawn uniformly (without replacement)
    across all blocks.  Relative error is ``|g - fd| / max(|g|, |fd|, abs_floor)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ArgumentError(f"step h={h} outside [1e-7, 1e-3]")
    if points <= 0:
        return 0.0
    work = state.copy()
    params = work.parameters()
    _, grads = loss_gradients(work)
    flat_grads = np.concatenate([g.ravel() for g in grads.as_list()])
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(points, int(offsets[-1])), replace=False)
    worst = 0.0
    for flat in picks:
        b = int(np.searchsorted(offsets, flat, side="right") - 1)
        view = params[b].reshape(-1)
        idx = int(flat - offsets[b])
        orig = view[idx]
        view[idx] = orig + h
        plus = reconstruction_loss(work)
        view[idx] = orig - h
        minus = reconstruction_loss(work)
        view[idx] = orig
        fd = (plus - minus) / (2.0 * h)
        an = flat_grads[flat]
        err = abs(an - fd) / max(abs(an), abs(fd), abs_floor)
        worst = max(worst, err)
    return worst
