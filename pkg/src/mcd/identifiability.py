"""Executable identifiability checkers for mixtures of causal models.

Two routes:

* Linear Gaussian SVAR mixtures with equal noise variance: the mixture is
  identifiable iff the per-component tuples
  (B^-1 A_1, ..., B^-1 A_L, B B^T), with B = I - W, are pairwise distinct
  (plus B^-1 mu when L = 0 and means are allowed).
* General mixtures: the sufficient diversity condition (*) - every
  component has a witness point whose likelihood under that component
  exceeds the summed likelihood under all the others, equivalently strict
  diagonal dominance of the witness likelihood matrix.

All density arithmetic stays in log space; the likelihood matrix is
materialized row-normalized for reporting only (the condition is invariant
to positive row scaling).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import is_dag
from .mixture import TrainedState


class IdentifiabilityInputError(ValueError):
    """Inputs violate the assumptions the theory needs."""


@dataclass
class SvarComponent:
    """One linear SVAR mixture component in structural form
    X_t = W X_t + sum_tau A_tau X_{t-tau} + eps, eps ~ N(mean, noise_var I).

    ``instantaneous`` is W with W[i, j] the coefficient of variable j in the
    equation of variable i; ``lagged`` stacks A_1..A_L. ``mean`` is only
    meaningful for the lag-free case.
    """

    instantaneous: np.ndarray
    lagged: np.ndarray
    noise_var: float = 1.0
    mean: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        self.instantaneous = np.asarray(self.instantaneous, dtype=np.float64)
        d = self.instantaneous.shape[0]
        if self.instantaneous.shape != (d, d):
            raise IdentifiabilityInputError("W must be square")
        self.lagged = np.asarray(self.lagged,
                                 dtype=np.float64).reshape(-1, d, d)
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64).reshape(d)
        if self.noise_var <= 0:
            raise IdentifiabilityInputError("noise variance must be positive")
        if self.weight <= 0:
            raise IdentifiabilityInputError("mixture weight must be positive")
        if not is_dag(self.instantaneous != 0):
            raise IdentifiabilityInputError(
                "instantaneous coefficient matrix must be a DAG")

    @property
    def dims(self) -> int:
        return self.instantaneous.shape[0]

    @property
    def lag(self) -> int:
        return self.lagged.shape[0]

    def b_matrix(self) -> np.ndarray:
        return np.eye(self.dims) - self.instantaneous


@dataclass
class SvarCheckResult:
    identifiable: bool
    colliding_pairs: list[tuple[int, int]]
    min_distance: float


def check_svar_condition(components: list[SvarComponent],
                         tol: float = 1e-6) -> SvarCheckResult:
    """Pairwise distinctness of (B^-1 A_1, ..., B^-1 A_L, B B^T) in
    max-norm; collisions within ``tol`` make the mixture unidentifiable.

    Rejects mixtures whose components have unequal noise variance, and
    nonzero means with L >= 1: the theory does not cover those inputs.
    """
    if len(components) < 1:
        raise IdentifiabilityInputError("need at least one component")
    d = components[0].dims
    lag = components[0].lag
    var = components[0].noise_var
    for c in components:
        if c.dims != d or c.lag != lag:
            raise IdentifiabilityInputError(
                "components must share D and L")
        if abs(c.noise_var - var) > 1e-12:
            raise IdentifiabilityInputError(
                "checker requires equal noise variance across components")
        if lag >= 1 and c.mean is not None and np.any(c.mean != 0.0):
            raise IdentifiabilityInputError(
                "nonzero noise means are outside the lagged theory")
    weights = [c.weight for c in components]
    if len(components) > 1 and abs(sum(weights) - 1.0) > 1e-6:
        raise IdentifiabilityInputError("mixture weights must sum to 1")
    tuples = []
    for c in components:
        b = c.b_matrix()
        det = np.linalg.det(b)
        assert abs(det) > 1e-12, "I - W singular despite DAG W"
        b_inv = np.linalg.inv(b)
        parts = [b_inv @ c.lagged[tau] for tau in range(lag)]
        parts.append(b @ b.T)
        if lag == 0:
            mu = c.mean if c.mean is not None else np.zeros(d)
            parts.append((b_inv @ mu).reshape(d, 1))
        tuples.append(np.concatenate([p.reshape(-1) for p in parts]))
    colliding = []
    min_dist = np.inf
    for i in range(len(tuples)):
        for j in range(i + 1, len(tuples)):
            dist = float(np.max(np.abs(tuples[i] - tuples[j])))
            min_dist = min(min_dist, dist)
            if dist <= tol:
                colliding.append((i, j))
    return SvarCheckResult(identifiable=not colliding,
                           colliding_pairs=colliding,
                           min_distance=float(min_dist))


def svar_components_from_state(state: TrainedState,
                               threshold: float = 0.5
                               ) -> list[SvarComponent]:
    """Build SVAR components from a trained linear run: thresholded graphs
    mask the learned weights; note the model stores weights[tau, j, d]
    (parent j -> target d) while the SVAR form wants row = target."""
    if state.config.variant != "linear":
        raise IdentifiabilityInputError(
            "SVAR components need the linear variant")
    probs = state.edge_probs()
    w = state.scm_params.weights.data
    masked = w * (probs >= threshold)
    labels = state.labels()
    k = probs.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = counts / max(counts.sum(), 1.0)
    noise_var = float(np.exp(2.0 * state.scm_params.noise_log_std.data).mean())
    out = []
    for comp in range(k):
        inst = masked[comp, 0].T
        lagged = np.stack([masked[comp, tau].T
                           for tau in range(1, probs.shape[1])]) \
            if probs.shape[1] > 1 else np.zeros((0,) + inst.shape)
        out.append(SvarComponent(instantaneous=inst, lagged=lagged,
                                 noise_var=noise_var,
                                 weight=float(max(weights[comp], 1e-12))))
    return out


# ---------------------------------------------------------------------------
# condition (*) via the witness likelihood matrix


@dataclass
class LikelihoodMatrix:
    """Witness likelihoods beta[k, j] = L_{component j}(witness of k),
    row-normalized by the row maximum for finite representation."""

    beta: np.ndarray
    witnesses: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.ndim != 2 or self.beta.shape[0] != self.beta.shape[1]:
            raise IdentifiabilityInputError("beta must be square")
        if np.any(self.beta < 0) or not np.all(np.isfinite(self.beta)):
            raise IdentifiabilityInputError(
                "beta entries must be non-negative and finite")


@dataclass
class StarCheckResult:
    satisfied: bool
    margins: np.ndarray  # beta_kk - sum_{j != k} beta_kj per row
    failing_rows: list[int] = field(default_factory=list)
    reasons: list[str] = field(default_factory=list)


def check_condition_star(beta) -> StarCheckResult:
    """Strict diagonal dominance of the witness likelihood matrix -
    equivalent to each witness holding a strict majority of the mixture
    likelihood at its point."""
    mat = beta.beta if isinstance(beta, LikelihoodMatrix) else \
        LikelihoodMatrix(np.asarray(beta, dtype=np.float64),
                         np.arange(len(beta))).beta
    k = mat.shape[0]
    margins = np.empty(k)
    failing = []
    for row in range(k):
        off = mat[row].sum() - mat[row, row]
        margins[row] = mat[row, row] - off
        if not margins[row] > 0.0:
            failing.append(row)
    return StarCheckResult(satisfied=not failing, margins=margins,
                           failing_rows=failing)


@dataclass
class WitnessResult:
    matrix: LikelihoodMatrix
    satisfied: bool
    log_margins: np.ndarray
    failing_rows: list[int]
    reasons: list[str]


def witness_matrix_from_loglik(ll: np.ndarray,
                               log_pz: np.ndarray) -> WitnessResult:
    """Condition (*) from a per-sample log-likelihood table (N, K).

    Witness of component k: the sample with the largest responsibility for
    k. A component that is no sample's argmax cannot exceed the 1/2 ratio
    anywhere; its row is flagged and the verdict is false.
    """
    ll = np.asarray(ll, dtype=np.float64)
    n, k = ll.shape
    scores = ll + np.asarray(log_pz)[None, :]
    log_resp = scores - _logsumexp_rows(scores)[:, None]
    labels = np.argmax(log_resp, axis=1)
    witnesses = np.argmax(log_resp, axis=0)
    beta = np.empty((k, k))
    log_margins = np.empty(k)
    failing = []
    reasons = []
    for row in range(k):
        w = witnesses[row]
        row_ll = ll[w]
        beta[row] = np.exp(row_ll - row_ll.max())
        if k == 1:
            log_margins[row] = np.inf
            continue
        others = np.delete(row_ll, row)
        log_margins[row] = row_ll[row] - _logsumexp(others)
        if labels[w] != row:
            failing.append(row)
            reasons.append(f"component {row}: no sample holds majority "
                           "responsibility (witness undefined)")
        elif not log_margins[row] > 0.0:
            failing.append(row)
            reasons.append(f"component {row}: witness ratio <= 1/2")
    return WitnessResult(matrix=LikelihoodMatrix(beta, witnesses),
                         satisfied=not failing, log_margins=log_margins,
                         failing_rows=failing, reasons=reasons)


def find_witnesses(state: TrainedState, dataset) -> WitnessResult:
    """Condition (*) for a trained mixture, with witnesses restricted to the
    observed samples and likelihoods under the thresholded graphs."""
    ll = state.loglik_table(dataset.data)
    log_pz = state.member_prior.log_probs(ll.shape[1])
    return witness_matrix_from_loglik(ll, log_pz)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def _logsumexp_rows(mat: np.ndarray) -> np.ndarray:
    m = mat.max(axis=1)
    return m + np.log(np.exp(mat - m[:, None]).sum(axis=1))
