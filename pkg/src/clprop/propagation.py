"""Class-conditioned label propagation: per-edge weight tensors, iterative and
closed-form solvers, the sender-only variant, classic label propagation, and
analytic convergence verification.

Orientation convention: the per-class weight slices are receiver-row matrices,
``slice_k[j, i] = F_ij[k]`` for the arc (i, j), so one aggregation step for
class k is ``slice_k @ beliefs[:, k]`` and node j sums exactly the messages
``F_ij * beliefs[i]`` sent by its in-neighbors i.  On symmetrized graphs the
slice pattern coincides with the arc set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .compatibility import Beliefs, CompatibilityMatrix
from .graph import Graph

DIVERGENCE_STREAK = 10  # consecutive residual increases that abort the iteration
CLOSED_FORM_MAX_NODES = 5000

_WEIGHT_SLACK = 1e-12


class DivergenceError(RuntimeError):
    """Iterative propagation detected a growing residual."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log or []


class SingularSystemError(RuntimeError):
    """The closed-form linear system is singular."""


@dataclass(frozen=True)
class PropagationConfig:
    """Knobs of the fixed-point iteration.

    ``alpha`` weighs the neighbor aggregate against the teleport anchor;
    0 is admitted as the degenerate teleport-only case.  ``teleport_source``
    records which beliefs anchor the iteration (resolved by the caller).
    """

    alpha: float
    max_iters: int = 50
    tol: float = 1e-9
    message_normalization: bool = False
    teleport_source: str = "base_prediction"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.teleport_source not in ("base_prediction", "prior"):
            raise ValueError(f"unknown teleport source {self.teleport_source!r}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    residual: float
    per_class: tuple[float, ...]


@dataclass(frozen=True)
class EdgeWeightTensor:
    """Per-arc, per-class propagation weights (one sparse slice per class).

    ``arcs[a] = (i, j)`` carries the weight vector ``weights[a] = F_ij``; all
    entries are products of probabilities and lie in [0, 1].
    """

    arcs: np.ndarray
    weights: np.ndarray
    node_count: int

    def __post_init__(self):
        if self.arcs.shape != (self.weights.shape[0], 2):
            raise ValueError("arcs and weights disagree on the number of arcs")
        if self.weights.size and (
            self.weights.min() < -_WEIGHT_SLACK or self.weights.max() > 1 + _WEIGHT_SLACK
        ):
            raise ValueError("edge weights must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @cached_property
    def per_class(self) -> tuple[sparse.csr_matrix, ...]:
        """Receiver-row weight slices; explicit zeros keep the shared pattern."""
        n = self.node_count
        dst, src = self.arcs[:, 1], self.arcs[:, 0]
        return tuple(
            sparse.csr_matrix((self.weights[:, k], (dst, src)), shape=(n, n))
            for k in range(self.num_classes)
        )

    @cached_property
    def _receiver_incidence(self) -> sparse.csr_matrix:
        m = self.arcs.shape[0]
        return sparse.csr_matrix(
            (np.ones(m), (self.arcs[:, 1], np.arange(m))),
            shape=(self.node_count, m),
        )

    @classmethod
    def from_slices(cls, slices) -> "EdgeWeightTensor":
        """Build from receiver-row slices sharing one sparsity pattern."""
        if not slices:
            raise ValueError("at least one class slice is required")
        mats = [sparse.csr_matrix(s) for s in slices]
        ref = mats[0]
        ref.sort_indices()
        n = ref.shape[0]
        for m in mats[1:]:
            m.sort_indices()
            if m.shape != ref.shape or not (
                np.array_equal(m.indptr, ref.indptr) and np.array_equal(m.indices, ref.indices)
            ):
                raise ValueError("class slices must share one sparsity pattern")
        coo = ref.tocoo()
        arcs = np.stack([coo.col, coo.row], axis=1).astype(np.int64)
        order = np.lexsort((arcs[:, 1], arcs[:, 0]))
        weights = np.column_stack([m.tocoo().data for m in mats])[order]
        return cls(arcs[order], weights, n)


def edge_weights(graph: Graph, b0: Beliefs, h_hat: CompatibilityMatrix) -> EdgeWeightTensor:
    """Weight vector per arc: (sender beliefs @ compatibility) * receiver beliefs.

    Computed once from the prior beliefs and never updated during propagation.
    """
    if b0.values.shape != (graph.node_count, h_hat.num_classes):
        raise ValueError(
            f"beliefs {b0.values.shape} do not match {graph.node_count} nodes "
            f"x {h_hat.num_classes} classes"
        )
    outgoing = b0.values @ h_hat.values
    src, dst = graph.arcs[:, 0], graph.arcs[:, 1]
    weights = outgoing[src] * b0.values[dst]
    return EdgeWeightTensor(graph.arcs.copy(), weights, graph.node_count)


def _messages_raw(awf: EdgeWeightTensor, values: np.ndarray, normalize: bool) -> np.ndarray:
    msgs = awf.weights * values[awf.arcs[:, 0]]
    if normalize:
        sums = msgs.sum(axis=1)
        pos = sums > 0
        msgs[pos] /= sums[pos, None]
    return msgs


def compute_messages(awf: EdgeWeightTensor, b: Beliefs, normalize: bool = False) -> np.ndarray:
    """Per-arc messages F_ij * B_i, optionally normalized to unit sum.

    Zero-sum messages are left as zero rather than divided.
    """
    if b.values.shape != (awf.node_count, awf.num_classes):
        raise ValueError("beliefs shape does not match the edge weight tensor")
    return _messages_raw(awf, b.values, normalize)


def _aggregate(awf: EdgeWeightTensor, values: np.ndarray, normalize: bool) -> np.ndarray:
    if normalize:
        return awf._receiver_incidence @ _messages_raw(awf, values, normalize=True)
    return np.column_stack(
        [awf.per_class[k] @ values[:, k] for k in range(awf.num_classes)]
    )


def _iterate(step, teleport: np.ndarray, config: PropagationConfig):
    """Shared fixed-point loop with residual logging and divergence detection."""
    alpha = config.alpha
    b = teleport.copy()
    log: list[IterationRecord] = []
    prev_res = math.inf
    streak = 0
    for it in range(1, config.max_iters + 1):
        new_b = (1.0 - alpha) * teleport + alpha * step(b)
        per_class = np.max(np.abs(new_b - b), axis=0) if b.size else np.zeros(0)
        res = float(per_class.max()) if per_class.size else 0.0
        log.append(IterationRecord(it, res, tuple(float(x) for x in per_class)))
        b = new_b
        if res < config.tol:
            break
        streak = streak + 1 if res > prev_res else 0
        prev_res = res
        if streak >= DIVERGENCE_STREAK:
            raise DivergenceError(
                f"residual grew for {DIVERGENCE_STREAK} consecutive iterations "
                f"(last {res:.3g} at iteration {it})",
                log,
            )
    return b, log


def propagate_clp(
    awf: EdgeWeightTensor,
    teleport: Beliefs,
    config: PropagationConfig,
) -> tuple[Beliefs, list[IterationRecord]]:
    """Iterate beliefs <- (1-alpha) teleport + alpha (weighted aggregate).

    Starts from the teleport beliefs and stops when the max entrywise change
    drops below ``config.tol`` or the iteration budget runs out.  Raises
    :class:`DivergenceError` when the residual grows persistently.
    """
    if teleport.values.shape != (awf.node_count, awf.num_classes):
        raise ValueError("teleport shape does not match the edge weight tensor")
    values, log = _iterate(
        lambda b: _aggregate(awf, b, config.message_normalization),
        teleport.values,
        config,
    )
    return Beliefs(values, "propagated"), log


def clp_star_aggregate(graph: Graph, values: np.ndarray, h_values: np.ndarray) -> np.ndarray:
    """One sender-only aggregation step: receivers sum (sender beliefs @ H)."""
    return (graph.adjacency.T @ values) @ h_values


def propagate_clp_star(
    graph: Graph,
    teleport: Beliefs,
    h_hat: CompatibilityMatrix,
    config: PropagationConfig,
) -> Beliefs:
    """Sender-only propagation: messages ignore the receiving node's beliefs."""
    if teleport.values.shape != (graph.node_count, h_hat.num_classes):
        raise ValueError("teleport shape does not match graph/classes")
    values, _ = _iterate(
        lambda b: clp_star_aggregate(graph, b, h_hat.values),
        teleport.values,
        config,
    )
    return Beliefs(values, "propagated")


def propagate_lp(
    graph: Graph,
    y_onehot: np.ndarray,
    train_mask,
    config: PropagationConfig,
) -> Beliefs:
    """Classic label propagation over the symmetric degree-normalized adjacency.

    The teleport is the one-hot training labels (zero rows elsewhere) and the
    compatibility is implicitly the identity.  Nodes that remain at an
    all-zero row (unreachable from every training node) are reported uniform
    with a warning.
    """
    train_mask = np.asarray(train_mask, dtype=np.int64)
    teleport = np.zeros_like(y_onehot)
    teleport[train_mask] = y_onehot[train_mask]
    pattern = (graph.adjacency.maximum(graph.adjacency.T)).tocsr()
    deg = np.asarray(pattern.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    d_half = sparse.diags(inv_sqrt)
    s = (d_half @ pattern @ d_half).tocsr()
    values, _ = _iterate(lambda b: s @ b, teleport, config)
    zero_rows = values.sum(axis=1) <= 0
    if zero_rows.any():
        warnings.warn(
            f"{int(zero_rows.sum())} nodes are unreachable from the training set; "
            "predicting uniform beliefs there"
        )
        values = values.copy()
        values[zero_rows] = 1.0 / y_onehot.shape[1]
    return Beliefs(values, "propagated")


def closed_form_clp(
    awf_k: sparse.spmatrix | np.ndarray,
    teleport_k: np.ndarray,
    alpha: float,
    class_index: int | None = None,
) -> np.ndarray:
    """Exact per-class solution of (I - alpha W_k) x = (1 - alpha) d_k.

    Dense LU factorization; guarded to desk scale (n <= 5000).
    """
    dense = awf_k.toarray() if sparse.issparse(awf_k) else np.asarray(awf_k, dtype=np.float64)
    n = dense.shape[0]
    if dense.shape != (n, n):
        raise ValueError("per-class weight matrix must be square")
    if n > CLOSED_FORM_MAX_NODES:
        raise ValueError(
            f"closed-form solve is limited to {CLOSED_FORM_MAX_NODES} nodes (got {n}); "
            "use the iterative solver"
        )
    system = np.eye(n) - alpha * dense
    try:
        return np.linalg.solve(system, (1.0 - alpha) * np.asarray(teleport_k, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        which = f" for class {class_index}" if class_index is not None else ""
        raise SingularSystemError(f"singular propagation system{which}: {exc}") from exc


class SpectralRadiusEstimate(NamedTuple):
    value: float
    residual: float


def spectral_radius(
    m: sparse.spmatrix | np.ndarray,
    iters: int = 1000,
    tol: float = 1e-10,
    seed: int = 0,
) -> SpectralRadiusEstimate:
    """Power-iteration estimate of the dominant eigenvalue magnitude.

    Random start, restarted up to 3 times on stagnation.  Restarts of
    nonnegative matrices add a diagonal shift, which breaks the period-two
    oscillation of bipartite-like patterns without changing the Perron root
    (the shift is subtracted from the estimate).  The residual
    ||m x - rho x|| is reported; treat large residuals as inconclusive.
    """
    is_sparse = sparse.issparse(m)
    if not is_sparse:
        m = np.asarray(m, dtype=np.float64)
    n, ncol = m.shape
    if n != ncol:
        raise ValueError("spectral radius requires a square matrix")
    if n == 0:
        return SpectralRadiusEstimate(0.0, 0.0)
    if is_sparse:
        nonneg = m.nnz == 0 or m.data.min() >= 0
        if m.nnz == 0:
            return SpectralRadiusEstimate(0.0, 0.0)
    else:
        nonneg = m.min() >= 0
        if not m.any():
            return SpectralRadiusEstimate(0.0, 0.0)

    rng = np.random.default_rng(seed)
    best = SpectralRadiusEstimate(0.0, math.inf)
    shift = 0.0
    for attempt in range(4):
        x = rng.random(n) + 0.5 if nonneg else rng.standard_normal(n)
        x /= np.linalg.norm(x)
        best_res = math.inf
        stall = 0
        lam = 0.0
        for _ in range(iters):
            y = m @ x
            if shift:
                y = y + shift * x
            ny = float(np.linalg.norm(y))
            if ny == 0.0:  # x fell into the nullspace: nilpotent direction
                return SpectralRadiusEstimate(0.0, 0.0)
            lam = float(x @ y)
            res = float(np.linalg.norm(y - lam * x))
            if res < tol * max(1.0, abs(lam)):
                return SpectralRadiusEstimate(abs(lam - shift), res)
            if res < best_res * (1.0 - 1e-3):
                best_res = res
                stall = 0
            else:
                stall += 1
            x = y / ny
            if stall >= 50:
                break
        estimate = SpectralRadiusEstimate(abs(lam - shift), best_res)
        if estimate.residual < best.residual:
            best = estimate
        if nonneg:
            shift = 0.75 * max(abs(lam - shift), 1e-6)
    return best


@dataclass(frozen=True)
class ClassConvergence:
    """Per-class convergence verdict for a given alpha.

    ``certified`` means a cheap norm bound already proves the spectral radius
    is below 1/alpha, so no eigen-computation ran and ``rho`` is None.
    """

    class_index: int
    status: str  # certified | convergent | divergent | inconclusive
    norm_1: float
    frobenius: float
    rho: float | None = None
    residual: float | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("certified", "convergent")


def convergence_check(awf: EdgeWeightTensor, alpha: float) -> list[ClassConvergence]:
    """Verdict per class: does the fixed-point iteration converge at this alpha?

    Checks the entrywise 1-norm first, then the Frobenius norm (both upper
    bound the spectral radius); only when neither certifies does it fall back
    to power iteration.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    threshold = math.inf if alpha == 0.0 else 1.0 / alpha
    verdicts = []
    for k, slice_k in enumerate(awf.per_class):
        data = slice_k.data
        norm_1 = float(np.abs(data).sum())
        frobenius = float(np.sqrt(np.sum(data * data)))
        if norm_1 < threshold or frobenius < threshold:
            verdicts.append(ClassConvergence(k, "certified", norm_1, frobenius))
            continue
        rho, residual = spectral_radius(slice_k)
        if residual <= 1e-6 * max(1.0, rho):
            status = "convergent" if rho < threshold else "divergent"
        else:
            status = "inconclusive"
        verdicts.append(ClassConvergence(k, status, norm_1, frobenius, rho, residual))
    return verdicts


def all_convergent(verdicts: list[ClassConvergence]) -> bool:
    return all(v.ok for v in verdicts)


def iteration_log_to_csv(log: list[IterationRecord], path) -> None:
    num_classes = len(log[0].per_class) if log else 0
    with open(path, "w") as fh:
        header = ",".join(f"residual_class_{k}" for k in range(num_classes))
        fh.write(f"iter,residual{',' if header else ''}{header}\n")
        for rec in log:
            tail = ",".join(repr(x) for x in rec.per_class)
            fh.write(f"{rec.iteration},{rec.residual!r}{',' if tail else ''}{tail}\n")


def save_beliefs_tsv(beliefs: Beliefs, path) -> None:
    """Rows: node id, renormalized probabilities, argmax class.

    Argmax is taken before renormalization and must survive it unchanged.
    """
    pred = beliefs.argmax()
    reported = beliefs.renormalized()
    if not np.array_equal(pred, reported.argmax()):
        raise AssertionError("renormalization changed the argmax")
    with open(path, "w") as fh:
        for node, (row, cls) in enumerate(zip(reported.values, pred)):
            probs = "\t".join(repr(float(x)) for x in row)
            fh.write(f"{node}\t{probs}\t{cls}\n")
