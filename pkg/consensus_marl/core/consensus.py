"""
Communication graphs, row-stochastic consensus weights and the mixing step.

Edge (i, j) in a CommGraph means agent i receives from agent j, i.e. c(i, j) may be
positive. Self-loops are always present. An adversary's row is the standard basis
vector: it keeps transmitting but never mixes what it receives.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from consensus_marl.core.errors import ConfigurationError, ConvergenceError, GraphError

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12


class CommGraph:
    """Directed communication graph over agents 0..N-1 with implicit self-loops."""

    def __init__(self, num_agents: int, edges: Iterable[Tuple[int, int]] = ()):
        if num_agents < 1:
            raise GraphError(f"a communication graph needs at least one agent, got {num_agents}")
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(range(num_agents))
        for i, j in edges:
            if not (0 <= i < num_agents and 0 <= j < num_agents):
                raise GraphError(f"edge ({i}, {j}) references an agent outside [0, {num_agents})")
            self.graph.add_edge(int(i), int(j))
        self.graph.add_edges_from((i, i) for i in range(num_agents))

    @classmethod
    def complete(cls, num_agents: int) -> "CommGraph":
        return cls(num_agents, [(i, j) for i in range(num_agents) for j in range(num_agents)])

    @classmethod
    def ring(cls, num_agents: int) -> "CommGraph":
        edges = []
        for i in range(num_agents):
            edges += [(i, (i - 1) % num_agents), (i, (i + 1) % num_agents)]
        return cls(num_agents, edges)

    @property
    def num_agents(self) -> int:
        return self.graph.number_of_nodes()

    def in_neighbors(self, i: int) -> List[int]:
        """Agents whose parameters agent i reads, itself included."""
        if i not in self.graph:
            raise GraphError(f"agent {i} is not in the communication graph")
        return sorted(self.graph.successors(i))

    def has_edge(self, i: int, j: int) -> bool:
        return self.graph.has_edge(i, j)

    def is_strongly_connected(self) -> bool:
        return nx.is_strongly_connected(self.graph)

    def edges(self) -> List[Tuple[int, int]]:
        return sorted((i, j) for i, j in self.graph.edges if i != j)


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


@dataclass
class ConsensusWeights:
    """
    Consensus matrix C_t with its structural context.

    Attributes:
        matrix: N x N weights, row i is what agent i mixes
        eta: lower bound on every strictly positive entry
        adversaries: agents whose row must be their basis vector
        graph: graph the matrix must respect (None: support of the matrix itself)
    """
    matrix: np.ndarray
    eta: float
    adversaries: FrozenSet[int] = frozenset()
    graph: Optional[CommGraph] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.adversaries = frozenset(int(a) for a in self.adversaries)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise GraphError(f"consensus matrix must be square, got shape {self.matrix.shape}")

    @property
    def num_agents(self) -> int:
        return self.matrix.shape[0]

    def validate(self) -> "ConsensusWeights":
        """Raise GraphError on the first failed structural check."""
        for check in check_weights(self, include_spectral=False):
            if not check.passed:
                raise GraphError(f"{check.name}: {check.detail}")
        return self


def check_weights(weights: ConsensusWeights, include_spectral: bool = True) -> List[CheckResult]:
    """Every structural condition on C_t, reported without raising."""
    C = weights.matrix
    n = weights.num_agents
    results = []

    row_sums = C.sum(axis=1)
    negative = np.argwhere(C < 0)
    if negative.size:
        i, j = negative[0]
        results.append(CheckResult("row_stochastic", False, f"negative entry c({i},{j}) = {C[i, j]:.6g}"))
    elif np.any(np.abs(row_sums - 1.0) > ROW_TOL):
        i = int(np.argmax(np.abs(row_sums - 1.0)))
        results.append(CheckResult("row_stochastic", False, f"row {i} sums to {row_sums[i]:.15g}"))
    else:
        results.append(CheckResult("row_stochastic", True, "every row sums to 1"))

    positive = C[C > 0]
    smallest = float(positive.min()) if positive.size else 0.0
    results.append(CheckResult("eta_lower_bound", bool(smallest >= weights.eta),
                               f"smallest positive entry {smallest:.6g}, eta {weights.eta:.6g}"))

    if weights.graph is None:
        results.append(CheckResult("respects_graph", True, "no graph given; support taken as the graph"))
    else:
        outside = [(i, j) for i in range(n) for j in range(n) if C[i, j] != 0 and not weights.graph.has_edge(i, j)]
        detail = f"weights on missing edges {outside}" if outside else "support within the edge set"
        results.append(CheckResult("respects_graph", not outside, detail))

    bad_rows = [a for a in sorted(weights.adversaries) if not np.array_equal(C[a], np.eye(n)[a])]
    if weights.adversaries:
        detail = f"adversary rows not basis vectors: {bad_rows}" if bad_rows else f"rows {sorted(weights.adversaries)} are basis vectors"
        results.append(CheckResult("adversary_row", not bad_rows, detail))
    else:
        results.append(CheckResult("adversary_row", True, "no adversary"))

    if include_spectral:
        rho = spectral_condition(weights)
        results.append(CheckResult("spectral_condition", bool(rho < 1.0), f"spectral norm {rho:.12g}"))
    return results


def default_eta(num_agents: int) -> float:
    return 1.0 / (2 * num_agents)


def build_uniform_weights(graph: CommGraph, adversary: Optional[int] = None,
                          eta: Optional[float] = None) -> ConsensusWeights:
    """Cooperative rows uniform over in-neighbors (self included); adversary row e_j."""
    n = graph.num_agents
    if adversary is not None and not 0 <= adversary < n:
        raise GraphError(f"adversary {adversary} is not an agent of the graph")
    C = np.zeros((n, n))
    for i in range(n):
        neighbors = graph.in_neighbors(i)
        if not neighbors:
            raise GraphError(f"agent {i} has an empty neighborhood")
        if i == adversary:
            C[i, i] = 1.0
        else:
            C[i, neighbors] = 1.0 / len(neighbors)
    adversaries = frozenset() if adversary is None else frozenset({adversary})
    return ConsensusWeights(C, default_eta(n) if eta is None else eta, adversaries, graph).validate()


def spectral_condition(weights: Union[ConsensusWeights, np.ndarray, Sequence]) -> float:
    """
    Spectral norm of E[C^T (I - 11^T/N) C].

    A single matrix is its own expectation; a sequence is averaged uniformly (one
    period of a deterministic schedule, or an empirical sample of a random one).
    """
    if isinstance(weights, (ConsensusWeights, np.ndarray)):
        weights = [weights]
    matrices = [w.matrix if isinstance(w, ConsensusWeights) else np.asarray(w, dtype=float) for w in weights]
    n = matrices[0].shape[0]
    centering = np.eye(n) - np.ones((n, n)) / n
    expectation = sum(C.T @ centering @ C for C in matrices) / len(matrices)
    return float(np.linalg.norm(expectation, 2))


def apply_consensus(params, weights: ConsensusWeights) -> np.ndarray:
    """
    Synchronous mixing: output_i = sum_j C(i, j) input_j.

    Every agent's input is read before any output is written; adversary rows are
    copied through unchanged.
    """
    if isinstance(params, np.ndarray) and params.ndim == 2:
        stacked = params
    else:
        lengths = {i: np.size(p) for i, p in enumerate(params)}
        if len(set(lengths.values())) > 1:
            raise ConfigurationError(f"parameter lengths differ across agents: {lengths}")
        stacked = np.vstack([np.asarray(p, dtype=float) for p in params])
    if stacked.shape[0] != weights.num_agents:
        raise ConfigurationError(f"{stacked.shape[0]} parameter vectors for {weights.num_agents} agents")
    mixed = weights.matrix @ stacked
    for a in weights.adversaries:
        mixed[a] = stacked[a]
    return mixed


def linear_consensus_limit(weights: ConsensusWeights, initial, tol: float = 1e-12,
                           max_iterations: int = 100_000) -> np.ndarray:
    """
    lim_k C^k x_0 by iteration until successive iterates differ by less than tol.

    Raises:
        ConvergenceError: if the iteration cap is reached first
    """
    x = np.asarray(initial, dtype=float)
    residual = np.inf
    for k in range(max_iterations):
        x_next = apply_consensus(x.reshape(weights.num_agents, -1), weights).reshape(x.shape)
        residual = float(np.max(np.abs(x_next - x))) if x.size else 0.0
        x = x_next
        if residual < tol:
            logger.debug(f"Linear consensus converged after {k + 1} iterations")
            return x
    raise ConvergenceError(f"linear consensus did not converge in {max_iterations} iterations", residual)


class ConsensusSchedule:
    """
    Time-indexed consensus matrices.

    kind "static" repeats one graph, "cycle" walks through a list of graphs, and
    "random_drop" keeps each off-diagonal edge of a base graph independently with
    probability 1 - drop_probability, seeded per time index.
    """

    def __init__(self, graphs: Sequence[CommGraph], adversary: Optional[int] = None,
                 eta: Optional[float] = None, kind: str = "static",
                 drop_probability: float = 0.0, seed: int = 0):
        if kind not in ("static", "cycle", "random_drop"):
            raise ConfigurationError(f"unknown schedule kind '{kind}'")
        if not graphs:
            raise ConfigurationError("a schedule needs at least one graph")
        if not 0.0 <= drop_probability < 1.0:
            raise ConfigurationError(f"drop probability must lie in [0, 1), got {drop_probability}")
        self.graphs = list(graphs)
        self.adversary = adversary
        self.eta = eta
        self.kind = kind
        self.drop_probability = drop_probability
        self.seed = seed
        self.num_agents = self.graphs[0].num_agents
        self._fixed = [build_uniform_weights(g, adversary, eta) for g in self.graphs]

    @property
    def period(self) -> int:
        return len(self.graphs)

    def weights(self, t: int) -> ConsensusWeights:
        if self.kind == "static":
            return self._fixed[0]
        if self.kind == "cycle":
            return self._fixed[t % self.period]
        rng = np.random.default_rng([self.seed, t])
        base = self.graphs[0]
        kept = [(i, j) for i, j in base.edges() if rng.random() >= self.drop_probability]
        return build_uniform_weights(CommGraph(self.num_agents, kept), self.adversary, self.eta)

    def spectral_condition(self, samples: int = 200) -> float:
        """Exact over one period for deterministic kinds, empirical mean for random dropping."""
        if self.kind == "random_drop":
            logger.warning(f"Spectral condition of a random schedule estimated from {samples} samples")
            return spectral_condition([self.weights(t) for t in range(samples)])
        return spectral_condition(self._fixed)


def load_schedule(path: str, seed: int = 0) -> ConsensusSchedule:
    """
    Read a graph schedule file:
    {"num_agents": N, "adversary": j|null, "eta": x|null, "kind": ...,
     "drop_probability": p, "graphs": [{"t": 0, "edges": [[i, j], ...]}, ...]}
    """
    try:
        with open(path) as handle:
            data = json.load(handle)
        num_agents = int(data["num_agents"])
        entries = sorted(data["graphs"], key=lambda g: g.get("t", 0))
        graphs = [CommGraph(num_agents, [tuple(e) for e in g["edges"]]) for g in entries]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        logger.error(f"Could not read schedule file {path}: {e}")
        raise ConfigurationError(f"could not read schedule file '{path}': {e}") from e
    return ConsensusSchedule(graphs, data.get("adversary"), data.get("eta"),
                             data.get("kind", "cycle" if len(graphs) > 1 else "static"),
                             float(data.get("drop_probability", 0.0)), seed)


def export_weights_text(weights: ConsensusWeights, path: str):
    np.savetxt(path, weights.matrix, fmt="%.17g")


def load_weights_text(path: str, eta: Optional[float] = None) -> ConsensusWeights:
    """Dense matrix file; rows that are basis vectors are not assumed adversarial."""
    try:
        matrix = np.atleast_2d(np.loadtxt(path, dtype=float))
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"could not read matrix file '{path}': {e}") from e
    return ConsensusWeights(matrix, default_eta(matrix.shape[0]) if eta is None else eta)
