"""Synthetic mixture-of-SCM dataset generation and the dataset file format.

Graph pools come from Erdős-Rényi sampling (instantaneous slice oriented by
a random permutation so it is a DAG by construction) or from edge-flip
perturbations of a base graph. Series are simulated ancestrally: lagged
contributions first, then instantaneous effects in a topological order of
slice 0. Per-sample noise comes from independent child streams spawned off
the caller's generator, so output is index-determined regardless of how
samples are grouped internally.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .graphs import TemporalGraph, is_dag, topological_order
from .splines import SplineSpec, SplineTransform, param_count


class DatagenError(ValueError):
    """Invalid generator configuration or inputs."""


MAGNITUDE_FLAG = 1e6  # desk-scale stationarity guard


# ---------------------------------------------------------------------------
# dataset container and file format


@dataclass
class TimeSeriesDataset:
    """N samples of D-variate series over T steps, with optional ground
    truth (per-sample component labels and the generating graph pool)."""

    data: np.ndarray
    lag: int
    labels: np.ndarray | None = None
    graphs: list[TemporalGraph] | None = None
    kind: str = "external"
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DatagenError(f"data must be (N, T, D), got shape "
                               f"{self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise DatagenError("labels must be one integer per sample")
            if self.graphs is not None and self.labels.size \
                    and self.labels.max() >= len(self.graphs):
                raise DatagenError("labels index beyond the graph pool")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @property
    def k_star(self) -> int | None:
        return len(self.graphs) if self.graphs is not None else None

    def save(self, directory: str) -> None:
        """Write data.bin / meta.json (+ labels.json, graphs.json)."""
        os.makedirs(directory, exist_ok=True)
        tmp = os.path.join(directory, "data.bin.tmp")
        self.data.astype("<f8").tofile(tmp)
        os.replace(tmp, os.path.join(directory, "data.bin"))
        meta = {"n": self.n, "t": self.t, "d": self.d, "lag": self.lag,
                "k_star": self.k_star, "seed": self.seed, "kind": self.kind}
        meta.update(self.extra)
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        if self.labels is not None:
            with open(os.path.join(directory, "labels.json"), "w") as fh:
                json.dump(self.labels.tolist(), fh)
        if self.graphs is not None:
            docs = [json.loads(g.to_json()) for g in self.graphs]
            with open(os.path.join(directory, "graphs.json"), "w") as fh:
                json.dump(docs, fh)

    @classmethod
    def load(cls, directory: str) -> "TimeSeriesDataset":
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        data = np.fromfile(os.path.join(directory, "data.bin"),
                           dtype="<f8")
        expected = meta["n"] * meta["t"] * meta["d"]
        if data.size != expected:
            raise DatagenError(f"data.bin holds {data.size} values, meta "
                               f"says {expected}")
        data = data.reshape(meta["n"], meta["t"], meta["d"])
        labels = None
        labels_path = os.path.join(directory, "labels.json")
        if os.path.exists(labels_path):
            with open(labels_path) as fh:
                labels = np.asarray(json.load(fh), dtype=np.int64)
        graphs = None
        graphs_path = os.path.join(directory, "graphs.json")
        if os.path.exists(graphs_path):
            with open(graphs_path) as fh:
                graphs = [TemporalGraph.from_json(json.dumps(doc))
                          for doc in json.load(fh)]
        known = {"n", "t", "d", "lag", "k_star", "seed", "kind"}
        extra = {k: v for k, v in meta.items() if k not in known}
        return cls(data=data, lag=meta["lag"], labels=labels, graphs=graphs,
                   kind=meta.get("kind", "external"),
                   seed=meta.get("seed"), extra=extra)

    def to_csv(self, directory: str) -> None:
        """One CSV per sample, columns = variables."""
        os.makedirs(directory, exist_ok=True)
        header = ",".join(f"var_{j}" for j in range(self.d))
        for i in range(self.n):
            path = os.path.join(directory, f"sample_{i:04d}.csv")
            np.savetxt(path, self.data[i], delimiter=",", header=header,
                       comments="")


# ---------------------------------------------------------------------------
# graph pools


def default_edge_probs(d: int, lag: int) -> list[float]:
    """Calibrated defaults: instantaneous undirected-pair probability aiming
    at expected undirected degree ~2, lagged per-entry probability 1/D.
    Reproduces the reference pairwise-SHD magnitudes at D = 5/10/20."""
    inst = min(0.9, 2.0 / max(d - 1, 1))
    lagged = min(0.9, 1.0 / d)
    return [inst] + [lagged] * lag


def _resolve_edge_probs(edge_prob, d: int, lag: int) -> list[float]:
    if edge_prob is None:
        probs = default_edge_probs(d, lag)
    elif np.isscalar(edge_prob):
        probs = [float(edge_prob)] * (lag + 1)
    else:
        probs = [float(p) for p in edge_prob]
        if len(probs) != lag + 1:
            raise DatagenError(f"need {lag + 1} per-slice edge "
                               f"probabilities, got {len(probs)}")
    for p in probs:
        if not 0.0 <= p < 1.0:
            raise DatagenError(f"edge probability {p} outside [0, 1)")
    return probs


def _er_graph(d: int, lag: int, probs, rng: np.random.Generator
              ) -> TemporalGraph:
    adj = np.zeros((lag + 1, d, d), dtype=np.int8)
    perm = rng.permutation(d)
    draws = rng.random((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            if draws[i, j] < probs[0]:
                adj[0, perm[i], perm[j]] = 1
    for tau in range(1, lag + 1):
        adj[tau] = rng.random((d, d)) < probs[tau]
    return TemporalGraph(adj)


def gen_er_graphs(k_star: int, d: int, lag: int,
                  edge_prob=None, rng: np.random.Generator | None = None,
                  max_attempts: int = 2000) -> list[TemporalGraph]:
    """Pool of k_star pairwise-distinct random temporal graphs.

    The instantaneous slice is an Erdős-Rényi graph whose undirected edges
    (pair probability ``edge_prob[0]``) are oriented along a random
    permutation, guaranteeing a DAG; lagged slices are i.i.d. Bernoulli per
    entry. ``edge_prob`` may be a scalar, a per-slice sequence, or None for
    the calibrated defaults.
    """
    rng = rng or np.random.default_rng()
    probs = _resolve_edge_probs(edge_prob, d, lag)
    pool: list[TemporalGraph] = []
    for _ in range(max_attempts):
        g = _er_graph(d, lag, probs, rng)
        if all(g != other for other in pool):
            pool.append(g)
            if len(pool) == k_star:
                return pool
    raise DatagenError(f"could not draw {k_star} distinct graphs in "
                       f"{max_attempts} attempts (edge probabilities too "
                       f"extreme?)")


def gen_perturbed_graphs(base: TemporalGraph, k_star: int, flip_prob: float,
                         rng: np.random.Generator | None = None,
                         max_attempts: int = 20000) -> list[TemporalGraph]:
    """Pool of k_star graphs obtained by flipping each admissible entry of
    ``base`` independently with probability ``flip_prob``; candidates whose
    instantaneous slice is cyclic are rejected and redrawn."""
    if not 0.0 <= flip_prob < 1.0:
        raise DatagenError(f"flip probability {flip_prob} outside [0, 1)")
    rng = rng or np.random.default_rng()
    base.validate()
    flippable = np.ones_like(base.adj, dtype=bool)
    flippable[0][np.diag_indices(base.dims)] = False
    pool: list[TemporalGraph] = []
    for _ in range(max_attempts):
        flips = (rng.random(base.adj.shape) < flip_prob) & flippable
        cand = np.where(flips, 1 - base.adj, base.adj)
        if is_dag(cand[0]):
            pool.append(TemporalGraph(cand))
            if len(pool) == k_star:
                return pool
    raise DatagenError(f"could not collect {k_star} DAG perturbations in "
                       f"{max_attempts} attempts")


# ---------------------------------------------------------------------------
# linear simulation


def draw_linear_weights(shape, rng: np.random.Generator) -> np.ndarray:
    """Magnitudes uniform on [0.1, 0.5], signs symmetric."""
    mag = rng.uniform(0.1, 0.5, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _simulate_linear_group(graph: TemporalGraph, weights: np.ndarray,
                           noise: np.ndarray, lag: int) -> np.ndarray:
    """Ancestral simulation of one graph for a block of samples; ``noise``
    is (Ng, T, D) and already carries the burn-in values."""
    masked = graph.adj * weights
    order = topological_order(graph.adj[0])
    ng, t, d = noise.shape
    x = noise.copy()
    inst = masked[0]
    for s in range(lag, t):
        acc = noise[:, s, :].copy()
        for tau in range(1, lag + 1):
            acc += x[:, s - tau, :] @ masked[tau]
        x[:, s, :] = acc
        for node in order:
            col = inst[:, node]
            if np.any(col):
                x[:, s, node] += x[:, s, :] @ col
    return x


def _flag_magnitude(x: np.ndarray, kind: str) -> None:
    if np.abs(x).max() > MAGNITUDE_FLAG:
        warnings.warn(f"{kind} simulation produced values beyond "
                      f"{MAGNITUDE_FLAG:g}; series may be non-stationary",
                      RuntimeWarning)


def simulate_linear(graphs: list[TemporalGraph], n: int, t: int, lag: int,
                    rng: np.random.Generator, noise_std: float = 0.5,
                    weights: list[np.ndarray] | None = None,
                    seed: int | None = None,
                    kind: str = "linear") -> TimeSeriesDataset:
    """Linear mixture dataset: per sample, a uniformly drawn component's
    graph-masked weights drive the recursion x_t = sum over lags of
    (G o W) x + noise; the first ``lag`` steps are noise-only burn-in.

    One weight tensor per graph, drawn once per pool (unless provided).
    """
    _check_pool(graphs, lag, t)
    k_star = len(graphs)
    if weights is None:
        weights = [draw_linear_weights(g.adj.shape, rng) for g in graphs]
    z = rng.integers(0, k_star, size=n)
    streams = rng.spawn(n)
    d = graphs[0].dims
    noise = np.empty((n, t, d))
    for i, stream in enumerate(streams):
        noise[i] = stream.normal(0.0, noise_std, size=(t, d))
    data = np.empty_like(noise)
    for k in range(k_star):
        members = np.flatnonzero(z == k)
        if members.size:
            data[members] = _simulate_linear_group(
                graphs[k], weights[k], noise[members], lag)
    _flag_magnitude(data, kind)
    ds = TimeSeriesDataset(data=data, lag=lag, labels=z, graphs=list(graphs),
                           kind=kind, seed=seed)
    ds.extra["noise_std"] = noise_std
    return ds


def _check_pool(graphs, lag: int, t: int) -> None:
    if not graphs:
        raise DatagenError("graph pool is empty")
    if t <= lag:
        raise DatagenError(f"series length {t} must exceed lag {lag}")
    for g in graphs:
        if g.lag != lag:
            raise DatagenError(f"graph lag {g.lag} != requested lag {lag}")
        g.validate()


# ---------------------------------------------------------------------------
# nonlinear simulation


@dataclass(frozen=True)
class MlpInit:
    """Random one-hidden-layer perceptrons for the structural functions;
    bounded outputs via tanh and 1/fan-in weight variance."""

    hidden: int = 16
    scale: float = 1.0


@dataclass(frozen=True)
class SplineInit:
    """History-conditioned noise flow initialization. ``kind='identity'``
    passes noise through unchanged; ``'random'`` draws a conditioner MLP
    per (graph, node)."""

    kind: str = "random"
    scale: float = 1.0
    bins: int = 8
    bound: float = 5.0

    def __post_init__(self):
        if self.kind not in ("random", "identity"):
            raise DatagenError(f"unknown spline init {self.kind!r}")


class _NodeFunc:
    """Structural function of one (graph, node): MLP over the parent
    vector; zero when the node has no parents."""

    def __init__(self, parents, init: MlpInit, rng):
        self.parents = parents  # list of (tau, j)
        p = len(parents)
        if p:
            self.w1 = rng.normal(0.0, 1.0 / np.sqrt(p),
                                 size=(p, init.hidden)) * init.scale
            self.w2 = rng.normal(0.0, 1.0 / np.sqrt(init.hidden),
                                 size=(init.hidden, 1)) * init.scale

    def __call__(self, pv: np.ndarray) -> np.ndarray:
        if not self.parents:
            return np.zeros(pv.shape[0])
        return (np.tanh(pv @ self.w1) @ self.w2)[:, 0]


class _NodeNoise:
    """Noise push-forward of one (graph, node): a quadratic rational spline
    whose raw parameters come from an MLP over the lagged parent vector
    (constant when there is no history or under identity init)."""

    def __init__(self, lagged_parents, init: SplineInit, rng):
        self.lagged_parents = lagged_parents
        self.init = init
        self.spec = SplineSpec(bins=init.bins, bound=init.bound,
                               kind="quadratic")
        n_par = param_count(init.bins)
        if init.kind == "identity":
            self.base = np.zeros(n_par)
            return
        self.base = rng.normal(0.0, 0.3, size=n_par) * init.scale
        p = len(lagged_parents)
        if p:
            hidden = 16
            self.w1 = rng.normal(0.0, 1.0 / np.sqrt(p),
                                 size=(p, hidden)) * init.scale
            self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden),
                                 size=(hidden, n_par)) * init.scale

    def raw_params(self, pv: np.ndarray, ng: int) -> np.ndarray:
        raw = np.broadcast_to(self.base, (ng, self.base.size)).copy()
        if self.init.kind == "random" and self.lagged_parents:
            raw += np.tanh(pv @ self.w1) @ self.w2
        return raw

    def __call__(self, eps: np.ndarray, pv: np.ndarray) -> np.ndarray:
        raw = self.raw_params(pv, eps.shape[0])
        transform = SplineTransform.from_raw(Tensor(raw), self.spec)
        out, _ = transform.forward(Tensor(eps))
        return out.data


def _parent_lists(graph: TemporalGraph):
    """Per node: ordered (tau, j) parents, and the lagged-only subset."""
    lag1, d, _ = graph.adj.shape
    parents, lagged = [], []
    for node in range(d):
        ps = [(tau, j) for tau in range(lag1) for j in range(d)
              if graph.adj[tau, j, node]]
        parents.append(ps)
        lagged.append([(tau, j) for tau, j in ps if tau >= 1])
    return parents, lagged


def _gather_parents(x: np.ndarray, s: int, plist) -> np.ndarray:
    ng = x.shape[0]
    if not plist:
        return np.zeros((ng, 0))
    return np.stack([x[:, s - tau, j] for tau, j in plist], axis=1)


def _simulate_nonlinear_group(graph: TemporalGraph, funcs, noises,
                              eps: np.ndarray, lag: int) -> np.ndarray:
    ng, t, d = eps.shape
    x = eps.copy()  # burn-in: plain standard-normal noise
    order = topological_order(graph.adj[0])
    parents, lagged = _parent_lists(graph)
    for s in range(lag, t):
        for node in order:
            pv_lag = _gather_parents(x, s, lagged[node])
            noise_val = noises[node](eps[:, s, node], pv_lag)
            pv = _gather_parents(x, s, parents[node])
            x[:, s, node] = funcs[node](pv) + noise_val
    return x


def simulate_nonlinear(graphs: list[TemporalGraph], n: int, t: int, lag: int,
                       rng: np.random.Generator,
                       mlp_init: MlpInit | None = None,
                       spline_init: SplineInit | None = None,
                       seed: int | None = None) -> TimeSeriesDataset:
    """Nonlinear mixture dataset: random perceptron structural functions
    per (graph, node), standard-normal noise pushed through a history-
    conditioned quadratic rational spline, ancestral instantaneous order."""
    _check_pool(graphs, lag, t)
    mlp_init = mlp_init or MlpInit()
    spline_init = spline_init or SplineInit()
    k_star = len(graphs)
    d = graphs[0].dims
    funcs, noises = [], []
    for g in graphs:
        parents, lagged = _parent_lists(g)
        funcs.append([_NodeFunc(parents[v], mlp_init, rng)
                      for v in range(d)])
        noises.append([_NodeNoise(lagged[v], spline_init, rng)
                       for v in range(d)])
    z = rng.integers(0, k_star, size=n)
    streams = rng.spawn(n)
    eps = np.empty((n, t, d))
    for i, stream in enumerate(streams):
        eps[i] = stream.standard_normal(size=(t, d))
    data = np.empty_like(eps)
    for k in range(k_star):
        members = np.flatnonzero(z == k)
        if members.size:
            data[members] = _simulate_nonlinear_group(
                graphs[k], funcs[k], noises[k], eps[members], lag)
    _flag_magnitude(data, "nonlinear")
    ds = TimeSeriesDataset(data=data, lag=lag, labels=z, graphs=list(graphs),
                           kind="nonlinear", seed=seed)
    ds.extra["spline_init"] = spline_init.kind
    return ds


# ---------------------------------------------------------------------------
# three-variable two-component benchmark


def toy_graphs() -> tuple[list[TemporalGraph], list[np.ndarray]]:
    """The fixed pair of 3-variable lag-1 SCMs (graphs and weights)."""
    a1 = np.zeros((2, 3, 3))
    w1 = np.zeros((2, 3, 3))
    a1[0, 2, 0] = 1; w1[0, 2, 0] = 0.6   # X3 -> X1 (instantaneous)
    a1[0, 2, 1] = 1; w1[0, 2, 1] = 0.3   # X3 -> X2 (instantaneous)
    a1[1, 1, 0] = 1; w1[1, 1, 0] = 0.4   # X2 -> X1 (lag 1)
    a1[1, 2, 1] = 1; w1[1, 2, 1] = 0.3   # X3 -> X2 (lag 1)
    a1[1, 0, 2] = 1; w1[1, 0, 2] = 0.5   # X1 -> X3 (lag 1)
    a2 = np.zeros((2, 3, 3))
    w2 = np.zeros((2, 3, 3))
    a2[0, 1, 0] = 1; w2[0, 1, 0] = -0.2  # X2 -> X1 (instantaneous)
    a2[0, 2, 1] = 1; w2[0, 2, 1] = 0.4   # X3 -> X2 (instantaneous)
    a2[1, 2, 0] = 1; w2[1, 2, 0] = 0.7   # X3 -> X1 (lag 1)
    a2[1, 0, 1] = 1; w2[1, 0, 1] = 0.2   # X1 -> X2 (lag 1)
    a2[1, 0, 2] = 1; w2[1, 0, 2] = -0.3  # X1 -> X3 (lag 1)
    return [TemporalGraph(a1), TemporalGraph(a2)], [w1, w2]


def toy_example(n: int, t: int, rng: np.random.Generator,
                noise_std: float = 1.0,
                seed: int | None = None) -> TimeSeriesDataset:
    """Two fixed 3-variable SCMs chosen with equal probability per sample;
    ground-truth labels and graphs included."""
    if t < 3:
        raise DatagenError("toy example needs t >= 3")
    graphs, weights = toy_graphs()
    ds = simulate_linear(graphs, n, t, lag=1, rng=rng, noise_std=noise_std,
                         weights=weights, seed=seed, kind="toy")
    return ds
