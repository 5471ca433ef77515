"""Mixture assembly and training.

Builds the evidence lower bound over K graph components and a learned
per-sample membership, and drives augmented-Lagrangian training: inner
phases of adaptive-moment gradient ascent on the ELBO with two learning-rate
groups (graph logits vs. everything else), outer multiplier updates pushing
the instantaneous slices toward exact acyclicity, and a validation pass that
infers memberships for held-out samples with one gradient step.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graphs as gr
from . import models as md
from .autodiff import Tape, Tensor
from .graphs import GraphPosterior, GraphPrior
from .splines import SplineSpec


class NumericalAbort(RuntimeError):
    """A loss term went non-finite; carries the offending term's name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite value in ELBO term '{term}' "
                         f"({value!r})")
        self.term = term


class ConfigError(ValueError):
    """Invalid training configuration."""


# ---------------------------------------------------------------------------
# membership


@dataclass
class MembershipPosterior:
    """Per-sample categorical posterior r(Z | X) = softmax(w / temperature),
    one learnable logit row per sample."""

    weights: Tensor
    temperature: float = 1.0

    @classmethod
    def init(cls, n: int, k: int, temperature: float = 1.0):
        return cls(Tensor(np.zeros((n, k)), requires_grad=True), temperature)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    def row_logits(self, indices: np.ndarray) -> Tensor:
        return self.weights[np.asarray(indices)]

    def probabilities(self) -> np.ndarray:
        """All N responsibility rows as plain numpy."""
        w = self.weights.data / self.temperature
        w = w - w.max(axis=1, keepdims=True)
        e = np.exp(w)
        return e / e.sum(axis=1, keepdims=True)


def assign(membership: MembershipPosterior) -> np.ndarray:
    """Hard labels: argmax responsibility per sample, ties toward the
    smallest component index."""
    return np.argmax(membership.probabilities(), axis=1)


@dataclass
class MembershipPrior:
    """Prior p(Z): uniform, or exponentially decaying over component index
    (p(Z = k) proportional to exp(-lambda_p * k))."""

    kind: str = "uniform"
    lambda_p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "exponential"):
            raise ConfigError(f"unknown membership prior {self.kind!r}")

    def log_probs(self, k: int) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(k, -math.log(k))
        raw = -self.lambda_p * np.arange(k, dtype=np.float64)
        norm = raw - raw.max()
        return norm - math.log(np.exp(norm).sum())


# ---------------------------------------------------------------------------
# augmented-Lagrangian state


@dataclass
class AugLagState:
    """Multipliers and schedule counters for the acyclicity constraint."""

    alpha: float = 0.0
    rho: float = 1.0
    outer_step: int = 0
    inner_step: int = 0
    dag_tolerance: float = 1e-8
    outer_steps_max: int = 100
    inner_steps_max: int = 6000
    last_h: float = math.inf
    consecutive_ok: int = 0
    converged: bool = False

    def __post_init__(self):
        if self.rho <= 0 or self.alpha < 0:
            raise ConfigError("require rho > 0 and alpha >= 0")

    def after_inner_phase(self, h: float, growth: float, retention: float,
                          rho_max: float, converged_steps: int) -> None:
        """Multiplier updates after one inner phase, given the current
        (deterministic) constraint value h."""
        self.outer_step += 1
        if h < self.dag_tolerance:
            self.consecutive_ok += 1
        else:
            self.consecutive_ok = 0
            self.alpha += self.rho * h
            if h > retention * self.last_h:
                self.rho = min(self.rho * growth, rho_max)
        self.converged = self.consecutive_ok >= converged_steps
        self.last_h = h


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    """Hyperparameters of one training run. Defaults follow the synthetic-
    benchmark settings; presets for quick desk-scale runs live in the CLI."""

    k: int = 2
    lag: int = 1
    variant: str = "linear"
    matrix_lr: float = 1e-2
    likelihood_lr: float = 1e-3
    batch_size: int = 128
    outer_steps: int = 100
    inner_steps: int = 6000
    sparsity_lambda: float = 5.0
    gumbel_temperature: float = 0.25
    membership_temperature: float = 1.0
    membership_prior: str = "uniform"
    membership_prior_decay: float = 0.0
    val_fraction: float = 0.2
    seed: int = 0
    embed_dim: int | None = None
    hidden: int | None = None
    spline_bins: int = 8
    spline_bound: float = 5.0
    spline_kind: str = "quadratic"
    train_noise: bool = False
    init_edge_prob: float = 0.3
    init_logit_noise: float = 0.05
    hard_samples: bool = True
    gumbel_mode: str = "resample"
    prior_on: str = "probs"
    sparsity_all_slices: bool = True
    dag_tolerance: float = 1e-8
    dag_converged_steps: int = 5
    checkpoint_h_tol: float | None = None  # default: dag_tolerance
    alpha_init: float = 0.0
    rho_init: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e13
    h_retention: float = 0.65
    warmup_outers: int = 0
    log_interval: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lag < 0:
            raise ConfigError("lag must be >= 0")
        if self.matrix_lr <= 0 or self.likelihood_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.variant not in ("linear", "nonlinear"):
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.gumbel_mode not in ("resample", "frozen"):
            raise ConfigError(f"unknown gumbel_mode {self.gumbel_mode!r}")
        if self.prior_on not in ("probs", "sample"):
            raise ConfigError(f"unknown prior_on {self.prior_on!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def spline_spec(self) -> SplineSpec:
        return SplineSpec(bins=self.spline_bins, bound=self.spline_bound,
                          kind=self.spline_kind)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment minimizer over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: dict) -> None:
        """Apply one update from a {tensor: gradient-of-loss} map; params
        missing from the map are treated as zero-gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            step = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data = p.data - self.lr * step


# ---------------------------------------------------------------------------
# ELBO


@dataclass
class ElboResult:
    value: Tensor
    elbo: float
    parts: dict
    responsibilities: np.ndarray
    h_values: np.ndarray


def elbo(x: np.ndarray, graph_post: GraphPosterior, scm_params,
         membership: MembershipPosterior | None,
         member_prior: MembershipPrior, graph_prior: GraphPrior,
         al_state: AugLagState | None = None,
         rng: np.random.Generator | None = None,
         sample_indices: np.ndarray | None = None,
         hard: bool = True, data_scale: float = 1.0,
         gumbel_noise: np.ndarray | None = None,
         prior_on: str = "sample") -> ElboResult:
    """Evidence lower bound of one batch, with one graph sample.

    Terms: responsibility-weighted log-likelihood under all K components
    (exact expectation over Z), the membership prior and entropy, the graph
    log prior of a single Gumbel-Softmax sample, and the closed-form
    Bernoulli entropy of the graph posterior. ``data_scale`` multiplies the
    per-sample terms (the trainer passes N_train / batch so prior weights are
    batch-size invariant; the plain batch ELBO uses 1).

    ``prior_on="probs"`` evaluates the sparsity/acyclicity prior on the
    posterior edge probabilities instead of the sample: a deterministic
    surrogate whose gradient does not die when logits saturate under the
    low-temperature straight-through sample (the trainer's default).

    With ``membership=None`` the mixture collapses to a single-SCM objective
    (requires K = 1): the membership terms vanish identically.
    """
    k = graph_post.k
    if rng is None and gumbel_noise is None:
        raise ConfigError("elbo needs an rng stream or explicit Gumbel noise")
    graphs = gr.sample_graphs(graph_post, rng, hard=hard, noise=gumbel_noise)
    ll = md.loglik(x, graphs, scm_params)
    b = ll.shape[0]
    if membership is None:
        if k != 1:
            raise ConfigError("membership-free evaluation requires K = 1")
        data_term = ad.tensor_sum(ll)
        like = data_term
        log_pz_term = Tensor(0.0)
        ent_r = Tensor(0.0)
        resp = np.ones((b, 1))
    else:
        if membership.k != k:
            raise ConfigError(f"membership has {membership.k} components, "
                              f"graph posterior has {k}")
        if sample_indices is None:
            raise ConfigError("mixture ELBO needs the batch's sample indices")
        logits = membership.row_logits(sample_indices) \
            / membership.temperature
        r = ad.softmax(logits, axis=1)
        log_r = ad.log_softmax(logits, axis=1)
        like = ad.tensor_sum(r * ll)
        log_pz = np.broadcast_to(member_prior.log_probs(k), (b, k))
        log_pz_term = ad.tensor_sum(r * Tensor(log_pz))
        ent_r = -ad.tensor_sum(r * log_r)
        data_term = like + log_pz_term + ent_r
        resp = r.data
    if prior_on == "probs":
        prior_graphs = graph_post.edge_probs_tensor()
    elif prior_on == "sample":
        prior_graphs = graphs
    else:
        raise ConfigError(f"unknown prior_on {prior_on!r}")
    graph_lp, h = gr.log_prior_terms(prior_graphs, graph_prior, al_state)
    graph_ent = graph_post.entropy()
    total = data_term * float(data_scale) + graph_lp + graph_ent
    parts = {
        "loglik": float(like.item()) + 0.0,
        "log_pz": float(log_pz_term.item()) + 0.0,
        "membership_entropy": float(ent_r.item()) + 0.0,
        "graph_log_prior": float(graph_lp.item()) + 0.0,
        "graph_entropy": float(graph_ent.item()) + 0.0,
    }
    parts["elbo"] = (parts["loglik"] + parts["log_pz"]
                     + parts["membership_entropy"]
                     + parts["graph_log_prior"] + parts["graph_entropy"])
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericalAbort(name, value)
    return ElboResult(value=total, elbo=parts["elbo"], parts=parts,
                      responsibilities=resp, h_values=h.data.copy())


# ---------------------------------------------------------------------------
# trained state


@dataclass
class TrainedState:
    """Everything a run produces: parameters, membership, multiplier state,
    split indices, and the per-step history."""

    config: TrainConfig
    graph_post: GraphPosterior
    scm_params: object
    membership: MembershipPosterior | None
    member_prior: MembershipPrior
    graph_prior: GraphPrior
    al_state: AugLagState
    train_indices: np.ndarray
    val_indices: np.ndarray
    history: list = field(default_factory=list)
    best_val_elbo: float = -math.inf
    dag_converged: bool = False

    def edge_probs(self) -> np.ndarray:
        return self.graph_post.edge_probs()

    def graphs(self, threshold: float = 0.5):
        return self.graph_post.mean_graphs(threshold)

    def labels(self) -> np.ndarray:
        if self.membership is None:
            return np.zeros(len(self.train_indices)
                            + len(self.val_indices), dtype=int)
        return assign(self.membership)

    def loglik_table(self, x: np.ndarray,
                     threshold: float = 0.5) -> np.ndarray:
        """Per-sample log-likelihood under each component's thresholded
        graph (deterministic, no sampling)."""
        probs = self.edge_probs()
        hard = Tensor((probs >= threshold).astype(np.float64))
        return md.loglik(np.asarray(x, dtype=np.float64), hard,
                         self.scm_params).data

    # -- persistence --------------------------------------------------------

    def save(self, directory: str) -> None:
        named = [("graph_logits", self.graph_post.logits.data)]
        named += [(f"scm.{n}", t.data)
                  for n, t in self.scm_params.named_parameters()]
        manifest = {
            "variant": self.config.variant,
            "seed": self.config.seed,
            "config": asdict(self.config),
            "al_state": {"alpha": self.al_state.alpha,
                         "rho": self.al_state.rho,
                         "outer_step": self.al_state.outer_step,
                         "last_h": self.al_state.last_h,
                         "consecutive_ok": self.al_state.consecutive_ok,
                         "converged": self.al_state.converged},
            "train_indices": self.train_indices.tolist(),
            "val_indices": self.val_indices.tolist(),
            "best_val_elbo": self.best_val_elbo,
            "dag_converged": bool(self.dag_converged),
            "has_membership": self.membership is not None,
        }
        md.save_params(directory, named, manifest)
        if self.membership is not None:
            tmp = os.path.join(directory, "membership.bin.tmp")
            self.membership.weights.data.astype("<f8").tofile(tmp)
            os.replace(tmp, os.path.join(directory, "membership.bin"))

    @classmethod
    def load(cls, directory: str) -> "TrainedState":
        arrays, manifest = md.load_params(directory)
        cfg_dict = dict(manifest["config"])
        config = TrainConfig(**cfg_dict)
        graph_post = GraphPosterior(
            Tensor(arrays["graph_logits"], requires_grad=True),
            temperature=config.gumbel_temperature)
        scm_params = _init_scm(config, graph_post.dims,
                               np.random.default_rng(0))
        for name, t in scm_params.named_parameters():
            t.data = arrays[f"scm.{name}"]
        membership = None
        if manifest.get("has_membership"):
            n = len(manifest["train_indices"]) + len(manifest["val_indices"])
            w = np.fromfile(os.path.join(directory, "membership.bin"),
                            dtype="<f8").reshape(n, config.k)
            membership = MembershipPosterior(
                Tensor(w, requires_grad=True),
                temperature=config.membership_temperature)
        al = manifest["al_state"]
        al_state = AugLagState(
            alpha=al["alpha"], rho=al["rho"],
            dag_tolerance=config.dag_tolerance,
            outer_steps_max=config.outer_steps,
            inner_steps_max=config.inner_steps)
        al_state.outer_step = al["outer_step"]
        al_state.last_h = al["last_h"]
        al_state.consecutive_ok = al["consecutive_ok"]
        al_state.converged = al["converged"]
        return cls(config=config, graph_post=graph_post,
                   scm_params=scm_params, membership=membership,
                   member_prior=MembershipPrior(
                       config.membership_prior,
                       config.membership_prior_decay),
                   graph_prior=_graph_prior(config),
                   al_state=al_state,
                   train_indices=np.asarray(manifest["train_indices"]),
                   val_indices=np.asarray(manifest["val_indices"]),
                   best_val_elbo=manifest["best_val_elbo"],
                   dag_converged=manifest["dag_converged"])


def _graph_prior(config: TrainConfig) -> GraphPrior:
    return GraphPrior(sparsity_lambda=config.sparsity_lambda,
                      lagged_slices_only=not config.sparsity_all_slices)


def _init_scm(config: TrainConfig, dims: int, rng: np.random.Generator):
    if config.variant == "linear":
        return md.LinearScmParams.init(config.k, config.lag, dims,
                                       train_noise=config.train_noise)
    return md.NonlinearScmParams.init(
        config.k, config.lag, dims, rng, embed_dim=config.embed_dim,
        hidden=config.hidden, spline=config.spline_spec())


# ---------------------------------------------------------------------------
# training loop


HISTORY_COLUMNS = ["step", "outer", "inner", "phase", "elbo", "loglik",
                   "log_pz", "membership_entropy", "graph_log_prior",
                   "graph_entropy", "max_h_sample", "max_h_probs", "alpha",
                   "rho", "val_elbo"]


def _h_of_probs(graph_post: GraphPosterior) -> float:
    probs = graph_post.edge_probs()
    h = gr.acyclicity_penalties(Tensor(probs[:, 0])).data
    return float(h.max())


class _Fitter:
    def __init__(self, dataset, config: TrainConfig, mixture: bool):
        x = np.asarray(dataset.data, dtype=np.float64)
        n, t, d = x.shape
        if n < config.k:
            raise ConfigError(f"dataset has {n} samples, fewer than "
                              f"K = {config.k}")
        if t <= config.lag:
            raise ConfigError(f"series length {t} must exceed lag "
                              f"{config.lag}")
        self.x = x
        self.config = config
        self.mixture = mixture
        ss = np.random.SeedSequence(config.seed)
        split_ss, init_ss, gumbel_ss, batch_ss, val_ss = ss.spawn(5)
        split_rng = np.random.default_rng(split_ss)
        init_rng = np.random.default_rng(init_ss)
        self.gumbel_rng = np.random.default_rng(gumbel_ss)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.val_seed = val_ss
        perm = split_rng.permutation(n)
        n_val = int(round(config.val_fraction * n))
        self.val_indices = np.sort(perm[:n_val])
        self.train_indices = np.sort(perm[n_val:])
        self.graph_post = GraphPosterior.init(
            config.k, config.lag, d, init_rng,
            init_edge_prob=config.init_edge_prob,
            noise_scale=config.init_logit_noise,
            temperature=config.gumbel_temperature)
        self.scm_params = _init_scm(config, d, init_rng)
        self.membership = MembershipPosterior.init(
            n, config.k, config.membership_temperature) if mixture else None
        self.member_prior = MembershipPrior(config.membership_prior,
                                            config.membership_prior_decay)
        self.graph_prior = _graph_prior(config)
        self.al = AugLagState(alpha=config.alpha_init, rho=config.rho_init,
                              dag_tolerance=config.dag_tolerance,
                              outer_steps_max=config.outer_steps,
                              inner_steps_max=config.inner_steps)
        self.opt_matrix = Adam([self.graph_post.logits], config.matrix_lr)
        like_group = list(self.scm_params.trainable_parameters())
        if self.membership is not None:
            like_group.append(self.membership.weights)
        self.opt_like = Adam(like_group, config.likelihood_lr)
        self.frozen_noise = None
        if config.gumbel_mode == "frozen":
            shape = self.graph_post.logits.shape
            self.frozen_noise = (gr.gumbel(self.gumbel_rng, shape)
                                 - gr.gumbel(self.gumbel_rng, shape))
        self.history: list[dict] = []
        self._batch_queue: list[np.ndarray] = []
        self._best: dict | None = None
        self.best_val_elbo = -math.inf

    # -- batching -----------------------------------------------------------

    def _next_batch(self) -> np.ndarray:
        if not self._batch_queue:
            perm = self.batch_rng.permutation(self.train_indices)
            bs = self.config.batch_size
            self._batch_queue = [perm[i:i + bs]
                                 for i in range(0, len(perm), bs)]
        return self._batch_queue.pop(0)

    # -- steps ---------------------------------------------------------------

    def _train_step(self) -> ElboResult:
        idx = self._next_batch()
        scale = len(self.train_indices) / len(idx)
        noise = self.frozen_noise
        with Tape() as tape:
            res = elbo(self.x[idx], self.graph_post, self.scm_params,
                       self.membership, self.member_prior, self.graph_prior,
                       al_state=self.al, rng=self.gumbel_rng,
                       sample_indices=idx if self.mixture else None,
                       hard=self.config.hard_samples, data_scale=scale,
                       gumbel_noise=noise, prior_on=self.config.prior_on)
            loss = res.value * -1.0
            grads = tape.backward(loss)
        self.opt_matrix.step(grads)
        self.opt_like.step(grads)
        return res

    def _validation_elbo(self) -> float:
        """Membership inference step on validation rows (mixture only),
        then the validation ELBO under a fixed validation seed."""
        if len(self.val_indices) == 0:
            return math.nan
        x_val = self.x[self.val_indices]
        if self.mixture:
            rng = np.random.default_rng(self.val_seed)
            with Tape() as tape:
                res = elbo(x_val, self.graph_post, self.scm_params,
                           self.membership, self.member_prior,
                           self.graph_prior, al_state=self.al, rng=rng,
                           sample_indices=self.val_indices,
                           hard=self.config.hard_samples,
                           gumbel_noise=self.frozen_noise,
                           prior_on=self.config.prior_on)
                grads = tape.backward(res.value * -1.0)
            g = grads.get(self.membership.weights)
            if g is not None:
                w = self.membership.weights.data.copy()
                w[self.val_indices] -= self.config.likelihood_lr \
                    * g[self.val_indices]
                self.membership.weights.data = w
        rng = np.random.default_rng(self.val_seed)
        res = elbo(x_val, self.graph_post, self.scm_params, self.membership,
                   self.member_prior, self.graph_prior, al_state=self.al,
                   rng=rng,
                   sample_indices=self.val_indices if self.mixture else None,
                   hard=self.config.hard_samples,
                   gumbel_noise=self.frozen_noise,
                   prior_on=self.config.prior_on)
        return res.elbo

    def _snapshot(self) -> dict:
        snap = {
            "logits": self.graph_post.logits.data.copy(),
            "scm": [(n, t.data.copy())
                    for n, t in self.scm_params.named_parameters()],
        }
        if self.membership is not None:
            snap["membership"] = self.membership.weights.data.copy()
        return snap

    def _restore(self, snap: dict) -> None:
        self.graph_post.logits.data = snap["logits"].copy()
        for (name, arr), (_, t) in zip(
                snap["scm"], self.scm_params.named_parameters()):
            t.data = arr.copy()
        if self.membership is not None and "membership" in snap:
            self.membership.weights.data = snap["membership"].copy()

    def _record(self, step, outer, inner, phase, res: ElboResult | None,
                max_h_probs=math.nan, val_elbo=math.nan) -> None:
        row = {
            "step": step, "outer": outer, "inner": inner, "phase": phase,
            "elbo": res.elbo if res else math.nan,
            "loglik": res.parts["loglik"] if res else math.nan,
            "log_pz": res.parts["log_pz"] if res else math.nan,
            "membership_entropy":
                res.parts["membership_entropy"] if res else math.nan,
            "graph_log_prior":
                res.parts["graph_log_prior"] if res else math.nan,
            "graph_entropy":
                res.parts["graph_entropy"] if res else math.nan,
            "max_h_sample":
                float(res.h_values.max()) if res else math.nan,
            "max_h_probs": max_h_probs,
            "alpha": self.al.alpha, "rho": self.al.rho,
            "val_elbo": val_elbo,
        }
        self.history.append(row)

    # -- main loop -----------------------------------------------------------

    def run(self) -> TrainedState:
        cfg = self.config
        step = 0
        for outer in range(cfg.outer_steps):
            for inner in range(cfg.inner_steps):
                res = self._train_step()
                if inner % cfg.log_interval == 0 \
                        or inner == cfg.inner_steps - 1:
                    self._record(step, outer, inner, "train", res)
                step += 1
            h_probs = _h_of_probs(self.graph_post)
            val_elbo = self._validation_elbo()
            self._record(step, outer, cfg.inner_steps, "val", None,
                         max_h_probs=h_probs, val_elbo=val_elbo)
            # model selection only among constraint-satisfying snapshots:
            # early cyclic graphs fit better and would otherwise win
            h_gate = cfg.dag_tolerance if cfg.checkpoint_h_tol is None \
                else cfg.checkpoint_h_tol
            if h_probs < h_gate and not math.isnan(val_elbo) \
                    and val_elbo > self.best_val_elbo:
                self.best_val_elbo = val_elbo
                self._best = self._snapshot()
            if outer >= cfg.warmup_outers:
                self.al.after_inner_phase(
                    h_probs, cfg.rho_growth, cfg.h_retention, cfg.rho_max,
                    cfg.dag_converged_steps)
            if self.al.converged:
                break
        if self._best is not None:
            self._restore(self._best)
        dag_converged = self.al.converged or (
            _h_of_probs(self.graph_post) < cfg.dag_tolerance)
        if not dag_converged:
            warnings.warn("training finished without meeting the DAG "
                          f"tolerance {cfg.dag_tolerance}", RuntimeWarning)
        return TrainedState(
            config=cfg, graph_post=self.graph_post,
            scm_params=self.scm_params, membership=self.membership,
            member_prior=self.member_prior, graph_prior=self.graph_prior,
            al_state=self.al, train_indices=self.train_indices,
            val_indices=self.val_indices, history=self.history,
            best_val_elbo=self.best_val_elbo, dag_converged=dag_converged)


def train(dataset, config: TrainConfig, out_dir: str | None = None
          ) -> TrainedState:
    """Fit the K-component mixture; optionally write history.csv and the
    best-validation checkpoint under ``out_dir``."""
    state = _Fitter(dataset, config, mixture=True).run()
    if out_dir is not None:
        _write_outputs(state, out_dir)
    return state


def train_single_scm(dataset, config: TrainConfig,
                     out_dir: str | None = None) -> TrainedState:
    """Single-SCM baseline: same loop, no mixture machinery. Requires K = 1;
    with identical seeds its loss trajectory is bit-identical to train()."""
    if config.k != 1:
        config = replace(config, k=1)
    state = _Fitter(dataset, config, mixture=False).run()
    if out_dir is not None:
        _write_outputs(state, out_dir)
    return state


def infer_membership_validation(state: TrainedState, dataset,
                                indices: np.ndarray | None = None,
                                rng: np.random.Generator | None = None,
                                lr: float | None = None
                                ) -> tuple[np.ndarray, float]:
    """One gradient-ascent step on the membership rows of the given samples
    (all other parameters frozen), then the resulting validation ELBO.

    Returns (updated responsibility rows, validation ELBO). No-op on
    responsibilities when K = 1.
    """
    if state.membership is None:
        raise ConfigError("state has no membership posterior")
    if indices is None:
        indices = state.val_indices
    indices = np.asarray(indices)
    x_val = np.asarray(dataset.data, dtype=np.float64)[indices]
    rng = rng or np.random.default_rng(0)
    lr = state.config.likelihood_lr if lr is None else lr
    seed_state = rng.bit_generator.state
    with Tape() as tape:
        res = elbo(x_val, state.graph_post, state.scm_params,
                   state.membership, state.member_prior, state.graph_prior,
                   al_state=state.al_state, rng=rng, sample_indices=indices,
                   hard=state.config.hard_samples,
                   prior_on=state.config.prior_on)
        grads = tape.backward(res.value * -1.0)
    g = grads.get(state.membership.weights)
    if g is not None:
        w = state.membership.weights.data.copy()
        w[indices] -= lr * g[indices]
        state.membership.weights.data = w
    rng.bit_generator.state = seed_state
    res = elbo(x_val, state.graph_post, state.scm_params, state.membership,
               state.member_prior, state.graph_prior,
               al_state=state.al_state, rng=rng, sample_indices=indices,
               hard=state.config.hard_samples,
               prior_on=state.config.prior_on)
    rows = state.membership.probabilities()[indices]
    return rows, res.elbo


def _write_outputs(state: TrainedState, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_history_csv(state.history,
                      os.path.join(out_dir, "history.csv"))
    state.save(os.path.join(out_dir, "checkpoint_best"))


def write_history_csv(history: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
    os.replace(tmp, path)


def load_history_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for key, val in raw.items():
                if key in ("step", "outer", "inner"):
                    row[key] = int(val)
                elif key == "phase":
                    row[key] = val
                else:
                    row[key] = float(val)
            rows.append(row)
        return rows


def exact_mixture_loglik(ll_table: np.ndarray,
                         log_pz: np.ndarray) -> float:
    """Enumerated log p(X) = sum_n log sum_k p(Z=k) p(X_n | M_k), via
    log-sum-exp; the reference quantity the ELBO lower-bounds."""
    scores = ll_table + log_pz[None, :]
    m = scores.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(
        np.exp(scores - m).sum(axis=1))).sum())
