"""Per-component structural-equation likelihood models.

Both variants score a batch of series under all K mixture components at once,
returning a (B, K) table of log p(X | component). The first L time steps are
conditioned on and never scored.

Linear variant: prediction for node d at time t is the graph-masked weighted
sum over lagged and instantaneous parents; residuals get a full Gaussian
log-density (normalization constants included) with per-node log standard
deviations, zero by default and optionally trainable.

Nonlinear variant: structural equations are a hypernetwork over per-component
embeddings with shared perceptrons; residuals are scored through a
conditional spline flow whose parameters come from a second hypernetwork
conditioned on lagged parents only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .splines import SplineSpec, SplineTransform

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Invalid model input or configuration."""


# ---------------------------------------------------------------------------
# shared perceptron


@dataclass
class Mlp:
    """Two-hidden-layer perceptron with layer normalization and a skip
    connection, applied over the last axis."""

    w1: Tensor
    b1: Tensor
    g1: Tensor
    c1: Tensor
    w2: Tensor
    b2: Tensor
    g2: Tensor
    c2: Tensor
    w3: Tensor
    b3: Tensor

    @classmethod
    def init(cls, in_width: int, hidden: int, out_width: int,
             rng: np.random.Generator, zero_final: bool = False) -> "Mlp":
        def dense(n_in, n_out, zero=False):
            scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
            w = Tensor(scale * rng.standard_normal((n_in, n_out)),
                       requires_grad=True)
            b = Tensor(np.zeros(n_out), requires_grad=True)
            return w, b

        w1, b1 = dense(in_width, hidden)
        w2, b2 = dense(hidden, hidden)
        w3, b3 = dense(hidden, out_width, zero=zero_final)
        ones = lambda n: Tensor(np.ones(n), requires_grad=True)
        zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)
        return cls(w1, b1, ones(hidden), zeros(hidden),
                   w2, b2, ones(hidden), zeros(hidden), w3, b3)

    def _affine(self, t: Tensor, w: Tensor, b: Tensor) -> Tensor:
        out = ad.matmul(t, w)
        bb = ad.broadcast_to(ad.reshape(b, (1, b.shape[0])), out.shape)
        return out + bb

    def _ln_act(self, t: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        y = ad.layer_norm(t)
        g = ad.broadcast_to(ad.reshape(gain, (1, gain.shape[0])), y.shape)
        c = ad.broadcast_to(ad.reshape(bias, (1, bias.shape[0])), y.shape)
        return ad.leaky_relu(y * g + c)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        flat = ad.reshape(x, (n, x.shape[-1]))
        h = self._ln_act(self._affine(flat, self.w1, self.b1),
                         self.g1, self.c1)
        h = h + self._ln_act(self._affine(h, self.w2, self.b2),
                             self.g2, self.c2)
        out = self._affine(h, self.w3, self.b3)
        return ad.reshape(out, lead + (out.shape[-1],))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        names = ("w1", "b1", "g1", "c1", "w2", "b2", "g2", "c2", "w3", "b3")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


# ---------------------------------------------------------------------------
# linear variant


@dataclass
class LinearScmParams:
    """Weight tensor (K, L+1, D, D) plus per-node noise log-std (K, D)."""

    weights: Tensor
    noise_log_std: Tensor
    train_noise: bool = False

    @classmethod
    def init(cls, k: int, lag: int, dims: int,
             train_noise: bool = False) -> "LinearScmParams":
        return cls(Tensor(np.zeros((k, lag + 1, dims, dims)),
                          requires_grad=True),
                   Tensor(np.zeros((k, dims)), requires_grad=train_noise),
                   train_noise=train_noise)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def lag(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def dims(self) -> int:
        return self.weights.shape[2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("weights", self.weights),
                ("noise_log_std", self.noise_log_std)]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad]


def _lagged_design(x: np.ndarray, lag: int) -> np.ndarray:
    """(B, T, D) -> (B*(T-L), (L+1)*D); column block tau holds the values of
    all D variables at offset t - tau (tau = 0 is same-time)."""
    b, t, d = x.shape
    tw = t - lag
    cols = [x[:, lag - tau:t - tau, :].reshape(b * tw, d)
            for tau in range(lag + 1)]
    return np.concatenate(cols, axis=1)


def linear_loglik(x: np.ndarray, graphs: Tensor,
                  params: LinearScmParams) -> Tensor:
    """Gaussian log-likelihood table (B, K) of a batch under all components.

    Entry (n, k) sums, over time steps L..T-1 and nodes, the log density of
    the residual between the observed value and the graph-masked linear
    prediction from instantaneous and lagged parents.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ModelError(f"expected batch (B, T, D), got shape {x.shape}")
    b, t, d = x.shape
    lag = params.lag
    k = params.k
    if t <= lag:
        raise ModelError(f"series length {t} must exceed lag {lag}")
    if graphs.shape != params.weights.shape:
        raise ModelError(f"graph sample shape {graphs.shape} does not match "
                         f"weights {params.weights.shape}")
    tw = t - lag
    design = Tensor(_lagged_design(x, lag))
    masked = graphs * params.weights
    w2 = ad.reshape(ad.transpose(masked, (1, 2, 0, 3)), ((lag + 1) * d, k * d))
    pred = ad.reshape(ad.matmul(design, w2), (b, tw, k, d))
    target = ad.broadcast_to(Tensor(x[:, lag:, :].reshape(b, tw, 1, d)),
                             (b, tw, k, d))
    log_std = ad.broadcast_to(
        ad.reshape(params.noise_log_std, (1, 1, k, d)), (b, tw, k, d))
    z = (target - pred) * ad.exp(-log_std)
    elem = (z * z) * -0.5 - log_std - 0.5 * LOG_2PI
    return ad.tensor_sum(elem, axis=(1, 3))


# ---------------------------------------------------------------------------
# nonlinear variant


@dataclass
class NonlinearScmParams:
    """Embeddings per component plus shared hypernetworks.

    ``func_embeddings`` and ``noise_embeddings`` have shape (K, L+1, D, e).
    ``lift_func``/``head_func`` implement the structural equations (head
    output width 1); ``lift_noise``/``head_noise`` produce the spline
    parameters (head output width 3*bins - 1, zero-initialized so training
    starts at the identity flow).
    """

    func_embeddings: Tensor
    noise_embeddings: Tensor
    lift_func: Mlp
    head_func: Mlp
    lift_noise: Mlp
    head_noise: Mlp
    spline: SplineSpec = field(default_factory=SplineSpec)

    @classmethod
    def init(cls, k: int, lag: int, dims: int, rng: np.random.Generator,
             embed_dim: int | None = None, hidden: int | None = None,
             spline: SplineSpec | None = None) -> "NonlinearScmParams":
        e = dims if embed_dim is None else embed_dim
        h = max(4 * dims, e, 64) if hidden is None else hidden
        spline = spline or SplineSpec()
        shape = (k, lag + 1, dims, e)
        emb = lambda: Tensor(0.1 * rng.standard_normal(shape),
                             requires_grad=True)
        return cls(
            func_embeddings=emb(),
            noise_embeddings=emb(),
            lift_func=Mlp.init(1 + e, h, e, rng),
            head_func=Mlp.init(2 * e, h, 1, rng),
            lift_noise=Mlp.init(1 + e, h, e, rng),
            head_noise=Mlp.init(2 * e, h, spline.n_params, rng,
                                zero_final=True),
            spline=spline,
        )

    @property
    def k(self) -> int:
        return self.func_embeddings.shape[0]

    @property
    def lag(self) -> int:
        return self.func_embeddings.shape[1] - 1

    @property
    def dims(self) -> int:
        return self.func_embeddings.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.func_embeddings.shape[3]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("func_embeddings", self.func_embeddings),
               ("noise_embeddings", self.noise_embeddings)]
        out += self.lift_func.named_parameters("lift_func")
        out += self.head_func.named_parameters("head_func")
        out += self.lift_noise.named_parameters("lift_noise")
        out += self.head_noise.named_parameters("head_noise")
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad]


def _stacked_history(x: np.ndarray, lag: int, taus) -> np.ndarray:
    """(B, T, D) -> (B, T-L, n_taus, D) with axis 2 enumerating the
    requested offsets."""
    b, t, d = x.shape
    tw = t - lag
    return np.stack([x[:, lag - tau:t - tau, :] for tau in taus], axis=2)


def _hyper_features(x: np.ndarray, lag: int, taus, graphs_sub: Tensor,
                    emb_sub: Tensor, emb_own: Tensor, lift: Mlp, head: Mlp,
                    k: int, e: int) -> Tensor:
    """Shared hypernetwork pattern of the structural equations: lift each
    (value, embedding) pair, aggregate over the masked parent set, then run
    the head on [aggregate, own-node embedding]. Returns (B, Tw, K, D, out).

    ``taus`` selects the offsets (all of 0..L for the structural equations,
    1..L for the noise conditioner); ``graphs_sub`` and ``emb_sub`` are the
    matching slices, ``emb_own`` the lag-0 embedding (K, D, e).
    """
    b, t, d = x.shape
    tw = t - lag
    n_tau = len(taus)
    p = n_tau * d
    hist = _stacked_history(x, lag, taus)  # (B, Tw, n_tau, D)
    feat_x = ad.broadcast_to(
        Tensor(hist.reshape(b, tw, 1, n_tau, d, 1)), (b, tw, k, n_tau, d, 1))
    feat_e = ad.broadcast_to(
        ad.reshape(emb_sub, (1, 1, k, n_tau, d, e)), (b, tw, k, n_tau, d, e))
    lifted = lift(ad.concat([feat_x, feat_e], axis=-1))
    e_out = lifted.shape[-1]
    msgs = ad.reshape(ad.transpose(
        ad.reshape(lifted, (b, tw, k, p, e_out)), (2, 3, 0, 1, 4)),
        (k, p, b * tw * e_out))
    mask = ad.transpose(ad.reshape(graphs_sub, (k, p, d)), (0, 2, 1))
    agg = ad.matmul(mask, msgs)  # (K, D, B*Tw*e_out)
    agg = ad.transpose(ad.reshape(agg, (k, d, b, tw, e_out)), (2, 3, 0, 1, 4))
    own = ad.broadcast_to(
        ad.reshape(emb_own, (1, 1, k, d, e)), (b, tw, k, d, e))
    return head(ad.concat([agg, own], axis=-1))


def _check_nonlinear_inputs(x: np.ndarray, graphs: Tensor,
                            params: NonlinearScmParams):
    if x.ndim != 3:
        raise ModelError(f"expected batch (B, T, D), got shape {x.shape}")
    b, t, d = x.shape
    if d != params.dims:
        raise ModelError(f"data has {d} variables, model expects "
                         f"{params.dims}")
    if t <= params.lag:
        raise ModelError(f"series length {t} must exceed lag {params.lag}")
    expected = (params.k, params.lag + 1, params.dims, params.dims)
    if graphs.shape != expected:
        raise ModelError(f"graph sample shape {graphs.shape}, expected "
                         f"{expected}")


def _nonlinear_predict_btkd(x: np.ndarray, graphs: Tensor,
                            params: NonlinearScmParams) -> Tensor:
    b, t, d = x.shape
    lag, k = params.lag, params.k
    emb = params.func_embeddings
    out = _hyper_features(x, lag, range(lag + 1), graphs, emb, emb[:, 0],
                          params.lift_func, params.head_func, k,
                          params.embed_dim)
    return ad.reshape(out, (b, t - lag, k, d))


def nonlinear_predict(x: np.ndarray, graphs: Tensor,
                      params: NonlinearScmParams) -> Tensor:
    """Structural-equation predictions (B, K, T-L, D)."""
    x = np.asarray(x, dtype=np.float64)
    _check_nonlinear_inputs(x, graphs, params)
    return ad.transpose(_nonlinear_predict_btkd(x, graphs, params),
                        (0, 2, 1, 3))


def nonlinear_spline_params(x: np.ndarray, graphs: Tensor,
                            params: NonlinearScmParams) -> Tensor:
    """Raw conditional spline parameters (B, Tw, K, D, 3*bins-1) from the
    noise hypernetwork, conditioned on lagged parents only."""
    b, t, d = x.shape
    lag, k = params.lag, params.k
    e = params.embed_dim
    if lag == 0:
        # no lagged parents: the aggregate message is identically zero
        own = ad.broadcast_to(
            ad.reshape(params.noise_embeddings[:, 0], (1, 1, k, d, e)),
            (b, t, k, d, e))
        zeros = Tensor(np.zeros((b, t, k, d, e)))
        return params.head_noise(ad.concat([zeros, own], axis=-1))
    emb = params.noise_embeddings
    return _hyper_features(x, lag, range(1, lag + 1), graphs[:, 1:],
                           emb[:, 1:], emb[:, 0], params.lift_noise,
                           params.head_noise, k, e)


def nonlinear_loglik(x: np.ndarray, graphs: Tensor,
                     params: NonlinearScmParams) -> Tensor:
    """Log-likelihood table (B, K): residuals of the structural equations
    scored through the conditional spline flow against a standard normal
    base."""
    x = np.asarray(x, dtype=np.float64)
    _check_nonlinear_inputs(x, graphs, params)
    b, t, d = x.shape
    lag, k = params.lag, params.k
    tw = t - lag
    pred = _nonlinear_predict_btkd(x, graphs, params)
    target = ad.broadcast_to(Tensor(x[:, lag:, :].reshape(b, tw, 1, d)),
                             (b, tw, k, d))
    resid = target - pred
    raw = nonlinear_spline_params(x, graphs, params)
    transform = SplineTransform.from_raw(raw, params.spline)
    z, logdet = transform.inverse(resid)
    elem = (z * z) * -0.5 - 0.5 * LOG_2PI + logdet
    return ad.tensor_sum(elem, axis=(1, 3))


def loglik(x: np.ndarray, graphs: Tensor, params) -> Tensor:
    """Dispatch on the parameter variant."""
    if isinstance(params, LinearScmParams):
        return linear_loglik(x, graphs, params)
    if isinstance(params, NonlinearScmParams):
        return nonlinear_loglik(x, graphs, params)
    raise ModelError(f"unknown SCM parameter type {type(params).__name__}")


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(directory: str, named: list[tuple[str, np.ndarray]],
                manifest_extra: dict) -> None:
    """Write params.bin (flat little-endian float64) plus manifest.json.

    Both writes are atomic (temp file then rename).
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in named:
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    flat = (np.concatenate(chunks) if chunks
            else np.zeros(0)).astype("<f8")
    manifest = dict(manifest_extra)
    manifest["params"] = entries
    manifest["total_size"] = int(offset)
    tmp_bin = os.path.join(directory, "params.bin.tmp")
    flat.tofile(tmp_bin)
    os.replace(tmp_bin, os.path.join(directory, "params.bin"))
    tmp_json = os.path.join(directory, "manifest.json.tmp")
    with open(tmp_json, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp_json, os.path.join(directory, "manifest.json"))


def load_params(directory: str) -> tuple[dict, dict]:
    """Read a checkpoint directory back into {name: array} plus manifest."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    flat = np.fromfile(os.path.join(directory, "params.bin"), dtype="<f8")
    if flat.size != manifest["total_size"]:
        raise ModelError(f"params.bin holds {flat.size} values, manifest "
                         f"says {manifest['total_size']}")
    arrays = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"]:entry["offset"] + size]
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).astype(
            np.float64)
    return arrays, manifest
