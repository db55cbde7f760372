"""Affine-coupling normalizing flow from 24-D box corner vectors to a
standard-normal "latent box" space.

Layer ``l`` keeps one half of the dimensions fixed and maps the other half
as ``y = x * exp(s(x_fixed)) + t(x_fixed)``; even layers condition on dims
0-11 and move 12-23, odd layers the reverse. ``s = cap * tanh(raw)`` keeps
the exponent bounded. A batch-normalization layer follows every second
coupling layer (except the last). Inputs are whitened with training-set
statistics before entering the flow; all log-likelihoods are reported in that
whitened space.

Box corner vectors are linearly degenerate: every parallelepiped satisfies 12
linear edge-equality constraints, so half of the 24 directions carry no
variance. Full-covariance whitening (eigenvalue floor ``std_floor``) maps those
directions to a tiny input scale, which keeps decoded samples on the box
manifold. ``standardize="diagonal"`` uses per-dimension mean and std instead.
"""
from __future__ import annotations

import json
import math
import struct
from typing import Dict, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import neural as nn
from .errors import NonFiniteLoss
from .neural import AdamConfig, ParamStore, Tensor
from .validation import check_boxes

DIM = 24
HALF = 12
BN_EPS = 1e-5
MODEL_MAGIC = b"PSSF"


def _bn_positions(n_layers):
    return [l for l in range(n_layers - 1) if l % 2 == 1]


class BoxFlow(TransformerMixin, BaseEstimator):
    """RealNVP-style flow over box corner vectors.

    ``transform`` maps boxes to latent boxes, ``inverse_transform`` maps back
    and ``score_samples`` returns per-box log-likelihoods (standardized
    space). ``fit`` trains by maximum likelihood with Adam.
    """

    def __init__(
        self,
        n_layers=8,
        hidden=128,
        n_hidden_layers=2,
        batchnorm=True,
        bn_momentum=0.1,
        standardize="whiten",
        std_floor=1e-4,
        learning_rate=1e-3,
        batch_size=32,
        epochs=200,
        seed=0,
        dtype="float32",
    ):
        self.n_layers = n_layers
        self.hidden = hidden
        self.n_hidden_layers = n_hidden_layers
        self.batchnorm = batchnorm
        self.bn_momentum = bn_momentum
        self.standardize = standardize
        self.std_floor = std_floor
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    # -- construction -------------------------------------------------------
    def _build(self):
        store = ParamStore(self.seed, self.dtype)
        sizes = [HALF] + [self.hidden] * self.n_hidden_layers + [HALF]
        self.scale_nets_ = []
        self.shift_nets_ = []
        for l in range(self.n_layers):
            self.scale_nets_.append(nn.MLP(store, f"c{l}.s", sizes, zero_last=True))
            self.shift_nets_.append(nn.MLP(store, f"c{l}.t", sizes, zero_last=True))
            store.add(f"c{l}.cap", np.ones(HALF))
        self.bn_after_ = _bn_positions(self.n_layers) if self.batchnorm else []
        for l in self.bn_after_:
            store.add(f"bn{l}.log_gamma", np.zeros(DIM))
            store.add(f"bn{l}.beta", np.zeros(DIM))
        self.store_ = store
        # var + eps == 1 so an untrained normalization layer is the identity.
        self.running_ = {l: {"mean": np.zeros(DIM), "var": np.full(DIM, 1.0 - BN_EPS)} for l in self.bn_after_}
        self.mean_ = np.zeros(DIM)
        self.whiten_ = np.eye(DIM)
        self.unwhiten_ = np.eye(DIM)
        return self

    def _fit_standardizer(self, B):
        mode = self.standardize
        if mode in (False, None, "none"):
            return
        mean = B.mean(axis=0)
        if mode == "diagonal":
            std = np.maximum(B.std(axis=0), self.std_floor)
            W, Winv = np.diag(1.0 / std), np.diag(std)
        elif mode in (True, "whiten"):
            evals, U = np.linalg.eigh(np.cov(B - mean, rowvar=False, bias=True))
            std = np.sqrt(np.maximum(evals, 0.0))
            std = np.maximum(std, self.std_floor)
            W, Winv = U / std, (U * std).T
        else:
            raise ValueError(f"standardize must be 'whiten', 'diagonal' or 'none', got {mode!r}")
        # Stored as float32 so a reloaded model reproduces the fitted one.
        self.mean_ = mean.astype(np.float32).astype(np.float64)
        self.whiten_ = W.astype(np.float32).astype(np.float64)
        self.unwhiten_ = Winv.astype(np.float32).astype(np.float64)

    def init_identity(self):
        """Unfitted flow whose forward map is the identity (zero networks,
        identity standardization); useful as a baseline and for tests."""
        return self._build()

    def masks(self):
        """Per coupling layer, boolean mask of the dims held fixed."""
        out = []
        for l in range(self.n_layers):
            m = np.zeros(DIM, dtype=bool)
            m[:HALF] = l % 2 == 0
            m[HALF:] = l % 2 == 1
            out.append(m)
        return out

    @staticmethod
    def _halves(l):
        # (fixed, moved) slices of layer l
        return (slice(0, HALF), slice(HALF, DIM)) if l % 2 == 0 else (slice(HALF, DIM), slice(0, HALF))

    def _scale_shift(self, l, fixed, params):
        raw = self.scale_nets_[l](fixed, params)
        s = params[f"c{l}.cap"] * nn.tanh(raw)
        t = self.shift_nets_[l](fixed, params)
        return s, t

    # -- forward / inverse ---------------------------------------------------
    def _forward(self, z, params, train=False, update_running=False):
        """Standardized input -> (psi, logdet) as tensors."""
        z = nn.as_tensor(z)
        logdet = nn.Tensor(np.zeros(z.shape[0], dtype=z.dtype))
        for l in range(self.n_layers):
            fs, ms = self._halves(l)
            fixed, moved = z[:, fs], z[:, ms]
            s, t = self._scale_shift(l, fixed, params)
            moved = moved * nn.exp(s) + t
            z = nn.concat([fixed, moved] if l % 2 == 0 else [moved, fixed], axis=1)
            logdet = logdet + s.sum(axis=1)
            if l in self.bn_after_:
                z, ld = self._bn_forward(l, z, params, train, update_running)
                logdet = logdet + ld
        return z, logdet

    def _bn_forward(self, l, z, params, train, update_running):
        lg, beta = params[f"bn{l}.log_gamma"], params[f"bn{l}.beta"]
        if train:
            mean = z.mean(axis=0)
            centered = z - mean
            var = (centered * centered).mean(axis=0)
            if update_running:
                m = self.bn_momentum
                r = self.running_[l]
                r["mean"] = (1 - m) * r["mean"] + m * mean.data.astype(np.float64)
                r["var"] = (1 - m) * r["var"] + m * var.data.astype(np.float64)
            inv_std = (var + BN_EPS) ** -0.5
            out = centered * inv_std * nn.exp(lg) + beta
            ld = (lg - nn.log(var + BN_EPS) * 0.5).sum()
        else:
            r = self.running_[l]
            mean = r["mean"].astype(z.dtype)
            var = r["var"].astype(z.dtype)
            out = (z - mean) * (1.0 / np.sqrt(var + BN_EPS)).astype(z.dtype) * nn.exp(lg) + beta
            ld = (lg - 0.5 * np.log(var + BN_EPS).astype(z.dtype)).sum()
        return out, ld * np.ones(z.shape[0], dtype=z.dtype)

    def _inverse(self, psi: np.ndarray) -> np.ndarray:
        p = {k: t.data for k, t in self.store_.items()}
        z = np.asarray(psi, dtype=self.store_.dtype).copy()
        for l in reversed(range(self.n_layers)):
            if l in self.bn_after_:
                r = self.running_[l]
                z = (z - p[f"bn{l}.beta"]) / np.exp(p[f"bn{l}.log_gamma"])
                z = z * np.sqrt(r["var"] + BN_EPS).astype(z.dtype) + r["mean"].astype(z.dtype)
            fs, ms = self._halves(l)
            fixed = z[:, fs]
            with_grad = {k: nn.Tensor(v) for k, v in p.items()}
            s, t = self._scale_shift(l, fixed, with_grad)
            z[:, ms] = (z[:, ms] - t.data) * np.exp(-s.data)
        return z

    def _standardize(self, B):
        return ((B - self.mean_) @ self.whiten_).astype(self.store_.dtype)

    def _destandardize(self, Z):
        return Z @ self.unwhiten_ + self.mean_

    def _const_params(self, dtype=None):
        return {k: nn.Tensor(t.data if dtype is None else t.data.astype(dtype)) for k, t in self.store_.items()}

    def forward_with_logdet(self, boxes, train=False):
        """``(psi, logdet)`` arrays for raw boxes."""
        check_is_fitted(self, "store_")
        Z = self._standardize(check_boxes(boxes))
        psi, ld = self._forward(Z, self._const_params(), train=train)
        return psi.data, ld.data

    def transform(self, boxes):
        return self.forward_with_logdet(boxes)[0]

    def inverse_transform(self, psi):
        check_is_fitted(self, "store_")
        psi = np.asarray(psi, dtype=np.float64)
        if psi.ndim == 1:
            psi = psi[None]
        return self._destandardize(self._inverse(psi))

    def nll_tensor(self, Z, params, train=False, update_running=False) -> Tensor:
        """Mean negative log-likelihood of standardized inputs ``Z``."""
        psi, ld = self._forward(Z, params, train=train, update_running=update_running)
        zeros = np.zeros(psi.shape, dtype=psi.dtype)
        logp = nn.gaussian_log_density(psi, zeros, zeros) + ld
        return -logp.mean()

    def score_samples(self, boxes):
        """Per-box log-likelihood in standardized space."""
        psi, ld = self.forward_with_logdet(boxes)
        return -0.5 * np.sum(psi.astype(np.float64) ** 2, axis=1) - HALF * nn.LOG_2PI + ld

    def nll(self, boxes) -> float:
        return float(-np.mean(self.score_samples(boxes)))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    # -- training ------------------------------------------------------------
    def fit(self, X, y=None):
        B = check_boxes(X)
        self._build()
        self._fit_standardizer(B)
        Z = self._standardize(B)
        cfg = AdamConfig(self.learning_rate, batch_size=self.batch_size, epochs=self.epochs)
        rng = np.random.default_rng(self.seed + 1)
        self.history_ = []
        self.initial_nll_ = float(self.nll_tensor(Z, self._const_params()).data)
        batch_index = 0
        for epoch in range(self.epochs):
            losses = []
            for idx in nn.iterate_minibatches(len(Z), self.batch_size, rng):
                if len(idx) < 2 and self.bn_after_:
                    continue
                self.store_.zero_grad()
                loss = self.nll_tensor(Z[idx], self.store_.params, train=True, update_running=True)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise NonFiniteLoss(f"flow NLL is {val} at batch {batch_index}", batch_index)
                loss.backward()
                nn.adam_step(self.store_, self.store_.grads(), cfg)
                losses.append(val)
                batch_index += 1
            self.history_.append(float(np.mean(losses)) if losses else float("nan"))
        self.calibrate_running_stats(Z)
        return self

    def calibrate_running_stats(self, Z):
        """Set running statistics to full-batch statistics at the current
        parameters, so inference mode reproduces full-batch training mode."""
        if not self.bn_after_:
            return self
        saved = self.bn_momentum
        self.bn_momentum = 1.0
        try:
            self._forward(np.asarray(Z, dtype=self.store_.dtype), self._const_params(), train=True, update_running=True)
        finally:
            self.bn_momentum = saved
        # Round to float32 so a saved and reloaded model behaves identically.
        for r in self.running_.values():
            r["mean"] = r["mean"].astype(np.float32).astype(np.float64)
            r["var"] = r["var"].astype(np.float32).astype(np.float64)
        return self

    # -- persistence ---------------------------------------------------------
    def header(self) -> Dict:
        return {
            "format": "boxflow",
            "version": 1,
            "params": self.get_params(),
            "n_layers": self.n_layers,
            "masks": [m.astype(int).tolist() for m in self.masks()],
            "bn_after": list(self.bn_after_),
        }

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "store_")
        arrays = dict(self.store_.arrays())
        arrays["standardize.mean"] = self.mean_
        arrays["standardize.whiten"] = self.whiten_
        arrays["standardize.unwhiten"] = self.unwhiten_
        for l, r in self.running_.items():
            arrays[f"bn{l}.running_mean"] = r["mean"]
            arrays[f"bn{l}.running_var"] = r["var"]
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        return MODEL_MAGIC + struct.pack("<I", len(head)) + head + nn.write_weights(arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BoxFlow":
        if data[:4] != MODEL_MAGIC:
            raise ValueError("not a box-flow model file")
        (n,) = struct.unpack_from("<I", data, 4)
        head = json.loads(data[8: 8 + n].decode("utf-8"))
        arrays, _ = nn.read_weights(data, 8 + n)
        model = cls(**head["params"])._build()
        model.mean_ = arrays.pop("standardize.mean").astype(np.float64)
        model.whiten_ = arrays.pop("standardize.whiten").astype(np.float64)
        model.unwhiten_ = arrays.pop("standardize.unwhiten").astype(np.float64)
        for l in model.bn_after_:
            model.running_[l] = {
                "mean": arrays.pop(f"bn{l}.running_mean").astype(np.float64),
                "var": arrays.pop(f"bn{l}.running_var").astype(np.float64),
            }
        model.store_.load_arrays(arrays)
        return model

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BoxFlow":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
