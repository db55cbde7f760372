"""Shape-completion VAE with a latent block reserved for the flow image of
the shape's bounding box.

Training (``mode="pssnet"``): the encoder predicts mean and log-variance for
``z = z_f || z_b``. The decoder receives a sample of ``z_f`` concatenated
with ``psi = flow(box)`` of the ground-truth box, never the sampled ``z_b``.
The encoder's ``z_b`` prediction is fitted to ``psi`` by a Gaussian
likelihood term. Inference is a plain VAE: sample the whole ``z`` from the
encoder's Gaussian and decode. ``mode="plain_vae"`` is the same network
without the partition, the replacement or the flow term.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import neural as nn
from .boxflow import BoxFlow
from .errors import NonFiniteLoss
from .neural import AdamConfig, ParamStore, Tensor
from .validation import check_boxes, check_consistent_length, check_observations, check_shapes
from .voxelcore import OrientedBox, VoxelGrid, load_binvox, save_binvox

PROB_CLAMP = 1e-7
MODEL_MAGIC = b"PSSN"
MODES = ("pssnet", "plain_vae")
SAMPLES_SCHEMA_VERSION = 1
KL_MODES = ("sample", "analytic")


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    n_features: int

    @property
    def mu_f(self):
        return self.mu[..., : self.n_features]

    @property
    def mu_b(self):
        return self.mu[..., self.n_features:]

    @property
    def logvar_f(self):
        return self.logvar[..., : self.n_features]

    @property
    def logvar_b(self):
        return self.logvar[..., self.n_features:]

    def sample(self, rng) -> np.ndarray:
        eps = rng.standard_normal(self.mu.shape)
        return self.mu + np.exp(self.logvar / 2) * eps


class PSSNet(BaseEstimator):
    """Box-conditioned VAE for diverse shape completion.

    Parameters
    ----------
    mode : {"pssnet", "plain_vae"}
    flow : fitted :class:`BoxFlow`, required for ``mode="pssnet"`` with ``box_dim > 0``.
    n_features : size of the free latent block ``z_f``.
    box_dim : size of the latent box block (24; 0 disables the partition).
        In ``plain_vae`` mode the whole latent of size ``n_features + box_dim``
        is free.
    hidden : encoder hidden widths; the decoder mirrors them.
    lambda_vae, lambda_flow : loss weights.
    kl_mode : "sample" (single-sample estimate) or "analytic" Gaussian KL.
    """

    def __init__(
        self,
        mode="pssnet",
        flow=None,
        n_features=32,
        box_dim=24,
        hidden=(512, 256),
        lambda_vae=1.0,
        lambda_flow=1.0,
        kl_mode="sample",
        learning_rate=1e-3,
        batch_size=32,
        epochs=50,
        logvar_clip=20.0,
        seed=0,
        dtype="float32",
        verbose=False,
    ):
        self.mode = mode
        self.flow = flow
        self.n_features = n_features
        self.box_dim = box_dim
        self.hidden = hidden
        self.lambda_vae = lambda_vae
        self.lambda_flow = lambda_flow
        self.kl_mode = kl_mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.logvar_clip = logvar_clip
        self.seed = seed
        self.dtype = dtype
        self.verbose = verbose

    # -- structure -----------------------------------------------------------
    @property
    def latent_dim(self) -> int:
        return self.n_features + self.box_dim

    @property
    def free_dim(self) -> int:
        """Dimensions regularized by the VAE term and sampled into the decoder
        during training."""
        return self.n_features if self.uses_box else self.latent_dim

    @property
    def uses_box(self) -> bool:
        return self.mode == "pssnet" and self.box_dim > 0

    def _check_config(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}")
        if self.n_features < 1 or self.box_dim < 0:
            raise ValueError("n_features must be >= 1 and box_dim >= 0")
        if self.uses_box and self.box_dim != 24:
            raise ValueError("the latent box block must have 24 dimensions")

    def _build(self, resolution, occupancy_prior=None):
        self._check_config()
        self.resolution_ = int(resolution)
        n_vox = self.resolution_**3
        store = ParamStore(self.seed, self.dtype)
        hidden = list(self.hidden)
        self.encoder_ = nn.MLP(store, "enc", [2 * n_vox] + hidden, out_activation="relu")
        nn.init_dense(store, "enc.mu", hidden[-1], self.latent_dim)
        nn.init_dense(store, "enc.logvar", hidden[-1], self.latent_dim)
        self.decoder_ = nn.MLP(store, "dec", [self.latent_dim] + hidden[::-1] + [n_vox])
        if occupancy_prior is not None:
            p = np.clip(occupancy_prior.reshape(-1), 1e-3, 1 - 1e-3)
            store[f"dec.{len(hidden)}.b"].data = np.log(p / (1 - p)).astype(store.dtype)
        for name in ("enc.mu.W", "enc.logvar.W"):
            store[name].data = (store[name].data * 0.1).astype(store.dtype)
        self.store_ = store
        return self

    # -- network pieces ------------------------------------------------------
    def _encode(self, xflat, params):
        h = self.encoder_(xflat, params)
        mu = nn.dense_forward(h, params["enc.mu.W"], params["enc.mu.b"])
        logvar = nn.dense_forward(h, params["enc.logvar.W"], params["enc.logvar.b"])
        return mu, nn.clip(logvar, -self.logvar_clip, self.logvar_clip)

    def _decode_logits(self, z, params):
        return self.decoder_(z, params)

    def decoder_input(self, z_sample, psi=None):
        """What the decoder reads during training: ``z_f || psi`` in pssnet
        mode (the sampled ``z_b`` is discarded), the full sample otherwise."""
        z_sample = nn.as_tensor(z_sample)
        if not self.uses_box:
            return z_sample
        return nn.concat([z_sample[:, : self.n_features], nn.as_tensor(psi, z_sample.dtype)], axis=1)

    def loss_terms(self, X, Y, psi, eps, params=None):
        """Per-sample ``(L_rec, L_VAE, L_flow)`` tensors and the scalar objective.

        ``L_rec`` is binary cross-entropy averaged over voxels with
        probabilities clamped to [1e-7, 1 - 1e-7]. ``L_VAE`` is
        ``log N(z_f; 0, I) - log N(z_f; mu_f, var_f)`` at the sampled ``z_f``
        (or minus the analytic KL). ``L_flow = log N(psi; mu_b, var_b)``.
        The objective is ``mean(L_rec - lambda_vae L_VAE - lambda_flow L_flow)``.
        """
        params = self.store_.params if params is None else params
        n = X.shape[0]
        xflat = nn.as_tensor(X).reshape(n, -1)
        mu, logvar = self._encode(xflat, params)
        z = mu + nn.exp(logvar * 0.5) * eps
        k = self.free_dim
        zf, mu_f, lv_f = z[:, :k], mu[:, :k], logvar[:, :k]
        if self.kl_mode == "sample":
            zeros = np.zeros(zf.shape, dtype=zf.dtype)
            l_vae = nn.gaussian_log_density(zf, zeros, zeros) - nn.gaussian_log_density(zf, mu_f, lv_f)
        else:
            l_vae = ((lv_f + 1.0) - mu_f * mu_f - nn.exp(lv_f)).sum(axis=1) * 0.5
        if self.uses_box:
            l_flow = nn.gaussian_log_density(psi, mu[:, k:], logvar[:, k:])
        else:
            l_flow = Tensor(np.zeros(n, dtype=zf.dtype))
        probs = nn.clip(nn.sigmoid(self._decode_logits(self.decoder_input(z, psi), params)), PROB_CLAMP, 1 - PROB_CLAMP)
        yflat = np.asarray(Y, dtype=probs.dtype).reshape(n, -1)
        bce = -(nn.log(probs) * yflat + nn.log(1.0 - probs) * (1.0 - yflat))
        l_rec = bce.mean(axis=1)
        total = (l_rec - l_vae * self.lambda_vae - l_flow * self.lambda_flow).mean()
        return l_rec, l_vae, l_flow, total

    # -- training --------------------------------------------------------------
    def _psi(self, boxes):
        if not self.uses_box:
            return None
        if self.flow is None:
            raise ValueError("pssnet mode needs a fitted BoxFlow")
        return self.flow.transform(check_boxes(boxes)).astype(self.dtype)

    def fit(self, X, y, boxes=None):
        """Train on observations ``X``, complete shapes ``y`` and, in pssnet
        mode, ground-truth ``boxes``."""
        if isinstance(y, (list, tuple)) and y and isinstance(y[0], VoxelGrid):
            self.voxel_size_ = y[0].voxel_size
            self.origin_ = np.array(y[0].origin)
        else:
            self.voxel_size_, self.origin_ = 0.01, np.zeros(3)
        Xa = check_observations(X, self.dtype)
        Ya = check_shapes(y, self.dtype)
        check_consistent_length(Xa, Ya, None if boxes is None else check_boxes(boxes))
        if self.uses_box and boxes is None:
            raise ValueError("pssnet mode needs ground-truth boxes")
        if Xa.shape[2] != Ya.shape[1]:
            raise ValueError("observation and shape resolutions differ")
        psi_all = self._psi(boxes) if self.uses_box else None
        self._build(Ya.shape[1], Ya.mean(axis=0))
        cfg = AdamConfig(self.learning_rate, batch_size=self.batch_size, epochs=self.epochs)
        rng = np.random.default_rng(self.seed + 1)
        self.history_ = []
        batch_index = 0
        for epoch in range(self.epochs):
            sums = np.zeros(4)
            count = 0
            for idx in nn.iterate_minibatches(len(Xa), self.batch_size, rng):
                eps = rng.standard_normal((len(idx), self.latent_dim)).astype(self.dtype)
                psi = psi_all[idx] if psi_all is not None else None
                self.store_.zero_grad()
                l_rec, l_vae, l_flow, total = self.loss_terms(Xa[idx], Ya[idx], psi, eps)
                val = float(total.data)
                if not math.isfinite(val):
                    raise NonFiniteLoss(f"PSSNet loss is {val} at batch {batch_index}", batch_index)
                total.backward()
                nn.adam_step(self.store_, self.store_.grads(), cfg)
                m = len(idx)
                sums += m * np.array([l_rec.data.mean(), l_vae.data.mean(), l_flow.data.mean(), val])
                count += m
                batch_index += 1
            row = dict(zip(("epoch", "L_rec", "L_VAE", "L_flow", "total"), [epoch + 1] + (sums / count).tolist()))
            self.history_.append(row)
            if self.verbose:
                print(f"epoch {epoch + 1:4d}  rec {row['L_rec']:.5f}  vae {row['L_VAE']:.3f}  flow {row['L_flow']:.3f}  total {row['total']:.5f}")
        return self

    def history_csv(self) -> str:
        check_is_fitted(self, "history_")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "L_rec", "L_VAE", "L_flow", "total"])
        for r in self.history_:
            w.writerow([r["epoch"]] + [f"{r[k]:.8g}" for k in ("L_rec", "L_VAE", "L_flow", "total")])
        return buf.getvalue()

    # -- inference ---------------------------------------------------------------
    def _const(self):
        return {k: Tensor(t.data) for k, t in self.store_.items()}

    def encode(self, X) -> LatentCode:
        """Deterministic latent mean and log-variance for each observation."""
        check_is_fitted(self, "store_")
        Xa = check_observations(X, self.store_.dtype)
        mu, logvar = self._encode(Tensor(Xa.reshape(len(Xa), -1)), self._const())
        return LatentCode(mu.data, logvar.data, self.n_features if self.uses_box else self.latent_dim)

    def decode_proba(self, z) -> np.ndarray:
        """Occupancy probabilities ``(n, R, R, R)`` for latent vectors ``z``."""
        check_is_fitted(self, "store_")
        z = np.atleast_2d(np.asarray(z, dtype=self.store_.dtype))
        logits = self._decode_logits(Tensor(z), self._const())
        R = self.resolution_
        return nn.sigmoid(logits).data.reshape(len(z), R, R, R)

    def decode(self, z) -> List[VoxelGrid]:
        """Probabilistic grids; call ``.binarize()`` for occupancy (0.5 counts as occupied)."""
        return [VoxelGrid(p, self.voxel_size_, self.origin_) for p in self.decode_proba(z)]

    def sample(self, X, n=10, seed=0) -> List[List[VoxelGrid]]:
        """``n`` binary completions per observation, reproducible from ``seed``.

        Each draw is one Gaussian sample of the full latent from the encoder.
        """
        code = self.encode(X)
        rng = np.random.default_rng(seed)
        out = []
        for mu, lv in zip(code.mu, code.logvar):
            eps = rng.standard_normal((n, self.latent_dim)).astype(self.store_.dtype)
            z = mu + np.exp(lv / 2) * eps
            out.append([g.binarize() for g in self.decode(z)])
        return out

    def predict(self, X):
        """Binary completion decoded from the latent mean."""
        code = self.encode(X)
        return [g.binarize() for g in self.decode(code.mu)]

    def decode_box(self, z_b) -> List[OrientedBox]:
        """Boxes from latent-box vectors via the inverse flow (diagnostics)."""
        if self.flow is None:
            raise ValueError("no flow attached")
        B = self.flow.inverse_transform(np.atleast_2d(z_b))
        return [OrientedBox.from_vector(b) for b in B]

    # -- persistence -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        check_is_fitted(self, "store_")
        params = self.get_params(deep=False)
        params.pop("flow")
        params["hidden"] = list(params["hidden"])
        head = {
            "format": "pssnet",
            "version": 1,
            "params": params,
            "resolution": self.resolution_,
            "voxel_size": self.voxel_size_,
            "origin": [float(v) for v in self.origin_],
            "latent_dim": self.latent_dim,
            "has_flow": self.flow is not None,
        }
        hb = json.dumps(head, sort_keys=True).encode("utf-8")
        blob = MODEL_MAGIC + struct.pack("<I", len(hb)) + hb + nn.write_weights(self.store_.arrays())
        if self.flow is not None:
            blob += self.flow.to_bytes()
        return blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "PSSNet":
        if data[:4] != MODEL_MAGIC:
            raise ValueError("not a PSSNet model file")
        (n,) = struct.unpack_from("<I", data, 4)
        head = json.loads(data[8: 8 + n].decode("utf-8"))
        arrays, end = nn.read_weights(data, 8 + n)
        params = head["params"]
        params["hidden"] = tuple(params["hidden"])
        flow = BoxFlow.from_bytes(data[end:]) if head["has_flow"] else None
        model = cls(flow=flow, **params)._build(head["resolution"])
        model.store_.load_arrays(arrays)
        model.voxel_size_ = head["voxel_size"]
        model.origin_ = np.asarray(head["origin"])
        return model

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PSSNet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def save_sample_sets(sets: Dict[str, List[VoxelGrid]], directory, extra: Optional[Dict] = None):
    """One binvox per completion plus ``manifest.json`` mapping id to files."""
    os.makedirs(os.path.join(directory, "samples"), exist_ok=True)
    manifest = {"schema_version": SAMPLES_SCHEMA_VERSION, "kind": "sample_sets", "sets": {}}
    if extra:
        manifest.update(extra)
    for sid, grids in sets.items():
        files = []
        for k, g in enumerate(grids):
            rel = f"samples/{sid}__{k:03d}.binvox"
            save_binvox(os.path.join(directory, rel), g)
            files.append(rel)
        manifest["sets"][sid] = files
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_sample_sets(directory) -> Dict[str, List[VoxelGrid]]:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("kind") != "sample_sets" or manifest.get("schema_version") != SAMPLES_SCHEMA_VERSION:
        raise ValueError(f"{directory}: not a sample-set directory of schema {SAMPLES_SCHEMA_VERSION}")
    return {sid: [load_binvox(os.path.join(directory, r)) for r in files] for sid, files in manifest["sets"].items()}
