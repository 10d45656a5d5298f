"""Feedback-law regression: u(t, x) as a conditional mean of dataset controls.

Three estimators share one interface: k-nearest-neighbour averaging,
Nadaraya-Watson kernel smoothing (the default), and a small fully-connected
network trained in-repo.  Queries live in the scaled feature space
z = (time_scale * t, x), so one metric serves both time and state.

Rows are canonicalized (lexicographically sorted) when a law is fitted,
which makes fitting and prediction invariant to dataset row order and
bit-stable for a fixed seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyDatasetError,
    TrainingDivergedError,
)
from .seeding import substream

EXTRAPOLATION_FACTOR = 10.0
EXTRAPOLATION_K = 16


@dataclass(frozen=True)
class RegressionDataset:
    """Flattened (t, x, u) triples with trajectory provenance ids."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    traj_id: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        ids = np.asarray(self.traj_id, dtype=int)
        n = len(t)
        if n == 0:
            raise EmptyDatasetError("dataset has no rows")
        if x.shape[0] != n or u.shape[0] != n or ids.shape != (n,):
            raise ConfigurationError(
                f"row counts disagree: t {n}, x {x.shape[0]}, u {u.shape[0]}, "
                f"ids {ids.shape}"
            )
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ConfigurationError("dataset entries must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "traj_id", ids)

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def subset(self, mask: np.ndarray) -> "RegressionDataset":
        return RegressionDataset(self.t[mask], self.x[mask], self.u[mask], self.traj_id[mask])


def dataset_from_pairs(pairs, n_time_samples: int = 25) -> RegressionDataset:
    """Subsample trajectory pairs onto a shared time grid of triples."""
    if not pairs:
        raise EmptyDatasetError("no pairs given")
    K = len(pairs[0].t_grid) - 1
    for p in pairs:
        if len(p.t_grid) != K + 1 or abs(p.t_grid[-1] - pairs[0].t_grid[-1]) > 1e-12:
            raise ConfigurationError("pairs must share one time grid")
    idx = np.unique(np.round(np.linspace(0, K, n_time_samples)).astype(int))
    t_col, x_rows, u_rows, ids = [], [], [], []
    for i, p in enumerate(pairs):
        t_col.append(p.t_grid[idx])
        x_rows.append(p.states[idx])
        u_rows.append(p.controls[idx])
        ids.append(np.full(len(idx), i))
    return RegressionDataset(
        np.concatenate(t_col), np.vstack(x_rows), np.vstack(u_rows), np.concatenate(ids)
    )


def _canonical_order(t, x, u):
    keys = [u[:, j] for j in range(u.shape[1] - 1, -1, -1)]
    keys += [x[:, j] for j in range(x.shape[1] - 1, -1, -1)]
    keys += [t]
    return np.lexsort(keys)


def _median_pairwise(z: np.ndarray, rng: np.random.Generator, n_pairs: int = 4096):
    n = z.shape[0]
    if n == 1:
        return np.zeros(z.shape[1])
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n, size=n_pairs)
    neq = i != j
    if not neq.any():
        return np.zeros(z.shape[1])
    diffs = np.abs(z[i[neq]] - z[j[neq]])
    return np.median(diffs, axis=0)


class FeedbackLaw:
    """Fitted feedback law; use :meth:`predict` or the module function."""

    def __init__(
        self,
        method: str,
        time_scale: float,
        z: np.ndarray,
        u: np.ndarray,
        bandwidth: Optional[np.ndarray] = None,
        k: int = 8,
        ref_nn_dist: float = 0.0,
        mlp: Optional["_MLP"] = None,
        hyperparams: Optional[dict] = None,
        final_loss: Optional[float] = None,
    ):
        if method not in ("knn", "kernel", "mlp"):
            raise ConfigurationError(f"unknown regression method '{method}'")
        self.method = method
        self.time_scale = float(time_scale)
        self._z = z
        self._u = u
        self.bandwidth = bandwidth
        self.k = int(k)
        self.ref_nn_dist = float(ref_nn_dist)
        self._mlp = mlp
        self.hyperparams = dict(hyperparams or {})
        self.final_loss = final_loss
        # cached row norms so batched distance queries run as matrix products
        self._z_sq = np.einsum("nd,nd->n", z, z) if z.size else np.zeros(len(z))
        if bandwidth is not None:
            h = np.maximum(bandwidth, 1.0e-300)
            self._zh = z / h
            self._zh_sq = np.einsum("nd,nd->n", self._zh, self._zh)
        else:
            self._zh = None
            self._zh_sq = None

    @property
    def d(self) -> int:
        return self._z.shape[1] - 1

    @property
    def m(self) -> int:
        return self._u.shape[1]

    @property
    def n_train(self) -> int:
        return self._z.shape[0]

    def _features(self, t, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.column_stack([self.time_scale * tcol, x])

    def _sq_dists(self, zq: np.ndarray) -> np.ndarray:
        # |a-b|^2 expanded as |a|^2 + |b|^2 - 2ab; clamp cancellation noise
        d2 = (
            np.einsum("qd,qd->q", zq, zq)[:, None]
            + self._z_sq[None, :]
            - 2.0 * (zq @ self._z.T)
        )
        return np.maximum(d2, 0.0)

    def _knn_mean(self, d2: np.ndarray, k: int) -> np.ndarray:
        k = min(k, self.n_train)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return self._u[order].mean(axis=1)

    def predict(self, t, x: np.ndarray, return_flag: bool = False):
        """Control estimate at query time(s) and state(s).

        Accepts a single state (d,) or a batch (n, d); ``t`` may be a scalar
        or per-row array.  With ``return_flag=True`` also returns a boolean
        extrapolation mask (queries whose nearest training point is more
        than 10x the in-sample spacing away; those fall back to a wide
        k-nearest-neighbour average).
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        zq = self._features(t, x)

        if self.method == "mlp":
            out = self._mlp.forward(zq)
            flags = np.zeros(zq.shape[0], dtype=bool)
        else:
            d2 = self._sq_dists(zq)
            nn = np.sqrt(d2.min(axis=1))
            flags = nn > EXTRAPOLATION_FACTOR * max(self.ref_nn_dist, 1.0e-300)
            if self.method == "knn":
                out = self._knn_mean(d2, self.k)
            else:
                scaled = self._scaled_sq(zq)
                emin = scaled.min(axis=1, keepdims=True)
                # raw weights exp(-scaled/2) would all underflow: the
                # Nadaraya-Watson denominator degenerates, use the nearest point
                degenerate = emin[:, 0] > 1400.0
                w = np.exp(-0.5 * (scaled - emin))
                denom = w.sum(axis=1, keepdims=True)
                out = (w @ self._u) / denom
                if degenerate.any():
                    out[degenerate] = self._knn_mean(d2[degenerate], 1)
            if flags.any():
                out = out.copy()
                out[flags] = self._knn_mean(d2[flags], EXTRAPOLATION_K)

        if single:
            out = out[0]
            if return_flag:
                return out, bool(flags[0])
            return out
        if return_flag:
            return out, flags
        return out

    def _scaled_sq(self, zq: np.ndarray) -> np.ndarray:
        h = np.maximum(self.bandwidth, 1.0e-300)
        a = zq / h
        d2 = (
            np.einsum("qd,qd->q", a, a)[:, None]
            + self._zh_sq[None, :]
            - 2.0 * (a @ self._zh.T)
        )
        return np.maximum(d2, 0.0)

    # ------------------------------------------------------------------
    # serialization

    def to_json_dict(self) -> dict:
        doc = {
            "format": "ctrlflow.feedback_law.v1",
            "method": self.method,
            "time_scale": self.time_scale,
            "hyperparams": self.hyperparams,
            "final_loss": self.final_loss,
            "k": self.k,
            "ref_nn_dist": self.ref_nn_dist,
        }
        if self.method == "mlp":
            doc["mlp"] = self._mlp.to_json_dict()
            doc["m"] = self.m
            doc["z_dim"] = self._z.shape[1]
        else:
            doc["bandwidth"] = None if self.bandwidth is None else self.bandwidth.tolist()
            doc["z"] = self._z.tolist()
            doc["u"] = self._u.tolist()
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FeedbackLaw":
        if doc.get("format") != "ctrlflow.feedback_law.v1":
            raise ConfigurationError("not a feedback-law document")
        method = doc["method"]
        if method == "mlp":
            mlp = _MLP.from_json_dict(doc["mlp"])
            z = np.zeros((1, doc["z_dim"]))
            u = np.zeros((1, doc["m"]))
            return cls(
                method, doc["time_scale"], z, u, mlp=mlp,
                hyperparams=doc.get("hyperparams"), final_loss=doc.get("final_loss"),
                k=doc.get("k", 8), ref_nn_dist=doc.get("ref_nn_dist", 0.0),
            )
        z = np.asarray(doc["z"], dtype=float)
        u = np.asarray(doc["u"], dtype=float)
        bw = doc.get("bandwidth")
        return cls(
            method, doc["time_scale"], z, u,
            bandwidth=None if bw is None else np.asarray(bw, dtype=float),
            k=doc.get("k", 8), ref_nn_dist=doc.get("ref_nn_dist", 0.0),
            hyperparams=doc.get("hyperparams"), final_loss=doc.get("final_loss"),
        )

    def save(self, path) -> None:
        with Path(path).open("w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "FeedbackLaw":
        with Path(path).open() as fh:
            return cls.from_json_dict(json.load(fh))


class _MLP:
    """Two-hidden-layer tanh network with in-repo backprop (SGD training)."""

    def __init__(self, sizes: Sequence[int], seed: int):
        self.sizes = list(sizes)
        rng = substream(seed, "mlp_init")
        self.W = []
        self.b = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.W.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.b.append(np.zeros(fan_out))
        # standardization parameters, set by fit
        self.z_mean = np.zeros(sizes[0])
        self.z_std = np.ones(sizes[0])
        self.u_mean = np.zeros(sizes[-1])
        self.u_std = np.ones(sizes[-1])

    def _forward_std(self, z: np.ndarray):
        acts = [z]
        h = z
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < len(self.W) - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, zq: np.ndarray) -> np.ndarray:
        z = (zq - self.z_mean) / self.z_std
        out = self._forward_std(z)[-1]
        return out * self.u_std + self.u_mean

    def train(self, z, u, steps, batch_size, lr0, lr_decay, seed):
        self.z_mean = z.mean(axis=0)
        self.z_std = np.where(z.std(axis=0) > 0, z.std(axis=0), 1.0)
        self.u_mean = u.mean(axis=0)
        self.u_std = np.where(u.std(axis=0) > 0, u.std(axis=0), 1.0)
        zs = (z - self.z_mean) / self.z_std
        us = (u - self.u_mean) / self.u_std
        n = zs.shape[0]
        rng = substream(seed, "mlp_batches")
        for step in range(steps):
            idx = rng.integers(0, n, size=min(batch_size, n))
            zb, ub = zs[idx], us[idx]
            acts = self._forward_std(zb)
            pred = acts[-1]
            err = pred - ub
            # overflow here is the divergence signal, not a numerics bug
            with np.errstate(over="ignore"):
                loss = float(np.mean(err**2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}; lower the step size"
                )
            lr = lr0 / (1.0 + step / lr_decay)
            grad = (2.0 / err.size) * err
            for layer in range(len(self.W) - 1, -1, -1):
                a_in = acts[layer]
                gW = a_in.T @ grad
                gb = grad.sum(axis=0)
                if layer > 0:
                    grad = (grad @ self.W[layer].T) * (1.0 - acts[layer] ** 2)
                self.W[layer] -= lr * gW
                self.b[layer] -= lr * gb

    def to_json_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "W": [w.tolist() for w in self.W],
            "b": [b.tolist() for b in self.b],
            "z_mean": self.z_mean.tolist(),
            "z_std": self.z_std.tolist(),
            "u_mean": self.u_mean.tolist(),
            "u_std": self.u_std.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "_MLP":
        net = cls(doc["sizes"], seed=0)
        net.W = [np.asarray(w, dtype=float) for w in doc["W"]]
        net.b = [np.asarray(b, dtype=float) for b in doc["b"]]
        net.z_mean = np.asarray(doc["z_mean"], dtype=float)
        net.z_std = np.asarray(doc["z_std"], dtype=float)
        net.u_mean = np.asarray(doc["u_mean"], dtype=float)
        net.u_std = np.asarray(doc["u_std"], dtype=float)
        return net


def fit_feedback(
    data: RegressionDataset,
    method: str = "kernel",
    hyperparams: Optional[dict] = None,
    seed: int = 0,
) -> FeedbackLaw:
    """Fit a feedback law to the dataset.

    Shared hyperparameters: ``time_scale`` (default: state-cloud diagonal
    divided by the time span).  Kernel: ``bandwidth`` (scalar or per-feature
    vector; default median pairwise distance / sqrt(2) per feature) and
    ``bandwidth_scale`` multiplier.  knn: ``k``.  mlp: ``hidden``, ``steps``,
    ``batch_size``, ``lr``, ``lr_decay``.

    ``final_loss`` on the result is the mean squared training error,
    estimated on a seeded subsample of at most 8192 rows when the dataset
    is larger than that.
    """
    hp = dict(hyperparams or {})
    order = _canonical_order(data.t, data.x, data.u)
    t = data.t[order]
    x = data.x[order]
    u = data.u[order]

    time_scale = hp.get("time_scale")
    if time_scale is None:
        span = float(t.max() - t.min())
        diam = float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
        time_scale = diam / span if span > 0 and diam > 0 else 1.0
    z = np.column_stack([time_scale * t, x])

    rng = substream(seed, "fit", method)
    cap = min(data.n, 2048)
    sub = z[rng.choice(data.n, size=cap, replace=False)] if data.n > cap else z
    ref_nn = 0.0
    if sub.shape[0] > 1:
        s2 = np.einsum("nd,nd->n", sub, sub)
        d2 = np.maximum(s2[:, None] + s2[None, :] - 2.0 * (sub @ sub.T), 0.0)
        np.fill_diagonal(d2, np.inf)
        ref_nn = float(np.median(np.sqrt(d2.min(axis=1))))

    if method == "kernel":
        bw = hp.get("bandwidth")
        if bw is None:
            bw = _median_pairwise(z, rng) / np.sqrt(2.0)
        else:
            bw = np.asarray(bw, dtype=float)
            if bw.ndim == 0:
                bw = np.full(z.shape[1], float(bw))
        bw = bw * float(hp.get("bandwidth_scale", 1.0))
        bw = np.where(bw > 0, bw, 1.0)
        law = FeedbackLaw(
            "kernel", time_scale, z, u, bandwidth=bw,
            ref_nn_dist=ref_nn, hyperparams=hp,
        )
    elif method == "knn":
        law = FeedbackLaw(
            "knn", time_scale, z, u, k=int(hp.get("k", 8)),
            ref_nn_dist=ref_nn, hyperparams=hp,
        )
    elif method == "mlp":
        hidden = list(hp.get("hidden", (64, 64)))
        net = _MLP([z.shape[1]] + hidden + [u.shape[1]], seed=seed)
        net.train(
            z, u,
            steps=int(hp.get("steps", 3000)),
            batch_size=int(hp.get("batch_size", 64)),
            lr0=float(hp.get("lr", 0.05)),
            lr_decay=float(hp.get("lr_decay", 1000.0)),
            seed=seed,
        )
        law = FeedbackLaw(
            "mlp", time_scale, z, u, mlp=net, ref_nn_dist=ref_nn, hyperparams=hp
        )
    else:
        raise ConfigurationError(f"unknown regression method '{method}'")

    # training loss, estimated on a seeded subsample once the dataset is
    # large; chunked so the (queries x training) block stays bounded
    loss_cap = 8192
    if data.n > loss_cap:
        pick = np.sort(substream(seed, "fit", "loss_rows").choice(
            data.n, size=loss_cap, replace=False))
        t_l, x_l, u_l = t[pick], x[pick], u[pick]
    else:
        t_l, x_l, u_l = t, x, u
    chunk = max(256, 2**24 // max(1, data.n))
    sq_sum = 0.0
    for lo in range(0, len(t_l), chunk):
        pred = law.predict(t_l[lo : lo + chunk], x_l[lo : lo + chunk])
        sq_sum += float(np.sum((pred - u_l[lo : lo + chunk]) ** 2))
    law.final_loss = sq_sum / len(t_l)
    return law


def predict(law: FeedbackLaw, t, x: np.ndarray, return_flag: bool = False):
    """Module-level alias for :meth:`FeedbackLaw.predict`."""
    return law.predict(t, x, return_flag=return_flag)


def constant_predictor_loss(data: RegressionDataset) -> float:
    """Mean squared error of the best constant control (the mean)."""
    resid = data.u - data.u.mean(axis=0)
    return float(np.mean(np.sum(resid**2, axis=1)))


def crossval_loss(
    data: RegressionDataset,
    method: str,
    grid: Sequence[dict],
    folds: int = 4,
    seed: int = 0,
) -> tuple[dict, list]:
    """Select hyperparameters by trajectory-grouped cross-validation.

    Folds split whole trajectories so a trajectory never straddles the
    train/test boundary.  Returns ``(best_params, table)`` where the table
    lists (params, mean held-out loss) per grid entry; ties go to the first
    entry in grid order.
    """
    if folds < 2:
        raise ConfigurationError("need at least 2 folds")
    if not grid:
        raise ConfigurationError("hyperparameter grid is empty")
    ids = np.unique(data.traj_id)
    if len(ids) < folds:
        raise ConfigurationError(
            f"{folds} folds need at least {folds} distinct trajectories, got {len(ids)}"
        )
    rng = substream(seed, "crossval")
    perm = ids[rng.permutation(len(ids))]
    fold_sets = np.array_split(perm, folds)

    table = []
    for params in grid:
        losses = []
        for fold in fold_sets:
            test_mask = np.isin(data.traj_id, fold)
            train = data.subset(~test_mask)
            test = data.subset(test_mask)
            law = fit_feedback(train, method=method, hyperparams=params, seed=seed)
            pred = law.predict(test.t, test.x)
            losses.append(float(np.mean(np.sum((pred - test.u) ** 2, axis=1))))
        table.append((params, float(np.mean(losses))))
    best = table[0]
    for entry in table[1:]:
        if entry[1] < best[1]:
            best = entry
    return best[0], table


# ---------------------------------------------------------------------------
# dataset persistence


def save_dataset(
    data: RegressionDataset, path, metadata: Optional[dict] = None
) -> list[str]:
    """CSV with columns traj_id, t, x_*, u_* plus a JSON metadata sidecar."""
    path = Path(path)
    header = (
        ["traj_id", "t"]
        + [f"x_{j + 1}" for j in range(data.d)]
        + [f"u_{j + 1}" for j in range(data.m)]
    )
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [str(int(data.traj_id[i]))]
            row += [f"{v:.17g}" for v in (data.t[i], *data.x[i], *data.u[i])]
            writer.writerow(row)
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    with sidecar.open("w") as fh:
        json.dump(metadata or {}, fh, indent=2, sort_keys=True)
    return [path.name, sidecar.name]


def load_dataset(path) -> RegressionDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows)
    d = sum(1 for h in header if h.startswith("x_"))
    m = sum(1 for h in header if h.startswith("u_"))
    return RegressionDataset(
        t=arr[:, 1], x=arr[:, 2 : 2 + d], u=arr[:, 2 + d : 2 + d + m],
        traj_id=arr[:, 0].astype(int),
    )
