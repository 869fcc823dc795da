"""Miniature DLRM-style classifier over dense features and sparse index bags.

Architecture: a bottom MLP maps dense features to an `emb_dim` vector; each
sparse field contributes a sum-pooled embedding row, served from a TT table
when the field is large and from a plain dense table below `tt_threshold`
rows; the feature-interaction layer concatenates the bottom vector with all
pairwise dot products among (bottom vector, field embeddings); a top MLP
produces one logit. Loss is binary cross entropy on the sigmoid (or plain
MSE on the raw score).

Everything is deterministic for a fixed config: parameter init draws from a
single seeded stream in a fixed order, and updates apply in a fixed order.
Checkpoints are length-prefixed named records so two identically seeded runs
produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import backward as bw
from . import lookup as lk
from .tt_core import TtShape, TtTable, bytes_to_table, factorize_dims, init_random, table_to_bytes

CKPT_MAGIC = b"TTCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    n_dense: int
    rows_per_field: tuple[int, ...]
    emb_dim: int = 16
    ranks: tuple[int, ...] = (1, 8, 8, 1)
    tt_threshold: int = 1000
    bottom_sizes: tuple[int, ...] = (64,)
    top_sizes: tuple[int, ...] = (64, 32)
    loss: str = "bce"
    seed: int = 0

    def validate(self) -> None:
        if self.n_dense < 1 or self.emb_dim < 1 or not self.rows_per_field:
            raise ValueError("need dense features, an embedding dim, and fields")
        if any(r < 1 for r in self.rows_per_field):
            raise ValueError("every field needs at least one row")
        if self.loss not in ("bce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.tt_threshold < 1:
            raise ValueError("tt_threshold must be positive")
        if len(self.ranks) < 3 or self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError("ranks must be (1, r_1, .., 1) with d >= 2 cores")

    @property
    def n_sparse(self) -> int:
        return len(self.rows_per_field)

    @property
    def interaction_dim(self) -> int:
        v = self.n_sparse + 1  # bottom vector plus one per field
        return self.emb_dim + v * (v - 1) // 2


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(z: np.ndarray, y: np.ndarray) -> float:
    # clamp inside the loss only; the gradient uses the raw sigmoid
    p = np.clip(sigmoid(z), 1e-7, 1.0 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_and_logit_grad(z, y, kind: str) -> tuple[float, np.ndarray]:
    if kind == "bce":
        return bce_loss(z, y), (sigmoid(z) - y) / z.size
    return float(np.mean((z - y) ** 2)), 2.0 * (z - y) / z.size


def compute_metrics(pred: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy / precision / recall / F1; undefined ratios report 0."""
    pred = np.asarray(pred, dtype=bool)
    pos = np.asarray(labels, dtype=bool)
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    acc = float(np.mean(pred == pos)) if pred.size else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1}


# ------------------------------------------------------------- interaction


def feature_interaction(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """concat(vectors[0], all pairwise dots) with pairs in lexicographic
    order (0,1), (0,2), .., (1,2), .. over the vector list."""
    stack = np.stack(vectors, axis=1)  # (B, v, D)
    gram = stack @ stack.transpose(0, 2, 1)
    iu = np.triu_indices(stack.shape[1], k=1)
    return np.concatenate([vectors[0], gram[:, iu[0], iu[1]]], axis=1)


def feature_interaction_backward(
    vectors: Sequence[np.ndarray], gout: np.ndarray
) -> list[np.ndarray]:
    stack = np.stack(vectors, axis=1)
    v = stack.shape[1]
    d = vectors[0].shape[1]
    iu = np.triu_indices(v, k=1)
    gpairs = np.zeros((stack.shape[0], v, v), dtype=gout.dtype)
    gpairs[:, iu[0], iu[1]] = gout[:, d:]
    sym = gpairs + gpairs.transpose(0, 2, 1)
    gstack = sym @ stack  # d/dV_i of sum g_ij (V_i . V_j)
    grads = [gstack[:, i].copy() for i in range(v)]
    grads[0] += gout[:, :d]
    return grads


# --------------------------------------------------------------------- MLP


class Mlp:
    """Fully connected layers with ReLU between and a linear output."""

    def __init__(self, sizes: Sequence[int], rng, dtype=np.float64):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("MLP needs positive layer sizes, input to output")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        last = len(sizes) - 2
        for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = math.sqrt((2.0 if i < last else 1.0) / fin)
            w = (rng.standard_normal((fin, fout)) * scale).astype(dtype)
            self.weights.append(w)
            self.biases.append(np.zeros(fout, dtype=dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        inputs, pre = [], []
        for i in range(self.n_layers):
            inputs.append(x)
            z = x @ self.weights[i] + self.biases[i]
            pre.append(z)
            x = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        return x, (inputs, pre)

    def backward(self, cache, gy: np.ndarray):
        """Returns (grad wrt input, [(gw, gb) per layer])."""
        inputs, pre = cache
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers
        g = gy
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (pre[i] > 0)
            grads[i] = (inputs[i].T @ g, g.sum(axis=0))
            g = g @ self.weights[i].T
        return g, grads


# ------------------------------------------------------------ field tables


class FieldTable:
    """One sparse field's embedding storage: TT above the row threshold,
    a plain dense table below it."""

    def __init__(self, rows: int, dim: int, ranks, tt_threshold: int, seed: int,
                 dtype=np.float64):
        self.rows = int(rows)
        self.dim = int(dim)
        if rows >= tt_threshold:
            d = len(ranks) - 1
            m, n = factorize_dims(rows, dim, d)
            self.table: Optional[TtTable] = init_random(
                TtShape(m=m, n=n, ranks=tuple(ranks)), seed=seed, dtype=dtype
            )
            self.dense_rows = None
        else:
            rng = np.random.default_rng(seed)
            self.table = None
            self.dense_rows = (rng.standard_normal((rows, dim)) * 0.1).astype(dtype)

    @property
    def is_tt(self) -> bool:
        return self.table is not None

    def named_params(self, prefix: str):
        if self.is_tt:
            return [(f"{prefix}.core{k}", core) for k, core in enumerate(self.table.cores)]
        return [(f"{prefix}.rows", self.dense_rows)]

    def lookup(self, bags, counters: lk.OpCounters, use_reuse: bool = True):
        """(pooled (B, dim), context for grads)."""
        if self.is_tt:
            occ = np.concatenate([np.asarray(b, dtype=np.int64) for b in bags])
            buffer = None
            if use_reuse and self.table.shape.d == 3:
                plan = lk.prepare_reuse_plan(occ, self.table, counters)
                buffer = lk.execute_prefix_products(self.table, plan, counters)
            out, c = lk.forward_batch(self.table, bags, use_reuse=use_reuse,
                                      buffer=buffer)
            counters.add(c)
            return out, (occ, buffer)
        occ = np.concatenate([np.asarray(b, dtype=np.int64) for b in bags])
        if (occ < 0).any() or (occ >= self.rows).any():
            raise ValueError(f"index outside [0, {self.rows})")
        bag_ids = np.concatenate(
            [np.full(len(b), i, dtype=np.int64) for i, b in enumerate(bags)]
        )
        out = np.zeros((len(bags), self.dim), dtype=self.dense_rows.dtype)
        np.add.at(out, bag_ids, self.dense_rows[occ])
        counters.row_adds += occ.size - len(bags)
        return out, (occ, None)

    def grads(self, bags, gout: np.ndarray, ctx, counters: lk.OpCounters) -> dict:
        occ, buffer = ctx
        sizes = [len(b) for b in bags]
        per_occ = np.repeat(gout, sizes, axis=0)
        if self.is_tt:
            u_idx, u_grads = bw.unique_aggregate(occ, per_occ)
            counters.row_adds += occ.size - u_idx.size
            core_grads = bw.tt_core_grads(self.table, u_idx, u_grads,
                                          buffer=buffer, counters=counters)
            return {f"core{k}": g for k, g in enumerate(core_grads.arrays)}
        g = np.zeros((self.rows, self.dim), dtype=np.float64)
        np.add.at(g, occ, per_occ.astype(np.float64))
        return {"rows": g}


# --------------------------------------------------------------- the model


class DlrmModel:
    def __init__(self, config: ModelConfig, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.fields = []
        for f, rows in enumerate(config.rows_per_field):
            seed = int(rng.integers(2**31))
            self.fields.append(
                FieldTable(rows, config.emb_dim, config.ranks,
                           config.tt_threshold, seed, dtype=self.dtype)
            )
        self.bottom = Mlp(
            (config.n_dense, *config.bottom_sizes, config.emb_dim), rng, self.dtype
        )
        self.top = Mlp(
            (config.interaction_dim, *config.top_sizes, 1), rng, self.dtype
        )
        self._velocity: dict[str, np.ndarray] = {}

    # ---------------------------------------------------------- parameters

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for f, fld in enumerate(self.fields):
            out.extend(fld.named_params(f"field_{f}"))
        for i in range(self.bottom.n_layers):
            out.append((f"bottom.{i}.w", self.bottom.weights[i]))
            out.append((f"bottom.{i}.b", self.bottom.biases[i]))
        for i in range(self.top.n_layers):
            out.append((f"top.{i}.w", self.top.weights[i]))
            out.append((f"top.{i}.b", self.top.biases[i]))
        return out

    # ------------------------------------------------------------- forward

    def forward(self, batch, counters: Optional[lk.OpCounters] = None,
                use_reuse: bool = True):
        """Raw scores (B,) plus a cache for the backward pass."""
        if batch.n_sparse != self.config.n_sparse:
            raise ValueError("batch field count != model field count")
        counters = counters if counters is not None else lk.OpCounters()
        x = batch.dense.astype(self.dtype, copy=False)
        v0, bottom_cache = self.bottom.forward(x)
        vectors, field_ctx = [v0], []
        for f, fld in enumerate(self.fields):
            out, ctx = fld.lookup(batch.bags[f], counters, use_reuse=use_reuse)
            vectors.append(out)
            field_ctx.append(ctx)
        inter = feature_interaction(vectors)
        z, top_cache = self.top.forward(inter)
        cache = (x, vectors, field_ctx, bottom_cache, top_cache)
        return z.reshape(-1), cache

    def predict_scores(self, batch) -> np.ndarray:
        z, _ = self.forward(batch)
        return z

    def predict_labels(self, batch) -> np.ndarray:
        z = self.predict_scores(batch)
        if self.config.loss == "bce":
            return z >= 0.0  # sigmoid(z) >= 0.5
        return z >= 0.5

    def loss_value(self, batch) -> float:
        z, _ = self.forward(batch)
        loss, _ = loss_and_logit_grad(z, batch.labels, self.config.loss)
        return loss

    # ------------------------------------------------------------ backward

    def loss_and_grads(self, batch, counters: Optional[lk.OpCounters] = None):
        """(loss, grads keyed like named_params). Applies no update."""
        counters = counters if counters is not None else lk.OpCounters()
        z, cache = self.forward(batch, counters)
        x, vectors, field_ctx, bottom_cache, top_cache = cache
        loss, gz = loss_and_logit_grad(z, batch.labels, self.config.loss)
        ginter, top_grads = self.top.backward(
            top_cache, gz.reshape(-1, 1).astype(self.dtype)
        )
        gvectors = feature_interaction_backward(vectors, ginter)
        _, bottom_grads = self.bottom.backward(bottom_cache, gvectors[0])

        grads: dict[str, np.ndarray] = {}
        for f, fld in enumerate(self.fields):
            for key, g in fld.grads(
                batch.bags[f], gvectors[f + 1], field_ctx[f], counters
            ).items():
                grads[f"field_{f}.{key}"] = g
        for i, (gw, gb) in enumerate(bottom_grads):
            grads[f"bottom.{i}.w"] = gw
            grads[f"bottom.{i}.b"] = gb
        for i, (gw, gb) in enumerate(top_grads):
            grads[f"top.{i}.w"] = gw
            grads[f"top.{i}.b"] = gb
        return loss, grads

    def train_step(self, batch, lr: float, momentum: float = 0.0,
                   counters: Optional[lk.OpCounters] = None) -> float:
        """One SGD(+momentum) step over every parameter; returns the loss."""
        if lr < 0 or not 0.0 <= momentum < 1.0:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")
        loss, grads = self.loss_and_grads(batch, counters)
        for name, param in self.named_params():
            g = np.asarray(grads[name], dtype=np.float64)
            if momentum > 0.0:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros(param.shape, dtype=np.float64)
                    self._velocity[name] = v
                v *= momentum
                v += g
                g = v
            # accumulate in float64, round into the parameter dtype once
            np.subtract(param, lr * g, out=param, casting="same_kind")
        return loss

    def evaluate(self, dataset, batch_size: int = 512) -> dict:
        from .data import batch_iter

        zs, ys, loss_sum = [], [], 0.0
        for sub in batch_iter(dataset, batch_size):
            z, _ = self.forward(sub)
            loss, _ = loss_and_logit_grad(z, sub.labels, self.config.loss)
            loss_sum += loss * sub.n
            zs.append(z)
            ys.append(sub.labels)
        z = np.concatenate(zs)
        y = np.concatenate(ys)
        pred = z >= 0.0 if self.config.loss == "bce" else z >= 0.5
        out = compute_metrics(pred, y)
        out["loss"] = loss_sum / dataset.n
        out["n"] = dataset.n
        return out


# -------------------------------------------------------------- checkpoint


def _tensor_payload(arr: np.ndarray) -> bytes:
    head = struct.pack("<Q", arr.ndim)
    head += b"".join(struct.pack("<Q", s) for s in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _tensor_from_payload(payload: bytes, name: str) -> np.ndarray:
    if len(payload) < 8:
        raise ValueError(f"record {name}: truncated tensor header")
    ndim = struct.unpack_from("<Q", payload, 0)[0]
    if len(payload) < 8 + 8 * ndim:
        raise ValueError(f"record {name}: truncated tensor dims")
    shape = struct.unpack_from(f"<{ndim}Q", payload, 8) if ndim else ()
    body = payload[8 + 8 * ndim :]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(body) != 4 * count:
        raise ValueError(f"record {name}: payload size != declared shape")
    return np.frombuffer(body, dtype="<f4").reshape(shape)


def _config_payload(config: ModelConfig) -> bytes:
    doc = {
        "n_dense": config.n_dense,
        "rows_per_field": list(config.rows_per_field),
        "emb_dim": config.emb_dim,
        "ranks": list(config.ranks),
        "tt_threshold": config.tt_threshold,
        "bottom_sizes": list(config.bottom_sizes),
        "top_sizes": list(config.top_sizes),
        "loss": config.loss,
        "seed": config.seed,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def _config_from_payload(payload: bytes) -> ModelConfig:
    doc = json.loads(payload.decode("ascii"))
    return ModelConfig(
        n_dense=doc["n_dense"],
        rows_per_field=tuple(doc["rows_per_field"]),
        emb_dim=doc["emb_dim"],
        ranks=tuple(doc["ranks"]),
        tt_threshold=doc["tt_threshold"],
        bottom_sizes=tuple(doc["bottom_sizes"]),
        top_sizes=tuple(doc["top_sizes"]),
        loss=doc["loss"],
        seed=doc["seed"],
    )


def checkpoint_bytes(model: DlrmModel) -> bytes:
    """Length-prefixed named records: u64 name length, name bytes, u64
    payload length, payload. TT tables embed their own blob format; every
    other tensor is stored as u64 ndim, u64 dims, float32 LE data."""
    records: list[tuple[str, bytes]] = [("config", _config_payload(model.config))]
    for f, fld in enumerate(model.fields):
        if fld.is_tt:
            records.append((f"field_{f}.tt", table_to_bytes(fld.table)))
        else:
            records.append((f"field_{f}.rows", _tensor_payload(fld.dense_rows)))
    for name, arr in model.named_params():
        if name.startswith("field_"):
            continue
        records.append((name, _tensor_payload(arr)))
    out = [CKPT_MAGIC]
    for name, payload in records:
        raw = name.encode("ascii")
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def save_checkpoint(model: DlrmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def read_checkpoint_records(path) -> list[tuple[str, bytes]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    records = []
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise ValueError("truncated record header")
        (name_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + name_len + 8 > len(buf):
            raise ValueError("truncated record name or length")
        name = buf[pos : pos + name_len].decode("ascii")
        pos += name_len
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + size > len(buf):
            raise ValueError(f"record {name}: truncated payload")
        records.append((name, buf[pos : pos + size]))
        pos += size
    return records


def load_checkpoint(path, dtype=np.float64) -> DlrmModel:
    records = dict(read_checkpoint_records(path))
    if "config" not in records:
        raise ValueError("checkpoint has no config record")
    config = _config_from_payload(records.pop("config"))
    model = DlrmModel(config, dtype=dtype)
    for f, fld in enumerate(model.fields):
        if fld.is_tt:
            name = f"field_{f}.tt"
            if name not in records:
                raise ValueError(f"checkpoint missing record {name}")
            table = bytes_to_table(records.pop(name), dtype=dtype)
            if table.shape != fld.table.shape:
                raise ValueError(f"record {name}: table shape mismatch")
            fld.table = table
    for name, param in model.named_params():
        if name.startswith("field_") and ".core" in name:
            continue  # cores arrived inside the table blob
        if name not in records:
            raise ValueError(f"checkpoint missing record {name}")
        arr = _tensor_from_payload(records.pop(name), name)
        if arr.shape != param.shape:
            raise ValueError(f"record {name}: shape mismatch")
        param[...] = arr.astype(dtype)
    if records:
        extra = ", ".join(sorted(records))
        raise ValueError(f"checkpoint has unknown records: {extra}")
    return model
