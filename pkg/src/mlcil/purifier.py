"""Feature purification model: class embeddings attended jointly with patch tokens.

The model keeps one learnable embedding row per registered class. A forward
pass concatenates the L patch tokens with the M class embedding rows and runs
the joint sequence through a stack of residual pre-norm multi-head
self-attention blocks. The first L output rows are the contextualised tokens;
the last M rows are per-class purified features, and class k's feature row is
wired to class k's classifier output only (diagonal wiring).

Incremental sessions follow an expand / train / merge cycle. ``expand``
freezes the previous sessions' embedding rows, appends fresh rows for the new
classes and creates a fresh plasticity head with one extra unknown output.
``merge`` folds the plasticity head's real-class columns into the frozen
stability head. The attention blocks themselves stay trainable in every
session; with ``freeze_old=False`` nothing is ever frozen, which is the plain
fine-tuning baseline.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_rowvec,
    concat_cols,
    concat_rows,
    layernorm_rows,
    matmul,
    mul,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    softmax_lastdim,
    transpose,
)
from .errors import RegistryError, ShapeError, StateError

EMBED_INIT_STD = 0.02
LAYERNORM_EPS = 1e-5
MODEL_SCHEMA_VERSION = 1


@dataclass
class LinearHead:
    """Per-class linear readout; ``w`` is (d, n) and ``b`` is (n, 1)."""

    w: Tensor
    b: Tensor

    @property
    def arity(self) -> int:
        return self.w.data.shape[1]


class AttentionBlock:
    """Residual pre-norm multi-head self-attention over the joint sequence."""

    def __init__(self, feature_dim: int, heads: int, rng: np.random.Generator):
        if feature_dim % heads != 0:
            raise ShapeError(f"feature_dim {feature_dim} not divisible by {heads} heads")
        self.feature_dim = feature_dim
        self.heads = heads
        d = feature_dim
        self.w_q = Tensor(rng.normal(0.0, EMBED_INIT_STD, (d, d)), requires_grad=True)
        self.w_k = Tensor(rng.normal(0.0, EMBED_INIT_STD, (d, d)), requires_grad=True)
        self.w_v = Tensor(rng.normal(0.0, EMBED_INIT_STD, (d, d)), requires_grad=True)
        self.w_o = Tensor(rng.normal(0.0, EMBED_INIT_STD, (d, d)), requires_grad=True)
        self.b_o = Tensor(np.zeros((1, d)), requires_grad=True)
        self.norm_gain = Tensor(np.ones((1, d)), requires_grad=True)
        self.norm_shift = Tensor(np.zeros((1, d)), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.b_o, self.norm_gain, self.norm_shift]

    def __call__(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        d, h = self.feature_dim, self.heads
        dh = d // h
        inv = 1.0 / math.sqrt(dh)
        xn = layernorm_rows(x, self.norm_gain, self.norm_shift, eps=LAYERNORM_EPS)
        q = matmul(xn, self.w_q)
        k = matmul(xn, self.w_k)
        v = matmul(xn, self.w_v)
        merged: Tensor | None = None
        for i in range(h):
            qi = slice_cols(q, i * dh, (i + 1) * dh)
            ki = slice_cols(k, i * dh, (i + 1) * dh)
            vi = slice_cols(v, i * dh, (i + 1) * dh)
            attn = softmax_lastdim(scale(matmul(qi, transpose(ki)), inv))
            if attn_sink is not None:
                attn_sink.append(attn.data.copy())
            head = matmul(attn, vi)
            merged = head if merged is None else concat_cols(merged, head)
        out = add_rowvec(matmul(merged, self.w_o), self.b_o)
        return add(x, out)


@dataclass
class ClassEmbeddingBank:
    """Frozen rows for past sessions' classes plus trainable rows for the current one."""

    frozen: Tensor | None = None
    trainable: Tensor | None = None
    frozen_ids: tuple[int, ...] = ()
    trainable_ids: tuple[int, ...] = ()

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.frozen_ids + self.trainable_ids

    @property
    def num_classes(self) -> int:
        return len(self.frozen_ids) + len(self.trainable_ids)

    def joint(self) -> Tensor:
        if self.trainable is None:
            raise StateError("embedding bank is empty; call expand_for_session first")
        if self.frozen is None:
            return self.trainable
        return concat_rows(self.frozen, self.trainable)


@dataclass
class PurifierOutput:
    o_p: Tensor
    o_s: Tensor
    attention: list[np.ndarray] | None = None


class PurifierModel:
    """Embedding bank, attention stack, and the stability/plasticity classifier pair."""

    def __init__(self, feature_dim: int, heads: int, num_blocks: int, rng: np.random.Generator,
                 freeze_old: bool = True):
        self.feature_dim = feature_dim
        self.heads = heads
        self.freeze_old = freeze_old
        self.blocks = [AttentionBlock(feature_dim, heads, rng) for _ in range(num_blocks)]
        self.bank = ClassEmbeddingBank()
        self.stability: LinearHead | None = None
        self.plasticity: LinearHead | None = None
        self.session = 0

    # -- bookkeeping --------------------------------------------------------

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.bank.class_ids

    def params(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.bank.frozen is not None:
            out.append(self.bank.frozen)
        if self.bank.trainable is not None:
            out.append(self.bank.trainable)
        for block in self.blocks:
            out.extend(block.params())
        if self.stability is not None:
            out.extend([self.stability.w, self.stability.b])
        if self.plasticity is not None:
            out.extend([self.plasticity.w, self.plasticity.b])
        return out

    def trainable_params(self) -> list[Tensor]:
        return [p for p in self.params() if p.requires_grad]

    def snapshot(self) -> "PurifierModel":
        return copy.deepcopy(self)

    # -- session lifecycle --------------------------------------------------

    def expand_for_session(self, new_class_ids: list[int], rng: np.random.Generator) -> None:
        """Freeze previous rows, add embeddings and a fresh plasticity head."""
        if self.plasticity is not None:
            raise StateError("expand_for_session before the previous session was merged")
        if not new_class_ids:
            raise RegistryError("expand_for_session needs at least one class id")
        known = set(self.bank.class_ids)
        fresh = set(new_class_ids)
        if len(fresh) != len(new_class_ids) or known & fresh:
            raise RegistryError(f"duplicate class ids in {new_class_ids}")

        if self.bank.trainable is not None:
            folded = (
                self.bank.trainable.data
                if self.bank.frozen is None
                else np.concatenate([self.bank.frozen.data, self.bank.trainable.data], axis=0)
            )
            self.bank.frozen = Tensor(folded, requires_grad=not self.freeze_old)
            self.bank.frozen_ids = self.bank.frozen_ids + self.bank.trainable_ids

        d, n = self.feature_dim, len(new_class_ids)
        self.bank.trainable = Tensor(rng.normal(0.0, EMBED_INIT_STD, (n, d)), requires_grad=True)
        self.bank.trainable_ids = tuple(new_class_ids)
        self.plasticity = LinearHead(
            w=Tensor(rng.normal(0.0, EMBED_INIT_STD, (d, n + 1)), requires_grad=True),
            b=Tensor(np.zeros((n + 1, 1)), requires_grad=True),
        )
        self.session += 1

    def merge_classifiers(self) -> None:
        """Fold the plasticity head's real columns into the stability head."""
        if self.plasticity is None:
            raise StateError("merge_classifiers without an active plasticity head")
        n_new = len(self.bank.trainable_ids)
        real_w = self.plasticity.w.data[:, :n_new]
        real_b = self.plasticity.b.data[:n_new]
        if self.stability is None:
            w, b = real_w.copy(), real_b.copy()
        else:
            w = np.concatenate([self.stability.w.data, real_w], axis=1)
            b = np.concatenate([self.stability.b.data, real_b], axis=0)
        keep_trainable = not self.freeze_old
        self.stability = LinearHead(
            w=Tensor(w, requires_grad=keep_trainable),
            b=Tensor(b, requires_grad=keep_trainable),
        )
        self.plasticity = None

    # -- forward ------------------------------------------------------------

    def forward(self, tokens: np.ndarray, record_attention: bool = False) -> PurifierOutput:
        """Purify one sample's tokens; returns contextualised tokens and class features."""
        if tokens.ndim != 2 or tokens.shape[1] != self.feature_dim:
            raise ShapeError(f"tokens shape {tokens.shape} does not match feature_dim {self.feature_dim}")
        num_tokens = tokens.shape[0]
        sink: list[np.ndarray] | None = [] if record_attention else None
        x = concat_rows(Tensor(tokens), self.bank.joint())
        for block in self.blocks:
            x = block(x, sink)
        o_p = slice_rows(x, 0, num_tokens)
        o_s = slice_rows(x, num_tokens, num_tokens + self.bank.num_classes)
        return PurifierOutput(o_p=o_p, o_s=o_s, attention=sink)

    def classify(self, o_s: Tensor, unknown_feature: Tensor | None = None) -> Tensor:
        """Diagonal per-class logits, plus an unknown logit when a feature is given.

        Row k of ``o_s`` only ever reaches output k. Before a merge the first
        ``stability.arity`` rows go through the frozen head and the rest
        through the plasticity head; after a merge everything is stability.
        """
        m = o_s.data.shape[0]
        n_old = self.stability.arity if self.stability is not None else 0
        n_new = self.plasticity.arity - 1 if self.plasticity is not None else 0
        if m != n_old + n_new:
            raise ShapeError(f"classify: {m} feature rows vs heads covering {n_old}+{n_new}")
        ones = Tensor(np.ones((self.feature_dim, 1)))
        parts: list[Tensor] = []
        if n_old > 0:
            o_old = slice_rows(o_s, 0, n_old) if m > n_old else o_s
            prod = mul(o_old, transpose(self.stability.w))
            parts.append(add(matmul(prod, ones), self.stability.b))
        if n_new > 0:
            o_new = slice_rows(o_s, n_old, m) if n_old > 0 else o_s
            w_real = slice_cols(self.plasticity.w, 0, n_new)
            b_real = slice_rows(self.plasticity.b, 0, n_new)
            prod = mul(o_new, transpose(w_real))
            parts.append(add(matmul(prod, ones), b_real))
        logits = parts[0] if len(parts) == 1 else concat_rows(parts[0], parts[1])
        if unknown_feature is not None:
            if self.plasticity is None:
                raise StateError("unknown logit requested but no plasticity head is active")
            w_u = slice_cols(self.plasticity.w, n_new, n_new + 1)
            b_u = slice_rows(self.plasticity.b, n_new, n_new + 1)
            logits = concat_rows(logits, add(matmul(unknown_feature, w_u), b_u))
        return logits

    def classify_unknown_rows(self, features: Tensor) -> Tensor:
        """Unknown-head logits for each feature row, e.g. present-class rows as negatives."""
        if self.plasticity is None:
            raise StateError("unknown logits requested but no plasticity head is active")
        n_new = self.plasticity.arity - 1
        w_u = slice_cols(self.plasticity.w, n_new, n_new + 1)
        b_u = slice_rows(self.plasticity.b, n_new, n_new + 1)
        return add(matmul(features, w_u), b_u)

    def predict_probs(self, tokens: np.ndarray) -> np.ndarray:
        """Inference helper: per-class probabilities aligned with ``class_ids``."""
        out = self.forward(tokens)
        return sigmoid(self.classify(out.o_s)).data.reshape(-1)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def arr(t: Tensor | None):
            return None if t is None else t.data.tolist()

        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "session": self.session,
            "feature_dim": self.feature_dim,
            "heads": self.heads,
            "freeze_old": self.freeze_old,
            "bank": {
                "frozen": arr(self.bank.frozen),
                "trainable": arr(self.bank.trainable),
                "frozen_ids": list(self.bank.frozen_ids),
                "trainable_ids": list(self.bank.trainable_ids),
            },
            "blocks": [
                {
                    "w_q": b.w_q.data.tolist(),
                    "w_k": b.w_k.data.tolist(),
                    "w_v": b.w_v.data.tolist(),
                    "w_o": b.w_o.data.tolist(),
                    "b_o": b.b_o.data.tolist(),
                    "norm_gain": b.norm_gain.data.tolist(),
                    "norm_shift": b.norm_shift.data.tolist(),
                }
                for b in self.blocks
            ],
            "classifiers": {
                "stability": None if self.stability is None
                else {"w": self.stability.w.data.tolist(), "b": self.stability.b.data.tolist()},
                "plasticity": None if self.plasticity is None
                else {"w": self.plasticity.w.data.tolist(), "b": self.plasticity.b.data.tolist()},
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PurifierModel":
        if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise StateError(f"unsupported model schema version {payload.get('schema_version')}")
        rng = np.random.default_rng(0)  # block weights are overwritten below
        model = cls(
            feature_dim=payload["feature_dim"],
            heads=payload["heads"],
            num_blocks=len(payload["blocks"]),
            rng=rng,
            freeze_old=payload["freeze_old"],
        )
        model.session = payload["session"]
        keep = not model.freeze_old
        bank = payload["bank"]
        model.bank.frozen_ids = tuple(bank["frozen_ids"])
        model.bank.trainable_ids = tuple(bank["trainable_ids"])
        if bank["frozen"] is not None:
            model.bank.frozen = Tensor(np.array(bank["frozen"]), requires_grad=keep)
        if bank["trainable"] is not None:
            model.bank.trainable = Tensor(np.array(bank["trainable"]), requires_grad=True)
        for block, bp in zip(model.blocks, payload["blocks"]):
            block.w_q = Tensor(np.array(bp["w_q"]), requires_grad=True)
            block.w_k = Tensor(np.array(bp["w_k"]), requires_grad=True)
            block.w_v = Tensor(np.array(bp["w_v"]), requires_grad=True)
            block.w_o = Tensor(np.array(bp["w_o"]), requires_grad=True)
            block.b_o = Tensor(np.array(bp["b_o"]), requires_grad=True)
            block.norm_gain = Tensor(np.array(bp["norm_gain"]), requires_grad=True)
            block.norm_shift = Tensor(np.array(bp["norm_shift"]), requires_grad=True)
        heads = payload["classifiers"]
        if heads["stability"] is not None:
            model.stability = LinearHead(
                w=Tensor(np.array(heads["stability"]["w"]), requires_grad=keep),
                b=Tensor(np.array(heads["stability"]["b"]), requires_grad=keep),
            )
        if heads["plasticity"] is not None:
            model.plasticity = LinearHead(
                w=Tensor(np.array(heads["plasticity"]["w"]), requires_grad=True),
                b=Tensor(np.array(heads["plasticity"]["b"]), requires_grad=True),
            )
        return model
