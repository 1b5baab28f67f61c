"""Wide+deep CTR model zoo built on the tensor engine.

Every model computes a logit as the sum of an optional wide part and an
optional deep MLP part, both reading a single shared set of per-field
embedding tables:

    wide&deep = LR + MLP        deepfm = FM + MLP
    dcn       = CrossNet + MLP  xdeepfm = CIN + MLP
    dnn       = MLP only        lr / fm = wide only

Numeric features feed the MLP and CrossNet as raw (already transformed)
scalars; FM and CIN need field vectors, so each numeric field gets a
learned d-dimensional projection of its scalar value.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMBED_INIT_STD = 0.05

WIDE_KINDS = ("none", "lr", "fm", "cross", "cin")
ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture: which wide part, deep sizes, embedding dim."""

    wide: str = "none"
    deep: tuple[int, ...] = ()
    embedding_dim: int = 10
    cross_layers: int = 3
    cin_maps: tuple[int, ...] = (4,)
    dropout: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "deep", tuple(int(h) for h in self.deep))
        object.__setattr__(self, "cin_maps", tuple(int(h) for h in self.cin_maps))
        if self.wide not in WIDE_KINDS:
            raise ValueError(f"unknown wide part {self.wide!r}")
        if self.wide == "none" and not self.deep:
            raise ValueError("model needs at least one of a wide or deep part")
        if any(h < 1 for h in self.deep):
            raise ValueError("hidden sizes must be positive")
        if self.needs_embeddings and self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.wide == "cross" and self.cross_layers < 1:
            raise ValueError("cross_layers must be >= 1")
        if self.wide == "cin" and (not self.cin_maps or any(h < 1 for h in self.cin_maps)):
            raise ValueError("cin_maps must be a non-empty list of positive sizes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def needs_embeddings(self) -> bool:
        return bool(self.deep) or self.wide in ("fm", "cross", "cin")

    # -- the zoo ----------------------------------------------------------
    @classmethod
    def lr(cls) -> "ModelSpec":
        return cls(wide="lr")

    @classmethod
    def fm(cls, embedding_dim: int = 10) -> "ModelSpec":
        return cls(wide="fm", embedding_dim=embedding_dim)

    @classmethod
    def dnn(cls, hidden=(64, 64), embedding_dim: int = 10, dropout: float = 0.0) -> "ModelSpec":
        return cls(deep=tuple(hidden), embedding_dim=embedding_dim, dropout=dropout)

    @classmethod
    def wide_deep(cls, hidden=(64, 64), embedding_dim: int = 10, dropout: float = 0.0) -> "ModelSpec":
        return cls(wide="lr", deep=tuple(hidden), embedding_dim=embedding_dim, dropout=dropout)

    @classmethod
    def deepfm(cls, hidden=(64, 64), embedding_dim: int = 10, dropout: float = 0.0) -> "ModelSpec":
        return cls(wide="fm", deep=tuple(hidden), embedding_dim=embedding_dim, dropout=dropout)

    @classmethod
    def dcn(cls, cross_layers: int = 3, hidden=(64, 64), embedding_dim: int = 10,
            dropout: float = 0.0) -> "ModelSpec":
        return cls(wide="cross", cross_layers=cross_layers, deep=tuple(hidden),
                   embedding_dim=embedding_dim, dropout=dropout)

    @classmethod
    def xdeepfm(cls, cin_maps=(4, 4), hidden=(64, 64), embedding_dim: int = 10,
                dropout: float = 0.0) -> "ModelSpec":
        return cls(wide="cin", cin_maps=tuple(cin_maps), deep=tuple(hidden),
                   embedding_dim=embedding_dim, dropout=dropout)

    # -- config/checkpoint serialization ----------------------------------
    def to_kv(self) -> dict[str, str]:
        return {
            "wide": self.wide,
            "deep": ",".join(str(h) for h in self.deep),
            "embedding_dim": str(self.embedding_dim),
            "cross_layers": str(self.cross_layers),
            "cin_maps": ",".join(str(h) for h in self.cin_maps),
            "dropout": repr(self.dropout),
            "activation": self.activation,
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelSpec":
        def ints(s):
            return tuple(int(x) for x in s.split(",") if x != "")
        return cls(wide=kv["wide"], deep=ints(kv["deep"]),
                   embedding_dim=int(kv["embedding_dim"]),
                   cross_layers=int(kv["cross_layers"]),
                   cin_maps=ints(kv["cin_maps"]) or (4,),
                   dropout=float(kv["dropout"]),
                   activation=kv.get("activation", "relu"))


PRESETS = ("lr", "fm", "dnn", "wide_deep", "deepfm", "dcn", "xdeepfm")


def spec_from_preset(name: str, *, embedding_dim: int = 10, hidden=(64, 64),
                     dropout: float = 0.0, cross_layers: int = 3,
                     cin_maps=(4, 4)) -> ModelSpec:
    if name == "lr":
        return ModelSpec.lr()
    if name == "fm":
        return ModelSpec.fm(embedding_dim)
    if name == "dnn":
        return ModelSpec.dnn(hidden, embedding_dim, dropout)
    if name == "wide_deep":
        return ModelSpec.wide_deep(hidden, embedding_dim, dropout)
    if name == "deepfm":
        return ModelSpec.deepfm(hidden, embedding_dim, dropout)
    if name == "dcn":
        return ModelSpec.dcn(cross_layers, hidden, embedding_dim, dropout)
    if name == "xdeepfm":
        return ModelSpec.xdeepfm(cin_maps, hidden, embedding_dim, dropout)
    raise ValueError(f"unknown model preset {name!r}; choose one of {PRESETS}")


@dataclass(frozen=True)
class FieldDims:
    """Input geometry: vocabulary size per categorical field + numeric count."""

    vocab_sizes: tuple[int, ...]
    n_numeric: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if any(v < 1 for v in self.vocab_sizes):
            raise ValueError("vocabulary sizes must be >= 1")
        if self.n_numeric < 0:
            raise ValueError("n_numeric must be >= 0")


def _xavier(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """One zoo instance: parameters plus the forward graph builders."""

    def __init__(self, spec: ModelSpec, dims: FieldDims, seed: int = 0,
                 dtype=np.float64):
        self.spec = spec
        self.dims = dims
        self.dtype = np.dtype(dtype)
        n_cat = len(dims.vocab_sizes)
        if spec.needs_embeddings and n_cat + dims.n_numeric == 0:
            raise ValueError("model needs at least one input field")
        self._params: list[Tensor] = []
        rng = np.random.default_rng(seed)
        d = spec.embedding_dim

        # shared embedding tables, one per categorical field
        self.embeddings: list[Tensor] = []
        if spec.needs_embeddings:
            for i, v in enumerate(dims.vocab_sizes):
                self.embeddings.append(self._param(
                    f"embed.{i}", rng.normal(0.0, EMBED_INIT_STD, size=(v, d))))

        # learned d-dim projection of each numeric scalar, for FM/CIN fields
        self.numeric_proj: list[Tensor] = []
        if spec.wide in ("fm", "cin"):
            for j in range(dims.n_numeric):
                self.numeric_proj.append(self._param(
                    f"numproj.{j}", rng.normal(0.0, EMBED_INIT_STD, size=(1, d))))

        self._n_fields = n_cat + (len(self.numeric_proj) if spec.wide in ("fm", "cin") else 0)
        concat_dim = n_cat * d + dims.n_numeric

        if spec.wide in ("lr", "fm"):
            prefix = spec.wide
            self.linear_cat = [self._param(f"{prefix}.cat.{i}", np.zeros((v, 1)))
                               for i, v in enumerate(dims.vocab_sizes)]
            self.linear_num = (self._param(f"{prefix}.num", np.zeros((dims.n_numeric, 1)))
                               if dims.n_numeric else None)
            self.linear_bias = self._param(f"{prefix}.bias", np.zeros((1, 1)))

        if spec.wide == "cross":
            self.cross_w = [self._param(f"cross.{l}.w",
                                        rng.normal(0.0, 1.0 / np.sqrt(concat_dim),
                                                   size=(concat_dim, 1)))
                            for l in range(spec.cross_layers)]
            self.cross_b = [self._param(f"cross.{l}.b", np.zeros((1, concat_dim)))
                            for l in range(spec.cross_layers)]
            self.cross_head_w = self._param(
                "cross.head.w", _xavier(rng, concat_dim, 1, (concat_dim, 1)))
            self.cross_head_b = self._param("cross.head.b", np.zeros((1, 1)))

        if spec.wide == "cin":
            m = self._n_fields
            self.cin_w = []
            prev = m
            for k, h in enumerate(spec.cin_maps):
                fan_in = prev * m
                self.cin_w.append(self._param(
                    f"cin.{k}.w", rng.normal(0.0, np.sqrt(2.0 / (fan_in + h)),
                                             size=(h, fan_in))))
                prev = h
            total = sum(spec.cin_maps)
            self.cin_head_w = self._param("cin.head.w", _xavier(rng, total, 1, (total, 1)))
            self.cin_head_b = self._param("cin.head.b", np.zeros((1, 1)))

        if spec.deep:
            self.mlp = []
            fan_in = concat_dim
            for l, h in enumerate(spec.deep):
                w = self._param(f"mlp.{l}.w", _xavier(rng, fan_in, h, (fan_in, h)))
                b = self._param(f"mlp.{l}.b", np.zeros((1, h)))
                self.mlp.append((w, b))
                fan_in = h
            self.mlp_head_w = self._param("mlp.head.w", _xavier(rng, fan_in, 1, (fan_in, 1)))
            self.mlp_head_b = self._param("mlp.head.b", np.zeros((1, 1)))

    def _param(self, name: str, values) -> Tensor:
        t = T.parameter(np.asarray(values, dtype=self.dtype), name=name)
        self._params.append(t)
        return t

    # -- parameter access -------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self._params]

    def embedding_parameters(self) -> list[Tensor]:
        """The feature-embedding parameters, the only L2-regularized ones."""
        return list(self.embeddings) + list(self.numeric_proj)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    @property
    def hint_dim(self) -> int:
        """Width of the representation used as the hint vector."""
        if self.spec.deep:
            return self.spec.deep[-1]
        if self.spec.wide == "fm":
            return self.spec.embedding_dim
        if self.spec.wide == "cross":
            return len(self.dims.vocab_sizes) * self.spec.embedding_dim + self.dims.n_numeric
        if self.spec.wide == "cin":
            return sum(self.spec.cin_maps)
        return 1  # lr: degenerate single-logit hint

    # -- forward ----------------------------------------------------------
    def _inputs(self, cat, num):
        cat = np.asarray(cat)
        num = np.asarray(num, dtype=np.float64)
        if cat.ndim != 2 or cat.shape[1] != len(self.dims.vocab_sizes):
            raise ValueError(f"expected cat of shape (B, {len(self.dims.vocab_sizes)})")
        if num.ndim != 2 or num.shape[1] != self.dims.n_numeric:
            raise ValueError(f"expected num of shape (B, {self.dims.n_numeric})")
        if cat.shape[0] != num.shape[0]:
            raise ValueError("cat and num batch sizes differ")
        embeds = [T.rows(table, cat[:, i]) for i, table in enumerate(self.embeddings)]
        return cat, num, embeds

    def _field_vectors(self, embeds, num):
        """Per-field d-dim vectors for FM/CIN: embeddings + projected numerics."""
        vectors = list(embeds)
        for j, proj in enumerate(self.numeric_proj):
            vectors.append(T.matmul(Tensor(num[:, j:j + 1]), proj))
        return vectors

    def _linear_logit(self, cat, num):
        out = self.linear_bias
        for i, table in enumerate(self.linear_cat):
            out = T.add(T.rows(table, cat[:, i]), out)
        if self.linear_num is not None:
            out = T.add(out, T.matmul(Tensor(num), self.linear_num))
        if out is self.linear_bias:  # degenerate: no fields at all
            out = T.add(out, Tensor(np.zeros((num.shape[0], 1))))
        return out

    def _fm(self, cat, num, embeds):
        linear = self._linear_logit(cat, num)
        vectors = self._field_vectors(embeds, num)
        # sum_{i<j} <v_i, v_j> via 0.5 * ((sum v)^2 - sum v^2)
        total = vectors[0]
        total_sq = T.square(vectors[0])
        for v in vectors[1:]:
            total = T.add(total, v)
            total_sq = T.add(total_sq, T.square(v))
        pair = T.mul(T.sub(T.square(total), total_sq), 0.5)
        logit = T.add(linear, T.reduce_sum(pair, axis=1, keepdims=True))
        return logit, pair

    def _cross(self, num, embeds):
        parts = list(embeds)
        if self.dims.n_numeric:
            parts.append(Tensor(num))
        x0 = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        x = x0
        for w, b in zip(self.cross_w, self.cross_b):
            # x_{l+1} = x0 * (x_l . w_l) + b_l + x_l
            s = T.matmul(x, w)
            x = T.add(T.add(T.mul(x0, T.expand(s, x0.shape)), T.expand(b, x0.shape)), x)
        logit = T.add(T.matmul(x, self.cross_head_w), self.cross_head_b)
        return logit, x

    def _cin(self, num, embeds):
        fields = self._field_vectors(embeds, num)
        b = fields[0].shape[0]
        d = self.spec.embedding_dim
        # columns of fmat are the base feature maps X^0, flattened over (b, d)
        fmat = T.concat([T.reshape(v, (b * d, 1)) for v in fields], axis=1)
        prev = fmat
        pooled = []
        for w, h in zip(self.cin_w, self.spec.cin_maps):
            # map h: sum_{i,j} W[h, i*m+j] * (X^{k-1}_i o X^0_j)
            zmat = T.pairwise_mul(prev, fmat)                 # (B*d, prev*m)
            xmat = T.matmul(zmat, T.transpose(w))             # (B*d, h)
            pooled.append(T.reduce_sum(T.reshape(xmat, (b, d, h)), axis=1))
            prev = xmat
        vec = T.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
        logit = T.add(T.matmul(vec, self.cin_head_w), self.cin_head_b)
        return logit, vec

    def _deep(self, num, embeds, training, rng):
        parts = list(embeds)
        if self.dims.n_numeric:
            parts.append(Tensor(num))
        x = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        act = T.relu if self.spec.activation == "relu" else T.sigmoid
        for w, b in self.mlp:
            x = act(T.add(T.matmul(x, w), T.expand(b, (x.shape[0], b.shape[1]))))
            if self.spec.dropout > 0.0:
                x = T.dropout(x, self.spec.dropout, training, rng)
        logit = T.add(T.matmul(x, self.mlp_head_w), self.mlp_head_b)
        return logit, x

    def wide_logit(self, cat, num) -> tuple[Tensor, Tensor] | tuple[None, None]:
        """Wide-part logit and its pre-head vector, or (None, None)."""
        cat, num, embeds = self._inputs(cat, num)
        return self._wide_from_inputs(cat, num, embeds)

    def _wide_from_inputs(self, cat, num, embeds):
        if self.spec.wide == "none":
            return None, None
        if self.spec.wide == "lr":
            logit = self._linear_logit(cat, num)
            return logit, logit
        if self.spec.wide == "fm":
            return self._fm(cat, num, embeds)
        if self.spec.wide == "cross":
            return self._cross(num, embeds)
        return self._cin(num, embeds)

    def deep_logit(self, cat, num, training: bool = False,
                   rng: np.random.Generator | None = None):
        """Deep-part logit and final hidden activation, or (None, None)."""
        if not self.spec.deep:
            return None, None
        cat, num, embeds = self._inputs(cat, num)
        return self._deep(num, embeds, training, rng)

    def forward(self, cat, num, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Logit = wide + deep; hint = last hidden activation when a deep
        part exists, else the wide part's pre-head vector."""
        cat, num, embeds = self._inputs(cat, num)
        wide, wide_vec = self._wide_from_inputs(cat, num, embeds)
        deep, hidden = (self._deep(num, embeds, training, rng)
                        if self.spec.deep else (None, None))
        if wide is None:
            logit = deep
        elif deep is None:
            logit = wide
        else:
            logit = T.add(wide, deep)
        hint = hidden if hidden is not None else wide_vec
        return logit, hint

    def logit_values(self, cat, num) -> np.ndarray:
        """Inference-mode logits as a raw (B, 1) array, outside any graph."""
        return self.forward(cat, num, training=False)[0].values

    def hint_values(self, cat, num) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode (logit, hint) value arrays."""
        logit, hint = self.forward(cat, num, training=False)
        return logit.values, hint.values

    def predict_proba(self, cat, num) -> np.ndarray:
        """sigmoid(logit) as a flat probability array."""
        return T.sigmoid_values(self.logit_values(cat, num)).reshape(-1)

    # -- state ------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self._params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        names = {p.name for p in self._params}
        if names != set(state):
            missing = names ^ set(state)
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for p in self._params:
            src = np.asarray(state[p.name], dtype=self.dtype)
            if src.shape != p.values.shape:
                raise ValueError(f"shape mismatch for {p.name}: "
                                 f"{src.shape} vs {p.values.shape}")
            np.copyto(p.values, src)
