"""Multimodal MLP classifier with a decomposable decision layer.

Parameters live in named groups: ``encoder{u}`` for each modality (the
MLP layers, plus probe heads for nonlinear fusions) and ``decision`` for
everything that produces the fused logits. The trainer routes gradients
between these groups.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import (
    ShapeError,
    affine_backward,
    affine_forward,
    glorot_uniform,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax,
)

FUSIONS = ("concat", "sum", "film", "gated")
CHECKPOINT_MAGIC = "BMLR-CKPT-1"
DECISION = "decision"


def encoder_group(u):
    return f"encoder{u}"


@dataclass(frozen=True)
class Routing:
    """Which loss heads may send gradient into which parameter groups."""

    fused_to_decision: bool = True
    fused_to_encoders: bool = True
    unimodal_to_decision: bool = True
    unimodal_to_encoders: bool = True


JOINT = Routing()
# Targeted parameter optimization: encoders learn only from their own
# unimodal loss, the decision layer only from the fused loss.
TARGETED = Routing(
    fused_to_decision=True,
    fused_to_encoders=False,
    unimodal_to_decision=False,
    unimodal_to_encoders=True,
)


@dataclass
class ForwardTrace:
    features: list          # z^u, (N, d_u) each
    unimodal_logits: list   # (N, C) each
    unimodal_probs: list
    fused_logits: np.ndarray
    probs: np.ndarray
    cache: dict
    version: int

    @property
    def n_modalities(self):
        return len(self.features)


class MultimodalClassifier:
    """Per-modality MLP encoders feeding one of four fusion heads.

    ``input_dims`` gives the raw input width of each modality; ``hidden``
    the encoder layer widths (the last entry is the feature width).
    """

    def __init__(self, input_dims, n_classes, hidden=(64, 32), fusion="concat", rng=None):
        if fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
        if len(input_dims) < 2:
            raise ValueError("need at least two modalities")
        if fusion in ("film", "gated") and len(input_dims) != 2:
            raise ValueError(f"{fusion} fusion is defined for exactly two modalities")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.input_dims = tuple(int(d) for d in input_dims)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        if not self.hidden:
            raise ValueError("encoders need at least one layer")
        self.fusion = fusion
        self.version = 0
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = self._init_params(rng)
        self._shapes = {g: {k: v.shape for k, v in b.items()} for g, b in self.params.items()}

    @property
    def n_modalities(self):
        return len(self.input_dims)

    @property
    def feature_dims(self):
        return tuple(self.hidden[-1] for _ in self.input_dims)

    @property
    def n_layers(self):
        return len(self.hidden)

    def _init_params(self, rng):
        C = self.n_classes
        params = {}
        for u, d_in in enumerate(self.input_dims):
            group = {}
            widths = (d_in,) + self.hidden
            for i in range(len(self.hidden)):
                group[f"W{i}"] = glorot_uniform(rng, widths[i + 1], widths[i])
                group[f"b{i}"] = np.zeros(widths[i + 1])
            if self.fusion in ("film", "gated"):
                group["probe_W"] = glorot_uniform(rng, C, widths[-1])
                group["probe_b"] = np.zeros(C)
            params[encoder_group(u)] = group

        d = self.hidden[-1]
        dec = {}
        if self.fusion == "concat":
            full = glorot_uniform(rng, C, d * self.n_modalities)
            for u in range(self.n_modalities):
                dec[f"W{u}"] = full[:, u * d:(u + 1) * d].copy()
        elif self.fusion == "sum":
            dec["W"] = glorot_uniform(rng, C, d)
        elif self.fusion == "film":
            dec["gamma_W"] = glorot_uniform(rng, d, d)
            dec["gamma_b"] = np.ones(d)
            dec["shift_W"] = glorot_uniform(rng, d, d)
            dec["shift_b"] = np.zeros(d)
            dec["W"] = glorot_uniform(rng, C, d)
        else:
            dec["gate_W"] = glorot_uniform(rng, d, 2 * d)
            dec["gate_b"] = np.zeros(d)
            dec["W"] = glorot_uniform(rng, C, d)
        dec["b"] = np.zeros(C)
        params[DECISION] = dec
        return params

    def set_params(self, params):
        """Replace all parameters (same structure) and invalidate old traces."""
        # checked against the layout fixed at construction, since callers may
        # hand back the very dict they mutated
        for g, block in self._shapes.items():
            for name, shape in block.items():
                new = np.asarray(params[g][name], dtype=np.float64)
                if new.shape != shape:
                    raise ShapeError(f"{g}.{name}: expected {shape}, got {new.shape}")
        self.params = {g: {k: np.asarray(v, dtype=np.float64) for k, v in b.items()}
                       for g, b in params.items()}
        self.version += 1

    def zero_grads(self):
        return {g: {k: np.zeros_like(v) for k, v in b.items()} for g, b in self.params.items()}

    # -- forward ----------------------------------------------------------

    def encode(self, x, u):
        """Forward modality ``u`` input through its encoder; returns (z, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dims[u]:
            raise ShapeError(f"modality {u} expects width {self.input_dims[u]}, got {x.shape[-1]}")
        group = self.params[encoder_group(u)]
        inputs, pre = [], []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            a = affine_forward(h, group[f"W{i}"], group[f"b{i}"])
            pre.append(a)
            h = relu_forward(a) if i < self.n_layers - 1 else a
        return h, {"inputs": inputs, "pre": pre}

    def unimodal_logits(self, z, u):
        """Per-modality logits: W^u z^u + b/M for linear fusions, a probe head otherwise."""
        if not 0 <= u < self.n_modalities:
            raise ValueError(f"unknown modality id {u}")
        dec = self.params[DECISION]
        M = self.n_modalities
        if self.fusion == "concat":
            return affine_forward(z, dec[f"W{u}"], dec["b"] / M)
        if self.fusion == "sum":
            return affine_forward(z, dec["W"], dec["b"] / M)
        enc = self.params[encoder_group(u)]
        return affine_forward(z, enc["probe_W"], enc["probe_b"])

    def fuse(self, zs):
        """Fused logits from the feature list; returns (logits, cache)."""
        dec = self.params[DECISION]
        if self.fusion == "concat":
            out = dec["b"] + sum(z @ dec[f"W{u}"].T for u, z in enumerate(zs))
            return out, {}
        if self.fusion == "sum":
            s = sum(zs)
            return affine_forward(s, dec["W"], dec["b"]), {"h": s}
        za, zv = zs
        if self.fusion == "film":
            gamma = affine_forward(za, dec["gamma_W"], dec["gamma_b"])
            shift = affine_forward(za, dec["shift_W"], dec["shift_b"])
            h = gamma * zv + shift
            return affine_forward(h, dec["W"], dec["b"]), {"gamma": gamma, "h": h}
        cat = np.concatenate([za, zv], axis=-1)
        g = sigmoid(affine_forward(cat, dec["gate_W"], dec["gate_b"]))
        h = g * za + (1.0 - g) * zv
        return affine_forward(h, dec["W"], dec["b"]), {"cat": cat, "g": g, "h": h}

    def forward(self, xs):
        if len(xs) != self.n_modalities:
            raise ShapeError(f"expected {self.n_modalities} modality inputs, got {len(xs)}")
        xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in xs]
        n = {x.shape[0] for x in xs}
        if len(n) != 1 or 0 in n:
            raise ShapeError(f"modality batches must be equal and non-empty, got sizes {n}")
        zs, enc_caches = [], []
        for u, x in enumerate(xs):
            z, c = self.encode(x, u)
            zs.append(z)
            enc_caches.append(c)
        uni = [self.unimodal_logits(z, u) for u, z in enumerate(zs)]
        fused, fcache = self.fuse(zs)
        return ForwardTrace(
            features=zs,
            unimodal_logits=uni,
            unimodal_probs=[softmax(l) for l in uni],
            fused_logits=fused,
            probs=softmax(fused),
            cache={"encoders": enc_caches, "fusion": fcache},
            version=self.version,
        )

    # -- backward ---------------------------------------------------------

    def backward(self, trace, grad_fused=None, grad_unimodal=None, routing=JOINT):
        """Gradients w.r.t. every parameter group.

        ``grad_fused`` is dL/d(fused logits), ``grad_unimodal`` a list of
        dL/d(unimodal logits) per modality (``None`` entries allowed).
        Groups excluded by ``routing`` get exact zeros from that head.
        """
        if trace is None or trace.version != self.version or "encoders" not in trace.cache:
            raise ValueError("stale or missing forward trace; run forward() again")
        grads = self.zero_grads()
        dec_p = self.params[DECISION]
        dec_g = grads[DECISION]
        zs = trace.features
        M = self.n_modalities
        dz = [np.zeros_like(z) for z in zs]

        if grad_fused is not None:
            self._backward_fusion(trace, np.asarray(grad_fused, dtype=np.float64),
                                  dec_g if routing.fused_to_decision else None,
                                  dz if routing.fused_to_encoders else None)

        if grad_unimodal is not None:
            for u, g in enumerate(grad_unimodal):
                if g is None:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if self.fusion in ("concat", "sum"):
                    key = f"W{u}" if self.fusion == "concat" else "W"
                    d_in, d_w, d_b = affine_backward(g, zs[u], dec_p[key])
                    if routing.unimodal_to_decision:
                        dec_g[key] += d_w
                        dec_g["b"] += d_b / M
                else:
                    enc_p = self.params[encoder_group(u)]
                    d_in, d_w, d_b = affine_backward(g, zs[u], enc_p["probe_W"])
                    if routing.unimodal_to_encoders:
                        grads[encoder_group(u)]["probe_W"] += d_w
                        grads[encoder_group(u)]["probe_b"] += d_b
                if routing.unimodal_to_encoders:
                    dz[u] += d_in

        for u in range(M):
            self._backward_encoder(trace, u, dz[u], grads[encoder_group(u)])
        return grads

    def _backward_fusion(self, trace, g, dec_g, dz):
        dec = self.params[DECISION]
        zs = trace.features
        fc = trace.cache["fusion"]
        if self.fusion == "concat":
            for u, z in enumerate(zs):
                d_in, d_w, _ = affine_backward(g, z, dec[f"W{u}"])
                if dec_g is not None:
                    dec_g[f"W{u}"] += d_w
                if dz is not None:
                    dz[u] += d_in
            if dec_g is not None:
                dec_g["b"] += g.sum(axis=0)
            return
        d_h, d_w, d_b = affine_backward(g, fc["h"], dec["W"])
        if dec_g is not None:
            dec_g["W"] += d_w
            dec_g["b"] += d_b
        if self.fusion == "sum":
            if dz is not None:
                for u in range(len(zs)):
                    dz[u] += d_h
            return
        za, zv = zs
        if self.fusion == "film":
            d_gamma = d_h * zv
            dza_g, dW_g, db_g = affine_backward(d_gamma, za, dec["gamma_W"])
            dza_s, dW_s, db_s = affine_backward(d_h, za, dec["shift_W"])
            if dec_g is not None:
                dec_g["gamma_W"] += dW_g
                dec_g["gamma_b"] += db_g
                dec_g["shift_W"] += dW_s
                dec_g["shift_b"] += db_s
            if dz is not None:
                dz[0] += dza_g + dza_s
                dz[1] += d_h * fc["gamma"]
            return
        gate = fc["g"]
        d_gate = d_h * (za - zv)
        d_pre = d_gate * gate * (1.0 - gate)
        d_cat, dW_gate, db_gate = affine_backward(d_pre, fc["cat"], dec["gate_W"])
        if dec_g is not None:
            dec_g["gate_W"] += dW_gate
            dec_g["gate_b"] += db_gate
        if dz is not None:
            d = za.shape[-1]
            dz[0] += d_h * gate + d_cat[..., :d]
            dz[1] += d_h * (1.0 - gate) + d_cat[..., d:]

    def _backward_encoder(self, trace, u, dz, grads):
        if not dz.any():
            return
        cache = trace.cache["encoders"][u]
        group = self.params[encoder_group(u)]
        up = dz
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                up = relu_backward(up, cache["pre"][i])
            up, d_w, d_b = affine_backward(up, cache["inputs"][i], group[f"W{i}"])
            grads[f"W{i}"] += d_w
            grads[f"b{i}"] += d_b

    # -- checkpoints ------------------------------------------------------

    def save(self, path):
        blocks = []
        for g in sorted(self.params):
            for name in sorted(self.params[g]):
                arr = self.params[g][name]
                blocks.append({
                    "group": g,
                    "name": name,
                    "shape": list(arr.shape),
                    "data": [float(v) for v in arr.reshape(-1)],
                })
        doc = {
            "magic": CHECKPOINT_MAGIC,
            "fusion": self.fusion,
            "n_classes": self.n_classes,
            "input_dims": list(self.input_dims),
            "hidden": list(self.hidden),
            "blocks": blocks,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        if doc.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        model = cls(doc["input_dims"], doc["n_classes"], doc["hidden"], doc["fusion"])
        params = model.zero_grads()
        seen = set()
        for blk in doc["blocks"]:
            key = (blk["group"], blk["name"])
            if blk["group"] not in params or blk["name"] not in params[blk["group"]]:
                raise ValueError(f"{path}: unexpected block {key}")
            params[blk["group"]][blk["name"]] = np.asarray(
                blk["data"], dtype=np.float64).reshape(blk["shape"])
            seen.add(key)
        missing = {(g, n) for g, b in params.items() for n in b} - seen
        if missing:
            raise ValueError(f"{path}: missing blocks {sorted(missing)}")
        model.set_params(params)
        return model
