"""Analytic-vs-finite-difference gradient comparison on tiny random models."""

from dataclasses import dataclass, field

import numpy as np

from .model import JOINT, FUSIONS, MultimodalClassifier
from .numeric import cross_entropy, finite_diff_grad

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradcheckReport:
    seed: int
    entries: list = field(default_factory=list)  # (model, head, param, rel_err)

    @property
    def max_error(self):
        return max(e[3] for e in self.entries)

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e[3])

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def relative_error(a, b):
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if num == 0 else float(num / max(den, 1e-8))


def _tiny_models(rng):
    specs = [((3, 4), f) for f in FUSIONS] + [((3, 4, 2), "concat"), ((3, 4, 2), "sum")]
    for dims, fusion in specs:
        model = MultimodalClassifier(dims, 3, hidden=(5, 4), fusion=fusion, rng=rng)
        # non-zero biases so nothing sits on a symmetric point
        model.set_params({
            g: {k: v + 0.1 * rng.standard_normal(v.shape)
                if k.startswith("b") or k.endswith("_b") else v
                for k, v in block.items()}
            for g, block in model.params.items()
        })
        label = f"{fusion}/M={len(dims)}"
        yield label, model


def _inputs_off_kinks(model, rng, batch, margin=1e-3):
    # central differences straddling a ReLU kink are meaningless; redraw
    while True:
        xs = [rng.standard_normal((batch, d)) for d in model.input_dims]
        trace = model.forward(xs)
        pre = [a for c in trace.cache["encoders"] for a in c["pre"][:-1]]
        if min(np.abs(a).min() for a in pre) > margin:
            return xs


def run_gradcheck(seed=0, h=STEP, batch=4):
    """Compare every parameter block's gradient for every loss head."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed)
    for label, model in _tiny_models(rng):
        C = model.n_classes
        xs = _inputs_off_kinks(model, rng, batch)
        y = np.eye(C)[rng.integers(0, C, size=batch)]
        soft = [rng.dirichlet(np.ones(C), size=batch) for _ in range(model.n_modalities)]

        heads = [("fused", None)] + [(f"unimodal{u}", u) for u in range(model.n_modalities)]

        def losses(m):
            tr = m.forward(xs)
            out = [np.mean(cross_entropy(y, tr.probs))]
            out += [np.mean(cross_entropy(soft[u], tr.unimodal_probs[u]))
                    for u in range(m.n_modalities)]
            return np.asarray(out)

        trace = model.forward(xs)
        analytic = []
        for head, u in heads:
            if u is None:
                analytic.append(model.backward(trace, (trace.probs - y) / batch, None, JOINT))
            else:
                g_uni = [None] * model.n_modalities
                g_uni[u] = (trace.unimodal_probs[u] - soft[u]) / batch
                analytic.append(model.backward(trace, None, g_uni, JOINT))

        base = model.params
        for g, block in base.items():
            for name, value in block.items():
                def f(v, g=g, name=name):
                    probe = {gg: dict(bb) for gg, bb in base.items()}
                    probe[g][name] = v
                    model.params = probe
                    return losses(model)
                numeric = finite_diff_grad(f, value, h)   # value.shape + (heads,)
                model.params = base
                for k, (head, _) in enumerate(heads):
                    err = relative_error(analytic[k][g][name], numeric[..., k])
                    report.entries.append((label, head, f"{g}.{name}", err))
    return report

