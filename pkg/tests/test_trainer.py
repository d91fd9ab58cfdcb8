import math

import numpy as np
import pytest

import oracle
from bmlr.data import SyntheticSpec, generate
from bmlr.model import DECISION, JOINT, MultimodalClassifier, encoder_group
from bmlr.numeric import cross_entropy, softmax
from bmlr.reshaper import ReshapeConfig
from bmlr.trainer import (
    METHODS,
    GroupAdam,
    TrainConfig,
    TrainingAborted,
    build_targets,
    evaluate,
    joint_step,
    multimodal_loss,
    tpo_step,
    train,
    unimodal_loss,
    variant_dispatch,
)


@pytest.fixture(scope="module")
def small_data():
    return generate(SyntheticSpec(n_classes=4, samples_per_class=30, dims=(5, 5),
                                  separations=(2.5, 1.0), seed=3))


def quick(method, **kw):
    base = dict(method=method, epochs=3, batch_size=16, lr=5e-3, seed=11, hidden=(8, 4))
    base.update(kw)
    return TrainConfig(**base)


def same_record(a, b):
    assert len(a.rows) == len(b.rows)
    for ra, rb in zip(a.rows, b.rows):
        assert ra == rb
    for g in a.model.params:
        for k in a.model.params[g]:
            np.testing.assert_array_equal(a.model.params[g][k], b.model.params[g][k])


class Recorder:
    """Optimizer stand-in that keeps the gradients instead of applying them."""

    def apply(self, model, grads, groups=None):
        self.grads = grads


# -- losses ------------------------------------------------------------------

def test_unimodal_loss_zero_for_perfect_prediction():
    y = np.eye(3)
    assert unimodal_loss(y, y) == 0.0


def test_unimodal_loss_soft_target_against_uniform():
    loss = unimodal_loss(np.array([[0.75, 0.15, 0.10]]), np.full((1, 3), 1 / 3))
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert loss == pytest.approx(1.0986, abs=1e-4)


def test_loss_is_a_mean():
    t = np.array([[0.75, 0.15, 0.10]])
    p = np.array([[0.2, 0.5, 0.3]])
    assert unimodal_loss(np.repeat(t, 2, 0), np.repeat(p, 2, 0)) == unimodal_loss(t, p)


def test_multimodal_loss_uniform_six():
    y = np.eye(6)[[0, 3, 5]]
    assert multimodal_loss(y, np.full((3, 6), 1 / 6)) == pytest.approx(math.log(6), abs=1e-12)
    assert multimodal_loss(y, np.full((3, 6), 1 / 6)) == pytest.approx(1.7918, abs=1e-4)


def test_multimodal_loss_perfect():
    y = np.eye(4)
    assert multimodal_loss(y, y) == 0.0


def test_batch_loss_equals_mean_of_sample_losses():
    rng = np.random.default_rng(0)
    t = rng.dirichlet(np.ones(5), size=17)
    p = softmax(rng.standard_normal((17, 5)) * 3)
    per = [float(cross_entropy(t[i], p[i])) for i in range(17)]
    assert abs(unimodal_loss(t, p) - np.mean(per)) < 1e-10
    assert abs(unimodal_loss(t, p) - oracle.mean_ce(t.tolist(), p.tolist())) < 1e-10


# -- targeted step -----------------------------------------------------------

def hand_model():
    m = MultimodalClassifier((1, 1), 2, hidden=(1,), fusion="concat")
    m.set_params({
        encoder_group(0): {"W0": np.array([[1.0]]), "b0": np.array([0.0])},
        encoder_group(1): {"W0": np.array([[2.0]]), "b0": np.array([0.0])},
        DECISION: {"W0": np.array([[1.0], [-1.0]]), "W1": np.array([[0.5], [0.5]]),
                   "b": np.zeros(2)},
    })
    return m


def test_tpo_step_hand_case():
    lr = 0.01
    m = hand_model()
    before = {g: {k: v.copy() for k, v in b.items()} for g, b in m.params.items()}
    xs = [np.array([[1.0]]), np.array([[1.0]])]
    y = np.array([[1.0, 0.0]])
    tpo_step(m, GroupAdam(m, lr), xs, y, [y, y])

    # fused logits [2, 0] and modality-0 logits [1, -1] share q = 1 - sigmoid(2)
    q = 1.0 / (1.0 + math.exp(2.0))
    # modality-1 logits are [1, 1]: its feature gradient 0.5 * (-0.5) + 0.5 * 0.5 vanishes
    grads = {
        encoder_group(0): {"W0": [[-2 * q]], "b0": [-2 * q]},
        encoder_group(1): {"W0": [[0.0]], "b0": [0.0]},
        DECISION: {"W0": [[-q], [q]], "W1": [[-2 * q], [2 * q]], "b": [-q, q]},
    }

    def first_adam_delta(g):
        return -lr * g / (abs(g) + 1e-8)

    for g, block in grads.items():
        for k, gv in block.items():
            expected = np.vectorize(first_adam_delta)(np.array(gv, dtype=float))
            np.testing.assert_allclose(m.params[g][k] - before[g][k], expected,
                                       atol=1e-15, err_msg=f"{g}.{k}")
    np.testing.assert_array_equal(m.params[encoder_group(1)]["W0"], [[2.0]])


def test_tpo_step_losses_reported():
    m = hand_model()
    xs = [np.array([[1.0]]), np.array([[1.0]])]
    y = np.array([[1.0, 0.0]])
    res = tpo_step(m, GroupAdam(m, 0.01), xs, y, [y, y])
    assert res.loss_fused == pytest.approx(math.log(1 + math.exp(-2)))
    assert res.loss_modality[0] == pytest.approx(math.log(1 + math.exp(-2)))
    assert res.loss_modality[1] == pytest.approx(math.log(2))


def _random_setup(fusion="concat", seed=0):
    rng = np.random.default_rng(seed)
    m = MultimodalClassifier((4, 3), 3, hidden=(6, 5), fusion=fusion, rng=rng)
    xs = [rng.standard_normal((8, 4)), rng.standard_normal((8, 3))]
    y = np.eye(3)[rng.integers(0, 3, size=8)]
    return m, xs, y


def _snapshot(m):
    return {g: {k: v.copy() for k, v in b.items()} for g, b in m.params.items()}


@pytest.mark.parametrize("fusion", ["concat", "sum", "film", "gated"])
def test_tpo_unimodal_only_leaves_decision_untouched(fusion):
    m, xs, y = _random_setup(fusion)
    before = _snapshot(m)
    targets, _, _ = build_targets("bmlr", m, xs, y, quick("bmlr"))
    tpo_step(m, GroupAdam(m, 0.1), xs, y, targets, fused_weight=0.0)
    for k, v in m.params[DECISION].items():
        np.testing.assert_array_equal(v, before[DECISION][k])
    assert any(not np.array_equal(v, before[encoder_group(0)][k])
               for k, v in m.params[encoder_group(0)].items())


@pytest.mark.parametrize("fusion", ["concat", "sum", "film", "gated"])
def test_tpo_fused_only_leaves_encoders_untouched(fusion):
    m, xs, y = _random_setup(fusion)
    before = _snapshot(m)
    tpo_step(m, GroupAdam(m, 0.1), xs, y, [y, y], unimodal_weight=0.0)
    for u in range(2):
        for k, v in m.params[encoder_group(u)].items():
            np.testing.assert_array_equal(v, before[encoder_group(u)][k])


def test_tpo_step_with_closed_gate_equals_one_hot_step():
    m1, xs, y = _random_setup()
    m2, _, _ = _random_setup()
    targets, counts, _ = build_targets("bmlr", m1, xs, y, quick("bmlr", reshape=ReshapeConfig(beta=1.0)))
    assert counts.tolist() == [0, 0]
    tpo_step(m1, GroupAdam(m1, 0.01), xs, y, targets)
    tpo_step(m2, GroupAdam(m2, 0.01), xs, y, [y, y])
    for g in m1.params:
        for k in m1.params[g]:
            np.testing.assert_array_equal(m1.params[g][k], m2.params[g][k])


def test_nonfinite_loss_aborts():
    m, xs, y = _random_setup()
    y = y.copy()
    y[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        tpo_step(m, GroupAdam(m, 0.01), xs, y, [y, y])


# -- joint step --------------------------------------------------------------

def _head_grads(m, xs, y, weights, targets):
    tr = m.forward(xs)
    n = y.shape[0]
    fused = m.backward(tr, (tr.probs - y) / n, None, JOINT)
    heads = []
    for u in range(m.n_modalities):
        g = [None] * m.n_modalities
        g[u] = weights[u] * (tr.unimodal_probs[u] - targets[u]) / n
        heads.append(m.backward(tr, None, g, JOINT))
    return fused, heads


def test_baseline_gradient_is_pure_fused_ce():
    m, xs, y = _random_setup()
    rec = Recorder()
    joint_step(m, rec, xs, y, None, (1.0, 1.0))
    fused, _ = _head_grads(m, xs, y, (0, 0), [y, y])
    for g in fused:
        for k in fused[g]:
            np.testing.assert_array_equal(rec.grads[g][k], fused[g][k])


def test_uniform_baseline_gradient_is_sum_of_heads():
    m, xs, y = _random_setup(fusion="sum")
    rec = Recorder()
    joint_step(m, rec, xs, y, [y, y], (1.0, 1.0))
    fused, heads = _head_grads(m, xs, y, (1.0, 1.0), [y, y])
    for g in fused:
        for k in fused[g]:
            total = fused[g][k] + heads[0][g][k] + heads[1][g][k]
            np.testing.assert_allclose(rec.grads[g][k], total, atol=1e-14)


def test_uniform_baseline_zero_weights_is_baseline(small_data):
    a = train(quick("uniform-baseline", unimodal_weights=(0.0, 0.0)), small_data)
    b = train(quick("baseline"), small_data)
    # losses on the unimodal heads are still reported, the trajectory is identical
    for ra, rb in zip(a.rows, b.rows):
        assert ra.acc_fused == rb.acc_fused and ra.acc_modality == rb.acc_modality
        assert ra.loss_fused == rb.loss_fused
    for g in a.model.params:
        for k in a.model.params[g]:
            np.testing.assert_array_equal(a.model.params[g][k], b.model.params[g][k])


def test_weights_length_checked():
    with pytest.raises(ValueError):
        quick("uniform-baseline", unimodal_weights=(1.0,)).weights(2)


# -- dispatch and comparators ------------------------------------------------

def test_dispatch_covers_every_method():
    for method in METHODS:
        assert variant_dispatch(quick(method)).method == method


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        TrainConfig(method="gradient-blending")


def test_uni_distill_symmetric_heads_share_target():
    rng = np.random.default_rng(4)
    m = MultimodalClassifier((3, 3), 4, hidden=(5, 4), rng=rng)
    p = m.params
    p[encoder_group(1)] = {k: v.copy() for k, v in p[encoder_group(0)].items()}
    p[DECISION]["W1"] = p[DECISION]["W0"].copy()
    m.set_params(p)
    x = rng.standard_normal((6, 3))
    y = np.eye(4)[rng.integers(0, 4, size=6)]
    targets, counts, _ = build_targets("uni-distill", m, [x, x.copy()], y, quick("uni-distill"))
    tr = m.forward([x, x])
    np.testing.assert_array_equal(targets[0], targets[1])
    np.testing.assert_allclose(targets[0], tr.unimodal_probs[0], atol=1e-15)
    assert counts.tolist() == [0, 0]


def test_uniform_reshaping_targets():
    m, xs, y = _random_setup()
    targets, _, _ = build_targets("uniform-reshaping", m, xs, y, quick("uniform-reshaping",
                                                                     smoothing=0.2))
    np.testing.assert_allclose(targets[0], 0.8 * y + 0.1 * (1 - y))


# -- degeneracies over whole runs --------------------------------------------

def test_bmlr_with_beta_one_is_only_tpo(small_data):
    a = train(quick("bmlr", reshape=ReshapeConfig(1.3, 1.0)), small_data)
    b = train(quick("only-tpo"), small_data)
    same_record(a, b)


def test_uniform_reshaping_without_mass_is_uniform_baseline(small_data):
    a = train(quick("uniform-reshaping", smoothing=0.0), small_data)
    b = train(quick("uniform-baseline"), small_data)
    same_record(a, b)


def test_baseline_ignores_reshape_config(small_data):
    a = train(quick("baseline", reshape=ReshapeConfig(0.3, 0.7)), small_data)
    b = train(quick("baseline", reshape=ReshapeConfig(4.0, 0.0)), small_data)
    same_record(a, b)
    assert all(r.reshape_counts == [0, 0] for r in a.rows)


def test_reshape_counts_bounded_by_gate(small_data):
    seen = []

    def hook(epoch, idx, rb):
        seen.append((epoch, int(rb.active.sum()), len(idx)))

    rec = train(quick("bmlr"), small_data, on_reshape=hook)
    n_train = len(small_data.train())
    for row in rec.rows:
        active = sum(a for e, a, _ in seen if e == row.epoch)
        assert sum(row.reshape_counts) == active <= n_train


# -- train / evaluate --------------------------------------------------------

def test_same_seed_same_record(small_data):
    same_record(train(quick("bmlr"), small_data), train(quick("bmlr"), small_data))


def test_different_seed_differs(small_data):
    a = train(quick("bmlr"), small_data)
    b = train(quick("bmlr", seed=12), small_data)
    assert not np.array_equal(a.model.params[DECISION]["b"], b.model.params[DECISION]["b"])


def test_epochs_zero_rejected():
    with pytest.raises(ValueError):
        quick("bmlr", epochs=0)


def test_one_epoch_one_row(small_data):
    rec = train(quick("bmlr", epochs=1), small_data)
    assert [r.epoch for r in rec.rows] == [1]


def test_abort_keeps_partial_record(small_data):
    bad = generate(SyntheticSpec(n_classes=4, samples_per_class=30, dims=(5, 5), seed=3))
    bad.xs[0][np.flatnonzero(~bad.is_test)[0], 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train(quick("bmlr"), bad)
    assert info.value.record is not None
    assert "epoch 1" in info.value.record.aborted


def test_evaluate_perfect_model():
    m = MultimodalClassifier((2, 2), 2, hidden=(2,), rng=np.random.default_rng(0))
    m.set_params({
        encoder_group(0): {"W0": np.eye(2) * 50, "b0": np.zeros(2)},
        encoder_group(1): {"W0": np.eye(2) * 50, "b0": np.zeros(2)},
        DECISION: {"W0": np.eye(2), "W1": np.eye(2), "b": np.zeros(2)},
    })
    ds = generate(SyntheticSpec(n_classes=2, samples_per_class=10, dims=(2, 2),
                                separations=(0.0, 0.0), exclusive_fraction=0.0, seed=0))
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    split = ds.test().subset(np.arange(2))
    split.xs = [x, x.copy()]
    split.labels = np.array([0, 1])
    ev = evaluate(m, split)
    assert ev.acc_fused == 1.0 and ev.acc_modality == [1.0, 1.0] and ev.ratio == 1.0


def test_evaluate_empty_split_rejected(small_data):
    m = MultimodalClassifier((5, 5), 4, hidden=(8, 4))
    with pytest.raises(ValueError):
        evaluate(m, small_data.subset(np.zeros(len(small_data), bool)))
