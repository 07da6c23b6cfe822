import json

import numpy as np
import pytest

from shacnn.cli import builtin_path
from shacnn.label_tree import build_tree, load_tree
from shacnn.metrics import count_params
from shacnn.model import (ArchConfig, BundleMismatchError, ConfigError, WeightBundle, build_bcnn, build_sha,
                          bundle_manifest, extract_weights, forward_levels, load_config, predict, predict_batch)
from shacnn.nn import backward
from shacnn.nn import functional as F
from shacnn.training import total_loss
from toys import (adapter_param_count, pair, sha_trainable_closed_form, three_level_tree, toy_arch, tree_for,
                  trunk_param_count)


@pytest.fixture
def tree2():
    return tree_for([2, 3])


def test_flat_classifier_degenerate():
    tree = build_tree(["a", "b", "c", "d"])
    model = build_bcnn(toy_arch(levels=1), tree)
    assert model.levels == 1
    assert [n for n, _ in model.named_parameters() if not n.startswith("trunk")] == [
        "adapter1.weight", "adapter1.bias", "head1.weight", "head1.bias"]
    assert model.heads[0].n_in == 16


def test_two_level_structure(tree2):
    model = build_bcnn(toy_arch(branch=(8,)), tree2)
    assert len(model.adapters) == 2
    assert [h.n_out for h in model.heads] == tree2.level_class_counts() == [2, 5]
    assert [a.n_in for a in model.adapters] == [3 * 4 * 4, 4 * 2 * 2]
    logits = model(np.zeros((3, 1, 8, 8)))
    assert [z.shape for z in logits] == [(3, 2), (3, 5)]


def test_cifar100_heads():
    tree = load_tree(builtin_path("trees", "cifar100"))
    cfg = load_config(builtin_path("configs", "cifar100"))
    model = build_bcnn(cfg, tree)
    assert [h.n_out for h in model.heads] == [8, 20, 100]


@pytest.mark.parametrize("change,needle", [
    (dict(taps=[2, 1]), "increasing"),
    (dict(taps=[1]), "never be evaluated"),
    (dict(taps=[1, 3]), "beyond trunk"),
    (dict(adapter_units=0), "adapter_units"),
    (dict(input_shape=(1, 2, 2)), "larger than"),
    (dict(activation="tanh"), "activation"),
    (dict(branch_fc=[[4]] * 3), "branch"),
])
def test_config_validation(change, needle):
    cfg = toy_arch()
    for k, v in change.items():
        setattr(cfg, k, v)
    with pytest.raises(ConfigError, match=needle):
        cfg.validate()


def test_tree_level_mismatch(tree2):
    with pytest.raises(ConfigError, match="levels"):
        build_bcnn(toy_arch(levels=3), tree2)


def test_config_dict_round_trip():
    cfg = toy_arch(branch=(4, 3), shared=(5,))
    again = ArchConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ConfigError):
        ArchConfig.from_dict({"trunk": []})


def test_same_seed_same_init(tree2):
    a, b = build_bcnn(toy_arch(), tree2, seed=3), build_bcnn(toy_arch(), tree2, seed=3)
    c = build_bcnn(toy_arch(), tree2, seed=4)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert np.array_equal(p.data, q.data)
        if n.endswith("weight"):
            assert not np.array_equal(p.data, r.data)


# --- weight bundle ---------------------------------------------------------------

def test_bundle_equals_init(tree2):
    model = build_bcnn(toy_arch(branch=(8,)), tree2)
    bundle = extract_weights(model)
    params = dict(model.named_parameters())
    for name, arr in bundle.tensors().items():
        assert arr.dtype == np.float32
        assert np.array_equal(arr.astype(np.float64), params[name].data)
    assert bundle.names() == set(bundle_manifest(model.config))
    assert {n for n in bundle.names()} == {n for n in params if n.startswith(("trunk", "adapter"))}


def test_bundle_reflects_training_step(tree2):
    model = build_bcnn(toy_arch(), tree2)
    before = extract_weights(model).tensors()
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 8))
    loss, _ = total_loss(model(x), [np.array([0, 1, 0, 1]), np.array([0, 2, 4, 3])], [0.5, 0.5])
    backward(loss)
    for p in model.parameters():
        p.data -= 0.5 * p.grad
    after = extract_weights(model).tensors()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    for k in after:
        assert np.array_equal(after[k], dict(model.named_parameters())[k].data.astype(np.float32))


def test_bundle_bytes_round_trip(tree2, tmp_path):
    bundle = extract_weights(build_bcnn(toy_arch(), tree2))
    bundle.save(tmp_path / "b.shaw")
    again = WeightBundle.load(tmp_path / "b.shaw")
    assert again.to_bytes() == bundle.to_bytes()


def test_bcnn_only_for_extraction(tree2):
    _, sha = pair(toy_arch(), tree2)
    with pytest.raises(ValueError):
        extract_weights(sha)


# --- sha construction ------------------------------------------------------------

@pytest.mark.parametrize("shared", [(), (7,), (6, 4)])
def test_sha_trainable_closed_form(tree2, shared):
    cfg = toy_arch(shared=shared)
    _, sha = pair(cfg, tree2)
    total, trainable = count_params(sha)
    assert trainable == sha_trainable_closed_form(16, list(shared), [2, 5])
    assert total == trainable + trunk_param_count(cfg) + adapter_param_count(cfg)


def test_sha_frozen_set_is_bundle(tree2):
    bcnn, sha = pair(toy_arch(shared=(8,)), tree2)
    assert sha.frozen_names() == extract_weights(bcnn).names()
    assert all(not p.frozen for n, p in sha.named_parameters() if n.startswith(("shared", "head")))


def test_sha_with_batchnorm_freezes_buffers(tree2):
    cfg = toy_arch(shared=(8,))
    for block in cfg.trunk:
        block.batchnorm = True
    bcnn, sha = pair(cfg, tree2)
    bundle = extract_weights(bcnn)
    assert any("running_mean" in n for n in bundle.names())
    assert sha.frozen_names() == bundle.names()


def test_sha_adapters_trainable_when_unfrozen(tree2):
    cfg = toy_arch(shared=(8,), freeze_adapters=False)
    _, sha = pair(cfg, tree2)
    assert not any(n.startswith("adapter") for n in sha.frozen_names())
    assert all(n.startswith("trunk") for n in sha.frozen_names())


def test_sha_rejects_foreign_bundle(tree2):
    bundle = extract_weights(build_bcnn(toy_arch(channels=(3, 6)), tree2))
    with pytest.raises(BundleMismatchError, match="shape"):
        build_sha(toy_arch(), tree2, bundle)
    tensors = bundle.tensors()
    tensors.pop("adapter2.bias")
    with pytest.raises(BundleMismatchError, match="adapter2.bias"):
        WeightBundle.from_tensors(tensors)
    tensors.pop("adapter2.weight")
    with pytest.raises(BundleMismatchError):
        build_sha(toy_arch(channels=(3, 6)), tree2, WeightBundle.from_tensors(tensors))


def test_tap_activations_equal_between_variants(tree2):
    bcnn, sha = pair(toy_arch(branch=(5,), shared=(9,)), tree2, seed=11)
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
    taps_b, taps_s = bcnn.tap_outputs(x), sha.tap_outputs(x)
    for a, b in zip(taps_b, taps_s):
        assert np.array_equal(a.data, b.data)
    for ad_b, ad_s, tap in zip(bcnn.adapters, sha.adapters, taps_b):
        assert np.array_equal(ad_b(F.flatten(tap)).data, ad_s(F.flatten(tap)).data)


def test_shared_stack_receives_gradient_from_every_level():
    tree = three_level_tree()
    _, sha = pair(toy_arch(levels=3, shared=(6,)), tree)
    x = np.random.default_rng(2).standard_normal((4, 1, 8, 8))
    labels = tree.level_label_matrix([0, 3, 7, 11]).T
    grads = []
    for lvl in (0, 2):
        for p in sha.parameters():
            p.grad = None
        weights = [0.0, 0.0, 0.0]
        weights[lvl] = 1.0
        loss, _ = total_loss(sha(x), list(labels), weights)
        backward(loss)
        w = sha.shared_stack[0].weight
        assert w.grad is not None and np.any(w.grad != 0)
        grads.append(w.grad.copy())
        assert all(p.grad is None for p in sha.parameters() if p.frozen)
    assert not np.array_equal(grads[0], grads[1])


def test_heads_separate(tree2):
    _, sha = pair(toy_arch(shared=(8,)), tree2)
    x = np.random.default_rng(3).standard_normal((2, 1, 8, 8))
    before = [z.data.copy() for z in sha(x)]
    sha.heads[1].bias.data += 5.0
    after = [z.data for z in sha(x)]
    assert np.array_equal(before[0], after[0])
    np.testing.assert_allclose(after[1], before[1] + 5.0)


# --- inference -------------------------------------------------------------------

def test_forward_levels_normalised_and_deterministic(tree2):
    _, sha = pair(toy_arch(shared=(8,)), tree2)
    x = np.random.default_rng(4).standard_normal((1, 1, 8, 8))
    first = forward_levels(sha, x)
    second = forward_levels(sha, x)
    assert len(first) == 2
    for p, q in zip(first, second):
        assert p.tobytes() == q.tobytes()
        assert abs(p.sum() - 1.0) < 1e-12
    p32 = forward_levels(sha, x, dtype=np.float32)
    assert p32[0].dtype == np.float32
    np.testing.assert_allclose(p32[1], first[1], atol=1e-5)


def test_predict_tie_rule(tree2):
    model = build_bcnn(toy_arch(), tree2)
    for head in model.heads:
        head.weight.data[:] = 0.0
        head.bias.data[:] = 0.0
    labels, conf = predict(model, np.ones((1, 8, 8)))
    assert labels == [0, 0]
    assert conf == pytest.approx([0.5, 0.2])


def test_predict_forced_class(tree2):
    model = build_bcnn(toy_arch(), tree2)
    for head, k in zip(model.heads, (1, 3)):
        head.weight.data[:] = 0.0
        head.bias.data[:] = 0.0
        head.bias.data[k] = 10.0
    assert predict(model, np.zeros((1, 8, 8)))[0] == [1, 3]
    assert predict_batch(model, np.zeros((5, 1, 8, 8))).tolist() == [[1, 3]] * 5


def test_input_shape_checked(tree2):
    model = build_bcnn(toy_arch(), tree2)
    with pytest.raises(F.ShapeError):
        model(np.zeros((1, 1, 9, 8)))
    with pytest.raises(F.ShapeError):
        predict(model, np.zeros((2, 1, 8, 8)))
