import numpy as np
import pytest

from userkws import tensor as T
from userkws.cost import count_params
from userkws.model import (FUSIONS, ConfigError, ModelConfig, UnknownSpeakerError, apply_policy, build_model, fuse,
                           load_checkpoint, read_checkpoint, save_checkpoint)
from userkws.optim import Adam
from userkws.tensor import Tensor

from oracles import hand_count


def _x(n=3, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 49, 10, 1)).astype(np.float32)


@pytest.mark.parametrize("size", ["S", "M", "L"])
@pytest.mark.parametrize("fusion", FUSIONS)
def test_param_count_matches_hand_count(size, fusion):
    cfg = ModelConfig(size, 10, fusion)
    m = build_model(cfg, speakers=["a", "b", "c"])
    assert m.num_parameters() == hand_count(size, fusion, 10, rows=3)
    assert count_params(cfg, embedding_rows=3) == hand_count(size, fusion, 10, rows=3)


def test_param_count_gsc35_and_custom_cc_width():
    assert count_params(ModelConfig("M", 35, "concat-cc", 40)) == hand_count("M", "concat-cc", 35, cc_width=40)


def test_embedding_rows_delta():
    none = build_model(ModelConfig("S", 10, "none")).num_parameters()
    mul = build_model(ModelConfig("S", 10, "mul"), speakers=list("abcde")).num_parameters()
    assert mul - none == 5 * 64


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("S", 10, "add", 32).validate()
    with pytest.raises(ConfigError):
        ModelConfig("S", 10, "concat-cc", 64).validate()
    with pytest.raises(ConfigError):
        ModelConfig("XL", 10, "mul").validate()
    with pytest.raises(ConfigError):
        ModelConfig("S", 10, "sum").validate()
    assert ModelConfig("S", 10, "concat-cc").width == 16


def test_classifier_widths():
    assert ModelConfig("S", 10, "concat-bc").classifier_width == 128
    assert ModelConfig("S", 10, "concat-cc").classifier_width == 64
    assert ModelConfig("S", 10, "concat-cc").pooled_width == 48


def test_fuse_identities(rng):
    a = Tensor(rng.standard_normal((4, 8)))
    np.testing.assert_array_equal(fuse(a, Tensor(np.ones((4, 8))), "mul").data, a.data)
    np.testing.assert_array_equal(fuse(a, Tensor(np.zeros((4, 8))), "add").data, a.data)
    assert fuse(a, Tensor(np.zeros((4, 8))), "concat-bc").shape == (4, 16)
    with pytest.raises(T.ShapeError):
        fuse(a, Tensor(np.zeros((4, 7))), "add")


@pytest.mark.parametrize("fusion", FUSIONS)
def test_forward_shapes(fusion):
    m = build_model(ModelConfig("S", 10, fusion), speakers=["a"])
    assert m.forward(_x(5), ["a"] * 5).shape == (5, 10)


def test_forward_equals_layer_composition():
    m = build_model(ModelConfig("S", 10, "add"), seed=3, speakers=["a"])
    x = _x(1)
    h = Tensor(x)
    for spec in m.plan:
        p = lambda k: m.params[f"{spec.name}.{k}"]
        op = T.conv2d if spec.kind == "conv" else T.depthwise_conv2d
        h = op(h, p("weight"), p("bias"), spec.stride, spec.padding)
        h = T.batchnorm(h, p("bn.gamma"), p("bn.beta"), False, m.buffers[f"{spec.name}.bn.running_mean"],
                        m.buffers[f"{spec.name}.bn.running_var"])
        h = T.relu(h)
    h = T.add(T.avgpool_global(h), Tensor(m.embedding.weight.data[[0]]))
    want = T.linear(h, m.params["classifier.weight"], m.params["classifier.bias"]).data
    np.testing.assert_array_equal(m.forward(x, ["a"]).data, want)


@pytest.mark.parametrize("fusion", ["mul", "add"])
def test_new_speaker_identity_fusion_is_exact(fusion):
    m = build_model(ModelConfig("S", 10, fusion), seed=1, speakers=["p1", "p2"])
    m.add_speaker("new")
    x = _x(4)
    pooled = m.backbone(x)
    plain = T.linear(pooled, m.params["classifier.weight"], m.params["classifier.bias"]).data
    assert m.forward(x, ["new"] * 4).data.tobytes() == plain.tobytes()


def test_add_speaker_rows():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a"])
    assert m.add_speaker("x") == 1 and m.add_speaker("y") == 2
    assert np.all(m.embedding.weight.data[1] == 1)
    with pytest.raises(ValueError):
        m.add_speaker("x")
    add = build_model(ModelConfig("S", 10, "add"))
    add.add_speaker("z")
    assert not add.embedding.weight.data.any()
    cat = build_model(ModelConfig("S", 10, "concat-bc"), speakers=["a", "b"])
    mean = cat.embedding.weight.data.mean(axis=0)
    cat.add_speaker("c")
    np.testing.assert_allclose(cat.embedding.weight.data[2], mean)


def test_existing_rows_untouched_by_add():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a", "b"])
    before = m.embedding.weight.data.copy()
    m.add_speaker("c")
    np.testing.assert_array_equal(m.embedding.weight.data[:2], before)


def test_unknown_speaker():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a"])
    with pytest.raises(UnknownSpeakerError):
        m.forward(_x(1), ["ghost"])


def test_forward_infer_is_pure():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a"])
    x = _x(2)
    a = m.forward(x, ["a", "a"]).data
    m.forward(_x(2, seed=5), ["a", "a"])
    assert m.forward(x, ["a", "a"]).data.tobytes() == a.tobytes()


def test_batch_rows_independent():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a", "b"])
    x = _x(3)
    full = m.forward(x, ["a", "b", "a"]).data
    np.testing.assert_allclose(m.forward(x[1:2], ["b"]).data[0], full[1], atol=1e-6)


@pytest.mark.parametrize("policy,backbone,classifier,emb", [
    ("embedding-only", False, False, True),
    ("classifier-only", False, True, False),
    ("backbone-only", True, False, False),
    ("full", True, True, True),
])
def test_apply_policy_flags(policy, backbone, classifier, emb):
    m = apply_policy(build_model(ModelConfig("S", 10, "mul"), speakers=["a"]), policy)
    assert all(p.trainable == backbone for p in m.backbone_parameters())
    assert all(p.trainable == classifier for p in m.classifier_parameters())
    assert m.embedding.weight.trainable == emb
    assert m.backbone_frozen == (not backbone)


def _train_steps(m, speaker, steps=3, batch=4):
    """A few Adam steps on random data; returns where the embedding table
    ever received a nonzero gradient."""
    rng = np.random.default_rng(0)
    opt = Adam([p for p in m.parameters() if p.trainable], lr=1e-2)
    touched = np.zeros(m.embedding.weight.shape, bool)
    for _ in range(steps):
        opt.zero_grad()
        x = rng.standard_normal((batch, 49, 10, 1)).astype(np.float32)
        y = rng.integers(0, 10, batch)
        T.softmax_cross_entropy(m.forward(x, [speaker] * batch, training=True), y).backward()
        if m.embedding.weight.grad is not None:
            touched |= m.embedding.weight.grad != 0
        opt.step()
    return touched


def test_embedding_only_changes_exactly_one_row(tmp_path):
    m = build_model(ModelConfig("S", 10, "mul"), seed=0, speakers=["a", "b"])
    m.add_speaker("s")
    save_checkpoint(m, tmp_path / "before.bin")
    apply_policy(m, "embedding-only", "s")
    touched = _train_steps(m, "s")
    save_checkpoint(m, tmp_path / "after.bin")
    _, before = read_checkpoint(tmp_path / "before.bin")
    _, after = read_checkpoint(tmp_path / "after.bin")
    for k in before:
        if k != "embedding":
            assert before[k].tobytes() == after[k].tobytes(), k
    diff = before["embedding"] != after["embedding"]
    assert not diff[:2].any()
    # a pooled channel that is zero on every input has a zero gradient and
    # cannot move; every other float of the row does
    np.testing.assert_array_equal(diff, touched)
    assert diff.sum() >= 60


def test_full_policy_updates_running_stats():
    m = build_model(ModelConfig("S", 10, "mul"), speakers=["a"])
    apply_policy(m, "full")
    rm = m.buffers["conv0.bn.running_mean"].copy()
    _train_steps(m, "a", 1)
    assert not np.array_equal(rm, m.buffers["conv0.bn.running_mean"])


def test_checkpoint_roundtrip_and_sizes(tmp_path):
    from userkws.audio import FeatureStats
    stats = FeatureStats(np.arange(10, dtype=np.float32), np.ones(10, np.float32))
    for fusion in FUSIONS:
        cfg = ModelConfig("S", 10, fusion)
        m = build_model(cfg, seed=2, speakers=["a", "b"], stats=stats, vocabulary=[f"w{i}" for i in range(10)])
        save_checkpoint(m, tmp_path / f"{fusion}.bin")
        header, arrays = read_checkpoint(tmp_path / f"{fusion}.bin")
        params = sum(a.size for b, a in zip(header["blobs"], arrays.values()) if b["kind"] == "param")
        assert params == count_params(cfg, embedding_rows=2)
        back = load_checkpoint(tmp_path / f"{fusion}.bin")
        assert back.vocabulary == m.vocabulary and back.embedding.ids == ["a", "b"]
        np.testing.assert_array_equal(back.stats.mean, stats.mean)
        x = _x(2)
        spk = ["a", "b"]
        assert back.forward(x, spk).data.tobytes() == m.forward(x, spk).data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad.bin")
    m = build_model(ModelConfig("S", 10, "mul"))
    save_checkpoint(m, tmp_path / "ok.bin")
    (tmp_path / "cut.bin").write_bytes((tmp_path / "ok.bin").read_bytes() + b"\0\0\0\0")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "cut.bin")


def test_build_is_seeded():
    a = build_model(ModelConfig("S", 10, "mul"), seed=4, speakers=["x"]).state_dict()
    b = build_model(ModelConfig("S", 10, "mul"), seed=4, speakers=["x"]).state_dict()
    c = build_model(ModelConfig("S", 10, "mul"), seed=5, speakers=["x"]).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv0.weight"], c["conv0.weight"])
