import numpy as np
import pytest

from aerialmtl.errors import ConfigError, InvalidArgument, ShapeError
from aerialmtl.gradcheck import model_gradcheck
from aerialmtl.model import ModelConfig, build_model, image_to_input
from aerialmtl.tensor import grad, l1_loss, softmax_cross_entropy


def small(**kw):
    base = dict(encoder_depth=2, base_channels=4, num_classes=6)
    base.update(kw)
    return build_model(ModelConfig(**base))


@pytest.fixture
def image():
    return np.random.default_rng(5).standard_normal((2, 3, 16, 16)).astype(np.float32)


def test_output_shapes(image):
    height, logits, last_shared = small().forward(image)
    assert height.shape == (2, 1, 16, 16)
    assert logits.shape == (2, 6, 16, 16)
    assert last_shared.shape[0] == 2


def test_head_channels():
    m = small()
    assert m.params["height.head.weight"].shape[0] == 1
    assert m.params["semantics.head.weight"].shape[0] == 6


def test_same_seed_same_params():
    a, b = small(seed=3), small(seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    c = small(seed=4)
    assert any(p.data.tobytes() != q.data.tobytes() for p, q in zip(a.parameters(), c.parameters()) if p.ndim > 1)


def test_eval_is_deterministic(image):
    m = small()
    a, b = m.forward(image, "eval"), m.forward(image, "eval")
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_mc_dropout_varies(image):
    m = small(dropout_p=0.2)
    rng = np.random.default_rng(0)
    a = m.forward(image, "mc_dropout", rng)[0].data
    b = m.forward(image, "mc_dropout", rng)[0].data
    assert not np.array_equal(a, b)


def test_indivisible_input():
    with pytest.raises(ShapeError, match="multiple of 4"):
        small().forward(np.zeros((1, 3, 10, 12), np.float32))


def test_bad_config():
    with pytest.raises(ConfigError):
        ModelConfig(shared_decoder_blocks=7, encoder_depth=2).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_p=1.0).validate()


@pytest.mark.parametrize("shared", [0, 1, 2])
def test_partition_is_disjoint_cover(shared):
    m = small(shared_decoder_blocks=shared)
    ids = [{id(p) for p in m.shared_parameters()},
           {id(p) for p in m.task_parameters("height")},
           {id(p) for p in m.task_parameters("semantics")}]
    assert sum(len(s) for s in ids) == len(m.parameters())
    assert set().union(*ids) == {id(p) for p in m.parameters()}
    assert id(m.last_shared_weight) in ids[0]
    total = sum(m.num_parameters(part) for part in ("shared", "height", "semantics"))
    assert total == m.num_parameters()


def test_unknown_task():
    with pytest.raises(InvalidArgument):
        small().task_parameters("depth")


@pytest.mark.parametrize("depth,shared", [(2, 1), (3, 1), (3, 2), (4, 1)])
def test_skip_parameter_difference(depth, shared):
    cfg = dict(encoder_depth=depth, base_channels=4, shared_decoder_blocks=shared)
    with_skip = build_model(ModelConfig(skip_connections=True, **cfg))
    without = build_model(ModelConfig(skip_connections=False, **cfg))
    c = ModelConfig(**cfg)
    # each decoder conv reads c_level extra skip channels through a 3x3 kernel
    per_stage = [c.channels(depth - 1 - j) ** 2 * 9 for j in range(depth)]
    shared_diff = sum(per_stage[:shared])
    task_diff = sum(per_stage[shared:])
    assert with_skip.num_parameters("shared") - without.num_parameters("shared") == shared_diff
    for task in ("height", "semantics"):
        assert with_skip.num_parameters(task) - without.num_parameters(task) == task_diff


def _losses(m, image, rng):
    height, logits, _ = m.forward(image, "eval")
    target = rng.standard_normal(height.shape)
    labels = rng.integers(0, 6, (image.shape[0],) + image.shape[2:])
    return l1_loss(height, target, np.ones(height.shape)), softmax_cross_entropy(logits, labels)


def test_gradient_isolation(image):
    m = small()
    lh, ls = _losses(m, image, np.random.default_rng(0))
    for g in grad(lh, m.task_parameters("semantics")):
        assert not g.any()
    for g in grad(ls, m.task_parameters("height")):
        assert not g.any()
    assert any(g.any() for g in grad(lh, m.shared_parameters()))
    assert any(g.any() for g in grad(ls, m.shared_parameters()))


def test_state_dict_round_trip():
    a, b = small(seed=1), small(seed=2)
    b.load_state_dict(a.state_dict())
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    bad = a.state_dict()
    bad.popitem()
    with pytest.raises(ConfigError):
        b.load_state_dict(bad)


def test_image_to_input():
    rgb = np.zeros((4, 4, 3), np.float32)
    rgb[..., 0] = 1.0
    x = image_to_input(rgb)
    assert x.shape == (1, 3, 4, 4)
    assert (x[0, 0] == 1.0).all() and (x[0, 1] == -1.0).all()


def test_full_model_finite_differences():
    m = build_model(ModelConfig(encoder_depth=2, base_channels=8))
    image = np.random.default_rng(0).standard_normal((1, 3, 32, 32))
    results = model_gradcheck(m, image, coords=20, rng=np.random.default_rng(1))
    bad = [r for r in results if not r.passed]
    assert not bad, bad
    # parameters come back untouched in float32
    assert all(p.data.dtype == np.float32 for p in m.parameters())
