import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescycle import autodiff as ad
from rescycle.autodiff import Tensor
from rescycle.model import (
    DiscriminatorConfig,
    GeneratorConfig,
    ImagePool,
    Pools,
    TrainingDiverged,
    build_discriminator,
    build_generator,
    build_model,
    cycle_loss,
    gan_loss,
    make_optimizers,
    training_step,
)

SMALL_G = GeneratorConfig(base_filters=8, n_res_blocks=1)
SMALL_D = DiscriminatorConfig(base_filters=8)


def closed_form_generator_params(nf, n_blocks, cin=1, cout=1):
    conv = lambda i, o, k: i * o * k * k + o
    norm = lambda c: 2 * c
    return (conv(cin, nf, 7) + norm(nf)
            + conv(nf, 2 * nf, 3) + norm(2 * nf)
            + conv(2 * nf, 4 * nf, 3) + norm(4 * nf)
            + n_blocks * 2 * (conv(4 * nf, 4 * nf, 3) + norm(4 * nf))
            + conv(4 * nf, 2 * nf, 3) + norm(2 * nf)
            + conv(2 * nf, nf, 3) + norm(nf)
            + conv(nf, cout, 7))


def propagate(size, n_layers=3):
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def batch(rng, shape):
    return Tensor(rng.uniform(-1, 1, shape).astype(np.float32))


# generator ---------------------------------------------------------------------


def test_generator_small_shape_and_range():
    g = build_generator(GeneratorConfig(base_filters=32, n_res_blocks=3))
    with ad.no_grad():
        out = g(batch(np.random.default_rng(0), (1, 1, 64, 64)))
    assert out.shape == (1, 1, 64, 64)
    assert np.all(np.abs(out.data) < 1)


@pytest.mark.slow
def test_generator_default_config_on_crop():
    g = build_generator(GeneratorConfig())
    with ad.no_grad():
        out = g(batch(np.random.default_rng(0), (2, 1, 100, 400)))
    assert out.shape == (2, 1, 100, 400)


@pytest.mark.parametrize("nf,n_blocks,frozen", [(64, 9, 11376129), (32, 3, 1075457)])
def test_generator_parameter_count(nf, n_blocks, frozen):
    g = build_generator(GeneratorConfig(base_filters=nf, n_res_blocks=n_blocks))
    assert closed_form_generator_params(nf, n_blocks) == frozen
    assert g.num_parameters() == frozen


def test_generator_rejects_indivisible_size():
    g = build_generator(SMALL_G)
    with pytest.raises(ValueError, match="divisible by 4"):
        g(Tensor(np.zeros((1, 1, 30, 32))))


@pytest.mark.parametrize("kwargs", [{"n_res_blocks": 0}, {"base_filters": 2}, {"norm_kind": "layer"}])
def test_generator_config_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), norm=st.sampled_from(["instance", "batch", "instance_then_batch"]))
def test_generator_preserves_shape(h, w, norm):
    g = build_generator(GeneratorConfig(base_filters=4, n_res_blocks=1, norm_kind=norm))
    x = batch(np.random.default_rng(h * 7 + w), (2, 1, 4 * h, 4 * w))
    with ad.no_grad():
        out = g(x)
    assert out.shape == x.shape
    assert np.all(np.abs(out.data) <= 1)


# discriminator -----------------------------------------------------------------


def test_discriminator_patch_map_256():
    d = build_discriminator(DiscriminatorConfig(base_filters=4))
    with ad.no_grad():
        out = d(Tensor(np.zeros((1, 1, 256, 256), np.float32)))
    assert out.shape == (1, 1, 30, 30)


def test_discriminator_patch_map_crop():
    d = build_discriminator(DiscriminatorConfig(base_filters=4))
    with ad.no_grad():
        out = d(Tensor(np.zeros((1, 1, 100, 400), np.float32)))
    assert out.shape == (1, 1, propagate(100), propagate(400)) == (1, 1, 10, 48)


@pytest.mark.parametrize("size", [16, 23, 24, 64, 70, 97])
def test_discriminator_propagation_formula(size):
    d = build_discriminator(DiscriminatorConfig(base_filters=4))
    assert d.output_size(size) == propagate(size)
    if propagate(size) >= 1:
        with ad.no_grad():
            assert d(Tensor(np.zeros((1, 1, size, size), np.float32))).shape[2:] == (propagate(size),) * 2


def test_discriminator_rejects_tiny_input():
    d = build_discriminator(SMALL_D)
    with pytest.raises(ValueError, match="smaller than the minimum"):
        d(Tensor(np.zeros((1, 1, 16, 64), np.float32)))


def test_discriminator_channels():
    d = build_discriminator(DiscriminatorConfig())
    assert [c.weight.shape[0] for c in d.convs] == [64, 128, 256, 512]
    assert d.out.weight.shape == (1, 512, 4, 4)


# losses and pool ---------------------------------------------------------------


@pytest.mark.parametrize("scores,real,expected", [
    (np.ones((1, 1, 3, 3)), True, 0.0),
    (np.zeros((1, 1, 3, 3)), True, 1.0),
    (np.array([0.5, 0.5]), False, 0.25),
])
def test_gan_loss(scores, real, expected):
    assert gan_loss(Tensor(scores), real).item() == pytest.approx(expected)


def test_cycle_loss_examples():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 1, 4, 4))
    assert cycle_loss(Tensor(x), Tensor(x), 10).item() == 0
    assert cycle_loss(Tensor(x), Tensor(x + 0.1), 10).item() == pytest.approx(1.0, rel=1e-6)
    assert cycle_loss(Tensor(x), Tensor(-x), 0).item() == 0


def test_cycle_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        cycle_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 8))), 10)


def test_pool_capacity_zero_passthrough():
    pool = ImagePool(0)
    for i in range(5):
        img = np.full((1, 2, 2), i, np.float32)
        assert pool.query_one(img) is img
    assert len(pool) == 0


def test_pool_first_query_returns_input():
    img = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    np.testing.assert_array_equal(ImagePool(50).query_one(img), img)


def reference_pool(capacity, seed, n):
    """Plain re-statement of the pool rule, drawing from the same generator."""
    rng = np.random.default_rng(seed)
    stored, out = [], []
    for i in range(n):
        if len(stored) < capacity:
            stored.append(i)
            out.append(i)
        elif rng.uniform() > 0.5:
            j = int(rng.integers(0, capacity))
            out.append(stored[j])
            stored[j] = i
        else:
            out.append(i)
    return out


def test_pool_replay_sequence():
    pool = ImagePool(5, seed=7)
    seq = [int(pool.query_one(np.full((1, 2, 2), i, np.float32))[0, 0, 0]) for i in range(100)]
    assert seq == reference_pool(5, 7, 100)
    assert seq[:20] == [0, 1, 2, 3, 4, 3, 4, 7, 8, 6, 0, 10, 12, 13, 14, 15, 2, 16, 9, 1]
    assert len(pool) == 5


@settings(max_examples=25, deadline=None)
@given(cap=st.integers(0, 6), seed=st.integers(0, 1000), sizes=st.lists(st.sampled_from([2, 3]), min_size=1, max_size=30))
def test_pool_invariants(cap, seed, sizes):
    pool = ImagePool(cap, seed)
    for s in sizes:
        img = np.zeros((1, s, s), np.float32)
        assert pool.query_one(img).shape == img.shape
        assert len(pool) <= cap


# training step -----------------------------------------------------------------


def step_once(seed=3, lambda_cycle=10.0, same=True):
    m = build_model(SMALL_G, SMALL_D, seed=seed, lambda_cycle=lambda_cycle)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32)
    y = x.copy() if same else rng.uniform(-1, 1, x.shape).astype(np.float32)
    return training_step(m, Tensor(x), Tensor(y), Pools(), make_optimizers(m)), m


def test_step_lambda_zero_gives_zero_cycle():
    r, _ = step_once(lambda_cycle=0.0)
    assert r.loss_cycle_clean == 0 and r.loss_cycle_noisy == 0


def test_step_identical_batches_regression():
    r, _ = step_once()
    assert r.loss_cycle_clean > 0 and r.loss_cycle_noisy > 0
    np.testing.assert_allclose([r.loss_cycle_clean, r.loss_cycle_noisy, r.loss_G_total],
                               [5.774841785430908, 5.560060024261475, 13.29922866821289], rtol=1e-5)


def test_step_bookkeeping_identity():
    r, _ = step_once(same=False)
    assert abs(r.loss_G_total - r.components_sum()) < 1e-6 * max(1.0, abs(r.loss_G_total))


def test_step_is_deterministic():
    a, ma = step_once(same=False)
    b, mb = step_once(same=False)
    assert a == b
    for (na, pa), (nb, pb) in zip(ma.named_parameters(), mb.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_step_updates_all_networks():
    m = build_model(SMALL_G, SMALL_D, seed=1)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    rng = np.random.default_rng(2)
    training_step(m, batch(rng, (2, 1, 32, 32)), batch(rng, (2, 1, 32, 32)), Pools(), make_optimizers(m))
    changed = {n.split(".")[0] for n, p in m.named_parameters() if not np.array_equal(before[n], p.data)}
    assert changed == {"G", "F", "D_clean", "D_noisy"}


def test_step_rejects_non_finite_without_updating():
    m = build_model(SMALL_G, SMALL_D, seed=1)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    x = np.zeros((2, 1, 32, 32), np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        training_step(m, Tensor(x), Tensor(x), Pools(), make_optimizers(m))
    for n, p in m.named_parameters():
        np.testing.assert_array_equal(before[n], p.data)


def test_step_rejects_mismatched_batches():
    m = build_model(SMALL_G, SMALL_D)
    with pytest.raises(ValueError, match="differ"):
        training_step(m, Tensor(np.zeros((2, 1, 32, 32))), Tensor(np.zeros((1, 1, 32, 32))),
                      Pools(), make_optimizers(m))


def test_model_parameter_names_are_prefixed():
    m = build_model(SMALL_G, SMALL_D)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"G", "F", "D_clean", "D_noisy"}
    g_shapes = [p.shape for _, p in m.G.named_parameters()]
    assert g_shapes == [p.shape for _, p in m.F.named_parameters()]
