from dartfx.slad import BindingError, DimensionError, ParameterError, UnsupportedSiteError
from dartfx.slad.lora import (
    LoraAdapter,
    create_adapters,
    init_lora,
    lora_linear_forward,
    make_shared_view,
    merge_weights,
)
from dartfx.slad.tensor import Tensor, backward, mul, parameter, sum_
import numpy as np
import pytest


def trained_adapter(d, r=4, seed=0):
    """Adapter with a non-zero ``B`` as it would look after some training."""
    adapter = init_lora(d, 3 * d, r=r, seed=seed)
    adapter.B.data[...] = np.random.default_rng(seed + 100).normal(size=adapter.B.shape)
    return adapter


def test_init_lora_shapes_and_zero_b():
    adapter = init_lora(64, 192, r=16, seed=0)
    assert adapter.A.shape == (64, 16)
    assert adapter.B.shape == (16, 192)
    assert np.all(adapter.B.data == 0.0)
    bound = np.sqrt(6.0 / 64)
    assert np.all(np.abs(adapter.A.data) <= bound)
    assert adapter.A.requires_grad and adapter.B.requires_grad


@pytest.mark.parametrize("r", [0, 65])
def test_init_lora_rejects_rank(r):
    with pytest.raises(ParameterError):
        init_lora(64, 192, r=r)


def test_init_lora_accepts_rank_one():
    assert init_lora(64, 192, r=1).rank == 1


def test_create_adapters_are_independent():
    adapters = create_adapters(16, 3, r=2, seed=0)
    assert sorted(adapters) == [0, 1, 2]
    assert adapters[1].block == 1
    assert not np.array_equal(adapters[0].A.data, adapters[1].A.data)
    again = create_adapters(16, 3, r=2, seed=0)
    assert np.array_equal(adapters[2].A.data, again[2].A.data)


def test_factor_rank_mismatch():
    with pytest.raises(DimensionError):
        LoraAdapter(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 12))))


def test_lora_linear_forward_matches_merged_weight():
    rng = np.random.default_rng(0)
    adapter = trained_adapter(8, r=2)
    W0 = Tensor(rng.normal(size=(8, 24)))
    x = Tensor(rng.normal(size=(5, 8)))
    factored = lora_linear_forward(x, W0, adapter).data
    dense = x.data @ merge_weights(W0, adapter).data
    assert np.max(np.abs(factored - dense)) <= 1e-12


def test_lora_linear_forward_alpha_scaling():
    rng = np.random.default_rng(1)
    adapter = trained_adapter(8, r=2)
    scaled = LoraAdapter(adapter.A, adapter.B, alpha=4.0)
    assert scaled.scaling == 2.0
    W0 = Tensor(np.zeros((8, 24)))
    x = Tensor(rng.normal(size=(3, 8)))
    expected = 2.0 * (x.data @ adapter.A.data @ adapter.B.data)
    assert np.allclose(lora_linear_forward(x, W0, scaled).data, expected, atol=1e-12)


def test_lora_linear_forward_binding_error():
    with pytest.raises(BindingError):
        lora_linear_forward(Tensor(np.ones((2, 8))), Tensor(np.ones((8, 24))), init_lora(16, 48, r=2))


def test_shared_view_aliases_parent():
    d_t, d_s = 8, 4
    parent = trained_adapter(d_t)
    view = make_shared_view(parent, d_s, d_t)
    a, b = view.read()
    assert np.shares_memory(a, parent.A.data)
    assert np.array_equal(a, parent.A.data[:d_s])
    expected_b = np.concatenate([parent.B.data[:, 0:4], parent.B.data[:, 8:12], parent.B.data[:, 16:20]], axis=1)
    assert np.array_equal(b, expected_b)
    assert list(view.column_indices()) == [0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19]
    # later writes to the parent are visible through the view
    parent.A.data[0, 0] = 42.0
    parent.B.data[0, 8] = -7.0
    a, b = view.read()
    assert a[0, 0] == 42.0
    assert b[0, 4] == -7.0
    assert view.parameters() == []


def test_shared_view_contiguous_mode():
    parent = trained_adapter(8)
    view = make_shared_view(parent, 4, 8, slice_mode="contiguous")
    _, b = view.read()
    assert np.array_equal(b, parent.B.data[:, :12])
    assert view.out_features == 12


def test_shared_view_gradients_scatter_into_parent():
    d_t, d_s = 8, 4
    rng = np.random.default_rng(3)
    parent = trained_adapter(d_t)
    view = make_shared_view(parent, d_s, d_t)
    W0 = Tensor(rng.normal(size=(d_s, 3 * d_s)))
    x = Tensor(rng.normal(size=(5, d_s)))
    weights = rng.normal(size=(5, 3 * d_s))
    backward(sum_(mul(lora_linear_forward(x, W0, view), Tensor(weights))))

    a, b = parent.A.data[:d_s], view.read()[1]
    grad_delta = x.data.T @ weights
    expected_a = np.zeros_like(parent.A.data)
    expected_a[:d_s] = grad_delta @ b.T
    expected_b = np.zeros_like(parent.B.data)
    expected_b[:, view.column_indices()] = a.T @ grad_delta
    assert np.allclose(parent.A.grad, expected_a, atol=1e-12)
    assert np.allclose(parent.B.grad, expected_b, atol=1e-12)
    untouched = np.setdiff1d(np.arange(3 * d_t), view.column_indices())
    assert np.all(parent.B.grad[:, untouched] == 0.0)
    assert np.all(parent.A.grad[d_s:] == 0.0)


def test_shared_view_equal_widths_is_whole_adapter():
    parent = trained_adapter(8)
    a, b = make_shared_view(parent, 8, 8).read()
    assert np.array_equal(a, parent.A.data)
    assert np.array_equal(b, parent.B.data)


def test_shared_view_rejects_wider_student():
    with pytest.raises(DimensionError):
        make_shared_view(trained_adapter(4), 8, 4)


def test_shared_view_rejects_other_sites():
    proj = init_lora(8, 8, r=2, site="proj")
    with pytest.raises(UnsupportedSiteError):
        make_shared_view(proj, 4, 8)


def test_shared_view_rejects_unknown_slice_mode():
    with pytest.raises(ParameterError):
        make_shared_view(trained_adapter(8), 4, 8, slice_mode="interleaved")


def test_merge_weights_shape_mismatch():
    with pytest.raises(DimensionError):
        merge_weights(parameter(np.zeros((4, 12))), trained_adapter(8))


@pytest.mark.parametrize("d,r", [(8, 1), (8, 3), (12, 4)])
def test_adapter_update_rank_is_at_most_r(d, r):
    adapter = trained_adapter(d, r=r, seed=d + r)
    singular = np.linalg.svd(adapter.A.data @ adapter.B.data, compute_uv=False)
    assert singular.shape == (d,)
    assert np.all(singular[r:] < 1e-10)
    assert np.all(singular[:r] > 1e-10)
