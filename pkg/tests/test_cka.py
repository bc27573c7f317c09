from dartfx.slad import UndefinedSimilarityError, UsageError
from dartfx.slad.cka import (
    CkaMatrix,
    FeatureMatrix,
    center_columns,
    cka_matrix,
    collect_features,
    delta_cka,
    linear_cka,
    mean_aligned_cka,
    probe_batch,
    read_cka_csv,
    write_cka_csv,
)
from dartfx.slad.training import block_mapping, build_task_model
import numpy as np
import pytest


def hsic_cka(X, Y):
    """Gram-matrix form: tr(K H L H) normalized, with linear kernels."""
    n = X.shape[0]
    H = np.eye(n) - np.ones((n, n)) / n
    K, L = X @ X.T, Y @ Y.T

    def hsic(A, B):
        return np.trace(A @ H @ B @ H)

    return hsic(K, L) / np.sqrt(hsic(K, K) * hsic(L, L))


def random_orthogonal(p, rng):
    q, r = np.linalg.qr(rng.normal(size=(p, p)))
    return q * np.sign(np.diag(r))


def test_center_columns():
    X = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    centered = center_columns(X).values
    assert np.all(np.abs(centered.mean(axis=0)) <= 1e-14)
    assert np.array_equal(centered[:, 1], np.zeros(3))
    assert np.array_equal(center_columns(centered).values, centered)


def test_feature_matrix_validation():
    with pytest.raises(UsageError):
        FeatureMatrix(np.ones((1, 3)))
    with pytest.raises(UsageError):
        FeatureMatrix(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_self_similarity():
    X = np.random.default_rng(0).normal(size=(30, 7))
    assert abs(linear_cka(X, X) - 1.0) <= 1e-10


def test_scaled_copy():
    assert abs(linear_cka(np.array([[1.0], [-1.0]]), np.array([[2.0], [-2.0]])) - 1.0) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_orthogonal_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(40, 8)), rng.normal(size=(40, 12))
    base = linear_cka(X, Y)
    assert abs(linear_cka(X @ random_orthogonal(8, rng), Y) - base) <= 1e-8
    assert abs(linear_cka(X, Y @ random_orthogonal(12, rng)) - base) <= 1e-8
    assert abs(linear_cka(3.7 * X, Y) - base) <= 1e-8
    assert abs(linear_cka(X, Y[:, rng.permutation(12)]) - base) <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_matches_gram_matrix_form(seed):
    rng = np.random.default_rng(100 + seed)
    X, Y = rng.normal(size=(50, 8)), rng.normal(size=(50, 16))
    assert abs(linear_cka(X, Y) - hsic_cka(X, Y)) <= 1e-8


def test_symmetry_and_bounds():
    rng = np.random.default_rng(7)
    for _ in range(20):
        X, Y = rng.normal(size=(20, 5)), rng.normal(size=(20, 9))
        value = linear_cka(X, Y)
        assert abs(value - linear_cka(Y, X)) <= 1e-12
        assert 0.0 <= value <= 1.0 + 1e-9


def test_degenerate_features_are_undefined():
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))


def test_sample_count_mismatch():
    with pytest.raises(UsageError):
        linear_cka(np.ones((5, 3)), np.ones((4, 3)))


def test_cka_matrix_of_a_model_with_itself():
    rng = np.random.default_rng(1)
    layers = [rng.normal(size=(25, 6)) for _ in range(3)]
    M = cka_matrix(layers, layers, probe="p")
    assert M.shape == (3, 3)
    assert np.allclose(np.diag(M.array), 1.0, atol=1e-10)
    assert mean_aligned_cka(M) == pytest.approx(1.0, abs=1e-10)


def test_cka_matrix_rejects_different_probes():
    with pytest.raises(UsageError):
        cka_matrix([np.ones((4, 2))], [np.ones((5, 2))])


def test_cka_matrix_entry_range():
    with pytest.raises(ValueError):
        CkaMatrix(values=[[1.5]], probe="p")


def test_mean_aligned_cka_examples():
    assert mean_aligned_cka(np.array([[0.9, 0.1], [0.2, 0.8]])) == pytest.approx(0.85)
    values = np.arange(72, dtype=float).reshape(12, 6) / 100.0
    mapping = block_mapping("even", 6, 12)
    expected = np.mean([values[2 * j, j] for j in range(6)])
    assert mean_aligned_cka(values, mapping) == pytest.approx(expected)
    with pytest.raises(UsageError):
        mean_aligned_cka(values)


def test_delta_cka():
    M = CkaMatrix(values=[[0.9, 0.1], [0.2, 0.8]], probe="p")
    assert np.array_equal(delta_cka(M, M), np.zeros((2, 2)))
    after = CkaMatrix(values=[[0.5, 0.1], [0.2, 0.6]], probe="p")
    assert np.allclose(delta_cka(M, after), [[0.4, 0.0], [0.0, 0.2]])
    with pytest.raises(UsageError):
        delta_cka(M, CkaMatrix(values=[[0.5]], probe="p"))
    with pytest.raises(UsageError):
        delta_cka(M, CkaMatrix(values=[[0.9, 0.1], [0.2, 0.8]], probe="q"))


def test_csv_uses_six_decimals(tmp_path):
    path = write_cka_csv(tmp_path / "cka.csv", np.array([[1.0, 0.1234567], [0.5, 0.0]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "teacher_layer,student_0,student_1"
    assert lines[1] == "0,1.000000,0.123457"
    assert np.allclose(read_cka_csv(path), [[1.0, 0.123457], [0.5, 0.0]])


def test_probe_batch_is_fixed(tiny_data):
    first, descriptor = probe_batch(tiny_data, size=8, seed=2)
    second, _ = probe_batch(tiny_data, size=8, seed=2)
    assert len(first) == 8
    assert np.array_equal(first.images, second.images)
    assert "val+test" in descriptor
    small, descriptor = probe_batch(tiny_data, size=3, seed=2)
    assert len(small) == 3 and ":val:" in descriptor


def test_collect_features_per_block(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    probe, _ = probe_batch(tiny_data, size=10)
    features = collect_features(model, probe.images, batch_size=4)
    assert len(features) == tiny_student_config.depth
    assert features[0].values.shape == (10, tiny_student_config.dim)
    whole = collect_features(model, probe.images, batch_size=64)
    assert np.allclose(features[1].values, whole[1].values, atol=1e-12)
    mean = collect_features(model, probe.images, token="mean")
    assert not np.allclose(mean[0].values, features[0].values)
