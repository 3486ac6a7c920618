import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from smolrgpt.connectors import Connector, connect, pixel_shuffle, pixel_unshuffle
from smolrgpt.errors import IndivisibleChannels, IndivisibleFactor, ModalityMismatch
from smolrgpt.vision_encoder import FeatureGrid


def shuffle_oracle(x: np.ndarray, r: int) -> np.ndarray:
    h, w, c = x.shape
    out = np.zeros((h // r, w // r, c * r * r), dtype=x.dtype)
    for i in range(h // r):
        for j in range(w // r):
            for di in range(r):
                for dj in range(r):
                    for k in range(c):
                        out[i, j, (di * r + dj) * c + k] = x[i * r + di, j * r + dj, k]
    return out


def grid(values, modality="rgb"):
    return FeatureGrid(modality, torch.as_tensor(values, dtype=torch.float64))


def test_r1_identity():
    x = grid(np.random.default_rng(0).random((4, 6, 3)))
    assert torch.equal(pixel_shuffle(x, 1).values, x.values)
    assert torch.equal(pixel_unshuffle(x, 1).values, x.values)


def test_2x2_scan_order():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = grid([[[a], [b]], [[c], [d]]])
    out = pixel_shuffle(x, 2).values
    assert out.shape == (1, 1, 4)
    assert out.flatten().tolist() == [a, b, c, d]
    back = pixel_unshuffle(FeatureGrid("rgb", out), 2).values
    assert back[..., 0].tolist() == [[a, b], [c, d]]


def test_random_against_oracle():
    x = np.random.default_rng(1).random((4, 6, 3))
    assert np.array_equal(pixel_shuffle(grid(x), 2).values.numpy(), shuffle_oracle(x, 2))


def test_round_trip_100_seeded():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r = int(rng.integers(1, 4))
        h, w, c = (int(v) for v in (rng.integers(1, 4) * r, rng.integers(1, 4) * r, rng.integers(1, 5)))
        x = grid(rng.standard_normal((h, w, c)))
        assert torch.equal(pixel_unshuffle(pixel_shuffle(x, r), r).values, x.values)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31))
def test_shuffle_preserves_multiset(r, hb, wb, c, seed):
    x = np.random.default_rng(seed).standard_normal((hb * r, wb * r, c))
    out = pixel_shuffle(grid(x), r).values.numpy()
    assert out.size == x.size
    assert np.array_equal(np.sort(out, axis=None), np.sort(x, axis=None))


def test_indivisible():
    with pytest.raises(IndivisibleFactor):
        pixel_shuffle(grid(np.zeros((3, 4, 1))), 2)
    with pytest.raises(IndivisibleChannels):
        pixel_unshuffle(grid(np.zeros((2, 2, 3))), 2)


def make_connector(modality="rgb", dim=2, r=2, lm_dim=8):
    return Connector(modality, dim, r, lm_dim, dtype=torch.float64)


def test_zero_grid_zero_bias():
    conn = make_connector()
    out = connect(grid(np.zeros((4, 4, 2))), conn)
    assert out.count == 4 and out.grid_shape == (2, 2)
    assert torch.count_nonzero(out.values) == 0


def test_identity_projection():
    conn = make_connector(dim=2, r=2, lm_dim=8)
    with torch.no_grad():
        conn.weight.copy_(torch.eye(8, dtype=torch.float64))
    x = grid(np.random.default_rng(3).random((4, 4, 2)))
    expected = pixel_shuffle(x, 2).values.reshape(4, 8)
    assert torch.equal(connect(x, conn).values, expected)


def test_modality_mismatch():
    with pytest.raises(ModalityMismatch):
        connect(grid(np.zeros((4, 4, 2)), "rgb"), make_connector("depth"))
    with pytest.raises(ModalityMismatch):
        connect(grid(np.zeros((4, 4, 2)), "depth"), make_connector("rgb"))


def test_linear_in_grid():
    conn = make_connector()
    x = np.random.default_rng(4).random((4, 4, 2))
    a = connect(grid(3.5 * x), conn).values
    b = 3.5 * connect(grid(x), conn).values
    torch.testing.assert_close(a, b, rtol=1e-14, atol=1e-14)


def test_weight_gradient_finite_differences(rng):
    conn = make_connector(dim=2, r=2, lm_dim=8)
    with torch.no_grad():
        conn.bias.normal_()
    x = grid(rng.standard_normal((4, 4, 2)))
    probe = torch.from_numpy(rng.standard_normal((4, 8)))

    def f():
        return (torch.tanh(connect(x, conn).values) * probe).sum()

    f().backward()
    for idx in [(i, j) for i in range(8) for j in range(8)]:
        num = central_difference(f, conn.weight.data, idx)
        assert relative_error(conn.weight.grad[idx].item(), num) < 1e-4
