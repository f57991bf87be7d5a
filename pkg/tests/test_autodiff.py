"""Numeric core: op semantics, tape gradients vs finite differences, RNG."""

import numpy as np
import pytest

from fd_oracle import check_op, scalarize
from topofg import autodiff as ad
from topofg.autodiff import AutodiffError, SeededRng, ShapeError, Tape, Tensor


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(7, 9)) * 5)
    out = ad.softmax(x, axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(7), atol=1e-12)


def test_sigmoid_at_zero_and_open_interval():
    assert ad.sigmoid(Tensor(0.0)).data == 0.5
    x = ad.sigmoid(Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))).data
    assert np.all(x > 0.0) and np.all(x < 1.0)


def test_matmul_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 3))
    out = (Tensor(np.eye(3)) @ Tensor(x)).data
    np.testing.assert_array_equal(out, np.eye(3) @ x)


def test_shape_mismatch_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as ei:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    msg = str(ei.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_backward_simple_analytic():
    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = x * x
    g = ad.backward(y)
    assert g.of(x) == pytest.approx(6.0)

    tape = Tape()
    x = tape.leaf(np.array(0.0))
    g = ad.backward(ad.sigmoid(x))
    assert g.of(x) == pytest.approx(0.25)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.zeros(3))
    with pytest.raises(AutodiffError):
        ad.backward(x + 1.0)


def test_backward_unreached_leaf_gets_zero_grad():
    tape = Tape()
    x = tape.leaf(np.array(2.0))
    unused = tape.leaf(np.ones(4))
    g = ad.backward(x * x)
    np.testing.assert_array_equal(g.of(unused), np.zeros(4))


def test_untracked_ops_record_nothing():
    tape = Tape()
    _ = tape.leaf(np.zeros(2))
    before = len(tape)
    out = ad.relu(Tensor([1.0, -1.0]) * 2.0)
    assert out.tape is None
    assert len(tape) == before


def _mlp_forward(params, x):
    h = ad.relu(x @ params[0] + params[1])
    h = ad.relu(h @ params[2] + params[3])
    return h @ params[4] + params[5]


def test_mlp_gradients_vs_finite_differences():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(1, 12))
    arrs = [rng.normal(size=(5, 4)), rng.normal(size=(4, 6)), rng.normal(size=6),
            rng.normal(size=(6, 6)), rng.normal(size=6),
            rng.normal(size=(6, 12)), rng.normal(size=12)]

    def build(ts):
        return scalarize(_mlp_forward(ts[1:], ts[0]), w)

    worst = check_op(build, arrs, rng, n_entries=6)
    assert worst < 1e-4


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "matmul", "concat", "softmax", "sigmoid",
    "relu", "layer_norm", "exp", "log", "sqrt", "abs", "sum", "mean",
    "log_softmax", "bce_with_logits", "broadcast", "take", "transpose",
])
def test_op_gradients_vs_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        if name == "add":
            build, arrs = (lambda ts: scalarize(ts[0] + ts[1], w)), [a, b]
        elif name == "sub":
            build, arrs = (lambda ts: scalarize(ts[0] - ts[1], w)), [a, b]
        elif name == "mul":
            build, arrs = (lambda ts: scalarize(ts[0] * ts[1], w)), [a, b]
        elif name == "div":
            b2 = np.sign(b) * (np.abs(b) + 0.5)
            build, arrs = (lambda ts: scalarize(ts[0] / ts[1], w)), [a, b2]
        elif name == "matmul":
            m2 = rng.normal(size=(4, 5))
            wm = rng.normal(size=(3, 5))
            build, arrs = (lambda ts: scalarize(ts[0] @ ts[1], wm)), [a, m2]
        elif name == "concat":
            wc = rng.normal(size=(6, 4))
            build, arrs = (lambda ts: scalarize(ad.concat(ts, axis=0), wc)), [a, b]
        elif name == "softmax":
            build, arrs = (lambda ts: scalarize(ad.softmax(ts[0], axis=-1), w)), [a * 2]
        elif name == "sigmoid":
            build, arrs = (lambda ts: scalarize(ad.sigmoid(ts[0]), w)), [a * 3]
        elif name == "relu":
            a2 = np.sign(a) * (np.abs(a) + 0.2)  # keep away from the kink
            build, arrs = (lambda ts: scalarize(ad.relu(ts[0]), w)), [a2]
        elif name == "layer_norm":
            gmm = rng.normal(size=4)
            bta = rng.normal(size=4)
            build = lambda ts: scalarize(ad.layer_norm(ts[0], ts[1], ts[2]), w)
            arrs = [a, gmm, bta]
        elif name == "exp":
            build, arrs = (lambda ts: scalarize(ad.exp(ts[0]), w)), [a]
        elif name == "log":
            build, arrs = (lambda ts: scalarize(ad.log(ts[0]), w)), [np.abs(a) + 0.5]
        elif name == "sqrt":
            build, arrs = (lambda ts: scalarize(ad.sqrt(ts[0]), w)), [np.abs(a) + 0.5]
        elif name == "abs":
            a2 = np.sign(a) * (np.abs(a) + 0.2)
            build, arrs = (lambda ts: scalarize(ad.tabs(ts[0]), w)), [a2]
        elif name == "sum":
            ws = rng.normal(size=4)
            build, arrs = (lambda ts: scalarize(ad.tsum(ts[0], axis=0), ws)), [a]
        elif name == "mean":
            ws = rng.normal(size=(3, 1))
            build = lambda ts: scalarize(ad.tmean(ts[0], axis=1, keepdims=True), ws)
            arrs = [a]
        elif name == "log_softmax":
            build, arrs = (lambda ts: scalarize(ad.log_softmax(ts[0], axis=-1), w)), [a * 2]
        elif name == "bce_with_logits":
            y = (rng.random(size=(3, 4)) > 0.5).astype(float)
            build = lambda ts: scalarize(ad.bce_with_logits(ts[0], Tensor(y)), w)
            arrs = [a * 2]
        elif name == "broadcast":
            wb = rng.normal(size=(3, 4))
            build = lambda ts: scalarize(ad.broadcast_to(ts[0], (3, 4)), wb)
            arrs = [rng.normal(size=(1, 4))]
        elif name == "take":
            wt = rng.normal(size=(2, 4))
            build, arrs = (lambda ts: scalarize(ts[0][[0, 2]], wt)), [a]
        elif name == "transpose":
            wt = rng.normal(size=(4, 3))
            build, arrs = (lambda ts: scalarize(ad.transpose(ts[0], (1, 0)), wt)), [a]
        else:
            raise AssertionError(name)
        worst = max(worst, check_op(build, arrs, rng, n_entries=3))
    assert worst < 1e-4, f"{name}: max rel err {worst}"


class TestBilinearSample:
    def test_exact_cell_center(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(4, 5, 3))
        pts = np.array([[2 / 4, 1 / 3]])  # col 2, row 1
        out = ad.bilinear_sample(Tensor(grid), Tensor(pts)).data
        np.testing.assert_allclose(out[0], grid[1, 2], atol=1e-12)

    def test_midpoint_between_adjacent_cells(self):
        grid = np.zeros((2, 3, 1))
        grid[0, 0, 0] = 2.0
        grid[0, 1, 0] = 4.0
        pts = np.array([[0.25, 0.0]])  # halfway between col 0 and col 1 on row 0
        out = ad.bilinear_sample(Tensor(grid), Tensor(pts)).data
        assert out[0, 0] == pytest.approx(3.0, abs=1e-12)

    def test_matches_four_neighbor_oracle(self):
        rng = np.random.default_rng(3)
        H, W, D = 6, 7, 4
        grid = rng.normal(size=(H, W, D))
        pts = rng.random(size=(50, 2))
        out = ad.bilinear_sample(Tensor(grid), Tensor(pts)).data
        for p, o in zip(pts, out):
            x = p[0] * (W - 1)
            y = p[1] * (H - 1)
            x0, y0 = int(min(np.floor(x), W - 2)), int(min(np.floor(y), H - 2))
            fx, fy = x - x0, y - y0
            ref = (grid[y0, x0] * (1 - fx) * (1 - fy) + grid[y0, x0 + 1] * fx * (1 - fy)
                   + grid[y0 + 1, x0] * (1 - fx) * fy + grid[y0 + 1, x0 + 1] * fx * fy)
            np.testing.assert_allclose(o, ref, atol=1e-12)

    def test_out_of_range_clamps_to_border(self):
        rng = np.random.default_rng(4)
        grid = rng.normal(size=(3, 3, 2))
        pts = np.array([[-0.7, 0.5], [1.9, 1.8]])
        out = ad.bilinear_sample(Tensor(grid), Tensor(pts)).data
        np.testing.assert_allclose(out[0], grid[1, 0], atol=1e-12)
        np.testing.assert_allclose(out[1], grid[2, 2], atol=1e-12)

    def test_gradients_wrt_grid_and_points(self):
        rng = np.random.default_rng(5)
        worst_grid, worst_pts = 0.0, 0.0
        for _ in range(20):
            grid = rng.normal(size=(5, 6, 3))
            pts = rng.uniform(0.1, 0.9, size=(8, 2))
            # nudge away from exact lattice hits where fx/fy kink
            pts += 1e-3 * np.sign(rng.normal(size=pts.shape))
            pts = np.clip(pts, 0.05, 0.95)
            w = rng.normal(size=(8, 3))

            def build(ts):
                return scalarize(ad.bilinear_sample(ts[0], ts[1]), w)

            from fd_oracle import analytic_grads, fd_grad_entries, max_rel_err
            _, grads = analytic_grads(build, [grid, pts])
            e_grid = rng.choice(grid.size, size=4, replace=False)
            num = fd_grad_entries(build, [grid, pts], 0, e_grid)
            worst_grid = max(worst_grid, max_rel_err(grads[0].reshape(-1)[e_grid], num))
            e_pts = rng.choice(pts.size, size=4, replace=False)
            num = fd_grad_entries(build, [grid, pts], 1, e_pts)
            worst_pts = max(worst_pts, max_rel_err(grads[1].reshape(-1)[e_pts], num))
        assert worst_grid < 1e-4
        assert worst_pts < 1e-3


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(1234)
        b = SeededRng(1234)
        np.testing.assert_array_equal(a.normal((10,)), b.normal((10,)))
        np.testing.assert_array_equal(a.integers(0, 100, (5,)), b.integers(0, 100, (5,)))

    def test_children_are_independent_and_stable(self):
        a = SeededRng(7).child("scene", 3)
        b = SeededRng(7).child("scene", 3)
        c = SeededRng(7).child("scene", 4)
        x, y, z = a.normal((4,)), b.normal((4,)), c.normal((4,))
        np.testing.assert_array_equal(x, y)
        assert not np.array_equal(x, z)
