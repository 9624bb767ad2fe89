import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ugcompress import numkernel as nk


def _naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().numpy().tobytes()).hexdigest()


class TestMatmul:
    def test_hand_example(self):
        a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        b = torch.tensor([[1.0], [1.0]])
        assert nk.matmul(a, b).tolist() == [[3.0], [7.0]]

    def test_identity(self):
        a = torch.randn(4, 4, dtype=torch.float64)
        assert torch.equal(nk.matmul(a, torch.eye(4, dtype=torch.float64)), a)

    def test_against_triple_loop(self):
        g = torch.Generator().manual_seed(3)
        a = torch.randn(5, 7, dtype=torch.float64, generator=g)
        b = torch.randn(7, 3, dtype=torch.float64, generator=g)
        ref = _naive_matmul(a.numpy(), b.numpy())
        assert np.abs(nk.matmul(a, b).numpy() - ref).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(nk.ShapeError):
            nk.matmul(torch.ones(2, 3), torch.ones(4, 2))

    def test_backward_rules(self):
        a = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        b = torch.randn(4, 2, dtype=torch.float64, requires_grad=True)
        dc = torch.randn(3, 2, dtype=torch.float64)
        nk.matmul(a, b).backward(dc)
        assert torch.allclose(a.grad, dc @ b.T)
        assert torch.allclose(b.grad, a.T @ dc)

    def test_flop_count(self):
        with nk.count_flops() as c:
            nk.matmul(torch.ones(2, 3), torch.ones(3, 4))
            nk.matmul(torch.ones(5, 2, 3), torch.ones(3, 4))
        assert c.total == 48 + 5 * 48

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity(self, seed):
        g = torch.Generator().manual_seed(seed)
        a, b, c = (torch.randn(6, 6, dtype=torch.float64, generator=g) for _ in range(3))
        left = nk.matmul(nk.matmul(a, b), c)
        right = nk.matmul(a, nk.matmul(b, c))
        assert (left - right).abs().max() <= 1e-9

    def test_nonfinite_is_an_error(self):
        with pytest.raises(nk.NonFiniteError):
            nk.matmul(torch.tensor([[float("inf")]]), torch.tensor([[0.0]]))


class TestMaskedSoftmax:
    def test_symmetric_row(self):
        out = nk.masked_softmax_rows(torch.zeros(1, 2), torch.ones(1, 2, dtype=torch.bool))
        assert out.tolist() == [[0.5, 0.5]]

    def test_masked_entry(self):
        scores = torch.tensor([[5.0, 1.0, 9.0]], dtype=torch.float64)
        mask = torch.tensor([[True, True, False]])
        out = nk.masked_softmax_rows(scores, mask)
        ref = torch.softmax(torch.tensor([5.0, 1.0], dtype=torch.float64), 0)
        assert out[0, 2].item() == 0.0
        assert torch.allclose(out[0, :2], ref)

    def test_row_sums(self):
        g = torch.Generator().manual_seed(0)
        out = nk.masked_softmax_rows(torch.randn(4, 6, generator=g), torch.ones(4, 6, dtype=torch.bool))
        assert (out.sum(-1) - 1).abs().max() <= 1e-6

    def test_degenerate_row(self):
        mask = torch.tensor([[True, False], [False, False]])
        with pytest.raises(nk.DegenerateRowError):
            nk.masked_softmax_rows(torch.zeros(2, 2), mask)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_zero_exactly_where_masked(self, q, kv, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((q, kv)) < 0.5
        mask[np.arange(q), rng.integers(0, kv, size=q)] = True
        scores = torch.from_numpy(rng.normal(size=(q, kv)) * 10)
        out = nk.masked_softmax_rows(scores, torch.from_numpy(mask)).numpy()
        assert np.all(out[~mask] == 0.0)
        assert np.all(out[mask] > 0.0)
        assert np.allclose(out.sum(-1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_uniform(self):
        V = 11
        loss = nk.cross_entropy_mean(torch.zeros(3, V), torch.tensor([0, 5, 10]), torch.ones(3, dtype=torch.bool))
        assert math.isclose(loss.item(), math.log(V), rel_tol=1e-6)

    def test_confident(self):
        logits = torch.full((2, 4), -50.0)
        logits[0, 1] = logits[1, 3] = 50.0
        loss = nk.cross_entropy_mean(logits, torch.tensor([1, 3]), torch.ones(2, dtype=torch.bool))
        assert loss.item() < 1e-10

    def test_against_per_position_oracle(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(8, 11, dtype=torch.float64, generator=g)
        targets = torch.randint(0, 11, (8,), generator=g)
        include = torch.tensor([1, 0, 1, 1, 0, 1, 1, 0], dtype=torch.bool)
        vals = []
        for t in range(8):
            if include[t]:
                row = logits[t].tolist()
                m = max(row)
                lse = m + math.log(sum(math.exp(v - m) for v in row))
                vals.append(lse - row[targets[t]])
        ref = sum(vals) / len(vals)
        assert abs(nk.cross_entropy_mean(logits, targets, include).item() - ref) <= 1e-10

    def test_all_excluded(self):
        with pytest.raises(nk.EmptyLossError):
            nk.cross_entropy_mean(torch.zeros(2, 3), torch.tensor([0, 1]), torch.zeros(2, dtype=torch.bool))

    def test_target_out_of_range(self):
        with pytest.raises(nk.ContractError):
            nk.cross_entropy_mean(torch.zeros(1, 3), torch.tensor([3]), torch.ones(1, dtype=torch.bool))


class TestRmsNormalize:
    def test_hand_example(self):
        out = nk.rms_normalize(torch.tensor([3.0, 4.0], dtype=torch.float64), torch.ones(2, dtype=torch.float64), eps=0.0)
        assert np.allclose(out.numpy(), [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)])
        assert abs(out[0].item() - 0.848528) < 1e-6 and abs(out[1].item() - 1.131371) < 1e-6

    def test_zero_slice(self):
        out = nk.rms_normalize(torch.zeros(4), torch.ones(4), eps=1e-6)
        assert torch.equal(out, torch.zeros(4))

    def test_unit_rms(self):
        g = torch.Generator().manual_seed(2)
        x = torch.randn(5, 7, dtype=torch.float64, generator=g) * 3
        out = nk.rms_normalize(x, torch.ones(7, dtype=torch.float64), eps=1e-12)
        assert (out.pow(2).mean(-1).sqrt() - 1).abs().max() <= 1e-6


class TestGradCheck:
    def test_quadratic(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        assert nk.grad_check(lambda: (x**2).sum(), [x], eps=1e-5) < 1e-8

    def test_constant(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        assert nk.grad_check(lambda: torch.tensor(3.0, dtype=torch.float64) + 0 * x.sum(), [x]) == 0.0

    def test_non_scalar(self):
        x = torch.ones(2, dtype=torch.float64, requires_grad=True)
        with pytest.raises(nk.ContractError):
            nk.grad_check(lambda: x * 2, [x])

    def test_requires_f64(self):
        x = torch.ones(2, requires_grad=True)
        with pytest.raises(nk.ContractError):
            nk.grad_check(lambda: x.sum(), [x])

    @pytest.mark.parametrize("seed", range(10))
    def test_ops_pass_gradcheck(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(3, 4, dtype=torch.float64, generator=g, requires_grad=True)
        b = torch.randn(4, 5, dtype=torch.float64, generator=g, requires_grad=True)
        gain = (torch.rand(5, dtype=torch.float64, generator=g) + 0.5).requires_grad_()
        mask = torch.rand(3, 5, generator=g) < 0.6
        mask[:, 0] = True
        targets = torch.randint(0, 5, (3,), generator=g)
        include = torch.tensor([True, False, True])

        def fn():
            h = nk.rms_normalize(nk.matmul(a, b), gain, 1e-6)
            p = nk.masked_softmax_rows(h, mask)
            return nk.cross_entropy_mean(p * 3.0, targets, include)

        assert nk.grad_check(fn, [a, b, gain]) < 1e-5


def test_ops_do_not_mutate_inputs():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(3, 4, generator=g)
    b = torch.randn(4, 4, generator=g)
    gain = torch.ones(4)
    mask = torch.ones(3, 4, dtype=torch.bool)
    before = [_digest(t) for t in (a, b, gain)]
    nk.matmul(a, b)
    nk.masked_softmax_rows(a, mask)
    nk.rms_normalize(a, gain)
    nk.cross_entropy_mean(a, torch.tensor([0, 1, 2]), torch.ones(3, dtype=torch.bool))
    assert before == [_digest(t) for t in (a, b, gain)]
