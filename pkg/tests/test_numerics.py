import math

import numpy as np
import pytest
import torch

from rtfq import numerics as nx


def central_diff(f, x: torch.Tensor, h: float) -> torch.Tensor:
    """Entry-wise central differences of scalar f at x (float64, no autograd)."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(((a - b).abs() / b.abs().clamp_min(1e-6)).max())


class TestConv2d:
    def test_identity_shaped_kernel_scales(self):
        out = nx.conv2d(torch.ones(1, 1, 3, 3), torch.tensor([[[[2.0]]]]), 1, 0)
        assert out.shape == (1, 1, 3, 3)
        assert torch.equal(out, torch.full((1, 1, 3, 3), 2.0))

    def test_zero_weight(self):
        x = torch.randn(2, 3, 5, 5, requires_grad=True)
        out = nx.conv2d(x, torch.zeros(4, 3, 3, 3), 1, 1)
        out.sum().backward()
        assert torch.count_nonzero(out) == 0
        assert torch.count_nonzero(x.grad) == 0

    @pytest.mark.parametrize("size,k,stride,pad", [(8, 3, 1, 0), (8, 3, 2, 1), (7, 3, 2, 1), (32, 5, 3, 2)])
    def test_output_size(self, size, k, stride, pad):
        out = nx.conv2d(torch.zeros(1, 2, size, size), torch.zeros(3, 2, k, k), stride, pad)
        expected = (size + 2 * pad - k) // stride + 1
        assert out.shape[-1] == expected == nx.conv_output_size(size, k, stride, pad)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            nx.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=gen)
        w = torch.randn(4, 3, 3, 3, dtype=torch.float64, generator=gen)
        up = torch.randn(2, 4, 8, 8, dtype=torch.float64, generator=gen)

        wv = w.clone().requires_grad_(True)
        xv = x.clone().requires_grad_(True)
        (nx.conv2d(xv, wv, 1, 1) * up).sum().backward()

        fd_w = central_diff(lambda ww: float((nx.conv2d(x, ww, 1, 1) * up).sum()), w.clone(), 1e-3)
        assert rel_err(wv.grad, fd_w) < 1e-3
        fd_x = central_diff(lambda xx: float((nx.conv2d(xx, w, 1, 1) * up).sum()), x.clone(), 1e-3)
        assert rel_err(xv.grad, fd_x) < 1e-3


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(64, 3, 4, 4, generator=gen)
        x = (x - x.mean(dim=(0, 2, 3), keepdim=True)) / x.std(dim=(0, 2, 3), unbiased=False, keepdim=True)
        x = 5.0 + 2.0 * x  # per-channel mean 5, var 4
        out = nx.batch_norm(x, nx.BatchNormState(3), train=True)
        assert torch.allclose(out.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-5)
        assert torch.allclose(out.var(dim=(0, 2, 3), unbiased=False), torch.ones(3), atol=1e-4)

    def test_eval_is_deterministic(self):
        st = nx.BatchNormState(2)
        nx.batch_norm(torch.randn(8, 2, 3, 3), st, train=True)
        x = torch.randn(4, 2, 3, 3)
        assert torch.equal(nx.batch_norm(x, st, train=False), nx.batch_norm(x, st, train=False))

    def test_running_mean_update(self):
        # 2-sample batch, values 1 and 3: batch mean 2, momentum 0.1 -> 0.9*0 + 0.1*2
        st = nx.BatchNormState(1)
        nx.batch_norm(torch.tensor([1.0, 3.0]).view(2, 1, 1, 1), st, train=True)
        assert st.running_mean.item() == pytest.approx(0.2, abs=1e-7)

    def test_eval_before_train_fails(self):
        with pytest.raises(RuntimeError, match="uninitialized"):
            nx.batch_norm(torch.zeros(1, 2, 2, 2), nx.BatchNormState(2), train=False)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            nx.batch_norm(torch.zeros(1, 3, 2, 2), nx.BatchNormState(2), train=True)

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(4, 2, 3, 3, dtype=torch.float64, generator=gen)
        up = torch.randn(4, 2, 3, 3, dtype=torch.float64, generator=gen)

        def f(xx):
            st = nx.BatchNormState(2).double()
            return ((nx.batch_norm(xx, st, train=True) * up).sum()).item()

        xv = x.clone().requires_grad_(True)
        (nx.batch_norm(xv, nx.BatchNormState(2).double(), train=True) * up).sum().backward()
        assert rel_err(xv.grad, central_diff(f, x.clone(), 1e-5)) < 1e-3


class TestProbabilityOps:
    def test_softmax_symmetric(self):
        assert torch.allclose(nx.softmax(torch.zeros(3)), torch.full((3,), 1 / 3))

    def test_kl_identity(self):
        p = nx.softmax(torch.randn(5, 4))
        assert torch.allclose(nx.kl_divergence(p, p), torch.zeros(5), atol=1e-6)

    def test_kl_and_entropy_nonnegative(self):
        gen = torch.Generator().manual_seed(3)
        p = nx.softmax(3 * torch.randn(100, 6, generator=gen))
        q = nx.softmax(3 * torch.randn(100, 6, generator=gen))
        assert (nx.kl_divergence(p, q) >= -1e-6).all()
        assert (nx.entropy(p) >= 0).all()
        assert torch.allclose(p.sum(dim=1), torch.ones(100), atol=1e-6)

    def test_invalid_probabilities_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            nx.entropy(torch.tensor([[0.5, 0.4]]))
        with pytest.raises(ValueError):
            nx.cross_entropy(torch.tensor([[0.7, 0.7]]), torch.tensor([0]), from_logits=False)

    def test_cross_entropy_variants_agree(self):
        logits = torch.tensor([[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]])
        labels = torch.tensor([0, 2])
        hard = nx.cross_entropy(logits, labels)
        soft = nx.cross_entropy(logits, torch.eye(3)[labels])
        probs = nx.cross_entropy(nx.softmax(logits), labels, from_logits=False)
        p = np.exp(logits.numpy()) / np.exp(logits.numpy()).sum(1, keepdims=True)
        ref = -np.mean(np.log(p[[0, 1], [0, 2]]))
        for v in (hard, soft, probs):
            assert float(v) == pytest.approx(ref, rel=1e-6)

    def test_soft_target_gradient(self):
        logits = torch.randn(3, 4, dtype=torch.float64)
        target = nx.softmax(torch.randn(3, 4, dtype=torch.float64))
        lv = logits.clone().requires_grad_(True)
        nx.cross_entropy(lv, target).backward()
        fd = central_diff(lambda z: float(nx.cross_entropy(z, target)), logits.clone(), 1e-6)
        assert rel_err(lv.grad, fd) < 1e-3


class TestComposedGraph:
    def test_three_op_chain_rule(self):
        # y = sum(relu(w*x + b)^2); x, b fixed, all pre-activations positive
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        b = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
        w = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        y = (nx.relu(w * x + b) ** 2).sum()
        y.backward()
        manual = sum(2 * (0.7 * xi + 0.5) * xi for xi in (1.0, 2.0, 3.0))
        assert float(w.grad) == pytest.approx(manual, rel=1e-12)

    def test_gradients_accumulate(self):
        w = torch.tensor(2.0, requires_grad=True)
        (3 * w).backward()
        (5 * w).backward()
        assert float(w.grad) == 8.0


def test_linear_and_pool_gradients():
    gen = torch.Generator().manual_seed(4)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=gen)
    w = torch.randn(5, 3, dtype=torch.float64, generator=gen)
    up = torch.randn(2, 5, dtype=torch.float64, generator=gen)
    wv = w.clone().requires_grad_(True)
    (nx.linear(nx.global_avg_pool(x), wv) * up).sum().backward()
    fd = central_diff(lambda ww: float((nx.linear(nx.global_avg_pool(x), ww) * up).sum()), w.clone(), 1e-4)
    assert rel_err(wv.grad, fd) < 1e-3


def test_relu_gradient_away_from_kink():
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(50, dtype=torch.float64, generator=gen)
    x = x[x.abs() > 1e-4]
    xv = x.clone().requires_grad_(True)
    nx.relu(xv).sum().backward()
    fd = central_diff(lambda z: float(nx.relu(z).sum()), x.clone(), 1e-6)
    assert torch.allclose(xv.grad, fd, atol=1e-6)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert nx.cosine_annealing_lr(0, 100, 2e-4) == 2e-4
        assert nx.cosine_annealing_lr(100, 100, 2e-4) == pytest.approx(0.0, abs=1e-20)
        assert nx.cosine_annealing_lr(50, 100, 2e-4) == pytest.approx(1e-4, rel=1e-12)

    def test_monotone(self):
        lrs = [nx.cosine_annealing_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_check_finite_aborts():
    with pytest.raises(nx.NumericalError, match="non-finite"):
        nx.check_finite(torch.tensor([1.0, math.nan]), "probe")


def test_optimizer_choice():
    p = torch.nn.Parameter(torch.ones(2))
    assert isinstance(nx.make_optimizer([p]), torch.optim.SGD)
    assert nx.make_optimizer([p]).param_groups[0]["momentum"] == 0.9
    assert isinstance(nx.make_optimizer([p], "adam", lr=1e-3), torch.optim.Adam)
    with pytest.raises(ValueError):
        nx.make_optimizer([p], "lion")
