import copy

import pytest
import torch

from rtfq.supernet import (ArchSpec, ConfigSpace, PlainNet, SubnetConfig, build_supernet, channels_at,
                           export_plain_weights, import_plain_weights, resize_input)

ARCH = ArchSpec.desk()
SPACE = ConfigSpace.desk()


def warmed_net(seed=0):
    """Fresh supernet whose source BN entries have seen one batch at every width."""
    net = build_supernet(ARCH, SPACE, seed)
    x = torch.rand(16, 3, 32, 32, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        for w in SPACE.widths:
            net(x, SubnetConfig(w, 32, None), "source", train=True)
    return net


def batch(n=8, res=32, seed=1):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed))


class TestConstruction:
    def test_counts(self):
        net = build_supernet(ARCH, SPACE, 0)
        for layer in net.quantized_layers():
            assert len(layer.weight_quant) == 3 and len(layer.act_quant) == 3
        for bank in net.bns:
            assert len(bank.entries) == 6

    def test_seed_determinism(self):
        a, b = build_supernet(ARCH, SPACE, 5), build_supernet(ARCH, SPACE, 5)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        c = build_supernet(ARCH, SPACE, 6)
        assert not torch.equal(a.convs[0].weight, c.convs[0].weight)

    def test_full_width_parameter_count_matches_plain(self):
        net = build_supernet(ARCH, SPACE, 0)
        plain = PlainNet(ARCH)
        assert net.subnet_parameter_count(1.0) == sum(p.numel() for p in plain.parameters())

    def test_quantizer_steps_positive(self):
        net = build_supernet(ARCH, SPACE, 0)
        assert all(q.step.item() > 0 for q in net.quantizers())

    def test_invalid_space(self):
        with pytest.raises(ValueError):
            ConfigSpace((0.5, 0.25), (32,), (8,))
        with pytest.raises(ValueError):
            ConfigSpace((1.0, 1.0), (32,), (8,))
        with pytest.raises(ValueError):
            ArchSpec(num_classes=1)


@pytest.mark.parametrize("base,w,expected", [(64, 1.0, 64), (64, 0.73, 47), (1, 0.5, 1), (128, 0.75, 96)])
def test_channels_at(base, w, expected):
    assert channels_at(base, w) == expected


class TestForward:
    def test_shape_and_eval_determinism(self):
        net = warmed_net()
        x = batch(res=24)
        cfg = SubnetConfig(0.75, 24, 6)
        a = net(x, cfg, "source")
        b = net(x, cfg, "source")
        assert a.shape == (8, 4)
        assert torch.equal(a, b)

    def test_resolution_mismatch(self):
        net = warmed_net()
        with pytest.raises(ValueError, match="resolution"):
            net(batch(res=32), SubnetConfig(1.0, 24, 8))

    def test_config_outside_space(self):
        net = warmed_net()
        with pytest.raises(ValueError):
            net(batch(res=32), SubnetConfig(0.6, 32, 8))

    def test_eight_bit_close_to_full_precision_plain(self):
        net = warmed_net()
        plain = PlainNet(ARCH)
        plain.load_state_dict(export_plain_weights(net))
        plain.eval()
        x = batch(32)
        with torch.no_grad():
            diff = (net(x, SubnetConfig(1.0, 32, 8)) - plain(x)).abs().max().item()
        assert diff < 0.1

    def test_domain_bank_isolation(self):
        net = warmed_net()
        src = net.bns[0].entry("source", 1.0).running_mean.clone()
        tgt = net.bns[0].entry("target", 1.0).running_mean.clone()
        with torch.no_grad():
            net(batch(seed=3) + 0.5, SubnetConfig(1.0, 32, 8), "source", train=True)
        assert not torch.equal(net.bns[0].entry("source", 1.0).running_mean, src)
        assert torch.equal(net.bns[0].entry("target", 1.0).running_mean, tgt)

        src = net.bns[0].entry("source", 1.0).running_mean.clone()
        with torch.no_grad():
            net(batch(seed=4), SubnetConfig(1.0, 32, 8), "target", train=True)
        assert torch.equal(net.bns[0].entry("source", 1.0).running_mean, src)

    def test_activations_are_step_multiples(self):
        net = warmed_net()
        seen = []

        def hook(module, inputs, output):
            seen.append((output.detach(), module.step.detach()))

        handles = [layer.act_quant["6"].register_forward_hook(hook) for layer in net.quantized_layers()]
        with torch.no_grad():
            net(batch(res=24), SubnetConfig(0.5, 24, 6))
        for h in handles:
            h.remove()
        assert len(seen) == len(net.quantized_layers())
        for out, step in seen:
            k = out / step
            assert (k - k.round()).abs().max().item() < 1e-3
            assert k.min().item() >= 0


def test_prefix_nesting():
    net = build_supernet(ARCH, SPACE, 0)
    for conv in net.convs:
        for w1 in SPACE.widths:
            for w2 in SPACE.widths:
                if w1 < w2:
                    (o1, i1), (o2, i2) = conv.active_channels(w1), conv.active_channels(w2)
                    assert o1 <= o2 and i1 <= i2
                    assert torch.equal(conv.sliced_weight(w2)[:o1, :i1], conv.sliced_weight(w1))
                    assert conv.sliced_weight(w1).data_ptr() == conv.weight.data_ptr()


def test_sgd_step_touches_only_the_active_subnet():
    net = warmed_net()
    cfg = SPACE.smallest()
    before = copy.deepcopy(net.state_dict())
    opt = torch.optim.SGD(net.parameters(), lr=0.1, momentum=0.9)
    x = resize_input(batch(), cfg.resolution)
    loss = torch.nn.functional.cross_entropy(net(x, cfg, "source", train=True), torch.tensor([0, 1, 2, 3] * 2))
    loss.backward()
    opt.step()
    after = net.state_dict()

    allowed_prefix = {}
    for i, conv in enumerate(net.convs):
        allowed_prefix[f"convs.{i}.weight"] = conv.active_channels(cfg.width_mult)
    allowed_prefix["head.weight"] = (net.head.out_features, channels_at(net.head.in_features, cfg.width_mult))
    q = str(cfg.bits)

    for key, old in before.items():
        new = after[key]
        if key in allowed_prefix:
            o, i = allowed_prefix[key]
            mask = torch.ones_like(old, dtype=torch.bool)
            mask[:o, :i] = False
            assert torch.equal(new[mask], old[mask]), key
            assert not torch.equal(new, old), key
        elif key == "head.bias":
            continue
        elif ".entries.source_w050." in key:
            continue
        elif key.endswith(f"_quant.{q}.step"):
            continue
        else:
            assert torch.equal(new, old), key


class TestResize:
    def test_identity(self):
        x = torch.rand(3, 32, 32)
        assert resize_input(x, 32) is x

    @pytest.mark.parametrize("size", [7, 16, 24])
    def test_constant(self, size):
        out = resize_input(torch.full((2, 3, 32, 32), 0.3), size)
        assert out.shape == (2, 3, size, size)
        assert torch.allclose(out, torch.full_like(out, 0.3), atol=1e-7)

    def test_checkerboard(self):
        idx = torch.arange(4)
        board = ((idx[:, None] + idx[None, :]) % 2).float().view(1, 1, 4, 4)
        assert torch.equal(resize_input(board, 2), torch.full((1, 1, 2, 2), 0.5))

    def test_non_square(self):
        with pytest.raises(ValueError):
            resize_input(torch.zeros(1, 3, 4, 5), 2)


class TestImport:
    def test_round_trip_identity(self):
        net = warmed_net()
        fresh = import_plain_weights(build_supernet(ARCH, SPACE, 99), export_plain_weights(net))
        x = batch()
        for q in (None, *SPACE.bitwidths):
            cfg = SubnetConfig(1.0, 32, q)
            assert torch.equal(net(x, cfg), fresh(x, cfg))

    def test_plain_forward_bit_identical(self):
        net = warmed_net()
        plain = PlainNet(ARCH)
        plain.load_state_dict(export_plain_weights(net))
        plain.eval()
        fresh = import_plain_weights(build_supernet(ARCH, SPACE, 3), plain.state_dict())
        x = batch()
        with torch.no_grad():
            assert torch.equal(plain(x), fresh(x, SubnetConfig(1.0, 32, None)))

    def test_narrow_subnet_runnable(self):
        net = warmed_net()
        fresh = import_plain_weights(build_supernet(ARCH, SPACE, 1), export_plain_weights(net))
        with torch.no_grad():
            out = fresh(batch(res=16), SubnetConfig(0.5, 16, 4))
        assert torch.isfinite(out).all()

    def test_shape_mismatch_names_layers(self):
        other = PlainNet(ArchSpec(num_classes=5))
        with pytest.raises(ValueError) as err:
            import_plain_weights(build_supernet(ARCH, SPACE, 0), other.state_dict())
        assert "fc.weight" in str(err.value) and "fc.bias" in str(err.value)

    def test_missing_and_extra_keys(self):
        state = PlainNet(ARCH).state_dict()
        state.pop("conv1.weight")
        state["extra"] = torch.zeros(1)
        with pytest.raises(ValueError) as err:
            import_plain_weights(build_supernet(ARCH, SPACE, 0), state)
        assert "conv1.weight: missing" in str(err.value)
        assert "extra: unexpected key" in str(err.value)
