import numpy as np
import pytest

from segdiff import autodiff as ad
from segdiff.ablation import Mask
from segdiff.diffusion import SamplerConfig, desk_schedule, sample, sample_rngs
from segdiff.unet import Segmenter, UNet, UNetConfig, encode_mask, mask_channel_batch, timestep_embedding


def count_parameters_by_hand(base=32, mults=(1, 2, 4), temb=64, cin=2, cout=1):
    """Architecture walk: every layer's weights and biases, written out independently."""
    def conv(i, o, k):
        return o * i * k * k + o

    def norm(c):
        return 2 * c

    def res(i, o):
        n = norm(i) + conv(i, o, 3) + (temb * o + o if temb else 0) + norm(o) + conv(o, o, 3)
        return n + (conv(i, o, 1) if i != o else 0)

    w = [base * m for m in mults]
    total = 2 * (temb * temb + temb) if temb else 0
    total += conv(cin, w[0], 3)
    prev = w[0]
    for i, ch in enumerate(w):
        total += res(prev, ch)
        if i < len(w) - 1:
            total += conv(ch, ch, 3)
        prev = ch
    total += res(prev, prev)
    for i in reversed(range(len(w))):
        out = w[i - 1] if i else w[0]
        total += res(prev + w[i], out)
        if i:
            total += conv(out, out, 3)
        prev = out
    return total + norm(prev) + conv(prev, cout, 3)


class TestMaskEncoding:
    def test_background(self):
        assert not encode_mask(Mask.empty(4, 4, 4), 4).any()

    def test_top_class(self):
        assert encode_mask(np.array([[3]]), 4)[0, 0] == 1.0

    def test_linear_map(self):
        np.testing.assert_allclose(encode_mask(np.array([[0, 1, 2, 3]]), 4)[0], [0, 1 / 3, 2 / 3, 1], rtol=1e-7)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode_mask(np.array([[4]]), 4)

    def test_batch_shape(self):
        assert mask_channel_batch(np.zeros((3, 5, 5), dtype=int), 4).shape == (3, 1, 5, 5)


class TestTimestepEmbedding:
    def test_layout(self):
        e = timestep_embedding([0, 7], 8)
        np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
        freqs = 10000.0 ** (-np.arange(4) / 4)
        np.testing.assert_allclose(e[1], np.concatenate([np.sin(7 * freqs), np.cos(7 * freqs)]))


class TestUNet:
    def test_parameter_count_pinned(self):
        net = UNet(UNetConfig())
        assert net.num_parameters() == count_parameters_by_hand() == 1_017_121

    @pytest.mark.parametrize("base,mults,temb", [(16, (1, 2, 4), 64), (8, (1, 2), 16), (16, (1, 2, 2), 0)])
    def test_parameter_count_other_configs(self, base, mults, temb):
        cfg = UNetConfig(base_channels=base, channel_multipliers=mults, time_embed_dim=temb, image_size=16)
        assert UNet(cfg).num_parameters() == count_parameters_by_hand(base, mults, temb)

    def test_zero_output_layer(self, tiny_unet_config, rng):
        net = UNet(tiny_unet_config, rng)
        assert not net.params["conv_out.weight"].data.any()
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        assert not net.predict_eps(x, np.zeros_like(x), np.array([3, 90])).any()

    def test_same_seed_same_parameters(self, tiny_unet_config):
        a = UNet(tiny_unet_config, np.random.default_rng(5)).state_dict()
        b = UNet(tiny_unet_config, np.random.default_rng(5)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_output_shape_and_determinism(self, tiny_unet_config, rng):
        net = UNet(tiny_unet_config, rng)
        net.params["conv_out.weight"].data[:] = 0.01
        x = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        m = rng.random((3, 1, 16, 16)).astype(np.float32)
        a = net.predict_eps(x, m, np.array([1, 50, 200]))
        b = net.predict_eps(x, m, np.array([1, 50, 200]))
        assert a.shape == x.shape and a.tobytes() == b.tobytes()

    def test_spatial_mismatch(self, tiny_unet_config):
        net = UNet(tiny_unet_config)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), [1])

    def test_mask_shape_mismatch(self, tiny_unet_config):
        net = UNet(tiny_unet_config)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 16, 16)), np.zeros((2, 1, 16, 16)), [1])

    def test_untrained_model_telescopes(self, tiny_unet_config):
        net = UNet(tiny_unet_config, np.random.default_rng(0))
        s = desk_schedule()
        masks = np.zeros((2, 1, 16, 16), dtype=np.float32)
        out = sample(net.predict_eps, masks, s, SamplerConfig("ddim", 10, seed=3))
        x_T = np.stack([r.standard_normal((1, 16, 16)) for r in sample_rngs(3, range(2))]).astype(np.float32)
        np.testing.assert_allclose(out, x_T / np.sqrt(s.alpha_bars[s.T]), rtol=1e-5)

    def test_gradients_reach_every_parameter(self, tiny_unet_config, rng):
        net = UNet(tiny_unet_config, rng)
        net.params["conv_out.weight"].data[:] = 0.05
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        loss = ad.mse(net.forward(x, rng.random((2, 1, 16, 16)), [4, 60]), ad.Tensor(x))
        ad.backward(loss)
        for name, p in net.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_float64_network_gradient_check(self, rng):
        cfg = UNetConfig.denoiser(base_channels=4, channel_multipliers=(1, 2), time_embed_dim=4, image_size=4)
        net = UNet(cfg, rng, dtype=np.float64)
        for p in net.params.values():
            p.data += 0.1 * rng.standard_normal(p.shape)
        x = rng.standard_normal((1, 1, 4, 4))
        m = rng.random((1, 1, 4, 4))
        target = rng.standard_normal((1, 1, 4, 4))
        w = net.params["down0.res.conv1.weight"]

        def value():
            with ad.no_grad():
                return ad.mse(net.forward(x, m, [7]), ad.Tensor(target)).item()

        ad.backward(ad.mse(net.forward(x, m, [7]), ad.Tensor(target)))
        analytic = w.grad.copy()
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(*w.shape):
            orig = w.data[idx]
            w.data[idx] = orig + 1e-5
            up = value()
            w.data[idx] = orig - 1e-5
            down = value()
            w.data[idx] = orig
            numeric[idx] = (up - down) / 2e-5
        rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
        assert rel < 1e-4

    def test_state_dict_round_trip(self, tiny_unet_config, rng):
        a = UNet(tiny_unet_config, rng)
        b = UNet(tiny_unet_config, np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


class TestSegmenter:
    def test_output_channels(self):
        cfg = UNetConfig.segmenter(4)
        assert cfg.out_channels == 4 and cfg.widths[-1] == 32

    def test_predict_and_features(self, rng):
        seg = Segmenter(UNet(UNetConfig.segmenter(4, image_size=16), rng))
        x = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        pred = seg.predict(x)
        assert pred.shape == (3, 16, 16) and pred.max() < 4
        assert seg.features(x).shape == (3, 32)
