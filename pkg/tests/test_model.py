import numpy as np
import pytest

from sepkit import autodiff as ad
from sepkit import dsp
from sepkit import model as mdl
from sepkit import training
from sepkit.errors import InvalidArgument
from conftest import tiny_config


class TestConfig:
    def test_defaults(self):
        cfg = mdl.ModelConfig()
        assert cfg.n_freq == 129
        assert cfg.stft_pad == 120
        assert cfg.mulca_hidden == 32

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidArgument, match="bogus"):
            mdl.ModelConfig.from_dict({"bogus": 1})

    def test_round_trip(self):
        cfg = tiny_config(conditioning="add")
        assert mdl.ModelConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [
        dict(n_basis=10, heads=4),
        dict(chunk=5),
        dict(enc_stride=4, stft_hop=8),
        dict(conditioning="fancy"),
    ])
    def test_invariants_enforced(self, bad):
        with pytest.raises(InvalidArgument):
            mdl.ModelConfig(**bad)

    def test_param_count_is_config_function(self):
        a = mdl.param_count(tiny_config())
        b = mdl.param_count(tiny_config())
        assert a == b
        assert mdl.param_count(tiny_config(conditioning="none")) < a


class TestFrameAlignment:
    @pytest.mark.parametrize("n_samples", [256, 1000, 8000, 16000])
    def test_encoder_equals_stft_frames(self, n_samples):
        cfg = mdl.ModelConfig()
        enc_frames = (n_samples - cfg.enc_kernel) // cfg.enc_stride + 1
        stft_frames = dsp.stft_frame_count(n_samples, cfg.stft_win,
                                           cfg.stft_hop, cfg.stft_pad)
        assert enc_frames == stft_frames

    def test_film_frame_mismatch_rejected(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        wc = ad.parameter(rng.uniform(-1, 1, (10, tiny_cfg.n_basis)))
        xm = ad.parameter(rng.uniform(0, 1, (tiny_cfg.n_freq, 11)))
        with pytest.raises(InvalidArgument):
            mdl.film_modulate(wc, xm, params, tiny_cfg)


class TestEncoder:
    def test_zero_signal(self, tiny_cfg):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        out = mdl.encode_time(np.zeros(200), params, tiny_cfg)
        assert np.all(out.value == 0.0)

    def test_frame_count_16000(self):
        cfg = mdl.ModelConfig(n_basis=8, heads=2, chunk=4, depth=0, units=1,
                              stft_win=32, d_ff=8)
        params = training.init_params(cfg, 0, dtype=np.float64)
        out = mdl.encode_time(np.zeros(16000), params, cfg)
        assert out.value.shape == (1999, 8)

    def test_nonnegative(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        out = mdl.encode_time(rng.uniform(-1, 1, 300), params, tiny_cfg)
        assert np.min(out.value) >= 0.0

    def test_too_short(self, tiny_cfg):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        with pytest.raises(InvalidArgument):
            mdl.forward(np.zeros(8), params, tiny_cfg)


class TestMulca:
    def test_zero_spectrogram(self, tiny_cfg):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        out = mdl.mulca(ad.parameter(np.zeros((tiny_cfg.n_freq, 9))),
                        params, tiny_cfg)
        assert np.all(out.value == 0.0)

    def test_weights_shared_across_frames(self, tiny_cfg, rng):
        # the applied gain is one scalar per frequency row
        params = training.init_params(tiny_cfg, 3, dtype=np.float64)
        xm = rng.uniform(0.1, 1.0, (tiny_cfg.n_freq, 12))
        out = mdl.mulca(ad.parameter(xm), params, tiny_cfg)
        gains = out.value / xm
        assert np.max(np.abs(gains - gains[:, :1])) < 1e-12
        assert np.all(gains > 0.0) and np.all(gains < 1.0)

    def test_zero_logits_give_half_gain(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        params["mulca.fcn.w2"].value[:] = 0.0
        params["mulca.fcn.b2"].value[:] = 0.0
        xm = rng.uniform(0.1, 1.0, (tiny_cfg.n_freq, 7))
        out = mdl.mulca(ad.parameter(xm), params, tiny_cfg)
        assert np.allclose(out.value, 0.5 * xm)


class TestConditioning:
    def test_film_zero_init_is_identity(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        wc = ad.parameter(rng.uniform(0, 1, (9, tiny_cfg.n_basis)))
        xm = ad.parameter(rng.uniform(0, 1, (tiny_cfg.n_freq, 9)))
        out = mdl.film_modulate(wc, xm, params, tiny_cfg)
        assert np.array_equal(out.value, wc.value)

    def test_film_hand_example(self):
        cfg = tiny_config()
        params = training.init_params(cfg, 0, dtype=np.float64)
        # force f1 -> 2 and f2 -> 3 on an all-ones spectrogram column
        params["film.f1.w"].value[:] = 0.0
        params["film.f1.b"].value[:] = 2.0
        params["film.f2.w"].value[:] = 0.0
        params["film.f2.b"].value[:] = 3.0
        wc = ad.parameter(np.ones((1, cfg.n_basis)))
        xm = ad.parameter(np.ones((cfg.n_freq, 1)))
        out = mdl.film_modulate(wc, xm, params, cfg)
        assert np.allclose(out.value, 6.0)  # 1 + 2*1 + 3

    def test_variant_none_is_passthrough(self, rng):
        cfg = tiny_config(conditioning="none")
        params = training.init_params(cfg, 0, dtype=np.float64)
        wc = ad.parameter(rng.uniform(0, 1, (6, cfg.n_basis)))
        assert mdl.condition(wc, None, params, cfg) is wc

    def test_variant_add_zero_projection(self, rng):
        cfg = tiny_config(conditioning="add")
        params = training.init_params(cfg, 0, dtype=np.float64)
        params["cond.proj.w"].value[:] = 0.0
        params["cond.proj.b"].value[:] = 0.0
        wc = ad.parameter(rng.uniform(0, 1, (6, cfg.n_basis)))
        xm = ad.parameter(rng.uniform(0, 1, (cfg.n_freq, 6)))
        assert np.array_equal(mdl.condition(wc, xm, params, cfg).value,
                              wc.value)

    @pytest.mark.parametrize("variant", mdl.CONDITIONING_VARIANTS)
    def test_all_variants_preserve_shape(self, variant, rng):
        cfg = tiny_config(conditioning=variant)
        params = training.init_params(cfg, 0, dtype=np.float64)
        wc = ad.parameter(rng.uniform(0, 1, (6, cfg.n_basis)))
        xm = ad.parameter(rng.uniform(0, 1, (cfg.n_freq, 6)))
        out = mdl.condition(wc, xm, params, cfg)
        assert out.value.shape == (6, cfg.n_basis)


class TestChunking:
    def test_hand_enumeration_l6_chunk4(self, rng):
        w = ad.parameter(rng.uniform(-1, 1, (6, 3)))
        chunks, n_seg = mdl.chunk_features(w, 4)
        assert n_seg == 3
        assert chunks.value.shape == (3, 4, 3)
        # segments start at frames 0, 2, 4; the tail is zero-padded
        assert np.array_equal(chunks.value[0], w.value[0:4])
        assert np.array_equal(chunks.value[1], w.value[2:6])
        assert np.array_equal(chunks.value[2][:2], w.value[4:6])
        assert np.all(chunks.value[2][2:] == 0.0)

    def test_single_chunk_plus_tail(self, rng):
        w = ad.parameter(rng.uniform(-1, 1, (4, 2)))
        chunks, n_seg = mdl.chunk_features(w, 4)
        assert n_seg == 2  # one full segment plus the padding tail

    def test_round_trip_identity(self, rng):
        for n_frames in (4, 6, 11, 50):
            w = ad.parameter(rng.uniform(-1, 1, (n_frames, 5)))
            chunks, _ = mdl.chunk_features(w, 4)
            back = mdl.overlap_add_features(chunks, 4, n_frames)
            assert np.max(np.abs(back.value - w.value)) < 1e-6

    def test_chunk_too_small(self):
        with pytest.raises(InvalidArgument):
            mdl.chunk_plan(10, 1)


class TestDualPathStack:
    @pytest.mark.parametrize("depth", [0, 1, 2])
    @pytest.mark.parametrize("units", [1, 2, 4])
    def test_shape_preserved(self, depth, units, rng):
        cfg = tiny_config(depth=depth, units=units)
        params = training.init_params(cfg, 0, dtype=np.float64)
        x = ad.parameter(rng.uniform(-1, 1, (3, cfg.chunk, cfg.n_basis)))
        out = mdl.dual_path_stack(x, params, cfg)
        assert out.value.shape == x.value.shape

    def test_depth_zero_identity(self, rng):
        cfg = tiny_config(depth=0)
        params = training.init_params(cfg, 0, dtype=np.float64)
        x = ad.parameter(rng.uniform(-1, 1, (3, cfg.chunk, cfg.n_basis)))
        out = mdl.dual_path_stack(x, params, cfg)
        assert out is x

    def test_single_chunk_inter_attention_collapses(self, rng):
        # with S=1 the inter stage attends over one position: its MHA
        # output is value-path only, independent of Q/K weights
        cfg = tiny_config(depth=1, units=1)
        params = training.init_params(cfg, 0, dtype=np.float64)
        x = ad.parameter(rng.uniform(-1, 1, (1, cfg.chunk, cfg.n_basis)))
        out1 = mdl.dual_path_stack(x, params, cfg).value
        params["dp0.inter0.attn.wq"].value[:] = rng.uniform(-1, 1, (8, 8))
        params["dp0.inter0.attn.wk"].value[:] = rng.uniform(-1, 1, (8, 8))
        out2 = mdl.dual_path_stack(x, params, cfg).value
        assert np.allclose(out1, out2, atol=1e-12)


class TestMaskAndDecode:
    def test_mask_nonnegative(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 7, dtype=np.float64)
        y = ad.parameter(rng.uniform(-2, 2, (3, tiny_cfg.chunk,
                                             tiny_cfg.n_basis)))
        masks = mdl.mask_head(y, params, tiny_cfg, n_frames=6)
        assert masks.value.shape == (2, 6, tiny_cfg.n_basis)
        assert np.min(masks.value) >= 0.0

    def test_single_source_head(self, rng):
        cfg = tiny_config(n_sources=1)
        params = training.init_params(cfg, 0, dtype=np.float64)
        ests = mdl.separate(rng.uniform(-0.5, 0.5, 400), params, cfg)
        assert len(ests) == 1

    def test_decode_zero_mask(self, tiny_cfg):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        out = mdl.decode(ad.parameter(np.zeros((10, tiny_cfg.n_basis))),
                         params, tiny_cfg)
        assert np.all(out.value == 0.0)

    def test_decode_length_formula(self, tiny_cfg):
        params = training.init_params(tiny_cfg, 0, dtype=np.float64)
        out = mdl.decode(ad.parameter(np.zeros((1999, tiny_cfg.n_basis))),
                         params, tiny_cfg)
        assert out.value.shape == (16000,)

    def test_decode_linearity(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 2, dtype=np.float64)
        mw = rng.uniform(-1, 1, (10, tiny_cfg.n_basis))
        a = mdl.decode(ad.parameter(mw), params, tiny_cfg).value
        b = mdl.decode(ad.parameter(2.0 * mw), params, tiny_cfg).value
        assert np.allclose(b, 2.0 * a)


class TestSeparate:
    def test_deterministic(self, tiny_cfg, rng):
        params = training.init_params(tiny_cfg, 5, dtype=np.float64)
        x = rng.uniform(-0.5, 0.5, 500)
        a = mdl.separate(x, params, tiny_cfg)
        b = mdl.separate(x, params, tiny_cfg)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea, eb)

    def test_smoke_shapes_and_finiteness(self, rng):
        cfg = tiny_config()
        params = training.init_params(cfg, 11, dtype=np.float64)
        x = rng.uniform(-0.5, 0.5, 4000)
        ests = mdl.separate(x, params, cfg)
        t_use = mdl.usable_length(4000, cfg)
        assert len(ests) == cfg.n_sources
        for e in ests:
            assert e.shape == (t_use,)
            assert np.all(np.isfinite(e))

    def test_film_zero_init_matches_none_variant(self, rng):
        cfg_film = tiny_config(conditioning="film")
        cfg_none = tiny_config(conditioning="none")
        params = training.init_params(cfg_film, 9, dtype=np.float64)
        x = rng.uniform(-0.5, 0.5, 600).astype(np.float64)
        a = mdl.separate(x, params, cfg_film)
        b = mdl.separate(x, params, cfg_none)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea, eb)

    def test_end_to_end_gradient(self, rng):
        cfg = tiny_config()
        params = training.init_params(cfg, 1, dtype=np.float64)
        x = rng.uniform(-0.5, 0.5, 200)
        tensors = [params[n] for n in sorted(params)]

        def f(*_):
            return ad.tsum(mdl.forward(x, params, cfg))

        err = ad.finite_difference_check(f, tensors, max_coords=3,
                                         rng=np.random.default_rng(0))
        assert err < 1e-3
