import os

import numpy as np
import pytest

from sepkit import autodiff as ad
from sepkit import datagen as dg
from sepkit import model as mdl
from sepkit import training
from sepkit.errors import FormatError, NumericError
from sepkit.objectives import upit
from conftest import tiny_config


def make_items(n=4, duration=0.1):
    items = []
    for i in range(n):
        recipe = dg.MixtureRecipe(
            sources=[dg.SourceSpec(100 + 10 * i, 130 + 10 * i, 2, 0.0,
                                   duration, seed=2 * i),
                     dg.SourceSpec(220 + 10 * i, 200 + 10 * i, 2, 3.0,
                                   duration, seed=2 * i + 1)],
            seed=i)
        mix_w, refs = dg.mix(recipe)
        items.append((f"m{i}", mix_w.samples, [r.samples for r in refs]))
    return items


def clone_params(params):
    return {k: v.value.copy() for k, v in params.items()}


def params_equal(a, b):
    return all(np.array_equal(a[k].value, b[k].value) for k in a)


class TestInitParams:
    def test_film_params_start_at_zero(self):
        params = training.init_params(tiny_config(), 0)
        for name in ("film.f1.w", "film.f1.b", "film.f2.w", "film.f2.b"):
            assert np.all(params[name].value == 0.0)

    def test_same_seed_identical(self):
        a = training.init_params(tiny_config(), 3)
        b = training.init_params(tiny_config(), 3)
        assert params_equal(a, b)
        c = training.init_params(tiny_config(), 4)
        assert not params_equal(a, c)

    def test_fan_in_bound(self):
        cfg = tiny_config()
        params = training.init_params(cfg, 1)
        for name, shape in mdl.param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain" or leaf.startswith("b") or leaf == "offset" \
                    or name.startswith("film."):
                continue
            fan_in = int(np.prod(shape[1:]))
            assert np.max(np.abs(params[name].value)) <= 1.0 / np.sqrt(fan_in)

    def test_norm_affines(self):
        params = training.init_params(tiny_config(), 0)
        assert np.all(params["prenorm.gain"].value == 1.0)
        assert np.all(params["prenorm.offset"].value == 0.0)


class TestAdam:
    def make(self, rng):
        params = {"w": ad.parameter(rng.uniform(-1, 1, (4, 3)).astype(np.float64)),
                  "b": ad.parameter(np.zeros(3))}
        return params, training.OptimizerState()

    def test_zero_gradients_no_change(self, rng):
        params, state = self.make(rng)
        before = clone_params(params)
        training.adam_step(params, {k: np.zeros_like(p.value)
                                    for k, p in params.items()}, state)
        assert np.array_equal(params["w"].value, before["w"])

    def test_first_step_magnitude(self, rng):
        params, state = self.make(rng)
        g = np.full((4, 3), 0.01)
        before = params["w"].value.copy()
        training.adam_step(params, {"w": g}, state)
        delta = params["w"].value - before
        # bias-corrected first step: |delta| ~ lr, direction -sign(g)
        assert np.all(delta < 0)
        assert np.allclose(np.abs(delta), state.lr, rtol=1e-3)

    def test_clipping_bounds_global_norm(self, rng):
        grads = {"w": rng.uniform(-1, 1, (100,)) * 50.0}
        clipped, norm = training.clip_gradients(grads)
        assert norm > training.GRAD_CLIP
        post = np.linalg.norm(clipped["w"])
        assert post <= training.GRAD_CLIP + 1e-6

    def test_non_finite_gradient_names_parameter(self, rng):
        params, state = self.make(rng)
        bad = {"w": np.full((4, 3), np.nan)}
        with pytest.raises(NumericError, match="w"):
            training.adam_step(params, bad, state)

    def test_determinism_ten_steps(self, rng):
        cfg = tiny_config()
        items = make_items(2)

        def run():
            params = training.init_params(cfg, 7)
            state = training.OptimizerState()
            for step in range(10):
                _, m, refs = items[step % 2]
                training.training_step(params, cfg, m, refs, state)
            return params

        assert params_equal(run(), run())


class TestTrainLoop:
    def test_epochs_zero(self):
        cfg = tiny_config()
        params, state, log = training.train(cfg, make_items(2), epochs=0,
                                            seed=0)
        assert log == []
        assert params_equal(params, training.init_params(cfg, 0))

    def test_loss_decreases_smoke(self):
        # full-batch loss after each of the first 50 updates: nearly monotone
        cfg = tiny_config()
        items = make_items(4)
        params = training.init_params(cfg, 0)
        state = training.OptimizerState()

        def full_loss():
            total = 0.0
            for _, m, refs in items:
                ests = mdl.separate(m, params, cfg)
                t = len(ests[0])
                loss, _ = upit(ests, [r[:t] for r in refs])
                total += loss
            return total / len(items)

        losses = [full_loss()]
        decreases = 0
        for step in range(50):
            _, m, refs = items[step % 4]
            training.training_step(params, cfg, m, refs, state)
            losses.append(full_loss())
            if losses[-1] < losses[-2]:
                decreases += 1
        assert decreases >= 45

    def test_post_clip_norm_invariant(self, rng):
        # every step's applied gradient obeys the global-norm bound
        cfg = tiny_config()
        _, m, refs = make_items(1)[0]
        params = training.init_params(cfg, 0)
        state = training.OptimizerState()
        dtype = np.float32
        for _ in range(3):
            ad.zero_grads(params.values())
            with ad.Tape() as tape:
                est = mdl.forward(m.astype(dtype), params, cfg)
                t = est.value.shape[1]
                ests = [ad.reshape(ad.narrow(est, 0, k, 1), (t,))
                        for k in range(cfg.n_sources)]
                from sepkit.objectives import upit_loss
                loss, _ = upit_loss(ests, [r[:t].astype(dtype) for r in refs])
            ad.backward(tape, loss)
            grads = {n: (p.grad if p.grad is not None
                         else np.zeros_like(p.value))
                     for n, p in params.items()}
            clipped, _ = training.clip_gradients(grads)
            total = sum(float(np.sum(g * g)) for g in clipped.values())
            assert np.sqrt(total) <= training.GRAD_CLIP + 1e-6
            training.adam_step(params, grads, state)

    def test_two_seeded_runs_bit_identical(self, tmp_path):
        cfg = tiny_config()
        items = make_items(3)

        def run(out):
            return training.train(cfg, items, epochs=5, seed=11,
                                  out_dir=str(out))

        pa, _, la = run(tmp_path / "a")
        pb, _, lb = run(tmp_path / "b")
        assert params_equal(pa, pb)
        assert la == lb
        blob_a = (tmp_path / "a/last/params.bin").read_bytes()
        blob_b = (tmp_path / "b/last/params.bin").read_bytes()
        assert blob_a == blob_b

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config()
        items = make_items(3)
        # uninterrupted: 6 epochs
        pa, _, _ = training.train(cfg, items, epochs=6, seed=5,
                                  out_dir=str(tmp_path / "full"))
        # interrupted at 3 epochs, then resumed
        training.train(cfg, items, epochs=3, seed=5,
                       out_dir=str(tmp_path / "half"))
        cfg2, params, state, epoch, rng = training.load_checkpoint(
            str(tmp_path / "half/last"))
        assert epoch == 3
        pb, _, _ = training.train(cfg2, items, epochs=6, seed=5,
                                  out_dir=str(tmp_path / "resumed"),
                                  params=params, state=state, rng=rng,
                                  start_epoch=epoch)
        assert params_equal(pa, pb)

    def test_empty_dataset_rejected(self):
        with pytest.raises(Exception):
            training.train(tiny_config(), [], epochs=1, seed=0)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = tiny_config()
        items = make_items(2)
        params, state, _ = training.train(cfg, items, epochs=1, seed=2)
        rng = np.random.default_rng(0)
        training.save_checkpoint(tmp_path / "a", cfg, params, state, 1, rng)
        cfg2, p2, s2, ep, rng2 = training.load_checkpoint(tmp_path / "a")
        training.save_checkpoint(tmp_path / "b", cfg2, p2, s2, ep, rng2)
        for name in ("params.bin", "optimizer.bin", "header.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_config_mismatch_detected(self, tmp_path):
        import json
        cfg = tiny_config()
        params = training.init_params(cfg, 0)
        training.save_checkpoint(tmp_path / "c", cfg,
                                 params, training.OptimizerState(), 0,
                                 np.random.default_rng(0))
        header_path = tmp_path / "c" / "header.json"
        header = json.loads(header_path.read_text())
        header["config"]["n_basis"] = 16
        header_path.write_text(json.dumps(header))
        with pytest.raises(FormatError):
            training.load_checkpoint(tmp_path / "c")

    def test_truncated_blob_detected(self, tmp_path):
        cfg = tiny_config()
        params = training.init_params(cfg, 0)
        training.save_checkpoint(tmp_path / "c", cfg, params,
                                 training.OptimizerState(), 0,
                                 np.random.default_rng(0))
        blob = (tmp_path / "c" / "params.bin").read_bytes()
        (tmp_path / "c" / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            training.load_checkpoint(tmp_path / "c")

    def test_header_parameter_audit(self, tmp_path):
        import json
        cfg = tiny_config()
        params = training.init_params(cfg, 0)
        training.save_checkpoint(tmp_path / "c", cfg, params,
                                 training.OptimizerState(), 0,
                                 np.random.default_rng(0))
        header = json.loads((tmp_path / "c" / "header.json").read_text())
        total = sum(int(np.prod(e["shape"])) for e in header["params"])
        assert total == mdl.param_count(cfg)

    def test_non_finite_loss_names_item(self):
        cfg = tiny_config()
        name, m, refs = make_items(1)[0]
        params = training.init_params(cfg, 0)
        params["enc.kernels"].value[:] = np.nan
        with pytest.raises(NumericError, match="m0"):
            training.train(cfg, [(name, m, refs)], epochs=1, seed=0,
                           params=params)
