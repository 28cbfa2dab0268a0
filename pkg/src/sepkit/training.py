"""Training loop: Adam with gradient clipping, permutation-invariant
SI-SDR objective, deterministic seeding, and binary checkpoints.

Determinism contract: (seed, config, dataset) fully determine the
parameter trajectory; checkpoints carry the RNG and optimizer state so a
resumed run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .dsp import wav_read
from .errors import FormatError, InvalidArgument, NumericError
from .objectives import improvement, si_sdr, upit, upit_loss

GRAD_CLIP = 5.0


def init_params(cfg, seed, dtype=np.float32):
    """Uniform(+-1/sqrt(fan_in)) weights, unit LN gains, zero offsets.

    FiLM affines start at zero so the conditioned model begins exactly at
    the unconditioned one. Deterministic in seed (parameters are drawn in
    sorted-name order).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(mdl.param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            value = np.ones(shape, dtype)
        elif leaf == "offset" or leaf.startswith("b") or \
                name.startswith("film."):
            value = np.zeros(shape, dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = ad.parameter(value, name=name)
    return params


@dataclass
class OptimizerState:
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_gradients(grads, max_norm=GRAD_CLIP):
    """Scale all gradients so the global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params, grads, state: OptimizerState):
    """In-place Adam update with bias correction, after global norm clip."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    grads, _ = clip_gradients(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(p.value.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def training_step(params, cfg, mix_samples, ref_samples, state):
    """One forward/backward/update on a single mixture. Returns loss dB."""
    dtype = next(iter(params.values())).value.dtype
    ad.zero_grads(params.values())
    with ad.Tape() as tape:
        est = mdl.forward(np.asarray(mix_samples, dtype=dtype), params, cfg)
        t_use = est.value.shape[1]
        ests = [ad.reshape(ad.narrow(est, 0, k, 1), (t_use,))
                for k in range(cfg.n_sources)]
        refs = [np.asarray(r[:t_use], dtype=dtype) for r in ref_samples]
        loss, _ = upit_loss(ests, refs)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite training loss")
    ad.backward(tape, loss)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
             for name, p in params.items()}
    adam_step(params, grads, state)
    return float(loss.value)


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------

def load_items(records, expected_rate=None):
    """Materialize index records as (name, mix, [refs]) sample arrays."""
    items = []
    for rec in records:
        mix = wav_read(rec["mix"])
        if expected_rate and mix.sample_rate != expected_rate:
            raise FormatError(f"{rec['mix']}: sample rate {mix.sample_rate} "
                              f"!= required {expected_rate}")
        refs = [wav_read(p).samples for p in rec["sources"]]
        items.append((rec["name"], mix.samples, refs))
    return items


def validation_si_sdri(params, cfg, items):
    """Mean permutation-resolved SI-SDR improvement over `items`."""
    scores = []
    for _, mix_s, refs in items:
        ests = mdl.separate(mix_s, params, cfg)
        t_use = len(ests[0])
        refs_t = [r[:t_use] for r in refs]
        _, assignment = upit(ests, refs_t)
        mix_t = mix_s[:t_use]
        vals = [improvement(ests[i], refs_t[assignment.mapping[i]], mix_t,
                            si_sdr) for i in range(cfg.n_sources)]
        scores.append(float(np.mean(vals)))
    return float(np.mean(scores)) if scores else float("nan")


def train(cfg, items, epochs, seed, out_dir=None, val_items=None,
          max_steps=None, state=None, params=None, rng=None,
          start_epoch=0, log_fn=None):
    """Seeded training over (name, mix, refs) items, batch size 1.

    Shuffles each epoch with the run RNG, logs per-epoch mean loss and
    validation SI-SDRi, tracks the best-validation checkpoint when
    out_dir is given. All of (params, state, rng) may be passed in to
    resume. Returns (params, state, log_entries).
    """
    if not items:
        raise InvalidArgument("empty training dataset")
    if params is None:
        params = init_params(cfg, seed)
    if state is None:
        state = OptimizerState()
    if rng is None:
        rng = np.random.default_rng(seed + 1)
    log_entries = []
    best_val = -np.inf
    for epoch in range(start_epoch, epochs):
        order = rng.permutation(len(items))
        losses = []
        for idx in order:
            name, mix_s, refs = items[idx]
            try:
                losses.append(training_step(params, cfg, mix_s, refs, state))
            except NumericError as exc:
                raise NumericError(f"{exc} (item {name!r})") from exc
            if max_steps is not None and state.step >= max_steps:
                break
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                 "steps": state.step}
        if val_items:
            entry["val_si_sdri"] = validation_si_sdri(params, cfg, val_items)
        log_entries.append(entry)
        if log_fn:
            log_fn(entry)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "last"), cfg, params, state,
                            epoch + 1, rng)
            val = entry.get("val_si_sdri", -entry["mean_loss"])
            if val > best_val:
                best_val = val
                save_checkpoint(os.path.join(out_dir, "best"), cfg, params,
                                state, epoch + 1, rng)
        if max_steps is not None and state.step >= max_steps:
            break
    if out_dir:
        with open(os.path.join(out_dir, "metrics.jsonl"), "a") as fh:
            for entry in log_entries:
                fh.write(json.dumps(entry) + "\n")
    return params, state, log_entries


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, cfg, params, state, epoch, rng):
    """Write header.json + params.bin (+ optimizer.bin) under ckpt_dir.

    The blob is a little-endian concatenation of the raw parameter arrays
    in sorted-name order; the header records name -> shape/offset.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    names = sorted(params)
    dtype = params[names[0]].value.dtype
    table, offset = [], 0
    for name in names:
        arr = params[name].value
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": cfg.to_dict(),
        "epoch": epoch,
        "dtype": np.dtype(dtype).str,  # little-endian code, e.g. '<f4'
        "params": table,
        "optimizer": {"lr": state.lr, "beta1": state.beta1,
                      "beta2": state.beta2, "eps": state.eps,
                      "step": state.step},
        "rng_state": rng.bit_generator.state,
    }
    with open(os.path.join(ckpt_dir, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2)
    blob = np.concatenate([params[n].value.reshape(-1).astype(dtype)
                           for n in names])
    blob.astype(np.dtype(dtype).newbyteorder("<")).tofile(
        os.path.join(ckpt_dir, "params.bin"))
    if state.m:
        opt = np.concatenate(
            [state.m[n].reshape(-1) for n in names if n in state.m]
            + [state.v[n].reshape(-1) for n in names if n in state.v])
        opt.astype(np.dtype(dtype).newbyteorder("<")).tofile(
            os.path.join(ckpt_dir, "optimizer.bin"))


def load_checkpoint(ckpt_dir):
    """Inverse of save_checkpoint; validates shapes against the config.

    Returns (cfg, params, state, epoch, rng).
    """
    header_path = os.path.join(ckpt_dir, "header.json")
    try:
        with open(header_path) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header {header_path}: {exc}") \
            from exc
    cfg = mdl.ModelConfig.from_dict(header["config"])
    expected = mdl.param_shapes(cfg)
    dtype = np.dtype(header["dtype"])
    blob = np.fromfile(os.path.join(ckpt_dir, "params.bin"), dtype=dtype)
    total = sum(int(np.prod(e["shape"])) for e in header["params"])
    if blob.size != total:
        raise FormatError(f"truncated parameter blob in {ckpt_dir}: "
                          f"{blob.size} values, expected {total}")
    if set(e["name"] for e in header["params"]) != set(expected):
        raise FormatError(f"checkpoint parameter set does not match config "
                          f"in {ckpt_dir}")
    params = {}
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise FormatError(f"shape mismatch for {name!r}: checkpoint "
                              f"{shape}, config requires {expected[name]}")
        lo = entry["offset"]
        params[name] = ad.parameter(
            blob[lo:lo + int(np.prod(shape))].reshape(shape).copy(), name=name)
    opt = header["optimizer"]
    state = OptimizerState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"],
                           eps=opt["eps"], step=opt["step"])
    opt_path = os.path.join(ckpt_dir, "optimizer.bin")
    if os.path.exists(opt_path):
        names = sorted(params)
        moments = np.fromfile(opt_path, dtype=dtype)
        if moments.size != 2 * total:
            raise FormatError(f"truncated optimizer blob in {ckpt_dir}")
        half = total
        lo = 0
        for n in names:
            size = params[n].value.size
            state.m[n] = moments[lo:lo + size].reshape(params[n].value.shape).copy()
            state.v[n] = moments[half + lo:half + lo + size].reshape(
                params[n].value.shape).copy()
            lo += size
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return cfg, params, state, header["epoch"], rng
