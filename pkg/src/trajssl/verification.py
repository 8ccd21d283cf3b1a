"""Finite-difference verification suites for every differentiable component.

All suites run in 64-bit and compare backpropagated gradients against the
central-difference oracle. The CLI ``gradcheck`` command and the acceptance
tests both run them.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .encoder import ReferenceEncoderConfig, encode, featurize_window, init_encoder, stack_windows
from .gradcheck import GradCheckResult, check_store_gradients
from .layers import apply_batch_norm, apply_layer_norm, apply_linear, attention, init_linear, init_norm
from .optim import EmaSchedule, ParamStore
from .pretext import (PretrainSettings, apply_decoder, apply_predictor, apply_projector,
                      init_heads, make_momentum_store, prepare_batch, pretrain_forward,
                      recon_width)
from .finetune import build_model_store, finetune_forward, prepare_downstream_batch
from .sampling import DataBank, assemble_batch, sample_pair
from .scenario import StandardProfile, standardize_scenario
from .synth import DatasetProfile, gen_scenario, rng_stream

TOLERANCE = 1e-5

TOY_PROFILE = DatasetProfile(
    name="toy", sample_rate=10.0, T_h=4, T_f=6, map_resolution=2.0,
    agent_count_range=(3, 3), dropout_prob=0.0,
)
TOY_STANDARD = StandardProfile(sample_rate=10.0, T_h=4, T_f=6, map_resolution=2.0)
TOY_ENCODER = ReferenceEncoderConfig(embed_dim=8, hidden_dim=8, k_map=1, attention_radius=100.0)


def toy_scenarios(n: int, seed: int = 123):
    return [standardize_scenario(gen_scenario(TOY_PROFILE, seed, i), TOY_STANDARD) for i in range(n)]


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    c = rng.standard_normal(t.data.shape)
    return (t * c).sum()


def check_linear() -> GradCheckResult:
    rng = rng_stream(1, 1)
    store = ParamStore(np.float64)
    init_linear(store, "fc", 4, 3, rng)
    store.add("x", rng.standard_normal((5, 4)))
    c = rng.standard_normal((5, 3))

    def loss():
        return float((apply_linear(store, "fc", store.leaf("x")) * c).sum().item())

    def backward():
        (apply_linear(store, "fc", store.leaf("x")) * c).sum().backward()

    return check_store_gradients(loss, backward, store, "linear", TOLERANCE)


def check_batch_norm() -> GradCheckResult:
    rng = rng_stream(1, 2)
    store = ParamStore(np.float64)
    init_norm(store, "bn", 4, running=True)
    store.add("x", rng.standard_normal((8, 4)))
    c = rng.standard_normal((8, 4))

    def loss():
        return float((apply_batch_norm(store, "bn", store.leaf("x"), train=True) * c).sum().item())

    def backward():
        (apply_batch_norm(store, "bn", store.leaf("x"), train=True) * c).sum().backward()

    return check_store_gradients(loss, backward, store, "batch_norm", TOLERANCE)


def check_layer_norm() -> GradCheckResult:
    rng = rng_stream(1, 3)
    store = ParamStore(np.float64)
    init_norm(store, "ln", 6)
    store.add("x", rng.standard_normal((5, 6)))
    c = rng.standard_normal((5, 6))

    def loss():
        return float((apply_layer_norm(store, "ln", store.leaf("x")) * c).sum().item())

    def backward():
        (apply_layer_norm(store, "ln", store.leaf("x")) * c).sum().backward()

    return check_store_gradients(loss, backward, store, "layer_norm", TOLERANCE)


def check_attention() -> GradCheckResult:
    rng = rng_stream(1, 4)
    store = ParamStore(np.float64)
    store.add("q", rng.standard_normal((3, 4)))
    store.add("k", rng.standard_normal((3, 4)))
    store.add("v", rng.standard_normal((3, 4)))
    c = rng.standard_normal((3, 4))

    def out():
        return attention(store.leaf("q"), store.leaf("k"), store.leaf("v"))

    return check_store_gradients(
        lambda: float((out() * c).sum().item()),
        lambda: (out() * c).sum().backward(),
        store, "attention", TOLERANCE,
    )


def _encoder_fixture():
    rng = rng_stream(1, 5)
    store = ParamStore(np.float64)
    init_encoder(store, TOY_ENCODER, rng)
    s = toy_scenarios(1)[0]
    rows = np.flatnonzero(s.valid.all(axis=1))[:3]
    wf = featurize_window(s, 0, TOY_STANDARD.T_h, rows, TOY_ENCODER.k_map)
    inp = stack_windows([wf])
    c = rng.standard_normal((rows.size, TOY_ENCODER.embed_dim))
    return store, inp, c


def check_encoder() -> GradCheckResult:
    store, inp, c = _encoder_fixture()

    def loss():
        return float((encode(TOY_ENCODER, store, inp) * c).sum().item())

    def backward():
        (encode(TOY_ENCODER, store, inp) * c).sum().backward()

    return check_store_gradients(loss, backward, store, "encoder", TOLERANCE)


def _head_check(head: str, apply_fn) -> GradCheckResult:
    rng = rng_stream(1, 6)
    store = ParamStore(np.float64)
    init_heads(store, 8, 4, rng)
    store.add("z", rng.standard_normal((3, 8)))
    probe = apply_fn(store, store.leaf("z"))
    c = rng.standard_normal(probe.data.shape)

    def loss():
        return float((apply_fn(store, store.leaf("z")) * c).sum().item())

    def backward():
        (apply_fn(store, store.leaf("z")) * c).sum().backward()

    names = [n for n, p in store.trainable_items() if n.startswith(head) or n == "z"]
    return check_store_gradients(loss, backward, store, f"head_{head}", TOLERANCE, names=names)


def check_projector() -> GradCheckResult:
    return _head_check("projector", lambda st, z: apply_projector(st, z, train=True))


def check_predictor() -> GradCheckResult:
    return _head_check("predictor", lambda st, z: apply_predictor(st, z, train=True))


def check_decoder() -> GradCheckResult:
    return _head_check("decoder", apply_decoder)


def composite_fixture(tasks: str = "both"):
    """3-agent toy batch wired through the full two-branch objective."""
    scenarios = toy_scenarios(2)
    bank = DataBank(scenarios=scenarios, standard=TOY_STANDARD)
    rng = rng_stream(7, 8)
    pairs = [sample_pair(s, TOY_STANDARD.T_h, rng) for s in bank.scenarios]
    batch = assemble_batch(pairs)

    settings = PretrainSettings(enc_cfg=TOY_ENCODER, tasks=tasks)
    prep = prepare_batch(batch, TOY_ENCODER, settings.recon_target)

    init_rng = rng_stream(7, 9)
    online = ParamStore(np.float64)
    init_encoder(online, TOY_ENCODER, init_rng)
    init_heads(online, TOY_ENCODER.embed_dim,
               recon_width(settings.recon_target, TOY_STANDARD.T, TOY_STANDARD.T_h), init_rng)
    # kick parameters off their symmetric init so winners/signs are generic
    kick = rng_stream(7, 10)
    for _, p in online.trainable_items():
        p.value += 0.05 * kick.standard_normal(p.value.shape)
    momentum = make_momentum_store(online)
    # decorrelate the two branches so the contrastive loss is non-degenerate
    for _, p in momentum.trainable_items():
        p.value += 0.05 * kick.standard_normal(p.value.shape)
    return prep, online, momentum, settings


def check_composite() -> GradCheckResult:
    prep, online, momentum, settings = composite_fixture()

    def loss():
        val, _, _ = pretrain_forward(prep, online, momentum, settings)
        return float(val.item())

    def backward():
        val, _, _ = pretrain_forward(prep, online, momentum, settings)
        val.backward()

    return check_store_gradients(loss, backward, online, "composite_ssl", TOLERANCE)


def check_finetune_objective() -> GradCheckResult:
    scenarios = toy_scenarios(2, seed=321)
    store = build_model_store(TOY_ENCODER, 3, TOY_STANDARD.T_f, seed=5, dtype=np.float64)
    kick = rng_stream(5, 11)
    for _, p in store.trainable_items():
        p.value += 0.05 * kick.standard_normal(p.value.shape)
    prep = prepare_downstream_batch(scenarios, TOY_ENCODER, TOY_STANDARD.T_h)

    def loss():
        val, _, _ = finetune_forward(prep, store, TOY_ENCODER, 3, TOY_STANDARD.T_f)
        return float(val.item())

    def backward():
        val, _, _ = finetune_forward(prep, store, TOY_ENCODER, 3, TOY_STANDARD.T_f)
        val.backward()

    return check_store_gradients(loss, backward, store, "finetune_objective", TOLERANCE)


ALL_SUITES = [
    check_linear,
    check_batch_norm,
    check_layer_norm,
    check_attention,
    check_encoder,
    check_projector,
    check_predictor,
    check_decoder,
    check_composite,
    check_finetune_objective,
]


def run_all_gradchecks() -> list[GradCheckResult]:
    return [fn() for fn in ALL_SUITES]
