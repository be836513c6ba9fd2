"""Finite-difference verification of all loss gradients on toy networks.

Each case freezes a random minibatch and checks analytic gradients of one
loss term (base discriminator/generator losses per family, plus the four
consistency terms) against central differences on a small 2-layer model.
Configurations that land near hinge or leaky-relu kinks are resampled, since
central differences are meaningless across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Array, CheckReport, Tensor, finite_diff_check
from .losses import base_losses, consistency_l2, generator_loss
from .models import ModelParams, NetworkSpec, init_params, network_forward

LATENT_DIM = 3
IMAGE_DIM = 4
HIDDEN = (4,)
BATCH = 4
KINK_MARGIN = 1e-3


def _toy_specs() -> Tuple[NetworkSpec, NetworkSpec]:
    g_spec = NetworkSpec(LATENT_DIM, HIDDEN, IMAGE_DIM,
                         output_activation="tanh")
    d_spec = NetworkSpec(IMAGE_DIM, HIDDEN, 1)
    return g_spec, d_spec


def _forward_named(spec: NetworkSpec, named: Dict[str, Tensor],
                   x: Array) -> Tensor:
    n = len(spec.layer_dims())
    weights = [named[f"w{i}"] for i in range(n)]
    biases = [named[f"b{i}"] for i in range(n)]
    return network_forward(spec, weights, biases, Tensor(x))


def _preactivation_margin(params: ModelParams, x: Array) -> float:
    """Smallest |pre-activation| over hidden layers (kink distance)."""
    h = x
    margin = np.inf
    dims = params.spec.layer_dims()
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        if i < len(dims) - 1:
            margin = min(margin, float(np.min(np.abs(pre))))
            h = np.where(pre > 0, pre, params.spec.leaky_alpha * pre)
        else:
            h = pre
    return margin


@dataclass
class CaseResult:
    name: str
    report: CheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _case_builders() -> Dict[str, Callable]:
    """Map case name -> builder(rng) -> (f, params) for finite_diff_check."""
    g_spec, d_spec = _toy_specs()

    def sample_nets(rng):
        pg = init_params(g_spec, rng)
        pd = init_params(d_spec, rng)
        z = rng.standard_normal((BATCH, LATENT_DIM))
        x = np.clip(rng.standard_normal((BATCH, IMAGE_DIM)), -0.99, 0.99)
        return pg, pd, z, x

    def forward_plain(params, inp):
        named = {k: Tensor(v) for k, v in params.named_arrays().items()}
        return _forward_named(params.spec, named, inp).data

    def clean_sample(rng, needs_hinge_margin):
        # Resample until every pre-activation and hinge margin clears the
        # kink guard; the loop terminates fast for these tiny nets.
        for _ in range(200):
            pg, pd, z, x = sample_nets(rng)
            fake = forward_plain(pg, z)
            ok = (_preactivation_margin(pd, x) > KINK_MARGIN
                  and _preactivation_margin(pd, fake) > KINK_MARGIN
                  and _preactivation_margin(pg, z) > KINK_MARGIN)
            if ok and needs_hinge_margin:
                d_real = forward_plain(pd, x)
                d_fake = forward_plain(pd, fake)
                ok = (np.min(np.abs(d_real - 1.0)) > KINK_MARGIN
                      and np.min(np.abs(-d_fake - 1.0)) > KINK_MARGIN)
            if ok:
                return pg, pd, z, x, fake
        raise RuntimeError("could not sample a kink-free configuration")

    builders: Dict[str, Callable] = {}

    def add_base_case(family: str):
        def build_d(rng):
            pg, pd, z, x, fake = clean_sample(rng, family == "hinge")

            def f(leaves):
                d_real = _forward_named(d_spec, leaves, x)
                d_fake = _forward_named(d_spec, leaves, fake)
                loss_d, _ = base_losses(family, d_real, d_fake)
                return loss_d

            return f, pd.named_arrays()

        def build_g(rng):
            pg, pd, z, x, fake = clean_sample(rng, False)

            def f(leaves):
                g_out = _forward_named(g_spec, leaves, z)
                d_named = {k: Tensor(v)
                           for k, v in pd.named_arrays().items()}
                n = len(d_spec.layer_dims())
                d_fake = network_forward(
                    d_spec, [d_named[f"w{i}"] for i in range(n)],
                    [d_named[f"b{i}"] for i in range(n)], g_out)
                return generator_loss(family, d_fake)

            return f, pg.named_arrays()

        builders[f"{family}:base_d"] = build_d
        builders[f"{family}:base_g"] = build_g

    for family in ("ns", "hinge", "wgan"):
        add_base_case(family)

    def build_pair_term(use_fake_pair: bool):
        def build(rng):
            pg, pd, z, x, fake = clean_sample(rng, False)
            if use_fake_pair:
                a, b = fake, fake + 0.1 * rng.standard_normal(fake.shape)
            else:
                a, b = x, x + 0.1 * rng.standard_normal(x.shape)
            if (_preactivation_margin(pd, a) <= KINK_MARGIN
                    or _preactivation_margin(pd, b) <= KINK_MARGIN):
                return build(rng)

            def f(leaves):
                return consistency_l2(_forward_named(d_spec, leaves, a),
                                      _forward_named(d_spec, leaves, b))

            return f, pd.named_arrays()

        return build

    builders["term:l_real"] = build_pair_term(False)
    builders["term:l_fake"] = build_pair_term(True)

    def build_l_dis(rng):
        pg, pd, z, x, fake = clean_sample(rng, False)
        z2 = z + 0.05 * rng.standard_normal(z.shape)
        fake2 = forward_plain(pg, z2)
        if (_preactivation_margin(pd, fake2) <= KINK_MARGIN):
            return build_l_dis(rng)

        def f(leaves):
            return consistency_l2(_forward_named(d_spec, leaves, fake),
                                  _forward_named(d_spec, leaves, fake2))

        return f, pd.named_arrays()

    builders["term:l_dis"] = build_l_dis

    def build_l_gen(rng):
        pg, pd, z, x, fake = clean_sample(rng, False)
        z2 = z + 0.05 * rng.standard_normal(z.shape)
        if _preactivation_margin(pg, z2) <= KINK_MARGIN:
            return build_l_gen(rng)

        def f(leaves):
            g_a = _forward_named(g_spec, leaves, z)
            g_b = _forward_named(g_spec, leaves, z2)
            return ad.negate(consistency_l2(g_a, g_b))

        return f, pg.named_arrays()

    builders["term:l_gen"] = build_l_gen
    return builders


def run_gradient_suite(n_configs: int = 50, seed: int = 0,
                       step: float = 1e-5,
                       tolerance: float = 1e-4) -> List[CaseResult]:
    """Check every case at ``n_configs`` random configurations each.

    The per-case report keeps the worst relative error seen across
    configurations.
    """
    results: List[CaseResult] = []
    for name, build in _case_builders().items():
        rng = np.random.default_rng(seed)
        worst: Dict[str, float] = {}
        worst_overall = 0.0
        for _ in range(n_configs):
            f, params = build(rng)
            report = finite_diff_check(f, params, step=step,
                                       tolerance=tolerance)
            worst_overall = max(worst_overall, report.max_rel_error)
            for key, err in report.per_param.items():
                worst[key] = max(worst.get(key, 0.0), err)
        results.append(CaseResult(name, CheckReport(
            per_param=worst, max_rel_error=worst_overall,
            passed=worst_overall < tolerance, step=step,
            tolerance=tolerance)))
    return results
