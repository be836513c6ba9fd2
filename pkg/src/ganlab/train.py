"""Training loops for vanilla, CR, bCR, zCR, and ICR GANs.

RNG discipline (one training stream per run, fixed consumption order):

* discriminator step: z, x, draws for T(x), draws for T(G(z)),
  [fresh z' under icr], latent perturbation draws;
* generator step: z, latent perturbation draws.

A consistency term that is inactive (its lambda is 0, or sigma_noise is 0
for latent terms) is skipped entirely, including its draws, so ablations
with zeroed coefficients are bit-identical to vanilla runs. Evaluation uses
a separate stream (held-out real batch first, then one latent batch per
evaluation), so metric cadence never shifts training draws.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .augment import AugmentationSpec, apply_pipeline, perturb_latent
from .autodiff import Array, Graph, Tensor, backward
from .data import DatasetSpec, PriorSpec, sample_prior, sample_real
from .losses import (LOSS_FAMILIES, LossBreakdown, base_losses,
                     consistency_l2, generator_loss)
from .metrics import (MetricsRecord, artifact_patch_fraction, fit_moments,
                      frechet_distance, identity_features, mode_coverage,
                      random_feature_map)
from .models import (ModelParams, NetworkSpec, TrackedNet, constant_net,
                     generator_forward, init_params, refresh_spectral_state)
from .optim import AdamState, adam_step, init_adam

REGULARIZERS = ("none", "cr", "bcr", "zcr", "icr")

# Fréchet evaluation adds this to covariance diagonals before the square
# root; the metric op itself stays exact for closed-form inputs.
EVAL_COV_EPS = 1e-6


class DivergenceError(RuntimeError):
    """Raised when logits or losses leave the finite training regime."""

    def __init__(self, message: str, snapshot: Optional[dict] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    """Complete description of one training run."""

    dataset: DatasetSpec
    prior: PriorSpec
    g_spec: NetworkSpec
    d_spec: NetworkSpec
    augment: AugmentationSpec
    loss: str = "hinge"
    regularizer: str = "none"
    lambda_real: float = 10.0
    lambda_fake: float = 10.0
    lambda_dis: float = 5.0
    lambda_gen: float = 0.5
    sigma_noise: float = 0.03
    n_disc: int = 1
    batch_size: int = 64
    total_steps: int = 20000
    eval_interval: int = 1000
    eval_samples: int = 2048
    checkpoint_interval: int = 0
    seed: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    capture_radius: float = 0.0  # 0 -> 3 * dataset.mode_std
    artifact_patch: int = 0      # 0 -> cutout size from augment, if any
    artifact_tol: float = 0.25
    feature_dim: int = 16
    logit_guard: float = 1e6

    def __post_init__(self):
        if self.loss not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.loss!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        for name in ("lambda_real", "lambda_fake", "lambda_dis",
                     "lambda_gen", "sigma_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_disc < 1:
            raise ValueError("n_disc must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def normalized(self) -> "TrainConfig":
        """Copy with coefficients of inapplicable terms forced to zero.

        cr keeps only lambda_real; bcr keeps lambda_real/lambda_fake; zcr
        keeps lambda_dis/lambda_gen; none zeroes all four.
        """
        keep = {
            "none": (),
            "cr": ("lambda_real",),
            "bcr": ("lambda_real", "lambda_fake"),
            "zcr": ("lambda_dis", "lambda_gen"),
            "icr": ("lambda_real", "lambda_fake", "lambda_dis", "lambda_gen"),
        }[self.regularizer]
        forced = {
            name: 0.0
            for name in ("lambda_real", "lambda_fake", "lambda_dis",
                         "lambda_gen")
            if name not in keep
        }
        return dataclasses.replace(self, **forced) if forced else self

    def active_terms(self) -> Dict[str, bool]:
        cfg = self.normalized()
        latent_on = cfg.sigma_noise > 0
        return {
            "l_real": cfg.lambda_real > 0,
            "l_fake": cfg.lambda_fake > 0,
            "l_dis": cfg.lambda_dis > 0 and latent_on,
            "l_gen": cfg.lambda_gen > 0 and latent_on,
        }


def _guard_logits(cfg: TrainConfig, name: str, logits: Tensor,
                  step_kind: str) -> None:
    worst = float(np.max(np.abs(logits.data))) if logits.data.size else 0.0
    if not np.isfinite(worst) or worst > cfg.logit_guard:
        raise DivergenceError(
            f"{step_kind}: |{name}| reached {worst:.3e} "
            f"(guard {cfg.logit_guard:.0e})",
            snapshot={"where": step_kind, "logits": name, "value": worst})


def _guard_loss(cfg: TrainConfig, value: float, step_kind: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(
            f"{step_kind}: non-finite loss {value!r}",
            snapshot={"where": step_kind, "loss": value})


def discriminator_step(
        config: TrainConfig, params_g: ModelParams, params_d: ModelParams,
        adam_d: AdamState, rng: np.random.Generator,
) -> Tuple[ModelParams, AdamState, LossBreakdown]:
    """One discriminator update; generator outputs are gradient-detached.

    All discriminator inputs of the step are stacked into a single forward
    pass and the logits sliced per segment, which is bit-identical to
    separate forwards on this row-independent architecture and much faster.
    """
    cfg = config.normalized()
    active = cfg.active_terms()
    refresh_spectral_state(params_d)

    z = sample_prior(cfg.prior, cfg.batch_size, rng)
    x = sample_real(cfg.dataset, cfg.batch_size, rng)
    fake = generator_forward(params_g, z)

    segments = [x, fake]
    if active["l_real"]:
        segments.append(apply_pipeline(cfg.augment, x, rng))
    if active["l_fake"]:
        segments.append(apply_pipeline(cfg.augment, fake, rng))
    anchor_index = None
    if active["l_dis"]:
        if cfg.regularizer == "icr":
            # icr pairs the latent term with its own latent batch.
            z_latent = sample_prior(cfg.prior, cfg.batch_size, rng)
        else:
            z_latent = z
        z_perturbed = perturb_latent(z_latent, rng, cfg.sigma_noise)
        if cfg.regularizer == "icr":
            pair = generator_forward(
                params_g, np.concatenate([z_latent, z_perturbed]))
            anchor_index = len(segments)
            segments.append(pair[:cfg.batch_size])
            segments.append(pair[cfg.batch_size:])
        else:
            anchor_index = 1  # reuse the base fake logits
            segments.append(generator_forward(params_g, z_perturbed))

    graph = Graph()
    dnet = TrackedNet(graph, params_d)
    logits = dnet.forward(np.concatenate(segments))
    _guard_logits(cfg, "D", logits, "discriminator_step")
    n = cfg.batch_size
    sliced = [ad.slice_axis(logits, 0, i * n, (i + 1) * n)
              for i in range(len(segments))]
    d_real, d_fake = sliced[0], sliced[1]

    base_d_t, base_g_t = base_losses(cfg.loss, d_real, d_fake)
    total = base_d_t
    l_real_val = l_fake_val = l_dis_val = 0.0
    cursor = 2

    if active["l_real"]:
        l_real_t = consistency_l2(d_real, sliced[cursor])
        cursor += 1
        total = ad.add(total, ad.scale(l_real_t, cfg.lambda_real))
        l_real_val = l_real_t.item()
    if active["l_fake"]:
        l_fake_t = consistency_l2(d_fake, sliced[cursor])
        cursor += 1
        total = ad.add(total, ad.scale(l_fake_t, cfg.lambda_fake))
        l_fake_val = l_fake_t.item()
    if active["l_dis"]:
        d_anchor = sliced[anchor_index]
        d_shifted = sliced[-1]
        l_dis_t = consistency_l2(d_anchor, d_shifted)
        total = ad.add(total, ad.scale(l_dis_t, cfg.lambda_dis))
        l_dis_val = l_dis_t.item()

    _guard_loss(cfg, total.item(), "discriminator_step")
    grads_by_node = backward(graph, total.node_id)
    leaf_ids = dnet.leaf_ids()
    # Stop-gradient contract: the graph's only leaves are this model's params.
    assert set(grads_by_node) == set(leaf_ids.values())
    grads = {name: grads_by_node[nid] for name, nid in leaf_ids.items()}
    new_params, new_adam = adam_step(params_d, grads, adam_d)

    breakdown = LossBreakdown.from_components(
        base_d=base_d_t.item(), base_g=base_g_t.item(),
        l_real=l_real_val, l_fake=l_fake_val, l_dis=l_dis_val,
        lambda_real=cfg.lambda_real, lambda_fake=cfg.lambda_fake,
        lambda_dis=cfg.lambda_dis)
    return new_params, new_adam, breakdown


def generator_step(
        config: TrainConfig, params_g: ModelParams, params_d: ModelParams,
        adam_g: AdamState, rng: np.random.Generator,
) -> Tuple[ModelParams, AdamState, LossBreakdown]:
    """One generator update; discriminator parameters stay constant."""
    cfg = config.normalized()
    active = cfg.active_terms()

    z = sample_prior(cfg.prior, cfg.batch_size, rng)
    graph = Graph()
    gnet = TrackedNet(graph, params_g)
    d_const = constant_net(params_d)
    n = cfg.batch_size
    if active["l_gen"]:
        z_perturbed = perturb_latent(z, rng, cfg.sigma_noise)
        g_out = gnet.forward(np.concatenate([z, z_perturbed]))
        g_z = ad.slice_axis(g_out, 0, 0, n)
        g_tz = ad.slice_axis(g_out, 0, n, 2 * n)
    else:
        g_z = gnet.forward(z)
        g_tz = None
    d_fake = d_const(g_z)
    _guard_logits(cfg, "D(G(z))", d_fake, "generator_step")

    base_g_t = generator_loss(cfg.loss, d_fake)
    total = base_g_t
    l_gen_val = 0.0
    if active["l_gen"]:
        l_gen_t = ad.negate(consistency_l2(g_z, g_tz))
        total = ad.add(total, ad.scale(l_gen_t, cfg.lambda_gen))
        l_gen_val = l_gen_t.item()

    _guard_loss(cfg, total.item(), "generator_step")
    grads_by_node = backward(graph, total.node_id)
    leaf_ids = gnet.leaf_ids()
    assert set(grads_by_node) == set(leaf_ids.values())
    grads = {name: grads_by_node[nid] for name, nid in leaf_ids.items()}
    new_params, new_adam = adam_step(params_g, grads, adam_g)

    breakdown = LossBreakdown.from_components(
        base_g=base_g_t.item(), l_gen=l_gen_val,
        lambda_gen=cfg.lambda_gen)
    return new_params, new_adam, breakdown


@dataclass
class TrainState:
    """Everything a run owns: parameters, optimizer state, streams, step."""

    config: TrainConfig
    params_g: ModelParams
    params_d: ModelParams
    adam_g: AdamState
    adam_d: AdamState
    step: int
    rng_train: np.random.Generator
    rng_eval: np.random.Generator


class Evaluator:
    """Held-out real moments plus the feature map, fixed at loop start."""

    def __init__(self, cfg: TrainConfig, rng_eval: np.random.Generator):
        self.cfg = cfg
        dataset = cfg.dataset
        if dataset.is_image:
            self.features = random_feature_map(dataset.dim, cfg.feature_dim)
        else:
            self.features = identity_features
        real = sample_real(dataset, cfg.eval_samples, rng_eval)
        self.real_moments = fit_moments(real, self.features)
        self.centers = dataset.mode_centers()
        self.capture_radius = cfg.capture_radius or 3.0 * dataset.mode_std
        patch = cfg.artifact_patch
        if patch == 0:
            for step_ in cfg.augment.steps:
                if step_.kind == "cutout":
                    patch = int(step_.value)
        self.artifact_patch = patch

    def evaluate(self, params_g: ModelParams, rng_eval: np.random.Generator,
                 step: int, losses_now: LossBreakdown) -> MetricsRecord:
        cfg = self.cfg
        z = sample_prior(cfg.prior, cfg.eval_samples, rng_eval)
        samples = generator_forward(params_g, z)
        fake_moments = fit_moments(samples, self.features)
        frechet = frechet_distance(fake_moments, self.real_moments,
                                   eps=EVAL_COV_EPS)
        coverage, high_quality = 0.0, 0.0
        if self.centers is not None:
            coverage, high_quality = mode_coverage(
                samples, self.centers, self.capture_radius)
        artifact = 0.0
        if cfg.dataset.is_image and self.artifact_patch:
            h, w, c = cfg.dataset.geometry()
            images = samples.reshape(-1, h, w, c)
            artifact = artifact_patch_fraction(
                images, self.artifact_patch, 0.0, cfg.artifact_tol)
        return MetricsRecord(step=step, frechet=frechet,
                             mode_coverage=coverage,
                             high_quality_fraction=high_quality,
                             artifact_fraction=artifact, losses=losses_now)


def train_loop(config: TrainConfig, out_dir=None,
               ) -> Tuple[TrainState, List[MetricsRecord]]:
    """Alternate n_disc discriminator steps with one generator step.

    Emits a MetricsRecord every eval_interval generator steps (plus the final
    step), optionally persisting checkpoints under ``out_dir``. Fully
    deterministic for a fixed config.
    """
    cfg = config.normalized()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    seed_init_g, seed_init_d, seed_train, seed_eval = \
        np.random.SeedSequence(cfg.seed).spawn(4)
    params_g = init_params(cfg.g_spec, np.random.default_rng(seed_init_g))
    params_d = init_params(cfg.d_spec, np.random.default_rng(seed_init_d))
    adam_g = init_adam(params_g, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_d = init_adam(params_d, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng_train = np.random.default_rng(seed_train)
    rng_eval = np.random.default_rng(seed_eval)
    state = TrainState(cfg, params_g, params_d, adam_g, adam_d, 0,
                       rng_train, rng_eval)

    evaluator = Evaluator(cfg, rng_eval)
    records: List[MetricsRecord] = []
    d_losses = LossBreakdown()
    g_losses = LossBreakdown()

    def eval_due(step: int) -> bool:
        if cfg.eval_interval > 0 and step % cfg.eval_interval == 0:
            return True
        return step == cfg.total_steps

    try:
        for step in range(1, cfg.total_steps + 1):
            for _ in range(cfg.n_disc):
                state.params_d, state.adam_d, d_losses = discriminator_step(
                    cfg, state.params_g, state.params_d, state.adam_d,
                    rng_train)
            state.params_g, state.adam_g, g_losses = generator_step(
                cfg, state.params_g, state.params_d, state.adam_g, rng_train)
            state.step = step
            if eval_due(step):
                records.append(evaluator.evaluate(
                    state.params_g, rng_eval, step,
                    d_losses.merged_with(g_losses)))
            if (out_path is not None and cfg.checkpoint_interval > 0
                    and step % cfg.checkpoint_interval == 0):
                save_checkpoint(state,
                                out_path / f"checkpoint_step{step:07d}.npz")
    except DivergenceError:
        if out_path is not None:
            save_checkpoint(state, out_path / "checkpoint_final.npz")
        raise
    if out_path is not None:
        save_checkpoint(state, out_path / "checkpoint_final.npz")
    return state, records


# -- checkpoint file ---------------------------------------------------------
# An .npz holding every parameter/optimizer array under flat keys plus one
# json metadata string (specs, hyperparameters, step, RNG states). Loading
# restores arrays and generator states bit-exactly.

def _spec_to_dict(spec: NetworkSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["hidden_widths"] = list(d["hidden_widths"])
    return d


def _spec_from_dict(d: dict) -> NetworkSpec:
    d = dict(d)
    d["hidden_widths"] = tuple(d["hidden_widths"])
    return NetworkSpec(**d)


def _pack_params(tag: str, params: ModelParams, arrays: dict) -> dict:
    meta = {"spec": _spec_to_dict(params.spec),
            "sn_sigma": params.sn_sigma}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"{tag}_w{i}"] = w
        arrays[f"{tag}_b{i}"] = b
    if params.sn_u is not None:
        for i, u in enumerate(params.sn_u):
            arrays[f"{tag}_u{i}"] = u
    return meta


def _unpack_params(tag: str, meta: dict, arrays) -> ModelParams:
    spec = _spec_from_dict(meta["spec"])
    n_layers = len(spec.layer_dims())
    weights = [arrays[f"{tag}_w{i}"] for i in range(n_layers)]
    biases = [arrays[f"{tag}_b{i}"] for i in range(n_layers)]
    sn_u = sn_sigma = None
    if spec.spectral_norm:
        sn_u = [arrays[f"{tag}_u{i}"] for i in range(n_layers)]
        sn_sigma = list(meta["sn_sigma"])
    return ModelParams(spec, weights, biases, sn_u, sn_sigma)


def _pack_adam(tag: str, state: AdamState, arrays: dict) -> dict:
    for name, m in state.m.items():
        arrays[f"{tag}_m_{name}"] = m
    for name, v in state.v.items():
        arrays[f"{tag}_v_{name}"] = v
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "t": state.t, "names": sorted(state.m)}


def _unpack_adam(tag: str, meta: dict, arrays) -> AdamState:
    names = meta["names"]
    return AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                     eps=meta["eps"], t=meta["t"],
                     m={n: arrays[f"{tag}_m_{n}"] for n in names},
                     v={n: arrays[f"{tag}_v_{n}"] for n in names})


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def save_checkpoint(state: TrainState, path) -> None:
    arrays: Dict[str, Array] = {}
    meta = {
        "step": state.step,
        "latent_dim": state.config.prior.latent_dim,
        "geometry": (list(state.config.dataset.geometry())
                     if state.config.dataset.is_image else None),
        "g": _pack_params("g", state.params_g, arrays),
        "d": _pack_params("d", state.params_d, arrays),
        "adam_g": _pack_adam("ag", state.adam_g, arrays),
        "adam_d": _pack_adam("ad", state.adam_d, arrays),
        "rng_train": _rng_state_to_json(state.rng_train),
        "rng_eval": _rng_state_to_json(state.rng_eval),
    }
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    """Deserialized checkpoint contents."""

    params_g: ModelParams
    params_d: ModelParams
    adam_g: AdamState
    adam_d: AdamState
    step: int
    latent_dim: int
    geometry: Optional[Tuple[int, int, int]]
    rng_train_state: dict
    rng_eval_state: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except Exception as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise ValueError(f"corrupt checkpoint {path}: missing metadata")
    meta = json.loads(bytes(arrays["meta"]).decode())
    geometry = meta["geometry"]
    return Checkpoint(
        params_g=_unpack_params("g", meta["g"], arrays),
        params_d=_unpack_params("d", meta["d"], arrays),
        adam_g=_unpack_adam("ag", meta["adam_g"], arrays),
        adam_d=_unpack_adam("ad", meta["adam_d"], arrays),
        step=meta["step"],
        latent_dim=meta["latent_dim"],
        geometry=tuple(geometry) if geometry else None,
        rng_train_state=meta["rng_train"],
        rng_eval_state=meta["rng_eval"],
    )
