"""Training harness: composite loss, Adam, schedule, checkpoints.

The loss pairs a mean-squared output term against the ground-truth cube
with a weighted mean-squared reprojection term that maps the reconstruction
back through mask coding and dispersion and compares it to the actual
measurement; the weight ``xi`` controls the measurement-consistency
penalty.

Training runs in two phases. Phase 1 co-trains the mask network with the
reconstruction network (measurement formation sits inside the same
differentiation graph, so gradients reach the mask through both the
measurement and the reprojection). At the phase boundary the mask is frozen
to its calibration-set mean and phase 2 fine-tunes the reconstruction
network alone. Fixed mask kinds skip phase 1 entirely.

Everything is deterministic per seed: two runs with identical config
produce bit-identical metric logs, and resuming from a checkpoint
reproduces the uninterrupted run exactly (the checkpoint carries the RNG
state).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import default_response
from .errors import ContractError, FormatError
from .masks import (MaskTemplate, freeze_mask, init_mask_weights,
                    mask_net_forward, template_init)
from .metrics import evaluate_pair
from .network import (ModelConfig, init_model_weights, model_forward,
                      reconstruct)
from .optics import (DispersionSpec, HsiCube, NoiseSpec, SensingOperator,
                     cassi_forward, cassi_forward_t, rgb_project)
from .serialization import (CHECKPOINT_MAGIC, pack_named_tensors,
                            unpack_named_tensors)
from .tensor import Tensor

CHECKPOINT_VERSION = 1


# ======================================================================
# Configuration
# ======================================================================

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr0: float = 4e-4
    lr_half_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    xi: float = 0.2              # reprojection-consistency weight
    batch_size: int = 4
    seed: int = 0
    phase1_epochs: int | None = None   # mask co-training span; default epochs // 2
    grad_clip: float = 1.0
    sigma_cassi: float = 0.005
    sigma_rgb: float = 0.005

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_half_every < 1:
            raise ContractError("epochs, batch_size and lr_half_every must be >= 1")
        if self.lr0 <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ContractError("invalid optimizer constants")
        if self.xi < 0:
            raise ContractError("xi must be >= 0")
        if self.sigma_cassi < 0 or self.sigma_rgb < 0:
            raise ContractError("noise sigmas must be >= 0")

    @property
    def phase1(self) -> int:
        return self.epochs // 2 if self.phase1_epochs is None else self.phase1_epochs

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr0": self.lr0,
            "lr_half_every": self.lr_half_every,
            "beta1": self.beta1, "beta2": self.beta2,
            "adam_eps": self.adam_eps, "xi": self.xi,
            "batch_size": self.batch_size, "seed": self.seed,
            "phase1_epochs": self.phase1_epochs, "grad_clip": self.grad_clip,
            "sigma_cassi": self.sigma_cassi, "sigma_rgb": self.sigma_rgb,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale preset (32x32x8 cubes, small budget); the 300-epoch
    full-scale schedule stays available as the plain TrainConfig default."""
    base = {"epochs": 60, "batch_size": 4}
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr0 halved every ``lr_half_every`` epochs."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_half_every)


# ======================================================================
# Loss and optimizer
# ======================================================================

def mse_t(a: Tensor, b: Tensor) -> Tensor:
    diff = T.sub(a, b)
    return T.mean_all(T.mul(diff, diff))


def loss(x_out: Tensor, x_truth: Tensor, reproj_fn, x_in: Tensor,
         xi: float) -> Tensor:
    """Output MSE plus xi-weighted reprojection MSE (both mean-reduced)."""
    out_term = mse_t(x_out, x_truth)
    if xi == 0.0:
        return out_term
    back_term = mse_t(reproj_fn(x_out), x_in)
    return T.add(out_term, T.scale(back_term, xi))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: TrainConfig
              ) -> tuple[dict[str, Tensor], AdamState]:
    """Standard bias-corrected Adam update; returns fresh leaves and state."""
    t = state.step + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        g = grads[name]
        m = cfg.beta1 * state.m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1.0 - cfg.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_params[name] = Tensor(p.data - update, requires_grad=True)
        new_m[name] = np.asarray(m)
        new_v[name] = np.asarray(v)
    return new_params, AdamState(new_m, new_v, t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float
                     ) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ======================================================================
# Checkpoints
# ======================================================================

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    mask_kind: str
    epoch: int                                 # last completed epoch
    model_params: dict[str, np.ndarray]
    mask_params: dict[str, np.ndarray] | None
    static_mask: np.ndarray | None             # frozen adaptive or fixed template
    template: np.ndarray | None
    adam: AdamState
    rng_state: dict
    wavelengths_nm: list[float]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections: dict[str, np.ndarray] = {}
    for k, v in ckpt.model_params.items():
        sections[f"model/{k}"] = v
    if ckpt.mask_params is not None:
        for k, v in ckpt.mask_params.items():
            sections[f"mask/{k}"] = v
    for k, v in ckpt.adam.m.items():
        sections[f"adam_m/{k}"] = v
    for k, v in ckpt.adam.v.items():
        sections[f"adam_v/{k}"] = v
    if ckpt.static_mask is not None:
        sections["static_mask"] = ckpt.static_mask
    if ckpt.template is not None:
        sections["template"] = ckpt.template
    header = {
        "model_cfg": ckpt.model_cfg.to_dict(),
        "train_cfg": ckpt.train_cfg.to_dict(),
        "mask_kind": ckpt.mask_kind,
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "rng_state": ckpt.rng_state,
        "wavelengths_nm": ckpt.wavelengths_nm,
        "meta": ckpt.meta,
        "has_mask_params": ckpt.mask_params is not None,
    }
    raw = json.dumps(header).encode("utf-8")
    blob = (struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
            + struct.pack("<Q", len(raw)) + raw
            + pack_named_tensors(sections))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version = struct.unpack_from("<4sI", buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version "
                          f"{version} (this build reads {CHECKPOINT_VERSION})")
    (jlen,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < 16 + jlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(buf[16:16 + jlen].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt checkpoint header: {e}") from e
    sections, end = unpack_named_tensors(buf, 16 + jlen)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")

    def take(prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in sections.items() if k.startswith(prefix)}

    mask_params = take("mask/") if header.get("has_mask_params") else None
    return Checkpoint(
        model_cfg=ModelConfig.from_dict(header["model_cfg"]),
        train_cfg=TrainConfig.from_dict(header["train_cfg"]),
        mask_kind=header["mask_kind"],
        epoch=header["epoch"],
        model_params=take("model/"),
        mask_params=mask_params,
        static_mask=sections.get("static_mask"),
        template=sections.get("template"),
        adam=AdamState(take("adam_m/"), take("adam_v/"), header["adam_step"]),
        rng_state=header["rng_state"],
        wavelengths_nm=header["wavelengths_nm"],
        meta=header.get("meta", {}),
    )


def checkpoint_io(mode: str, path, ckpt: Checkpoint | None = None) -> Checkpoint | None:
    if mode == "save":
        if ckpt is None:
            raise ContractError("checkpoint_io save requires a checkpoint")
        save_checkpoint(path, ckpt)
        return ckpt
    if mode == "load":
        return load_checkpoint(path)
    raise ContractError(f"unknown checkpoint_io mode {mode!r}")


# ======================================================================
# Training loop
# ======================================================================

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[dict]


def _scene_loss(scene: HsiCube, mask_t: Tensor, cfg: TrainConfig,
                mcfg: ModelConfig, weights: dict[str, Tensor],
                seeds: tuple[int, int], response) -> Tensor:
    """Simulate one scene's measurements and evaluate the composite loss."""
    y_r = rgb_project(scene, response, NoiseSpec(cfg.sigma_rgb, seeds[0]))
    clean = cassi_forward_t(Tensor(scene.data), mask_t, mcfg.d)
    noise = NoiseSpec(cfg.sigma_cassi, seeds[1]).sample(clean.shape)
    y_c = clean if noise is None else T.add(clean, Tensor(noise))
    x_hat = model_forward(y_c, y_r, mask_t, weights, mcfg)
    return loss(x_hat, Tensor(scene.data),
                lambda x: cassi_forward_t(x, mask_t, mcfg.d), y_c, cfg.xi)


def _validate(scenes, mask_for_scene, weights, cfg: TrainConfig,
              mcfg: ModelConfig, response, rng) -> dict:
    vals = []
    for scene in scenes:
        s_rgb = int(rng.integers(2**31))
        s_cassi = int(rng.integers(2**31))
        y_r = rgb_project(scene, response, NoiseSpec(cfg.sigma_rgb, s_rgb))
        mask = mask_for_scene(y_r)
        op = SensingOperator(mask, DispersionSpec(mcfg.d), response)
        y_c = cassi_forward(scene, op, NoiseSpec(cfg.sigma_cassi, s_cassi))
        est = reconstruct(y_c, y_r, op, weights, mcfg)
        vals.append(evaluate_pair(est, scene.data))
    return {k: float(np.mean([v[k] for v in vals])) for k in vals[0]}


def train(train_scenes, val_scenes, cfg: TrainConfig, mcfg: ModelConfig,
          mask_kind: str = "adaptive", template_kind: str = "manual",
          log_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """Two-phase training over in-memory scene lists.

    Returns the final checkpoint (resume-exact), the best-validation-PSNR
    checkpoint and the per-epoch metric log. Raises on an empty dataset or
    a non-finite loss.

    When resuming, the architecture, mask kind and all weights come from
    the checkpoint; ``cfg`` must agree with the original run on every field
    that shapes the step sequence (seed, batch size, schedule) for the
    continuation to be bit-exact, while ``epochs`` may be raised to extend
    the budget.
    """
    train_scenes = list(train_scenes)
    val_scenes = list(val_scenes)
    if not train_scenes or not val_scenes:
        raise ContractError("training needs non-empty train and val splits")
    shape = train_scenes[0].shape[:2]
    response = default_response(train_scenes[0].wavelengths_nm)

    rng = np.random.default_rng(cfg.seed)
    if resume is None:
        model_w = init_model_weights(mcfg, seed=int(rng.integers(2**31)))
        if mask_kind == "adaptive":
            mask_w = init_mask_weights(np.random.default_rng(int(rng.integers(2**31))))
            template = template_init(template_kind, shape,
                                     seed=int(rng.integers(2**31)))
            static_mask = None
        else:
            mask_w = None
            template = template_init(mask_kind, shape,
                                     seed=int(rng.integers(2**31)))
            static_mask = template.data
        adam = AdamState()
        start_epoch = 0
        frozen = static_mask
    else:
        mcfg = resume.model_cfg
        mask_kind = resume.mask_kind
        template_kind = resume.meta.get("template_kind", template_kind)
        model_w = {k: Tensor(v, requires_grad=True)
                   for k, v in resume.model_params.items()}
        mask_w = (None if resume.mask_params is None else
                  {k: Tensor(v, requires_grad=True)
                   for k, v in resume.mask_params.items()})
        template = (None if resume.template is None else
                    MaskTemplate(resume.template, template_kind))
        frozen = resume.static_mask
        adam = resume.adam
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch + 1

    writer = open(log_path, "a") if log_path else None
    log: list[dict] = []
    best_psnr = -np.inf if resume is None else resume.meta.get("best_psnr", -np.inf)
    best_ckpt: Checkpoint | None = None

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            model_cfg=mcfg, train_cfg=cfg, mask_kind=mask_kind, epoch=epoch,
            model_params={k: t.data for k, t in model_w.items()},
            mask_params=(None if mask_w is None else
                         {k: t.data for k, t in mask_w.items()}),
            static_mask=frozen,
            template=None if template is None else template.data,
            adam=adam, rng_state=rng.bit_generator.state,
            wavelengths_nm=[float(v) for v in train_scenes[0].wavelengths_nm],
            meta={"best_psnr": float(best_psnr), "template_kind": template_kind},
        )

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            co_training = mask_kind == "adaptive" and epoch < cfg.phase1
            if mask_kind == "adaptive" and epoch >= cfg.phase1 and frozen is None:
                calibration = [rgb_project(s, response) for s in train_scenes]
                frozen = freeze_mask(mask_w, calibration, template)

            order = rng.permutation(len(train_scenes))
            loss_sum = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                seeds = [(int(rng.integers(2**31)), int(rng.integers(2**31)))
                         for _ in batch]
                params: dict[str, Tensor] = {f"model/{k}": v
                                             for k, v in model_w.items()}
                if co_training:
                    params.update({f"mask/{k}": v for k, v in mask_w.items()})
                with T.Tape():
                    total = None
                    for pos, idx in enumerate(batch):
                        scene = train_scenes[idx]
                        if co_training:
                            y_r_mask = rgb_project(
                                scene, response,
                                NoiseSpec(cfg.sigma_rgb, seeds[pos][0]))
                            mask_t = mask_net_forward(y_r_mask, template, mask_w)
                        else:
                            mask_t = Tensor(frozen)
                        item = _scene_loss(scene, mask_t, cfg, mcfg, model_w,
                                           seeds[pos], response)
                        total = item if total is None else T.add(total, item)
                    batch_loss = T.scale(total, 1.0 / len(batch))
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise ContractError(
                        f"non-finite loss {value} at epoch {epoch}; check noise "
                        f"sigmas, learning rate and input ranges")
                loss_sum += value * len(batch)
                gm = T.backward(batch_loss)
                grads: dict[str, np.ndarray] = {}
                for name, p in params.items():
                    g = gm.get(p)
                    if g is None:
                        raise ContractError(f"parameter {name!r} received no gradient")
                    grads[name] = g.data
                grads = clip_global_norm(grads, cfg.grad_clip)
                params, adam = adam_step(params, grads, adam, lr, cfg)
                model_w = {k[len("model/"):]: v for k, v in params.items()
                           if k.startswith("model/")}
                if co_training:
                    mask_w = {k[len("mask/"):]: v for k, v in params.items()
                              if k.startswith("mask/")}

            if mask_kind == "adaptive" and frozen is None:
                def mask_for_scene(y_r):
                    with T.no_tape():
                        return mask_net_forward(y_r, template, mask_w).data
            else:
                fixed = frozen

                def mask_for_scene(y_r, fixed=fixed):
                    return fixed

            stats = _validate(val_scenes, mask_for_scene, model_w, cfg, mcfg,
                              response, rng)
            entry = {"epoch": epoch, "lr": lr,
                     "train_loss": loss_sum / len(train_scenes), **stats}
            log.append(entry)
            if writer:
                writer.write(json.dumps(entry) + "\n")
                writer.flush()
            if stats["psnr"] > best_psnr:
                best_psnr = stats["psnr"]
                best_ckpt = snapshot(epoch)
    finally:
        if writer:
            writer.close()

    final = snapshot(cfg.epochs - 1)
    if best_ckpt is None:
        best_ckpt = final
    return TrainResult(final=final, best=best_ckpt, log=log)


def fit_steps(scenes, cfg: TrainConfig, mcfg: ModelConfig, steps: int,
              mask_kind: str = "adaptive", template_kind: str = "manual"
              ) -> tuple[dict[str, Tensor], np.ndarray, list[float]]:
    """Fixed-batch optimization for a given number of Adam steps.

    Runs at the constant base learning rate (the epoch-based halving
    schedule belongs to :func:`train`); used for overfit sanity checks and
    quick studies. Returns the model weights, the final mask and the
    per-step loss trace. With an adaptive mask the mask network co-trains
    for the first half of the steps and is then frozen on the batch.
    """
    scenes = list(scenes)
    if not scenes:
        raise ContractError("fit_steps needs at least one scene")
    shape = scenes[0].shape[:2]
    response = default_response(scenes[0].wavelengths_nm)
    rng = np.random.default_rng(cfg.seed)
    model_w = init_model_weights(mcfg, seed=int(rng.integers(2**31)))
    if mask_kind == "adaptive":
        mask_w = init_mask_weights(np.random.default_rng(int(rng.integers(2**31))))
        template = template_init(template_kind, shape, seed=int(rng.integers(2**31)))
        frozen = None
    else:
        mask_w = None
        template = template_init(mask_kind, shape, seed=int(rng.integers(2**31)))
        frozen = template.data
    adam = AdamState()
    losses: list[float] = []
    freeze_at = steps // 2
    for step in range(steps):
        if mask_kind == "adaptive" and frozen is None and step >= freeze_at:
            calibration = [rgb_project(s, response) for s in scenes]
            frozen = freeze_mask(mask_w, calibration, template)
        co_training = frozen is None
        seeds = [(int(rng.integers(2**31)), int(rng.integers(2**31)))
                 for _ in scenes]
        params: dict[str, Tensor] = {f"model/{k}": v for k, v in model_w.items()}
        if co_training:
            params.update({f"mask/{k}": v for k, v in mask_w.items()})
        with T.Tape():
            total = None
            for pos, scene in enumerate(scenes):
                if co_training:
                    y_r_mask = rgb_project(scene, response,
                                           NoiseSpec(cfg.sigma_rgb, seeds[pos][0]))
                    mask_t = mask_net_forward(y_r_mask, template, mask_w)
                else:
                    mask_t = Tensor(frozen)
                item = _scene_loss(scene, mask_t, cfg, mcfg, model_w,
                                   seeds[pos], response)
                total = item if total is None else T.add(total, item)
            batch_loss = T.scale(total, 1.0 / len(scenes))
        losses.append(batch_loss.item())
        gm = T.backward(batch_loss)
        grads = {}
        for name, p in params.items():
            g = gm.get(p)
            if g is None:
                raise ContractError(f"parameter {name!r} received no gradient")
            grads[name] = g.data
        grads = clip_global_norm(grads, cfg.grad_clip)
        params, adam = adam_step(params, grads, adam, cfg.lr0, cfg)
        model_w = {k[len("model/"):]: v for k, v in params.items()
                   if k.startswith("model/")}
        if co_training:
            mask_w = {k[len("mask/"):]: v for k, v in params.items()
                      if k.startswith("mask/")}
    if frozen is None:
        calibration = [rgb_project(s, response) for s in scenes]
        frozen = freeze_mask(mask_w, calibration, template)
    return model_w, frozen, losses
