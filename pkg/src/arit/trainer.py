"""Training loop, translation inference and checkpoint round trips.

Every random choice derives from (seed, epoch, step): network initialization
from the seed, the per-epoch data order from (seed, epoch) and the patch
positions of the contrastive loss from (seed, epoch, step). Together with a
fixed thread count this makes two runs of the same config bit-identical.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from arit.checkpoint import read_checkpoint, write_checkpoint
from arit.corruptions import hash64
from arit.errors import ConfigError, DataError, FormatVersionError, NumericError
from arit.metrics import psnr, ssim
from arit.translation.model import (
    LossWeights,
    ModelConfig,
    TranslationModel,
    discriminator_step_losses,
    generator_forward,
    generator_losses,
)
from arit.translation.networks import DiscriminatorSpec, GeneratorSpec

# small networks that train in minutes at 64x64 on one CPU core
FAST_GENERATOR = GeneratorSpec(base_channels=8, n_downsamples=2, n_residual_blocks=2, stem_kernel=3)
FAST_DISCRIMINATOR = DiscriminatorSpec(base_channels=8, n_layers=3)


def fast_model(decoupling: bool = True, resilient: bool = True) -> ModelConfig:
    return ModelConfig(decoupling, resilient, FAST_GENERATOR, FAST_DISCRIMINATOR)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 20
    batch_size: int = 8
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_interval < 0:
            raise ConfigError("epochs and checkpoint_interval must be >= 0, batch_size >= 1")
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ConfigError("learning rates must be positive")
        if not self.model.decoupling and self.weights.lam_pair:
            # the single-stage baseline has no N -> R generator to pair with pseudo-labels
            object.__setattr__(self, "weights", dataclasses.replace(self.weights, lam_pair=0.0))

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(),
            "weights": dataclasses.asdict(self.weights),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_g": self.lr_g,
            "lr_d": self.lr_d,
            "betas": list(self.betas),
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(
            model=ModelConfig.from_json(obj["model"]),
            weights=LossWeights(**obj["weights"]),
            epochs=int(obj["epochs"]),
            batch_size=int(obj["batch_size"]),
            lr_g=float(obj["lr_g"]),
            lr_d=float(obj["lr_d"]),
            betas=tuple(obj["betas"]),
            seed=int(obj["seed"]),
            checkpoint_interval=int(obj["checkpoint_interval"]),
        )


def _stack(images) -> np.ndarray:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim == 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr


@dataclass
class TrainingData:
    """Frame-aligned training arrays, (N, H, W, 3) float32 in [0, 1].

    ``noisy`` are the corrupted real images, ``pseudo`` the clean real-style
    targets (pseudo-labels, or clean real images in synthetic mode) and
    ``virtual`` the virtual renders. Validation pairs translate ``val_noisy``
    and compare against ``val_virtual``."""

    noisy: np.ndarray
    virtual: np.ndarray
    pseudo: np.ndarray | None = None
    val_noisy: np.ndarray | None = None
    val_virtual: np.ndarray | None = None

    def __post_init__(self):
        self.noisy, self.virtual = _stack(self.noisy), _stack(self.virtual)
        if self.pseudo is not None:
            self.pseudo = _stack(self.pseudo)
        if self.val_noisy is not None:
            self.val_noisy, self.val_virtual = _stack(self.val_noisy), _stack(self.val_virtual)
        shapes = {a.shape for a in (self.noisy, self.virtual, self.pseudo) if a is not None}
        if len(shapes) != 1:
            raise DataError(f"training arrays differ in shape: {sorted(shapes)}")
        if self.val_noisy is not None and self.val_noisy.shape != self.val_virtual.shape:
            raise DataError("validation arrays differ in shape")

    def __len__(self):
        return len(self.noisy)

    @classmethod
    def from_samples(cls, train, pseudo_labels=None, val=None) -> "TrainingData":
        """Build from SceneSamples whose ``real_image`` is the corrupted image.

        ``pseudo_labels`` maps frame id -> clean real-style image."""
        pseudo = None
        if pseudo_labels is not None:
            missing = [s.frame_id for s in train if s.frame_id not in pseudo_labels]
            if missing:
                raise DataError(f"pseudo-labels missing for frames {missing[:5]}")
            pseudo = [pseudo_labels[s.frame_id] for s in train]
        return cls(
            noisy=[s.real_image for s in train],
            virtual=[s.virtual_image for s in train],
            pseudo=pseudo,
            val_noisy=[s.real_image for s in val] if val else None,
            val_virtual=[s.virtual_image for s in val] if val else None,
        )


@dataclass
class TranslationState:
    config: TrainConfig
    model: TranslationModel
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    epoch: int = 0


def init_state(config: TrainConfig) -> TranslationState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = TranslationModel(config.model)
    opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=config.lr_g, betas=config.betas)
    opt_d = torch.optim.Adam(list(model.discriminator_parameters()), lr=config.lr_d, betas=config.betas)
    return TranslationState(config, model, opt_g, opt_d)


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2).contiguous()


def from_tensor(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).contiguous().numpy()


def _check_finite(terms: dict, total, where: str):
    bad = [name for name, value in terms.items() if not math.isfinite(value.item())]
    if bad or not math.isfinite(total.item()):
        raise NumericError(f"non-finite {where} loss: {', '.join(bad) or 'total'}")


def train_step(state: TranslationState, n, pseudo, v, seed: int) -> dict:
    """One discriminator update, then one generator update judged by the
    updated discriminators. Returns the loss terms as floats."""
    model, w = state.model, state.config.weights
    out = generator_forward(model, n, pseudo, v)
    d_total, d_terms = discriminator_step_losses(model, n, pseudo, v, {k: x.detach() for k, x in out["fakes"].items()})
    _check_finite(d_terms, d_total, "discriminator")
    state.opt_d.zero_grad(set_to_none=True)
    d_total.backward()
    state.opt_d.step()
    d_params = list(model.discriminator_parameters())
    for p in d_params:
        p.requires_grad_(False)
    try:
        g_total, g_terms = generator_losses(model, out, w, seed)
        _check_finite(g_terms, g_total, "generator")
        state.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        state.opt_g.step()
    finally:
        for p in d_params:
            p.requires_grad_(True)
    return {k: x.item() for k, x in {**g_terms, **d_terms}.items()}


def validate(state: TranslationState, data: TrainingData, batch_size: int = 32) -> dict:
    if data.val_noisy is None or not len(data.val_noisy):
        return {}
    out = translate_array(state, data.val_noisy, batch_size)
    return {
        "val_psnr": float(np.mean([psnr(a, b) for a, b in zip(out, data.val_virtual)])),
        "val_ssim": float(np.mean([ssim(a, b) for a, b in zip(out, data.val_virtual)])),
    }


def train(
    config: TrainConfig, data: TrainingData, log_path=None, checkpoint_dir=None, state=None, progress=None, metadata=None
):
    """Train for ``config.epochs`` epochs (resuming from ``state.epoch``).

    Returns (state, log) where log holds one record per epoch, also appended
    as JSON lines to ``log_path`` when given. ``metadata`` is merged into every
    written log line and embedded in every periodic checkpoint."""
    if config.model.decoupling and data.pseudo is None:
        raise DataError("the two-stage model needs pseudo-labels (or clean real images) for the R domain")
    state = state or init_state(config)
    res = data.noisy.shape[1:3]
    factor = 2**config.model.generator.n_downsamples
    if res[0] % factor or res[1] % factor:
        raise DataError(f"resolution {res} not divisible by {factor}")
    pseudo = data.pseudo if data.pseudo is not None else data.noisy
    log = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        state.model.train()
        for epoch in range(state.epoch, config.epochs):
            order = np.random.default_rng(hash64(config.seed, epoch, 0)).permutation(len(data))
            # virtual images are drawn in an independent order: the domains stay unpaired
            v_order = np.random.default_rng(hash64(config.seed, epoch, 1)).permutation(len(data))
            sums: dict[str, float] = {}
            n_steps = 0
            for step, start in enumerate(range(0, len(data), config.batch_size)):
                idx, vidx = order[start : start + config.batch_size], v_order[start : start + config.batch_size]
                try:
                    terms = train_step(
                        state, to_tensor(data.noisy[idx]), to_tensor(pseudo[idx]), to_tensor(data.virtual[vidx]),
                        seed=hash64(config.seed, epoch, step),
                    )
                except NumericError as exc:
                    raise NumericError(f"{exc} (epoch {epoch + 1}, step {step})") from exc
                for k, x in terms.items():
                    sums[k] = sums.get(k, 0.0) + x
                n_steps += 1
            state.epoch = epoch + 1
            record = {"epoch": state.epoch, "steps": n_steps, "losses": {k: x / n_steps for k, x in sorted(sums.items())}}
            record.update(validate(state, data))
            state.model.train()
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps({**(metadata or {}), **record}, sort_keys=True) + "\n")
                log_fh.flush()
            if checkpoint_dir and config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
                save_state(Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.arit", state, metadata)
            if progress:
                progress(record)
    finally:
        if log_fh:
            log_fh.close()
    return state, log


# --------------------------------------------------------------------------- inference


@torch.no_grad()
def translate_array(state: TranslationState, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model = state.model
    model.eval()
    images = _stack(images) if not isinstance(images, np.ndarray) else images.astype(np.float32, copy=False)
    if images.ndim != 4 or images.shape[-1] != model.cfg.generator.in_channels:
        raise DataError(f"expected (N, H, W, {model.cfg.generator.in_channels}) images, got {images.shape}")
    out = [from_tensor(model.translate(to_tensor(images[i : i + batch_size]))) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else images[:0]


def translate(state: TranslationState, images) -> list[np.ndarray]:
    """v_hat = G_x2(G_x1(n)) (or G(n) for the baseline) for each image."""
    images = list(images)
    if not images:
        return []
    shapes = {np.shape(im) for im in images}
    results = []
    for shape in sorted(shapes):  # images of one shape are batched together
        idx = [i for i, im in enumerate(images) if np.shape(im) == shape]
        out = translate_array(state, _stack([images[i] for i in idx]))
        results += list(zip(idx, out))
    return [img for _, img in sorted(results, key=lambda t: t[0])]


@torch.no_grad()
def encoder_features(state: TranslationState, images, batch_size: int = 32) -> np.ndarray:
    """Designated encoder output of the first generator (E_x1, or E of G) per image."""
    model = state.model
    model.eval()
    images = _stack(images)
    enc = model.noisy_encoder()
    out = [enc.encode(to_tensor(images[i : i + batch_size])).numpy() for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


# --------------------------------------------------------------------------- checkpoints


def _optimizer_blocks(prefix: str, opt: torch.optim.Optimizer) -> dict:
    blocks = {}
    for idx, st in sorted(opt.state_dict()["state"].items()):
        for key in ("step", "exp_avg", "exp_avg_sq"):
            blocks[f"{prefix}/{idx}/{key}"] = torch.as_tensor(st[key]).detach().numpy()
    return blocks


def save_state(path, state: TranslationState, metadata: dict | None = None) -> None:
    blocks = {f"model/{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    blocks.update(_optimizer_blocks("opt_g", state.opt_g))
    blocks.update(_optimizer_blocks("opt_d", state.opt_d))
    header = {"train_config": state.config.to_json(), "epoch": state.epoch}
    if metadata:
        header["metadata"] = metadata
    write_checkpoint(path, header, blocks)


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, blocks: dict):
    sd = opt.state_dict()
    state = {}
    for idx in sd["param_groups"][0]["params"]:
        key = f"{prefix}/{idx}/step"
        if key in blocks:
            state[idx] = {
                "step": torch.tensor(float(blocks[key])),
                "exp_avg": torch.from_numpy(blocks[f"{prefix}/{idx}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(blocks[f"{prefix}/{idx}/exp_avg_sq"]),
            }
    sd["state"] = state
    opt.load_state_dict(sd)


def load_state(path, expected_model: ModelConfig | None = None) -> TranslationState:
    config_json, blocks = read_checkpoint(path)
    try:
        config = TrainConfig.from_json(config_json["train_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatVersionError(f"{path}: checkpoint config is malformed") from exc
    if expected_model is not None and expected_model != config.model:
        raise ConfigError(f"{path}: checkpoint model config differs from the requested one")
    state = init_state(config)
    model_sd = state.model.state_dict()
    names = {k[len("model/") :] for k in blocks if k.startswith("model/")}
    if names != set(model_sd):
        raise ConfigError(f"{path}: parameter blocks do not match the architecture in the embedded config")
    for k, ref in model_sd.items():
        arr = blocks[f"model/{k}"]
        if arr.shape != tuple(ref.shape):
            raise ConfigError(f"{path}: block {k} has shape {arr.shape}, expected {tuple(ref.shape)}")
    state.model.load_state_dict({k: torch.from_numpy(blocks[f"model/{k}"]) for k in model_sd})
    _load_optimizer(state.opt_g, "opt_g", blocks)
    _load_optimizer(state.opt_d, "opt_d", blocks)
    state.epoch = int(config_json["epoch"])
    return state


def checkpoint_io(path, mode: str, state: TranslationState | None = None):
    if mode == "write":
        if state is None:
            raise ValueError("write mode needs a state")
        save_state(path, state)
        return None
    if mode == "read":
        return load_state(path)
    raise ValueError(f"unknown mode {mode!r}")
