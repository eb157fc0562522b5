"""Three-phase training, test-time input optimization and checkpointing.

Phases run in order: ``pretrain`` (RMSprop on the dual-encoder edge losses
plus L1), ``adversarial`` (Adam on the weighted generator loss plus the two
critics) and ``finetune`` (generator only, low learning rate).  Every random
draw comes from generators owned by the trainer so a run is a pure function
of (config, seed, data); their states travel with the checkpoint.
"""

from __future__ import annotations

import collections
import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from vlinknet import critics as C
from vlinknet import losses as L
from vlinknet.config import RunConfig
from vlinknet.generator import Generator
from vlinknet.imagecore import apply_mask, compose, load_image, load_mask
from vlinknet.protocol import list_ids, resolve_path

log = logging.getLogger(__name__)

PHASES = ("pretrain", "adversarial", "finetune")
CKPT_MAGIC = b"VLINKNET-CKPT"
CKPT_VERSION = 1
LOG_COLUMNS = ("step", "phase", "loss", "l_phi", "l_edge", "l_pix", "l_fedge", "l_vgg", "l_rm",
               "l_adv", "critic")


class PhaseError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def build_extractor(cfg: RunConfig) -> L.FeatureExtractor:
    if cfg.extractor.kind == "identity":
        return L.IdentityExtractor()
    if cfg.extractor.kind == "random":
        return L.RandomPyramidExtractor(seed=cfg.extractor.seed,
                                        weights_path=cfg.extractor.weights_path)
    raise ValueError(f"unknown extractor kind {cfg.extractor.kind!r}")


def tensor_digest(module: nn.Module) -> str:
    """SHA-256 over a module's state dict, in key order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


class Trainer:
    """Owns the networks, optimizers, random state and loss history of a run."""

    def __init__(self, config: RunConfig, extractor: L.FeatureExtractor | None = None):
        self.config = cfg = config
        self.weights = cfg.losses
        self.generator = Generator(cfg.generator)
        self.critics = nn.ModuleDict(C.build_critics(cfg.critic))
        if cfg.critic.lipschitz == "clip":
            # start inside the clip box so Adam's moments never see unclipped gradients
            for critic in self.critics.values():
                C.clip_weights(critic, cfg.critic.clip_value)
        self.extractor = extractor if extractor is not None else build_extractor(cfg)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.generator.rng.manual_seed(cfg.seed + 1)
        gen_params = list(self.generator.parameters())
        betas = (cfg.adversarial.beta1, cfg.adversarial.beta2)
        self.optimizers = {
            "pretrain": torch.optim.RMSprop(gen_params, lr=cfg.pretrain.lr,
                                            alpha=cfg.pretrain.rho),
            "generator": torch.optim.Adam(gen_params, lr=cfg.adversarial.lr, betas=betas),
            "critic": torch.optim.Adam(self.critics.parameters(), lr=cfg.adversarial.lr, betas=betas),
            "finetune": torch.optim.Adam(gen_params, lr=cfg.finetune.lr, betas=betas),
        }
        self.step = 0
        self.phase = "pretrain"
        self.phase_done = dict.fromkeys(PHASES, 0)
        self.history: collections.deque = collections.deque(maxlen=cfg.log.history)

    # phase bookkeeping -------------------------------------------------

    def _enter(self, phase: str) -> None:
        if PHASES.index(phase) < PHASES.index(self.phase):
            raise PhaseError(f"cannot run {phase} after {self.phase}")
        self.phase = phase

    def _record(self, phase: str, terms: dict, ids=None) -> dict:
        values = {k: _scalar(v) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step} ({phase}): {values}; batch ids: {ids}"
            )
        self.step += 1
        self.phase_done[phase] += 1
        row = {"step": self.step, "phase": phase, **values}
        self.history.append(row)
        return row

    # losses --------------------------------------------------------------

    def _local_pairs(self, real, fake, mask):
        has_hole = (mask.flatten(1) < 0.5).any(dim=1)
        if not bool(has_hole.any()):
            return None, None
        res = self.critics["local"].resolution
        idx = torch.nonzero(has_hole).flatten()
        return (C.extract_local_patch(real[idx], mask[idx], res),
                C.extract_local_patch(fake[idx], mask[idx], res))

    def generator_terms(self, gt, mask):
        """Weighted generator loss (without adversarial term) and its parts."""
        w = self.weights
        pred, taps_a, taps_b = self.generator(gt, mask)
        composed = compose(gt, pred, mask)
        l_vgg = L.perceptual_loss(gt, pred, self.extractor)
        l_rm = L.reverse_mask_loss(gt, composed, mask, self.extractor)
        l_pix = L.pixel_loss(gt, pred, w)
        return pred, composed, {"l_vgg": l_vgg, "l_rm": l_rm, "l_pix": l_pix,
                                "l_t": L.total_loss(l_vgg, l_rm, l_pix, w)}

    # steps ----------------------------------------------------------------

    def pretrain_step(self, gt, mask, ids=None) -> dict:
        """One RMSprop step on ``edge_combined(L_phi, L_edge) + L_pix``."""
        self._enter("pretrain")
        w = self.weights
        self.generator.train()
        opt = self.optimizers["pretrain"]
        opt.zero_grad(set_to_none=True)
        pred, taps_a, taps_b = self.generator(gt, mask)
        l_phi = L.latent_loss(taps_a.final, taps_b.final)
        l_edge = L.edge_loss(gt, pred)
        l_pix = L.pixel_loss(gt, pred, w)
        loss = L.edge_combined(l_phi, l_edge, w) + l_pix
        terms = {"l_phi": l_phi, "l_edge": l_edge, "l_pix": l_pix}
        if w.feature_edge > 0:
            l_fedge = L.feature_edge_loss(taps_a.tap3, taps_b.tap3, w.feature_edge_symmetric)
            loss = loss + w.feature_edge * l_fedge
            terms["l_fedge"] = l_fedge
        self._check(loss, ids)
        loss.backward()
        opt.step()
        return self._record("pretrain", {"loss": loss, **terms}, ids)

    def critic_step(self, real, fake, mask) -> float:
        """One critic update on both scopes; returns the summed Wasserstein estimate."""
        cfg = self.config.critic
        opt = self.optimizers["critic"]
        opt.zero_grad(set_to_none=True)
        fake = fake.detach()
        gap = C.wgan_critic_loss(self.critics["global"](real), self.critics["global"](fake))
        penalty = torch.zeros(())
        if cfg.lipschitz == "gp":
            penalty = C.lipschitz_control(self.critics["global"], cfg, real, fake, self.rng)
        local_real, local_fake = self._local_pairs(real, fake, mask)
        if local_real is not None:
            gap = C.adv_loss(gap, C.wgan_critic_loss(self.critics["local"](local_real),
                                                     self.critics["local"](local_fake)))
            if cfg.lipschitz == "gp":
                penalty = penalty + C.lipschitz_control(
                    self.critics["local"], cfg, local_real, local_fake, self.rng)
        (-gap + penalty).backward()
        opt.step()
        if cfg.lipschitz == "clip":
            for critic in self.critics.values():
                C.lipschitz_control(critic, cfg)
        return _scalar(gap)

    def adversarial_step(self, gt, mask, ids=None) -> dict:
        """``n_critic`` critic updates, then one generator update on ``L_T + L_adv``."""
        self._enter("adversarial")
        self.generator.train()
        gap = 0.0
        for _ in range(self.config.n_critic):
            with torch.no_grad():
                pred, _, _ = self.generator(gt, mask)
            gap = self.critic_step(gt, compose(gt, pred, mask), mask)

        opt = self.optimizers["generator"]
        opt.zero_grad(set_to_none=True)
        pred, composed, terms = self.generator_terms(gt, mask)
        l_adv = C.generator_adv_term(self.critics["global"](composed))
        _, local_fake = self._local_pairs(gt, composed, mask)
        if local_fake is not None:
            l_adv = C.adv_loss(l_adv, C.generator_adv_term(self.critics["local"](local_fake)))
        loss = L.final_loss(terms["l_t"], l_adv)
        self._check(loss, ids)
        loss.backward()
        opt.step()
        self.critics.zero_grad(set_to_none=True)
        out = {k: terms[k] for k in ("l_vgg", "l_rm", "l_pix")}
        return self._record("adversarial", {"loss": loss, **out, "l_adv": l_adv, "critic": gap}, ids)

    def finetune_step(self, gt, mask, ids=None) -> dict:
        """Generator-only step at the fine-tuning rate on ``L_T``."""
        self._enter("finetune")
        self.generator.train()
        opt = self.optimizers["finetune"]
        opt.zero_grad(set_to_none=True)
        _, _, terms = self.generator_terms(gt, mask)
        loss = terms["l_t"]
        self._check(loss, ids)
        loss.backward()
        opt.step()
        out = {k: terms[k] for k in ("l_vgg", "l_rm", "l_pix")}
        return self._record("finetune", {"loss": loss, **out}, ids)

    def _check(self, loss, ids):
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step} ({self.phase}); batch ids: {ids}"
            )

    # state ----------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CKPT_MAGIC.decode(),
            "version": CKPT_VERSION,
            "config": self.config.to_dict(),
            "generator": self.generator.state_dict(),
            "critics": self.critics.state_dict(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "step": self.step,
            "phase": self.phase,
            "phase_done": dict(self.phase_done),
            "rng": self.rng.get_state(),
            "dropout_rng": self.generator.rng.get_state(),
            "history": list(self.history),
        }

    def load_state_dict(self, state: dict) -> None:
        self.generator.load_state_dict(state["generator"])
        self.critics.load_state_dict(state["critics"])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.step = int(state["step"])
        self.phase = state["phase"]
        self.phase_done = {p: int(state["phase_done"].get(p, 0)) for p in PHASES}
        self.rng.set_state(state["rng"])
        self.generator.rng.set_state(state["dropout_rng"])
        self.history.clear()
        self.history.extend(state["history"])


# checkpoints ------------------------------------------------------------------


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write ``magic version\\nsha256\\npayload`` atomically."""
    buf = io.BytesIO()
    torch.save(trainer.state_dict(), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest().encode()
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CKPT_MAGIC + b" %d\n" % CKPT_VERSION + digest + b"\n" + payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> dict:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    header, _, rest = raw.partition(b"\n")
    digest, _, payload = rest.partition(b"\n")
    magic, _, version = header.partition(b" ")
    if magic != CKPT_MAGIC:
        raise CheckpointIntegrityError(f"{path} is not a checkpoint (bad header)")
    if version.strip() != str(CKPT_VERSION).encode():
        raise CheckpointVersionError(
            f"{path} has checkpoint format {version.decode(errors='replace')}, expected {CKPT_VERSION}"
        )
    if hashlib.sha256(payload).hexdigest().encode() != digest:
        raise CheckpointIntegrityError(f"{path} failed checksum (truncated or corrupted)")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def load_checkpoint(path, extractor: L.FeatureExtractor | None = None) -> Trainer:
    state = read_checkpoint(path)
    trainer = Trainer(RunConfig.from_dict(state["config"]), extractor)
    trainer.load_state_dict(state)
    return trainer


# data ----------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Images ``(N, 3, H, W)`` and a mask pool ``(M, 1, H, W)`` with their ids."""

    images: torch.Tensor
    masks: torch.Tensor
    image_ids: list[str]
    mask_ids: list[str]

    def batch(self, seed: int, step: int, batch_size: int):
        """The batch for a global step: a pure function of ``(seed, step)``.

        Images follow a per-epoch seeded permutation; each image is paired
        with a mask drawn by a per-step seeded generator.
        """
        n = len(self.images)
        idx = []
        for k in range(step * batch_size, (step + 1) * batch_size):
            epoch, pos = divmod(k, n)
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            idx.append(int(perm[pos]))
        mask_idx = np.random.default_rng([seed, step, 1]).integers(0, len(self.masks), size=len(idx))
        ids = [f"{self.image_ids[i]}|{self.mask_ids[j]}" for i, j in zip(idx, mask_idx)]
        return self.images[idx], self.masks[mask_idx.tolist()], ids

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, math.ceil(len(self.images) / batch_size))


def load_training_data(cfg: RunConfig) -> TrainingData:
    if not cfg.data.images or not cfg.data.masks:
        raise ValueError("config data.images and data.masks are required for training")
    image_ids, mask_ids = list_ids(cfg.data.images), list_ids(cfg.data.masks)
    if not image_ids or not mask_ids:
        raise ValueError(f"no training files under {cfg.data.images} / {cfg.data.masks}")
    images = torch.stack([load_image(resolve_path(cfg.data.images, i), cfg.resolution) for i in image_ids])
    masks = torch.stack([load_mask(resolve_path(cfg.data.masks, m), cfg.resolution,
                                   cfg.data.mask_white_is_hole) for m in mask_ids])
    return TrainingData(images, masks, image_ids, mask_ids)


def phase_steps(cfg: RunConfig, phase: str, data: TrainingData) -> int:
    if phase == "pretrain":
        return cfg.pretrain.steps
    if phase == "adversarial":
        if cfg.adversarial.steps is not None:
            return cfg.adversarial.steps
        return cfg.adversarial.epochs * data.steps_per_epoch(cfg.batch_size)
    return cfg.finetune.steps


class LossLog:
    """Append-only CSV of per-step loss terms."""

    def __init__(self, path, seed: int | None = None):
        self.path = os.fspath(path)
        new = not os.path.exists(self.path)
        self.fh = open(self.path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=LOG_COLUMNS, extrasaction="ignore",
                                     lineterminator="\n")
        if new:
            if seed is not None:
                self.fh.write(f"# seed={seed}\n")
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def close(self):
        self.fh.close()


def run_phase(trainer: Trainer, phase: str, data: TrainingData, steps: int | None = None,
              loss_log: LossLog | None = None, checkpoint_dir=None, checkpoint_every: int = 0,
              callback=None) -> list[dict]:
    """Run ``steps`` optimization steps of ``phase`` over ``data``."""
    cfg = trainer.config
    step_fn = {"pretrain": trainer.pretrain_step, "adversarial": trainer.adversarial_step,
               "finetune": trainer.finetune_step}[phase]
    n = phase_steps(cfg, phase, data) if steps is None else steps
    rows = []
    for _ in range(n):
        gt, mask, ids = data.batch(cfg.seed, trainer.step, cfg.batch_size)
        row = step_fn(gt, mask, ids=ids)
        rows.append(row)
        if loss_log is not None:
            loss_log.write(row)
        if checkpoint_dir and checkpoint_every and trainer.step % checkpoint_every == 0:
            save_checkpoint(trainer, os.path.join(checkpoint_dir, f"step{trainer.step:07d}.ckpt"))
        if callback is not None:
            callback(trainer, row)
    log.info("%s: %d steps, last loss %.5f", phase, n, rows[-1]["loss"] if rows else float("nan"))
    return rows


# test-time optimization --------------------------------------------------------------


@dataclass
class TestTimeResult:
    image: torch.Tensor
    objectives: list[float]
    perturbation: torch.Tensor
    accepted: int


def stochastic_clip(x: torch.Tensor, bound: float, generator: torch.Generator) -> torch.Tensor:
    """Resample coordinates outside ``[-bound, bound]`` uniformly inside the range."""
    fresh = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * bound
    return torch.where(x.abs() > bound, fresh, x)


def test_time_objective(generator: Generator, extractor, masked, mask, delta, w: L.LossWeights):
    pred, _, _ = generator(masked + delta, mask)
    l_c = L.contextual_loss(masked, pred, mask, extractor)
    l_p = L.perceptual_loss(apply_mask(masked, mask), apply_mask(pred, mask), extractor)
    return w.tt_contextual * l_c + w.tt_perceptual * l_p, pred


def test_time_optimize(generator: Generator, extractor, gt_masked, mask, iters: int,
                       weights: L.LossWeights | None = None, lr: float = 0.05, bound: float = 1.0,
                       seed: int = 0, callback=None) -> TestTimeResult:
    """Optimize an additive input perturbation with the network frozen.

    Minimizes ``0.4 * contextual + 0.6 * perceptual`` by gradient descent
    with max-norm normalized steps (``lr`` bounds the per-coordinate move);
    out-of-range perturbation coordinates are resampled (stochastic clipping)
    and a step is only accepted when it does not raise the objective,
    otherwise the step size is halved.
    """
    if iters <= 0:
        raise ValueError(f"iters must be positive, got {iters}")
    w = weights or L.LossWeights()
    batched = gt_masked.ndim == 4
    masked = apply_mask(gt_masked if batched else gt_masked[None], mask if batched else mask[None])
    m = mask if batched else mask[None]
    g = torch.Generator().manual_seed(seed)
    was_training = generator.training
    flags = [p.requires_grad for p in generator.parameters()]
    generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)
    try:
        delta = torch.zeros_like(masked)
        with torch.no_grad():
            best, pred = test_time_objective(generator, extractor, masked, m, delta, w)
        objectives, accepted, step = [float(best)], 0, lr
        for _ in range(iters):
            d = delta.clone().requires_grad_(True)
            obj, _ = test_time_objective(generator, extractor, masked, m, d, w)
            (grad,) = torch.autograd.grad(obj, d)
            with torch.no_grad():
                # normalized step: ``step`` is the largest per-coordinate move
                scale = grad.abs().max().clamp_min(1e-12)
                cand = stochastic_clip(delta - step * grad / scale, bound, g)
                value, cand_pred = test_time_objective(generator, extractor, masked, m, cand, w)
            if float(value) <= float(best):
                delta, best, pred, accepted = cand, value, cand_pred, accepted + 1
            else:
                step *= 0.5
            objectives.append(float(best))
            if callback is not None:
                callback(delta)
    finally:
        for p, flag in zip(generator.parameters(), flags):
            p.requires_grad_(flag)
        generator.train(was_training)
    image = compose(masked, pred.detach(), m)
    if not batched:
        image, delta = image[0], delta[0]
    return TestTimeResult(image, objectives, delta, accepted)


# keep pytest from collecting these when imported into test modules
TestTimeResult.__test__ = False
test_time_objective.__test__ = False
test_time_optimize.__test__ = False
