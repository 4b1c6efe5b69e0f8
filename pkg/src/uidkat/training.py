"""Unpaired two-domain training: data ingestion, synthetic haze generation,
the alternating generator/discriminator loop, and checkpointing."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .losses import (DEFAULT_LOCATIONS, DEFAULT_TAU, LossWeights,
                     identity_grad, identity_loss, lsgan_discriminator_grads,
                     lsgan_discriminator_loss, lsgan_generator_grad,
                     lsgan_generator_loss, patch_nce_loss,
                     total_generator_loss)
from .networks import (build_variant, generator_config, load_model_tensors,
                       load_tensors, named_model_tensors, save_tensors)
from .tensor import Adam, ShapeError

log = logging.getLogger("uidkat")

LOG_HEADER = "step,epoch,lr,adv_g,ide,pc,total_g,adv_d"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class TrainingDivergedError(RuntimeError):
    """Raised when any loss term turns NaN/Inf; carries a diagnostic dump."""


def substream(seed, label):
    """Counter-based RNG derived from (seed, label).

    Streams for distinct labels are independent, so adding a new consumer
    never perturbs existing draw sequences.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class TrainConfig:
    variant: str = "S"
    epochs: int = 100
    decay_start_epoch: int = 50
    lr: float = 2e-4
    batch_size: int = 1
    image_size: int = 256
    seed: int = 0
    tau: float = DEFAULT_TAU
    locations: int = DEFAULT_LOCATIONS
    weights: LossWeights = field(default_factory=LossWeights)
    hazy_dir: str = ""
    clean_dir: str = ""
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    flip: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.decay_start_epoch < self.epochs:
            raise ValueError("need 0 < decay_start_epoch < epochs")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        w = d.pop("weights")
        d.update(w_adv=w["adversarial"], w_idt=w["identity"],
                 w_nce=w["contrastive"])
        return d

    @classmethod
    def from_dict(cls, mapping):
        """Build from flat key=value entries (strings coerced per field)."""
        mapping = dict(mapping)
        weights = LossWeights(
            adversarial=float(mapping.pop("w_adv", 1.0)),
            identity=float(mapping.pop("w_idt", 1.0)),
            contrastive=float(mapping.pop("w_nce", 5.0)))
        kwargs = {"weights": weights}
        for f in dataclasses.fields(cls):
            if f.name == "weights" or f.name not in mapping:
                continue
            raw = mapping.pop(f.name)
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = raw
        if mapping:
            raise ValueError(f"unknown config keys: {sorted(mapping)}")
        return cls(**kwargs)


def lr_at(epoch, cfg):
    """Constant lr until decay_start_epoch, then linear decay to zero."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _decode_image(path, size):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def load_image_folder(directory, size):
    """Decode every PNG/JPEG in a folder to CHW float32 in [-1, 1].

    Undecodable files are skipped with a warning; an empty result is an
    error.  Order is lexicographic by filename.
    """
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise FileNotFoundError(f"no PNG/JPEG images in {directory}")
    images = []
    for name in names:
        try:
            images.append(_decode_image(os.path.join(directory, name), size))
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", name, exc)
    if not images:
        raise FileNotFoundError(f"no decodable images in {directory}")
    return images


class UnpairedDataset:
    """Two independently sampled image domains.

    Epoch length is max(len(hazy), len(clean)); the smaller domain wraps
    around.  Shuffles are derived from (seed, epoch) so every epoch's draw
    order is reproducible in isolation.
    """

    def __init__(self, hazy, clean):
        if not hazy or not clean:
            raise ValueError("both domains need at least one image")
        self.hazy = hazy
        self.clean = clean

    @classmethod
    def from_folders(cls, hazy_dir, clean_dir, image_size):
        return cls(load_image_folder(hazy_dir, image_size),
                   load_image_folder(clean_dir, image_size))

    def __len__(self):
        return max(len(self.hazy), len(self.clean))

    def epoch_pairs(self, seed, epoch, batch_size=1, flip=False):
        rng = substream(seed, f"shuffle-epoch-{epoch}")
        ph = rng.permutation(len(self.hazy))
        pc = rng.permutation(len(self.clean))
        n = len(self)
        for start in range(0, n - n % batch_size, batch_size):
            idx = range(start, start + batch_size)
            x = np.stack([self.hazy[ph[i % len(ph)]] for i in idx])
            y = np.stack([self.clean[pc[i % len(pc)]] for i in idx])
            if flip and rng.random() < 0.5:
                x = x[..., ::-1].copy()
                y = y[..., ::-1].copy()
            yield x, y


def synthesize_haze(clean, rng=None, t=None, airlight=None):
    """Atmospheric scattering model I = J*t + A*(1 - t) on a [0,1] image.

    Unspecified t draws uniform from [0.4, 0.8] per image; unspecified
    airlight draws uniform from [0.7, 1.0].
    """
    clean = np.asarray(clean)
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise ValueError("clean image must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    if t is None:
        t = rng.uniform(0.4, 0.8)
    if airlight is None:
        airlight = rng.uniform(0.7, 1.0)
    if not 0.0 < t <= 1.0:
        raise ValueError("transmission t must lie in (0, 1]")
    if not 0.7 <= airlight <= 1.0:
        raise ValueError("airlight must lie in [0.7, 1.0]")
    return clean * t + airlight * (1.0 - t)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Owns the model triple, both optimizers, and the step/epoch counters."""

    def __init__(self, cfg: TrainConfig, models=None):
        self.cfg = cfg
        if models is None:
            models = build_variant(cfg.variant, substream(cfg.seed, "init"))
        self.gen, self.disc, self.heads = models
        self.opt_g = Adam([self.gen] + self.heads, lr=cfg.lr)
        self.opt_d = Adam([self.disc], lr=cfg.lr)
        self.patch_rng = substream(cfg.seed, "patch-sampling")
        self.step = 0
        self.epoch = 0

    def _zero_all(self):
        self.gen.zero_grads()
        self.disc.zero_grads()
        for head in self.heads:
            head.zero_grads()

    def restore(self, x):
        """Plain forward pass of the generator on a [-1, 1] batch."""
        y, _, _ = self.gen.forward(x)
        return y

    def train_step(self, x, y, lr=None):
        """One generator update followed by one discriminator update.

        Returns the scalar log record.  Raises TrainingDivergedError with a
        diagnostic dump if any loss term is non-finite.
        """
        cfg = self.cfg
        w = cfg.weights
        if lr is None:
            lr = lr_at(self.epoch, cfg)
        self._zero_all()

        # Generator phase -------------------------------------------------
        fake, stack_x, cache_g = self.gen.forward(x)
        stack_f, cache_f = self.gen.forward_features(fake)
        idt, _, cache_i = self.gen.forward(y)
        fake_logits, cache_df = self.disc.forward(fake)

        adv_g = lsgan_generator_loss(fake_logits)
        ide = identity_loss(idt, y)
        nce = patch_nce_loss(stack_x, stack_f, self.heads, cfg.locations,
                             self.patch_rng, tau=cfg.tau, compute_grads=True,
                             grad_scale=w.contrastive)
        total_g = total_generator_loss(adv_g, ide, nce.loss, w)

        g_fake = self.disc.backward(
            cache_df, lsgan_generator_grad(fake_logits) * w.adversarial)
        g_fake = g_fake + self.gen.backward_features(cache_f, nce.output_grads)
        self.gen.backward(cache_g, g_fake, stack_grads=nce.input_grads)
        self.gen.backward(cache_i, identity_grad(idt, y) * w.identity)
        self.opt_g.step(lr=lr)

        # Discriminator phase (adversarial backward above polluted its
        # grads; the fake batch is already detached from G here).
        self.disc.zero_grads()
        real_logits, cache_dr = self.disc.forward(y)
        adv_d = lsgan_discriminator_loss(real_logits, fake_logits)
        g_real, g_fake_d = lsgan_discriminator_grads(real_logits, fake_logits)
        self.disc.backward(cache_dr, g_real)
        self.disc.backward(cache_df, g_fake_d)
        self.opt_d.step(lr=lr)

        self.step += 1
        record = {"step": self.step, "epoch": self.epoch, "lr": lr,
                  "adv_g": adv_g, "ide": ide, "pc": nce.loss,
                  "total_g": total_g, "adv_d": adv_d}
        if not all(np.isfinite(v) for v in
                   (adv_g, ide, nce.loss, total_g, adv_d)):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step}: {record}")
        return record

    # -- checkpointing ---------------------------------------------------

    def _named_tensors(self):
        tensors = named_model_tensors(self.gen, self.disc, self.heads)
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for i, (_, _, _, state) in enumerate(opt.entries):
                tensors.append((f"{tag}.{i}.m", state.m))
                tensors.append((f"{tag}.{i}.v", state.v))
        return tensors

    def save_checkpoint(self, directory):
        save_tensors(directory, self._named_tensors())
        state = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "opt_t": {"opt_g": [s.t for *_, s in self.opt_g.entries],
                      "opt_d": [s.t for *_, s in self.opt_d.entries]},
            "patch_rng": _rng_state_to_json(self.patch_rng),
        }
        with open(os.path.join(directory, "state.json"), "w") as f:
            json.dump(state, f, indent=1)

    @classmethod
    def load_checkpoint(cls, directory):
        with open(os.path.join(directory, "state.json")) as f:
            state = json.load(f)
        cfg = TrainConfig.from_dict(state["config"])
        trainer = cls(cfg)
        tensors = load_tensors(directory)
        load_model_tensors(tensors, trainer.gen, trainer.disc, trainer.heads)
        for tag, opt in (("opt_g", trainer.opt_g), ("opt_d", trainer.opt_d)):
            for i, (_, _, _, st) in enumerate(opt.entries):
                st.m[...] = tensors[f"{tag}.{i}.m"]
                st.v[...] = tensors[f"{tag}.{i}.v"]
                st.t = state["opt_t"][tag][i]
        trainer.step = state["step"]
        trainer.epoch = state["epoch"]
        _rng_state_from_json(trainer.patch_rng, state["patch_rng"])
        return trainer

    # -- full loop ---------------------------------------------------------

    def fit(self, dataset, log_path=None, checkpoint_dir=None,
            callback=None):
        """Run the configured number of epochs over an UnpairedDataset.

        Appends one CSV row per step to ``log_path`` and writes a
        checkpoint every ``checkpoint_every`` epochs plus a final one.
        """
        cfg = self.cfg
        writer = _LogWriter(log_path) if log_path else None
        try:
            for epoch in range(self.epoch, cfg.epochs):
                self.epoch = epoch
                lr = lr_at(epoch, cfg)
                for x, y in dataset.epoch_pairs(cfg.seed, epoch,
                                                cfg.batch_size, cfg.flip):
                    record = self.train_step(x, y, lr=lr)
                    if writer:
                        writer.append(record)
                    if callback:
                        callback(record)
                if checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
                    self.save_checkpoint(checkpoint_dir)
            self.epoch = cfg.epochs
            if checkpoint_dir:
                self.save_checkpoint(checkpoint_dir)
        finally:
            if writer:
                writer.close()
        return self


class _LogWriter:
    """Append-only CSV writer with a fixed numeric format for bitwise
    reproducibility of identical runs."""

    def __init__(self, path):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        fresh = not (os.path.exists(path) and os.path.getsize(path) > 0)
        self.f = open(path, "a")
        if fresh:
            self.f.write(LOG_HEADER + "\n")

    def append(self, r):
        self.f.write("%d,%d,%.8e,%.8e,%.8e,%.8e,%.8e,%.8e\n" % (
            r["step"], r["epoch"], r["lr"], r["adv_g"], r["ide"], r["pc"],
            r["total_g"], r["adv_d"]))
        self.f.flush()

    def close(self):
        self.f.close()


def _rng_state_to_json(gen):
    return json.loads(json.dumps(gen.bit_generator.state, default=_np_json))


def _np_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _rng_state_from_json(gen, state):
    current = gen.bit_generator.state
    restored = dict(state)
    for key, value in current.get("state", {}).items():
        if isinstance(value, np.ndarray):
            restored["state"][key] = np.asarray(
                state["state"][key], dtype=value.dtype)
    gen.bit_generator.state = restored
