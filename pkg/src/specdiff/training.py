"""Training loop, configuration and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .diffnet import (
    ArchConfig,
    CheckpointError,
    decode_params,
    difference_forward,
    encode_params,
    init_params,
    mask_forward,
)
from .losses import BORDER_MARGIN, IRRELEVANCE_TEMPERATURE, defect_loss, irrelevance_loss, target_one_peak, total_loss
from .registration import register, warp_sim2
from .simgen import GenConfig, gen_pair, pair_seed, read_dataset

__all__ = [
    "TrainConfig",
    "TrainingSet",
    "Trainer",
    "NumericalError",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config_file",
    "load_training_set",
    "align_template",
]

log = logging.getLogger(__name__)
ALIGNMENTS = ("estimated", "ground_truth")


class NumericalError(FloatingPointError):
    """Raised when a training loss stops being finite."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    """Training run settings.

    ``dataset`` points to a directory written by :func:`write_dataset`.
    Without it, ``train_size`` pairs are generated in memory from ``gen``
    (``stream=True`` instead draws fresh pairs every epoch).
    """

    dataset: str | None = None
    train_size: int = 2000
    image_size: int = 128
    gen: dict = field(default_factory=dict)
    stream: bool = False
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    sigma_bins: float = 2.0
    defect_pos_weight: float = 50.0
    irr_temperature: float = IRRELEVANCE_TEMPERATURE
    reg_temperature: float = 10.0
    alignment: str = "estimated"
    base_width: int = 16
    depth: int = 4
    seed: int = 0
    checkpoint_interval: int = 0
    max_steps: int | None = None
    out_dir: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.train_size < 1:
            raise ValueError("epochs, batch_size and train_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid optimizer hyperparameters")
        if (self.irr_temperature <= 0 or self.reg_temperature <= 0 or self.sigma_bins < 0
                or self.defect_pos_weight <= 0):
            raise ValueError("invalid loss options")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    def arch(self):
        return ArchConfig(base_width=self.base_width, depth=self.depth)

    def gen_config(self):
        # the default shift envelope is stated for 256 px images
        reach = 50.0 * self.image_size / 256
        d = {"image_size": self.image_size, "seed": self.seed, "translation": (-reach, reach)}
        d.update(self.gen)
        return GenConfig.from_dict(d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainConfig keys: {sorted(extra)}")
        return cls(**d)


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_file(path):
    """Read a flat ``key = value`` file.  Values are parsed as JSON when
    possible (numbers, booleans, lists, null) and kept as strings otherwise."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = _coerce(value)
    return out


# ---------------------------------------------------------------- data


class TrainingSet:
    """Aligned templates, sources and masks held as float32 stacks.

    Registration is frozen, so each pair is aligned once up front.
    """

    def __init__(self, aligned, source, mask, ids=None):
        self.aligned = np.ascontiguousarray(aligned, dtype=np.float32)
        self.source = np.ascontiguousarray(source, dtype=np.float32)
        self.mask = np.ascontiguousarray(mask, dtype=np.float32)
        self.ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(self.source))]

    def __len__(self):
        return len(self.source)

    @classmethod
    def from_pairs(cls, pairs, alignment="estimated", temperature=10.0):
        aligned, source, mask = [], [], []
        for p in pairs:
            aligned.append(align_template(p, alignment, temperature))
            source.append(p.source)
            mask.append(p.gt_mask)
        ids = [p.pair_id or f"{i:06d}" for i, p in enumerate(pairs)]
        return cls(np.stack(aligned), np.stack(source), np.stack(mask), ids)

    def batch(self, idx):
        return (
            torch.from_numpy(self.aligned[idx]),
            torch.from_numpy(self.source[idx]),
            torch.from_numpy(self.mask[idx]),
        )


def align_template(pair, alignment="estimated", temperature=10.0):
    if alignment == "ground_truth":
        if pair.gt_pose is None:
            raise ValueError("ground-truth alignment needs pairs with a known pose")
        return warp_sim2(pair.template, pair.gt_pose)
    return register(pair.template, pair.source, temperature=temperature).aligned_template


def _generated_pairs(cfg, epoch=None):
    gcfg = cfg.gen_config()
    base = cfg.seed if epoch is None else pair_seed(cfg.seed, 1_000_000 + epoch)
    return [gen_pair(pair_seed(base, i), gcfg) for i in range(cfg.train_size)]


def load_training_set(cfg, epoch=None):
    if cfg.dataset:
        pairs = read_dataset(cfg.dataset)
        if not pairs:
            raise ValueError(f"dataset {cfg.dataset} is empty")
    else:
        pairs = _generated_pairs(cfg, epoch)
    return TrainingSet.from_pairs(pairs, cfg.alignment, cfg.reg_temperature)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net, optimizer, step, cfg):
    extra, header_state = [], []
    for (name, p) in net.named_tensors():
        st = optimizer.state.get(p)
        if not st:
            continue
        header_state.append([name, int(st["step"])])
        extra += [(f"adam.{name}.exp_avg", st["exp_avg"]), (f"adam.{name}.exp_avg_sq", st["exp_avg_sq"])]
    blob = encode_params(
        net,
        extra_header={"kind": "train", "step": int(step), "config": cfg.to_dict(), "adam_steps": header_state},
        extra_tensors=extra,
    )
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(net, optimizer_state, step, config)``.

    ``optimizer_state`` maps tensor names to ``(step, exp_avg, exp_avg_sq)``.
    Plain parameter files load with an empty optimizer state and step 0.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    net, header, arrays = decode_params(blob)
    state = {}
    for name, n in header.get("adam_steps", []):
        state[name] = (n, arrays[f"adam.{name}.exp_avg"], arrays[f"adam.{name}.exp_avg_sq"])
    cfg = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    return net, state, int(header.get("step", 0)), cfg


def _restore_optimizer(optimizer, net, state):
    dtype = next(net.parameters()).dtype
    for name, p in net.named_tensors():
        if name not in state:
            continue
        n, m, v = state[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(n)),
            "exp_avg": torch.from_numpy(m.copy()).to(dtype),
            "exp_avg_sq": torch.from_numpy(v.copy()).to(dtype),
        }


# ---------------------------------------------------------------- loop


class Trainer:
    """Owns the network, optimizer and data order for one run."""

    def __init__(self, cfg, data=None, resume=None):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        if resume is not None:
            net, state, step, _ = load_checkpoint(resume)
            if net.arch != cfg.arch():
                raise CheckpointError("checkpoint architecture differs from config")
            self.net = net.float()
            self.step = step
        else:
            self.net = init_params(cfg.seed, cfg.arch())
            state, self.step = {}, 0
        self.optimizer = torch.optim.Adam(
            self.net.parameters(),
            lr=cfg.learning_rate,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            foreach=False,
        )
        _restore_optimizer(self.optimizer, self.net, state)
        self.target = target_one_peak(256, cfg.sigma_bins)
        self._data = data
        self._data_epoch = None
        self._prefetch = None
        self.history = []

    @property
    def out_dir(self):
        return Path(self.cfg.out_dir) if self.cfg.out_dir else None

    def data_for(self, epoch):
        if self._data is not None and not self.cfg.stream:
            return self._data
        if self.cfg.stream:
            if self._data_epoch != epoch:
                self._data = self._take_prefetched(epoch) or load_training_set(self.cfg, epoch)
                self._data_epoch = epoch
                self._start_prefetch(epoch + 1)
            return self._data
        self._data = load_training_set(self.cfg)
        return self._data

    def _start_prefetch(self, epoch):
        # each epoch's stream is a pure function of (cfg, epoch), so building it
        # on a worker thread cannot change what the optimizer sees
        if epoch >= self.cfg.epochs:
            return
        pool = ThreadPoolExecutor(max_workers=1)
        self._prefetch = (epoch, pool.submit(load_training_set, self.cfg, epoch))
        pool.shutdown(wait=False)

    def _take_prefetched(self, epoch):
        pending, self._prefetch = self._prefetch, None
        if pending is None or pending[0] != epoch:
            return None
        return pending[1].result()

    def steps_per_epoch(self):
        n = len(self._data) if self._data is not None else self.cfg.train_size
        return math.ceil(n / self.cfg.batch_size)

    def order(self, epoch, n):
        rng = np.random.default_rng([self.cfg.seed, epoch])
        return rng.permutation(n)

    def compute_loss(self, aligned, source, mask):
        template_only, source_only = difference_forward(self.net, aligned, source)
        if not (torch.isfinite(template_only).all() and torch.isfinite(source_only).all()):
            raise FloatingPointError("non-finite network output")
        fused = mask_forward(self.net, template_only, source_only)
        irr = irrelevance_loss(template_only, source_only, self.target, self.cfg.irr_temperature)
        dfl = defect_loss(fused, mask, BORDER_MARGIN, self.cfg.defect_pos_weight)
        return irr, dfl

    def train_step(self, batch):
        aligned, source, mask = batch
        self.optimizer.zero_grad(set_to_none=True)
        try:
            irr, dfl = self.compute_loss(aligned, source, mask)
            loss = total_loss(irr, dfl)
        except FloatingPointError as exc:
            raise NumericalError(str(exc), snapshot=batch) from exc
        loss.value.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.grad_clip, foreach=False)
        self.optimizer.step()
        return loss.as_floats()

    def _write_log(self, record):
        if self.out_dir is None:
            return
        with open(self.out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _dump_snapshot(self, batch, idx):
        if self.out_dir is None:
            return None
        path = self.out_dir / f"nonfinite_step{self.step:06d}.npz"
        aligned, source, mask = (t.numpy() for t in batch)
        np.savez(path, aligned=aligned, source=source, mask=mask, indices=np.asarray(idx))
        return path

    def checkpoint(self, name=None):
        if self.out_dir is None:
            return None
        path = self.out_dir / (name or f"checkpoint_{self.step:06d}.ckpt")
        save_checkpoint(path, self.net, self.optimizer, self.step, self.cfg)
        return path

    def run(self):
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        first = self.data_for(0)
        spe = math.ceil(len(first) / cfg.batch_size)
        total = cfg.epochs * spe if cfg.max_steps is None else min(cfg.max_steps, cfg.epochs * spe)
        epoch_losses = {}
        while self.step < total:
            epoch, k = divmod(self.step, spe)
            data = self.data_for(epoch)
            order = self.order(epoch, len(data))
            idx = np.sort(order[k * cfg.batch_size : (k + 1) * cfg.batch_size])
            batch = data.batch(idx)
            try:
                losses = self.train_step(batch)
            except NumericalError as exc:
                exc.snapshot = self._dump_snapshot(batch, idx)
                raise
            self.step += 1
            record = {"kind": "step", "step": self.step, "epoch": epoch + 1, **losses}
            self._write_log(record)
            epoch_losses.setdefault(epoch, []).append(losses)
            if cfg.checkpoint_interval and self.step % cfg.checkpoint_interval == 0:
                self.checkpoint()
            if k == spe - 1:
                summary = self._epoch_summary(epoch, epoch_losses.pop(epoch))
                log.info("epoch %d: total %.4f irr %.4f def %.5f", epoch + 1,
                         summary["total"], summary["irr"], summary["def"])
        if epoch_losses:
            for epoch, items in sorted(epoch_losses.items()):
                self._epoch_summary(epoch, items, partial=True)
        self.checkpoint("final.ckpt")
        return self

    def _epoch_summary(self, epoch, items, partial=False):
        rec = {
            "kind": "epoch",
            "epoch": epoch + 1,
            "steps": len(items),
            "partial": partial,
            **{k: float(np.mean([it[k] for it in items])) for k in ("total", "irr", "def")},
        }
        self.history.append(rec)
        self._write_log(rec)
        return rec


def train(cfg, data=None, resume=None):
    """Run training to completion and return the :class:`Trainer`."""
    return Trainer(cfg, data=data, resume=resume).run()
