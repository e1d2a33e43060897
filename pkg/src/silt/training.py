"""Two-branch training: shared-weight branches, alternating D/G updates, checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import config as config_mod
from .config import TrainConfig
from .data import DatasetLayout, ImageStore, StyleReferenceSet, enumerate_pairs, sample_style_batch
from .imaging import from_network, pad_to_multiple, to_image, to_network, to_tensor
from .losses import (
    LossReport,
    build_extractor,
    loss_content,
    loss_decomposition,
    loss_gan_discriminator,
    loss_gan_generator,
    loss_output_similarity,
    loss_reflectance,
    total_generator_loss,
)
from .networks import ModelBundle, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", *LossReport.field_names()]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, iteration: int):
        super().__init__(f"non-finite {term} = {value} at iteration {iteration}")
        self.term = term
        self.value = value
        self.iteration = iteration


def build_extractor_from(cfg: TrainConfig):
    e = cfg.extractor
    return build_extractor(e.kind, seed=e.seed, widths=e.widths, weights_path=e.weights_path)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Constant for the first ``decay_start`` fraction, then linear to zero."""
    start = cfg.decay_start * cfg.max_iterations
    if iteration < start or cfg.max_iterations <= start:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.max_iterations - iteration) / (cfg.max_iterations - start))


class Trainer:
    """Owns the networks, optimisers and the iteration counter.

    The data schedule is a pure function of ``(seed, iteration)``, so a
    trainer restored from a checkpoint continues exactly where the original
    left off.
    """

    def __init__(self, cfg: TrainConfig, layout: DatasetLayout | None = None, store: ImageStore | None = None,
                 refs: StyleReferenceSet | None = None, extractor=None):
        cfg.validate()
        self.cfg = cfg
        self.weights = cfg.effective_weights()
        torch.manual_seed(cfg.seed)
        if extractor is None and self.weights.enabled("l_cp"):
            extractor = build_extractor_from(cfg)
        self.bundle = ModelBundle(cfg.model_config(), extractor)
        g_params = list(self.bundle.generator.parameters())
        if self.bundle.learnt:
            g_params += list(self.bundle.decomposition_net.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.bundle.discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.iteration = 0
        self.running: dict = {}
        self.layout = layout
        self.store = store or ImageStore(cfg.image_size)
        self.refs = refs if refs is not None else (layout.style_references() if layout is not None and layout.style_tag else None)
        self.loss_hooks: list[Callable] = []
        self._epoch_cache: tuple | None = None

    # -- schedule ---------------------------------------------------------

    def _epoch_pairs(self, epoch: int):
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            pairs = enumerate_pairs(self.layout.scenes, self.layout.input_tags, self.cfg.seed, epoch)
            self._epoch_cache = (epoch, pairs)
        return self._epoch_cache[1]

    def batches_per_epoch(self) -> int:
        n_pairs = len(self._epoch_pairs(0))
        return math.ceil(n_pairs / self.cfg.batch_size)

    def batch_for(self, iteration: int):
        per_epoch = self.batches_per_epoch()
        epoch, k = divmod(iteration, per_epoch)
        pairs = self._epoch_pairs(epoch)
        b = self.cfg.batch_size
        return pairs[k * b:(k + 1) * b]

    def style_for(self, iteration: int):
        if self.refs is None or len(self.refs) == 0:
            raise config_mod.ConfigError("training needs a non-empty style reference set")
        return sample_style_batch(self.refs, self.cfg.batch_size, [self.cfg.seed, 1, iteration], self.store)

    # -- one update -------------------------------------------------------

    def _audit(self, term, *tensors):
        for hook in self.loss_hooks:
            hook(term, tensors)

    def _finite(self, term, value):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(term, v, self.iteration)

    def forward_branches(self, xa, xb):
        """Shared-weight forward of both branches on network-domain batches."""
        b = self.bundle
        x = torch.cat([xa, xb])
        out, r, s, s_hat = b.relight(x, return_maps=True)
        n = xa.shape[0]

        def split(t):
            return t[:n], t[n:]

        res = {"out": split(out), "s_hat": split(s_hat)}
        if b.learnt:
            res["r"] = split(r)
            res["s"] = split(s)
            res["r_all"], res["s_all"] = r, s
        return res

    def train_step(self, pairs, style: torch.Tensor) -> LossReport:
        cfg, w, bundle = self.cfg, self.weights, self.bundle
        G, D = bundle.generator, bundle.discriminator
        lr = lr_at(cfg, self.iteration)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

        xa = torch.cat([self.store.tensor(p.path_a) for p in pairs])
        xb = torch.cat([self.store.tensor(p.path_b) for p in pairs])
        ia, ib = from_network(xa), from_network(xb)
        self._audit("style_batch", style)

        G.train()
        D.train()
        fwd = self.forward_branches(xa, xb)
        out_a, out_b = fwd["out"]
        fake = to_network(torch.cat([out_a, out_b]))

        # discriminator update
        self._audit("l_d", style, fake)
        l_d = loss_gan_discriminator(D(style), D(fake.detach()))
        self._finite("l_d", l_d)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()

        # generator + decomposition update, D frozen
        for p in D.parameters():
            p.requires_grad_(False)
        try:
            terms = {}
            if w.enabled("l_g"):
                self._audit("l_g", fake)
                terms["l_g"] = loss_gan_generator(D(fake))
            if w.enabled("l_os"):
                self._audit("l_os", out_a, out_b)
                terms["l_os"] = loss_output_similarity(out_a, out_b, w.os_includes_l1, w.os_includes_gradient)
            if w.enabled("l_cp"):
                self._audit("l_cp", ia, out_a, ib, out_b)
                # both branches are equal-sized, so twice the pooled mean is the per-branch sum
                terms["l_cp"] = 2 * loss_content(bundle.extractor, torch.cat([ia, ib]), torch.cat([out_a, out_b]))
            if bundle.learnt:
                r_a, r_b = fwd["r"]
                s_a, s_b = fwd["s"]
                if w.enabled("l_dcp"):
                    self._audit("l_dcp", ia, r_a, s_a, ib, r_b, s_b)
                    terms["l_dcp"] = 2 * loss_decomposition(torch.cat([ia, ib]), fwd["r_all"], fwd["s_all"])
                if w.enabled("l_r"):
                    self._audit("l_r", r_a, r_b)
                    terms["l_r"] = loss_reflectance(r_a, r_b)
            for name, value in terms.items():
                self._finite(name, value)
            total, report = total_generator_loss(terms, w)
            self.opt_g.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
            self.opt_g.step()
        finally:
            for p in D.parameters():
                p.requires_grad_(True)

        report.l_d = report.total_d = float(l_d.detach())
        self.iteration += 1
        for k, v in report.as_dict().items():
            self.running[k] = 0.98 * self.running.get(k, v) + 0.02 * v
        return report

    def step(self) -> LossReport:
        """Run the next scheduled iteration."""
        it = self.iteration
        return self.train_step(self.batch_for(it), self.style_for(it))

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict:
        b = self.bundle
        return {
            "config": config_mod.to_dict(self.cfg),
            "iteration": self.iteration,
            "generator": b.generator.state_dict(),
            "decomposition_net": b.decomposition_net.state_dict() if b.learnt else None,
            "discriminator": b.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "running": dict(self.running),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state_dict())

    def load_state_dict(self, state: dict) -> None:
        b = self.bundle
        b.generator.load_state_dict(state["generator"])
        if b.learnt:
            b.decomposition_net.load_state_dict(state["decomposition_net"])
        b.discriminator.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["torch_rng"])
        self.iteration = int(state["iteration"])
        self.running = dict(state.get("running", {}))

    @classmethod
    def from_checkpoint(cls, path, layout=None, store=None, refs=None, extractor=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        cfg = config_mod.from_dict(ckpt["config"])
        trainer = cls(cfg, layout, store=store, refs=refs, extractor=extractor)
        trainer.load_state_dict(ckpt)
        return trainer


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_log: Path
    history: list = field(default_factory=list)


def format_metrics_line(iteration: int, report: LossReport) -> str:
    return ",".join([str(iteration)] + [repr(float(getattr(report, k))) for k in LossReport.field_names()])


def train_loop(cfg: TrainConfig, layout: DatasetLayout, run_dir, refs: StyleReferenceSet | None = None,
               resume=None, store: ImageStore | None = None, extractor=None,
               progress: Callable | None = None) -> TrainResult:
    """Train until ``cfg.max_iterations``, writing checkpoints and a metrics CSV.

    Each metrics row holds the mean of every loss field over the preceding
    logging interval.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, run_dir / "config.yaml")
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, layout, store=store, refs=refs, extractor=extractor)
    else:
        trainer = Trainer(cfg, layout, store=store, refs=refs, extractor=extractor)
    metrics_path = run_dir / "metrics.csv"
    if resume is None or not metrics_path.exists():
        metrics_path.write_text(",".join(METRIC_FIELDS) + "\n")
    history = []
    window: list[LossReport] = []
    if trainer.iteration == 0:
        trainer.save(ckpt_dir / "iter_0000000.pt")
    with metrics_path.open("a") as mlog:
        while trainer.iteration < cfg.max_iterations:
            report = trainer.step()
            history.append(report)
            window.append(report)
            it = trainer.iteration
            if it % cfg.log_interval == 0 or it == cfg.max_iterations:
                mean = LossReport(**{k: float(np.mean([getattr(r, k) for r in window]))
                                     for k in LossReport.field_names()})
                mlog.write(format_metrics_line(it, mean) + "\n")
                mlog.flush()
                window.clear()
                if progress is not None:
                    progress(it, mean)
            if it % cfg.checkpoint_interval == 0 and it != cfg.max_iterations:
                trainer.save(ckpt_dir / f"iter_{it:07d}.pt")
    final = trainer.save(ckpt_dir / "final.pt")
    return TrainResult(final, metrics_path, history)


# -- inference --------------------------------------------------------------

def load_model(checkpoint) -> ModelBundle:
    """Rebuild the inference networks from a checkpoint path or loaded dict."""
    ckpt = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    cfg = config_mod.from_dict(ckpt["config"])
    bundle = ModelBundle(cfg.model_config())
    try:
        bundle.generator.load_state_dict(ckpt["generator"])
        if bundle.learnt:
            bundle.decomposition_net.load_state_dict(ckpt["decomposition_net"])
        bundle.discriminator.load_state_dict(ckpt["discriminator"])
    except (RuntimeError, KeyError, TypeError) as exc:
        from .networks import CheckpointError
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    bundle.eval()
    return bundle


def _as_bundle(model) -> ModelBundle:
    return model if isinstance(model, ModelBundle) else load_model(model)


@torch.no_grad()
def infer_maps(model, img: np.ndarray):
    """Relight one ``H x W x 3`` [0, 1] image; returns ``(out, R, S, S_hat)`` arrays.

    Sizes that are not multiples of 8 are reflect-padded and cropped back.
    ``R`` and ``S`` are None without a learnt decomposition.
    """
    bundle = _as_bundle(model)
    x, (h, w) = pad_to_multiple(to_network(to_tensor(img)), 8)
    out, r, s, s_hat = bundle.relight(x, return_maps=True)

    def crop(t):
        return None if t is None else to_image(t[..., :h, :w].clamp(0, 1))

    return crop(out), crop(r), crop(s), crop(s_hat)


def infer(model, img: np.ndarray) -> np.ndarray:
    return infer_maps(model, img)[0]
