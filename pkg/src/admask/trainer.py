"""Optimization machinery and the adversarial two-optimizer training loop.

One forward graph per step produces both objectives; the encoder update uses
d(l_mpm + l_cls)/d(theta_student) (mask values are constants w.r.t. the
student because the mask generator consumes detached tokens), and the mask
update uses d(alpha*l_spar + beta*l_div - l_mpm - l_cls)/d(theta_maskgen).
Each optimizer only ever sees its own parameter group, which is the gradient
isolation contract.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad, dataio, geometry, objective
from .autodiff import Tensor
from .model import (EncoderConfig, ModelConfig, ParamStore, embed_patches, encode,
                    generate_masks, init_params, is_teacher_side, make_teacher,
                    prepend_cls, project)

LR_MIN = 1e-6
METRIC_COLUMNS = ("step", "l_mpm", "l_cls", "l_spar", "l_div",
                  "lr_enc", "lr_mask", "ema_lambda", "teacher_entropy")


class ConfigError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    """NaN/Inf encountered during training."""


@dataclass
class TrainConfig:
    # optimization
    steps: int = 33000
    batch: int = 128
    lr_enc: float = 1e-4
    lr_mask: float = 3e-5
    k_decay: float = 1.5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    alpha: float = 0.2
    beta: float = 0.03
    n_masks: int = 3
    momentum_start: float = 0.994
    # distillation
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_frac: float = 0.1
    student_temp: float = 0.1
    center_momentum: float = 0.9
    cls_weight: float = 1.0
    masked_cls_in_loss: bool = True
    masked_positions_only: bool = False
    # views
    n_local_views: int = 8
    n_global_views: int = 2
    local_frac_lo: float = 0.1
    local_frac_hi: float = 0.3
    global_frac_lo: float = 0.3
    global_frac_hi: float = 0.5
    crop_contiguous: bool = True
    patches_global: int = 32
    group_size_global: int = 32
    patches_local: int = 16
    group_size_local: int = 16
    points: int = 1024
    oversample: int = 1200
    # architecture
    depth: int = 12
    heads: int = 6
    embed_dim: int = 384
    stochastic_depth: float = 0.1
    maskgen_depth: int = 3
    maskgen_heads: int = 4
    n_prototypes: int = 1024
    proj_hidden: int = 2048
    proj_bottleneck: int = 256
    embed_hidden: int = 128
    pos_hidden: int = 128
    # run control
    masking: str = "adversarial"
    mask_ratio_lo: float = 0.10
    mask_ratio_hi: float = 0.45
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500

    @property
    def warmup_steps(self):
        return int(self.warmup_frac * self.steps)

    def model_config(self):
        return ModelConfig(
            encoder=EncoderConfig(self.depth, self.heads, self.embed_dim,
                                  self.stochastic_depth),
            maskgen=EncoderConfig(self.maskgen_depth, self.maskgen_heads,
                                  self.embed_dim, self.stochastic_depth),
            n_masks=self.n_masks, n_prototypes=self.n_prototypes,
            proj_hidden=self.proj_hidden, proj_bottleneck=self.proj_bottleneck,
            embed_hidden=self.embed_hidden, pos_hidden=self.pos_hidden)

    def validate(self):
        if self.warmup_steps >= self.steps:
            raise ConfigError("warmup must be shorter than the total step count")
        if not (0 < self.local_frac_lo <= self.local_frac_hi <= 1):
            raise ConfigError("bad local view fraction range")
        if not (0 < self.global_frac_lo <= self.global_frac_hi <= 1):
            raise ConfigError("bad global view fraction range")
        if self.masking not in ("adversarial", "random", "block"):
            raise ConfigError(f"unknown masking strategy {self.masking!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"negative config value {f.name} = {v}")
        return self


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def parse_config(path):
    """Read a `key = value` config file into a TrainConfig; unknown keys are
    errors."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in by_name:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            ftype = by_name[key].type
            try:
                if ftype in ("bool", bool):
                    values[key] = _BOOL_WORDS[raw.lower()]
                elif ftype in ("int", int):
                    values[key] = int(raw)
                elif ftype in ("float", float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except (KeyError, ValueError) as e:
                raise ConfigError(f"{path}:{ln}: bad value for {key}: {raw!r}") from e
    return TrainConfig(**values).validate()


def config_text(cfg: TrainConfig):
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)) + "\n"


# ---------------------------------------------------------------------------
# schedules


def lr_schedule(step, total, lr_max, warmup, k=1.0, lr_min=LR_MIN):
    """Linear warmup to lr_max, then k-decay cosine down to lr_min."""
    if warmup >= total:
        raise ConfigError(f"warmup ({warmup}) must be < total steps ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return lr_max * step / warmup
    t, T = step - warmup, total - warmup
    return lr_min + (lr_max - lr_min) / 2.0 * (1.0 + math.cos(math.pi * t ** k / T ** k))


def momentum_schedule(step, total, lam0):
    """Cosine anneal of the EMA momentum from lam0 to 1.0."""
    return 1.0 - (1.0 - lam0) * (1.0 + math.cos(math.pi * step / total)) / 2.0


def teacher_temp_schedule(step, total, t_start, t_end, warmup_frac):
    """Linear ramp over the first warmup_frac of training, then constant."""
    ramp = max(1, int(warmup_frac * total))
    if step >= ramp:
        return t_end
    return t_start + (t_end - t_start) * step / ramp


# ---------------------------------------------------------------------------
# AdamW


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter group."""

    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, grads, lr):
        """grads: {name: ndarray}; missing names are treated as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, prefix):
        out = {"%s.t" % prefix: np.asarray([self.t], dtype=np.int64)}
        for n, a in self.m.items():
            out[f"{prefix}.m.{n}"] = a
        for n, a in self.v.items():
            out[f"{prefix}.v.{n}"] = a
        return out

    def load_state_arrays(self, arrays, prefix):
        self.t = int(arrays[f"{prefix}.t"][0])
        for n in self.m:
            self.m[n] = arrays[f"{prefix}.m.{n}"].copy()
            self.v[n] = arrays[f"{prefix}.v.{n}"].copy()


def adamw_step(params: ParamStore, grads, opt_state: AdamW, lr, weight_decay=None):
    """Single AdamW update; thin wrapper kept for symmetry with the math."""
    if weight_decay is not None:
        opt_state.weight_decay = weight_decay
    opt_state.step(grads, lr)


# ---------------------------------------------------------------------------
# deterministic substreams


def stream(seed, *keys):
    """Named RNG substream; derivation is pure, so resume needs no RNG state."""
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode(), "little") % (2 ** 31))
        else:
            ints.append(int(k))
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + ints))


# ---------------------------------------------------------------------------
# view construction


@dataclass
class ViewBatch:
    """Patchified global and local crops for one training batch."""
    global_groups: np.ndarray   # (B*G, p_g, k_g, 3)
    global_centers: np.ndarray  # (B*G, p_g, 3)
    local_groups: np.ndarray    # (B*L, p_l, k_l, 3)
    local_centers: np.ndarray   # (B*L, p_l, 3)
    n_clouds: int


def build_views(clouds, cfg: TrainConfig, rng_for_cloud):
    """Subsample + augment each cloud, crop global/local views, patchify.

    rng_for_cloud(i) must return an independent Generator per cloud.
    """
    gg, gc, lg, lc = [], [], [], []
    for i, cloud in enumerate(clouds):
        rng = rng_for_cloud(i)
        m_random = min(cfg.oversample, cloud.n)
        m_fps = min(cfg.points, m_random)
        sub = geometry.subsample(cloud, m_random, m_fps, rng)
        sub = geometry.augment(sub, rng)
        for _ in range(cfg.n_global_views):
            view = geometry.crop_view(sub, (cfg.global_frac_lo, cfg.global_frac_hi),
                                      rng, contiguous=cfg.crop_contiguous)
            ps = geometry.patchify(view, min(cfg.patches_global, view.n),
                                   min(cfg.group_size_global, view.n), seed=rng)
            gg.append(ps.groups)
            gc.append(ps.centers)
        for _ in range(cfg.n_local_views):
            view = geometry.crop_view(sub, (cfg.local_frac_lo, cfg.local_frac_hi),
                                      rng, contiguous=cfg.crop_contiguous)
            ps = geometry.patchify(view, min(cfg.patches_local, view.n),
                                   min(cfg.group_size_local, view.n), seed=rng)
            lg.append(ps.groups)
            lc.append(ps.centers)
    return ViewBatch(np.stack(gg), np.stack(gc), np.stack(lg), np.stack(lc),
                     n_clouds=len(clouds))


def _baseline_mask_matrix(kind, centers, n_views, p, cfg, rng):
    """Binary (n_views, 1, p) masks for the random/block ablation baselines."""
    from .evaluate import baseline_masks
    rows = [baseline_masks(kind, p, (cfg.mask_ratio_lo, cfg.mask_ratio_hi), rng,
                           centers=centers[v])
            for v in range(n_views)]
    return np.stack(rows)[:, None, :].astype(np.float32)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, clouds, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.clouds = clouds
        self.out_dir = out_dir
        self.model_cfg = cfg.model_config()
        self.params = init_params(self.model_cfg, stream(cfg.seed, "init"))
        self.teacher = make_teacher(self.params)
        self.student_group = self.params.subset(
            lambda n: not n.startswith("mg."))
        self.maskgen_group = self.params.subset("mg.")
        self.opt_enc = AdamW(self.student_group, weight_decay=cfg.weight_decay)
        self.opt_mask = AdamW(self.maskgen_group, weight_decay=cfg.weight_decay)
        self.state = objective.DistillState.fresh(
            cfg.n_prototypes, center_momentum=cfg.center_momentum,
            student_temp=cfg.student_temp)
        self.step_count = 0
        self.last_enc_grads = None
        self.last_mask_grads = None

    # -- forward helpers ----------------------------------------------------

    def _student_forward(self, tokens_no_cls, rng, project_patches):
        seq = prepend_cls(self.params, tokens_no_cls)
        enc = encode(self.params, seq, self.model_cfg.encoder,
                     train_mode=True, rng=rng)
        cls_logits = project(self.params, enc[:, 0], "cls")
        patch_logits = project(self.params, enc[:, 1:], "patch") if project_patches else None
        return cls_logits, patch_logits

    def _teacher_forward(self, groups, centers):
        with ad.no_grad():
            tokens = embed_patches(self.teacher, groups, centers)
            seq = prepend_cls(self.teacher, tokens)
            enc = encode(self.teacher, seq, self.model_cfg.encoder, train_mode=False)
            cls_logits = project(self.teacher, enc[:, 0], "cls").data
            patch_logits = project(self.teacher, enc[:, 1:], "patch").data
        return cls_logits, patch_logits

    # -- one optimization step ----------------------------------------------

    def train_step(self, batch, step=None, update_encoder=True, update_maskgen=True):
        """Run one adversarial step on a list of PointClouds; returns a
        LossReport. Set update_* to freeze one side (same forward math)."""
        cfg = self.cfg
        if step is None:
            step = self.step_count
        views = build_views(
            batch, cfg, lambda i: stream(cfg.seed, "views", step, i))
        B, G, L, N = views.n_clouds, cfg.n_global_views, cfg.n_local_views, cfg.n_masks
        drop_rng = stream(cfg.seed, "droppath", step)

        # teacher on global views (no gradients)
        t_cls_logits, t_patch_logits = self._teacher_forward(
            views.global_groups, views.global_centers)
        self.state.teacher_temp = teacher_temp_schedule(
            step, cfg.steps, cfg.teacher_temp_start, cfg.teacher_temp_end,
            cfg.teacher_temp_warmup_frac)
        t_cls = objective.sharpen_teacher(t_cls_logits, self.state, "cls")
        t_patch = objective.sharpen_teacher(t_patch_logits, self.state, "patch")

        # student tokens for global views; the mask generator sees them detached
        g_content, g_pos = embed_patches(self.params, views.global_groups,
                                         views.global_centers, split=True)
        g_tokens = ad.add(g_content, g_pos)
        p_g = g_tokens.shape[1]
        adversarial = cfg.masking == "adversarial"
        if adversarial:
            mask_mat = generate_masks(self.maskgen_group, g_tokens.detach(),
                                      self.model_cfg.maskgen, N,
                                      train_mode=True, rng=drop_rng)  # (B*G, N, p)
            n_variants = N
        else:
            mask_rng = stream(cfg.seed, "basemask", step)
            mask_mat = Tensor(_baseline_mask_matrix(
                cfg.masking, views.global_centers, B * G, p_g, cfg, mask_rng))
            n_variants = 1

        # masked student forwards, all variants batched along the batch axis.
        # Masking replaces patch CONTENT; the position embedding is added
        # afterwards so a masked token still knows where it sits.
        tok_tiled = ad.concat([g_content] * n_variants, axis=0)     # (V*B*G, p, d)
        mask_rows = ad.reshape(ad.swapaxes(mask_mat, 0, 1),
                               (n_variants * B * G, p_g))
        masked = objective.apply_mask(tok_tiled, mask_rows, self.params["mask_token"])
        masked = ad.add(masked, ad.concat([g_pos] * n_variants, axis=0))
        s_cls_logits_m, s_patch_logits = self._student_forward(
            masked, drop_rng, project_patches=True)

        # student on local views
        l_tokens = embed_patches(self.params, views.local_groups, views.local_centers)
        s_cls_logits_l, _ = self._student_forward(l_tokens, drop_rng,
                                                  project_patches=False)

        # losses
        st = self.state.student_temp
        s_patch_probs = ad.softmax(ad.mul(s_patch_logits, 1.0 / st), axis=-1)
        t_patch_rep = np.concatenate([t_patch] * n_variants, axis=0)
        if cfg.masked_positions_only:
            w = np.asarray(mask_rows.data > 0.5 if not adversarial
                           else mask_rows.data, dtype=s_patch_probs.dtype)
            w = w[..., None]
            ce = ad.mul(ad.mul(Tensor(t_patch_rep.astype(s_patch_probs.dtype)),
                               ad.log(s_patch_probs)), Tensor(w))
            denom = max(float(w.sum()), 1.0)
            l_mpm = ad.div(ad.neg(ad.reduce_sum(ce)), denom)
        else:
            l_mpm = objective.mpm_loss(s_patch_probs, t_patch_rep)

        s_cls_all = s_cls_logits_l if not cfg.masked_cls_in_loss else ad.concat(
            [s_cls_logits_l, s_cls_logits_m], axis=0)
        s_cls_probs = ad.softmax(ad.mul(s_cls_all, 1.0 / st), axis=-1)
        pairing = self._cls_pairing(B, G, L, n_variants if cfg.masked_cls_in_loss else 0)
        l_cls = objective.cls_loss(s_cls_probs, t_cls, pairing)

        if adversarial:
            l_spar = objective.sparsity_loss(mask_mat)
            l_div = objective.diversity_loss(mask_mat)
        else:
            l_spar = Tensor(np.zeros((), dtype=np.float32))
            l_div = Tensor(np.zeros((), dtype=np.float32))

        report = objective.combine_losses(l_mpm, l_cls, l_spar, l_div,
                                          cfg.alpha, cfg.beta)
        if not all(np.isfinite([report.l_mpm, report.l_cls, report.l_spar,
                                report.l_div])):
            raise NumericFailure(f"non-finite loss at step {step}: {report}")

        # gradients: one graph, two objectives; cls_weight rebalances the two
        # distillation terms for both sides of the adversarial game
        l_enc = ad.add(l_mpm, ad.mul(l_cls, cfg.cls_weight))
        g_enc = ad.backward(l_enc)
        enc_grads = {n: g_enc[t] for n, t in self.student_group.items() if t in g_enc}
        mask_grads = {}
        if adversarial:
            g_reg = ad.backward(ad.add(ad.mul(l_spar, cfg.alpha),
                                       ad.mul(l_div, cfg.beta)))
            for n, t in self.maskgen_group.items():
                g = g_reg.get(t, 0.0) - g_enc.get(t, 0.0)
                mask_grads[n] = np.asarray(g, dtype=t.dtype) if np.isscalar(g) else g.astype(t.dtype, copy=False)
        self.last_enc_grads = enc_grads
        self.last_mask_grads = mask_grads

        lr_e = lr_schedule(step, cfg.steps, cfg.lr_enc, cfg.warmup_steps, cfg.k_decay)
        lr_m = lr_schedule(step, cfg.steps, cfg.lr_mask, cfg.warmup_steps, cfg.k_decay)
        if update_encoder:
            self.opt_enc.step(enc_grads, lr_e)
        if update_maskgen and adversarial:
            self.opt_mask.step(mask_grads, lr_m)

        lam = momentum_schedule(step, cfg.steps, cfg.momentum_start)
        if update_encoder:
            objective.ema_update(self.teacher,
                                 self.params.subset(is_teacher_side), lam)
        objective.update_center(self.state, t_cls_logits, "cls")
        objective.update_center(self.state, t_patch_logits, "patch")

        self.step_count = step + 1
        self._last_diag = {"lr_enc": lr_e, "lr_mask": lr_m, "ema_lambda": lam,
                           "teacher_entropy": objective.entropy(t_cls)}
        return report

    def _cls_pairing(self, B, G, L, n_variants):
        """(teacher_row, student_row) pairs: every teacher global vs every
        student local of the same cloud, plus teacher global vs the masked
        variants of the other global view."""
        pairs = []
        for b in range(B):
            for t in range(G):
                t_row = b * G + t
                for s in range(L):
                    pairs.append((t_row, b * L + s))
                for other in range(G):
                    if other == t:
                        continue
                    for v in range(n_variants):
                        # masked rows sit after the B*L local rows
                        pairs.append((t_row, B * L + v * B * G + b * G + other))
        return pairs

    # -- training loop ------------------------------------------------------

    def sample_batch(self, step):
        rng = stream(self.cfg.seed, "batch", step)
        idx = rng.integers(0, len(self.clouds), size=self.cfg.batch)
        return [self.clouds[i] for i in idx]

    def run(self, metrics_path=None, checkpoint_dir=None, start_step=0,
            progress=None):
        rows = []
        f = open(metrics_path, "a" if start_step else "w") if metrics_path else None
        try:
            if f and not start_step:
                f.write(",".join(METRIC_COLUMNS) + "\n")
            for step in range(start_step, self.cfg.steps):
                report = self.train_step(self.sample_batch(step), step=step)
                if f and (step % self.cfg.log_every == 0 or step == self.cfg.steps - 1):
                    d = self._last_diag
                    f.write(f"{step},{report.l_mpm:.6f},{report.l_cls:.6f},"
                            f"{report.l_spar:.6f},{report.l_div:.6f},"
                            f"{d['lr_enc']:.8g},{d['lr_mask']:.8g},"
                            f"{d['ema_lambda']:.8f},{d['teacher_entropy']:.6f}\n")
                    f.flush()
                rows.append(report)
                if checkpoint_dir and (step + 1) % self.cfg.checkpoint_every == 0:
                    self.save(os.path.join(checkpoint_dir, f"step_{step + 1}.ckpt"))
                if progress:
                    progress(step, report)
        finally:
            if f:
                f.close()
        return rows

    # -- checkpointing ------------------------------------------------------

    def save(self, path):
        tensors = {}
        for n, t in self.params.items():
            tensors["student." + n] = t.data
        for n, t in self.teacher.items():
            tensors["teacher." + n] = t.data
        tensors.update(self.opt_enc.state_arrays("opt_enc"))
        tensors.update(self.opt_mask.state_arrays("opt_mask"))
        tensors["center_cls"] = self.state.center_cls
        tensors["center_patch"] = self.state.center_patch
        dataio.save_checkpoint(tensors, path,
                               meta={"step": self.step_count,
                                     "config": config_text(self.cfg)})

    def load(self, path):
        meta, arrays = dataio.load_checkpoint(path)
        self.params.load_arrays({n[len("student."):]: a for n, a in arrays.items()
                                 if n.startswith("student.")})
        self.teacher.load_arrays({n[len("teacher."):]: a for n, a in arrays.items()
                                  if n.startswith("teacher.")})
        self.opt_enc.load_state_arrays(arrays, "opt_enc")
        self.opt_mask.load_state_arrays(arrays, "opt_mask")
        self.state.center_cls = arrays["center_cls"].copy()
        self.state.center_patch = arrays["center_patch"].copy()
        self.step_count = int(meta["step"])
        return meta
