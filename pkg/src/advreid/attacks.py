"""White-box metric attacks: Metric-IFGSM, SMA and LTA (plus LTA*).

All three share one update rule: embed the adversary, take the squared
L2 distance to a reference feature, backpropagate to pixels, accumulate
an L1-normalized momentum, and step by alpha * sign(momentum) under an
L-infinity projection onto the epsilon ball intersected with [0,1].
They differ only in the reference:

  - Metric-IFGSM: mean feature of same-identity reference images
  - SMA:          the clean image's own feature, from a noisy start
  - LTA:          a fresh local-grayscale variant of the clean image
                  every iteration (LTA* draws it once and reuses it)

The distance is always ascended (features pushed away from the reference).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import embedder
from .transforms import local_grayscale_transform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 5.0 / 255.0
    alpha: float = 1.0 / 255.0
    iterations: int = 15
    theta: float = 1.0
    single_reference: bool = False  # LTA* variant
    n_references: int = 4  # same-identity references for Metric-IFGSM

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha <= 0:
            raise ValueError("epsilon and alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")

    def to_dict(self):
        return {"epsilon": self.epsilon, "alpha": self.alpha,
                "iterations": self.iterations, "theta": self.theta,
                "single_reference": self.single_reference,
                "n_references": self.n_references}

    @staticmethod
    def from_dict(d):
        return AttackConfig(**d)


@dataclass
class AdvState:
    x: np.ndarray          # original image, (H, W, 3)
    x_adv: np.ndarray      # current adversary
    momentum: np.ndarray   # accumulated normalized gradient, pixel-shaped
    iteration: int = 0

    def check_invariants(self, epsilon):
        eps = np.float32(epsilon)
        linf = np.abs(self.x_adv - self.x).max()
        if linf > eps:
            raise AssertionError(f"epsilon ball violated: {linf} > {eps}")
        if self.x_adv.min() < 0.0 or self.x_adv.max() > 1.0:
            raise AssertionError("adversarial pixels left [0, 1]")


def clip_project(x_adv, x, epsilon):
    """Clamp each pixel to [x - eps, x + eps] intersected with [0, 1].

    float32 rounding of x + delta can land one ulp outside the ball, so
    offending pixels are nudged back toward x.
    """
    eps = np.float32(epsilon)
    x = np.asarray(x, dtype=np.float32)
    delta = np.clip(np.asarray(x_adv, dtype=np.float32) - x, -eps, eps)
    out = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
    for _ in range(2):
        over = np.abs(out - x) > eps
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over], dtype=np.float32)
    return out


def momentum_accumulate(momentum, delta, theta):
    """theta * momentum + delta / ||delta||_1, skipping the term on zero grads.

    Operates on (N, H, W, 3) stacks with per-image L1 norms.
    """
    norms = np.abs(delta).sum(axis=(1, 2, 3), dtype=np.float64)
    zero = norms == 0.0
    if zero.any():
        log.debug("momentum_accumulate: %d zero-gradient images skipped", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    normalized = (delta / safe[:, None, None, None].astype(np.float32))
    normalized[zero] = 0.0
    return (theta * momentum + normalized).astype(np.float32)


def _pixel_gradients(params, x_adv, ref_feats):
    """d D(f(x_adv), ref) / d pixels for a stack of images, (N, H, W, 3)."""
    inp = ag.Tensor(embedder.images_to_input(x_adv), requires_grad=True)
    tape = ag.Tape()
    feats = embedder.forward_features(params, inp, tape)
    dist = ag.squared_l2_distance(tape, feats, ag.Tensor(ref_feats))
    ag.backward(tape, np.asarray(1.0))
    return embedder.input_grad_to_images(inp.grad), float(dist.data)


def attack_step(state, params, reference_feature, cfg):
    """One iteration on a single image; returns the updated AdvState."""
    batch = _AttackLoopState(
        x=state.x[None], x_adv=state.x_adv[None], momentum=state.momentum[None])
    _step_batch(batch, params, np.asarray(reference_feature, dtype=np.float32)[None], cfg)
    out = AdvState(x=state.x, x_adv=batch.x_adv[0], momentum=batch.momentum[0],
                   iteration=state.iteration + 1)
    out.check_invariants(cfg.epsilon)
    return out


@dataclass
class _AttackLoopState:
    x: np.ndarray
    x_adv: np.ndarray
    momentum: np.ndarray


def _step_batch(batch, params, ref_feats, cfg):
    grads, _ = _pixel_gradients(params, batch.x_adv, ref_feats)
    batch.momentum = momentum_accumulate(batch.momentum, grads, cfg.theta)
    stepped = batch.x_adv + np.float32(cfg.alpha) * ag.sign_elementwise(
        ag.Tensor(batch.momentum))
    batch.x_adv = clip_project(stepped, batch.x, cfg.epsilon)
    linf = np.abs(batch.x_adv - batch.x).max()
    assert linf <= np.float32(cfg.epsilon), "epsilon ball violated inside attack loop"


def _run_batched(params, images, cfg, ref_fn, init_fn=None):
    """Shared attack loop over a stack of images.

    `ref_fn(iteration) -> (N, D) reference features` is called once per
    iteration; `init_fn(x) -> x_adv0` overrides the identity init.
    """
    x = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    x_adv = init_fn(x) if init_fn is not None else x.copy()
    batch = _AttackLoopState(x=x, x_adv=x_adv, momentum=np.zeros_like(x))
    for it in range(cfg.iterations):
        _step_batch(batch, params, ref_fn(it), cfg)
    return [AdvState(x=x[i], x_adv=batch.x_adv[i], momentum=batch.momentum[i],
                     iteration=cfg.iterations) for i in range(len(images))]


def per_image_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xA77, int(index)]))


def lta_attack(params, x, cfg, rng):
    """Local transformation attack on one image.

    Each iteration builds a fresh local-grayscale variant of the clean
    image as the reference; with cfg.single_reference the variant is
    drawn once and reused (LTA*).
    """
    return lta_attack_batch(params, [x], cfg, [rng])[0]


def lta_attack_batch(params, images, cfg, rngs):
    if len(rngs) != len(images):
        raise ValueError("need one rng stream per image")
    if cfg.single_reference:
        refs = [local_grayscale_transform(im, rng) for im, rng in zip(images, rngs)]
        fixed = embedder.embed_batch(params, refs)

        def ref_fn(_):
            return fixed
    else:
        def ref_fn(_):
            refs = [local_grayscale_transform(im, rng) for im, rng in zip(images, rngs)]
            return embedder.embed_batch(params, refs)

    return _run_batched(params, images, cfg, ref_fn)


def sma_attack(params, x, cfg, rng):
    """Self metric attack: noisy start, pushed away from the clean feature."""
    return sma_attack_batch(params, [x], cfg, [rng])[0]


def sma_attack_batch(params, images, cfg, rngs):
    if len(rngs) != len(images):
        raise ValueError("need one rng stream per image")
    clean = embedder.embed_batch(params, images)

    def init_fn(x):
        noise = np.stack([
            rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:]).astype(np.float32)
            for rng in rngs])
        return clip_project(x + noise, x, cfg.epsilon)

    return _run_batched(params, images, cfg, lambda _: clean, init_fn=init_fn)


def mifgsm_attack(params, x, refs, cfg):
    """Metric-IFGSM: push away from the mean feature of same-identity references."""
    return mifgsm_attack_batch(params, [x], [refs], cfg)[0]


def mifgsm_attack_batch(params, images, refs_per_image, cfg):
    if len(refs_per_image) != len(images):
        raise ValueError("need one reference list per image")
    ref_feats = []
    for refs in refs_per_image:
        if not refs:
            raise ValueError("Metric-IFGSM needs at least one reference image")
        ref_feats.append(embedder.embed_batch(params, refs).mean(axis=0))
    ref_feats = np.stack(ref_feats).astype(np.float32)
    return _run_batched(params, images, cfg, lambda _: ref_feats)


ATTACK_NAMES = ("mifgsm", "sma", "lta", "lta*")


def attack_query_set(params, queries, attack, cfg, seed, batch_size=50):
    """Attack every query image; reproducible from (seed, query index).

    Metric-IFGSM references are other same-identity query images (the
    test identities have no training images under the disjoint-identity
    protocol), drawn with the per-image rng stream.
    """
    if attack == "none":
        return [s.image.copy() for s in queries]
    if attack not in ATTACK_NAMES:
        raise ValueError(f"unknown attack {attack!r}")
    cfg = replace(cfg, single_reference=(attack == "lta*")) if attack in ("lta", "lta*") else cfg

    out = []
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        images = [s.image for s in chunk]
        rngs = [per_image_rng(seed, start + j) for j in range(len(chunk))]
        if attack in ("lta", "lta*"):
            states = lta_attack_batch(params, images, cfg, rngs)
        elif attack == "sma":
            states = sma_attack_batch(params, images, cfg, rngs)
        else:
            refs_per_image = []
            for j, s in enumerate(chunk):
                pool = [q.image for q in queries
                        if q.identity == s.identity and q is not s]
                if not pool:
                    pool = [s.image]
                take = min(cfg.n_references, len(pool))
                sel = rngs[j].choice(len(pool), size=take, replace=False)
                refs_per_image.append([pool[k] for k in sel])
            states = mifgsm_attack_batch(params, images, refs_per_image, cfg)
        for st in states:
            st.check_invariants(cfg.epsilon)
            out.append(st.x_adv)
    return out


def save_adversarial_set(adv_images, query_samples, attack, cfg, out_dir, save_image_fn):
    """Persist adversarial images beside a JSONL manifest with achieved L-inf."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, adv_img in enumerate(adv_images):
        sample = query_samples[i]
        name = f"adv_{i:05d}_id{sample.identity:04d}_c{sample.camera}.png"
        save_image_fn(adv_img, out_dir / name)
        rows.append({
            "file": name,
            "identity": int(sample.identity),
            "camera": int(sample.camera),
            "attack": attack,
            "config": cfg.to_dict(),
            "achieved_linf": float(np.abs(adv_img - sample.image).max()),
        })
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return rows
