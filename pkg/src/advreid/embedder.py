"""Compact convolutional embedding network with a classification head.

Three conv3x3/relu/maxpool blocks, a linear embedding layer, and a
linear identity classifier on top. Trained with softmax cross-entropy
and SGD momentum; retrieval uses the embedding taken before the head.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MALNET1"


@dataclass(frozen=True)
class EmbedNetConfig:
    input_height: int = 64
    input_width: int = 32
    conv_channels: tuple = (8, 16, 32)
    embedding_dim: int = 64
    num_classes: int = 50

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        h, w = self.input_height, self.input_width
        for _ in self.conv_channels:
            if h % 2 or w % 2:
                raise ValueError("input size must halve cleanly through every pool")
            h //= 2
            w //= 2

    @property
    def flat_dim(self):
        h = self.input_height >> len(self.conv_channels)
        w = self.input_width >> len(self.conv_channels)
        return self.conv_channels[-1] * h * w


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    lr_decay: float = 0.1
    lr_decay_epoch: int = 20
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    use_defense: bool = False
    # global gradient-norm clip; without batch norm the 0.1 learning rate
    # needs it to stay stable on a fresh net (0 disables)
    max_grad_norm: float = 1.0


@dataclass
class EmbedNetParams:
    config: EmbedNetConfig
    seed: int
    tensors: dict = field(default_factory=dict)  # name -> Tensor, declaration order

    def named(self):
        return list(self.tensors.items())

    def astype(self, dtype):
        clone = {k: ag.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype)
                 for k, v in self.tensors.items()}
        return EmbedNetParams(self.config, self.seed, clone)

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()


def _param_shapes(config):
    shapes = []
    c_in = 3
    for i, c_out in enumerate(config.conv_channels):
        shapes.append((f"conv{i + 1}_w", (c_out, c_in, 3, 3)))
        shapes.append((f"conv{i + 1}_b", (c_out,)))
        c_in = c_out
    shapes.append(("embed_w", (config.flat_dim, config.embedding_dim)))
    shapes.append(("embed_b", (config.embedding_dim,)))
    shapes.append(("cls_w", (config.embedding_dim, config.num_classes)))
    shapes.append(("cls_b", (config.num_classes,)))
    return shapes


def init_embed_net(config, seed=0):
    """He-scaled random init, deterministic in (config, seed).

    The classifier head is scaled down so untrained logits sit near zero
    and the first-batch loss starts at ln(num_classes).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    tensors = {}
    for name, shape in _param_shapes(config):
        if name.endswith("_b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            if name == "cls_w":
                data *= 0.05
        tensors[name] = ag.Tensor(data, requires_grad=True)
    return EmbedNetParams(config=config, seed=seed, tensors=tensors)


def forward_features(params, x, tape=None):
    """Embedding of an (N, 3, H, W) tensor in [0,1], before the classification head."""
    t = params.tensors
    # center pixels to [-1, 1] on the tape so pixel gradients stay exact
    shift = ag.Tensor(np.full(x.shape, -0.5, dtype=x.dtype), dtype=x.dtype)
    scale = ag.Tensor(np.full(x.shape, 2.0, dtype=x.dtype), dtype=x.dtype)
    h = ag.multiply(tape, ag.add(tape, x, shift), scale)
    for i in range(len(params.config.conv_channels)):
        h = ag.conv2d(tape, h, t[f"conv{i + 1}_w"], t[f"conv{i + 1}_b"], pad=1)
        h = ag.relu(tape, h)
        h = ag.maxpool2x2(tape, h)
    h = ag.flatten(tape, h)
    return ag.linear(tape, h, t["embed_w"], t["embed_b"])


def forward_logits(params, x, tape=None):
    feats = forward_features(params, x, tape)
    return ag.linear(tape, feats, params.tensors["cls_w"], params.tensors["cls_b"])


def images_to_input(images):
    """Stack (H, W, 3) images into the network's (N, 3, H, W) layout."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def input_grad_to_images(grad):
    return np.ascontiguousarray(grad.transpose(0, 2, 3, 1))


def embed_batch(params, images):
    """Feature rows for a batch of (H, W, 3) images; pure, no grad tracking."""
    cfg = params.config
    arr = images_to_input(images)
    if arr.shape[2:] != (cfg.input_height, cfg.input_width):
        raise ag.ShapeError(
            f"embed_batch: images are {arr.shape[2]}x{arr.shape[3]}, "
            f"expected {cfg.input_height}x{cfg.input_width}")
    feats = forward_features(params, ag.Tensor(arr), tape=None)
    return feats.data.copy()


def extract_features(params, images, normalize=False, batch_size=64):
    """Embed an image set in fixed-size batches; optional unit-L2 rows."""
    rows = []
    for start in range(0, len(images), batch_size):
        rows.append(embed_batch(params, images[start:start + batch_size]))
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, params.config.embedding_dim))
    if normalize:
        norms = np.sqrt((feats.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
        feats = (feats / np.maximum(norms, 1e-12)).astype(np.float32)
    return feats


def learning_rate_at(tcfg, epoch):
    if tcfg.lr_decay_epoch > 0 and epoch >= tcfg.lr_decay_epoch:
        return tcfg.learning_rate * tcfg.lr_decay
    return tcfg.learning_rate


def train_baseline(train_set, tcfg, config, preprocess=None):
    """Full training run; returns (params, per-epoch log).

    `preprocess(image, epoch, index) -> image` hooks the defense pipeline
    in front of every batch image without touching the training rng.
    """
    if not train_set:
        raise ValueError("training set is empty")
    labels_all = np.array([s.identity for s in train_set])
    if labels_all.min() < 0 or labels_all.max() >= config.num_classes:
        raise ValueError("labels outside [0, num_classes)")

    params = init_embed_net(config, seed=tcfg.seed)
    buffers = [np.zeros_like(t.data) for t in params.tensors.values()]
    order_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 11]))
    log_rows = []
    initial_loss = None

    for epoch in range(tcfg.epochs):
        lr = learning_rate_at(tcfg, epoch)
        perm = order_rng.permutation(len(train_set))
        total_loss, total_hits, total_n = 0.0, 0, 0
        for start in range(0, len(perm), tcfg.batch_size):
            idx = perm[start:start + tcfg.batch_size]
            imgs = []
            for i in idx:
                img = train_set[i].image
                if preprocess is not None:
                    img = preprocess(img, epoch, int(i))
                imgs.append(img)
            batch = ag.Tensor(images_to_input(imgs))
            targets = labels_all[idx]

            params.zero_grads()
            tape = ag.Tape()
            logits = forward_logits(params, batch, tape)
            losses = ag.softmax_cross_entropy(tape, logits, targets)
            loss = ag.batch_mean(tape, losses)
            ag.backward(tape, np.asarray(1.0))
            if initial_loss is None:
                initial_loss = float(loss.data)

            tensors = list(params.tensors.values())
            grads = [t.grad for t in tensors]
            if tcfg.max_grad_norm > 0:
                gnorm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
                if gnorm > tcfg.max_grad_norm:
                    factor = np.float32(tcfg.max_grad_norm / gnorm)
                    grads = [g * factor for g in grads]
            ag.sgd_momentum_step(tensors, grads, lr, tcfg.momentum, buffers)

            total_loss += float(loss.data) * len(idx)
            total_hits += int((np.argmax(logits.data, axis=1) == targets).sum())
            total_n += len(idx)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": total_loss / total_n,
            "train_acc": total_hits / total_n,
        }
        if epoch == 0:
            row["initial_loss"] = initial_loss
        log_rows.append(row)
    return params, log_rows


# ---------------------------------------------------------------------------
# serialization: MALNET1 magic, length-prefixed key/value text, then raw
# little-endian float32 payloads in declaration order


def save_params(params, path):
    cfg = params.config
    kv = "\n".join([
        f"input_height={cfg.input_height}",
        f"input_width={cfg.input_width}",
        f"conv_channels={','.join(str(c) for c in cfg.conv_channels)}",
        f"embedding_dim={cfg.embedding_dim}",
        f"num_classes={cfg.num_classes}",
        f"seed={params.seed}",
    ]).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(kv)))
        fh.write(kv)
        for _, tensor in params.named():
            fh.write(tensor.data.astype("<f4").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    pos = len(MODEL_MAGIC)
    (kvlen,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    kv = dict(line.split("=", 1) for line in blob[pos:pos + kvlen].decode().splitlines())
    pos += kvlen
    config = EmbedNetConfig(
        input_height=int(kv["input_height"]),
        input_width=int(kv["input_width"]),
        conv_channels=tuple(int(c) for c in kv["conv_channels"].split(",")),
        embedding_dim=int(kv["embedding_dim"]),
        num_classes=int(kv["num_classes"]),
    )
    params = EmbedNetParams(config=config, seed=int(kv["seed"]), tensors={})
    for name, shape in _param_shapes(config):
        n = int(np.prod(shape))
        data = np.frombuffer(blob[pos:pos + 4 * n], dtype="<f4").reshape(shape)
        if data.size != n:
            raise ValueError(f"{path}: truncated tensor payload for {name}")
        pos += 4 * n
        params.tensors[name] = ag.Tensor(data.copy(), requires_grad=True)
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return params
