"""Training: dataset splitting, classical momentum SGD, the epoch loop.

All randomness flows from explicit seeds through numpy SeedSequence /
PCG64 streams, so a (seed, data, hyperparameters, build) tuple fully
determines the trained parameters.
"""

from dataclasses import dataclass

import numpy as np

from dilseg.errors import ConfigError, DatasetError, DivergenceError, ShapeError, SplitError


@dataclass(frozen=True)
class HyperParams:
    """SGD settings. epochs = 0 is permitted and makes training a no-op."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class SplitSpec:
    """Seeded train/test split by shuffled prefix."""

    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError(
                f"train_fraction must lie strictly in (0, 1), got {self.train_fraction}"
            )


def split_dataset(manifest, spec):
    """Shuffle with a seeded Fisher-Yates permutation, then cut a train
    prefix of round(fraction * n) items. Returns (train, test) lists that
    partition the manifest; raises if either side would be empty."""
    items = list(manifest)
    n = len(items)
    if n < 2:
        raise SplitError(f"need at least 2 items to split, got {n}")
    k = round(spec.train_fraction * n)
    if k == 0 or k == n:
        raise SplitError(
            f"fraction {spec.train_fraction} leaves an empty side for {n} items"
        )
    perm = np.random.default_rng(np.random.SeedSequence(spec.seed)).permutation(n)
    train = [items[i] for i in perm[:k]]
    test = [items[i] for i in perm[k:]]
    return train, test


class TrainState:
    """Optimizer state: one momentum buffer per parameter, epoch counter."""

    def __init__(self, network, seed=0):
        self.velocity = {
            (i, name): np.zeros_like(t.data) for i, name, t in network.parameters()
        }
        self.epoch = 0
        self.seed = seed


def flatten_grads(layer_grads):
    """Per-layer grad dicts (as from backward_through) -> {(layer, name): Tensor}."""
    flat = {}
    for i, grads in enumerate(layer_grads):
        for name, g in grads.items():
            flat[(i, name)] = g
    return flat


def sgd_step(params, grads, state, hp):
    """Classical momentum update, in place: v <- mu v + g; p <- p - lr v."""
    for i, name, tensor in params:
        key = (i, name)
        g = grads[key].data
        v = state.velocity[key]
        if g.shape != v.shape or g.shape != tensor.shape:
            raise ShapeError(
                f"parameter {key}: shapes differ (param {tensor.shape}, "
                f"grad {g.shape}, velocity {v.shape})"
            )
        v *= hp.momentum
        v += g
        tensor.data -= hp.learning_rate * v


def _accumulate(total, layer_grads):
    if total is None:
        return layer_grads
    for acc, new in zip(total, layer_grads):
        for name in acc:
            acc[name].data += new[name].data
    return total


def train(network, train_set, hp):
    """Run epochs of mini-batch SGD over (image, labels) pairs.

    Batch gradients are means over the batch items; each epoch reshuffles
    with a generator seeded from hp.seed. Returns (network, per-epoch mean
    loss list). Aborts with DivergenceError the moment a loss goes
    non-finite, leaving the offending update unapplied.
    """
    items = list(train_set)
    if not items:
        raise DatasetError("training set is empty")
    params = network.parameters()
    state = TrainState(network, hp.seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(hp.seed))
    log = []
    for epoch in range(hp.epochs):
        order = shuffle_rng.permutation(len(items))
        loss_sum = 0.0
        for start in range(0, len(order), hp.batch_size):
            batch = order[start : start + hp.batch_size]
            batch_loss = 0.0
            acc = None
            for idx in batch:
                image, labels = items[idx]
                loss, grads = network.loss_and_gradients(image, labels)
                batch_loss += loss
                acc = _accumulate(acc, grads)
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}; training aborted"
                )
            for grads in acc:
                for g in grads.values():
                    g.data /= len(batch)
            sgd_step(params, flatten_grads(acc), state, hp)
            loss_sum += batch_loss
        log.append(loss_sum / len(items))
        state.epoch += 1
    return network, log


def write_loss_log(path, log):
    """Loss history as CSV: epoch,mean_loss with six decimals."""
    lines = ["epoch,mean_loss"]
    lines += [f"{i},{loss:.6f}" for i, loss in enumerate(log)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
