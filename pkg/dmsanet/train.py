"""Synthetic blob data, SGD with momentum and weight decay, and the toy training loop."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from .network import Network
from .params import ParamSet

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    decay_epochs: Tuple[int, ...] = (100, 150)
    decay_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise InvalidConfig("lr, momentum and weight_decay must be non-negative")
        if self.momentum >= 1:
            raise InvalidConfig(f"momentum must be < 1, got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch_size and epochs must be positive")
        if self.decay_factor <= 0:
            raise InvalidConfig(f"decay_factor must be positive, got {self.decay_factor}")
        if any(e <= 0 for e in self.decay_epochs) or any(
                b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise InvalidConfig(f"decay epochs must be positive and strictly increasing: {self.decay_epochs}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for zero-based ``epoch``: divided by the decay factor at each decay epoch passed."""
        passed = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr / (self.decay_factor ** passed)

    @classmethod
    def low_lr_reading(cls, **overrides) -> "TrainConfig":
        """The alternative 1e-4 reading of the initial learning rate."""
        overrides.setdefault("lr", 1e-4)
        return cls(**overrides)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = params.zeros_like()

    def step(self, grads: ParamSet, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grads[name] + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def n(self) -> int:
        return len(self.y_train) + len(self.y_test)


def _bump(resolution: int) -> np.ndarray:
    centre = (resolution - 1) / 2.0
    width = max(resolution / 4.0, 0.5)
    grid = np.arange(resolution) - centre
    g = np.exp(-(grid[:, None] ** 2 + grid[None, :] ** 2) / (2.0 * width ** 2))
    return g / np.linalg.norm(g)


def make_synthetic_dataset(n: int, classes: int, resolution: int, seed: int = 0, channels: int = 3,
                           separation: float = 6.0, sigma: float = 1.0) -> Dataset:
    """Class-conditional Gaussian blobs: a centred bump carried by a per-class channel signature.

    Class means are scaled so the closest pair is ``separation * sigma`` apart;
    labels are balanced and shuffled, and the first 80% form the training split.
    """
    if n < 2 or classes < 2 or resolution < 1 or channels < 1:
        raise InvalidConfig("need n >= 2, classes >= 2, resolution >= 1 and channels >= 1")
    rng = np.random.default_rng(seed)

    signatures = np.zeros((classes, channels))
    for c in range(classes):
        if c < channels:
            signatures[c, c] = 1.0
        else:
            v = rng.standard_normal(channels)
            signatures[c] = v / np.linalg.norm(v)
    templates = signatures[:, :, None, None] * _bump(resolution)[None, None]
    flat = templates.reshape(classes, -1)
    dists = np.linalg.norm(flat[:, None] - flat[None, :], axis=-1)
    closest = dists[~np.eye(classes, dtype=bool)].min()
    if closest <= 0:
        raise InvalidConfig("class signatures coincide; increase channels")
    means = templates * (separation * sigma / closest)

    labels = rng.permutation(np.arange(n) % classes)
    x = means[labels] + sigma * rng.standard_normal((n, channels, resolution, resolution))
    n_train = int(round(0.8 * n))
    return Dataset(x[:n_train], labels[:n_train], x[n_train:], labels[n_train:], classes)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeMismatch(f"logits {logits.shape} do not match {len(labels)} labels")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) over a dataset split."""
    total, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        logits = net.forward(x[start:start + batch_size])
        loss, _ = cross_entropy(logits, y[start:start + batch_size])
        total += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    return total / len(y), correct / len(y)


@dataclass
class LossCurve:
    epoch: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, test_loss: float, test_accuracy: float):
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.test_loss.append(test_loss)
        self.test_accuracy.append(test_accuracy)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        df = pd.read_csv(path)
        curve = cls()
        for row in df.itertuples(index=False):
            curve.append(int(row.epoch), float(row.train_loss), float(row.test_loss), float(row.test_accuracy))
        return curve

    def __len__(self) -> int:
        return len(self.epoch)


def train_toy(net: Network, dataset: Dataset, cfg: TrainConfig = TrainConfig(),
              progress: bool = False) -> LossCurve:
    """Minibatch SGD on ``dataset``; losses are full-split evaluations after each epoch."""
    n_train = len(dataset.y_train)
    params = net.params()
    optimizer = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    if not params.all_finite():
        raise DivergenceDetected("network parameters are not finite before training", 0)

    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress):
        lr = cfg.lr_at(epoch - 1)
        order = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cache: list = []
            logits = net.forward(dataset.x_train[idx], cache=cache)
            loss, dlogits = cross_entropy(logits, dataset.y_train[idx])
            if not np.isfinite(loss):
                logger.error(f"loss diverged at epoch {epoch}")
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch}", epoch)
            _, grads = net.backward(dlogits, cache)
            if not grads.all_finite():
                logger.error(f"gradients diverged at epoch {epoch}")
                raise DivergenceDetected(f"non-finite gradients at epoch {epoch}", epoch)
            optimizer.step(grads, lr)

        train_loss, _ = evaluate(net, dataset.x_train, dataset.y_train)
        test_loss, accuracy = evaluate(net, dataset.x_test, dataset.y_test)
        if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
            logger.error(f"loss diverged at epoch {epoch}")
            raise DivergenceDetected(f"non-finite loss at epoch {epoch}", epoch)
        curve.append(epoch, train_loss, test_loss, accuracy)
        logger.info(f"epoch {epoch}/{cfg.epochs} lr {lr:g}: train {train_loss:.4f} "
                    f"test {test_loss:.4f} acc {accuracy:.3f}")
    return curve


def param_norm(net: Network) -> float:
    return net.params().l2_norm()


def plot_loss_curve(curve: Union[LossCurve, str], png_path: str) -> str:
    """Render train/test loss and test accuracy against epoch."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import seaborn as sns

    if not isinstance(curve, LossCurve):
        curve = LossCurve.from_csv(curve)
    df = curve.to_frame()
    losses = df.melt(id_vars="epoch", value_vars=["train_loss", "test_loss"], var_name="split", value_name="loss")

    sns.set_theme(style="whitegrid")
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    sns.lineplot(data=losses, x="epoch", y="loss", hue="split", ax=ax_loss)
    ax_loss.set_yscale("log")
    sns.lineplot(data=df, x="epoch", y="test_accuracy", ax=ax_acc)
    ax_acc.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"loss curve plot written to {png_path}")
    return png_path
