"""Point-wise semantic segmentation network, frequentist or variational.

The variational mode keeps one mean vector and one spread scalar per layer
for weights and biases. A weight draw is W = mu (*) (1 + tau * eps) with
tau = softplus(delta) and eps standard normal, so each component is
marginally Gaussian with mean mu and standard deviation |mu| * tau.

Architecture: a shared per-point encoder (32-64-128), a max-pooled global
feature (128) concatenated back onto the per-point 32-feature, and a
per-point classifier head. Inputs are blocks of n_pts points with 6 features
each: block-centered x,y with absolute z, plus room-normalized x,y,z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from plantscan.cloud import Block, PointCloud
from plantscan.errors import TrainingError, ValidationError
from plantscan.uncertainty import PredictiveSamples

_VAR_FLOOR = 1e-12  # keeps the KL term finite when a mean crosses zero


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = "bayesian"              # "frequentist" | "bayesian"
    n_classes: int = 9
    n_features: int = 6
    encoder_widths: tuple = (32, 64, 128)
    global_width: int = 128
    head_widths: tuple = (64,)
    n_pts: int = 1024

    def __post_init__(self):
        if self.mode not in ("frequentist", "bayesian"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.n_classes < 2:
            raise ValidationError("need >= 2 classes")
        if min(self.encoder_widths) < 1 or self.global_width < 1:
            raise ValidationError("layer widths must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    momentum: float = 0.9
    lr_init: float = 0.01               # 0.001 frequentist / 0.01 bayesian
    lr_decay_every: int = 10            # epochs
    lr_decay_factor: float = 0.9        # 0.7 frequentist / 0.9 bayesian
    epochs: int = 50
    seed: int = 0
    kl_weight: float | None = None      # None -> 1 / n_training_blocks
    balance_classes: bool = True        # inverse-frequency cross-entropy weights
    balance_power: float = 0.65         # exponent on the inverse frequency
    average_tail: float = 0.25          # Polyak-average params over last fraction

    def __post_init__(self):
        if min(self.batch_size, self.lr_decay_every, self.epochs) < 1:
            raise ValidationError("batch_size, lr_decay_every, epochs must be >= 1")
        if not 0.0 <= self.average_tail <= 1.0:
            raise ValidationError("average_tail must lie in [0, 1]")
        if self.lr_init <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValidationError("bad learning-rate schedule")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        base = dict(lr_init=0.001, lr_decay_factor=0.7) if mode == "frequentist" \
            else dict(lr_init=0.01, lr_decay_factor=0.9)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        """Learning rate in force during (0-based) ``epoch``."""
        return self.lr_init * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class VariationalLinear(torch.nn.Module):
    """Dense layer with factorized multiplicative-noise weight distribution."""

    def __init__(self, in_features: int, out_features: int, delta_init: float = -4.0):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.mu_w = torch.nn.Parameter(
            torch.empty(out_features, in_features).uniform_(-bound, bound))
        self.mu_b = torch.nn.Parameter(torch.empty(out_features).uniform_(-bound, bound))
        self.delta_w = torch.nn.Parameter(torch.tensor(float(delta_init)))
        self.delta_b = torch.nn.Parameter(torch.tensor(float(delta_init)))

    @property
    def tau_w(self) -> torch.Tensor:
        return F.softplus(self.delta_w)

    @property
    def tau_b(self) -> torch.Tensor:
        return F.softplus(self.delta_b)

    def realized(self, eps_w=None, eps_b=None):
        """Concrete (W, b) for the given noise; zero noise gives the means."""
        W = self.mu_w if eps_w is None else self.mu_w * (1.0 + self.tau_w * eps_w)
        b = self.mu_b if eps_b is None else self.mu_b * (1.0 + self.tau_b * eps_b)
        return W, b

    def forward(self, x, eps_w=None, eps_b=None):
        if eps_w is not None and eps_w.shape != self.mu_w.shape:
            raise ValidationError(
                f"eps_w shape {tuple(eps_w.shape)} != {tuple(self.mu_w.shape)}")
        if eps_b is not None and eps_b.shape != self.mu_b.shape:
            raise ValidationError(
                f"eps_b shape {tuple(eps_b.shape)} != {tuple(self.mu_b.shape)}")
        W, b = self.realized(eps_w, eps_b)
        return F.linear(x, W, b)

    def kl(self) -> torch.Tensor:
        """Closed-form KL of the induced Gaussian against a standard normal
        prior, summed over weight and bias components."""
        total = torch.tensor(0.0)
        for mu, tau in ((self.mu_w, self.tau_w), (self.mu_b, self.tau_b)):
            var = tau ** 2 * mu ** 2 + _VAR_FLOOR
            total = total + 0.5 * torch.sum(var + mu ** 2 - 1.0 - torch.log(var))
        return total

    def sample_eps(self, generator) -> tuple[torch.Tensor, torch.Tensor]:
        return (torch.randn(self.mu_w.shape, generator=generator),
                torch.randn(self.mu_b.shape, generator=generator))


class SegmentationNet(torch.nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = [config.n_features, *config.encoder_widths]
        self.encoder = torch.nn.ModuleList(
            VariationalLinear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        head_in = config.encoder_widths[0] + config.global_width
        head = [head_in, *config.head_widths, config.n_classes]
        self.head = torch.nn.ModuleList(
            VariationalLinear(a, b) for a, b in zip(head[:-1], head[1:]))
        if config.encoder_widths[-1] != config.global_width:
            raise ValidationError("global_width must equal the last encoder width")
        if config.mode == "frequentist":
            for layer in self.layers():
                layer.delta_w.requires_grad_(False)
                layer.delta_b.requires_grad_(False)

    def layers(self) -> list[VariationalLinear]:
        return list(self.encoder) + list(self.head)

    def sample_eps(self, generator):
        return [layer.sample_eps(generator) for layer in self.layers()]

    def forward(self, x: torch.Tensor, eps=None) -> torch.Tensor:
        """x: (batch, n_pts, n_features) -> per-point logits (batch, n_pts, m).

        ``eps`` is a per-layer list of (eps_w, eps_b); None means zero noise,
        i.e. the deterministic mean-weight forward pass.
        """
        if eps is None:
            eps = [(None, None)] * len(self.layers())
        li = iter(eps)
        h = x
        per_point = None
        for i, layer in enumerate(self.encoder):
            ew, eb = next(li)
            h = F.relu(layer(h, ew, eb))
            if i == 0:
                per_point = h
        global_feat = h.max(dim=1).values                       # (batch, global)
        g = global_feat.unsqueeze(1).expand(-1, x.shape[1], -1)
        h = torch.cat([per_point, g], dim=2)
        for i, layer in enumerate(self.head):
            ew, eb = next(li)
            h = layer(h, ew, eb)
            if i < len(self.head) - 1:
                h = F.relu(h)
        return h

    def kl(self) -> torch.Tensor:
        return sum(layer.kl() for layer in self.layers())


def sample_weights(net: SegmentationNet, seed: int) -> list:
    """One concrete (W, b) draw per layer from the variational distribution."""
    g = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for layer, (ew, eb) in zip(net.layers(), net.sample_eps(g)):
            out.append(tuple(t.clone() for t in layer.realized(ew, eb)))
    return out


def elbo_loss(net: SegmentationNet, x: torch.Tensor, y: torch.Tensor,
              kl_weight: float, eps=None, class_weights=None) -> torch.Tensor:
    """Mean per-point cross-entropy under one weight sample plus
    kl_weight * KL(q||prior) / points_per_block, so that with the default
    kl_weight of 1/n_training_blocks the complexity term is spread over the
    dataset as in standard minibatch variational inference.

    ``class_weights`` optionally reweights the cross-entropy per class,
    which keeps rare classes from being drowned out by floors and walls."""
    logits = net(x, eps=eps)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1),
                         weight=class_weights)
    if kl_weight == 0.0:
        return ce
    return ce + kl_weight * net.kl() / y.shape[-1]


def block_features(points: np.ndarray, origin, block_edge: float,
                   room_extent) -> np.ndarray:
    """Per-point features: xy centered on the block with absolute z, plus
    room-normalized xyz. z stays absolute so height off the floor survives
    blocking — a pure-floor and a pure-ceiling block would otherwise be
    indistinguishable up to one normalized coordinate."""
    pts = np.asarray(points, dtype=np.float64)
    cx = origin[0] + block_edge / 2
    cy = origin[1] + block_edge / 2
    centered = pts - np.array([cx, cy, 0.0])
    normalized = pts / np.asarray(room_extent, dtype=np.float64)
    return np.concatenate([centered, normalized], axis=1).astype(np.float32)


def blocks_to_tensors(cloud: PointCloud, blocks: list[Block], block_edge: float,
                      room_extent) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Stack features (and labels, when present) for a list of blocks."""
    feats = np.stack([block_features(b.resampled_points, b.origin, block_edge,
                                     room_extent) for b in blocks])
    x = torch.from_numpy(feats)
    y = None
    if cloud.labels is not None:
        y = torch.from_numpy(np.stack([cloud.labels[b.resampled_indices]
                                       for b in blocks]))
    return x, y


def train(config: TrainConfig, net_config: NetworkConfig,
          x: torch.Tensor, y: torch.Tensor
          ) -> tuple[SegmentationNet, list[dict]]:
    """Mini-batch SGD with momentum and a step-decayed learning rate.

    ``x``: (n_blocks, n_pts, n_features) float32; ``y``: (n_blocks, n_pts)
    int64. Deterministic given config.seed. Returns the trained network and
    one metrics row per epoch: epoch, loss, accuracy, lr.
    """
    if len(x) < 1:
        raise ValidationError("need at least one training block")
    torch.manual_seed(config.seed)
    net = SegmentationNet(net_config)
    bayesian = net_config.mode == "bayesian"
    kl_weight = config.kl_weight if config.kl_weight is not None else 1.0 / len(x)
    if not bayesian:
        kl_weight = 0.0
    opt = torch.optim.SGD((p for p in net.parameters() if p.requires_grad),
                          lr=config.lr_init, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    noise = torch.Generator().manual_seed(config.seed + 1)
    class_weights = None
    if config.balance_classes:
        # Tempered inverse frequency: lifts rare classes without letting
        # them dominate the loss the way full inverse frequency does.
        counts = torch.bincount(y.reshape(-1), minlength=net_config.n_classes)
        inv = y.numel() / (net_config.n_classes * counts.clamp(min=1).double())
        class_weights = (inv ** config.balance_power).float()

    history = []
    # Polyak tail averaging: SGD with momentum keeps bouncing around the
    # optimum at the final learning rate; averaging the last stretch of
    # epochs lands closer to the basin centre than any single iterate.
    tail_start = config.epochs - max(1, int(round(config.average_tail * config.epochs))) \
        if config.average_tail > 0 else config.epochs
    averaged: dict[str, torch.Tensor] = {}
    n_averaged = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(x))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = net.sample_eps(noise) if bayesian else None
            loss = elbo_loss(net, x[idx], y[idx], kl_weight, eps=eps,
                             class_weights=class_weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        if epoch >= tail_start:
            n_averaged += 1
            with torch.no_grad():
                for name, param in net.named_parameters():
                    if name not in averaged:
                        averaged[name] = param.detach().clone()
                    else:
                        averaged[name] += (param.detach() - averaged[name]) / n_averaged
        with torch.no_grad():
            pred = net(x).argmax(dim=2)
            acc = float((pred == y).float().mean())
        history.append({"epoch": epoch, "loss": epoch_loss / n_batches,
                        "accuracy": acc, "lr": lr})
    if n_averaged > 1:
        with torch.no_grad():
            for name, param in net.named_parameters():
                param.copy_(averaged[name])
    return net, history


def predict_mc(net: SegmentationNet, x: torch.Tensor, K: int = 50,
               seed: int = 0) -> PredictiveSamples:
    """K Monte Carlo forward passes with independent weight draws; softmax
    class probabilities per point. x: (n_pts, n_features) or (1, n_pts, f)."""
    if x.ndim == 2:
        x = x.unsqueeze(0)
    bayesian = net.config.mode == "bayesian"
    samples = []
    with torch.no_grad():
        for k in range(K):
            eps = None
            if bayesian:
                g = torch.Generator().manual_seed(seed * 1_000_003 + k)
                eps = net.sample_eps(g)
            probs = F.softmax(net(x, eps=eps), dim=2)
            samples.append(probs[0].double().numpy())
    arr = np.stack(samples)
    arr /= arr.sum(axis=2, keepdims=True)   # exact renormalization
    return PredictiveSamples(arr)


def predict_class(samples: PredictiveSamples) -> np.ndarray:
    """Argmax of the MC-mean probabilities; ties go to the lowest index."""
    return samples.mean_probs().argmax(axis=1)


def save_checkpoint(net: SegmentationNet, path) -> None:
    """Versioned npz: network config plus exact mu/delta arrays per layer."""
    arrays = {"version": np.array([1]),
              "config": np.frombuffer(
                  json.dumps(net.config.__dict__, default=list).encode(), dtype=np.uint8)}
    for i, layer in enumerate(net.layers()):
        arrays[f"mu_w_{i}"] = layer.mu_w.detach().numpy()
        arrays[f"mu_b_{i}"] = layer.mu_b.detach().numpy()
        arrays[f"delta_w_{i}"] = layer.delta_w.detach().numpy()
        arrays[f"delta_b_{i}"] = layer.delta_b.detach().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SegmentationNet:
    with np.load(path) as data:
        if int(data["version"][0]) != 1:
            raise ValidationError("unknown checkpoint version")
        cfg = json.loads(bytes(data["config"]).decode())
        cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
        cfg["head_widths"] = tuple(cfg["head_widths"])
        net = SegmentationNet(NetworkConfig(**cfg))
        with torch.no_grad():
            for i, layer in enumerate(net.layers()):
                layer.mu_w.copy_(torch.from_numpy(data[f"mu_w_{i}"]))
                layer.mu_b.copy_(torch.from_numpy(data[f"mu_b_{i}"]))
                layer.delta_w.copy_(torch.from_numpy(data[f"delta_w_{i}"]))
                layer.delta_b.copy_(torch.from_numpy(data[f"delta_b_{i}"]))
    return net
