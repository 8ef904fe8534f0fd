"""Training protocol: AdaMax updates, plateau-halved learning rate, early
stopping, best-epoch selection, autoencoder pre-initialization, output
quantization and the two-candidate evolutionary variant search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .graph import Graph
from .network import NetConfig, build_network
from .tensor import Tensor

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_init: float = 1e-3
    lr_floor: float = 1e-7
    lr_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 25
    max_epochs: int = 150
    val_fraction: float = 0.10
    pretrain_epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adamax_eps: float = 1e-8
    improve_delta: float = 1e-6     # minimum decrease that counts as improvement
    augment: bool = True

    def validate(self) -> None:
        if not 0 < self.lr_floor <= self.lr_init:
            raise ConfigError("need 0 < lr_floor <= lr_init")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if not self.plateau_patience < self.early_stop_patience:
            raise ConfigError("plateau_patience must be < early_stop_patience")
        if self.batch_size < 1 or self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("batch_size >= 1 and non-negative epoch counts required")


@dataclass
class TrackerEvent:
    improved: bool
    halved: bool
    stop: bool
    lr: float


class ProtocolTracker:
    """Plateau and early-stop bookkeeping over a validation-loss sequence.

    Improvement means a strict decrease by at least `improve_delta`. After
    `plateau_patience` consecutive non-improving epochs the rate is halved
    (never below `lr_floor`) and the plateau counter resets; the early-stop
    counter is independent and never resets on a halving.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr_init
        self.best = float("inf")
        self.best_epoch = 0
        self.plateau = 0
        self.stale = 0
        self.epoch = 0

    def observe(self, val_loss: float) -> TrackerEvent:
        self.epoch += 1
        improved = val_loss < self.best - self.cfg.improve_delta
        halved = False
        if improved:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.plateau = 0
            self.stale = 0
        else:
            self.plateau += 1
            self.stale += 1
            if self.plateau >= self.cfg.plateau_patience:
                new_lr = max(self.lr * self.cfg.lr_factor, self.cfg.lr_floor)
                halved = new_lr < self.lr
                self.lr = new_lr
                self.plateau = 0
        stop = self.stale >= self.cfg.early_stop_patience
        return TrackerEvent(improved=improved, halved=halved, stop=stop, lr=self.lr)


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_graph(cls, graph: Graph) -> "OptState":
        state = cls()
        for name, p in graph.parameters():
            state.m[name] = np.zeros_like(p.data)
            state.u[name] = np.zeros_like(p.data)
        return state

    def snapshot(self) -> "OptState":
        return OptState(
            m={k: v.copy() for k, v in self.m.items()},
            u={k: v.copy() for k, v in self.u.items()},
            t=self.t,
        )


def adamax_step(
    named_params: Sequence[tuple[str, Tensor]],
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One update: m <- b1*m + (1-b1)*g, u <- max(b2*u, |g|),
    theta <- theta - lr/(1-b1^t) * m/(u+eps)."""
    state.t += 1
    correction = 1.0 - beta1 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        u = state.u[name]
        m *= beta1
        m += (1.0 - beta1) * g
        np.maximum(beta2 * u, np.abs(g), out=u)
        p.data -= (lr / correction) * m / (u + eps)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float, float]]   # (epoch, train, val, lr)
    best_epoch: int
    best_val: float
    params: dict[str, np.ndarray]                    # weights of the best epoch
    opt: OptState                                    # optimizer state at the best epoch
    stopped_early: bool


def _target_array(sample, kind: str, dtype) -> np.ndarray:
    if kind == "labels":
        return sample.labels.astype(dtype)[None, :, :]
    if kind == "image":
        return sample.image.astype(dtype)
    raise ConfigError(f"unknown target kind '{kind}'")


def _batch(samples, kind: str, dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image.astype(dtype) for s in samples])
    t = np.stack([_target_array(s, kind, dtype) for s in samples])
    return x, t


def evaluate_mse(graph: Graph, samples, batch_size: int, target: str = "labels") -> float:
    """Mean squared error over all pixels of `samples`, in infer mode."""
    dtype = next(iter(graph.parameters()))[1].dtype
    sse = 0.0
    count = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x, t = _batch(chunk, target, dtype)
        out = graph.forward(x, train=False)
        diff = out.data - t
        sse += float((diff * diff).sum())
        count += diff.size
    return sse / count


def train(
    graph: Graph,
    train_samples: Sequence,
    val_samples: Sequence,
    cfg: TrainConfig,
    target: str = "labels",
    augment_fn: Optional[Callable] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the full protocol and leave the best-epoch weights in `graph`.

    Per epoch: seeded shuffle, batched forward/MSE/backward/AdaMax, then a
    validation pass that drives the plateau schedule and early stopping.
    Aborts with diagnostics when the loss diverges (NaN or > 1e6).
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise ConfigError("empty train or validation set")

    dtype = next(iter(graph.parameters()))[1].dtype
    params = list(graph.parameters())
    opt = OptState.for_graph(graph)
    tracker = ProtocolTracker(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(11,)))

    best_params = {name: p.data.copy() for name, p in params}
    best_opt = opt.snapshot()
    history: list[tuple[int, float, float, float]] = []
    stopped_early = False

    strict_prev = T.set_strict_finite(False)   # the loss is checked every step instead
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            lr_used = tracker.lr
            order = rng.permutation(len(train_samples))
            loss_sum = 0.0
            loss_n = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                if augment_fn is not None:
                    chunk = [augment_fn(s, rng) for s in chunk]
                x, t = _batch(chunk, target, dtype)
                for _, p in params:
                    p.zero_grad()
                out = graph.forward(x, train=True)
                loss = T.mse_loss(out, Tensor(t), name="loss")
                value = loss.item()
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise NumericError(
                        f"training diverged at epoch {epoch} (loss={value!r}, lr={lr_used!r})"
                    )
                loss.backward()
                adamax_step(params, opt, lr_used, cfg.beta1, cfg.beta2, cfg.adamax_eps)
                loss_sum += value * len(chunk)
                loss_n += len(chunk)

            val_loss = evaluate_mse(graph, val_samples, cfg.batch_size, target)
            event = tracker.observe(val_loss)
            if event.improved:
                best_params = {name: p.data.copy() for name, p in params}
                best_opt = opt.snapshot()
            history.append((epoch, loss_sum / loss_n, val_loss, lr_used))
            if log:
                log(f"epoch {epoch:3d}  train {loss_sum / loss_n:.6f}  "
                    f"val {val_loss:.6f}  lr {lr_used:.2e}")
            if event.stop:
                stopped_early = True
                break
    finally:
        T.set_strict_finite(strict_prev)

    graph.load_state(best_params, strict=False)
    return TrainResult(
        history=history,
        best_epoch=tracker.best_epoch,
        best_val=tracker.best,
        params=best_params,
        opt=best_opt,
        stopped_early=stopped_early,
    )


def quantize(output: np.ndarray) -> np.ndarray:
    """Round half away from zero, clamp to the label range [0, 6]."""
    a = np.asarray(output)
    rounded = np.copysign(np.floor(np.abs(a) + 0.5), a)
    return np.clip(rounded, 0, 6).astype(np.uint8)


def pretrain_autoencoder(
    graph: Graph,
    images: Sequence,
    cfg: TrainConfig,
    log: Optional[Callable[[str], None]] = None,
) -> dict[str, np.ndarray]:
    """Train the (skip-disabled) network to reconstruct its input for
    `pretrain_epochs` epochs and return the resulting state, which loads
    into the skip-enabled build unchanged. Zero epochs is a no-op."""
    if cfg.pretrain_epochs == 0:
        return graph.state()
    n_val = max(1, round(cfg.val_fraction * len(images)))
    if len(images) <= n_val:
        raise ConfigError("not enough images to split off a validation set")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(23,)))
    order = rng.permutation(len(images))
    val = [images[i] for i in order[:n_val]]
    tr = [images[i] for i in order[n_val:]]
    pcfg = replace(cfg, max_epochs=cfg.pretrain_epochs)
    train(graph, tr, val, pcfg, target="image", log=log)
    return graph.state()


@dataclass
class Variant:
    net: NetConfig
    train: TrainConfig
    label: str = ""


_DILATION_CHOICES = ((1, 3, 5), (1, 3), (3, 5), (1, 5))
_BOTTLENECK_CHOICES = (0.75, 1.0, 1.25, 1.5)
_CAP_MULT_CHOICES = (8, 13, 21)


def mutate_variant(v: Variant, rng: np.random.Generator) -> Variant:
    """Flip one block-layout knob: the dilation set, the bottleneck width
    multiplier or the filter cap."""
    knob = rng.choice(("dilations", "bottleneck_mult", "filter_cap"))
    net = v.net
    if knob == "dilations":
        options = [d for d in _DILATION_CHOICES if d != net.dilations]
        net = replace(net, dilations=options[rng.integers(len(options))])
    elif knob == "bottleneck_mult":
        options = [m for m in _BOTTLENECK_CHOICES if m != net.bottleneck_mult]
        net = replace(net, bottleneck_mult=options[rng.integers(len(options))])
    else:
        options = [c * net.base_filters for c in _CAP_MULT_CHOICES
                   if c * net.base_filters != net.filter_cap]
        net = replace(net, filter_cap=options[rng.integers(len(options))])
    return Variant(net=net, train=v.train, label=f"{v.label}+{knob}")


def variant_search(
    pool: Sequence[Variant],
    train_samples: Sequence,
    val_samples: Sequence,
    rounds: int,
    budget_epochs: int = 3,
    seed: int = 0,
    dtype=np.float64,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[Variant, float, list[tuple[str, float]]]:
    """Two candidates per round; the lower validation loss survives and a
    mutated copy becomes the next challenger. A diverging candidate scores
    infinity. Ties keep the incumbent, so identical configs return the
    first. Returns (survivor, its loss, per-candidate history)."""
    if not pool:
        raise ConfigError("empty variant pool")
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(37,)))
    history: list[tuple[str, float]] = []

    def fitness(v: Variant, idx: int) -> float:
        graph = build_network(v.net, seed=1000 + idx, dtype=dtype)
        cfg = replace(v.train, max_epochs=budget_epochs)
        try:
            result = train(graph, train_samples, val_samples, cfg)
        except NumericError:
            return float("inf")
        return result.best_val

    champion = pool[0]
    champ_loss = fitness(champion, 0)
    history.append((champion.label or "candidate-0", champ_loss))
    idx = 1
    for rnd in range(rounds):
        if rnd == 0 and len(pool) > 1:
            challenger = pool[1]
        else:
            challenger = mutate_variant(champion, rng)
        c_loss = fitness(challenger, idx)
        history.append((challenger.label or f"candidate-{idx}", c_loss))
        if log:
            log(f"round {rnd + 1}: champion {champ_loss!r} vs challenger {c_loss!r}")
        if c_loss < champ_loss:
            champion, champ_loss = challenger, c_loss
        idx += 1
    return champion, champ_loss, history
