"""Losses, optimizers and the training / evaluation loops."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .activation import GateRecord
from .autograd import PRIMITIVES
from .data import Dataset, NoiseSpec, gaussian_noise
from .errors import NonFiniteError, ParameterError
from .network import Network, NetworkSpec, shared_dropout_masks, update_running_stats

log = logging.getLogger(__name__)

LOSSES = ("mse", "bce", "softmax_cross_entropy")


def loss(kind: str, prediction, target) -> float:
    """Batch-averaged loss; same code path as the training graph."""
    if kind not in LOSSES:
        raise ParameterError(f"unknown loss {kind!r}")
    value, _ = PRIMITIVES[kind][0]([np.asarray(prediction, dtype=float), np.asarray(target)], {})
    return float(value)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 1
    max_batches: Optional[int] = None
    seed: int = 0
    loss: str = "bce"
    eval_every: int = 100
    eval_batch_size: int = 500
    eval_noise: Optional[NoiseSpec] = None
    precision: str = "double"

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.precision not in ("double", "single"):
            raise ParameterError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if isinstance(self.eval_noise, dict):
            self.eval_noise = NoiseSpec(**self.eval_noise)
        self.betas = tuple(self.betas)

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# optimizers

def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient for parameter {name!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            _check_finite(name, g)
        for name, g in grads.items():
            params[name] -= self.lr * g

    def state_dict(self):
        return {}


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            _check_finite(name, g)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.betas, config.eps)


def optimizer_step(params: dict, grads: dict, config: TrainConfig, state=None):
    """Apply one update in place; returns the optimizer (pass it back as ``state``)."""
    opt = state if state is not None else make_optimizer(config)
    opt.step(params, grads)
    return opt


# ---------------------------------------------------------------------------
# records

@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""
    status: str = "ok"
    message: str = ""
    gates: Optional[GateRecord] = None
    network: Optional[Network] = field(default=None, repr=False)

    @property
    def final_test_loss(self) -> float:
        return self.test_loss[-1]

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.test_accuracy[-1] if self.test_accuracy else None

    def rows(self) -> list[dict]:
        rows = []
        for i, step in enumerate(self.steps):
            row = {"step": step, "train_loss": self.train_loss[i], "test_loss": self.test_loss[i]}
            if self.test_accuracy:
                row["test_accuracy"] = self.test_accuracy[i]
            rows.append(row)
        return rows

    def to_csv(self, path):
        rows = self.rows()
        cols = ["step", "train_loss", "test_loss"] + (["test_accuracy"] if self.test_accuracy else [])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if k != "step" else v) for k, v in r.items()})


def config_hash(spec: NetworkSpec, config: TrainConfig, extra=None) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "train": config.to_dict(), "extra": extra},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    loss: float
    accuracy: Optional[float] = None
    gates: Optional[GateRecord] = None


def _target(data: Dataset, idx, kind: str):
    return data.labels[idx] if kind == "softmax_cross_entropy" else data.images[idx]


def evaluate(net: Network, data: Dataset, loss_kind: str = "bce",
             noise: Optional[NoiseSpec] = None, collect_gates: bool = False,
             batch_size: int = 500) -> EvalResult:
    """Forward-only loss (and accuracy for classifiers) over ``data``.

    With ``noise`` set, N(0, sigma^2) is added to every hidden layer's
    pre-activation in every pass, drawn from a stream seeded by
    ``noise.seed``.  ``collect_gates`` logs feedback and gain of every gated
    layer at the final pass.
    """
    use_noise = noise is not None and noise.sigma > 0
    tape = net.tape(training=False, noise=use_noise, loss=loss_kind)
    rng = np.random.default_rng(noise.seed) if use_noise else None
    noise_names = [n for n in tape.placeholders if n.startswith("noise/")]
    spec = net.spec
    gates = GateRecord() if collect_gates else None
    total, correct, n_all = 0.0, 0, len(data)
    for start in range(0, n_all, batch_size):
        idx = slice(start, min(start + batch_size, n_all))
        xb = data.images[idx].astype(net.dtype, copy=False)
        bind = {"x": xb, "target": _target(data, idx, loss_kind)}
        if use_noise:
            _bind_noise(tape, bind, noise_names, xb, noise, rng, net.dtype)
        value = tape.forward(bind)
        total += float(value) * len(xb)
        if loss_kind == "softmax_cross_entropy":
            correct += int(np.sum(np.argmax(tape.meta["final"].value, axis=1) == data.labels[idx]))
        if collect_gates:
            last = spec.timesteps
            for i in spec.gated_layers():
                name = spec.layers[i].name
                gates.add(name, np.array(tape[f"{name}/p{last}/mu_d"].value), spec.fg_params)
    acc = correct / n_all if loss_kind == "softmax_cross_entropy" else None
    return EvalResult(total / n_all, acc, gates)


def _noise_shapes(spec: NetworkSpec) -> dict:
    shapes = spec.shapes
    return {l.name: tuple(shapes[i]) for i, l in enumerate(spec.layers) if l.weighted}


def _bind_noise(tape, bind, names, xb, noise, rng, dtype):
    shapes = _noise_shapes(tape.meta["spec"])
    for name in names:
        layer = name.split("/")[1]
        bind[name] = gaussian_noise((len(xb),) + shapes[layer], noise, rng, dtype)


def pass_outputs(net: Network, images: np.ndarray, batch_size: int = 500) -> list[np.ndarray]:
    """Network output at every pass, stacked over ``images``."""
    tape = net.tape(training=False)
    outs = [[] for _ in range(net.spec.timesteps)]
    for start in range(0, len(images), batch_size):
        tape.forward({"x": images[start:start + batch_size].astype(net.dtype, copy=False)})
        for p in range(net.spec.timesteps):
            outs[p].append(np.array(tape[f"out/p{p + 1}"].value))
    return [np.concatenate(o) for o in outs]


# ---------------------------------------------------------------------------
# training

def train(net: Union[Network, NetworkSpec], train_data: Dataset, test_data: Dataset,
          config: TrainConfig) -> RunRecord:
    """Minibatch training on the final pass's loss, with periodic test evaluation.

    Training itself is noise-free; ``config.eval_noise`` only affects the
    recorded test losses.  A non-finite loss or gradient stops the run and
    returns the partial record with ``status == 'diverged'``.
    """
    if isinstance(net, NetworkSpec):
        net = Network(net, seed=config.seed, dtype=config.dtype)
    if tuple(train_data.input_shape) != tuple(net.spec.input_shape):
        raise ParameterError(f"data shape {train_data.input_shape} != network input "
                             f"{net.spec.input_shape}")
    kind = config.loss
    train_data = train_data.astype(config.dtype)
    test_data = test_data.astype(config.dtype)
    record = RunRecord(seed=config.seed, config_hash=config_hash(net.spec, config), network=net)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = make_optimizer(config)
    tape = net.tape(training=True, loss=kind)
    has_dropout = any(n.startswith("dropout/") for n in tape.placeholders)

    def checkpoint(step, train_loss):
        res = evaluate(net, test_data, kind, config.eval_noise, batch_size=config.eval_batch_size)
        record.steps.append(step)
        record.train_loss.append(train_loss)
        record.test_loss.append(res.loss)
        if res.accuracy is not None:
            record.test_accuracy.append(res.accuracy)
        log.debug("step %d train %.5f test %.5f", step, train_loss, res.loss)
        return res.loss

    initial_train = evaluate(net, train_data, kind, batch_size=config.eval_batch_size).loss
    checkpoint(0, initial_train)

    n = len(train_data)
    per_epoch = -(-n // config.batch_size)
    total = config.epochs * per_epoch
    if config.max_batches is not None:
        total = min(total, config.max_batches)
    step, running, count = 0, 0.0, 0
    order = None
    try:
        while step < total:
            if step % per_epoch == 0:
                order = shuffle_rng.permutation(n)
            b = step % per_epoch
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            bind = {"x": train_data.images[idx], "target": _target(train_data, idx, kind)}
            if has_dropout:
                bind.update(shared_dropout_masks(net.spec, dropout_rng, len(idx),
                                                 dtype=net.dtype))
            value = float(tape.forward(bind))
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite training loss at step {step}")
            grads = tape.backward()
            opt.step(net.params, grads)
            update_running_stats(tape, net.state)
            step += 1
            running += value
            count += 1
            if step % config.eval_every == 0 or step == total:
                test_loss = checkpoint(step, running / count)
                running, count = 0.0, 0
                if not np.isfinite(test_loss):
                    raise NonFiniteError(f"non-finite test loss at step {step}")
    except NonFiniteError as exc:
        log.warning("training diverged: %s", exc)
        record.status = "diverged"
        record.message = str(exc)
    return record
