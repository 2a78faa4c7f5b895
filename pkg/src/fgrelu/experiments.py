"""Experiment presets and runners.

Each ``run_*`` function takes an :class:`ExperimentConfig`, trains what it
needs, writes its artifacts (``curves.csv``, ``sweep.csv``,
``hist_<layer>.csv``, ``manifest.json``, image dumps) to ``config.out`` when
set, and returns the in-memory results.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .activation import FgReluParams
from .data import (Dataset, NoiseSpec, load_cifar10, load_mnist, reduce_contrast,
                   synthetic_fixture)
from .errors import ParameterError, SpecError, UsageError
from .network import (FeedbackEdge, LayerSpec, Network, NetworkSpec, comprehensive_edges,
                      conv, deconv, dense, load_checkpoint, save_checkpoint, weighted_indices)
from .train import RunRecord, TrainConfig, evaluate, pass_outputs, train

log = logging.getLogger(__name__)

KINDS = ("curve_compare", "timestep_sweep", "constant_gain", "noise_sweep", "grid_search",
         "gain_hist", "contrast_sweep", "gain_probe", "classify", "train", "eval")

MNIST_DIMS = (784, 392, 196, 392, 784)


# ---------------------------------------------------------------------------
# presets

def _mnist_ae(bottleneck: int) -> NetworkSpec:
    layers = (dense(392, "relu", "E1"), dense(bottleneck, "relu", "E2"),
              dense(392, "relu", "D1"), dense(784, "sigmoid", "D2"))
    return NetworkSpec((784,), layers)


def _cifar_ae(batch_norm: bool) -> NetworkSpec:
    blocks = [conv(16, 5, "relu", "E1"), conv(16, 5, "relu", "E2"),
              deconv(16, 5, "relu", "D1")]
    layers = []
    for b in blocks:
        layers.append(b)
        if batch_norm:
            layers.append(LayerSpec("batch_norm", name=f"{b.name}_bn"))
    layers.append(deconv(3, 5, "sigmoid", "D2"))
    return NetworkSpec((3, 32, 32), tuple(layers))


def _cifar_clf() -> NetworkSpec:
    layers = (
        conv(64, 5, "relu", "C1", padding="same"), LayerSpec("max_pool", name="P1"),
        LayerSpec("batch_norm", name="BN1"), LayerSpec("dropout", name="DO1"),
        conv(64, 5, "relu", "C2", padding="same"), LayerSpec("max_pool", name="P2"),
        LayerSpec("batch_norm", name="BN2"), LayerSpec("dropout", name="DO2"),
        dense(200, "relu", "F1"), LayerSpec("dropout", name="DO3"),
        dense(10, "softmax", "OUT"),
    )
    return NetworkSpec((3, 32, 32), layers, dropout_rate=0.5)


def with_feedback(spec: NetworkSpec, mode: str = "partial", timesteps: int = 2,
                  fg_params: Optional[FgReluParams] = None) -> NetworkSpec:
    """Feedback twin of a plain network.

    ``partial``: one edge from the third weighted layer (first decoder of
    the autoencoders) to the first.  ``comprehensive``: every weighted layer
    receives an edge from every weighted layer above it.  Targets switch to
    the gated ReLU (or keep a threshold-variant activation).
    """
    idx = weighted_indices(spec.layers)
    if mode == "partial":
        if len(idx) < 3:
            raise SpecError("partial feedback needs at least three weighted layers")
        pairs = [(idx[2], idx[0])]
    elif mode == "comprehensive":
        pairs = [(s, t) for a, t in enumerate(idx[:-1]) for s in idx[a + 1:]]
    else:
        raise UsageError(f"unknown feedback mode {mode!r}")
    targets = {t for _, t in pairs}
    layers = tuple(
        dataclasses.replace(l, activation="fg_relu") if i in targets and not l.gated else l
        for i, l in enumerate(spec.layers))
    return dataclasses.replace(spec, layers=layers,
                               feedback_edges=tuple(FeedbackEdge(s, t) for s, t in pairs),
                               timesteps=timesteps, fg_params=fg_params or spec.fg_params)


def _comprehensive(spec: NetworkSpec) -> NetworkSpec:
    out = with_feedback(spec, "comprehensive")
    # same edge set as comprehensive_edges() on the gated layers
    assert len(out.feedback_edges) == len(comprehensive_edges(out.layers))
    return out


PRESETS = {
    "mnist_ae_196": lambda: _mnist_ae(196),
    "mnist_ae_10": lambda: _mnist_ae(10),
    "mnist_ae_10_partial": lambda: with_feedback(_mnist_ae(10), "partial"),
    "mnist_ae_10_comprehensive": lambda: _comprehensive(_mnist_ae(10)),
    "cifar_ae": lambda: _cifar_ae(False),
    "cifar_ae_bn": lambda: _cifar_ae(True),
    "cifar_clf": _cifar_clf,
}


def preset(name: str) -> NetworkSpec:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[name]()


def default_loss(name: str) -> str:
    if name.startswith("mnist"):
        return "bce"
    if name == "cifar_clf":
        return "softmax_cross_entropy"
    return "mse"


def default_feedback(name: str) -> str:
    return "comprehensive" if name == "cifar_clf" else "partial"


def baseline_and_feedback(spec: NetworkSpec, mode: str, timesteps: int = 2,
                          fg_params=None) -> tuple[NetworkSpec, NetworkSpec]:
    """(no-feedback twin, feedback variant) of ``spec``."""
    if spec.feedback_edges:
        fb = spec if fg_params is None else spec.replace(fg_params=fg_params)
        if timesteps != fb.timesteps:
            fb = fb.replace(timesteps=timesteps)
        return spec.without_feedback(), fb
    return spec.without_feedback(), with_feedback(spec, mode, timesteps, fg_params)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    kind: str = "curve_compare"
    preset: str = "mnist_ae_10"
    network: Optional[dict] = None  # inline NetworkSpec.to_dict(); overrides preset
    train: Optional[TrainConfig] = None  # loss defaults per preset when unset
    feedback: Optional[str] = None  # partial | comprehensive; default per preset
    fg_params: dict = field(default_factory=dict)
    timesteps: int = 2
    replicates: int = 3
    # data
    dataset: Optional[str] = None  # mnist | cifar10 | synthetic; default per preset
    data_path: Optional[str] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    full_data: bool = False
    # sweep axes
    timestep_list: list = field(default_factory=lambda: [1, 2, 4, 6, 8])
    sigmas: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    noise_seeds: int = 5
    eta_grid: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])
    beta_grid: list = field(default_factory=lambda: [0.8, 0.85, 0.9, 0.95])
    contrast_factors: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    gain_value: float = 10.0
    gain_scope: str = "layer"  # layer | all
    gain_layer: Optional[str] = None  # default: the partial-feedback target
    hist_bins: int = 20
    probe_layer: str = "E2"
    probe_gains: list = field(default_factory=lambda: [float(g) for g in range(11)])
    probe_units: Optional[list] = None
    probe_reference: float = 10.0
    probe_images: list = field(default_factory=lambda: [0])
    dump_images: int = 0
    checkpoint: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.train is None:
            self.train = {}
        if isinstance(self.train, dict):
            self.train = TrainConfig(**{"loss": default_loss(self.preset), **self.train})
        if self.kind not in KINDS:
            raise UsageError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.replicates < 1:
            raise UsageError("replicates must be >= 1")
        for axis in ("timestep_list", "sigmas", "eta_grid", "beta_grid", "contrast_factors",
                     "probe_gains"):
            if not getattr(self, axis):
                raise UsageError(f"sweep axis {axis} must be nonempty")

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            raw = yaml.safe_load(text) or {}
        else:
            raw = json.loads(text)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)} in {path}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    # -- derived ------------------------------------------------------------

    @property
    def loss(self) -> str:
        return self.train.loss

    def base_spec(self) -> NetworkSpec:
        spec = NetworkSpec.from_dict(self.network) if self.network else preset(self.preset)
        if self.fg_params:
            spec = spec.replace(fg_params=FgReluParams(**self.fg_params))
        return spec

    def feedback_mode(self) -> str:
        return self.feedback or default_feedback(self.preset)

    def variants(self, timesteps=None, fg_params=None) -> tuple[NetworkSpec, NetworkSpec]:
        fg = FgReluParams(**self.fg_params) if fg_params is None and self.fg_params else fg_params
        return baseline_and_feedback(self.base_spec(), self.feedback_mode(),
                                     timesteps or self.timesteps, fg)

    def dataset_name(self) -> str:
        if self.dataset:
            return self.dataset
        return "mnist" if self.preset.startswith("mnist") else "cifar10"


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Desk-scale subsample unless ``full_data``: 5000/1000 MNIST, 2000/500 CIFAR-10."""
    name = cfg.dataset_name()
    if name == "mnist":
        path = cfg.data_path or os.environ.get("FG_MNIST_DIR", "data/mnist")
        train_ds, test_ds = load_mnist(path)
        n_tr, n_te = 5000, 1000
    elif name == "cifar10":
        path = cfg.data_path or os.environ.get("FG_CIFAR_DIR", "data/cifar10")
        train_ds, test_ds = load_cifar10(path)
        n_tr, n_te = 2000, 500
    elif name == "synthetic":
        shape = cfg.base_spec().input_shape
        n_tr, n_te = cfg.n_train or 256, cfg.n_test or 64
        dim = int(np.prod(shape))
        full = synthetic_fixture(n_tr + n_te, dim, seed=1, image_shape=shape)
        return (Dataset(full.images[:n_tr], full.labels[:n_tr], "train"),
                Dataset(full.images[n_tr:], full.labels[n_tr:], "test"))
    else:
        raise UsageError(f"unknown dataset {name!r}")
    if cfg.full_data:
        return train_ds, test_ds
    return (train_ds.subset(cfg.n_train or n_tr, seed=0),
            test_ds.subset(cfg.n_test or n_te, seed=0))


# ---------------------------------------------------------------------------
# output helpers

def _out(cfg) -> Optional[Path]:
    if cfg.out is None:
        return None
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(cfg: ExperimentConfig, data: tuple, extra: Optional[dict] = None):
    out = _out(cfg)
    if out is None:
        return None
    body = {"config": cfg.to_dict(),
            "data": {d.split: {"n": len(d), "sha256": d.checksum()} for d in data},
            "seeds": [cfg.train.seed + r for r in range(cfg.replicates)],
            "defaults": {"batch_size": cfg.train.batch_size, "eval_every": cfg.train.eval_every}}
    if extra:
        body.update(extra)
    blob = json.dumps(body, sort_keys=True, indent=2, default=str)
    body["content_hash"] = hashlib.sha256(blob.encode()).hexdigest()[:16]
    (out / "manifest.json").write_text(json.dumps(body, sort_keys=True, indent=2, default=str))
    return body


def write_curves(path, records: dict):
    """``records`` maps (variant, replicate) to RunRecord."""
    has_acc = any(r.test_accuracy for r in records.values())
    cols = ["variant", "replicate", "seed", "step", "train_loss", "test_loss"]
    cols += ["test_accuracy"] if has_acc else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for (variant, rep), rec in records.items():
            for row in rec.rows():
                line = [variant, rep, rec.seed, row["step"], repr(float(row["train_loss"])),
                        repr(float(row["test_loss"]))]
                if has_acc:
                    line.append(repr(float(row.get("test_accuracy", float("nan")))))
                w.writerow(line)


def summarize_curves(path) -> dict:
    """Mean final test loss (and accuracy) per variant, recomputed from ``curves.csv``."""
    finals: dict = {}
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    last = {}
    for r in rows:
        key = (r["variant"], r["replicate"])
        if key not in last or int(r["step"]) >= int(last[key]["step"]):
            last[key] = r
    for (variant, _), r in last.items():
        finals.setdefault(variant, []).append(r)
    summary = {}
    for variant, rs in finals.items():
        summary[variant] = {"mean_final_test_loss": float(np.mean([float(r["test_loss"]) for r in rs])),
                            "replicates": len(rs)}
        if "test_accuracy" in rs[0]:
            summary[variant]["mean_final_accuracy"] = float(
                np.mean([float(r["test_accuracy"]) for r in rs]))
    return summary


def write_table(path, rows: list[dict]):
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_pnm(path, image: np.ndarray):
    """Binary PGM for (H, W) or PPM for (3, H, W) images in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
        payload = img.tobytes()
    else:
        header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode()
        payload = img.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(header + payload)


def to_image(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat)
    if flat.ndim == 1:
        side = int(round(np.sqrt(flat.size)))
        return flat.reshape(side, side)
    return flat


def tile(images: list[list[np.ndarray]]) -> np.ndarray:
    """Grid of equally shaped images (rows of columns)."""
    return np.concatenate([np.concatenate(row, axis=-1) for row in images], axis=-2)


# ---------------------------------------------------------------------------
# runners

@dataclass
class SweepTable:
    rows: list = field(default_factory=list)
    best: Optional[dict] = None
    records: dict = field(default_factory=dict, repr=False)


def _seeds(cfg):
    return [cfg.train.seed + r for r in range(cfg.replicates)]


def _train(spec, data, cfg, seed) -> RunRecord:
    tc = dataclasses.replace(cfg.train, seed=seed)
    return train(Network(spec, seed=seed, dtype=tc.dtype), data[0], data[1], tc)


def _get_network(cfg, data, spec, seed) -> Network:
    if cfg.checkpoint:
        net, _ = load_checkpoint(cfg.checkpoint)
        return net
    return _train(spec, data, cfg, seed).network


def run_train(cfg: ExperimentConfig, data=None) -> RunRecord:
    """Train one network (the preset as given, or its feedback twin)."""
    data = data or load_data(cfg)
    spec = cfg.base_spec()
    if cfg.feedback and not spec.feedback_edges:
        spec = cfg.variants()[1]
    rec = _train(spec, data, cfg, cfg.train.seed)
    out = _out(cfg)
    if out is not None:
        write_curves(out / "curves.csv", {("model", 0): rec})
        save_checkpoint(out / "checkpoint.bin", rec.network)
        write_manifest(cfg, data, {"status": rec.status, "n_params": rec.network.n_params})
    return rec


def run_eval(cfg: ExperimentConfig, data=None, sigma: float = 0.0, noise_seed: int = 0) -> dict:
    """Test-set loss (and accuracy) of a saved network, optionally under noise."""
    data = data or load_data(cfg)
    if not cfg.checkpoint:
        raise UsageError("eval needs a checkpoint")
    net, _ = load_checkpoint(cfg.checkpoint)
    noise = NoiseSpec(sigma, noise_seed) if sigma > 0 else None
    res = evaluate(net, data[1], cfg.loss, noise)
    result = {"loss": res.loss, "accuracy": res.accuracy, "sigma": sigma}
    out = _out(cfg)
    if out is not None:
        (out / "eval.json").write_text(json.dumps(result, indent=2))
    return result


def run_curve_compare(cfg: ExperimentConfig, data=None) -> dict:
    """Train feedback and no-feedback variants under the same seeds."""
    data = data or load_data(cfg)
    base, fb = cfg.variants()
    records = {}
    for r, seed in enumerate(_seeds(cfg)):
        records[("no_feedback", r)] = _train(base, data, cfg, seed)
        records[("feedback", r)] = _train(fb, data, cfg, seed)
    summary = _summary(records)
    out = _out(cfg)
    if out is not None:
        write_curves(out / "curves.csv", records)
        write_table(out / "summary.csv", [{"variant": k, **v} for k, v in summary.items()])
        write_manifest(cfg, data)
    return {"records": records, "summary": summary}


def _summary(records: dict) -> dict:
    out: dict = {}
    for (variant, _), rec in records.items():
        out.setdefault(variant, []).append(rec.final_test_loss)
    return {k: {"mean_final_test_loss": float(np.mean(v)), "replicates": len(v)}
            for k, v in out.items()}


def run_timestep_sweep(cfg: ExperimentConfig, data=None) -> SweepTable:
    """One model per (timesteps, replicate); t = 1 drops the feedback edges."""
    data = data or load_data(cfg)
    table = SweepTable()
    for t in cfg.timestep_list:
        if t < 1:
            raise ParameterError(f"timesteps must be >= 1, got {t}")
        base, fb = cfg.variants(timesteps=max(t, 2))
        spec, dropped = (base, bool(fb.feedback_edges)) if t == 1 else (fb, False)
        for r, seed in enumerate(_seeds(cfg)):
            rec = _train(spec, data, cfg, seed)
            table.records[(f"t={t}", r)] = rec
            table.rows.append({"timesteps": t, "replicate": r, "seed": seed,
                               "final_test_loss": rec.final_test_loss,
                               "edges_dropped": dropped, "status": rec.status})
    table.best = _means(table.rows, "timesteps")
    _write_sweep(cfg, data, table)
    return table


def _means(rows, key) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["final_test_loss"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def _write_sweep(cfg, data, table: SweepTable, extra=None):
    out = _out(cfg)
    if out is None:
        return
    write_table(out / "sweep.csv", table.rows)
    if table.records:
        write_curves(out / "curves.csv", table.records)
    write_manifest(cfg, data, extra)


def override_variant(spec: NetworkSpec, value: float, scope: str,
                     layer: Optional[str] = None) -> NetworkSpec:
    """Plain network whose gate(s) use a fixed gain instead of feedback."""
    plain = spec.without_feedback()
    if scope == "all":
        return plain.replace(fg_params=dataclasses.replace(plain.fg_params, gain_override=value))
    if scope != "layer":
        raise UsageError(f"gain scope must be 'layer' or 'all', got {scope!r}")
    names = [l.name for l in plain.layers]
    if layer not in names:
        raise UsageError(f"unknown layer {layer!r}; layers are {names}")
    layers = tuple(dataclasses.replace(l, gain_override=value) if l.name == layer else l
                   for l in plain.layers)
    return plain.replace(layers=layers)


def run_constant_gain(cfg: ExperimentConfig, data=None) -> SweepTable:
    """Baseline, learned feedback and constant-gain override, trained alike."""
    if cfg.gain_value <= 0:
        raise ParameterError(f"gain_value must be positive, got {cfg.gain_value}")
    data = data or load_data(cfg)
    base, fb = cfg.variants()
    layer = cfg.gain_layer or fb.layers[fb.feedback_edges[0].target].name
    ovr = override_variant(fb, cfg.gain_value, cfg.gain_scope, layer)
    table = SweepTable()
    for r, seed in enumerate(_seeds(cfg)):
        for name, spec in (("no_feedback", base), ("feedback", fb), ("constant_gain", ovr)):
            rec = _train(spec, data, cfg, seed)
            table.records[(name, r)] = rec
            table.rows.append({"variant": name, "replicate": r, "seed": seed,
                               "final_test_loss": rec.final_test_loss,
                               "n_params": rec.network.n_params,
                               "n_feedback_params": sum(v.size for k, v in rec.network.params.items()
                                                        if k.startswith("fb/"))})
    table.best = _means(table.rows, "variant")
    _write_sweep(cfg, data, table, {"gain_layer": layer, "gain_scope": cfg.gain_scope})
    return table


def run_noise_sweep(cfg: ExperimentConfig, data=None, networks: Optional[dict] = None) -> SweepTable:
    """Loss against noise level for both variants.

    ``networks`` may map ``(variant, replicate)`` to already trained
    networks; missing ones are trained here.  Each row averages the loss
    over ``cfg.noise_seeds`` independent noise draws.
    """
    data = data or load_data(cfg)
    base, fb = cfg.variants()
    networks = dict(networks or {})
    table = SweepTable()
    for r, seed in enumerate(_seeds(cfg)):
        for name, spec in (("no_feedback", base), ("feedback", fb)):
            if (name, r) not in networks:
                rec = _train(spec, data, cfg, seed)
                table.records[(name, r)] = rec
                networks[(name, r)] = rec.network
    for sigma in cfg.sigmas:
        for r, seed in enumerate(_seeds(cfg)):
            for name in ("no_feedback", "feedback"):
                net = networks[(name, r)]
                if sigma == 0:
                    loss = evaluate(net, data[1], cfg.loss).loss
                else:
                    loss = float(np.mean([
                        evaluate(net, data[1], cfg.loss, NoiseSpec(float(sigma), 1000 * r + k)).loss
                        for k in range(cfg.noise_seeds)]))
                table.rows.append({"sigma": float(sigma), "variant": name, "replicate": r,
                                   "seed": seed, "loss": loss})
    _write_sweep(cfg, data, table)
    return table


def run_grid_search(cfg: ExperimentConfig, data=None) -> SweepTable:
    """Train a feedback model per (beta_max, eta); best = lowest mean final loss.

    Ties go to the larger beta_max, then the smaller eta.
    """
    data = data or load_data(cfg)
    table = SweepTable()
    means = {}
    for beta_max in cfg.beta_grid:
        for eta in cfg.eta_grid:
            fg = FgReluParams(beta_max=float(beta_max), eta=float(eta))
            _, fb = cfg.variants(fg_params=fg)
            losses = []
            for r, seed in enumerate(_seeds(cfg)):
                rec = _train(fb, data, cfg, seed)
                table.records[(f"beta={beta_max},eta={eta}", r)] = rec
                losses.append(rec.final_test_loss)
                table.rows.append({"beta_max": float(beta_max), "eta": float(eta), "replicate": r,
                                   "seed": seed, "final_test_loss": rec.final_test_loss})
            means[(float(beta_max), float(eta))] = float(np.mean(losses))
    key = min(means, key=lambda k: (means[k], -k[0], k[1]))
    table.best = {"beta_max": key[0], "eta": key[1], "mean_final_test_loss": means[key]}
    _write_sweep(cfg, data, table, {"best": table.best})
    return table


def histograms(gates, max_gain: float, bins: int = 20) -> dict:
    """Per layer: feedback and gain histograms as lists of (lo, hi, count)."""
    out = {}
    for layer in gates.layers:
        md, g = gates.mu_d[layer].ravel(), gates.gain[layer].ravel()
        lo, hi = float(md.min()), float(md.max())
        if hi <= lo:
            hi = lo + 1.0
        md_counts, md_edges = np.histogram(md, bins=bins, range=(lo, hi))
        g_counts, g_edges = np.histogram(g, bins=bins, range=(0.0, max_gain))
        out[layer] = {
            "mu_d": list(zip(md_edges[:-1], md_edges[1:], md_counts)),
            "gain": list(zip(g_edges[:-1], g_edges[1:], g_counts)),
        }
    return out


def run_gain_hist(cfg: ExperimentConfig, data=None, network: Optional[Network] = None) -> dict:
    """Feedback and gain histograms over the test set for every gated layer."""
    data = data or load_data(cfg)
    if network is None:
        _, fb = cfg.variants()
        network = _get_network(cfg, data, fb, cfg.train.seed)
    res = evaluate(network, data[1], cfg.loss, collect_gates=True)
    hists = histograms(res.gates, network.spec.fg_params.max_gain, cfg.hist_bins)
    out = _out(cfg)
    if out is not None:
        for layer, h in hists.items():
            rows = [{"quantity": q, "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)}
                    for q in ("mu_d", "gain") for lo, hi, c in h[q]]
            write_table(out / f"hist_{layer}.csv", rows)
        write_manifest(cfg, data)
    return {"histograms": hists, "gates": res.gates, "network": network}


def run_contrast_sweep(cfg: ExperimentConfig, data=None, network: Optional[Network] = None) -> SweepTable:
    """Mean-pixel difference between first- and second-pass reconstructions per contrast factor."""
    data = data or load_data(cfg)
    if network is None:
        _, fb = cfg.variants()
        network = _get_network(cfg, data, fb, cfg.train.seed)
    if network.spec.timesteps < 2:
        raise SpecError("contrast sweep needs a network with at least two passes")
    out = _out(cfg)
    table = SweepTable()
    test = data[1].images
    for c in cfg.contrast_factors:
        imgs = reduce_contrast(test, float(c))
        outs = pass_outputs(network, imgs)
        axes = tuple(range(1, test.ndim))
        diff = np.abs(outs[0].mean(axis=axes) - outs[1].mean(axis=axes))
        table.rows.append({"contrast": float(c), "mean_abs_pass_diff": float(diff.mean())})
        if out is not None:
            for k in range(min(cfg.dump_images, len(test))):
                grid = tile([[to_image(test[k]), to_image(imgs[k]), to_image(outs[0][k]),
                              to_image(outs[1][k])]])
                write_pnm(out / f"recon_contrast{c:.1f}_{k}.{'pgm' if grid.ndim == 2 else 'ppm'}",
                          grid)
    _write_sweep(cfg, data, table)
    return table


def run_gain_probe(cfg: ExperimentConfig, data=None, network: Optional[Network] = None) -> dict:
    """Feed fixed per-unit gains into one layer and record the reconstructions.

    For probed unit ``i`` and gain ``g`` the layer's gain vector is the
    reference value everywhere except ``g`` at unit ``i``.  Returns an array
    of shape (images, units, gains) + output shape.
    """
    data = data or load_data(cfg)
    if network is None:
        _, fb = baseline_and_feedback(cfg.base_spec(), "comprehensive", cfg.timesteps)
        network = _get_network(cfg, data, fb, cfg.train.seed)
    spec = network.spec
    names = [l.name for l in spec.layers]
    if cfg.probe_layer not in names:
        raise ParameterError(f"unknown probe layer {cfg.probe_layer!r}; layers are {names}")
    li = names.index(cfg.probe_layer)
    n_units = spec.layers[li].size
    probe_units = cfg.probe_units if cfg.probe_units is not None else list(range(n_units))
    for u in probe_units:
        if not 0 <= u < n_units:
            raise ParameterError(f"unit {u} out of range for layer {cfg.probe_layer} "
                                 f"with {n_units} units")
    images = data[1].images[list(cfg.probe_images)]
    recon = np.zeros((len(images), len(probe_units), len(cfg.probe_gains)) + images.shape[1:])
    for a, u in enumerate(probe_units):
        for b, g in enumerate(cfg.probe_gains):
            vec = np.full(n_units, float(cfg.probe_reference))
            vec[u] = float(g)
            layers = tuple(dataclasses.replace(l, gain_override=tuple(vec)) if i == li else l
                           for i, l in enumerate(spec.layers))
            probed = Network(spec.replace(layers=layers), seed=network.seed, dtype=network.dtype,
                             params=network.params, state=network.state)
            recon[:, a, b] = pass_outputs(probed, images)[-1]
    out = _out(cfg)
    if out is not None:
        for k, idx in enumerate(cfg.probe_images):
            grid = tile([[to_image(recon[k, a, b]) for b in range(recon.shape[2])]
                         for a in range(recon.shape[1])])
            write_pnm(out / f"recon_probe_{idx}.{'pgm' if grid.ndim == 2 else 'ppm'}", grid)
        write_manifest(cfg, data)
    return {"reconstructions": recon, "units": probe_units, "gains": list(cfg.probe_gains)}


def run_classify(cfg: ExperimentConfig, data=None) -> dict:
    """Classifier with and without feedback; reports final accuracy delta."""
    data = data or load_data(cfg)
    base, fb = cfg.variants()
    records = {}
    for r, seed in enumerate(_seeds(cfg)):
        records[("no_feedback", r)] = _train(base, data, cfg, seed)
        records[("feedback", r)] = _train(fb, data, cfg, seed)
    acc = {v: float(np.mean([rec.final_accuracy for (vv, _), rec in records.items() if vv == v]))
           for v in ("no_feedback", "feedback")}
    out = _out(cfg)
    if out is not None:
        write_curves(out / "curves.csv", records)
        write_manifest(cfg, data, {"final_accuracy": acc})
    return {"records": records, "accuracy": acc,
            "accuracy_delta": acc["feedback"] - acc["no_feedback"]}


RUNNERS = {
    "train": run_train,
    "eval": run_eval,
    "curve_compare": run_curve_compare,
    "timestep_sweep": run_timestep_sweep,
    "constant_gain": run_constant_gain,
    "noise_sweep": run_noise_sweep,
    "grid_search": run_grid_search,
    "gain_hist": run_gain_hist,
    "contrast_sweep": run_contrast_sweep,
    "gain_probe": run_gain_probe,
    "classify": run_classify,
}
