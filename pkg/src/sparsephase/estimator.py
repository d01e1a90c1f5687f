"""Trainable support-probability estimator.

A small gated recurrent network maps the (scaled) measurement vector to a
probability vector over positions 1..n-1, trained so that the mass sits
uniformly on the union-of-equivalent-supports signature of the generating
signal (minus the always-present origin).  Training data pairs random
sparse signals with nonnegative simplex-shaped noise whose total power is
bounded by the target SNR.

The module also provides an oracle estimator (the ideal output computed
from a known support) used to exercise the retrieval loop independently of
training quality, and a versioned binary model format.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .signals import PRIORS, UNIFORM, ues

_MAGIC = b"SPEM"
_FORMAT_VERSION = 1
_LOG_FLOOR = 1e-12
_SCALE_FLOOR = 1e-12


class ModelFormatError(Exception):
    """Raised when a model file is truncated, corrupted, or incompatible."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass(frozen=True)
class EstimatorArch:
    input_dim: int
    output_dim: int
    hidden_size: int = 128
    num_layers: int = 2
    unfold_steps: int = 5

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_size", "num_layers", "unfold_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainConfig:
    k1: int = 2
    k2: int = 3
    batch_size: int = 64
    batches_per_epoch: int = 200
    epochs: int = 15
    snr_db: float = 30.0
    prior: str = UNIFORM
    lr_schedule: Callable[[int], float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if not 2 <= self.k1 <= self.k2:
            raise ValueError("need 2 <= k1 <= k2 (sparsity 1 has an empty training target)")
        for name in ("batch_size", "batches_per_epoch", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.lr_schedule is None:
            self.lr_schedule = default_lr_schedule


def default_lr_schedule(epoch: int) -> float:
    """1e-4 for the first ten epochs, then divided by 4 per ten-epoch block."""
    return 1e-4 / 4 ** ((epoch - 1) // 10)


# Full-scale settings used for the published headline numbers; recorded as a
# preset only, far beyond what this package trains in its test suite.
def full_scale_arch(n: int, m: int) -> EstimatorArch:
    return EstimatorArch(input_dim=m, output_dim=n - 1, hidden_size=2000, num_layers=2, unfold_steps=20)


def full_scale_train_config(snr_db: float) -> TrainConfig:
    return TrainConfig(k1=2, k2=20, batch_size=10**6, batches_per_epoch=250, epochs=40, snr_db=snr_db)


def desk_arch(n: int, m: int) -> EstimatorArch:
    return EstimatorArch(input_dim=m, output_dim=n - 1, hidden_size=128, num_layers=2, unfold_steps=5)


def desk_train_config(snr_db: float = 30.0, k1: int = 2, k2: int = 3) -> TrainConfig:
    return TrainConfig(k1=k1, k2=k2, batch_size=64, batches_per_epoch=200, epochs=15, snr_db=snr_db)


def target_distribution(support, n: int) -> np.ndarray:
    """Ideal estimator output: uniform mass over the union-of-equivalent-
    supports signature minus the origin, mapped to positions 1..n-1."""
    u = ues(support, n)
    rest = sorted(u.union_minus_zero)
    if not rest:
        raise ValueError("support with a single index has an empty target")
    out = np.zeros(n - 1)
    out[np.asarray(rest) - 1] = 1.0 / len(rest)
    return out


def oracle(support, n: int) -> np.ndarray:
    """Ideal output for a known support; test double for the retrieval loop."""
    if len(set(support)) < 2:
        raise ValueError("oracle requires at least two support indices")
    return target_distribution(support, n)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """-(1/g) * sum target[i] * log(pred[i]) with pred clamped at 1e-12."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("pred and target must have equal shape")
    return float(-(target * np.log(np.maximum(pred, _LOG_FLOOR))).mean())


class _GatedRecurrentNet(nn.Module):
    """Stacked LSTM cells unrolled a fixed number of steps.

    The scaled measurement vector is fed at every step, concatenated with a
    gated feedback of the top layer's previous hidden state; the final top
    hidden state maps through an affine layer and a softmax.
    """

    def __init__(self, arch: EstimatorArch):
        super().__init__()
        self.arch = arch
        h = arch.hidden_size
        self.feedback_gate = nn.Linear(arch.input_dim + h, h)
        cells = [nn.LSTMCell(arch.input_dim + h, h)]
        cells += [nn.LSTMCell(h, h) for _ in range(arch.num_layers - 1)]
        self.cells = nn.ModuleList(cells)
        self.out = nn.Linear(h, arch.output_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        batch = z.shape[0]
        h = [z.new_zeros(batch, self.arch.hidden_size) for _ in self.cells]
        c = [z.new_zeros(batch, self.arch.hidden_size) for _ in self.cells]
        for _ in range(self.arch.unfold_steps):
            gate = torch.sigmoid(self.feedback_gate(torch.cat([z, h[-1]], dim=1)))
            inp = torch.cat([z, gate * h[-1]], dim=1)
            for l, cell in enumerate(self.cells):
                h[l], c[l] = cell(inp if l == 0 else h[l - 1], (h[l], c[l]))
        return torch.softmax(self.out(h[-1]), dim=1)


def _init_weights(net: _GatedRecurrentNet, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, forget-gate biases 1."""
    gen = torch.Generator().manual_seed(seed)
    hidden = net.arch.hidden_size
    with torch.no_grad():
        for name, param in net.named_parameters():
            if param.dim() == 2:
                bound = 1.0 / math.sqrt(param.shape[1])
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()
                if "bias_ih" in name:  # LSTM gate order: input, forget, cell, output
                    param[hidden : 2 * hidden] = 1.0


@dataclass
class EstimatorModel:
    arch: EstimatorArch
    meta: dict
    net: _GatedRecurrentNet

    def as_estimator(self) -> Callable[[np.ndarray], np.ndarray]:
        return lambda y: forward(self, y)


def _scale_inputs(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    scale = max(float(y.max(initial=0.0)), _SCALE_FLOOR)
    return y / scale


def forward(model: EstimatorModel, y: np.ndarray) -> np.ndarray:
    """Probability vector over positions 1..n-1 given measurements y."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.arch.input_dim,):
        raise ValueError(f"expected input of shape ({model.arch.input_dim},), got {y.shape}")
    z = torch.from_numpy(_scale_inputs(y)[None, :].astype(np.float32))
    model.net.eval()
    with torch.no_grad():
        out = model.net(z)[0]
    return out.numpy().astype(np.float64)


def _forward_batch(model: EstimatorModel, ys: np.ndarray) -> np.ndarray:
    scales = np.maximum(ys.max(axis=1, keepdims=True), _SCALE_FLOOR)
    z = torch.from_numpy((ys / scales).astype(np.float32))
    model.net.eval()
    with torch.no_grad():
        return model.net(z).numpy().astype(np.float64)


def _sample_supports(n: int, sparsities: np.ndarray, rng: np.random.Generator) -> list:
    keys = rng.random((sparsities.size, n))
    order = np.argsort(keys, axis=1)
    return [np.sort(order[i, : sparsities[i]]) for i in range(sparsities.size)]


def _sample_nonzeros(prior: str, count: int, rng: np.random.Generator) -> np.ndarray:
    if prior == UNIFORM:
        u = rng.uniform(-0.8, 0.8, size=count)
        return np.where(u < 0, u - 0.2, u + 0.2)
    vals = rng.standard_normal(count)
    vals[vals == 0.0] = 1e-6
    return vals


def sample_measurement_batch(
    n: int, m: int, count: int, k1: int, k2: int, snr_db: float, prior: str, rng: np.random.Generator
) -> tuple:
    """Training measurement pairs: (clean magnitudes z, noise w, supports).

    Noise is alpha * wbar * sum(z) * 10^(-snr/10) with alpha uniform on
    [0, 1] and wbar uniform on the probability simplex, so every sample's
    SNR 10*log10(sum z / sum w) is at least snr_db.
    """
    sparsities = rng.integers(k1, k2 + 1, size=count)
    supports = _sample_supports(n, sparsities, rng)
    x = np.zeros((count, n))
    for i, supp in enumerate(supports):
        x[i, supp] = _sample_nonzeros(prior, supp.size, rng)
    z = np.abs(np.fft.fft(x, n=m, axis=1)) ** 2
    if math.isinf(snr_db):
        w = np.zeros_like(z)
    else:
        alpha = rng.uniform(0.0, 1.0, size=(count, 1))
        exp = rng.standard_exponential((count, m))
        wbar = exp / exp.sum(axis=1, keepdims=True)
        w = alpha * wbar * z.sum(axis=1, keepdims=True) * 10.0 ** (-snr_db / 10.0)
    return z, w, supports


def make_training_batch(
    n: int, m: int, count: int, k1: int, k2: int, snr_db: float, prior: str, rng: np.random.Generator
) -> tuple:
    """Generate `count` (scaled input, target, support) training triples."""
    z, w, supports = sample_measurement_batch(n, m, count, k1, k2, snr_db, prior, rng)
    y = z + w
    targets = np.stack([target_distribution(supp, n) for supp in supports])
    scales = np.maximum(y.max(axis=1, keepdims=True), _SCALE_FLOOR)
    return (y / scales).astype(np.float32), targets.astype(np.float32), supports


def train(
    config: TrainConfig,
    arch: EstimatorArch,
    seed: int,
    log_file=None,
) -> EstimatorModel:
    """Train an estimator with RMSprop; deterministic given the seed.

    Per epoch, batch_size * batches_per_epoch fresh samples are generated
    and consumed in order.  `log_file`, when given, receives one JSON line
    per batch: {"epoch", "batch", "loss", "lr"}.  Raises
    TrainingDivergedError on a non-finite loss.
    """
    n = arch.output_dim + 1
    m = arch.input_dim
    if m < n:
        raise ValueError("arch implies m < n, which the measurement model forbids")

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # keeps reductions deterministic across hosts
    try:
        net = _GatedRecurrentNet(arch)
        _init_weights(net, seed)
        data_rng = np.random.default_rng(seed)
        optimizer = torch.optim.RMSprop(net.parameters(), lr=config.lr_schedule(1))
        epoch_mean_losses = []

        for epoch in range(1, config.epochs + 1):
            lr = config.lr_schedule(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            total = config.batch_size * config.batches_per_epoch
            inputs, targets, _ = make_training_batch(
                n, m, total, config.k1, config.k2, config.snr_db, config.prior, data_rng
            )
            inputs_t = torch.from_numpy(inputs)
            targets_t = torch.from_numpy(targets)
            losses = []
            for b in range(config.batches_per_epoch):
                sl = slice(b * config.batch_size, (b + 1) * config.batch_size)
                preds = net(inputs_t[sl])
                ce = -(targets_t[sl] * torch.log(preds.clamp_min(_LOG_FLOOR))).sum(dim=1) / arch.output_dim
                loss = ce.mean()
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, b + 1, value)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(value)
                if log_file is not None:
                    log_file.write(json.dumps({"epoch": epoch, "batch": b + 1, "loss": value, "lr": lr}) + "\n")
            epoch_mean_losses.append(float(np.mean(losses)))

        meta = {
            "snr_db": "inf" if math.isinf(config.snr_db) else config.snr_db,
            "k1": config.k1,
            "k2": config.k2,
            "prior": config.prior,
            "seed": seed,
            "format_version": _FORMAT_VERSION,
            "epoch_mean_losses": epoch_mean_losses,
        }
        return EstimatorModel(arch=arch, meta=meta, net=net)
    finally:
        torch.set_num_threads(prev_threads)


def containment_rate(
    model: EstimatorModel,
    n_samples: int,
    k1: int,
    k2: int,
    snr_db: float,
    prior: str,
    seed: int,
) -> float:
    """Fraction of fresh samples whose target signature (minus the origin)
    is contained in the model's top-3k output positions."""
    n = model.arch.output_dim + 1
    m = model.arch.input_dim
    rng = np.random.default_rng(seed)
    inputs, _, supports = make_training_batch(n, m, n_samples, k1, k2, snr_db, prior, rng)
    z = torch.from_numpy(inputs)
    model.net.eval()
    with torch.no_grad():
        preds = model.net(z).numpy()
    hits = 0
    for d, supp in zip(preds, supports):
        k = supp.size
        top = np.argsort(-d, kind="stable")[: min(3 * k, d.size)]
        want = np.asarray(sorted(ues(supp, n).union_minus_zero)) - 1
        hits += set(want.tolist()) <= set(top.tolist())
    return hits / len(supports)


def save_model(model: EstimatorModel, path) -> None:
    """Versioned binary format: magic, JSON header, little-endian float32
    parameter payload, SHA-256 payload checksum."""
    state = model.net.state_dict()
    params = [{"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()]
    payload = b"".join(tensor.numpy().astype("<f4").tobytes() for tensor in state.values())
    header = {
        "format_version": _FORMAT_VERSION,
        "arch": {
            "input_dim": model.arch.input_dim,
            "output_dim": model.arch.output_dim,
            "hidden_size": model.arch.hidden_size,
            "num_layers": model.arch.num_layers,
            "unfold_steps": model.arch.unfold_steps,
        },
        "meta": model.meta,
        "params": params,
        "dtype": "float32",
        "byte_order": "little",
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_model_header(path) -> str:
    """The stored JSON header, byte for byte."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ModelFormatError("not an estimator model file (bad magic)")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise ModelFormatError("truncated model file (missing header length)")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise ModelFormatError("truncated model file (incomplete header)")
        return header_bytes.decode("utf-8")


def load_model(path) -> EstimatorModel:
    """Inverse of save_model; verifies version and payload checksum."""
    header_text = read_model_header(path)
    try:
        header = json.loads(header_text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format version {header.get('format_version')!r} (expected {_FORMAT_VERSION})"
        )
    with open(path, "rb") as fh:
        fh.seek(8 + len(header_text.encode("utf-8")))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFormatError("payload checksum mismatch")

    arch = EstimatorArch(**header["arch"])
    net = _GatedRecurrentNet(arch)
    expected = net.state_dict()
    offset = 0
    loaded = {}
    for spec in header["params"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise ModelFormatError(f"unexpected parameter {name} {shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise ModelFormatError("truncated model file (incomplete payload)")
        loaded[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError("payload length does not match the declared parameters")
    net.load_state_dict(loaded)
    meta = dict(header["meta"])
    return EstimatorModel(arch=arch, meta=meta, net=net)
