"""Functional conv nets with a feature-map tap, growable heads and frozen teachers.

A network is an architecture descriptor (a list of layer dicts) plus a dict of
named parameter tensors.  Keeping the forward pass functional means a teacher
snapshot is just a set of constant tensors, and Grad-CAM on the student can be
differentiated a second time with respect to the same parameters.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    CheckpointVersionError,
    ConfigurationError,
    FormatError,
    FrozenModelError,
    InputShapeError,
    NumericalFailure,
)

CHECKPOINT_SCHEMA_VERSION = 1

PARAM_LAYERS = ("conv", "dense")
ACTIVATIONS = ("relu", "sigmoid")
LAYER_TYPES = PARAM_LAYERS + ACTIVATIONS + ("maxpool", "avgpool", "gap", "flatten")

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(precision) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ConfigurationError(f"unknown precision {precision!r}") from None


def set_deterministic(flag: bool = True) -> None:
    """Pin torch to deterministic kernels and one intra-op thread."""
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def small_convnet(n_classes, in_channels=3, image_size=32, channels=(16, 32), kernel=3, pool="max",
                  head_pool="max"):
    """Descriptor for conv->ReLU->pool->conv->ReLU->pool->dense.

    The second conv is the default tap layer.  ``head_pool="gap"`` makes the
    second pool global average pooling (ResNet-style head); ``"max"`` uses
    a 2x2 max pool and flattens.
    """
    if image_size % 4:
        raise ConfigurationError("image_size must be divisible by 4 for two 2x2 pools")
    pool_type = {"max": "maxpool", "avg": "avgpool"}[pool]
    c1, c2 = channels
    if head_pool == "gap":
        tail = [{"type": "gap"}]
        fan_in = c2
    elif head_pool == "max":
        tail = [{"type": "maxpool", "size": 2}, {"type": "flatten"}]
        fan_in = c2 * (image_size // 4) ** 2
    else:
        raise ConfigurationError(f"unknown head_pool {head_pool!r}")
    return [
        {"type": "conv", "name": "conv1", "in": in_channels, "out": c1, "kernel": kernel, "padding": kernel // 2},
        {"type": "relu"},
        {"type": pool_type, "size": 2},
        {"type": "conv", "name": "conv2", "in": c1, "out": c2, "kernel": kernel, "padding": kernel // 2},
        {"type": "relu"},
        *tail,
        {"type": "dense", "name": "fc", "in": fan_in, "out": n_classes},
    ]


def validate_architecture(arch, tap_layer) -> None:
    names = set()
    for layer in arch:
        kind = layer.get("type")
        if kind not in LAYER_TYPES:
            raise ConfigurationError(f"unknown layer type {kind!r}")
        if kind in PARAM_LAYERS:
            name = layer.get("name")
            if not name or name in names:
                raise ConfigurationError(f"parameter layers need unique names, got {name!r}")
            names.add(name)
    if not arch or arch[-1]["type"] != "dense":
        raise ConfigurationError("the final layer must be dense (the classification head)")
    if tap_layer is None:
        return
    taps = [l for l in arch if l.get("name") == tap_layer]
    if not taps:
        raise ConfigurationError(f"tap layer {tap_layer!r} not found")
    if taps[0]["type"] != "conv" or taps[0]["out"] < 1:
        raise ConfigurationError(f"tap layer {tap_layer!r} must be a conv layer with K >= 1 maps")


def init_parameters(arch, generator: torch.Generator, dtype=torch.float64) -> dict[str, torch.Tensor]:
    """He-uniform conv weights, 1/sqrt(fan_in) dense weights, zero biases."""
    params = {}
    for layer in arch:
        kind = layer["type"]
        if kind == "conv":
            shape = (layer["out"], layer["in"], layer["kernel"], layer["kernel"])
            fan_in = layer["in"] * layer["kernel"] ** 2
            bound = math.sqrt(6.0 / fan_in)
        elif kind == "dense":
            shape = (layer["out"], layer["in"])
            fan_in = layer["in"]
            bound = 1.0 / math.sqrt(fan_in)
        else:
            continue
        w = (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        params[layer["name"] + ".weight"] = w.to(dtype)
        if layer.get("bias", True):
            params[layer["name"] + ".bias"] = torch.zeros(layer["out"], dtype=dtype)
    return params


class _Network:
    frozen = False

    def __init__(self, arch, input_shape, params, tap_layer):
        validate_architecture(arch, tap_layer)
        self.arch = copy.deepcopy(list(arch))
        self.input_shape = tuple(int(s) for s in input_shape)
        self.params = params
        self.tap_layer = tap_layer

    @property
    def head_name(self) -> str:
        return self.arch[-1]["name"]

    @property
    def head_size(self) -> int:
        return int(self.params[self.head_name + ".weight"].shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def n_maps(self) -> int:
        return next(l["out"] for l in self.arch if l.get("name") == self.tap_layer)

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.params)

    def parameter_bytes(self) -> bytes:
        """Row-major little-endian float64 serialization, sorted by name."""
        buf = io.BytesIO()
        for name in sorted(self.params):
            arr = self.params[name].detach().cpu().numpy().astype("<f8", copy=False)
            buf.write(name.encode() + b"\0")
            buf.write(np.ascontiguousarray(arr).tobytes())
        return buf.getvalue()

    def parameter_hash(self) -> str:
        return hashlib.sha256(self.parameter_bytes()).hexdigest()

    def __call__(self, images):
        return forward(self, images)


class NetworkModel(_Network):
    """The live, trainable student."""

    def __init__(self, arch, input_shape, params, tap_layer):
        params = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
        super().__init__(arch, input_shape, params, tap_layer)
        check_finite_parameters(self)

    @classmethod
    def initialize(cls, arch, input_shape, tap_layer="conv2", seed=0, precision="float64"):
        gen = torch.Generator().manual_seed(int(seed))
        params = init_parameters(arch, gen, resolve_dtype(precision))
        return cls(arch, input_shape, params, tap_layer)

    @classmethod
    def small_convnet(cls, n_classes, in_channels=3, image_size=32, seed=0, precision="float64", **kw):
        arch = small_convnet(n_classes, in_channels, image_size, **kw)
        return cls.initialize(arch, (in_channels, image_size, image_size), "conv2", seed, precision)


class ModelSnapshot(_Network):
    """Frozen deep copy of a network; serves as the teacher."""

    frozen = True

    def __init__(self, arch, input_shape, params, tap_layer):
        params = {k: v.detach().clone().requires_grad_(False) for k, v in params.items()}
        super().__init__(arch, input_shape, params, tap_layer)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.params.items()}

    def to_student(self) -> NetworkModel:
        return NetworkModel(self.arch, self.input_shape, self.params, self.tap_layer)


def check_finite_parameters(model) -> None:
    for name, p in model.params.items():
        if not torch.isfinite(p).all():
            raise NumericalFailure(f"parameter {name} is not finite")


def snapshot(model: _Network) -> ModelSnapshot:
    check_finite_parameters(model)
    return ModelSnapshot(model.arch, model.input_shape, model.params, model.tap_layer)


def forward(model: _Network, images) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(logits, features)`` for a batch of images.

    ``features`` are the tap-layer maps (B, K, H, W), taken after the tap
    conv's nonlinearity when one directly follows it.  Through a snapshot the
    maps are made a fresh grad-enabled leaf (when autograd is on and the
    input itself is not being differentiated), so Grad-CAM can differentiate
    class scores with respect to them while no gradient ever reaches the
    teacher's parameters.
    """
    x = torch.as_tensor(images)
    if x.dim() != 4 or x.shape[0] < 1 or tuple(x.shape[1:]) != model.input_shape:
        raise InputShapeError(
            f"expected images of shape (B>=1, {', '.join(map(str, model.input_shape))}), got {tuple(x.shape)}"
        )
    x = x.to(model.dtype)
    p = model.params
    features = None
    tap_pending = False
    for i, layer in enumerate(model.arch):
        kind = layer["type"]
        if kind == "conv":
            x = F.conv2d(x, p[layer["name"] + ".weight"], p.get(layer["name"] + ".bias"),
                         stride=layer.get("stride", 1), padding=layer.get("padding", 0))
        elif kind == "dense":
            x = F.linear(x, p[layer["name"] + ".weight"], p.get(layer["name"] + ".bias"))
        elif kind == "relu":
            x = F.relu(x)
        elif kind == "sigmoid":
            x = torch.sigmoid(x)
        elif kind == "maxpool":
            x = F.max_pool2d(x, layer["size"])
        elif kind == "avgpool":
            x = F.avg_pool2d(x, layer["size"])
        elif kind == "gap":
            x = x.mean(dim=(2, 3))
        elif kind == "flatten":
            x = x.flatten(1)
        if kind == "conv" and layer.get("name") == model.tap_layer:
            tap_pending = True
        if tap_pending:
            nxt = model.arch[i + 1]["type"] if i + 1 < len(model.arch) else None
            if nxt in ACTIVATIONS and kind == "conv":
                continue
            if torch.is_grad_enabled() and not x.requires_grad:
                x = x.detach().requires_grad_(True)
            features = x
            tap_pending = False
    if not torch.isfinite(x).all() or (features is not None and not torch.isfinite(features).all()):
        raise NumericalFailure("non-finite activations in forward pass")
    return x, features


def extend_head(model: NetworkModel, k: int, init_scale=None, seed=0) -> NetworkModel:
    """Return a copy of ``model`` whose head has ``k`` extra output rows.

    Existing rows are copied bit-for-bit; new weights and biases are drawn
    uniformly from [-init_scale, init_scale], with ``init_scale`` defaulting
    to 1/sqrt(fan_in).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    head = model.head_name
    w = model.params[head + ".weight"].detach()
    fan_in = w.shape[1]
    scale = 1.0 / math.sqrt(fan_in) if init_scale is None else float(init_scale)
    gen = torch.Generator().manual_seed(int(seed))
    new_w = (torch.rand((k, fan_in), generator=gen, dtype=torch.float64) * 2 - 1) * scale
    params = {n: t.detach() for n, t in model.params.items()}
    params[head + ".weight"] = torch.cat([w, new_w.to(w.dtype)])
    if head + ".bias" in params:
        new_b = (torch.rand(k, generator=gen, dtype=torch.float64) * 2 - 1) * scale
        params[head + ".bias"] = torch.cat([params[head + ".bias"], new_b.to(w.dtype)])
    arch = copy.deepcopy(model.arch)
    arch[-1]["out"] = model.head_size + k
    return NetworkModel(arch, model.input_shape, params, model.tap_layer)


def grad(loss, wrt, create_higher_order=False):
    """Reverse-mode derivatives of a scalar ``loss``.

    ``wrt`` may be a NetworkModel (its parameters), a dict of tensors, or a
    single tensor.  Variables the loss does not depend on get zero gradients.
    With ``create_higher_order`` the results stay on the graph so they can be
    differentiated again.
    """
    if isinstance(wrt, ModelSnapshot):
        raise FrozenModelError("teacher snapshots never receive parameter gradients")
    single = isinstance(wrt, torch.Tensor)
    if isinstance(wrt, NetworkModel):
        wrt = wrt.params
    named = {"_": wrt} if single else dict(wrt)
    if loss.numel() != 1:
        raise ValueError("grad expects a scalar loss")
    live = {n: t for n, t in named.items() if t.requires_grad}
    out = {n: torch.zeros_like(t) for n, t in named.items()}
    if live and loss.requires_grad:
        gs = torch.autograd.grad(loss, list(live.values()), create_graph=create_higher_order,
                                 retain_graph=True, allow_unused=True)
        for n, g in zip(live, gs):
            if g is not None:
                out[n] = g
    return out["_"] if single else out


class MomentumSGD:
    """Heavy-ball SGD: v <- momentum*v + g (+ weight_decay*p); p <- p - lr*v.

    Velocity lives here, not on the model, so teachers never carry it.
    """

    def __init__(self, lr=0.01, momentum=0.9, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, torch.Tensor] = {}

    def step(self, model: NetworkModel, gradients: Mapping[str, torch.Tensor]) -> NetworkModel:
        if model.frozen:
            raise FrozenModelError("cannot take an optimizer step on a snapshot")
        if set(gradients) != set(model.params):
            raise KeyError("gradients must be keyed exactly like the model parameters")
        for name, g in gradients.items():
            if not torch.isfinite(g).all():
                raise NumericalFailure(f"non-finite gradient for {name}; step refused")
        with torch.no_grad():
            for name, p in model.params.items():
                g = gradients[name].detach()
                if self.weight_decay:
                    g = g + self.weight_decay * p
                v = self.velocity.get(name)
                v = g.clone() if v is None else self.momentum * v + g
                self.velocity[name] = v
                p.sub_(self.lr * v)
        return model

    def state_dict(self):
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "velocity": {k: v.clone() for k, v in self.velocity.items()}}

    def load_state_dict(self, state):
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state.get("weight_decay", 0.0)
        self.velocity = {k: v.clone() for k, v in state["velocity"].items()}


def sgd_step(model, gradients, lr, momentum, optimizer: MomentumSGD | None = None):
    """One momentum-SGD update; pass the same ``optimizer`` across calls to keep velocity."""
    if optimizer is None:
        optimizer = MomentumSGD(lr, momentum)
    optimizer.lr, optimizer.momentum = lr, momentum
    return optimizer.step(model, gradients)


@dataclass
class Checkpoint:
    model: NetworkModel
    class_labels: list = field(default_factory=list)
    optimizer_state: dict | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model, class_labels=(), optimizer=None, rng_state=None, extra=None) -> None:
    """Write an npz archive: JSON metadata plus little-endian float64 arrays."""
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "architecture": model.arch,
        "input_shape": list(model.input_shape),
        "tap_layer": model.tap_layer,
        "precision": "float64" if model.dtype == torch.float64 else "float32",
        "head_size": model.head_size,
        "class_labels": [int(c) for c in class_labels],
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {}
    for name, t in model.params.items():
        arrays["param/" + name] = t.detach().cpu().numpy().astype("<f8")
    if optimizer is not None:
        st = optimizer.state_dict()
        meta["optimizer"] = {k: st[k] for k in ("lr", "momentum", "weight_decay")}
        for name, v in st["velocity"].items():
            arrays["velocity/" + name] = v.cpu().numpy().astype("<f8")
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"not a checkpoint archive: {exc}", path=path) from exc
    with archive:
        if "__meta__" not in archive.files:
            raise FormatError("checkpoint has no metadata record", path=path)
        meta = json.loads(archive["__meta__"].tobytes().decode())
        version = meta.get("schema_version")
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointVersionError(
                f"checkpoint schema {version} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})"
            )
        dtype = resolve_dtype(meta["precision"])
        params = {f[6:]: torch.from_numpy(archive[f].astype(np.float64)).to(dtype)
                  for f in archive.files if f.startswith("param/")}
        velocity = {f[9:]: torch.from_numpy(archive[f].astype(np.float64)).to(dtype)
                    for f in archive.files if f.startswith("velocity/")}
    model = NetworkModel(meta["architecture"], meta["input_shape"], params, meta["tap_layer"])
    if model.head_size != meta["head_size"]:
        raise FormatError("head_size disagrees with the stored head weights", path=path)
    opt_state = None
    if "optimizer" in meta:
        opt_state = dict(meta["optimizer"], velocity=velocity)
    return Checkpoint(model, meta["class_labels"], opt_state, meta["rng_state"], meta["extra"])
