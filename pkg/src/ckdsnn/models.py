"""Matched four-stage teacher (conv-BN-ReLU) and spiking student (conv-BN-IF) networks.

Both nets share the same topology so that the final-stage teacher feature map
and student spike train align pixelwise. The student replicates its input
across time steps and reads out class scores from a linear head over the
time-averaged, globally pooled final spikes.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .spiking import IFLayer, NeuronParams, SpikeTrain
from .tensor import Tensor

ARCHS = {
    "base": (32, 64, 128, 256),
    "tiny": (16, 32, 64, 64),
}
STAGE_STRIDES = (1, 2, 2, 2)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1,
                 ksize: int = 3, padding: int = 1):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _kaiming_uniform(rng, (out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize),
            requires_grad=True,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight]


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )

    def parameters(self):
        return [self.weight, self.bias]


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Tensor(
            _kaiming_uniform(rng, (out_features, in_features), in_features), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class _Stage:
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.conv = Conv2d(in_ch, out_ch, rng, stride=stride)
        self.bn = BatchNorm2d(out_ch)

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()


class _ConvNetBase:
    def __init__(self, in_channels: int, num_classes: int, channels, rng):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.channels = tuple(channels)
        self.training = True
        self.stages = []
        prev = in_channels
        for ch, stride in zip(self.channels, STAGE_STRIDES):
            self.stages.append(_Stage(prev, ch, stride, rng))
            prev = ch
        self.head = Linear(prev, num_classes, rng)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self) -> list[Tensor]:
        params = []
        for stage in self.stages:
            params.extend(stage.parameters())
        params.extend(self.head.parameters())
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, stage in enumerate(self.stages, start=1):
            state[f"stage{i}.conv.weight"] = stage.conv.weight.data
            state[f"stage{i}.bn.weight"] = stage.bn.weight.data
            state[f"stage{i}.bn.bias"] = stage.bn.bias.data
            state[f"stage{i}.bn.running_mean"] = stage.bn.running_mean
            state[f"stage{i}.bn.running_var"] = stage.bn.running_var
        state["head.weight"] = self.head.weight.data
        state["head.bias"] = self.head.bias.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise CheckpointError(f"parameter names do not match the architecture: {sorted(missing)}")
        for i, stage in enumerate(self.stages, start=1):
            stage.conv.weight.data = _take(state, f"stage{i}.conv.weight", stage.conv.weight.shape)
            stage.bn.weight.data = _take(state, f"stage{i}.bn.weight", stage.bn.weight.shape)
            stage.bn.bias.data = _take(state, f"stage{i}.bn.bias", stage.bn.bias.shape)
            stage.bn.running_mean = _take(state, f"stage{i}.bn.running_mean", stage.bn.running_mean.shape)
            stage.bn.running_var = _take(state, f"stage{i}.bn.running_var", stage.bn.running_var.shape)
        self.head.weight.data = _take(state, "head.weight", self.head.weight.shape)
        self.head.bias.data = _take(state, "head.bias", self.head.bias.shape)
        return self

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected input [N,{self.in_channels},H,W], got {x.shape}"
            )


def _take(state, name, shape) -> np.ndarray:
    arr = state[name]
    if arr.shape != tuple(shape):
        raise CheckpointError(f"shape mismatch for {name}: checkpoint has {arr.shape}, model needs {tuple(shape)}")
    return np.ascontiguousarray(arr, dtype=np.float32)


class TeacherNet(_ConvNetBase):
    """Continuous-activation network; exposes a tapped stage's feature map (default: last)."""

    def forward(self, x: Tensor, tap_stage: int = 4):
        self._check_input(x)
        if not 1 <= tap_stage <= len(self.stages):
            raise ValueError(f"tap_stage must be in [1,{len(self.stages)}], got {tap_stage}")
        h = x
        tapped = None
        for i, stage in enumerate(self.stages, start=1):
            h = T.relu(stage.bn(stage.conv(h), self.training))
            if i == tap_stage:
                tapped = h
        pooled = T.tmean(h, axis=(2, 3))
        logits = self.head(pooled)
        return logits, tapped

    def __call__(self, x: Tensor):
        return self.forward(x)


class StudentNet(_ConvNetBase):
    """Spiking twin of the teacher: same stages, IF activations, time-replicated input."""

    def __init__(self, in_channels: int = 3, num_classes: int = 10, channels=ARCHS["base"],
                 rng: np.random.Generator | None = None, neuron: NeuronParams | None = None):
        super().__init__(in_channels, num_classes, channels, rng)
        self.neuron = neuron if neuron is not None else NeuronParams()
        self.if_layers = [IFLayer(self.neuron) for _ in self.channels]

    def forward(self, x: Tensor, time_steps: int, record_stages: bool = False, tap_stage: int = 4):
        self._check_input(x)
        if time_steps < 1:
            raise ValueError(f"time_steps must be >= 1, got {time_steps}")
        if not 1 <= tap_stage <= len(self.stages):
            raise ValueError(f"tap_stage must be in [1,{len(self.stages)}], got {tap_stage}")
        n = x.shape[0]
        h = T.repeat_batch(x, time_steps)  # [T*N, C, H, W]
        stage_outputs = []
        tapped = None
        for i, (stage, if_layer) in enumerate(zip(self.stages, self.if_layers), start=1):
            z = stage.bn(stage.conv(h), self.training)
            h = if_layer(z, time_steps)
            if i == tap_stage:
                tapped = h
            if record_stages:
                stage_outputs.append(h.data.reshape((time_steps, n) + h.shape[1:]))
        train = SpikeTrain(
            T.reshape(tapped, (time_steps, n) + tapped.shape[1:]), time_steps
        )
        feat = T.tmean(T.reshape(h, (time_steps, n) + h.shape[1:]), axis=0)
        pooled = T.tmean(feat, axis=(2, 3))
        logits = self.head(pooled)
        if record_stages:
            return logits, train, stage_outputs
        return logits, train

    def __call__(self, x: Tensor, time_steps: int):
        return self.forward(x, time_steps)


def make_teacher(arch: str = "base", in_channels: int = 3, num_classes: int = 10,
                 rng: np.random.Generator | None = None) -> TeacherNet:
    return TeacherNet(in_channels, num_classes, ARCHS[arch], rng)


def make_student(arch: str = "base", in_channels: int = 3, num_classes: int = 10,
                 rng: np.random.Generator | None = None,
                 neuron: NeuronParams | None = None) -> StudentNet:
    return StudentNet(in_channels, num_classes, ARCHS[arch], rng, neuron)


# ----- checkpoint wire format -----
# magic "CKDS", u32 version, u32 tensor count; per tensor: u32 name length,
# UTF-8 name, u8 dtype (0 = float32), u8 rank, rank x u32 dims, LE payload.

CKPT_MAGIC = b"CKDS"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_state(state: dict[str, np.ndarray], path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.asarray(state[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_state(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()

    def need(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes reading {what}")
        view = memoryview(blob)[offset : offset + count]
        offset += count
        return view

    offset = 0
    if bytes(need(4, "magic")) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = bytes(need(name_len, "name")).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", need(2, "tensor header"))
        if dtype_code != 0:
            raise CheckpointError(f"unsupported dtype code {dtype_code} for {name}")
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims")) if rank else ()
        n_elem = int(np.prod(dims)) if rank else 1
        payload = need(4 * n_elem, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if offset != len(blob):
        raise CheckpointError("trailing bytes after declared tensors")
    return state


def save_checkpoint(net: _ConvNetBase, path):
    save_state(net.state_dict(), path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return load_state(path)


def _infer_arch(state: dict[str, np.ndarray]):
    try:
        channels = tuple(int(state[f"stage{i}.conv.weight"].shape[0]) for i in range(1, 5))
        in_channels = int(state["stage1.conv.weight"].shape[1])
        num_classes = int(state["head.weight"].shape[0])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing required tensor {exc}") from exc
    return in_channels, num_classes, channels


def teacher_from_state(state: dict[str, np.ndarray]) -> TeacherNet:
    in_ch, k, channels = _infer_arch(state)
    net = TeacherNet(in_ch, k, channels, np.random.default_rng(0))
    net.load_state_dict(state)
    return net


def student_from_state(state: dict[str, np.ndarray], neuron: NeuronParams | None = None) -> StudentNet:
    in_ch, k, channels = _infer_arch(state)
    net = StudentNet(in_ch, k, channels, np.random.default_rng(0), neuron)
    net.load_state_dict(state)
    return net
