"""Small plain convolutional networks with activation taps, plus binary
checkpoint serialization.

Architecture: a 3x3 stem at the base width, then three stages of
conv-ReLU blocks at widths 16k / 32k / 64k, downsampled x2 between stages
by strided convolutions, followed by global average pooling and a linear
classifier. Per-channel learnable biases stand in for normalization
layers; there are no residual connections.
"""

from __future__ import annotations

import binascii
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointChecksumError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .tensor import Tensor

__all__ = ["ConvNetSpec", "Network", "build", "forward_with_taps", "load", "save"]

CHECKPOINT_MAGIC = b"SPKD"
CHECKPOINT_VERSION = 1
STAGES = 3
LAST_CONV_ALIAS = "last_conv"


@dataclass(frozen=True)
class ConvNetSpec:
    """Shape of a teacher or student network.

    depth_blocks is the number of conv layers per stage; width_multiplier
    scales the per-stage channel counts (16k, 32k, 64k). Input images are
    in_channels x image_size x image_size.
    """

    depth_blocks: int = 2
    width_multiplier: int = 1
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    base_width: int = 16

    def __post_init__(self):
        for name in ("depth_blocks", "width_multiplier", "num_classes", "in_channels",
                     "image_size", "base_width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"ConvNetSpec.{name} must be a positive int, got {value!r}")
        if self.image_size % 4:
            raise ConfigError(
                f"image_size must be divisible by 4 (two x2 downsamples), got {self.image_size}"
            )

    def stage_widths(self) -> list[int]:
        k = self.width_multiplier
        return [self.base_width * k, 2 * self.base_width * k, 4 * self.base_width * k]

    def param_count(self) -> int:
        """Closed-form parameter count (conv + bias + classifier)."""
        total = 0
        cin = self.in_channels
        total += self.base_width * cin * 9 + self.base_width
        cin = self.base_width
        for width in self.stage_widths():
            for _ in range(self.depth_blocks):
                total += width * cin * 9 + width
                cin = width
        total += cin * self.num_classes + self.num_classes
        return total


def teacher_default() -> ConvNetSpec:
    return ConvNetSpec(depth_blocks=4, width_multiplier=4)


def student_default() -> ConvNetSpec:
    return ConvNetSpec(depth_blocks=2, width_multiplier=1)


class Network:
    """Parameters plus the forward pass, with named activation taps.

    Canonical tap ids are "stem" and "stage{s}.conv{i}"; "stage{s}.last"
    and "last_conv" resolve as aliases to the final conv of a stage and of
    the whole network. Taps capture the post-ReLU activation maps, which
    are exactly the tensors fed to the next layer.
    """

    def __init__(self, spec: ConvNetSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def tap_ids(self) -> list[str]:
        ids = ["stem"]
        for s in range(1, STAGES + 1):
            ids.extend(f"stage{s}.conv{i}" for i in range(self.spec.depth_blocks))
        return ids

    def resolve_tap(self, tap_id: str) -> str:
        candidate = tap_id
        if tap_id == LAST_CONV_ALIAS:
            candidate = f"stage{STAGES}.conv{self.spec.depth_blocks - 1}"
        elif tap_id.endswith(".last"):
            candidate = f"{tap_id[:-5]}.conv{self.spec.depth_blocks - 1}"
        if candidate not in self.tap_ids():
            raise ConfigError(
                f"unknown tap id {tap_id!r}; canonical ids: {self.tap_ids()} "
                f"plus aliases 'stageN.last' and '{LAST_CONV_ALIAS}'"
            )
        return candidate

    def freeze(self) -> "Network":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Network":
        params = {
            name: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return Network(self.spec, params)

    def forward(self, x: Tensor) -> Tensor:
        logits, _ = forward_with_taps(self, x, ())
        return logits


def _layer_plan(spec: ConvNetSpec):
    """Yields (param_prefix, tap_id, stride) for every conv in order."""
    yield "stem", "stem", 1
    for s in range(1, STAGES + 1):
        for i in range(spec.depth_blocks):
            stride = 2 if (s > 1 and i == 0) else 1
            yield f"stage{s}.conv{i}", f"stage{s}.conv{i}", stride


def param_names(spec: ConvNetSpec) -> list[str]:
    names = []
    for prefix, _, _ in _layer_plan(spec):
        names.extend((f"{prefix}.w", f"{prefix}.b"))
    names.extend(("fc.w", "fc.b"))
    return names


def build(spec: ConvNetSpec, seed: int, dtype=np.float32) -> Network:
    """Deterministically initialized network: He fan-in conv weights,
    zero biases, and a smaller-variance linear classifier."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}

    def conv_param(name: str, cout: int, cin: int):
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    cin = spec.in_channels
    widths = [spec.base_width] + [
        w for w in spec.stage_widths() for _ in range(spec.depth_blocks)
    ]
    for (prefix, _, _), cout in zip(_layer_plan(spec), widths):
        conv_param(prefix, cout, cin)
        cin = cout

    fan_in = cin
    fc_w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, spec.num_classes))
    params["fc.w"] = Tensor(fc_w.astype(dtype), requires_grad=True)
    params["fc.b"] = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
    return Network(spec, params)


def calibrate_init(net: Network, probe: Tensor) -> Network:
    """Data-dependent standardization of a freshly built network.

    Without normalization layers, deep plain ReLU stacks start in a
    near-collapsed regime where all inputs produce similar activations and
    training stalls. This pass rescales each conv's weights and shifts its
    per-channel bias so that pre-activation statistics on the probe batch
    are standardized per channel, which restores healthy signal and
    gradient flow at initialization. Deterministic given the probe.

    Mutates and returns the network; intended for untrained nets only.
    """
    h = np.transpose(probe.data, (0, 2, 3, 1))
    for prefix, _, stride in _layer_plan(net.spec):
        w = net.params[f"{prefix}.w"]
        b = net.params[f"{prefix}.b"]
        pre = T.conv_bias_relu_nhwc(
            Tensor(h), Tensor(w.data), Tensor(b.data), stride=stride, padding=1,
            activation="none",
        ).data
        mean = pre.mean(axis=(0, 1, 2))
        std = pre.std(axis=(0, 1, 2))
        std = np.where(std < 1e-3, 1.0, std).astype(w.dtype)
        w.data /= std[:, None, None, None]
        b.data -= mean.astype(b.dtype)
        b.data /= std
        h = np.maximum((pre - mean) / std, 0.0).astype(h.dtype)
    return net


def forward_with_taps(
    net: Network, x: Tensor, tap_ids=()
) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward pass returning logits and the requested activation maps.

    Taps are keyed by the id as requested (aliases included). On a frozen
    network the outputs carry no gradient history.
    """
    spec = net.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2:] != (
        spec.image_size,
        spec.image_size,
    ):
        raise ConfigError(
            f"input must be b x {spec.in_channels} x {spec.image_size} x "
            f"{spec.image_size}, got {x.shape}"
        )
    resolved = {tap_id: net.resolve_tap(tap_id) for tap_id in tap_ids}
    wanted = set(resolved.values())
    captured: dict[str, Tensor] = {}

    # compute in channels-last layout; taps convert back to the public
    # b x c x h x w form
    h = T.permute(x, (0, 2, 3, 1))
    for prefix, tap_id, stride in _layer_plan(spec):
        w = net.params[f"{prefix}.w"]
        b = net.params[f"{prefix}.b"]
        h = T.conv_bias_relu_nhwc(h, w, b, stride=stride, padding=1)
        if tap_id in wanted:
            captured[tap_id] = T.permute(h, (0, 3, 1, 2))

    pooled = h.mean(axis=(1, 2))
    logits = T.linear(pooled, net.params["fc.w"], net.params["fc.b"])
    taps = {requested: captured[canonical] for requested, canonical in resolved.items()}
    return logits, taps


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, spec/meta JSON block (with its own
# CRC32 recorded in the header), per-tensor records, trailing CRC32 of the
# whole preceding byte stream. All integers little-endian u32; tensor data
# is raw little-endian float32.
# ---------------------------------------------------------------------------

def _meta_block(net: Network, seed: int, epoch: int) -> bytes:
    meta = {"spec": asdict(net.spec), "seed": int(seed), "epoch": int(epoch)}
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save(
    net: Network,
    path,
    seed: int = 0,
    epoch: int = 0,
    opt_state: dict[str, np.ndarray] | None = None,
) -> None:
    """Write the network (and optional momentum buffers) to ``path``."""
    meta = _meta_block(net, seed, epoch)
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, binascii.crc32(meta)),
        struct.pack("<I", len(meta)),
        meta,
    ]
    entries = [(name, p.data) for name, p in net.params.items()]
    if opt_state:
        entries.extend((f"opt.{name}", buf) for name, buf in opt_state.items())
    chunks.append(struct.pack("<I", len(entries)))
    for name, array in entries:
        raw = np.ascontiguousarray(array, dtype="<f4")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", raw.ndim))
        chunks.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        chunks.append(raw.tobytes())
    payload = b"".join(chunks)
    payload += struct.pack("<I", binascii.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path, dtype=np.float32, trainable: bool = True) -> tuple[Network, dict]:
    """Read a checkpoint; returns the network and a metadata dict with
    keys 'seed', 'epoch', and 'opt_state'."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CheckpointTruncatedError(f"checkpoint too short: {len(blob)} bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = binascii.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise CheckpointChecksumError(
            f"checkpoint CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    r = _Reader(blob[:-4])
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic)")
    version, meta_crc = struct.unpack("<II", r.take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    meta_raw = r.take(r.u32())
    if binascii.crc32(meta_raw) != meta_crc:
        raise CheckpointVersionError("spec hash mismatch: metadata block was altered")
    meta = json.loads(meta_raw.decode("utf-8"))
    spec = ConvNetSpec(**meta["spec"])

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        raw = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = raw

    params: dict[str, Tensor] = {}
    opt_state: dict[str, np.ndarray] = {}
    for name, array in tensors.items():
        if name.startswith("opt."):
            opt_state[name[4:]] = array.astype(dtype)
        else:
            params[name] = Tensor(array.astype(dtype), requires_grad=trainable)

    net = Network(spec, params)
    if set(params) != set(param_names(spec)):
        raise CheckpointVersionError(
            "checkpoint parameters do not match the architecture spec"
        )
    return net, {"seed": meta["seed"], "epoch": meta["epoch"], "opt_state": opt_state}
