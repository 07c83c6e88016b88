"""Two-head segmentation network: G_s (source) and G_t (target).

Each head owns its extra conv blocks and 1x1 classifier; the encoder trunk
is the *body*.  While ``shared`` both heads read one body;
:meth:`SegModel.unshare_and_freeze_source` splits it into two independent
copies and freezes everything the source head depends on.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import grid as G

PROB_EPS = 1e-6
HEADS = ("source", "target")

CKPT_MAGIC = b"BACKPT1\0"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, unsupported version or unreadable header."""


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointConfigMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 16
    shared_blocks: int = 3
    head_blocks: int = 1

    def validate(self) -> None:
        for name in ("in_channels", "base_channels", "shared_blocks", "head_blocks"):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise ConfigError(f"NetConfig.{name} must be an int >= 1, got {val!r}")

    @property
    def downsample(self) -> int:
        """Total stride of the encoder: blocks 2 and 3 halve resolution."""
        return 2 ** min(self.shared_blocks - 1, 2)

    def block_stride(self, i: int) -> int:
        return 2 if i in (1, 2) else 1

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _param_shapes(config: NetConfig) -> tuple[list, list]:
    """(name, shape) lists for the body and for one head, in init order."""
    c, b = config.in_channels, config.base_channels
    body = []
    for i in range(config.shared_blocks):
        cin = c if i == 0 else b
        body += [(f"{i}.weight", (b, cin, 3, 3)), (f"{i}.bias", (b,))]
    head = []
    for i in range(config.head_blocks):
        head += [(f"{i}.weight", (b, b, 3, 3)), (f"{i}.bias", (b,))]
    head += [("out.weight", (1, b, 1, 1)), ("out.bias", (1,))]
    return body, head


def param_count(config: NetConfig) -> int:
    """Number of scalars in a freshly built (shared) model."""
    body, head = _param_shapes(config)
    n = sum(int(np.prod(s)) for _, s in body)
    return n + 2 * sum(int(np.prod(s)) for _, s in head)


def _init(shape, rng: np.random.Generator, dtype) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SegModel:
    """G_s and G_t over a shared (or, after Stage I, duplicated) body."""

    def __init__(self, config: NetConfig, bodies: dict, heads: dict, shared: bool,
                 seed: int, iteration: int = 0):
        self.config = config
        self.bodies = bodies  # head name -> {param name: Node}; one dict while shared
        self.heads = heads
        self.shared = shared
        self.seed = seed
        self.iteration = iteration
        self.frozen: set[str] = set()

    @property
    def state(self) -> str:
        return "shared" if self.shared else "unshared"

    @property
    def dtype(self):
        return next(iter(self.heads["source"].values())).dtype

    def named_parameters(self) -> list[tuple[str, G.Node]]:
        """Unique parameters in a stable order."""
        out = []
        if self.shared:
            out += [(f"body.{k}", v) for k, v in self.bodies["source"].items()]
        else:
            for h in HEADS:
                out += [(f"{h}.body.{k}", v) for k, v in self.bodies[h].items()]
        for h in HEADS:
            out += [(f"{h}.head.{k}", v) for k, v in self.heads[h].items()]
        return out

    def parameters(self) -> dict[str, G.Node]:
        return dict(self.named_parameters())

    def trainable_parameters(self) -> dict[str, G.Node]:
        return {k: v for k, v in self.named_parameters() if k not in self.frozen}

    def head_parameters(self, head: str) -> dict[str, G.Node]:
        """Every parameter the given head's forward pass reads."""
        prefix = "body." if self.shared else f"{head}.body."
        return {k: v for k, v in self.named_parameters()
                if k.startswith(prefix) or k.startswith(f"{head}.head.")}

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def checksum(self, head: str | None = None) -> str:
        import hashlib

        """SHA-256 over parameter names and bytes.

        A per-head checksum names the body as ``body.*`` in both states, so
        unsharing alone does not change it.
        """
        params = self.parameters() if head is None else self.head_parameters(head)
        if head is not None:
            params = {k.removeprefix(f"{head}."): v for k, v in params.items()}
        h = hashlib.sha256()
        for name in sorted(params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name].value).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "SegModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        def cast(d):
            return {k: G.Node(v.value.astype(dtype), requires_grad=True) for k, v in d.items()}

        if self.shared:
            body = cast(self.bodies["source"])
            bodies = {"source": body, "target": body}
        else:
            bodies = {h: cast(self.bodies[h]) for h in HEADS}
        m = SegModel(self.config, bodies, {h: cast(self.heads[h]) for h in HEADS},
                     self.shared, self.seed, self.iteration)
        m.frozen = set(self.frozen)
        return m

    def forward(self, head: str, batch) -> G.Node:
        """Per-pixel foreground probability, clamped to [1e-6, 1 - 1e-6]."""
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        x = batch if isinstance(batch, G.Node) else G.constant(np.asarray(batch, dtype=self.dtype))
        if x.value.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise G.ShapeError(
                f"forward expects (B, {self.config.in_channels}, H, W), got {x.shape}")
        f = self.config.downsample
        if x.shape[2] % f or x.shape[3] % f:
            raise G.ShapeError(f"input extents {x.shape[2:]} not divisible by downsample {f}")
        body = self.bodies[head]
        for i in range(self.config.shared_blocks):
            x = G.relu(G.conv2d(x, body[f"{i}.weight"], body[f"{i}.bias"],
                                stride=self.config.block_stride(i), padding=1))
        hp = self.heads[head]
        for i in range(self.config.head_blocks):
            x = G.relu(G.conv2d(x, hp[f"{i}.weight"], hp[f"{i}.bias"], padding=1))
        logits = G.conv2d(x, hp["out.weight"], hp["out.bias"])
        logits = G.upsample_nearest(logits, f)
        return G.clamp(G.sigmoid(logits), PROB_EPS, 1 - PROB_EPS)

    def predict(self, head: str, batch) -> np.ndarray:
        with G.no_grad():
            return self.forward(head, batch).value

    def unshare_and_freeze_source(self) -> None:
        """Duplicate the body and freeze every source-side parameter."""
        if not self.shared:
            raise StateError("model is already unshared")
        src = self.bodies["source"]
        self.bodies = {
            "source": src,
            "target": {k: G.Node(v.value.copy(), requires_grad=True) for k, v in src.items()},
        }
        self.shared = False
        self.frozen = set(self.head_parameters("source"))


def build(config: NetConfig, seed: int, dtype=np.float32) -> SegModel:
    """He-uniform weights, zero biases, body shared between heads."""
    config.validate()
    rng = np.random.default_rng(seed)
    body_shapes, head_shapes = _param_shapes(config)
    body = {k: G.Node(_init(s, rng, dtype), requires_grad=True) for k, s in body_shapes}
    heads = {h: {k: G.Node(_init(s, rng, dtype), requires_grad=True) for k, s in head_shapes}
             for h in HEADS}
    return SegModel(config, {"source": body, "target": body}, heads, True, seed)


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(model: SegModel, path) -> None:
    params = model.named_parameters()
    manifest, offset = [], 0
    for name, p in params:
        nbytes = 4 * p.value.size
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset,
                         "frozen": name in model.frozen})
        offset += nbytes
    header = {
        "config": asdict(model.config),
        "sharing": model.state,
        "iteration": model.iteration,
        "seed": model.seed,
        "params": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path, expected_config: NetConfig | None = None, dtype=np.float32) -> SegModel:
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC):
        raise CheckpointTruncatedError(f"{path}: file shorter than magic")
    if data[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 14:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    start = 14 + hlen
    if len(data) < start:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(data[14:start].decode("utf-8"))
        config = NetConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigMismatch(f"{path}: config {config} != expected {expected_config}")

    shared = header["sharing"] == "shared"
    skeleton = build(config, 0, dtype)
    if not shared:
        skeleton.unshare_and_freeze_source()
    expected = {k: v.shape for k, v in skeleton.named_parameters()}
    got = {e["name"]: tuple(e["shape"]) for e in header["params"]}
    if set(expected) != set(got):
        raise CheckpointShapeError(f"{path}: parameter names differ from config")
    values = {}
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointShapeError(f"{path}: {name} has shape {shape}, expected {expected[name]}")
        lo = start + entry["offset"]
        hi = lo + 4 * int(np.prod(shape))
        if hi > len(data):
            raise CheckpointTruncatedError(f"{path}: payload for {name} truncated")
        values[name] = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)),
                                     offset=lo).reshape(shape).astype(dtype)

    def nodes(prefix):
        n = len(prefix)
        return {k[n:]: G.Node(v.copy(), requires_grad=True) for k, v in values.items()
                if k.startswith(prefix)}

    if shared:
        body = nodes("body.")
        bodies = {"source": body, "target": body}
    else:
        bodies = {h: nodes(f"{h}.body.") for h in HEADS}
    heads = {h: nodes(f"{h}.head.") for h in HEADS}
    model = SegModel(config, bodies, heads, shared, header["seed"], header["iteration"])
    model.frozen = {e["name"] for e in header["params"] if e.get("frozen")}
    return model
