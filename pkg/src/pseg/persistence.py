"""File formats: binary netpbm images, checkpoints, and key=value run configs.

Checkpoint layout (all integers little-endian)::

    b"PSEG"  u16 version
    u32 n    n bytes of UTF-8 "key=value" lines (model config, trainer state)
    u32 count
    count x [u16 name_len, name, u32 rank, rank x u32 dim, u64 offset]
    float32 payloads at the recorded absolute offsets
    u32 CRC-32 of every preceding byte

Adam moments are stored under ``opt/m/<param>`` and ``opt/v/<param>``.
"""

import dataclasses
import os
import re
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"PSEG"
VERSION = 1


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnknownVersion(FormatError):
    pass


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- netpbm -----------------------------------------------------------------


def encode_pnm(array, maxval=None):
    """P6 for (h, w, 3) arrays, P5 for (h, w); 16-bit samples are big-endian."""
    a = np.asarray(array)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {a.shape}")
    if maxval is None:
        maxval = 255 if a.dtype == np.uint8 else 65535
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    if a.size and (a.min() < 0 or a.max() > maxval):
        raise FormatError(f"sample values outside 0..{maxval}")
    h, w = a.shape[:2]
    payload = a.astype(">u1" if maxval == 255 else ">u2").tobytes()
    return magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + payload


def decode_pnm(data):
    data = bytes(data)
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary P5/P6 file")
    magic = data[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("malformed header")
    pos += 1
    w, h, maxval = fields
    if maxval not in (255, 65535) or w < 1 or h < 1:
        raise FormatError(f"unsupported header {w}x{h} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    itemsize = 1 if maxval == 255 else 2
    need = w * h * channels * itemsize
    payload = data[pos:]
    if len(payload) < need:
        raise TruncatedFile(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise FormatError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=">u1" if itemsize == 1 else ">u2")
    arr = arr.astype(np.uint8 if itemsize == 1 else np.uint16)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write_pnm(path, array, maxval=None):
    atomic_write(path, encode_pnm(array, maxval))


def read_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def image_to_u8(image):
    """(3, h, w) floats in [0, 1] to (h, w, 3) uint8."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(pixels):
    return (np.asarray(pixels, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_image(path, image):
    write_pnm(path, image_to_u8(image))


def read_image(path):
    pix = read_pnm(path)
    if pix.ndim != 3:
        raise FormatError(f"{path}: expected a P6 color image")
    if pix.dtype != np.uint8:
        pix = np.round(pix / 257.0).astype(np.uint8)
    return u8_to_image(pix)


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise ValueError("label ids must lie in 0..65535")
    write_pnm(path, labels.astype(np.uint16), maxval=65535)


def read_labels(path):
    lab = read_pnm(path)
    if lab.ndim != 2:
        raise FormatError(f"{path}: expected a P5 label map")
    return lab.astype(np.int64)


# -- checkpoints ------------------------------------------------------------


def encode_checkpoint(config_text, tensors):
    head = bytearray(MAGIC)
    head += struct.pack("<H", VERSION)
    cfg = config_text.encode("utf-8")
    head += struct.pack("<I", len(cfg)) + cfg
    head += struct.pack("<I", len(tensors))
    names = list(tensors)
    arrays = [np.asarray(tensors[n], dtype="<f4", order="C") for n in names]
    dir_size = sum(2 + len(n.encode("utf-8")) + 4 + 4 * a.ndim + 8 for n, a in zip(names, arrays))
    offset = len(head) + dir_size
    directory = bytearray()
    for n, a in zip(names, arrays):
        raw = n.encode("utf-8")
        directory += struct.pack("<H", len(raw)) + raw
        directory += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        directory += struct.pack("<Q", offset)
        offset += a.nbytes
    body = bytes(head) + bytes(directory) + b"".join(a.tobytes() for a in arrays)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(data):
    data = bytes(data)
    if len(data) < 10:
        raise TruncatedFile("checkpoint too short")
    if data[:4] != MAGIC:
        raise FormatError("bad magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise UnknownVersion(f"checkpoint format version {version} (supported: {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC mismatch")
    try:
        pos = 6
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if pos + n > len(body):
            raise TruncatedFile("config block runs past end of file")
        config_text = body[pos : pos + n].decode("utf-8")
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (off,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off < pos or off + nbytes > len(body):
                raise TruncatedFile(f"tensor {name!r} extent outside file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(dims)
    except struct.error as exc:
        raise TruncatedFile(str(exc)) from None
    return config_text, tensors


def parse_kv(text):
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"not a key=value line: {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(state, path):
    from . import losses

    cfg = state.model.config
    lines = [
        f"d={cfg.d}",
        f"widths={','.join(map(str, cfg.widths))}",
        f"input_size={cfg.input_size[0]},{cfg.input_size[1]}",
        f"model_seed={cfg.seed}",
        f"slope={cfg.slope!r}",
        f"step={state.step}",
        f"epoch={state.epoch}",
        f"seed={state.seed}",
        f"lr={state.lr!r}",
        f"adam_t={state.opt.t}",
    ]
    for k, v in state.running.items():
        lines.append(f"running.{k}={float(v)!r}")
    cols = losses.COMPONENTS + ("total",)
    for i, row in enumerate(state.history):
        lines.append(f"history.{i}=" + ",".join(repr(float(row[c])) for c in cols) + f",{int(row.get('degenerate', 0))}")
    tensors = {}
    for name, p in state.model.params.items():
        tensors[name] = p.data
    for name in state.model.params:
        tensors[f"opt/m/{name}"] = state.opt.m[name]
        tensors[f"opt/v/{name}"] = state.opt.v[name]
    atomic_write(path, encode_checkpoint("\n".join(lines) + "\n", tensors))


def load_checkpoint(path):
    from . import losses, network
    from . import tensor as T

    with open(path, "rb") as fh:
        text, tensors = decode_checkpoint(fh.read())
    kv = parse_kv(text)
    cfg = network.ModelConfig(
        d=int(kv["d"]),
        widths=tuple(int(x) for x in kv["widths"].split(",")),
        input_size=tuple(int(x) for x in kv["input_size"].split(",")),
        seed=int(kv["model_seed"]),
        slope=float(kv["slope"]),
    )
    params = {n: T.Tensor(a, requires_grad=True) for n, a in tensors.items() if not n.startswith("opt/")}
    model = network.Model(cfg, params)
    opt = T.AdamState()
    opt.t = int(kv["adam_t"])
    for n in params:
        opt.m[n] = tensors[f"opt/m/{n}"].copy()
        opt.v[n] = tensors[f"opt/v/{n}"].copy()
    cols = losses.COMPONENTS + ("total",)
    history = []
    i = 0
    while f"history.{i}" in kv:
        vals = kv[f"history.{i}"].split(",")
        row = {c: float(v) for c, v in zip(cols, vals)}
        row["epoch"] = i
        row["degenerate"] = int(vals[len(cols)])
        history.append(row)
        i += 1
    running = {k[len("running.") :]: float(v) for k, v in kv.items() if k.startswith("running.")}
    return network.TrainState(
        model=model,
        opt=opt,
        step=int(kv["step"]),
        epoch=int(kv["epoch"]),
        seed=int(kv["seed"]),
        lr=float(kv["lr"]),
        history=history,
        running=running,
    )


# -- run configuration ------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    # scenes
    size: tuple = (64, 64)
    n_shapes: tuple = (2, 6)
    unlabeled_prob: float = 0.1
    noise: float = 0.02
    # model
    d: int = 16
    widths: tuple = (16, 32, 64)
    slope: float = 0.01
    # training
    epochs: int = 30
    lr: float = 1e-4
    lambda_rc: float = 0.125
    lambda_g: float = 0.025
    lambda_u: float = 0.05
    tau: float = 0.5
    queries: int = 256
    scales: int = 4
    sigma_min: float = 0.1
    ablate: tuple = ()
    signed_segment_space: bool = False
    straight_through: bool = False
    # inference
    bandwidth: float = 0.7071067811865476
    seed_stride: int = 4
    max_iter: int = 100
    tol: float = 1e-6
    resolutions: tuple = (1.0,)
    theta_refine: float = 0.7
    theta_contain: float = 0.8
    min_pixels: int = 16

    @classmethod
    def from_text(cls, text):
        kv = parse_kv(text)
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        defaults = cls()
        for key, raw in kv.items():
            values[key] = _coerce(getattr(defaults, key), raw, key)
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def scene_config(self, seed=None):
        from . import shapes

        return shapes.SceneConfig(
            size=self.size,
            n_shapes=self.n_shapes,
            unlabeled_prob=self.unlabeled_prob,
            noise=self.noise,
            seed=self.seed if seed is None else seed,
        )

    def model_config(self):
        from . import network

        return network.ModelConfig(d=self.d, widths=self.widths, input_size=self.size, seed=self.seed, slope=self.slope)

    def loss_config(self, disabled=None):
        from . import losses

        return losses.LossConfig(
            lambda_rc=self.lambda_rc,
            lambda_g=self.lambda_g,
            lambda_u=self.lambda_u,
            tau=self.tau,
            queries=self.queries,
            scales=self.scales,
            sigma_min=self.sigma_min,
            disabled=frozenset(self.ablate if disabled is None else disabled),
            signed=self.signed_segment_space,
            straight_through=self.straight_through,
        )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(default, raw, key):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x for x in re.split(r"[,\s]+", raw) if x]
            if key in ("ablate",):
                return tuple(items)
            if key == "resolutions":
                return tuple(float(x) for x in items)
            return tuple(int(x) for x in items)
        return raw
    except ValueError:
        raise FormatError(f"bad value for {key}: {raw!r}") from None
