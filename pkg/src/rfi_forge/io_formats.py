"""Binary artifact formats: dataset, checkpoint, echo, image, PGM plots.

All integers and floats are little-endian.  Every reader checks magic,
version and exact byte length, and raises FormatError on anything off.
"""

from __future__ import annotations

import struct

import numpy as np

from .autograd import Tensor
from .difnet import NetConfig
from .signal_model import EchoMatrix, RadarParams

DATASET_MAGIC = b"DIFN"
CHECKPOINT_MAGIC = b"DIFW"
ECHO_MAGIC = b"DIFE"
IMAGE_MAGIC = b"DIFI"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _check_header(f, magic, what):
    got = f.read(4)
    if got != magic:
        raise FormatError(f"{what}: bad magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if ver != VERSION:
        raise FormatError(f"{what}: unsupported version {ver}")


# -- dataset ---------------------------------------------------------------

def write_dataset(path, images: np.ndarray, masks: np.ndarray) -> None:
    """(N, H, W) float32 TF images and matching uint8 {0,1} masks."""
    images = np.ascontiguousarray(images, dtype="<f4")
    masks = np.ascontiguousarray(masks, dtype=np.uint8)
    if images.shape != masks.shape or images.ndim != 3:
        raise FormatError(f"dataset: images {images.shape} / masks {masks.shape} mismatch")
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIII", VERSION, n, h, w))
        for i in range(n):
            f.write(images[i].tobytes())
            f.write(masks[i].tobytes())


def read_dataset(path):
    with open(path, "rb") as f:
        _check_header(f, DATASET_MAGIC, "dataset")
        n, h, w = struct.unpack("<III", _read_exact(f, 12, "dataset header"))
        images = np.empty((n, h, w), dtype=np.float32)
        masks = np.empty((n, h, w), dtype=np.uint8)
        for i in range(n):
            images[i] = np.frombuffer(_read_exact(f, 4 * h * w, f"image {i}"),
                                      dtype="<f4").reshape(h, w)
            masks[i] = np.frombuffer(_read_exact(f, h * w, f"mask {i}"),
                                     dtype=np.uint8).reshape(h, w)
        if f.read(1):
            raise FormatError("dataset: trailing bytes after last record")
    bad = np.setdiff1d(np.unique(masks), [0, 1])
    if bad.size:
        raise FormatError(f"dataset: mask values outside {{0,1}}: {bad}")
    return images, masks


# -- checkpoint ------------------------------------------------------------

def write_checkpoint(path, cfg: NetConfig, weights: dict) -> None:
    cfg_text = "".join(f"{k}={v}\n" for k, v in cfg.to_items()).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        f.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            data = np.ascontiguousarray(weights[name].data, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_checkpoint(path, expect_cfg: NetConfig | None = None):
    """Returns (NetConfig, weights dict of trainable Tensors)."""
    with open(path, "rb") as f:
        _check_header(f, CHECKPOINT_MAGIC, "checkpoint")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg_text = _read_exact(f, clen, "config echo").decode()
        items = dict(line.split("=", 1) for line in cfg_text.splitlines() if line)
        try:
            cfg = NetConfig.from_dict(items)
        except (KeyError, ValueError) as e:
            raise FormatError(f"checkpoint: bad config echo: {e}") from e
        if expect_cfg is not None and cfg != expect_cfg:
            raise FormatError("checkpoint: stored NetConfig does not match the requested one")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        weights = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 4 * size, f"tensor {name}"),
                                 dtype="<f4").reshape(shape)
            weights[name] = Tensor(data.copy(), requires_grad=True)
        if f.read(1):
            raise FormatError("checkpoint: trailing bytes")
    return cfg, weights


# -- echo ------------------------------------------------------------------

def write_echo(path, echo: EchoMatrix) -> None:
    p = echo.params
    data = np.ascontiguousarray(echo.data, dtype="<c8")
    with open(path, "wb") as f:
        f.write(ECHO_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<II", p.n_pulses, p.n_range))
        f.write(struct.pack("<5d", p.carrier_hz, p.bandwidth_hz, p.pulse_len_s,
                            p.sample_rate_hz, p.prf_hz))
        f.write(data.tobytes())


def read_echo(path) -> EchoMatrix:
    with open(path, "rb") as f:
        _check_header(f, ECHO_MAGIC, "echo")
        np_, nr = struct.unpack("<II", _read_exact(f, 8, "echo dims"))
        fc, bw, pl, fs, prf = struct.unpack("<5d", _read_exact(f, 40, "echo params"))
        params = RadarParams(carrier_hz=fc, bandwidth_hz=bw, pulse_len_s=pl,
                             sample_rate_hz=fs, prf_hz=prf, n_pulses=np_, n_range=nr)
        data = np.frombuffer(_read_exact(f, 8 * np_ * nr, "echo data"),
                             dtype="<c8").reshape(np_, nr)
        if f.read(1):
            raise FormatError("echo: trailing bytes")
    return EchoMatrix(data.copy(), params)


# -- complex image ---------------------------------------------------------

def write_image(path, pixels: np.ndarray) -> None:
    data = np.ascontiguousarray(pixels, dtype="<c8")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", VERSION, h, w))
        f.write(data.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, IMAGE_MAGIC, "image")
        h, w = struct.unpack("<II", _read_exact(f, 8, "image dims"))
        data = np.frombuffer(_read_exact(f, 8 * h * w, "image data"),
                             dtype="<c8").reshape(h, w)
        if f.read(1):
            raise FormatError("image: trailing bytes")
    return data.copy()


# -- PGM plots -------------------------------------------------------------

def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM; input is a 2-d array already scaled to [0, 255]."""
    g = np.ascontiguousarray(np.clip(np.round(gray), 0, 255).astype(np.uint8))
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(g.tobytes())


def magic_of(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)
