"""Encoder-decoder network: point-cloud encoder, template deformation decoder.

The encoder runs a shared per-point MLP (3 -> 64 -> 128 -> 1024, ReLU),
max-pools channelwise over the points and applies a final linear layer,
giving a 1024-d latent code. The decoder concatenates a template point with
the code (1027 inputs) and runs an MLP with hidden sizes 1024, 512, 254 and
128, ending in a tanh-bounded 3D position.
"""

from __future__ import annotations

import binascii
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

ENCODER_WIDTHS = (3, 64, 128, 1024)
ENCODER_OUT = 1024
LATENT_DIM = 1024
DECODER_WIDTHS = (3 + LATENT_DIM, 1024, 512, 254, 128, 3)

_CHECKPOINT_MAGIC = b"SCNW"
_CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass


@dataclass
class EncoderParams:
    weights: list[np.ndarray]  # per-point MLP layers, then the final linear
    biases: list[np.ndarray]


@dataclass
class DecoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class NetworkParams:
    encoder: EncoderParams
    decoder: DecoderParams
    metadata: dict = field(default_factory=dict)

    def flat_arrays(self) -> list[np.ndarray]:
        return (
            self.encoder.weights
            + self.encoder.biases
            + self.decoder.weights
            + self.decoder.biases
        )


def init_params(seed: int = 0) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    enc_w, enc_b = [], []
    for a, b in zip(ENCODER_WIDTHS[:-1], ENCODER_WIDTHS[1:]):
        w, bias = layer(a, b)
        enc_w.append(w)
        enc_b.append(bias)
    w, bias = layer(ENCODER_WIDTHS[-1], ENCODER_OUT)
    enc_w.append(w)
    enc_b.append(bias)

    dec_w, dec_b = [], []
    for a, b in zip(DECODER_WIDTHS[:-1], DECODER_WIDTHS[1:]):
        w, bias = layer(a, b)
        dec_w.append(w)
        dec_b.append(bias)

    return NetworkParams(
        EncoderParams(enc_w, enc_b),
        DecoderParams(dec_w, dec_b),
        metadata={"seed": seed},
    )


# ----------------------------------------------------------------------
# differentiable forward passes
# ----------------------------------------------------------------------


def _wrap(arrays: list[np.ndarray], trainable: bool) -> list[Tensor]:
    return [Tensor(a, requires_grad=trainable) for a in arrays]


@dataclass
class ParamTensors:
    """NetworkParams wrapped as autodiff leaves for one training step."""

    enc_w: list[Tensor]
    enc_b: list[Tensor]
    dec_w: list[Tensor]
    dec_b: list[Tensor]

    @classmethod
    def from_params(cls, params: NetworkParams, trainable: bool = True) -> "ParamTensors":
        return cls(
            _wrap(params.encoder.weights, trainable),
            _wrap(params.encoder.biases, trainable),
            _wrap(params.decoder.weights, trainable),
            _wrap(params.decoder.biases, trainable),
        )

    def leaves(self) -> list[Tensor]:
        return self.enc_w + self.enc_b + self.dec_w + self.dec_b


def encode_t(pt: ParamTensors, points: Tensor) -> Tensor:
    """Latent code of a point cloud; differentiable in params and points."""
    h = points
    for w, b in zip(pt.enc_w[:-1], pt.enc_b[:-1]):
        h = (h @ w + b).relu()
    pooled, _ = h.max_over_axis(axis=0)
    return pooled @ pt.enc_w[-1] + pt.enc_b[-1]


def decode_t(pt: ParamTensors, template_points: Tensor, code: Tensor) -> Tensor:
    """Deform template points with a latent code; tanh-bounded output.

    The first layer is evaluated as W_p @ p + W_x @ x so the code term is
    one matrix-vector product shared by every template point (equivalent to
    running the layer on the concatenation [p; x]).
    """
    w1 = pt.dec_w[0]
    w1p = w1.slice_rows(0, 3)
    w1x = w1.slice_rows(3, 3 + LATENT_DIM)
    h = (template_points @ w1p + code @ w1x + pt.dec_b[0]).relu()
    for w, b in zip(pt.dec_w[1:-1], pt.dec_b[1:-1]):
        h = (h @ w + b).relu()
    return (h @ pt.dec_w[-1] + pt.dec_b[-1]).tanh()


def encode(params: NetworkParams, points: np.ndarray) -> np.ndarray:
    """Numeric convenience wrapper around :func:`encode_t`."""
    pt = ParamTensors.from_params(params, trainable=False)
    return encode_t(pt, Tensor(points)).data


def decode(params: NetworkParams, template_points: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Numeric convenience wrapper around :func:`decode_t`."""
    pt = ParamTensors.from_params(params, trainable=False)
    return decode_t(pt, Tensor(template_points), Tensor(code)).data


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def _named_tensors(params: NetworkParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for group, p in (("enc", params.encoder), ("dec", params.decoder)):
        for i, w in enumerate(p.weights):
            out.append((f"{group}.w{i}", w))
        for i, b in enumerate(p.biases):
            out.append((f"{group}.b{i}", b))
    return out


def save_checkpoint(params: NetworkParams, path) -> None:
    """Binary layout: magic, version u32, metadata JSON, tensors, CRC32."""
    buf = io.BytesIO()
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", _CHECKPOINT_VERSION))
    meta = json.dumps(params.metadata, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    tensors = _named_tensors(params)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    payload = buf.getvalue()
    crc = binascii.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CHECKPOINT_MAGIC) + 8 or raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise CorruptChecksum("not a checkpoint file")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if binascii.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptChecksum("checksum mismatch")
    buf = io.BytesIO(payload)
    buf.read(len(_CHECKPOINT_MAGIC))
    (version,) = struct.unpack("<I", buf.read(4))
    if version != _CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {_CHECKPOINT_VERSION}")
    try:
        (meta_len,) = struct.unpack("<I", buf.read(4))
        metadata = json.loads(buf.read(meta_len).decode())
        (n_tensors,) = struct.unpack("<I", buf.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", buf.read(4))
            name = buf.read(name_len).decode()
            (ndim,) = struct.unpack("<I", buf.read(4))
            shape = struct.unpack(f"<{ndim}q", buf.read(8 * ndim))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
            tensors[name] = arr
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptChecksum(f"malformed checkpoint body: {exc}") from exc

    def group(prefix, n_layers):
        ws = [tensors[f"{prefix}.w{i}"] for i in range(n_layers)]
        bs = [tensors[f"{prefix}.b{i}"] for i in range(n_layers)]
        return ws, bs

    try:
        enc_w, enc_b = group("enc", len(ENCODER_WIDTHS))
        dec_w, dec_b = group("dec", len(DECODER_WIDTHS) - 1)
    except KeyError as exc:
        raise CorruptChecksum(f"missing tensor {exc}") from exc
    return NetworkParams(EncoderParams(enc_w, enc_b), DecoderParams(dec_w, dec_b), metadata)
