"""Hidden-state taps and the other conditioning feature sources, plus the K3HID cache."""
from __future__ import annotations

import logging
import struct
import typing as t
from dataclasses import dataclass

import numpy as np

from ..codec import PatchCodec
from ..errors import ContractError, FormatError
from ..numerics.checkpoint import Reader, atomic_write, check_header, pack_entry
from ..numerics.layers import MLP
from ..numerics.random import RandomStream
from ..numerics.tensor import Tensor
from .flow import cfm_interpolate, euler_integrate, nearest_step
from .model import BridgeModel

logger = logging.getLogger(__name__)

HID_MAGIC = b"K3HD"
HID_VERSION = 1
MODES = ("trajectory", "teacher_forced")


@dataclass
class HiddenStateBundle:
    h: np.ndarray                      # [T_img, width]
    tap_layers: tuple[int, ...]
    tap_time: float
    mode: str
    source_tag: str = "hidden_states"
    pair_id: str = ""

    @property
    def width(self) -> int:
        return int(self.h.shape[-1])


def _check_taps(model: BridgeModel, tap_layers: t.Sequence[int]) -> tuple[int, ...]:
    taps = tuple(int(l) for l in tap_layers)
    if not taps:
        raise ContractError("extract_hidden: empty tap set")
    if any(b <= a for a, b in zip(taps, taps[1:])):
        raise ContractError(f"tap layers must be strictly increasing, got {taps}")
    if taps[0] < 1 or taps[-1] > model.dims.layers:
        raise ContractError(f"tap layers {taps} outside [1, {model.dims.layers}]")
    return taps


def tap_hidden(model: BridgeModel, z_front: np.ndarray, cond: Tensor, tap_layers: t.Sequence[int],
               tap_time: float, mode: str = "trajectory", *, eps: np.ndarray,
               z_back: np.ndarray | None = None, steps: int = 32) -> np.ndarray:
    """Concatenated tapped block outputs on the noisy slots: [B, T, n * d_model].

    trajectory: run the Euler sampler from ``eps`` and tap at the step nearest
    ``tap_time`` (sampling stops right after it). teacher_forced: one forward at
    cfm_interpolate(z_back, eps, tap_time).
    """
    taps = _check_taps(model, tap_layers)
    z_front = z_front if z_front.ndim == 3 else z_front[None]
    eps = eps if eps.ndim == 3 else eps[None]
    captured: list[np.ndarray] = []

    def grab(hidden: list[Tensor]) -> np.ndarray:
        return np.concatenate([hidden[l - 1].data for l in taps], axis=-1)

    if mode == "teacher_forced":
        if z_back is None:
            raise ContractError("teacher_forced extraction needs the ground-truth back latent")
        z_back = z_back if z_back.ndim == 3 else z_back[None]
        z_t = cfm_interpolate(z_back, eps, tap_time)
        _, hidden = model.forward(z_t, tap_time, cond, z_front)
        return grab(hidden)
    if mode != "trajectory":
        raise ContractError(f"unknown extraction mode {mode!r}; expected one of {MODES}")

    target = nearest_step(tap_time, steps)
    step = iter(range(steps))

    def field(z: np.ndarray, tk: float) -> np.ndarray:
        i = next(step)
        v, hidden = model.forward(z, tk, cond, z_front)
        if i == target:
            captured.append(grab(hidden))
        return v.data

    euler_integrate(field, eps.astype(model.dtype), steps, stop_after=target)
    return captured[0]


def extract_hidden(model: BridgeModel, z_front: np.ndarray, cond: Tensor, tap_layers: t.Sequence[int],
                   tap_time: float, mode: str = "trajectory", *, eps: np.ndarray,
                   z_back: np.ndarray | None = None, steps: int = 32, pair_id: str = "") -> HiddenStateBundle:
    """Single-item tap packaged with its metadata."""
    h = tap_hidden(model, z_front, cond, tap_layers, tap_time, mode, eps=eps, z_back=z_back, steps=steps)
    if h.shape[0] != 1:
        raise ContractError(f"extract_hidden takes one item, got a batch of {h.shape[0]}")
    return HiddenStateBundle(h=h[0], tap_layers=tuple(int(l) for l in tap_layers), tap_time=float(tap_time),
                             mode=mode, pair_id=pair_id)


def euler_sample(model: BridgeModel, z_front: np.ndarray, cond: Tensor, steps: int,
                 eps: np.ndarray) -> np.ndarray:
    """Integrate the bridge from noise ``eps`` (t = 1) to a back latent (t = 0)."""
    z_front = z_front if z_front.ndim == 3 else z_front[None]
    eps = eps if eps.ndim == 3 else eps[None]
    return euler_integrate(lambda z, tk: model.velocity(z, tk, cond, z_front), eps.astype(model.dtype), steps)


class ImageReencoder:
    """Frozen random patch MLP applied to a decoded image: the independent image-feature source."""

    def __init__(self, codec: PatchCodec, d_model: int, seed: int = 7):
        self.codec = codec
        width = codec.width
        self.mlp = MLP(width, d_model, d_model, RandomStream(seed).fork("reencoder"))
        self.mlp.set_trainable(False)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        p, c = self.codec.patch, self.codec.channels
        out = []
        for image in images:
            _, h, w = image.shape
            patches = image.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4).reshape(-1, c * p * p)
            out.append(self.mlp(Tensor(patches.astype(np.float32))).data)
        return np.stack(out)


def extract_features(source: str, model: BridgeModel, codec: PatchCodec, z_front: np.ndarray, cond: Tensor,
                     *, tap_layers: t.Sequence[int], tap_time: float, mode: str, eps: np.ndarray,
                     steps: int, z_back: np.ndarray | None = None,
                     reencoder: ImageReencoder | None = None) -> np.ndarray:
    """Conditioning features [B, T, width] for one of the three feature sources."""
    if source == "hidden_states":
        return tap_hidden(model, z_front, cond, tap_layers, tap_time, mode, eps=eps, z_back=z_back, steps=steps)
    if mode == "teacher_forced":
        if z_back is None:
            raise ContractError("teacher_forced features need the ground-truth back latent")
        final = z_back if z_back.ndim == 3 else z_back[None]
    else:
        final = euler_sample(model, z_front, cond, steps, eps)
    if source == "final_latent":
        return final.astype(np.float32)
    if source == "reencoded_image":
        reencoder = reencoder or ImageReencoder(codec, model.dims.d_model)
        images = np.stack([codec.decode(z, None) for z in final])
        return reencoder(images)
    raise ContractError(f"unknown feature source {source!r}")


def feature_width(source: str, d_model: int, n_taps: int, latent_width: int) -> int:
    return {"hidden_states": n_taps * d_model, "final_latent": latent_width,
            "reencoded_image": d_model}[source]


def dump_bundle(bundle: HiddenStateBundle) -> bytes:
    pair = bundle.pair_id.encode("utf-8")
    mode = bundle.mode.encode("utf-8")
    tag = bundle.source_tag.encode("utf-8")
    parts = [HID_MAGIC, struct.pack("<I", HID_VERSION),
             struct.pack("<H", len(pair)), pair,
             struct.pack("<B", len(bundle.tap_layers)),
             struct.pack(f"<{len(bundle.tap_layers)}H", *bundle.tap_layers),
             struct.pack("<d", bundle.tap_time),
             struct.pack("<B", len(mode)), mode,
             struct.pack("<B", len(tag)), tag,
             struct.pack("<I", 1), pack_entry("h", bundle.h)]
    return b"".join(parts)


def parse_bundle(buf: bytes, what: str = "K3HID") -> HiddenStateBundle:
    r = Reader(buf, what)
    check_header(r, HID_MAGIC, HID_VERSION)
    (n_pair,) = r.unpack("<H")
    pair = r.take(n_pair).decode("utf-8")
    (n_taps,) = r.unpack("<B")
    taps = r.unpack(f"<{n_taps}H") if n_taps else ()
    (tap_time,) = r.unpack("<d")
    (n_mode,) = r.unpack("<B")
    mode = r.take(n_mode).decode("utf-8")
    (n_tag,) = r.unpack("<B")
    tag = r.take(n_tag).decode("utf-8")
    (count,) = r.unpack("<I")
    if count != 1:
        raise FormatError(f"{what}: expected one tensor entry, found {count}")
    name, h = r.entry()
    if name != "h" or not r.done():
        raise FormatError(f"{what}: malformed payload")
    return HiddenStateBundle(h=h, tap_layers=tuple(taps), tap_time=tap_time, mode=mode,
                             source_tag=tag, pair_id=pair)


def write_bundle(path: str, bundle: HiddenStateBundle) -> None:
    atomic_write(path, dump_bundle(bundle))


def read_bundle(path: str) -> HiddenStateBundle:
    with open(path, "rb") as f:
        return parse_bundle(f.read(), what=f"K3HID {path}")
