"""On-disk formats: binary PGM frames, flat weight files, and CSV tables."""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser

WEIGHTS_MAGIC = "SKWT1"


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- PGM


def encode_pgm(ink: np.ndarray) -> bytes:
    """P5 bytes with ink drawn dark on white."""
    ink = np.asarray(ink, dtype=float)
    if ink.ndim != 2:
        raise ValueError("PGM frames are 2-D")
    h, w = ink.shape
    gray = np.round(255.0 * (1.0 - np.clip(ink, 0.0, 1.0))).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + gray.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pgm`: returns ink coverage in [0, 1]."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise FormatError("truncated PGM payload")
    gray = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return 1.0 - gray.astype(float) / 255.0


def write_pgm(path, ink: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(ink))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm_frames(directory, video: np.ndarray, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(3, len(str(len(video) - 1)))
    paths = []
    for k, frame in enumerate(video):
        path = directory / f"{prefix}_{k:0{digits}d}.pgm"
        write_pgm(path, frame)
        paths.append(path)
    return paths


def read_pgm_frames(directory) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .pgm frames in {directory}")
    frames = [read_pgm(p) for p in paths]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"frames in {directory} differ in size")
    return np.stack(frames)


# --------------------------------------------------------------------------- weights


def dump_weights(model: Denoiser) -> bytes:
    """``SKWT1`` header, ``key=value`` config, one ``name shape`` line per tensor, then float32 data."""
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(f"{WEIGHTS_MAGIC}\n".encode())
    for key, val in model.config().items():
        buf.write(f"config {key}={val}\n".encode())
    for name, t in state.items():
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        buf.write(f"tensor {name} {shape}\n".encode())
    buf.write(b"end\n")
    for t in state.values():
        buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return buf.getvalue()


def parse_weights(data: bytes, dtype=torch.float32) -> Denoiser:
    buf = io.BytesIO(data)
    if buf.readline() != f"{WEIGHTS_MAGIC}\n".encode():
        raise FormatError(f"not a {WEIGHTS_MAGIC} weight file")
    config, specs = {}, []
    while True:
        line = buf.readline()
        if not line.endswith(b"\n"):
            raise FormatError("truncated weight header")
        parts = line.decode("ascii").split()
        if parts == ["end"]:
            break
        if parts[0] == "config":
            key, val = parts[1].split("=", 1)
            config[key] = int(val)
        elif parts[0] == "tensor":
            shape = () if parts[2] == "scalar" else tuple(int(s) for s in parts[2].split("x"))
            specs.append((parts[1], shape))
        else:
            raise FormatError(f"unexpected header line {line!r}")
    model = Denoiser(
        d_model=config["d_model"],
        patch=config["patch"],
        latent_hw=(config["latent_h"], config["latent_w"]),
        max_frames=config["max_frames"],
        T=config["T"],
        seed=config["seed"],
        dtype=dtype,
    )
    for name, _ in specs:
        if name.startswith("words."):
            model.add_word(name[len("words."):])
    state = {}
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError(f"truncated payload for {name}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        state[name] = torch.from_numpy(arr).to(dtype)
    model.load_state_dict(state)
    return model


def save_weights(model: Denoiser, path) -> None:
    tmp = f"{path}.tmp"
    Path(tmp).write_bytes(dump_weights(model))
    os.replace(tmp, path)


def load_weights(path, dtype=torch.float32) -> Denoiser:
    return parse_weights(Path(path).read_bytes(), dtype)


def dump_words(words: dict[str, torch.Tensor]) -> str:
    """Learned prompt word rows as ``word v1 v2 ...`` lines with float32-exact values."""
    lines = []
    for word, row in sorted(words.items()):
        vals = np.asarray(row.detach().cpu().numpy(), dtype=np.float32)
        lines.append(" ".join([word] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def parse_words(text: str, dtype=torch.float32) -> dict[str, torch.Tensor]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            word, *vals = line.split()
            out[word] = torch.tensor([float(v) for v in vals], dtype=torch.float32).to(dtype)
    return out


# --------------------------------------------------------------------------- CSV


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
