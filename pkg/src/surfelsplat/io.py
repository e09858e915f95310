"""Scene, image and camera file formats.

* PLY surfel scenes: binary little-endian on write; ASCII or binary on read.
* PFM float images (little-endian, bottom-to-top rows).
* Camera JSON with floats printed to 17 significant digits.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .surfel import SurfelScene

PathLike = Union[str, Path]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

# float color copies keep optimized colors exact; 8-bit channels are for viewers
_VERTEX_LAYOUT = [
    ("x", "double"), ("y", "double"), ("z", "double"),
    ("nx", "double"), ("ny", "double"), ("nz", "double"),
    ("red", "uchar"), ("green", "uchar"), ("blue", "uchar"),
    ("opacity", "double"), ("sx", "double"), ("sy", "double"),
    ("f_red", "double"), ("f_green", "double"), ("f_blue", "double"),
]
_PRIOR_LAYOUT = [("prior_nx", "double"), ("prior_ny", "double"), ("prior_nz", "double")]


class FormatError(ValueError):
    pass


# -- PLY ----------------------------------------------------------------------

def write_ply(path: PathLike, scene: SurfelScene) -> None:
    layout = list(_VERTEX_LAYOUT)
    if scene.prior_normals is not None:
        layout += _PRIOR_LAYOUT
    dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in layout])
    data = np.zeros(len(scene), dtype=dtype)
    for k, name in enumerate("xyz"):
        data[name] = scene.centers[:, k]
    for k, name in enumerate(("nx", "ny", "nz")):
        data[name] = scene.normals[:, k]
    rgb8 = np.clip(np.rint(scene.colors * 255.0), 0, 255).astype(np.uint8)
    for k, name in enumerate(("red", "green", "blue")):
        data[name] = rgb8[:, k]
        data["f_" + name] = scene.colors[:, k]
    data["opacity"] = scene.opacities
    data["sx"] = scene.scales[:, 0]
    data["sy"] = scene.scales[:, 1]
    if scene.prior_normals is not None:
        for k, name in enumerate(("prior_nx", "prior_ny", "prior_nz")):
            data[name] = scene.prior_normals[:, k]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property {t} {name}" for name, t in layout]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header has no end_header")
        tokens = line.decode("ascii").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError("list properties are not supported for vertices")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if count is None:
        raise FormatError("PLY file has no vertex element")
    return fmt, count, props


def read_ply(path: PathLike) -> SurfelScene:
    with open(path, "rb") as fh:
        fmt, count, props = _read_ply_header(fh)
        if fmt == "ascii":
            rows = np.loadtxt(fh, max_rows=count, ndmin=2)
            data = {name: rows[:, k] for k, (name, _) in enumerate(props)}
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            order = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, order + t) for name, t in props])
            raw = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
            data = {name: raw[name] for name, _ in props}
        else:
            raise FormatError(f"unsupported PLY format {fmt!r}")

    def col(*names):
        return np.stack([np.asarray(data[n], dtype=np.float64) for n in names], axis=1)

    required = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity", "sx", "sy")
    missing = [n for n in required if n not in data]
    if missing:
        raise FormatError(f"PLY is missing properties {missing}")
    if all(n in data for n in ("f_red", "f_green", "f_blue")):
        colors = col("f_red", "f_green", "f_blue")
    else:
        colors = col("red", "green", "blue") / 255.0
    priors = None
    if all(n in data for n in ("prior_nx", "prior_ny", "prior_nz")):
        priors = col("prior_nx", "prior_ny", "prior_nz")
    return SurfelScene(colors=colors, centers=col("x", "y", "z"), scales=col("sx", "sy"),
                       normals=col("nx", "ny", "nz"),
                       opacities=np.asarray(data["opacity"], dtype=np.float64),
                       prior_normals=priors)


# -- PFM ----------------------------------------------------------------------

def write_pfm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    elif image.ndim == 2:
        tag = b"Pf"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3), got {image.shape}")
    H, W = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{W} {H}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise FormatError("not a PFM file")
        W, H = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        order = "<" if scale < 0 else ">"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=order + "f4", count=W * H * channels)
    shape = (H, W, 3) if channels == 3 else (H, W)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_png(path: PathLike, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path: PathLike) -> np.ndarray:
    """PFM as stored, or any Pillow-readable image scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


# -- camera JSON --------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def camera_to_json(K: Optional[CameraIntrinsics], pose: Optional[CameraPose] = None) -> str:
    parts = []
    if K is not None:
        parts += [f'"fx": {_fmt(K.fx)}', f'"fy": {_fmt(K.fy)}', f'"cx": {_fmt(K.cx)}',
                  f'"cy": {_fmt(K.cy)}', f'"width": {K.width}', f'"height": {K.height}',
                  f'"near": {_fmt(K.near)}', f'"far": {_fmt(K.far)}']
    if pose is not None:
        rot = ", ".join(_fmt(v) for v in pose.rotation.reshape(-1))
        trans = ", ".join(_fmt(v) for v in pose.translation)
        parts.append(f'"pose": {{"rotation": [{rot}], "translation": [{trans}]}}')
    return "{\n  " + ",\n  ".join(parts) + "\n}\n"


def write_camera(path: PathLike, K: Optional[CameraIntrinsics],
                 pose: Optional[CameraPose] = None) -> None:
    Path(path).write_text(camera_to_json(K, pose))


def parse_camera(data: dict) -> Tuple[Optional[CameraIntrinsics], Optional[CameraPose]]:
    K = None
    if "fx" in data:
        K = CameraIntrinsics(data["fx"], data["fy"], data["cx"], data["cy"],
                             data["width"], data["height"],
                             data.get("near", 0.01), data.get("far", 100.0))
    pose = None
    if "pose" in data:
        p = data["pose"]
        pose = CameraPose(np.array(p["rotation"], dtype=np.float64).reshape(3, 3),
                          np.array(p["translation"], dtype=np.float64))
    return K, pose


def read_camera(path: PathLike):
    return parse_camera(json.loads(Path(path).read_text()))


# -- config -------------------------------------------------------------------

def load_config(path: PathLike) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def append_jsonl(path: PathLike, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=False) + "\n")
