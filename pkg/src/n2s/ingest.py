"""Keyframe selection, SfM sparse-text parsing and posed-image datasets."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

class DataError(ValueError):
    """Malformed or missing input data."""


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width/height must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def distortion(self) -> tuple[float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2)

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same lens at another resolution."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
            self.k1, self.k2, self.p1, self.p2,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (OpenCV camera axes: x right, y down, z forward)."""

    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q / norm))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.translation)

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(np.asarray(t, dtype=np.float64)))

    def inverse(self) -> "Pose":
        R = self.matrix
        return Pose.from_matrix(R.T, -R.T @ self.position)

    def to_dict(self) -> dict:
        return {"rotation": list(self.rotation), "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        if "matrix" in d:
            m = np.asarray(d["matrix"], dtype=np.float64).reshape(-1, 4)
            return cls.from_matrix(m[:3, :3], m[:3, 3])
        return cls(tuple(d["rotation"]), tuple(d["translation"]))


def world_to_camera_to_c2w(q, t) -> tuple[np.ndarray, np.ndarray]:
    """Invert a world-to-camera (R, t) given as quaternion + translation."""
    R = quat_to_matrix(q)
    t = np.asarray(t, dtype=np.float64)
    return R.T, -R.T @ t


@dataclass(frozen=True)
class PosedImage:
    name: str
    image: np.ndarray
    pose: Pose
    camera: CameraIntrinsics

    def __post_init__(self) -> None:
        h, w = self.image.shape[:2]
        if (w, h) != (self.camera.width, self.camera.height):
            raise DataError(
                f"image {self.name} is {w}x{h}, camera expects {self.camera.width}x{self.camera.height}"
            )


@dataclass(frozen=True)
class SceneDataset:
    images: tuple[PosedImage, ...]
    camera: CameraIntrinsics
    scene_bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.images:
            raise DataError("dataset is empty")
        for im in self.images:
            if im.camera != self.camera:
                raise DataError(f"image {im.name} does not share the dataset camera")

    def __len__(self) -> int:
        return len(self.images)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3].mean(axis=-1)


def sharpness_score(image: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian over interior pixels."""
    g = to_gray(image)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("image too small")
    lap = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    )
    return float(lap.var())


def partition_bounds(count: int, n: int) -> list[tuple[int, int]]:
    size, extra = divmod(count, n)
    bounds, start = [], 0
    for k in range(n):
        stop = start + size + (1 if k < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def select_keyframes(frames: Sequence[np.ndarray], n: int) -> list[int]:
    """Index of the sharpest frame in each of ``n`` contiguous partitions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(frames) == 0:
        raise ValueError("no frames")
    if n > len(frames):
        raise ValueError("too few frames")
    scores = [sharpness_score(f) for f in frames]
    picks = []
    for start, stop in partition_bounds(len(frames), n):
        window = scores[start:stop]
        picks.append(start + int(np.argmax(window)))  # argmax keeps the earliest tie
    return picks


# --- SfM sparse text export -------------------------------------------------

_MODEL_PARAMS = {"OPENCV": 8}


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def parse_sfm_cameras(text: str) -> CameraIntrinsics:
    cams = []
    for lineno, line in _content_lines(text):
        elems = line.split()
        if len(elems) < 2:
            raise DataError(f"line {lineno}: malformed camera line")
        model = elems[1]
        if model not in _MODEL_PARAMS:
            raise DataError(f"unknown model {model}")
        expected = 4 + _MODEL_PARAMS[model]
        if len(elems) != expected:
            raise DataError(f"line {lineno}: {model} camera needs {expected} fields, got {len(elems)}")
        try:
            w, h = int(elems[2]), int(elems[3])
            params = [float(v) for v in elems[4:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        cams.append(CameraIntrinsics(w, h, *params))
    if len(cams) != 1:
        raise DataError(f"expected exactly one camera, found {len(cams)}")
    return cams[0]


def parse_sfm_images(text: str) -> list[tuple[str, Pose]]:
    """Image poses from an ``images.txt`` export, converted to camera-to-world.

    Each image has a header line followed by a 2D-point line (possibly empty),
    which is skipped.
    """
    out = []
    skip_points = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if skip_points:
            skip_points = False
            continue
        if not line:
            continue
        elems = line.split()
        if len(elems) < 10:
            raise DataError(f"line {lineno}: malformed image line")
        try:
            int(elems[0]), int(elems[8])
            q = np.array([float(v) for v in elems[1:5]])
            t = np.array([float(v) for v in elems[5:8]])
        except ValueError as exc:
            raise DataError(f"line {lineno}: malformed image line ({exc})") from None
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise DataError(f"line {lineno}: quaternion not normalized (norm {norm:.6f})")
        R, c = world_to_camera_to_c2w(q / norm, t)
        out.append((" ".join(elems[9:]), Pose.from_matrix(R, c)))
        skip_points = True
    return out


def format_sfm_cameras(camera: CameraIntrinsics, camera_id: int = 1) -> str:
    c = camera
    vals = [c.fx, c.fy, c.cx, c.cy, c.k1, c.k2, c.p1, c.p2]
    return (
        "# Camera list with one line of data per camera:\n"
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
        f"{camera_id} OPENCV {c.width} {c.height} " + " ".join(repr(float(v)) for v in vals) + "\n"
    )


def format_sfm_images(named_poses: Sequence[tuple[str, Pose]], camera_id: int = 1) -> str:
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
    ]
    for i, (name, pose) in enumerate(named_poses, start=1):
        w2c = pose.inverse()
        vals = list(w2c.rotation) + list(w2c.translation)
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals) + f" {camera_id} {name}")
        lines.append("")
    return "\n".join(lines) + "\n"


# --- image I/O -------------------------------------------------------------


def read_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise DataError("not a binary PPM (P6) file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = tokens
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    arr = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return arr.astype(np.float64) / maxval


def write_ppm(image: np.ndarray) -> bytes:
    arr = to_uint8(image)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM as float RGB in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(b"P6"):
        return read_ppm(data)
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def build_dataset(
    images: dict[str, np.ndarray],
    poses: Sequence[tuple[str, Pose]],
    camera: CameraIntrinsics,
    margin: float = 2.0,
) -> SceneDataset:
    missing = [name for name, _ in poses if name not in images]
    if missing:
        raise DataError("missing images: " + ", ".join(missing))
    posed = tuple(PosedImage(name, np.asarray(images[name]), pose, camera) for name, pose in poses)
    centers = np.array([p.position for _, p in poses])
    mid = 0.5 * (centers.min(0) + centers.max(0))
    half = 0.5 * (centers.max(0) - centers.min(0)) * margin
    half = np.maximum(half, 1e-6)
    return SceneDataset(posed, camera, (tuple(mid - half), tuple(mid + half)))


def load_sfm_dataset(directory, margin: float = 2.0) -> SceneDataset:
    """Dataset from ``cameras.txt`` + ``images.txt`` + an ``images/`` folder."""
    directory = Path(directory)
    camera = parse_sfm_cameras((directory / "cameras.txt").read_text())
    poses = parse_sfm_images((directory / "images.txt").read_text())
    image_dir = directory / "images"
    loaded = {}
    for name, _ in poses:
        p = image_dir / name
        if p.exists():
            loaded[name] = load_image(p)
    return build_dataset(loaded, poses, camera, margin)
