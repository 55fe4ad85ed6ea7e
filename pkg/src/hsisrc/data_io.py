"""File formats and synthetic scene generation.

Cubes travel as a text header (key = value lines) plus a raw little-endian
float32 file in BSQ or BIP interleave; label maps as raw little-endian uint16,
row-major. Rendered outputs are plain binary PPM/PGM rasters.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import HsiCube, LabelMap

INTERLEAVES = ("BSQ", "BIP")


def parse_kv_file(path) -> dict[str, str]:
    """Parse `key = value` lines; blank lines and #-comments are skipped."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed header line: {raw!r}")
        out[key.strip()] = value.strip()
    return out


def write_kv_file(path, mapping):
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CubeHeader:
    width: int
    height: int
    bands: int
    dtype: str = "float32le"
    interleave: str = "BSQ"
    name: str = ""

    def __post_init__(self):
        if min(self.width, self.height, self.bands) < 1:
            raise ValueError("cube dimensions must be >= 1")
        if self.dtype != "float32le":
            raise ValueError(f"unknown dtype {self.dtype!r} (expected float32le)")
        if self.interleave not in INTERLEAVES:
            raise ValueError(f"unknown interleave {self.interleave!r} (expected BSQ or BIP)")

    @property
    def n_bytes(self) -> int:
        return self.width * self.height * self.bands * 4

    @classmethod
    def from_file(cls, path) -> "CubeHeader":
        kv = parse_kv_file(path)
        try:
            return cls(
                width=int(kv["width"]),
                height=int(kv["height"]),
                bands=int(kv["bands"]),
                dtype=kv.get("dtype", "float32le"),
                interleave=kv.get("interleave", "BSQ"),
                name=kv.get("name", ""),
            )
        except KeyError as missing:
            raise ValueError(f"header misses required key {missing}") from None

    def to_file(self, path):
        write_kv_file(
            path,
            {
                "width": self.width,
                "height": self.height,
                "bands": self.bands,
                "dtype": self.dtype,
                "interleave": self.interleave,
                "name": self.name,
            },
        )


def load_cube(header_path, raw_path) -> HsiCube:
    """Read a cube into band-major order regardless of the file interleave."""
    header = CubeHeader.from_file(header_path)
    raw = Path(raw_path).read_bytes()
    if len(raw) != header.n_bytes:
        raise ValueError(
            f"raw file holds {len(raw)} bytes but the header implies {header.n_bytes}"
        )
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if header.interleave == "BSQ":
        data = flat.reshape(header.bands, header.height, header.width)
    else:  # BIP: band index varies fastest
        data = flat.reshape(header.height, header.width, header.bands).transpose(2, 0, 1)
    return HsiCube(data)


def save_cube(cube: HsiCube, header_path, raw_path, interleave: str = "BSQ", name: str = ""):
    header = CubeHeader(cube.width, cube.height, cube.bands, interleave=interleave, name=name)
    header.to_file(header_path)
    if interleave == "BSQ":
        out = cube.data
    else:
        out = cube.data.transpose(1, 2, 0)
    Path(raw_path).write_bytes(np.ascontiguousarray(out, dtype="<f4").tobytes())


def load_labels(path, width: int, height: int) -> LabelMap:
    """Raw little-endian uint16 labels, row-major; K is the maximum label."""
    raw = Path(path).read_bytes()
    expected = width * height * 2
    if len(raw) != expected:
        raise ValueError(f"label file holds {len(raw)} bytes but {expected} were expected")
    labels = np.frombuffer(raw, dtype="<u2").reshape(height, width)
    return LabelMap(labels.astype(np.int32))


def save_labels(labels: LabelMap, path):
    Path(path).write_bytes(labels.labels.astype("<u2").tobytes())


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene: K class regions tiling the image,
    each class an orthonormal subspace of dimension ``subspace_dim``."""

    width: int = 30
    height: int = 30
    n_classes: int = 3
    bands: int = 50
    subspace_dim: int = 3
    layout: str = "blocks"
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.layout not in ("blocks", "stripes"):
            raise ValueError("layout must be 'blocks' or 'stripes'")
        if self.subspace_dim >= self.bands:
            raise ValueError("subspace_dim must be smaller than the band count")
        if self.n_classes < 1 or min(self.width, self.height) < 1:
            raise ValueError("scene needs at least one class and one pixel")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse compact scene strings like ``blocks:K=3,P=50,d=3,size=30x30,noise=0.02``."""
    layout, _, rest = text.partition(":")
    layout = layout.strip() or "blocks"
    kwargs: dict = {"layout": layout}
    if rest.strip():
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"malformed scene field {item!r}")
            key = key.strip()
            value = value.strip()
            if key == "K":
                kwargs["n_classes"] = int(value)
            elif key == "P":
                kwargs["bands"] = int(value)
            elif key == "d":
                kwargs["subspace_dim"] = int(value)
            elif key == "size":
                w, _, h = value.partition("x")
                kwargs["width"], kwargs["height"] = int(w), int(h)
            elif key == "noise":
                kwargs["noise_sigma"] = float(value)
            else:
                raise ValueError(f"unknown scene field {key!r}")
    return SceneSpec(**kwargs)


def _region_labels(spec: SceneSpec) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.n_classes
    labels = np.zeros((h, w), dtype=np.int32)
    if spec.layout == "stripes":
        for r in range(h):
            labels[r, :] = (r * k) // h + 1
    else:  # blocks: a near-square grid of tiles, classes assigned cyclically
        rows = int(np.floor(np.sqrt(k))) or 1
        cols = int(np.ceil(k / rows))
        tile = 0
        for i in range(rows):
            r0, r1 = (i * h) // rows, ((i + 1) * h) // rows
            for j in range(cols):
                c0, c1 = (j * w) // cols, ((j + 1) * w) // cols
                labels[r0:r1, c0:c1] = tile % k + 1
                tile += 1
    return labels


def _class_bases(spec: SceneSpec, seed: int) -> list[np.ndarray]:
    """Seeded orthonormal bases, redrawn (new sub-seed) if any pair is degenerate."""
    p, d, k = spec.bands, spec.subspace_dim, spec.n_classes
    for attempt in range(32):
        rng = np.random.default_rng([seed, 1, attempt])
        bases = []
        for _ in range(k):
            q, _ = np.linalg.qr(rng.normal(size=(p, d)))
            bases.append(q[:, :d])
        if d * k > p:
            return bases  # subspaces must overlap; no separation check possible
        ok = True
        for i in range(k):
            for j in range(i + 1, k):
                top = np.linalg.svd(bases[i].T @ bases[j], compute_uv=False)[0]
                if top > 1.0 - 1e-8:
                    ok = False
        if ok:
            return bases
    raise RuntimeError("failed to draw non-degenerate class subspaces")


def synth_generate(spec: SceneSpec, seed: int) -> tuple[HsiCube, LabelMap]:
    """Deterministic synthetic scene: every pixel is its class basis times
    nonnegative coefficients, plus optional Gaussian noise.

    The noise stream is drawn after the signal, so the same seed with a
    different noise_sigma reproduces the identical underlying signal.
    """
    labels = _region_labels(spec)
    bases = _class_bases(spec, seed)
    coeff_rng = np.random.default_rng([seed, 2])
    data = np.zeros((spec.bands, spec.height, spec.width))
    for g in range(1, spec.n_classes + 1):
        rows, cols = np.nonzero(labels == g)
        coeffs = coeff_rng.uniform(0.5, 1.5, size=(spec.subspace_dim, rows.size))
        data[:, rows, cols] = bases[g - 1] @ coeffs
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([seed, 3])
        data = data + noise_rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return HsiCube(data), LabelMap(labels)


def noise_sigma_for_snr(cube: HsiCube, snr_db: float) -> float:
    """Per-sample noise sigma giving the requested SNR against this signal."""
    rms = float(np.sqrt(np.mean(cube.data**2)))
    return rms / (10.0 ** (snr_db / 20.0))


# ---------------------------------------------------------------------------
# raster output (binary PPM/PGM: ASCII magic + dimensions, 8-bit samples)


def default_palette(k: int) -> list[tuple[int, int, int]]:
    """Index 0 is black; classes get distinct saturated colors."""
    base = [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    ]
    palette = [(0, 0, 0)]
    for i in range(k):
        if i < len(base):
            palette.append(base[i])
        else:
            hue = (i * 0.61803398875) % 1.0
            r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
            palette.append((int(255 * r), int(255 * g), int(255 * b)))
    return palette


def save_map(labels: LabelMap, palette, path):
    """Render a label map as a binary PPM using the palette (index 0 = unlabeled)."""
    k = labels.n_classes
    if len(palette) < k + 1:
        raise ValueError(f"palette holds {len(palette)} colors but {k + 1} are needed")
    lut = np.asarray(palette, dtype=np.uint8)
    rgb = lut[labels.labels]
    header = f"P6\n{labels.width} {labels.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def save_pattern(x, path):
    """Render |X| as a grayscale PGM, atoms down the rows, pixels across,
    intensity normalized to the matrix maximum."""
    values = getattr(x, "values", x)
    mag = np.abs(np.asarray(values, dtype=np.float64))
    peak = mag.max(initial=0.0)
    img = np.zeros(mag.shape, dtype=np.uint8)
    if peak > 0:
        img = np.round(255.0 * mag / peak).astype(np.uint8)
    header = f"P5\n{mag.shape[1]} {mag.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
