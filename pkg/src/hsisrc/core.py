"""Domain types shared by the whole package: hyperspectral cubes, ground-truth
label maps, class-structured dictionaries, spatial neighborhood blocks, and the
sparsity-prior configuration.

All types are immutable after construction (arrays are marked read-only) and
safe to share across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

Coord = tuple[int, int]  # (row, col)


def _frozen_array(a, dtype=np.float64):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class HsiCube:
    """Hyperspectral cube stored band-major: data[band, row, col]."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_array(self.data)
        if data.ndim != 3:
            raise ValueError("cube data must be 3-D (bands, height, width)")
        if min(data.shape) < 1:
            raise ValueError("cube dimensions must all be >= 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def spectrum(self, row: int, col: int) -> np.ndarray:
        return self.data[:, row, col]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids; 0 means unlabeled, classes are 1..K."""

    labels: np.ndarray

    def __post_init__(self):
        labels = _frozen_array(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError("labels must be 2-D (height, width)")
        if labels.min(initial=0) < 0:
            raise ValueError("labels must be >= 0")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max(initial=0))

    def labeled_coords(self) -> list[tuple[Coord, int]]:
        """All labeled pixels as ((row, col), class), row-major order."""
        rows, cols = np.nonzero(self.labels)
        return [((int(r), int(c)), int(self.labels[r, c])) for r, c in zip(rows, cols)]


@dataclass(frozen=True, eq=False)
class GroupStructure:
    """Contiguous row/column groups: K+1 ascending boundaries plus one
    positive weight per group (default sqrt of the group cardinality)."""

    boundaries: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        b = _frozen_array(self.boundaries, dtype=np.int64)
        w = _frozen_array(self.weights)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("boundaries must hold at least 2 entries")
        if b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must start at 0 and be strictly increasing")
        if w.ndim != 1 or w.size != b.size - 1:
            raise ValueError("need exactly one weight per group")
        if np.any(w <= 0):
            raise ValueError("group weights must be positive")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_sizes(cls, sizes, weights=None) -> "GroupStructure":
        sizes = np.asarray(sizes, dtype=np.int64)
        boundaries = np.concatenate(([0], np.cumsum(sizes)))
        if weights is None:
            weights = np.sqrt(sizes.astype(np.float64))
        return cls(boundaries, weights)

    @property
    def n_groups(self) -> int:
        return self.boundaries.size - 1

    @property
    def n_atoms(self) -> int:
        return int(self.boundaries[-1])

    def sizes(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def slice_of(self, g: int) -> slice:
        """Row/column range of group g (1-based)."""
        if not 1 <= g <= self.n_groups:
            raise ValueError(f"group {g} out of range 1..{self.n_groups}")
        return slice(int(self.boundaries[g - 1]), int(self.boundaries[g]))

    def blocks(self):
        """Yield (g, slice) for every group, 1-based."""
        for g in range(1, self.n_groups + 1):
            yield g, self.slice_of(g)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Training spectra as columns, grouped class-contiguously.

    Column blocks are ordered by ascending class id 1..K so the group index
    of ``groups`` coincides with the class id.
    """

    atoms: np.ndarray
    class_of_atom: np.ndarray
    groups: GroupStructure
    unit_columns: bool = True

    def __post_init__(self):
        atoms = _frozen_array(self.atoms)
        cls = _frozen_array(self.class_of_atom, dtype=np.int32)
        if atoms.ndim != 2:
            raise ValueError("atoms must be a P x N matrix")
        if cls.ndim != 1 or cls.size != atoms.shape[1]:
            raise ValueError("class_of_atom must have one entry per atom")
        if cls.size != self.groups.n_atoms:
            raise ValueError("group boundaries do not cover all atoms")
        if np.any(np.diff(cls) < 0):
            raise ValueError("atoms must be ordered by ascending class id")
        for g, sl in self.groups.blocks():
            block = cls[sl]
            if block.size and not np.all(block == g):
                raise ValueError(f"group {g} columns carry mismatched class ids")
        if self.unit_columns:
            norms = np.linalg.norm(atoms, axis=0)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("columns are not unit-normalized")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "class_of_atom", cls)

    @property
    def n_bands(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_classes(self) -> int:
        return self.groups.n_groups


@dataclass(frozen=True, eq=False)
class NeighborhoodBlock:
    """Spectra of the pixels inside one spatial window, one column each."""

    spectra: np.ndarray
    center_index: int
    pixel_coords: tuple[Coord, ...]

    def __post_init__(self):
        spectra = _frozen_array(self.spectra)
        if spectra.ndim != 2 or spectra.shape[1] < 1:
            raise ValueError("spectra must be a P x T matrix with T >= 1")
        if not np.all(np.isfinite(spectra)):
            raise ValueError("block contains non-finite values")
        if not 0 <= self.center_index < spectra.shape[1]:
            raise ValueError("center_index outside the block")
        if len(self.pixel_coords) != spectra.shape[1]:
            raise ValueError("need one coordinate per column")
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "pixel_coords", tuple(self.pixel_coords))

    @classmethod
    def from_matrix(cls, spectra, center_index: int = 0) -> "NeighborhoodBlock":
        """Wrap a raw P x T matrix; coordinates are synthesized column indices."""
        spectra = np.asarray(spectra, dtype=np.float64)
        if spectra.ndim == 1:
            spectra = spectra[:, None]
        coords = tuple((0, t) for t in range(spectra.shape[1]))
        return cls(spectra, center_index, coords)

    @property
    def n_pixels(self) -> int:
        return self.spectra.shape[1]

    @property
    def center_coord(self) -> Coord:
        return self.pixel_coords[self.center_index]


@dataclass(frozen=True, eq=False)
class CoefficientMatrix:
    """N x T sparse coefficients, one column per block pixel."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim == 1:
            values = _frozen_array(values[:, None])
        if values.ndim != 2:
            raise ValueError("coefficients must be an N x T matrix")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficients contain non-finite values")
        object.__setattr__(self, "values", values)


class PriorKind(Enum):
    """The supported sparsity regularizers; values are the CLI short names."""

    L1 = "l1"
    JOINT_SPARSITY = "js"
    LAPLACIAN = "ls"
    GROUP = "gs"
    SPARSE_GROUP = "sgs"
    LOW_RANK = "lr"
    LOW_RANK_GROUP = "lrg"


#: kinds whose regularizer carries a second weight
KINDS_WITH_LAMBDA2 = frozenset({PriorKind.LAPLACIAN, PriorKind.SPARSE_GROUP})


@dataclass(frozen=True)
class PriorSpec:
    """Choice of regularizer with its weights.

    ``lam`` scales the leading term (the l1 term for the Laplacian prior, the
    group term for the sparse-group prior). ``lam2`` scales the second term
    and is only accepted for the Laplacian and sparse-group kinds.

    Zero weights are tolerated here so that degenerate reductions (e.g. the
    sparse-group prior with a vanishing group term) stay expressible; the CLI
    rejects non-positive values at parse time.

    ``weighted_l1`` selects whether the multi-pixel sparse-group form scales
    its elementwise term by the group weights (the collaborative hierarchical
    variant, the default) or leaves it plain. Single-pixel problems always
    use the plain elementwise term.
    """

    kind: PriorKind
    lam: float
    lam2: float | None = None
    weighted_l1: bool = True

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and >= 0")
        if self.kind in KINDS_WITH_LAMBDA2:
            if self.lam2 is None:
                raise ValueError(f"prior {self.kind.value} requires lam2")
            if not np.isfinite(self.lam2) or self.lam2 < 0:
                raise ValueError("lam2 must be finite and >= 0")
        elif self.lam2 is not None:
            raise ValueError(f"prior {self.kind.value} does not take lam2")


def normalize_columns(a: np.ndarray) -> np.ndarray:
    """Scale every column to unit l2 norm; raises on a zero column."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"column {int(zero[0])} has zero norm")
    return a / norms


def group_mask(x, g: int, groups: GroupStructure):
    """Zero all rows outside group g (1-based); rows inside are copied.

    Accepts a CoefficientMatrix or a plain array and returns the same kind.
    """
    values = x.values if isinstance(x, CoefficientMatrix) else np.asarray(x)
    sl = groups.slice_of(g)  # validates g
    out = np.zeros_like(values)
    out[sl] = values[sl]
    return CoefficientMatrix(out) if isinstance(x, CoefficientMatrix) else out


def stratified_counts(class_sizes, n_train: int) -> np.ndarray:
    """Apportion n_train over classes proportionally to their sizes.

    Largest-remainder rounding with two repairs: every class keeps at least
    one sample and no class exceeds its size. Deterministic; ties go to the
    smaller class index.
    """
    sizes = np.asarray(class_sizes, dtype=np.int64)
    k = sizes.size
    total = int(sizes.sum())
    if np.any(sizes < 1):
        raise ValueError("every class needs at least one labeled pixel")
    if n_train < k:
        raise ValueError(f"n_train={n_train} cannot cover {k} classes")
    if n_train > total:
        raise ValueError(f"n_train={n_train} exceeds {total} labeled pixels")
    quota = n_train * sizes / total
    counts = np.clip(np.floor(quota).astype(np.int64), 1, sizes)
    remainder = quota - np.floor(quota)
    need = n_train - int(counts.sum())
    if need > 0:
        order = sorted(range(k), key=lambda i: (-remainder[i], i))
        pos = 0
        while need > 0:
            i = order[pos % k]
            if counts[i] < sizes[i]:
                counts[i] += 1
                need -= 1
            pos += 1
    elif need < 0:
        order = sorted(range(k), key=lambda i: (remainder[i], -i))
        pos = 0
        while need < 0:
            i = order[pos % k]
            if counts[i] > 1:
                counts[i] -= 1
                need += 1
            pos += 1
    return counts


def dictionary_from_pixels(cube: HsiCube, train_pixels, normalize: bool = True) -> Dictionary:
    """Assemble a Dictionary from explicit ((row, col), class) training pixels.

    Columns are ordered by ascending class, row-major inside a class. Class
    ids must cover 1..K with no gaps.
    """
    pixels = sorted(train_pixels, key=lambda item: (item[1], item[0]))
    if not pixels:
        raise ValueError("no training pixels given")
    classes = sorted({c for _, c in pixels})
    k = classes[-1]
    if classes != list(range(1, k + 1)):
        missing = sorted(set(range(1, k + 1)) - set(classes))
        raise ValueError(f"class {missing[0]} has no training pixels")
    atoms = np.stack([cube.spectrum(r, c) for (r, c), _ in pixels], axis=1)
    if normalize:
        atoms = normalize_columns(atoms)
    class_of_atom = np.array([c for _, c in pixels], dtype=np.int32)
    sizes = np.bincount(class_of_atom, minlength=k + 1)[1:]
    groups = GroupStructure.from_sizes(sizes)
    return Dictionary(atoms, class_of_atom, groups, unit_columns=normalize)


def build_dictionary_split(
    cube: HsiCube,
    labels: LabelMap,
    n_train: int,
    seed: int,
    normalize: bool = True,
) -> tuple[Dictionary, list[tuple[Coord, int]]]:
    """Stratified train/test split of the labeled pixels.

    Per-class training counts follow proportional largest-remainder
    apportionment (at least one atom per class); pixels inside a class are
    sampled without replacement, deterministically for a given seed. The
    remaining labeled pixels form the test set, ordered by class then
    row-major.
    """
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError("label map does not match the cube dimensions")
    k = labels.n_classes
    if k < 1:
        raise ValueError("label map holds no labeled pixels")
    per_class = []
    for g in range(1, k + 1):
        rows, cols = np.nonzero(labels.labels == g)
        if rows.size == 0:
            raise ValueError(f"class {g} has no labeled pixels")
        per_class.append(list(zip(rows.tolist(), cols.tolist())))
    sizes = np.array([len(p) for p in per_class])
    total = int(sizes.sum())
    if n_train >= total:
        raise ValueError(f"n_train={n_train} must be smaller than {total} labeled pixels")
    counts = stratified_counts(sizes, n_train)

    rng = np.random.default_rng(seed)
    train: list[tuple[Coord, int]] = []
    test: list[tuple[Coord, int]] = []
    for g in range(1, k + 1):
        coords = per_class[g - 1]  # already row-major
        chosen = rng.choice(len(coords), size=int(counts[g - 1]), replace=False)
        chosen_set = set(int(i) for i in chosen)
        train.extend(((coords[i]), g) for i in sorted(chosen_set))
        test.extend((coords[i], g) for i in range(len(coords)) if i not in chosen_set)
    dictionary = dictionary_from_pixels(cube, train, normalize=normalize)
    return dictionary, test


def extract_window(cube: HsiCube, center: Coord, window: int) -> NeighborhoodBlock:
    """Collect the spectra of the window around ``center`` (odd side length).

    Border windows are truncated to the cells inside the image, never padded,
    so T can be smaller than window**2.
    """
    row, col = center
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd positive side length")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ValueError(f"center {center} outside the {cube.height}x{cube.width} image")
    half = window // 2
    r0, r1 = max(0, row - half), min(cube.height - 1, row + half)
    c0, c1 = max(0, col - half), min(cube.width - 1, col + half)
    coords = [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
    spectra = cube.data[:, r0 : r1 + 1, c0 : c1 + 1].reshape(cube.bands, -1)
    center_index = coords.index((row, col))
    return NeighborhoodBlock(spectra, center_index, tuple(coords))
