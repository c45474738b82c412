"""Representative part mining: keypoint detection, K-medoids, patch cropping.

Parts are square patches cropped around medoid keypoints of the pooled
per-font keypoint set, clustered on their 128-dim descriptors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .dataset import ALPHABET, FontRecord
from .errors import KTooLarge, NoKeypoints

VALID_PART_SIZES = (32, 64, 128)

# A patch counts as non-blank when at least this fraction of its pixels
# carries ink above 0.5. Operationalizes the "no background-only patches"
# assumption.
BLANK_INK_FRACTION = 0.02

_SIFT_DEFAULT_CONTRAST = 0.04
_CONTRAST_HALVINGS = 3
_PAM_MAX_ITER = 100


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    descriptor: np.ndarray  # (128,) float32
    source_char: str

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        if self.descriptor.shape != (128,):
            raise ValueError(f"descriptor must be 128-dim, got {self.descriptor.shape}")


@dataclass
class Part:
    patch: np.ndarray  # PxP float32 in [0,1]
    center: tuple[int, int]  # (x, y) in source image coords
    source_char: str | None
    font_id: str
    medoid_index: int | None = None
    scale: float | None = None

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float32)
        if self.patch.ndim != 2 or self.patch.shape[0] != self.patch.shape[1]:
            raise ValueError(f"part patch must be square, got {self.patch.shape}")

    @property
    def size(self) -> int:
        return self.patch.shape[0]

    def digest(self) -> str:
        import hashlib

        return hashlib.sha1(self.patch.tobytes()).hexdigest()


@dataclass
class PartSet:
    parts: list[Part]
    font_id: str = ""

    def __post_init__(self):
        if not self.parts:
            raise ValueError("PartSet must be non-empty")
        sizes = {p.size for p in self.parts}
        if len(sizes) != 1:
            raise ValueError(f"all parts in a set must share one size, got {sizes}")

    def __len__(self) -> int:
        return len(self.parts)


# ---------------------------------------------------------------------------
# Patch cropping
# ---------------------------------------------------------------------------


def crop_patch(image: np.ndarray, cx: int, cy: int, size: int) -> np.ndarray:
    """Crop a size x size window centered at (cx, cy), zero-padded at borders.

    Pure pixel copy (dtype preserved): pasting the result back at the same
    center reproduces the source exactly inside the window.
    """
    h, w = image.shape
    half = size // 2
    x0, y0 = cx - half, cy - half
    patch = np.zeros((size, size), dtype=image.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        patch[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return patch


def paste_patch(canvas: np.ndarray, patch: np.ndarray, cx: int, cy: int) -> np.ndarray:
    """Inverse of crop_patch onto an existing canvas (in place, returned)."""
    h, w = canvas.shape
    size = patch.shape[0]
    half = size // 2
    x0, y0 = cx - half, cy - half
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        canvas[sy0:sy1, sx0:sx1] = patch[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0]
    return canvas


def patch_ink_fraction(patch: np.ndarray) -> float:
    return float((patch > 0.5).mean())


# ---------------------------------------------------------------------------
# Keypoint detection
# ---------------------------------------------------------------------------


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def detect_keypoints_in_images(
    images: list[np.ndarray],
    chars: list[str] | None = None,
    patch_size: int = 32,
    contrast_threshold: float = _SIFT_DEFAULT_CONTRAST,
) -> list[Keypoint]:
    """Run the multi-scale keypoint detector over a list of glyph images.

    Keypoints whose surrounding patch_size window is blank are discarded.
    """
    if chars is None:
        chars = [""] * len(images)
    found: list[Keypoint] = []
    sift = cv2.SIFT_create(contrastThreshold=contrast_threshold)
    for img, ch in zip(images, chars):
        kps, desc = sift.detectAndCompute(_to_uint8(img), None)
        if not kps:
            continue
        for kp, d in zip(kps, desc):
            cx, cy = int(round(kp.pt[0])), int(round(kp.pt[1]))
            if patch_ink_fraction(crop_patch(img, cx, cy, patch_size)) < BLANK_INK_FRACTION:
                continue
            found.append(Keypoint(kp.pt[0], kp.pt[1], kp.size, d, ch))
    return found


def detect_keypoints(
    record: FontRecord,
    patch_size: int = 32,
    min_count: int = 1,
) -> list[Keypoint]:
    """Pool filtered keypoints from all 26 glyphs of a font.

    If fewer than min_count keypoints survive, the detector contrast
    threshold is halved up to three times before giving up.
    """
    images = [record.glyphs[c].pixels for c in ALPHABET]
    chars = list(ALPHABET)
    threshold = _SIFT_DEFAULT_CONTRAST
    best: list[Keypoint] = []
    for _ in range(_CONTRAST_HALVINGS + 1):
        found = detect_keypoints_in_images(images, chars, patch_size, threshold)
        if len(found) > len(best):
            best = found
        if len(best) >= min_count:
            return best
        threshold /= 2.0
    if not best:
        raise NoKeypoints(f"font {record.font_id}: no usable keypoints")
    return best


# ---------------------------------------------------------------------------
# K-medoids (greedy farthest-point init + PAM swaps)
# ---------------------------------------------------------------------------


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _assignment_cost(dist: np.ndarray, medoids: np.ndarray) -> float:
    return float(dist[:, medoids].min(axis=1).sum())


def _farthest_init(dist: np.ndarray, k: int, first: int) -> np.ndarray:
    medoids = [first]
    while len(medoids) < k:
        nearest = dist[:, medoids].min(axis=1)
        nearest[medoids] = -1.0  # never re-pick a medoid
        medoids.append(int(np.argmax(nearest)))  # argmax tie -> lowest index
    return np.array(sorted(medoids))


def _build_init(dist: np.ndarray, k: int) -> np.ndarray:
    """Classic PAM BUILD: each new medoid maximally decreases the cost."""
    medoids = [int(np.argmin(dist.sum(axis=1)))]
    while len(medoids) < k:
        nearest = dist[:, medoids].min(axis=1)
        # gain of adding candidate x: sum over points of max(nearest - d(x,.), 0)
        gains = np.maximum(nearest[None, :] - dist, 0.0).sum(axis=1)
        gains[medoids] = -1.0
        medoids.append(int(np.argmax(gains)))
    return np.array(sorted(medoids))


_PAIR_SWAP_BUDGET = 50_000


def _best_single_swap(dist: np.ndarray, medoids: np.ndarray, cost: float):
    """Vectorized best-improvement (medoid, candidate) swap, or None."""
    n = dist.shape[0]
    best_cost, best = cost, None
    for mi in range(len(medoids)):
        others = np.delete(medoids, mi)
        if others.size:
            excl = dist[:, others].min(axis=1)
        else:
            excl = np.full(n, np.inf)
        # candidate costs for swapping medoids[mi] with every point at once
        cand_costs = np.minimum(excl[:, None], dist).sum(axis=0)
        cand_costs[medoids] = np.inf
        x = int(np.argmin(cand_costs))
        if cand_costs[x] < best_cost - 1e-12:
            best_cost, best = float(cand_costs[x]), np.sort(np.append(others, x))
    return best, best_cost


def _best_pair_swap(dist: np.ndarray, medoids: np.ndarray, cost: float):
    """Best simultaneous two-medoid replacement; only used on small inputs."""
    from itertools import combinations

    n = dist.shape[0]
    k = len(medoids)
    non = [x for x in range(n) if x not in set(medoids.tolist())]
    if k < 2 or len(non) < 2:
        return None, cost
    best_cost, best = cost, None
    for mi, mj in combinations(range(k), 2):
        keep = np.delete(medoids, [mi, mj])
        for xa, xb in combinations(non, 2):
            cand = np.sort(np.concatenate([keep, [xa, xb]]))
            c = _assignment_cost(dist, cand)
            if c < best_cost - 1e-12:
                best_cost, best = c, cand
    return best, best_cost


def _refine(
    dist: np.ndarray,
    medoids: np.ndarray,
    pair_swaps: bool,
    trace: list[float] | None,
) -> tuple[np.ndarray, float]:
    cost = _assignment_cost(dist, medoids)
    if trace is not None:
        trace.append(cost)
    for _ in range(_PAM_MAX_ITER):
        improved = False

        # alternating update: per-cluster best representative
        assign = dist[:, medoids].argmin(axis=1)
        new_medoids = medoids.copy()
        for ci in range(len(medoids)):
            members = np.where(assign == ci)[0]
            if members.size == 0:
                continue
            inner = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids[ci] = members[int(np.argmin(inner))]
        new_medoids = np.array(sorted(set(new_medoids.tolist())))
        if new_medoids.size == medoids.size:
            new_cost = _assignment_cost(dist, new_medoids)
            if new_cost < cost - 1e-12:
                medoids, cost, improved = new_medoids, new_cost, True
                if trace is not None:
                    trace.append(cost)

        # PAM swap: best single-medoid replacement
        swap, swap_cost = _best_single_swap(dist, medoids, cost)
        if swap is not None:
            medoids, cost, improved = swap, swap_cost, True
            if trace is not None:
                trace.append(cost)

        # escape single-swap local optima via pair swaps when affordable
        if not improved and pair_swaps:
            swap, swap_cost = _best_pair_swap(dist, medoids, cost)
            if swap is not None:
                medoids, cost, improved = swap, swap_cost, True
                if trace is not None:
                    trace.append(cost)

        if not improved:
            break
    return medoids, cost


def kmedoids(
    points: np.ndarray | list,
    k: int,
    seed: int = 0,
    trace: list[float] | None = None,
) -> tuple[list[int], float]:
    """Cluster points into k medoids, returning (sorted indices, total cost).

    Cost is the sum over points of the Euclidean distance to the nearest
    medoid. Greedy initialization (seeded farthest-point start plus a
    deterministic BUILD start, and every farthest-point start on small
    inputs) is refined by alternating assignment/update plus
    best-improvement PAM swaps until no move improves; small inputs also get
    a pair-swap pass so the search reliably reaches the global optimum
    there. Deterministic for a fixed seed; ties break toward lower indices.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds number of points n={n}")

    dist = _pairwise_distances(pts)
    rng = np.random.default_rng(seed)

    pair_budget = (k * (n - k)) ** 2 <= _PAIR_SWAP_BUDGET
    starts = [_farthest_init(dist, k, int(rng.integers(n))), _build_init(dist, k)]
    if n <= 12:
        starts.extend(_farthest_init(dist, k, f) for f in range(n))

    best_medoids, best_cost, best_trace = None, np.inf, []
    for start in starts:
        local_trace: list[float] = []
        medoids, cost = _refine(dist, start, pair_budget, local_trace)
        if cost < best_cost - 1e-12:
            best_medoids, best_cost, best_trace = medoids, cost, local_trace
    if trace is not None:
        trace.extend(best_trace)  # the winning start's (non-increasing) trajectory
    return [int(m) for m in np.sort(best_medoids)], float(best_cost)


def kmedoids_bruteforce(points: np.ndarray | list, k: int) -> tuple[list[int], float]:
    """Exact minimum-cost medoid set by exhaustive enumeration (oracle)."""
    from itertools import combinations

    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k > n:
        raise KTooLarge(f"k={k} exceeds number of points n={n}")
    dist = _pairwise_distances(pts)
    best_cost, best = np.inf, None
    for combo in combinations(range(n), k):
        c = _assignment_cost(dist, np.array(combo))
        if c < best_cost - 1e-15:
            best_cost, best = c, combo
    return list(best), float(best_cost)


# ---------------------------------------------------------------------------
# Part extraction and training-set sampling
# ---------------------------------------------------------------------------


def extract_parts(
    record: FontRecord,
    k: int = 26,
    part_size: int = 32,
    seed: int = 0,
) -> list[Part]:
    """Extract up to k representative parts from a font.

    Keypoints are pooled over all glyphs, their descriptors clustered with
    K-medoids, and a part_size patch is cropped around each medoid keypoint
    (zero-padded at image borders). If the font yields fewer keypoints than
    k, the part count shrinks to match. Deterministic for fixed inputs.
    """
    if part_size not in VALID_PART_SIZES:
        raise ValueError(f"part_size must be in {VALID_PART_SIZES}, got {part_size}")
    if part_size > record.size:
        raise ValueError(f"part_size {part_size} exceeds glyph size {record.size}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    keypoints = detect_keypoints(record, patch_size=part_size, min_count=k)
    k_eff = min(k, len(keypoints))
    descriptors = np.stack([kp.descriptor for kp in keypoints]).astype(np.float64)
    medoid_indices, _ = kmedoids(descriptors, k_eff, seed=seed)

    parts = []
    for idx in medoid_indices:  # already strictly increasing
        kp = keypoints[idx]
        cx, cy = int(round(kp.x)), int(round(kp.y))
        patch = crop_patch(record.glyphs[kp.source_char].pixels, cx, cy, part_size)
        parts.append(
            Part(
                patch=patch,
                center=(cx, cy),
                source_char=kp.source_char,
                font_id=record.font_id,
                medoid_index=idx,
                scale=kp.scale,
            )
        )
    return parts


def sample_training_set(parts: list[Part], rng: np.random.Generator) -> PartSet:
    """Draw a uniformly sized (1..min(8, n)) subset without replacement."""
    if not parts:
        raise ValueError("cannot sample from an empty part list")
    hi = min(8, len(parts))
    size = int(rng.integers(1, hi + 1))
    chosen = rng.choice(len(parts), size=size, replace=False)
    return PartSet([parts[int(i)] for i in chosen], font_id=parts[0].font_id)


def sample_disjoint_pair(
    parts: list[Part], rng: np.random.Generator
) -> tuple[PartSet, PartSet]:
    """Two independent subset draws from one font, disjoint when possible."""
    n = len(parts)
    if n == 0:
        raise ValueError("cannot sample from an empty part list")
    hi = min(8, n)
    s1 = int(rng.integers(1, hi + 1))
    s2 = int(rng.integers(1, hi + 1))
    if s1 + s2 <= n:
        picked = rng.choice(n, size=s1 + s2, replace=False)
        first, second = picked[:s1], picked[s1:]
    else:
        first = rng.choice(n, size=s1, replace=False)
        second = rng.choice(n, size=s2, replace=False)
    fid = parts[0].font_id
    return (
        PartSet([parts[int(i)] for i in first], font_id=fid),
        PartSet([parts[int(i)] for i in second], font_id=fid),
    )


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def save_parts_manifest(parts: list[Part], parts_dir: str | Path, k: int) -> Path:
    """Write parts/<font_id>.json plus one PNG per patch."""
    if not parts:
        raise ValueError("no parts to save")
    parts_dir = Path(parts_dir)
    font_id = parts[0].font_id
    patch_dir = parts_dir / font_id
    patch_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(parts):
        name = f"patch_{i:02d}.png"
        Image.fromarray(_to_uint8(p.patch), mode="L").save(patch_dir / name)
        entries.append(
            {
                "center": list(p.center),
                "scale": p.scale,
                "source_char": p.source_char,
                "medoid_index": p.medoid_index,
                "patch": f"{font_id}/{name}",
            }
        )
    manifest = {
        "font_id": font_id,
        "part_size": parts[0].size,
        "K": k,
        "parts": entries,
    }
    path = parts_dir / f"{font_id}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_parts_manifest(parts_dir: str | Path, font_id: str) -> list[Part]:
    parts_dir = Path(parts_dir)
    manifest = json.loads((parts_dir / f"{font_id}.json").read_text())
    parts = []
    for e in manifest["parts"]:
        arr = np.asarray(Image.open(parts_dir / e["patch"]).convert("L"), dtype=np.float32) / 255.0
        parts.append(
            Part(
                patch=arr,
                center=tuple(e["center"]),
                source_char=e["source_char"],
                font_id=manifest["font_id"],
                medoid_index=e["medoid_index"],
                scale=e["scale"],
            )
        )
    return parts
