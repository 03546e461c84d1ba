"""Deterministic synthetic morphing-attack dataset.

Each identity is a smooth random "face": a min-max normalised sum of six
Gaussian bumps. Bona fide samples are noisy copies of one prototype;
attacks are convex pixel blends of two prototypes drawn from the same
identity pool. Identities are split into disjoint train and test pools.

All randomness comes from counter-based generators keyed by
``(seed, purpose, index...)`` so any single sample can be regenerated
without replaying the others.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .pgm import PGMError, read_pgm, write_pgm
from .tensor import ContractError, default_dtype

FORMAT_VERSION = 1
N_BUMPS = 6
BONA_FIDE, ATTACK = 1, 0
SPLITS = ("train", "test")

# purpose tags for keyed generators
_PROTO, _BF_NOISE, _PAIR, _MORPH_NOISE, _SPLIT, _FLIP = range(1, 7)


class DataConfigError(ValueError):
    pass


class DataIOError(OSError):
    pass


def keyed_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def _derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass
class IdentityPrototype:
    identity_id: int
    image: np.ndarray


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_ids: Tuple[int, ...]
    sample_id: str = ""

    def check(self) -> "Sample":
        if self.label == ATTACK and len(set(self.source_ids)) != 2:
            raise ContractError("an attack must have exactly two distinct source identities")
        if self.label == BONA_FIDE and len(self.source_ids) != 1:
            raise ContractError("a bona fide sample must have exactly one source identity")
        if self.label not in (ATTACK, BONA_FIDE):
            raise ContractError(f"label must be 0 or 1, got {self.label}")
        return self


def make_prototype(seed: int, identity_id: int, size: int) -> IdentityPrototype:
    if size < 16:
        raise DataConfigError(f"image size must be >= 16, got {size}")
    rng = keyed_rng(seed, _PROTO, identity_id)
    centers = rng.uniform(0.2, 0.8, size=(N_BUMPS, 2)) * size
    radii = rng.uniform(0.08, 0.3, size=N_BUMPS) * size
    amps = rng.uniform(-1.0, 1.0, size=N_BUMPS)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.zeros((size, size))
    for (cy, cx), r, a in zip(centers, radii, amps):
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return IdentityPrototype(identity_id, img)


def _noise(noise_seed: int, shape, std: float) -> np.ndarray:
    if std < 0:
        raise ContractError("noise_std must be >= 0")
    if std == 0:
        return np.zeros(shape)
    return keyed_rng(noise_seed).normal(0.0, std, size=shape)


def make_bona_fide(proto: IdentityPrototype, noise_seed: int, noise_std: float,
                   sample_id: str = "") -> Sample:
    img = np.clip(proto.image + _noise(noise_seed, proto.image.shape, noise_std), 0.0, 1.0)
    return Sample(img, BONA_FIDE, (proto.identity_id,), sample_id).check()


def make_morph(a: IdentityPrototype, b: IdentityPrototype, blend: float = 0.5,
               noise_seed: int = 0, noise_std: float = 0.0, sample_id: str = "",
               strict: bool = True) -> Sample:
    """Convex pixel blend ``blend*a + (1-blend)*b`` plus noise, clamped to [0, 1].

    ``strict=False`` skips the distinct-identity check (test use only); the
    result is then not a valid attack record.
    """
    if strict and a.identity_id == b.identity_id:
        raise ContractError(f"morph needs two distinct identities, got {a.identity_id} twice")
    if not 0.0 <= blend <= 1.0:
        raise ContractError(f"blend must be in [0, 1], got {blend}")
    mixed = blend * a.image + (1.0 - blend) * b.image
    img = np.clip(mixed + _noise(noise_seed, mixed.shape, noise_std), 0.0, 1.0)
    sample = Sample(img, ATTACK, (a.identity_id, b.identity_id), sample_id)
    return sample.check() if strict else sample


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Record:
    sample_id: str
    split: str
    label: int
    path: str
    source_ids: Tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    records: List[Record]
    params: Dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.params["size"])

    @property
    def version(self) -> int:
        return int(self.params.get("version", FORMAT_VERSION))

    def split(self, name: str) -> List[Record]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def identities(self, name: str) -> set:
        return {i for r in self.split(name) for i in r.source_ids}


MANIFEST_HEADER = ["sample_id", "split", "label", "path", "source_ids"]


def write_manifest(root: Path, records: Sequence[Record], params: Dict) -> None:
    with open(root / "manifest.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.sample_id, r.split, r.label, r.path, ",".join(map(str, r.source_ids))])
    with open(root / "params.json", "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(root: Union[str, os.PathLike]) -> DatasetManifest:
    root = Path(root)
    try:
        with open(root / "params.json", encoding="utf-8") as fh:
            params = json.load(fh)
        with open(root / "manifest.tsv", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read dataset at {root}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DataIOError(f"{root / 'manifest.tsv'}: unexpected header")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            sid, split, label, path, src = row
            records.append(Record(sid, split, int(label), path,
                                  tuple(int(s) for s in src.split(","))))
        except ValueError:
            raise DataIOError(f"manifest.tsv line {lineno}: malformed record") from None
    return DatasetManifest(root, records, params)


# ---------------------------------------------------------------------------
# generation


def validate_generation_args(n_identities: int, bona_fide_per_identity: int, n_morphs: int,
                             split_fraction: float, size: int, noise_std: float,
                             blend: float = 0.5) -> Tuple[int, int]:
    """Check arguments; returns (train identity count, train morph count)."""
    if n_identities < 4:
        raise DataConfigError(f"too few identities: need at least 4, got {n_identities}")
    if not 0.0 < split_fraction < 1.0:
        raise DataConfigError("split fraction must lie strictly between 0 and 1")
    if size < 16:
        raise DataConfigError(f"image size must be >= 16, got {size}")
    if bona_fide_per_identity < 0 or n_morphs < 0:
        raise DataConfigError("sample counts must be non-negative")
    if noise_std < 0:
        raise DataConfigError("noise must be >= 0")
    if not 0.0 <= blend <= 1.0:
        raise DataConfigError("blend must lie in [0, 1]")
    n_train = min(max(int(round(split_fraction * n_identities)), 2), n_identities - 2)
    m_train = int(round(split_fraction * n_morphs))
    return n_train, m_train


def generate_dataset(out_dir: Union[str, os.PathLike], seed: int = 7, n_identities: int = 40,
                     bona_fide_per_identity: int = 10, n_morphs: int = 300,
                     split_fraction: float = 0.75, size: int = 64, noise_std: float = 0.03,
                     blend: float = 0.5) -> DatasetManifest:
    """Write images, ``manifest.tsv`` and ``params.json`` under ``out_dir``.

    The output is a pure function of the arguments.
    """
    n_train, m_train = validate_generation_args(n_identities, bona_fide_per_identity, n_morphs,
                                                split_fraction, size, noise_std, blend)
    order = keyed_rng(seed, _SPLIT).permutation(n_identities)
    pools = {"train": sorted(int(i) for i in order[:n_train]),
             "test": sorted(int(i) for i in order[n_train:])}
    morph_counts = {"train": m_train, "test": n_morphs - m_train}

    root = Path(out_dir)
    try:
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {root}: {exc}") from exc

    protos = {i: make_prototype(seed, i, size) for i in range(n_identities)}
    records: List[Record] = []

    def emit(sample: Sample, split: str) -> None:
        rel = f"{split}/{sample.sample_id}.pgm"
        try:
            write_pgm(root / rel, to_uint8(sample.image))
        except OSError as exc:
            raise DataIOError(f"cannot write {root / rel}: {exc}") from exc
        records.append(Record(sample.sample_id, split, sample.label, rel, sample.source_ids))

    k = 0
    for split in SPLITS:
        pool = pools[split]
        for ident in pool:
            for j in range(bona_fide_per_identity):
                s = make_bona_fide(protos[ident], _derive_seed(seed, _BF_NOISE, ident, j),
                                   noise_std, sample_id=f"bf_{ident:04d}_{j:03d}")
                emit(s, split)
        for _ in range(morph_counts[split]):
            a, b = keyed_rng(seed, _PAIR, k).choice(pool, size=2, replace=False)
            s = make_morph(protos[int(a)], protos[int(b)], blend,
                           _derive_seed(seed, _MORPH_NOISE, k), noise_std,
                           sample_id=f"mo_{k:05d}")
            emit(s, split)
            k += 1

    params = {
        "version": FORMAT_VERSION, "seed": seed, "n_identities": n_identities,
        "bona_fide_per_identity": bona_fide_per_identity, "n_morphs": n_morphs,
        "split_fraction": split_fraction, "size": size, "noise_std": noise_std,
        "blend": blend, "n_bumps": N_BUMPS, "crop_faces": False,
        "train_identities": pools["train"], "test_identities": pools["test"],
    }
    write_manifest(root, records, params)
    return DatasetManifest(root, records, params)


# ---------------------------------------------------------------------------
# loading


def resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (edge-clamped)."""
    h, w = img.shape
    if (h, w) == (out_size, out_size):
        return img

    def axis(n_in: int):
        pos = (np.arange(out_size) + 0.5) * (n_in / out_size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def flip_decisions(flip_seed: int, indices: Sequence[int]) -> np.ndarray:
    return np.array([keyed_rng(flip_seed, _FLIP, int(i)).random() < 0.5 for i in indices], dtype=bool)


def load_batch(manifest: DatasetManifest, split: str, indices: Sequence[int],
               augment: bool = False, flip_seed: int = 0, size: Optional[int] = None,
               crop: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Read samples ``indices`` of ``split`` as an (N, 1, S, S) batch plus labels.

    Pixels are scaled to [0, 1]. With ``augment``, each sample is flipped
    horizontally with probability 1/2, decided by ``flip_seed`` and the
    sample index. ``crop`` is accepted for interface parity and is a no-op
    on synthetic data.
    """
    recs = manifest.split(split)
    out_size = size or manifest.size
    flips = flip_decisions(flip_seed, indices) if augment else np.zeros(len(indices), bool)
    batch = np.empty((len(indices), 1, out_size, out_size), dtype=default_dtype())
    labels = np.empty(len(indices), dtype=np.int64)
    for n, i in enumerate(indices):
        if not 0 <= i < len(recs):
            raise IndexError(f"index {i} outside split {split!r} of size {len(recs)}")
        rec = recs[i]
        try:
            img = read_pgm(manifest.root / rec.path).astype(np.float64) / 255.0
        except (OSError, PGMError) as exc:
            raise DataIOError(f"sample {rec.sample_id}: {exc}") from exc
        if flips[n]:
            img = img[:, ::-1]
        batch[n, 0] = resize_bilinear(img, out_size)
        labels[n] = rec.label
    return batch, labels
