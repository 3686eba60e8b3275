"""Compositional datasets: the synthetic color-shape world, manifests, embeddings.

Manifest format (UTF-8 text, tab-separated fields, ``#`` starts a comment)::

    czsl-manifest 1
    [primitives]
    name    kind    split   embedding
    red     TYPE1   TRAIN   -
    disk    TYPE2   TRAIN   0.12,-0.53,...
    [records]
    id      type1   type2   image
    0       red     disk    images.npy:0

The column header of each section must match exactly; extra or unknown
fields are rejected. ``embedding`` is ``-`` (use the synthetic provider) or
comma-separated floats. ``image`` is one of

* ``path.npy``         a single ``[3, H, W]`` float array,
* ``path.npy:<row>``   row ``<row>`` of a stacked ``[N, 3, H, W]`` array,
* ``b64:<shape>:<data>`` inline little-endian float64 bytes, base64
  encoded, ``<shape>`` written like ``3x16x16``.

Paths are relative to the manifest file. Primitive names may not contain
whitespace or ``/``.
"""
from __future__ import annotations

import base64
import enum
import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_SAMPLES_PER_COMPOSITION = 10


class Kind(str, enum.Enum):
    TYPE1 = "TYPE1"
    TYPE2 = "TYPE2"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class DatasetError(ValueError):
    """Invalid dataset contents or arguments."""


class SplitOverlapError(DatasetError):
    pass


class ManifestError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownPrimitiveError(KeyError):
    pass


@dataclass(frozen=True)
class Primitive:
    id: int
    name: str
    kind: Kind


@dataclass(frozen=True, order=True)
class Composition:
    p1: int
    p2: int


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    image: np.ndarray
    label: Composition


@dataclass
class Dataset:
    """Immutable after construction; images are stacked ``[N, 3, H, W]``."""

    primitives: list[Primitive]
    primitive_split: dict[int, Split]
    images: np.ndarray
    sample_ids: np.ndarray
    labels: list[Composition]
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.images.flags.writeable = False
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self._by_id = {p.id: p for p in self.primitives}
        self._by_name = {(p.name, p.kind): p for p in self.primitives}
        self._row = {int(s): i for i, s in enumerate(self.sample_ids)}
        if len(self._row) != len(self.sample_ids):
            raise DatasetError("duplicate sample id")
        by_comp: dict[Composition, list[int]] = defaultdict(list)
        for i, c in enumerate(self.labels):
            by_comp[c].append(int(self.sample_ids[i]))
        self.by_composition = {c: np.asarray(v, dtype=np.int64) for c, v in sorted(by_comp.items())}

    # -- lookup -----------------------------------------------------------
    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def compositions(self) -> list[Composition]:
        return list(self.by_composition)

    def primitive(self, pid: int) -> Primitive:
        try:
            return self._by_id[pid]
        except KeyError:
            raise UnknownPrimitiveError(pid) from None

    def find(self, name: str, kind: Kind | str) -> Primitive:
        try:
            return self._by_name[(name, Kind(kind))]
        except KeyError:
            raise UnknownPrimitiveError(f"{name} ({kind})") from None

    def primitives_of(self, kind: Kind, split: Split | None = None) -> list[Primitive]:
        return [p for p in self.primitives
                if p.kind == kind and (split is None or self.primitive_split[p.id] == split)]

    def split_of(self, c: Composition) -> Split:
        return self.primitive_split[c.p1]

    def compositions_in(self, split: Split) -> list[Composition]:
        return [c for c in self.by_composition if self.split_of(c) == split]

    def row(self, sample_id: int) -> int:
        return self._row[int(sample_id)]

    def rows(self, sample_ids) -> np.ndarray:
        return np.fromiter((self._row[int(s)] for s in sample_ids), dtype=np.int64)

    def label_of(self, sample_id: int) -> Composition:
        return self.labels[self._row[int(sample_id)]]

    def image(self, sample_id: int) -> np.ndarray:
        return self.images[self._row[int(sample_id)]]

    def sample(self, sample_id: int) -> Sample:
        r = self._row[int(sample_id)]
        return Sample(int(self.sample_ids[r]), self.images[r], self.labels[r])

    def comp_name(self, c: Composition) -> str:
        return f"{self._by_id[c.p1].name}/{self._by_id[c.p2].name}"

    def split_view(self, split: Split) -> "Dataset":
        keep = [i for i, c in enumerate(self.labels) if self.split_of(c) == split]
        prims = [p for p in self.primitives if self.primitive_split[p.id] == split]
        return Dataset(prims, {p.id: split for p in prims}, self.images[keep],
                       self.sample_ids[keep], [self.labels[i] for i in keep],
                       {k: v for k, v in self.embeddings.items() if k in {p.id for p in prims}})

    # -- invariants -------------------------------------------------------
    def validate(self, min_samples: int = MIN_SAMPLES_PER_COMPOSITION) -> None:
        names = set()
        for p in self.primitives:
            if (p.name, p.kind) in names:
                raise DatasetError(f"duplicate primitive {p.name} ({p.kind.value})")
            names.add((p.name, p.kind))
        validate_splits(self)
        for c, ids in self.by_composition.items():
            if self.primitive(c.p1).kind != Kind.TYPE1 or self.primitive(c.p2).kind != Kind.TYPE2:
                raise DatasetError(f"composition {c} has wrong primitive kinds")
            if len(ids) < min_samples:
                raise DatasetError(f"composition {self.comp_name(c)} has {len(ids)} samples (< {min_samples})")
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"images must be [N, 3, H, W], got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("image values must lie in [0, 1]")


def validate_splits(ds: Dataset) -> None:
    """Every composition lives in one split, and splits share no primitive."""
    for c in ds.by_composition:
        s1, s2 = ds.primitive_split[c.p1], ds.primitive_split[c.p2]
        if s1 != s2:
            raise SplitOverlapError(f"composition {ds.comp_name(c)} mixes splits {s1.value} and {s2.value}")
    seen: dict[tuple[str, Kind], Split] = {}
    for p in ds.primitives:
        key = (p.name, p.kind)
        s = ds.primitive_split[p.id]
        if key in seen and seen[key] != s:
            raise SplitOverlapError(f"primitive {p.name} ({p.kind.value}) appears in {seen[key].value} and {s.value}")
        seen[key] = s


def merge(datasets: list[Dataset]) -> Dataset:
    """Union of datasets whose primitives are keyed by (name, kind)."""
    prims: list[Primitive] = []
    split: dict[int, Split] = {}
    key_to_id: dict[tuple[str, Kind], int] = {}
    emb: dict[int, np.ndarray] = {}
    images, ids, labels = [], [], []
    for ds in datasets:
        remap = {}
        for p in ds.primitives:
            key = (p.name, p.kind)
            s = ds.primitive_split[p.id]
            if key in key_to_id:
                nid = key_to_id[key]
                if split[nid] != s:
                    raise SplitOverlapError(f"primitive {p.name} ({p.kind.value}) appears in {split[nid].value} and {s.value}")
            else:
                nid = len(prims)
                key_to_id[key] = nid
                prims.append(Primitive(nid, p.name, p.kind))
                split[nid] = s
            remap[p.id] = nid
            if p.id in ds.embeddings:
                emb[nid] = ds.embeddings[p.id]
        images.append(ds.images)
        ids.append(ds.sample_ids)
        labels.extend(Composition(remap[c.p1], remap[c.p2]) for c in ds.labels)
    return Dataset(prims, split, np.concatenate(images), np.concatenate(ids), labels, emb)


# ---------------------------------------------------------------------------
# synthetic color-shape world
# ---------------------------------------------------------------------------

def make_palette(n: int, rng: np.random.Generator, min_dist: float = 0.3) -> np.ndarray:
    """``n`` saturated RGB colors with pairwise distance >= ``min_dist`` where possible."""
    colors: list[np.ndarray] = []
    tries = 0
    while len(colors) < n:
        c = rng.uniform(0.0, 1.0, size=3)
        # keep clear of the gray background range
        if c.max() - c.min() < 0.35 or c.max() < 0.6:
            continue
        tries += 1
        if all(np.linalg.norm(c - o) >= min_dist for o in colors):
            colors.append(c)
            tries = 0
        elif tries > 2000:
            min_dist *= 0.9
            tries = 0
    return np.array(colors)


def make_masks(n: int, size: int, rng: np.random.Generator, min_frac: float = 0.15) -> np.ndarray:
    """``n`` distinct binary shape masks of ``size x size``.

    Each mask is a union of two or three random ellipses and rectangles;
    masks differ pairwise in at least ``min_frac`` of their pixels.
    """
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    masks: list[np.ndarray] = []
    while len(masks) < n:
        m = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(2, 4)):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ry, rx = rng.uniform(0.12 * size, 0.4 * size, size=2)
            if rng.random() < 0.5:
                m |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                m |= (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx * 0.7)
        area = m.mean()
        if not 0.2 <= area <= 0.7:
            continue
        if all(np.mean(m != o) >= min_frac for o in masks):
            masks.append(m)
    return np.array(masks)


def background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency gray texture in roughly [0.1, 0.5], shape ``[size, size]``."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.full((size, size), rng.uniform(0.2, 0.4))
    for _ in range(2):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        out += 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return out


def render(color: np.ndarray, mask: np.ndarray, offset: tuple[int, int], bg: np.ndarray,
           noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    size = bg.shape[0]
    img = np.repeat(bg[None], 3, axis=0)
    oy, ox = offset
    s = mask.shape[0]
    region = img[:, oy:oy + s, ox:ox + s]
    region[:, mask] = color[:, None]
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(n_type1: int, n_type2: int, samples_per_composition: int,
                       image_size: int, noise_sigma: float, seed: int, *,
                       n_splits: int = 1, jitter: bool = True) -> Dataset:
    """Color-shape world with ``n_type1`` colors and ``n_type2`` shapes per split.

    Splits (TRAIN, then VAL, TEST) get disjoint primitives; every color-shape
    pair of a split is realized with ``samples_per_composition`` images. A
    pure function of its arguments.
    """
    if n_type1 < 2 or n_type2 < 2:
        raise DatasetError("need at least 2 primitives of each kind")
    if samples_per_composition < MIN_SAMPLES_PER_COMPOSITION:
        raise DatasetError(f"samples_per_composition must be >= {MIN_SAMPLES_PER_COMPOSITION}")
    if image_size < 6:
        raise DatasetError("image_size must be >= 6")
    if not 1 <= n_splits <= 3:
        raise DatasetError("n_splits must be 1, 2 or 3")
    if noise_sigma < 0:
        raise DatasetError("noise_sigma must be >= 0")

    ss = np.random.SeedSequence(seed)
    pal_ss, mask_ss, img_ss = ss.spawn(3)
    shape_size = max(4, (3 * image_size) // 4)
    palette = make_palette(n_type1 * n_splits, np.random.default_rng(pal_ss))
    masks = make_masks(n_type2 * n_splits, shape_size, np.random.default_rng(mask_ss))
    rng = np.random.default_rng(img_ss)

    splits = [Split.TRAIN, Split.VAL, Split.TEST][:n_splits]
    prims: list[Primitive] = []
    pspl: dict[int, Split] = {}
    images, labels = [], []
    slack = image_size - shape_size
    for si, split in enumerate(splits):
        colors = []
        for k in range(n_type1):
            p = Primitive(len(prims), f"color{si * n_type1 + k:02d}", Kind.TYPE1)
            prims.append(p)
            pspl[p.id] = split
            colors.append((p, palette[si * n_type1 + k]))
        shapes = []
        for k in range(n_type2):
            p = Primitive(len(prims), f"shape{si * n_type2 + k:02d}", Kind.TYPE2)
            prims.append(p)
            pspl[p.id] = split
            shapes.append((p, masks[si * n_type2 + k]))
        for pc, color in colors:
            for ps, mask in shapes:
                for _ in range(samples_per_composition):
                    if jitter:
                        off = (int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1)))
                    else:
                        off = (slack // 2, slack // 2)
                    bg = background(image_size, rng)
                    images.append(render(color, mask, off, bg, noise_sigma, rng))
                    labels.append(Composition(pc.id, ps.id))
    ds = Dataset(prims, pspl, np.array(images), np.arange(len(images)), labels)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

class EmbeddingProvider:
    """Deterministic unit vectors per primitive, keyed on (seed, kind, name).

    Vectors supplied in a manifest override the synthetic ones.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._registered: dict[tuple[str, Kind], np.ndarray | None] = {}
        self._cache: dict[tuple[str, Kind], np.ndarray] = {}

    @classmethod
    def for_dataset(cls, ds: Dataset, dim: int = 32, seed: int = 0) -> "EmbeddingProvider":
        prov = cls(dim, seed)
        for p in ds.primitives:
            prov.register(p, ds.embeddings.get(p.id))
        return prov

    def register(self, p: Primitive, vector: np.ndarray | None = None) -> None:
        if vector is not None:
            v = np.asarray(vector, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ValueError(f"embedding for {p.name} has shape {v.shape}, expected ({self.dim},)")
            v = v / np.linalg.norm(v)
            v.flags.writeable = False
            vector = v
        self._registered[(p.name, p.kind)] = vector

    def _synthetic(self, key: tuple[str, Kind]) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}|{key[1].value}|{key[0]}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v.flags.writeable = False
        return v

    def __call__(self, p: Primitive) -> np.ndarray:
        return embedding_for(p, self)


def embedding_for(p: Primitive, provider: EmbeddingProvider) -> np.ndarray:
    key = (p.name, p.kind)
    if key not in provider._registered:
        raise UnknownPrimitiveError(f"{p.name} ({p.kind.value}) is not registered")
    override = provider._registered[key]
    if override is not None:
        return override
    v = provider._cache.get(key)
    if v is None:
        v = provider._cache[key] = provider._synthetic(key)
    return v


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

_PRIM_HEADER = ["name", "kind", "split", "embedding"]
_REC_HEADER = ["id", "type1", "type2", "image"]


def _encode_b64(img: np.ndarray) -> str:
    shape = "x".join(str(s) for s in img.shape)
    data = base64.b64encode(np.ascontiguousarray(img, dtype="<f8").tobytes()).decode("ascii")
    return f"b64:{shape}:{data}"


def _decode_payload(payload: str, base: Path, stacks: dict, lineno: int) -> np.ndarray:
    if payload.startswith("b64:"):
        try:
            _, shape, data = payload.split(":", 2)
            dims = tuple(int(s) for s in shape.split("x"))
            return np.frombuffer(base64.b64decode(data, validate=True), dtype="<f8").reshape(dims).astype(np.float64)
        except Exception as exc:
            raise ManifestError(f"bad inline image: {exc}", lineno) from None
    path, _, idx = payload.partition(":")
    full = base / path
    if not full.exists():
        raise ManifestError(f"image file {path} not found", lineno)
    if full not in stacks:
        stacks[full] = np.load(full, allow_pickle=False)
    arr = stacks[full]
    if idx:
        try:
            return np.asarray(arr[int(idx)], dtype=np.float64)
        except (ValueError, IndexError):
            raise ManifestError(f"bad image index {idx!r} for {path}", lineno) from None
    return np.asarray(arr, dtype=np.float64)


def load_manifest(path, min_samples: int = MIN_SAMPLES_PER_COMPOSITION) -> Dataset:
    """Parse and validate a manifest; errors carry the offending line number."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    section = None
    header_done = False
    saw_magic = False
    prims: list[Primitive] = []
    pspl: dict[int, Split] = {}
    emb: dict[int, np.ndarray] = {}
    key_to_id: dict[tuple[str, Kind], int] = {}
    images, ids, labels, comp_lines = [], [], [], {}
    stacks: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if not saw_magic:
            if line.split() != ["czsl-manifest", "1"]:
                raise ManifestError("expected 'czsl-manifest 1' header", lineno)
            saw_magic = True
            continue
        if line.startswith("["):
            name = line.strip()
            if name not in ("[primitives]", "[records]"):
                raise ManifestError(f"unknown section {name}", lineno)
            if name == "[records]" and section != "primitives":
                raise ManifestError("[records] must follow [primitives]", lineno)
            section = name[1:-1]
            header_done = False
            continue
        fields = line.split("\t")
        if section is None:
            raise ManifestError("content outside a section", lineno)
        expected = _PRIM_HEADER if section == "primitives" else _REC_HEADER
        if not header_done:
            unknown = [f for f in fields if f not in expected]
            if unknown:
                raise ManifestError(f"unknown field(s) {unknown} in {section} header", lineno)
            if fields != expected:
                raise ManifestError(f"{section} header must be {expected}, got {fields}", lineno)
            header_done = True
            continue
        if len(fields) != len(expected):
            raise ManifestError(f"expected {len(expected)} fields, got {len(fields)}", lineno)
        if section == "primitives":
            name, kind, split, vec = fields
            if not name or any(c.isspace() or c == "/" for c in name):
                raise ManifestError(f"invalid primitive name {name!r}", lineno)
            try:
                kind_e, split_e = Kind(kind), Split(split)
            except ValueError:
                raise ManifestError(f"bad kind/split {kind!r}/{split!r}", lineno) from None
            key = (name, kind_e)
            if key in key_to_id:
                prev = pspl[key_to_id[key]]
                if prev != split_e:
                    raise SplitOverlapError(f"line {lineno}: primitive {name} ({kind}) appears in {prev.value} and {split_e.value}")
                raise ManifestError(f"duplicate primitive {name} ({kind})", lineno)
            p = Primitive(len(prims), name, kind_e)
            key_to_id[key] = p.id
            prims.append(p)
            pspl[p.id] = split_e
            if vec != "-":
                try:
                    emb[p.id] = np.array([float(x) for x in vec.split(",")])
                except ValueError:
                    raise ManifestError(f"bad embedding vector for {name}", lineno) from None
        else:
            sid, n1, n2, payload = fields
            try:
                sid_i = int(sid)
            except ValueError:
                raise ManifestError(f"bad sample id {sid!r}", lineno) from None
            if (n1, Kind.TYPE1) not in key_to_id:
                raise ManifestError(f"unknown TYPE1 primitive {n1!r}", lineno)
            if (n2, Kind.TYPE2) not in key_to_id:
                raise ManifestError(f"unknown TYPE2 primitive {n2!r}", lineno)
            c = Composition(key_to_id[(n1, Kind.TYPE1)], key_to_id[(n2, Kind.TYPE2)])
            if pspl[c.p1] != pspl[c.p2]:
                raise SplitOverlapError(f"line {lineno}: composition {n1}/{n2} mixes splits "
                                        f"{pspl[c.p1].value} and {pspl[c.p2].value}")
            img = _decode_payload(payload, path.parent, stacks, lineno)
            if img.ndim != 3 or img.shape[0] != 3:
                raise ManifestError(f"image must be [3, H, W], got {img.shape}", lineno)
            if images and img.shape != images[0].shape:
                raise ManifestError(f"image shape {img.shape} differs from {images[0].shape}", lineno)
            if img.size and (img.min() < 0 or img.max() > 1):
                raise ManifestError("image values outside [0, 1]", lineno)
            if sid_i in comp_lines:
                raise ManifestError(f"duplicate sample id {sid_i}", lineno)
            comp_lines[sid_i] = lineno
            images.append(img)
            ids.append(sid_i)
            labels.append(c)
    if not saw_magic:
        raise ManifestError("empty manifest")
    if not images:
        raise ManifestError("manifest has no records")
    ds = Dataset(prims, pspl, np.array(images), np.array(ids), labels, emb)
    first_line = {}
    for sid, c in zip(ids, labels):
        first_line.setdefault(c, comp_lines[sid])
    for c, members in ds.by_composition.items():
        if len(members) < min_samples:
            raise ManifestError(f"composition {ds.comp_name(c)} has {len(members)} samples (< {min_samples})",
                                first_line[c])
    ds.validate(min_samples)
    return ds


def save_manifest(ds: Dataset, path, *, inline: bool = False) -> None:
    """Write ``ds`` as a manifest; stacked images go to ``<stem>_images.npy``."""
    path = Path(path)
    out = ["czsl-manifest 1", "[primitives]", "\t".join(_PRIM_HEADER)]
    for p in ds.primitives:
        vec = ds.embeddings.get(p.id)
        vs = "-" if vec is None else ",".join(repr(float(x)) for x in vec)
        out.append("\t".join([p.name, p.kind.value, ds.primitive_split[p.id].value, vs]))
    out += ["[records]", "\t".join(_REC_HEADER)]
    npy = path.with_name(path.stem + "_images.npy")
    for i, (sid, c) in enumerate(zip(ds.sample_ids, ds.labels)):
        payload = _encode_b64(ds.images[i]) if inline else f"{npy.name}:{i}"
        out.append("\t".join([str(int(sid)), ds.primitive(c.p1).name, ds.primitive(c.p2).name, payload]))
    if not inline:
        np.save(npy, np.ascontiguousarray(ds.images, dtype=np.float64), allow_pickle=False)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
