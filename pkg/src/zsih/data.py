"""Dataset ingestion and generation: binary feature-map files, word-vector
text files, zero-shot class splits, and a synthetic generator whose
semantic geometry is informative by construction.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger("zsih.data")

FEATURE_MAGIC = b"ZSFT"
FEATURE_VERSION = 1
MODALITY_CODES = {"sketch": 0, "image": 1}
MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}

# class latents live in a space of at most this many dimensions so that a
# handful of seen classes can span it
LATENT_DIM_CAP = 8


class FormatError(ValueError):
    """A binary or text input file does not match its declared format."""


@dataclass
class FeatureItem:
    item_id: int
    class_id: int
    modality: str
    feat: np.ndarray  # [L, C] float32


@dataclass
class FeatureStore:
    items: list = field(default_factory=list)
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        shapes = {}
        for item in self.items:
            if item.modality not in MODALITY_CODES:
                raise ValueError(f"unknown modality {item.modality!r}")
            shape = shapes.setdefault(item.modality, item.feat.shape)
            if item.feat.shape != shape:
                raise ValueError(
                    f"inconsistent feature shape {item.feat.shape} for item "
                    f"{item.item_id} (expected {shape})"
                )
            if item.class_id not in self.class_names:
                raise ValueError(f"class id {item.class_id} has no name")

    def classes(self, modality=None):
        return sorted(
            {i.class_id for i in self.items
             if modality is None or i.modality == modality}
        )

    def by_class(self, modality):
        out = {}
        for item in self.items:
            if item.modality == modality:
                out.setdefault(item.class_id, []).append(item.feat)
        return out

    def modality_items(self, modality):
        return [i for i in self.items if i.modality == modality]


def save_features(store, path, modality):
    """Write one modality of a store in the ZSFT binary layout."""
    items = store.modality_items(modality)
    if items:
        length, channels = items[0].feat.shape
    else:
        length, channels = 0, 0
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HBIIQ", FEATURE_VERSION, MODALITY_CODES[modality],
                            length, channels, len(items)))
        for item in items:
            f.write(struct.pack("<QI", item.item_id, item.class_id))
            f.write(np.ascontiguousarray(item.feat, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file while reading {what}: wanted {n} bytes at offset "
            f"{f.tell() - len(data)}, got {len(data)}"
        )
    return data


def load_features(path):
    """Read a ZSFT feature file into a store.

    Class names are not stored in the file; they default to the decimal
    class id and may be remapped through the synonym file when resolving
    semantics.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(
                f"bad magic {magic!r} at offset 0 (expected {FEATURE_MAGIC!r})"
            )
        version, mod_code, length, channels, count = struct.unpack(
            "<HBIIQ", _read_exact(f, 19, "header")
        )
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        if mod_code not in MODALITY_NAMES:
            raise FormatError(f"unknown modality code {mod_code}")
        modality = MODALITY_NAMES[mod_code]
        items = []
        names = {}
        map_bytes = length * channels * 4
        for idx in range(count):
            try:
                item_id, class_id = struct.unpack(
                    "<QI", _read_exact(f, 12, f"record {idx} header")
                )
                raw = _read_exact(f, map_bytes, f"record {idx} feature map")
            except FormatError as err:
                raise FormatError(f"record {idx}: {err}") from None
            feat = np.frombuffer(raw, dtype="<f4").reshape(length, channels)
            items.append(FeatureItem(item_id, class_id, modality, feat))
            names.setdefault(class_id, str(class_id))
        trailing = f.read(1)
        if trailing:
            raise FormatError(
                f"unexpected trailing bytes at offset {f.tell() - 1}"
            )
    return FeatureStore(items=items, class_names=names)


# ---------------------------------------------------------------------------
# semantic vectors


@dataclass
class SemanticTable:
    vectors: dict  # class id -> [d_s] float64

    @property
    def dim(self):
        return len(next(iter(self.vectors.values())))

    def matrix(self, labels):
        return np.stack([self.vectors[int(c)] for c in labels])


def read_semantic_file(path):
    """Parse a word-vector text file into name -> vector, last entry wins."""
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            name = parts[0]
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise FormatError(
                    f"{path}:{line_no}: non-numeric semantic component"
                ) from None
            if vec.size == 0:
                raise FormatError(f"{path}:{line_no}: class {name!r} has no vector")
            if name in table:
                logger.warning("duplicate semantic entry %r, keeping the last", name)
            table[name] = vec
    dims = {v.size for v in table.values()}
    if len(dims) > 1:
        raise FormatError(f"{path}: inconsistent semantic dimensions {sorted(dims)}")
    return table


def write_semantic_file(table, path):
    with open(path, "w", encoding="utf-8") as f:
        for name, vec in table.items():
            f.write(name + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def read_synonyms(path):
    """Tab-separated missing_name -> substitute_name mapping."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            try:
                missing, substitute = line.split("\t")
            except ValueError:
                raise FormatError(
                    f"{path}:{line_no}: expected 'missing<TAB>substitute'"
                ) from None
            out[missing] = substitute
    return out


def load_semantics(path, class_names, synonyms_path=None):
    """Resolve a semantic vector for every dataset class.

    Names missing from the vector file are retried through the synonym
    mapping; anything still unresolved is reported in one error.
    """
    raw = read_semantic_file(path)
    synonyms = read_synonyms(synonyms_path) if synonyms_path else {}
    vectors = {}
    missing = []
    for class_id, name in sorted(class_names.items()):
        key = name if name in raw else synonyms.get(name)
        if key is None or key not in raw:
            missing.append(name)
            continue
        vectors[class_id] = raw[key]
    if missing:
        raise ValueError(
            "no semantic vector for classes (after synonym mapping): "
            + ", ".join(sorted(missing))
        )
    return SemanticTable(vectors=vectors)


# ---------------------------------------------------------------------------
# zero-shot split


@dataclass(frozen=True)
class ZeroShotSplit:
    seen: frozenset
    unseen: frozenset
    seed: int


def make_split(class_ids, n_unseen, seed):
    """Uniformly sample the unseen class set; the rest are seen."""
    ids = sorted(int(c) for c in class_ids)
    if not 0 < n_unseen < len(ids):
        raise ValueError(
            f"n_unseen must be in (0, {len(ids)}), got {n_unseen}"
        )
    rng = np.random.default_rng(seed)
    unseen = rng.choice(ids, size=n_unseen, replace=False)
    unseen = frozenset(int(c) for c in unseen)
    seen = frozenset(ids) - unseen
    return ZeroShotSplit(seen=seen, unseen=unseen, seed=seed)


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# seed {split.seed}\n")
        for cid in sorted(split.seen):
            f.write(f"seen\t{cid}\n")
        for cid in sorted(split.unseen):
            f.write(f"unseen\t{cid}\n")


def load_split(path):
    seed = 0
    seen, unseen = set(), set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            try:
                kind, cid = line.split("\t")
                cid = int(cid)
            except ValueError:
                raise FormatError(f"{path}:{line_no}: expected 'seen|unseen<TAB>id'") from None
            if kind == "seen":
                seen.add(cid)
            elif kind == "unseen":
                unseen.add(cid)
            else:
                raise FormatError(f"{path}:{line_no}: unknown split kind {kind!r}")
    return ZeroShotSplit(seen=frozenset(seen), unseen=frozenset(unseen), seed=seed)


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(n_classes, per_class, length, channels, d_s, noise, seed):
    """Random desk-scale dataset with informative semantic structure.

    Semantic vectors are drawn on the unit sphere; class latents are a
    shared linear map of them, so semantically near classes get near
    latents and the in-batch adjacency carries real signal.
    """
    if min(n_classes, per_class, length, channels, d_s) <= 0:
        raise ValueError("all generator counts must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    sem = rng.normal(size=(n_classes, d_s))
    sem /= np.linalg.norm(sem, axis=1, keepdims=True)
    store = synth_from_semantics(sem, per_class, length, channels, noise, rng)
    table = SemanticTable(vectors={i: sem[i].copy() for i in range(n_classes)})
    return store, table


def synth_from_semantics(sem, per_class, length, channels, noise, rng):
    """Generate items for given semantic vectors (one class per row)."""
    n_classes, d_s = sem.shape
    d_lat = min(d_s, LATENT_DIM_CAP)
    # orthonormal maps: the latent projection is an isometry up to the cap
    # and each modality embedding preserves latent distances exactly, so
    # semantic structure survives into the features
    q_lat, _ = np.linalg.qr(rng.normal(size=(d_s, d_lat)))
    latents = sem @ q_lat
    protos = {}
    for modality in ("sketch", "image"):
        embed, _ = np.linalg.qr(rng.normal(size=(channels, d_lat)))
        raw = latents @ embed.T
        # one shared scale per modality keeps the map linear in the latent
        # (per-class normalization would distort the distance structure)
        protos[modality] = raw / np.mean(np.linalg.norm(raw, axis=1))
    items = []
    item_id = 0
    for cid in range(n_classes):
        for modality in ("sketch", "image"):
            proto = protos[modality][cid]
            for _ in range(per_class):
                jitter = noise * rng.normal(size=(length, channels)) / np.sqrt(channels)
                feat = (proto[None, :] + jitter).astype(np.float32)
                items.append(FeatureItem(item_id, cid, modality, feat))
                item_id += 1
    names = {i: str(i) for i in range(n_classes)}
    return FeatureStore(items=items, class_names=names)
