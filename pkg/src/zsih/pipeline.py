"""End-to-end training: config handling, category-coherent batch sampling,
semantic adjacency, the optimization loop and binary checkpoints."""

import io
import logging
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .data import FormatError
from .model import (  # noqa: F401  (re-exported pipeline surface)
    ModelParams,
    TripletBatch,
    forward_multimodal,
    init_params,
    params_from_arrays,
)
from .objective import AdamState, adam_step, batch_loss, estimate_gradients

logger = logging.getLogger("zsih.pipeline")

CHECKPOINT_MAGIC = b"ZSIH"
CHECKPOINT_VERSION = 1

# early stop when the trailing-window mean loss improves by less than
# CONVERGENCE_RTOL relative between consecutive windows
CONVERGENCE_WINDOW = 200
CONVERGENCE_RTOL = 1e-5


@dataclass
class ZsihConfig:
    M: int = 32
    d_f: int = 16
    gcn_hidden: int = 64
    t: float = 0.1
    N_B: int = 16
    K: int = 1
    max_iters: int = 3000
    seed: int = 0
    fusion_mode: str = "kronecker"
    use_gcn: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    grad_clip: float = 0.0

    def validate(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.N_B < 2:
            raise ValueError("N_B must be at least 2")
        if self.t <= 0:
            raise ValueError("t must be positive")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.d_f < 1 or self.gcn_hidden < 1:
            raise ValueError("layer widths must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.fusion_mode not in ("kronecker", "concat", "mfb"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")
        return self


_CONFIG_TYPES = {f.name: f.type for f in fields(ZsihConfig)}


def _coerce(key, raw):
    kind = _CONFIG_TYPES[key]
    raw = raw.strip()
    if kind == "bool" or kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r} expects a boolean, got {raw!r}")
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return raw


def parse_config(text):
    """Parse the flat ``key = value`` config format (# starts a comment)."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return ZsihConfig(**values).validate()


def format_config(config):
    lines = []
    for f in fields(ZsihConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def apply_overrides(config, overrides):
    """Return a config with string key=value overrides applied."""
    updates = {}
    for key, raw in overrides.items():
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw)
    return replace(config, **updates).validate()


# ---------------------------------------------------------------------------
# dataset view and batch sampling


class PairedDataset:
    """Per-class sketch and image feature lists with semantic vectors."""

    def __init__(self, sketches, images, semantics, classes=None):
        self.classes = sorted(classes if classes is not None
                              else set(sketches) | set(images))
        if not self.classes:
            raise ValueError("dataset has no classes")
        missing = [c for c in self.classes
                   if not sketches.get(c) or not images.get(c)]
        if missing:
            raise ValueError(
                f"classes missing a modality: {sorted(missing)}"
            )
        absent = [c for c in self.classes if c not in semantics.vectors]
        if absent:
            raise ValueError(f"classes without semantics: {sorted(absent)}")
        self.sketches = {c: sketches[c] for c in self.classes}
        self.images = {c: images[c] for c in self.classes}
        self.semantics = semantics
        shapes = {f.shape for c in self.classes
                  for f in (*self.sketches[c], *self.images[c])}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent feature shapes: {sorted(shapes)}")
        self.feat_shape = shapes.pop()

    @classmethod
    def from_stores(cls, sketch_store, image_store, semantics, classes=None):
        return cls(
            sketch_store.by_class("sketch"),
            image_store.by_class("image"),
            semantics,
            classes=classes,
        )

    @property
    def semantic_dim(self):
        return self.semantics.dim


def sample_batch(dataset, n_b, rng):
    """Draw N_B classes with replacement, then one sketch-image pair each."""
    n_classes = len(dataset.classes)
    picks = rng.integers(0, n_classes, size=n_b)
    sketch_feats, image_feats, labels = [], [], []
    for idx in picks:
        cid = dataset.classes[idx]
        sks = dataset.sketches[cid]
        ims = dataset.images[cid]
        sketch_feats.append(sks[rng.integers(0, len(sks))])
        image_feats.append(ims[rng.integers(0, len(ims))])
        labels.append(cid)
    labels = np.array(labels, dtype=np.int64)
    return TripletBatch(
        sketch_feats=np.stack(sketch_feats).astype(np.float64),
        image_feats=np.stack(image_feats).astype(np.float64),
        semantics=dataset.semantics.matrix(labels),
        labels=labels,
    )


def build_adjacency(semantics, t):
    """Gaussian-kernel in-batch adjacency: A[j,k] = exp(-|s_j - s_k|^2 / t)."""
    if t <= 0:
        raise ValueError(f"adjacency bandwidth t must be positive, got {t}")
    sem = np.asarray(semantics, dtype=np.float64)
    diff = sem[:, None, :] - sem[None, :, :]
    sq = (diff * diff).sum(axis=2)
    adj = np.exp(-sq / t)
    np.fill_diagonal(adj, 1.0)
    return adj


# ---------------------------------------------------------------------------
# training


def train_step(batch, params, opt_state, adj, eps, grad_clip=0.0):
    """One optimization step; returns the loss breakdown."""
    loss, breakdown = batch_loss(batch, params, adj, eps)
    if not np.isfinite(breakdown.total):
        raise FloatingPointError(
            f"non-finite loss {breakdown.total!r} "
            f"(entropy={breakdown.entropy_term!r}, "
            f"decode={breakdown.decode_term!r}, "
            f"code_reg={breakdown.code_reg_term!r})"
        )
    grads = estimate_gradients(loss, params)
    if grad_clip > 0.0:
        grads = {k: np.clip(g, -grad_clip, grad_clip) for k, g in grads.items()}
    adam_step(params, grads, opt_state)
    return breakdown


@dataclass
class Checkpoint:
    config: ZsihConfig
    params: dict       # name -> float64 array
    opt_step: int
    opt_m: dict
    opt_v: dict
    iteration: int
    rng_state: dict    # PCG64 bit-generator state

    def build_params(self):
        return params_from_arrays(self.config, self.params)

    def build_opt_state(self):
        cfg = self.config
        return AdamState(
            step=self.opt_step,
            m={k: v.copy() for k, v in self.opt_m.items()},
            v={k: v.copy() for k, v in self.opt_v.items()},
            lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps_hat=cfg.eps_hat,
        )


def _snapshot(config, params, opt_state, iteration, rng):
    return Checkpoint(
        config=config,
        params={k: n.data.copy() for k, n in params.named().items()},
        opt_step=opt_state.step,
        opt_m={k: v.copy() for k, v in opt_state.m.items()},
        opt_v={k: v.copy() for k, v in opt_state.v.items()},
        iteration=iteration,
        rng_state=rng.bit_generator.state,
    )


def train(config, dataset, metrics_out=None, resume=None):
    """Run the full optimization loop and return the final checkpoint.

    Stops at ``max_iters`` or once the trailing-window mean loss stops
    improving (window bookkeeping is per session, so a resumed run warms
    its window from scratch).  A non-finite loss or gradient aborts with
    the last good state.
    """
    config.validate()
    length, channels = dataset.feat_shape
    d_s = dataset.semantic_dim

    if resume is not None:
        # max_iters may be raised to extend a finished run; everything else
        # must match the checkpoint exactly
        if replace(resume.config, max_iters=0) != replace(config, max_iters=0):
            raise ValueError("resume checkpoint config does not match")
        params = resume.build_params()
        opt_state = resume.build_opt_state()
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    else:
        rng = np.random.default_rng(config.seed)
        params = init_params(config, channels, d_s, rng)
        opt_state = AdamState.init(
            params, lr=config.lr, beta1=config.beta1,
            beta2=config.beta2, eps_hat=config.eps_hat,
        )
        start = 0

    close_metrics = False
    if isinstance(metrics_out, (str, bytes)) or hasattr(metrics_out, "__fspath__"):
        metrics_out = open(metrics_out, "a", encoding="utf-8")
        close_metrics = True

    history = []
    iteration = start
    try:
        for step in range(start + 1, config.max_iters + 1):
            batch = sample_batch(dataset, config.N_B, rng)
            adj = build_adjacency(batch.semantics, config.t)
            eps = rng.random((config.K, config.N_B, config.M))
            try:
                breakdown = train_step(
                    batch, params, opt_state, adj, eps,
                    grad_clip=config.grad_clip,
                )
            except FloatingPointError as err:
                logger.error("aborting at iteration %d: %s", step, err)
                break
            iteration = step
            if metrics_out is not None:
                metrics_out.write(
                    f"{step}\t{breakdown.total!r}\t{breakdown.entropy_term!r}"
                    f"\t{breakdown.decode_term!r}\t{breakdown.code_reg_term!r}\n"
                )
            history.append(breakdown.total)
            if len(history) >= 2 * CONVERGENCE_WINDOW:
                prev = float(np.mean(history[-2 * CONVERGENCE_WINDOW:-CONVERGENCE_WINDOW]))
                cur = float(np.mean(history[-CONVERGENCE_WINDOW:]))
                if prev - cur < CONVERGENCE_RTOL * abs(prev):
                    logger.info("converged at iteration %d", step)
                    break
    finally:
        if close_metrics:
            metrics_out.close()

    return _snapshot(config, params, opt_state, iteration, rng)


# ---------------------------------------------------------------------------
# checkpoint format


def _pack_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    parts = [struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def _read_array(f):
    (ndim,) = struct.unpack("<B", _read(f, 1))
    shape = tuple(struct.unpack("<I", _read(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read(f, count * 8), dtype="<f8").reshape(shape)
    return data.astype(np.float64)


def _read(f, n):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated checkpoint at offset {f.tell() - len(data)}"
        )
    return data


def checkpoint_bytes(ckpt):
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg_text = format_config(ckpt.config).encode("utf-8")
    out.write(struct.pack("<I", len(cfg_text)))
    out.write(cfg_text)
    out.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(_pack_array(arr))
    out.write(struct.pack("<Q", ckpt.opt_step))
    for name in ckpt.params:
        out.write(_pack_array(ckpt.opt_m[name]))
        out.write(_pack_array(ckpt.opt_v[name]))
    out.write(struct.pack("<Q", ckpt.iteration))
    state = ckpt.rng_state["state"]
    out.write(struct.pack("<BI", ckpt.rng_state.get("has_uint32", 0),
                          ckpt.rng_state.get("uinteger", 0)))
    out.write(int(state["state"]).to_bytes(16, "little"))
    out.write(int(state["inc"]).to_bytes(16, "little"))
    return out.getvalue()


def save_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = _read(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read(f, 2))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read(f, 4))
        config = parse_config(_read(f, cfg_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", _read(f, 4))
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read(f, 2))
            name = _read(f, name_len).decode("utf-8")
            params[name] = _read_array(f)
        (opt_step,) = struct.unpack("<Q", _read(f, 8))
        opt_m, opt_v = {}, {}
        for name in params:
            opt_m[name] = _read_array(f)
            opt_v[name] = _read_array(f)
        (iteration,) = struct.unpack("<Q", _read(f, 8))
        has_uint32, uinteger = struct.unpack("<BI", _read(f, 5))
        state = int.from_bytes(_read(f, 16), "little")
        inc = int.from_bytes(_read(f, 16), "little")
        if f.read(1):
            raise FormatError("unexpected trailing bytes in checkpoint")
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": int(has_uint32),
        "uinteger": int(uinteger),
    }
    return Checkpoint(
        config=config, params=params, opt_step=opt_step,
        opt_m=opt_m, opt_v=opt_v, iteration=iteration, rng_state=rng_state,
    )
