"""Synthetic two-modality classification task with controllable spurious channels.

Layout of one sample (every block is ``block_dim`` wide)::

    q = [prefix | q_core | q_spur]
    v = [v_core | v_spur | irrelevant | cross_v]

The label is ``(a_q + a_v) mod k`` where ``a_q`` and ``a_v`` are the latent
attributes written into the two core blocks, so neither modality alone
determines it. Spurious blocks copy the label's prototype with probability
``rho`` at training/ID time. The cross-modal channel lives in the second half
of ``q_spur`` and of ``cross_v``: the two halves are ``r`` and ``P[c] - r``
for a large random share ``r``, so only their sum carries the class.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, InvalidInputError, UnsupportedVersionError

DATA_FORMAT_VERSION = 1
DATA_MAGIC = "CAUSAL-INFOMIN-SPLIT"
SPLIT_NAMES = ("train", "id_test", "ood_test", "cf_test")

# column order of the per-sample latent record
LATENT_COLUMNS = ("a_q", "a_v", "spur_prefix", "spur_q", "spur_v", "spur_cross")


@dataclass(frozen=True)
class BiasSpec:
    num_classes: int = 8
    block_dim: int = 16
    rho_q: float = 0.9
    rho_v: float = 0.9
    rho_cross: float = 0.9
    noise_sigma: float = 0.3
    n_train: int = 8000
    n_test: int = 2000
    seed: int = 0
    proto_scale: float = 1.5
    share_sigma: float = 0.5
    cf_shift: float = 1.0
    ood_mode: str = "agnostic"
    coupled: bool = True

    def validate(self) -> None:
        k = self.num_classes
        if k < 2:
            raise InvalidInputError("num_classes must be >= 2")
        if self.block_dim < 2:
            raise InvalidInputError("block_dim must be >= 2")
        for name in ("rho_q", "rho_v", "rho_cross"):
            rho = getattr(self, name)
            if not (1.0 / k - 1e-12 <= rho <= 1.0):
                raise InvalidInputError(f"{name}={rho} outside [1/k, 1]")
        if not self.noise_sigma > 0:
            raise InvalidInputError("noise_sigma must be positive")
        if self.n_train < k or self.n_test < k:
            raise InvalidInputError("n_train and n_test must be >= num_classes")
        if self.cf_shift == 0:
            raise InvalidInputError("cf_shift must be nonzero")
        if self.ood_mode not in ("agnostic", "anti"):
            raise InvalidInputError(f"unknown ood_mode {self.ood_mode!r}")

    @property
    def q_dim(self) -> int:
        return 3 * self.block_dim

    @property
    def v_dim(self) -> int:
        return 4 * self.block_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown BiasSpec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def unbiased(cls, **kw) -> "BiasSpec":
        k = kw.get("num_classes", cls.num_classes)
        return cls(**{**kw, "rho_q": 1.0 / k, "rho_v": 1.0 / k, "rho_cross": 1.0 / k})


@dataclass(frozen=True)
class Sample:
    q: np.ndarray
    v: np.ndarray
    label: int
    group_id: int


@dataclass
class Split:
    """Column-wise storage for a list of samples."""

    q: np.ndarray
    v: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    latents: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.q[i], self.v[i], int(self.labels[i]), int(self.groups[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.q[idx], self.v[idx], self.labels[idx], self.groups[idx], self.latents[idx])

    def copy(self) -> "Split":
        return Split(self.q.copy(), self.v.copy(), self.labels.copy(), self.groups.copy(), self.latents.copy())

    def latent(self, name: str) -> np.ndarray:
        return self.latents[:, LATENT_COLUMNS.index(name)]

    def equals(self, other: "Split") -> bool:
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.q, self.v, self.labels, self.groups, self.latents)


@dataclass
class DatasetBundle:
    train: Split
    id_test: Split
    ood_test: Split
    cf_test: Split
    spec: BiasSpec

    def splits(self) -> dict[str, Split]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}


# block slices --------------------------------------------------------------


def q_slices(spec: BiasSpec) -> dict[str, slice]:
    b = spec.block_dim
    return {"prefix": slice(0, b), "core": slice(b, 2 * b), "spur": slice(2 * b, 3 * b)}


def v_slices(spec: BiasSpec) -> dict[str, slice]:
    b = spec.block_dim
    return {
        "core": slice(0, b),
        "spur": slice(b, 2 * b),
        "irrelevant": slice(2 * b, 3 * b),
        "cross": slice(3 * b, 4 * b),
    }


# generation ----------------------------------------------------------------


def _prototypes(rng: np.random.Generator, k: int, dim: int, scale: float) -> np.ndarray:
    """k prototype rows of norm ``scale``; orthonormal when k <= dim."""
    g = rng.standard_normal((dim, max(k, 1)))
    if k <= dim:
        qmat, _ = np.linalg.qr(g)
        protos = qmat[:, :k].T
    else:
        protos = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    return scale * protos


@dataclass
class _Prototypes:
    prefix: np.ndarray
    q_core: np.ndarray
    q_spur: np.ndarray  # lives in the first half of the q_spur block
    v_core: np.ndarray
    v_spur: np.ndarray
    cross: np.ndarray  # lives in the second half of q_spur / cross_v


def _make_prototypes(spec: BiasSpec, rng: np.random.Generator) -> _Prototypes:
    k, b, s = spec.num_classes, spec.block_dim, spec.proto_scale
    half = b // 2
    return _Prototypes(
        prefix=_prototypes(rng, k, b, s),
        q_core=_prototypes(rng, k, b, s),
        q_spur=_prototypes(rng, k, half, s),
        v_core=_prototypes(rng, k, b, s),
        v_spur=_prototypes(rng, k, b, s),
        cross=_prototypes(rng, k, b - half, s),
    )


def _channel(rng: np.random.Generator, labels: np.ndarray, rho: float, k: int) -> np.ndarray:
    """Class encoded by a spurious channel: the label w.p. rho, else a uniform other class."""
    n = labels.shape[0]
    keep = rng.random(n) < rho
    offset = rng.integers(1, k, size=n)
    return np.where(keep, labels, (labels + offset) % k)


def _coupled_channels(rng: np.random.Generator, labels: np.ndarray, rhos, k: int) -> list[np.ndarray]:
    """Channels sharing one uniform draw and one decoy class.

    Channel j agrees with the label iff ``u < rho_j``, so its marginal agreement
    rate is still ``rho_j``; disagreeing channels all point at the same decoy.
    """
    n = labels.shape[0]
    u = rng.random(n)
    decoy = (labels + rng.integers(1, k, size=n)) % k
    return [np.where(u < rho, labels, decoy) for rho in rhos]


def _anti_channel(rng: np.random.Generator, labels: np.ndarray, k: int) -> np.ndarray:
    return (labels + rng.integers(1, k, size=labels.shape[0])) % k


def _generate_split(
    spec: BiasSpec, protos: _Prototypes, rng: np.random.Generator, n: int, biased: bool
) -> Split:
    k, b, sigma = spec.num_classes, spec.block_dim, spec.noise_sigma
    half = b // 2
    a_q = rng.integers(0, k, size=n)
    a_v = rng.integers(0, k, size=n)
    labels = (a_q + a_v) % k
    rhos = (spec.rho_q, spec.rho_q, spec.rho_v, spec.rho_cross)
    if biased and spec.coupled:
        chans = _coupled_channels(rng, labels, rhos, k)
    elif biased:
        chans = [_channel(rng, labels, rho, k) for rho in rhos]
    elif spec.ood_mode == "anti":
        chans = [_anti_channel(rng, labels, k) for _ in range(4)]
    else:
        chans = [rng.integers(0, k, size=n) for _ in range(4)]
    c_pre, c_q, c_v, c_x = chans

    share = rng.normal(0.0, spec.share_sigma, size=(n, b - half))
    q_spur = np.zeros((n, b))
    q_spur[:, :half] = protos.q_spur[c_q]
    q_spur[:, half:] = share
    cross_v = np.zeros((n, b))
    cross_v[:, half:] = protos.cross[c_x] - share

    q = np.concatenate([protos.prefix[c_pre], protos.q_core[a_q], q_spur], axis=1)
    v = np.concatenate([protos.v_core[a_v], protos.v_spur[c_v], np.zeros((n, b)), cross_v], axis=1)
    q = q + rng.normal(0.0, sigma, size=q.shape)
    v = v + rng.normal(0.0, sigma, size=v.shape)
    latents = np.stack([a_q, a_v, c_pre, c_q, c_v, c_x], axis=1).astype(np.int64)
    return Split(q, v, labels.astype(np.int64), c_pre.astype(np.int64), latents)


def make_counterfactual(split: Split, spec: BiasSpec, seed: int | None = None) -> Split:
    """Copy of ``split`` whose irrelevant block is redrawn from N(cf_shift, sigma)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed if seed is None else seed, 7]))
    out = split.copy()
    sl = v_slices(spec)["irrelevant"]
    out.v[:, sl] = rng.normal(spec.cf_shift, spec.noise_sigma, size=(len(split), spec.block_dim))
    return out


def make_dataset(spec: BiasSpec) -> DatasetBundle:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    proto_ss, train_ss, id_ss, ood_ss, cf_ss = root.spawn(5)
    protos = _make_prototypes(spec, np.random.default_rng(proto_ss))
    train = _generate_split(spec, protos, np.random.default_rng(train_ss), spec.n_train, biased=True)
    id_test = _generate_split(spec, protos, np.random.default_rng(id_ss), spec.n_test, biased=True)
    ood_test = _generate_split(spec, protos, np.random.default_rng(ood_ss), spec.n_test, biased=False)
    cf_seed = int(cf_ss.generate_state(1)[0])
    cf_test = make_counterfactual(id_test, spec, seed=cf_seed)
    return DatasetBundle(train, id_test, ood_test, cf_test, spec)


def mask_to_spurious(sample, spec: BiasSpec):
    """Zero the core and spurious parts of q, keeping only the prefix block.

    Accepts a single :class:`Sample` or a whole :class:`Split`.
    """
    sl = q_slices(spec)
    if isinstance(sample, Split):
        out = sample.copy()
        out.q[:, sl["core"]] = 0.0
        out.q[:, sl["spur"]] = 0.0
        return out
    q = sample.q.copy()
    q[sl["core"]] = 0.0
    q[sl["spur"]] = 0.0
    return replace(sample, q=q)


def conflict_indices(split: Split) -> np.ndarray:
    """Indices where every spurious channel and the prefix disagree with the label."""
    chans = split.latents[:, 2:]
    return np.flatnonzero((chans != split.labels[:, None]).all(axis=1))


# serialization -------------------------------------------------------------
#
# A split file is a text header followed by a binary body:
#
#   CAUSAL-INFOMIN-SPLIT\n
#   format_version=1\n
#   <key>=<json value>\n        one line per BiasSpec field, then n, q_dim, v_dim
#   end_header\n
#   n records of: q (q_dim float64) | v (v_dim float64) | label int64 |
#                 group int64 | latents (6 int64), all little-endian


def _record_dtype(q_dim: int, v_dim: int) -> np.dtype:
    return np.dtype(
        [("q", "<f8", (q_dim,)), ("v", "<f8", (v_dim,)), ("label", "<i8"), ("group", "<i8"),
         ("latents", "<i8", (len(LATENT_COLUMNS),))]
    )


def split_to_bytes(split: Split, spec: BiasSpec) -> bytes:
    buf = io.BytesIO()
    header = [DATA_MAGIC, f"format_version={DATA_FORMAT_VERSION}"]
    header += [f"{k}={json.dumps(v)}" for k, v in spec.to_dict().items()]
    header += [f"n={len(split)}", f"q_dim={split.q.shape[1]}", f"v_dim={split.v.shape[1]}", "end_header"]
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    rec = np.zeros(len(split), dtype=_record_dtype(split.q.shape[1], split.v.shape[1]))
    rec["q"], rec["v"], rec["label"], rec["group"], rec["latents"] = (
        split.q, split.v, split.labels, split.groups, split.latents)
    buf.write(rec.tobytes())
    return buf.getvalue()


def split_from_bytes(data: bytes) -> tuple[Split, BiasSpec]:
    end = data.find(b"end_header\n")
    if not data.startswith(DATA_MAGIC.encode()) or end < 0:
        raise CorruptFileError("not a split file or header truncated")
    lines = data[:end].decode("ascii").strip().split("\n")[1:]
    meta = dict(line.split("=", 1) for line in lines)
    version = int(meta.pop("format_version", -1))
    if version != DATA_FORMAT_VERSION:
        raise UnsupportedVersionError(f"split format version {version} not supported")
    n, q_dim, v_dim = (int(meta.pop(key)) for key in ("n", "q_dim", "v_dim"))
    spec = BiasSpec.from_dict({key: json.loads(val) for key, val in meta.items()})
    body = data[end + len(b"end_header\n"):]
    dt = _record_dtype(q_dim, v_dim)
    if len(body) != n * dt.itemsize:
        raise CorruptFileError(f"expected {n * dt.itemsize} body bytes, found {len(body)}")
    rec = np.frombuffer(body, dtype=dt)
    split = Split(
        np.ascontiguousarray(rec["q"], dtype=np.float64), np.ascontiguousarray(rec["v"], dtype=np.float64),
        rec["label"].astype(np.int64), rec["group"].astype(np.int64), rec["latents"].astype(np.int64),
    )
    return split, spec


def save_bundle(bundle: DatasetBundle, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in bundle.splits().items():
        path = directory / f"{name}.split"
        path.write_bytes(split_to_bytes(split, bundle.spec))
        paths.append(path)
    return paths


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    loaded = {name: split_from_bytes((directory / f"{name}.split").read_bytes()) for name in SPLIT_NAMES}
    spec = loaded["train"][1]
    return DatasetBundle(**{name: s for name, (s, _) in loaded.items()}, spec=spec)
