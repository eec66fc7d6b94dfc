"""Synthetic source/target domain pairs and the on-disk dataset format.

Both domains draw from the same isotropic Gaussian mixture; the target is
pushed through a rigid shift (rotation in the plane of the first two
coordinates about the mean centroid, then a translation) and may use
different class proportions.

File layout (all integers little-endian)::

    magic      4 bytes   b"FADS"
    hdr_len    uint32    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON: version, n_classes, dim, n, domain,
                         has_labels, has_noisy_labels
    features   n*dim     float64, row-major
    labels     n         int64, present iff has_labels
    noisy      n         int64, present iff has_noisy_labels
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from fuzzyadapt.errors import AssumptionViolatedError, InvalidInputError, ParseError, UnsupportedVersionError
from fuzzyadapt.mathcore import make_rng
from fuzzyadapt.noiselab import check_clean_dominant, check_noise_matrix, corrupt_labels
from fuzzyadapt.util import atomic_write_bytes

MAGIC = b"FADS"
FORMAT_VERSION = 1
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of a synthetic domain pair.

    ``means`` and ``translation`` are drawn from ``seed`` when left as None:
    means from N(0, mean_spread^2 I) subject to ``min_separation``, the
    translation as a random direction of length ``shift_norm``.
    ``target_proportions`` are relative class frequencies on the target;
    None gives ``imbalance``:1 between the first and second half of the
    classes (1.0 means balanced).
    """

    n_classes: int = 8
    dim: int = 8
    means: tuple = None
    mean_spread: float = 1.2
    min_separation: float = 1.5
    cov_scale: float = 1.0
    translation: tuple = None
    shift_norm: float = 2.0
    rotation: float = 0.4
    samples_per_class: int = 250
    target_proportions: tuple = None
    imbalance: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.dim < 2:
            raise InvalidInputError("need n_classes >= 2 and dim >= 2")
        if self.cov_scale <= 0 or self.samples_per_class < 1:
            raise InvalidInputError("cov_scale and samples_per_class must be positive")
        if self.imbalance <= 0:
            raise InvalidInputError("imbalance must be positive")


@dataclass
class Dataset:
    features: np.ndarray
    n_classes: int
    domain: str
    labels: np.ndarray = None
    noisy_labels: np.ndarray = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidInputError("features must be an (N, dim) array")
        if self.domain not in DOMAINS:
            raise InvalidInputError(f"domain must be one of {DOMAINS}")
        n = self.features.shape[0]
        for name in ("labels", "noisy_labels"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.int64)
            if arr.shape != (n,) or np.any(arr < 0) or np.any(arr >= self.n_classes):
                raise InvalidInputError(f"{name} must hold {n} ids in [0, {self.n_classes})")
            setattr(self, name, arr)
        if self.noisy_labels is not None and self.labels is None:
            raise InvalidInputError("a noisy-label channel requires ground-truth labels")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def unlabeled(self):
        """Copy with every label channel removed."""
        return Dataset(self.features.copy(), self.n_classes, self.domain)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            self.n_classes == other.n_classes
            and self.domain == other.domain
            and np.array_equal(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self.noisy_labels, other.noisy_labels)
        )


def two_class_spec(seed=0):
    """Well-separated binary pair with a material shift along the class axis."""
    dim = 8
    means = ((-2.0,) + (0.0,) * (dim - 1), (2.0,) + (0.0,) * (dim - 1))
    return DomainSpec(
        n_classes=2,
        dim=dim,
        means=means,
        translation=(1.8,) + (0.0,) * (dim - 1),
        rotation=0.3,
        imbalance=1.0,
        seed=seed,
    )


def _rotation_matrix(dim, angle):
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def resolve_geometry(spec):
    """Class means, translation vector and rotation matrix for ``spec``."""
    rng_means, rng_shift = make_rng(spec.seed).spawn(2)
    if spec.means is not None:
        means = np.asarray(spec.means, dtype=np.float64)
        if means.shape != (spec.n_classes, spec.dim):
            raise InvalidInputError(f"means must have shape ({spec.n_classes}, {spec.dim})")
    else:
        for _ in range(1000):
            means = rng_means.normal(0.0, spec.mean_spread, size=(spec.n_classes, spec.dim))
            if _min_pairwise(means) >= spec.min_separation:
                break
        else:
            raise InvalidInputError("could not place class means at the requested separation")
    if _min_pairwise(means) <= 0:
        raise InvalidInputError("class means must be pairwise distinct")
    if spec.translation is not None:
        t = np.asarray(spec.translation, dtype=np.float64)
        if t.shape != (spec.dim,):
            raise InvalidInputError(f"translation must have length {spec.dim}")
    else:
        d = rng_shift.normal(size=spec.dim)
        t = spec.shift_norm * d / np.linalg.norm(d)
    return means, t, _rotation_matrix(spec.dim, spec.rotation)


def _min_pairwise(means):
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    return dist[np.triu_indices(len(means), 1)].min()


def target_class_counts(spec):
    n_total = spec.n_classes * spec.samples_per_class
    if spec.target_proportions is not None:
        w = np.asarray(spec.target_proportions, dtype=np.float64)
        if w.shape != (spec.n_classes,) or np.any(w <= 0):
            raise InvalidInputError("target_proportions must be positive, one per class")
    else:
        w = np.ones(spec.n_classes)
        w[: spec.n_classes // 2] = spec.imbalance
    counts = np.floor(n_total * w / w.sum()).astype(np.int64)
    counts[: n_total - counts.sum()] += 1
    return counts


def apply_shift(X, means, translation, R):
    c = means.mean(axis=0)
    return (X - c) @ R.T + c + translation


def invert_shift(X, means, translation, R):
    c = means.mean(axis=0)
    return (X - c - translation) @ R + c


def _sample(rng, means, counts, scale):
    labels = np.repeat(np.arange(len(means)), counts)
    X = means[labels] + scale * rng.standard_normal((labels.size, means.shape[1]))
    perm = rng.permutation(labels.size)
    return X[perm], labels[perm]


def bayes_predict(X, means, cov_scale, prior):
    """Bayes-optimal labels for an isotropic Gaussian mixture with the given prior."""
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return np.argmax(-d2 / (2 * cov_scale**2) + np.log(prior), axis=1)


def generate_pair(spec):
    """Return (source, target) datasets; both carry ground-truth labels.

    Strip target labels with ``Dataset.unlabeled`` before adaptation.
    """
    means, t, R = resolve_geometry(spec)
    rng_src, rng_tgt = make_rng(spec.seed).spawn(4)[2:]
    src_counts = np.full(spec.n_classes, spec.samples_per_class)
    tgt_counts = target_class_counts(spec)
    Xs, ys = _sample(rng_src, means, src_counts, spec.cov_scale)
    Xt0, yt = _sample(rng_tgt, means, tgt_counts, spec.cov_scale)
    Xt = apply_shift(Xt0, means, t, R)

    shifted = np.any(t != 0) or spec.rotation % (2 * np.pi) != 0
    tgt_means = apply_shift(means, means, t, R)
    src_rule = bayes_predict(Xt, means, spec.cov_scale, src_counts / src_counts.sum())
    tgt_rule = bayes_predict(Xt, tgt_means, spec.cov_scale, tgt_counts / tgt_counts.sum())
    disagreement = float(np.mean(src_rule != tgt_rule))
    if shifted and disagreement == 0.0:
        raise InvalidInputError("shift leaves the Bayes-optimal classifier unchanged on the target sample")

    meta = {"bayes_disagreement": disagreement}
    source = Dataset(Xs, spec.n_classes, "source", labels=ys, meta=dict(meta))
    target = Dataset(Xt, spec.n_classes, "target", labels=yt, meta=dict(meta))
    return source, target


def inject_pseudo_label_noise(target, eta, rng, allow_violation=False):
    """Attach a noisy-label channel drawn from ``eta``; ground truth is kept."""
    if target.labels is None:
        raise InvalidInputError("noise injection needs ground-truth labels")
    eta = check_noise_matrix(eta)
    if eta.shape[0] != target.n_classes:
        raise InvalidInputError("noise matrix size does not match the class count")
    if not allow_violation and not check_clean_dominant(eta):
        raise AssumptionViolatedError("noise matrix is not clean-labels-dominant")
    noisy = corrupt_labels(target.labels, eta, rng)
    return replace(target, noisy_labels=noisy, meta=dict(target.meta))


def to_bytes(ds):
    header = {
        "version": FORMAT_VERSION,
        "n_classes": int(ds.n_classes),
        "dim": int(ds.dim),
        "n": int(ds.n),
        "domain": ds.domain,
        "has_labels": ds.labels is not None,
        "has_noisy_labels": ds.noisy_labels is not None,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hdr)), hdr, ds.features.astype("<f8").tobytes()]
    if ds.labels is not None:
        parts.append(ds.labels.astype("<i8").tobytes())
    if ds.noisy_labels is not None:
        parts.append(ds.noisy_labels.astype("<i8").tobytes())
    return b"".join(parts)


def from_bytes(data):
    if len(data) < 8:
        raise ParseError("file too short for the fixed preamble", len(data))
    if data[:4] != MAGIC:
        raise ParseError("bad magic number", 0)
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise ParseError("truncated header", len(data))
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("malformed header", 8) from None
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"dataset format version {header.get('version')!r} is not supported")
    try:
        k, dim, n = int(header["n_classes"]), int(header["dim"]), int(header["n"])
        domain = header["domain"]
        has_labels, has_noisy = bool(header["has_labels"]), bool(header["has_noisy_labels"])
    except (KeyError, TypeError, ValueError):
        raise ParseError("header is missing required fields", 8) from None
    if has_noisy and not has_labels:
        raise ParseError("noisy labels present in an unlabeled file", 8)
    offset = 8 + hlen
    expected = offset + 8 * n * dim + 8 * n * (int(has_labels) + int(has_noisy))
    if len(data) < expected:
        raise ParseError(f"truncated body: expected {expected} bytes, found {len(data)}", len(data))
    if len(data) > expected:
        raise ParseError("trailing bytes after body", expected)
    X = np.frombuffer(data, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim).astype(np.float64)
    offset += 8 * n * dim
    labels = noisy = None
    if has_labels:
        labels = np.frombuffer(data, dtype="<i8", count=n, offset=offset).astype(np.int64)
        offset += 8 * n
    if has_noisy:
        noisy = np.frombuffer(data, dtype="<i8", count=n, offset=offset).astype(np.int64)
    try:
        return Dataset(X, k, domain, labels=labels, noisy_labels=noisy)
    except InvalidInputError as exc:
        raise ParseError(f"invalid contents: {exc}", 8 + hlen) from None


def save(ds, path):
    atomic_write_bytes(path, to_bytes(ds))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def spec_to_dict(spec):
    d = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    for key in ("means", "translation", "target_proportions"):
        if d[key] is not None:
            d[key] = np.asarray(d[key]).tolist()
    return d


def spec_from_dict(d):
    d = dict(d)
    unknown = set(d) - set(DomainSpec.__dataclass_fields__)
    if unknown:
        raise InvalidInputError(f"unknown DomainSpec fields: {sorted(unknown)}")
    for key in ("means", "translation", "target_proportions"):
        if d.get(key) is not None:
            d[key] = tuple(map(tuple, d[key])) if key == "means" else tuple(d[key])
    return DomainSpec(**d)
