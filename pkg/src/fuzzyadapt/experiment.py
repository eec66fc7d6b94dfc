"""Experiment configuration and the seed-level pipelines behind the CLI.

A config is a YAML mapping with the sections below; anything omitted takes
the default shown by ``default_config()``::

    paths:   data / checkpoints / reports (relative to the output dir)
    domain:  DomainSpec fields (seed is overridden per run)
    arch:    hidden_dims, bottleneck_dim
    source_train: TrainConfig fields for the supervised source model
    adapt:   AdaptConfig fields plus a nested ``train`` TrainConfig
    compare: objectives, each a name or {name, objective, use_weights, loss_params}
    seeds:   list of integer seeds
    verify:  sweep sizes for the theory verifiers
"""

import copy
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml
from scipy.stats import binomtest

from fuzzyadapt import datagen, losses, noiselab, nn, sfda
from fuzzyadapt.errors import ConfigError, DivergedError, InvalidInputError
from fuzzyadapt.mathcore import make_rng, sample_simplex
from fuzzyadapt.util import config_hash

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "term1": dict(objective="fal_term1", use_weights=False),
    "term2": dict(objective="fal_term2", use_weights=False),
    "term1+term2": dict(objective="fal", use_weights=False),
    "term1+term2+weights": dict(objective="fal", use_weights=True),
}
ABLATION_ORDER = ("source-only", "term1", "term2", "term1+term2", "term1+term2+weights")

DEFAULT_COMPARE = ["fal", "ce", "focal", "rce", "sce", "gce"]


def default_config():
    return {
        "paths": {"data": "data", "checkpoints": "checkpoints", "reports": "reports"},
        "domain": datagen.spec_to_dict(datagen.DomainSpec()),
        "arch": {"hidden_dims": [32], "bottleneck_dim": 16},
        "source_train": asdict(nn.TrainConfig(lr_backbone=0.01, lr_head=0.1, max_epochs=10)),
        "adapt": {
            "train": asdict(nn.TrainConfig(lr_backbone=1e-3, lr_head=1e-2, max_epochs=5)),
            "epochs": 5,
            "objective": "fal",
            "use_weights": True,
            "refresh_per_epoch": True,
            "gradient_mode": "through",
            "freeze_classifier": False,
            "loss_params": {},
        },
        "compare": {"objectives": list(DEFAULT_COMPARE)},
        "seeds": list(range(20)),
        "verify": {
            "boundedness_samples": 1_000_000,
            "boundedness_ks": list(range(2, 11)),
            "risk_gap_matrices": 100,
            "risk_gap_ks": [2, 3, 4],
            "risk_gap_samples": 100,
            "grid_resolution": 21,
            "max_noise_rate": 0.6,
            "gradcheck_instances": 1000,
            "gradcheck_h": 1e-5,
            "gradcheck_tol": 1e-5,
        },
    }


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict) and key not in ("loss_params",):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


@dataclass
class ExperimentConfig:
    raw: dict
    domain: datagen.DomainSpec
    arch: dict
    source_train: nn.TrainConfig
    adapt: sfda.AdaptConfig
    objectives: list
    seeds: list
    verify: dict
    paths: dict = field(default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.raw)


def _build(section, fn):
    try:
        return fn()
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def resolve_config(overrides=None, seed=None):
    """Merge ``overrides`` into the defaults and validate every section."""
    raw = default_config()
    if overrides:
        if not isinstance(overrides, dict):
            raise ConfigError("config root must be a mapping")
        _merge(raw, copy.deepcopy(overrides))
    if seed is not None:
        raw["seeds"] = [int(seed)]
    if not raw["seeds"] or not all(isinstance(s, int) and s >= 0 for s in raw["seeds"]):
        raise ConfigError("seeds: must be a nonempty list of nonnegative integers")

    domain = _build("domain", lambda: datagen.spec_from_dict(raw["domain"]))
    _build("arch", lambda: nn.Architecture(domain.dim, **raw["arch"], n_classes=domain.n_classes))
    source_train = _build("source_train", lambda: nn.TrainConfig(**raw["source_train"]))
    ad = dict(raw["adapt"])
    ad_train = _build("adapt.train", lambda: nn.TrainConfig(**ad.pop("train")))
    adapt = _build("adapt", lambda: sfda.AdaptConfig(train=ad_train, **ad))
    objectives = _build("compare.objectives", lambda: [_objective_entry(o) for o in raw["compare"]["objectives"]])
    for name, kw in objectives:
        _build(f"compare.objectives[{name}]", lambda kw=kw: replace(adapt, **kw))
    return ExperimentConfig(
        raw=raw,
        domain=domain,
        arch=raw["arch"],
        source_train=source_train,
        adapt=adapt,
        objectives=objectives,
        seeds=list(raw["seeds"]),
        verify=raw["verify"],
        paths=raw["paths"],
    )


def _objective_entry(entry):
    """(display name, AdaptConfig overrides) for a compare entry."""
    if isinstance(entry, str):
        entry = {"name": entry}
    entry = dict(entry)
    name = entry.pop("name")
    objective = entry.pop("objective", name)
    use_weights = entry.pop("use_weights", objective == "fal")
    loss_params = entry.pop("loss_params", {})
    if entry:
        raise InvalidInputError(f"unknown keys {sorted(entry)}")
    if objective not in sfda.OBJECTIVES:
        raise InvalidInputError(f"unknown objective {objective!r}")
    return name, dict(objective=objective, use_weights=use_weights, loss_params=loss_params)


def load_config(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return resolve_config(data or {}, seed=seed)


def dump_config(cfg):
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def seed_domain(cfg, seed):
    return replace(cfg.domain, seed=seed)


def make_arch(cfg):
    return nn.Architecture(cfg.domain.dim, tuple(cfg.arch["hidden_dims"]), cfg.arch["bottleneck_dim"], cfg.domain.n_classes)


def train_source(cfg, source, seed):
    """Seeded init plus supervised CE training on the source domain."""
    model = nn.init_model(make_arch(cfg), make_rng([seed, 1]))
    model, history = nn.train_supervised(model, source.features, source.labels, replace(cfg.source_train, seed=seed))
    return model, history


def adapt_config(cfg, seed, **overrides):
    return replace(cfg.adapt, train=replace(cfg.adapt.train, seed=seed), **overrides)


def _check_finite(value, what):
    if value is None or not np.isfinite(value):
        raise DivergedError(f"{what} is not finite")
    return value


def run_seed(cfg, seed, variants):
    """Generate, train and adapt once per variant for one seed.

    ``variants`` maps a name to AdaptConfig overrides. Returns a dict with
    the source model's accuracies and one AdaptReport plus metrics per variant.
    """
    source, target = datagen.generate_pair(seed_domain(cfg, seed))
    model, _ = train_source(cfg, source, seed)
    out = {
        "seed": seed,
        "source_train_acc": sfda.evaluate(model, source.features, source.labels).accuracy,
        "source_only": sfda.evaluate(model, target.features, target.labels),
        "runs": {},
    }
    X_target = target.unlabeled().features
    for name, kw in variants.items():
        _, report = sfda.adapt(model, X_target, adapt_config(cfg, seed, **kw), y_true=target.labels)
        _check_finite(report.post_accuracy, f"{name} accuracy")
        out["runs"][name] = report
    return out


def _fan_out(fn, args, jobs):
    if jobs <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*args)))


def compare(cfg, jobs=1):
    """Paired objective comparison over ``cfg.seeds``; one row per (objective, seed)."""
    variants = dict(cfg.objectives)
    results = _fan_out(run_seed, [(cfg, s, variants) for s in cfg.seeds], jobs)
    rows = []
    for res in results:
        for name in variants:
            rep = res["runs"][name]
            rows.append(
                {
                    "loss": name,
                    "seed": res["seed"],
                    "pre_acc": rep.pre_accuracy,
                    "post_acc": rep.post_accuracy,
                    "per_class_acc": rep.post_metrics.per_class_accuracy.tolist(),
                }
            )
    return rows, results


def ablate(cfg, jobs=1):
    """Accuracy per ablation variant and seed, including the unadapted source model."""
    results = _fan_out(run_seed, [(cfg, s, ABLATION_VARIANTS) for s in cfg.seeds], jobs)
    rows = []
    for res in results:
        rows.append({"variant": "source-only", "seed": res["seed"], "accuracy": res["source_only"].accuracy})
        for name in ABLATION_VARIANTS:
            rows.append({"variant": name, "seed": res["seed"], "accuracy": res["runs"][name].post_accuracy})
    return rows


def mean_by(rows, key, value):
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def sign_test(a, b):
    """One-sided sign test that paired values ``a`` exceed ``b``; ties are dropped.

    Returns (wins, losses, p_value).
    """
    a, b = np.asarray(a), np.asarray(b)
    wins = int(np.sum(a > b))
    losses_ = int(np.sum(a < b))
    if wins + losses_ == 0:
        return wins, losses_, 1.0
    return wins, losses_, float(binomtest(wins, wins + losses_, 0.5, alternative="greater").pvalue)


def ablation_ordering(means, tie=0.3):
    """Check the expected ablation ordering on seed-mean accuracies (in points).

    Strict steps must improve; non-strict steps may fall short by up to ``tie``.
    """
    pts = {k: 100.0 * v for k, v in means.items()}
    checks = {
        "source-only < term1": pts["term1"] > pts["source-only"],
        "term1 <= term1+term2": pts["term1+term2"] >= pts["term1"] - tie,
        "term1+term2 <= term1+term2+weights": pts["term1+term2+weights"] >= pts["term1+term2"] - tie,
        "term2 < term1": pts["term2"] < pts["term1"],
    }
    return checks


# theory verifiers


def boundedness_sweep(ks, n_samples, rng, chunk=200_000):
    """Fuzzy-term values on Dirichlet samples against (K - 1)/e, per K."""
    rows = []
    for k in ks:
        bound = (k - 1) * np.exp(-1.0)
        vmin, vmax, violations, done = np.inf, -np.inf, 0, 0
        while done < n_samples:
            m = min(chunk, n_samples - done)
            P = sample_simplex(k, rng, size=m)
            y = rng.integers(0, k, size=m)
            v = losses.fuzzy_term(P, y).value
            vmin, vmax = min(vmin, v.min()), max(vmax, v.max())
            violations += int(np.sum((v <= 0) | (v > bound)))
            done += m
        rows.append({"K": k, "n_samples": n_samples, "min_value": float(vmin), "max_value": float(vmax),
                     "bound": float(bound), "violations": violations})
    return rows


def extremal_fuzzy_input(k):
    """Output with every off-label coordinate at 1/e (needs (K - 1)/e <= 1)."""
    rest = 1.0 - (k - 1) * np.exp(-1.0)
    if rest < 0:
        raise InvalidInputError(f"the extremal point does not exist for K={k}")
    return np.array([rest] + [np.exp(-1.0)] * (k - 1))


def g_maximum(n_grid=1_000_000):
    """Grid maximiser and maximum of -p log p on (0, 1)."""
    p = np.linspace(0.0, 1.0, n_grid + 2)[1:-1]
    g = -p * np.log(p)
    i = int(np.argmax(g))
    return float(p[i]), float(g[i])


def risk_gap_check(cfg, rng):
    v = cfg.verify
    reports = noiselab.risk_gap_sweep(
        v["risk_gap_matrices"], v["risk_gap_ks"], rng, n_samples=v["risk_gap_samples"],
        grid_resolution=v["grid_resolution"], max_rate=v["max_noise_rate"],
    )
    return reports


GRADCHECK_CASES = {
    "ce": {},
    "fal": {},
    "fal_term1": {},
    "fal_term2": {},
    "fuzzy_term": {},
    "weighted_fal": None,  # random weights per instance
    "focal": {"gamma": 2.0},
    "rce": {"A": -4.0},
    "sce": {"alpha": 1.0, "beta": 1.0, "A": -4.0},
    "gce": {"q": 0.7},
}


def gradcheck_suite(n_instances, rng, h=1e-5, k_range=(2, 10)):
    """Worst relative logit-gradient error per loss over random instances."""
    out = {}
    for name, params in GRADCHECK_CASES.items():
        worst = 0.0
        for _ in range(n_instances):
            k = int(rng.integers(k_range[0], k_range[1] + 1))
            z = rng.normal(0.0, 2.0, size=k)
            y = int(rng.integers(0, k))
            p = {"w": rng.uniform(0.5, 2.0, size=k)} if params is None else params
            worst = max(worst, losses.grad_check(name, z, y, p, h=h))
        out[name] = worst
    return out


def network_gradcheck(rng, arch=None, h=1e-6):
    """Worst relative error of backprop parameter gradients against central differences.

    The default architecture is a 2-layer net with 10 and 9 parameters.
    """
    arch = arch or nn.Architecture(4, (), 2, 3)
    model = nn.init_model(arch, rng)
    X = rng.normal(size=(6, arch.input_dim))
    y = rng.integers(0, arch.n_classes, size=6)
    worst = 0.0
    for name in ("ce", "fal"):
        fn = losses.get_loss(name)
        _, gW, gb = nn.batch_loss_and_grads(model, X, y, fn)
        analytic = np.concatenate([a.ravel() for pair in zip(gW, gb) for a in pair])
        flat = model.flat_list()
        numeric = []
        for arr in flat:
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up, _, _ = nn.batch_loss_and_grads(model, X, y, fn)
                arr[idx] = old - h
                down, _, _ = nn.batch_loss_and_grads(model, X, y, fn)
                arr[idx] = old
                numeric.append((up - down) / (2 * h))
        numeric = np.array(numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
