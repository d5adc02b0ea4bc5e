"""Synthetic multi-domain classification benchmarks.

Every instance is produced from a class-tied semantic factor and a
domain-tied variation factor, plus one appended spurious coordinate whose
sign tracks the (noisy) label with a per-domain probability. Domains with
high tracking probability in training and a reversed one at test reproduce
the color/label trap of spurious-correlation image benchmarks in a few
dimensions, with the generating factors stored per instance.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

SODD_MAGIC = b"SODD"
SODD_VERSION = 1


@dataclass
class DomainSpec:
    domain_id: int
    spurious_corr: float
    variation_mean: np.ndarray | None = None  # drawn from the benchmark seed when None


@dataclass
class BenchmarkConfig:
    n_classes: int
    semantic_dim: int
    variation_dim: int
    input_dim: int
    domains: list
    samples_per_domain: int
    label_noise_rate: float = 0.0
    seed: int = 0
    semantic_noise: float = 0.3
    variation_noise: float = 0.2
    pixel_noise: float = 0.02
    prototype_min_dist: float = 2.0
    variation_mean_scale: float = 0.5  # applied to auto-drawn domain means
    test_domain: int | None = None  # defaults to the last domain

    def validate(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if not self.domains:
            raise ValueError("need at least one domain")
        if self.input_dim < self.semantic_dim + 1:
            raise ValueError(
                f"input_dim {self.input_dim} must exceed semantic_dim {self.semantic_dim}")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ValueError(f"label_noise_rate must be in [0, 1), got {self.label_noise_rate}")
        for d in self.domains:
            if not 0.0 <= d.spurious_corr <= 1.0:
                raise ValueError(f"spurious_corr must be in [0, 1], got {d.spurious_corr}")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate domain ids: {ids}")


@dataclass
class Instance:
    x: np.ndarray
    y: int  # observed class id in {1..K}
    e: int  # domain id
    true_s: np.ndarray
    true_v: np.ndarray


@dataclass
class BenchmarkMeta:
    """Generation-time ground truth, kept for oracles; not serialized."""

    class_prototypes: np.ndarray  # (K, d_s)
    mixing: np.ndarray            # (d_x, d_s + d_v + 1)
    domain_specs: list = field(default_factory=list)
    config: BenchmarkConfig | None = None


@dataclass
class MultiDomainDataset:
    instances_by_domain: dict
    n_classes: int
    semantic_dim: int
    variation_dim: int
    input_dim: int
    train_domains: tuple
    test_domains: tuple
    ood_classes: tuple = ()
    meta: BenchmarkMeta | None = None

    @property
    def domain_ids(self):
        return tuple(sorted(self.instances_by_domain))

    def all_instances(self):
        for e in self.domain_ids:
            yield from self.instances_by_domain[e]


def label_sign(y: int, n_classes: int) -> float:
    """Binary side of a class id: upper half of {1..K} is +1, lower half -1."""
    return 1.0 if y > n_classes / 2 else -1.0


def _draw_separated(rng, count, dim, min_dist, existing=(), max_tries=10000):
    points = [np.asarray(p, dtype=np.float64) for p in existing]
    drawn = []
    for _ in range(count):
        for attempt in range(max_tries):
            cand = rng.standard_normal(dim)
            if all(np.linalg.norm(cand - p) >= min_dist for p in points):
                break
        else:
            raise ValueError(
                f"could not place {count} points with pairwise distance {min_dist} in {dim}-d")
        points.append(cand)
        drawn.append(cand)
    return drawn


def make_benchmark(cfg: BenchmarkConfig) -> MultiDomainDataset:
    """Generate the full dataset, bit-reproducible from cfg.seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    k, d_s, d_v, d_x = cfg.n_classes, cfg.semantic_dim, cfg.variation_dim, cfg.input_dim

    prototypes = np.stack(_draw_separated(rng, k, d_s, cfg.prototype_min_dist))
    # The spurious scalar is one appended coordinate (the color-channel analog);
    # the remaining coordinates mix the semantic and variation factors through
    # random orthonormal directions, so no factor drowns in an unlucky
    # near-collinear draw.
    mix_dim = d_s + d_v
    raw = rng.standard_normal((d_x - 1, mix_dim))
    if d_x - 1 >= mix_dim:
        q, r = np.linalg.qr(raw)
        mixing = (q * np.sign(np.diag(r))) / np.sqrt(mix_dim)
    else:
        mixing = raw / np.sqrt(mix_dim)

    # Fill missing variation means; all means must stay pairwise distinct.
    provided = [d.variation_mean for d in cfg.domains if d.variation_mean is not None]
    needed = sum(1 for d in cfg.domains if d.variation_mean is None)
    fresh = iter(cfg.variation_mean_scale * m
                 for m in _draw_separated(rng, needed, d_v, 1.0, existing=provided))
    specs = [d if d.variation_mean is not None else replace(d, variation_mean=next(fresh))
             for d in cfg.domains]
    means = np.stack([np.asarray(d.variation_mean, dtype=np.float64) for d in specs])
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            if np.array_equal(means[i], means[j]):
                raise ValueError(
                    f"domains {specs[i].domain_id} and {specs[j].domain_id} share a variation mean")

    instances_by_domain = {}
    for spec in specs:
        items = []
        for _ in range(cfg.samples_per_domain):
            true_class = int(rng.integers(1, k + 1))
            s = prototypes[true_class - 1] + cfg.semantic_noise * rng.standard_normal(d_s)
            v = np.asarray(spec.variation_mean) + cfg.variation_noise * rng.standard_normal(d_v)
            y = true_class
            if cfg.label_noise_rate > 0.0 and rng.random() < cfg.label_noise_rate:
                y = (true_class - 1 + int(rng.integers(1, k))) % k + 1
            sign = label_sign(y, k)
            spur = sign if rng.random() < spec.spurious_corr else -sign
            x = np.tanh(np.concatenate([mixing @ np.concatenate([s, v]), [spur]]))
            x = x + cfg.pixel_noise * rng.standard_normal(d_x)
            items.append(Instance(x=x, y=y, e=spec.domain_id, true_s=s, true_v=v))
        instances_by_domain[spec.domain_id] = items

    test_domain = cfg.test_domain if cfg.test_domain is not None else specs[-1].domain_id
    if test_domain not in instances_by_domain:
        raise ValueError(f"test_domain {test_domain} is not a generated domain")
    train = tuple(d.domain_id for d in specs if d.domain_id != test_domain)

    return MultiDomainDataset(
        instances_by_domain=instances_by_domain,
        n_classes=k, semantic_dim=d_s, variation_dim=d_v, input_dim=d_x,
        train_domains=train, test_domains=(test_domain,),
        meta=BenchmarkMeta(class_prototypes=prototypes, mixing=mixing,
                           domain_specs=specs, config=cfg))


# ---------------------------------------------------------------------------
# views

@dataclass
class TrainView:
    """Training-domain instances of the kept classes, labels remapped to 0..K_in-1."""

    x: np.ndarray
    y: np.ndarray           # remapped labels
    domain: np.ndarray
    class_ids: tuple        # original class id at each remapped index
    input_dim: int

    def __len__(self):
        return self.x.shape[0]


@dataclass
class TestView:
    """Test-domain instances of all classes with binary InD/OOD relabeling."""

    x: np.ndarray
    is_ind: np.ndarray      # 1 = InD, 0 = OOD
    class_id: np.ndarray    # original multi-class label, kept for accuracy scoring
    domain: np.ndarray
    ood_classes: tuple

    def __len__(self):
        return self.x.shape[0]


def split_ood(dataset: MultiDomainDataset, ood_classes, test_domains=None):
    """Hold out classes: train on the rest in training domains, test on everything else."""
    ood = tuple(sorted(set(int(c) for c in ood_classes)))
    if not ood:
        raise ValueError("ood_classes must be nonempty")
    all_classes = set(range(1, dataset.n_classes + 1))
    if not set(ood) <= all_classes:
        raise ValueError(f"unknown ood classes {set(ood) - all_classes}")
    kept = sorted(all_classes - set(ood))
    if not kept:
        raise ValueError("cannot designate every class as OOD")
    test_doms = tuple(test_domains) if test_domains is not None else dataset.test_domains
    train_doms = tuple(d for d in dataset.domain_ids if d not in test_doms)
    if not train_doms:
        raise ValueError("no training domains left")

    remap = {c: i for i, c in enumerate(kept)}
    tx, ty, tdom = [], [], []
    for e in train_doms:
        for inst in dataset.instances_by_domain[e]:
            if inst.y in remap:
                tx.append(inst.x)
                ty.append(remap[inst.y])
                tdom.append(e)
    if not tx:
        raise ValueError("training view is empty")

    vx, vind, vcls, vdom = [], [], [], []
    for e in test_doms:
        for inst in dataset.instances_by_domain[e]:
            vx.append(inst.x)
            vind.append(0 if inst.y in ood else 1)
            vcls.append(inst.y)
            vdom.append(e)

    train_view = TrainView(x=np.stack(tx), y=np.array(ty, dtype=np.int64),
                           domain=np.array(tdom, dtype=np.int64),
                           class_ids=tuple(kept), input_dim=dataset.input_dim)
    test_view = TestView(x=np.stack(vx) if vx else np.zeros((0, dataset.input_dim)),
                         is_ind=np.array(vind, dtype=np.int64),
                         class_id=np.array(vcls, dtype=np.int64),
                         domain=np.array(vdom, dtype=np.int64),
                         ood_classes=ood)
    return train_view, test_view


def iterate_minibatches(view: TrainView, batch_size: int, seed):
    """Yield (x, y) batches covering the view exactly once in a seeded shuffle."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(view)
    if n == 0:
        raise ValueError("cannot iterate an empty view")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield view.x[idx], view.y[idx]


# ---------------------------------------------------------------------------
# dataset file format (little-endian)

def save_dataset(dataset: MultiDomainDataset, path):
    """Write the raw benchmark: header then one fixed-size record per instance."""
    with open(path, "wb") as fh:
        fh.write(SODD_MAGIC)
        fh.write(struct.pack("<IIIIII", SODD_VERSION, dataset.n_classes,
                             dataset.semantic_dim, dataset.variation_dim,
                             dataset.input_dim, len(dataset.instances_by_domain)))
        for inst in dataset.all_instances():
            fh.write(struct.pack("<II", inst.y, inst.e))
            fh.write(np.ascontiguousarray(inst.x, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(inst.true_s, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(inst.true_v, dtype="<f8").tobytes())


def load_dataset(path) -> MultiDomainDataset:
    """Read a dataset file; splits are not stored, the last domain is the default test."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SODD_MAGIC:
        raise ValueError(f"not a dataset file: bad magic {blob[:4]!r}")
    version, k, d_s, d_v, d_x, n_domains = struct.unpack_from("<IIIIII", blob, 4)
    if version != SODD_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    rec = 8 + 8 * (d_x + d_s + d_v)
    body = blob[28:]
    if len(body) % rec != 0:
        raise ValueError(f"truncated dataset file: {len(body)} bytes is not a multiple of {rec}")
    instances_by_domain = {}
    for off in range(0, len(body), rec):
        y, e = struct.unpack_from("<II", body, off)
        vals = np.frombuffer(body, dtype="<f8", count=d_x + d_s + d_v, offset=off + 8)
        inst = Instance(x=vals[:d_x].copy(), y=y, e=e,
                        true_s=vals[d_x:d_x + d_s].copy(),
                        true_v=vals[d_x + d_s:].copy())
        instances_by_domain.setdefault(e, []).append(inst)
    if len(instances_by_domain) != n_domains:
        raise ValueError(
            f"header says {n_domains} domains but file holds {len(instances_by_domain)}")
    domains = sorted(instances_by_domain)
    return MultiDomainDataset(
        instances_by_domain=instances_by_domain, n_classes=k,
        semantic_dim=d_s, variation_dim=d_v, input_dim=d_x,
        train_domains=tuple(domains[:-1]), test_domains=(domains[-1],))
