"""End-to-end experiment harness: dataset-scale, augmentation, initialization
and noise studies, with machine-readable CSV/JSON results.

Every grid cell is a pure function of (config, seed): its RNG stream is
derived from the seed plus a stable hash of the cell's training-relevant
configuration, so identical configurations reproduce identical results no
matter which experiment they appear in or how many worker threads run.
Frozen-extractor features are computed once per distinct image set and
cached on disk in the tensor-container format.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, container
from .data import (
    AugmentationPlan,
    DataError,
    Dataset,
    NoiseSpec,
    SplitSpec,
    add_noise_to_dataset,
    expand,
    load_dataset,
    preprocess_batch,
    sample_n_per_class,
    split,
    synth_dataset,
)
from .network import (
    build_classifier,
    build_feature_extractor,
    build_full_network,
    forward,
    load_weights,
    save_weights,
)
from .training import (
    InitMethod,
    TrainConfig,
    evaluate,
    init_params,
    train,
)

TABLE_N_VALUES = (10, 30, 50, 70, 90, 110, 130, 150)
CONDITIONS = ("original", "brightness", "flips", "rotations", "combined")
INIT_METHODS = ("gaussian", "uniform", "xavier", "msra")
NOISE_SNRS = (None, 30.0, 5.0)

CONDITION_PLANS = {
    "original": AugmentationPlan(),
    "brightness": AugmentationPlan(brightness=True),
    "flips": AugmentationPlan(flips=True),
    "rotations": AugmentationPlan(rotations=True),
    "combined": AugmentationPlan(brightness=True, flips=True, rotations=True),
}


@dataclass
class ExperimentConfig:
    kind: str = "single"
    data: str = "synthetic"
    weights: str | None = None
    out_dir: str = "results"
    cache_dir: str | None = None  # defaults to <out_dir>/cache
    seeds: tuple = (0, 1, 2, 3, 4)
    n_values: tuple = TABLE_N_VALUES
    modes: tuple = ("transfer", "scratch")
    conditions: tuple = CONDITIONS
    init_methods: tuple = INIT_METHODS
    snrs: tuple = NOISE_SNRS
    n: int = 150  # single-run sample size
    mode: str = "transfer"  # single-run arm
    n_small: int = 10  # sample size for the augmentation/init studies
    augmentation: AugmentationPlan = field(default_factory=AugmentationPlan)
    noise_augmentation: AugmentationPlan | None = None  # noise study; None = combined
    init: str = "gaussian"
    noise_init: str = "xavier"
    noise: NoiseSpec | None = None
    split_seed: int = 0
    per_class_train: int = 150
    per_class_test: int = 150
    synth_per_class: int | None = None
    max_updates: int = 6000
    scratch_updates: int = 3000
    batch_size: int = 3
    threads: int = 1

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ResultRecord:
    config: dict
    cell: dict
    seed: int
    accuracy: float
    confusion: list
    wall_seconds: float
    build_id: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"ssdr-{__version__}"


def cell_rng(seed: int, signature: str):
    """Seeded generator for one grid cell. The signature covers everything
    that shapes the cell's training, so equal configurations share streams."""
    digest = hashlib.sha256(signature.encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed] + words))


class ImageInputs:
    """Lazy preprocessing view over labeled images, indexable like an array."""

    def __init__(self, images):
        self.images = list(images)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            picked = self.images[idx]
        else:
            picked = [self.images[int(i)] for i in np.atleast_1d(idx)]
        return preprocess_batch(picked)


class FeatureSet:
    """Indexable view over cached feature tensors (memory-mapped)."""

    def __init__(self, maps):
        self.maps = maps

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            picked = self.maps[idx]
        else:
            picked = [self.maps[int(i)] for i in np.atleast_1d(idx)]
        return np.stack([np.asarray(m) for m in picked])


def extract_features(images, extractor_params, batch: int = 4):
    """Runs the frozen extractor over the images; yields [256,28,28] maps."""
    spec = build_feature_extractor()
    for start in range(0, len(images), batch):
        chunk = images[start : start + batch]
        x = preprocess_batch(chunk)
        out, _ = forward(spec, extractor_params, x, "eval")
        for row in out:
            yield row


def write_feature_cache(path, images, extractor_params) -> None:
    def records():
        for i, feat in enumerate(extract_features(images, extractor_params)):
            yield f"feat_{i}", feat
        for i, img in enumerate(images):
            yield f"label_{i}", np.array([img.label], np.float32)

    container.write_tensors(path, records())


def read_feature_cache(path):
    tensors = container.read_tensors(path, mmap=True)
    count = len(tensors) // 2
    maps = [tensors[f"feat_{i}"] for i in range(count)]
    labels = np.array([int(tensors[f"label_{i}"][0]) for i in range(count)], np.int64)
    return FeatureSet(maps), labels


class ExperimentContext:
    """Shared state for one experiment: the dataset split, the extractor
    weights, and the on-disk feature cache."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else self.out_dir / "cache"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

        if cfg.data == "synthetic":
            per_class = cfg.synth_per_class or (cfg.per_class_train + cfg.per_class_test)
            dataset = synth_dataset(per_class, seed=cfg.split_seed)
        else:
            dataset = load_dataset(cfg.data)
        self.train_pool, self.test_set = split(
            dataset, SplitSpec(cfg.split_seed, cfg.per_class_train, cfg.per_class_test)
        )
        self._pool_index = {id(img): i for i, img in enumerate(self.train_pool.images)}

        self.extractor_spec = build_feature_extractor()
        self._extractor_params = None
        self._weights_digest = None

    @property
    def extractor_params(self):
        if self._extractor_params is None:
            if not self.cfg.weights:
                raise DataError(
                    "transfer mode needs pretrained extractor weights; "
                    "pass a weight container via --weights"
                )
            self._extractor_params = load_weights(
                self.cfg.weights, self.extractor_spec, trainable=False
            )
        return self._extractor_params

    def weights_digest(self) -> str:
        if self._weights_digest is None:
            self._weights_digest = hashlib.sha256(
                Path(self.cfg.weights).read_bytes()
            ).hexdigest()
        return self._weights_digest

    def features_for(self, dataset: Dataset):
        """Extract (or reuse cached) frozen features for an image set."""
        h = hashlib.sha256(self.weights_digest().encode())
        for img in dataset.images:
            h.update(img.pixels.tobytes())
            h.update(bytes([img.label]))
        path = self.cache_dir / f"feat_{h.hexdigest()[:24]}.ssdr"
        with self._lock:
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                write_feature_cache(tmp, dataset.images, self.extractor_params)
                tmp.rename(path)
        return read_feature_cache(path)

    def sample_train(self, n: int, seed: int) -> Dataset:
        return sample_n_per_class(self.train_pool, n, seed)

    def pool_features(self):
        return self.features_for(self.train_pool)

    def pool_indices(self, dataset: Dataset):
        return np.array([self._pool_index[id(img)] for img in dataset.images], np.int64)


def _signature(cell) -> str:
    plan = cell.plan
    aug = "".join(
        c for c, on in zip("bfr", (plan.brightness, plan.flips, plan.rotations)) if on
    )
    if cell.snr is None:
        snr = "none"
    else:
        sides = "".join(c for c, on in (("t", cell.noise_train), ("e", cell.noise_test)) if on)
        snr = f"{cell.snr:g}:{sides or 'off'}"
    return f"n={cell.n};mode={cell.mode};aug={aug or 'none'};init={cell.init};snr={snr}"


@dataclass
class _Cell:
    cell_id: str
    fields: dict  # CSV columns minus accuracy
    n: int
    mode: str
    plan: AugmentationPlan
    init: str
    snr: float | None
    seed: int
    updates: int
    noise_train: bool = True
    noise_test: bool = True


def _run_cell(ctx: ExperimentContext, cell: _Cell):
    cfg = ctx.cfg
    started = time.perf_counter()
    rng = cell_rng(cell.seed, _signature(cell))
    sample = ctx.sample_train(cell.n, cell.seed)

    noise_train = cell.snr is not None and cell.noise_train
    noise_test = cell.snr is not None and cell.noise_test
    test_set = ctx.test_set
    if noise_test:
        test_set = add_noise_to_dataset(test_set, NoiseSpec(cell.snr), seed=cell.seed * 2)

    if cell.mode == "transfer":
        spec = build_classifier()
        if cell.plan.factor == 1 and not noise_train:
            feats, labels = ctx.pool_features()
            idx = ctx.pool_indices(sample)
            train_inputs = FeatureSet([feats.maps[i] for i in idx])
            train_labels = labels[idx]
        else:
            train_set = expand(sample, cell.plan)
            if noise_train:
                train_set = add_noise_to_dataset(train_set, NoiseSpec(cell.snr),
                                                 seed=cell.seed * 2 + 1)
            train_inputs, train_labels = ctx.features_for(train_set)
        test_inputs, test_labels = ctx.features_for(test_set)
    else:
        spec = build_full_network()
        train_set = expand(sample, cell.plan)
        if noise_train:
            train_set = add_noise_to_dataset(train_set, NoiseSpec(cell.snr),
                                             seed=cell.seed * 2 + 1)
        train_inputs = ImageInputs(train_set.images)
        train_labels = train_set.labels()
        test_inputs = ImageInputs(test_set.images)
        test_labels = test_set.labels()
    params = init_params(spec, InitMethod(cell.init), rng)

    tc = TrainConfig(
        batch_size=cfg.batch_size,
        max_updates=cell.updates,
        seed=cell.seed,
        transfer=(cell.mode == "transfer"),
        init=InitMethod(cell.init),
    )
    params, history = train(spec, params, train_inputs, train_labels, tc, rng)
    accuracy, confusion = evaluate(spec, params, test_inputs, test_labels)
    wall = time.perf_counter() - started
    record = ResultRecord(
        config=ctx.cfg.as_dict(),
        cell=dict(cell.fields),
        seed=cell.seed,
        accuracy=accuracy,
        confusion=confusion.tolist(),
        wall_seconds=wall,
        build_id=build_id(),
    )
    return record, params, history


def _write_cell_csv(path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _run_grid(ctx: ExperimentContext, name: str, header, cells):
    """Executes cells in a thread pool, writes per-cell CSVs, merges them in
    grid order, and returns the records."""
    cfg = ctx.cfg
    # Warm the feature cache serially so concurrent cells only read it.
    if any(c.mode == "transfer" and c.plan.factor == 1 and c.snr is None for c in cells):
        ctx.pool_features()
    if any(c.mode == "transfer" and c.snr is None for c in cells):
        ctx.features_for(ctx.test_set)

    results = [None] * len(cells)

    def run_one(i):
        record, _, _ = _run_cell(ctx, cells[i])
        results[i] = record
        return i

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(run_one, range(len(cells))))
    else:
        for i in range(len(cells)):
            run_one(i)

    rows = []
    for cell, record in zip(cells, results):
        row = list(cell.fields.values()) + [f"{record.accuracy:.6f}"]
        rows.append(row)
        _write_cell_csv(ctx.out_dir / name / f"{cell.cell_id}.csv", header, [row])
    _write_cell_csv(ctx.out_dir / f"{name}.csv", header, rows)
    return results


def run_table1(cfg: ExperimentConfig):
    """Dataset-scale study: n per class x {transfer, scratch} x seeds."""
    ctx = ExperimentContext(cfg)
    if "transfer" in cfg.modes:
        ctx.extractor_params  # fail fast when weights are missing
    cells = []
    for n in cfg.n_values:
        for mode in cfg.modes:
            for seed in cfg.seeds:
                updates = cfg.max_updates if mode == "transfer" else cfg.scratch_updates
                cells.append(_Cell(
                    cell_id=f"n{n:03d}_{mode}_s{seed}",
                    fields={"n": n, "mode": mode, "seed": seed},
                    n=n, mode=mode, plan=AugmentationPlan(), init=cfg.init,
                    snr=None, seed=seed, updates=updates,
                ))
    return _run_grid(ctx, "table1", ["n", "mode", "seed", "accuracy"], cells)


def run_table3(cfg: ExperimentConfig):
    """Augmentation study at the small sample size, transfer mode."""
    ctx = ExperimentContext(cfg)
    ctx.extractor_params
    cells = [
        _Cell(
            cell_id=f"{condition}_s{seed}",
            fields={"condition": condition, "seed": seed},
            n=cfg.n_small, mode="transfer", plan=CONDITION_PLANS[condition],
            init=cfg.init, snr=None, seed=seed, updates=cfg.max_updates,
        )
        for condition in cfg.conditions
        for seed in cfg.seeds
    ]
    return _run_grid(ctx, "table3", ["condition", "seed", "accuracy"], cells)


def run_table4(cfg: ExperimentConfig):
    """Initialization study: combined augmentation, four init methods."""
    ctx = ExperimentContext(cfg)
    ctx.extractor_params
    plan = CONDITION_PLANS["combined"]
    cells = [
        _Cell(
            cell_id=f"{method}_s{seed}",
            fields={"method": method, "seed": seed},
            n=cfg.n_small, mode="transfer", plan=plan, init=method,
            snr=None, seed=seed, updates=cfg.max_updates,
        )
        for method in cfg.init_methods
        for seed in cfg.seeds
    ]
    return _run_grid(ctx, "table4", ["method", "seed", "accuracy"], cells)


def run_noise(cfg: ExperimentConfig):
    """SNR study: n per class x {clean, 30 dB, 5 dB} x seeds, combined
    augmentation and the best-performing init."""
    ctx = ExperimentContext(cfg)
    ctx.extractor_params
    plan = cfg.noise_augmentation
    if plan is None:
        plan = CONDITION_PLANS["combined"]
    cells = []
    for n in cfg.n_values:
        for snr in cfg.snrs:
            for seed in cfg.seeds:
                tag = "none" if snr is None else f"{snr:g}"
                cells.append(_Cell(
                    cell_id=f"n{n:03d}_snr{tag}_s{seed}",
                    fields={"n": n, "snr": tag, "seed": seed},
                    n=n, mode="transfer", plan=plan, init=cfg.noise_init,
                    snr=snr, seed=seed, updates=cfg.max_updates,
                ))
    return _run_grid(ctx, "noise", ["n", "snr", "seed", "accuracy"], cells)


def run_single(cfg: ExperimentConfig):
    """One train+evaluate; writes the record as JSON plus trained weights and
    the loss history."""
    if cfg.n < 1:
        raise DataError(f"n must be at least 1, got {cfg.n}")
    ctx = ExperimentContext(cfg)
    if cfg.mode == "transfer":
        ctx.extractor_params
    seed = cfg.seeds[0]
    updates = cfg.max_updates if cfg.mode == "transfer" else cfg.scratch_updates
    noise = cfg.noise
    cell = _Cell(
        cell_id=f"single_s{seed}",
        fields={"n": cfg.n, "mode": cfg.mode, "seed": seed},
        n=cfg.n, mode=cfg.mode, plan=cfg.augmentation, init=cfg.init,
        snr=noise.snr_db if noise else None, seed=seed, updates=updates,
        noise_train=noise.apply_to_train if noise else True,
        noise_test=noise.apply_to_test if noise else True,
    )
    record, params, history = _run_cell(ctx, cell)
    out = ctx.out_dir / "single"
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(record.to_json() + "\n")
    save_weights(params, out / "trained.ssdr")
    history.write_csv(out / "history.csv")
    return record
