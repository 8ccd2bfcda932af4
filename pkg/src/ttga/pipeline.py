"""Experiment orchestration behind the CLI: dataset/material preparation,
method evaluation over a worker pool, and CSV/PGM artifact emission.

Every random quantity is drawn from a stream derived from (config seed,
purpose, image id), so a run's outputs are byte-identical for identical
(config, seed) regardless of worker count or scheduling order. Timestamps
appear only in the sidecar ``run.log``.
"""

from __future__ import annotations

import csv
import datetime
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gridio
from .denoiser import (
    AnalyticGaussianDenoiser,
    ConditionEmbedding,
    ConvDenoiser,
    Denoiser,
    DenoiserTrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_toy_denoiser,
)
from .engine import (
    TtgaConfig,
    ensemble,
    entropy_bits,
    error_estimate_map,
    generate_set,
)
from .errors import ConfigError
from .evalbench import (
    Difficulty,
    SegTrainConfig,
    Segmenter,
    ThresholdSegmenter,
    ToyScene,
    load_segmenter,
    make_dataset,
    save_segmenter,
    train_toy_segmenter,
    tta_baseline,
)
from .guidance import GuidanceConfig
from .masks import MaskPolicy, consistency_relevance, saliency_relevance
from .metrics import binarize, dice, error_ground_truth, hd95, nsd, roc_auc
from .nulltext import NullOptConfig
from .rng import SeededRng
from .runconfig import RunConfig, write_resolved_config
from .schedule import NoiseSchedule, build_schedule

STREAM_TRAIN_DATA = 0x11
STREAM_TEST_DATA = 0x12
STREAM_DENOISER = 0x21
STREAM_SEGMENTER = 0x22
STREAM_SEMANTIC = 0x23
STREAM_EVAL = 0x31
SUBSTREAM_TTGA = 1
SUBSTREAM_TTA = 2

SEG_METRICS = ("dsc", "auc", "hd95", "nsd")
ERR_METRICS = ("dsc", "auc", "nsd")

PER_IMAGE_HEADER = [
    "image_id", "method", "occluded",
    "dsc", "auc", "hd95", "nsd",
    "err_dsc", "err_auc", "err_nsd", "flags",
]
AGGREGATE_HEADER = [
    "method", "task",
    "dsc_mean", "dsc_std", "auc_mean", "auc_std",
    "hd95_mean", "hd95_std", "nsd_mean", "nsd_std", "n",
]


class SchemaMismatch(RuntimeError):
    """Aggregate CSVs being merged do not share a schema."""


def fmt(value: float | None) -> str:
    """Fixed 6-decimal formatting; empty cell for missing values."""
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return ""
    return f"{value:.6f}"


class RunLog:
    """Sidecar log; the only artifact allowed to carry timestamps."""

    def __init__(self, path: Path | None):
        self.path = path
        self.lines: list[str] = []

    def write(self, message: str) -> None:
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        self.lines.append(f"{stamp} {message}")
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(self.lines[-1] + "\n")


# ---- dataset materialization ----


def test_difficulties(cfg: RunConfig) -> tuple[Difficulty, Difficulty]:
    """Occluded and occlusion-free variants of the test difficulty."""
    occluded = Difficulty(cfg.test_occlusion, cfg.test_blur, cfg.test_noise)
    clean = Difficulty(0.0, cfg.test_blur, cfg.test_noise)
    return occluded, clean


def build_test_set(cfg: RunConfig) -> list[ToyScene]:
    """Half-occluded, half-unoccluded test scenes (even ids carry the
    occluder) so occlusion-conditional analyses have both subsets."""
    rng = SeededRng(cfg.seed, STREAM_TEST_DATA)
    occluded, clean = test_difficulties(cfg)
    scenes = []
    for i in range(cfg.n_test):
        diff = occluded if (i % 2 == 0 and cfg.test_occlusion > 0) else clean
        from .evalbench import render_scene, sample_scene_params

        scenes.append(render_scene(sample_scene_params(rng.derive(i), diff, cfg.size)))
    return scenes


def build_train_set(cfg: RunConfig) -> list[ToyScene]:
    rng = SeededRng(cfg.seed, STREAM_TRAIN_DATA)
    diff = Difficulty(cfg.train_occlusion, cfg.train_blur, cfg.train_noise)
    return make_dataset(cfg.n_train, diff, rng, cfg.size)


def write_dataset(scenes: list[ToyScene], out_dir: Path, split: str, dump_images: bool) -> list[dict]:
    split_dir = out_dir / split
    split_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, scene in enumerate(scenes):
        image_path = split_dir / f"scene_{i:04d}.f64"
        gt_path = split_dir / f"gt_{i:04d}.f64"
        gridio.save_grid(image_path, scene.image)
        gridio.save_grid(gt_path, scene.gt_mask.astype(np.float64))
        if dump_images:
            gridio.save_pgm(split_dir / f"scene_{i:04d}.pgm", scene.image)
            gridio.save_pgm(split_dir / f"gt_{i:04d}.pgm", scene.gt_mask.astype(np.float64))
        rows.append({
            "scene_id": i,
            "split": split,
            "occluded": int(scene.params.get("occluder") is not None),
            "params": json.dumps(scene.params, sort_keys=True),
            "image_path": str(image_path),
            "gt_path": str(gt_path),
        })
    return rows


def load_dataset(data_dir: Path, split: str) -> list[ToyScene]:
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(str(manifest))
    scenes = []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            if row["split"] != split:
                continue
            image = gridio.load_grid(row["image_path"])
            gt = gridio.load_grid(row["gt_path"]).astype(np.uint8)
            scenes.append(ToyScene(image=image, gt_mask=gt, params=json.loads(row["params"])))
    return scenes


# ---- model materialization ----


def semantic_anchor(cfg: RunConfig) -> ConditionEmbedding:
    rng = SeededRng(cfg.seed, STREAM_SEMANTIC)
    return ConditionEmbedding(rng.normal(cfg.embedding_dim))


def scene_embedding(scene: ToyScene, dim: int) -> ConditionEmbedding:
    """Compact geometry descriptor used to condition the trainable denoiser."""
    p = scene.params
    size = p["size"]
    base = np.array([
        1.0,
        p["cy"] / size, p["cx"] / size,
        p["radius"] / size,
        p["fg_value"], p["bg_value"],
    ])
    values = np.zeros(dim)
    values[: min(dim, base.size)] = base[:dim]
    return ConditionEmbedding(values)


def build_denoiser(cfg: RunConfig, schedule: NoiseSchedule, train_scenes: list[ToyScene],
                   log: RunLog) -> Denoiser:
    rng = SeededRng(cfg.seed, STREAM_DENOISER)
    if cfg.denoiser == "analytic":
        mu = np.mean([s.image for s in train_scenes], axis=0)
        return AnalyticGaussianDenoiser(
            schedule, (cfg.size, cfg.size), cfg.embedding_dim, mu=mu, rng=rng,
            data_std=cfg.data_std,
        )
    dataset = [(s.image, scene_embedding(s, cfg.embedding_dim)) for s in train_scenes]
    train_cfg = DenoiserTrainConfig(
        epochs=cfg.denoiser_epochs, batch_size=cfg.denoiser_batch,
        drop_p=cfg.drop_p, lr=cfg.denoiser_lr,
    )
    model = ConvDenoiser(
        schedule, channels=1, embedding_dim=cfg.embedding_dim,
        hidden=cfg.denoiser_hidden, rng=rng.derive(1),
    )
    model, stats = train_toy_denoiser(dataset, schedule, rng.derive(2), train_cfg, model=model)
    log.write(f"denoiser trained: mse {stats.initial_mse:.4f} -> {stats.final_mse:.4f}")
    return model


def build_segmenter(cfg: RunConfig, train_scenes: list[ToyScene], log: RunLog) -> Segmenter:
    if cfg.segmenter == "threshold":
        return ThresholdSegmenter()
    rng = SeededRng(cfg.seed, STREAM_SEGMENTER)
    seg_cfg = SegTrainConfig(epochs=cfg.seg_epochs, lr=cfg.seg_lr, hidden=cfg.seg_hidden)
    model, losses = train_toy_segmenter(train_scenes, rng, seg_cfg)
    log.write(f"segmenter trained: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return model


def _relevance_fn(cfg: RunConfig, scene: ToyScene, denoiser: Denoiser,
                  semantic: ConditionEmbedding, segmenter: Segmenter):
    """Relevance provider for attention/hybrid masks, per configuration:
    model-consistency (default), the segmenter's foreground probability on
    the original image, or raw denoiser saliency."""
    if cfg.relevance_provider == "segmenter":
        relevance = segmenter.segment(scene.image)[:, :, 1]
        return lambda x, t: relevance
    if cfg.relevance_provider == "saliency":
        return lambda x, t: saliency_relevance(denoiser, x, t, semantic)
    return lambda x, t: consistency_relevance(denoiser, x, t, semantic)


def build_ttga_config(cfg: RunConfig) -> TtgaConfig:
    return TtgaConfig(
        tau=cfg.tau,
        inversion_interval=cfg.inversion_interval,
        n_augment=cfg.n_augment,
        guidance=GuidanceConfig(cfg.omega, cfg.lambda_c, 1.0),
        lambda_r_low=cfg.lambda_r_low,
        lambda_r_high=cfg.lambda_r_high,
        mask_policy=MaskPolicy(
            scheme=cfg.mask_scheme, p_m=cfg.p_m,
            relevance_quantile=cfg.relevance_quantile,
            resample_per_step=cfg.resample_masks_per_step,
        ),
        seed=cfg.seed,
        null_opt=NullOptConfig(
            lr=cfg.nulltext_lr, max_steps=cfg.nulltext_max_steps,
            early_stop=cfg.nulltext_early_stop,
        ),
        club_stride=cfg.club_stride,
        invert_with=cfg.invert_with,
    )


# ---- per-image evaluation ----


@dataclass
class ImageResult:
    image_id: int
    occluded: int
    rows: list[dict]
    aug_metadata: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    dumps: dict = field(default_factory=dict)


def _metric_block(mean_prob: np.ndarray, err_score: np.ndarray, gt: np.ndarray,
                  err_gt: np.ndarray) -> tuple[dict, list[str]]:
    flags = []
    fg = mean_prob[:, :, 1]
    pred = binarize(fg)
    row = {
        "dsc": dice(pred, gt),
        "auc": roc_auc(fg, gt),
        "hd95": hd95(pred, gt),
        "nsd": nsd(pred, gt),
        "err_dsc": dice(binarize(err_score), err_gt),
        "err_auc": roc_auc(err_score, err_gt),
        "err_nsd": nsd(binarize(err_score), err_gt),
    }
    if not np.isfinite(row["auc"]):
        flags.append("auc_degenerate")
    if not np.isfinite(row["err_auc"]):
        flags.append("err_auc_degenerate")
    return row, flags


def evaluate_image(
    image_id: int,
    scene: ToyScene,
    cfg: RunConfig,
    denoiser: Denoiser,
    semantic: ConditionEmbedding,
    segmenter: Segmenter,
) -> ImageResult:
    gt = scene.gt_mask
    occluded = int(scene.params.get("occluder") is not None)
    base_prob = segmenter.segment(scene.image)
    err_gt = error_ground_truth(base_prob[:, :, 1], gt)
    result = ImageResult(image_id=image_id, occluded=occluded, rows=[])

    per_method: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    methods = cfg.method_list()

    if "baseline" in methods:
        per_method["baseline"] = (base_prob, entropy_bits(base_prob))

    if "tta" in methods:
        rng = SeededRng(cfg.seed, STREAM_EVAL).derive(image_id).derive(SUBSTREAM_TTA)
        er = tta_baseline(segmenter, scene.image, cfg.tta_views, rng, cfg.tta_jitter)
        per_method["tta"] = (er.mean_probability, error_estimate_map(er))

    if "ttga" in methods:
        rng = SeededRng(cfg.seed, STREAM_EVAL).derive(image_id).derive(SUBSTREAM_TTGA)
        ttga_cfg = build_ttga_config(cfg)
        relevance_fn = _relevance_fn(cfg, scene, denoiser, semantic, segmenter)
        aset = generate_set(denoiser, scene.image, semantic, ttga_cfg, rng,
                            relevance_fn=relevance_fn)
        members = [segmenter.segment(a) for a in aset.augmented]
        er = ensemble(members)
        per_method["ttga"] = (er.mean_probability, error_estimate_map(er))
        for j, item in enumerate(aset.per_item):
            result.aug_metadata.append({
                "image_id": image_id, "aug_index": j,
                "lambda_r": item.lambda_r, "mask_stream": item.mask_stream,
                "reconstruction_loss": item.reconstruction_loss,
            })
        if cfg.dump_images:
            result.dumps["augmented"] = aset.augmented
            result.dumps["ttga_entropy"] = er.entropy_map

    for method in methods:
        mean_prob, err_score = per_method[method]
        row, flags = _metric_block(mean_prob, err_score, gt, err_gt)
        row.update({"image_id": image_id, "method": method, "occluded": occluded,
                    "flags": ";".join(flags)})
        result.rows.append(row)
        for flag in flags:
            result.flags.append(f"image {image_id} method {method}: {flag} (excluded from aggregates)")
    return result


def _aggregate(rows: list[dict], methods: list[str]) -> list[list[str]]:
    out = []
    for method in methods:
        mrows = [r for r in rows if r["method"] == method]
        for task, keys in (("segmentation", SEG_METRICS), ("error_estimation", ERR_METRICS)):
            record = [method, task]
            n_used = 0
            for metric in ("dsc", "auc", "hd95", "nsd"):
                if metric not in keys:
                    record.extend(["", ""])
                    continue
                col = "err_" + metric if task == "error_estimation" else metric
                vals = np.array([r[col] for r in mrows], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                n_used = max(n_used, vals.size)
                if vals.size == 0:
                    record.extend(["", ""])
                elif vals.size == 1:
                    record.extend([fmt(float(vals[0])), fmt(0.0)])
                else:
                    record.extend([fmt(float(vals.mean())), fmt(float(vals.std(ddof=1)))])
            record.append(str(n_used))
            out.append(record)
    return out


def run_evaluation(
    cfg: RunConfig,
    scenes: list[ToyScene],
    denoiser: Denoiser,
    semantic: ConditionEmbedding,
    segmenter: Segmenter,
    out_dir: Path,
    log: RunLog,
) -> list[dict]:
    """Evaluate all configured methods over the scenes; write per-image and
    aggregate CSVs. Output order is canonical (by image id) regardless of
    worker scheduling."""
    eval_dir = out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    def work(i: int) -> ImageResult:
        return evaluate_image(i, scenes[i], cfg, denoiser, semantic, segmenter)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, range(len(scenes))))
    else:
        results = [work(i) for i in range(len(scenes))]

    rows = [row for res in results for row in res.rows]
    with open(eval_dir / "per_image.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(PER_IMAGE_HEADER)
        for row in rows:
            writer.writerow([
                row["image_id"], row["method"], row["occluded"],
                fmt(row["dsc"]), fmt(row["auc"]), fmt(row["hd95"]), fmt(row["nsd"]),
                fmt(row["err_dsc"]), fmt(row["err_auc"]), fmt(row["err_nsd"]),
                row["flags"],
            ])

    with open(eval_dir / "aggregate.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(AGGREGATE_HEADER)
        writer.writerows(_aggregate(rows, cfg.method_list()))

    metadata = [m for res in results for m in res.aug_metadata]
    if metadata:
        with open(eval_dir / "augment_metadata.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["image_id", "aug_index", "lambda_r", "mask_stream",
                             "reconstruction_loss"])
            for m in metadata:
                writer.writerow([
                    m["image_id"], m["aug_index"], fmt(m["lambda_r"]),
                    m["mask_stream"], fmt(m["reconstruction_loss"]),
                ])

    if cfg.dump_images:
        dump_dir = eval_dir / "dump"
        dump_dir.mkdir(exist_ok=True)
        for res in results:
            for j, aug in enumerate(res.dumps.get("augmented", ())):
                gridio.save_pgm(dump_dir / f"aug_{res.image_id:04d}_{j:02d}.pgm", aug)
            if "ttga_entropy" in res.dumps:
                gridio.save_pgm(dump_dir / f"entropy_{res.image_id:04d}.pgm",
                                res.dumps["ttga_entropy"])

    for res in results:
        for line in res.flags:
            log.write(line)
    log.write(f"evaluated {len(scenes)} images, methods={cfg.methods}")
    return rows


# ---- commands ----


def cmd_make_data(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    rows = write_dataset(build_train_set(cfg), data_dir, "train", cfg.dump_images)
    rows += write_dataset(build_test_set(cfg), data_dir, "test", cfg.dump_images)
    with open(data_dir / "manifest.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["scene_id", "split", "occluded", "params", "image_path", "gt_path"]
        )
        writer.writeheader()
        writer.writerows(rows)
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    log.write(f"wrote dataset: {cfg.n_train} train / {cfg.n_test} test")
    return data_dir


def _train_scenes(cfg: RunConfig) -> list[ToyScene]:
    if cfg.data_dir:
        return load_dataset(Path(cfg.data_dir), "train")
    return build_train_set(cfg)


def _test_scenes(cfg: RunConfig) -> list[ToyScene]:
    if cfg.data_dir:
        return load_dataset(Path(cfg.data_dir), "test")
    return build_test_set(cfg)


def cmd_train_denoiser(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    models_dir = out_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    schedule = build_schedule(cfg.total_steps, cfg.beta_start, cfg.beta_end)
    model = build_denoiser(cfg, schedule, _train_scenes(cfg), log)
    ckpt = models_dir / "denoiser.ckpt"
    save_checkpoint(ckpt, model)
    semantic = semantic_anchor(cfg)
    gridio.save_grid(models_dir / "semantic.f64", semantic.values.reshape(1, -1))
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    log.write(f"saved denoiser checkpoint: {ckpt}")
    return ckpt


def cmd_train_segmenter(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    models_dir = out_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    model = build_segmenter(cfg, _train_scenes(cfg), log)
    ckpt = models_dir / "segmenter.ckpt"
    save_segmenter(ckpt, model)
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    log.write(f"saved segmenter checkpoint: {ckpt}")
    return ckpt


def _load_models(cfg: RunConfig, log: RunLog):
    schedule = build_schedule(cfg.total_steps, cfg.beta_start, cfg.beta_end)
    train_scenes = None
    if cfg.denoiser_checkpoint:
        if not Path(cfg.denoiser_checkpoint).exists():
            raise FileNotFoundError(cfg.denoiser_checkpoint)
        denoiser = load_checkpoint(cfg.denoiser_checkpoint, schedule)
    else:
        train_scenes = _train_scenes(cfg)
        denoiser = build_denoiser(cfg, schedule, train_scenes, log)
    if cfg.semantic_embedding:
        if not Path(cfg.semantic_embedding).exists():
            raise FileNotFoundError(cfg.semantic_embedding)
        semantic = ConditionEmbedding(gridio.load_grid(cfg.semantic_embedding).ravel())
    else:
        semantic = semantic_anchor(cfg)
    if cfg.segmenter_checkpoint:
        if not Path(cfg.segmenter_checkpoint).exists():
            raise FileNotFoundError(cfg.segmenter_checkpoint)
        segmenter = load_segmenter(cfg.segmenter_checkpoint)
    else:
        if train_scenes is None and cfg.segmenter == "trained":
            train_scenes = _train_scenes(cfg)
        segmenter = build_segmenter(cfg, train_scenes or [], log)
    return schedule, denoiser, semantic, segmenter


def cmd_augment(cfg: RunConfig, count: int = 4) -> Path:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    _, denoiser, semantic, segmenter = _load_models(cfg, log)
    scenes = _test_scenes(cfg)[:count]
    aug_dir = out_dir / "augment"
    aug_dir.mkdir(exist_ok=True)
    ttga_cfg = build_ttga_config(cfg)
    with open(aug_dir / "metadata.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "aug_index", "lambda_r", "mask_stream",
                         "reconstruction_loss"])
        for i, scene in enumerate(scenes):
            rng = SeededRng(cfg.seed, STREAM_EVAL).derive(i).derive(SUBSTREAM_TTGA)
            relevance_fn = _relevance_fn(cfg, scene, denoiser, semantic, segmenter)
            image_cfg = ttga_cfg
            if cfg.nulltext_trace:
                traced = NullOptConfig(
                    lr=cfg.nulltext_lr, max_steps=cfg.nulltext_max_steps,
                    early_stop=cfg.nulltext_early_stop,
                    trace_path=str(aug_dir / f"nulltext_trace_{i:04d}.csv"),
                )
                image_cfg = replace(ttga_cfg, null_opt=traced)
            aset = generate_set(denoiser, scene.image, semantic, image_cfg, rng,
                                relevance_fn=relevance_fn)
            gridio.save_grid(aug_dir / f"original_{i:04d}.f64", aset.original)
            for j, aug in enumerate(aset.augmented):
                gridio.save_grid(aug_dir / f"aug_{i:04d}_{j:02d}.f64", aug)
                if cfg.dump_images:
                    gridio.save_pgm(aug_dir / f"aug_{i:04d}_{j:02d}.pgm", aug)
            for j, item in enumerate(aset.per_item):
                writer.writerow([i, j, fmt(item.lambda_r), item.mask_stream,
                                 fmt(item.reconstruction_loss)])
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    log.write(f"augmented {len(scenes)} images x {cfg.n_augment}")
    return aug_dir


def cmd_evaluate(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    _, denoiser, semantic, segmenter = _load_models(cfg, log)
    scenes = _test_scenes(cfg)
    run_evaluation(cfg, scenes, denoiser, semantic, segmenter, out_dir, log)
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    return out_dir / "eval" / "aggregate.csv"


def cmd_full_pipeline(cfg: RunConfig) -> Path:
    """Dataset -> models -> evaluation, all from one seed, all artifacts under
    the output directory."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")
    data_dir = cmd_make_data(cfg)
    train_scenes = load_dataset(data_dir, "train")
    test_scenes = load_dataset(data_dir, "test")
    schedule = build_schedule(cfg.total_steps, cfg.beta_start, cfg.beta_end)
    models_dir = out_dir / "models"
    models_dir.mkdir(exist_ok=True)
    denoiser = build_denoiser(cfg, schedule, train_scenes, log)
    save_checkpoint(models_dir / "denoiser.ckpt", denoiser)
    semantic = semantic_anchor(cfg)
    gridio.save_grid(models_dir / "semantic.f64", semantic.values.reshape(1, -1))
    segmenter = build_segmenter(cfg, train_scenes, log)
    save_segmenter(models_dir / "segmenter.ckpt", segmenter)
    run_evaluation(cfg, test_scenes, denoiser, semantic, segmenter, out_dir, log)
    write_resolved_config(cfg, out_dir / "resolved-config.txt")
    log.write("full pipeline complete")
    return out_dir / "eval" / "aggregate.csv"


# ---- cross-run report ----


def _read_aggregate(run_dir: Path) -> tuple[list[str], list[list[str]]]:
    path = run_dir / "eval" / "aggregate.csv"
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, list(reader)


def compare_report(run_dirs: list[str], out_path: str, plot: bool = False) -> Path:
    """Merge aggregate tables keyed by (method, task, metric); one value
    column per run plus mean and sample stddev across runs."""
    if not run_dirs:
        raise ConfigError("compare_report needs at least one run directory")
    labels, tables = [], []
    ref_header = None
    for d in run_dirs:
        run_dir = Path(d)
        header, rows = _read_aggregate(run_dir)
        if ref_header is None:
            ref_header = header
        elif header != ref_header:
            raise SchemaMismatch(
                f"{run_dir}: aggregate schema {header} != {ref_header}"
            )
        labels.append(run_dir.name)
        tables.append({(r[0], r[1]): r for r in rows})

    metric_cols = [(2, "dsc"), (4, "auc"), (6, "hd95"), (8, "nsd")]
    keys = list(tables[0].keys())
    merged_rows = []
    for key in keys:
        for col, metric in metric_cols:
            values = []
            for table in tables:
                row = table.get(key)
                if row is None:
                    raise SchemaMismatch(f"run missing aggregate row {key}")
                values.append(row[col])
            if all(v == "" for v in values):
                continue
            floats = [float(v) for v in values if v != ""]
            mean = float(np.mean(floats))
            std = float(np.std(floats, ddof=1)) if len(floats) > 1 else 0.0
            merged_rows.append([key[0], key[1], metric, *values, fmt(mean), fmt(std)])

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "task", "metric", *labels, "mean", "std"])
        writer.writerows(merged_rows)

    if plot:
        _write_plots(out_path.parent, labels, merged_rows)
    return out_path


def _write_plots(out_dir: Path, labels: list[str], merged_rows: list[list[str]]) -> None:
    """Flat SVG polyline charts, one file per (task, metric)."""
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    for row in merged_rows:
        method, task, metric = row[0], row[1], row[2]
        values = [float(v) if v != "" else float("nan") for v in row[3:3 + len(labels)]]
        groups.setdefault((task, metric), {})[method] = values

    colors = {"baseline": "#888888", "tta": "#1f77b4", "ttga": "#d62728"}
    width, height, margin = 480, 300, 50
    for (task, metric), series in sorted(groups.items()):
        all_vals = [v for vs in series.values() for v in vs if np.isfinite(v)]
        if not all_vals:
            continue
        lo, hi = min(all_vals), max(all_vals)
        span = (hi - lo) or 1.0
        lo -= 0.05 * span
        hi += 0.05 * span
        n = len(labels)
        def sx(i):
            return margin + (width - 2 * margin) * (i / max(n - 1, 1))
        def sy(v):
            return height - margin - (height - 2 * margin) * ((v - lo) / (hi - lo))
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<text x="{width/2}" y="20" text-anchor="middle" font-size="13">'
            f"{task} / {metric}</text>",
            f'<line x1="{margin}" y1="{height-margin}" x2="{width-margin}" '
            f'y2="{height-margin}" stroke="black"/>',
            f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height-margin}" '
            f'stroke="black"/>',
            f'<text x="{margin-8}" y="{sy(hi-0.05*span)+4}" text-anchor="end" '
            f'font-size="10">{hi - 0.05 * span:.1f}</text>',
            f'<text x="{margin-8}" y="{sy(lo+0.05*span)+4}" text-anchor="end" '
            f'font-size="10">{lo + 0.05 * span:.1f}</text>',
        ]
        for i, label in enumerate(labels):
            parts.append(
                f'<text x="{sx(i)}" y="{height-margin+16}" text-anchor="middle" '
                f'font-size="10">{label}</text>'
            )
        for mi, (method, values) in enumerate(sorted(series.items())):
            color = colors.get(method, "#2ca02c")
            points = " ".join(
                f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(values) if np.isfinite(v)
            )
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{points}"/>'
            )
            parts.append(
                f'<text x="{width-margin+4}" y="{margin + 14 * mi}" font-size="10" '
                f'fill="{color}">{method}</text>'
            )
        parts.append("</svg>")
        (out_dir / f"plot_{task}_{metric}.svg").write_text("\n".join(parts))
