"""Training, inference, evaluation and ablation on top of the library pieces.

Per-item randomness is derived from ``(seed, crc32(image_id), epoch)`` so
results do not depend on iteration order or on how work is split.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dips.backbones import (
    AttentionContext,
    BackboneConfig,
    PretrainedAttentionProvider,
    PretrainedClassifier,
    SyntheticAttentionProvider,
    SyntheticClassifier,
    weights_digest,
)
from dips.config import RunConfig
from dips.data import ManifestDataset, Sample, augment
from dips.errors import ConfigurationError, InvalidInputError, TrainingAbortedError
from dips.harvest import HarvestConfig, Proposal, harvest_proposals
from dips.losses import (
    AffinityParams,
    LossWeights,
    classifier_alignment_loss,
    crf_loss,
    loss_set_tag,
    parse_loss_set,
    partial_cross_entropy,
    total_loss,
)
from dips.metrics import (
    IOU_THRESHOLDS,
    EvalRecord,
    box_accuracy_curve,
    evaluate_records,
    pxap,
)
from dips.model import ModelConfig, UNet, load_checkpoint, localize, save_checkpoint
from dips.sampling import BG, FG, IGNORE, PseudoLabelMap, SamplerConfig, build_pseudo_labels

log = logging.getLogger(__name__)


def id_hash(image_id):
    return zlib.crc32(str(image_id).encode())


def item_seed(seed, image_id, epoch, stream):
    return [int(seed), id_hash(image_id), int(epoch), int(stream)]


# --------------------------------------------------------------------------
# providers


def dataset_meta(cfg):
    path = Path(cfg.data.root) / "dataset.json"
    if not path.is_file():
        raise ConfigurationError(f"dataset metadata not found: {path}")
    return json.loads(path.read_text())


def build_classifier(cfg, meta):
    c = cfg.classifier
    k = int(meta["num_classes"])
    if c.provider == "synthetic":
        size = cfg.data.image_size
        ref = c.ref_area if c.ref_area is not None else 80.0 * size * size / 64 ** 2
        return SyntheticClassifier(meta["class_colors"], temperature=c.temperature or 0.1, ref_area=ref)
    if c.provider == "pretrained":
        return PretrainedClassifier.from_checkpoint(
            cfg.resolve_path(c.checkpoint), c.arch, k, c.temperature or 1.0)
    raise ConfigurationError(f"unknown classifier provider {c.provider!r}")


def check_compatibility(cfg, meta, classifier):
    """Dataset, backbone and classifier must agree before any training starts."""
    size = cfg.data.image_size
    native = meta.get("spec", {}).get("image_size")
    if not cfg.data.augment and native is not None and native != size:
        raise ConfigurationError(f"dataset images are {native}px but data.image_size is {size}")
    if cfg.data.augment and cfg.data.resize_to < size:
        raise ConfigurationError("data.resize_to must be >= data.image_size")
    if size % cfg.backbone.patch_size:
        raise ConfigurationError(f"image size {size} is not a multiple of patch size {cfg.backbone.patch_size}")
    if classifier.num_classes != int(meta["num_classes"]):
        raise ConfigurationError(f"classifier has {classifier.num_classes} classes, dataset has {meta['num_classes']}")


def backbone_config(cfg):
    b = cfg.backbone
    size = cfg.data.image_size
    return BackboneConfig(b.patch_size, b.num_blocks, b.embed_dim, b.num_heads, (size, size),
                          1.0, b.num_selected)


def build_attention_provider(cfg):
    b = cfg.backbone
    if b.provider == "synthetic":
        return SyntheticAttentionProvider(backbone_config(cfg), b.noise_sigma, b.distractor_count)
    if b.provider == "pretrained":
        return PretrainedAttentionProvider.from_checkpoint(cfg.resolve_path(b.checkpoint), backbone_config(cfg))
    raise ConfigurationError(f"unknown backbone provider {b.provider!r}")


def harvest_config(cfg, num_classes):
    h = cfg.harvest
    size = cfg.data.image_size
    return HarvestConfig.for_image(size, size, num_classes, h.min_region_size_frac, h.top_p,
                                   h.min_score, h.blur_sigma, h.seed)


def sampler_config(cfg):
    s = cfg.sampler
    size = cfg.data.image_size
    return SamplerConfig.for_image(size, size, s.fg_top_frac, s.bg_top_frac, s.fg_count, s.bg_count, s.seed)


def model_config(cfg):
    m = cfg.model
    size = cfg.data.image_size
    return ModelConfig(m.encoder_depth, m.base_channels, m.max_channels, (size, size), True, m.init_seed)


# --------------------------------------------------------------------------
# harvesting one item


@dataclass
class PreparedItem:
    image_id: str
    image: np.ndarray
    label: int
    pseudo: PseudoLabelMap
    selected: Proposal
    top_p: list

    def harvest_record(self):
        p = self.selected
        return {
            "image_id": self.image_id,
            "map_index": p.map_index,
            "bbox": list(p.bbox),
            "score": p.score,
            "is_fallback": p.is_fallback,
            "top_p": [[q.map_index, list(q.bbox), q.score] for q in self.top_p],
            "fg": self.pseudo.fg_pixels.tolist(),
            "bg": self.pseudo.bg_pixels.tolist(),
        }


def _geometric_labels(labels, aug_seed, cfg):
    """Carry a label grid through the same resize/crop/flip as the image."""
    grid = np.where(labels == IGNORE, 255, labels).astype(np.uint8)
    s = Sample("", np.zeros(labels.shape + (3,), np.float32), 0, [], None, grid)
    out = augment(s, np.random.default_rng(aug_seed), cfg.data.image_size, cfg.data.resize_to).instances
    lab = np.where(out == 255, IGNORE, out).astype(np.int8)
    fg = np.argwhere(lab == FG)
    bg = np.argwhere(lab == BG)
    return PseudoLabelMap(lab, fg, bg)


class ItemPreparer:
    """Augment, harvest a proposal and sample pseudo labels for one training image."""

    def __init__(self, cfg, provider, classifier, num_classes):
        self.cfg = cfg
        self.provider = provider
        self.classifier = classifier
        self.hcfg = harvest_config(cfg, num_classes)
        self.scfg = sampler_config(cfg)
        self.stats = Counter()

    def __call__(self, sample, epoch):
        cfg = self.cfg
        aug_seed = item_seed(cfg.train.seed, sample.image_id, epoch, 0)
        if cfg.data.augment:
            view = augment(sample, np.random.default_rng(aug_seed), cfg.data.image_size, cfg.data.resize_to)
        else:
            view = sample
        source = view if cfg.train.sample_after_augment else sample
        ctx = AttentionContext(source.instances, seed=tuple(item_seed(cfg.harvest.seed, sample.image_id, epoch, 1)))
        stack = self.provider.get_attention_stack(source.image, ctx)
        harvest = harvest_proposals(
            source.image, stack, sample.label, self.hcfg, self.classifier,
            rng=np.random.default_rng(item_seed(cfg.harvest.seed, sample.image_id, epoch, 2)),
            stats=self.stats)
        pseudo = build_pseudo_labels(
            stack.maps[harvest.selected.map_index], harvest.selected, self.scfg,
            rng=np.random.default_rng(item_seed(cfg.sampler.seed, sample.image_id, epoch, 3)))
        if source is not view and cfg.data.augment:
            pseudo = _geometric_labels(pseudo.labels, aug_seed, cfg)
        return PreparedItem(sample.image_id, view.image, sample.label, pseudo,
                            harvest.selected, harvest.top_p)


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _pseudo_from_record(row, shape):
    labels = np.full(shape, IGNORE, dtype=np.int8)
    fg = np.asarray(row["fg"], dtype=np.int64).reshape(-1, 2)
    bg = np.asarray(row["bg"], dtype=np.int64).reshape(-1, 2)
    labels[bg[:, 0], bg[:, 1]] = BG
    labels[fg[:, 0], fg[:, 1]] = FG
    return PseudoLabelMap(labels, fg, bg)


def harvest_cache_path(cache_dir, epoch):
    return Path(cache_dir) / f"harvest_epoch{epoch:03d}.jsonl"


def harvest_epoch(cfg, epoch, out_path=None):
    """Harvest every training image for ``epoch``; optionally cache as JSON lines."""
    meta = dataset_meta(cfg)
    ds = _load_split(cfg, "train")
    prep = ItemPreparer(cfg, build_attention_provider(cfg), build_classifier(cfg, meta), meta["num_classes"])
    rows = [prep(s, epoch).harvest_record() for s in ds]
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out_path, rows)
    return rows


# --------------------------------------------------------------------------
# training


def _load_split(cfg, split, limit=None):
    ds = ManifestDataset(cfg.data.root, split)
    n = len(ds) if limit is None else min(limit, len(ds))
    return [ds[i] for i in range(n)]


def _to_tensor(images):
    return torch.as_tensor(np.stack(images).transpose(0, 3, 1, 2).copy(), dtype=torch.float32)


def predict_maps(model, images, batch_size=32):
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(_to_tensor(images[i:i + batch_size]))[:, 0].double().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def validation_pxap(model, samples):
    maps = predict_maps(model, [s.image for s in samples])
    records = [EvalRecord(s.image_id, s.boxes, np.clip(m, 0, 1), s.mask) for s, m in zip(samples, maps)]
    return pxap(records)


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    last_checkpoint: Path
    history: list
    stats: dict
    frozen_digests: dict = field(default_factory=dict)


def train(cfg, out_dir, resume=None, on_step=None):
    """Train the localization network; return a :class:`TrainResult`.

    Only the U-Net's parameters are handed to the optimizer; attention
    provider and classifier digests are recorded before and after and must
    match. Writes ``best.pt`` (best validation PxAP), ``last.pt``,
    ``train_log.jsonl`` and ``config.txt`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    torch.manual_seed(cfg.train.seed)
    meta = dataset_meta(cfg)
    k = int(meta["num_classes"])
    classifier = build_classifier(cfg, meta)
    check_compatibility(cfg, meta, classifier)
    provider = build_attention_provider(cfg)
    prep = ItemPreparer(cfg, provider, classifier, k)

    model = UNet(model_config(cfg))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, cfg.optim.decay_epoch, cfg.optim.decay_factor)
    start_epoch = 0
    history = []
    best = (-1.0, None)
    if resume is not None:
        model, payload = load_checkpoint(resume, model_config(cfg))
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        optimizer.load_state_dict(payload["optimizer_state"])
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, cfg.optim.decay_epoch, cfg.optim.decay_factor)
        scheduler.load_state_dict(payload["extra"]["scheduler"])
        torch.set_rng_state(payload["rng_state"]["torch"])
        start_epoch = payload["epoch"] + 1
        history = list(payload["extra"].get("history", []))
        best = (payload["extra"].get("best_pxap", -1.0), payload["extra"].get("best_state"))

    model_param_ids = {id(p) for p in model.parameters()}
    losses = parse_loss_set(cfg.loss.losses)
    weights = LossWeights(cfg.loss.lambda_cls, cfg.loss.lambda_cpa, cfg.loss.lambda_crf).restricted(losses)
    affinity = AffinityParams(cfg.loss.crf_sigma_xy, cfg.loss.crf_sigma_rgb)
    tag = loss_set_tag(losses)

    train_set = _load_split(cfg, "train", cfg.train.max_train_images)
    val_set = _load_split(cfg, "val") if (Path(cfg.data.root) / "val.txt").is_file() else []
    digests = {"classifier": weights_digest(classifier)}
    if isinstance(provider, PretrainedAttentionProvider):
        digests["backbone"] = weights_digest(provider.model)
    cache_dir = cfg.harvest.cache_dir

    bs = cfg.optim.batch_size
    for epoch in range(start_epoch, cfg.optim.epochs):
        t0 = time.time()
        model.train()
        order = np.random.default_rng([cfg.train.seed, epoch, 7]).permutation(len(train_set))
        cache = None
        if cache_dir and harvest_cache_path(cache_dir, epoch).is_file():
            with open(harvest_cache_path(cache_dir, epoch)) as fh:
                cache = {row["image_id"]: row for row in map(json.loads, fh)}
        sums, steps, harvest_rows = Counter(), 0, {}
        before = Counter(prep.stats)
        for start in range(0, len(order), bs):
            items = []
            for i in order[start:start + bs]:
                s = train_set[i]
                if cache is not None:
                    row = cache[s.image_id]
                    view = augment(s, np.random.default_rng(item_seed(cfg.train.seed, s.image_id, epoch, 0)),
                                   cfg.data.image_size, cfg.data.resize_to) if cfg.data.augment else s
                    items.append((view.image, s.label, _pseudo_from_record(row, view.image.shape[:2])))
                    continue
                item = prep(s, epoch)
                if cfg.train.log_harvest:
                    harvest_rows[s.image_id] = item.harvest_record()
                items.append((item.image, item.label, item.pseudo))
            x = _to_tensor([it[0] for it in items])
            labels = torch.as_tensor(np.stack([it[2].labels for it in items]).astype(np.int64))
            y = torch.as_tensor([it[1] for it in items], dtype=torch.long)

            probs = model(x)
            terms = {}
            if "cpa" in losses:
                terms["cpa"] = partial_cross_entropy(probs, labels)
            if "crf" in losses:
                terms["crf"] = crf_loss(x, probs, affinity, cfg.loss.crf_dense_max_pixels)
            if "cls" in losses:
                terms["cls"] = classifier_alignment_loss(x, probs[:, 0], y, classifier)
            total, parts = total_loss(terms, weights)
            if not all(id(p) in model_param_ids for g in optimizer.param_groups for p in g["params"]):
                raise RuntimeError("optimizer holds parameters outside the localization network")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            for name, v in parts.items():
                sums[name] += v
            sums["total"] += float(total.detach())
            steps += 1
            if on_step is not None:
                on_step(epoch, steps, parts)
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()

        if harvest_rows:
            _write_jsonl(out / f"harvest_epoch{epoch:03d}.jsonl",
                         [harvest_rows[s.image_id] for s in train_set])
        entry = {"epoch": epoch, "loss_set": tag, "lr": lr}
        entry.update({name: v / steps for name, v in sorted(sums.items())})
        entry["fallbacks"] = prep.stats["fallbacks"] - before["fallbacks"]
        entry["degenerate_maps"] = prep.stats["degenerate_maps"] - before["degenerate_maps"]
        last_epoch = epoch == cfg.optim.epochs - 1
        if val_set and (last_epoch or (epoch + 1) % cfg.train.val_every == 0):
            entry["val_pxap"] = validation_pxap(model, val_set)
            if entry["val_pxap"] > best[0]:
                best = (entry["val_pxap"], copy.deepcopy(model.state_dict()))
        history.append(entry)
        log.info("epoch %d %s (%.1fs)", epoch, {k: round(v, 4) if isinstance(v, float) else v
                                              for k, v in entry.items()}, time.time() - t0)
        extra = {"run_config": cfg.to_flat(), "dataset_meta": meta, "scheduler": scheduler.state_dict(),
                 "history": history, "best_pxap": best[0], "best_state": best[1], "loss_set": tag}
        save_checkpoint(out / "last.pt", model, optimizer, epoch, extra)

    with open(out / "train_log.jsonl", "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    final = UNet(model_config(cfg))
    final.load_state_dict(best[1] if best[1] is not None else model.state_dict())
    extra = {"run_config": cfg.to_flat(), "dataset_meta": meta, "history": history,
             "best_pxap": best[0], "loss_set": tag}
    save_checkpoint(out / "best.pt", final, None, cfg.optim.epochs - 1, extra,
                    rng_state={"torch": torch.get_rng_state()})

    after = {"classifier": weights_digest(classifier)}
    if "backbone" in digests:
        after["backbone"] = weights_digest(provider.model)
    if after != digests:
        raise TrainingAbortedError("frozen", "frozen backbone/classifier weights changed during training")
    return TrainResult(out, out / "best.pt", out / "last.pt", history, dict(prep.stats), digests)


# --------------------------------------------------------------------------
# inference


class Predictor:
    """Inference path: localization network plus frozen classifier, nothing else."""

    def __init__(self, model, classifier):
        self.model = model.eval()
        self.classifier = classifier

    @classmethod
    def from_checkpoint(cls, path):
        model, payload = load_checkpoint(path)
        cfg = RunConfig.from_flat(payload["extra"]["run_config"])
        classifier = build_classifier(cfg, payload["extra"]["dataset_meta"])
        return cls(model, classifier)

    def predict(self, image):
        m = localize(self.model, image)
        probs = self.classifier.output(image).probabilities
        return m.fg, probs


def infer(checkpoint, manifest, out_dir):
    """Write ``<image_id>.npy`` foreground maps and ``scores.csv`` class probabilities."""
    if not Path(checkpoint).is_file():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    predictor = Predictor.from_checkpoint(checkpoint)
    ds = ManifestDataset(Path(manifest).parent, manifest=manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = [ds[i] for i in range(len(ds))]
    maps = predict_maps(predictor.model, [s.image for s in samples])
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id"] + [f"p{k}" for k in range(predictor.classifier.num_classes)])
        for s, m in zip(samples, maps):
            np.save(out / f"{s.image_id}.npy", np.clip(m, 0.0, 1.0).astype(np.float32))
            probs = predictor.classifier.output(s.image).probabilities
            writer.writerow([s.image_id] + [repr(float(p)) for p in probs])
    return out


# --------------------------------------------------------------------------
# evaluation


def load_records(pred_dir, manifest):
    pred_dir = Path(pred_dir)
    ds = ManifestDataset(Path(manifest).parent, manifest=manifest)
    scores = {}
    if (pred_dir / "scores.csv").is_file():
        with open(pred_dir / "scores.csv") as fh:
            for row in csv.DictReader(fh):
                iid = row.pop("image_id")
                scores[iid] = np.array([float(row[k]) for k in sorted(row, key=lambda c: int(c[1:]))])
    ids = [r.image_id for r in ds.records]
    missing = [i for i in ids if not (pred_dir / f"{i}.npy").is_file()]
    if missing:
        raise InvalidInputError(f"predictions missing for ids: {', '.join(missing)}")
    records = []
    for i, r in enumerate(ds.records):
        mask = ds[i].mask
        pm = np.load(pred_dir / f"{r.image_id}.npy").astype(np.float64)
        records.append(EvalRecord(r.image_id, r.boxes, pm, mask, scores.get(r.image_id), r.class_index))
    return records


def write_metrics(path, metrics, tag=""):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss_set", "metric", "value"])
        for name, value in metrics.items():
            writer.writerow([tag, name, repr(float(value))])


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {r["metric"]: float(r["value"]) for r in rows}, (rows[0]["loss_set"] if rows else "")


def write_boxacc_sweep(path, records):
    grid, acc = box_accuracy_curve(records, IOU_THRESHOLDS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold"] + [f"boxacc@{d:g}" for d in IOU_THRESHOLDS])
        for t, row in zip(grid, acc):
            writer.writerow([f"{t:.6g}"] + [repr(float(v)) for v in row])


def evaluate(pred_dir, manifest, out_dir, tag="", plot=True):
    """Compute all metrics and write ``metrics.csv``, ``sweep_maxboxacc.csv`` and a plot."""
    records = load_records(pred_dir, manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate_records(records)
    write_metrics(out / "metrics.csv", metrics, tag)
    write_boxacc_sweep(out / "sweep_maxboxacc.csv", records)
    if plot:
        from dips.plotting import plot_sweep

        plot_sweep(out / "sweep_maxboxacc.csv", out / "sweep_maxboxacc.png")
    return metrics


def run_experiment(cfg, out_dir):
    """Train, infer on the test split and evaluate; returns the metrics dict."""
    out = Path(out_dir)
    result = train(cfg, out / "train")
    test_manifest = Path(cfg.data.root) / "test.txt"
    infer(result.checkpoint, test_manifest, out / "predictions")
    tag = loss_set_tag(parse_loss_set(cfg.loss.losses))
    return evaluate(out / "predictions", test_manifest, out / "eval", tag=tag)


def ablate(cfg, loss_sets, seeds, out_dir):
    """Run every loss set for every seed; writes ``ablation.csv``."""
    out = Path(out_dir)
    rows = []
    for losses in loss_sets:
        tag = loss_set_tag(parse_loss_set(losses))
        for seed in seeds:
            run_cfg = cfg.updated({"loss.losses": tag, "train.seed": seed, "harvest.seed": seed,
                                   "sampler.seed": seed, "model.init_seed": seed})
            metrics = run_experiment(run_cfg, out / f"{tag}_seed{seed}")
            rows.append({"loss_set": tag, "seed": seed, **metrics})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
