"""Two-phase training: TA-SegNet on slices, then the joint classifier on volumes."""
import configparser
import json
import logging
import random
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch

from .checkpoint import ParameterStore
from .data import HU_WINDOW, extract_slices, make_folds, prepare_slices, resample_slices
from .errors import ConfigError, DivergenceError, InvalidInputError, MissingAnnotationError
from .losses import LossConfig, focal_tversky, joint_loss
from .metrics import MetricsReport, aggregate, cls_scores, confusion, seg_scores
from .segnet import SegNetConfig, TASegNet
from .volumetric import DILATION_RATES, JointClassifier

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "seg"
    lr0: float = 1e-5
    decay_rate: float = 0.99
    decay_every: int = 10
    max_epochs: int = 200
    max_steps: int = 0               # 0: no step cap
    loss_threshold: float = 0.05
    batch_size: int = 8              # slices per phase-1 step
    volume_batch_size: int = 2       # volumes per phase-2 step
    seed: int = 0
    threads: int = 1
    dtype: str = "float32"
    # TA-SegNet
    ablation: str = "V7"
    levels: int = 4
    base_channels: int = 16
    fused_channels: int = 16
    # phase 2
    slice_budget: int = 8
    rf_stages: int = 3
    rf_cap: int = 128
    fusion_width: int = 64
    hidden_width: int = 64
    freeze_segnet: bool = True
    # focal Tversky
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    focal_gamma: float = 4 / 3
    smooth: float = 1.0
    window_lo: float = HU_WINDOW[0]
    window_hi: float = HU_WINDOW[1]
    log_path: str = ""
    diagnostic_path: str = ""

    def __post_init__(self):
        if self.phase not in ("seg", "joint"):
            raise ConfigError(f"phase must be 'seg' or 'joint', got {self.phase!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.batch_size < 1 or self.volume_batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch sizes and max_epochs must be positive")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def loss_config(self):
        return LossConfig(self.tversky_alpha, self.tversky_beta, self.focal_gamma, self.smooth)

    @property
    def window(self):
        return (self.window_lo, self.window_hi)

    def segnet_config(self, input_size):
        channels = tuple(self.base_channels * 2 ** i for i in range(self.levels))
        return SegNetConfig.ablation(self.ablation, levels=self.levels, channels=channels,
                                     fused_channels=self.fused_channels, input_size=tuple(input_size))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_text(cls, text, **overrides):
        """Flat ``key = value`` lines (``#`` comments); ``overrides`` win over the text."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[config]\n" + text)
        except configparser.Error as e:
            raise ConfigError(f"bad config file: {e}")
        raw = dict(parser["config"])
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for k, v in raw.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = _coerce(k, v, types[k])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def _coerce(key, value, typ):
    value = value.strip()
    try:
        if typ in (bool, "bool"):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}")
    return value


def learning_rate(epoch, cfg=TrainConfig()):
    """Step decay: ``lr0 * decay_rate ** (epoch // decay_every)``."""
    return cfg.lr0 * cfg.decay_rate ** (epoch // cfg.decay_every)


def seed_everything(seed, threads=1):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


class TrainLog:
    """Append-only list of dict records, mirrored to a JSON-lines file when ``path`` is set."""

    def __init__(self, path=""):
        self.records = []
        self.path = path
        if path:
            open(path, "w").close()

    def append(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def epochs(self, phase=None):
        return [r for r in self.records if r.get("kind") == "epoch" and (phase is None or r["phase"] == phase)]

    def __len__(self):
        return len(self.records)


@dataclass
class TrainResult:
    model: torch.nn.Module
    store: ParameterStore
    log: TrainLog
    steps: int


class CovTANet(torch.nn.Module):
    """TA-SegNet plus the joint classifier fed by its fusion maps."""

    def __init__(self, segnet, classifier=None):
        super().__init__()
        self.segnet = segnet
        self.classifier = classifier

    def segment(self, slices):
        return self.segnet(slices)

    def fusion_maps(self, volumes):
        """(V, s, 1, H, W) slice stacks -> (V, s, C, H, W) fusion maps."""
        v, s = volumes.shape[:2]
        f = self.segnet.features(volumes.reshape(v * s, *volumes.shape[2:]))
        return f.reshape(v, s, *f.shape[1:])

    def forward(self, volumes):
        if self.classifier is None:
            raise ConfigError("model has no classifier; run joint training first")
        return self.classifier(self.fusion_maps(volumes))

    predict = forward


# ---------------------------------------------------------------- tensors from volumes

def slice_tensors(volumes, cfg=TrainConfig(), require_masks=True):
    """Stack every slice of every volume into (n, 1, H, W) images and masks."""
    images, masks = [], []
    for v in volumes:
        if require_masks and v.masks is None:
            raise MissingAnnotationError(f"{v.id}: phase-1 training needs lesion masks")
        x = prepare_slices(v.slices, cfg.window)
        for i, (_, m) in enumerate(extract_slices(v)):
            images.append(x[i])
            masks.append(m if m is not None else np.zeros_like(x[i], np.uint8))
    if not images:
        raise InvalidInputError("no slices to train on")
    img = torch.from_numpy(np.stack(images)[:, None]).to(cfg.torch_dtype)
    msk = torch.from_numpy(np.stack(masks)[:, None].astype(np.float32)).to(cfg.torch_dtype)
    return img, msk


def volume_tensors(volumes, cfg=TrainConfig()):
    """(V, s, 1, H, W) slice stacks resampled to the slice budget, plus label tensors."""
    stacks, yd, ys = [], [], []
    for v in volumes:
        r = resample_slices(v, cfg.slice_budget)
        stacks.append(prepare_slices(r.slices, cfg.window))
        yd.append(v.diagnosis)
        ys.append(v.severity if v.severity is not None else 0)
    x = torch.from_numpy(np.stack(stacks)[:, :, None]).to(cfg.torch_dtype)
    return x, torch.tensor(yd, dtype=cfg.torch_dtype), torch.tensor(ys, dtype=cfg.torch_dtype)


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def _abort(store_fn, cfg, phase, step):
    if cfg.diagnostic_path:
        store_fn().save(cfg.diagnostic_path)
    raise DivergenceError(f"{phase} step {step}", "loss is not finite")


def mean_slice_dice(prob, truth):
    pred = (prob > 0.5).cpu().numpy()
    truth = truth.cpu().numpy() > 0.5
    return float(np.mean([seg_scores(confusion(p, t))["dice"] for p, t in zip(pred, truth)]))


# ---------------------------------------------------------------- phase 1

def segnet_store(model, cfg, optimizer=None, step=0):
    store = ParameterStore(meta={"phase": "seg", "step": step, "train_config": cfg.to_dict(),
                                 "segnet_config": model.cfg.to_dict()})
    store.add_module(model, "segnet")
    if optimizer is not None:
        store.add_optimizer(optimizer, model.named_parameters(), "adam.segnet")
    return store


def train_segmentation(volumes, cfg=TrainConfig(), val=None, model=None, log_=None):
    """Adam on the focal Tversky loss over slice batches.

    Stops once the epoch-mean loss drops below ``cfg.loss_threshold``, or at
    ``max_epochs`` / ``max_steps``. ``val`` is an optional list of volumes for the
    per-epoch Dice; the training slices are scored otherwise.
    """
    seed_everything(cfg.seed, cfg.threads)
    images, masks = slice_tensors(volumes, cfg)
    val_images, val_masks = slice_tensors(val, cfg) if val else (images, masks)
    if model is None:
        model = TASegNet(cfg.segnet_config(images.shape[-2:]))
    model = model.to(cfg.torch_dtype)
    loss_cfg = cfg.loss_config
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    tlog = log_ or TrainLog(cfg.log_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = images.shape[0]
    step = 0
    for epoch in range(cfg.max_epochs):
        lr = learning_rate(epoch, cfg)
        _set_lr(optimizer, lr)
        model.train()
        losses = []
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out = model(images[idx])
            loss = focal_tversky(out.prob_mask, masks[idx], loss_cfg)
            if not torch.isfinite(loss):
                _abort(lambda: segnet_store(model, cfg, optimizer, step), cfg, "seg", step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(loss.item())
            tlog.append(kind="step", phase="seg", step=step, epoch=epoch, lr=lr, loss=losses[-1])
            if cfg.max_steps and step >= cfg.max_steps:
                break
        mean_loss = float(np.mean(losses))
        model.eval()
        with torch.no_grad():
            prob = torch.cat([model(val_images[i:i + 32]).prob_mask for i in range(0, len(val_images), 32)])
        dice = mean_slice_dice(prob, val_masks)
        tlog.append(kind="epoch", phase="seg", step=step, epoch=epoch, lr=lr, loss=mean_loss, dice=dice)
        log.info("seg epoch %d step %d loss %.4f dice %.4f", epoch, step, mean_loss, dice)
        if mean_loss < cfg.loss_threshold or (cfg.max_steps and step >= cfg.max_steps):
            break
    model.eval()
    return TrainResult(model, segnet_store(model, cfg, optimizer, step), tlog, step)


def load_segnet(store):
    cfg = SegNetConfig.from_dict(store.meta["segnet_config"])
    return store.load_module(TASegNet(cfg), "segnet")


# ---------------------------------------------------------------- phase 2

def build_classifier(segnet_cfg, cfg):
    return JointClassifier(segnet_cfg.fusion_channels, slices=cfg.slice_budget, stages=cfg.rf_stages,
                           cap=cfg.rf_cap, reduced=cfg.fusion_width, hidden=cfg.hidden_width,
                           rates=DILATION_RATES)


def joint_store(model, cfg, optimizer=None, step=0):
    store = ParameterStore(meta={"phase": "joint", "step": step, "train_config": cfg.to_dict(),
                                 "segnet_config": model.segnet.cfg.to_dict()})
    store.add_module(model.segnet, "segnet")
    store.add_module(model.classifier, "classifier")
    if optimizer is not None:
        store.add_optimizer(optimizer, model.classifier.named_parameters(), "adam.classifier")
        if not cfg.freeze_segnet:
            store.add_optimizer(optimizer, model.segnet.named_parameters(), "adam.segnet")
    return store


def load_model(store):
    """Rebuild a ``CovTANet`` (classifier only if the checkpoint has one)."""
    segnet = load_segnet(store)
    classifier = None
    if store.names("classifier."):
        cfg = TrainConfig.from_dict(store.meta["train_config"])
        classifier = store.load_module(build_classifier(segnet.cfg, cfg), "classifier")
    model = CovTANet(segnet, classifier)
    dtypes = {store[k].dtype for k in store.names("segnet.")}
    if dtypes == {np.dtype("float64")}:
        model = model.double()
    return model.eval()


def _accuracy(p, y):
    return float(((p > 0.5).to(y.dtype) == y).to(torch.float64).mean()) if len(y) else float("nan")


def train_joint(volumes, seg_checkpoint, cfg=TrainConfig(phase="joint"), log_=None):
    """Adam on the joint diagnosis/severity loss with TA-SegNet loaded from ``seg_checkpoint``.

    With ``cfg.freeze_segnet`` (default) only the regional extractor and the two
    prediction paths are updated and fusion maps are computed once up front.
    """
    if seg_checkpoint is None:
        raise ConfigError("joint training needs a segmentation checkpoint")
    if not isinstance(seg_checkpoint, ParameterStore):
        seg_checkpoint = ParameterStore.load(seg_checkpoint)
    seed_everything(cfg.seed, cfg.threads)
    segnet = load_segnet(seg_checkpoint).to(cfg.torch_dtype)
    classifier = build_classifier(segnet.cfg, cfg).to(cfg.torch_dtype)
    model = CovTANet(segnet, classifier)
    x, yd, ys = volume_tensors(volumes, cfg)
    params = list(classifier.parameters())
    if cfg.freeze_segnet:
        segnet.requires_grad_(False)
        segnet.eval()
        with torch.no_grad():
            cache = torch.stack([model.fusion_maps(x[i:i + 1])[0] for i in range(len(x))])
    else:
        params += list(segnet.parameters())
        cache = None
    optimizer = torch.optim.Adam(params, lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    tlog = log_ or TrainLog(cfg.log_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(x)
    step = 0
    for epoch in range(cfg.max_epochs):
        lr = learning_rate(epoch, cfg)
        _set_lr(optimizer, lr)
        classifier.train()
        losses = []
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.volume_batch_size):
            idx = perm[start:start + cfg.volume_batch_size]
            fusion = cache[idx] if cache is not None else model.fusion_maps(x[idx])
            pd, ps = classifier(fusion)
            loss, ld, ls = joint_loss(yd[idx], pd, ys[idx], ps, components=True)
            if not torch.isfinite(loss):
                _abort(lambda: joint_store(model, cfg, optimizer, step), cfg, "joint", step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(loss.item())
            tlog.append(kind="step", phase="joint", step=step, epoch=epoch, lr=lr, loss=losses[-1],
                        loss_diagnosis=ld.item(), loss_severity=ls.item())
            if cfg.max_steps and step >= cfg.max_steps:
                break
        mean_loss = float(np.mean(losses))
        pd, ps = _predict_cached(model, cache, x)
        infected = yd > 0.5
        acc_d = _accuracy(pd, yd)
        acc_s = _accuracy(ps[infected], ys[infected])
        tlog.append(kind="epoch", phase="joint", step=step, epoch=epoch, lr=lr, loss=mean_loss,
                    diagnosis_accuracy=acc_d, severity_accuracy=acc_s)
        log.info("joint epoch %d step %d loss %.4f acc %.3f/%.3f", epoch, step, mean_loss, acc_d, acc_s)
        if mean_loss < cfg.loss_threshold or (cfg.max_steps and step >= cfg.max_steps):
            break
    model.eval()
    return TrainResult(model, joint_store(model, cfg, optimizer, step), tlog, step)


def _predict_cached(model, cache, x, chunk=8):
    model.eval()
    pds, pss = [], []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            f = cache[i:i + chunk] if cache is not None else model.fusion_maps(x[i:i + chunk])
            pd, ps = model.classifier(f)
            pds.append(pd)
            pss.append(ps)
    return torch.cat(pds), torch.cat(pss)


def predict_volumes(model, volumes, cfg=TrainConfig()):
    x, _, _ = volume_tensors(volumes, cfg)
    x = x.to(next(model.parameters()).dtype)
    return _predict_cached(model, None, x)


# ---------------------------------------------------------------- evaluation, CV

def evaluate(model, volumes, cfg=TrainConfig(), fold=0):
    """Segmentation scores over all annotated slices plus classification scores."""
    seg = {}
    annotated = [v for v in volumes if v.masks is not None]
    dtype = next(model.parameters()).dtype
    if annotated:
        counts = None
        with torch.no_grad():
            for v in annotated:
                x = torch.from_numpy(prepare_slices(v.slices, cfg.window)[:, None]).to(dtype)
                pred = model.segment(x).binary_mask().cpu().numpy()[:, 0]
                c = confusion(pred, v.masks)
                counts = c if counts is None else counts + c
        seg = seg_scores(counts)
    diag, sev = {}, {}
    if getattr(model, "classifier", None) is not None:
        pd, ps = predict_volumes(model, volumes, cfg)
        yd = np.array([v.diagnosis for v in volumes])
        diag = cls_scores(pd.numpy(), yd)
        infected = yd == 1
        if infected.any():
            sev = cls_scores(ps.numpy()[infected], np.array([v.severity for v in volumes])[infected])
    return MetricsReport(fold, seg, diag, sev)


@dataclass
class CVResult:
    reports: list
    summary: dict
    folds: list


def run_cv(volumes, cfg=TrainConfig(), folds=None, seg_steps=None, joint_steps=None):
    """Both phases per fold on the other four folds, scored on the held-out one."""
    if folds is None:
        folds = make_folds([v.id for v in volumes], [v.label_class for v in volumes], cfg.seed)
    by_id = {v.id: v for v in volumes}
    reports = []
    for k, held in enumerate(folds):
        held_set = set(held)
        train = [v for v in volumes if v.id not in held_set]
        test = [by_id[i] for i in held]
        seg_cfg = replace(cfg, phase="seg", max_steps=seg_steps or cfg.max_steps, log_path="")
        seg = train_segmentation(train, seg_cfg)
        joint_cfg = replace(cfg, phase="joint", max_steps=joint_steps or cfg.max_steps, log_path="")
        joint = train_joint(train, seg.store, joint_cfg)
        reports.append(evaluate(joint.model, test, cfg, fold=k))
    return CVResult(reports, aggregate(reports), [list(f) for f in folds])
