"""Training and evaluation loops for the rotated-MNIST classifier."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from .autograd import no_grad
from .model import GEViT, ModelConfig, build, parse_kv
from .optim import Adam, HyperParams, TrainingDiverged, train_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    train_count: int = 2000
    val_count: int = 500
    test_count: int = 500
    angle_mode: str = "bilinear"
    downsample: int = 2
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    eval_batch: int = 50

    def hyperparams(self) -> HyperParams:
        return HyperParams(lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs)


def load_configs(path=None, **overrides) -> tuple[ModelConfig, TrainConfig]:
    """Read a key=value file holding model and training keys; apply overrides."""
    text = Path(path).read_text() if path else ""
    mkeys = {f.name for f in fields(ModelConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    m = parse_kv(text, ModelConfig, strict=False)
    t = parse_kv(text, TrainConfig, strict=False)
    known = mkeys | tkeys
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line and line.split("=", 1)[0].strip().replace("-", "_") not in known:
            raise ValueError(f"unknown config key in {path}: {line!r}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in mkeys:
            m[k] = v
        elif k in tkeys:
            t[k] = v
        else:
            raise ValueError(f"unknown override {k!r}")
    mcfg = ModelConfig(**m)
    tcfg = TrainConfig(**t)
    if "image_size" not in m:
        mcfg.image_size = 28 // tcfg.downsample
    mcfg.validate()
    return mcfg, tcfg


def make_splits(tcfg: TrainConfig, base: D.Dataset | None = None) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
    """Disjoint train/validation/test rotated-MNIST sets drawn from the bundled digits."""
    base = D.load_bundled() if base is None else base
    sizes = [tcfg.train_count, tcfg.val_count, tcfg.test_count]
    pool = D.make_rotmnist(base, tcfg.seed, sum(sizes), tcfg.angle_mode)
    return tuple(D.downsample(part, tcfg.downsample) for part in D.split(pool, sizes, seed=tcfg.seed))


def predict(model: GEViT, images: np.ndarray, batch: int = 50) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            out.append(model(images[s:s + batch]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def evaluate(model: GEViT, d: D.Dataset, batch: int = 50) -> dict:
    logits = predict(model, d.images, batch)
    pred = logits.argmax(axis=1)
    k = model.config.classes
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (d.labels, pred), 1)
    return {"accuracy": float((pred == d.labels).mean()) if len(d) else 0.0,
            "confusion": conf, "predictions": pred}


def fit(mcfg: ModelConfig, tcfg: TrainConfig, out_dir=None, train: D.Dataset | None = None,
        val: D.Dataset | None = None, log_fn=None, max_steps: int | None = None) -> dict:
    """Train, validating after every epoch; keeps the best checkpoint in ``out_dir``.

    Returns a summary with the per-step loss trajectory and per-epoch accuracies.
    ``max_steps`` stops early (without validation), e.g. to replay a prefix.
    """
    if train is None or val is None:
        train, val, _ = make_splits(tcfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(mcfg.dumps() + "".join(
            f"{k}={v}\n" for k, v in asdict(tcfg).items()))
    emit = log_fn or (lambda line: None)
    logf = open(out / "train_log.txt", "w") if out else None

    def record(line: str) -> None:
        emit(line)
        if logf:
            logf.write(line + "\n")
            logf.flush()

    record(D.describe(train))
    model = build(mcfg, tcfg.seed)
    opt = Adam(model.parameters(), tcfg.hyperparams())
    rng = np.random.default_rng([tcfg.seed, 1])
    losses, accs = [], []
    best = -1.0
    t0 = time.perf_counter()
    try:
        for epoch in range(tcfg.epochs):
            for xb, yb in D.batches(train, tcfg.batch_size, tcfg.seed, epoch):
                loss = train_step(model, xb, yb, opt, rng)
                losses.append(loss)
                record(f"step={opt.state.step} loss={loss:.6f} lr={tcfg.lr:g} "
                       f"wall={time.perf_counter() - t0:.2f}")
                if max_steps is not None and len(losses) >= max_steps:
                    break
            if max_steps is not None and len(losses) >= max_steps:
                break
            acc = evaluate(model, val, tcfg.eval_batch)["accuracy"]
            accs.append(acc)
            ep_loss = float(np.mean(losses[-int(np.ceil(len(train) / tcfg.batch_size)):]))
            record(f"epoch={epoch + 1} train_loss={ep_loss:.6f} val_acc={acc:.4f} "
                   f"wall={time.perf_counter() - t0:.2f}")
            if acc > best:
                best = acc
                if out:
                    model.save(out / "best.gevt")
            if out:
                model.save(out / "last.gevt")
    except TrainingDiverged as exc:
        record(f"aborted: {exc}")
        if logf:
            logf.close()
        raise
    if logf:
        logf.close()
    return {"model": model, "losses": losses, "val_acc": accs, "best_val_acc": best,
            "seconds": time.perf_counter() - t0}
