"""SGD training loop, learning-rate schedule and the gradient-check harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .losses import cross_entropy, total_loss, triplet_hard
from .model import GitModel, forward, param_family

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Schedule:
    """Linear warmup to ``peak``, then x``gamma`` at each (1-based) milestone epoch."""

    peak: float = 1e-2
    warmup_start: float = 1e-4
    warmup_epochs: int = 5
    milestones: tuple[int, ...] = (51, 86, 120)
    gamma: float = 0.1

    def lr(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            return self.warmup_start + (self.peak - self.warmup_start) * epoch / self.warmup_epochs
        drops = sum(1 for m in self.milestones if epoch + 1 >= m)
        return self.peak * self.gamma**drops


@dataclass
class SGD:
    params: dict[str, nx.Tensor]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = (p.data - lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def compute_loss(model: GitModel, images: np.ndarray, labels: np.ndarray, alpha: float = 1.0,
                 beta: float = 1.0, triplet_mode: str = "soft", update_stats: bool = True) -> dict:
    """Total objective; with two heads (``coupling="none"``) both are summed."""
    out = forward(model, images, training=True, update_stats=update_stats)
    ce = cross_entropy(out["logits"], labels)
    tri = triplet_hard(out["triplet_feature"], labels, triplet_mode)
    total = total_loss(ce, tri, alpha, beta)
    parts = {"ce": ce.item(), "triplet": tri.item()}
    if "local_logits" in out:
        lce = cross_entropy(out["local_logits"], labels)
        ltri = triplet_hard(out["local_feature"], labels, triplet_mode)
        total = total + total_loss(lce, ltri, alpha, beta)
        parts.update(local_ce=lce.item(), local_triplet=ltri.item())
    return {"total": total, **parts}


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dump_diagnostic(path: Path, step: int, epoch: int, lr: float, model: GitModel, error: str) -> None:
    norms = {k: float(np.linalg.norm(p.data)) if np.isfinite(p.data).all() else "non-finite"
             for k, p in model.parameters().items()}
    path.write_text(json.dumps({"step": step, "epoch": epoch, "lr": lr, "error": error,
                                "param_norms": norms}, indent=1))


def train_loop(model: GitModel, images: np.ndarray, labels: np.ndarray, sampler, schedule: Schedule,
               epochs: int, optimizer: SGD, out_dir: Path, prepare=None, evaluate=None,
               eval_every: int = 1, alpha: float = 1.0, beta: float = 1.0,
               triplet_mode: str = "soft") -> list[dict]:
    """Run ``epochs`` passes of ``sampler`` and write comma-separated logs.

    ``prepare(batch_images, step)`` applies augmentation; ``evaluate(model)``
    returns a dict of metrics logged every ``eval_every`` epochs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    step = 0
    with open(out_dir / "train_log.csv", "w", newline="") as tf, open(out_dir / "eval_log.csv", "w", newline="") as ef:
        tlog, elog = csv.writer(tf), csv.writer(ef)
        tlog.writerow(["step", "epoch", "lr", "loss", "ce", "triplet"])
        elog_header = None
        for epoch in range(epochs):
            lr = schedule.lr(epoch)
            for batch in sampler.epoch(epoch):
                x = images[batch]
                if prepare is not None:
                    x = prepare(x, step)
                try:
                    res = compute_loss(model, x, labels[batch], alpha, beta, triplet_mode)
                    total = res["total"]
                    if not math.isfinite(total.item()):
                        raise nx.NonFiniteError("loss is not finite")
                    optimizer.zero_grad()
                    nx.backward(total)
                except nx.NonFiniteError as exc:
                    diag = out_dir / f"diagnostic_step{step}.json"
                    dump_diagnostic(diag, step, epoch, lr, model, str(exc))
                    raise TrainingDiverged(f"non-finite values at step {step} ({exc}); see {diag}") from exc
                optimizer.step(lr)
                row = {"step": step, "epoch": epoch, "lr": lr, "loss": total.item(), "ce": res["ce"],
                       "triplet": res["triplet"]}
                history.append(row)
                tlog.writerow([step, epoch, _fmt(lr), _fmt(row["loss"]), _fmt(row["ce"]), _fmt(row["triplet"])])
                step += 1
            if evaluate is not None and ((epoch + 1) % eval_every == 0 or epoch == epochs - 1):
                metrics = evaluate(model)
                if elog_header is None:
                    elog_header = list(metrics)
                    elog.writerow(["epoch", *elog_header])
                elog.writerow([epoch, *(_fmt(metrics[k]) for k in elog_header)])
    return history


# -- gradient check -------------------------------------------------------------------------
@dataclass
class GradSample:
    name: str
    index: tuple
    family: str
    analytic: float
    numeric: float
    analytic32: float

    @property
    def rel_error(self) -> float:
        return nx.relative_error(self.analytic, self.numeric, floor=1e-8)


def gradient_check(model: GitModel, images: np.ndarray, labels: np.ndarray, samples: int = 50,
                   seed: int = 0, step: float = 1e-6) -> dict:
    """Compare backward gradients against central differences of the total loss.

    The finite differences and the reference backward run on a float64 copy
    of ``model``; the float32 backward is compared to the float64 one tensor
    by tensor. Samples are spread evenly over the parameter families.
    """
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float32)

    def loss_of(m, x):
        return compute_loss(m, x, labels, update_stats=False)["total"]

    model.zero_grad()
    nx.backward(loss_of(model, images))
    g32 = {k: p.grad for k, p in model.parameters().items()}

    m64 = model.astype(np.float64)
    x64 = images.astype(np.float64)
    with nx.precision(np.float64):
        nx.backward(loss_of(m64, x64))
    p64 = m64.parameters()

    def f() -> float:
        with nx.precision(np.float64), nx.no_grad():
            return loss_of(m64, x64).item()

    families: dict[str, list[str]] = {}
    for name in p64:
        families.setdefault(param_family(name), []).append(name)
    per_family = math.ceil(samples / len(families))
    results = []
    for fam in sorted(families):
        names = families[fam]
        sizes = np.array([p64[n].data.size for n in names], dtype=float)
        for _ in range(per_family):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            shape = p64[name].shape
            idx = tuple(int(rng.integers(s)) for s in shape)
            numeric = nx.central_difference(f, p64[name].data, idx, step)
            results.append(GradSample(name, idx, fam, float(p64[name].grad[idx]), numeric,
                                      float(g32[name][idx]) if g32[name] is not None else 0.0))

    total_norm = math.sqrt(sum(float((p.grad**2).sum()) for p in p64.values() if p.grad is not None))
    precision32 = {}
    for name, p in p64.items():
        ref = p.grad if p.grad is not None else np.zeros(p.shape)
        got = g32[name] if g32[name] is not None else np.zeros(p.shape)
        ref_norm = float(np.linalg.norm(ref))
        diff = float(np.linalg.norm(got.astype(np.float64) - ref))
        if ref_norm > 1e-12 * total_norm:
            precision32[name] = diff / ref_norm
        else:
            # structurally zero gradient: measured against the whole-model gradient norm
            precision32[name] = diff / total_norm
    return {"samples": results, "precision32": precision32}


def gradcheck_table(report: dict, tol: float = 1e-3) -> list[dict]:
    rows = []
    fams = sorted({s.family for s in report["samples"]})
    for fam in fams:
        ss = [s for s in report["samples"] if s.family == fam]
        worst = max(s.rel_error for s in ss)
        p32 = max(v for k, v in report["precision32"].items() if param_family(k) == fam)
        rows.append({"family": fam, "samples": len(ss), "max_rel_error": worst,
                     "max_fp32_rel_error": p32, "passed": worst < tol and p32 < tol})
    return rows
