"""Mask IoU, precision at IoU thresholds and the evaluation report."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def iou(pred, target):
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def precision_at(thresholds, ious):
    """Fraction of samples whose IoU is strictly above each threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("no samples")
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    return [float((ious > x).mean()) for x in thresholds]


@dataclass
class EvalReport:
    mean_iou: float
    precision: dict  # threshold -> fraction
    per_sample: list  # [(sample key string, iou)] ordered by sample key
    config_fingerprint: str = ""
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_ious(cls, keys, ious, fingerprint="", seed=0, thresholds=THRESHOLDS, extras=None):
        pairs = sorted(zip(keys, (float(v) for v in ious)))
        vals = [v for _, v in pairs]
        prec = dict(zip(thresholds, precision_at(thresholds, vals)))
        return cls(float(np.mean(vals)), prec, pairs, fingerprint, seed, dict(extras or {}))

    def fingerprint(self):
        """Digest of every number in the report, for run-to-run comparison."""
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()[:16]

    def to_tsv(self):
        lines = [
            "# vltseg evaluation report",
            f"# config_fingerprint\t{self.config_fingerprint}",
            f"# seed\t{self.seed}",
            "# precision counts samples with IoU strictly greater than the threshold",
        ]
        for k, v in sorted(self.extras.items()):
            lines.append(f"# extra\t{k}\t{json.dumps(v)}")
        lines.append(f"# mean_iou\t{self.mean_iou!r}")
        for x, p in self.precision.items():
            lines.append(f"# pr@{x!r}\t{p!r}")
        lines.append("sample\tiou")
        lines += [f"{k}\t{v!r}" for k, v in self.per_sample]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        fp, seed, mean, prec, extras, rows = "", 0, None, {}, {}, []
        body = False
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("#"):
                parts = line[2:].split("\t")
                if parts[0] == "config_fingerprint":
                    fp = parts[1] if len(parts) > 1 else ""
                elif parts[0] == "seed":
                    seed = int(parts[1])
                elif parts[0] == "mean_iou":
                    mean = float(parts[1])
                elif parts[0].startswith("pr@"):
                    prec[float(parts[0][3:])] = float(parts[1])
                elif parts[0] == "extra":
                    extras[parts[1]] = json.loads(parts[2])
                continue
            if not body:
                body = True  # column header
                continue
            k, v = line.split("\t")
            rows.append((k, float(v)))
        if mean is None:
            raise ValueError("report has no mean_iou line")
        return cls(mean, prec, rows, fp, seed, extras)

    def summary_row(self):
        return [self.mean_iou] + [self.precision[x] for x in sorted(self.precision)]
