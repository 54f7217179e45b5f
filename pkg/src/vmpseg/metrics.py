"""Dice similarity, average predictive variance and measured SNR."""

import numpy as np

SNR_CAP_DB = 300.0


def dice(pred, truth, label_set=(1,)):
    """2|A n B| / (|A| + |B|) over pixels whose label is in ``label_set``.

    Two empty sets score 1.0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    labels = [label_set] if np.isscalar(label_set) else list(label_set)
    a = np.isin(pred, labels)
    b = np.isin(truth, labels)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def class_groups(n_classes):
    """Label groups reported by default: each foreground class, plus their union."""
    groups = {f"dice_c{c}": (c,) for c in range(1, n_classes)}
    if n_classes > 2:
        groups["dice_fg"] = tuple(range(1, n_classes))
    return groups


def mean_dice(pred, truth, n_classes):
    """Per-image Dice averaged over foreground classes, then over images."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    scores = [[dice(p, t, (c,)) for c in range(1, n_classes)] for p, t in zip(pred, truth)]
    return float(np.mean(scores))


def avg_predictive_variance(output, region=None):
    """Mean of the uncertainty map over ``region`` (all pixels if None) and classes.

    ``output`` is a SegmentationOutput or an uncertainty array (..., H, W, C).
    """
    unc = np.asarray(getattr(output, "uncertainty", output), dtype=np.float64)
    if region is None:
        return float(unc.mean())
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    return float(unc[region].mean())


def measured_snr(clean, perturbed, region=None):
    """10 log10(sum clean^2 / sum (perturbed - clean)^2), capped at 300 dB."""
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if clean.shape != perturbed.shape:
        raise ValueError("shape mismatch")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        clean, perturbed = clean[region], perturbed[region]
    signal = float(np.sum(clean * clean))
    noise = float(np.sum((perturbed - clean) ** 2))
    if noise == 0.0:
        return SNR_CAP_DB
    if signal == 0.0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal / noise))
