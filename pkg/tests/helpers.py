"""Shared builders for the test suite."""

import numpy as np
import torch

from emphyseg.checkpoint import Checkpoint
from emphyseg.data import CtVolume
from emphyseg.network import ConvBlock, DomainAttention, build_model

TINY_NET = dict(input_size=16, base_channels=4, n_down_stages=2, dattn_hidden=8,
                n_cdf_bins=8, gn_groups=4)


def random_volume(rng, shape=(4, 8, 8), scanner="SYN-T", scan_id="t-000",
                  lo=-1000, hi=-700):
    """Random volume with a non-empty lung mask and emph inside the lung."""
    hu = rng.integers(lo, hi, size=shape).astype(np.int16)
    lung = rng.random(shape) < 0.6
    if not lung.any():
        lung.flat[0] = True
    emph = lung & (rng.random(shape) < 0.3)
    return CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                    scanner=scanner, scan_id=scan_id)


def volume_from_lung_values(values, scanner="SYN-T", scan_id="t-000"):
    """Single-slice volume whose lung voxels carry exactly `values`."""
    values = np.asarray(values, dtype=np.int16)
    n = values.size
    hu = np.full((1, 1, n + 2), -50, dtype=np.int16)
    lung = np.zeros((1, 1, n + 2), dtype=bool)
    hu[0, 0, 1 : n + 1] = values
    lung[0, 0, 1 : n + 1] = True
    emph = np.zeros_like(lung)
    return CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                    scanner=scanner, scan_id=scan_id)


def random_checkpoint(rng):
    """Checkpoint with random array contents across all four groups."""
    def bundle(n):
        return {
            f"layer{i}.weight": rng.standard_normal(
                tuple(rng.integers(1, 5, size=int(rng.integers(1, 4)))))
            for i in range(n)
        }

    params = bundle(int(rng.integers(1, 5)))
    return Checkpoint(
        net_config=dict(TINY_NET, variant="plain_unet", seed=3),
        train_config={"lr_max": 2e-4, "max_epochs": int(rng.integers(1, 60))},
        epoch=int(rng.integers(0, 50)),
        best_epoch=int(rng.integers(0, 50)),
        best_val_loss=float(rng.standard_normal()),
        params=params,
        best_params={k: v + 1.0 for k, v in params.items()},
        opt_m={k: rng.standard_normal(v.shape) for k, v in params.items()},
        opt_v={k: rng.random(v.shape) for k, v in params.items()},
        opt_steps={k: int(rng.integers(0, 1000)) for k in params},
        rng_state={"epoch_key": int(rng.integers(0, 2**31))},
    )


def checkpoints_equal(a, b):
    if (a.net_config, a.train_config, a.epoch, a.best_epoch, a.best_val_loss,
            a.opt_steps, a.rng_state) != (
            b.net_config, b.train_config, b.epoch, b.best_epoch,
            b.best_val_loss, b.opt_steps, b.rng_state):
        return False
    for group in ("params", "best_params", "opt_m", "opt_v"):
        ga, gb = a.group(group), b.group(group)
        if set(ga) != set(gb):
            return False
        for name in ga:
            if ga[name].shape != gb[name].shape:
                return False
            if not np.array_equal(ga[name], gb[name]):
                return False
    return True


def relu_safe_model(cfg, bias_shift=3.0):
    """Build the network in float64 with every ReLU pushed off its kink.

    Central differences are only a derivative estimate where the objective
    is smooth across the probe interval.  At a freshly initialised state the
    group norms keep pre-activations centred near zero, so a probe of almost
    any parameter drags some activation across a ReLU kink and the numeric
    value stops tracking the true slope.  Shifting every bias that feeds a
    ReLU by +3 puts the evaluation point deep inside one smooth piece (the
    smallest pre-activation ends up around 0.7) without touching the
    architecture the gradients flow through.
    """
    model = build_model(cfg).double()
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, ConvBlock):
                mod.conv.bias.add_(bias_shift)
            elif isinstance(mod, DomainAttention):
                mod.fc1.bias.add_(bias_shift)
    return model


def gradient_problem(data_seed, n_bins=8, size=16):
    """Deterministic input, domain vector, and one-hot target for gradient
    checks.  Returns the generator as well so coordinate sampling continues
    the same stream."""
    rng = np.random.default_rng(data_seed)
    x = torch.from_numpy(rng.random((1, 1, size, size)))
    dom = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(1, n_bins)))
    lab = torch.from_numpy(rng.random((1, size, size)) < 0.3)
    y = torch.stack([(~lab).double(), lab.double()], dim=1)
    return x, dom, y, rng


def fd_gradient_worst_rel(model, objective_value, rng, n_params=25, h=1e-3,
                          grad_floor=1e-3):
    """Worst relative error of backprop against central differences.

    Samples coordinates until `n_params` with |analytic gradient| at or
    above `grad_floor` have been probed; below that, the O(h^2) truncation
    of the difference quotient itself exceeds the precision being asserted,
    so smaller entries say nothing about backprop either way.
    """
    model.zero_grad()
    objective_value().backward()
    params = dict(model.named_parameters())
    names = sorted(params)
    worst = 0.0
    checked = 0
    tries = 0
    while checked < n_params:
        tries += 1
        assert tries < 4000, "too few coordinates with measurable gradients"
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = int(rng.integers(p.numel()))
        analytic = p.grad.reshape(-1)[flat].item()
        if abs(analytic) < grad_floor:
            continue
        with torch.no_grad():
            orig = p.reshape(-1)[flat].item()
            p.reshape(-1)[flat] = orig + h
            up = objective_value().item()
            p.reshape(-1)[flat] = orig - h
            down = objective_value().item()
            p.reshape(-1)[flat] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        worst = max(worst, rel)
        checked += 1
    return worst
