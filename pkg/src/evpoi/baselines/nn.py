"""Dense tanh network baseline with early stopping on a held-out slice."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import TrainingError
from .common import Scaler

DTYPE = torch.float64


@dataclass
class NeuralNet:
    scaler: Scaler
    net: torch.nn.Module
    residual_variance: float
    include_coords: bool
    epochs_run: int

    def _inputs(self, X, locations) -> torch.Tensor:
        Z = np.hstack([X, locations]) if self.include_coords else np.asarray(X, dtype=float)
        return torch.as_tensor(self.scaler.transform(Z), dtype=DTYPE)

    def predict(self, X, locations) -> tuple[np.ndarray, np.ndarray]:
        return predict_nn_baseline(self, X, locations)


def _network(n_in: int, widths, gen: torch.Generator) -> torch.nn.Module:
    layers = []
    sizes = (n_in,) + tuple(widths)
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [torch.nn.Linear(a, b, dtype=DTYPE), torch.nn.Tanh()]
    layers.append(torch.nn.Linear(sizes[-1], 1, dtype=DTYPE))
    net = torch.nn.Sequential(*layers)
    with torch.no_grad():
        for m in net:
            if isinstance(m, torch.nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                m.bias.zero_()
    return net


def fit_nn_baseline(X, locations, y, widths=(16, 16), seed: int = 0, include_coords: bool = True,
                    step_size: float = 0.01, max_epochs: int = 2000, patience: int = 100,
                    validation_fraction: float = 0.1) -> NeuralNet:
    X = np.asarray(X, dtype=float)
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float)
    Z = np.hstack([X, locs]) if include_coords else X
    n = len(y)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(validation_fraction * n))) if n > 2 else 0
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    scaler = Scaler.fit(Z[tr])
    Zt = torch.as_tensor(scaler.transform(Z), dtype=DTYPE)
    yt = torch.as_tensor(y, dtype=DTYPE)
    gen = torch.Generator().manual_seed(int(seed))
    net = _network(Z.shape[1], widths, gen)
    opt = torch.optim.Adam(net.parameters(), lr=step_size, betas=(0.9, 0.999), eps=1e-8)
    best = (np.inf, copy.deepcopy(net.state_dict()), 0)
    stale = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        opt.zero_grad()
        loss = torch.mean((net(Zt[tr])[:, 0] - yt[tr]) ** 2)
        if not bool(torch.isfinite(loss)):
            raise TrainingError(f"non-finite network loss at epoch {epoch}", np.zeros(0))
        loss.backward()
        opt.step()
        with torch.no_grad():
            ref = val if n_val else tr
            v = float(torch.mean((net(Zt[ref])[:, 0] - yt[ref]) ** 2))
        if v < best[0]:
            best = (v, copy.deepcopy(net.state_dict()), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    net.load_state_dict(best[1])
    return NeuralNet(scaler, net, max(best[0], 1e-6), include_coords, epoch)


def predict_nn_baseline(model: NeuralNet, X, locations) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        m = model.net(model._inputs(np.asarray(X, dtype=float),
                                    np.asarray(locations, dtype=float).reshape(-1, 2)))[:, 0].numpy()
    return m.copy(), np.full(len(m), model.residual_variance)
