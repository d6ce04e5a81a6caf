"""Contrast-sensitive binary labeling of the uncertain voxels.

Unary costs combine an appearance likelihood with a weighted-vote prior.
The pairwise cost penalizes label changes where the image is flat and relaxes
across strong edges, mixing an intensity-step term with the largest gradient
magnitude met along the straight voxel line between the two neighbors.  The
resulting energy is submodular, so one s-t min cut gives the exact global
minimum over the uncertain set; voxels the atlases agree on are frozen and
enter only as boundary terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import separable_response
from .fusion import majority_vote
from .maxflow import FlowGraph
from .volume import LabelMap, Volume, _require_same_grid, uncertainty_mask

POTENTIAL_FLOOR = 1e-12
LAMBDA_DEFAULT = 0.2
CONTRAST_MIX_ISOTROPIC = 0.6
CONTRAST_MIX_ANISOTROPIC = 0.8
GRADIENT_SCALE_MM = 1.0

# one representative offset per unordered 26-neighborhood pair
NEIGHBOR_OFFSETS = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
)


@dataclass(frozen=True)
class CrfParams:
    lam: float = LAMBDA_DEFAULT
    contrast_mix: float = CONTRAST_MIX_ISOTROPIC
    sigma: float | None = None  # robust intensity scale; None: MAD estimate
    sigma_grad: float | None = None  # gradient normalizer; None: ROI mean
    gradient_scale_mm: float = GRADIENT_SCALE_MM

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.contrast_mix <= 1.0:
            raise ValueError("contrast mix must lie in [0, 1]")
        for v in (self.sigma, self.sigma_grad):
            if v is not None and v <= 0.0:
                raise ValueError("scale parameters must be positive")
        if self.gradient_scale_mm <= 0.0:
            raise ValueError("gradient scale must be positive")


def robust_sigma(values: np.ndarray) -> float:
    """Median-absolute-deviation scale; falls back to the standard deviation
    and then to one when the data are too flat to carry a scale."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("need at least one value")
    mad = float(np.median(np.abs(values - np.median(values))))
    sigma = 1.4826 * mad
    if sigma > 0.0:
        return sigma
    sigma = float(values.std())
    return sigma if sigma > 0.0 else 1.0


def gradient_magnitude(vol: Volume, scale_mm: float = GRADIENT_SCALE_MM) -> Volume:
    """Gaussian-derivative gradient magnitude."""
    total = np.zeros(vol.dims, dtype=np.float64)
    for axis in range(3):
        orders = [0, 0, 0]
        orders[axis] = 1
        g = separable_response(vol.data, vol.spacing, scale_mm, orders)
        total += g * g
    return Volume(np.sqrt(total), vol.spacing, vol.origin)


def bresenham_line(p, q) -> list:
    """Integer voxel line from p to q, endpoints included."""
    p = tuple(int(v) for v in p)
    q = tuple(int(v) for v in q)
    deltas = [abs(b - a) for a, b in zip(p, q)]
    steps = [0 if b == a else (1 if b > a else -1) for a, b in zip(p, q)]
    order = sorted(range(3), key=lambda i: -deltas[i])
    d_main = deltas[order[0]]
    points = [p]
    if d_main == 0:
        return points
    pos = list(p)
    err1 = 2 * deltas[order[1]] - d_main
    err2 = 2 * deltas[order[2]] - d_main
    for _ in range(d_main):
        pos[order[0]] += steps[order[0]]
        if err1 > 0:
            pos[order[1]] += steps[order[1]]
            err1 -= 2 * d_main
        if err2 > 0:
            pos[order[2]] += steps[order[2]]
            err2 -= 2 * d_main
        err1 += 2 * deltas[order[1]]
        err2 += 2 * deltas[order[2]]
        points.append(tuple(pos))
    return points


def pairwise_beta(vol: Volume, x, y, contrast_mix: float, sigma: float,
                  sigma_grad: float, grad_mag: Volume | None = None) -> float:
    """Reference per-edge coupling strength (scalar path)."""
    if sigma <= 0.0 or sigma_grad <= 0.0:
        raise ValueError("scale parameters must be positive")
    if not 0.0 <= contrast_mix <= 1.0:
        raise ValueError("contrast mix must lie in [0, 1]")
    if grad_mag is None:
        grad_mag = gradient_magnitude(vol)
    step = vol.data[tuple(x)] - vol.data[tuple(y)]
    intensity_term = 1.0 + np.log1p(step * step / (2.0 * sigma * sigma))
    peak = max(grad_mag.data[pt] for pt in bresenham_line(x, y))
    gradient_term = 1.0 - np.exp(-peak / sigma_grad)
    return float(contrast_mix * intensity_term + (1.0 - contrast_mix) * gradient_term)


def unary_potentials(likelihood: np.ndarray, prior_fg: np.ndarray):
    """Costs (psi0, psi1) per node from likelihood pairs and the foreground
    prior; both inputs are floored before the logs."""
    likelihood = np.asarray(likelihood, dtype=np.float64)
    prior_fg = np.asarray(prior_fg, dtype=np.float64)
    if likelihood.ndim != 2 or likelihood.shape[1] != 2:
        raise ValueError("likelihood must have shape (n, 2)")
    if prior_fg.shape != (likelihood.shape[0],):
        raise ValueError("prior length must match likelihood")
    lik0 = np.maximum(likelihood[:, 0], POTENTIAL_FLOOR)
    lik1 = np.maximum(likelihood[:, 1], POTENTIAL_FLOOR)
    p1 = np.maximum(prior_fg, POTENTIAL_FLOOR)
    p0 = np.maximum(1.0 - prior_fg, POTENTIAL_FLOOR)
    psi0 = -np.log(lik0) - np.log(p0)
    psi1 = -np.log(lik1) - np.log(p1)
    return psi0, psi1


@dataclass
class CrfModel:
    mask: np.ndarray  # bool grid of solved voxels
    node_of: np.ndarray  # int grid, -1 where frozen
    psi0: np.ndarray  # per-node cost of background, boundary terms folded in
    psi1: np.ndarray
    edges: np.ndarray  # (n_edges, 2) node ids
    edge_beta: np.ndarray
    lam: float
    base: LabelMap  # frozen labels (majority agreement)
    sigma: float
    sigma_grad: float

    @property
    def n_nodes(self) -> int:
        return self.psi0.shape[0]


def build_energy(likelihood: np.ndarray, prior: Volume, vol: Volume,
                 mask: LabelMap, base: LabelMap,
                 params: CrfParams | None = None) -> CrfModel:
    """Assemble unaries and neighbor couplings over the masked voxels.

    ``likelihood`` rows follow C scan order of the mask.  Neighbors outside
    the mask keep their ``base`` label and contribute their would-be cut cost
    to the uncertain endpoint's unary.
    """
    if params is None:
        params = CrfParams()
    _require_same_grid([prior, vol, mask, base])
    mask_grid = mask.data.astype(bool)
    n_nodes = int(mask_grid.sum())
    if likelihood.shape != (n_nodes, 2):
        raise ValueError("likelihood rows must match the mask voxel count")

    node_of = np.full(vol.dims, -1, dtype=np.int64)
    node_of[mask_grid] = np.arange(n_nodes)
    psi0, psi1 = unary_potentials(likelihood, prior.data[mask_grid])

    sigma = params.sigma if params.sigma is not None else robust_sigma(vol.data)
    grad = gradient_magnitude(vol, params.gradient_scale_mm)
    sigma_grad = params.sigma_grad
    if sigma_grad is None:
        mean_grad = float(grad.data.mean())
        sigma_grad = mean_grad if mean_grad > 0.0 else 1.0

    c = params.contrast_mix
    edge_chunks = []
    beta_chunks = []
    intensity = vol.data
    gmag = grad.data
    base_grid = base.data
    for off in NEIGHBOR_OFFSETS:
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, vol.dims))
        dst = tuple(slice(max(0, o), n + min(0, o)) for o, n in zip(off, vol.dims))
        a_mask = mask_grid[src]
        b_mask = mask_grid[dst]
        touched = a_mask | b_mask
        if not touched.any():
            continue
        step = intensity[src][touched] - intensity[dst][touched]
        intensity_term = 1.0 + np.log1p(step * step / (2.0 * sigma * sigma))
        # adjacent voxels: the line between them is just the endpoint pair
        peak = np.maximum(gmag[src][touched], gmag[dst][touched])
        gradient_term = 1.0 - np.exp(-peak / sigma_grad)
        beta = c * intensity_term + (1.0 - c) * gradient_term

        node_a = node_of[src][touched]
        node_b = node_of[dst][touched]
        both = (node_a >= 0) & (node_b >= 0)
        if both.any():
            edge_chunks.append(np.stack([node_a[both], node_b[both]], axis=1))
            beta_chunks.append(beta[both])
        a_only = (node_a >= 0) & (node_b < 0)
        if a_only.any():
            cost = params.lam * beta[a_only]
            fixed = base_grid[dst][touched][a_only]
            nodes = node_a[a_only]
            np.add.at(psi0, nodes[fixed == 1], cost[fixed == 1])
            np.add.at(psi1, nodes[fixed == 0], cost[fixed == 0])
        b_only = (node_a < 0) & (node_b >= 0)
        if b_only.any():
            cost = params.lam * beta[b_only]
            fixed = base_grid[src][touched][b_only]
            nodes = node_b[b_only]
            np.add.at(psi0, nodes[fixed == 1], cost[fixed == 1])
            np.add.at(psi1, nodes[fixed == 0], cost[fixed == 0])

    if edge_chunks:
        edges = np.concatenate(edge_chunks, axis=0)
        edge_beta = np.concatenate(beta_chunks)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
        edge_beta = np.zeros(0, dtype=np.float64)
    if edge_beta.size and edge_beta.min() < 0.0:
        raise RuntimeError("negative coupling; construction bug")
    return CrfModel(mask=mask_grid, node_of=node_of, psi0=psi0, psi1=psi1,
                    edges=edges, edge_beta=edge_beta, lam=params.lam,
                    base=base, sigma=sigma, sigma_grad=sigma_grad)


def evaluate_energy(model: CrfModel, node_labels: np.ndarray) -> float:
    """Direct evaluation of the objective for a labeling of the nodes."""
    node_labels = np.asarray(node_labels)
    if node_labels.shape != (model.n_nodes,):
        raise ValueError("labeling length must match the node count")
    fg = node_labels.astype(bool)
    total = float(model.psi1[fg].sum() + model.psi0[~fg].sum())
    if model.edges.shape[0]:
        differ = fg[model.edges[:, 0]] != fg[model.edges[:, 1]]
        total += model.lam * float(model.edge_beta[differ].sum())
    return total


def min_cut(model: CrfModel):
    """Exact minimizer of the model energy; returns (node labels, energy)."""
    if model.n_nodes == 0:
        return np.zeros(0, dtype=np.uint8), 0.0
    graph = FlowGraph(model.n_nodes)
    nodes = np.arange(model.n_nodes, dtype=np.int64)
    graph.add_arcs(np.full(model.n_nodes, graph.source, dtype=np.int64), nodes,
                   model.psi0, np.zeros(model.n_nodes))
    graph.add_arcs(nodes, np.full(model.n_nodes, graph.sink, dtype=np.int64),
                   model.psi1, np.zeros(model.n_nodes))
    if model.edges.shape[0]:
        coupling = model.lam * model.edge_beta
        graph.add_arcs(model.edges[:, 0], model.edges[:, 1], coupling, coupling)
    result = graph.solve()
    labels = result.source_side.astype(np.uint8)
    energy = evaluate_energy(model, labels)
    if abs(result.flow - energy) > 1e-9 * max(1.0, abs(energy)):
        raise RuntimeError("cut value does not match the evaluated energy")
    return labels, energy


@dataclass
class CrfFusionResult:
    labels: LabelMap
    energy: float
    n_uncertain: int
    model: CrfModel | None = None


def fuse_crf(vol: Volume, atlas_labels, prior: Volume, likelihood: np.ndarray,
             params: CrfParams | None = None, keep_model: bool = False) -> CrfFusionResult:
    """Fuse transferred atlas labels: unanimous voxels pass through, the rest
    are labeled by the exact energy minimum.

    ``likelihood`` holds one (p0, p1) row per uncertain voxel in C scan
    order.
    """
    atlas_labels = list(atlas_labels)
    mask = uncertainty_mask(atlas_labels)
    base = majority_vote(atlas_labels)
    n_uncertain = int(mask.data.sum())
    if n_uncertain == 0:
        return CrfFusionResult(labels=base, energy=0.0, n_uncertain=0)
    model = build_energy(likelihood, prior, vol, mask, base, params)
    node_labels, energy = min_cut(model)
    fused = base.data.copy()
    fused[model.mask] = node_labels
    out = LabelMap(fused, vol.spacing, vol.origin)
    return CrfFusionResult(labels=out, energy=energy, n_uncertain=n_uncertain,
                           model=model if keep_model else None)
