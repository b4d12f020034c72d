"""Optimal slot-to-slot frame alignment.

Predicted slots are matched to target slots by solving a square
assignment problem. The solver is Jonker-Volgenant shortest augmenting
path with dual potentials, O(n^3). When several assignments share the
minimal total cost the lexicographically smallest one (viewed as the
row-to-column mapping array) is returned, so alignment is a pure
function of the cost matrix.

Alignment runs on plain numpy arrays, never on taped tensors, so no
gradient flows through the matching decision.
"""

from __future__ import annotations

import numpy as np

from slotworld.latents import DEPTH, PRES, WHERE


def pres_affinity(pred_pres: np.ndarray, target_pres: np.ndarray) -> np.ndarray:
    """Bernoulli agreement p^t (1-p)^(1-t), with the 0^0 = 1 convention."""
    p = np.asarray(pred_pres, dtype=np.float64)
    t = np.asarray(target_pres, dtype=np.float64)
    return p**t * (1.0 - p) ** (1.0 - t)


def match_cost_parts(
    pred_pres: np.ndarray,
    pred_where: np.ndarray,
    target_pres: np.ndarray,
    target_where: np.ndarray,
    pred_depth: np.ndarray | None = None,
    target_depth: np.ndarray | None = None,
) -> np.ndarray:
    """Pairwise matching cost between predicted and target slots.

    Entry [i, j] couples predicted slot i with target slot j: an L1 gap
    on the where block, optionally an L1 gap on depth, minus the presence
    affinity. Leading batch axes broadcast; the result has shape
    (..., K_pred, K_target).
    """
    pw = np.asarray(pred_where, dtype=np.float64)
    tw = np.asarray(target_where, dtype=np.float64)
    cost = np.abs(pw[..., :, None, :] - tw[..., None, :, :]).sum(axis=-1)
    if (pred_depth is None) != (target_depth is None):
        raise ValueError("provide both depths or neither")
    if pred_depth is not None:
        pd = np.asarray(pred_depth, dtype=np.float64)
        td = np.asarray(target_depth, dtype=np.float64)
        cost += np.abs(pd[..., :, None] - td[..., None, :])
    cost -= pres_affinity(
        np.asarray(pred_pres)[..., :, None], np.asarray(target_pres)[..., None, :]
    )
    return cost


def match_cost(
    pred_frame: np.ndarray, target_frame: np.ndarray, include_depth: bool = False
) -> np.ndarray:
    """match_cost_parts on two (K, slot_dim) latent frames."""
    pred_frame = np.asarray(pred_frame)
    target_frame = np.asarray(target_frame)
    depths = (pred_frame[:, DEPTH], target_frame[:, DEPTH]) if include_depth else (None, None)
    return match_cost_parts(
        pred_frame[:, PRES],
        pred_frame[:, WHERE],
        target_frame[:, PRES],
        target_frame[:, WHERE],
        *depths,
    )


def _solve_duals(cost: list[list[float]], n: int) -> tuple[list[float], list[float], list[int]]:
    """Shortest-augmenting-path assignment. Returns (u, v, col_to_row), 1-based."""
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j] = row matched to column j, 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return u, v, p


def _kuhn_feasible(adj: list[list[int]], n: int, fixed_cols: list[int], start_row: int) -> bool:
    """Can rows start_row..n-1 be perfectly matched avoiding fixed_cols?"""
    col_match = [-1] * n
    for j in fixed_cols:
        col_match[j] = -2  # reserved by an earlier greedy choice

    def try_row(r: int, seen: list[bool]) -> bool:
        for j in adj[r]:
            if col_match[j] == -2 or seen[j]:
                continue
            seen[j] = True
            if col_match[j] == -1 or try_row(col_match[j], seen):
                col_match[j] = r
                return True
        return False

    for r in range(start_row, n):
        if not try_row(r, [False] * n):
            return False
    return True


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost row-to-column assignment of a square matrix.

    Returns perm with perm[i] = column assigned to row i. Among all
    minimizers, the lexicographically smallest perm is chosen: optimal
    assignments are exactly the perfect matchings of the zero-reduced-cost
    graph under the solved dual potentials, so the tie-break greedily takes
    the smallest feasible column per row within that graph.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian needs a square matrix, got {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rows = cost.tolist()
    u, v, p = _solve_duals(rows, n)

    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1

    # equality graph: edges whose reduced cost vanishes under the duals
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    adj: list[list[int]] = []
    unique = True
    for i in range(n):
        ui = u[i + 1]
        row = rows[i]
        cols = [j for j in range(n) if row[j] - ui - v[j + 1] <= tol]
        adj.append(cols)
        if len(cols) > 1:
            unique = False
    if unique:
        return perm

    chosen: list[int] = []
    for r in range(n):
        for j in adj[r]:
            if j in chosen:
                continue
            if _kuhn_feasible(adj, n, chosen + [j], r + 1):
                chosen.append(j)
                break
        else:
            # duals admit no refinement here; keep the solver's column
            chosen.append(int(perm[r]))
    return np.asarray(chosen, dtype=np.int64)


def assignment_cost(cost: np.ndarray, perm: np.ndarray) -> float:
    cost = np.asarray(cost)
    return float(cost[np.arange(len(perm)), perm].sum())


def apply_permutation(frame: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reorder slots so that slot i of the result is frame[perm[i]]."""
    perm = np.asarray(perm)
    n = frame.shape[0]
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm is not a permutation of the slot indices")
    return np.asarray(frame)[perm]


def align_frame(
    pred_frame: np.ndarray, target_frame: np.ndarray, include_depth: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Reorder target slots to face the predicted slots.

    Returns (aligned_target, perm) where aligned_target[i] is the target
    slot assigned to predicted slot i.
    """
    cost = match_cost(pred_frame, target_frame, include_depth=include_depth)
    perm = hungarian(cost)
    return apply_permutation(target_frame, perm), perm


def align_latents(
    pred_pres: np.ndarray,
    pred_where: np.ndarray,
    target_latents: np.ndarray,
    pred_depth: np.ndarray | None = None,
) -> np.ndarray:
    """Batch alignment over arbitrary leading axes.

    pred_pres (..., K), pred_where (..., K, 4), target_latents
    (..., K, slot_dim). Passing pred_depth (..., K) adds the depth term
    to the matching cost. Returns target_latents with slots reordered per
    frame to match the predictions.
    """
    target_latents = np.asarray(target_latents)
    depths = (pred_depth, target_latents[..., DEPTH]) if pred_depth is not None else (None, None)
    cost = match_cost_parts(
        pred_pres, pred_where, target_latents[..., PRES], target_latents[..., WHERE], *depths
    )
    lead = cost.shape[:-2]
    k = cost.shape[-1]
    flat_cost = cost.reshape(-1, k, k)
    flat_tgt = target_latents.reshape(-1, k, target_latents.shape[-1])
    out = np.empty_like(flat_tgt)
    for idx in range(flat_cost.shape[0]):
        perm = hungarian(flat_cost[idx])
        out[idx] = flat_tgt[idx][perm]
    return out.reshape(target_latents.shape)


def format_cost_matrix(cost: np.ndarray, perm: np.ndarray | None = None) -> str:
    """Printable view of a cost matrix, starring the assigned entries."""
    cost = np.asarray(cost)
    lines = []
    for i, row in enumerate(cost):
        cells = []
        for j, c in enumerate(row):
            mark = "*" if perm is not None and perm[i] == j else " "
            cells.append(f"{c:9.4f}{mark}")
        lines.append(" ".join(cells))
    return "\n".join(lines)
