"""Quality-evaluation loop: sweep (guidance scale, strength) cells, score each
by Frechet distance against the real set, and keep the per-class minimizer."""

from __future__ import annotations

import logging

import numpy as np

from .metrics import extract_features, fid, gaussian_stats
from .nets import GeneratorModel, PromptEmbedding
from .sampling import GenerationConfig, generate_dataset
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


def select_best(table: list[dict]) -> dict:
    """Argmin-score row; ties break toward smaller strength, then smaller
    guidance scale (exact comparisons on the stored values)."""
    if not table:
        raise ValueError("empty score table")
    return min(table, key=lambda r: (r["fid"], r["strength"], r["omega_cfg"]))


def grid_search(model: GeneratorModel, v: PromptEmbedding, real_images,
                grid: list[tuple[float, float]], n_per_cell: int,
                sched: NoiseSchedule, seed: int = 0,
                extractor: str = "downsampled-pixels", probe=None,
                mode: str = "stochastic-paper", class_label: str = "class",
                variance_probes: int = 0,
                ) -> tuple[GenerationConfig, list[dict]]:
    """Evaluate every (omega_cfg, strength) cell by generating n_per_cell
    images image-oriented from the real set and scoring them against it.

    Returns the winning GenerationConfig plus the full score table. With
    variance_probes > 0 the winning cell is re-scored that many times under
    fresh seeds and the spread is attached to the returned rows.
    """
    if not grid:
        raise ValueError("empty grid")
    real_images = np.asarray(real_images)
    if real_images.shape[0] == 0:
        raise ValueError("empty real image set")
    real_stats = gaussian_stats(extract_features(real_images, extractor, probe))

    def score_cell(omega, strength, cell_seed):
        cfg = GenerationConfig(omega_cfg=omega, strength=strength,
                               mode=mode, seed=cell_seed)
        images, _ = generate_dataset(model, v, real_images, sched, cfg,
                                     n=n_per_cell, class_label=class_label)
        gen_stats = gaussian_stats(extract_features(images, extractor, probe))
        return fid(real_stats, gen_stats)

    table = []
    for idx, (omega, strength) in enumerate(grid):
        cell_seed = int(np.random.SeedSequence(seed, spawn_key=(idx,)
                                               ).generate_state(1)[0])
        table.append({"class": class_label, "omega_cfg": float(omega),
                      "strength": float(strength),
                      "fid": score_cell(omega, strength, cell_seed),
                      "n": n_per_cell, "seed": cell_seed})
    best = select_best(table)
    if variance_probes > 0:
        rescores = [score_cell(best["omega_cfg"], best["strength"],
                               int(np.random.SeedSequence(seed, spawn_key=(10_000 + k,)
                                                          ).generate_state(1)[0]))
                    for k in range(variance_probes)]
        spread = float(np.std(rescores + [best["fid"]], ddof=1))
        for row in table:
            row["fid_std"] = spread
    best_cfg = GenerationConfig(omega_cfg=best["omega_cfg"],
                                strength=best["strength"], mode=mode,
                                seed=best["seed"])
    return best_cfg, table


def coordinate_descent(model: GeneratorModel, v: PromptEmbedding, real_images,
                       omegas: list[float], strengths: list[float],
                       n_per_cell: int, sched: NoiseSchedule, seed: int = 0,
                       sweeps: int = 2, **kwargs
                       ) -> tuple[GenerationConfig, list[dict]]:
    """Cheaper alternative to the exhaustive grid: alternate 1-D sweeps over
    strength and guidance scale, keeping the other coordinate fixed."""
    omega = omegas[len(omegas) // 2]
    strength = strengths[len(strengths) // 2]
    table: list[dict] = []
    best_cfg = None
    for sweep in range(sweeps):
        cells = [(omega, s) for s in strengths]
        best_cfg, rows = grid_search(model, v, real_images, cells, n_per_cell,
                                     sched, seed=seed + 101 * sweep, **kwargs)
        table.extend(rows)
        strength = best_cfg.strength
        cells = [(w, strength) for w in omegas]
        best_cfg, rows = grid_search(model, v, real_images, cells, n_per_cell,
                                     sched, seed=seed + 101 * sweep + 53, **kwargs)
        table.extend(rows)
        omega = best_cfg.omega_cfg
    return best_cfg, table


def record_best(registry: dict[str, GenerationConfig], class_label: str,
                best: GenerationConfig) -> dict[str, GenerationConfig]:
    """Map a class to exactly one tuned config, logging any supersede."""
    if class_label in registry:
        old = registry[class_label]
        log.info("superseding tuned config for %s: (omega=%s, s=%s) -> (omega=%s, s=%s)",
                 class_label, old.omega_cfg, old.strength,
                 best.omega_cfg, best.strength)
    registry[class_label] = best
    return registry
