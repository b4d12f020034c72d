"""Slot-token video dynamics lab.

A small, self-contained stack for studying object-level next-step
prediction on a bouncing-balls world: an exact simulator, a rasterizer,
object latents with oracle and blob encoders, optimal-assignment frame
alignment, a numpy-backed reverse-mode autodiff engine, a block-causal
slot transformer, training objectives, and rollout evaluation.
"""

from slotworld import align, dynamics, evaluate, latents, objective, render, sim, tensor

__all__ = [
    "align",
    "dynamics",
    "evaluate",
    "latents",
    "objective",
    "render",
    "sim",
    "tensor",
]

__version__ = "0.1.0"
