"""Desk-scale unified multimodal model lab.

A two-expert transformer (understanding + generation parameters, shared joint
attention) trained on a procedural shape world: flow-matching image generation,
then post-training that adds caption and feature supervision computed from the
noised generative stream. Everything is CPU-sized and deterministic so the
gradient-routing, masking, and leakage claims can be checked exactly.
"""

__version__ = "0.1.0"
