"""Deformable bi-level routing attention backbone on a self-contained
differentiable tensor core, with cost analysis, a service, and a CLI."""

__version__ = "0.1.0"
