"""Command-line interface package."""

from .application import WanBenchApp, dispatch

__all__ = ['WanBenchApp', 'dispatch']
