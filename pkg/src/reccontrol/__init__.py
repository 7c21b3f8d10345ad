"""Desk-scale control stack for a renewable energy community.

Digital twin, telemetry pipeline, MADDPG controller with a fail-safe
supervisor, EV data gateway and KPI evaluation, all runnable offline.
"""

__version__ = "0.1.0"
