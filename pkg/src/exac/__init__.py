"""Desk-scale experiments-as-code pipeline.

Subpackages are imported lazily by the modules that need them; importing
`exac` itself stays cheap so the CLI and the service start fast.
"""

__version__ = "0.1.0"
