"""Out-of-candidate rectification: OC detection, group split, rectification loss and a toy training harness."""

__version__ = "0.1.0"
