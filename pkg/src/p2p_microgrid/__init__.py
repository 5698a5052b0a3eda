"""P2P Microgrid Sim - epidemic-protocol control of microgrids."""

__version__ = "0.1.0"
