"""Shape modeling with a cuboid-editing agent followed by an edge-loop mesh-editing agent."""

__version__ = "0.1.0"
