"""Cross-graph video-language grounding with a compositional benchmark kit."""

__version__ = "0.1.0"
