"""Context-gated heatmap puck localization with rink-space evaluation."""

__version__ = "0.1.0"
