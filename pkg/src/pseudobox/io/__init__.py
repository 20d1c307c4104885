"""File formats, synthetic scenes and configuration."""
