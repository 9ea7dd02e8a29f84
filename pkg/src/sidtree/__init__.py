"""Value-guided decoding and sibling-relative policy optimization over semantic-ID tries."""

__version__ = "0.1.0"
