"""White-box adversarial question generation and evaluation for TableQA."""

__version__ = "0.1.0"
