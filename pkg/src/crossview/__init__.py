"""Cross-view embedding alignment: pool directional ground embeddings, train a
satellite adapter + projection head against them with queue-augmented
InfoNCE, and classify zero-shot with prompt embeddings."""

__version__ = "0.1.0"
