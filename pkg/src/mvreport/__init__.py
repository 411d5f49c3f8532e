"""Two-stage multi-view contrastive pretraining and knowledge-guided
report generation, desk scale."""

__version__ = "0.1.0"
