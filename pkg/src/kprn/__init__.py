"""Ground referring expressions to box proposals without box-level labels,
learning from query reconstruction and word-vector category priors."""

__version__ = "0.1.0"
